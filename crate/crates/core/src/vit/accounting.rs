//! Closed-form parameter and FLOP counts from geometry alone.

use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use crate::regimes::Regime;

/// Hidden width of the two-layer MLP head.
pub const MLP2_HIDDEN: usize = 128;

/// Which groups a regime trains, with the sizes that determine their count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunedSpec {
    pub regime: Regime,
    pub n_prompts: usize,
    pub proto_dim: usize,
    pub n_classes: usize,
}

impl TunedSpec {
    pub fn vptm(n_prompts: usize, proto_dim: usize, n_classes: usize) -> Self {
        TunedSpec {
            regime: Regime::Vptm,
            n_prompts,
            proto_dim,
            n_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub tuned: usize,
    /// `100 * tuned / total`.
    pub ratio_percent: f64,
}

/// Every tensor of the pretrained backbone, vocabulary head included.
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.hidden_dim;
    let m = cfg.mlp_dim();
    let embed = cfg.patch_dim() * d + d + (cfg.num_patches() + 1) * d + 2 * d;
    let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
    let head = 2 * d + d * cfg.vocab_size + cfg.vocab_size;
    embed + cfg.depth * block + head
}

/// Parameters added on top of the backbone for a regime (prompts and head).
pub fn added_param_count(cfg: &BackboneConfig, spec: &TunedSpec) -> usize {
    let d = cfg.hidden_dim;
    let (np, t, nc) = (spec.n_prompts, spec.proto_dim, spec.n_classes);
    match spec.regime {
        Regime::Vptm => np * d + d * t + t + nc * t,
        Regime::VptShallow | Regime::Mlp1 => np * d + d * nc + nc,
        Regime::Mlp2 => np * d + d * MLP2_HIDDEN + MLP2_HIDDEN + MLP2_HIDDEN * nc + nc,
        Regime::LinearProbe | Regime::Finetune => d * nc + nc,
    }
}

pub fn count_params(cfg: &BackboneConfig, spec: &TunedSpec) -> ParamCount {
    let added = added_param_count(cfg, spec);
    let total = backbone_param_count(cfg) + added;
    let tuned = match spec.regime {
        Regime::Finetune => total,
        _ => added,
    };
    ParamCount {
        total,
        tuned,
        ratio_percent: 100.0 * tuned as f64 / total as f64,
    }
}

/// Forward cost of one image with `seq_len` tokens, in GFLOPs.
///
/// One multiply-add is one FLOP. Counted: patch projection, per block the
/// QKV / output / MLP projections (`12 n d^2` with ratio 4), the two
/// attention products (`2 n^2 d`), and one op per element for layer norms,
/// softmax, GELU and residual adds; plus a single-token vocabulary readout.
pub fn estimate_flops(cfg: &BackboneConfig, seq_len: usize) -> f64 {
    let n = seq_len as f64;
    let d = cfg.hidden_dim as f64;
    let m = cfg.mlp_dim() as f64;
    let heads = cfg.heads as f64;
    let patch = cfg.num_patches() as f64 * cfg.patch_dim() as f64 * d;
    let proj = n * d * 3.0 * d + n * d * d + 2.0 * n * d * m;
    let attn = 2.0 * n * n * d;
    let elementwise = 2.0 * n * d + heads * n * n + n * m + 2.0 * n * d;
    let block = proj + attn + elementwise;
    let head = n * d + d * cfg.vocab_size as f64;
    (patch + cfg.depth as f64 * block + head) / 1e9
}
