use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Regime;
use crate::autodiff::{Bound, Graph, NodeId, ParamSet, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::prompt::{
    assemble_sequence, mask_hidden, read_layout, write_layout, Layout, PromptState, PROMPT_PREFIX,
};
use crate::seed::SeedStream;
use crate::verbalizer::{argmax, mlp_head, project, similarity, MlpVariant, MLP2_HIDDEN};
use crate::vit::{count_params, estimate_flops, patchify, Backbone, BoundBackbone, ParamCount, TunedSpec, INIT_STD};

pub const REGIME_ENTRY: &str = "prompt.meta.regime";

/// What a regime trains and how its head is shaped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub layout: Layout,
    pub n_prompts: usize,
    pub proto_dim: usize,
    pub n_classes: usize,
}

impl RegimeSpec {
    pub fn new(regime: Regime, n_classes: usize) -> Self {
        RegimeSpec {
            regime,
            layout: Layout::default(),
            n_prompts: 0,
            proto_dim: 0,
            n_classes,
        }
    }

    pub fn vptm(layout: Layout, n_prompts: usize, proto_dim: usize, n_classes: usize) -> Self {
        RegimeSpec {
            regime: Regime::Vptm,
            layout,
            n_prompts,
            proto_dim,
            n_classes,
        }
    }

    pub fn with_prompts(mut self, n_prompts: usize) -> Self {
        self.n_prompts = n_prompts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!(
                "{} classes; at least two are needed",
                self.n_classes
            )));
        }
        match self.regime {
            Regime::Vptm if self.proto_dim == 0 => {
                Err(Error::invalid("prototype dimension must be positive"))
            }
            Regime::Finetune | Regime::LinearProbe if self.n_prompts > 0 => Err(Error::invalid(
                format!("{} takes no prompts", self.regime),
            )),
            _ => Ok(()),
        }
    }

    pub fn tuned_spec(&self) -> TunedSpec {
        TunedSpec {
            regime: self.regime,
            n_prompts: self.n_prompts,
            proto_dim: if self.regime == Regime::Vptm { self.proto_dim } else { 0 },
            n_classes: self.n_classes,
        }
    }

    /// Input length: `[CLS]`, patches, prompts, plus `[MASK]` for heads on it.
    pub fn seq_len(&self, n_patches: usize) -> usize {
        1 + n_patches + self.n_prompts + usize::from(self.regime.reads_mask())
    }
}

/// Backbone plus everything a regime adds, with the freeze mask installed.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedModel {
    pub spec: RegimeSpec,
    pub backbone: Backbone,
    /// Prompts and head tensors; always trainable.
    pub head: ParamSet,
}

fn head_layout(spec: &RegimeSpec, d: usize) -> Vec<(&'static str, Vec<usize>, bool)> {
    let (np, t, nc) = (spec.n_prompts, spec.proto_dim, spec.n_classes);
    // (name, shape, random init); everything else starts at zero.
    let mut l = Vec::new();
    match spec.regime {
        Regime::Vptm => {
            l.push(("prompts", vec![np, d], false));
            l.push(("proj.weight", vec![d, t], true));
            l.push(("proj.bias", vec![1, t], false));
            l.push(("prototypes", vec![nc, t], false));
        }
        Regime::Mlp1 => {
            l.push(("prompts", vec![np, d], false));
            l.push(("head.weight", vec![d, nc], true));
            l.push(("head.bias", vec![1, nc], false));
        }
        Regime::Mlp2 => {
            l.push(("prompts", vec![np, d], false));
            l.push(("head.fc1.weight", vec![d, MLP2_HIDDEN], true));
            l.push(("head.fc1.bias", vec![1, MLP2_HIDDEN], false));
            l.push(("head.fc2.weight", vec![MLP2_HIDDEN, nc], false));
            l.push(("head.fc2.bias", vec![1, nc], false));
        }
        Regime::VptShallow => {
            l.push(("prompts", vec![np, d], true));
            l.push(("head.weight", vec![d, nc], true));
            l.push(("head.bias", vec![1, nc], false));
        }
        Regime::LinearProbe | Regime::Finetune => {
            l.push(("head.weight", vec![d, nc], true));
            l.push(("head.bias", vec![1, nc], false));
        }
    }
    l
}

/// Adds the regime's prompts and head to a backbone and freezes the
/// backbone unless the regime fine-tunes it.
pub fn attach_head<R: Rng + ?Sized>(mut backbone: Backbone, spec: RegimeSpec, rng: &mut R) -> Result<TunedModel> {
    spec.validate()?;
    backbone.set_frozen(spec.regime != Regime::Finetune);
    let d = backbone.config.hidden_dim;
    let mut head = ParamSet::new();
    for (name, shape, random) in head_layout(&spec, d) {
        let t = if random {
            Tensor::trunc_normal(&shape, INIT_STD, rng)
        } else {
            Tensor::zeros(&shape)
        };
        head.insert(name, t);
    }
    Ok(TunedModel { spec, backbone, head })
}

/// Graph handles for one forward pass.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub head: Bound,
}

/// Forward outputs: class logits, plus the prototype-space vector for VPTM.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub u: Option<NodeId>,
    pub hidden: NodeId,
}

impl TunedModel {
    pub fn from_prompt_state(mut backbone: Backbone, state: &PromptState) -> Result<Self> {
        backbone.set_frozen(true);
        let spec = RegimeSpec::vptm(state.layout, state.n_prompts(), state.proto_dim(), state.n_classes());
        spec.validate()?;
        Ok(TunedModel {
            spec,
            backbone,
            head: state.params.clone(),
        })
    }

    pub fn prompt_state(&self) -> Option<PromptState> {
        (self.spec.regime == Regime::Vptm).then(|| PromptState {
            layout: self.spec.layout,
            params: self.head.clone(),
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.head.trainable_count() + self.backbone.params.trainable_count()
    }

    pub fn frozen_tensor_count(&self) -> usize {
        self.backbone.params.iter().filter(|p| p.frozen).count()
    }

    pub fn param_count(&self) -> ParamCount {
        count_params(&self.backbone.config, &self.spec.tuned_spec())
    }

    pub fn seq_len(&self) -> usize {
        self.spec.seq_len(self.backbone.config.num_patches())
    }

    pub fn gflops(&self) -> f64 {
        estimate_flops(&self.backbone.config, self.seq_len())
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundModel> {
        Ok(BoundModel {
            backbone: self.backbone.bind(g)?,
            head: self.head.bind(g)?,
        })
    }

    pub fn patches(&self, image: &[f64]) -> Result<Tensor> {
        let c = &self.backbone.config;
        patchify(image, c.image_size, c.image_size, c.channels, c.patch_size)
    }

    /// Logits for one image given as patch rows.
    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, patches: &Tensor) -> Result<ForwardNodes> {
        let bb = &bound.backbone;
        let h = |name: &str| bound.head.id(name);
        let p = g.constant(patches.clone())?;
        let x = bb.embed_patches(g, p)?;
        let cls = bb.cls_embedding(g)?;
        let regime = self.spec.regime;
        if regime.reads_mask() {
            let mask = bb.mask_token()?;
            let (seq, mi) = assemble_sequence(g, self.spec.layout, cls, x, h("prompts")?, mask)?;
            let hidden = mask_hidden(g, bb, seq, mi)?;
            return match regime {
                Regime::Vptm => {
                    let u = project(g, hidden, h("proj.weight")?, h("proj.bias")?)?;
                    let logits = similarity(g, u, h("prototypes")?)?;
                    Ok(ForwardNodes { logits, u: Some(u), hidden })
                }
                Regime::Mlp1 => {
                    let logits = mlp_head(g, hidden, MlpVariant::One, &[h("head.weight")?, h("head.bias")?])?;
                    Ok(ForwardNodes { logits, u: None, hidden })
                }
                _ => {
                    let w = [h("head.fc1.weight")?, h("head.fc1.bias")?, h("head.fc2.weight")?, h("head.fc2.bias")?];
                    let logits = mlp_head(g, hidden, MlpVariant::Two, &w)?;
                    Ok(ForwardNodes { logits, u: None, hidden })
                }
            };
        }
        let seq = if regime == Regime::VptShallow {
            g.concat_rows(&[cls, h("prompts")?, x])?
        } else {
            g.concat_rows(&[cls, x])?
        };
        let enc = bb.encode(g, seq)?;
        let hidden = g.slice_rows(enc, 0, 1)?;
        let logits = g.affine(hidden, h("head.weight")?, h("head.bias")?)?;
        Ok(ForwardNodes { logits, u: None, hidden })
    }

    /// Class logits and, for VPTM, the prototype-space vector.
    pub fn infer(&self, patches: &Tensor) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let out = self.forward(&mut g, &bound, patches)?;
        Ok((
            g.value(out.logits).data().to_vec(),
            out.u.map(|u| g.value(u).data().to_vec()),
        ))
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, image: &[f64]) -> Result<usize> {
        Ok(argmax(&self.infer(&self.patches(image)?)?.0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.backbone.to_checkpoint();
        let code = Regime::ALL.iter().position(|r| *r == self.spec.regime).unwrap();
        ck.push(REGIME_ENTRY, Tensor::new(vec![1], vec![code as f64]).unwrap());
        match self.prompt_state() {
            Some(state) => state.to_checkpoint(&mut ck),
            None => {
                write_layout(&mut ck, self.spec.layout);
                ck.extend_with_prefix(PROMPT_PREFIX, &self.head);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let regime = ck
            .get(REGIME_ENTRY)
            .and_then(|t| t.data().first().copied())
            .and_then(|c| Regime::ALL.get(c as usize).copied())
            .ok_or_else(|| Error::UnknownName(REGIME_ENTRY.into()))?;
        let backbone = Backbone::from_checkpoint(&Checkpoint {
            entries: ck
                .entries
                .iter()
                .filter(|(n, _)| !n.starts_with(PROMPT_PREFIX))
                .cloned()
                .collect(),
        })?;
        let mut head = ParamSet::new();
        for (n, t) in &ck.entries {
            if let Some(rest) = n.strip_prefix(PROMPT_PREFIX) {
                if !rest.starts_with("meta.") {
                    head.insert(rest, t.clone());
                }
            }
        }
        let layout = read_layout(ck)?;
        let rows = |name: &str| head.get(name).map(|t| t.rows()).unwrap_or(0);
        let cols = |name: &str| head.get(name).map(|t| t.cols()).unwrap_or(0);
        let n_classes = match regime {
            Regime::Vptm => rows("prototypes"),
            Regime::Mlp2 => cols("head.fc2.bias"),
            _ => cols("head.bias"),
        };
        let spec = RegimeSpec {
            regime,
            layout,
            n_prompts: rows("prompts"),
            proto_dim: if regime == Regime::Vptm { cols("proj.bias") } else { 0 },
            n_classes,
        };
        let mut model = attach_head(backbone, spec, &mut SeedStream::new(0).rng("head"))?;
        for p in model.head.iter_mut() {
            let t = head
                .get(&p.name)
                .map_err(|_| Error::UnknownName(format!("{PROMPT_PREFIX}{}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("from_checkpoint", format!("`{}` has shape {:?}", p.name, t.shape())));
            }
            p.value = t.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::BackboneConfig;

    fn backbone() -> Backbone {
        Backbone::init(BackboneConfig::desk(), &mut SeedStream::new(1).rng("init")).unwrap()
    }

    #[test]
    fn linear_probe_desk_head() {
        let m = attach_head(backbone(), RegimeSpec::new(Regime::LinearProbe, 10), &mut SeedStream::new(2).rng("h")).unwrap();
        assert_eq!(m.trainable_count(), 650);
        assert_eq!(m.trainable_count(), m.param_count().tuned);
    }

    #[test]
    fn finetune_freezes_nothing() {
        let m = attach_head(backbone(), RegimeSpec::new(Regime::Finetune, 10), &mut SeedStream::new(2).rng("h")).unwrap();
        assert_eq!(m.frozen_tensor_count(), 0);
        assert_eq!(m.trainable_count(), m.param_count().total);
    }

    #[test]
    fn census_matches_accounting_for_every_regime() {
        for regime in Regime::ALL {
            let np = if matches!(regime, Regime::Finetune | Regime::LinearProbe) { 0 } else { 7 };
            let spec = RegimeSpec {
                regime,
                layout: Layout::Cmpx,
                n_prompts: np,
                proto_dim: 24,
                n_classes: 10,
            };
            let m = attach_head(backbone(), spec, &mut SeedStream::new(3).rng("h")).unwrap();
            assert_eq!(m.trainable_count(), m.param_count().tuned, "{regime}");
        }
    }

    #[test]
    fn vpt_shallow_count() {
        let spec = RegimeSpec::new(Regime::VptShallow, 10).with_prompts(5);
        let m = attach_head(backbone(), spec, &mut SeedStream::new(4).rng("h")).unwrap();
        assert_eq!(m.trainable_count(), 5 * 64 + 64 * 10 + 10);
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let mut rng = SeedStream::new(5).rng("h");
        assert!(attach_head(backbone(), RegimeSpec::new(Regime::LinearProbe, 10).with_prompts(3), &mut rng).is_err());
        assert!(attach_head(backbone(), RegimeSpec::vptm(Layout::Cxpm, 4, 0, 10), &mut rng).is_err());
        assert!(attach_head(backbone(), RegimeSpec::vptm(Layout::Cxpm, 4, 8, 1), &mut rng).is_err());
    }

    #[test]
    fn zero_prototypes_predict_class_zero() {
        let m = attach_head(backbone(), RegimeSpec::vptm(Layout::Cxpm, 3, 16, 10), &mut SeedStream::new(6).rng("h")).unwrap();
        let mut rng = SeedStream::new(7).rng("x");
        for _ in 0..3 {
            let img = Tensor::randn(&[32 * 32], 1.0, &mut rng);
            assert_eq!(m.predict(img.data()).unwrap(), 0);
        }
    }

    #[test]
    fn checkpoint_round_trip_every_regime() {
        for regime in Regime::ALL {
            let np = if matches!(regime, Regime::Finetune | Regime::LinearProbe) { 0 } else { 2 };
            let spec = RegimeSpec {
                regime,
                layout: Layout::Cpmx,
                n_prompts: np,
                proto_dim: if regime == Regime::Vptm { 8 } else { 0 },
                n_classes: 3,
            };
            let mut m = attach_head(backbone(), spec, &mut SeedStream::new(8).rng("h")).unwrap();
            m.backbone.round_to_f32();
            for p in m.head.iter_mut() {
                p.value = Tensor::full(p.value.shape(), 0.25);
            }
            let back = TunedModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
            assert_eq!(back.spec, m.spec, "{regime}");
            assert_eq!(back.head, m.head, "{regime}");
            assert_eq!(back.backbone.checkpoint_bytes(), m.backbone.checkpoint_bytes());
        }
    }
}
