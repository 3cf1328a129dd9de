//! Finite-difference sweeps over every op and both training objectives.

use std::sync::Mutex;

use rand::Rng;
use vptm_core::autodiff::{check_gradients_detailed, Graph, NodeId, Tensor};
use vptm_core::mvtm::{mvtm_loss, MaskPlan};
use vptm_core::prompt::{assemble_sequence, mask_hidden, Layout};
use vptm_core::seed::{Rng as SeedRng, SeedStream};
use vptm_core::verbalizer::{project, vptm_loss};
use vptm_core::vit::{patchify, Backbone, BackboneConfig};
use vptm_core::Result;

pub const STEP: f64 = 1e-5;
/// Losses through the whole encoder have gradient components near 1e-8
/// whose central differences at 1e-5 carry ~1e-12 of rounding noise.
const DEEP_STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const CONFIGS: u64 = 20;

static WORST: Mutex<f64> = Mutex::new(0.0);

/// Largest relative error recorded by any sweep in this process.
#[allow(dead_code)]
pub fn worst_seen() -> f64 {
    *WORST.lock().unwrap()
}

fn record(err: f64) {
    let mut w = WORST.lock().unwrap();
    *w = w.max(err);
}

pub fn rng(case: u64, name: &str) -> SeedRng {
    SeedStream::new(case).rng(name)
}

/// `sum(out * R)` with a fixed random `R`, so every output coordinate
/// carries a distinct, non-degenerate weight.
pub fn weighted(g: &mut Graph, out: NodeId, case: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng(case, "weights")))?;
    let m = g.mul(out, r)?;
    g.sum(m)
}

fn dims(r: &mut SeedRng) -> (usize, usize) {
    (r.gen_range(1..5), r.gen_range(1..6))
}

fn sweep<F>(name: &str, build: F) -> f64
where
    F: Fn(u64) -> (Tensor, Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>),
{
    sweep_at(name, STEP, build)
}

/// Runs `build` on `CONFIGS` cases and returns the worst error.
fn sweep_at<F>(name: &str, step: f64, build: F) -> f64
where
    F: Fn(u64) -> (Tensor, Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>),
{
    let mut worst: f64 = 0.0;
    for case in 0..CONFIGS {
        let (point, f) = build(case);
        let c = check_gradients_detailed(|g, x| f(g, x), &point, step).unwrap();
        let (i, err) = (c.worst_index, c.max_rel_error);
        assert!(
            err < TOL,
            "{name} case {case}: relative error {err:e} at {i} (tape {:e}, differences {:e})",
            c.analytic.data()[i],
            c.numeric.data()[i]
        );
        worst = worst.max(err);
        record(err);
    }
    println!("{name:<24} worst relative error {worst:.2e} over {CONFIGS} cases");
    worst
}

type Loss = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

pub fn randn(shape: &[usize], case: u64, name: &str) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(case, name))
}

pub fn matmul_both_operands() {
    sweep("matmul lhs", |case| {
        let mut r = rng(case, "shape");
        let (m, k) = dims(&mut r);
        let n = r.gen_range(1..5);
        let b = randn(&[k, n], case, "b");
        let f: Loss = Box::new(move |g, x| {
            let b = g.constant(b.clone())?;
            let y = g.matmul(x, b)?;
            weighted(g, y, case)
        });
        (randn(&[m, k], case, "a"), f)
    });
    sweep("matmul rhs", |case| {
        let mut r = rng(case, "shape");
        let (m, k) = dims(&mut r);
        let n = r.gen_range(1..5);
        let a = randn(&[m, k], case, "a");
        let f: Loss = Box::new(move |g, x| {
            let a = g.constant(a.clone())?;
            let y = g.matmul(a, x)?;
            weighted(g, y, case)
        });
        (randn(&[k, n], case, "b"), f)
    });
}

pub fn elementwise_binary_with_broadcast() {
    for (op, broadcast) in [("add", false), ("add", true), ("mul", false), ("mul", true)] {
        for wrt_rhs in [false, true] {
            let label = format!("{op}{} wrt {}", if broadcast { " (row)" } else { "" }, if wrt_rhs { "rhs" } else { "lhs" });
            sweep(&label, |case| {
                let mut r = rng(case, "shape");
                let (m, n) = dims(&mut r);
                let rhs_shape = if broadcast { vec![1, n] } else { vec![m, n] };
                let lhs = randn(&[m, n], case, "lhs");
                let rhs = randn(&rhs_shape, case, "rhs");
                let other = if wrt_rhs { lhs.clone() } else { rhs.clone() };
                let point = if wrt_rhs { rhs } else { lhs };
                let f: Loss = Box::new(move |g, x| {
                    let c = g.constant(other.clone())?;
                    let (a, b) = if wrt_rhs { (c, x) } else { (x, c) };
                    let y = if op == "add" { g.add(a, b)? } else { g.mul(a, b)? };
                    weighted(g, y, case)
                });
                (point, f)
            });
        }
    }
}

pub fn unary_ops() {
    type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;
    let ops: [(&str, Unary); 7] = [
        ("scale", |g, x| g.scale(x, -1.7)),
        ("transpose", |g, x| g.transpose(x)),
        ("gelu", |g, x| g.gelu(x)),
        ("layer_norm", |g, x| g.layer_norm(x)),
        ("softmax", |g, x| g.softmax(x)),
        ("mean", |g, x| g.mean(x)),
        ("sum", |g, x| g.sum(x)),
    ];
    for (name, op) in ops {
        sweep(name, |case| {
            let mut r = rng(case, "shape");
            let (m, n) = dims(&mut r);
            // Two-wide rows saturate layer norm (outputs are +-1, gradient ~eps).
            let n = if name == "layer_norm" { n.max(3) } else { n };
            let f: Loss = Box::new(move |g, x| {
                let y = op(g, x)?;
                weighted(g, y, case)
            });
            (randn(&[m, n], case, "x"), f)
        });
    }
    sweep("log", |case| {
        let (m, n) = dims(&mut rng(case, "shape"));
        let f: Loss = Box::new(move |g, x| {
            let y = g.log(x)?;
            weighted(g, y, case)
        });
        (Tensor::uniform(&[m, n], 0.5, 2.0, &mut rng(case, "x")), f)
    });
}

pub fn structural_ops() {
    sweep("reshape", |case| {
        let (m, n) = dims(&mut rng(case, "shape"));
        let f: Loss = Box::new(move |g, x| {
            let y = g.reshape(x, &[n, m])?;
            weighted(g, y, case)
        });
        (randn(&[m, n], case, "x"), f)
    });
    sweep("concat_rows", |case| {
        let mut r = rng(case, "shape");
        let (m, n) = dims(&mut r);
        let above = randn(&[r.gen_range(1..4), n], case, "above");
        let below = randn(&[r.gen_range(0..3), n], case, "below");
        let f: Loss = Box::new(move |g, x| {
            let a = g.constant(above.clone())?;
            let b = g.constant(below.clone())?;
            let y = g.concat_rows(&[a, x, b])?;
            weighted(g, y, case)
        });
        (randn(&[m, n], case, "x"), f)
    });
    sweep("slice_rows", |case| {
        let mut r = rng(case, "shape");
        let (m, n) = dims(&mut r);
        let m = m + 1;
        let start = r.gen_range(0..m);
        let end = r.gen_range(start + 1..=m);
        let f: Loss = Box::new(move |g, x| {
            let y = g.slice_rows(x, start, end)?;
            weighted(g, y, case)
        });
        (randn(&[m, n], case, "x"), f)
    });
    sweep("embedding", |case| {
        let mut r = rng(case, "shape");
        let (v, d) = dims(&mut r);
        let idx: Vec<usize> = (0..r.gen_range(1..7)).map(|_| r.gen_range(0..v)).collect();
        let f: Loss = Box::new(move |g, x| {
            let y = g.embedding(x, &idx)?;
            weighted(g, y, case)
        });
        (randn(&[v, d], case, "table"), f)
    });
    sweep("dropout (fixed mask)", |case| {
        let (m, n) = dims(&mut rng(case, "shape"));
        let f: Loss = Box::new(move |g, x| {
            let y = g.dropout(x, 0.3, &mut rng(case, "dropout"))?;
            weighted(g, y, case)
        });
        (randn(&[m, n], case, "x"), f)
    });
}

pub fn attention_routes() {
    for fused in [true, false] {
        let name = if fused { "attention (fused)" } else { "attention (composite)" };
        sweep(name, |case| {
            let mut r = rng(case, "shape");
            let heads = r.gen_range(1..3);
            let d = heads * r.gen_range(1..4);
            let n = r.gen_range(1..6);
            let f: Loss = Box::new(move |g, x| {
                let y = if fused { g.attention(x, heads)? } else { g.attention_composite(x, heads)? };
                weighted(g, y, case)
            });
            (randn(&[n, 3 * d], case, "qkv"), f)
        });
    }
}

pub fn cross_entropy_wrt_logits() {
    sweep("cross_entropy", |case| {
        let mut r = rng(case, "shape");
        let rows = r.gen_range(1..5);
        let classes = r.gen_range(2..7);
        let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..classes)).collect();
        let f: Loss = Box::new(move |g, x| g.cross_entropy(x, &labels));
        (Tensor::randn(&[rows, classes], 2.0, &mut rng(case, "logits")), f)
    });
}

fn tiny_backbone(case: u64) -> Backbone {
    let mut r = rng(case, "geometry");
    let heads = r.gen_range(1..3);
    let cfg = BackboneConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        hidden_dim: 4 * heads,
        depth: r.gen_range(1..3),
        heads,
        mlp_ratio: 2,
        vocab_size: 5,
    };
    let mut b = Backbone::init(cfg, &mut rng(case, "init")).unwrap();
    // Larger weights than the 0.02 init so every path carries signal.
    for p in b.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng(case, &p.name).gen_range(-0.3..0.3);
        }
    }
    b
}

fn patches_of(case: u64) -> Tensor {
    let img: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.37 + case as f64).sin()).collect();
    patchify(&img, 8, 8, 1, 4).unwrap()
}

fn masked_token_loss(g: &mut Graph, b: &Backbone, patches: NodeId, case: u64) -> Result<NodeId> {
    let bound = b.bind(g)?;
    let mut r = rng(case, "plan");
    let plan = MaskPlan::from_indices(2, 2, &[r.gen_range(0..2), 2 + r.gen_range(0..2)])?;
    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
    mvtm_loss(g, &bound, patches, &plan, &targets)
}

struct PromptSetup {
    backbone: Backbone,
    layout: Layout,
    patches: Tensor,
    prompts: Tensor,
    weight: Tensor,
    bias: Tensor,
    prototypes: Tensor,
    labels: Vec<usize>,
}

fn prompt_setup(case: u64) -> PromptSetup {
    let backbone = tiny_backbone(case);
    let d = backbone.config.hidden_dim;
    let mut r = rng(case, "prompt");
    let (np, t, nc) = (r.gen_range(1..4), r.gen_range(2..5), r.gen_range(2..5));
    PromptSetup {
        layout: Layout::ALL[case as usize % 4],
        patches: patches_of(case),
        prompts: randn(&[np, d], case, "prompts"),
        weight: Tensor::randn(&[d, t], 0.5, &mut rng(case, "w")),
        bias: randn(&[1, t], case, "bias"),
        prototypes: randn(&[nc, t], case, "protos"),
        labels: vec![r.gen_range(0..nc)],
        backbone,
    }
}

#[derive(Clone, Copy)]
enum PromptLeaf {
    Prompts,
    Weight,
    Prototypes,
}

fn prompt_loss(g: &mut Graph, s: &PromptSetup, leaf: PromptLeaf, x: NodeId) -> Result<NodeId> {
    let bound = s.backbone.bind(g)?;
    let p = g.constant(s.patches.clone())?;
    let e = bound.embed_patches(g, p)?;
    let cls = bound.cls_embedding(g)?;
    let mask = bound.mask_token()?;
    let pick = |g: &mut Graph, which: PromptLeaf, t: &Tensor| {
        if matches!((leaf, which), (PromptLeaf::Prompts, PromptLeaf::Prompts) | (PromptLeaf::Weight, PromptLeaf::Weight) | (PromptLeaf::Prototypes, PromptLeaf::Prototypes)) {
            Ok(x)
        } else {
            g.constant(t.clone())
        }
    };
    let prompts = pick(g, PromptLeaf::Prompts, &s.prompts)?;
    let w = pick(g, PromptLeaf::Weight, &s.weight)?;
    let c = pick(g, PromptLeaf::Prototypes, &s.prototypes)?;
    let (seq, mi) = assemble_sequence(g, s.layout, cls, e, prompts, mask)?;
    let h = mask_hidden(g, &bound, seq, mi)?;
    let b = g.constant(s.bias.clone())?;
    let u = project(g, h, w, b)?;
    vptm_loss(g, u, &s.labels, c)
}

pub fn prototypical_loss_end_to_end() {
    for (name, leaf) in [
        ("vptm loss wrt prompts", PromptLeaf::Prompts),
        ("vptm loss wrt projection", PromptLeaf::Weight),
        ("vptm loss wrt prototypes", PromptLeaf::Prototypes),
    ] {
        sweep_at(name, DEEP_STEP, |case| {
            let s = prompt_setup(case);
            let point = match leaf {
                PromptLeaf::Prompts => s.prompts.clone(),
                PromptLeaf::Weight => s.weight.clone(),
                PromptLeaf::Prototypes => s.prototypes.clone(),
            };
            let f: Loss = Box::new(move |g, x| prompt_loss(g, &s, leaf, x));
            (point, f)
        });
    }
}

pub fn masked_token_loss_wrt_input() {
    sweep_at("mvtm loss wrt patches", DEEP_STEP, |case| {
        let b = tiny_backbone(case);
        let f: Loss = Box::new(move |g, x| masked_token_loss(g, &b, x, case));
        (patches_of(case), f)
    });
}

/// Backbone weights are not graph inputs, so their check perturbs the
/// parameter set directly and rebuilds the graph for each evaluation.
pub fn masked_token_loss_wrt_backbone_weights() {
    let mut worst: f64 = 0.0;
    for case in 0..CONFIGS {
        let b = tiny_backbone(case);
        let loss_at = |b: &Backbone| {
            let mut g = Graph::new();
            let p = g.constant(patches_of(case)).unwrap();
            let l = masked_token_loss(&mut g, b, p, case).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let bound = b.bind(&mut g).unwrap();
        let p = g.constant(patches_of(case)).unwrap();
        let mut r = rng(case, "plan");
        let plan = MaskPlan::from_indices(2, 2, &[r.gen_range(0..2), 2 + r.gen_range(0..2)]).unwrap();
        let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
        let l = mvtm_loss(&mut g, &bound, p, &plan, &targets).unwrap();
        let grads = g.backward(l).unwrap();
        let mut pick = rng(case, "coords");
        for (i, param) in b.params.iter().enumerate() {
            let analytic = grads.wrt(&g, bound.vars.ids()[i]);
            for _ in 0..3 {
                let j = pick.gen_range(0..param.value.numel());
                let mut plus = b.clone();
                plus.params.at_mut(i).value.data_mut()[j] += STEP;
                let mut minus = b.clone();
                minus.params.at_mut(i).value.data_mut()[j] -= STEP;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                // Unused mask-token rows and similar dead paths are exactly zero.
                if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
                    continue;
                }
                assert!(err < TOL, "case {case} {}[{j}]: {a} vs {numeric}", param.name);
                worst = worst.max(err);
                record(err);
            }
        }
    }
    println!("mvtm loss wrt weights   worst relative error {worst:.2e} over {CONFIGS} cases");
}
