//! Masked visual token modeling: block masks, the masked-token loss, and
//! the pretraining loop that produces the frozen backbone.

mod mask;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use mask::{
    count_window, default_min_block, sample_block_mask, sample_block_mask_with, Block, MaskPlan,
    DEFAULT_MASK_RATIO, MAX_ASPECT, MIN_ASPECT, RATIO_SLACK,
};

use crate::autodiff::{adamw_step, cosine_lr, AdamWConfig, Graph, NodeId, OptimizerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::SeedStream;
use crate::tokenizer::{tokenize_image, Codebook};
use crate::vit::{patchify, Backbone, BackboneConfig, BoundBackbone};

/// Mean over masked patches of `-log p(target | masked input)`.
///
/// `targets` holds one token per patch; only masked ones enter the loss.
pub fn mvtm_loss(
    g: &mut Graph,
    backbone: &BoundBackbone,
    patches: NodeId,
    plan: &MaskPlan,
    targets: &[usize],
) -> Result<NodeId> {
    let n = backbone.config.num_patches();
    if plan.num_patches() != n || targets.len() != n {
        return Err(Error::shape(
            "mvtm_loss",
            format!(
                "plan over {} patches, {} targets, backbone has {n}",
                plan.num_patches(),
                targets.len()
            ),
        ));
    }
    let masked = plan.indices();
    if masked.is_empty() {
        return Err(Error::invalid("mask plan has no masked patches"));
    }
    let k = backbone.config.vocab_size;
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("token {bad} outside vocabulary of {k}")));
    }
    let embedded = backbone.embed_masked(g, patches, &plan.masked)?;
    let cls = backbone.cls_embedding(g)?;
    let seq = g.concat_rows(&[cls, embedded])?;
    let hidden = backbone.encode(g, seq)?;
    let rows: Vec<usize> = masked.iter().map(|&i| i + 1).collect();
    let picked = g.embedding(hidden, &rows)?;
    let logits = backbone.vocab_logits(g, picked)?;
    let labels: Vec<usize> = masked.iter().map(|&i| targets[i]).collect();
    g.cross_entropy(logits, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_epochs: 5,
            mask_ratio: DEFAULT_MASK_RATIO,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub trace: Vec<TraceRow>,
}

/// Visual tokens of every image in the dataset.
pub fn tokenize_dataset(
    dataset: &Dataset,
    config: &BackboneConfig,
    codebook: &Codebook,
    extractor: Option<&Backbone>,
) -> Result<Vec<Vec<usize>>> {
    (0..dataset.len())
        .map(|i| tokenize_image(&dataset.image(i), config, codebook, extractor))
        .collect()
}

/// Initializes a backbone from the `init` substream and pretrains it.
pub fn pretrain(
    config: BackboneConfig,
    dataset: &Dataset,
    codebook: &Codebook,
    extractor: Option<&Backbone>,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if codebook.len() != config.vocab_size {
        return Err(Error::invalid(format!(
            "codebook has {} codes, vocabulary head expects {}",
            codebook.len(),
            config.vocab_size
        )));
    }
    let targets = tokenize_dataset(dataset, &config, codebook, extractor)?;
    let seeds = SeedStream::new(opts.seed);
    let mut backbone = Backbone::init(config, &mut seeds.rng("init"))?;
    backbone.round_to_f32();
    let trace = pretrain_backbone(&mut backbone, dataset, &targets, opts)?;
    Ok(PretrainOutcome { backbone, trace })
}

/// Trains every backbone tensor on the masked-token objective with AdamW and
/// a warmup-then-cosine schedule. Each image gets a fresh mask every epoch.
/// Weights are rounded to checkpoint precision at the end.
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    dataset: &Dataset,
    targets: &[Vec<usize>],
    opts: &PretrainOptions,
) -> Result<Vec<TraceRow>> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    if targets.len() != dataset.len() {
        return Err(Error::invalid("one token sequence per image expected"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let cfg = backbone.config;
    if (dataset.height, dataset.width, dataset.channels)
        != (cfg.image_size, cfg.image_size, cfg.channels)
    {
        return Err(Error::invalid(format!(
            "dataset images {}x{}x{} do not match backbone input {}x{}x{}",
            dataset.height, dataset.width, dataset.channels, cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    let patches: Vec<_> = (0..dataset.len())
        .map(|i| patchify(&dataset.image(i), cfg.image_size, cfg.image_size, cfg.channels, cfg.patch_size))
        .collect::<Result<_>>()?;
    let seeds = SeedStream::new(opts.seed);
    let mut shuffle_rng = seeds.rng("shuffle");
    let mut mask_rng = seeds.rng("mask");
    let steps_per_epoch = dataset.len().div_ceil(opts.batch_size);
    let total = opts.epochs * steps_per_epoch;
    let warmup = opts.warmup_epochs * steps_per_epoch;
    let mut state = OptimizerState::new(
        &backbone.params,
        AdamWConfig {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let (gh, gw) = cfg.grid();
    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(opts.batch_size) {
            let mut acc = backbone.params.zeros_like();
            let mut loss_sum = 0.0;
            for &i in batch {
                let plan = sample_block_mask(gh, gw, opts.mask_ratio, &mut mask_rng)?;
                let mut g = Graph::new();
                let bound = backbone.bind(&mut g)?;
                let p = g.constant(patches[i].clone())?;
                let loss = mvtm_loss(&mut g, &bound, p, &plan, &targets[i])
                    .map_err(|e| diverged(e, step))?;
                loss_sum += g.value(loss).item();
                let grads = g.backward(loss)?;
                bound.vars.accumulate(&grads, &mut acc);
            }
            let n = batch.len() as f64;
            let loss = loss_sum / n;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { step });
            }
            for a in acc.iter_mut() {
                a.scale_in_place(1.0 / n);
            }
            let lr = cosine_lr(step, total, warmup, opts.lr);
            adamw_step(&mut backbone.params, &acc, &mut state, lr)?;
            trace.push(TraceRow { step, lr, loss });
            step += 1;
        }
    }
    backbone.round_to_f32();
    Ok(trace)
}

fn diverged(e: Error, step: usize) -> Error {
    if e.is_numerical() {
        Error::DivergedLoss { step }
    } else {
        e
    }
}

/// `step,lr,loss` CSV.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "step,lr,loss")?;
    for r in rows {
        writeln!(f, "{},{:e},{:.10}", r.step, r.lr, r.loss)?;
    }
    Ok(())
}
