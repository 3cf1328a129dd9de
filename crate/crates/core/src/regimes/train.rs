use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{attach_head, RegimeSpec, TunedModel};
use crate::autodiff::{adamw_step, cosine_lr, AdamWConfig, Graph, OptimizerState, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mvtm::TraceRow;
use crate::prompt::PromptState;
use crate::seed::SeedStream;
use crate::verbalizer::{argmax, EmbeddingRow, RowKind};
use crate::vit::Backbone;

/// One recipe for every regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_epochs: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub steps: usize,
}

/// Accuracy plus accounting for one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub regime: String,
    pub accuracy: f64,
    /// Percent of all parameters that were trained.
    pub tuned_ratio: f64,
    pub gflops: f64,
    pub tuned_params: usize,
    pub total_params: usize,
    pub layout: String,
    pub n_prompts: usize,
    pub proto_dim: usize,
    pub n_classes: usize,
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
}

impl RunMetrics {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

fn check_dataset(model: &TunedModel, data: &Dataset) -> Result<()> {
    let c = &model.backbone.config;
    if (data.height, data.width, data.channels) != (c.image_size, c.image_size, c.channels) {
        return Err(Error::invalid(format!(
            "dataset images {}x{}x{} do not match backbone input {}x{}x{}",
            data.height, data.width, data.channels, c.image_size, c.image_size, c.channels
        )));
    }
    if data.n_classes != model.spec.n_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, head has {}",
            data.n_classes, model.spec.n_classes
        )));
    }
    Ok(())
}

fn all_patches(model: &TunedModel, data: &Dataset) -> Result<Vec<Tensor>> {
    (0..data.len()).map(|i| model.patches(&data.image(i))).collect()
}

/// Cross-entropy over the regime's logits with AdamW and warmup-cosine.
/// Frozen tensors are never touched; for VPTM this is the prototypical loss.
pub fn train_regime(model: &mut TunedModel, data: &Dataset, opts: &TrainOptions) -> Result<TrainReport> {
    model.spec.validate()?;
    check_dataset(model, data)?;
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let patches = all_patches(model, data)?;
    let seeds = SeedStream::new(opts.seed);
    let mut shuffle = seeds.rng("shuffle");
    let batch = opts.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch);
    let total = opts.epochs * steps_per_epoch;
    let warmup = opts.warmup_epochs * steps_per_epoch;
    let adam = AdamWConfig {
        lr: opts.lr,
        weight_decay: opts.weight_decay,
        ..AdamWConfig::default()
    };
    let mut head_state = OptimizerState::new(&model.head, adam);
    let tune_backbone = model.backbone.params.trainable_count() > 0;
    let mut backbone_state = OptimizerState::new(&model.backbone.params, adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(batch) {
            let mut head_acc = model.head.zeros_like();
            let mut backbone_acc = if tune_backbone {
                model.backbone.params.zeros_like()
            } else {
                Vec::new()
            };
            let mut loss_sum = 0.0;
            for &i in chunk {
                let mut g = Graph::new();
                let bound = model.bind(&mut g)?;
                let out = model
                    .forward(&mut g, &bound, &patches[i])
                    .and_then(|o| g.cross_entropy(o.logits, &[data.label(i)]))
                    .map_err(|e| if e.is_numerical() { Error::DivergedLoss { step } } else { e })?;
                loss_sum += g.value(out).item();
                let grads = g.backward(out)?;
                bound.head.accumulate(&grads, &mut head_acc);
                if tune_backbone {
                    bound.backbone.vars.accumulate(&grads, &mut backbone_acc);
                }
            }
            let n = chunk.len() as f64;
            let loss = loss_sum / n;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { step });
            }
            let lr = cosine_lr(step, total, warmup, opts.lr);
            for a in head_acc.iter_mut().chain(backbone_acc.iter_mut()) {
                a.scale_in_place(1.0 / n);
            }
            adamw_step(&mut model.head, &head_acc, &mut head_state, lr)?;
            if tune_backbone {
                adamw_step(&mut model.backbone.params, &backbone_acc, &mut backbone_state, lr)?;
            }
            trace.push(TraceRow { step, lr, loss });
            step += 1;
        }
    }
    Ok(TrainReport { trace, steps: step })
}

/// Predicted class of every image, in dataset order.
pub fn predictions(model: &TunedModel, data: &Dataset) -> Result<Vec<usize>> {
    check_dataset(model, data)?;
    (0..data.len())
        .map(|i| Ok(argmax(&model.infer(&model.patches(&data.image(i))?)?.0)))
        .collect()
}

/// Top-1 accuracy of predicted labels.
pub fn accuracy_of(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(model: &TunedModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    accuracy_of(&predictions(model, data)?, &data.labels)
}

/// Attaches the head, trains, evaluates and reports.
pub fn run_regime(
    backbone: &Backbone,
    spec: RegimeSpec,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOptions,
) -> Result<(TunedModel, RunMetrics, TrainReport)> {
    let seeds = SeedStream::new(opts.seed);
    let mut model = attach_head(backbone.clone(), spec, &mut seeds.rng("head"))?;
    let report = train_regime(&mut model, train, opts)?;
    let accuracy = evaluate(&model, test)?;
    let metrics = metrics_for(&model, accuracy, opts, &report);
    Ok((model, metrics, report))
}

pub fn metrics_for(model: &TunedModel, accuracy: f64, opts: &TrainOptions, report: &TrainReport) -> RunMetrics {
    let count = model.param_count();
    RunMetrics {
        regime: model.spec.regime.to_string(),
        accuracy,
        tuned_ratio: count.ratio_percent,
        gflops: model.gflops(),
        tuned_params: count.tuned,
        total_params: count.total,
        layout: model.spec.layout.to_string(),
        n_prompts: model.spec.n_prompts,
        proto_dim: model.spec.proto_dim,
        n_classes: model.spec.n_classes,
        epochs: opts.epochs,
        seed: opts.seed,
        final_loss: report.trace.last().map(|r| r.loss),
    }
}

/// Prompt tuning: trains only the prompt state on a frozen backbone.
pub fn prompt_tune(
    backbone: &Backbone,
    data: &Dataset,
    state: &PromptState,
    opts: &TrainOptions,
) -> Result<(PromptState, TrainReport)> {
    let mut model = TunedModel::from_prompt_state(backbone.clone(), state)?;
    let report = train_regime(&mut model, data, opts)?;
    Ok((model.prompt_state().expect("vptm model"), report))
}

/// Prototype rows followed by one projected vector per image.
pub fn embedding_rows(model: &TunedModel, data: &Dataset) -> Result<Vec<EmbeddingRow>> {
    let state = model
        .prompt_state()
        .ok_or_else(|| Error::invalid(format!("regime `{}` has no prototype space", model.spec.regime)))?;
    check_dataset(model, data)?;
    let protos = state.prototypes();
    let mut rows: Vec<EmbeddingRow> = (0..protos.rows())
        .map(|c| EmbeddingRow { kind: RowKind::Proto, class: c, values: protos.row(c).to_vec() })
        .collect();
    for i in 0..data.len() {
        let (_, u) = model.infer(&model.patches(&data.image(i))?)?;
        rows.push(EmbeddingRow {
            kind: RowKind::Sample,
            class: data.label(i),
            values: u.expect("vptm forward yields u"),
        });
    }
    Ok(rows)
}
