//! Small training runs with outcomes fixed by construction: memorizing one
//! image, separable toy sets, and chance-level bookkeeping.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use vptm_core::autodiff::{adamw_step, AdamWConfig, Graph, OptimizerState, ParamSet, Tensor};
use vptm_core::data::{make_synthetic, Dataset, SyntheticSpec};
use vptm_core::mvtm::{pretrain, PretrainOptions};
use vptm_core::prompt::{Layout, PromptState};
use vptm_core::regimes::{
    accuracy_of, evaluate, prompt_tune, run_regime, Regime, RegimeSpec, TrainOptions, TunedModel,
};
use vptm_core::seed::SeedStream;
use vptm_core::tokenizer::{codebook_from_dataset, CodebookMode};
use vptm_core::verbalizer::{argmax, mlp_head, MlpVariant};
use vptm_core::vit::{count_params, Backbone, BackboneConfig};

/// Fixed-phase gratings with light noise: each class is one texture, so the
/// classes are separable by construction.
fn clean_set(classes: usize, per_class: usize, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec {
        noise_std: 10.0,
        phase_jitter: 0.0,
        ..SyntheticSpec::textures(classes, per_class, seed)
    })
    .unwrap()
}

/// Desk backbone after a short masked-token pretraining on the same
/// textures, shared by every test in this binary.
fn pretrained_desk() -> &'static Backbone {
    static BACKBONE: OnceLock<Backbone> = OnceLock::new();
    BACKBONE.get_or_init(|| {
        let corpus = clean_set(4, 40, 9);
        let cfg = BackboneConfig::desk();
        let cb = codebook_from_dataset(&corpus, &cfg, CodebookMode::Pixel, 64, None, 20_000, 1).unwrap();
        let opts = PretrainOptions {
            epochs: 10,
            batch_size: 16,
            seed: 0,
            ..PretrainOptions::default()
        };
        pretrain(cfg, &corpus, &cb, None, &opts).unwrap().backbone
    })
}

fn desk_backbone(seed: u64) -> Backbone {
    let mut b = Backbone::init(BackboneConfig::desk(), &mut SeedStream::new(seed).rng("init")).unwrap();
    b.round_to_f32();
    b
}

#[test]
fn one_image_is_memorized() {
    let image = make_synthetic(&SyntheticSpec::textures(2, 1, 3)).unwrap().subset(&[0]);
    let cfg = BackboneConfig {
        vocab_size: 4,
        ..BackboneConfig::desk()
    };
    let cb = codebook_from_dataset(&image, &cfg, CodebookMode::Pixel, 4, None, 1000, 0).unwrap();
    let opts = PretrainOptions {
        epochs: 200,
        batch_size: 1,
        warmup_epochs: 0,
        seed: 0,
        ..PretrainOptions::default()
    };
    let out = pretrain(cfg, &image, &cb, None, &opts).unwrap();
    assert_eq!(out.trace.len(), 200);
    let tail: f64 = out.trace[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < 0.1 * 4f64.ln(), "final losses average {tail}");
}

#[test]
fn prompt_tuning_separates_four_classes() {
    let train = clean_set(4, 8, 1);
    let test = clean_set(4, 8, 2);
    let backbone = pretrained_desk().clone();
    let before = backbone.checkpoint_bytes();
    let state = PromptState::init(Layout::Cxpm, 64, 4, 16, 4, &mut SeedStream::new(0).rng("head"));
    // 32 images in batches of 8: 4 steps per epoch, 200 steps.
    let opts = TrainOptions {
        epochs: 50,
        batch_size: 8,
        seed: 0,
        ..TrainOptions::default()
    };
    let (tuned, report) = prompt_tune(&backbone, &train, &state, &opts).unwrap();
    assert_eq!(report.steps, 200);
    assert_eq!(backbone.checkpoint_bytes(), before);
    let model = TunedModel::from_prompt_state(backbone, &tuned).unwrap();
    let acc = evaluate(&model, &test).unwrap();
    assert!(acc >= 0.9, "held-out accuracy {acc}");
}

#[test]
fn every_regime_fits_a_separable_set() {
    let train = clean_set(4, 8, 3);
    let test = clean_set(4, 8, 4);
    let backbone = pretrained_desk();
    let opts = TrainOptions {
        epochs: 50,
        batch_size: 8,
        seed: 1,
        ..TrainOptions::default()
    };
    for regime in Regime::ALL {
        let spec = match regime {
            Regime::Vptm => RegimeSpec::vptm(Layout::Cxpm, 4, 16, 4),
            Regime::Finetune | Regime::LinearProbe => RegimeSpec::new(regime, 4),
            _ => RegimeSpec::new(regime, 4).with_prompts(4),
        };
        let (model, metrics, _) = run_regime(backbone, spec, &train, &test, &opts).unwrap();
        assert!(metrics.accuracy >= 0.95, "{regime}: accuracy {}", metrics.accuracy);
        let expected = count_params(&backbone.config, &spec.tuned_spec());
        assert_eq!(metrics.tuned_ratio, expected.ratio_percent, "{regime}");
        assert_eq!(metrics.tuned_params, model.trainable_count(), "{regime}");
    }
}

#[test]
fn mlp1_solves_three_separable_clusters() {
    let d = 32;
    let mut rng = SeedStream::new(7).rng("embeddings");
    let centers: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, d], 1.0, &mut rng)).collect();
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for i in 0..60 {
        let c = i % 3;
        let noise = Tensor::randn(&[1, d], 0.1, &mut rng);
        rows.push(centers[c].data().iter().zip(noise.data()).map(|(a, b)| a + b).collect::<Vec<f64>>());
        labels.push(c);
    }
    let h = Tensor::from_rows(&rows).unwrap();
    let mut params = ParamSet::new();
    params.insert("w", Tensor::trunc_normal(&[d, 3], 0.02, &mut rng));
    params.insert("b", Tensor::zeros(&[1, 3]));
    let mut state = OptimizerState::new(&params, AdamWConfig::default());
    let logits_of = |params: &ParamSet, g: &mut Graph| {
        let bound = params.bind(g).unwrap();
        let x = g.constant(h.clone()).unwrap();
        (bound.clone(), mlp_head(g, x, MlpVariant::One, bound.ids()).unwrap())
    };
    for _ in 0..300 {
        let mut g = Graph::new();
        let (bound, logits) = logits_of(&params, &mut g);
        let loss = g.cross_entropy(logits, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut acc = params.zeros_like();
        bound.accumulate(&grads, &mut acc);
        adamw_step(&mut params, &acc, &mut state, 1e-2).unwrap();
    }
    let mut g = Graph::new();
    let (_, logits) = logits_of(&params, &mut g);
    let out = g.value(logits);
    let predicted: Vec<usize> = (0..out.rows()).map(|r| argmax(out.row(r))).collect();
    assert_eq!(accuracy_of(&predicted, &labels).unwrap(), 1.0);
}

#[test]
fn random_predictor_scores_chance() {
    let mut rng = SeedStream::new(11).rng("predictor");
    let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
    let predicted: Vec<usize> = labels.iter().map(|_| rng.gen_range(0..10)).collect();
    let acc = accuracy_of(&predicted, &labels).unwrap();
    assert!((acc - 0.10).abs() <= 0.03, "{acc}");
}

#[test]
fn accuracy_ignores_dataset_order() {
    let data = clean_set(3, 6, 5);
    let spec = RegimeSpec::vptm(Layout::Cmpx, 2, 8, 3);
    let model = vptm_core::regimes::attach_head(desk_backbone(2), spec, &mut SeedStream::new(2).rng("head")).unwrap();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut SeedStream::new(3).rng("order"));
    assert_eq!(evaluate(&model, &data).unwrap(), evaluate(&model, &data.subset(&order)).unwrap());
}
