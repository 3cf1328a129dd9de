use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::mvtm::write_trace_csv;
use crate::prompt::Layout;
use crate::regimes::{run_regime, Regime, RegimeSpec, RunMetrics, TrainOptions};
use crate::vit::{Backbone, BackboneConfig};

pub const METRICS_FILE: &str = "metrics.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Everything one tuning run needs, as a TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Geometry used when pretraining from scratch; a loaded checkpoint
    /// must agree with it.
    #[serde(default)]
    pub backbone: BackboneConfig,
    pub codebook_path: Option<PathBuf>,
    /// Pretrained backbone the tuning run starts from.
    pub checkpoint_path: PathBuf,
    pub regime: Regime,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub n_p: usize,
    #[serde(default)]
    pub t: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset_paths: DatasetPaths,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.regime == Regime::Vptm && self.t == 0 {
            return Err(Error::Config("vptm needs a prototype dimension t > 0".into()));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        let d = TrainOptions::default();
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            warmup_epochs: self.warmup_epochs.unwrap_or(d.warmup_epochs),
            seed: self.seed,
        }
    }

    pub fn regime_spec(&self, n_classes: usize) -> RegimeSpec {
        let prompts = !matches!(self.regime, Regime::Finetune | Regime::LinearProbe);
        RegimeSpec {
            regime: self.regime,
            layout: self.layout,
            n_prompts: if prompts { self.n_p } else { 0 },
            proto_dim: if self.regime == Regime::Vptm { self.t } else { 0 },
            n_classes,
        }
    }
}

/// Loads a backbone checkpoint and checks it against the configured geometry.
pub fn load_backbone(path: &Path, expected: Option<&BackboneConfig>) -> Result<Backbone> {
    let backbone = Backbone::from_checkpoint(&Checkpoint::load(path)?)?;
    if let Some(cfg) = expected {
        if &backbone.config != cfg {
            return Err(Error::Config(format!(
                "{} holds {:?}, config expects {:?}",
                path.display(),
                backbone.config,
                cfg
            )));
        }
    }
    Ok(backbone)
}

pub fn load_splits(paths: &DatasetPaths) -> Result<(Dataset, Dataset)> {
    Ok((load_dataset(&paths.train)?, load_dataset(&paths.test)?))
}

/// Trains one regime and writes config, metrics, loss trace and the tuned
/// checkpoint into `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let backbone = load_backbone(&cfg.checkpoint_path, Some(&cfg.backbone))?;
    let (train, test) = load_splits(&cfg.dataset_paths)?;
    run_with(cfg, &backbone, &train, &test)
}

/// As [`run_experiment`] with the inputs already in memory.
pub fn run_with(cfg: &ExperimentConfig, backbone: &Backbone, train: &Dataset, test: &Dataset) -> Result<RunMetrics> {
    if train.n_classes != test.n_classes {
        return Err(Error::invalid(format!(
            "train has {} classes, test has {}",
            train.n_classes, test.n_classes
        )));
    }
    let spec = cfg.regime_spec(train.n_classes);
    let opts = cfg.train_options();
    let (model, metrics, report) = run_regime(backbone, spec, train, test, &opts)?;
    fs::create_dir_all(&cfg.output_dir)?;
    cfg.save(&cfg.output_dir.join(CONFIG_FILE))?;
    metrics.write_json(&cfg.output_dir.join(METRICS_FILE))?;
    write_trace_csv(&cfg.output_dir.join(TRACE_FILE), &report.trace)?;
    model.to_checkpoint().save(&cfg.output_dir.join(MODEL_FILE))?;
    log::info!(
        "{} accuracy {:.4} tuned {:.4}% -> {}",
        metrics.regime,
        metrics.accuracy,
        metrics.tuned_ratio,
        cfg.output_dir.display()
    );
    Ok(metrics)
}
