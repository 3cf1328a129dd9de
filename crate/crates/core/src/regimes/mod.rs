//! Comparison regimes sharing one training loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod model;
mod train;

pub use model::{attach_head, BoundModel, ForwardNodes, RegimeSpec, TunedModel, REGIME_ENTRY};
pub use train::{
    accuracy_of, embedding_rows, evaluate, metrics_for, predictions, prompt_tune, run_regime, train_regime, RunMetrics, TrainOptions,
    TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(alias = "ft")]
    Finetune,
    #[serde(alias = "linear", alias = "lp")]
    LinearProbe,
    #[serde(alias = "vpt")]
    VptShallow,
    #[serde(alias = "pv")]
    Vptm,
    Mlp1,
    Mlp2,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Finetune,
        Regime::LinearProbe,
        Regime::VptShallow,
        Regime::Vptm,
        Regime::Mlp1,
        Regime::Mlp2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Finetune => "finetune",
            Regime::LinearProbe => "linear_probe",
            Regime::VptShallow => "vpt_shallow",
            Regime::Vptm => "vptm",
            Regime::Mlp1 => "mlp1",
            Regime::Mlp2 => "mlp2",
        }
    }

    /// Heads that read the `[MASK]` state rather than `[CLS]`.
    pub fn reads_mask(&self) -> bool {
        matches!(self, Regime::Vptm | Regime::Mlp1 | Regime::Mlp2)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "finetune" | "ft" => Ok(Regime::Finetune),
            "linear" | "linear_probe" | "lp" => Ok(Regime::LinearProbe),
            "vpt" | "vpt_shallow" => Ok(Regime::VptShallow),
            "vptm" | "pv" => Ok(Regime::Vptm),
            "mlp1" => Ok(Regime::Mlp1),
            "mlp2" => Ok(Regime::Mlp2),
            other => Err(Error::invalid(format!("unknown regime `{other}`"))),
        }
    }
}
