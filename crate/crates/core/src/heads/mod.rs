//! Region classifier heads and the bounding-box regression head.
//!
//! All heads consume a region feature vector and a phrase feature vector
//! and emit a relevance score where higher means more confident. Scoring
//! is pure; training (gradient) entry points live alongside each head and
//! are wired up by the trainer.

mod bbreg;
mod branch;
pub(crate) mod embnet;
mod npa;
pub(crate) mod qa;
pub(crate) mod simnet;

pub use bbreg::{
    bbreg_batch_loss, decode_box, encode_box, smooth_l1, BbregHead, BoxDeltaError, SmoothL1,
};
pub use embnet::{
    embnet_batch_loss, embnet_score, triplet_loss, EmbNetHead, TripletBatch, TripletBatchLoss,
    TripletGrad, TripletQuery,
};
pub use npa::{build_confusion_table, ConfusionTable, NpaConfig};
pub use qa::{qa_generate_and_score, qa_loss, QaHead, QaLoss};
pub use simnet::{simnet_loss, simnet_probability, simnet_score, LogisticLoss, SimNetHead};

use serde::{Deserialize, Serialize};

/// Which region classifier a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cca,
    DeepCca,
    EmbNet,
    SimNet,
    Qa,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Cca,
        HeadKind::DeepCca,
        HeadKind::EmbNet,
        HeadKind::SimNet,
        HeadKind::Qa,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Cca => "cca",
            HeadKind::DeepCca => "deep_cca",
            HeadKind::EmbNet => "embnet",
            HeadKind::SimNet => "simnet",
            HeadKind::Qa => "qa",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cca" => Ok(HeadKind::Cca),
            "deep_cca" | "deep-cca" => Ok(HeadKind::DeepCca),
            "embnet" => Ok(HeadKind::EmbNet),
            "simnet" => Ok(HeadKind::SimNet),
            "qa" => Ok(HeadKind::Qa),
            other => Err(format!(
                "unknown head {other:?}; expected one of cca, deep_cca, embnet, simnet, qa"
            )),
        }
    }
}
