//! Knowledge distillation from a dense teacher into a Kronecker student.

mod gradcheck;
mod losses;
mod train;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

pub use gradcheck::{gradient_check, GradCheckReport, TensorCheck};
pub use losses::{kd_losses, loss_and_grad, pooled_features, Gradients};
pub use train::{
    ablation, evaluate, history_to_jsonl, train, AblationConfig, AblationRow, EvalReport,
    StepRecord, TrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KdLossBundle {
    pub embedding: f64,
    pub attention: f64,
    pub ffn: f64,
    pub projection: f64,
    pub logits: f64,
    pub ce: f64,
    pub total: f64,
}

impl KdLossBundle {
    pub fn intermediate(&self) -> f64 {
        self.embedding + self.attention + self.ffn
    }

    pub fn is_finite(&self) -> bool {
        [
            self.embedding,
            self.attention,
            self.ffn,
            self.projection,
            self.logits,
            self.ce,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &KdLossBundle, w: f64) {
        self.embedding += w * other.embedding;
        self.attention += w * other.attention;
        self.ffn += w * other.ffn;
        self.projection += w * other.projection;
        self.logits += w * other.logits;
        self.ce += w * other.ce;
        self.total += w * other.total;
    }
}

/// Learnable `P: 2d × 2d` mapping pooled teacher features onto the student's.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub p: Matrix,
}

impl ProjectionHead {
    pub fn identity(hidden: usize) -> Self {
        Self {
            p: Matrix::identity(2 * hidden),
        }
    }
}

/// Which per-layer tensor stands for the attention output in pooled features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionFeature {
    /// After `W^O`, before the residual.
    #[default]
    ModuleOutput,
    /// After the residual and layer norm.
    PostNorm,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LogitLoss {
    #[default]
    Mse,
    /// `T²·KL(softmax(t/T) ‖ softmax(s/T))`
    Kl { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub embedding: bool,
    pub attention: bool,
    pub ffn: bool,
    pub projection: bool,
    pub logits: bool,
    pub ce: bool,
}

impl LossMask {
    pub const ALL: Self = Self {
        embedding: true,
        attention: true,
        ffn: true,
        projection: true,
        logits: true,
        ce: true,
    };
    pub const INTERMEDIATE: Self = Self {
        ce: false,
        projection: false,
        logits: false,
        ..Self::ALL
    };
    pub const CE_ONLY: Self = Self {
        embedding: false,
        attention: false,
        ffn: false,
        projection: false,
        logits: false,
        ce: true,
    };

    pub fn needs_teacher(&self) -> bool {
        self.embedding || self.attention || self.ffn || self.projection || self.logits
    }

    pub fn total(&self, b: &KdLossBundle) -> f64 {
        let terms = [
            (self.embedding, b.embedding),
            (self.attention, b.attention),
            (self.ffn, b.ffn),
            (self.projection, b.projection),
            (self.logits, b.logits),
            (self.ce, b.ce),
        ];
        terms.iter().filter(|(on, _)| *on).map(|(_, v)| v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Intermediate-layer terms only; head and `P` frozen.
    PretrainKd,
    /// Every term; all student parameters and `P` train.
    FinetuneKd,
    /// Cross-entropy only.
    NoKd,
}

impl Stage {
    pub fn mask(self) -> LossMask {
        match self {
            Stage::PretrainKd => LossMask::INTERMEDIATE,
            Stage::FinetuneKd => LossMask::ALL,
            Stage::NoKd => LossMask::CE_ONLY,
        }
    }

    pub fn trains_head(self) -> bool {
        self != Stage::PretrainKd
    }

    pub fn trains_projection(self) -> bool {
        self == Stage::FinetuneKd
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrain_kd" => Ok(Stage::PretrainKd),
            "finetune_kd" => Ok(Stage::FinetuneKd),
            "no_kd" => Ok(Stage::NoKd),
            other => Err(format!(
                "unknown stage `{other}` (pretrain_kd, finetune_kd, no_kd)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub feature: AttentionFeature,
    pub logit_loss: LogitLoss,
}
