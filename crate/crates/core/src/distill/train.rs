use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::losses::Gradients;
use super::{kd_losses, loss_and_grad, KdConfig, KdLossBundle, LossMask, ProjectionHead, Stage};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TransformerModel};
use crate::task::Example;
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Replaces the stage's default mask.
    #[serde(default)]
    pub mask: Option<LossMask>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Rescales the joint gradient to at most this L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub kd: KdConfig,
    /// Adds elapsed milliseconds to each history record.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            mask: None,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 100,
            seed: 0,
            clip_norm: None,
            kd: KdConfig::default(),
            record_wall_time: false,
        }
    }

    pub fn effective_mask(&self) -> LossMask {
        self.mask.unwrap_or_else(|| self.stage.mask())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: KdLossBundle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

pub fn history_to_jsonl(history: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: TransformerModel,
    pub projection: ProjectionHead,
    pub history: Vec<StepRecord>,
}

/// Epoch-shuffled batch indices.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Plain minibatch SGD on the masked loss. Returns the trained student, its
/// projection head and the per-step batch-mean losses, measured before each
/// update.
pub fn train(
    student: &TransformerModel,
    teacher: Option<&TransformerModel>,
    projection: &ProjectionHead,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mask = cfg.effective_mask();
    if mask.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "stage {:?} needs a teacher",
            cfg.stage
        )));
    }
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("no training examples".into()));
    }
    let mut student = student.clone();
    let mut proj = projection.clone();
    let mut teacher_traces: Vec<Option<ForwardTrace>> = vec![None; data.len()];
    let mut batches = Batches::new(data.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut last_finite: Option<KdLossBundle> = None;
    let start = Instant::now();
    let train_head = cfg.stage.trains_head();
    let train_proj = cfg.stage.trains_projection();

    for step in 0..cfg.steps {
        let idx = batches.next(cfg.batch_size);
        let w = 1.0 / idx.len() as f64;
        let mut bundle = KdLossBundle::default();
        let mut grads = Gradients::zeros_like(&student, &proj);
        for &i in &idx {
            let t = match teacher {
                Some(t) => {
                    if teacher_traces[i].is_none() {
                        teacher_traces[i] = Some(t.forward(&data[i].ids)?);
                    }
                    teacher_traces[i].as_ref()
                }
                None => None,
            };
            let (b, g) = loss_and_grad(&student, t, &proj, &data[i], &mask, &cfg.kd)?;
            bundle.accumulate(&b, w);
            grads.axpy(w, &g);
        }
        if !bundle.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_finite: last_finite.map(Box::new),
            });
        }
        last_finite = Some(bundle);
        history.push(StepRecord {
            step,
            loss: bundle,
            wall_time_ms: cfg
                .record_wall_time
                .then(|| start.elapsed().as_secs_f64() * 1e3),
        });

        let frozen = |name: &str| !train_head && name.starts_with("head.");
        let mut lr = cfg.learning_rate;
        if let Some(limit) = cfg.clip_norm {
            let mut sq = 0.0;
            for (name, g) in &grads.params {
                if !frozen(name) {
                    sq += g.as_slice().iter().map(|v| v * v).sum::<f64>();
                }
            }
            if train_proj {
                sq += grads
                    .projection
                    .as_slice()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > limit {
                lr *= limit / norm;
            }
        }
        student.visit_mut(&mut |name, m| {
            if !frozen(name) {
                m.axpy(-lr, &grads.params[name]).expect("gradient shape");
            }
        });
        if train_proj {
            proj.p.axpy(-lr, &grads.projection).expect("gradient shape");
        }
    }
    Ok(TrainOutcome {
        student,
        projection: proj,
        history,
    })
}

/// Held-out means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ce: f64,
    pub accuracy: f64,
    /// Zero without a teacher.
    pub logit_mse: f64,
    /// Embedding, attention and FFN terms; zero without a teacher.
    pub intermediate: f64,
}

pub fn evaluate(
    student: &TransformerModel,
    teacher: Option<&TransformerModel>,
    data: &[Example],
) -> Result<EvalReport> {
    let mut r = EvalReport::default();
    if data.is_empty() {
        return Ok(r);
    }
    let w = 1.0 / data.len() as f64;
    let proj = ProjectionHead::identity(student.hidden());
    for ex in data {
        let s = student.forward(&ex.ids)?;
        let z = s.logits.as_slice();
        let pred = (0..z.len())
            .max_by(|&a, &b| z[a].total_cmp(&z[b]))
            .unwrap_or(0);
        r.accuracy += w * f64::from(u8::from(pred == ex.label));
        let t = match teacher {
            Some(t) => t.forward(&ex.ids)?,
            None => s.clone(),
        };
        let b = kd_losses(
            &s,
            &t,
            &proj,
            Some(ex.label),
            &LossMask::ALL,
            &KdConfig::default(),
        )?;
        r.ce += w * b.ce;
        if teacher.is_some() {
            r.logit_mse += w * b.logits;
            r.intermediate += w * b.intermediate();
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub kd: KdConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pretrain_kd: bool,
    pub finetune_kd: bool,
    pub steps: usize,
    pub eval: EvalReport,
}

/// The four `{pretrain KD} × {finetune KD}` regimes from one initial student,
/// in the order none/no-KD, none/KD, KD/no-KD, KD/KD. Regimes without
/// pretraining skip that stage.
pub fn ablation(
    init: &TransformerModel,
    teacher: &TransformerModel,
    pretrain_data: &[Example],
    finetune_data: &[Example],
    eval_data: &[Example],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let proj0 = ProjectionHead::identity(init.hidden());
    let stage_cfg = |stage, steps, lr| TrainConfig {
        stage,
        mask: None,
        learning_rate: lr,
        batch_size: cfg.batch_size,
        steps,
        seed: cfg.seed,
        clip_norm: cfg.clip_norm,
        kd: cfg.kd,
        record_wall_time: false,
    };
    let pre = train(
        init,
        Some(teacher),
        &proj0,
        pretrain_data,
        &stage_cfg(Stage::PretrainKd, cfg.pretrain_steps, cfg.pretrain_lr),
    )?;
    let mut rows = Vec::with_capacity(4);
    for pretrain_kd in [false, true] {
        let start = if pretrain_kd { &pre.student } else { init };
        for finetune_kd in [false, true] {
            let stage = if finetune_kd {
                Stage::FinetuneKd
            } else {
                Stage::NoKd
            };
            let out = train(
                start,
                Some(teacher),
                &proj0,
                finetune_data,
                &stage_cfg(stage, cfg.finetune_steps, cfg.finetune_lr),
            )?;
            rows.push(AblationRow {
                pretrain_kd,
                finetune_kd,
                steps: cfg.finetune_steps + if pretrain_kd { cfg.pretrain_steps } else { 0 },
                eval: evaluate(&out.student, Some(teacher), eval_data)?,
            });
        }
    }
    Ok(rows)
}
