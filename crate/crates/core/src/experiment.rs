//! Desk-scale teacher, student and data recipe shared by the CLI and tests.
//!
//! The teacher starts from a Kronecker-structured draw with dense noise of
//! half its scale, is trained on the majority task, and is then compressed
//! into the student by nearest Kronecker product.

use crate::distill::{train, AblationConfig, KdConfig, ProjectionHead, Stage, TrainConfig};
use crate::error::Result;
use crate::model::{init_student_from_teacher, FactorReport, TransformerModel};
use crate::nkp::NkpOptions;
use crate::planner::{ArchSpec, CompressionPlan, FactorShape};
use crate::task::{Example, MajorityTask};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySetup {
    pub arch: ArchSpec,
    pub plan: CompressionPlan,
    pub seq_len: usize,
    /// Dense noise relative to the RMS of each structured weight.
    pub teacher_noise: f64,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
    pub teacher_examples: usize,
    pub finetune_examples: usize,
    pub pretrain_examples: usize,
    pub eval_examples: usize,
    pub ablation: AblationConfig,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            arch: ArchSpec::toy(),
            plan: toy_plan(),
            seq_len: MajorityTask::DEFAULT_SEQ_LEN,
            teacher_noise: 0.5,
            teacher_steps: 200,
            teacher_lr: 0.1,
            teacher_batch: 16,
            teacher_examples: 1024,
            finetune_examples: 32,
            pretrain_examples: 512,
            eval_examples: 256,
            ablation: AblationConfig {
                pretrain_steps: 500,
                finetune_steps: 300,
                pretrain_lr: 0.1,
                finetune_lr: 0.02,
                batch_size: 8,
                seed: 3,
                clip_norm: Some(5.0),
                kd: KdConfig::default(),
            },
        }
    }
}

/// `(4×4)⊗(8×8)` attention, `(8×4)⊗(8×8)` FFN, embedding row of 4.
pub fn toy_plan() -> CompressionPlan {
    CompressionPlan::new(
        FactorShape::new(4, 4, 8, 8),
        FactorShape::new(8, 4, 8, 8),
        4,
    )
}

/// Generator for the power-iteration start vectors of a compression run.
pub fn factor_rng(seed: u64) -> Rng {
    Rng::new(seed ^ 0x4E4B)
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub teacher_train: Vec<Example>,
    pub finetune: Vec<Example>,
    /// Task-agnostic uniform sequences.
    pub pretrain: Vec<Example>,
    pub eval: Vec<Example>,
}

pub struct ToyRun {
    pub teacher: TransformerModel,
    pub student: TransformerModel,
    pub reports: Vec<FactorReport>,
    pub data: ToyData,
}

impl ToySetup {
    pub fn task(&self) -> MajorityTask {
        MajorityTask::new(self.arch.vocab_size, self.seq_len)
    }

    pub fn data(&self, seed: u64) -> ToyData {
        let mut rng = Rng::new(seed ^ 0xDA7A);
        let task = self.task();
        ToyData {
            teacher_train: task.dataset(self.teacher_examples, &mut rng),
            eval: task.dataset(self.eval_examples, &mut rng),
            finetune: task.dataset(self.finetune_examples, &mut rng),
            pretrain: task.generic(self.pretrain_examples, &mut rng),
        }
    }

    pub fn teacher_init(&self, seed: u64) -> Result<TransformerModel> {
        let mut rng = Rng::new(seed ^ 0x7EAC);
        let mut m = TransformerModel::random_kron(&self.arch, &self.plan, &mut rng)?.densified();
        let eta = self.teacher_noise;
        m.visit_mut(&mut |name, w| {
            if name.ends_with(".dense") {
                let rms = w.frobenius_norm() / (w.len() as f64).sqrt();
                let noise = rng.normal_matrix(w.rows(), w.cols(), eta * rms);
                w.add_assign(&noise).expect("same shape");
            }
        });
        Ok(m)
    }

    pub fn train_teacher(&self, data: &ToyData, seed: u64) -> Result<TransformerModel> {
        let init = self.teacher_init(seed)?;
        let cfg = TrainConfig {
            learning_rate: self.teacher_lr,
            batch_size: self.teacher_batch,
            steps: self.teacher_steps,
            seed,
            ..TrainConfig::new(Stage::NoKd)
        };
        Ok(train(
            &init,
            None,
            &ProjectionHead::identity(self.arch.hidden),
            &data.teacher_train,
            &cfg,
        )?
        .student)
    }

    pub fn compress(
        &self,
        teacher: &TransformerModel,
        seed: u64,
    ) -> Result<(TransformerModel, Vec<FactorReport>)> {
        init_student_from_teacher(
            teacher,
            &self.plan,
            NkpOptions::default(),
            &mut factor_rng(seed),
        )
    }

    pub fn run(&self, seed: u64) -> Result<ToyRun> {
        let data = self.data(seed);
        let teacher = self.train_teacher(&data, seed)?;
        let (student, reports) = self.compress(&teacher, seed)?;
        Ok(ToyRun {
            teacher,
            student,
            reports,
            data,
        })
    }
}
