use super::{kd_losses, loss_and_grad, KdConfig, LossMask, ProjectionHead};
use crate::error::Result;
use crate::model::{ForwardTrace, TransformerModel};
use crate::task::Example;
use crate::tensor::Matrix;

/// Worst agreement for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub worst_rel: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.worst_rel.total_cmp(&b.worst_rel))
    }

    pub fn elements(&self) -> usize {
        self.tensors.iter().map(|t| t.elements).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.worst_rel < tol)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn scan(
    name: String,
    analytic: &Matrix,
    len: usize,
    step: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<TensorCheck> {
    let mut check = TensorCheck {
        name,
        elements: len,
        worst_rel: 0.0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for k in 0..len {
        let numeric = (eval(k, step)? - eval(k, -step)?) / (2.0 * step);
        let a = analytic.as_slice()[k];
        let rel = relative_error(a, numeric);
        if rel >= check.worst_rel {
            check.worst_rel = rel;
            check.analytic = a;
            check.numeric = numeric;
        }
    }
    Ok(check)
}

/// Compares reverse-mode gradients of the masked loss with central
/// differences on every element of every student tensor and of `P`. The
/// numeric side uses the plain forward and [`kd_losses`], not the tape.
pub fn gradient_check(
    student: &TransformerModel,
    teacher: &ForwardTrace,
    proj: &ProjectionHead,
    example: &Example,
    mask: &LossMask,
    cfg: &KdConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(student, Some(teacher), proj, example, mask, cfg)?;
    let label = Some(example.label);
    let loss = |m: &TransformerModel, p: &ProjectionHead| -> Result<f64> {
        Ok(kd_losses(&m.forward(&example.ids)?, teacher, p, label, mask, cfg)?.total)
    };

    let mut tensors = Vec::with_capacity(grads.params.len() + 1);
    let mut model = student.clone();
    for (name, analytic) in &grads.params {
        let check = scan(name.clone(), analytic, analytic.len(), step, |k, delta| {
            let mut orig = 0.0;
            model.visit_mut(&mut |n, m| {
                if n == name {
                    orig = m.as_slice()[k];
                    m.as_mut_slice()[k] = orig + delta;
                }
            });
            let v = loss(&model, proj);
            model.visit_mut(&mut |n, m| {
                if n == name {
                    m.as_mut_slice()[k] = orig;
                }
            });
            v
        })?;
        tensors.push(check);
    }

    let mut p = proj.clone();
    let check = scan(
        "projection.p".into(),
        &grads.projection,
        p.p.len(),
        step,
        |k, delta| {
            let orig = p.p.as_slice()[k];
            p.p.as_mut_slice()[k] = orig + delta;
            let v = loss(student, &p);
            p.p.as_mut_slice()[k] = orig;
            v
        },
    )?;
    tensors.push(check);
    Ok(GradCheckReport { step, tensors })
}
