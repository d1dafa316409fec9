use indexmap::IndexMap;

use super::{AttentionFeature, KdConfig, KdLossBundle, LogitLoss, LossMask, ProjectionHead};
use crate::autograd::{mse_value, soft_kl_value, softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TransformerModel};
use crate::task::Example;
use crate::tensor::Matrix;

/// `concat[mean(A_L), mean(H_L)]` as a `1 × 2d` row.
pub fn pooled_features(trace: &ForwardTrace, feature: AttentionFeature) -> Matrix {
    let last = trace.layers.last().expect("at least one layer");
    let a = match feature {
        AttentionFeature::ModuleOutput => &last.attention,
        AttentionFeature::PostNorm => &last.attention_norm,
    };
    let h = &last.hidden;
    let (s, d) = (h.rows(), h.cols());
    Matrix::from_fn(1, 2 * d, |_, j| {
        let (src, c) = if j < d { (a, j) } else { (h, j - d) };
        (0..s).map(|i| src[(i, c)]).sum::<f64>() / s as f64
    })
}

fn same_shape(location: impl FnOnce() -> String, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::TraceMismatch {
            location: location(),
            detail: format!(
                "student {}x{} vs teacher {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        });
    }
    Ok(())
}

fn check_traces(s: &ForwardTrace, t: &ForwardTrace) -> Result<()> {
    same_shape(|| "embedding".into(), &s.embedding, &t.embedding)?;
    if s.layers.len() != t.layers.len() {
        return Err(Error::TraceMismatch {
            location: "layers".into(),
            detail: format!(
                "student has {} layers, teacher {}",
                s.layers.len(),
                t.layers.len()
            ),
        });
    }
    for (l, (a, b)) in s.layers.iter().zip(&t.layers).enumerate() {
        if a.scores.len() != b.scores.len() {
            return Err(Error::TraceMismatch {
                location: format!("layer {l} scores"),
                detail: format!(
                    "student has {} heads, teacher {}",
                    a.scores.len(),
                    b.scores.len()
                ),
            });
        }
        for (h, (x, y)) in a.scores.iter().zip(&b.scores).enumerate() {
            same_shape(|| format!("layer {l} scores head {h}"), x, y)?;
        }
        same_shape(
            || format!("layer {l} attention"),
            &a.attention,
            &b.attention,
        )?;
        same_shape(|| format!("layer {l} hidden"), &a.hidden, &b.hidden)?;
    }
    same_shape(|| "logits".into(), &s.logits, &t.logits)
}

fn cross_entropy(logits: &Matrix, label: usize) -> Result<f64> {
    if label >= logits.cols() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(-softmax_rows(logits).as_slice()[label].ln())
}

/// Every loss term from two traces of the same input. `total` sums the terms
/// enabled in `mask`; `ce` is zero without a label.
pub fn kd_losses(
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    proj: &ProjectionHead,
    label: Option<usize>,
    mask: &LossMask,
    cfg: &KdConfig,
) -> Result<KdLossBundle> {
    check_traces(student, teacher)?;
    let mut b = KdLossBundle {
        embedding: mse_value(&student.embedding, &teacher.embedding),
        ..Default::default()
    };
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        let heads = s.scores.len() as f64;
        b.attention += s
            .scores
            .iter()
            .zip(&t.scores)
            .map(|(x, y)| mse_value(x, y))
            .sum::<f64>()
            / heads;
        b.ffn += mse_value(&s.hidden, &t.hidden);
    }
    let gs = pooled_features(student, cfg.feature);
    let gt = pooled_features(teacher, cfg.feature);
    let pg = proj.p.matmul(&gt.transpose())?;
    b.projection = mse_value(&gs.transpose(), &pg);
    b.logits = match cfg.logit_loss {
        LogitLoss::Mse => mse_value(&student.logits, &teacher.logits),
        LogitLoss::Kl { temperature } => soft_kl_value(
            &softmax_rows(&teacher.logits.scale(1.0 / temperature)),
            &softmax_rows(&student.logits.scale(1.0 / temperature)),
            temperature,
        ),
    };
    b.ce = match label {
        Some(y) => cross_entropy(&student.logits, y)?,
        None if mask.ce => {
            return Err(Error::Config(
                "cross-entropy enabled without a label".into(),
            ))
        }
        None => 0.0,
    };
    b.total = mask.total(&b);
    Ok(b)
}

/// Gradients keyed by checkpoint name, plus the projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: IndexMap<String, Matrix>,
    pub projection: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &TransformerModel, proj: &ProjectionHead) -> Self {
        let mut params = IndexMap::new();
        model.visit(&mut |name, m| {
            params.insert(name, Matrix::zeros(m.rows(), m.cols()));
        });
        Self {
            params,
            projection: Matrix::zeros(proj.p.rows(), proj.p.cols()),
        }
    }

    pub(crate) fn axpy(&mut self, w: f64, other: &Gradients) {
        for (g, o) in self.params.values_mut().zip(other.params.values()) {
            g.axpy(w, o).expect("same model");
        }
        self.projection
            .axpy(w, &other.projection)
            .expect("same projection");
    }
}

/// Loss bundle and exact gradients for one example. Without a teacher only
/// cross-entropy can be enabled.
pub fn loss_and_grad(
    student: &TransformerModel,
    teacher: Option<&ForwardTrace>,
    proj: &ProjectionHead,
    example: &Example,
    mask: &LossMask,
    cfg: &KdConfig,
) -> Result<(KdLossBundle, Gradients)> {
    if teacher.is_none() && mask.needs_teacher() {
        return Err(Error::Config(
            "distillation terms enabled without a teacher".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars = student.register(&mut tape);
    let p = tape.param(proj.p.clone());
    let st = student.forward_tape(&mut tape, &vars, &example.ids)?;

    let mut terms: Vec<(bool, Option<Var>)> = Vec::with_capacity(6);
    if let Some(t) = teacher {
        let e = tape.constant(t.embedding.clone());
        let emb = tape.mse(st.embedding, e)?;

        let mut att_layers = Vec::with_capacity(st.layers.len());
        let mut ffn_layers = Vec::with_capacity(st.layers.len());
        for (l, (sl, tl)) in st.layers.iter().zip(&t.layers).enumerate() {
            if sl.scores.len() != tl.scores.len() {
                return Err(Error::TraceMismatch {
                    location: format!("layer {l} scores"),
                    detail: format!(
                        "student has {} heads, teacher {}",
                        sl.scores.len(),
                        tl.scores.len()
                    ),
                });
            }
            let mut per_head = Vec::with_capacity(sl.scores.len());
            for (&o, ot) in sl.scores.iter().zip(&tl.scores) {
                let c = tape.constant(ot.clone());
                per_head.push(tape.mse(o, c)?);
            }
            let s = tape.sum(&per_head);
            att_layers.push(tape.scale(s, 1.0 / per_head.len() as f64));
            let h = tape.constant(tl.hidden.clone());
            ffn_layers.push(tape.mse(sl.hidden, h)?);
        }
        let att = tape.sum(&att_layers);
        let ffn = tape.sum(&ffn_layers);

        let last = st.layers.last().expect("at least one layer");
        let a_feat = match cfg.feature {
            AttentionFeature::ModuleOutput => last.attention,
            AttentionFeature::PostNorm => last.attention_norm,
        };
        let ga = tape.mean_rows(a_feat);
        let gh = tape.mean_rows(last.hidden);
        let gs = tape.concat_cols(&[ga, gh])?;
        let gs = tape.transpose(gs);
        let gt = tape.constant(pooled_features(t, cfg.feature).transpose());
        let pg = tape.matmul(p, gt)?;
        let projection = tape.mse(gs, pg)?;

        let logits = match cfg.logit_loss {
            LogitLoss::Mse => {
                let c = tape.constant(t.logits.clone());
                tape.mse(st.logits, c)?
            }
            LogitLoss::Kl { temperature } => tape.soft_kl(st.logits, &t.logits, temperature)?,
        };
        terms.extend([
            (mask.embedding, Some(emb)),
            (mask.attention, Some(att)),
            (mask.ffn, Some(ffn)),
            (mask.projection, Some(projection)),
            (mask.logits, Some(logits)),
        ]);
    } else {
        terms.extend(std::iter::repeat_n((false, None), 5));
    }
    let ce = match example.label {
        label if label < student.num_labels() => Some(tape.softmax_ce(st.logits, label)?),
        label => {
            if mask.ce {
                return Err(Error::Config(format!(
                    "label {label} out of range for {} classes",
                    student.num_labels()
                )));
            }
            None
        }
    };
    terms.push((mask.ce, ce));

    let enabled: Vec<Var> = terms
        .iter()
        .filter(|(on, _)| *on)
        .filter_map(|(_, v)| *v)
        .collect();
    if enabled.is_empty() {
        return Err(Error::Config("loss mask enables no terms".into()));
    }
    let total = tape.sum(&enabled);
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let bundle = KdLossBundle {
        embedding: value(terms[0].1),
        attention: value(terms[1].1),
        ffn: value(terms[2].1),
        projection: value(terms[3].1),
        logits: value(terms[4].1),
        ce: value(terms[5].1),
        total: tape.scalar(total),
    };

    let grads = tape.backward(total);
    let params = vars
        .named
        .iter()
        .map(|(n, &v)| (n.clone(), grads.get_or_zero(v)))
        .collect();
    Ok((
        bundle,
        Gradients {
            params,
            projection: grads.get_or_zero(p),
        },
    ))
}
