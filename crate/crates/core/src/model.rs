//! Post-LN Transformer encoder with dense or Kronecker-factored weights.
//!
//! Checkpoint names:
//!
//! ```text
//! meta.heads                                  1×1
//! embedding.dense | embedding.table, embedding.row
//! embedding.position, embedding.ln.{gamma,beta}
//! layer.{i}.attn.{wq,wk,wv,wo}.{dense | a, b}
//! layer.{i}.attn.{bq,bk,bv,bo}, layer.{i}.attn.ln.{gamma,beta}
//! layer.{i}.ffn.{w1,w2}.{dense | a, b}
//! layer.{i}.ffn.{b1,b2}, layer.{i}.ffn.ln.{gamma,beta}
//! head.weight, head.bias
//! ```
//!
//! Dropout is omitted; every forward is deterministic.

use indexmap::IndexMap;

use crate::autograd::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::kron::{
    kron_linear_rows, kron_product, FlopCounter, KronFactorPair, NoCount, OpCounter,
};
use crate::nkp::{nearest_kronecker, NkpOptions};
use crate::planner::{ArchSpec, CompressionPlan, FactorShape};
use crate::tensor::{Matrix, NamedTensorStore, Rng};

pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Matrix),
    Kron(KronFactorPair),
}

impl Linear {
    pub fn rows(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows(),
            Linear::Kron(p) => p.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Linear::Dense(w) => w.cols(),
            Linear::Kron(p) => p.cols(),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Linear::Dense(w) => w.clone(),
            Linear::Kron(p) => kron_product(p),
        }
    }

    /// `x · Wᵀ` for `x: rows × cols()`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Linear::Dense(w) => x.matmul_t(w),
            Linear::Kron(p) => kron_linear_rows(p, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(w) => w.len(),
            Linear::Kron(p) => p.param_count(),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        match self {
            Linear::Dense(w) => f(format!("{name}.dense"), w),
            Linear::Kron(p) => {
                f(format!("{name}.a"), &p.a);
                f(format!("{name}.b"), &p.b);
            }
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            Linear::Dense(w) => f(&format!("{name}.dense"), w),
            Linear::Kron(p) => {
                f(&format!("{name}.a"), &mut p.a);
                f(&format!("{name}.b"), &mut p.b);
            }
        }
    }

    fn from_store(store: &NamedTensorStore, name: &str) -> Result<Self> {
        if let Some(w) = store.get(&format!("{name}.dense")) {
            return Ok(Linear::Dense(w.clone()));
        }
        let a = store.require(&format!("{name}.a"))?.clone();
        let b = store.require(&format!("{name}.b"))?.clone();
        Ok(Linear::Kron(KronFactorPair::new(a, b)))
    }
}

/// Token table `A^E: v × d/n` and a row `B^E: 1 × n` shared by every word.
#[derive(Debug, Clone, PartialEq)]
pub struct KronEmbedding {
    pub table: Matrix,
    pub row: Matrix,
}

impl KronEmbedding {
    pub fn new(table: Matrix, row: Matrix) -> Result<Self> {
        if row.rows() != 1 {
            return Err(Error::shape(
                "kron_embedding",
                format!("row factor must be 1xn, got {}x{}", row.rows(), row.cols()),
            ));
        }
        Ok(Self { table, row })
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols() * self.row.cols()
    }

    pub fn to_dense(&self) -> Matrix {
        kron_product(&KronFactorPair::new(self.table.clone(), self.row.clone()))
    }
}

/// Row `t` is `table[ids[t]] ⊗ row`, expanded tile by tile.
pub(crate) fn kron_embed_rows<C: OpCounter>(
    table: &Matrix,
    row: &Matrix,
    ids: &[usize],
    counter: &mut C,
) -> Result<Matrix> {
    if ids.is_empty() {
        return Err(Error::shape("embed", "empty token list"));
    }
    let (k, n) = (table.cols(), row.cols());
    let b = row.as_slice();
    let mut out = Matrix::zeros(ids.len(), k * n);
    for (t, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::Index {
                id,
                vocab: table.rows(),
            });
        }
        let dst = out.row_mut(t);
        for (j, &a) in table.row(id).iter().enumerate() {
            for (o, &bq) in dst[j * n..(j + 1) * n].iter_mut().zip(b) {
                *o = a * bq;
            }
        }
        counter.record((k * n) as u64, 0);
    }
    Ok(out)
}

pub fn embed(e: &KronEmbedding, ids: &[usize]) -> Result<Matrix> {
    kron_embed_rows(&e.table, &e.row, ids, &mut NoCount)
}

pub fn embed_counted(
    e: &KronEmbedding,
    ids: &[usize],
    counter: &mut FlopCounter,
) -> Result<Matrix> {
    kron_embed_rows(&e.table, &e.row, ids, counter)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Dense(Matrix),
    Kron(KronEmbedding),
}

impl Embedding {
    pub fn vocab(&self) -> usize {
        match self {
            Embedding::Dense(t) => t.rows(),
            Embedding::Kron(e) => e.vocab(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Embedding::Dense(t) => t.cols(),
            Embedding::Kron(e) => e.dim(),
        }
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<Matrix> {
        match self {
            Embedding::Kron(e) => embed(e, ids),
            Embedding::Dense(t) => {
                if ids.is_empty() {
                    return Err(Error::shape("embed", "empty token list"));
                }
                let mut out = Matrix::zeros(ids.len(), t.cols());
                for (k, &id) in ids.iter().enumerate() {
                    if id >= t.rows() {
                        return Err(Error::Index {
                            id,
                            vocab: t.rows(),
                        });
                    }
                    out.row_mut(k).copy_from_slice(t.row(id));
                }
                Ok(out)
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Embedding::Dense(t) => t.clone(),
            Embedding::Kron(e) => e.to_dense(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let c = x.cols() as f64;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ((o, g), b) in row
                .iter_mut()
                .zip(self.gamma.as_slice())
                .zip(self.beta.as_slice())
            {
                *o = (*o - mean) * inv * g + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub bq: Matrix,
    pub bk: Matrix,
    pub bv: Matrix,
    pub bo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: Linear,
    pub b1: Matrix,
    pub w2: Linear,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionWeights,
    pub attn_norm: LayerNorm,
    pub ffn: FfnWeights,
    pub ffn_norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub heads: usize,
    pub embedding: Embedding,
    pub position: Matrix,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    /// `labels × d`, applied to the mean-pooled last hidden state.
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Pre-softmax `QₕKₕᵀ/√d_k`, one per head.
    pub scores: Vec<Matrix>,
    pub probs: Vec<Matrix>,
    /// Attention module output after `W^O`, before the residual.
    pub attention: Matrix,
    /// `LN(x + attention)`, the FFN input.
    pub attention_norm: Matrix,
    /// Layer output.
    pub hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub embedding: Matrix,
    pub layers: Vec<LayerTrace>,
    /// `1 × labels`
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.logits.is_finite()
            && self.layers.iter().all(|l| {
                l.attention.is_finite()
                    && l.attention_norm.is_finite()
                    && l.hidden.is_finite()
                    && l.scores.iter().chain(&l.probs).all(Matrix::is_finite)
            })
    }

    /// Largest `|Σ row − 1|` over every softmax row.
    pub fn softmax_defect(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.probs)
            .flat_map(|p| (0..p.rows()).map(move |i| (p.row(i).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Largest elementwise difference over every captured tensor.
    pub fn max_abs_diff(&self, other: &ForwardTrace) -> f64 {
        let mut m = self
            .embedding
            .max_abs_diff(&other.embedding)
            .max(self.logits.max_abs_diff(&other.logits));
        for (a, b) in self.layers.iter().zip(&other.layers) {
            m = m
                .max(a.attention.max_abs_diff(&b.attention))
                .max(a.attention_norm.max_abs_diff(&b.attention_norm))
                .max(a.hidden.max_abs_diff(&b.hidden));
            for (x, y) in a
                .scores
                .iter()
                .zip(&b.scores)
                .chain(a.probs.iter().zip(&b.probs))
            {
                m = m.max(x.max_abs_diff(y));
            }
        }
        m
    }
}

fn add_bias(mut x: Matrix, b: &Matrix) -> Matrix {
    for i in 0..x.rows() {
        for (o, v) in x.row_mut(i).iter_mut().zip(b.as_slice()) {
            *o += v;
        }
    }
    x
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn cols(x: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(x.rows(), len, |i, j| x[(i, start + j)])
}

pub struct AttentionOutput {
    pub output: Matrix,
    pub scores: Vec<Matrix>,
    pub probs: Vec<Matrix>,
}

pub fn attention_forward(
    w: &AttentionWeights,
    x: &Matrix,
    heads: usize,
) -> Result<AttentionOutput> {
    let d = x.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(
            "attention",
            format!("{heads} heads do not divide width {d}"),
        ));
    }
    let dk = d / heads;
    let q = add_bias(w.wq.apply(x)?, &w.bq);
    let k = add_bias(w.wk.apply(x)?, &w.bk);
    let v = add_bias(w.wv.apply(x)?, &w.bv);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = Matrix::zeros(x.rows(), d);
    let mut scores = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (
            cols(&q, h * dk, dk),
            cols(&k, h * dk, dk),
            cols(&v, h * dk, dk),
        );
        let o = qh.matmul_t(&kh)?.scale(scale);
        let p = softmax_rows(&o);
        let ctx = p.matmul(&vh)?;
        for i in 0..x.rows() {
            concat.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(ctx.row(i));
        }
        scores.push(o);
        probs.push(p);
    }
    let output = add_bias(w.wo.apply(&concat)?, &w.bo);
    Ok(AttentionOutput {
        output,
        scores,
        probs,
    })
}

/// `LN(x + W₂·gelu(W₁x + b₁) + b₂)`
pub fn ffn_forward(w: &FfnWeights, norm: &LayerNorm, x: &Matrix) -> Result<Matrix> {
    let inner = add_bias(w.w1.apply(x)?, &w.b1).map(gelu);
    let out = add_bias(w.w2.apply(&inner)?, &w.b2);
    Ok(norm.apply(&x.add(&out)?))
}

/// Per-weight outcome of initializing a student from a teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorReport {
    pub name: String,
    pub shape: FactorShape,
    pub residual: f64,
    pub relative_residual: f64,
    pub iterations: usize,
}

impl TransformerModel {
    /// Dense encoder with small random weights, unit layer norms and zero
    /// biases.
    pub fn random_dense(arch: &ArchSpec, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let (d, f) = (arch.hidden, arch.ffn_dim);
        let lin = |rng: &mut Rng, rows: usize, cols: usize| {
            Linear::Dense(rng.normal_matrix(rows, cols, 1.0 / (cols as f64).sqrt()))
        };
        let embedding = Embedding::Dense(rng.normal_matrix(arch.vocab_size, d, 1.0));
        let position = rng.normal_matrix(arch.max_seq_len, d, 0.5);
        let mut layers = Vec::with_capacity(arch.layers);
        for _ in 0..arch.layers {
            let attn = AttentionWeights {
                wq: lin(rng, d, d),
                wk: lin(rng, d, d),
                wv: lin(rng, d, d),
                wo: lin(rng, d, d),
                bq: Matrix::zeros(1, d),
                bk: Matrix::zeros(1, d),
                bv: Matrix::zeros(1, d),
                bo: Matrix::zeros(1, d),
            };
            let ffn = FfnWeights {
                w1: lin(rng, f, d),
                b1: Matrix::zeros(1, f),
                w2: lin(rng, d, f),
                b2: Matrix::zeros(1, d),
            };
            layers.push(EncoderLayer {
                attn,
                attn_norm: LayerNorm::identity(d),
                ffn,
                ffn_norm: LayerNorm::identity(d),
            });
        }
        let labels = arch.num_labels.max(1);
        Ok(Self {
            heads: arch.heads,
            embedding,
            position,
            embedding_norm: LayerNorm::identity(d),
            layers,
            head_weight: rng.normal_matrix(labels, d, 1.0 / (d as f64).sqrt()),
            head_bias: Matrix::zeros(1, labels),
        })
    }

    /// Kronecker encoder with random factors of the planned shapes.
    pub fn random_kron(arch: &ArchSpec, plan: &CompressionPlan, rng: &mut Rng) -> Result<Self> {
        plan.validate(arch)?;
        let mut m = Self::random_dense(arch, rng)?;
        let pair = |rng: &mut Rng, s: FactorShape| {
            let std_a = 1.0 / (s.n1 as f64).sqrt();
            let std_b = 1.0 / (s.n2 as f64).sqrt();
            Linear::Kron(KronFactorPair::new(
                rng.normal_matrix(s.m1, s.n1, std_a),
                rng.normal_matrix(s.m2, s.n2, std_b),
            ))
        };
        let es = plan.embedding_shape(arch);
        m.embedding = Embedding::Kron(KronEmbedding::new(
            rng.normal_matrix(es.m1, es.n1, 1.0),
            rng.normal_matrix(1, es.n2, 1.0),
        )?);
        for layer in &mut m.layers {
            for w in [
                &mut layer.attn.wq,
                &mut layer.attn.wk,
                &mut layer.attn.wv,
                &mut layer.attn.wo,
            ] {
                *w = pair(rng, plan.attention_shape);
            }
            layer.ffn.w1 = pair(rng, plan.ffn1_shape);
            layer.ffn.w2 = pair(rng, plan.ffn2_shape);
        }
        Ok(m)
    }

    pub fn hidden(&self) -> usize {
        self.embedding.dim()
    }

    pub fn num_labels(&self) -> usize {
        self.head_weight.rows()
    }

    pub fn arch(&self) -> ArchSpec {
        let ffn_dim = self
            .layers
            .first()
            .map_or(self.hidden(), |l| l.ffn.w1.rows());
        ArchSpec {
            vocab_size: self.embedding.vocab(),
            hidden: self.hidden(),
            layers: self.layers.len(),
            heads: self.heads,
            ffn_dim,
            max_seq_len: self.position.rows(),
            position_embeddings: true,
            segment_embeddings: false,
            layernorm: true,
            biases: true,
            pooler: false,
            num_labels: self.num_labels(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.embedding, Embedding::Dense(_))
            && self.layers.iter().all(|l| {
                [
                    &l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo, &l.ffn.w1, &l.ffn.w2,
                ]
                .iter()
                .all(|w| matches!(w, Linear::Dense(_)))
            })
    }

    /// Same model with every factored weight multiplied out.
    pub fn densified(&self) -> Self {
        let mut m = self.clone();
        m.embedding = Embedding::Dense(self.embedding.to_dense());
        for l in &mut m.layers {
            for w in [
                &mut l.attn.wq,
                &mut l.attn.wk,
                &mut l.attn.wv,
                &mut l.attn.wo,
                &mut l.ffn.w1,
                &mut l.ffn.w2,
            ] {
                *w = Linear::Dense(w.to_dense());
            }
        }
        m
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    /// Every trainable tensor with its checkpoint name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        match &self.embedding {
            Embedding::Dense(t) => f("embedding.dense".into(), t),
            Embedding::Kron(e) => {
                f("embedding.table".into(), &e.table);
                f("embedding.row".into(), &e.row);
            }
        }
        f("embedding.position".into(), &self.position);
        f("embedding.ln.gamma".into(), &self.embedding_norm.gamma);
        f("embedding.ln.beta".into(), &self.embedding_norm.beta);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{i}.attn");
            l.attn.wq.visit(&format!("{p}.wq"), f);
            l.attn.wk.visit(&format!("{p}.wk"), f);
            l.attn.wv.visit(&format!("{p}.wv"), f);
            l.attn.wo.visit(&format!("{p}.wo"), f);
            f(format!("{p}.bq"), &l.attn.bq);
            f(format!("{p}.bk"), &l.attn.bk);
            f(format!("{p}.bv"), &l.attn.bv);
            f(format!("{p}.bo"), &l.attn.bo);
            f(format!("{p}.ln.gamma"), &l.attn_norm.gamma);
            f(format!("{p}.ln.beta"), &l.attn_norm.beta);
            let p = format!("layer.{i}.ffn");
            l.ffn.w1.visit(&format!("{p}.w1"), f);
            f(format!("{p}.b1"), &l.ffn.b1);
            l.ffn.w2.visit(&format!("{p}.w2"), f);
            f(format!("{p}.b2"), &l.ffn.b2);
            f(format!("{p}.ln.gamma"), &l.ffn_norm.gamma);
            f(format!("{p}.ln.beta"), &l.ffn_norm.beta);
        }
        f("head.weight".into(), &self.head_weight);
        f("head.bias".into(), &self.head_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match &mut self.embedding {
            Embedding::Dense(t) => f("embedding.dense", t),
            Embedding::Kron(e) => {
                f("embedding.table", &mut e.table);
                f("embedding.row", &mut e.row);
            }
        }
        f("embedding.position", &mut self.position);
        f("embedding.ln.gamma", &mut self.embedding_norm.gamma);
        f("embedding.ln.beta", &mut self.embedding_norm.beta);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layer.{i}.attn");
            l.attn.wq.visit_mut(&format!("{p}.wq"), f);
            l.attn.wk.visit_mut(&format!("{p}.wk"), f);
            l.attn.wv.visit_mut(&format!("{p}.wv"), f);
            l.attn.wo.visit_mut(&format!("{p}.wo"), f);
            f(&format!("{p}.bq"), &mut l.attn.bq);
            f(&format!("{p}.bk"), &mut l.attn.bk);
            f(&format!("{p}.bv"), &mut l.attn.bv);
            f(&format!("{p}.bo"), &mut l.attn.bo);
            f(&format!("{p}.ln.gamma"), &mut l.attn_norm.gamma);
            f(&format!("{p}.ln.beta"), &mut l.attn_norm.beta);
            let p = format!("layer.{i}.ffn");
            l.ffn.w1.visit_mut(&format!("{p}.w1"), f);
            f(&format!("{p}.b1"), &mut l.ffn.b1);
            l.ffn.w2.visit_mut(&format!("{p}.w2"), f);
            f(&format!("{p}.b2"), &mut l.ffn.b2);
            f(&format!("{p}.ln.gamma"), &mut l.ffn_norm.gamma);
            f(&format!("{p}.ln.beta"), &mut l.ffn_norm.beta);
        }
        f("head.weight", &mut self.head_weight);
        f("head.bias", &mut self.head_bias);
    }

    pub fn to_store(&self) -> NamedTensorStore {
        let mut s = NamedTensorStore::new();
        s.insert("meta.heads", Matrix::filled(1, 1, self.heads as f64));
        self.visit(&mut |name, m| {
            s.insert(name, m.clone());
        });
        s
    }

    pub fn from_store(store: &NamedTensorStore) -> Result<Self> {
        let heads = store.require("meta.heads")?.as_slice()[0];
        if !(heads >= 1.0 && heads.fract() == 0.0) {
            return Err(Error::Config(format!(
                "meta.heads must be a positive integer, got {heads}"
            )));
        }
        let get = |n: &str| store.require(n).cloned();
        let embedding = match store.get("embedding.dense") {
            Some(t) => Embedding::Dense(t.clone()),
            None => Embedding::Kron(KronEmbedding::new(
                get("embedding.table")?,
                get("embedding.row")?,
            )?),
        };
        let norm = |p: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: get(&format!("{p}.ln.gamma"))?,
                beta: get(&format!("{p}.ln.beta"))?,
            })
        };
        let mut layers = Vec::new();
        let mut i = 0;
        while store.contains(&format!("layer.{i}.attn.bq")) {
            let p = format!("layer.{i}.attn");
            let attn = AttentionWeights {
                wq: Linear::from_store(store, &format!("{p}.wq"))?,
                wk: Linear::from_store(store, &format!("{p}.wk"))?,
                wv: Linear::from_store(store, &format!("{p}.wv"))?,
                wo: Linear::from_store(store, &format!("{p}.wo"))?,
                bq: get(&format!("{p}.bq"))?,
                bk: get(&format!("{p}.bk"))?,
                bv: get(&format!("{p}.bv"))?,
                bo: get(&format!("{p}.bo"))?,
            };
            let attn_norm = norm(&p)?;
            let p = format!("layer.{i}.ffn");
            let ffn = FfnWeights {
                w1: Linear::from_store(store, &format!("{p}.w1"))?,
                b1: get(&format!("{p}.b1"))?,
                w2: Linear::from_store(store, &format!("{p}.w2"))?,
                b2: get(&format!("{p}.b2"))?,
            };
            layers.push(EncoderLayer {
                attn,
                attn_norm,
                ffn,
                ffn_norm: norm(&p)?,
            });
            i += 1;
        }
        let m = Self {
            heads: heads as usize,
            embedding,
            position: get("embedding.position")?,
            embedding_norm: norm("embedding")?,
            layers,
            head_weight: get("head.weight")?,
            head_bias: get("head.bias")?,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks every tensor against the shapes implied by the embedding width,
    /// the FFN width and the head count.
    pub fn validate(&self) -> Result<()> {
        let d = self.hidden();
        let bad = |name: &str, m: &Matrix, r: usize, c: usize| -> Result<()> {
            if m.shape() != (r, c) {
                return Err(Error::shape(
                    "model",
                    format!("`{name}` is {}x{}, expected {r}x{c}", m.rows(), m.cols()),
                ));
            }
            Ok(())
        };
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide width {d}",
                self.heads
            )));
        }
        if let Embedding::Kron(e) = &self.embedding {
            bad("embedding.row", &e.row, 1, e.row.cols())?;
        }
        bad(
            "embedding.position",
            &self.position,
            self.position.rows(),
            d,
        )?;
        bad("embedding.ln.gamma", &self.embedding_norm.gamma, 1, d)?;
        bad("embedding.ln.beta", &self.embedding_norm.beta, 1, d)?;
        let ffn_dim = self.layers.first().map_or(d, |l| l.ffn.w1.rows());
        for (i, l) in self.layers.iter().enumerate() {
            let lin = |name: &str, w: &Linear, r: usize, c: usize| {
                if (w.rows(), w.cols()) != (r, c) {
                    return Err(Error::shape(
                        "model",
                        format!(
                            "`layer.{i}.{name}` is {}x{}, expected {r}x{c}",
                            w.rows(),
                            w.cols()
                        ),
                    ));
                }
                Ok(())
            };
            lin("attn.wq", &l.attn.wq, d, d)?;
            lin("attn.wk", &l.attn.wk, d, d)?;
            lin("attn.wv", &l.attn.wv, d, d)?;
            lin("attn.wo", &l.attn.wo, d, d)?;
            lin("ffn.w1", &l.ffn.w1, ffn_dim, d)?;
            lin("ffn.w2", &l.ffn.w2, d, ffn_dim)?;
        }
        let labels = self.head_weight.rows();
        bad("head.weight", &self.head_weight, labels, d)?;
        bad("head.bias", &self.head_bias, 1, labels)?;
        // biases and norms are checked by name through the visitor
        let mut res = Ok(());
        self.visit(&mut |name, m| {
            if res.is_err() {
                return;
            }
            let want = if name.ends_with(".b1") {
                Some((1, ffn_dim))
            } else if name.ends_with(".bq")
                || name.ends_with(".bk")
                || name.ends_with(".bv")
                || name.ends_with(".bo")
                || name.ends_with(".b2")
                || name.ends_with(".gamma")
                || name.ends_with(".beta")
            {
                Some((1, d))
            } else {
                None
            };
            if let Some((r, c)) = want {
                res = bad(&name, m, r, c);
            }
        });
        res
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::shape("forward", "empty token list"));
        }
        if ids.len() > self.position.rows() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} tokens exceed max_seq_len {}",
                    ids.len(),
                    self.position.rows()
                ),
            ));
        }
        Ok(())
    }

    pub fn embed(&self, ids: &[usize]) -> Result<Matrix> {
        self.check_ids(ids)?;
        let tok = self.embedding.lookup(ids)?;
        let pos = Matrix::new(
            ids.len(),
            tok.cols(),
            self.position.as_slice()[..tok.len()].to_vec(),
        )?;
        Ok(self.embedding_norm.apply(&tok.add(&pos)?))
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardTrace> {
        let embedding = self.embed(ids)?;
        let mut x = embedding.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let att = attention_forward(&l.attn, &x, self.heads)?;
            let attention_norm = l.attn_norm.apply(&x.add(&att.output)?);
            let hidden = ffn_forward(&l.ffn, &l.ffn_norm, &attention_norm)?;
            x = hidden.clone();
            layers.push(LayerTrace {
                scores: att.scores,
                probs: att.probs,
                attention: att.output,
                attention_norm,
                hidden,
            });
        }
        let pooled = Matrix::from_fn(1, x.cols(), |_, j| {
            (0..x.rows()).map(|i| x[(i, j)]).sum::<f64>() / x.rows() as f64
        });
        let logits = add_bias(pooled.matmul_t(&self.head_weight)?, &self.head_bias);
        Ok(ForwardTrace {
            embedding,
            layers,
            logits,
        })
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let mut named = IndexMap::new();
        self.visit(&mut |name, m| {
            named.insert(name, tape.param(m.clone()));
        });
        ModelVars { named }
    }

    /// Forward on `tape` using parameters from [`TransformerModel::register`].
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        ids: &[usize],
    ) -> Result<TapeTrace> {
        self.check_ids(ids)?;
        let v = |n: &str| vars.get(n);
        let tok = match &self.embedding {
            Embedding::Dense(_) => tape.gather(ids, v("embedding.dense"))?,
            Embedding::Kron(_) => tape.kron_embed(ids, v("embedding.table"), v("embedding.row"))?,
        };
        let pos = tape.take_rows(v("embedding.position"), ids.len())?;
        let sum = tape.add(tok, pos)?;
        let embedding =
            tape.layer_norm(sum, v("embedding.ln.gamma"), v("embedding.ln.beta"), LN_EPS)?;

        let d = self.hidden();
        let dk = d / self.heads;
        let mut x = embedding;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{i}.attn");
            let q = linear_tape(tape, vars, &l.attn.wq, &format!("{p}.wq"), x)?;
            let q = tape.add_row(q, v(&format!("{p}.bq")))?;
            let k = linear_tape(tape, vars, &l.attn.wk, &format!("{p}.wk"), x)?;
            let k = tape.add_row(k, v(&format!("{p}.bk")))?;
            let val = linear_tape(tape, vars, &l.attn.wv, &format!("{p}.wv"), x)?;
            let val = tape.add_row(val, v(&format!("{p}.bv")))?;
            let mut scores = Vec::with_capacity(self.heads);
            let mut ctxs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * dk, dk)?;
                let kh = tape.slice_cols(k, h * dk, dk)?;
                let vh = tape.slice_cols(val, h * dk, dk)?;
                let raw = tape.matmul_t(qh, kh)?;
                let o = tape.scale(raw, 1.0 / (dk as f64).sqrt());
                let pr = tape.softmax_rows(o);
                ctxs.push(tape.matmul(pr, vh)?);
                scores.push(o);
            }
            let concat = tape.concat_cols(&ctxs)?;
            let a = linear_tape(tape, vars, &l.attn.wo, &format!("{p}.wo"), concat)?;
            let attention = tape.add_row(a, v(&format!("{p}.bo")))?;
            let res = tape.add(x, attention)?;
            let attention_norm = tape.layer_norm(
                res,
                v(&format!("{p}.ln.gamma")),
                v(&format!("{p}.ln.beta")),
                LN_EPS,
            )?;

            let p = format!("layer.{i}.ffn");
            let h1 = linear_tape(tape, vars, &l.ffn.w1, &format!("{p}.w1"), attention_norm)?;
            let h1 = tape.add_row(h1, v(&format!("{p}.b1")))?;
            let g = tape.gelu(h1);
            let h2 = linear_tape(tape, vars, &l.ffn.w2, &format!("{p}.w2"), g)?;
            let h2 = tape.add_row(h2, v(&format!("{p}.b2")))?;
            let res = tape.add(attention_norm, h2)?;
            let hidden = tape.layer_norm(
                res,
                v(&format!("{p}.ln.gamma")),
                v(&format!("{p}.ln.beta")),
                LN_EPS,
            )?;
            x = hidden;
            layers.push(TapeLayer {
                scores,
                attention,
                attention_norm,
                hidden,
            });
        }
        let pooled = tape.mean_rows(x);
        let z = tape.matmul_t(pooled, v("head.weight"))?;
        let logits = tape.add_row(z, v("head.bias"))?;
        Ok(TapeTrace {
            embedding,
            layers,
            logits,
        })
    }
}

fn linear_tape(tape: &mut Tape, vars: &ModelVars, w: &Linear, name: &str, x: Var) -> Result<Var> {
    match w {
        Linear::Dense(_) => tape.matmul_t(x, vars.get(&format!("{name}.dense"))),
        Linear::Kron(_) => tape.kron_rows(
            x,
            vars.get(&format!("{name}.a")),
            vars.get(&format!("{name}.b")),
        ),
    }
}

/// Tape handles of a model's parameters, keyed by checkpoint name.
pub struct ModelVars {
    pub named: IndexMap<String, Var>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Var {
        self.named[name]
    }
}

pub struct TapeLayer {
    pub scores: Vec<Var>,
    pub attention: Var,
    pub attention_norm: Var,
    pub hidden: Var,
}

pub struct TapeTrace {
    pub embedding: Var,
    pub layers: Vec<TapeLayer>,
    pub logits: Var,
}

fn is_trivial(s: FactorShape) -> bool {
    s.m2 == 1 && s.n2 == 1
}

/// Factors every planned weight group of a dense teacher by nearest
/// Kronecker product. Groups whose plan is trivial, and everything outside
/// the plan, are copied.
pub fn init_student_from_teacher(
    teacher: &TransformerModel,
    plan: &CompressionPlan,
    opts: NkpOptions,
    rng: &mut Rng,
) -> Result<(TransformerModel, Vec<FactorReport>)> {
    if !teacher.is_dense() {
        return Err(Error::Config("teacher must have dense weights".into()));
    }
    let arch = teacher.arch();
    plan.validate(&arch)?;
    let mut student = teacher.clone();
    let mut reports = Vec::new();

    let mut factor =
        |name: &str, w: &Matrix, shape: FactorShape, rng: &mut Rng| -> Result<KronFactorPair> {
            let r = nearest_kronecker(w, shape, opts, rng).map_err(|e| Error::Factorize {
                weight: name.to_owned(),
                source: Box::new(e),
            })?;
            reports.push(FactorReport {
                name: name.to_owned(),
                shape,
                residual: r.residual,
                relative_residual: r.relative_residual(w),
                iterations: r.iterations,
            });
            Ok(r.factors)
        };

    let es = plan.embedding_shape(&arch);
    if !is_trivial(es) {
        let p = factor("embedding", &teacher.embedding.to_dense(), es, rng)?;
        student.embedding = Embedding::Kron(KronEmbedding::new(p.a, p.b)?);
    }
    for (i, l) in student.layers.iter_mut().enumerate() {
        let groups: [(&str, &mut Linear, FactorShape); 6] = [
            ("attn.wq", &mut l.attn.wq, plan.attention_shape),
            ("attn.wk", &mut l.attn.wk, plan.attention_shape),
            ("attn.wv", &mut l.attn.wv, plan.attention_shape),
            ("attn.wo", &mut l.attn.wo, plan.attention_shape),
            ("ffn.w1", &mut l.ffn.w1, plan.ffn1_shape),
            ("ffn.w2", &mut l.ffn.w2, plan.ffn2_shape),
        ];
        for (name, w, shape) in groups {
            if is_trivial(shape) {
                continue;
            }
            let dense = w.to_dense();
            *w = Linear::Kron(factor(&format!("layer.{i}.{name}"), &dense, shape, rng)?);
        }
    }
    Ok((student, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ArchSpec {
        ArchSpec::toy()
    }

    fn toy_plan() -> CompressionPlan {
        CompressionPlan::new(
            FactorShape::new(4, 4, 8, 8),
            FactorShape::new(8, 4, 8, 8),
            4,
        )
    }

    fn random_ids(rng: &mut Rng, vocab: usize, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.below(vocab)).collect()
    }

    /// Nonzero biases and norms so every parameter matters.
    fn perturb(m: &mut TransformerModel, rng: &mut Rng) {
        m.visit_mut(&mut |name, w| {
            if name.contains(".b") || name.contains(".ln.") || name == "head.bias" {
                let noise = rng.normal_matrix(w.rows(), w.cols(), 0.1);
                w.add_assign(&noise).unwrap();
            }
        });
    }

    #[test]
    fn embed_hand_cases() {
        let e = KronEmbedding::new(Matrix::from_rows(&[[1.0]]), Matrix::filled(1, 5, 1.0)).unwrap();
        assert_eq!(embed(&e, &[0]).unwrap().as_slice(), &[1.0; 5]);
        let e = KronEmbedding::new(
            Matrix::from_rows(&[[2.0, 3.0]]),
            Matrix::from_rows(&[[1.0, 10.0]]),
        )
        .unwrap();
        assert_eq!(embed(&e, &[0]).unwrap().as_slice(), &[2.0, 20.0, 3.0, 30.0]);
        assert!(matches!(
            embed(&e, &[1]),
            Err(Error::Index { id: 1, vocab: 1 })
        ));
    }

    #[test]
    fn embed_matches_reconstructed_table() {
        let mut rng = Rng::new(0);
        let e = KronEmbedding::new(rng.normal_matrix(10, 3, 1.0), rng.normal_matrix(1, 4, 1.0))
            .unwrap();
        let ids: Vec<usize> = (0..10).collect();
        let got = embed(&e, &ids).unwrap();
        assert!(got.max_abs_diff(&e.to_dense()) == 0.0);
        let mut c = FlopCounter::default();
        embed_counted(&e, &ids, &mut c).unwrap();
        assert_eq!((c.muls, c.adds), (120, 0));
    }

    #[test]
    fn single_token_attention() {
        let mut rng = Rng::new(1);
        let m = TransformerModel::random_dense(&toy(), &mut rng).unwrap();
        let x = rng.normal_matrix(1, 32, 1.0);
        let a = attention_forward(&m.layers[0].attn, &x, 2).unwrap();
        assert!(a
            .probs
            .iter()
            .all(|p| p.shape() == (1, 1) && (p.as_slice()[0] - 1.0).abs() < 1e-15));
        let v = m.layers[0].attn.wv.apply(&x).unwrap();
        let expect = m.layers[0].attn.wo.apply(&v).unwrap();
        assert!(a.output.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn zero_weights() {
        let d = 8;
        let z = || Linear::Dense(Matrix::zeros(d, d));
        let attn = AttentionWeights {
            wq: z(),
            wk: z(),
            wv: z(),
            wo: z(),
            bq: Matrix::zeros(1, d),
            bk: Matrix::zeros(1, d),
            bv: Matrix::zeros(1, d),
            bo: Matrix::zeros(1, d),
        };
        let mut rng = Rng::new(2);
        let x = rng.normal_matrix(3, d, 1.0);
        let a = attention_forward(&attn, &x, 2).unwrap();
        assert_eq!(a.output.max_abs(), 0.0);
        assert!(a.scores.iter().all(|o| o.max_abs() == 0.0));
        assert!(a
            .probs
            .iter()
            .all(|p| p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15)));

        let ffn = FfnWeights {
            w1: z(),
            b1: Matrix::zeros(1, d),
            w2: z(),
            b2: Matrix::zeros(1, d),
        };
        let ln = LayerNorm::identity(d);
        assert!(
            ffn_forward(&ffn, &ln, &x)
                .unwrap()
                .max_abs_diff(&ln.apply(&x))
                < 1e-15
        );
    }

    #[test]
    fn identity_ffn_is_gelu_passthrough() {
        let d = 4;
        let id = KronFactorPair::new(Matrix::identity(2), Matrix::identity(2));
        let ffn = FfnWeights {
            w1: Linear::Kron(id.clone()),
            b1: Matrix::zeros(1, d),
            w2: Linear::Kron(id),
            b2: Matrix::zeros(1, d),
        };
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0, 0.0]]);
        let ln = LayerNorm::identity(d);
        let expect = ln.apply(&x.add(&x.map(gelu)).unwrap());
        assert!(ffn_forward(&ffn, &ln, &x).unwrap().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn trace_shapes() {
        let arch = ArchSpec { layers: 1, ..toy() };
        let m = TransformerModel::random_dense(&arch, &mut Rng::new(3)).unwrap();
        let t = m.forward(&[5]).unwrap();
        assert_eq!(t.embedding.shape(), (1, 32));
        assert_eq!(t.layers.len(), 1);
        assert!(t.layers[0].scores.iter().all(|o| o.shape() == (1, 1)));
        assert_eq!(t.layers[0].hidden.shape(), (1, 32));
        assert_eq!(t.logits.shape(), (1, 2));
    }

    #[test]
    fn kron_model_equals_its_densified_twin() {
        let mut rng = Rng::new(4);
        let mut k = TransformerModel::random_kron(&toy(), &toy_plan(), &mut rng).unwrap();
        perturb(&mut k, &mut rng);
        let d = k.densified();
        for _ in 0..10 {
            let len = rng.int_in(1, 16);
            let ids = random_ids(&mut rng, 64, len);
            let (a, b) = (k.forward(&ids).unwrap(), d.forward(&ids).unwrap());
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_normalized_and_finite() {
        let mut rng = Rng::new(5);
        let m = TransformerModel::random_dense(&toy(), &mut rng).unwrap();
        for _ in 0..100 {
            let len = rng.int_in(1, 16);
            let t = m.forward(&random_ids(&mut rng, 64, len)).unwrap();
            assert!(t.is_finite());
            assert!(t.softmax_defect() < 1e-9);
        }
    }

    #[test]
    fn tape_forward_matches_value_forward() {
        let mut rng = Rng::new(6);
        let mut k = TransformerModel::random_kron(&toy(), &toy_plan(), &mut rng).unwrap();
        perturb(&mut k, &mut rng);
        for m in [k.clone(), k.densified()] {
            let ids = random_ids(&mut rng, 64, 7);
            let t = m.forward(&ids).unwrap();
            let mut tape = Tape::new();
            let vars = m.register(&mut tape);
            let tt = m.forward_tape(&mut tape, &vars, &ids).unwrap();
            assert!(tape.value(tt.embedding).max_abs_diff(&t.embedding) < 1e-12);
            assert!(tape.value(tt.logits).max_abs_diff(&t.logits) < 1e-12);
            for (a, b) in tt.layers.iter().zip(&t.layers) {
                assert!(tape.value(a.hidden).max_abs_diff(&b.hidden) < 1e-12);
                assert!(tape.value(a.attention).max_abs_diff(&b.attention) < 1e-12);
                for (o, p) in a.scores.iter().zip(&b.scores) {
                    assert!(tape.value(*o).max_abs_diff(p) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn store_round_trip() {
        let mut rng = Rng::new(7);
        let k = TransformerModel::random_kron(&toy(), &toy_plan(), &mut rng).unwrap();
        let s = k.to_store();
        assert!(s.contains("layer.1.attn.wq.a") && s.contains("embedding.row"));
        assert_eq!(TransformerModel::from_store(&s).unwrap(), k);
        let d = TransformerModel::random_dense(&toy(), &mut rng).unwrap();
        assert_eq!(TransformerModel::from_store(&d.to_store()).unwrap(), d);

        let mut broken = s.clone();
        broken.insert("layer.0.ffn.b1", Matrix::zeros(1, 3));
        assert!(TransformerModel::from_store(&broken).is_err());
    }

    #[test]
    fn exact_product_teacher_is_recovered() {
        let mut rng = Rng::new(8);
        let mut k = TransformerModel::random_kron(&toy(), &toy_plan(), &mut rng).unwrap();
        perturb(&mut k, &mut rng);
        let teacher = k.densified();
        let (student, reports) =
            init_student_from_teacher(&teacher, &toy_plan(), NkpOptions::default(), &mut rng)
                .unwrap();
        assert_eq!(reports.len(), 1 + 6 * 2);
        assert!(reports.iter().all(|r| r.relative_residual < 1e-9));
        for _ in 0..5 {
            let ids = random_ids(&mut rng, 64, 9);
            let d = teacher
                .forward(&ids)
                .unwrap()
                .max_abs_diff(&student.forward(&ids).unwrap());
            assert!(d < 1e-8, "{d}");
        }
    }

    #[test]
    fn trivial_plan_copies_teacher() {
        let mut rng = Rng::new(9);
        let teacher = TransformerModel::random_dense(&toy(), &mut rng).unwrap();
        let plan = CompressionPlan::trivial(&toy());
        let (student, reports) =
            init_student_from_teacher(&teacher, &plan, NkpOptions::default(), &mut rng).unwrap();
        assert!(reports.is_empty());
        assert_eq!(student, teacher);
    }

    #[test]
    fn random_teacher_residuals_match_nkp() {
        let mut rng = Rng::new(10);
        let teacher = TransformerModel::random_dense(&toy(), &mut rng).unwrap();
        let plan = toy_plan();
        let (student, reports) =
            init_student_from_teacher(&teacher, &plan, NkpOptions::default(), &mut Rng::new(1))
                .unwrap();
        let w = teacher.layers[1].ffn.w2.to_dense();
        let r = reports.iter().find(|r| r.name == "layer.1.ffn.w2").unwrap();
        let got = w
            .sub(&student.layers[1].ffn.w2.to_dense())
            .unwrap()
            .frobenius_norm();
        assert!((got - r.residual).abs() <= 1e-12 * w.frobenius_norm());
    }

    #[test]
    fn shared_b_head_permutation_moves_blocks_of_a() {
        // d = 8, 2 heads of width 4, m2 = 2 divides d_k
        let mut rng = Rng::new(11);
        let pair = KronFactorPair::new(rng.normal_matrix(4, 2, 1.0), rng.normal_matrix(2, 4, 1.0));
        let dense = kron_product(&pair);
        let swapped_dense = Matrix::from_fn(8, 8, |i, j| dense[((i + 4) % 8, j)]);
        let a = &pair.a;
        let swapped_a = Matrix::from_fn(4, 2, |i, j| a[((i + 2) % 4, j)]);
        let rebuilt = kron_product(&KronFactorPair::new(swapped_a, pair.b.clone()));
        assert_eq!(rebuilt, swapped_dense);
    }
}
