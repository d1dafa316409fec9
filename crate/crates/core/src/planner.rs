//! Factor-shape planning and whole-model cost accounting.
//!
//! Parameter totals count every group named by [`ArchSpec`] flags. Only the
//! token embedding and the six per-layer weight matrices (`W^Q`, `W^K`, `W^V`,
//! `W^O`, `W_1`, `W_2`) are ever factored; everything else stays dense.
//!
//! FLOP totals use one multiply = one add = 1 FLOP. An `m×n` dense matvec
//! costs `(2n−1)m`; a Kronecker matvec costs [`kron_flops`]. Two conventions
//! are reported, see [`FlopConvention`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kron::{dense_matvec_flops, kron_flops};

/// Segment (token-type) vocabulary when segment embeddings are enabled.
pub const SEGMENT_TYPES: usize = 2;

/// Shapes of `A: m1×n1` and `B: m2×n2` for a weight of shape `(m1·m2)×(n1·n2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactorShape {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
}

impl FactorShape {
    pub const fn new(m1: usize, n1: usize, m2: usize, n2: usize) -> Self {
        Self { m1, n1, m2, n2 }
    }

    /// Shape for a `rows×cols` weight given the first factor's shape.
    pub fn for_weight(rows: usize, cols: usize, m1: usize, n1: usize) -> Result<Self> {
        let s = Self {
            m1,
            n1,
            m2: rows.checked_div(m1).unwrap_or(0),
            n2: cols.checked_div(n1).unwrap_or(0),
        };
        s.check_against(rows, cols)?;
        Ok(s)
    }

    pub fn rows(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn cols(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn params(&self) -> usize {
        self.m1 * self.n1 + self.m2 * self.n2
    }

    pub fn flops(&self) -> u64 {
        kron_flops(*self)
    }

    /// The shape of the transposed weight: `(A⊗B)ᵀ = Aᵀ⊗Bᵀ`.
    pub fn transposed(&self) -> Self {
        Self {
            m1: self.n1,
            n1: self.m1,
            m2: self.n2,
            n2: self.m2,
        }
    }

    /// A shape that leaves the weight whole (`B` is 1×1).
    pub fn trivial(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, 1, 1)
    }

    pub fn is_valid(&self) -> bool {
        self.m1 > 0 && self.n1 > 0 && self.m2 > 0 && self.n2 > 0
    }

    pub fn check_against(&self, rows: usize, cols: usize) -> Result<()> {
        if !self.is_valid() {
            return Err(Error::shape(
                "factor shape",
                format!("{self} has a zero dimension"),
            ));
        }
        if self.rows() != rows {
            return Err(Error::shape(
                "factor shape",
                format!("{self}: m1·m2 = {} does not equal {rows} rows", self.rows()),
            ));
        }
        if self.cols() != cols {
            return Err(Error::shape(
                "factor shape",
                format!("{self}: n1·n2 = {} does not equal {cols} cols", self.cols()),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for FactorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}x{})⊗({}x{})", self.m1, self.n1, self.m2, self.n2)
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Every factorization of a `rows×cols` weight, cheapest matvec first; ties by
/// parameter count, then lexicographically.
pub fn enumerate_shapes(rows: usize, cols: usize) -> Vec<FactorShape> {
    let mut out = Vec::new();
    for m1 in divisors(rows) {
        for n1 in divisors(cols) {
            out.push(FactorShape::new(m1, n1, rows / m1, cols / n1));
        }
    }
    out.sort_by_key(|s| (s.flops(), s.params(), *s));
    out
}

fn default_true() -> bool {
    true
}

/// Encoder architecture. Field names are the JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_true")]
    pub position_embeddings: bool,
    #[serde(default)]
    pub segment_embeddings: bool,
    #[serde(default = "default_true")]
    pub layernorm: bool,
    #[serde(default = "default_true")]
    pub biases: bool,
    #[serde(default)]
    pub pooler: bool,
    /// Width of the classification head; 0 means no head is counted.
    #[serde(default)]
    pub num_labels: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: ArchSpec = serde_json::from_str(s)?;
        a.validate()?;
        Ok(a)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Small architecture used for desk-scale experiments and tests.
    pub fn toy() -> Self {
        Self {
            vocab_size: 64,
            hidden: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            max_seq_len: 16,
            position_embeddings: true,
            segment_embeddings: false,
            layernorm: true,
            biases: true,
            pooler: false,
            num_labels: 2,
        }
    }
}

/// Cost figures attached to a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanDerived {
    pub total_params: u64,
    pub dense_params: u64,
    /// Weight-layer FLOPs for one token (linear layers plus embedding).
    pub flops_per_token: u64,
    pub compression_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlan")]
pub struct CompressionPlan {
    /// Shared by `W^Q`, `W^K`, `W^V` and `W^O`.
    pub attention_shape: FactorShape,
    /// `W_1: ffn_dim × hidden`.
    pub ffn1_shape: FactorShape,
    /// `W_2: hidden × ffn_dim`, always `ffn1_shape.transposed()`.
    pub ffn2_shape: FactorShape,
    /// Length of the shared embedding row vector.
    pub embedding_n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<PlanDerived>,
}

#[derive(Deserialize)]
struct RawPlan {
    attention_shape: FactorShape,
    ffn1_shape: FactorShape,
    #[serde(default)]
    ffn2_shape: Option<FactorShape>,
    embedding_n: usize,
    #[serde(default)]
    derived: Option<PlanDerived>,
}

impl TryFrom<RawPlan> for CompressionPlan {
    type Error = String;

    fn try_from(raw: RawPlan) -> std::result::Result<Self, String> {
        let swapped = raw.ffn1_shape.transposed();
        if let Some(f2) = raw.ffn2_shape {
            if f2 != swapped {
                return Err(format!(
                    "ffn2_shape {f2} must be ffn1_shape with dimensions swapped ({swapped})"
                ));
            }
        }
        for s in [raw.attention_shape, raw.ffn1_shape] {
            if !s.is_valid() {
                return Err(format!("factor shape {s} has a zero dimension"));
            }
        }
        if raw.embedding_n == 0 {
            return Err("embedding_n must be positive".into());
        }
        Ok(CompressionPlan {
            attention_shape: raw.attention_shape,
            ffn1_shape: raw.ffn1_shape,
            ffn2_shape: swapped,
            embedding_n: raw.embedding_n,
            derived: raw.derived,
        })
    }
}

impl CompressionPlan {
    pub fn new(attention_shape: FactorShape, ffn1_shape: FactorShape, embedding_n: usize) -> Self {
        Self {
            attention_shape,
            ffn1_shape,
            ffn2_shape: ffn1_shape.transposed(),
            embedding_n,
            derived: None,
        }
    }

    /// Every group left whole: `B` is 1×1 everywhere.
    pub fn trivial(arch: &ArchSpec) -> Self {
        Self::new(
            FactorShape::trivial(arch.hidden, arch.hidden),
            FactorShape::trivial(arch.ffn_dim, arch.hidden),
            1,
        )
    }

    /// Shape of the token-embedding factorization `v×d = (v×d/n) ⊗ (1×n)`.
    pub fn embedding_shape(&self, arch: &ArchSpec) -> FactorShape {
        FactorShape::new(
            arch.vocab_size,
            arch.hidden / self.embedding_n,
            1,
            self.embedding_n,
        )
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        self.attention_shape
            .check_against(arch.hidden, arch.hidden)?;
        self.ffn1_shape.check_against(arch.ffn_dim, arch.hidden)?;
        self.ffn2_shape.check_against(arch.hidden, arch.ffn_dim)?;
        if self.ffn2_shape != self.ffn1_shape.transposed() {
            return Err(Error::Config(
                "ffn2_shape must be ffn1_shape swapped".into(),
            ));
        }
        if !arch.hidden.is_multiple_of(self.embedding_n) {
            return Err(Error::Config(format!(
                "embedding_n {} does not divide hidden {}",
                self.embedding_n, arch.hidden
            )));
        }
        Ok(())
    }

    /// Validates against `arch` and fills in [`PlanDerived`].
    pub fn with_derived(mut self, arch: &ArchSpec) -> Result<Self> {
        self.validate(arch)?;
        let total = count_params(arch, Some(&self)).total;
        let dense = count_params(arch, None).total;
        self.derived = Some(PlanDerived {
            total_params: total,
            dense_params: dense,
            flops_per_token: per_token_weight_flops(arch, Some(&self)),
            compression_factor: dense as f64 / total as f64,
        });
        Ok(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parameter totals by group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub token_embedding: u64,
    pub position_embedding: u64,
    pub segment_embedding: u64,
    pub layernorm: u64,
    pub attention: u64,
    pub ffn: u64,
    pub biases: u64,
    pub pooler: u64,
    pub classifier: u64,
    pub total: u64,
}

impl ParamReport {
    /// Groups that never get factored.
    pub fn uncompressed(&self) -> u64 {
        self.position_embedding
            + self.segment_embedding
            + self.layernorm
            + self.biases
            + self.pooler
            + self.classifier
    }
}

/// Exact parameter total for a dense model (`plan = None`) or a plan.
pub fn count_params(arch: &ArchSpec, plan: Option<&CompressionPlan>) -> ParamReport {
    let (v, d, f, layers) = (
        arch.vocab_size as u64,
        arch.hidden as u64,
        arch.ffn_dim as u64,
        arch.layers as u64,
    );
    let mut r = ParamReport::default();
    let (emb, att, ffn) = match plan {
        None => (v * d, d * d, 2 * d * f),
        Some(p) => (
            v * (d / p.embedding_n as u64) + p.embedding_n as u64,
            p.attention_shape.params() as u64,
            (p.ffn1_shape.params() + p.ffn2_shape.params()) as u64,
        ),
    };
    r.token_embedding = emb;
    r.attention = layers * 4 * att;
    r.ffn = layers * ffn;
    if arch.position_embeddings {
        r.position_embedding = arch.max_seq_len as u64 * d;
    }
    if arch.segment_embeddings {
        r.segment_embedding = SEGMENT_TYPES as u64 * d;
    }
    if arch.layernorm {
        // embedding LN + two per layer, each gamma and beta
        r.layernorm = 2 * d + layers * 4 * d;
    }
    let labels = arch.num_labels as u64;
    if arch.biases {
        r.biases = layers * (4 * d + f + d);
        if arch.pooler {
            r.biases += d;
        }
        r.biases += labels;
    }
    if arch.pooler {
        r.pooler = d * d;
    }
    r.classifier = labels * d;
    r.total = r.token_embedding + r.attention + r.ffn + r.uncompressed();
    r
}

/// Which terms make up [`FlopReport::total`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// Weight matmuls (attention and FFN projections, pooler, classifier) plus
    /// Kronecker embedding reconstruction.
    #[default]
    WeightsOnly,
    /// Additionally the score/context matmuls, score scaling and softmax
    /// (5 FLOPs per score entry).
    Full,
}

impl FlopConvention {
    pub fn describe(&self) -> &'static str {
        match self {
            FlopConvention::WeightsOnly => {
                "1 mul = 1 add = 1 FLOP; dense m×n matvec = (2n-1)m; Kronecker matvec = cheaper \
                 association order; totals count weight matmuls (Q,K,V,O,W1,W2 per token, pooler, \
                 classifier) and Kronecker embedding reconstruction (d muls per token); attention \
                 score/context matmuls, softmax, biases, layernorm and GELU excluded"
            }
            FlopConvention::Full => {
                "1 mul = 1 add = 1 FLOP; dense m×n matvec = (2n-1)m; Kronecker matvec = cheaper \
                 association order; totals count weight matmuls, Kronecker embedding \
                 reconstruction, attention scores QK^T and context PV per head, 1/sqrt(d_k) \
                 scaling and softmax at 5 FLOPs per score; biases, layernorm and GELU excluded"
            }
        }
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopConvention::WeightsOnly => "weights_only",
            FlopConvention::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub seq_len: u64,
    pub convention: FlopConvention,
    /// Q, K, V, O, W1, W2 over all tokens and layers.
    pub linear: u64,
    pub embedding: u64,
    pub pooler_and_head: u64,
    /// Score and context matmuls plus score scaling.
    pub attention_matmul: u64,
    pub softmax: u64,
    pub total: u64,
}

fn per_token_layer_flops(arch: &ArchSpec, plan: Option<&CompressionPlan>) -> u64 {
    let (d, f) = (arch.hidden, arch.ffn_dim);
    match plan {
        None => 4 * dense_matvec_flops(d, d) + dense_matvec_flops(f, d) + dense_matvec_flops(d, f),
        Some(p) => {
            4 * kron_flops(p.attention_shape) + kron_flops(p.ffn1_shape) + kron_flops(p.ffn2_shape)
        }
    }
}

fn embedding_flops_per_token(arch: &ArchSpec, plan: Option<&CompressionPlan>) -> u64 {
    match plan {
        None => 0,
        Some(_) => arch.hidden as u64,
    }
}

/// Linear-layer plus embedding FLOPs for a single token.
pub fn per_token_weight_flops(arch: &ArchSpec, plan: Option<&CompressionPlan>) -> u64 {
    arch.layers as u64 * per_token_layer_flops(arch, plan) + embedding_flops_per_token(arch, plan)
}

/// Forward-pass FLOPs for one sequence of `seq_len` tokens.
pub fn count_flops(
    arch: &ArchSpec,
    plan: Option<&CompressionPlan>,
    seq_len: usize,
    convention: FlopConvention,
) -> FlopReport {
    let s = seq_len as u64;
    let layers = arch.layers as u64;
    let heads = arch.heads as u64;
    let dk = arch.head_dim() as u64;
    let d = arch.hidden;

    let linear = layers * s * per_token_layer_flops(arch, plan);
    let embedding = s * embedding_flops_per_token(arch, plan);
    let mut pooler_and_head = 0;
    if arch.pooler {
        pooler_and_head += dense_matvec_flops(d, d);
    }
    if arch.num_labels > 0 {
        pooler_and_head += dense_matvec_flops(arch.num_labels, d);
    }
    // per head: scores s×s each (2dk−1), scaling s², context s×dk each (2s−1)
    let attention_matmul = layers * heads * (s * s * (2 * dk - 1) + s * s + s * dk * (2 * s - 1));
    let softmax = layers * heads * s * 5 * s;

    let weights = linear + embedding + pooler_and_head;
    let total = match convention {
        FlopConvention::WeightsOnly => weights,
        FlopConvention::Full => weights + attention_matmul + softmax,
    };
    FlopReport {
        seq_len: s,
        convention,
        linear,
        embedding,
        pooler_and_head,
        attention_matmul,
        softmax,
        total,
    }
}

/// Knobs for [`plan_for_ratio`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanSearch {
    /// Plans whose factor exceeds the closest achievable factor by more than
    /// this fraction are not considered to hit the target.
    pub slack: f64,
}

impl Default for PlanSearch {
    fn default() -> Self {
        Self { slack: 0.05 }
    }
}

struct Candidate {
    att: FactorShape,
    ffn: FactorShape,
    n: usize,
    params: u64,
    flops: u64,
}

/// Chooses per-group shapes reaching `target_ratio` at minimal per-token FLOPs.
///
/// A plan qualifies when its compression factor is at least `target_ratio`
/// and no more than `(1 + slack)` times the smallest qualifying factor, so the
/// chosen plan lands on the requested compression rather than overshooting
/// it. Among qualifying plans the cheapest wins; ties go to the larger model,
/// then to the lexicographically smallest shapes.
pub fn plan_for_ratio(
    arch: &ArchSpec,
    target_ratio: f64,
    search: PlanSearch,
) -> Result<CompressionPlan> {
    arch.validate()?;
    if !target_ratio.is_finite() || target_ratio <= 1.0 {
        return Err(Error::Config(format!(
            "target ratio must be a finite number > 1, got {target_ratio}"
        )));
    }
    let (d, f) = (arch.hidden, arch.ffn_dim);
    let layers = arch.layers as u64;
    let dense = count_params(arch, None);
    let fixed = dense.uncompressed();

    let att_shapes = enumerate_shapes(d, d);
    let ffn_shapes = enumerate_shapes(f, d);
    let emb_ns = divisors(d);
    let emb_params = |n: usize| arch.vocab_size as u64 * (d / n) as u64 + n as u64;

    let mut candidates = Vec::with_capacity(att_shapes.len() * ffn_shapes.len() * emb_ns.len());
    for &att in &att_shapes {
        let att_flops = 4 * att.flops();
        let att_params = 4 * att.params() as u64;
        for &ffn in &ffn_shapes {
            let ffn2 = ffn.transposed();
            let layer_flops = att_flops + ffn.flops() + ffn2.flops();
            let layer_params = att_params + (ffn.params() + ffn2.params()) as u64;
            for &n in &emb_ns {
                candidates.push(Candidate {
                    att,
                    ffn,
                    n,
                    params: layers * layer_params + emb_params(n) + fixed,
                    flops: layers * layer_flops + d as u64,
                });
            }
        }
    }

    let ratio = |c: &Candidate| dense.total as f64 / c.params as f64;
    let max_achievable = candidates.iter().map(ratio).fold(0.0, f64::max);
    let closest = candidates
        .iter()
        .map(ratio)
        .filter(|&r| r >= target_ratio)
        .fold(f64::INFINITY, f64::min);
    if !closest.is_finite() {
        return Err(Error::Infeasible {
            target: target_ratio,
            max_achievable,
        });
    }
    let ceiling = closest * (1.0 + search.slack);
    let best = candidates
        .iter()
        .filter(|c| {
            let r = ratio(c);
            r >= target_ratio && r <= ceiling
        })
        .min_by(|x, y| {
            x.flops
                .cmp(&y.flops)
                .then(y.params.cmp(&x.params))
                .then((x.att, x.ffn, x.n).cmp(&(y.att, y.ffn, y.n)))
        })
        .expect("at least the closest candidate qualifies");
    CompressionPlan::new(best.att, best.ffn, best.n).with_derived(arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_trivial_and_small() {
        assert_eq!(enumerate_shapes(1, 1), vec![FactorShape::new(1, 1, 1, 1)]);
        let s = enumerate_shapes(4, 4);
        assert_eq!(s.len(), 9);
        for w in s.windows(2) {
            assert!((w[0].flops(), w[0].params(), w[0]) <= (w[1].flops(), w[1].params(), w[1]));
        }
    }

    #[test]
    fn enumerated_shapes_reconstruct_dims() {
        for (r, c) in [(768, 768), (3072, 768), (12, 18), (7, 1)] {
            for s in enumerate_shapes(r, c) {
                assert_eq!((s.rows(), s.cols()), (r, c));
            }
        }
    }

    #[test]
    fn bert_attention_split_present() {
        let s = enumerate_shapes(768, 768);
        let hit = s
            .iter()
            .find(|s| **s == FactorShape::new(384, 384, 2, 2))
            .unwrap();
        assert_eq!(hit.flops(), 591_360);
    }

    #[test]
    fn transposed_involution() {
        let s = FactorShape::new(8, 2, 384, 384);
        assert_eq!(s.transposed().transposed(), s);
        assert_eq!(
            (s.transposed().rows(), s.transposed().cols()),
            (s.cols(), s.rows())
        );
    }

    #[test]
    fn plan_json_swaps_ffn2_and_rejects_mismatch() {
        let p = CompressionPlan::from_json(
            r#"{"attention_shape":{"m1":4,"n1":4,"m2":8,"n2":8},
                "ffn1_shape":{"m1":8,"n1":2,"m2":8,"n2":16},"embedding_n":4}"#,
        )
        .unwrap();
        assert_eq!(p.ffn2_shape, FactorShape::new(2, 8, 16, 8));
        let bad = CompressionPlan::from_json(
            r#"{"attention_shape":{"m1":4,"n1":4,"m2":8,"n2":8},
                "ffn1_shape":{"m1":8,"n1":2,"m2":8,"n2":16},
                "ffn2_shape":{"m1":8,"n1":2,"m2":8,"n2":16},"embedding_n":4}"#,
        );
        assert!(bad.is_err());
        let back = CompressionPlan::from_json(&p.to_json_pretty().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn toy_plans_compress() {
        let arch = ArchSpec::toy();
        let dense = count_params(&arch, None).total;
        let plan = CompressionPlan::new(
            FactorShape::new(4, 4, 8, 8),
            FactorShape::new(8, 4, 8, 8),
            4,
        );
        plan.validate(&arch).unwrap();
        assert!(count_params(&arch, Some(&plan)).total < dense);
    }

    #[test]
    fn infeasible_ratio_reports_maximum() {
        match plan_for_ratio(&ArchSpec::toy(), 1e9, PlanSearch::default()) {
            Err(Error::Infeasible { max_achievable, .. }) => assert!(max_achievable > 1.0),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn near_dense_target_stays_near_dense() {
        let arch = ArchSpec::toy();
        let plan = plan_for_ratio(&arch, 1.01, PlanSearch::default()).unwrap();
        let cf = plan.derived.unwrap().compression_factor;
        assert!((1.01..1.01 * 1.06).contains(&cf), "{cf}");
    }

    #[test]
    fn plan_reaudits_to_its_ratio() {
        let arch = ArchSpec::toy();
        for target in [1.5, 2.0, 4.0, 8.0] {
            let plan = plan_for_ratio(&arch, target, PlanSearch::default()).unwrap();
            let dense = count_params(&arch, None).total as f64;
            let ours = count_params(&arch, Some(&plan)).total as f64;
            assert!(dense / ours >= target, "{target}: {}", dense / ours);
        }
    }

    #[test]
    fn convention_changes_total_only() {
        let arch = ArchSpec::toy();
        let w = count_flops(&arch, None, 8, FlopConvention::WeightsOnly);
        let f = count_flops(&arch, None, 8, FlopConvention::Full);
        assert_eq!(w.linear, f.linear);
        assert_eq!(f.total, w.total + f.attention_matmul + f.softmax);
    }
}
