//! Wall-clock comparison of dense and Kronecker linear maps.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::kron::{dense_matvec_flops, kron_flops, kron_linear_rows, KronFactorPair};
use crate::planner::{ArchSpec, CompressionPlan, FactorShape};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub median_us: f64,
    pub iqr_us: f64,
}

impl Timing {
    pub fn from_samples(samples: &mut [f64]) -> Self {
        samples.sort_by(f64::total_cmp);
        Self {
            median_us: quantile(samples, 0.5),
            iqr_us: quantile(samples, 0.75) - quantile(samples, 0.25),
        }
    }
}

/// Linear interpolation between order statistics of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub group: String,
    pub shape: FactorShape,
    pub seq_len: usize,
    pub iters: usize,
    pub dense_flops: u64,
    pub kron_flops: u64,
    pub dense: Timing,
    pub kron: Timing,
}

fn time(iters: usize, mut f: impl FnMut()) -> Timing {
    let mut samples: Vec<f64> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    Timing::from_samples(&mut samples)
}

/// Times `seq_len` rows through one weight both ways.
pub fn bench_shape(
    group: &str,
    shape: FactorShape,
    seq_len: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<BenchRow> {
    let pair = KronFactorPair::new(
        rng.normal_matrix(shape.m1, shape.n1, 1.0),
        rng.normal_matrix(shape.m2, shape.n2, 1.0),
    );
    let dense = crate::kron::kron_product(&pair);
    let x = rng.normal_matrix(seq_len, shape.cols(), 1.0);
    let mut sink = 0.0;
    let d = time(iters, || {
        sink += x.matmul_t(&dense).expect("shapes agree").as_slice()[0]
    });
    let k = time(iters, || {
        sink += kron_linear_rows(&pair, &x)
            .expect("shapes agree")
            .as_slice()[0]
    });
    std::hint::black_box(sink);
    Ok(BenchRow {
        group: group.to_owned(),
        shape,
        seq_len,
        iters: iters.max(1),
        dense_flops: seq_len as u64 * dense_matvec_flops(shape.rows(), shape.cols()),
        kron_flops: seq_len as u64 * kron_flops(shape),
        dense: d,
        kron: k,
    })
}

/// One row per planned weight group.
pub fn bench_plan(
    arch: &ArchSpec,
    plan: &CompressionPlan,
    seq_len: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    plan.validate(arch)?;
    let mut rng = Rng::new(seed);
    let iters = iters.max(1);
    [
        ("attention", plan.attention_shape),
        ("ffn1", plan.ffn1_shape),
        ("ffn2", plan.ffn2_shape),
    ]
    .into_iter()
    .map(|(g, s)| bench_shape(g, s, seq_len, iters, &mut rng))
    .collect()
}
