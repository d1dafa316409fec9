use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde_json::json;

use kronekit_core::bench::bench_plan;
use kronekit_core::distill::{
    ablation, evaluate, history_to_jsonl, train, AblationConfig, AttentionFeature, KdConfig,
    LogitLoss, ProjectionHead, Stage, TrainConfig,
};
use kronekit_core::experiment::{factor_rng, toy_plan, ToySetup};
use kronekit_core::kron::{kron_matvec, kron_product};
use kronekit_core::model::{init_student_from_teacher, Embedding, Linear, TransformerModel};
use kronekit_core::nkp::NkpOptions;
use kronekit_core::planner::{
    count_flops, count_params, plan_for_ratio, FlopConvention, PlanSearch,
};
use kronekit_core::task::MajorityTask;
use kronekit_core::{
    ArchSpec, CompressionPlan, FactorShape, KronFactorPair, NamedTensorStore, Rng,
};

use crate::output::{billions, flops, millions, Format, Table};
use crate::{
    BenchArgs, CompressArgs, Ctx, DistillArgs, Failure, FeatureArg, LogitArg, PlanArgs, ReportArgs,
    StageArg, TeacherArgs, VerifyArgs,
};

type CmdResult = Result<(), Failure>;

/// Largest hidden width `distill` accepts.
const MAX_DISTILL_HIDDEN: usize = 256;

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(ctx: &Ctx, table: &Table, notes: &[String], value: serde_json::Value) {
    let body = match ctx.format {
        Format::Text => {
            let mut s = table.text();
            for n in notes {
                s.push_str(n);
                s.push('\n');
            }
            s
        }
        Format::Csv => table.csv(),
        Format::Json => serde_json::to_string_pretty(&value).expect("serializable") + "\n",
    };
    let _ = std::io::stdout().lock().write_all(body.as_bytes());
}

fn load_model(path: &Path) -> Result<TransformerModel, Failure> {
    let store = NamedTensorStore::load(path)?;
    TransformerModel::from_store(&store)
        .map_err(|e| Failure::from(e).context(format!("loading {}", path.display())))
}

impl Failure {
    fn context(self, msg: String) -> Self {
        Self {
            code: self.code,
            error: self.error.context(msg),
        }
    }
}

fn shape_cell(s: FactorShape) -> String {
    s.to_string()
}

pub fn plan(ctx: &Ctx, a: PlanArgs) -> CmdResult {
    let arch = ArchSpec::load(&a.arch)?;
    arch.validate()?;
    let plan = match (a.ratio, &a.shapes) {
        (Some(r), _) => plan_for_ratio(&arch, r, PlanSearch { slack: a.slack })?,
        (None, Some(p)) => CompressionPlan::load(p)?,
        (None, None) => return Err(Failure::new(2, anyhow!("pass --ratio or --shapes"))),
    };
    let plan = plan.with_derived(&arch)?;
    if let Some(out) = &a.out {
        fs::write(out, plan.to_json_pretty()? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    let dense = count_params(&arch, None);
    let comp = count_params(&arch, Some(&plan));
    let factor = dense.total as f64 / comp.total as f64;
    let layers = arch.layers as u64;

    let mut t = Table::new(&["group", "shape", "count", "params"]);
    let es = plan.embedding_shape(&arch);
    t.row(vec![
        "embedding".into(),
        shape_cell(es),
        "1".into(),
        comp.token_embedding.to_string(),
    ]);
    for (g, s, n) in [
        ("attention", plan.attention_shape, 4 * layers),
        ("ffn1", plan.ffn1_shape, layers),
        ("ffn2", plan.ffn2_shape, layers),
    ] {
        t.row(vec![
            g.into(),
            shape_cell(s),
            n.to_string(),
            (n * s.params() as u64).to_string(),
        ]);
    }
    t.row(vec![
        "uncompressed".into(),
        "-".into(),
        "-".into(),
        comp.uncompressed().to_string(),
    ]);

    let mut notes = vec![format!(
        "params: dense {} ({}), compressed {} ({}), compression factor {factor:.3}",
        dense.total,
        millions(dense.total),
        comp.total,
        millions(comp.total)
    )];
    let mut flops = serde_json::Map::new();
    for conv in [FlopConvention::WeightsOnly, FlopConvention::Full] {
        let fd = count_flops(&arch, None, a.seq_len, conv);
        let fc = count_flops(&arch, Some(&plan), a.seq_len, conv);
        notes.push(format!(
            "FLOPs at seq_len {} [{conv}]: dense {}, compressed {} ({:.2}x fewer)",
            a.seq_len,
            billions(fd.total),
            billions(fc.total),
            fd.total as f64 / fc.total as f64
        ));
        flops.insert(
            conv.to_string(),
            json!({ "dense": fd, "compressed": fc, "convention": conv.describe() }),
        );
    }
    notes.push(format!(
        "weights_only convention: {}",
        FlopConvention::WeightsOnly.describe()
    ));
    notes.push(format!(
        "full convention: {}",
        FlopConvention::Full.describe()
    ));
    emit(
        ctx,
        &t,
        &notes,
        json!({
            "plan": plan,
            "params": { "dense": dense, "compressed": comp },
            "compression_factor": factor,
            "seq_len": a.seq_len,
            "flops": flops,
        }),
    );
    Ok(())
}

pub fn report(ctx: &Ctx, a: ReportArgs) -> CmdResult {
    let arch = ArchSpec::load(&a.arch)?;
    arch.validate()?;
    let mut rows: Vec<(String, Option<CompressionPlan>)> = vec![("dense".into(), None)];
    for p in &a.plans {
        let plan = CompressionPlan::load(p)?;
        plan.validate(&arch)?;
        let name = p.file_stem().map_or_else(
            || p.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        rows.push((name, Some(plan)));
    }
    let dense_total = count_params(&arch, None).total;
    let mut t = Table::new(&[
        "model",
        "params",
        "params_m",
        "compression",
        "flops_weights_only",
        "flops_full",
    ]);
    let mut values = Vec::new();
    for (name, plan) in &rows {
        let p = count_params(&arch, plan.as_ref());
        let fw = count_flops(&arch, plan.as_ref(), a.seq_len, FlopConvention::WeightsOnly);
        let ff = count_flops(&arch, plan.as_ref(), a.seq_len, FlopConvention::Full);
        let factor = dense_total as f64 / p.total as f64;
        t.row(vec![
            name.clone(),
            p.total.to_string(),
            millions(p.total),
            format!("{factor:.3}"),
            fw.total.to_string(),
            ff.total.to_string(),
        ]);
        values.push(json!({
            "model": name,
            "params": p,
            "compression_factor": factor,
            "flops_weights_only": fw,
            "flops_full": ff,
        }));
    }
    let notes = vec![
        format!("seq_len {}", a.seq_len),
        format!(
            "weights_only convention: {}",
            FlopConvention::WeightsOnly.describe()
        ),
        format!("full convention: {}", FlopConvention::Full.describe()),
    ];
    emit(
        ctx,
        &t,
        &notes,
        json!({ "seq_len": a.seq_len, "rows": values }),
    );
    Ok(())
}

pub fn compress(ctx: &Ctx, a: CompressArgs) -> CmdResult {
    let teacher = load_model(&a.model)?;
    let plan = CompressionPlan::load(&a.plan)?;
    let opts = NkpOptions {
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let (student, reports) =
        init_student_from_teacher(&teacher, &plan, opts, &mut factor_rng(ctx.seed))?;
    student.to_store().save(&a.out)?;
    let mut t = Table::new(&["weight", "shape", "residual", "relative", "iterations"]);
    for r in &reports {
        t.row(vec![
            r.name.clone(),
            shape_cell(r.shape),
            format!("{:.6e}", r.residual),
            format!("{:.6e}", r.relative_residual),
            r.iterations.to_string(),
        ]);
    }
    let notes = vec![format!(
        "wrote {} ({} -> {} parameters)",
        a.out.display(),
        teacher.param_count(),
        student.param_count()
    )];
    let values: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "weight": r.name,
                "shape": r.shape,
                "residual": r.residual,
                "relative_residual": r.relative_residual,
                "iterations": r.iterations,
            })
        })
        .collect();
    emit(
        ctx,
        &t,
        &notes,
        json!({ "output": a.out, "weights": values }),
    );
    Ok(())
}

struct Check {
    name: String,
    passed: bool,
    detail: String,
}

fn factor_pairs(store: &NamedTensorStore) -> Vec<(String, KronFactorPair)> {
    store
        .iter()
        .filter_map(|(name, a)| {
            let base = name.strip_suffix(".a")?;
            let b = store.get(&format!("{base}.b"))?;
            Some((base.to_owned(), KronFactorPair::new(a.clone(), b.clone())))
        })
        .collect()
}

pub fn verify(ctx: &Ctx, a: VerifyArgs) -> CmdResult {
    let store = NamedTensorStore::load(&a.checkpoint)?;
    let mut checks = Vec::new();
    if store.is_empty() {
        eprintln!(
            "warning: {} holds no tensors; nothing to verify",
            a.checkpoint.display()
        );
    }
    for (name, m) in store.iter() {
        if !m.is_finite() {
            checks.push(Check {
                name: format!("finite {name}"),
                passed: false,
                detail: format!("`{name}` holds non-finite values"),
            });
        } else if m.max_abs() > a.max_abs {
            checks.push(Check {
                name: format!("magnitude {name}"),
                passed: false,
                detail: format!(
                    "`{name}` has |value| {:.3e} above {:.3e}",
                    m.max_abs(),
                    a.max_abs
                ),
            });
        }
    }
    if !store.is_empty() {
        let bad = checks.len();
        checks.push(Check {
            name: "values".into(),
            passed: bad == 0,
            detail: format!(
                "{} tensors, {bad} with non-finite or oversized values",
                store.len()
            ),
        });
    }

    let mut rng = Rng::new(ctx.seed);
    for (base, pair) in factor_pairs(&store) {
        let x = rng.normal_matrix(pair.cols(), 1, 1.0);
        let fast = kron_matvec(&pair, &x)?;
        let slow = kron_product(&pair).matmul(&x)?;
        let rel = fast.rel_diff(&slow);
        checks.push(Check {
            name: format!("oracle {base}"),
            passed: rel.is_finite() && rel <= a.oracle_tol && fast.is_finite(),
            detail: format!(
                "`{base}.a`/`{base}.b` shape {} relative difference {rel:.3e}",
                pair.shape()
            ),
        });
    }

    if store.contains("meta.heads") {
        match TransformerModel::from_store(&store) {
            Err(e) => checks.push(Check {
                name: "probe".into(),
                passed: false,
                detail: format!("model does not load: {e}"),
            }),
            Ok(m) => {
                let len = a.probe_len.clamp(1, m.position.rows());
                let ids: Vec<usize> = (0..len).map(|_| rng.below(m.embedding.vocab())).collect();
                let (passed, detail) = match m.forward(&ids) {
                    Ok(t) => {
                        let defect = t.softmax_defect();
                        (
                            t.is_finite() && defect <= a.softmax_tol,
                            format!(
                                "{len}-token probe, finite {}, softmax row defect {defect:.3e}",
                                t.is_finite()
                            ),
                        )
                    }
                    Err(e) => (false, format!("forward failed: {e}")),
                };
                checks.push(Check {
                    name: "probe".into(),
                    passed,
                    detail,
                });
            }
        }
    }

    let mut t = Table::new(&["check", "status", "detail"]);
    for c in &checks {
        t.row(vec![
            c.name.clone(),
            if c.passed { "pass" } else { "FAIL" }.into(),
            c.detail.clone(),
        ]);
    }
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
    let notes = vec![format!(
        "{verdict}: {} checks, {} failed",
        checks.len(),
        failed.len()
    )];
    let values: Vec<_> = checks
        .iter()
        .map(|c| json!({ "check": c.name, "passed": c.passed, "detail": c.detail }))
        .collect();
    emit(
        ctx,
        &t,
        &notes,
        json!({ "passed": failed.is_empty(), "checks": values }),
    );
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|c| c.detail.as_str()).collect();
        Err(Failure::new(
            3,
            anyhow!("verification failed: {}", names.join("; ")),
        ))
    }
}

/// Shapes of layer 0 and the embedding of a Kronecker model.
fn plan_of(m: &TransformerModel) -> Result<CompressionPlan, Failure> {
    let layer = m
        .layers
        .first()
        .ok_or_else(|| anyhow!("checkpoint has no layers"))?;
    let shape = |w: &Linear| match w {
        Linear::Kron(p) => p.shape(),
        Linear::Dense(d) => FactorShape::trivial(d.rows(), d.cols()),
    };
    let n = match &m.embedding {
        Embedding::Kron(e) => e.row.cols(),
        Embedding::Dense(_) => 1,
    };
    let plan = CompressionPlan::new(shape(&layer.attn.wq), shape(&layer.ffn.w1), n);
    if plan == CompressionPlan::trivial(&m.arch()) {
        return Err(Failure::new(
            2,
            anyhow!("checkpoint has no Kronecker factors to time"),
        ));
    }
    Ok(plan)
}

pub fn bench(ctx: &Ctx, a: BenchArgs) -> CmdResult {
    let (arch, plan) = match (&a.model, &a.plan, &a.arch) {
        (Some(path), _, _) => {
            let m = load_model(path)?;
            let plan = plan_of(&m)?;
            (m.arch(), plan)
        }
        (None, Some(plan), Some(arch)) => (ArchSpec::load(arch)?, CompressionPlan::load(plan)?),
        _ => {
            return Err(Failure::new(
                2,
                anyhow!("pass --model, or --plan with --arch"),
            ))
        }
    };
    let rows = bench_plan(&arch, &plan, a.seq_len, a.iters, ctx.seed)?;
    let mut t = Table::new(&[
        "group",
        "shape",
        "dense_flops",
        "kron_flops",
        "flops_ratio",
        "dense_median_us",
        "dense_iqr_us",
        "kron_median_us",
        "kron_iqr_us",
    ]);
    for r in &rows {
        t.row(vec![
            r.group.clone(),
            shape_cell(r.shape),
            r.dense_flops.to_string(),
            r.kron_flops.to_string(),
            format!("{:.2}", r.dense_flops as f64 / r.kron_flops as f64),
            format!("{:.1}", r.dense.median_us),
            format!("{:.1}", r.dense.iqr_us),
            format!("{:.1}", r.kron.median_us),
            format!("{:.1}", r.kron.iqr_us),
        ]);
    }
    let fd = count_flops(&arch, None, a.seq_len, FlopConvention::WeightsOnly);
    let fc = count_flops(&arch, Some(&plan), a.seq_len, FlopConvention::WeightsOnly);
    let ratio = fd.total as f64 / fc.total as f64;
    let notes = vec![
        format!(
            "{} iterations, seq_len {}; whole-model FLOPs [{}]: dense {}, kronecker {} ({ratio:.2}x fewer)",
            a.iters.max(1),
            a.seq_len,
            FlopConvention::WeightsOnly,
            flops(fd.total),
            flops(fc.total)
        ),
        "wall time depends on memory traffic and kernel quality as well as FLOPs".into(),
    ];
    emit(
        ctx,
        &t,
        &notes,
        json!({ "rows": rows, "model_flops": { "dense": fd, "kronecker": fc, "ratio": ratio } }),
    );
    Ok(())
}

fn kd_config(a: &DistillArgs) -> KdConfig {
    KdConfig {
        feature: match a.feature {
            FeatureArg::ModuleOutput => AttentionFeature::ModuleOutput,
            FeatureArg::PostNorm => AttentionFeature::PostNorm,
        },
        logit_loss: match a.logit_loss {
            LogitArg::Mse => LogitLoss::Mse,
            LogitArg::Kl => LogitLoss::Kl {
                temperature: a.temperature,
            },
        },
    }
}

fn toy_setup(arch: ArchSpec, plan: CompressionPlan) -> ToySetup {
    let seq_len = MajorityTask::DEFAULT_SEQ_LEN.min(arch.max_seq_len);
    ToySetup {
        arch,
        plan,
        seq_len,
        ..ToySetup::default()
    }
}

pub fn distill(ctx: &Ctx, a: DistillArgs) -> CmdResult {
    let teacher = load_model(&a.teacher)?;
    let d = teacher.hidden();
    if d > MAX_DISTILL_HIDDEN {
        return Err(Failure::new(
            2,
            anyhow!("hidden width {d} exceeds {MAX_DISTILL_HIDDEN}; distillation runs at desk scale only, full scale is out of scope"),
        ));
    }
    if !teacher.is_dense() {
        return Err(Failure::new(
            2,
            anyhow!("the teacher checkpoint must be dense"),
        ));
    }
    let plan = CompressionPlan::load(&a.plan)?;
    plan.validate(&teacher.arch())?;
    let setup = toy_setup(teacher.arch(), plan);
    let data = setup.data(ctx.seed);
    let (student, _) = setup.compress(&teacher, ctx.seed)?;
    let kd = kd_config(&a);
    let clip = (a.clip > 0.0).then_some(a.clip);

    if a.ablate {
        let cfg = AblationConfig {
            pretrain_steps: a.pretrain_steps,
            finetune_steps: a.steps,
            pretrain_lr: a.pretrain_lr,
            finetune_lr: a.lr,
            batch_size: a.batch,
            seed: ctx.seed,
            clip_norm: clip,
            kd,
        };
        let rows = ablation(
            &student,
            &teacher,
            &data.pretrain,
            &data.finetune,
            &data.eval,
            &cfg,
        )?;
        let mut t = Table::new(&[
            "pretraining",
            "finetuning",
            "steps",
            "eval_ce",
            "accuracy",
            "logit_mse",
            "intermediate",
        ]);
        for r in &rows {
            t.row(vec![
                if r.pretrain_kd { "KD" } else { "None" }.into(),
                if r.finetune_kd { "KD" } else { "No KD" }.into(),
                r.steps.to_string(),
                format!("{:.4}", r.eval.ce),
                format!("{:.4}", r.eval.accuracy),
                format!("{:.4}", r.eval.logit_mse),
                format!("{:.4}", r.eval.intermediate),
            ]);
        }
        let notes = vec![format!(
            "held-out set of {} examples; finetuning on {} labeled examples, pretraining on {} unlabeled sequences",
            data.eval.len(),
            data.finetune.len(),
            data.pretrain.len()
        )];
        emit(ctx, &t, &notes, json!({ "rows": rows }));
        return Ok(());
    }

    let stage = match a.stage {
        StageArg::PretrainKd => Stage::PretrainKd,
        StageArg::FinetuneKd => Stage::FinetuneKd,
        StageArg::NoKd => Stage::NoKd,
    };
    let cfg = TrainConfig {
        stage,
        mask: None,
        learning_rate: a.lr,
        batch_size: a.batch,
        steps: a.steps,
        seed: ctx.seed,
        clip_norm: clip,
        kd,
        record_wall_time: a.wall_time,
    };
    let examples = if stage == Stage::PretrainKd {
        &data.pretrain
    } else {
        &data.finetune
    };
    let out = train(
        &student,
        Some(&teacher),
        &ProjectionHead::identity(d),
        examples,
        &cfg,
    )?;
    if let Some(path) = &a.out {
        out.student.to_store().save(path)?;
    }
    if let Some(path) = &a.history {
        fs::write(path, history_to_jsonl(&out.history)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let before = evaluate(&student, Some(&teacher), &data.eval)?;
    let after = evaluate(&out.student, Some(&teacher), &data.eval)?;
    let mut t = Table::new(&[
        "student",
        "eval_ce",
        "accuracy",
        "logit_mse",
        "intermediate",
    ]);
    for (name, e) in [("initial", before), ("trained", after)] {
        t.row(vec![
            name.into(),
            format!("{:.4}", e.ce),
            format!("{:.4}", e.accuracy),
            format!("{:.4}", e.logit_mse),
            format!("{:.4}", e.intermediate),
        ]);
    }
    let notes = match (out.history.first(), out.history.last()) {
        (Some(f), Some(l)) => vec![format!(
            "{} steps of {:?}: batch loss {:.4} -> {:.4}",
            out.history.len(),
            stage,
            f.loss.total,
            l.loss.total
        )],
        _ => vec!["0 steps: student is the factorized teacher".into()],
    };
    emit(
        ctx,
        &t,
        &notes,
        json!({ "initial": before, "trained": after, "steps": out.history.len() }),
    );
    Ok(())
}

pub fn teacher(ctx: &Ctx, a: TeacherArgs) -> CmdResult {
    let arch = match &a.arch {
        Some(p) => ArchSpec::load(p)?,
        None => ArchSpec::toy(),
    };
    if arch.hidden > MAX_DISTILL_HIDDEN {
        return Err(Failure::new(
            2,
            anyhow!("hidden width {} exceeds {MAX_DISTILL_HIDDEN}", arch.hidden),
        ));
    }
    let plan = match &a.plan {
        Some(p) => CompressionPlan::load(p)?,
        None => toy_plan(),
    };
    plan.validate(&arch)?;
    let setup = ToySetup {
        teacher_steps: a.steps,
        ..toy_setup(arch, plan)
    };
    let data = setup.data(ctx.seed);
    let teacher = setup.train_teacher(&data, ctx.seed)?;
    teacher.to_store().save(&a.out)?;
    let e = evaluate(&teacher, None, &data.eval)?;
    let mut t = Table::new(&["teacher", "eval_ce", "accuracy", "params"]);
    t.row(vec![
        a.out.display().to_string(),
        format!("{:.4}", e.ce),
        format!("{:.4}", e.accuracy),
        teacher.param_count().to_string(),
    ]);
    emit(
        ctx,
        &t,
        &[],
        json!({ "output": a.out, "eval": e, "params": teacher.param_count() }),
    );
    Ok(())
}
