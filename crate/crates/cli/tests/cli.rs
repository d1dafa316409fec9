use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kronekit_core::experiment::toy_plan;
use kronekit_core::model::TransformerModel;
use kronekit_core::{ArchSpec, CompressionPlan, Rng};

fn configs(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kronekit"));
    for a in args {
        cmd.arg(a);
    }
    cmd.env_remove("KRONEKIT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn exact_product_teacher(dir: &Path) -> PathBuf {
    let m = TransformerModel::random_kron(&ArchSpec::toy(), &toy_plan(), &mut Rng::new(21))
        .unwrap()
        .densified();
    let path = dir.join("exact.kts");
    m.to_store().save(&path).unwrap();
    path
}

#[test]
fn plan_reports_base_numbers() {
    let o = run(&[
        &"--format",
        &"json",
        &"plan",
        &configs("bert_base.json"),
        &"--shapes",
        &configs("kron8.json"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["params"]["dense"]["total"], 109_398_528u64);
    assert_eq!(v["params"]["compressed"]["total"], 14_570_504u64);
    let f = v["compression_factor"].as_f64().unwrap();
    assert!((f - 7.508).abs() < 1e-3);
    assert!(v["flops"]["weights_only"]["convention"]
        .as_str()
        .unwrap()
        .contains("FLOP"));
}

#[test]
fn plan_text_names_the_convention() {
    let o = run(&[
        &"plan",
        &configs("bert_base.json"),
        &"--shapes",
        &configs("kron19.json"),
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("compression factor 19.421"), "{s}");
    assert!(s.contains("weights_only convention:"));
    assert!(s.contains("full convention:"));
}

#[test]
fn plan_ratio_search_and_written_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.json");
    let o = run(&[
        &"plan",
        &configs("bert_base.json"),
        &"--ratio",
        &"7",
        &"--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = CompressionPlan::load(&out).unwrap();
    plan.validate(&ArchSpec::load(configs("bert_base.json")).unwrap())
        .unwrap();

    let o = run(&[&"plan", &configs("toy.json"), &"--ratio", &"1.01"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn infeasible_ratio_exits_4() {
    let o = run(&[&"plan", &configs("bert_base.json"), &"--ratio", &"1e9"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("infeasible"));
}

#[test]
fn bad_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    assert_eq!(
        run(&[&"plan", &missing, &"--ratio", &"2"]).status.code(),
        Some(2)
    );
    let garbage = dir.path().join("g.kts");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(run(&[&"verify", &garbage]).status.code(), Some(2));
    assert_eq!(
        run(&[
            &"compress",
            &garbage,
            &configs("toy_plan.json"),
            &"--out",
            &dir.path().join("x")
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn csv_output_parses() {
    let o = run(&[
        &"--format",
        &"csv",
        &"report",
        &configs("bert_base.json"),
        &"--plan",
        &configs("kron8.json"),
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("model,params"));
    assert!(lines[2].starts_with("kron8,14570504,"));
}

#[test]
fn compress_recovers_exact_products() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = exact_product_teacher(dir.path());
    let out = dir.path().join("s.kts");
    let o = run(&[
        &"--format",
        &"json",
        &"compress",
        &teacher,
        &configs("toy_plan.json"),
        &"--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let weights = v["weights"].as_array().unwrap();
    assert_eq!(weights.len(), 13);
    for w in weights {
        assert!(w["relative_residual"].as_f64().unwrap() < 1e-9, "{w}");
    }
    let v = run(&[&"verify", &out]);
    assert!(v.status.success(), "{}", stdout(&v));
    assert!(stdout(&v).contains("PASS"));
}

/// Byte offset of the first payload value of `name` in a KTS1 file.
fn payload_offset(bytes: &[u8], name: &str) -> usize {
    let key = name.as_bytes();
    let at = bytes
        .windows(key.len() + 1)
        .position(|w| &w[..key.len()] == key && w[key.len()] == 0)
        .unwrap();
    at + key.len() + 1 + 8
}

#[test]
fn verify_flags_corrupted_factor() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = exact_product_teacher(dir.path());
    let student = dir.path().join("s.kts");
    assert!(run(&[
        &"compress",
        &teacher,
        &configs("toy_plan.json"),
        &"--out",
        &student
    ])
    .status
    .success());
    let mut bytes = std::fs::read(&student).unwrap();
    let at = payload_offset(&bytes, "layer.1.ffn.w1.b");
    bytes[at + 7] = 0x7F;
    std::fs::write(&student, &bytes).unwrap();
    let o = run(&[&"verify", &student]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("layer.1.ffn.w1.b"), "{}", stderr(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn verify_empty_checkpoint_warns() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("e.kts");
    kronekit_core::NamedTensorStore::new().save(&empty).unwrap();
    let o = run(&[&"verify", &empty]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn distill_zero_steps_is_the_factorized_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = exact_product_teacher(dir.path());
    let (a, b) = (dir.path().join("a.kts"), dir.path().join("b.kts"));
    assert!(run(&[
        &"compress",
        &teacher,
        &configs("toy_plan.json"),
        &"--out",
        &a
    ])
    .status
    .success());
    let o = run(&[
        &"distill",
        &teacher,
        &configs("toy_plan.json"),
        &"--steps",
        &"0",
        &"--out",
        &b,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn distill_history_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = exact_product_teacher(dir.path());
    let hist = |name: &str, seed: &str| {
        let h = dir.path().join(name);
        let o = run(&[
            &"--seed",
            &seed,
            &"distill",
            &teacher,
            &configs("toy_plan.json"),
            &"--steps",
            &"12",
            &"--logit-loss",
            &"kl",
            &"--temperature",
            &"2",
            &"--history",
            &h,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(h).unwrap()
    };
    let (a, b, c) = (hist("a", "3"), hist("b", "3"), hist("c", "4"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let first: serde_json::Value =
        serde_json::from_slice(a.split(|&x| x == b'\n').next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(first.get("wall_time_ms").is_none());
}

#[test]
fn distill_refuses_full_scale() {
    let dir = tempfile::tempdir().unwrap();
    let mut arch = ArchSpec::toy();
    arch.hidden = 320;
    arch.ffn_dim = 640;
    arch.heads = 4;
    let m = TransformerModel::random_dense(&arch, &mut Rng::new(0)).unwrap();
    let path = dir.path().join("wide.kts");
    m.to_store().save(&path).unwrap();
    let o = run(&[&"distill", &path, &configs("toy_plan.json")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("out of scope"));
}

#[test]
fn bench_model_uses_checkpoint_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = exact_product_teacher(dir.path());
    let student = dir.path().join("s.kts");
    assert!(run(&[
        &"compress",
        &teacher,
        &configs("toy_plan.json"),
        &"--out",
        &student
    ])
    .status
    .success());
    let o = run(&[
        &"--format",
        &"json",
        &"bench",
        &"--model",
        &student,
        &"--iters",
        &"2",
        &"--seq-len",
        &"4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["shape"]["m2"], 8);
    assert_eq!(
        run(&[&"bench", &"--model", &teacher]).status.code(),
        Some(2)
    );
}
