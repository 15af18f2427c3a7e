use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn isbnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isbnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = isbnet(args);
    assert!(
        out.status.success(),
        "isbnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = |name: &str, seed: u64, n: usize| {
        let cfg = root.join(format!("{name}.json"));
        fs::write(
            &cfg,
            format!(r#"{{"num_scenes": {n}, "points_per_scene": 384, "max_instances": 4, "seed": {seed}}}"#),
        )
        .unwrap();
        let out = root.join("data").join(name);
        assert_eq!(ok(&["generate", "--config", p(&cfg), "--out", p(&out)]).trim(), n.to_string());
        out
    };
    gen("train", 1, 4);
    let val = gen("val", 2, 2);

    let settings = root.join("train.json");
    fs::write(&settings, r#"{"train": {"epochs": 2, "batch_size": 2, "eval_every": 1}}"#).unwrap();
    let run = root.join("run");
    let stdout = ok(&["train", "--data", p(&root.join("data")), "--config", p(&settings), "--out", p(&run)]);
    assert!(stdout.contains("best val AP50"));
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"].as_array().unwrap().len(), 2);

    let model = run.join("model.isbm");
    let pipeline = run.join("pipeline.json");
    let preds = root.join("preds");
    fs::create_dir_all(&preds).unwrap();
    for scene in ["scene_00000", "scene_00001"] {
        let out = preds.join(format!("{scene}.isbp"));
        let src = val.join(format!("{scene}.isbs"));
        let count: usize = ok(&["infer", "--model", p(&model), "--scene", p(&src), "--out", p(&out), "--config", p(&pipeline)])
            .trim()
            .parse()
            .unwrap();
        assert!(out.exists());
        assert!(count <= 96);
    }

    let csv = root.join("per_class.csv");
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--pred-dir", p(&preds), "--gt-dir", p(&val), "--csv", p(&csv)])).unwrap();
    for key in ["ap", "ap50", "ap25", "box_ap50", "mcov", "mwcov", "mprec50", "mrec50"] {
        let v = report[key].as_f64().unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(fs::read_to_string(&csv).unwrap().lines().count() >= 2);
    let cov: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--pred-dir", p(&preds), "--gt-dir", p(&val), "--metrics", "cov"])).unwrap();
    assert!(cov.get("mcov").is_some() && cov.get("ap").is_none());

    let bench = ok(&["runtime-bench", "--scenes", p(&val), "--model", p(&model), "--config", p(&pipeline)]);
    let lines: Vec<&str> = bench.lines().collect();
    assert_eq!(lines[0], "scene,points,encoder_ms,instance_ms,decoder_ms,total_ms");
    assert_eq!(lines.len(), 3);
}

#[test]
fn recall_bench_reports_each_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"num_scenes": 3, "points_per_scene": 512, "seed": 5}"#).unwrap();
    let scenes = dir.path().join("scenes");
    ok(&["generate", "--config", p(&cfg), "--out", p(&scenes)]);
    for sampler in ["fps", "iafps"] {
        let out = ok(&["recall-bench", "--scenes", p(&scenes), "--budgets", "8,32", "--sampler", sampler]);
        let rows: Vec<Vec<f64>> = out
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[1])));
        if sampler == "iafps" {
            assert_eq!(rows[1][1], 1.0);
        }
    }
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.isbm");
    let out = isbnet(&["infer", "--model", p(&missing), "--scene", p(&missing), "--out", p(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.isbm"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"num_scenes": 2, "min_instances": 5, "max_instances": 2}"#).unwrap();
    assert!(!isbnet(&["generate", "--config", p(&cfg), "--out", p(dir.path())]).status.success());
}
