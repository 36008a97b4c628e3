use std::fs;
use std::path::Path;

use fewshot_cli::{cmd_eval, cmd_generate, cmd_sweep, cmd_train, EvalArgs, GenerateArgs, SweepArgs, TrainArgs};
use fewshot_core::episode::validate_dataset;
use fewshot_core::io;

fn generate_args(out: &Path) -> GenerateArgs {
    GenerateArgs {
        seed: 3,
        out: out.to_path_buf(),
        d: 8,
        height: 6,
        width: 6,
        stride: 4,
        num_classes: 8,
        examples_per_class: 4,
        noise_sigma: 0.5,
        num_shared_dims: None,
        blob_count_min: 1,
        blob_count_max: 2,
        blob_radius_min: 4,
        blob_radius_max: 9,
        num_folds: 4,
    }
}

fn eval_args(dir: &Path, out: &str) -> EvalArgs {
    EvalArgs {
        seed: 1,
        manifest: dir.join("data/manifest.json"),
        folds: dir.join("data/folds.json"),
        params: dir.join("heads"),
        k: 1,
        num_experts: 10,
        step_size: 1e-2,
        optimizer: "adam".into(),
        use_relevance: true,
        use_boosting: true,
        kshot_mode: "joint".into(),
        episodes: 6,
        traces: true,
        out: dir.join(out),
    }
}

fn train(dir: &Path) {
    cmd_train(&TrainArgs {
        seed: 2,
        manifest: dir.join("data/manifest.json"),
        folds: dir.join("data/folds.json"),
        fold: None,
        iterations: 5,
        learning_rate: 7e-3,
        batch_size: 2,
        use_relevance: true,
        out: dir.join("heads"),
    })
    .unwrap();
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn generate_is_deterministic_and_valid() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cmd_generate(&generate_args(a.path())).unwrap();
    cmd_generate(&generate_args(b.path())).unwrap();
    assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    let data = io::load_dataset(&ma).unwrap();
    assert_eq!(data.len(), 32);
    assert_eq!(validate_dataset(&data).unwrap(), 8);
    assert!(data.iter().all(|e| {
        let m = e.feature_mask();
        m.foreground_count() > 0 && m.background_count() > 0
    }));
}

#[test]
fn single_class_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = generate_args(dir.path());
    args.num_classes = 1;
    let manifest = cmd_generate(&args).unwrap();
    let entries = io::read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 4);
    assert!(entries.iter().all(|e| e.class_id == 0));
    assert_eq!(io::read_folds(&dir.path().join("folds.json")).unwrap().len(), 1);
}

#[test]
fn sweep_of_one_equals_unboosted_eval() {
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&generate_args(&dir.path().join("data"))).unwrap();
    train(dir.path());
    let plain = cmd_eval(&EvalArgs {
        use_boosting: false,
        ..eval_args(dir.path(), "plain")
    })
    .unwrap();
    let sweep = cmd_sweep(&SweepArgs {
        eval: eval_args(dir.path(), "sweep"),
        sizes: vec![1],
    })
    .unwrap();
    assert_eq!(sweep.len(), 1);
    for (a, b) in plain.folds.iter().zip(&sweep[0].folds) {
        assert_eq!(a.outcomes.iter().map(|o| o.confusion).collect::<Vec<_>>(),
                   b.outcomes.iter().map(|o| o.confusion).collect::<Vec<_>>());
    }
    assert_eq!(plain.crossval_miou, sweep[0].crossval_miou);
}

#[test]
fn eval_writes_traces_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&generate_args(&dir.path().join("data"))).unwrap();
    train(dir.path());
    cmd_eval(&eval_args(dir.path(), "eval")).unwrap();
    let metrics = fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("# config: {"));
    assert!(metrics.contains("\"num_experts\":10"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("variant,num_experts,row,fold,class_id,tp,fp,fn"));
    assert!(metrics.lines().any(|l| l.starts_with("B+C1+C2,10,crossval,")));
    let traces: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/traces.json")).unwrap()).unwrap();
    let records = traces.as_array().unwrap();
    assert_eq!(records.len(), 4 * 6);
    assert_eq!(records[0]["experts"].as_array().unwrap().len(), 10);
    let losses = fs::read_to_string(dir.path().join("heads/losses_fold0.csv")).unwrap();
    assert_eq!(losses.lines().count(), 2 + 5);
}

#[test]
fn missing_inputs_are_reported_with_paths() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_eval(&eval_args(dir.path(), "eval")).unwrap_err();
    assert!(format!("{err:#}").contains("manifest.json"), "{err:#}");
}
