//! End-to-end runs of the `mpct` binary on a tiny phantom configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mpct::cli::drop_case_phases;
use mpct::volumes::{load_case, save_case};
use serde_json::Value;

const TINY: &str = r#"
[phantom]
volume_shape = [16, 16, 16]
n_cases = 50
kidney_semi_axes = [5.0, 5.0, 5.0]
tumor_radius_range = [2.0, 3.0]

[preprocess]
crop_shape = [16, 16, 16]

[arch]
width = 4
levels = 2
disc_width = 4
disc_layers = 2
cls_hidden = [8, 8]

[train]
t1 = 4
t2 = 2
seg_epochs = 1
cls_iters = 20
checkpoint_every = 0
validate_every = 0

[eval.permutation]
n_perm = 50
"#;

fn mpct(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mpct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mpct");
    out
}

fn ok_json(args: &[&str]) -> Value {
    let out = mpct(args);
    assert!(
        out.status.success(),
        "mpct {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn error_category(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("error line");
    let v: Value = serde_json::from_str(last).expect("JSON error line");
    v["error"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    root: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    dgan: PathBuf,
    base: PathBuf,
}

/// Phantom data plus trained DiagnosisGAN and BaseSyn runs, shared by the
/// tests of this file.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let config = root.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let data = root.path().join("data");
        ok_json(&["--config", s(&config), "phantom-gen", "--out", s(&data)]);
        let dgan = root.path().join("dgan");
        ok_json(&["--config", s(&config), "train", "--data", s(&data), "--run", s(&dgan)]);
        let base_cfg = root.path().join("base.toml");
        let pretrained = format!("\n[paths]\npretrained = {:?}\n", s(&dgan));
        fs::write(&base_cfg, format!("mode = \"base_syn\"\n{TINY}{pretrained}")).unwrap();
        let base = root.path().join("base");
        ok_json(&["--config", s(&base_cfg), "train", "--data", s(&data), "--run", s(&base)]);
        Fixture {
            root,
            config,
            data,
            dgan,
            base,
        }
    })
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Writes case `id` of the fixture data with `missing` phases dropped.
fn incomplete_case(f: &Fixture, id: &str, missing: &[usize], dir: &Path) -> PathBuf {
    let case = load_case(&f.data.join(id)).unwrap();
    let dropped = drop_case_phases(&case, &missing.iter().copied().collect::<BTreeSet<_>>()).unwrap();
    fs::create_dir_all(dir).unwrap();
    save_case(&dropped, dir).unwrap()
}

#[test]
fn phantom_gen_is_reproducible_and_split() {
    let f = fixture();
    let again = f.root.path().join("data_again");
    let split = ok_json(&["--config", s(&f.config), "phantom-gen", "--out", s(&again)]);
    assert_eq!(tree_bytes(&f.data), tree_bytes(&again));
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, [32, 8, 10]);

    let hundred = f.root.path().join("hundred.toml");
    fs::write(&hundred, TINY.replace("n_cases = 50", "n_cases = 100")).unwrap();
    let out = f.root.path().join("data100");
    let split = ok_json(&["--config", s(&hundred), "phantom-gen", "--out", s(&out)]);
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, [65, 15, 20]);
}

#[test]
fn train_writes_archives_and_snapshot() {
    let f = fixture();
    let state = f.dgan.join("state");
    for name in ["generator", "discriminator", "segmenter", "classifier"] {
        assert!(state.join(format!("{name}.safetensors")).is_file(), "{name}");
    }
    let snapshot = fs::read_to_string(f.dgan.join("config.snapshot")).unwrap();
    let cfg = mpct::config::ExperimentConfig::from_toml(TINY).unwrap();
    assert_eq!(snapshot, cfg.to_toml().unwrap());
    let log = fs::read_to_string(f.dgan.join("logs/losses.jsonl")).unwrap();
    let gan_lines = log
        .lines()
        .filter(|l| l.contains("\"gan_initial\"") || l.contains("\"joint_finetune\""))
        .count();
    assert_eq!(gan_lines, 6);
    // the BaseSyn run reuses the segmenter of the DiagnosisGAN run
    assert_eq!(
        fs::read(state.join("segmenter.safetensors")).unwrap(),
        fs::read(f.base.join("state/segmenter.safetensors")).unwrap()
    );
}

#[test]
fn cls_kp_trains_one_classifier_per_missing_phase() {
    let f = fixture();
    let cfg = f.root.path().join("clskp.toml");
    fs::write(&cfg, format!("mode = \"cls_kP\"\n{TINY}")).unwrap();
    let run = f.root.path().join("clskp");
    let summary = ok_json(&["--config", s(&cfg), "train", "--data", s(&f.data), "--run", s(&run)]);
    let archives = summary["archives"].as_array().unwrap();
    let cls: Vec<&str> = archives
        .iter()
        .filter_map(|a| a.as_str())
        .filter(|a| a.starts_with("cls_kP"))
        .collect();
    assert_eq!(cls.len(), 4);

    let cases = f.root.path().join("clskp_cases");
    let case = incomplete_case(f, "case040", &[2], &cases);
    let dist = ok_json(&["classify", "--run", s(&run), "--case", s(&case)]);
    let total: f64 = dist["probabilities"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-5);
}

#[test]
fn resume_continues_and_rejects_other_architectures() {
    let f = fixture();
    let run = f.root.path().join("resume");
    let first = f.root.path().join("resume_first.toml");
    fs::write(&first, TINY.replace("t2 = 2", "t2 = 0")).unwrap();
    ok_json(&["--config", s(&first), "train", "--data", s(&f.data), "--run", s(&run)]);
    let summary = ok_json(&[
        "--config",
        s(&f.config),
        "train",
        "--data",
        s(&f.data),
        "--run",
        s(&run),
    ]);
    assert_eq!(summary["iterations"], 6);
    let log = fs::read_to_string(run.join("logs/losses.jsonl")).unwrap();
    let joint = log.lines().filter(|l| l.contains("\"joint_finetune\"")).count();
    let initial = log.lines().filter(|l| l.contains("\"gan_initial\"")).count();
    assert_eq!((initial, joint), (4, 2));

    let wide = f.root.path().join("wide.toml");
    fs::write(&wide, TINY.replace("disc_width = 4", "disc_width = 6")).unwrap();
    let out = mpct(&["--config", s(&wide), "train", "--data", s(&f.data), "--run", s(&run)]);
    assert!(!out.status.success());
    assert_eq!(error_category(&out), "checkpoint");
}

#[test]
fn synthesize_completes_missing_phases() {
    let f = fixture();
    let dir = f.root.path().join("synth_cases");
    let case = incomplete_case(f, "case041", &[3], &dir);
    let out_dir = f.root.path().join("synth_out");
    let out = ok_json(&[
        "synthesize",
        "--run",
        s(&f.dgan),
        "--case",
        s(&case),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out["synthesized"].as_array().unwrap().len(), 1);
    let completed = PathBuf::from(out["completed_case"].as_str().unwrap());
    assert!(load_case(&completed).unwrap().phase_set.is_complete());

    let dist = ok_json(&["classify", "--run", s(&f.dgan), "--case", s(&completed)]);
    let again = ok_json(&["classify", "--run", s(&f.dgan), "--case", s(&completed)]);
    assert_eq!(dist, again);
    let total: f64 = dist["probabilities"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-5);
}

#[test]
fn synthesize_and_classify_reject_bad_requests() {
    let f = fixture();
    let complete = f.data.join("case042");
    let out_dir = f.root.path().join("bad_out");
    let out = mpct(&[
        "synthesize",
        "--run",
        s(&f.dgan),
        "--case",
        s(&complete),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(
        (out.status.code(), error_category(&out).as_str()),
        (Some(5), "argument")
    );

    let dir = f.root.path().join("bad_cases");
    let case = incomplete_case(f, "case042", &[1], &dir);
    let out = mpct(&[
        "synthesize",
        "--run",
        s(&f.dgan),
        "--case",
        s(&case),
        "--missing",
        "2",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(error_category(&out), "argument");
    let out = mpct(&["classify", "--run", s(&f.dgan), "--case", s(&case)]);
    assert_eq!(error_category(&out), "argument");
    let out = mpct(&[
        "classify",
        "--run",
        s(&f.root.path().join("nowhere")),
        "--case",
        s(&case),
    ]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_compares_runs() {
    let f = fixture();
    let out_dir = f.root.path().join("eval");
    let p_values = ok_json(&[
        "--threads",
        "2",
        "evaluate",
        "--data",
        s(&f.data),
        "--runs",
        s(&f.dgan),
        s(&f.base),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(p_values.as_array().unwrap().len(), 1);
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("evaluation.json")).unwrap()).unwrap();
    for r in report["reports"].as_array().unwrap() {
        assert_eq!(r["cases"].as_array().unwrap().len(), 40);
    }
    assert!(out_dir.join("evaluation.txt").is_file());
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let f = fixture();
    let bad = f.root.path().join("bad.toml");
    fs::write(&bad, "[train]\nt3 = 1\n").unwrap();
    let out = mpct(&["--config", s(&bad), "phantom-gen", "--out", s(&f.root.path().join("x"))]);
    assert_eq!((out.status.code(), error_category(&out).as_str()), (Some(6), "config"));
    let out = mpct(&["--threads", "0", "phantom-gen", "--out", s(&f.root.path().join("x"))]);
    assert_eq!(error_category(&out), "argument");
}
