use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fringeforge::io::{read_attack_metadata, read_ply, read_scene, read_trace};

const BENCH: [&str; 2] = ["--set", "bench.identities=10"];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fringeforge"));
    c.env_remove("FRINGEFORGE_THREADS");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn fringeforge")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Relative path to bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn assert_same(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>, what: &str) {
    let keys_a: Vec<_> = a.keys().collect();
    let keys_b: Vec<_> = b.keys().collect();
    assert_eq!(keys_a, keys_b, "{what}: file sets differ");
    let differing: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    assert!(differing.is_empty(), "{what}: {differing:?}");
}

/// A small model trained once per test binary.
fn model() -> &'static Path {
    static MODEL: OnceLock<PathBuf> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let out = run(bin().args(BENCH).arg("train").arg("--out").arg(&dir));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        dir.join("model.bin")
    })
}

#[test]
fn scene_manifest_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(bin().args(["scene", "--count", "40", "--seed", "7", "--out"]).arg(dir));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    let scenes = manifest["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 40);
    let seeds: HashSet<u64> = scenes.iter().map(|s| s["identity_seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds.len(), 40);
    let (scene, calibration) = read_scene(&a.join("face_005")).unwrap();
    assert_eq!(scene.camera, calibration.camera);
    assert!(scene.depth.as_slice().iter().all(|d| d.is_finite() && *d > 0.0));
}

#[test]
fn empty_scene_set() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().args(["scene", "--count", "0", "--out"]).arg(tmp.path()));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 0);
    assert!(manifest["scenes"].as_array().unwrap().is_empty());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = run(bin().args(["--set", "bench.expression_scale=0.5", "scene", "--count", "3", "--seed", "11", "--out"]).arg(&a));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(bin().arg("--config").arg(a.join("config.txt")).args(["scene", "--out"]).arg(&b));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_same(&snapshot(&a), &snapshot(&b), "echoed config");
}

#[test]
fn unknown_override_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().args(["--set", "attack.lamda_bounds=[1,2]", "scene", "--out"]).arg(tmp.path()));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("attack.lamda_bounds"), "{}", stderr(&out));
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn config_file_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "[attack]\nmargin = 5\nbogus = 1\n").unwrap();
    let out = run(bin().arg("--config").arg(&cfg).args(["scene", "--out"]).arg(tmp.path()));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("attack.bogus"));
    let out = run(bin().arg("--config").arg(tmp.path().join("missing.cfg")).args(["scene", "--out"]).arg(tmp.path()));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.cfg"));
}

#[test]
fn usage_and_environment_errors_exit_1() {
    assert_eq!(code(&run(bin().arg("frobnicate"))), 1);
    assert_eq!(code(&run(bin().args(["scene"]))), 1);
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().env("FRINGEFORGE_THREADS", "zero").args(["scene", "--count", "1", "--out"]).arg(tmp.path()));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("FRINGEFORGE_THREADS"));
    let out = run(bin().args(["attack", "--model", "/nonexistent/model.bin", "--out"]).arg(tmp.path()));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("/nonexistent/model.json"), "{}", stderr(&out));
}

#[test]
fn help_lists_subcommands() {
    let out = run(bin().arg("--help"));
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["scene", "train", "attack", "eval", "export", "FRINGEFORGE_THREADS"] {
        assert!(text.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn model_class_mismatch_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().args(["attack", "--count", "1", "--model"]).arg(model()).arg("--out").arg(tmp.path()));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("classes"));
}

#[test]
fn attack_eval_export_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = ["1", "2"]
        .iter()
        .map(|threads| {
            let dir = tmp.path().join(format!("run{threads}"));
            let out = run(bin()
                .env("FRINGEFORGE_THREADS", threads)
                .args(BENCH)
                .args(["attack", "--mode", "dodge", "--count", "2", "--model"])
                .arg(model())
                .arg("--out")
                .arg(&dir));
            assert!([0, 2].contains(&code(&out)), "{}", stderr(&out));
            dir
        })
        .collect();
    let first = snapshot(&runs[0]);
    assert_same(&first, &snapshot(&runs[1]), "worker count changed the output");
    assert!(first.contains_key(Path::new("config.txt")));

    let records: serde_json::Value = serde_json::from_slice(&first[Path::new("records.json")]).unwrap();
    let mut successes = 0;
    for r in records.as_array().unwrap() {
        let dir = runs[0].join("attacks").join(r["artifact_dir"].as_str().unwrap());
        let meta = read_attack_metadata(&dir).unwrap();
        let trace = read_trace(&dir).unwrap();
        let last = trace.last().unwrap();
        assert_eq!(last.margin, meta.margin);
        assert_eq!(meta.success, r["record"]["success"].as_bool().unwrap());
        if meta.success {
            successes += 1;
            assert!(last.margin < 0.0);
            if meta.lambda.is_some() {
                assert!(last.margin <= -meta.config.margin, "lambda-selected result is not confident: {}", last.margin);
            }
        }
        let clean = read_ply(&dir.join("clean.ply")).unwrap();
        assert_eq!(read_ply(&dir.join("adversarial.ply")).unwrap().len(), clean.len());
        assert!(dir.join("patterns/shift_00.pgm").exists());
    }
    assert!(successes > 0);

    let out = run(bin().arg("eval").arg("--run").arg(&runs[0]));
    assert!([0, 2].contains(&code(&out)), "{}", stderr(&out));
    assert_same(&snapshot(&runs[0]), &first, "eval rewrote bytes");

    let exported = tmp.path().join("export");
    let out = run(bin().arg("export").arg("--input").arg(runs[0].join("attacks")).arg("--out").arg(&exported));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let files = snapshot(&exported);
    let csv = files.iter().find(|(p, _)| p.ends_with("adversarial.csv")).unwrap().1;
    assert!(String::from_utf8_lossy(csv).starts_with("x,y,z,u,v\n"));
    let png = files.iter().find(|(p, _)| p.ends_with("patterns/shift_00.png")).unwrap().1;
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn eval_detects_tampered_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().args(BENCH).args(["--set", "attack.search_steps=1", "--set", "attack.iterations=5", "attack", "--count", "1", "--model"]).arg(model()).arg("--out").arg(tmp.path()));
    assert!([0, 2].contains(&code(&out)), "{}", stderr(&out));
    let attacks = tmp.path().join("attacks");
    let dir = fs::read_dir(&attacks).unwrap().next().unwrap().unwrap().path();
    let path = dir.join("metadata.json");
    let text = fs::read_to_string(&path).unwrap();
    let flipped = if text.contains("\"success\": true") {
        text.replace("\"success\": true", "\"success\": false")
    } else {
        text.replace("\"success\": false", "\"success\": true")
    };
    fs::write(&path, flipped).unwrap();
    let out = run(bin().arg("eval").arg("--run").arg(tmp.path()));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("disagrees"));
}

#[test]
fn export_rejects_unknown_files() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("notes.txt");
    fs::write(&f, "hello").unwrap();
    let out = run(bin().arg("export").arg("--input").arg(&f).arg("--out").arg(tmp.path().join("o")));
    assert_eq!(code(&out), 1);
}
