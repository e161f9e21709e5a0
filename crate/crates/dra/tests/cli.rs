use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dra::checkpoint::{checkpoint_load, config_hash};
use dra::experiment::materialize_synth;
use dra::ingest::ingest_directory;
use dra::manifest::{read_manifest, write_manifest};
use dra_core::eval::RunReport;
use dra_core::protocols::SynthSpec;
use tempfile::TempDir;

const SMALL: [&str; 10] = [
    "--epochs",
    "1",
    "--iterations-per-epoch",
    "2",
    "--batch-size",
    "8",
    "--backbone",
    "tiny",
    "--profile",
    "desk",
];

fn dra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dra"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        size: 16,
        train_normals: 24,
        test_normals: 8,
        classes: 2,
        per_class: 12,
        ..SynthSpec::default()
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth_small(out: &Path) {
    let o = dra(&[
        "synth", "--seed", "7", "--out-dir", p(out), "--size", "16", "--train-normals", "24", "--test-normals", "8",
        "--classes", "2", "--per-class", "12",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_small(&a);
    synth_small(&b);
    let ta = tree(&a);
    assert!(ta.keys().any(|k| k.ends_with("manifest.csv")));
    assert!(ta.keys().any(|k| k.ends_with("recipes.json")));
    assert_eq!(ta.len(), 24 + 8 + 2 * 12 + 2);
    assert_eq!(ta, tree(&b));
}

#[test]
fn eval_without_checkpoint_is_a_missing_model_error() {
    let o = dra(&["eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing model"), "{}", stderr(&o));
    let tmp = TempDir::new().unwrap();
    let o = dra(&["eval", "--checkpoint", p(&tmp.path().join("nope.dra"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing model"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dra(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(dra(&["train", "--preset", "DRA9"]).status.code(), Some(2));
    assert_eq!(dra(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dra(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_name_the_line() {
    let tmp = TempDir::new().unwrap();
    let f = tmp.path().join("exp.toml");
    fs::write(&f, "[train]\nepochs = 2\nbatch_size = \"lots\"\n").unwrap();
    let o = dra(&["train", "--config", p(&f)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    fs::write(&f, "[model]\npreset = \"DRA\"\nwhatever = 1\n").unwrap();
    let o = dra(&["train", "--config", p(&f)]);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn ingest_matches_the_materialized_catalog() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("synth");
    let written = materialize_synth(&small_spec(), &root).unwrap();
    let ing = ingest_directory(&root).unwrap();
    assert!(ing.warnings.is_empty(), "{:?}", ing.warnings);
    assert_eq!(ing.catalog.normal_train, written.catalog.normal_train);
    assert_eq!(ing.catalog.normal_test, written.catalog.normal_test);
    assert_eq!(ing.catalog.anomalies, written.catalog.anomalies);
    assert_eq!(ing.paths.len(), written.paths.len());

    fs::create_dir_all(root.join("test").join("empty")).unwrap();
    let bad = root.join("test").join("broken");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("000.png"), b"not an image").unwrap();
    let class = written.catalog.anomalies.keys().next().unwrap().clone();
    fs::write(root.join("test").join(&class).join("zzz.png"), b"\x89PNG broken").unwrap();
    let again = ingest_directory(&root).unwrap();
    assert_eq!(again.catalog.anomalies, written.catalog.anomalies);
    assert!(again.warnings.iter().any(|w| w.contains("empty")));
    assert!(again.warnings.iter().any(|w| w.contains("broken")));
    assert!(again.warnings.iter().any(|w| w.contains("zzz")));
}

#[test]
fn ingest_rejects_a_missing_train_directory() {
    let tmp = TempDir::new().unwrap();
    let err = ingest_directory(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("layout"), "{err}");
}

#[test]
fn manifest_round_trips() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("synth");
    let written = materialize_synth(&small_spec(), &root).unwrap();
    let elsewhere = tmp.path().join("lists").join("m.csv");
    fs::create_dir_all(elsewhere.parent().unwrap()).unwrap();
    write_manifest(&written.catalog, &written.paths, &elsewhere).unwrap();
    let back = read_manifest(&elsewhere).unwrap();
    assert_eq!(back.catalog.normal_train, written.catalog.normal_train);
    assert_eq!(back.catalog.normal_test, written.catalog.normal_test);
    assert_eq!(back.catalog.anomalies, written.catalog.anomalies);
    for (id, path) in &written.paths {
        assert_eq!(fs::canonicalize(&back.paths[id]).unwrap(), fs::canonicalize(path).unwrap());
    }
    let shipped = read_manifest(&root.join("manifest.csv")).unwrap();
    assert_eq!(shipped.catalog.anomalies, written.catalog.anomalies);
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--dataset-root", p(data), "--out-dir", p(out), "--seed", "3"];
    args.extend(SMALL);
    args.extend(extra);
    let o = dra(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

#[test]
fn train_then_eval() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    let ckpt = train_small(&data, &tmp.path().join("out"), &["--preset", "DRA2A"]);
    assert!(ckpt.ends_with("DRA2A_seed3/model.dra"), "{}", ckpt.display());
    let dir = ckpt.parent().unwrap();
    assert!(dir.join("split.json").is_file());
    let log = fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let eval_dir = tmp.path().join("eval");
    let o = dra(&["eval", "--checkpoint", p(&ckpt), "--dataset-root", p(&data), "--out-dir", p(&eval_dir), "--profile", "desk"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["scores.csv", "report.json", "results.csv", "scores.svg"] {
        assert!(eval_dir.join(f).is_file(), "{f}");
    }
    let report: RunReport = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    let loaded = checkpoint_load(&ckpt).unwrap();
    assert_eq!(report.config_hash, config_hash(&loaded.config));
    assert_eq!(report.preset, "DRA2A");
    assert_eq!(report.seed, 3);
    assert!((0.0..=1.0).contains(&report.auc));

    let scores = fs::read_to_string(eval_dir.join("scores.csv")).unwrap();
    let header = scores.lines().next().unwrap();
    assert!(header.starts_with("id,label,class,score"));
    assert_eq!(scores.lines().count(), 1 + 8 + 2 * 12 - 10);

    let again = tmp.path().join("eval2");
    let o = dra(&["eval", "--checkpoint", p(&ckpt), "--dataset-root", p(&data), "--out-dir", p(&again), "--profile", "desk"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tree(&eval_dir), tree(&again));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    let ckpt = train_small(&data, &tmp.path().join("out"), &["--preset", "DRA1A"]);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let o = dra(&["eval", "--checkpoint", p(&ckpt), "--dataset-root", p(&data), "--profile", "desk"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("integrity"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_every_preset() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    let out = tmp.path().join("abl");
    let mut args = vec!["ablate", "--dataset-root", p(&data), "--out-dir", p(&out), "--seed", "0,1", "--no-plot"];
    args.extend(SMALL);
    let o = dra(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next().unwrap(), "dataset,subset,protocol,shots,preset,seed,auc,seconds");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 10);
    for seed in ["0", "1"] {
        let presets: Vec<&str> = rows.iter().filter(|r| r[5] == seed).map(|r| r[4]).collect();
        assert_eq!(presets, ["DRA1A", "DRA2A", "DRA3Ar", "DRA3An", "DRA"]);
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    for preset in ["DRA1A", "DRA2A", "DRA3Ar", "DRA3An", "DRA"] {
        let dir = out.join("runs").join(format!("{preset}_seed0"));
        let report: RunReport = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
        let ckpt = checkpoint_load(&dir.join("model.dra")).unwrap();
        assert_eq!(report.config_hash, config_hash(&ckpt.config));
    }
}

#[test]
fn selftest_passes() {
    let o = dra(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}
