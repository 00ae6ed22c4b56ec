use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geomattn::data::{Manifest, Raster};

fn geomattn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomattn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GEOMATTN_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = geomattn(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMOKE: &str = "data = data\npreset = full\nmax_steps = 20\nlr = 0.001\np = 2\n";

fn smoke_setup(dir: &Path) {
    ok(&["gen", "--out", "data", "--ids", "2", "--per-id", "4", "--seed", "7"], dir);
    fs::write(dir.join("smoke.cfg"), SMOKE).unwrap();
}

#[test]
fn gen_counts_match_flags() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gen", "--out", "d", "--ids", "3", "--per-id", "5", "--test-ids", "2"], dir.path());
    assert_eq!(stdout.trim(), "images 25 train 15 query 4 gallery 6 train_ids 3 test_ids 2");
    let m = Manifest::load(dir.path().join("d/manifest.tsv")).unwrap();
    assert_eq!(m.records.len(), 25);
    for r in &m.records {
        assert!(dir.path().join("d").join(&r.path).exists());
    }
}

#[test]
fn gen_refuses_non_empty_dir_without_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("d")).unwrap();
    fs::write(dir.path().join("d/keep.txt"), "x").unwrap();
    let args = ["gen", "--out", "d", "--ids", "2", "--per-id", "3"];
    let out = geomattn(&args, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert!(!dir.path().join("d/manifest.tsv").exists());
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced, dir.path());
    assert!(dir.path().join("d/manifest.tsv").exists());
}

#[test]
fn gen_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        ok(&["gen", "--out", d, "--ids", "2", "--per-id", "3", "--seed", "11"], dir.path());
    }
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "manifest.tsv"), read("b", "manifest.tsv"));
    let m = Manifest::load(dir.path().join("a/manifest.tsv")).unwrap();
    for r in &m.records {
        assert_eq!(read("a", &r.path), read("b", &r.path), "{}", r.path);
    }
}

#[test]
fn smoke_pipeline_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_setup(d);
    ok(&["train", "--config", "smoke.cfg", "--out", "run1"], d);
    ok(&["train", "--config", "smoke.cfg", "--out", "run2"], d);
    let log = fs::read_to_string(d.join("run1/loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    assert_eq!(log, fs::read_to_string(d.join("run2/loss_log.jsonl")).unwrap());
    let metrics = fs::read_to_string(d.join("run1/metrics.json")).unwrap();
    assert_eq!(metrics, fs::read_to_string(d.join("run2/metrics.json")).unwrap());

    let e1 = ok(&["eval", "--ckpt", "run1/model.gatn", "--data", "data"], d);
    let e2 = ok(&["eval", "--ckpt", "run2/model.gatn", "--data", "data"], d);
    assert_eq!(e1, e2);
    assert_eq!(e1.trim(), metrics.trim());
    let v: serde_json::Value = serde_json::from_str(&e1).unwrap();
    assert_eq!(v["imap"], v["tmap"], "gallery tracks are singletons");
}

#[test]
fn env_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_setup(d);
    ok(&["train", "--config", "smoke.cfg", "--out", "base"], d);
    let out = Command::new(env!("CARGO_BIN_EXE_geomattn"))
        .args(["train", "--config", "smoke.cfg", "--out", "env"])
        .current_dir(d)
        .env("GEOMATTN_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(&["train", "--config", "smoke.cfg", "--out", "flag", "--seed", "5"], d);
    let log = |r: &str| fs::read_to_string(d.join(r).join("loss_log.jsonl")).unwrap();
    assert_ne!(log("base"), log("env"));
    assert_eq!(log("env"), log("flag"));
    assert!(fs::read_to_string(d.join("env/model.cfg")).unwrap().contains("seed = 5\n"));
}

#[test]
fn attention_export_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_setup(d);
    ok(&["train", "--config", "smoke.cfg", "--out", "run"], d);
    ok(
        &["attn", "--ckpt", "run/model.gatn", "--image", "data/images/000000.ppm", "--out", "att"],
        d,
    );
    let csv = fs::read_to_string(d.join("att.csv")).unwrap();
    let values: Vec<f64> = csv
        .lines()
        .flat_map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()))
        .collect();
    assert_eq!(values.len(), 64);
    assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let pgm = Raster::load(d.join("att.pgm")).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.channels), (8, 8, 1));
    assert_eq!(pgm.pixels.iter().max(), Some(&255));
    let overlay = Raster::load(d.join("att_overlay.ppm")).unwrap();
    assert_eq!((overlay.width, overlay.height, overlay.channels), (64, 64, 3));
}

#[test]
fn attention_rejects_non_square_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_setup(d);
    ok(&["train", "--config", "smoke.cfg", "--out", "run"], d);
    Raster::new(64, 32, 3, vec![0; 64 * 32 * 3]).unwrap().save(d.join("wide.ppm")).unwrap();
    let out = geomattn(&["attn", "--ckpt", "run/model.gatn", "--image", "wide.ppm", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not square"));
}

#[test]
fn eval_names_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_setup(d);
    ok(&["train", "--config", "smoke.cfg", "--out", "run"], d);
    let cfg = fs::read_to_string(d.join("run/model.cfg")).unwrap();
    fs::write(d.join("run/model.cfg"), cfg.replace("widths = 16,32,64", "widths = 16,32,48")).unwrap();
    let out = geomattn(&["eval", "--ckpt", "run/model.gatn", "--data", "data"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint [") && err.contains("vs model ["), "{err}");
}

#[test]
fn config_prints_parsable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["config"], dir.path());
    assert!(text.contains("preset = full\n"));
    assert_eq!(geomattn::config::RunConfig::parse(&text).unwrap().to_text(), text);
}

#[test]
fn gb_preset_trains_without_slb() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    smoke_setup(d);
    fs::write(d.join("gb.cfg"), SMOKE.replace("full", "gb")).unwrap();
    ok(&["train", "--config", "gb.cfg", "--out", "run"], d);
    for line in fs::read_to_string(d.join("run/loss_log.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_slb"], 0.0);
        assert_eq!(v["l_tri_gfb"], 0.0);
    }
}
