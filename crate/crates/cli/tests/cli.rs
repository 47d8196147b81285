use landmark_core::encoder::{EncoderConfig, EncoderState};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn landmark(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_landmark"))
        .args(args)
        .env(landmark_cli::RUN_ROOT_ENV, root)
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn last_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("one summary line")).unwrap()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = landmark(tmp.path(), &["synth", "--out", dir.to_str().unwrap(), "--n", "6", "--n-same", "2", "--n-diff", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["landmarks.csv", "pairs.txt"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let (ia, ib) = (files(&a.join("images")), files(&b.join("images")));
    assert_eq!(ia.len(), 6);
    for (x, y) in ia.iter().zip(&ib) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn synth_rejects_an_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = landmark(tmp.path(), &["synth", "--out", tmp.path().join("d").to_str().unwrap(), "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(last_json(&out)["error"].as_str().unwrap().contains("at least 1"));
}

#[test]
fn stage2_needs_a_stage1_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = landmark(tmp.path(), &["stage2", "--run", "fresh"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_keys_are_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "run_name = \"x\"\n[stage1]\nepochz = 3\n").unwrap();
    let out = landmark(tmp.path(), &["stage1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn match_viz_self_pair_and_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(landmark(tmp.path(), &["synth", "--out", data.to_str().unwrap(), "--n", "2"]).status.success());
    let ckpt = tmp.path().join("encoder.ckpt");
    EncoderState::<f32>::new(&EncoderConfig::default()).unwrap().save_checkpoint(&ckpt).unwrap();
    let img = files(&data.join("images"))[0].clone();
    let png = tmp.path().join("viz.png");
    let args = |point: &str| {
        vec![
            "match-viz".to_string(),
            "--reference".into(),
            img.to_string_lossy().into(),
            "--query".into(),
            img.to_string_lossy().into(),
            "--point".into(),
            point.into(),
            "--checkpoint".into(),
            ckpt.to_string_lossy().into(),
            "--out".into(),
            png.to_string_lossy().into(),
        ]
    };
    let run = |point: &str| {
        let a = args(point);
        landmark(tmp.path(), &a.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let out = run("21,37");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hit = last_json(&out)["match"].clone();
    // cell (5, 9) of a stride-4 grid has its center at (22, 38)
    assert_eq!(hit, serde_json::json!([22.0, 38.0]));
    assert!(png.exists());

    let out = run("64,10");
    assert_eq!(out.status.code(), Some(1));
    assert!(last_json(&out)["error"].as_str().unwrap().contains("outside"));
}
