use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mavos::synthgen::{import, SUITE_NAMES};

fn mavos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mavos"))
        .args(args)
        .env("MAVOS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_reproducible_and_matches_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mavos(&["gen", "--suite", "standard", "--seed", "3", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let mut want: Vec<String> = SUITE_NAMES.iter().map(|n| format!("{n}.mavs")).collect();
    want.sort();
    assert_eq!(names, want);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    let verylong = import::<f64>(&a.join("verylong.mavs")).unwrap();
    assert_eq!(verylong.frames.len(), 4096);
    assert_eq!(verylong.masks.len(), 4096);

    let c = dir.path().join("c");
    let o = mavos(&["gen", "--suite", "short", "--seed", "4", "--out", p(&c)]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(c.join("short.mavs")).unwrap(), fs::read(a.join("short.mavs")).unwrap());
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&mavos(&["gen", "--suite", "occlusion", "--out", p(&data)])), 0);
    let out = dir.path().join("m.json");
    let o = mavos(&["eval", "--data", p(&data), "--gt-as-prediction", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["mean"]["jf"], 1.0);
    assert_eq!(v["videos"][0]["name"], "occlusion");
    assert_eq!(v["videos"][0]["jf"], 1.0);
}

#[test]
fn train_then_eval_with_config_file_and_level_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train");
    let o = mavos(&["gen", "--suite", "train", "--videos", "2", "--frames", "10", "--out", p(&data)]);
    assert_eq!(code(&o), 0);
    let config = dir.path().join("cfg.json");
    fs::write(
        &config,
        r#"{"model":{"stride":16,"dim":8,"blocks":1,"decoder_hidden":8},"train":{"steps":2,"unroll":3},"eval":{"delta":5}}"#,
    )
    .unwrap();
    for levels in ["1", "2", "3"] {
        let ck = dir.path().join(format!("ck_L{levels}.bin"));
        let csv = dir.path().join(format!("loss_L{levels}.csv"));
        let o = mavos(&[
            "train", "--config", p(&config), "--data", p(&data), "--checkpoint", p(&ck), "--loss-csv", p(&csv), "--levels", levels,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let loss = fs::read_to_string(&csv).unwrap();
        assert!(loss.starts_with("step,loss\n"));
        assert_eq!(loss.lines().count(), 3);
        assert!(dir.path().join(format!("ck_L{levels}.bin.json")).exists());
    }
    let template = dir.path().join("ck_L{levels}.bin");
    let out = dir.path().join("ablation.json");
    let dumps = dir.path().join("pgm");
    let o = mavos(&[
        "eval", "--config", p(&config), "--data", p(&data), "--checkpoint", p(&template), "--levels", "1,2,3", "--out", p(&out),
        "--dump-pgm", p(&dumps),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let runs = v["ablation"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for (r, l) in runs.iter().zip(1..) {
        assert_eq!(r["levels"], l);
        assert_eq!(r["delta"], 5);
        let jf = r["mean"]["jf"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&jf));
    }
    assert!(fs::read_dir(&dumps).unwrap().count() > 0);

    // a checkpoint whose level count disagrees with the requested one
    let o = mavos(&["eval", "--data", p(&data), "--checkpoint", p(&dir.path().join("ck_L1.bin")), "--levels", "2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    // unknown flag and unknown suite are validation failures
    assert_eq!(code(&mavos(&["gen", "--bogus"])), 1);
    assert_eq!(code(&mavos(&["gen", "--suite", "nope", "--out", p(dir.path())])), 1);
    // missing dataset is an I/O failure
    let o = mavos(&["eval", "--data", p(&dir.path().join("missing.mavs")), "--gt-as-prediction"]);
    assert_eq!(code(&o), 2);
    // corrupt dataset is a format failure
    let junk = dir.path().join("junk.mavs");
    fs::write(&junk, b"MAVS\x01\x00garbage").unwrap();
    assert_eq!(code(&mavos(&["eval", "--data", p(&junk), "--gt-as-prediction"])), 2);
    // unwritable bench output
    let file = dir.path().join("file");
    fs::write(&file, b"").unwrap();
    let o = mavos(&["bench", "--lengths", "3", "--out", p(&file.join("rows.csv"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    // invalid bench config
    assert_eq!(code(&mavos(&["bench", "--lengths", "0", "--out", p(&dir.path().join("b.csv"))])), 1);
    // malformed config file
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model":{"grdi":3}}"#).unwrap();
    assert_eq!(code(&mavos(&["--config", p(&bad), "gradcheck", "--depth", "1"])), 1);
    // checkpoint and dataset disagree on grid
    let data = dir.path().join("d");
    assert_eq!(code(&mavos(&["gen", "--suite", "short", "--out", p(&data)])), 0);
    let ck = dir.path().join("ck.bin");
    let o = mavos(&["train", "--data", p(&data), "--checkpoint", p(&ck), "--steps", "0", "--stride", "16", "--dim", "4", "--blocks", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let other = dir.path().join("g");
    fs::create_dir_all(&other).unwrap();
    let recipe = mavos::synthgen::SceneRecipe::new("small", 4, 1, mavos::synthgen::SceneKind::Plain).with_grid(32);
    let v = mavos::synthgen::generate(&mavos::synthgen::random_script(&recipe, 0)).unwrap();
    mavos::synthgen::export::<f64>(&v, &other.join("small.mavs")).unwrap();
    assert_eq!(code(&mavos(&["eval", "--data", p(&other), "--checkpoint", p(&ck)])), 1);
}

#[test]
fn bench_writes_stable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rows.csv");
    let o = mavos(&[
        "bench", "--policies", "mca,full", "--lengths", "21", "--delta", "2", "--sample-every", "10", "--repetitions", "1", "--stride",
        "16", "--dim", "4", "--levels", "1", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let rows = mavos::bench::parse_csv(&text).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1].tokens_stored, 2 * 16);
    assert_eq!(rows[3].tokens_stored, (1 + 20 / 2) * 16);
    assert!(text.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().split('.').nth(1).unwrap().len() == 4));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let o = mavos(&["gradcheck", "--depth", "1", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("modulated_cross_attention"));
    assert!(text.contains("seg_loss"));
    let o = mavos(&["gradcheck", "--depth", "1", "--corrupt-gradient"]);
    assert_eq!(code(&o), 1);
}
