//! End-to-end runs of the `seld` binary on small synthetic corpora.

use seld_core::features::{acoustic_features, read_feature_cache, read_foa_wav};
use seld_core::metrics::{write_event_csv, EventRow};
use seld_core::objectives::read_label_csv;
use seld_core::visual::read_keypoint_csv;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn seld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seld"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = seld(args);
    assert!(
        out.status.success(),
        "seld {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn synth(dir: &Path, count: usize, seconds: f64, events: usize, seed: u64) {
    ok(&[
        "synth",
        "--out",
        s(dir),
        "--count",
        &count.to_string(),
        "--seconds",
        &seconds.to_string(),
        "--events",
        &events.to_string(),
        "--seed",
        &seed.to_string(),
        "--classes",
        "5",
    ]);
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    v
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic_and_files_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 3, 2.0, 2, 7);
    synth(&b, 3, 2.0, 2, 7);
    let fa = sorted_files(&a);
    // three clips with audio, labels and keypoints, plus the manifest
    assert_eq!(fa.len(), 3 * 3 + 1);
    for (x, y) in fa.iter().zip(sorted_files(&b)) {
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(&y).unwrap(),
            "{}",
            x.display()
        );
    }
    for i in 0..3 {
        let rows = read_label_csv(&a.join(format!("clip_{i:04}.labels.csv"))).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.frame < 20 && r.class < 5));
        read_keypoint_csv(&a.join(format!("clip_{i:04}.keypoints.csv"))).unwrap();
    }
    let m = json(&a.join("manifest.json"));
    assert!(m["config_hash"].is_string() && m["seed"] == 7);
}

#[test]
fn extract_is_idempotent_and_cache_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cache) = (tmp.path().join("data"), tmp.path().join("cache"));
    synth(&data, 2, 1.0, 1, 1);
    let first = ok(&["extract", "--data", s(&data), "--cache", s(&cache)]);
    assert!(String::from_utf8_lossy(&first.stdout).contains("extracted 2 clip(s)"));
    let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    let before: Vec<_> = sorted_files(&cache)
        .iter()
        .map(|p| (p.clone(), stamp(p)))
        .collect();
    let second = ok(&["extract", "--data", s(&data), "--cache", s(&cache)]);
    assert!(String::from_utf8_lossy(&second.stdout).contains("extracted 0 clip(s), 2 up to date"));
    let after: Vec<_> = sorted_files(&cache)
        .iter()
        .map(|p| (p.clone(), stamp(p)))
        .collect();
    assert_eq!(before, after);

    let direct =
        acoustic_features(&read_foa_wav::<f32>(&data.join("clip_0000.wav")).unwrap()).unwrap();
    let cached =
        read_feature_cache::<f32>(&seld_core::train::feature_cache_path(&cache, "clip_0000"))
            .unwrap();
    assert_eq!(cached.shape(), direct.shape());
    assert!(cached
        .iter()
        .zip(direct.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corrupt_audio_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 1.0, 1, 2);
    std::fs::write(data.join("clip_0001.wav"), b"RIFF not really a wave file").unwrap();
    let out = seld(&[
        "extract",
        "--data",
        s(&data),
        "--cache",
        s(&tmp.path().join("cache")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip_0001.wav"));
}

#[test]
fn missing_inputs_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = seld(&[
        "train-teacher",
        "--data",
        s(&missing),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = seld(&["train-teacher", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let data = tmp.path().join("data");
    synth(&data, 1, 1.0, 1, 3);
    let out = seld(&[
        "train-teacher",
        "--data",
        s(&data),
        "--out",
        s(tmp.path()),
        "--set",
        "mix.alpha=-1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_predictions_score_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, preds, out) = (
        tmp.path().join("data"),
        tmp.path().join("preds"),
        tmp.path().join("eval"),
    );
    synth(&data, 3, 2.0, 1, 4);
    std::fs::create_dir_all(&preds).unwrap();
    for i in 0..3 {
        let name = format!("clip_{i:04}");
        let rows: Vec<EventRow> = read_label_csv(&data.join(format!("{name}.labels.csv")))
            .unwrap()
            .into_iter()
            .map(|r| EventRow {
                frame: r.frame,
                class: r.class,
                azimuth_deg: r.azimuth_deg,
                elevation_deg: r.elevation_deg,
                distance_m: Some(r.distance_cm / 100.0),
                confidence: None,
            })
            .collect();
        write_event_csv(&preds.join(format!("{name}.events.csv")), &rows).unwrap();
    }
    for mode in ["2023", "2024"] {
        ok(&[
            "evaluate",
            "--data",
            s(&data),
            "--predictions",
            s(&preds),
            "--out",
            s(&out),
            "--task-mode",
            mode,
            "--n-classes",
            "5",
            "--f64",
        ]);
        let r = json(&out.join("report.json"));
        assert_eq!(r["task_mode"], mode);
        assert_eq!(r["report"]["score"].as_f64(), Some(0.0), "{r}");
    }
}

#[test]
fn teacher_student_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let (data, cache, tdir, sdir) = (p("data"), p("cache"), p("teacher"), p("student"));
    synth(&data, 4, 2.0, 2, 5);
    ok(&["extract", "--data", s(&data), "--cache", s(&cache)]);
    let common = [
        "--data",
        s(&data),
        "--cache",
        s(&cache),
        "--set",
        "model.n_classes=5",
        "--set",
        "train.batch_size=4",
        "--set",
        "train.segment_seconds=1",
    ];
    let mut args = vec!["train-teacher", "--out", s(&tdir), "--epochs", "2"];
    args.extend(common);
    ok(&args);
    let teacher = tdir.join("teacher.ckpt");
    let teacher_bytes = std::fs::read(&teacher).unwrap();
    let ini = std::fs::read_to_string(tdir.join("config.ini")).unwrap();
    assert!(ini.starts_with("# config_hash="));
    let log = std::fs::read_to_string(tdir.join("teacher_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["config_hash"].is_string() && v["seed"].is_u64());
    }

    // resuming continues the epoch count and keeps the log
    let resumed = p("resumed");
    let mut args = vec![
        "train-teacher",
        "--out",
        s(&resumed),
        "--epochs",
        "3",
        "--resume",
        s(&teacher),
    ];
    args.extend(common);
    ok(&args);
    let log = std::fs::read_to_string(resumed.join("teacher_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let mut args = vec![
        "train-student",
        "--out",
        s(&sdir),
        "--epochs",
        "1",
        "--teacher",
        s(&teacher),
        "--kd",
        "both",
        "--mix",
        "pointmix",
    ];
    args.extend(common);
    ok(&args);
    assert_eq!(std::fs::read(&teacher).unwrap(), teacher_bytes);
    let student = sdir.join("student.ckpt");
    assert!(student.is_file());

    // a student run never overwrites the checkpoint it distils from
    let trap = p("trap");
    std::fs::create_dir_all(&trap).unwrap();
    let disguised = trap.join("student.ckpt");
    std::fs::copy(&teacher, &disguised).unwrap();
    let mut args = vec![
        "train-student",
        "--out",
        s(&trap),
        "--epochs",
        "1",
        "--teacher",
        s(&disguised),
    ];
    args.extend(common);
    assert_eq!(seld(&args).status.code(), Some(1));
    assert_eq!(std::fs::read(&disguised).unwrap(), teacher_bytes);

    let eval = |out: &Path| {
        ok(&[
            "evaluate",
            "--data",
            s(&data),
            "--cache",
            s(&cache),
            "--ckpt",
            s(&student),
            "--out",
            s(out),
        ])
    };
    let (e1, e2) = (p("eval1"), p("eval2"));
    eval(&e1);
    eval(&e2);
    for f in [
        "report.json",
        "report.txt",
        "calibration.csv",
        "calibration.json",
        "mse.csv",
    ] {
        assert_eq!(
            std::fs::read(e1.join(f)).unwrap(),
            std::fs::read(e2.join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    let r = json(&e1.join("report.json"));
    for k in ["er", "f", "le", "lr", "score"] {
        assert!(r["report"][k].is_number(), "{k} missing in {r}");
    }
    assert!(r["config_hash"].is_string() && r["seed"].is_u64());
    assert_eq!(r["task_mode"], "2023");
    assert_eq!(r["clips"], 4);
    let preds = sorted_files(&e1.join("predictions"));
    assert_eq!(preds.len(), 4);
    assert!(std::fs::read_to_string(&preds[0])
        .unwrap()
        .starts_with("# config_hash="));

    let cal = p("cal");
    ok(&[
        "report-calibration",
        "--data",
        s(&data),
        "--ckpt",
        s(&student),
        "--out",
        s(&cal),
    ]);
    assert!(cal.join("calibration.csv").is_file() && !cal.join("report.json").exists());

    let out = seld(&[
        "evaluate",
        "--data",
        s(&data),
        "--ckpt",
        s(&student),
        "--out",
        s(&p("bad")),
        "--task-mode",
        "2024",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
