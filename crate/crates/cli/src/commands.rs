//! Subcommand implementations.
//!
//! Every file written under an output directory carries the run's config hash
//! and seed: CSV files in a leading `#` comment, JSON files as fields.

use crate::{Command, EvalArgs, RunArgs, SynthArgs};
use anyhow::{Context, Result};
use seld_core::checkpoint::{Checkpoint, EpochLog, Role};
use seld_core::config::RunConfig;
use seld_core::features::{acoustic_features, encode_feature_cache, read_foa_wav};
use seld_core::metrics::{Averaging, CalibrationReport, Report};
use seld_core::mixaug::MixMethod;
use seld_core::objectives::TaskMode;
use seld_core::synth::{synth_dataset, SceneSpec, SignalKind};
use seld_core::train::{
    evaluate_predictions, feature_cache_path, list_clips, load_dataset, model_from_checkpoint,
    predict_dataset, ClipPrediction, Evaluation, SeldReport, Trainer,
};
use seld_core::{Error as CoreError, Scalar};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::SystemTime;

/// 1 for validation problems, 2 for runtime failures.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<CoreError>()) {
        Some(core) if core.is_validation() => 1,
        _ => 2,
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    CoreError::InvalidInput(msg.into()).into()
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(invalid(format!(
            "{what} directory {} does not exist",
            p.display()
        )));
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(invalid(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

/// Identity embedded in every artifact.
#[derive(Clone, Debug, Serialize)]
struct Provenance {
    config_hash: String,
    seed: u64,
}

impl Provenance {
    fn of(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }

    fn comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, prov: &Provenance, body: serde_json::Value) -> Result<()> {
    let mut doc = json!({ "config_hash": prov.config_hash, "seed": prov.seed });
    if let (Some(d), serde_json::Value::Object(b)) = (doc.as_object_mut(), body) {
        d.extend(b);
    }
    write(path, serde_json::to_string_pretty(&doc)? + "\n")
}

fn write_csv<S: Serialize>(path: &Path, prov: &Provenance, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(prov.comment().into_bytes());
    for r in rows {
        w.serialize(r)?;
    }
    write(path, w.into_inner()?)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Extract { data, cache, force } => extract(&data, &cache, force),
        Command::Synth(a) => synth(&a),
        Command::TrainTeacher { run } => {
            if run.f64 {
                train::<f64>(&run, None, None, None)
            } else {
                train::<f32>(&run, None, None, None)
            }
        }
        Command::TrainStudent {
            run,
            teacher,
            kd,
            mix,
        } => {
            if run.f64 {
                train::<f64>(&run, Some(&teacher), kd.as_deref(), mix.as_deref())
            } else {
                train::<f32>(&run, Some(&teacher), kd.as_deref(), mix.as_deref())
            }
        }
        Command::Evaluate(a) => {
            if a.f64 {
                evaluate::<f64>(&a, false)
            } else {
                evaluate::<f32>(&a, false)
            }
        }
        Command::ReportCalibration(a) => {
            if a.f64 {
                evaluate::<f64>(&a, true)
            } else {
                evaluate::<f32>(&a, true)
            }
        }
    }
}

fn modified(p: &Path) -> Option<SystemTime> {
    std::fs::metadata(p).and_then(|m| m.modified()).ok()
}

fn extract(data: &Path, cache: &Path, force: bool) -> Result<()> {
    require_dir(data, "data")?;
    std::fs::create_dir_all(cache).with_context(|| format!("creating {}", cache.display()))?;
    let names = list_clips(data)?;
    let (mut wrote, mut skipped) = (0, 0);
    for name in &names {
        let wav = data.join(format!("{name}.wav"));
        let dst = feature_cache_path(cache, name);
        let fresh = matches!((modified(&wav), modified(&dst)), (Some(w), Some(c)) if c >= w);
        if fresh && !force {
            skipped += 1;
            continue;
        }
        let feats = acoustic_features(&read_foa_wav::<f32>(&wav)?)?;
        write(&dst, encode_feature_cache(&feats.into_dyn()))?;
        wrote += 1;
    }
    let cfg = RunConfig::default();
    let manifest = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "clips": names,
        "frames_per_second": seld_core::features::FRAMES_PER_SECOND,
        "window_len": seld_core::features::WINDOW_LEN,
        "n_mels": seld_core::features::N_MELS,
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let mpath = cache.join("manifest.json");
    if std::fs::read_to_string(&mpath).ok().as_deref() != Some(text.as_str()) {
        write(&mpath, text)?;
    }
    println!("extracted {wrote} clip(s), {skipped} up to date");
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let signal = match a.signal.as_str() {
        "broadband" => SignalKind::Broadband,
        "tone" => SignalKind::Tone,
        _ => SignalKind::ClassNoise,
    };
    let spec = SceneSpec {
        n_events: a.events,
        n_classes: a.classes,
        clip_seconds: a.seconds,
        snr_db: (!a.clean).then_some(a.snr_db),
        seed: a.seed,
        signal,
        sn3d: a.sn3d,
        ..SceneSpec::default()
    };
    if !(spec.clip_seconds > 0.0) {
        return Err(invalid("--seconds must be positive"));
    }
    let names = synth_dataset(&a.out, a.count, &spec)?;
    let spec_json = serde_json::to_value(&spec)?;
    let prov = Provenance {
        config_hash: format!("{:x}", Sha256::digest(spec_json.to_string().as_bytes())),
        seed: a.seed,
    };
    write_json(
        &a.out.join("manifest.json"),
        &prov,
        json!({ "spec": spec_json, "clips": names }),
    )?;
    println!("wrote {} clip(s) to {}", names.len(), a.out.display());
    Ok(())
}

fn apply_kd_mix(cfg: &mut RunConfig, kd: Option<&str>, mix: Option<&str>) -> Result<()> {
    if let Some(kd) = kd {
        (cfg.kd.rkd, cfg.kd.fkd) = match kd {
            "none" => (false, false),
            "rkd" => (true, false),
            "fkd" => (false, true),
            "both" => (true, true),
            other => return Err(invalid(format!("unknown --kd value `{other}`"))),
        };
    }
    if let Some(m) = mix {
        cfg.mix.method = m.parse::<MixMethod>()?;
    }
    Ok(())
}

fn run_config(
    run: &RunArgs,
    base: Option<RunConfig>,
    kd: Option<&str>,
    mix: Option<&str>,
) -> Result<RunConfig> {
    let mut cfg = match (&run.config, base) {
        (Some(path), _) => {
            require_file(path, "config file")?;
            RunConfig::load(path)?
        }
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(&run.overrides)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(e) = run.epochs {
        cfg.train.epochs = e;
    }
    apply_kd_mix(&mut cfg, kd, mix)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train<T: Scalar>(
    run: &RunArgs,
    teacher_path: Option<&Path>,
    kd: Option<&str>,
    mix: Option<&str>,
) -> Result<()> {
    require_dir(&run.data, "data")?;
    if let Some(c) = &run.cache {
        require_dir(c, "cache")?;
    }
    let resume = match &run.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(Checkpoint::<T>::load(p)?)
        }
        None => None,
    };
    let cfg = run_config(
        run,
        resume.as_ref().map(|c| c.header.config.clone()),
        kd,
        mix,
    )?;
    let role = if teacher_path.is_some() {
        Role::Student
    } else {
        Role::Teacher
    };
    let teacher = match teacher_path {
        Some(p) => {
            require_file(p, "teacher checkpoint")?;
            let ck = Checkpoint::<T>::load(p)?;
            if ck.header.role != Role::Teacher {
                return Err(invalid(format!(
                    "{} is not a teacher checkpoint",
                    p.display()
                )));
            }
            if ck.header.config.task_mode != cfg.task_mode {
                return Err(invalid(
                    "teacher task_mode differs from the run configuration",
                ));
            }
            Some(model_from_checkpoint(&ck)?)
        }
        None => None,
    };
    let data = load_dataset::<T>(
        &run.data,
        run.cache.as_deref(),
        cfg.model.n_classes,
        cfg.task_mode,
    )?;
    let seg_frames =
        (cfg.train.segment_seconds * seld_core::synth::LABEL_FPS as f64).round() as usize;
    let data = data.segmented(seg_frames);

    let mut trainer = match (&resume, role) {
        (Some(ck), _) => {
            if ck.header.role != role {
                return Err(invalid(
                    "resume checkpoint belongs to the other training stage",
                ));
            }
            Trainer::resume(ck, cfg.clone(), teacher)?
        }
        (None, Role::Teacher) => Trainer::new_teacher(cfg.clone())?,
        (None, Role::Student) => {
            Trainer::new_student(cfg.clone(), teacher.expect("teacher loaded"))?
        }
    };

    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let stem = match role {
        Role::Teacher => "teacher",
        Role::Student => "student",
    };
    let ckpt_path = run.out.join(format!("{stem}.ckpt"));
    if let Some(tp) = teacher_path {
        if same_file(tp, &ckpt_path) {
            return Err(invalid(
                "output checkpoint would overwrite the teacher checkpoint",
            ));
        }
    }
    let prov = Provenance::of(&cfg);
    write(
        &run.out.join("config.ini"),
        format!("{}{}", prov.comment(), cfg.to_ini()),
    )?;
    let log_path = run.out.join(format!("{stem}_log.jsonl"));
    let mut log_lines: Vec<String> = Vec::new();
    let entry = |l: &EpochLog| -> String {
        let mut v = serde_json::to_value(l).expect("log serialises");
        if let Some(o) = v.as_object_mut() {
            o.insert("config_hash".into(), json!(prov.config_hash));
            o.insert("seed".into(), json!(prov.seed));
        }
        v.to_string()
    };
    log_lines.extend(trainer.history.iter().map(&entry));
    eprintln!(
        "{stem}: {} segment(s), {} epoch(s), config {}",
        data.len(),
        cfg.train.epochs,
        &prov.config_hash[..12]
    );
    trainer.fit(&data, |l| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  task {:.5}  lr {:.2e}",
            l.epoch, l.loss, l.task, l.lr
        );
        log_lines.push(entry(l));
    })?;
    trainer.checkpoint(data.len()).save(&ckpt_path)?;
    write(&log_path, log_lines.join("\n") + "\n")?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn parse_mode(s: &str) -> Result<TaskMode> {
    Ok(s.parse::<TaskMode>()?)
}

#[derive(Serialize)]
struct CalibrationRow {
    class: String,
    bin: usize,
    lower: f64,
    upper: f64,
    count: usize,
    mean_confidence: Option<f64>,
    accuracy: Option<f64>,
}

fn calibration_rows(c: &CalibrationReport) -> Vec<CalibrationRow> {
    let mut rows = Vec::new();
    let mut push = |label: String, bins: &[seld_core::metrics::CalibrationBin]| {
        for (i, b) in bins.iter().enumerate() {
            rows.push(CalibrationRow {
                class: label.clone(),
                bin: i,
                lower: b.lower,
                upper: b.upper,
                count: b.count,
                mean_confidence: b.mean_confidence,
                accuracy: b.accuracy,
            });
        }
    };
    push("all".into(), &c.overall);
    for (n, bins) in c.classes.iter().enumerate() {
        push(n.to_string(), bins);
    }
    rows
}

fn evaluate<T: Scalar>(a: &EvalArgs, calibration_only: bool) -> Result<()> {
    require_dir(&a.data, "data")?;
    if let Some(c) = &a.cache {
        require_dir(c, "cache")?;
    }
    let requested = a.task_mode.as_deref().map(parse_mode).transpose()?;
    let (preds, data, mode, prov) = match (&a.ckpt, &a.predictions) {
        (Some(ckpt), _) => {
            require_file(ckpt, "checkpoint")?;
            let ck = Checkpoint::<T>::load(ckpt)?;
            let cfg = &ck.header.config;
            if let Some(m) = requested {
                if m != cfg.task_mode {
                    return Err(invalid(format!(
                        "task mode {} does not match the checkpoint ({})",
                        m.as_str(),
                        cfg.task_mode.as_str()
                    )));
                }
            }
            let model = model_from_checkpoint(&ck)?;
            let data = load_dataset::<T>(
                &a.data,
                a.cache.as_deref(),
                cfg.model.n_classes,
                cfg.task_mode,
            )?;
            let preds = predict_dataset(&model, &data)?;
            (preds, data, cfg.task_mode, Provenance::of(cfg))
        }
        (None, Some(dir)) => {
            require_dir(dir, "predictions")?;
            let mode = requested.unwrap_or(TaskMode::Doa2023);
            let n_classes = a.n_classes.unwrap_or(RunConfig::default().model.n_classes);
            let data = load_dataset::<T>(&a.data, a.cache.as_deref(), n_classes, mode)?;
            let mut hasher = Sha256::new();
            let mut preds = Vec::new();
            for e in &data.examples {
                let path = dir.join(format!("{}.events.csv", e.name));
                require_file(&path, "prediction file")?;
                hasher.update(
                    std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
                );
                let rows = seld_core::metrics::read_event_csv(&path)?;
                preds.push(ClipPrediction::from_rows(
                    &e.name,
                    &rows,
                    e.label_frames(),
                    n_classes,
                    mode,
                )?);
            }
            let prov = Provenance {
                config_hash: format!("{:x}", hasher.finalize()),
                seed: 0,
            };
            (preds, data, mode, prov)
        }
        (None, None) => return Err(invalid("either --ckpt or --predictions is required")),
    };
    let averaging = if a.macro_avg {
        Averaging::Macro
    } else {
        Averaging::Micro
    };
    let ev: Evaluation = evaluate_predictions(&preds, &data, mode, averaging)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_csv(
        &a.out.join("calibration.csv"),
        &prov,
        &calibration_rows(&ev.calibration),
    )?;
    write_json(
        &a.out.join("calibration.json"),
        &prov,
        json!({ "calibration": serde_json::to_value(&ev.calibration)? }),
    )?;
    if calibration_only {
        println!("wrote calibration data to {}", a.out.display());
        return Ok(());
    }
    let (report_json, text) = match &ev.seld {
        SeldReport::Dcase2023(r) => (serde_json::to_value(r)?, r.to_text()),
        SeldReport::Dcase2024(r) => (serde_json::to_value(r)?, r.to_text()),
    };
    write_json(
        &a.out.join("report.json"),
        &prov,
        json!({
            "task_mode": mode.as_str(),
            "averaging": if a.macro_avg { "macro" } else { "micro" },
            "clips": data.len(),
            "report": report_json,
        }),
    )?;
    write(
        &a.out.join("report.txt"),
        format!("{}{}", prov.comment(), text),
    )?;
    #[derive(Serialize)]
    struct MseRow {
        index: usize,
        mse: f64,
    }
    let mse: Vec<MseRow> = ev
        .mse
        .iter()
        .enumerate()
        .map(|(index, &mse)| MseRow { index, mse })
        .collect();
    write_csv(&a.out.join("mse.csv"), &prov, &mse)?;
    let pdir = a.out.join("predictions");
    std::fs::create_dir_all(&pdir).with_context(|| format!("creating {}", pdir.display()))?;
    for p in &preds {
        write_csv(
            &pdir.join(format!("{}.events.csv", p.name)),
            &prov,
            &p.to_rows(mode)?,
        )?;
    }
    print!("{text}");
    Ok(())
}
