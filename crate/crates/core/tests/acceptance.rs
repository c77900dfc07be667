//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so long experiments report progress and
//! the summary stays readable. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 3 9`.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_core::autodiff::Tape;
use seld_core::backbone::Model;
use seld_core::config::RunConfig;
use seld_core::distill::{hcl_loss, rkd_loss, teacher_forward, RkdWeights, SppConfig};
use seld_core::features::acoustic_features;
use seld_core::metrics::{
    angular_error, calibration_bins, counts_2023, counts_2024, evaluate_2023, evaluate_2024,
    score_2023, score_2024, Averaging, EventGrid,
};
use seld_core::mixaug::{
    apply_mix, mix_supervision, EligibleLayerSet, Granularity, LayerLevel, MixLayer, MixMethod,
    MixPlan, Supervision,
};
use seld_core::objectives::{doa_vector, targets_from_labels, LabelRow, TaskMode};
use seld_core::synth::{render_scene, synth_dataset, SceneSpec, SignalKind, SourceEvent};
use seld_core::train::{
    evaluate_model, load_dataset, Dataset, Example, Modality, SeldReport, Trainer,
};
use std::process::ExitCode;
use std::time::Instant;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn score_formulas() -> Check {
    let cases23 = [
        ((0.44, 0.540, 14.34, 0.660), 0.330),
        ((0.41, 0.616, 13.50, 0.733), 0.284),
    ];
    let cases24 = [
        ((0.452, 15.63, 0.271), 0.302),
        ((0.551, 13.83, 0.255), 0.260),
    ];
    let mut worst: f64 = 0.0;
    for ((er, f, le, lr), want) in cases23 {
        let got = score_2023(er, f, le, lr);
        worst = worst.max((got - want).abs());
        ensure(
            (got - want).abs() <= 5e-4,
            format!("2023 score {got:.4} vs {want}"),
        )?;
    }
    for ((f1, doae, rde), want) in cases24 {
        let got = score_2024(f1, doae, rde);
        worst = worst.max((got - want).abs());
        ensure(
            (got - want).abs() <= 5e-4,
            format!("2024 score {got:.4} vs {want}"),
        )?;
    }
    Ok(format!("4 aggregates, max deviation {worst:.5}"))
}

// ---------------------------------------------------------------- 2

fn doa_from_features(snr_db: Option<f64>, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let spec = SceneSpec {
        clip_seconds: 1.0,
        snr_db,
        signal: SignalKind::Broadband,
        ..Default::default()
    };
    // uniform on the sphere
    let az: f64 = rng.gen_range(-180.0..180.0);
    let el = rng.gen_range(-1.0f64..1.0).asin().to_degrees();
    let ev = SourceEvent {
        class_idx: 3,
        track: 0,
        onset: 0,
        offset: 10,
        azimuth_deg: az,
        elevation_deg: el,
        distance_m: 1.0,
        signal: SignalKind::Broadband,
    };
    let scene = render_scene(&spec, &[ev], rng).map_err(e2s)?;
    let f = acoustic_features(&scene.wave).map_err(e2s)?;
    let mut m = [0.0; 3];
    for t in 0..f.dim().0 {
        for b in 0..f.dim().1 {
            for (k, mk) in m.iter_mut().enumerate() {
                *mk -= f[[t, b, 4 + k]];
            }
        }
    }
    angular_error(m, doa_vector(az, el)).map_err(e2s)
}

fn intensity_doa() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut clean, mut noisy) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        clean = clean.max(doa_from_features(None, &mut rng)?);
        noisy = noisy.max(doa_from_features(Some(20.0), &mut rng)?);
    }
    ensure(clean <= 2.0, format!("clean worst error {clean:.3}°"))?;
    ensure(noisy <= 5.0, format!("20 dB worst error {noisy:.3}°"))?;
    Ok(format!(
        "worst error {clean:.3}° clean, {noisy:.3}° at 20 dB"
    ))
}

// ---------------------------------------------------------------- shared fixtures

/// Random features and labels with `frames` label frames (5 audio frames each).
fn random_example(name: &str, frames: usize, classes: usize, rng: &mut ChaCha8Rng) -> Example<f64> {
    let audio = Array3::from_shape_fn((frames * 5, 64, 7), |_| rng.gen_range(-1.0..1.0));
    let visual = Array3::from_shape_fn((frames, 64, 12), |_| rng.gen_range(0.0..1.0));
    let mut rows = Vec::new();
    for frame in 0..frames {
        for class in 0..classes {
            if rng.gen_bool(0.3) {
                rows.push(LabelRow {
                    frame,
                    class,
                    track: 0,
                    azimuth_deg: rng.gen_range(-180..180) as f64,
                    elevation_deg: rng.gen_range(-45..45) as f64,
                    distance_cm: rng.gen_range(100..400) as f64,
                });
            }
        }
    }
    let targets =
        targets_from_labels(&rows, frames, classes, TaskMode::Doa2023).expect("valid labels");
    Example {
        name: name.into(),
        audio,
        visual,
        targets,
    }
}

fn random_dataset(n: usize, frames: usize, classes: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        examples: (0..n)
            .map(|i| random_example(&format!("ex{i}"), frames, classes, &mut rng))
            .collect(),
    }
}

fn desk_config(extra: &[&str]) -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&["train.batch_size=2", "train.epochs=2"])
        .expect("valid overrides");
    c.apply_overrides(extra).expect("valid overrides");
    c
}

// ---------------------------------------------------------------- 3

fn mixing_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [3, 4, 5, 6];
    let x = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0f64));
    let p = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0f64));
    let point = |l: f64| MixPlan::point(MixMethod::PointMix, 6, l, (6, 4), vec![0, 1, 2]);
    ensure(
        apply_mix(&point(1.0), &x, &p).map_err(e2s)? == x,
        "λ=1 is not the identity",
    )?;
    ensure(
        apply_mix(&point(0.0), &x, &p).map_err(e2s)? == p,
        "λ=0 does not swap",
    )?;

    // patch area: partner cells make up exactly 1 − λ_eff
    for (lambda, center) in [(0.3, (1.0, 1.0)), (0.7, (3.0, 2.0)), (0.05, (5.9, 0.1))] {
        let b = seld_core::mixaug::patch_box(lambda, (6, 4), center);
        let plan = MixPlan::patch(MixMethod::PatchMix, 6, lambda, (6, 4), b, vec![0, 1, 2]);
        let ones = ArrayD::from_elem(IxDyn(&shape), 1.0f64);
        let zeros = ArrayD::zeros(IxDyn(&shape));
        let m = apply_mix(&plan, &ones, &zeros).map_err(e2s)?;
        let frac = m.iter().filter(|&&v| v == 0.0).count() as f64 / m.len() as f64;
        ensure(
            (frac - (1.0 - plan.lambda_eff)).abs() < 1e-12,
            format!("patch fraction {frac}"),
        )?;
    }
    let plan = MixPlan::point(MixMethod::LossMix, 0, 0.25, (64, 7), vec![0]);
    let l = mix_supervision(2.0f64, 6.0, &plan).map_err(e2s)?;
    ensure(l == 0.25 * 2.0 + 0.75 * 6.0, "loss mixing is not linear")?;

    use Granularity::*;
    use MixLayer::*;
    use Supervision::*;
    let table = [
        (MixMethod::Mixup, Point, Input, Label),
        (MixMethod::LossMix, Point, Input, Loss),
        (MixMethod::ManifoldMixup, Point, Hidden, Label),
        (MixMethod::PointMix, Point, Hidden, Loss),
        (MixMethod::CutMix, Patch, Input, Label),
        (MixMethod::CutLossMix, Patch, Input, Loss),
        (MixMethod::PatchMix, Patch, Hidden, Loss),
    ];
    for (m, g, layer, s) in table {
        ensure(
            m.attributes() == Some((g, layer, s)),
            format!("{m} attributes"),
        )?;
    }
    ensure(
        MixMethod::None.attributes().is_none(),
        "none has attributes",
    )?;
    let sizes = [
        LayerLevel::Conv,
        LayerLevel::BasicBlock,
        LayerLevel::ResBlock,
    ]
    .map(|l| EligibleLayerSet::new(l).len());
    ensure(sizes == [19, 9, 5], format!("eligible set sizes {sizes:?}"))?;

    // One float64 training step: method none vs λ ≡ 1 must update parameters bitwise identically.
    let cfg = desk_config(&[]);
    let data = random_dataset(2, 4, 13, 30);
    let batch = data.batch(&[0, 1], Modality::Audio).map_err(e2s)?;
    let base = Trainer::<f64>::new_teacher(cfg.clone()).map_err(e2s)?;
    let run = |plan: &MixPlan| -> Result<String, String> {
        let mut t = base.clone();
        t.step(&batch, plan, 10).map_err(e2s)?;
        Ok(t.model.store.digest())
    };
    let reference = run(&MixPlan::none(2))?;
    let dims = cfg.model.site_dims();
    let box0 = seld_core::mixaug::patch_box(1.0, dims[10], (3.0, 5.0));
    let plans = [
        MixPlan::point(MixMethod::Mixup, 0, 1.0, dims[0], vec![1, 0]),
        MixPlan::point(MixMethod::LossMix, 0, 1.0, dims[0], vec![1, 0]),
        MixPlan::point(MixMethod::ManifoldMixup, 6, 1.0, dims[6], vec![1, 0]),
        MixPlan::point(MixMethod::PointMix, 14, 1.0, dims[14], vec![1, 0]),
        MixPlan::patch(MixMethod::PatchMix, 10, 1.0, dims[10], box0, vec![1, 0]),
    ];
    for plan in &plans {
        ensure(
            run(plan)? == reference,
            format!("{} with λ=1 differs from no mixing", plan.method),
        )?;
    }
    ensure(
        run(&MixPlan::point(
            MixMethod::PointMix,
            14,
            0.5,
            dims[14],
            vec![1, 0],
        ))? != reference,
        "mixing had no effect",
    )?;
    Ok(format!(
        "extremes, patch area, linearity, 7-method table, {} bitwise λ=1 steps",
        plans.len()
    ))
}

// ---------------------------------------------------------------- 4

fn gradient_check() -> Check {
    let cfg = desk_config(&[
        "kd.rkd.enabled=true",
        "kd.fkd.enabled=true",
        "mix.method=pointmix",
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let teacher = Model::<f64>::new(cfg.teacher_config(), &mut rng).map_err(e2s)?;
    let mut student = Trainer::new_student(cfg.clone(), teacher).map_err(e2s)?;
    // move away from the teacher initialization so every term is active
    let ids: Vec<_> = student.model.store.trainable_ids().collect();
    for id in ids {
        student
            .model
            .store
            .value_mut(id)
            .mapv_inplace(|v| v + 0.02 * rng.gen_range(-1.0..1.0));
    }
    // 20 audio frames = 4 label frames
    let data = random_dataset(2, 4, 13, 40);
    let batch = data.batch(&[0, 1], Modality::AudioVisual).map_err(e2s)?;
    let dims = cfg.student_config().site_dims();
    let plan = MixPlan::point(MixMethod::PointMix, 10, 0.7, dims[10], vec![1, 0]);
    // past the warm-up so the feature term carries its full weight
    let epoch = cfg.kd.warmup_epochs.ceil() as usize + 1;
    let loss = |t: &Trainer<f64>| -> Result<f64, String> {
        let o = t.objective(&batch, &plan, 7, epoch).map_err(e2s)?;
        ensure(
            o.rkd.is_some() && o.fkd.is_some(),
            "distillation terms missing",
        )?;
        Ok(o.tape.scalar(o.total))
    };
    let obj = student.objective(&batch, &plan, 7, epoch).map_err(e2s)?;
    let grads = obj.tape.backward(obj.total);

    let trainable: Vec<(String, usize)> = student
        .model
        .store
        .entries()
        .iter()
        .filter(|e| e.is_trainable())
        .flat_map(|e| (0..e.value.len()).map(move |i| (e.name.clone(), i)))
        .collect();
    let fusion: Vec<&(String, usize)> = trainable
        .iter()
        .filter(|(n, _)| n.starts_with("fusion"))
        .collect();
    ensure(
        !fusion.is_empty(),
        "no fusion parameters in the student store",
    )?;
    let mut picks: Vec<(String, usize)> = fusion
        .choose_multiple(&mut rng, 40)
        .map(|&p| p.clone())
        .collect();
    picks.extend(trainable.choose_multiple(&mut rng, 200).cloned());

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, i) in &picks {
        let id = student.model.store.find(name).expect("parameter exists");
        let analytic = grads
            .get(id)
            .map(|g| g.as_slice_memory_order().expect("contiguous")[*i])
            .unwrap_or(0.0);
        let orig = student
            .model
            .store
            .value(id)
            .as_slice_memory_order()
            .expect("contiguous")[*i];
        let mut set = |v: f64| {
            student
                .model
                .store
                .value_mut(id)
                .as_slice_memory_order_mut()
                .expect("contiguous")[*i] = v
        };
        set(orig + h);
        let lp = loss(&student)?;
        let mut set = |v: f64| {
            student
                .model
                .store
                .value_mut(id)
                .as_slice_memory_order_mut()
                .expect("contiguous")[*i] = v
        };
        set(orig - h);
        let lm = loss(&student)?;
        let mut set = |v: f64| {
            student
                .model
                .store
                .value_mut(id)
                .as_slice_memory_order_mut()
                .expect("contiguous")[*i] = v
        };
        set(orig);
        let numeric = (lp - lm) / (2.0 * h);
        // absolute floor keeps round-off on vanishing gradients from dominating
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        if rel >= 1e-3 {
            return Err(format!(
                "{name}[{i}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})"
            ));
        }
        worst = worst.max(rel);
    }
    Ok(format!(
        "{} parameters ({} in fusion), max relative error {worst:.2e}",
        picks.len(),
        fusion.len().min(40)
    ))
}

// ---------------------------------------------------------------- 5

fn fixed_points() -> Check {
    let cfg = desk_config(&[
        "kd.rkd.enabled=true",
        "kd.fkd.enabled=true",
        "mix.method=pointmix",
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let teacher = Model::<f64>::new(cfg.teacher_config(), &mut rng).map_err(e2s)?;
    let data = random_dataset(4, 4, 13, 50);
    let batch = data.batch(&[0, 1, 2, 3], Modality::Audio).map_err(e2s)?;
    let out = teacher_forward(&teacher, &batch.input, None).map_err(e2s)?;
    let mut tape = Tape::<f64>::new();
    let ta = tape.constant(out.activity.clone());
    let tl = tape.constant(out.location.clone());
    let sa = tape.constant(out.activity.clone());
    let sl = tape.constant(out.location.clone());
    let r = rkd_loss(&mut tape, ta, tl, sa, sl, &RkdWeights::default()).map_err(e2s)?;
    ensure(
        tape.scalar(r) == 0.0,
        format!("rkd at equality {}", tape.scalar(r)),
    )?;
    let t: Vec<_> = out
        .stages
        .iter()
        .map(|s| tape.constant(s.clone()))
        .collect();
    let f: Vec<_> = out
        .stages
        .iter()
        .map(|s| tape.constant(s.clone()))
        .collect();
    let h = hcl_loss(&mut tape, &t, &f, &SppConfig::default()).map_err(e2s)?;
    ensure(
        tape.scalar(h) == 0.0,
        format!("hcl at equality {}", tape.scalar(h)),
    )?;

    let mut student = Trainer::new_student(cfg, teacher).map_err(e2s)?;
    let teacher_digest = student
        .teacher
        .as_ref()
        .expect("student has a teacher")
        .model
        .store
        .digest();
    let before = student.model.store.digest();
    student.train_epoch(&data).map_err(e2s)?;
    let after_teacher = student
        .teacher
        .as_ref()
        .expect("student has a teacher")
        .model
        .store
        .digest();
    ensure(
        after_teacher == teacher_digest,
        "teacher parameters changed",
    )?;
    ensure(
        student.model.store.digest() != before,
        "student did not train",
    )?;
    Ok("rkd = 0, hcl = 0 exactly; teacher hash unchanged over a student epoch".into())
}

// ---------------------------------------------------------------- 6

/// Independent event-list implementation of the frame-wise metrics.
mod oracle {
    pub struct Ev {
        pub frame: usize,
        pub class: usize,
        pub u: [f64; 3],
        pub d: f64,
    }

    pub fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        let c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
        c.clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[derive(Debug, PartialEq)]
    pub struct Counts {
        pub tp: usize,
        pub fp: usize,
        pub fn_: usize,
        pub matches: usize,
        pub n_ref: usize,
        pub er_errors: usize,
        pub angle_sum: f64,
        pub rel_sum: f64,
        pub tp24: usize,
        pub fp24: usize,
        pub fn24: usize,
    }

    pub fn count(pred: &[Ev], reference: &[Ev], frames: usize) -> Counts {
        let find = |list: &[Ev], f: usize, c: usize| {
            list.iter().position(|e| e.frame == f && e.class == c)
        };
        let mut k = Counts {
            tp: 0,
            fp: 0,
            fn_: 0,
            matches: 0,
            n_ref: reference.len(),
            er_errors: 0,
            angle_sum: 0.0,
            rel_sum: 0.0,
            tp24: 0,
            fp24: 0,
            fn24: 0,
        };
        // per-frame detection outcomes, later grouped into one-second segments
        let mut frame_fn = vec![0usize; frames];
        let mut frame_fp = vec![0usize; frames];
        for r in reference {
            match find(pred, r.frame, r.class) {
                Some(j) => {
                    let p = &pred[j];
                    let a = angle(p.u, r.u);
                    let rel = (p.d - r.d).abs() / r.d;
                    k.matches += 1;
                    k.angle_sum += a;
                    k.rel_sum += rel;
                    if a <= 20.0 {
                        k.tp += 1;
                    } else {
                        frame_fn[r.frame] += 1;
                    }
                    if a <= 20.0 && rel <= 1.0 {
                        k.tp24 += 1;
                    } else {
                        k.fn24 += 1;
                    }
                }
                None => {
                    frame_fn[r.frame] += 1;
                    k.fn24 += 1;
                }
            }
        }
        for p in pred {
            match find(reference, p.frame, p.class) {
                Some(j) if angle(p.u, reference[j].u) <= 20.0 => {
                    if (p.d - reference[j].d).abs() / reference[j].d > 1.0 {
                        k.fp24 += 1;
                    }
                }
                _ => {
                    frame_fp[p.frame] += 1;
                    k.fp24 += 1;
                }
            }
        }
        k.fn_ = frame_fn.iter().sum();
        k.fp = frame_fp.iter().sum();
        for seg in (0..frames).collect::<Vec<_>>().chunks(10) {
            let n: usize = seg.iter().map(|&f| frame_fn[f]).sum();
            let p: usize = seg.iter().map(|&f| frame_fp[f]).sum();
            let s = n.min(p);
            k.er_errors += s + n.saturating_sub(p) + p.saturating_sub(n);
        }
        k
    }
}

fn random_grid_pair(
    rng: &mut ChaCha8Rng,
) -> (
    EventGrid,
    EventGrid,
    Vec<oracle::Ev>,
    Vec<oracle::Ev>,
    usize,
) {
    let frames = rng.gen_range(1..=20);
    let classes = rng.gen_range(1..=3);
    let mut pg = EventGrid::empty(frames, classes, true);
    let mut rg = EventGrid::empty(frames, classes, true);
    let (mut pe, mut re) = (Vec::new(), Vec::new());
    let unit = |rng: &mut ChaCha8Rng| {
        let az: f64 = rng.gen_range(-180.0..180.0);
        let el = rng.gen_range(-1.0f64..1.0).asin().to_degrees();
        doa_vector(az, el)
    };
    for l in 0..frames {
        for n in 0..classes {
            let r_on = rng.gen_bool(0.5);
            let p_on = rng.gen_bool(0.5);
            let ru = unit(rng);
            let rd = rng.gen_range(0.5..5.0);
            // predictions near the reference half the time so every branch is exercised
            let pu = if rng.gen_bool(0.5) {
                let j = unit(rng);
                let s = rng.gen_range(0.0..0.6);
                let v = [ru[0] + s * j[0], ru[1] + s * j[1], ru[2] + s * j[2]];
                let m = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / m, v[1] / m, v[2] / m]
            } else {
                unit(rng)
            };
            let pd = rd * rng.gen_range(0.2..2.5);
            if r_on {
                rg.activity[[l, n]] = true;
                for k in 0..3 {
                    rg.doa[[l, n, k]] = ru[k];
                }
                rg.distance.as_mut().expect("distance grid")[[l, n]] = rd;
                re.push(oracle::Ev {
                    frame: l,
                    class: n,
                    u: ru,
                    d: rd,
                });
            }
            if p_on {
                pg.activity[[l, n]] = true;
                for k in 0..3 {
                    pg.doa[[l, n, k]] = pu[k];
                }
                pg.distance.as_mut().expect("distance grid")[[l, n]] = pd;
                pe.push(oracle::Ev {
                    frame: l,
                    class: n,
                    u: pu,
                    d: pd,
                });
            }
        }
    }
    (pg, rg, pe, re, classes)
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tps = 0;
    for case in 0..1000 {
        let (pg, rg, pe, re, classes) = random_grid_pair(&mut rng);
        let all: Vec<usize> = (0..classes).collect();
        let c23 = counts_2023(&pg, &rg, &all).map_err(e2s)?;
        let c24 = counts_2024(&pg, &rg, &all).map_err(e2s)?;
        let o = oracle::count(&pe, &re, pg.frames());
        let ints = (
            c23.tp,
            c23.fp,
            c23.fn_,
            c23.matches,
            c23.n_ref,
            c23.er_errors,
            c24.tp,
            c24.fp,
            c24.fn_,
        );
        let want = (
            o.tp,
            o.fp,
            o.fn_,
            o.matches,
            o.n_ref,
            o.er_errors,
            o.tp24,
            o.fp24,
            o.fn24,
        );
        ensure(
            ints == want,
            format!("case {case}: counts {ints:?} vs oracle {want:?}"),
        )?;
        ensure(
            (c23.angle_sum - o.angle_sum).abs() < 1e-9
                && (c24.rel_dist_sum - o.rel_sum).abs() < 1e-9,
            format!("case {case}: error sums differ"),
        )?;
        let r23 = evaluate_2023(&pg, &rg, Averaging::Micro).map_err(e2s)?;
        let denom = 2 * o.tp + o.fp + o.fn_;
        let f = if denom == 0 {
            1.0
        } else {
            2.0 * o.tp as f64 / denom as f64
        };
        ensure(r23.f == f, format!("case {case}: F {} vs {f}", r23.f))?;
        ensure(
            r23.er == o.er_errors as f64 / o.n_ref.max(1) as f64,
            format!("case {case}: ER {}", r23.er),
        )?;
        let r24 = evaluate_2024(&pg, &rg, Averaging::Micro).map_err(e2s)?;
        let denom = 2 * o.tp24 + o.fp24 + o.fn24;
        let f1 = if denom == 0 {
            1.0
        } else {
            2.0 * o.tp24 as f64 / denom as f64
        };
        ensure(r24.f1 == f1, format!("case {case}: F1 {} vs {f1}", r24.f1))?;
        tps += o.tp;
    }
    Ok(format!(
        "1000 random grids agree exactly ({tps} true positives in total)"
    ))
}

// ---------------------------------------------------------------- 7

fn overfit() -> Check {
    let dir = tempdir("overfit");
    let spec = SceneSpec {
        clip_seconds: 5.0,
        n_events: 2,
        ..Default::default()
    };
    synth_dataset(&dir, 8, &spec).map_err(e2s)?;
    let data = load_dataset::<f32>(&dir, None, 13, TaskMode::Doa2023).map_err(e2s)?;
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["train.epochs=200", "train.batch_size=4"])
        .map_err(e2s)?;
    let mut tr = Trainer::<f32>::new_teacher(cfg).map_err(e2s)?;
    let mut best = 0.0;
    for epoch in 1..=200 {
        tr.train_epoch(&data).map_err(e2s)?;
        if epoch % 10 == 0 {
            let ev = evaluate_model(&tr.model, &data, TaskMode::Doa2023, Averaging::Micro)
                .map_err(e2s)?;
            let SeldReport::Dcase2023(r) = ev.seld else {
                return Err("wrong report kind".into());
            };
            best = r.f;
            eprintln!("  [7] epoch {epoch}: F {:.3} LE {:.1}°", r.f, r.le);
            if r.f >= 0.8 {
                let _ = std::fs::remove_dir_all(&dir);
                return Ok(format!("training F {:.3} after {epoch} epochs", r.f));
            }
        }
    }
    Err(format!("training F only {best:.3} after 200 epochs"))
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("seld-acceptance-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

// ---------------------------------------------------------------- 8

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn cmkd_direction() -> Check {
    let dir = tempdir("cmkd");
    let classes = 5;
    let spec = SceneSpec {
        clip_seconds: 4.0,
        n_events: 3,
        n_classes: classes,
        seed: 1000,
        ..Default::default()
    };
    synth_dataset(&dir.join("train"), 64, &spec).map_err(e2s)?;
    synth_dataset(&dir.join("test"), 16, &SceneSpec { seed: 5000, ..spec }).map_err(e2s)?;
    let train =
        load_dataset::<f32>(&dir.join("train"), None, classes, TaskMode::Doa2023).map_err(e2s)?;
    let test =
        load_dataset::<f32>(&dir.join("test"), None, classes, TaskMode::Doa2023).map_err(e2s)?;
    let av_subset = Dataset {
        examples: train.examples[..16].to_vec(),
    }
    .segmented(50);
    let train = train.segmented(50);

    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["train.epochs=40", "train.batch_size=8", "model.n_classes=5"])
        .map_err(e2s)?;
    let mut teacher = Trainer::<f32>::new_teacher(cfg.clone()).map_err(e2s)?;
    teacher.fit(&train, |_| {}).map_err(e2s)?;
    let score = |m: &Model<f32>| -> Result<f64, String> {
        Ok(
            evaluate_model(m, &test, TaskMode::Doa2023, Averaging::Micro)
                .map_err(e2s)?
                .seld
                .score(),
        )
    };
    let teacher_score = score(&teacher.model)?;
    eprintln!("  [8] teacher test score {teacher_score:.4}");

    let (mut plain, mut distilled) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        for (kd, mix) in [(false, "none"), (true, "pointmix")] {
            let mut c = cfg.clone();
            c.apply_overrides(&[
                format!("seed={seed}"),
                format!("mix.method={mix}"),
                format!("kd.rkd.enabled={kd}"),
                format!("kd.fkd.enabled={kd}"),
            ])
            .map_err(e2s)?;
            let mut student = Trainer::new_student(c, teacher.model.clone()).map_err(e2s)?;
            student.fit(&av_subset, |_| {}).map_err(e2s)?;
            let s = score(&student.model)?;
            eprintln!("  [8] seed {seed} kd={kd} mix={mix}: score {s:.4}");
            if kd {
                distilled.push(s)
            } else {
                plain.push(s)
            }
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    let (p, d) = (median(plain), median(distilled));
    let detail = format!("median score {d:.4} with distillation + PointMix vs {p:.4} without (teacher {teacher_score:.4})");
    ensure(d <= p, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn calibration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let conf: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_elem((100, 13), 0.99)).collect();
    let reference: Vec<Array2<bool>> = (0..4)
        .map(|_| {
            let mut cells: Vec<bool> = (0..1300).map(|i| i % 2 == 0).collect();
            cells.shuffle(&mut rng);
            Array2::from_shape_vec((100, 13), cells).expect("shape")
        })
        .collect();
    let rep = calibration_bins(&conf, &reference, 10).map_err(e2s)?;
    let mut occupied = 0;
    for bins in std::iter::once(&rep.overall).chain(rep.classes.iter()) {
        for b in bins.iter().filter(|b| b.count > 0) {
            let (acc, mc) = (
                b.accuracy.ok_or("missing accuracy")?,
                b.mean_confidence.ok_or("missing confidence")?,
            );
            ensure(
                acc < mc,
                format!(
                    "bin [{}, {}]: accuracy {acc} ≥ confidence {mc}",
                    b.lower, b.upper
                ),
            )?;
            occupied += 1;
        }
    }
    ensure(occupied > 0, "no occupied bins")?;
    let acc = rep
        .overall
        .iter()
        .find(|b| b.count > 0)
        .and_then(|b| b.accuracy)
        .unwrap_or(f64::NAN);
    Ok(format!(
        "{occupied} occupied bins below the diagonal (overall accuracy {acc:.3} at 0.99)"
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 9] = [
        (1, "score formulas", score_formulas),
        (2, "intensity DOA oracle", intensity_doa),
        (3, "mixing invariants", mixing_suite),
        (4, "gradient check", gradient_check),
        (5, "distillation fixed points", fixed_points),
        (6, "metric oracle", metric_oracle),
        (7, "overfit smoke", overfit),
        (8, "directional CMKD effect", cmkd_direction),
        (9, "calibration sanity", calibration),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
