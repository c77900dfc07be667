//! Datasets, the teacher and student training loops, and batch inference.
//!
//! The teacher learns from acoustic features alone. The student sees acoustic
//! and visual features, starts from the teacher's weights, and optionally adds
//! response and feature distillation against the frozen teacher. Both loops
//! share one step function so mixing behaves identically in each stage.

use crate::autodiff::{Tape, Var};
use crate::backbone::{init_student_from_teacher, BackboneConfig, Model, AUDIO_CHANNELS};
use crate::checkpoint::{Checkpoint, CheckpointHeader, EpochLog, Role};
use crate::config::RunConfig;
use crate::distill::{distill_step, Fusion};
use crate::error::{Error, Result};
use crate::features::{acoustic_features, read_feature_cache, read_foa_wav};
use crate::metrics::{
    calibration_bins, concat_grids, evaluate_2023, evaluate_2024, mse_distribution, Averaging,
};
use crate::metrics::{
    grid_from_rows, rows_from_grid, CalibrationReport, EventGrid, EventRow, Seld2023Report,
    Seld2024Report,
};
use crate::mixaug::{
    mix_labels, mix_supervision_on_tape, sample_mix_plan, BetaParam, EligibleLayerSet, MixPlan,
    Supervision,
};
use crate::nn::{apply_buffer_updates, Ctx};
use crate::objectives::{
    fkd_weight, read_label_csv, stack_targets, targets_from_labels, task_loss, SeldTargets,
    TaskMode,
};
use crate::optim::Adam;
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::visual::{
    fuse_multimodal, gaussian_vectors, read_keypoint_csv, MouthKeypoints, VISUAL_WIDTH,
};
use ndarray::{s, Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Suffix of cached acoustic features next to a clip name.
pub const FEATURE_SUFFIX: &str = "features.bin";

/// One clip (or segment) with inputs and targets.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub name: String,
    /// `[audio_frames, freq, 7]`.
    pub audio: Array3<T>,
    /// `[label_frames, freq, 12]`.
    pub visual: Array3<T>,
    pub targets: SeldTargets<T>,
}

impl<T: Scalar> Example<T> {
    pub fn label_frames(&self) -> usize {
        self.targets.frames()
    }

    /// Acoustic and visual channels stacked on the acoustic frame rate.
    pub fn audio_visual(&self) -> Result<Array3<T>> {
        fuse_multimodal(&self.audio, &self.visual)
    }

    /// Consecutive segments of `frames` label frames; a clip shorter than that stays whole.
    pub fn segments(&self, frames: usize) -> Vec<Example<T>> {
        let l = self.label_frames();
        if frames == 0 || l <= frames {
            return vec![self.clone()];
        }
        let r = self.audio.dim().0 / l;
        (0..l / frames)
            .map(|i| {
                let (a, b) = (i * frames, (i + 1) * frames);
                Example {
                    name: format!("{}#{i}", self.name),
                    audio: self.audio.slice(s![a * r..b * r, .., ..]).to_owned(),
                    visual: self.visual.slice(s![a..b, .., ..]).to_owned(),
                    targets: SeldTargets {
                        activity: self.targets.activity.slice(s![a..b, ..]).to_owned(),
                        location: self.targets.location.slice(s![a..b, .., ..]).to_owned(),
                        task_mode: self.targets.task_mode,
                    },
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset<T> {
    pub examples: Vec<Example<T>>,
}

/// Which inputs a network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    AudioVisual,
}

impl Modality {
    pub fn of(config: &BackboneConfig) -> Self {
        if config.in_channels == AUDIO_CHANNELS {
            Modality::Audio
        } else {
            Modality::AudioVisual
        }
    }
}

/// Stacked inputs and targets for a set of examples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: ArrayD<T>,
    pub targets: Vec<SeldTargets<T>>,
    pub activity: ArrayD<T>,
    pub location: ArrayD<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn segmented(&self, frames: usize) -> Self {
        Self {
            examples: self
                .examples
                .iter()
                .flat_map(|e| e.segments(frames))
                .collect(),
        }
    }

    pub fn batch(&self, indices: &[usize], modality: Modality) -> Result<Batch<T>> {
        let picked: Vec<&Example<T>> = indices.iter().map(|&i| &self.examples[i]).collect();
        let inputs = picked
            .iter()
            .map(|e| match modality {
                Modality::Audio => Ok(e.audio.clone()),
                Modality::AudioVisual => e.audio_visual(),
            })
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let input = ndarray::stack(Axis(0), &views)
            .map_err(|_| Error::Shape("examples in a batch differ in length".into()))?
            .into_dyn();
        let targets: Vec<SeldTargets<T>> = picked.iter().map(|e| e.targets.clone()).collect();
        let refs: Vec<&SeldTargets<T>> = targets.iter().collect();
        let (activity, location) = stack_targets(&refs)?;
        Ok(Batch {
            input,
            targets,
            activity,
            location,
        })
    }
}

/// Sorted clip names (`*.wav` stems) in a directory.
pub fn list_clips(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    Ok(names)
}

pub fn feature_cache_path(cache_dir: &Path, name: &str) -> PathBuf {
    cache_dir.join(format!("{name}.{FEATURE_SUFFIX}"))
}

/// Load one clip: features (from `cache_dir` when present), labels and optional keypoints.
pub fn load_clip<T: Scalar>(
    dir: &Path,
    name: &str,
    cache_dir: Option<&Path>,
    n_classes: usize,
    mode: TaskMode,
) -> Result<Example<T>> {
    let cached = cache_dir
        .map(|c| feature_cache_path(c, name))
        .filter(|p| p.exists());
    let audio: Array3<T> = match cached {
        Some(p) => read_feature_cache::<T>(&p)?
            .into_dimensionality()
            .map_err(|_| Error::format(&p, "cached features are not rank 3"))?,
        None => acoustic_features(&read_foa_wav::<T>(&dir.join(format!("{name}.wav")))?)?,
    };
    let rows = read_label_csv(&dir.join(format!("{name}.labels.csv")))?;
    let ratio = crate::features::FRAMES_PER_SECOND / crate::synth::LABEL_FPS;
    let label_frames = audio.dim().0 / ratio;
    let audio = audio.slice_move(s![..label_frames * ratio, .., ..]);
    let targets = targets_from_labels(&rows, label_frames, n_classes, mode)?;
    let kp_path = dir.join(format!("{name}.keypoints.csv"));
    let kp = if kp_path.exists() {
        read_keypoint_csv(&kp_path)?
    } else {
        MouthKeypoints::default()
    };
    let mut visual = gaussian_vectors(&kp, label_frames);
    if audio.dim().1 != VISUAL_WIDTH {
        visual = Array3::zeros((label_frames, audio.dim().1, visual.dim().2));
    }
    Ok(Example {
        name: name.to_string(),
        audio,
        visual,
        targets,
    })
}

pub fn load_dataset<T: Scalar>(
    dir: &Path,
    cache_dir: Option<&Path>,
    n_classes: usize,
    mode: TaskMode,
) -> Result<Dataset<T>> {
    let names = list_clips(dir)?;
    if names.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .wav clips in {}",
            dir.display()
        )));
    }
    let examples = names
        .iter()
        .map(|n| load_clip(dir, n, cache_dir, n_classes, mode))
        .collect::<Result<_>>()?;
    Ok(Dataset { examples })
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub task: f64,
    pub rkd: Option<f64>,
    pub fkd: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// The frozen teacher used during distillation.
#[derive(Clone, Debug)]
pub struct FrozenTeacher<T> {
    pub model: Model<T>,
    pub digest: String,
}

/// Recorded objective of one batch: the tape, its loss terms and pending
/// batch-norm statistics.
pub struct Objective<T> {
    pub tape: Tape<T>,
    pub total: Var,
    pub task: Var,
    pub rkd: Option<Var>,
    pub fkd: Option<Var>,
    pub buffer_updates: Vec<(ParamId, ArrayD<T>)>,
}

/// Training state for either stage.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: RunConfig,
    pub role: Role,
    /// Network parameters; for a student also the fusion parameters.
    pub model: Model<T>,
    pub fusion: Option<Fusion>,
    pub teacher: Option<FrozenTeacher<T>>,
    pub optimizer: Adam<T>,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub history: Vec<EpochLog>,
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 1 << 40;
const PREFIT_STREAM: u64 = 1 << 41;

impl<T: Scalar> Trainer<T> {
    pub fn new_teacher(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.seed, INIT_STREAM);
        let model = Model::new(config.teacher_config(), &mut rng)?;
        Ok(Self {
            optimizer: Adam::new(config.train.adam),
            config,
            role: Role::Teacher,
            model,
            fusion: None,
            teacher: None,
            epochs_done: 0,
            steps_done: 0,
            history: Vec::new(),
        })
    }

    /// Student distilled from `teacher`, which stays frozen. Starts from the
    /// teacher's weights unless [`RunConfig::student_from_teacher`] says otherwise.
    pub fn new_student(config: RunConfig, teacher: Model<T>) -> Result<Self> {
        config.validate()?;
        if teacher.config().with_in_channels(AUDIO_CHANNELS) != config.teacher_config() {
            return Err(Error::Config(
                "teacher checkpoint architecture differs from the run configuration".into(),
            ));
        }
        let mut rng = init_rng(config.seed, INIT_STREAM + 1);
        let (mut model, fusion) = Self::student_shell(&config, &mut rng)?;
        if config.student_from_teacher() {
            init_student_from_teacher(&teacher, &mut model)?;
        }
        let digest = teacher.store.digest();
        Ok(Self {
            optimizer: Adam::new(config.train.adam),
            config,
            role: Role::Student,
            model,
            fusion,
            teacher: Some(FrozenTeacher {
                model: teacher,
                digest,
            }),
            epochs_done: 0,
            steps_done: 0,
            history: Vec::new(),
        })
    }

    fn student_shell(
        config: &RunConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Model<T>, Option<Fusion>)> {
        let mut model = Model::new(config.student_config(), rng)?;
        let fusion = if config.kd.fkd {
            let ch = config.model.channels;
            Some(Fusion::new(
                &mut model.store,
                &ch,
                &ch,
                config.fusion_width(),
                rng,
            )?)
        } else {
            None
        };
        Ok((model, fusion))
    }

    pub fn modality(&self) -> Modality {
        Modality::of(self.model.config())
    }

    pub fn batches_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.config.train.batch_size)
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.config.train.epochs * self.batches_per_epoch(n_examples)
    }

    fn peak_lr(&self) -> f64 {
        match self.role {
            Role::Teacher => self.config.sched.teacher_lr,
            Role::Student => self.config.student_peak_lr(),
        }
    }

    /// Mixing plan for a batch of `batch` examples.
    pub fn sample_plan(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<MixPlan> {
        let mix = &self.config.mix;
        let layers = EligibleLayerSet::new(mix.layerset);
        sample_mix_plan(
            mix.method,
            BetaParam::new(mix.alpha)?,
            &layers,
            &self.model.config().site_dims(),
            batch,
            rng,
        )
    }

    /// One optimizer step on `batch` under `plan`, at schedule position `steps_done + 1`.
    /// Build the training objective for one batch on a fresh tape.
    ///
    /// `seed` drives dropout; `epoch` sets the feature-distillation warm-up weight.
    pub fn objective(
        &self,
        batch: &Batch<T>,
        plan: &MixPlan,
        seed: u64,
        epoch: usize,
    ) -> Result<Objective<T>> {
        let w = self.config.loss;
        let rkd_w = self.config.rkd();
        let spp = self.config.spp();
        let gamma2 = fkd_weight(
            w.fkd,
            epoch as f64,
            self.config.kd.warmup_epochs,
            self.config.kd.warmup_kind,
        );
        let mut ctx = Ctx::train(&self.model.store, seed);
        let (out, kd) = match &self.teacher {
            Some(t) => {
                let (o, l) = distill_step(
                    &t.model,
                    &self.model,
                    self.fusion.as_ref(),
                    &mut ctx,
                    &batch.input,
                    Some(plan),
                    rkd_w.as_ref(),
                    spp.as_ref(),
                )?;
                (o, Some(l))
            }
            None => {
                let x = ctx.tape.constant(batch.input.clone());
                (self.model.net.forward(&mut ctx, x, Some(plan))?, None)
            }
        };
        let task = match plan.supervision().filter(|_| plan.is_active()) {
            None => {
                let ta = ctx.tape.constant(batch.activity.clone());
                let tl = ctx.tape.constant(batch.location.clone());
                task_loss(&mut ctx.tape, &w, out.activity, out.location, ta, tl)?
            }
            Some(Supervision::Label) => {
                let mixed = batch
                    .targets
                    .iter()
                    .enumerate()
                    .map(|(i, t)| mix_labels(t, &batch.targets[plan.pairing[i]], plan.lambda_eff))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&SeldTargets<T>> = mixed.iter().collect();
                let (a, l) = stack_targets(&refs)?;
                let ta = ctx.tape.constant(a);
                let tl = ctx.tape.constant(l);
                task_loss(&mut ctx.tape, &w, out.activity, out.location, ta, tl)?
            }
            Some(Supervision::Loss) => {
                let ta = ctx.tape.constant(batch.activity.clone());
                let tl = ctx.tape.constant(batch.location.clone());
                let la = task_loss(&mut ctx.tape, &w, out.activity, out.location, ta, tl)?;
                let tb = ctx
                    .tape
                    .constant(batch.activity.select(Axis(0), &plan.pairing));
                let tlb = ctx
                    .tape
                    .constant(batch.location.select(Axis(0), &plan.pairing));
                let lb = task_loss(&mut ctx.tape, &w, out.activity, out.location, tb, tlb)?;
                mix_supervision_on_tape(&mut ctx.tape, la, lb, plan.lambda_eff)
            }
        };
        let mut total = task;
        let (mut rkd, mut fkd) = (None, None);
        if let Some(kd) = kd {
            if let Some(r) = kd.rkd {
                rkd = Some(r);
                let s = ctx.tape.scale(r, T::c(w.rkd));
                total = ctx.tape.add(total, s);
            }
            if let Some(f) = kd.fkd {
                fkd = Some(f);
                let s = ctx.tape.scale(f, T::c(gamma2));
                total = ctx.tape.add(total, s);
            }
        }
        let (tape, buffer_updates) = ctx.finish();
        Ok(Objective {
            tape,
            total,
            task,
            rkd,
            fkd,
            buffer_updates,
        })
    }

    /// One optimizer step on `batch` under the given mixing plan.
    pub fn step(
        &mut self,
        batch: &Batch<T>,
        plan: &MixPlan,
        total_steps: usize,
    ) -> Result<StepStats> {
        let lr = self
            .config
            .sched
            .tri_stage(self.peak_lr())
            .lr(self.steps_done + 1, total_steps)?;
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.steps_done as u64);
        let obj = self.objective(batch, plan, seed, self.epochs_done)?;
        let tape = &obj.tape;
        let loss = tape.scalar(obj.total).as_f64();
        let task = tape.scalar(obj.task).as_f64();
        let rkd = obj.rkd.map(|v| tape.scalar(v).as_f64());
        let fkd = obj.fkd.map(|v| tape.scalar(v).as_f64());
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {} (task {task}, rkd {rkd:?}, fkd {fkd:?}, lr {lr:e}, mix {} λ={:.4} site {})",
                self.steps_done + 1,
                plan.method,
                plan.lambda,
                plan.layer
            )));
        }
        let grads = tape.backward(obj.total);
        let grad_norm = self.optimizer.update(&mut self.model.store, &grads, lr)?;
        apply_buffer_updates(&mut self.model.store, obj.buffer_updates);
        self.steps_done += 1;
        Ok(StepStats {
            loss,
            task,
            rkd,
            fkd,
            lr,
            grad_norm,
        })
    }

    /// One pass over `data` in a seed- and epoch-determined order.
    pub fn train_epoch(&mut self, data: &Dataset<T>) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let total = self.total_steps(data.len());
        let mut rng = init_rng(self.config.seed, self.epochs_done as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let modality = self.modality();
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut lr = 0.0;
        let mut n = 0.0;
        for chunk in order.chunks(self.config.train.batch_size) {
            let batch = data.batch(chunk, modality)?;
            let plan = self.sample_plan(chunk.len(), &mut rng)?;
            let st = self.step(&batch, &plan, total)?;
            sums.0 += st.loss;
            sums.1 += st.task;
            sums.2 += st.rkd.unwrap_or(0.0);
            sums.3 += st.fkd.unwrap_or(0.0);
            lr = st.lr;
            n += 1.0;
        }
        if let Some(t) = &self.teacher {
            if t.model.store.digest() != t.digest {
                return Err(Error::InvalidInput(
                    "teacher parameters changed during distillation".into(),
                ));
            }
        }
        self.epochs_done += 1;
        let log = EpochLog {
            epoch: self.epochs_done,
            step: self.steps_done,
            loss: sums.0 / n,
            task: sums.1 / n,
            rkd: self
                .config
                .kd
                .rkd
                .then_some(sums.2 / n)
                .filter(|_| self.teacher.is_some()),
            fkd: self
                .config
                .kd
                .fkd
                .then_some(sums.3 / n)
                .filter(|_| self.teacher.is_some()),
            lr,
        };
        self.history.push(log.clone());
        Ok(log)
    }

    /// Fit the fusion module alone to the frozen teacher's stage features for
    /// `kd.fkd.prefit_epochs` passes over `data`.
    ///
    /// The backbone weights, its batch-norm statistics and the main optimizer
    /// state are left untouched. Returns the mean feature loss of the last
    /// pass, or `None` when there is nothing to fit.
    pub fn prefit_fusion(&mut self, data: &Dataset<T>) -> Result<Option<f64>> {
        let epochs = self.config.kd.prefit_epochs;
        let modality = self.modality();
        let (Some(teacher), Some(fusion)) = (&self.teacher, &self.fusion) else {
            return Ok(None);
        };
        if epochs == 0 || data.is_empty() {
            return Ok(None);
        }
        let store = &self.model.store;
        let fusion_ids: HashSet<ParamId> = store
            .trainable_ids()
            .filter(|&id| store.entry(id).name.starts_with("fusion."))
            .collect();
        let spp = self.config.spp();
        let mut adam = Adam::new(self.config.train.adam);
        let mut last = 0.0;
        for epoch in 0..epochs {
            let mut rng = init_rng(self.config.seed, PREFIT_STREAM + epoch as u64);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let (mut sum, mut n) = (0.0, 0.0);
            for chunk in order.chunks(self.config.train.batch_size) {
                let batch = data.batch(chunk, modality)?;
                let mut ctx = Ctx::train(&self.model.store, rand::Rng::gen(&mut rng));
                let (_, kd) = distill_step(
                    &teacher.model,
                    &self.model,
                    Some(fusion),
                    &mut ctx,
                    &batch.input,
                    None,
                    None,
                    spp.as_ref(),
                )?;
                let (tape, _) = ctx.finish();
                let f = kd
                    .fkd
                    .ok_or_else(|| Error::Config("fusion pre-fit needs the feature loss".into()))?;
                let value = tape.scalar(f).as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "feature loss {value} during fusion pre-fit"
                    )));
                }
                let mut grads = tape.backward(f);
                grads.by_param.retain(|id, _| fusion_ids.contains(id));
                adam.update(&mut self.model.store, &grads, self.config.kd.prefit_lr)?;
                sum += value;
                n += 1.0;
            }
            last = sum / n;
        }
        Ok(Some(last))
    }

    /// Train until `config.train.epochs` epochs are done; `on_epoch` sees each log.
    ///
    /// A fresh student first pre-fits its fusion module.
    pub fn fit(&mut self, data: &Dataset<T>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        if self.steps_done == 0 {
            self.prefit_fusion(data)?;
        }
        while self.epochs_done < self.config.train.epochs {
            let log = self.train_epoch(data)?;
            on_epoch(&log);
        }
        Ok(())
    }

    pub fn checkpoint(&self, n_examples: usize) -> Checkpoint<T> {
        let header = CheckpointHeader {
            format_version: String::new(),
            role: self.role,
            dtype: String::new(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            epochs_done: self.epochs_done,
            steps_done: self.steps_done,
            total_steps: self.total_steps(n_examples),
            teacher_digest: self.teacher.as_ref().map(|t| t.digest.clone()),
            history: self.history.clone(),
            tensors: Vec::new(),
            optimizer: None,
        };
        Checkpoint::new(
            header,
            self.model.store.clone(),
            Some(self.optimizer.clone()),
        )
    }

    /// Rebuild a trainer from a checkpoint; a student also needs its teacher.
    ///
    /// `config` replaces the stored configuration (e.g. a larger epoch budget)
    /// but must describe the same architecture.
    pub fn resume(
        ck: &Checkpoint<T>,
        config: RunConfig,
        teacher: Option<Model<T>>,
    ) -> Result<Self> {
        if config.model != ck.header.config.model || config.kd.fkd != ck.header.config.kd.fkd {
            return Err(Error::Config("resumed run changes the architecture".into()));
        }
        let mut t = match ck.header.role {
            Role::Teacher => Self::new_teacher(config)?,
            Role::Student => {
                let teacher = teacher
                    .ok_or_else(|| Error::Config("resuming a student needs its teacher".into()))?;
                if Some(teacher.store.digest()) != ck.header.teacher_digest {
                    return Err(Error::Config(
                        "teacher differs from the one used for this student".into(),
                    ));
                }
                Self::new_student(config, teacher)?
            }
        };
        ck.restore_into(&mut t.model.store)?;
        if let Some(opt) = ck.optimizer_for(&t.model.store) {
            t.optimizer = opt;
        }
        t.epochs_done = ck.header.epochs_done;
        t.steps_done = ck.header.steps_done;
        t.history = ck.header.history.clone();
        Ok(t)
    }
}

/// Rebuild an inference model (without fusion parameters) from a checkpoint.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Model<T>> {
    let cfg = &ck.header.config;
    let mut rng = init_rng(cfg.seed, INIT_STREAM);
    let mut model = match ck.header.role {
        Role::Teacher => Model::new(cfg.teacher_config(), &mut rng)?,
        Role::Student => Model::new(cfg.student_config(), &mut rng)?,
    };
    for entry in model.store.clone().entries() {
        let src = ck
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", entry.name)))?;
        let id = model.store.find(&entry.name).expect("own entry");
        let v = ck.store.value(src);
        if v.shape() != entry.value.shape() {
            return Err(Error::Shape(format!(
                "tensor {} differs in shape",
                entry.name
            )));
        }
        model.store.value_mut(id).assign(v);
    }
    Ok(model)
}

/// Per-clip network outputs in `f64`.
#[derive(Clone, Debug)]
pub struct ClipPrediction {
    pub name: String,
    /// `[frames, classes]`.
    pub activity: Array2<f64>,
    /// `[frames, 3·classes]`.
    pub location: Array2<f64>,
}

impl ClipPrediction {
    /// Rebuild dense outputs from event rows; cells without a row get confidence 0.
    pub fn from_rows(
        name: &str,
        rows: &[EventRow],
        frames: usize,
        classes: usize,
        mode: TaskMode,
    ) -> Result<Self> {
        let grid = grid_from_rows(rows, frames, classes, mode)?;
        let mut activity = Array2::zeros((frames, classes));
        for r in rows {
            activity[[r.frame, r.class]] = r.confidence.unwrap_or(1.0);
        }
        let mut location = Array2::zeros((frames, 3 * classes));
        for ((l, n), &a) in grid.activity.indexed_iter() {
            if a {
                let scale = grid.distance.as_ref().map_or(1.0, |d| d[[l, n]]);
                for k in 0..3 {
                    location[[l, 3 * n + k]] = grid.doa[[l, n, k]] * scale;
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            activity,
            location,
        })
    }

    /// Thresholded event rows with confidences.
    pub fn to_rows(&self, mode: TaskMode) -> Result<Vec<EventRow>> {
        let grid = EventGrid::from_output(self.activity.view(), self.location.view(), mode)?;
        Ok(rows_from_grid(&grid, Some(&self.activity)))
    }
}

pub fn predict_dataset<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
) -> Result<Vec<ClipPrediction>> {
    let modality = Modality::of(model.config());
    (0..data.len())
        .map(|i| {
            let b = data.batch(&[i], modality)?;
            let (a, l) = model.predict(&b.input)?;
            let to2 = |x: ArrayD<T>| -> Result<Array2<f64>> {
                x.index_axis_move(Axis(0), 0)
                    .mapv(|v| v.as_f64())
                    .into_dimensionality()
                    .map_err(|_| Error::Shape("prediction is not [frames, outputs]".into()))
            };
            Ok(ClipPrediction {
                name: data.examples[i].name.clone(),
                activity: to2(a)?,
                location: to2(l)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum SeldReport {
    Dcase2023(Seld2023Report),
    Dcase2024(Seld2024Report),
}

impl SeldReport {
    pub fn score(&self) -> f64 {
        match self {
            SeldReport::Dcase2023(r) => r.score,
            SeldReport::Dcase2024(r) => r.score,
        }
    }
}

/// Everything `evaluate` reports for one model on one dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub seld: SeldReport,
    pub calibration: CalibrationReport,
    pub mse: Vec<f64>,
}

pub const CALIBRATION_BINS: usize = 10;

pub fn evaluate_predictions<T: Scalar>(
    preds: &[ClipPrediction],
    data: &Dataset<T>,
    mode: TaskMode,
    averaging: Averaging,
) -> Result<Evaluation> {
    if preds.len() != data.len() {
        return Err(Error::InvalidInput(
            "prediction and dataset sizes differ".into(),
        ));
    }
    let mut pg = Vec::new();
    let mut rg = Vec::new();
    for (p, e) in preds.iter().zip(&data.examples) {
        if e.targets.task_mode != mode {
            return Err(Error::Config(format!(
                "task mode {} does not match the data ({})",
                mode.as_str(),
                e.targets.task_mode.as_str()
            )));
        }
        pg.push(EventGrid::from_output(
            p.activity.view(),
            p.location.view(),
            mode,
        )?);
        rg.push(EventGrid::from_targets(&e.targets)?);
    }
    let (pred, reference) = (concat_grids(&pg)?, concat_grids(&rg)?);
    let seld = match mode {
        TaskMode::Doa2023 => SeldReport::Dcase2023(evaluate_2023(&pred, &reference, averaging)?),
        TaskMode::DoaDistance2024 => {
            SeldReport::Dcase2024(evaluate_2024(&pred, &reference, averaging)?)
        }
    };
    let conf: Vec<Array2<f64>> = preds.iter().map(|p| p.activity.clone()).collect();
    let refs: Vec<Array2<bool>> = rg.iter().map(|g| g.activity.clone()).collect();
    let calibration = calibration_bins(&conf, &refs, CALIBRATION_BINS)?;
    let locs: Vec<Array2<f64>> = preds.iter().map(|p| p.location.clone()).collect();
    let targets: Vec<SeldTargets<f64>> = data
        .examples
        .iter()
        .map(|e| SeldTargets {
            activity: e.targets.activity.mapv(|v| v.as_f64()),
            location: e.targets.location.mapv(|v| v.as_f64()),
            task_mode: e.targets.task_mode,
        })
        .collect();
    let mse = mse_distribution(&locs, &targets)?;
    Ok(Evaluation {
        seld,
        calibration,
        mse,
    })
}

pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    mode: TaskMode,
    averaging: Averaging,
) -> Result<Evaluation> {
    evaluate_predictions(&predict_dataset(model, data)?, data, mode, averaging)
}
