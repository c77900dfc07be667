//! Run configuration: flat `section.key = value` settings read from INI-style text.
//!
//! ```text
//! seed = 7
//! task_mode = 2023
//!
//! [mix]
//! method = pointmix
//! alpha = 1.0
//!
//! [kd]
//! rkd.enabled = true
//! ```
//!
//! Keys inside a section are prefixed with the section name, so the example
//! sets `mix.method`, `mix.alpha` and `kd.rkd.enabled`. Later assignments win,
//! which is how command-line overrides are layered on top of a file.

use crate::backbone::{BackboneConfig, AUDIO_CHANNELS};
use crate::distill::{RkdWeights, SppConfig};
use crate::error::{Error, Result};
use crate::mixaug::{BetaParam, LayerLevel, MixMethod};
use crate::objectives::{LossWeights, TaskMode, TriStage, WarmupKind};
use crate::optim::AdamConfig;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSettings {
    pub method: MixMethod,
    pub alpha: f64,
    pub layerset: LayerLevel,
}

/// Starting weights of a student network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    /// The teacher's weights when a distillation term is enabled, random
    /// weights for plain audio-visual training.
    #[default]
    Auto,
    Teacher,
    Random,
}

impl StudentInit {
    pub fn as_str(self) -> &'static str {
        match self {
            StudentInit::Auto => "auto",
            StudentInit::Teacher => "teacher",
            StudentInit::Random => "random",
        }
    }
}

impl FromStr for StudentInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(StudentInit::Auto),
            "teacher" => Ok(StudentInit::Teacher),
            "random" => Ok(StudentInit::Random),
            _ => Err(Error::Config(format!("unknown student init `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdSettings {
    pub rkd: bool,
    pub fkd: bool,
    #[serde(default)]
    pub init: StudentInit,
    pub warmup_epochs: f64,
    pub warmup_kind: WarmupKind,
    pub rkd_weights: RkdWeights,
    /// Fusion width; 0 selects the widest backbone stage.
    pub fusion_channels: usize,
    /// Epochs spent fitting the fusion module alone before the student trains.
    #[serde(default)]
    pub prefit_epochs: usize,
    #[serde(default = "default_prefit_lr")]
    pub prefit_lr: f64,
}

fn default_prefit_lr() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSettings {
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub final_ratio: f64,
}

impl ScheduleSettings {
    pub fn tri_stage(&self, peak_lr: f64) -> TriStage {
        TriStage {
            peak_lr,
            warmup_frac: self.warmup_frac,
            hold_frac: self.hold_frac,
            final_ratio: self.final_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training examples are cut into segments of this many seconds.
    pub segment_seconds: f64,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub task_mode: TaskMode,
    /// Audio-only architecture; the student adds the visual channels.
    pub model: BackboneConfig,
    pub loss: LossWeights,
    pub mix: MixSettings,
    pub kd: KdSettings,
    pub sched: ScheduleSettings,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task_mode: TaskMode::Doa2023,
            model: BackboneConfig::desk(AUDIO_CHANNELS),
            loss: LossWeights::default(),
            mix: MixSettings {
                method: MixMethod::None,
                alpha: 1.0,
                layerset: LayerLevel::ResBlock,
            },
            kd: KdSettings {
                rkd: false,
                fkd: false,
                init: StudentInit::Auto,
                warmup_epochs: 20.0,
                warmup_kind: WarmupKind::Ramp,
                rkd_weights: RkdWeights::default(),
                fusion_channels: 0,
                prefit_epochs: 10,
                prefit_lr: default_prefit_lr(),
            },
            sched: ScheduleSettings {
                teacher_lr: 1e-3,
                student_lr: 1e-4,
                warmup_frac: 0.1,
                hold_frac: 0.4,
                final_ratio: 0.01,
            },
            train: TrainSettings {
                epochs: 100,
                batch_size: 32,
                segment_seconds: 10.0,
                adam: AdamConfig::default(),
            },
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got `{value}`"
        ))),
    }
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Every recognised key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("seed", self.seed.to_string()),
            ("task_mode", self.task_mode.as_str().to_string()),
            ("model.n_freq", m.n_freq.to_string()),
            ("model.channels", join(&m.channels)),
            ("model.pool_kernels", join(&m.pool_kernels)),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.conformer_layers", m.conformer_layers.to_string()),
            ("model.attn_heads", m.attn_heads.to_string()),
            ("model.conv_kernel", m.conv_kernel.to_string()),
            ("model.n_classes", m.n_classes.to_string()),
            ("model.label_downsample", m.label_downsample.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("loss.eta1", self.loss.sed.to_string()),
            ("loss.eta2", self.loss.ssl.to_string()),
            ("mix.method", self.mix.method.as_str().to_string()),
            ("mix.alpha", self.mix.alpha.to_string()),
            ("mix.layerset", self.mix.layerset.as_str().to_string()),
            ("kd.rkd.enabled", self.kd.rkd.to_string()),
            ("kd.fkd.enabled", self.kd.fkd.to_string()),
            ("kd.init", self.kd.init.as_str().to_string()),
            ("kd.gamma1", self.loss.rkd.to_string()),
            ("kd.gamma2", self.loss.fkd.to_string()),
            ("kd.rkd.sed_weight", self.kd.rkd_weights.sed.to_string()),
            ("kd.rkd.ssl_weight", self.kd.rkd_weights.ssl.to_string()),
            ("kd.fkd.warmup_epochs", self.kd.warmup_epochs.to_string()),
            (
                "kd.fkd.warmup_kind",
                format!("{:?}", self.kd.warmup_kind).to_lowercase(),
            ),
            (
                "kd.fkd.fusion_channels",
                self.kd.fusion_channels.to_string(),
            ),
            ("kd.fkd.prefit_epochs", self.kd.prefit_epochs.to_string()),
            ("kd.fkd.prefit_lr", self.kd.prefit_lr.to_string()),
            ("sched.teacher_lr", self.sched.teacher_lr.to_string()),
            ("sched.student_lr", self.sched.student_lr.to_string()),
            ("sched.warmup_frac", self.sched.warmup_frac.to_string()),
            ("sched.hold_frac", self.sched.hold_frac.to_string()),
            ("sched.final_ratio", self.sched.final_ratio.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            (
                "train.segment_seconds",
                self.train.segment_seconds.to_string(),
            ),
            (
                "train.clip_norm",
                self.train
                    .adam
                    .clip_norm
                    .map_or("none".into(), |c| c.to_string()),
            ),
        ]
    }

    /// Assign one flat key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "task_mode" => self.task_mode = parse(key, value)?,
            "model.preset" => {
                let in_channels = m.in_channels;
                *m = match value {
                    "desk" => BackboneConfig::desk(in_channels),
                    "full" => BackboneConfig::teacher().with_in_channels(in_channels),
                    _ => return Err(Error::Config(format!("{key}: unknown preset `{value}`"))),
                }
            }
            "model.n_freq" => m.n_freq = parse(key, value)?,
            "model.channels" => m.channels = parse_list(key, value)?,
            "model.pool_kernels" => m.pool_kernels = parse_list(key, value)?,
            "model.embed_dim" => m.embed_dim = parse(key, value)?,
            "model.conformer_layers" => m.conformer_layers = parse(key, value)?,
            "model.attn_heads" => m.attn_heads = parse(key, value)?,
            "model.conv_kernel" => m.conv_kernel = parse(key, value)?,
            "model.n_classes" => m.n_classes = parse(key, value)?,
            "model.label_downsample" => m.label_downsample = parse(key, value)?,
            "model.head_hidden" => m.head_hidden = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "loss.eta1" => self.loss.sed = parse(key, value)?,
            "loss.eta2" => self.loss.ssl = parse(key, value)?,
            "mix.method" => self.mix.method = parse(key, value)?,
            "mix.alpha" => self.mix.alpha = parse(key, value)?,
            "mix.layerset" => self.mix.layerset = parse(key, value)?,
            "kd.rkd.enabled" => self.kd.rkd = parse_bool(key, value)?,
            "kd.fkd.enabled" => self.kd.fkd = parse_bool(key, value)?,
            "kd.init" => self.kd.init = parse(key, value)?,
            "kd.gamma1" => self.loss.rkd = parse(key, value)?,
            "kd.gamma2" => self.loss.fkd = parse(key, value)?,
            "kd.rkd.sed_weight" => self.kd.rkd_weights.sed = parse(key, value)?,
            "kd.rkd.ssl_weight" => self.kd.rkd_weights.ssl = parse(key, value)?,
            "kd.fkd.warmup_epochs" => self.kd.warmup_epochs = parse(key, value)?,
            "kd.fkd.warmup_kind" => self.kd.warmup_kind = parse(key, value)?,
            "kd.fkd.fusion_channels" => self.kd.fusion_channels = parse(key, value)?,
            "kd.fkd.prefit_epochs" => self.kd.prefit_epochs = parse(key, value)?,
            "kd.fkd.prefit_lr" => self.kd.prefit_lr = parse(key, value)?,
            "sched.teacher_lr" => self.sched.teacher_lr = parse(key, value)?,
            "sched.student_lr" => self.sched.student_lr = parse(key, value)?,
            "sched.warmup_frac" => self.sched.warmup_frac = parse(key, value)?,
            "sched.hold_frac" => self.sched.hold_frac = parse(key, value)?,
            "sched.final_ratio" => self.sched.final_ratio = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.segment_seconds" => self.train.segment_seconds = parse(key, value)?,
            "train.clip_norm" => {
                self.train.adam.clip_norm = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&key, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, rest) = match key.split_once('.') {
                Some((s, r)) => (s, r),
                None => ("", key),
            };
            if sec != section {
                let _ = writeln!(out, "\n[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{rest} = {value}");
        }
        out.trim_start().to_string()
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        format!("{:x}", Sha256::digest(self.to_ini().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        BetaParam::new(self.mix.alpha)?;
        self.sched.tri_stage(self.sched.teacher_lr).validate()?;
        self.sched.tri_stage(self.sched.student_lr).validate()?;
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.train.segment_seconds > 0.0) {
            return Err(Error::Config("segment_seconds must be positive".into()));
        }
        if !(self.kd.prefit_lr > 0.0) {
            return Err(Error::Config("prefit_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> BackboneConfig {
        self.model.with_in_channels(AUDIO_CHANNELS)
    }

    pub fn student_config(&self) -> BackboneConfig {
        self.model
            .with_in_channels(AUDIO_CHANNELS + crate::backbone::VISUAL_CHANNELS)
    }

    /// Whether a student starts from the teacher's weights.
    pub fn student_from_teacher(&self) -> bool {
        match self.kd.init {
            StudentInit::Auto => self.kd.rkd || self.kd.fkd,
            StudentInit::Teacher => true,
            StudentInit::Random => false,
        }
    }

    /// Peak learning rate of a student: the fine-tuning rate when it starts
    /// from the teacher, the teacher's rate when it trains from scratch.
    pub fn student_peak_lr(&self) -> f64 {
        if self.student_from_teacher() {
            self.sched.student_lr
        } else {
            self.sched.teacher_lr
        }
    }

    /// Width of the fusion module's intermediate maps.
    pub fn fusion_width(&self) -> usize {
        match self.kd.fusion_channels {
            0 => self.model.channels.iter().copied().max().unwrap_or(1),
            c => c,
        }
    }

    pub fn spp(&self) -> Option<SppConfig> {
        self.kd.fkd.then(SppConfig::default)
    }

    pub fn rkd(&self) -> Option<RkdWeights> {
        self.kd.rkd.then_some(self.kd.rkd_weights)
    }
}
