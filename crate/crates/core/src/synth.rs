//! Deterministic synthetic Ambisonics scenes with exact labels and keypoints.
//!
//! Each event is a class-keyed band of noise encoded as a static plane wave
//! and scaled by `1 / distance`. An optional diffuse field (independent
//! omnidirectional and dipole noise) sets the signal-to-noise ratio. Events of
//! the speech classes also emit mouth keypoints through an equirectangular
//! camera model.

use crate::error::{Error, Result};
use crate::features::{write_foa_wav, FoaWaveform, FOA_CHANNELS};
use crate::objectives::{write_label_csv, LabelRow};
use crate::visual::{write_keypoint_csv, Keypoint, MouthKeypoints, MAX_SPEAKERS, VISUAL_FPS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LABEL_FPS: usize = 10;
pub const SPEECH_CLASSES: [usize; 2] = [0, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// Band-pass noise centred on a class-specific frequency.
    ClassNoise,
    /// White noise over the whole band.
    Broadband,
    /// Sinusoid at the class centre frequency.
    Tone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEvent {
    pub class_idx: usize,
    pub track: usize,
    /// Onset and offset as label-frame indices (100 ms); active on `onset..offset`.
    pub onset: usize,
    pub offset: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance_m: f64,
    pub signal: SignalKind,
}

impl SourceEvent {
    pub fn validate(&self, clip_frames: usize, n_classes: usize) -> Result<()> {
        if self.onset >= self.offset || self.offset > clip_frames {
            return Err(Error::InvalidInput(format!(
                "event span {}..{} outside clip of {clip_frames} frames",
                self.onset, self.offset
            )));
        }
        if !(self.distance_m > 0.0) {
            return Err(Error::InvalidInput(format!(
                "distance {} must be positive",
                self.distance_m
            )));
        }
        if self.class_idx >= n_classes {
            return Err(Error::InvalidInput(format!(
                "class {} out of range",
                self.class_idx
            )));
        }
        if !(-180.0..180.0).contains(&self.azimuth_deg)
            || !(-90.0..=90.0).contains(&self.elevation_deg)
        {
            return Err(Error::InvalidInput("angles out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_events: usize,
    pub clip_seconds: f64,
    /// Diffuse-noise level relative to a unit source at 1 m; `None` for a clean scene.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub sample_rate: u32,
    pub n_classes: usize,
    pub max_elevation_deg: f64,
    pub signal: SignalKind,
    /// Apply SN3D weighting (dipoles scaled by `1/√3`) instead of unit gain.
    pub sn3d: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_events: 3,
            clip_seconds: 10.0,
            snr_db: Some(20.0),
            seed: 0,
            sample_rate: 24000,
            n_classes: 13,
            max_elevation_deg: 45.0,
            signal: SignalKind::ClassNoise,
            sn3d: false,
        }
    }
}

impl SceneSpec {
    pub fn clip_frames(&self) -> usize {
        (self.clip_seconds * LABEL_FPS as f64).round() as usize
    }

    pub fn n_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }
}

/// A rendered scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub wave: FoaWaveform<f64>,
    pub events: Vec<SourceEvent>,
    pub labels: Vec<LabelRow>,
    pub keypoints: MouthKeypoints,
    /// Two events of one class overlap in time.
    pub same_class_overlap: bool,
}

/// Plane-wave encoding `w = s`, `x = s·cos az·cos el`, `y = s·sin az·cos el`, `z = s·sin el`.
pub fn foa_encode(signal: &[f64], azimuth_deg: f64, elevation_deg: f64, sn3d: bool) -> Array2<f64> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let g = if sn3d { 1.0 / 3f64.sqrt() } else { 1.0 };
    let gains = [
        1.0,
        g * az.cos() * el.cos(),
        g * az.sin() * el.cos(),
        g * el.sin(),
    ];
    Array2::from_shape_fn((FOA_CHANNELS, signal.len()), |(c, i)| gains[c] * signal[i])
}

/// Centre frequency of a class band, log-spaced between 300 Hz and 6 kHz.
pub fn class_center_hz(class_idx: usize, n_classes: usize) -> f64 {
    let t = if n_classes > 1 {
        class_idx as f64 / (n_classes - 1) as f64
    } else {
        0.0
    };
    300.0 * (6000.0f64 / 300.0).powf(t)
}

/// Unit-RMS source signal of `n` samples.
pub fn source_signal<R: Rng>(
    kind: SignalKind,
    class_idx: usize,
    n_classes: usize,
    n: usize,
    sample_rate: u32,
    rng: &mut R,
) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut s: Vec<f64> = match kind {
        SignalKind::Tone => {
            let f = class_center_hz(class_idx, n_classes);
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            (0..n)
                .map(|i| (std::f64::consts::TAU * f * i as f64 / sr + phase).sin())
                .collect()
        }
        SignalKind::Broadband => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        SignalKind::ClassNoise => {
            let fc = class_center_hz(class_idx, n_classes);
            let (lo, hi) = (fc * 2f64.powf(-1.0 / 3.0), fc * 2f64.powf(1.0 / 3.0));
            let mut buf: Vec<Complex<f64>> = (0..n)
                .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
                .collect();
            let mut planner = FftPlanner::<f64>::new();
            planner.plan_fft_forward(n).process(&mut buf);
            for (k, v) in buf.iter_mut().enumerate() {
                let f = k.min(n - k) as f64 * sr / n as f64;
                if f < lo || f > hi {
                    *v = Complex::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            buf.iter().map(|c| c.re).collect()
        }
    };
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        s.iter_mut().for_each(|v| *v /= rms);
    }
    s
}

/// Isotropic noise field: independent channels, dipoles at a third of the omni power.
pub fn diffuse_noise<R: Rng>(n: usize, level: f64, rng: &mut R) -> Array2<f64> {
    let dip = level / 3f64.sqrt();
    Array2::from_shape_fn((FOA_CHANNELS, n), |(c, _)| {
        let v: f64 = StandardNormal.sample(rng);
        v * if c == 0 { level } else { dip }
    })
}

/// Image coordinates of a direction under the equirectangular camera model.
pub fn direction_to_uv(azimuth_deg: f64, elevation_deg: f64) -> (f64, f64) {
    let u = ((180.0 - azimuth_deg) / 360.0).rem_euclid(1.0);
    let v = (90.0 - elevation_deg) / 180.0;
    (u, v)
}

/// Inverse of [`direction_to_uv`], azimuth wrapped into `[-180, 180)`.
pub fn uv_to_direction(u: f64, v: f64) -> (f64, f64) {
    let az = (180.0 - 360.0 * u + 180.0).rem_euclid(360.0) - 180.0;
    (az, 90.0 - 180.0 * v)
}

/// Draw random events for a scene.
pub fn random_events(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<SourceEvent> {
    let frames = spec.clip_frames();
    (0..spec.n_events)
        .map(|track| {
            let len = rng.gen_range((frames / 5).max(1)..=(frames / 2).max(1));
            let onset = rng.gen_range(0..=frames - len);
            let el_max = spec.max_elevation_deg.round() as i64;
            SourceEvent {
                class_idx: rng.gen_range(0..spec.n_classes),
                track,
                onset,
                offset: onset + len,
                azimuth_deg: rng.gen_range(-180..180) as f64,
                elevation_deg: rng.gen_range(-el_max..=el_max) as f64,
                distance_m: rng.gen_range(100..=400) as f64 / 100.0,
                signal: spec.signal,
            }
        })
        .collect()
}

/// Render a scene with randomly drawn events.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let events = random_events(spec, &mut rng);
    render_scene(spec, &events, &mut rng)
}

/// Render a scene with the given events.
pub fn render_scene(
    spec: &SceneSpec,
    events: &[SourceEvent],
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    if !(spec.clip_seconds > 0.0) || spec.sample_rate == 0 {
        return Err(Error::InvalidInput(
            "clip length and sample rate must be positive".into(),
        ));
    }
    let n = spec.n_samples();
    let frames = spec.clip_frames();
    let samples_per_frame = spec.sample_rate as f64 / LABEL_FPS as f64;
    let mut mix = Array2::<f64>::zeros((FOA_CHANNELS, n));
    let mut labels = Vec::new();
    let mut keypoints = Vec::new();
    let mut speakers = 0usize;
    for ev in events {
        ev.validate(frames, spec.n_classes)?;
        let start = (ev.onset as f64 * samples_per_frame).round() as usize;
        let end = ((ev.offset as f64 * samples_per_frame).round() as usize).min(n);
        let mut sig = source_signal(
            ev.signal,
            ev.class_idx,
            spec.n_classes,
            end - start,
            spec.sample_rate,
            rng,
        );
        sig.iter_mut().for_each(|v| *v /= ev.distance_m);
        let enc = foa_encode(&sig, ev.azimuth_deg, ev.elevation_deg, spec.sn3d);
        let mut dst = mix.slice_mut(ndarray::s![.., start..end]);
        dst += &enc;
        for frame in ev.onset..ev.offset {
            labels.push(LabelRow {
                frame,
                class: ev.class_idx,
                track: ev.track,
                azimuth_deg: ev.azimuth_deg,
                elevation_deg: ev.elevation_deg,
                distance_cm: (ev.distance_m * 100.0).round(),
            });
        }
        if SPEECH_CLASSES.contains(&ev.class_idx) && speakers < MAX_SPEAKERS {
            let (u, v) = direction_to_uv(ev.azimuth_deg, ev.elevation_deg);
            let per = VISUAL_FPS as f64 / LABEL_FPS as f64;
            let (f0, f1) = (
                (ev.onset as f64 * per) as usize,
                (ev.offset as f64 * per) as usize,
            );
            for frame_idx in f0..f1 {
                keypoints.push(Keypoint {
                    frame_idx,
                    speaker_idx: speakers,
                    u,
                    v,
                });
            }
            speakers += 1;
        }
    }
    if let Some(snr) = spec.snr_db {
        mix += &diffuse_noise(n, 10f64.powf(-snr / 20.0), rng);
    }
    labels.sort_by_key(|r| (r.frame, r.class, r.track));
    let same_class_overlap = events.iter().enumerate().any(|(i, a)| {
        events[i + 1..]
            .iter()
            .any(|b| a.class_idx == b.class_idx && a.onset < b.offset && b.onset < a.offset)
    });
    Ok(Scene {
        wave: FoaWaveform::new(mix, spec.sample_rate)?,
        events: events.to_vec(),
        labels,
        keypoints: MouthKeypoints::new(keypoints)?,
        same_class_overlap,
    })
}

/// File stems of the clips written by [`synth_dataset`].
pub fn clip_name(i: usize) -> String {
    format!("clip_{i:04}")
}

/// Write `count` scenes as `<name>.wav`, `<name>.labels.csv` and `<name>.keypoints.csv`.
///
/// Clip `i` uses seed `base.seed + i`.
pub fn synth_dataset(dir: &Path, count: usize, base: &SceneSpec) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SceneSpec {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let scene = synth_scene(&spec)?;
        let name = clip_name(i);
        write_foa_wav(&dir.join(format!("{name}.wav")), &scene.wave)?;
        write_label_csv(&dir.join(format!("{name}.labels.csv")), &scene.labels)?;
        write_keypoint_csv(&dir.join(format!("{name}.keypoints.csv")), &scene.keypoints)?;
        names.push(name);
    }
    Ok(names)
}
