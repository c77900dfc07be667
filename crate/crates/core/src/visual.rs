//! Visual speaker cues encoded on the acoustic feature grid.
//!
//! Each detected mouth position `(u, v)` in normalized image coordinates turns
//! into two Gaussian bumps sampled at 64 cell centres: one over the horizontal
//! (azimuth) axis and one over the vertical (elevation) axis. Speakers occupy
//! fixed channel pairs; missing speakers stay zero.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAX_SPEAKERS: usize = 6;
pub const VISUAL_WIDTH: usize = 64;
pub const VISUAL_FPS: usize = 10;
pub const SIGMA_U_SQ: f64 = 0.04;
pub const SIGMA_V_SQ: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub frame_idx: usize,
    pub speaker_idx: usize,
    pub u: f64,
    pub v: f64,
}

/// Validated set of mouth detections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MouthKeypoints {
    pub entries: Vec<Keypoint>,
}

impl MouthKeypoints {
    pub fn new(entries: Vec<Keypoint>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for k in &entries {
            if k.speaker_idx >= MAX_SPEAKERS {
                return Err(Error::InvalidInput(format!(
                    "speaker index {} exceeds {}",
                    k.speaker_idx,
                    MAX_SPEAKERS - 1
                )));
            }
            if !(0.0..=1.0).contains(&k.u) || !(0.0..=1.0).contains(&k.v) {
                return Err(Error::InvalidInput(format!(
                    "keypoint ({}, {}) outside [0, 1]",
                    k.u, k.v
                )));
            }
            if !seen.insert((k.frame_idx, k.speaker_idx)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate keypoint for frame {} speaker {}",
                    k.frame_idx, k.speaker_idx
                )));
            }
        }
        Ok(Self { entries })
    }
}

pub fn read_keypoint_csv(path: &Path) -> Result<MouthKeypoints> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rows: Vec<Keypoint> = rdr
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect::<Result<_>>()?;
    MouthKeypoints::new(rows).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_keypoint_csv(path: &Path, kp: &MouthKeypoints) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for k in &kp.entries {
        w.serialize(k)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Gaussian likelihood of a keypoint coordinate at grid cell `i`.
pub fn gaussian_at(center: f64, i: usize, sigma_sq: f64) -> f64 {
    let x = (i as f64 + 0.5) / VISUAL_WIDTH as f64;
    (-(x - center).powi(2) / sigma_sq).exp()
}

/// `[frames, 64, 12]` visual feature; detections beyond `frames` are dropped.
pub fn gaussian_vectors<T: Scalar>(kp: &MouthKeypoints, frames: usize) -> Array3<T> {
    let mut out = Array3::zeros((frames, VISUAL_WIDTH, 2 * MAX_SPEAKERS));
    for k in kp.entries.iter().filter(|k| k.frame_idx < frames) {
        for i in 0..VISUAL_WIDTH {
            out[[k.frame_idx, i, 2 * k.speaker_idx]] = T::c(gaussian_at(k.u, i, SIGMA_U_SQ));
            out[[k.frame_idx, i, 2 * k.speaker_idx + 1]] = T::c(gaussian_at(k.v, i, SIGMA_V_SQ));
        }
    }
    out
}

/// Visual frames for a clip of `duration_s` seconds.
pub fn visual_frames(duration_s: f64) -> usize {
    (duration_s * VISUAL_FPS as f64).round() as usize
}

/// Concatenate acoustic `[T, F, Ca]` and visual `[T/r, F, Cv]` features, repeating each visual frame `r` times.
pub fn fuse_multimodal<T: Scalar>(audio: &Array3<T>, visual: &Array3<T>) -> Result<Array3<T>> {
    let (ta, fa, ca) = audio.dim();
    let (tv, fv, cv) = visual.dim();
    if tv == 0 || ta % tv != 0 || fa != fv {
        return Err(Error::Shape(format!(
            "cannot align visual {:?} with acoustic {:?}",
            visual.dim(),
            audio.dim()
        )));
    }
    let rep = ta / tv;
    let mut out = Array3::zeros((ta, fa, ca + cv));
    out.slice_mut(s![.., .., 0..ca]).assign(audio);
    for t in 0..ta {
        out.slice_mut(s![t, .., ca..])
            .assign(&visual.index_axis(Axis(0), t / rep));
    }
    Ok(out)
}
