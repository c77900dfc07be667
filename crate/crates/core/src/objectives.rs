//! Task losses, the combined training objective and the learning-rate schedule.
//!
//! Network outputs are laid out per label frame: activity `[batch, L, N]` and
//! location `[batch, L, 3N]` with the Cartesian components of class `n` at
//! `3n..3n+3`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

/// Probability clamp shared by every log-likelihood term.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    /// Unit DOA vectors.
    #[serde(rename = "2023")]
    Doa2023,
    /// DOA vectors scaled by source distance in meters.
    #[serde(rename = "2024")]
    DoaDistance2024,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Doa2023 => "2023",
            TaskMode::DoaDistance2024 => "2024",
        }
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2023" | "doa_2023" => Ok(TaskMode::Doa2023),
            "2024" | "doa_distance_2024" => Ok(TaskMode::DoaDistance2024),
            _ => Err(Error::Config(format!("unknown task mode `{s}`"))),
        }
    }
}

/// Frame-wise supervision for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SeldTargets<T> {
    /// `[L, N]`, binary unless label mixing was applied.
    pub activity: Array2<T>,
    /// `[L, N, 3]` Cartesian targets; zero where inactive.
    pub location: Array3<T>,
    pub task_mode: TaskMode,
}

impl<T: Scalar> SeldTargets<T> {
    pub fn empty(frames: usize, classes: usize, task_mode: TaskMode) -> Self {
        Self {
            activity: Array2::zeros((frames, classes)),
            location: Array3::zeros((frames, classes, 3)),
            task_mode,
        }
    }

    pub fn frames(&self) -> usize {
        self.activity.nrows()
    }

    pub fn classes(&self) -> usize {
        self.activity.ncols()
    }

    /// Location flattened to `[L, 3N]`.
    pub fn location_flat(&self) -> Array2<T> {
        let (l, n, _) = self.location.dim();
        self.location
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((l, 3 * n))
            .expect("contiguous")
    }
}

/// Stack per-clip targets into `([B, L, N], [B, L, 3N])` arrays.
pub fn stack_targets<T: Scalar>(targets: &[&SeldTargets<T>]) -> Result<(ArrayD<T>, ArrayD<T>)> {
    let first = targets
        .first()
        .ok_or_else(|| Error::InvalidInput("no targets to stack".into()))?;
    let (l, n) = first.activity.dim();
    let mut act = ArrayD::zeros(IxDyn(&[targets.len(), l, n]));
    let mut loc = ArrayD::zeros(IxDyn(&[targets.len(), l, 3 * n]));
    for (b, t) in targets.iter().enumerate() {
        if t.activity.dim() != (l, n) {
            return Err(Error::Shape("targets in a batch differ in shape".into()));
        }
        act.index_axis_mut(Axis(0), b).assign(&t.activity);
        loc.index_axis_mut(Axis(0), b).assign(&t.location_flat());
    }
    Ok((act, loc))
}

/// One row of a label file: `frame,class,track,azimuth_deg,elevation_deg,distance_cm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub frame: usize,
    pub class: usize,
    pub track: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance_cm: f64,
}

/// Unit vector for an azimuth/elevation pair in degrees.
pub fn doa_vector(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()]
}

/// Azimuth and elevation in degrees of a (not necessarily unit) vector.
pub fn doa_angles(v: [f64; 3]) -> (f64, f64) {
    let horiz = v[0].hypot(v[1]);
    (
        v[1].atan2(v[0]).to_degrees(),
        v[2].atan2(horiz).to_degrees(),
    )
}

pub fn read_label_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_label_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Build frame-wise targets from label rows.
///
/// Several same-class events in one frame collapse to the nearest source
/// (ties go to the lowest track index). Rows beyond `frames` are ignored.
pub fn targets_from_labels<T: Scalar>(
    rows: &[LabelRow],
    frames: usize,
    classes: usize,
    task_mode: TaskMode,
) -> Result<SeldTargets<T>> {
    let mut chosen: Vec<Option<&LabelRow>> = vec![None; frames * classes];
    for r in rows {
        if r.class >= classes {
            return Err(Error::InvalidInput(format!(
                "class {} out of range 0..{classes}",
                r.class
            )));
        }
        if !(r.distance_cm > 0.0) && task_mode == TaskMode::DoaDistance2024 {
            return Err(Error::InvalidInput(format!(
                "non-positive distance at frame {}",
                r.frame
            )));
        }
        if r.frame >= frames {
            continue;
        }
        let slot = &mut chosen[r.frame * classes + r.class];
        let better = match slot {
            None => true,
            Some(cur) => (r.distance_cm, r.track) < (cur.distance_cm, cur.track),
        };
        if better {
            *slot = Some(r);
        }
    }
    let mut t = SeldTargets::empty(frames, classes, task_mode);
    for (i, row) in chosen.into_iter().enumerate() {
        let Some(r) = row else { continue };
        let (l, n) = (i / classes, i % classes);
        let scale = match task_mode {
            TaskMode::Doa2023 => 1.0,
            TaskMode::DoaDistance2024 => r.distance_cm / 100.0,
        };
        let u = doa_vector(r.azimuth_deg, r.elevation_deg);
        t.activity[[l, n]] = T::one();
        for k in 0..3 {
            t.location[[l, n, k]] = T::c(u[k] * scale);
        }
    }
    Ok(t)
}

fn check_same(tape: &Tape<impl Scalar>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Binary cross-entropy averaged over every cell.
pub fn sed_bce<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_same(tape, pred, target, "activity")?;
    let eps = T::c(PROB_EPS);
    let p = tape.clamp(pred, eps, T::one() - eps);
    let lp = tape.log(p);
    let one_minus_p = {
        let n = tape.neg(p);
        tape.add_scalar(n, T::one())
    };
    let lq = tape.log(one_minus_p);
    let one_minus_t = {
        let n = tape.neg(target);
        tape.add_scalar(n, T::one())
    };
    let a = tape.mul(target, lp);
    let b = tape.mul(one_minus_t, lq);
    let s = tape.add(a, b);
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

/// Repeat each activity value three times so it lines up with `[.., 3N]` locations.
pub fn expand_activity<T: Scalar>(tape: &mut Tape<T>, activity: Var) -> Var {
    let shape = tape.shape(activity).to_vec();
    let n = *shape.last().expect("rank >= 1");
    let idx: Vec<usize> = (0..3 * n).map(|j| j / 3).collect();
    tape.index_select(activity, shape.len() - 1, &idx)
}

/// Activity-weighted squared location error: `Σ‖(y − ŷ)·p‖² / (B·L·N)`.
///
/// `weight` is `[.., N]`; it is the ground-truth activity for the task loss
/// and the teacher activity for response distillation.
pub fn weighted_location_mse<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    weight: Var,
) -> Result<Var> {
    check_same(tape, pred, target, "location")?;
    let wshape = tape.shape(weight).to_vec();
    let pshape = tape.shape(pred);
    if wshape.len() != pshape.len()
        || wshape[..wshape.len() - 1] != pshape[..pshape.len() - 1]
        || 3 * wshape[wshape.len() - 1] != pshape[pshape.len() - 1]
    {
        return Err(Error::Shape(format!(
            "weight {wshape:?} vs location {pshape:?}"
        )));
    }
    let cells: usize = wshape.iter().product();
    let w = expand_activity(tape, weight);
    let d = tape.sub(target, pred);
    let dw = tape.mul(d, w);
    let sq = tape.square(dw);
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::one() / T::from_usize_lossy(cells.max(1))))
}

/// Location loss masked by ground-truth activity.
pub fn ssl_mse<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    activity: Var,
) -> Result<Var> {
    weighted_location_mse(tape, pred, target, activity)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sed: f64,
    pub ssl: f64,
    pub rkd: f64,
    pub fkd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sed: 0.1,
            ssl: 1.0,
            rkd: 0.5,
            fkd: 0.5,
        }
    }
}

/// Weighted detection plus localization loss.
pub fn task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    w: &LossWeights,
    pred_activity: Var,
    pred_location: Var,
    target_activity: Var,
    target_location: Var,
) -> Result<Var> {
    let bce = sed_bce(tape, pred_activity, target_activity)?;
    let mse = ssl_mse(tape, pred_location, target_location, target_activity)?;
    let a = tape.scale(bce, T::c(w.sed));
    let b = tape.scale(mse, T::c(w.ssl));
    Ok(tape.add(a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupKind {
    /// Linear ramp from 0 to the configured weight.
    Ramp,
    /// Zero weight until the warm-up ends, full weight afterwards.
    Delay,
}

impl FromStr for WarmupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(WarmupKind::Ramp),
            "delay" => Ok(WarmupKind::Delay),
            _ => Err(Error::Config(format!("unknown warm-up kind `{s}`"))),
        }
    }
}

/// Feature-distillation weight at a (possibly fractional) epoch.
pub fn fkd_weight(gamma: f64, epoch: f64, warmup_epochs: f64, kind: WarmupKind) -> f64 {
    if warmup_epochs <= 0.0 || epoch >= warmup_epochs {
        return gamma;
    }
    match kind {
        WarmupKind::Ramp => gamma * (epoch / warmup_epochs).max(0.0),
        WarmupKind::Delay => 0.0,
    }
}

/// `task + γ1·rkd + γ2(epoch)·fkd` on plain numbers.
pub fn total_loss(
    task: f64,
    rkd: Option<f64>,
    fkd: Option<f64>,
    w: &LossWeights,
    epoch: f64,
    warmup_epochs: f64,
    warmup: WarmupKind,
) -> Result<f64> {
    let parts = [task, rkd.unwrap_or(0.0), fkd.unwrap_or(0.0)];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss components {parts:?}")));
    }
    let g2 = fkd_weight(w.fkd, epoch, warmup_epochs, warmup);
    Ok(task + w.rkd * parts[1] + g2 * parts[2])
}

/// Tri-stage learning-rate schedule: linear warm-up, hold, exponential decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriStage {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    /// Final learning rate as a fraction of the peak.
    pub final_ratio: f64,
}

impl TriStage {
    pub fn new(peak_lr: f64) -> Self {
        Self {
            peak_lr,
            warmup_frac: 0.1,
            hold_frac: 0.4,
            final_ratio: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.warmup_frac >= 0.0
            && self.hold_frac >= 0.0
            && self.warmup_frac + self.hold_frac <= 1.0
            && self.final_ratio > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self:?}")))
        }
    }

    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        if step > total_steps {
            return Err(Error::InvalidInput(format!(
                "step {step} beyond total {total_steps}"
            )));
        }
        let total = total_steps as f64;
        let warm = (self.warmup_frac * total).round();
        let hold_end = (warm + self.hold_frac * total).round().min(total);
        let s = step as f64;
        Ok(if s < warm {
            self.peak_lr * s / warm
        } else if s <= hold_end || hold_end >= total {
            self.peak_lr
        } else {
            let frac = (s - hold_end) / (total - hold_end);
            self.peak_lr * self.final_ratio.powf(frac)
        })
    }
}

/// Learning rate at `step` under the default phase split.
pub fn lr_schedule(step: usize, total_steps: usize, peak_lr: f64) -> Result<f64> {
    TriStage::new(peak_lr).lr(step, total_steps)
}

/// Plain-array task loss terms `(bce, mse)` for one batch.
pub fn task_terms<T: Scalar>(
    pred_activity: &ArrayD<T>,
    pred_location: &ArrayD<T>,
    target_activity: &ArrayD<T>,
    target_location: &ArrayD<T>,
) -> Result<(T, T)> {
    let mut t = Tape::no_grad();
    let pa = t.constant(pred_activity.clone());
    let pl = t.constant(pred_location.clone());
    let ta = t.constant(target_activity.clone());
    let tl = t.constant(target_location.clone());
    let bce = sed_bce(&mut t, pa, ta)?;
    let mse = ssl_mse(&mut t, pl, tl, ta)?;
    Ok((t.scalar(bce), t.scalar(mse)))
}
