//! Location-aware detection metrics, aggregate scores and diagnostic reports.
//!
//! The output representation allows one instance per class and frame, so a
//! predicted and a reference event match exactly when both are active in the
//! same cell. A match counts as a true positive only when it also satisfies
//! the spatial (and, for the distance-aware variant, the distance) threshold.

use crate::error::{Error, Result};
use crate::objectives::{doa_angles, doa_vector, SeldTargets, TaskMode};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const ANGLE_THRESHOLD_DEG: f64 = 20.0;
pub const DISTANCE_THRESHOLD: f64 = 1.0;
pub const DETECTION_THRESHOLD: f64 = 0.5;
/// Label frames per error-rate segment (1 s at 100 ms frames).
pub const SEGMENT_FRAMES: usize = 10;

/// Thresholded events on a `[frames, classes]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EventGrid {
    pub activity: Array2<bool>,
    /// `[L, N, 3]` unit vectors; ignored where inactive.
    pub doa: Array3<f64>,
    /// `[L, N]` meters; required for the distance-aware metrics.
    pub distance: Option<Array2<f64>>,
}

impl EventGrid {
    pub fn empty(frames: usize, classes: usize, with_distance: bool) -> Self {
        Self {
            activity: Array2::from_elem((frames, classes), false),
            doa: Array3::zeros((frames, classes, 3)),
            distance: with_distance.then(|| Array2::zeros((frames, classes))),
        }
    }

    pub fn frames(&self) -> usize {
        self.activity.nrows()
    }

    pub fn classes(&self) -> usize {
        self.activity.ncols()
    }

    /// Threshold network outputs `activity [L, N]`, `location [L, 3N]`.
    pub fn from_output<T: Scalar>(
        activity: ArrayView2<'_, T>,
        location: ArrayView2<'_, T>,
        mode: TaskMode,
    ) -> Result<Self> {
        let (l, n) = activity.dim();
        if location.dim() != (l, 3 * n) {
            return Err(Error::Shape(format!(
                "location {:?} does not match activity {:?}",
                location.dim(),
                activity.dim()
            )));
        }
        let mut g = Self::empty(l, n, mode == TaskMode::DoaDistance2024);
        for i in 0..l {
            for c in 0..n {
                let v = [0, 1, 2].map(|k| location[[i, 3 * c + k]].as_f64());
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                g.activity[[i, c]] = activity[[i, c]].as_f64() > DETECTION_THRESHOLD;
                for k in 0..3 {
                    g.doa[[i, c, k]] = if norm > 0.0 { v[k] / norm } else { 0.0 };
                }
                if let Some(d) = g.distance.as_mut() {
                    d[[i, c]] = norm;
                }
            }
        }
        Ok(g)
    }

    pub fn from_targets<T: Scalar>(t: &SeldTargets<T>) -> Result<Self> {
        let act = t.activity.view();
        let loc = t.location_flat();
        let mut g = Self::from_output(act, loc.view(), t.task_mode)?;
        // targets mark activity with exact ones; fractional (mixed) cells are not references
        g.activity = t.activity.mapv(|v| v.as_f64() >= 1.0);
        Ok(g)
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle in degrees between two vectors; errors on zero-length input.
pub fn angular_error(u: [f64; 3], v: [f64; 3]) -> Result<f64> {
    let (nu, nv) = (dot3(&u, &u).sqrt(), dot3(&v, &v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidInput("angular error of a zero vector".into()));
    }
    let c = (dot3(&u, &v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

fn cell_doa(g: &EventGrid, l: usize, n: usize) -> [f64; 3] {
    [g.doa[[l, n, 0]], g.doa[[l, n, 1]], g.doa[[l, n, 2]]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool counts over all classes.
    #[default]
    Micro,
    /// Average class-wise metrics.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seld2023Report {
    pub er: f64,
    pub f: f64,
    pub le: f64,
    pub lr: f64,
    pub score: f64,
    /// The reference holds no active events; `le` and `lr` are placeholders.
    pub empty_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seld2024Report {
    pub f1: f64,
    pub doae: f64,
    pub rde: f64,
    pub score: f64,
    /// No predicted/reference matches exist; `doae` and `rde` are placeholders.
    pub no_matches: bool,
}

/// Aggregate `(ER + (1 − F) + LE/180 + (1 − LR)) / 4`.
pub fn score_2023(er: f64, f: f64, le_deg: f64, lr: f64) -> f64 {
    (er + (1.0 - f) + le_deg / 180.0 + (1.0 - lr)) / 4.0
}

/// Aggregate `((1 − F1) + DOAE/180 + RDE) / 3`.
pub fn score_2024(f1: f64, doae_deg: f64, rde: f64) -> f64 {
    ((1.0 - f1) + doae_deg / 180.0 + rde) / 3.0
}

/// Raw counts for the direction-only metrics over a set of classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counts2023 {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_ref: usize,
    pub matches: usize,
    pub angle_sum: f64,
    /// `Σ_segments (S + D + I)`.
    pub er_errors: usize,
}

fn check_aligned(pred: &EventGrid, reference: &EventGrid) -> Result<()> {
    if pred.activity.dim() != reference.activity.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs reference {:?}",
            pred.activity.dim(),
            reference.activity.dim()
        )));
    }
    Ok(())
}

/// Count events of `classes` frame by frame.
pub fn counts_2023(
    pred: &EventGrid,
    reference: &EventGrid,
    classes: &[usize],
) -> Result<Counts2023> {
    check_aligned(pred, reference)?;
    let mut c = Counts2023::default();
    let frames = pred.frames();
    let mut seg_fn = 0usize;
    let mut seg_fp = 0usize;
    for l in 0..frames {
        for &n in classes {
            let (p, r) = (pred.activity[[l, n]], reference.activity[[l, n]]);
            if r {
                c.n_ref += 1;
            }
            let (fp, fn_) = match (p, r) {
                (true, true) => {
                    let ang = angular_error(cell_doa(pred, l, n), cell_doa(reference, l, n))?;
                    c.matches += 1;
                    c.angle_sum += ang;
                    if ang <= ANGLE_THRESHOLD_DEG {
                        c.tp += 1;
                        (0, 0)
                    } else {
                        (1, 1)
                    }
                }
                (true, false) => (1, 0),
                (false, true) => (0, 1),
                (false, false) => (0, 0),
            };
            c.fp += fp;
            c.fn_ += fn_;
            seg_fp += fp;
            seg_fn += fn_;
        }
        if (l + 1) % SEGMENT_FRAMES == 0 || l + 1 == frames {
            // S + D + I = min + (fn - min) + (fp - min) = max(fn, fp)
            c.er_errors += seg_fn.max(seg_fp);
            seg_fn = 0;
            seg_fp = 0;
        }
    }
    Ok(c)
}

impl Counts2023 {
    fn report(&self) -> Seld2023Report {
        let er = self.er_errors as f64 / self.n_ref.max(1) as f64;
        let denom = 2 * self.tp + self.fp + self.fn_;
        let f = if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        };
        let le = if self.matches == 0 {
            180.0
        } else {
            self.angle_sum / self.matches as f64
        };
        let lr = if self.n_ref == 0 {
            0.0
        } else {
            self.matches as f64 / self.n_ref as f64
        };
        Seld2023Report {
            er,
            f,
            le,
            lr,
            score: score_2023(er, f, le, lr),
            empty_reference: self.n_ref == 0,
        }
    }
}

pub fn evaluate_2023(
    pred: &EventGrid,
    reference: &EventGrid,
    averaging: Averaging,
) -> Result<Seld2023Report> {
    let all: Vec<usize> = (0..pred.classes()).collect();
    match averaging {
        Averaging::Micro => Ok(counts_2023(pred, reference, &all)?.report()),
        Averaging::Macro => {
            let per: Vec<Seld2023Report> = all
                .iter()
                .map(|&n| counts_2023(pred, reference, &[n]).map(|c| c.report()))
                .collect::<Result<_>>()?;
            let k = per.len().max(1) as f64;
            let mean = |f: fn(&Seld2023Report) -> f64| per.iter().map(f).sum::<f64>() / k;
            let (er, f, le, lr) = (
                mean(|r| r.er),
                mean(|r| r.f),
                mean(|r| r.le),
                mean(|r| r.lr),
            );
            Ok(Seld2023Report {
                er,
                f,
                le,
                lr,
                score: score_2023(er, f, le, lr),
                empty_reference: per.iter().all(|r| r.empty_reference),
            })
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counts2024 {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matches: usize,
    pub angle_sum: f64,
    pub rel_dist_sum: f64,
}

pub fn counts_2024(
    pred: &EventGrid,
    reference: &EventGrid,
    classes: &[usize],
) -> Result<Counts2024> {
    check_aligned(pred, reference)?;
    let (Some(pd), Some(rd)) = (pred.distance.as_ref(), reference.distance.as_ref()) else {
        return Err(Error::InvalidInput(
            "distance-aware metrics need distances".into(),
        ));
    };
    let mut c = Counts2024::default();
    for l in 0..pred.frames() {
        for &n in classes {
            match (pred.activity[[l, n]], reference.activity[[l, n]]) {
                (true, true) => {
                    let d_ref = rd[[l, n]];
                    if !(d_ref > 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "reference distance {d_ref} at frame {l}"
                        )));
                    }
                    let ang = angular_error(cell_doa(pred, l, n), cell_doa(reference, l, n))?;
                    let rel = (pd[[l, n]] - d_ref).abs() / d_ref;
                    c.matches += 1;
                    c.angle_sum += ang;
                    c.rel_dist_sum += rel;
                    if ang <= ANGLE_THRESHOLD_DEG && rel <= DISTANCE_THRESHOLD {
                        c.tp += 1;
                    } else {
                        c.fp += 1;
                        c.fn_ += 1;
                    }
                }
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

impl Counts2024 {
    fn report(&self) -> Seld2024Report {
        let denom = 2 * self.tp + self.fp + self.fn_;
        let f1 = if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        };
        let (doae, rde) = if self.matches == 0 {
            (180.0, 1.0)
        } else {
            let m = self.matches as f64;
            (self.angle_sum / m, self.rel_dist_sum / m)
        };
        Seld2024Report {
            f1,
            doae,
            rde,
            score: score_2024(f1, doae, rde),
            no_matches: self.matches == 0,
        }
    }
}

pub fn evaluate_2024(
    pred: &EventGrid,
    reference: &EventGrid,
    averaging: Averaging,
) -> Result<Seld2024Report> {
    let all: Vec<usize> = (0..pred.classes()).collect();
    match averaging {
        Averaging::Micro => Ok(counts_2024(pred, reference, &all)?.report()),
        Averaging::Macro => {
            let per: Vec<Seld2024Report> = all
                .iter()
                .map(|&n| counts_2024(pred, reference, &[n]).map(|c| c.report()))
                .collect::<Result<_>>()?;
            let k = per.len().max(1) as f64;
            let mean = |f: fn(&Seld2024Report) -> f64| per.iter().map(f).sum::<f64>() / k;
            let (f1, doae, rde) = (mean(|r| r.f1), mean(|r| r.doae), mean(|r| r.rde));
            Ok(Seld2024Report {
                f1,
                doae,
                rde,
                score: score_2024(f1, doae, rde),
                no_matches: per.iter().all(|r| r.no_matches),
            })
        }
    }
}

/// Concatenate clips along time so metrics pool over a whole data set.
pub fn concat_grids(grids: &[EventGrid]) -> Result<EventGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidInput("no grids".into()))?;
    let n = first.classes();
    let with_d = first.distance.is_some();
    let total: usize = grids.iter().map(|g| g.frames()).sum();
    let mut out = EventGrid::empty(total, n, with_d);
    let mut off = 0;
    for g in grids {
        if g.classes() != n || g.distance.is_some() != with_d {
            return Err(Error::Shape(
                "grids differ in classes or distance support".into(),
            ));
        }
        let l = g.frames();
        out.activity
            .slice_mut(ndarray::s![off..off + l, ..])
            .assign(&g.activity);
        out.doa
            .slice_mut(ndarray::s![off..off + l, .., ..])
            .assign(&g.doa);
        if let (Some(d), Some(src)) = (out.distance.as_mut(), g.distance.as_ref()) {
            d.slice_mut(ndarray::s![off..off + l, ..]).assign(src);
        }
        off += l;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// One reliability curve per class.
    pub classes: Vec<Vec<CalibrationBin>>,
    /// All classes pooled.
    pub overall: Vec<CalibrationBin>,
}

#[derive(Clone, Debug, Default)]
struct BinAcc {
    count: usize,
    conf_sum: f64,
    correct: usize,
}

/// Reliability data over the confidence range `(0.5, 1]`.
///
/// `confidences[k]` and `reference[k]` are `[L, N]` grids of one clip. A
/// prediction is correct when its cell is active in the reference.
pub fn calibration_bins(
    confidences: &[Array2<f64>],
    reference: &[Array2<bool>],
    n_bins: usize,
) -> Result<CalibrationReport> {
    if confidences.len() != reference.len() || n_bins == 0 {
        return Err(Error::InvalidInput(
            "calibration needs aligned clips and at least one bin".into(),
        ));
    }
    let n = confidences.first().map(|c| c.ncols()).unwrap_or(0);
    let mut per = vec![vec![BinAcc::default(); n_bins]; n];
    let width = (1.0 - DETECTION_THRESHOLD) / n_bins as f64;
    for (conf, refc) in confidences.iter().zip(reference) {
        if conf.dim() != refc.dim() || conf.ncols() != n {
            return Err(Error::Shape("confidence and reference grids differ".into()));
        }
        for ((idx, &p), &r) in conf.indexed_iter().zip(refc.iter()) {
            if !(p > DETECTION_THRESHOLD) || p > 1.0 {
                continue;
            }
            let b = (((p - DETECTION_THRESHOLD) / width).ceil() as usize).clamp(1, n_bins) - 1;
            let acc = &mut per[idx.1][b];
            acc.count += 1;
            acc.conf_sum += p;
            acc.correct += usize::from(r);
        }
    }
    let finish = |accs: &[BinAcc]| -> Vec<CalibrationBin> {
        accs.iter()
            .enumerate()
            .map(|(i, a)| CalibrationBin {
                lower: DETECTION_THRESHOLD + i as f64 * width,
                upper: DETECTION_THRESHOLD + (i + 1) as f64 * width,
                count: a.count,
                mean_confidence: (a.count > 0).then(|| a.conf_sum / a.count as f64),
                accuracy: (a.count > 0).then(|| a.correct as f64 / a.count as f64),
            })
            .collect()
    };
    let mut pooled = vec![BinAcc::default(); n_bins];
    for class in &per {
        for (p, a) in pooled.iter_mut().zip(class) {
            p.count += a.count;
            p.conf_sum += a.conf_sum;
            p.correct += a.correct;
        }
    }
    Ok(CalibrationReport {
        classes: per.iter().map(|c| finish(c)).collect(),
        overall: finish(&pooled),
    })
}

/// Per-clip activity-masked location error `Σ‖(y − ŷ)·p‖² / (L·N)`.
pub fn mse_distribution<T: Scalar>(
    pred_locations: &[Array2<T>],
    targets: &[SeldTargets<T>],
) -> Result<Vec<f64>> {
    if pred_locations.len() != targets.len() {
        return Err(Error::InvalidInput(
            "prediction and target clip counts differ".into(),
        ));
    }
    pred_locations
        .iter()
        .zip(targets)
        .map(|(pred, t)| {
            let (l, n) = t.activity.dim();
            if pred.dim() != (l, 3 * n) {
                return Err(Error::Shape(format!(
                    "prediction {:?} vs targets {:?}",
                    pred.dim(),
                    (l, 3 * n)
                )));
            }
            let mut sum = 0.0;
            for i in 0..l {
                for c in 0..n {
                    let p = t.activity[[i, c]].as_f64();
                    for k in 0..3 {
                        let d =
                            (t.location[[i, c, k]].as_f64() - pred[[i, 3 * c + k]].as_f64()) * p;
                        sum += d * d;
                    }
                }
            }
            Ok(sum / (l * n).max(1) as f64)
        })
        .collect()
}

/// Row of a prediction or reference file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub frame: usize,
    pub class: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

pub fn read_event_csv(path: &Path) -> Result<Vec<EventRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_event_csv(path: &Path, rows: &[EventRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Build a grid from event rows; rows outside the grid are rejected.
pub fn grid_from_rows(
    rows: &[EventRow],
    frames: usize,
    classes: usize,
    mode: TaskMode,
) -> Result<EventGrid> {
    let mut g = EventGrid::empty(frames, classes, mode == TaskMode::DoaDistance2024);
    for r in rows {
        if r.frame >= frames || r.class >= classes {
            return Err(Error::InvalidInput(format!(
                "event at frame {} class {} outside grid",
                r.frame, r.class
            )));
        }
        g.activity[[r.frame, r.class]] = true;
        let u = doa_vector(r.azimuth_deg, r.elevation_deg);
        for k in 0..3 {
            g.doa[[r.frame, r.class, k]] = u[k];
        }
        if let Some(d) = g.distance.as_mut() {
            d[[r.frame, r.class]] = r.distance_m.ok_or_else(|| {
                Error::InvalidInput(format!("missing distance at frame {}", r.frame))
            })?;
        }
    }
    Ok(g)
}

/// Active cells of a grid as rows; `confidence` is an optional `[L, N]` grid.
pub fn rows_from_grid(g: &EventGrid, confidence: Option<&Array2<f64>>) -> Vec<EventRow> {
    let mut rows = Vec::new();
    for ((l, n), &a) in g.activity.indexed_iter() {
        if !a {
            continue;
        }
        let (az, el) = doa_angles(cell_doa(g, l, n));
        rows.push(EventRow {
            frame: l,
            class: n,
            azimuth_deg: az,
            elevation_deg: el,
            distance_m: g.distance.as_ref().map(|d| d[[l, n]]),
            confidence: confidence.map(|c| c[[l, n]]),
        });
    }
    rows
}

/// `key: value` text and `name=value` flat renderings of a report.
pub trait Report {
    fn fields(&self) -> Vec<(&'static str, String)>;

    fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}: {v}");
        }
        s
    }

    fn to_flat(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

impl Report for Seld2023Report {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("ER", format!("{:.6}", self.er)),
            ("F", format!("{:.6}", self.f)),
            ("LE", format!("{:.6}", self.le)),
            ("LR", format!("{:.6}", self.lr)),
            ("Score", format!("{:.6}", self.score)),
            ("empty_reference", self.empty_reference.to_string()),
        ]
    }
}

impl Report for Seld2024Report {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("F1", format!("{:.6}", self.f1)),
            ("DOAE", format!("{:.6}", self.doae)),
            ("RDE", format!("{:.6}", self.rde)),
            ("Score", format!("{:.6}", self.score)),
            ("no_matches", self.no_matches.to_string()),
        ]
    }
}
