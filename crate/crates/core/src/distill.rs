//! Cross-modal distillation from a frozen audio network into an audio-visual one.
//!
//! Two signals are transferred:
//!
//! * response distillation matches the student's activity probabilities to the
//!   teacher's under a binary KL divergence and its locations under an
//!   activity-weighted squared error;
//! * feature distillation fuses the student's four stage maps top-down with
//!   attention-weighted residuals and compares each fused map with the
//!   teacher's stage map, both at full resolution and after spatial pyramid
//!   pooling.
//!
//! The teacher runs on its own gradient-free tape in inference mode; its
//! outputs enter the student tape as constants.

use crate::autodiff::{Tape, Var};
use crate::backbone::{ForwardOutput, Model};
use crate::error::{Error, Result};
use crate::mixaug::MixPlan;
use crate::nn::{Conv2d, Ctx};
use crate::objectives::{weighted_location_mse, PROB_EPS};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RkdWeights {
    pub sed: f64,
    pub ssl: f64,
}

impl Default for RkdWeights {
    fn default() -> Self {
        Self { sed: 0.1, ssl: 1.0 }
    }
}

/// Mean binary KL divergence `KL(teacher ‖ student)` over every cell.
pub fn binary_kl<T: Scalar>(tape: &mut Tape<T>, teacher: Var, student: Var) -> Result<Var> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::Shape(format!(
            "activity: {:?} vs {:?}",
            tape.shape(teacher),
            tape.shape(student)
        )));
    }
    let eps = T::c(PROB_EPS);
    let (lo, hi) = (eps, T::one() - eps);
    let pt = tape.clamp(teacher, lo, hi);
    let ps = tape.clamp(student, lo, hi);
    let complement = |tape: &mut Tape<T>, v: Var| {
        let n = tape.neg(v);
        tape.add_scalar(n, T::one())
    };
    let qt = complement(tape, pt);
    let qs = complement(tape, ps);
    let log_ratio = |tape: &mut Tape<T>, a: Var, b: Var| {
        let la = tape.log(a);
        let lb = tape.log(b);
        tape.sub(la, lb)
    };
    let pos = log_ratio(tape, pt, ps);
    let neg = log_ratio(tape, qt, qs);
    let a = tape.mul(pt, pos);
    let b = tape.mul(qt, neg);
    let s = tape.add(a, b);
    Ok(tape.mean(s))
}

/// Response distillation loss `β_sed·KL + β_ssl·MSE_pt`.
pub fn rkd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_activity: Var,
    teacher_location: Var,
    student_activity: Var,
    student_location: Var,
    w: &RkdWeights,
) -> Result<Var> {
    let kl = binary_kl(tape, teacher_activity, student_activity)?;
    let mse = weighted_location_mse(tape, student_location, teacher_location, teacher_activity)?;
    let a = tape.scale(kl, T::c(w.sed));
    let b = tape.scale(mse, T::c(w.ssl));
    Ok(tape.add(a, b))
}

/// Pooling levels and weights of the hierarchical context loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SppConfig {
    /// `None` keeps the full map; `Some(g)` pools to a `g × g` grid over `(time, freq)`.
    pub grids: Vec<Option<usize>>,
    /// Normalized level weights.
    pub weights: Vec<f64>,
}

impl Default for SppConfig {
    fn default() -> Self {
        let raw = [1.0, 0.5, 0.25, 0.125];
        let total: f64 = raw.iter().sum();
        Self {
            grids: vec![None, Some(4), Some(2), Some(1)],
            weights: raw.iter().map(|w| w / total).collect(),
        }
    }
}

fn mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Hierarchical context loss between teacher stage maps and fused student maps.
///
/// The pyramid term covers every stage but the top one; the full-resolution
/// term covers all stages.
pub fn hcl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[Var],
    fused: &[Var],
    spp: &SppConfig,
) -> Result<Var> {
    if teacher.len() != fused.len() || teacher.is_empty() {
        return Err(Error::Shape(format!(
            "{} teacher stages vs {} fused stages",
            teacher.len(),
            fused.len()
        )));
    }
    if spp.grids.len() != spp.weights.len() {
        return Err(Error::Config(
            "pyramid grids and weights differ in length".into(),
        ));
    }
    let mut terms = Vec::new();
    for (j, (&t, &s)) in teacher.iter().zip(fused).enumerate() {
        if tape.shape(t) != tape.shape(s) {
            return Err(Error::Shape(format!(
                "stage {j}: teacher {:?} vs fused {:?}",
                tape.shape(t),
                tape.shape(s)
            )));
        }
        terms.push(mse(tape, t, s));
        if j + 1 == teacher.len() {
            continue;
        }
        for (grid, &w) in spp.grids.iter().zip(&spp.weights) {
            let term = match *grid {
                None => mse(tape, t, s),
                Some(g) => {
                    let pt = tape.adaptive_avg_pool2d(t, g, g);
                    let ps = tape.adaptive_avg_pool2d(s, g, g);
                    mse(tape, pt, ps)
                }
            };
            terms.push(tape.scale(term, T::c(w)));
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    Ok(acc)
}

/// Attention-based top-down fusion of student stage maps.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mid_channels: usize,
    transforms: Vec<Conv2d>,
    attention: Vec<Conv2d>,
    outputs: Vec<Conv2d>,
}

/// Tensors produced by [`Fusion::forward`], indexed by stage.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub fused: Vec<Var>,
    pub residuals: Vec<Var>,
    /// `[batch, 2, time, freq]` softmax weights for stages below the top.
    pub attention: Vec<Var>,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        student_channels: &[usize],
        teacher_channels: &[usize],
        mid_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if student_channels.len() != teacher_channels.len() || mid_channels == 0 {
            return Err(Error::Config(
                "fusion needs matching stage lists and positive width".into(),
            ));
        }
        let j = student_channels.len();
        let transforms = (0..j)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("fusion.transform{i}"),
                    student_channels[i],
                    mid_channels,
                    1,
                    true,
                    rng,
                )
            })
            .collect();
        let attention = (0..j - 1)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("fusion.attention{i}"),
                    2 * mid_channels,
                    2,
                    1,
                    true,
                    rng,
                )
            })
            .collect();
        let outputs = (0..j)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("fusion.output{i}"),
                    mid_channels,
                    teacher_channels[i],
                    3,
                    true,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            mid_channels,
            transforms,
            attention,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, stages: &[Var]) -> Result<FusionOutput> {
        let j = self.transforms.len();
        if stages.len() != j {
            return Err(Error::Shape(format!(
                "fusion expects {j} stages, got {}",
                stages.len()
            )));
        }
        let mut fused = vec![None; j];
        let mut residuals = vec![None; j];
        let mut attention = vec![None; j - 1];
        let top = self.transforms[j - 1].forward(ctx, stages[j - 1]);
        residuals[j - 1] = Some(top);
        fused[j - 1] = Some(self.outputs[j - 1].forward(ctx, top));
        let mut upper = top;
        for i in (0..j - 1).rev() {
            let local = self.transforms[i].forward(ctx, stages[i]);
            let freq = ctx.tape.shape(local)[3];
            let up = ctx.tape.resize_nearest(upper, 3, freq);
            let both = ctx.tape.concat(&[local, up], 1);
            let logits = self.attention[i].forward(ctx, both);
            let last = ctx.tape.permute(logits, &[0, 2, 3, 1]);
            let z = ctx.tape.softmax_last(last);
            let z = ctx.tape.permute(z, &[0, 3, 1, 2]);
            let z0 = ctx.tape.narrow(z, 1, 0, 1);
            let z1 = ctx.tape.narrow(z, 1, 1, 2);
            let a = ctx.tape.mul(z0, local);
            let b = ctx.tape.mul(z1, up);
            let r = ctx.tape.add(a, b);
            residuals[i] = Some(r);
            attention[i] = Some(z);
            fused[i] = Some(self.outputs[i].forward(ctx, r));
            upper = r;
        }
        let unwrap = |v: Vec<Option<Var>>| v.into_iter().map(|x| x.expect("filled")).collect();
        Ok(FusionOutput {
            fused: unwrap(fused),
            residuals: unwrap(residuals),
            attention: unwrap(attention),
        })
    }
}

/// Teacher quantities needed by the distillation losses.
#[derive(Clone, Debug)]
pub struct TeacherOutputs<T> {
    pub activity: ArrayD<T>,
    pub location: ArrayD<T>,
    pub stages: Vec<ArrayD<T>>,
}

/// Inference-mode teacher pass on audio features, mixed with the same plan as the student.
pub fn teacher_forward<T: Scalar>(
    teacher: &Model<T>,
    audio: &ArrayD<T>,
    plan: Option<&MixPlan>,
) -> Result<TeacherOutputs<T>> {
    let mut ctx = Ctx::eval(&teacher.store);
    let x = ctx.tape.constant(audio.clone());
    let out = teacher.net.forward(&mut ctx, x, plan)?;
    let v = |var: Var| ctx.tape.value(var).clone();
    Ok(TeacherOutputs {
        activity: v(out.activity),
        location: v(out.location),
        stages: out.stages.iter().map(|&s| v(s)).collect(),
    })
}

/// Distillation losses for one student forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DistillLosses {
    pub rkd: Option<Var>,
    pub fkd: Option<Var>,
}

/// Attach response and feature distillation terms to a finished student forward.
pub fn distill_losses<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    student: &ForwardOutput,
    fusion: Option<&Fusion>,
    teacher: &TeacherOutputs<T>,
    rkd: Option<&RkdWeights>,
    spp: Option<&SppConfig>,
) -> Result<DistillLosses> {
    let rkd = match rkd {
        Some(w) => {
            let ta = ctx.tape.constant(teacher.activity.clone());
            let tl = ctx.tape.constant(teacher.location.clone());
            Some(rkd_loss(
                &mut ctx.tape,
                ta,
                tl,
                student.activity,
                student.location,
                w,
            )?)
        }
        None => None,
    };
    let fkd = match (fusion, spp) {
        (Some(f), Some(spp)) => {
            let fo = f.forward(ctx, &student.stages)?;
            let ts: Vec<Var> = teacher
                .stages
                .iter()
                .map(|s| ctx.tape.constant(s.clone()))
                .collect();
            Some(hcl_loss(&mut ctx.tape, &ts, &fo.fused, spp)?)
        }
        (None, Some(_)) => {
            return Err(Error::Config(
                "feature distillation requested without a fusion module".into(),
            ))
        }
        _ => None,
    };
    Ok(DistillLosses { rkd, fkd })
}

/// Paired teacher/student pass: returns the student forward and both distillation losses.
///
/// `av` is the student input `[batch, time, freq, audio+visual]`; the teacher
/// sees its leading `teacher.config().in_channels` channels.
pub fn distill_step<T: Scalar>(
    teacher: &Model<T>,
    student: &Model<T>,
    fusion: Option<&Fusion>,
    ctx: &mut Ctx<'_, T>,
    av: &ArrayD<T>,
    plan: Option<&MixPlan>,
    rkd: Option<&RkdWeights>,
    spp: Option<&SppConfig>,
) -> Result<(ForwardOutput, DistillLosses)> {
    let audio = audio_channels(av, teacher.config().in_channels)?;
    let t = teacher_forward(teacher, &audio, plan)?;
    let x = ctx.tape.constant(av.clone());
    let out = student.net.forward(ctx, x, plan)?;
    for (j, (ts, &ss)) in t.stages.iter().zip(&out.stages).enumerate() {
        let sshape = ctx.tape.shape(ss);
        if ts.shape()[0] != sshape[0] || ts.shape()[2..] != sshape[2..] {
            return Err(Error::Shape(format!(
                "stage {j}: teacher {:?} vs student {sshape:?}",
                ts.shape()
            )));
        }
    }
    let losses = distill_losses(ctx, &out, fusion, &t, rkd, spp)?;
    Ok((out, losses))
}

/// Leading `n` channels of a `[batch, time, freq, channel]` array.
pub fn audio_channels<T: Scalar>(x: &ArrayD<T>, n: usize) -> Result<ArrayD<T>> {
    if x.ndim() != 4 || x.shape()[3] < n {
        return Err(Error::Shape(format!(
            "cannot take {n} channels from {:?}",
            x.shape()
        )));
    }
    Ok(x.slice(ndarray::s![.., .., .., 0..n]).to_owned().into_dyn())
}
