//! Multi-level feature mixing.
//!
//! Every method is an instance of one operator applied at a network layer `d`:
//!
//! ```text
//! mixed = M ⊙ φ_d(X) + (1 − M) ⊙ φ_d(X')
//! ```
//!
//! where `M` is either the constant `λ` (point granularity) or a binary mask
//! that is zero inside a rectangular `(freq × channel)` patch (patch
//! granularity). The partner `X'` is the batch itself under a random
//! permutation, so hidden-layer mixing costs no extra forward pass. Methods
//! differ in where `d` may lie and in whether supervision mixes the labels or
//! the losses.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::objectives::SeldTargets;
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMethod {
    None,
    Mixup,
    LossMix,
    ManifoldMixup,
    PointMix,
    CutMix,
    CutLossMix,
    PatchMix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Point,
    Patch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixLayer {
    /// Only the network input is mixed.
    Input,
    /// Any member of the eligible layer set (the input layer included).
    Hidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supervision {
    Label,
    Loss,
}

impl MixMethod {
    pub const ALL: [MixMethod; 8] = [
        MixMethod::None,
        MixMethod::Mixup,
        MixMethod::LossMix,
        MixMethod::ManifoldMixup,
        MixMethod::PointMix,
        MixMethod::CutMix,
        MixMethod::CutLossMix,
        MixMethod::PatchMix,
    ];

    /// `(granularity, layer, supervision)`; `None` for the no-mixing method.
    pub fn attributes(self) -> Option<(Granularity, MixLayer, Supervision)> {
        use Granularity::*;
        use MixLayer::*;
        use Supervision::*;
        Some(match self {
            MixMethod::None => return None,
            MixMethod::Mixup => (Point, Input, Label),
            MixMethod::LossMix => (Point, Input, Loss),
            MixMethod::ManifoldMixup => (Point, Hidden, Label),
            MixMethod::PointMix => (Point, Hidden, Loss),
            MixMethod::CutMix => (Patch, Input, Label),
            MixMethod::CutLossMix => (Patch, Input, Loss),
            MixMethod::PatchMix => (Patch, Hidden, Loss),
        })
    }

    pub fn granularity(self) -> Option<Granularity> {
        self.attributes().map(|a| a.0)
    }

    pub fn layer(self) -> Option<MixLayer> {
        self.attributes().map(|a| a.1)
    }

    pub fn supervision(self) -> Option<Supervision> {
        self.attributes().map(|a| a.2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MixMethod::None => "none",
            MixMethod::Mixup => "mixup",
            MixMethod::LossMix => "lossmix",
            MixMethod::ManifoldMixup => "manifoldmixup",
            MixMethod::PointMix => "pointmix",
            MixMethod::CutMix => "cutmix",
            MixMethod::CutLossMix => "cutlossmix",
            MixMethod::PatchMix => "patchmix",
        }
    }
}

impl fmt::Display for MixMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown mix method `{s}`")))
    }
}

/// Granularity of the eligible mixing layers inside the ResNet encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerLevel {
    /// Input plus the output of every convolution (19 layers).
    Conv,
    /// Input plus the output of every basic block (9 layers).
    BasicBlock,
    /// Input plus the output of every residual stage (5 layers).
    ResBlock,
}

impl LayerLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerLevel::Conv => "conv",
            LayerLevel::BasicBlock => "basicblock",
            LayerLevel::ResBlock => "resblock",
        }
    }
}

impl FromStr for LayerLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" => Ok(LayerLevel::Conv),
            "basicblock" => Ok(LayerLevel::BasicBlock),
            "resblock" => Ok(LayerLevel::ResBlock),
            _ => Err(Error::Config(format!("unknown layer set `{s}`"))),
        }
    }
}

/// Number of mixing sites in the encoder: input, two stem convolutions and
/// 4 stages x 2 basic blocks x 2 convolutions.
pub const NUM_SITES: usize = 19;

/// Site index of the output of `conv` (0 or 1) in `block` (0 or 1) of `stage` (0..4).
pub const fn block_conv_site(stage: usize, block: usize, conv: usize) -> usize {
    3 + stage * 4 + block * 2 + conv
}

/// Mixing sites a method may choose from, numbered in forward order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EligibleLayerSet {
    pub level: LayerLevel,
    pub members: Vec<usize>,
}

impl EligibleLayerSet {
    pub fn new(level: LayerLevel) -> Self {
        let members = match level {
            LayerLevel::Conv => (0..NUM_SITES).collect(),
            LayerLevel::BasicBlock => std::iter::once(0)
                .chain((0..4).flat_map(|s| (0..2).map(move |b| block_conv_site(s, b, 1))))
                .collect(),
            LayerLevel::ResBlock => std::iter::once(0)
                .chain((0..4).map(|s| block_conv_site(s, 1, 1)))
                .collect(),
        };
        Self { level, members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, site: usize) -> bool {
        self.members.contains(&site)
    }
}

/// Concentration `α` of the symmetric `Beta(α, α)` mixing distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaParam(f64);

impl BetaParam {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidInput(format!(
                "Beta concentration must be > 0, got {alpha}"
            )))
        }
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

/// Half-open patch `[f1, f2) x [c1, c2)` in `(freq, channel)` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub f1: usize,
    pub f2: usize,
    pub c1: usize,
    pub c2: usize,
}

impl PatchBox {
    pub fn area(&self) -> usize {
        (self.f2 - self.f1) * (self.c2 - self.c1)
    }
}

/// One sampled augmentation decision shared by the whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub method: MixMethod,
    /// Mixing site index (see [`EligibleLayerSet`]).
    pub layer: usize,
    pub lambda: f64,
    /// Realized proportion of the primary sample; equals `lambda` for point mixing.
    pub lambda_eff: f64,
    pub patch_box: Option<PatchBox>,
    /// Map dims `(freq, channel)` of the mixed layer.
    pub dims: (usize, usize),
    /// `pairing[i]` is the partner of batch element `i`.
    pub pairing: Vec<usize>,
}

impl MixPlan {
    /// Plan that leaves the batch untouched.
    pub fn none(batch: usize) -> Self {
        Self {
            method: MixMethod::None,
            layer: 0,
            lambda: 1.0,
            lambda_eff: 1.0,
            patch_box: None,
            dims: (0, 0),
            pairing: (0..batch).collect(),
        }
    }

    /// Point plan with a fixed coefficient; used by tests and ablations.
    pub fn point(
        method: MixMethod,
        layer: usize,
        lambda: f64,
        dims: (usize, usize),
        pairing: Vec<usize>,
    ) -> Self {
        Self {
            method,
            layer,
            lambda,
            lambda_eff: lambda,
            patch_box: None,
            dims,
            pairing,
        }
    }

    /// Patch plan with a fixed box; `lambda_eff` follows from the box area.
    pub fn patch(
        method: MixMethod,
        layer: usize,
        lambda: f64,
        dims: (usize, usize),
        patch_box: PatchBox,
        pairing: Vec<usize>,
    ) -> Self {
        let lambda_eff = 1.0 - patch_box.area() as f64 / (dims.0 * dims.1) as f64;
        Self {
            method,
            layer,
            lambda,
            lambda_eff,
            patch_box: Some(patch_box),
            dims,
            pairing,
        }
    }

    pub fn is_active(&self) -> bool {
        self.method != MixMethod::None
    }

    pub fn supervision(&self) -> Option<Supervision> {
        self.method.supervision()
    }

    /// Binary `(freq × channel)` mask: 1 keeps the primary sample, 0 takes the partner.
    pub fn mask(&self) -> Option<Array2<u8>> {
        let b = self.patch_box?;
        let mut m = Array2::from_elem(self.dims, 1u8);
        for f in b.f1..b.f2 {
            for c in b.c1..b.c2 {
                m[[f, c]] = 0;
            }
        }
        Some(m)
    }

    fn validate(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "mixing expects [batch, channel, time, freq], got {shape:?}"
            )));
        }
        if self.pairing.len() != shape[0] || self.pairing.iter().any(|&p| p >= shape[0]) {
            return Err(Error::Shape(format!(
                "pairing of length {} does not match batch {}",
                self.pairing.len(),
                shape[0]
            )));
        }
        if let Some(b) = self.patch_box {
            // Input-layer patches may be restricted to a channel prefix (audio-only teacher).
            if shape[3] != self.dims.0 || shape[1] > self.dims.1 {
                return Err(Error::Shape(format!(
                    "mask dims {:?} incompatible with feature map {shape:?}",
                    self.dims
                )));
            }
            if b.f2 > self.dims.0 || b.c2 > self.dims.1 || b.f1 > b.f2 || b.c1 > b.c2 {
                return Err(Error::Shape(format!("patch {b:?} outside {:?}", self.dims)));
            }
        }
        Ok(())
    }

    /// Mask broadcastable to `[batch, channel, time, freq]`, truncated to `channels`.
    fn mask_nchw<T: Scalar>(&self, channels: usize) -> Option<ArrayD<T>> {
        let m = self.mask()?;
        let f = self.dims.0;
        let mut out = ArrayD::<T>::zeros(IxDyn(&[1, channels, 1, f]));
        for c in 0..channels {
            for fi in 0..f {
                out[[0, c, 0, fi]] = if m[[fi, c]] == 1 { T::one() } else { T::zero() };
            }
        }
        Some(out)
    }
}

/// Draw a mixing plan for one batch.
///
/// `site_dims[d]` is the `(freq, channel)` size of the feature map at site `d`.
pub fn sample_mix_plan<R: Rng>(
    method: MixMethod,
    alpha: BetaParam,
    layers: &EligibleLayerSet,
    site_dims: &[(usize, usize)],
    batch: usize,
    rng: &mut R,
) -> Result<MixPlan> {
    if batch == 0 {
        return Err(Error::InvalidInput("cannot mix an empty batch".into()));
    }
    let Some((granularity, layer_kind, _)) = method.attributes() else {
        return Ok(MixPlan::none(batch));
    };
    if layers.is_empty() {
        return Err(Error::Config("eligible layer set is empty".into()));
    }
    let beta = Beta::new(alpha.alpha(), alpha.alpha())
        .map_err(|e| Error::InvalidInput(format!("Beta distribution: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let layer = match layer_kind {
        MixLayer::Input => 0,
        MixLayer::Hidden => layers.members[rng.gen_range(0..layers.len())],
    };
    let dims = *site_dims
        .get(layer)
        .ok_or_else(|| Error::Config(format!("no feature dims for site {layer}")))?;
    let patch_box = match granularity {
        Granularity::Point => None,
        Granularity::Patch => {
            let cf = rng.gen::<f64>() * dims.0 as f64;
            let cc = rng.gen::<f64>() * dims.1 as f64;
            Some(patch_box(lambda, dims, (cf, cc)))
        }
    };
    let mut pairing: Vec<usize> = (0..batch).collect();
    pairing.shuffle(rng);
    Ok(match patch_box {
        Some(b) => MixPlan::patch(method, layer, lambda, dims, b, pairing),
        None => MixPlan::point(method, layer, lambda, dims, pairing),
    })
}

/// Patch side lengths for a mixing coefficient: `(F√(1−λ), C√(1−λ))`.
pub fn patch_dims(lambda: f64, dims: (usize, usize)) -> (f64, f64) {
    let s = (1.0 - lambda).max(0.0).sqrt();
    (dims.0 as f64 * s, dims.1 as f64 * s)
}

/// Box centred at `center`, clipped to the map, with edges rounded to cells.
pub fn patch_box(lambda: f64, dims: (usize, usize), center: (f64, f64)) -> PatchBox {
    let (rf, rc) = patch_dims(lambda, dims);
    let (fd, cd) = (dims.0 as f64, dims.1 as f64);
    let f1 = (center.0 - rf / 2.0).max(0.0).round() as usize;
    let f2 = (center.0 + rf / 2.0).min(fd).round() as usize;
    let c1 = (center.1 - rc / 2.0).max(0.0).round() as usize;
    let c2 = (center.1 + rc / 2.0).min(cd).round() as usize;
    PatchBox {
        f1,
        f2: f2.max(f1),
        c1,
        c2: c2.max(c1),
    }
}

/// Mix a `[batch, channel, time, freq]` tensor with its paired partner on the tape.
pub fn mix_on_tape<T: Scalar>(tape: &mut Tape<T>, plan: &MixPlan, x: Var) -> Result<Var> {
    if !plan.is_active() {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    plan.validate(&shape)?;
    let partner = tape.index_select(x, 0, &plan.pairing);
    match plan.mask_nchw::<T>(shape[1]) {
        None => {
            let lam = T::c(plan.lambda);
            let a = tape.scale(x, lam);
            let b = tape.scale(partner, T::one() - lam);
            Ok(tape.add(a, b))
        }
        Some(mask) => {
            let inv = mask.mapv(|m| T::one() - m);
            let m = tape.constant(mask);
            let im = tape.constant(inv);
            let a = tape.mul(x, m);
            let b = tape.mul(partner, im);
            Ok(tape.add(a, b))
        }
    }
}

/// Mix two `[batch, channel, time, freq]` arrays (`partner` already paired).
pub fn apply_mix<T: Scalar>(
    plan: &MixPlan,
    x: &ArrayD<T>,
    partner: &ArrayD<T>,
) -> Result<ArrayD<T>> {
    if x.shape() != partner.shape() {
        return Err(Error::Shape(format!(
            "mix operands differ: {:?} vs {:?}",
            x.shape(),
            partner.shape()
        )));
    }
    if !plan.is_active() {
        return Ok(x.clone());
    }
    let identity = MixPlan {
        pairing: (0..x.shape()[0]).collect(),
        ..plan.clone()
    };
    identity.validate(x.shape())?;
    Ok(match identity.mask_nchw::<T>(x.shape()[1]) {
        None => {
            let lam = T::c(plan.lambda);
            x.mapv(|v| v * lam) + &partner.mapv(|v| v * (T::one() - lam))
        }
        Some(mask) => {
            let inv = mask.mapv(|m| T::one() - m);
            x * &mask + &(partner * &inv)
        }
    })
}

/// Loss-interpolated supervision `λ_eff·L + (1−λ_eff)·L'`.
pub fn mix_supervision<T: Scalar>(loss_a: T, loss_b: T, plan: &MixPlan) -> Result<T> {
    if !loss_a.is_finite() || !loss_b.is_finite() {
        return Err(Error::NonFinite(format!("mixed losses {loss_a}, {loss_b}")));
    }
    let l = T::c(plan.lambda_eff);
    Ok(l * loss_a + (T::one() - l) * loss_b)
}

/// Tape form of [`mix_supervision`].
pub fn mix_supervision_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    loss_a: Var,
    loss_b: Var,
    lambda_eff: f64,
) -> Var {
    let l = T::c(lambda_eff);
    let a = tape.scale(loss_a, l);
    let b = tape.scale(loss_b, T::one() - l);
    tape.add(a, b)
}

/// Elementwise interpolation of activity and location targets.
pub fn mix_labels<T: Scalar>(
    a: &SeldTargets<T>,
    b: &SeldTargets<T>,
    lambda: f64,
) -> Result<SeldTargets<T>> {
    if a.activity.shape() != b.activity.shape() || a.location.shape() != b.location.shape() {
        return Err(Error::Shape("target shapes differ".into()));
    }
    let l = T::c(lambda);
    let k = T::one() - l;
    Ok(SeldTargets {
        activity: a.activity.mapv(|v| v * l) + &b.activity.mapv(|v| v * k),
        location: a.location.mapv(|v| v * l) + &b.location.mapv(|v| v * k),
        task_mode: a.task_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn method_table_conformance() {
        use Granularity::*;
        use MixLayer::*;
        use Supervision::*;
        let expected = [
            (MixMethod::Mixup, Point, Input, Label),
            (MixMethod::LossMix, Point, Input, Loss),
            (MixMethod::ManifoldMixup, Point, Hidden, Label),
            (MixMethod::PointMix, Point, Hidden, Loss),
            (MixMethod::CutMix, Patch, Input, Label),
            (MixMethod::CutLossMix, Patch, Input, Loss),
            (MixMethod::PatchMix, Patch, Hidden, Loss),
        ];
        for (m, g, l, s) in expected {
            assert_eq!(m.attributes(), Some((g, l, s)), "{m}");
        }
        assert_eq!(MixMethod::None.attributes(), None);
    }

    #[test]
    fn method_names_round_trip() {
        for m in MixMethod::ALL {
            assert_eq!(m.as_str().parse::<MixMethod>().unwrap(), m);
        }
        assert!("specaugment".parse::<MixMethod>().is_err());
    }

    #[test]
    fn eligible_set_sizes() {
        assert_eq!(EligibleLayerSet::new(LayerLevel::Conv).len(), 19);
        assert_eq!(EligibleLayerSet::new(LayerLevel::BasicBlock).len(), 9);
        assert_eq!(EligibleLayerSet::new(LayerLevel::ResBlock).len(), 5);
        assert_eq!(
            EligibleLayerSet::new(LayerLevel::ResBlock).members,
            vec![0, 6, 10, 14, 18]
        );
    }

    #[test]
    fn patch_side_for_three_quarters() {
        assert_eq!(patch_dims(0.75, (64, 64)), (32.0, 32.0));
    }

    #[test]
    fn rejects_bad_alpha_and_empty_batch() {
        assert!(BetaParam::new(0.0).is_err());
        assert!(BetaParam::new(-1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = EligibleLayerSet::new(LayerLevel::ResBlock);
        let dims = vec![(64, 7); NUM_SITES];
        let r = sample_mix_plan(
            MixMethod::PointMix,
            BetaParam::new(1.0).unwrap(),
            &set,
            &dims,
            0,
            &mut rng,
        );
        assert!(r.is_err());
    }

    #[test]
    fn input_methods_fix_layer_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = EligibleLayerSet::new(LayerLevel::Conv);
        let dims = vec![(8, 4); NUM_SITES];
        for m in [
            MixMethod::Mixup,
            MixMethod::LossMix,
            MixMethod::CutMix,
            MixMethod::CutLossMix,
        ] {
            for _ in 0..20 {
                let p = sample_mix_plan(m, BetaParam::new(1.0).unwrap(), &set, &dims, 4, &mut rng)
                    .unwrap();
                assert_eq!(p.layer, 0);
            }
        }
    }

    #[test]
    fn point_mix_extremes() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, 4]), |i| {
            (i[0] * 100 + i[1] * 10 + i[3]) as f64
        });
        let y = x.mapv(|v| -v);
        let one = MixPlan::point(MixMethod::PointMix, 0, 1.0, (4, 3), vec![0, 1]);
        assert_eq!(apply_mix(&one, &x, &y).unwrap(), x);
        let zero = MixPlan::point(MixMethod::PointMix, 0, 0.0, (4, 3), vec![0, 1]);
        assert_eq!(apply_mix(&zero, &x, &y).unwrap(), y);
    }

    #[test]
    fn full_patch_takes_partner() {
        let x = ArrayD::from_elem(IxDyn(&[1, 3, 2, 4]), 1.0f64);
        let y = ArrayD::from_elem(IxDyn(&[1, 3, 2, 4]), 5.0f64);
        let b = PatchBox {
            f1: 0,
            f2: 4,
            c1: 0,
            c2: 3,
        };
        let plan = MixPlan::patch(MixMethod::PatchMix, 0, 0.0, (4, 3), b, vec![0]);
        assert_eq!(plan.lambda_eff, 0.0);
        assert_eq!(apply_mix(&plan, &x, &y).unwrap(), y);
    }

    #[test]
    fn supervision_midpoint() {
        let plan = MixPlan::point(MixMethod::PointMix, 0, 0.5, (1, 1), vec![0]);
        assert_eq!(mix_supervision(2.0, 4.0, &plan).unwrap(), 3.0);
        let one = MixPlan::point(MixMethod::PointMix, 0, 1.0, (1, 1), vec![0]);
        assert_eq!(mix_supervision(2.5, 4.0, &one).unwrap(), 2.5);
        assert!(mix_supervision(f64::NAN, 1.0, &one).is_err());
    }
}
