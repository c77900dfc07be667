//! Property tests for the mixing, feature, visual, distillation and metric invariants.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seld_core::autodiff::Tape;
use seld_core::distill::{hcl_loss, rkd_loss, RkdWeights, SppConfig};
use seld_core::features::{intensity_vectors, stft, FoaWaveform, MelFilterbank, WINDOW_LEN};
use seld_core::metrics::{evaluate_2023, evaluate_2024, Averaging, EventGrid};
use seld_core::mixaug::{
    apply_mix, mix_supervision, patch_box, patch_dims, sample_mix_plan, BetaParam,
    EligibleLayerSet, LayerLevel, MixMethod, MixPlan,
};
use seld_core::visual::{gaussian_vectors, Keypoint, MouthKeypoints, MAX_SPEAKERS};

fn array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-2.0..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn point_mix_is_convex_combination(lambda in 0.0..=1.0f64, seed in any::<u64>(), b in 1usize..4, c in 1usize..5) {
        let shape = [b, c, 3, 4];
        let (x, p) = (array(&shape, seed), array(&shape, seed ^ 1));
        let plan = MixPlan::point(MixMethod::PointMix, 6, lambda, (4, c), (0..b).collect());
        let mixed = apply_mix(&plan, &x, &p).unwrap();
        for ((m, a), q) in mixed.iter().zip(x.iter()).zip(p.iter()) {
            prop_assert!((m - (lambda * a + (1.0 - lambda) * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_partner_fraction_is_one_minus_lambda_eff(
        lambda in 0.0..=1.0f64,
        f in 1usize..40,
        c in 1usize..20,
        uf in 0.0..1.0f64,
        uc in 0.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let dims = (f, c);
        let bx = patch_box(lambda, dims, (uf * f as f64, uc * c as f64));
        let plan = MixPlan::patch(MixMethod::PatchMix, 6, lambda, dims, bx, vec![0]);
        prop_assert!((0.0..=1.0).contains(&plan.lambda_eff));
        let shape = [1, c, 2, f];
        let x = array(&shape, seed).mapv(|v| v.abs() + 1.0);
        let p = ArrayD::zeros(IxDyn(&shape));
        let mixed = apply_mix(&plan, &x, &p).unwrap();
        let partner_cells = mixed.iter().filter(|&&v| v == 0.0).count();
        let frac = partner_cells as f64 / mixed.len() as f64;
        prop_assert!((frac - (1.0 - plan.lambda_eff)).abs() < 1e-12);
    }

    #[test]
    fn unclipped_patch_area_is_close_to_requested(lambda in 0.0..=1.0f64, f in 4usize..64, c in 4usize..64) {
        let dims = (f, c);
        let (rf, rc) = patch_dims(lambda, dims);
        // the centre of the map never clips
        let bx = patch_box(lambda, dims, (f as f64 / 2.0, c as f64 / 2.0));
        let want = (1.0 - lambda) * (f * c) as f64;
        prop_assert!((bx.area() as f64 - want).abs() <= rf + rc + 1.0);
    }

    #[test]
    fn loss_mixing_is_linear(a in 0.0..10.0f64, b in 0.0..10.0f64, lambda in 0.0..=1.0f64) {
        let plan = MixPlan::point(MixMethod::LossMix, 0, lambda, (4, 7), vec![0]);
        let l = mix_supervision(a, b, &plan).unwrap();
        prop_assert!((l - (lambda * a + (1.0 - lambda) * b)).abs() < 1e-12);
        prop_assert!(l >= a.min(b) - 1e-12 && l <= a.max(b) + 1e-12);
    }

    #[test]
    fn intensity_is_scale_invariant(scale in 1e-3..1e3f64, seed in any::<u64>()) {
        let n = 4800;
        let samples = array(&[4, n], seed).into_dimensionality().unwrap();
        let scaled: Array2<f64> = samples.mapv(|v| v * scale);
        let fb = MelFilterbank::<f64>::new(24000, WINDOW_LEN, 64).unwrap();
        let a = FoaWaveform::new(samples, 24000).unwrap();
        let b = FoaWaveform::new(scaled, 24000).unwrap();
        let ia = intensity_vectors(&stft(&a, WINDOW_LEN, a.hop()).unwrap(), &fb).unwrap();
        let ib = intensity_vectors(&stft(&b, WINDOW_LEN, b.hop()).unwrap(), &fb).unwrap();
        for (x, y) in ia.iter().zip(ib.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn swapping_speakers_swaps_channel_pairs(
        s1 in 0usize..MAX_SPEAKERS,
        s2 in 0usize..MAX_SPEAKERS,
        pts in proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, any::<bool>()), MAX_SPEAKERS * 4),
    ) {
        let frames = 4;
        let entries = |swap: bool| -> Vec<Keypoint> {
            pts.iter().enumerate().filter(|(_, p)| p.2).map(|(i, &(u, v, _))| {
                let mut s = i % MAX_SPEAKERS;
                if swap {
                    s = if s == s1 { s2 } else if s == s2 { s1 } else { s };
                }
                Keypoint { frame_idx: i / MAX_SPEAKERS, speaker_idx: s, u, v }
            }).collect()
        };
        let a: Array3<f64> = gaussian_vectors(&MouthKeypoints::new(entries(false)).unwrap(), frames);
        let b: Array3<f64> = gaussian_vectors(&MouthKeypoints::new(entries(true)).unwrap(), frames);
        let map = |s: usize| if s == s1 { s2 } else if s == s2 { s1 } else { s };
        for ((t, i, ch), &v) in a.indexed_iter() {
            let moved = 2 * map(ch / 2) + ch % 2;
            prop_assert_eq!(v, b[[t, i, moved]]);
        }
    }

    #[test]
    fn distillation_losses_are_non_negative(seed in any::<u64>()) {
        let mut t = Tape::<f64>::new();
        let prob = |s: u64| array(&[2, 3, 4], s).mapv(|v| 1.0 / (1.0 + (-3.0 * v).exp()));
        let ta = t.constant(prob(seed));
        let sa = t.constant(prob(seed ^ 7));
        let tl = t.constant(array(&[2, 3, 12], seed ^ 3));
        let sl = t.constant(array(&[2, 3, 12], seed ^ 5));
        let r = rkd_loss(&mut t, ta, tl, sa, sl, &RkdWeights::default()).unwrap();
        prop_assert!(t.value(r).iter().all(|&v| v >= 0.0));
        let teach: Vec<_> = (0..3).map(|j| t.constant(array(&[2, 2, 8, 8], seed + j))).collect();
        let fused: Vec<_> = (0..3).map(|j| t.constant(array(&[2, 2, 8, 8], seed + 100 + j))).collect();
        let h = hcl_loss(&mut t, &teach, &fused, &SppConfig::default()).unwrap();
        prop_assert!(t.value(h).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn metrics_ignore_class_order(seed in any::<u64>(), rot in 1usize..3) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (frames, classes) = (25, 3);
        let mut grid = || {
            let mut g = EventGrid::empty(frames, classes, true);
            for l in 0..frames {
                for n in 0..classes {
                    if rng.gen_bool(0.4) {
                        g.activity[[l, n]] = true;
                        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0f64)];
                        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        for k in 0..3 {
                            g.doa[[l, n, k]] = v[k] / norm;
                        }
                        g.distance.as_mut().unwrap()[[l, n]] = rng.gen_range(0.5..4.0);
                    }
                }
            }
            g
        };
        let (p, r) = (grid(), grid());
        let permute = |g: &EventGrid| {
            let mut out = EventGrid::empty(frames, classes, true);
            for l in 0..frames {
                for n in 0..classes {
                    let m = (n + rot) % classes;
                    out.activity[[l, m]] = g.activity[[l, n]];
                    for k in 0..3 {
                        out.doa[[l, m, k]] = g.doa[[l, n, k]];
                    }
                    out.distance.as_mut().unwrap()[[l, m]] = g.distance.as_ref().unwrap()[[l, n]];
                }
            }
            out
        };
        let (pp, rp) = (permute(&p), permute(&r));
        for avg in [Averaging::Micro, Averaging::Macro] {
            let (a, b) = (evaluate_2023(&p, &r, avg).unwrap(), evaluate_2023(&pp, &rp, avg).unwrap());
            prop_assert!((a.score - b.score).abs() < 1e-12 && (a.er - b.er).abs() < 1e-12 && (a.f - b.f).abs() < 1e-12);
            let (a, b) = (evaluate_2024(&p, &r, avg).unwrap(), evaluate_2024(&pp, &rp, avg).unwrap());
            prop_assert!((a.score - b.score).abs() < 1e-12 && (a.f1 - b.f1).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_beta_draws_pass_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let layers = EligibleLayerSet::new(LayerLevel::ResBlock);
    let dims = vec![(64, 7); 19];
    let n = 10_000;
    let mut draws: Vec<f64> = (0..n)
        .map(|_| {
            sample_mix_plan(
                MixMethod::Mixup,
                BetaParam::new(1.0).unwrap(),
                &layers,
                &dims,
                4,
                &mut rng,
            )
            .unwrap()
            .lambda
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            ((i + 1) as f64 / n as f64 - x)
                .abs()
                .max((x - i as f64 / n as f64).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.03, "KS statistic {ks}");
}

#[test]
fn sampled_plans_respect_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = EligibleLayerSet::new(LayerLevel::ResBlock);
    let dims: Vec<(usize, usize)> = (0..19).map(|d| (64 >> (d / 5).min(3), 7 + d)).collect();
    for method in [
        MixMethod::CutMix,
        MixMethod::PatchMix,
        MixMethod::PointMix,
        MixMethod::ManifoldMixup,
    ] {
        for _ in 0..500 {
            let plan = sample_mix_plan(
                method,
                BetaParam::new(0.4).unwrap(),
                &layers,
                &dims,
                6,
                &mut rng,
            )
            .unwrap();
            assert!((0.0..=1.0).contains(&plan.lambda) && (0.0..=1.0).contains(&plan.lambda_eff));
            let mut sorted = plan.pairing.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..6).collect::<Vec<_>>());
            match plan.patch_box {
                Some(b) => {
                    assert!(b.f2 <= plan.dims.0 && b.c2 <= plan.dims.1);
                    assert_eq!(
                        plan.lambda_eff,
                        1.0 - b.area() as f64 / (plan.dims.0 * plan.dims.1) as f64
                    );
                }
                None => assert_eq!(plan.lambda_eff, plan.lambda),
            }
            if method.layer() == Some(seld_core::mixaug::MixLayer::Hidden) {
                assert!(layers.contains(plan.layer));
            } else {
                assert_eq!(plan.layer, 0);
            }
        }
    }
}
