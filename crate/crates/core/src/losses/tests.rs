use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{chamfer_asym, AffineTransform, Frame};
use crate::model::SlotParams;

fn patch(rng: &mut impl Rng, n: usize, intensity: bool) -> PointCloud {
    let mut p = PointCloud::from_positions(
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..0.0)])
            .collect(),
        Frame::PatchNormalized,
    );
    if intensity {
        p.intensity = Some((0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
    }
    p
}

fn random_transform(rng: &mut impl Rng) -> AffineTransform {
    AffineTransform {
        scale: [rng.gen_range(0.6..1.8), rng.gen_range(0.6..1.8), rng.gen_range(0.6..1.8)],
        tilt_y: rng.gen_range(-0.3..0.3),
        rot_z: rng.gen_range(-3.0..3.0),
        translation: [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.5..0.5)],
        linear: None,
    }
}

fn candidates(rng: &mut impl Rng, s: usize, k: usize, p: usize, intensity: bool) -> CandidateSet {
    let slots = (0..s)
        .map(|_| {
            let logits = (0..=k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            SlotParams::from_logits(logits, random_transform(rng))
        })
        .collect();
    let protos = (0..k)
        .map(|_| (0..p).map(|_| [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)]).collect())
        .collect();
    let int = intensity.then(|| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect());
    CandidateSet::new(slots, protos, int).unwrap()
}

fn with_logits(c: &CandidateSet, s: usize, logits: Vec<f64>) -> CandidateSet {
    let mut slots = c.slots.clone();
    slots[s] = SlotParams::from_logits(logits, slots[s].transform);
    CandidateSet::new(slots, c.prototypes.clone(), c.intensity.clone()).unwrap()
}

#[test]
fn exact_coverage_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let (s, k) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let (n, with_int, p) = (rng.gen_range(1..=16), rng.gen_bool(0.5), rng.gen_range(1..=8));
        let x = patch(&mut rng, n, with_int);
        let c = candidates(&mut rng, s, k, p, with_int);
        let closed = loss_cov(&c, &x, CoverageMode::Exact).unwrap();
        let oracle = loss_cov_oracle(&c, &x, OracleMode::Enumerate).unwrap().value;
        assert!((closed - oracle).abs() <= 1e-9 * oracle.abs().max(1e-12), "{closed} vs {oracle}");
    }
}

#[test]
fn slot_sorted_agrees_for_single_prototypes_and_bounds_otherwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let s = rng.gen_range(1..=4);
        let x = patch(&mut rng, 10, false);
        let one = candidates(&mut rng, s, 1, 6, false);
        let a = loss_cov(&one, &x, CoverageMode::Exact).unwrap();
        let b = loss_cov(&one, &x, CoverageMode::SlotSorted).unwrap();
        assert!((a - b).abs() < 1e-12);
        let many = candidates(&mut rng, s, 3, 6, false);
        let a = loss_cov(&many, &x, CoverageMode::Exact).unwrap();
        let b = loss_cov(&many, &x, CoverageMode::SlotSorted).unwrap();
        assert!(b >= a - 1e-12);
    }
}

#[test]
fn worked_counterexample_for_the_slot_sorted_form() {
    // Two certain slots with two equally likely prototypes each: slot 0 at
    // squared distance 0 or 10, slot 1 at 4 either way.
    let x = PointCloud::from_positions(vec![[-1.0, -1.0, -1.0]], Frame::PatchNormalized);
    let at = |d2: f64| {
        let r = 2.0 * d2.sqrt();
        vec![[-1.0 + r, -1.0, -1.0]]
    };
    let slots = vec![SlotParams::from_logits(vec![-60.0, 0.0, 0.0], AffineTransform::identity()); 2];
    let mut c = CandidateSet::new(slots, vec![at(0.0), at(10.0)], None).unwrap();
    c.positions = vec![at(0.0), at(10.0), at(4.0), at(4.0)];
    let exact = loss_cov(&c, &x, CoverageMode::Exact).unwrap();
    let sorted = loss_cov(&c, &x, CoverageMode::SlotSorted).unwrap();
    assert!((exact - 2.0).abs() < 1e-9, "{exact}");
    assert!((sorted - 4.0).abs() < 1e-9, "{sorted}");
}

#[test]
fn monte_carlo_agrees_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = patch(&mut rng, 12, true);
    let c = candidates(&mut rng, 3, 2, 6, true);
    let est = loss_cov_oracle(&c, &x, OracleMode::MonteCarlo { samples: 20_000, seed: 5 }).unwrap();
    let closed = loss_cov(&c, &x, CoverageMode::Exact).unwrap();
    assert!((est.value - closed).abs() < 3.0 * est.std_error, "{est:?} vs {closed}");
}

#[test]
fn enumeration_refuses_large_slot_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = patch(&mut rng, 4, false);
    let c = candidates(&mut rng, 7, 1, 2, false);
    assert!(loss_cov_oracle(&c, &x, OracleMode::Enumerate).is_err());
}

#[test]
fn inactive_model_costs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = patch(&mut rng, 10, false);
    let mut c = candidates(&mut rng, 3, 2, 5, false);
    for s in 0..3 {
        let mut slot = SlotParams::from_logits(vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY], c.slots[s].transform);
        slot.transform.translation = [0.1, 0.2, 0.0];
        c.slots[s] = slot;
    }
    assert_eq!(loss_acc(&c, &x).unwrap(), 0.0);
    for mode in [CoverageMode::Exact, CoverageMode::SlotSorted] {
        assert_eq!(loss_cov(&c, &x, mode).unwrap(), 0.0);
    }
    let r = total_loss(&[c], &[x], &LossWeights::default()).unwrap();
    assert_eq!(r.total, 0.0);
}

#[test]
fn perfect_single_slot_reconstruction_is_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = patch(&mut rng, 9, false);
    let slots = vec![SlotParams::from_logits(vec![f64::NEG_INFINITY, 0.0], AffineTransform::identity())];
    let c = CandidateSet::new(slots, vec![x.positions.clone()], None).unwrap();
    assert_eq!(c.slots[0].alpha, 1.0);
    assert_eq!(loss_acc(&c, &x).unwrap(), 0.0);
    assert_eq!(loss_cov(&c, &x, CoverageMode::Exact).unwrap(), 0.0);
}

#[test]
fn certain_single_prototype_slots_reduce_to_chamfer() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = patch(&mut rng, 14, false);
    let mut c = candidates(&mut rng, 3, 1, 7, false);
    for s in 0..3 {
        c.slots[s] = SlotParams::from_logits(vec![f64::NEG_INFINITY, 0.0], c.slots[s].transform);
    }
    let union: Vec<[f64; 3]> = c.positions.iter().flatten().copied().collect();
    let y = PointCloud::from_positions(union, Frame::PatchNormalized);
    let expected = chamfer_asym(&to_loss_space(&x).unwrap(), &to_loss_space(&y).unwrap()).unwrap();
    for mode in [CoverageMode::Exact, CoverageMode::SlotSorted] {
        assert!((loss_cov(&c, &x, mode).unwrap() - expected).abs() < 1e-12);
    }
}

// An empty activation costs nothing, so extra activation can raise the
// loss while that event has mass (with one slot the loss is α·Δ). With one
// certain slot the empty event is impossible and more options only help.
#[test]
fn more_activation_never_hurts_coverage_once_some_slot_is_certain() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..30 {
        let x = patch(&mut rng, 8, false);
        let c = candidates(&mut rng, 3, 2, 5, false);
        let s = rng.gen_range(0..3);
        let mut certain = c.slots[(s + 1) % 3].logits.clone();
        certain[0] = f64::NEG_INFINITY;
        let c = with_logits(&c, (s + 1) % 3, certain);
        let mut logits = c.slots[s].logits.clone();
        logits[0] -= rng.gen_range(0.1..2.0);
        let more = with_logits(&c, s, logits);
        assert!(more.slots[s].alpha > c.slots[s].alpha);
        for mode in [CoverageMode::Exact, CoverageMode::SlotSorted] {
            let (a, b) = (loss_cov(&more, &x, mode).unwrap(), loss_cov(&c, &x, mode).unwrap());
            assert!(a <= b + 1e-12, "{mode:?}: {a} > {b}");
        }
    }
}

#[test]
fn a_lone_slot_pays_for_activation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = patch(&mut rng, 8, false);
    let c = candidates(&mut rng, 1, 1, 5, false);
    let more = with_logits(&c, 0, vec![c.slots[0].logits[0] - 1.0, c.slots[0].logits[1]]);
    assert!(loss_cov(&more, &x, CoverageMode::Exact).unwrap() > loss_cov(&c, &x, CoverageMode::Exact).unwrap());
}

#[test]
fn clipped_candidates_outside_the_patch_are_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = patch(&mut rng, 8, false);
    let mut c = candidates(&mut rng, 2, 1, 4, false);
    c.positions[0] = vec![[5.0, 0.0, 0.0]; 4];
    let only_second = {
        let mut d = c.clone();
        d.slots[0] = SlotParams::from_logits(vec![0.0, f64::NEG_INFINITY], d.slots[0].transform);
        loss_acc(&d, &x).unwrap()
    };
    assert!((loss_acc(&c, &x).unwrap() - only_second).abs() < 1e-15);
}

#[test]
fn regularizer_examples() {
    let slot = |alpha: f64, beta: Vec<f64>| SlotParams {
        logits: vec![],
        alpha,
        beta,
        transform: AffineTransform::identity(),
    };
    let b = vec![vec![slot(0.2, vec![0.2]), slot(0.8, vec![0.8])], vec![slot(0.4, vec![0.4]), slot(0.6, vec![0.6])]];
    assert!((loss_act(&b) - 1.0).abs() < 1e-12);
    let uniform = vec![vec![slot(0.5, vec![0.5]); 4]];
    assert!((loss_slot(&uniform, 0.1) + 0.4).abs() < 1e-12);
    assert!((loss_slot(&uniform, 0.5) + 1.0).abs() < 1e-12);
    let dead = vec![vec![slot(0.5, vec![0.5]), slot(0.0, vec![0.0])]];
    assert!((loss_slot(&dead, 0.1) + 0.1).abs() < 1e-12);
    assert!((loss_proto(&uniform, 0.1) + 0.1).abs() < 1e-12);
    let off = vec![vec![slot(0.0, vec![0.0]); 3]];
    assert_eq!(loss_slot(&off, 0.1), 0.0);
    assert_eq!(loss_proto(&off, 0.1), 0.0);
    let t = |v: [f64; 3]| {
        let mut s = slot(0.0, vec![0.0]);
        s.transform.translation = v;
        s
    };
    assert_eq!(loss_translate_reg(&[t([0.5, -0.3, 7.0])]), 0.0);
    assert!((loss_translate_reg(&[t([1.5, 0.0, 0.0])]) - 0.25).abs() < 1e-12);
    assert!((loss_translate_reg(&[t([2.0, -2.0, 1.0])]) - 2.0).abs() < 1e-12);
}

#[test]
fn total_is_the_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let xs: Vec<PointCloud> = (0..3).map(|_| patch(&mut rng, 10, true)).collect();
    let cs: Vec<CandidateSet> = (0..3).map(|_| candidates(&mut rng, 3, 2, 6, true)).collect();
    let w = LossWeights::default();
    let r = total_loss(&cs, &xs, &w).unwrap();
    let sum = r.acc + r.cov + w.lambda_act * r.act + w.lambda_slot * r.slot + w.lambda_proto * r.proto + w.lambda_translate * r.translate_reg;
    assert!((r.total - sum).abs() < 1e-12);
    let r0 = total_loss(&cs, &xs, &LossWeights::reconstruction_only()).unwrap();
    assert!((r0.total - r0.acc - r0.cov).abs() < 1e-15);
}

/// Central differences of the total loss with respect to logits, prototype
/// points, intensities and every transform parameter.
fn check_total_gradient(mode: CoverageMode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<PointCloud> = (0..2).map(|_| patch(&mut rng, 10, true)).collect();
    let mut cs: Vec<CandidateSet> = (0..2).map(|_| candidates(&mut rng, 3, 2, 5, true)).collect();
    cs[1].slots[0].transform.translation[0] = 1.3;
    cs[1] = CandidateSet::new(cs[1].slots.clone(), cs[1].prototypes.clone(), cs[1].intensity.clone()).unwrap();
    let w = LossWeights {
        coverage: mode,
        epsilon_s: 0.4,
        epsilon_k: 0.6,
        lambda_act: 0.3,
        ..Default::default()
    };
    let (_, grads) = total_loss_backward(&cs, &xs, &w).unwrap();
    let back: Vec<_> = cs.iter().zip(&grads).map(|(c, g)| c.backward(g)).collect();
    let eval = |cs: &[CandidateSet]| total_loss(cs, &xs, &w).unwrap().total;
    let rebuild = |c: &CandidateSet| CandidateSet::new(c.slots.clone(), c.prototypes.clone(), c.intensity.clone()).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut check = |an: f64, f: &dyn Fn(&mut CandidateSet, f64)| {
        let mut p = cs.clone();
        let mut m = cs.clone();
        f(&mut p[0], h);
        f(&mut m[0], -h);
        let p: Vec<_> = p.iter().map(rebuild).collect();
        let m: Vec<_> = m.iter().map(rebuild).collect();
        let fd = (eval(&p) - eval(&m)) / (2.0 * h);
        worst = worst.max((fd - an).abs() / fd.abs().max(1e-3));
    };
    for s in 0..3 {
        for l in 0..3 {
            check(back[0].logits[s][l], &|c, d| {
                let mut z = c.slots[s].logits.clone();
                z[l] += d;
                c.slots[s] = SlotParams::from_logits(z, c.slots[s].transform);
            });
        }
        let tg = back[0].transforms[s];
        check(tg.rot_z, &|c, d| c.slots[s].transform.rot_z += d);
        check(tg.tilt_y, &|c, d| c.slots[s].transform.tilt_y += d);
        for a in 0..3 {
            check(tg.translation[a], &|c, d| c.slots[s].transform.translation[a] += d);
            check(tg.scale[a], &|c, d| c.slots[s].transform.scale[a] += d);
        }
    }
    for k in 0..2 {
        check(back[0].intensity[k], &|c, d| c.intensity.as_mut().unwrap()[k] += d);
        for j in 0..5 {
            for a in 0..3 {
                check(back[0].prototypes[k][j][a], &|c, d| c.prototypes[k][j][a] += d);
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn exact_mode_gradients_match_finite_differences() {
    check_total_gradient(CoverageMode::Exact, 21);
}

#[test]
fn slot_sorted_gradients_match_finite_differences() {
    check_total_gradient(CoverageMode::SlotSorted, 22);
}
