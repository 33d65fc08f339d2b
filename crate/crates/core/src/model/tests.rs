use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Frame;
use crate::losses::{total_loss, total_loss_backward, LossWeights};

fn tiny() -> ModelConfig {
    ModelConfig {
        num_slots: 3,
        num_prototypes: 2,
        points_per_prototype: 12,
        grid_resolution: 4,
        point_width: 4,
        scene_width: 8,
        slot_width: 6,
        ..Default::default()
    }
}

fn patch(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..-0.4)])
        .collect();
    let mut x = PointCloud::from_positions(pts, Frame::PatchNormalized);
    x.intensity = Some((0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
    x
}

fn stage(i: u8) -> CurriculumStage {
    CurriculumStage::new(i).unwrap()
}

#[test]
fn fresh_model_starts_at_the_identity() {
    let model = Model::new(tiny(), 0).unwrap();
    let (c, _) = model.forward(&patch(1, 50)).unwrap();
    let bank = model.prototype_bank();
    assert_eq!(c.positions.len(), 6);
    for s in 0..3 {
        let slot = &c.slots[s];
        assert_eq!(slot.transform, AffineTransform::identity());
        assert!((slot.alpha - 2.0 / 3.0).abs() < 1e-15);
        for k in 0..2 {
            assert_eq!(c.candidate(s, k), &bank.points[k][..]);
        }
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    for bad in [
        ModelConfig { num_slots: 0, ..tiny() },
        ModelConfig { grid_resolution: 48, ..tiny() },
        ModelConfig { voxel_size: Some(-1.0), ..tiny() },
        ModelConfig { init_half_extent: [0.3, 0.1], ..tiny() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let text = toml::to_string(&tiny()).unwrap();
    assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), tiny());
}

#[test]
fn base_scale_doubles_candidate_extent() {
    let mut model = Model::new(tiny(), 2).unwrap();
    model.stage = stage(3);
    let x = patch(3, 40);
    let before = model.reconstruct(&x).unwrap();
    let id = model.store.by_name("prototypes.base_scale").unwrap();
    model.store.get_mut(id).data[1] = 2f32.ln();
    let after = model.reconstruct(&x).unwrap();
    // Prototype scales are applied about the canonical origin, then the
    // (unchanged) slot transform moves the result.
    let t = after.slots[0].transform;
    for (p, q) in before.prototypes[1].iter().zip(&after.prototypes[1]) {
        for a in 0..3 {
            assert!((q[a] - 2.0 * p[a]).abs() < 1e-6);
        }
    }
    for (j, q) in after.candidate(0, 1).iter().enumerate() {
        let expected = t.apply_point(&after.prototypes[1][j]);
        assert_eq!(*q, expected);
    }
    assert_eq!(before.candidate(0, 0), after.candidate(0, 0));
}

#[test]
fn active_slot_selection() {
    let mk = |logits: Vec<f64>| SlotParams::from_logits(logits, AffineTransform::identity());
    // α = 0.9 with β = (0.2, 0.5, 0.2), and α = 0.3.
    let first = mk(vec![0.1f64.ln(), 0.2f64.ln(), 0.5f64.ln(), 0.2f64.ln()]);
    let second = mk(vec![0.7f64.ln(), 0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()]);
    assert!((first.alpha - 0.9).abs() < 1e-12);
    let protos = vec![vec![[0.0; 3]], vec![[0.1; 3]], vec![[0.2; 3]]];
    let c = CandidateSet::new(vec![first, second], protos, None).unwrap();
    let d = select_active(&c);
    assert_eq!(d.slots.len(), 1);
    assert_eq!((d.slots[0].slot, d.slots[0].prototype), (0, 1));
    assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    assert_eq!(argmax(&[0.4, 1.0, 0.4]), argmax(&[0.8, 2.0, 0.8]));
    // α exactly 0.5 is inactive.
    let half = mk(vec![0.0, 0.0]);
    let c = CandidateSet::new(vec![half], vec![vec![[0.0; 3]]], None).unwrap();
    assert!(select_active(&c).is_empty());
}

#[test]
fn masking_removes_the_prototype_from_every_slot() {
    let mut model = Model::new(tiny(), 4).unwrap();
    model.masked = vec![true, false];
    let c = model.reconstruct(&patch(5, 30)).unwrap();
    for s in &c.slots {
        assert_eq!(s.beta[0], 0.0);
        assert!((s.alpha - 0.5).abs() < 1e-12);
    }
}

#[test]
fn probabilities_stay_coherent_after_perturbation() {
    let mut model = Model::new(tiny(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let id = model.store.by_name("heads.proba.2.weight").unwrap();
    for v in model.store.get_mut(id).data.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    let c = model.reconstruct(&patch(8, 30)).unwrap();
    for s in &c.slots {
        let total: f64 = s.beta.iter().sum();
        assert!((total - s.alpha).abs() < 1e-6);
        assert!(s.beta.iter().all(|&b| b >= 0.0) && s.alpha <= 1.0);
    }
}

/// Randomises the output layers so that no head sits at its zero start.
/// Translations stay small: candidates crossing the clip boundary make the
/// accuracy term jump.
fn perturbed(config: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = model.store.get_mut(id);
        if p.name.ends_with(".2.weight") || p.name.ends_with(".2.bias") {
            let r = if p.name.starts_with("heads.translate") { 0.03 } else { 0.3 };
            for v in p.data.iter_mut() {
                *v = rng.gen_range(-r..r);
            }
        }
        if p.name == "prototypes.base_scale" || p.name == "prototypes.aniso_scale" {
            for v in p.data.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    model
}

#[test]
fn network_gradients_match_finite_differences() {
    let x = vec![patch(11, 40), patch(12, 25)];
    let w = LossWeights::default();
    for st in [1, 3, 5] {
        let mut model = perturbed(tiny(), 20 + st as u64);
        model.stage = stage(st);
        let loss = |m: &Model| -> f64 {
            let c: Vec<CandidateSet> = x.iter().map(|p| m.reconstruct(p).unwrap()).collect();
            total_loss(&c, &x, &w).unwrap().total
        };
        let mut grads = model.store.zero_grads();
        let fwd: Vec<_> = x.iter().map(|p| model.forward(p).unwrap()).collect();
        let cands: Vec<CandidateSet> = fwd.iter().map(|(c, _)| c.clone()).collect();
        let (_, cg) = total_loss_backward(&cands, &x, &w).unwrap();
        for ((c, cache), g) in fwd.iter().zip(&cg) {
            model.backward(c, cache, g, &mut grads);
        }
        let names = [
            "prototypes.points",
            "prototypes.intensity",
            "prototypes.base_scale",
            "prototypes.aniso_scale",
            "heads.translate.2.weight",
            "heads.proba.2.bias",
            "heads.rot_z.0.linear.weight",
            "heads.rot_z.2.weight",
            "heads.rot_y.2.weight",
            "heads.rot_y.0.linear.weight",
            "heads.scale.2.weight",
            "slots.weight",
            "slots.norm.gamma",
            "encoder.scene.0.conv.weight",
            "encoder.point.linear.weight",
        ];
        // Directional derivative along each tensor's own gradient: the
        // signal is large enough for single-precision differences.
        for name in names {
            let id = model.store.by_name(name).unwrap_or_else(|| panic!("{name}"));
            let g: Vec<f64> = grads.get(id).iter().map(|&v| v as f64).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if name.starts_with("heads.scale") && !model.stage.scales_active() {
                assert_eq!(norm, 0.0, "scale head is gated off before stage 3");
                continue;
            }
            assert!(norm > 0.0, "stage {st} {name}: zero gradient");
            let orig = model.store.get(id).data.clone();
            let h = 1e-3;
            let shifted = |sign: f64| -> Vec<f32> {
                orig.iter().zip(&g).map(|(o, d)| (*o as f64 + sign * h * d / norm) as f32).collect()
            };
            let f0 = loss(&model);
            model.store.get_mut(id).data = shifted(1.0);
            let fp = loss(&model);
            model.store.get_mut(id).data = shifted(-1.0);
            let fm = loss(&model);
            model.store.get_mut(id).data = orig;
            // Nearest-neighbour switches make the loss piecewise smooth; near
            // a switch the analytic value is one of the one-sided slopes.
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            let central = 0.5 * (fwd + bwd);
            let tol = 2e-2 * norm + 1e-4;
            let bracketed = norm >= fwd.min(bwd) - tol && norm <= fwd.max(bwd) + tol;
            assert!(
                (central - norm).abs() < tol || bracketed,
                "stage {st} {name}: analytic {norm}, one-sided {fwd} / {bwd}"
            );
        }
    }
}

