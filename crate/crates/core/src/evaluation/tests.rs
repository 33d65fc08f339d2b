use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Frame;
use crate::losses::CoverageMode;
use crate::model::ModelConfig;

fn tiny_model(k: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        num_slots: 4,
        num_prototypes: k,
        points_per_prototype: 24,
        grid_resolution: 4,
        point_width: 4,
        scene_width: 8,
        slot_width: 6,
        use_intensity: false,
        ..Default::default()
    };
    Model::new(cfg, seed).unwrap()
}

/// Two classes: flat ground (0) and posts (1), on a 6 m × 6 m area.
fn two_class_scene(seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut cls = Vec::new();
    for _ in 0..1500 {
        pts.push([rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), rng.gen_range(0.0..0.02)]);
        cls.push(0);
    }
    for c in [[1.0, 1.0], [4.5, 2.0], [2.0, 4.5]] {
        for _ in 0..200 {
            pts.push([c[0] + rng.gen_range(-0.2..0.2), c[1] + rng.gen_range(-0.2..0.2), rng.gen_range(0.0..1.2)]);
            cls.push(1);
        }
    }
    let mut s = PointCloud::from_positions(pts, Frame::Scene);
    s.class_label = Some(cls);
    s
}

#[test]
fn miou_hand_counts() {
    let gt = [0, 0, 1, 1];
    assert_eq!(miou(&gt, &gt).unwrap().miou, 100.0);
    // Everything predicted A with half the truth B: IoU_A = 2/4, IoU_B = 0.
    let r = miou(&[0, 0, 0, 0], &gt).unwrap();
    assert_eq!(r.miou, 25.0);
    assert_eq!(r.per_class, BTreeMap::from([(0, 50.0), (1, 0.0)]));
    // Unlabelled points take part in neither intersection nor union.
    let r = miou(&[0, 1, 1, 0, 0], &[0, 1, 1, -1, -1]).unwrap();
    assert_eq!(r.miou, 100.0);
    assert!(miou(&[0], &[-1]).is_err());
    assert!(miou(&[0, 1], &[0]).is_err());
}

#[test]
fn counting_error() {
    assert_eq!(count_mre(&[3, 10], &[3, 10]).unwrap(), 0.0);
    assert!((count_mre(&[11], &[10]).unwrap() - 10.0).abs() < 1e-12);
    assert!((count_mre(&[11, 5, 7], &[10, 0, 7]).unwrap() - 5.0).abs() < 1e-12);
    assert!(count_mre(&[1], &[0]).is_err());
}

#[test]
fn kmeans_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 400;
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|i| [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), if i % 2 == 0 { rng.gen_range(0.0..0.5) } else { rng.gen_range(10.0..10.5) }])
        .collect();
    let mut s = PointCloud::from_positions(pts, Frame::Scene);
    s.class_label = Some((0..n).map(|i| (i % 2) as i32).collect());
    s.intensity = Some((0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
    let elev = KmeansFeatures { intensity: false, elevation: true };
    let r = kmeans_baseline(&s, 2, elev, 3).unwrap();
    assert_eq!(r.miou.miou, 100.0);
    assert_ne!(r.cluster[0], r.cluster[1]);
    assert_eq!(r, kmeans_baseline(&s, 2, elev, 3).unwrap());

    let small = s.select(&(0..30).collect::<Vec<_>>());
    let both = KmeansFeatures { intensity: true, elevation: true };
    assert_eq!(kmeans_baseline(&small, 30, both, 1).unwrap().miou.miou, 100.0);
    assert!(kmeans_baseline(&small, 31, both, 1).is_err());
    let mut no_int = small.clone();
    no_int.intensity = None;
    assert!(kmeans_baseline(&no_int, 2, both, 1).is_err());
}

#[test]
fn kmeans_handles_duplicate_points() {
    let data = vec![1.0, 1.0, 1.0, 5.0];
    let a = kmeans(&data, 1, 3, 0).unwrap();
    assert_eq!(a.len(), 4);
    assert_ne!(a[0], a[3]);
}

#[test]
fn assignment_matches_a_brute_force_scan() {
    let scene = two_class_scene(1);
    let model = tiny_model(2, 0);
    let d = decompose(&model, &scene, 3.0).unwrap();
    assert_eq!(d.patches.len(), 4);
    for p in &d.patches {
        assert!(!p.is_empty());
        let pos: Vec<[f64; 3]> = p.indices.iter().map(|&i| p.frame.to_patch(&scene.positions[i])).collect();
        for (i, q) in pos.iter().enumerate() {
            let l = position_to_loss_space(q);
            let mut best = (f64::INFINITY, 0);
            for r in 0..p.recon.len() {
                let y = p.recon.point(r);
                let d2: f64 = (0..3).map(|a| (l[a] - y[a]).powi(2)).sum();
                if d2 < best.0 {
                    best = (d2, r);
                }
            }
            assert_eq!(p.assignment[i], best.1);
        }
        for &(s, j) in &p.recon_owner {
            assert!(within_extent(&p.slots[s].points[j]));
        }
    }
    let owners = d.point_owners();
    assert!(owners.iter().all(Option::is_some));
}

#[test]
fn prototype_votes_match_a_recount() {
    let scene = two_class_scene(2);
    let model = tiny_model(3, 1);
    let d = decompose(&model, &scene, 3.0).unwrap();
    let labels = label_prototypes(&d, &scene).unwrap();
    let gt = scene.class_label.as_ref().unwrap();
    let mut recount: BTreeMap<(usize, usize), Vec<i32>> = BTreeMap::new();
    for p in &d.patches {
        for (r, &(s, j)) in p.recon_owner.iter().enumerate() {
            let y = p.recon.point(r);
            let mut best = (f64::INFINITY, usize::MAX);
            for &i in &p.indices {
                let l = position_to_loss_space(&p.frame.to_patch(&scene.positions[i]));
                let d2: f64 = (0..3).map(|a| (l[a] - y[a]).powi(2)).sum();
                if d2 < best.0 {
                    best = (d2, i);
                }
            }
            recount.entry((p.slots[s].prototype, j)).or_default().push(gt[best.1]);
        }
    }
    for k in 0..3 {
        for j in 0..24 {
            let expected = match recount.get(&(k, j)) {
                None => -1,
                Some(v) => {
                    let zeros = v.iter().filter(|&&c| c == 0).count();
                    if zeros * 2 >= v.len() {
                        0
                    } else {
                        1
                    }
                }
            };
            assert_eq!(labels.labels[k][j], expected, "prototype {k} point {j}");
        }
    }
    let pred = semantic_segmentation(&d, &labels);
    assert_eq!(pred.len(), scene.len());
    let e = labels.mean_normalized_entropy();
    assert!((0.0..=1.0).contains(&e));
}

#[test]
fn single_class_scene_labels_everything() {
    let mut scene = two_class_scene(3);
    scene.class_label = Some(vec![4; scene.len()]);
    let model = tiny_model(2, 2);
    let d = decompose(&model, &scene, 3.0).unwrap();
    let labels = label_prototypes(&d, &scene).unwrap();
    assert!(labels.labels.iter().flatten().all(|&c| c == 4 || c == -1));
    let pred = semantic_segmentation(&d, &labels);
    assert!(pred.iter().all(|&c| c == 4));
    assert_eq!(labels.mean_normalized_entropy(), 0.0);
    scene.class_label = None;
    assert!(label_prototypes(&d, &scene).is_err());
}

fn set_bias(model: &mut Model, name: &str, idx: usize, v: f32) {
    let id = model.store.by_name(name).unwrap();
    model.store.get_mut(id).data[idx] = v;
}

#[test]
fn empty_decomposition_gives_unlabelled_points() {
    let scene = two_class_scene(4);
    let mut model = tiny_model(2, 3);
    set_bias(&mut model, "heads.proba.2.bias", 0, 30.0);
    let d = decompose(&model, &scene, 3.0).unwrap();
    assert_eq!(d.empty_patches(), d.patches.len());
    assert_eq!(d.mean_chamfer(), None);
    let labels = PrototypeLabels {
        labels: vec![vec![0; 24]; 2],
        votes: vec![vec![BTreeMap::new(); 24]; 2],
        num_classes: 2,
    };
    assert!(semantic_segmentation(&d, &labels).iter().all(|&c| c == -1));
    assert!(instance_segmentation(&d, &[0, 1]).iter().all(|&c| c == -1));
}

#[test]
fn instances_are_unique_per_tile_and_slot() {
    let scene = two_class_scene(5);
    let model = tiny_model(2, 4);
    let d = decompose(&model, &scene, 3.0).unwrap();
    let all = instance_segmentation(&d, &[0, 1]);
    assert!(all.iter().all(|&i| i >= 0));
    let owners = d.point_owners();
    for (i, o) in owners.iter().enumerate() {
        let (p, s, _) = o.unwrap();
        assert_eq!(all[i], (p * 4 + d.patches[p].slots[s].slot) as i64);
    }
    let none = instance_segmentation(&d, &[]);
    assert!(none.iter().all(|&i| i == -1));
    let counts = instance_counts(&d);
    let distinct: std::collections::BTreeSet<i64> = all.iter().copied().collect();
    assert_eq!(counts.values().sum::<usize>(), distinct.len());
    assert_eq!(instance_centroids(&scene, &all).len(), distinct.len());
}

#[test]
fn selection_follows_the_greedy_rule() {
    let scene = two_class_scene(6);
    let mut model = tiny_model(3, 5);
    // Prototype 2 is never chosen.
    set_bias(&mut model, "heads.proba.2.bias", 3, -1e30);
    let before = grid_reconstruction_loss(&model, &scene, 3.0, CoverageMode::Exact).unwrap();
    let increase = |mask: Vec<bool>| {
        let mut m = model.clone();
        m.masked = mask;
        (grid_reconstruction_loss(&m, &scene, 3.0, CoverageMode::Exact).unwrap() - before) / before
    };
    let inc = [increase(vec![true, false, false]), increase(vec![false, true, false]), increase(vec![false, false, true])];
    assert!(inc[2].abs() < 1e-9, "masking a dead prototype changed the loss by {}", inc[2]);
    let r = select_prototypes(&model, &scene, 3.0, CoverageMode::Exact, 0.05, SelectionBaseline::Current).unwrap();
    assert!((r.initial_loss - before).abs() < 1e-12);
    let mut first = 0;
    for k in 1..3 {
        if inc[k] < inc[first] {
            first = k;
        }
    }
    if inc[first] < 0.05 {
        assert_eq!(r.steps[0].removed, first);
        assert!((r.steps[0].increase - inc[first]).abs() < 1e-12);
    } else {
        assert!(r.steps.is_empty());
    }
    assert!(r.steps.iter().all(|s| s.increase < 0.05));
    assert_eq!(r.mask(3).iter().filter(|&&m| !m).count(), r.kept.len());
    assert_eq!(r.kept.len() + r.steps.len(), 3);
}

#[test]
fn dead_prototype_goes_first_when_the_others_matter() {
    let scene = two_class_scene(6);
    let mut model = tiny_model(3, 5);
    set_bias(&mut model, "heads.proba.2.bias", 3, -1e30);
    // Slots always active, so masking a live prototype moves its mass to
    // the other live one; a huge base scale makes prototype 1 useless.
    set_bias(&mut model, "heads.proba.2.bias", 0, -30.0);
    let id = model.store.by_name("prototypes.base_scale").unwrap();
    model.store.get_mut(id).data[1] = 3.0;
    model.stage = crate::training::CurriculumStage::new(3).unwrap();
    let r = select_prototypes(&model, &scene, 3.0, CoverageMode::Exact, 0.05, SelectionBaseline::Current).unwrap();
    assert_eq!(r.steps[0].removed, 2);
    assert!(r.steps[0].increase.abs() < 1e-9);
}

#[test]
fn single_prototype_has_nothing_to_remove() {
    let scene = two_class_scene(7);
    let model = tiny_model(1, 6);
    let r = select_prototypes(&model, &scene, 3.0, CoverageMode::Exact, 0.05, SelectionBaseline::Current).unwrap();
    assert!(r.steps.is_empty());
    assert_eq!(r.kept, vec![0]);
}

#[test]
fn evaluation_report_fields() {
    let scene = two_class_scene(8);
    let model = tiny_model(2, 7);
    let d = decompose(&model, &scene, 3.0).unwrap();
    let (r, labels) = evaluate(&d, &scene).unwrap();
    assert!(labels.is_some());
    let m = r.miou.unwrap();
    assert!((0.0..=100.0).contains(&m));
    assert!(r.chamfer_sym.unwrap() > 0.0);
    let json = serde_json::to_value(&r).unwrap();
    for key in ["chamfer_sym", "miou", "per_class_iou", "instance_counts", "selection_report"] {
        assert!(json.get(key).is_some());
    }
}
