use std::collections::{BTreeMap, BTreeSet};

use protoscene::evaluation::{decompose, evaluate, reference_chamfer};
use protoscene::geometry::{Frame, PointCloud};
use protoscene::io::*;
use protoscene::model::{Model, ModelConfig};
use protoscene::Error;

fn sample_cloud() -> PointCloud {
    let pts = vec![[0.1, -2.5, 3.0], [1e-17, 123456.789, -0.333333333333], [std::f64::consts::PI, 2.0, 1.0]];
    let mut c = PointCloud::from_positions(pts, Frame::Scene);
    c.intensity = Some(vec![0.0, 0.123456789, 1.0]);
    c.color = Some(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 0.4, 0.6]]);
    c.class_label = Some(vec![0, -1, 7]);
    c.instance_label = Some(vec![3, -1, 0]);
    c
}

#[test]
fn scene_round_trips_in_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let c = sample_cloud();
    for (name, fmt) in [
        ("a.ply", SceneFormat::PlyBinaryLe),
        ("b.ply", SceneFormat::PlyAscii),
        ("c.txt", SceneFormat::ColumnarText),
    ] {
        let path = dir.path().join(name);
        save_scene(&path, &c, fmt).unwrap();
        let (back, info) = load_scene(&path).unwrap();
        assert_eq!(info.format, fmt);
        assert_eq!(back.positions, c.positions, "{name}");
        assert_eq!(back.intensity, c.intensity, "{name}");
        assert_eq!(back.class_label, c.class_label);
        assert_eq!(back.instance_label, c.instance_label);
        let col = back.color.unwrap();
        assert!((col[2][1] - 102.0 / 255.0).abs() < 1e-12);
        assert_eq!(info.rejected_rows, 0);
    }
}

#[test]
fn columnar_text_rows_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("five.txt");
    std::fs::write(&path, "x y z\n1 2 3\n4 5 6\n7,8,9\n0 0 0\n-1 -1 -1\n").unwrap();
    let (c, _) = load_scene(&path).unwrap();
    assert_eq!(c.len(), 5);
    assert_eq!(c.positions[2], [7.0, 8.0, 9.0]);

    let mut text = String::from("x y z intensity\n");
    for i in 0..10 {
        let z = if i == 3 || i == 8 { "nan".to_string() } else { i.to_string() };
        text.push_str(&format!("{i} 0 {z} 65535\n"));
    }
    std::fs::write(&path, text).unwrap();
    let (c, info) = load_scene(&path).unwrap();
    assert_eq!(c.len(), 8);
    assert_eq!(info.rejected_rows, 2);
    // Default declared range: raw 65535 maps to 1.
    assert!(c.intensity.unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn intensity_range_can_be_declared() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.txt");
    std::fs::write(&path, "# intensity_range 0 255\nx y z intensity\n0 0 0 51\n1 1 1 300\n").unwrap();
    let (c, info) = load_scene(&path).unwrap();
    assert_eq!(info.intensity_range, [0.0, 255.0]);
    assert_eq!(c.intensity.unwrap(), vec![0.2, 1.0]);
    assert_eq!(info.clamped_intensities, 1);
}

#[test]
fn missing_coordinates_and_unknown_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "x y intensity\n1 2 3\n").unwrap();
    assert!(matches!(load_scene(&path), Err(Error::Format { .. })));
    std::fs::write(&path, "x y z gps_time\n1 2 3 99\n").unwrap();
    let (c, info) = load_scene(&path).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(info.ignored_columns, vec!["gps_time".to_string()]);
    let ply = dir.path().join("bad.ply");
    std::fs::write(&ply, "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n").unwrap();
    assert!(matches!(load_scene(&ply), Err(Error::Format { .. })));
}

#[test]
fn ply_with_faces_before_vertices() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ply");
    let text = "ply\nformat ascii 1.0\ncomment intensity_range 0 10\nelement face 2\nproperty list uchar int vertex_indices\n\
                element vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty ushort intensity\nend_header\n\
                3 0 1 2\n4 0 1 2 3\n0.5 1 2 5\n3 4 5 10\n";
    std::fs::write(&path, text).unwrap();
    let (c, info) = load_scene(&path).unwrap();
    assert_eq!(info.format, SceneFormat::PlyAscii);
    assert_eq!(c.positions, vec![[0.5, 1.0, 2.0], [3.0, 4.0, 5.0]]);
    assert_eq!(c.intensity.unwrap(), vec![0.5, 1.0]);
}

fn small_spec(seed: u64) -> SynthSpec {
    let mut s = two_archetype_spec(seed);
    s.terrain.extent_m = [30.0, 30.0];
    s.terrain.spacing_m = 0.5;
    s.archetypes[1].count = [2, 2];
    s.avoid_grid_m = Some(10.0);
    s
}

#[test]
fn synthetic_scenes_are_deterministic_and_fully_labelled() {
    let a = generate_synthetic_scene(&small_spec(3)).unwrap();
    let b = generate_synthetic_scene(&small_spec(3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.cloud.positions, generate_synthetic_scene(&small_spec(4)).unwrap().cloud.positions);
    let cls = a.cloud.class_label.as_ref().unwrap();
    let inst = a.cloud.instance_label.as_ref().unwrap();
    assert!(cls.iter().all(|&c| c >= 0));
    assert!(inst.iter().all(|&i| i >= 0));
    a.cloud.validate().unwrap();
}

#[test]
fn planted_composition_matches_a_recount() {
    let spec = small_spec(5);
    let s = generate_synthetic_scene(&spec).unwrap();
    let cls = s.cloud.class_label.as_ref().unwrap();
    let inst = s.cloud.instance_label.as_ref().unwrap();
    // Distinct instances per class, recounted from the point labels.
    let mut per_class: BTreeMap<i32, BTreeSet<i64>> = BTreeMap::new();
    for (&c, &i) in cls.iter().zip(inst) {
        per_class.entry(c).or_default().insert(i);
    }
    assert_eq!(per_class[&0], BTreeSet::from([0]));
    assert_eq!(per_class[&1].len(), 12);
    assert_eq!(per_class[&2].len(), 2);
    // Every instance's points carry its archetype's class.
    for o in &s.objects {
        let want = spec.archetypes[o.archetype].class_id;
        assert!(inst.iter().zip(cls).filter(|(&i, _)| i == o.instance).all(|(_, &c)| c == want));
    }
    // Objects keep clear of the 10 m grid lines.
    for o in &s.objects {
        for c in o.center {
            let r = 0.5 * o.scale * 2.4;
            let off = c.rem_euclid(10.0);
            if spec.archetypes[o.archetype].class_id == 1 {
                assert!(off > r && off < 10.0 - r);
            }
        }
    }
}

#[test]
fn crowded_spec_is_infeasible() {
    let mut spec = small_spec(0);
    spec.archetypes[0].count = [400, 400];
    assert!(matches!(generate_synthetic_scene(&spec), Err(Error::Infeasible(_))));
}

#[test]
fn synth_spec_parses_from_toml() {
    let text = r#"
seed = 9
avoid_grid_m = 10.0
[terrain]
extent_m = [30.0, 20.0]
roughness = 0.2
spacing_m = 0.5
[[archetypes]]
name = "tower"
shape = "cylinder"
count = [1, 3]
size = [1.0, 1.0, 6.0]
scale = [1.0, 1.0]
intensity = 0.9
class_id = 4
[[archetypes]]
shape = "composite"
count = [1, 1]
size = [5.0, 4.0, 4.5]
scale = [1.0, 1.2]
intensity = 0.4
class_id = 5
"#;
    let spec = SynthSpec::from_toml(text).unwrap();
    let s = generate_synthetic_scene(&spec).unwrap();
    let cls = s.cloud.class_label.unwrap();
    assert!(cls.contains(&4) && cls.contains(&5));
    assert!(SynthSpec::from_toml("seed = 1").is_err());
}

#[test]
fn exports_are_complete_and_reproducible() {
    let s = generate_synthetic_scene(&small_spec(6)).unwrap();
    let model = Model::new(
        ModelConfig {
            num_slots: 4,
            num_prototypes: 2,
            points_per_prototype: 32,
            grid_resolution: 4,
            point_width: 4,
            scene_width: 8,
            slot_width: 6,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let d = decompose(&model, &s.cloud, 10.0).unwrap();
    let (report, labels) = evaluate(&d, &s.cloud).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let files = export_decomposition(&a, &model, &s.cloud, &d, labels.as_ref(), &[0, 1], &report).unwrap();
    export_decomposition(&b, &model, &s.cloud, &d, labels.as_ref(), &[0, 1], &report).unwrap();
    assert_eq!(files.len(), 5);
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let (recon, _) = load_scene(&a.join(RECONSTRUCTION_FILE)).unwrap();
    let expected: usize = d.patches.iter().map(|p| p.recon_owner.len()).sum();
    assert_eq!(recon.len(), expected);
    let (sem, _) = load_scene(&a.join(SEMANTIC_FILE)).unwrap();
    assert_eq!(sem.len(), s.cloud.len());
    let (protos, _) = load_scene(&a.join(PROTOTYPES_FILE)).unwrap();
    assert_eq!(protos.len(), 64);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join(REPORT_FILE)).unwrap()).unwrap();
    assert!(json.get("miou").is_some());
    assert_eq!(id_color(5), id_color(5));
    assert_ne!(id_color(5), id_color(6));
    assert_eq!(id_color(-1), [128, 128, 128]);
}

#[test]
fn construction_oracle_is_close_but_not_a_copy() {
    let spec = small_spec(8);
    let s = generate_synthetic_scene(&spec).unwrap();
    let o = oracle_reconstruction(&spec, &s.objects, 1).unwrap();
    assert_eq!(o, oracle_reconstruction(&spec, &s.objects, 1).unwrap());
    assert_ne!(o.positions, oracle_reconstruction(&spec, &s.objects, 2).unwrap().positions);
    assert_eq!(reference_chamfer(&s.cloud, &s.cloud, 10.0, true).unwrap(), Some(0.0));
    let c = reference_chamfer(&s.cloud, &o, 10.0, true).unwrap().unwrap();
    assert!(c > 0.0);
    let mut lifted = o.clone();
    lifted.positions.iter_mut().for_each(|p| p[2] += 1.0);
    let far = reference_chamfer(&s.cloud, &lifted, 10.0, true).unwrap().unwrap();
    assert!(far > 5.0 * c, "{far} vs {c}");
    // Without objects the oracle is the bare terrain.
    let bare = oracle_reconstruction(&spec, &[], 1).unwrap();
    assert!(bare.len() < o.len());
}
