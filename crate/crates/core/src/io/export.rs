use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ply::{Column, Scalar};
use super::scene::save_columns;
use super::write_atomic;
use crate::error::Result;
use crate::evaluation::{instance_segmentation, semantic_segmentation, Decomposition, EvaluationReport, PrototypeLabels};
use crate::geometry::PointCloud;
use crate::model::Model;

pub const RECONSTRUCTION_FILE: &str = "reconstruction.ply";
pub const SEMANTIC_FILE: &str = "semantic.ply";
pub const INSTANCE_FILE: &str = "instance.ply";
pub const PROTOTYPES_FILE: &str = "prototypes.ply";
pub const REPORT_FILE: &str = "report.json";

/// Display colour of an id: a fixed pseudo-random colour, grey for `-1`.
pub fn id_color(id: i64) -> [u8; 3] {
    if id < 0 {
        return [128, 128, 128];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15 ^ id as u64);
    [rng.gen_range(40..=255), rng.gen_range(40..=255), rng.gen_range(40..=255)]
}

fn xyz(points: &[[f64; 3]]) -> Vec<Column<'static>> {
    ["x", "y", "z"]
        .into_iter()
        .enumerate()
        .map(|(a, name)| Column {
            name,
            ty: Scalar::F64,
            values: points.iter().map(|p| p[a]).collect(),
        })
        .collect()
}

fn rgb(ids: &[i64]) -> Vec<Column<'static>> {
    let colors: Vec<[u8; 3]> = ids.iter().map(|&i| id_color(i)).collect();
    ["red", "green", "blue"]
        .into_iter()
        .enumerate()
        .map(|(a, name)| Column {
            name,
            ty: Scalar::U8,
            values: colors.iter().map(|c| c[a] as f64).collect(),
        })
        .collect()
}

fn id_column(name: &'static str, ids: &[i64]) -> Column<'static> {
    Column {
        name,
        ty: Scalar::I32,
        values: ids.iter().map(|&v| v as f64).collect(),
    }
}

/// Writes the reconstruction (coloured by prototype), the semantic and
/// instance segmentations of the scene, the prototypes in their canonical
/// frame and the report. Returns the written paths.
pub fn export_decomposition(
    out_dir: &Path,
    model: &Model,
    scene: &PointCloud,
    decomp: &Decomposition,
    labels: Option<&PrototypeLabels>,
    instance_targets: &[usize],
    report: &EvaluationReport,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let mut pts = Vec::new();
    let mut proto = Vec::new();
    let mut slot_id = Vec::new();
    for (pi, p) in decomp.patches.iter().enumerate() {
        for &(s, j) in &p.recon_owner {
            let slot = &p.slots[s];
            pts.push(p.frame.to_scene(&slot.points[j]));
            proto.push(slot.prototype as i64);
            slot_id.push((pi * decomp.num_slots + slot.slot) as i64);
        }
    }
    let mut cols = xyz(&pts);
    cols.push(id_column("prototype", &proto));
    cols.push(id_column("instance", &slot_id));
    cols.extend(rgb(&proto));
    written.push(save_columns(&out_dir.join(RECONSTRUCTION_FILE), &[], &cols)?);

    let classes: Vec<i64> = match labels {
        Some(l) => semantic_segmentation(decomp, l).into_iter().map(i64::from).collect(),
        None => vec![-1; scene.len()],
    };
    let mut cols = xyz(&scene.positions);
    cols.push(id_column("class", &classes));
    cols.extend(rgb(&classes));
    written.push(save_columns(&out_dir.join(SEMANTIC_FILE), &[], &cols)?);

    let inst = instance_segmentation(decomp, instance_targets);
    let mut cols = xyz(&scene.positions);
    cols.push(id_column("instance", &inst));
    cols.extend(rgb(&inst));
    written.push(save_columns(&out_dir.join(INSTANCE_FILE), &[], &cols)?);

    let bank = model.prototype_bank();
    let mut pts = Vec::new();
    let mut ids = Vec::new();
    for k in 0..bank.len() {
        for p in bank.effective_points(k) {
            pts.push(p);
            ids.push(k as i64);
        }
    }
    let mut cols = xyz(&pts);
    cols.push(id_column("prototype", &ids));
    cols.extend(rgb(&ids));
    written.push(save_columns(&out_dir.join(PROTOTYPES_FILE), &[], &cols)?);

    let path = out_dir.join(REPORT_FILE);
    write_atomic(&path, &report_bytes(report))?;
    written.push(path);
    Ok(written)
}

pub fn report_bytes(report: &EvaluationReport) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(report).expect("report serialises");
    v.push(b'\n');
    v
}
