//! Scene files, synthetic scenes, exports and reports.

mod export;
mod ply;
mod scene;
mod synth;

pub use export::{
    export_decomposition, id_color, report_bytes, INSTANCE_FILE, PROTOTYPES_FILE, RECONSTRUCTION_FILE, REPORT_FILE,
    SEMANTIC_FILE,
};
pub use scene::{load_scene, save_scene, scene_bytes, SceneFile, SceneFormat, DEFAULT_INTENSITY_RANGE, INTENSITY_RANGE_DIRECTIVE};
pub use synth::{
    generate_synthetic_scene, oracle_reconstruction, two_archetype_spec, Archetype, PlantedObject, Shape, SynthScene, SynthSpec, Terrain,
    MAX_PLACEMENT_ATTEMPTS,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a temporary sibling of `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
