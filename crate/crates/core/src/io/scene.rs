use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ply::{self, Column, Encoding, Scalar};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud};

/// Declared intensity range of converted LiDAR files without a
/// declaration of their own.
pub const DEFAULT_INTENSITY_RANGE: [f64; 2] = [0.0, 65535.0];

/// Header directive declaring the raw intensity range, e.g.
/// `intensity_range 0 255`, given as a PLY comment or a `#` line.
pub const INTENSITY_RANGE_DIRECTIVE: &str = "intensity_range";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFormat {
    PlyAscii,
    PlyBinaryLe,
    ColumnarText,
}

impl SceneFormat {
    /// `.ply` files are written as binary PLY, everything else as text.
    pub fn from_extension(path: &Path) -> SceneFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => SceneFormat::PlyBinaryLe,
            _ => SceneFormat::ColumnarText,
        }
    }
}

/// What `load_scene` found besides the points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub format: SceneFormat,
    /// Columns present in the file, in file order.
    pub columns: Vec<String>,
    pub ignored_columns: Vec<String>,
    /// Rows dropped for non-finite coordinates.
    pub rejected_rows: usize,
    /// Intensities outside the declared range, clamped.
    pub clamped_intensities: usize,
    pub intensity_range: [f64; 2],
}

const KNOWN: [&str; 9] = ["x", "y", "z", "intensity", "red", "green", "blue", "class", "instance"];

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path, msg)
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { msg, .. } => format_err(path, msg),
        e => e,
    }
}

fn parse_range(directive: &str) -> Option<std::result::Result<[f64; 2], String>> {
    let mut t = directive.split_whitespace();
    if t.next()? != INTENSITY_RANGE_DIRECTIVE {
        return None;
    }
    let vals: Vec<f64> = t.filter_map(|v| v.parse().ok()).collect();
    Some(match vals.as_slice() {
        [lo, hi] if hi > lo => Ok([*lo, *hi]),
        _ => Err(format!("bad `{}` directive", directive.trim())),
    })
}

/// Builds a scene from named columns.
fn cloud_from_columns(path: &Path, format: SceneFormat, columns: Vec<(String, Vec<f64>)>, range: [f64; 2]) -> Result<(PointCloud, SceneFile)> {
    let get = |name: &str| columns.iter().find(|(n, _)| n == name).map(|(_, v)| v);
    let (Some(x), Some(y), Some(z)) = (get("x"), get("y"), get("z")) else {
        return Err(format_err(path, "the x, y and z columns are required"));
    };
    let ignored: Vec<String> = columns
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !KNOWN.contains(&n.as_str()))
        .collect();
    for n in &ignored {
        log::warn!("{}: ignoring unknown column `{n}`", path.display());
    }
    let keep: Vec<usize> = (0..x.len()).filter(|&i| x[i].is_finite() && y[i].is_finite() && z[i].is_finite()).collect();
    let rejected = x.len() - keep.len();
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} rows with non-finite coordinates", path.display());
    }
    let mut cloud = PointCloud::from_positions(keep.iter().map(|&i| [x[i], y[i], z[i]]).collect(), Frame::Scene);
    let mut clamped = 0;
    if let Some(v) = get("intensity") {
        cloud.intensity = Some(
            keep.iter()
                .map(|&i| {
                    let t = (v[i] - range[0]) / (range[1] - range[0]);
                    if !(0.0..=1.0).contains(&t) {
                        clamped += 1;
                    }
                    if t.is_nan() {
                        0.0
                    } else {
                        t.clamp(0.0, 1.0)
                    }
                })
                .collect(),
        );
        if clamped > 0 {
            log::warn!("{}: clamped {clamped} intensities outside {range:?}", path.display());
        }
    }
    if let (Some(r), Some(g), Some(b)) = (get("red"), get("green"), get("blue")) {
        cloud.color = Some(keep.iter().map(|&i| [r[i] / 255.0, g[i] / 255.0, b[i] / 255.0]).collect());
    }
    if let Some(c) = get("class") {
        cloud.class_label = Some(keep.iter().map(|&i| if c[i].is_finite() { c[i] as i32 } else { -1 }).collect());
    }
    if let Some(c) = get("instance") {
        cloud.instance_label = Some(keep.iter().map(|&i| if c[i].is_finite() { c[i] as i64 } else { -1 }).collect());
    }
    let info = SceneFile {
        format,
        columns: columns.iter().map(|(n, _)| n.clone()).collect(),
        ignored_columns: ignored,
        rejected_rows: rejected,
        clamped_intensities: clamped,
        intensity_range: range,
    };
    Ok((cloud, info))
}

fn read_columnar(path: &Path, text: &str) -> Result<(Vec<(String, Vec<f64>)>, Option<[f64; 2]>)> {
    let mut range = None;
    let mut names: Option<Vec<String>> = None;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let split = |l: &str| -> Vec<String> {
        l.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(r) = parse_range(comment) {
                range = Some(r.map_err(|m| format_err(path, m))?);
            }
            continue;
        }
        let fields = split(line);
        match &names {
            None => {
                cols = vec![Vec::new(); fields.len()];
                names = Some(fields);
            }
            Some(n) => {
                if fields.len() != n.len() {
                    return Err(format_err(
                        path,
                        format!("line {}: {} fields, the header has {}", lineno + 1, fields.len(), n.len()),
                    ));
                }
                for (c, f) in cols.iter_mut().zip(&fields) {
                    let v = if f.eq_ignore_ascii_case("nan") {
                        f64::NAN
                    } else {
                        f.parse()
                            .map_err(|_| format_err(path, format!("line {}: bad number `{f}`", lineno + 1)))?
                    };
                    c.push(v);
                }
            }
        }
    }
    let names = names.ok_or_else(|| format_err(path, "no header line"))?;
    Ok((names.into_iter().zip(cols).collect(), range))
}

/// Reads a scene file. PLY is recognised by its magic; anything else is
/// read as columnar text with a header line of column names.
pub fn load_scene(path: &Path) -> Result<(PointCloud, SceneFile)> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"ply\n") || bytes.starts_with(b"ply\r\n") {
        let table = ply::read(BufReader::new(&bytes[..])).map_err(|e| with_path(path, e))?;
        let mut range = DEFAULT_INTENSITY_RANGE;
        for c in &table.comments {
            if let Some(r) = parse_range(c) {
                range = r.map_err(|m| format_err(path, m))?;
            }
        }
        let format = match table.encoding {
            Encoding::Ascii => SceneFormat::PlyAscii,
            Encoding::BinaryLe => SceneFormat::PlyBinaryLe,
        };
        cloud_from_columns(path, format, table.columns, range)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| format_err(path, "neither PLY nor UTF-8 text"))?;
        let (cols, range) = read_columnar(path, &text)?;
        cloud_from_columns(path, SceneFormat::ColumnarText, cols, range.unwrap_or(DEFAULT_INTENSITY_RANGE))
    }
}

/// Columns of a scene as written by `save_scene`. Intensity is stored in
/// `[0, 1]` and declared as such.
fn scene_columns(cloud: &PointCloud) -> Vec<Column<'static>> {
    let mut cols = vec![
        Column { name: "x", ty: Scalar::F64, values: cloud.positions.iter().map(|p| p[0]).collect() },
        Column { name: "y", ty: Scalar::F64, values: cloud.positions.iter().map(|p| p[1]).collect() },
        Column { name: "z", ty: Scalar::F64, values: cloud.positions.iter().map(|p| p[2]).collect() },
    ];
    if let Some(i) = &cloud.intensity {
        cols.push(Column { name: "intensity", ty: Scalar::F64, values: i.clone() });
    }
    if let Some(c) = &cloud.color {
        for (a, name) in ["red", "green", "blue"].into_iter().enumerate() {
            cols.push(Column {
                name,
                ty: Scalar::U8,
                values: c.iter().map(|v| (v[a] * 255.0).round().clamp(0.0, 255.0)).collect(),
            });
        }
    }
    if let Some(c) = &cloud.class_label {
        cols.push(Column { name: "class", ty: Scalar::I32, values: c.iter().map(|&v| v as f64).collect() });
    }
    if let Some(c) = &cloud.instance_label {
        cols.push(Column { name: "instance", ty: Scalar::I32, values: c.iter().map(|&v| v as f64).collect() });
    }
    cols
}

/// Serialises a scene. Positions are stored as doubles, so every format
/// round-trips them exactly.
pub fn scene_bytes(cloud: &PointCloud, format: SceneFormat) -> Result<Vec<u8>> {
    cloud.validate()?;
    if let Some(bad) = cloud.instance_label.iter().flatten().find(|&&v| i32::try_from(v).is_err()) {
        return Err(Error::ParameterDomain(format!("instance id {bad} does not fit a 32-bit column")));
    }
    let cols = scene_columns(cloud);
    let range = format!("{INTENSITY_RANGE_DIRECTIVE} 0 1");
    Ok(match format {
        SceneFormat::PlyAscii => ply::write(Encoding::Ascii, &[range], &cols),
        SceneFormat::PlyBinaryLe => ply::write(Encoding::BinaryLe, &[range], &cols),
        SceneFormat::ColumnarText => {
            let mut s = format!("# {range}\n");
            s.push_str(&cols.iter().map(|c| c.name).collect::<Vec<_>>().join(" "));
            s.push('\n');
            for i in 0..cloud.len() {
                let row: Vec<String> = cols
                    .iter()
                    .map(|c| match c.ty {
                        Scalar::F64 => format!("{}", c.values[i]),
                        _ => format!("{}", c.values[i] as i64),
                    })
                    .collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
            s.into_bytes()
        }
    })
}

pub fn save_scene(path: &Path, cloud: &PointCloud, format: SceneFormat) -> Result<()> {
    write_atomic(path, &scene_bytes(cloud, format)?)
}

/// Writes a PLY of arbitrary columns.
pub(crate) fn save_columns(path: &Path, comments: &[String], cols: &[Column]) -> Result<PathBuf> {
    write_atomic(path, &ply::write(Encoding::BinaryLe, comments, cols))?;
    Ok(path.to_path_buf())
}
