//! Exact nearest-neighbour queries.
//!
//! The in-process backend (k-d tree plus an exhaustive reference scan) is
//! always available. An external kernel can be selected with the
//! `EP_NN_KERNEL` environment variable:
//!
//! * `internal` (default)
//! * `shared-lib:<path>`: a C-ABI library exporting `nnk_build_tree`,
//!   `nnk_query`, `nnk_free` and `nnk_batched_chamfer`
//! * `subprocess:<path>`: an executable speaking the framed `NNK1` stream
//!   protocol on stdin/stdout (see [`wire`])
//!
//! External kernels exchange 32-bit floats. Loss code only consumes the
//! returned indices and recomputes distances in double precision.

mod kdtree;
pub mod shared_lib;
pub mod subprocess;
pub mod wire;

use std::sync::OnceLock;

pub use kdtree::KdTree;

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, FeatureCloud};

pub const BACKEND_ENV: &str = "EP_NN_KERNEL";

/// Nearest reference point for every query point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NnResult {
    /// Squared distances.
    pub distances: Vec<f64>,
    pub indices: Vec<u32>,
}

fn check_pair(query: &FeatureCloud, reference: &FeatureCloud) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::EmptyCloud("nearest-neighbour reference"));
    }
    if query.dim() != reference.dim() {
        return Err(Error::DimMismatch {
            expected: reference.dim(),
            got: query.dim(),
        });
    }
    Ok(())
}

/// Exhaustive scan; ties go to the lowest reference index.
pub fn nn_bruteforce(query: &FeatureCloud, reference: &FeatureCloud) -> Result<NnResult> {
    check_pair(query, reference)?;
    let mut out = NnResult {
        distances: Vec::with_capacity(query.len()),
        indices: Vec::with_capacity(query.len()),
    };
    for q in query.iter() {
        let mut best = (f64::INFINITY, 0u32);
        for (j, r) in reference.iter().enumerate() {
            let d = sq_dist(q, r);
            if d < best.0 {
                best = (d, j as u32);
            }
        }
        out.distances.push(best.0);
        out.indices.push(best.1);
    }
    Ok(out)
}

pub fn nn_kdtree(query: &FeatureCloud, reference: &FeatureCloud) -> Result<NnResult> {
    check_pair(query, reference)?;
    let tree = KdTree::build(reference)?;
    let mut out = NnResult {
        distances: Vec::with_capacity(query.len()),
        indices: Vec::with_capacity(query.len()),
    };
    for q in query.iter() {
        let (d, i) = tree.nearest(q);
        out.distances.push(d);
        out.indices.push(i);
    }
    Ok(out)
}

/// Mean squared nearest-neighbour distance from `query` to `reference`.
fn mean_distance(r: &NnResult) -> f64 {
    r.distances.iter().sum::<f64>() / r.distances.len() as f64
}

/// Element-wise asymmetric Chamfer values; a bad pair fails on its own.
pub fn batched_chamfer(queries: &[FeatureCloud], references: &[FeatureCloud]) -> Result<Vec<Result<f64>>> {
    if queries.len() != references.len() {
        return Err(Error::ParameterDomain(format!(
            "{} queries for {} references",
            queries.len(),
            references.len()
        )));
    }
    Ok(queries
        .iter()
        .zip(references)
        .map(|(q, r)| {
            if q.is_empty() {
                return Err(Error::EmptyCloud("chamfer query"));
            }
            nn_kdtree(q, r).map(|res| mean_distance(&res))
        })
        .collect())
}

/// Selected nearest-neighbour implementation.
#[derive(Debug)]
pub enum NnBackend {
    Internal,
    SharedLib(shared_lib::SharedLibKernel),
    Subprocess(subprocess::SubprocessKernel),
}

impl NnBackend {
    /// Parses a backend selector (`internal`, `shared-lib:<path>`,
    /// `subprocess:<path>`).
    pub fn from_spec(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.is_empty() || spec == "internal" {
            return Ok(NnBackend::Internal);
        }
        if let Some(path) = spec.strip_prefix("shared-lib:") {
            return Ok(NnBackend::SharedLib(shared_lib::SharedLibKernel::open(path)?));
        }
        if let Some(path) = spec.strip_prefix("subprocess:") {
            return Ok(NnBackend::Subprocess(subprocess::SubprocessKernel::spawn(path)?));
        }
        Err(Error::Config(format!("unknown {BACKEND_ENV} value `{spec}`")))
    }

    pub fn from_env() -> Result<Self> {
        match std::env::var(BACKEND_ENV) {
            Ok(v) => Self::from_spec(&v),
            Err(_) => Ok(NnBackend::Internal),
        }
    }

    pub fn is_internal(&self) -> bool {
        matches!(self, NnBackend::Internal)
    }

    pub fn nearest(&self, query: &FeatureCloud, reference: &FeatureCloud) -> Result<NnResult> {
        match self {
            NnBackend::Internal => nn_kdtree(query, reference),
            NnBackend::SharedLib(k) => k.nearest(query, reference),
            NnBackend::Subprocess(k) => k.nearest(query, reference),
        }
    }
}

/// Process-wide backend chosen from `EP_NN_KERNEL` on first use. An invalid
/// selector falls back to the internal backend with a logged warning.
pub fn backend() -> &'static NnBackend {
    static BACKEND: OnceLock<NnBackend> = OnceLock::new();
    BACKEND.get_or_init(|| {
        NnBackend::from_env().unwrap_or_else(|e| {
            log::warn!("{e}; using the internal nearest-neighbour backend");
            NnBackend::Internal
        })
    })
}
