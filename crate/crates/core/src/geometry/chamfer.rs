use super::FeatureCloud;
use crate::error::{Error, Result};
use crate::nn::{self, NnBackend};

/// Mean over `x` of the squared distance to the nearest point of `y`.
pub fn chamfer_asym(x: &FeatureCloud, y: &FeatureCloud) -> Result<f64> {
    chamfer_asym_with(nn::backend(), x, y)
}

pub fn chamfer_asym_with(backend: &NnBackend, x: &FeatureCloud, y: &FeatureCloud) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyCloud("chamfer source"));
    }
    if y.is_empty() {
        return Err(Error::EmptyCloud("chamfer target"));
    }
    let res = backend.nearest(x, y)?;
    Ok(res.distances.iter().sum::<f64>() / x.len() as f64)
}

/// `chamfer_asym(x, y) + chamfer_asym(y, x)`.
pub fn chamfer_sym(x: &FeatureCloud, y: &FeatureCloud) -> Result<f64> {
    chamfer_sym_with(nn::backend(), x, y)
}

pub fn chamfer_sym_with(backend: &NnBackend, x: &FeatureCloud, y: &FeatureCloud) -> Result<f64> {
    Ok(chamfer_asym_with(backend, x, y)? + chamfer_asym_with(backend, y, x)?)
}
