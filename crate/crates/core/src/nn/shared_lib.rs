//! Client for a nearest-neighbour kernel loaded as a shared library.
//!
//! Expected C symbols (status 0 = ok, 1 = empty reference, 2 = dim mismatch):
//!
//! ```c
//! int32_t nnk_build_tree(const float *coords, uint32_t count, uint8_t dim, void **tree);
//! int32_t nnk_query(const void *tree, const float *query, uint32_t count, uint8_t dim,
//!                   float *distances, uint32_t *indices);
//! void    nnk_free(void *tree);
//! int32_t nnk_batched_chamfer(uint32_t pairs, uint8_t dim,
//!                             const float *const *queries, const uint32_t *query_counts,
//!                             const float *const *references, const uint32_t *reference_counts,
//!                             double *values, int32_t *status);
//! ```

use std::ffi::c_void;

use libloading::{Library, Symbol};

use super::wire::{PackedCloud, Status};
use super::NnResult;
use crate::error::{Error, Result};
use crate::geometry::FeatureCloud;

type BuildTree = unsafe extern "C" fn(*const f32, u32, u8, *mut *mut c_void) -> i32;
type Query = unsafe extern "C" fn(*const c_void, *const f32, u32, u8, *mut f32, *mut u32) -> i32;
type Free = unsafe extern "C" fn(*mut c_void);
type BatchedChamfer =
    unsafe extern "C" fn(u32, u8, *const *const f32, *const u32, *const *const f32, *const u32, *mut f64, *mut i32) -> i32;

#[derive(Debug)]
pub struct SharedLibKernel {
    lib: Library,
}

fn status(code: i32) -> Result<()> {
    u8::try_from(code)
        .map_err(|_| Error::Backend(format!("kernel status {code}")))
        .and_then(Status::from_byte)?
        .into_result()
}

impl SharedLibKernel {
    pub fn open(path: &str) -> Result<Self> {
        // SAFETY: loading runs the library's initialisers; the path is
        // supplied explicitly by the operator through EP_NN_KERNEL.
        let lib = unsafe { Library::new(path) }.map_err(|e| Error::Backend(format!("cannot load `{path}`: {e}")))?;
        let kernel = SharedLibKernel { lib };
        // Resolve every symbol up front so a bad library fails at selection.
        kernel.sym::<BuildTree>(b"nnk_build_tree\0")?;
        kernel.sym::<Query>(b"nnk_query\0")?;
        kernel.sym::<Free>(b"nnk_free\0")?;
        kernel.sym::<BatchedChamfer>(b"nnk_batched_chamfer\0")?;
        Ok(kernel)
    }

    fn sym<T>(&self, name: &[u8]) -> Result<Symbol<'_, T>> {
        // SAFETY: the type aliases above are the documented ABI.
        unsafe { self.lib.get::<T>(name) }.map_err(|e| {
            Error::Backend(format!(
                "missing symbol {}: {e}",
                String::from_utf8_lossy(&name[..name.len() - 1])
            ))
        })
    }

    pub fn nearest(&self, query: &FeatureCloud, reference: &FeatureCloud) -> Result<NnResult> {
        super::check_pair(query, reference)?;
        let q = PackedCloud::from_cloud(query)?;
        let r = PackedCloud::from_cloud(reference)?;
        let build = self.sym::<BuildTree>(b"nnk_build_tree\0")?;
        let run = self.sym::<Query>(b"nnk_query\0")?;
        let free = self.sym::<Free>(b"nnk_free\0")?;
        let mut tree: *mut c_void = std::ptr::null_mut();
        let mut distances = vec![0f32; q.count() as usize];
        let mut indices = vec![0u32; q.count() as usize];
        // SAFETY: buffers are sized from the counts passed alongside them and
        // the tree handle is released before returning.
        unsafe {
            status(build(r.coords.as_ptr(), r.count(), r.dim, &mut tree))?;
            let code = run(
                tree,
                q.coords.as_ptr(),
                q.count(),
                q.dim,
                distances.as_mut_ptr(),
                indices.as_mut_ptr(),
            );
            free(tree);
            status(code)?;
        }
        Ok(NnResult {
            distances: distances.into_iter().map(f64::from).collect(),
            indices,
        })
    }

    pub fn batched_chamfer(&self, queries: &[FeatureCloud], references: &[FeatureCloud]) -> Result<Vec<Result<f64>>> {
        if queries.len() != references.len() || queries.is_empty() {
            return Err(Error::ParameterDomain("batched chamfer needs equal, non-empty lists".into()));
        }
        let dim = queries[0].dim();
        let qs: Vec<PackedCloud> = queries.iter().map(PackedCloud::from_cloud).collect::<Result<_>>()?;
        let rs: Vec<PackedCloud> = references.iter().map(PackedCloud::from_cloud).collect::<Result<_>>()?;
        let qp: Vec<*const f32> = qs.iter().map(|c| c.coords.as_ptr()).collect();
        let qc: Vec<u32> = qs.iter().map(PackedCloud::count).collect();
        let rp: Vec<*const f32> = rs.iter().map(|c| c.coords.as_ptr()).collect();
        let rc: Vec<u32> = rs.iter().map(PackedCloud::count).collect();
        let mut values = vec![0f64; qs.len()];
        let mut codes = vec![0i32; qs.len()];
        let f = self.sym::<BatchedChamfer>(b"nnk_batched_chamfer\0")?;
        // SAFETY: all arrays have `pairs` entries and outlive the call.
        let code = unsafe {
            f(
                qs.len() as u32,
                dim as u8,
                qp.as_ptr(),
                qc.as_ptr(),
                rp.as_ptr(),
                rc.as_ptr(),
                values.as_mut_ptr(),
                codes.as_mut_ptr(),
            )
        };
        status(code)?;
        Ok(values
            .into_iter()
            .zip(codes)
            .map(|(v, c)| status(c).map(|_| v))
            .collect())
    }
}
