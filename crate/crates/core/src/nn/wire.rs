//! Binary framing for the external nearest-neighbour kernel.
//!
//! Every message starts with the magic `NNK1` and a version byte. All
//! integers and floats are little-endian.
//!
//! ```text
//! request  := "NNK1" version:u8 query:cloud reference:cloud
//! cloud    := count:u32 dim:u8 coords:f32[count * dim]      (row-major)
//! response := "NNK1" version:u8 status:u8 count:u32
//!             distances:f32[count] indices:u32[count]
//! ```
//!
//! `status` is 0 on success, 1 for an empty reference and 2 for a dimension
//! mismatch; failed responses carry `count = 0`.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::geometry::FeatureCloud;

pub const MAGIC: &[u8; 4] = b"NNK1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    EmptyReference = 1,
    DimMismatch = 2,
}

impl Status {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Status::Ok),
            1 => Ok(Status::EmptyReference),
            2 => Ok(Status::DimMismatch),
            other => Err(Error::Backend(format!("unknown status byte {other}"))),
        }
    }

    pub fn into_result(self) -> Result<()> {
        match self {
            Status::Ok => Ok(()),
            Status::EmptyReference => Err(Error::EmptyCloud("nearest-neighbour reference")),
            Status::DimMismatch => Err(Error::Backend("dimension mismatch reported by kernel".into())),
        }
    }
}

/// Points flattened to 32-bit floats for the wire.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PackedCloud {
    pub dim: u8,
    pub coords: Vec<f32>,
}

impl PackedCloud {
    pub fn count(&self) -> u32 {
        if self.dim == 0 {
            0
        } else {
            (self.coords.len() / self.dim as usize) as u32
        }
    }

    pub fn from_cloud(c: &FeatureCloud) -> Result<Self> {
        let dim = c.dim();
        if !(dim == 3 || dim == 4) {
            return Err(Error::ParameterDomain(format!("packed clouds have 3 or 4 coordinates, not {dim}")));
        }
        Ok(PackedCloud {
            dim: dim as u8,
            coords: c.as_slice().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_cloud(&self) -> Result<FeatureCloud> {
        FeatureCloud::new(self.dim as usize, self.coords.iter().map(|&v| v as f64).collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.count().to_le_bytes())?;
        w.write_all(&[self.dim])?;
        for v in &self.coords {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let count = read_u32(r)?;
        let dim = read_u8(r)?;
        if !(dim == 3 || dim == 4) {
            return Err(Error::Backend(format!("packed cloud with dim {dim}")));
        }
        let n = count as usize * dim as usize;
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let coords = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(PackedCloud { dim, coords })
    }
}

/// Wire-level nearest-neighbour answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: Status,
    pub distances: Vec<f32>,
    pub indices: Vec<u32>,
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_header(r: &mut impl Read) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Backend(format!("bad magic {magic:?}")));
    }
    let version = read_u8(r)?;
    if version != VERSION {
        return Err(Error::Backend(format!("unsupported protocol version {version}")));
    }
    Ok(())
}

pub fn write_request(w: &mut impl Write, query: &PackedCloud, reference: &PackedCloud) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    query.write_to(w)?;
    reference.write_to(w)?;
    w.flush()
}

/// Reads one request; `Ok(None)` on a clean end of stream.
pub fn read_request(r: &mut impl Read) -> Result<Option<(PackedCloud, PackedCloud)>> {
    let mut first = [0u8; 1];
    if r.read(&mut first)? == 0 {
        return Ok(None);
    }
    let mut rest = [0u8; 3];
    r.read_exact(&mut rest)?;
    if [first[0], rest[0], rest[1], rest[2]] != *MAGIC {
        return Err(Error::Backend("bad magic in request".into()));
    }
    let version = read_u8(r)?;
    if version != VERSION {
        return Err(Error::Backend(format!("unsupported protocol version {version}")));
    }
    let q = PackedCloud::read_from(r)?;
    let refc = PackedCloud::read_from(r)?;
    Ok(Some((q, refc)))
}

pub fn write_response(w: &mut impl Write, resp: &Response) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, resp.status as u8])?;
    w.write_all(&(resp.distances.len() as u32).to_le_bytes())?;
    for d in &resp.distances {
        w.write_all(&d.to_le_bytes())?;
    }
    for i in &resp.indices {
        w.write_all(&i.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_response(r: &mut impl Read) -> Result<Response> {
    read_header(r)?;
    let status = Status::from_byte(read_u8(r)?)?;
    let count = read_u32(r)? as usize;
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    let (db, ib) = buf.split_at(count * 4);
    let distances = db
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let indices = ib
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Response {
        status,
        distances,
        indices,
    })
}

/// Answers one request with the in-process exact search, in 32-bit floats.
pub fn answer(query: &PackedCloud, reference: &PackedCloud) -> Response {
    let fail = |status| Response {
        status,
        distances: vec![],
        indices: vec![],
    };
    if reference.count() == 0 {
        return fail(Status::EmptyReference);
    }
    if query.dim != reference.dim {
        return fail(Status::DimMismatch);
    }
    // Search on the f32 values themselves so the reported distance is the
    // distance between the transmitted points.
    let (Ok(q), Ok(r)) = (query.to_cloud(), reference.to_cloud()) else {
        return fail(Status::DimMismatch);
    };
    match super::nn_kdtree(&q, &r) {
        Ok(res) => Response {
            status: Status::Ok,
            distances: res.distances.iter().map(|&d| d as f32).collect(),
            indices: res.indices,
        },
        Err(_) => fail(Status::EmptyReference),
    }
}

/// Serves requests until the input stream ends. Reference implementation of
/// the kernel side, used to exercise clients.
pub fn serve(r: &mut impl Read, w: &mut impl Write) -> Result<usize> {
    let mut served = 0;
    while let Some((q, refc)) = read_request(r)? {
        write_response(w, &answer(&q, &refc))?;
        served += 1;
    }
    Ok(served)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn request_roundtrip(
            q in proptest::collection::vec(-1e3f32..1e3, 0..40),
            r in proptest::collection::vec(-1e3f32..1e3, 0..40),
            four in any::<bool>(),
        ) {
            let dim = if four { 4u8 } else { 3 };
            let trim = |mut v: Vec<f32>| { v.truncate(v.len() / dim as usize * dim as usize); v };
            let q = PackedCloud { dim, coords: trim(q) };
            let r = PackedCloud { dim, coords: trim(r) };
            let mut buf = vec![];
            write_request(&mut buf, &q, &r).unwrap();
            prop_assert_eq!(&buf[..5], b"NNK1\x01");
            let (q2, r2) = read_request(&mut buf.as_slice()).unwrap().unwrap();
            prop_assert_eq!(q2, q);
            prop_assert_eq!(r2, r);
        }
    }

    #[test]
    fn response_layout_is_bit_exact() {
        let resp = Response {
            status: Status::Ok,
            distances: vec![1.5],
            indices: vec![7],
        };
        let mut buf = vec![];
        write_response(&mut buf, &resp).unwrap();
        let mut expect = b"NNK1\x01\x00".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1.5f32.to_le_bytes());
        expect.extend_from_slice(&7u32.to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_response(&mut buf.as_slice()).unwrap(), resp);
    }

    #[test]
    fn status_codes() {
        let q = PackedCloud { dim: 3, coords: vec![0.0; 3] };
        let empty = PackedCloud { dim: 3, coords: vec![] };
        let four = PackedCloud { dim: 4, coords: vec![0.0; 4] };
        assert_eq!(answer(&q, &empty).status, Status::EmptyReference);
        assert_eq!(answer(&q, &four).status, Status::DimMismatch);
        assert_eq!(answer(&q, &q).status, Status::Ok);
    }

    #[test]
    fn serve_stream_handles_several_requests() {
        let q = PackedCloud { dim: 3, coords: vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0] };
        let r = PackedCloud { dim: 3, coords: vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0] };
        let mut input = vec![];
        write_request(&mut input, &q, &r).unwrap();
        write_request(&mut input, &q, &PackedCloud { dim: 3, coords: vec![] }).unwrap();
        let mut output = vec![];
        assert_eq!(serve(&mut input.as_slice(), &mut output).unwrap(), 2);
        let mut cur = output.as_slice();
        let a = read_response(&mut cur).unwrap();
        assert_eq!(a.indices, vec![0, 0]);
        assert_eq!(a.distances, vec![1.0, 1.0]);
        let b = read_response(&mut cur).unwrap();
        assert_eq!(b.status, Status::EmptyReference);
        assert!(cur.is_empty());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"XXXX\x01".to_vec();
        assert!(read_request(&mut buf.as_slice()).is_err());
        assert!(read_response(&mut buf.as_slice()).is_err());
    }
}
