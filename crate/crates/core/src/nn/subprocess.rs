use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::wire::{self, PackedCloud};
use super::NnResult;
use crate::error::{Error, Result};
use crate::geometry::FeatureCloud;

/// Request/response client over any byte stream pair.
#[derive(Debug)]
pub struct StreamClient<R: Read, W: Write> {
    reader: R,
    writer: W,
}

impl<R: Read, W: Write> StreamClient<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        StreamClient { reader, writer }
    }

    pub fn request(&mut self, query: &PackedCloud, reference: &PackedCloud) -> Result<wire::Response> {
        wire::write_request(&mut self.writer, query, reference)?;
        wire::read_response(&mut self.reader)
    }

    pub fn nearest(&mut self, query: &FeatureCloud, reference: &FeatureCloud) -> Result<NnResult> {
        super::check_pair(query, reference)?;
        let resp = self.request(&PackedCloud::from_cloud(query)?, &PackedCloud::from_cloud(reference)?)?;
        resp.status.into_result()?;
        if resp.indices.len() != query.len() {
            return Err(Error::Backend(format!(
                "kernel answered {} of {} queries",
                resp.indices.len(),
                query.len()
            )));
        }
        if let Some(&bad) = resp.indices.iter().find(|&&i| i as usize >= reference.len()) {
            return Err(Error::Backend(format!("kernel returned out-of-range index {bad}")));
        }
        Ok(NnResult {
            distances: resp.distances.iter().map(|&d| d as f64).collect(),
            indices: resp.indices,
        })
    }
}

/// External kernel executable kept alive for the whole process.
#[derive(Debug)]
pub struct SubprocessKernel {
    child: Mutex<(Child, StreamClient<BufReader<ChildStdout>, BufWriter<ChildStdin>>)>,
}

impl SubprocessKernel {
    pub fn spawn(path: &str) -> Result<Self> {
        let mut child = Command::new(path)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start `{path}`: {e}")))?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Backend("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::Backend("no stdout".into()))?;
        let client = StreamClient::new(BufReader::new(stdout), BufWriter::new(stdin));
        Ok(SubprocessKernel {
            child: Mutex::new((child, client)),
        })
    }

    pub fn nearest(&self, query: &FeatureCloud, reference: &FeatureCloud) -> Result<NnResult> {
        let mut guard = self
            .child
            .lock()
            .map_err(|_| Error::Backend("kernel client poisoned".into()))?;
        guard.1.nearest(query, reference)
    }
}

impl Drop for SubprocessKernel {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::nn_bruteforce;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn client_round_trips_through_reference_server() {
        let (server_in, client_out) = std::io::pipe().unwrap();
        let (client_in, server_out) = std::io::pipe().unwrap();
        let server = std::thread::spawn(move || {
            let mut r = BufReader::new(server_in);
            let mut w = BufWriter::new(server_out);
            wire::serve(&mut r, &mut w).unwrap()
        });
        let mut client = StreamClient::new(BufReader::new(client_in), BufWriter::new(client_out));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Values exactly representable in f32 so both paths see the same points.
        let mut cloud = |n: usize| {
            let v: Vec<f64> = (0..n * 4).map(|_| (rng.gen_range(-64..64) as f64) / 16.0).collect();
            FeatureCloud::new(4, v).unwrap()
        };
        for _ in 0..5 {
            let q = cloud(40);
            let r = cloud(60);
            let got = client.nearest(&q, &r).unwrap();
            let expect = nn_bruteforce(&q, &r).unwrap();
            assert_eq!(got.indices, expect.indices);
            assert_eq!(got.distances, expect.distances);
        }
        assert!(client.nearest(&cloud(3), &FeatureCloud::with_capacity(4, 0)).is_err());
        drop(client);
        assert_eq!(server.join().unwrap(), 5);
    }
}
