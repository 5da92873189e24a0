//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `HRNFCKPT`, format version `u32`, config
//! digest `u64`, iteration `u64`, tensor count `u32`, then per tensor a `u32`
//! name length, the UTF-8 name, dtype code `u8`, four `u64` dimensions and the
//! payload.

use std::path::Path;

use super::io::{decode_tensor_body, encode_tensor_body, ByteReader};
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::optim::OptimizerState;
use crate::tensor::{Scalar, Shape4, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HRNFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn momentum_name(param: &str) -> String {
    format!("optim.{param}.momentum")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub digest: u64,
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of every graph parameter (including BN running statistics)
    /// and the optimizer momentum buffers.
    pub fn capture(graph: &LayerGraph<T>, optim: Option<&OptimizerState<T>>, digest: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<T>)> = graph
            .params()
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.take_grad();
                (p.name.clone(), t)
            })
            .collect();
        let mut iteration = 0;
        if let Some(st) = optim {
            iteration = st.iter as u64;
            for (p, buf) in graph.params().iter().zip(&st.buffers) {
                if buf.is_empty() {
                    continue;
                }
                let t = Tensor::from_vec(p.value.shape(), buf.clone()).expect("buffer matches parameter");
                tensors.push((momentum_name(&p.name), t));
            }
        }
        Checkpoint {
            digest,
            iteration,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes parameters (and momentum buffers when `optim` is given) back.
    pub fn restore(&self, graph: &mut LayerGraph<T>, optim: Option<&mut OptimizerState<T>>) -> Result<()> {
        let check = |name: &str, want: Shape4| -> Result<&Tensor<T>> {
            let t = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != want {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {}, expected {want}", t.shape())));
            }
            Ok(t)
        };
        for p in graph.params_mut() {
            let t = check(&p.name, p.value.shape())?;
            p.value.data_mut().copy_from_slice(t.data());
        }
        if let Some(st) = optim {
            if st.buffers.len() != graph.params().len() {
                return Err(Error::Checkpoint("optimizer does not match the network".into()));
            }
            for (p, buf) in graph.params().iter().zip(st.buffers.iter_mut()) {
                if buf.is_empty() {
                    continue;
                }
                let t = check(&momentum_name(&p.name), p.value.shape())?;
                buf.copy_from_slice(t.data());
            }
            st.iter = usize::try_from(self.iteration).map_err(|_| Error::Checkpoint("iteration overflow".into()))?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor_body(t, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::decode_inner(bytes).map_err(|e| match e {
            Error::Data(m) => Error::Checkpoint(m),
            other => other,
        })
    }

    fn decode_inner(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let digest = r.u64()?;
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            tensors.push((name, decode_tensor_body(&mut r)?));
        }
        if !r.is_at_end() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            digest,
            iteration,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    /// Reads a checkpoint and requires its digest to equal `expected_digest`.
    pub fn load(path: &Path, expected_digest: u64) -> Result<Self> {
        let ck = Self::decode(&std::fs::read(path)?)?;
        if ck.digest != expected_digest {
            return Err(Error::Checkpoint(format!(
                "config digest {:016x} does not match checkpoint digest {:016x}",
                expected_digest, ck.digest
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::SgdConfig;
    use crate::topology::{build_network, presets};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = build_network::<f64>(&presets::tiny(), 3).unwrap();
        let mut st = OptimizerState::new(SgdConfig::default(), g.params());
        for (i, b) in st.buffers.iter_mut().enumerate() {
            b.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 7 + j) as f64 * 0.1);
        }
        st.iter = 17;
        let ck = Checkpoint::capture(&g, Some(&st), 0xfeed);
        let back = Checkpoint::<f64>::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);

        let mut fresh = build_network::<f64>(&presets::tiny(), 4).unwrap();
        let mut st2 = OptimizerState::new(SgdConfig::default(), fresh.params());
        back.restore(&mut fresh, Some(&mut st2)).unwrap();
        assert_eq!(st2, st);
        for (a, b) in g.params_mut().iter().zip(fresh.params()) {
            let x: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y, "{}", a.name);
        }
    }

    #[test]
    fn corrupt_and_mismatched_files() {
        let g = build_network::<f32>(&presets::tiny(), 3).unwrap();
        let ck = Checkpoint::capture(&g, None, 1);
        let bytes = ck.encode();
        assert!(matches!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::decode(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::<f32>::decode(&v2).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ck.save(&path).unwrap();
        assert!(Checkpoint::<f32>::load(&path, 1).is_ok());
        let err = Checkpoint::<f32>::load(&path, 2).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));

        let mut other = presets::tiny();
        other.width = 8;
        let mut g8 = build_network::<f32>(&other, 3).unwrap();
        assert!(ck.restore(&mut g8, None).is_err());
    }
}
