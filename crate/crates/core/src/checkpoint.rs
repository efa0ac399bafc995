//! Versioned binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic "CRTXCKPT" (8 bytes)
//!   version: u32
//!   descriptor: u32 length + UTF-8 architecture descriptor
//!   config: u32 length + UTF-8 JSON of the run that produced the model
//!   seed: u64
//!   dtype tag: u8 (0 = f32, 1 = f64)
//!   tensor count: u32, then per tensor:
//!     name: u32 length + UTF-8
//!     rank: u32, dims: u32 each
//!     data: row-major scalars
//!
//! The embedding table is always stored, frozen or not, so a loaded file
//! reproduces forward outputs bit-for-bit with no external inputs.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{describe_network, parse_descriptor, ArchSpec, LayerSpec};
use crate::nn::{Embedding, Layer, Network};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: [u8; 8] = *b"CRTXCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub descriptor: String,
    pub config_json: String,
    pub seed: u64,
    pub net: Network<F>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<F: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    put_str(out, name);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.iter() {
        v.write_le(out);
    }
}

pub fn encode<F: Scalar>(net: &Network<F>, config_json: &str, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &describe_network(net));
    put_str(&mut out, config_json);
    out.extend_from_slice(&seed.to_le_bytes());
    out.push(F::DTYPE.tag());
    let params = net.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        put_tensor(&mut out, &name, t);
    }
    out
}

/// Writes through a sibling temp file and renames, so a crash never
/// leaves a half-written checkpoint at the target path.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    net: &Network<F>,
    config_json: &str,
    seed: u64,
) -> Result<()> {
    crate::config::write_atomic(path, &encode(net, config_json, seed))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} more bytes, have {}",
                self.buf.len()
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string field is not UTF-8".into()))
    }

    fn tensor<F: Scalar>(&mut self) -> Result<(String, Tensor<F>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let width = F::DTYPE.byte_width();
        let bytes = self.take(n * width)?;
        let data: Vec<F> = bytes.chunks_exact(width).map(F::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let descriptor = r.string()?;
    let config_json = r.string()?;
    let seed = r.u64()?;
    let tag = r.take(1)?[0];
    let dtype = Dtype::from_tag(tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
    if dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "stores {dtype:?} tensors, loader wants {:?}",
            F::DTYPE
        )));
    }

    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Tensor<F>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            r.buf.len()
        )));
    }

    let spec = parse_descriptor(&descriptor)?;
    let net = assemble(&spec, &mut tensors)?;
    if !tensors.is_empty() {
        let mut extra: Vec<&String> = tensors.keys().collect();
        extra.sort();
        return Err(Error::Checkpoint(format!("unexpected tensors {extra:?}")));
    }
    Ok(Checkpoint {
        descriptor,
        config_json,
        seed,
        net,
    })
}

fn claim<F: Scalar>(
    tensors: &mut HashMap<String, Tensor<F>>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<F>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, descriptor wants {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

fn assemble<F: Scalar>(
    spec: &ArchSpec,
    tensors: &mut HashMap<String, Tensor<F>>,
) -> Result<Network<F>> {
    let table = claim(tensors, "embedding", &[spec.vocab, spec.dim])?;
    let embedding = Embedding::new(table, !spec.frozen)?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut in_dim = spec.dim;
    let mut classes = 0;
    for (i, l) in spec.layers.iter().enumerate() {
        let (wname, bname) = (format!("layer{i}.weight"), format!("layer{i}.bias"));
        match *l {
            LayerSpec::Conv { channels, width } => {
                layers.push(Layer::Conv1d {
                    weight: claim(tensors, &wname, &[channels, width, in_dim])?,
                    bias: claim(tensors, &bname, &[channels])?,
                });
                in_dim = channels;
            }
            LayerSpec::Relu => layers.push(Layer::Relu),
            LayerSpec::AvgPool => layers.push(Layer::AvgPool),
            LayerSpec::Linear { out } => {
                layers.push(Layer::Linear {
                    weight: claim(tensors, &wname, &[out, in_dim])?,
                    bias: claim(tensors, &bname, &[out])?,
                });
                in_dim = out;
                classes = out;
            }
        }
    }
    Network::new(embedding, layers, classes)
}

/// Loads and optionally pins the architecture: a checkpoint trained for a
/// different descriptor is refused rather than silently reinterpreted.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    expected_descriptor: Option<&str>,
) -> Result<Checkpoint<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let ckpt = decode::<F>(&bytes)?;
    if let Some(expected) = expected_descriptor {
        if ckpt.descriptor != expected {
            return Err(Error::Checkpoint(format!(
                "trained for `{}`, this run wants `{expected}`",
                ckpt.descriptor
            )));
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn sample_net(seed: u64) -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_network("embed:9:4:frozen|conv:6:2|relu|avgpool|linear:3", 3, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = sample_net(3);
        save_checkpoint(&path, &net, "{\"seed\":7}", 7).unwrap();

        let ckpt = load_checkpoint::<f32>(&path, None).unwrap();
        assert_eq!(ckpt.seed, 7);
        assert_eq!(ckpt.config_json, "{\"seed\":7}");
        assert_eq!(ckpt.descriptor, describe_network(&net));
        assert!(!ckpt.net.embedding.trainable);

        let probe = [1usize, 4, 2, 8, 0];
        let a = net.forward_tokens(&probe).unwrap();
        let b = ckpt.net.forward_tokens(&probe).unwrap();
        assert_eq!(a.data(), b.data());
        for ((na, ta), (nb, tb)) in net.named_params().iter().zip(ckpt.net.named_params()) {
            assert_eq!(*na, nb);
            assert_eq!(**ta, *tb);
        }
    }

    #[test]
    fn version_mismatch_is_refused() {
        let net = sample_net(1);
        let mut bytes = encode(&net, "{}", 0);
        bytes[8] = 99;
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(Error::CheckpointVersion { found: 99, expected: VERSION })
        ));
    }

    #[test]
    fn wrong_architecture_is_refused() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = sample_net(2);
        save_checkpoint(&path, &net, "{}", 0).unwrap();
        let err = load_checkpoint::<f32>(&path, Some("embed:9:4|conv:6:2|relu|avgpool|linear:3"))
            .unwrap_err();
        assert!(err.to_string().contains("this run wants"));
        assert!(load_checkpoint::<f32>(&path, Some(&describe_network(&net))).is_ok());
    }

    #[test]
    fn truncation_anywhere_is_an_error() {
        let net = sample_net(4);
        let bytes = encode(&net, "{\"a\":1}", 5);
        // Every strict prefix must fail loudly, never half-load.
        for cut in [0, 4, 9, 13, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode::<f32>(&bytes[..cut]).is_err(), "prefix {cut} loaded");
        }
        assert!(decode::<f32>(&bytes).is_ok());
    }

    #[test]
    fn trailing_garbage_is_an_error() {
        let net = sample_net(5);
        let mut bytes = encode(&net, "{}", 0);
        bytes.push(0);
        assert!(decode::<f32>(&bytes).is_err());
    }

    #[test]
    fn dtype_mismatch_is_refused() {
        let net = sample_net(6);
        let bytes = encode(&net, "{}", 0);
        let err = decode::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("F32"));
    }

    #[test]
    fn bad_magic_is_not_a_checkpoint() {
        let err = decode::<f32>(b"NOTACKPTxxxxxxxxxxxx").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn trainable_flag_survives_the_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net =
            build_network::<f32>("embed:5:3|conv:4:2|relu|avgpool|linear:2", 2, &mut rng).unwrap();
        assert!(net.embedding.trainable);
        save_checkpoint(&path, &net, "{}", 1).unwrap();
        assert!(load_checkpoint::<f32>(&path, None).unwrap().net.embedding.trainable);
    }
}
