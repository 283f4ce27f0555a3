//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "MSCNNCKP" | version u32 | element bytes u32
//! num_classes u32 | dropout_keep f64 | seed u64 | input_offset f32 | input_scale f32 | plane u8
//! branch count u32, per branch: patch u32 | fc_width u32 | layer count u32,
//!     per layer: kernel u32 | channels u32 | pool u8
//! tensor count u32, per tensor: rank u32 | dims u64… | elements
//!     (weights and biases per layer in canonical order, then the optimiser
//!     accumulators in the same order)
//! CRC-32 of everything before it, u32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::network::{BranchSpec, ConvLayerSpec, Model, NetworkConfig};
use crate::tensor::{Scalar, Tensor};
use crate::training::OptimizerState;
use crate::volume::Plane;

pub const MAGIC: &[u8; 8] = b"MSCNNCKP";
pub const VERSION: u32 = 1;
/// Upper bound on stored branch and layer counts.
const MAX_ENTRIES: usize = 64;

fn plane_code(p: Plane) -> u8 {
    match p {
        Plane::Axial => 0,
        Plane::Coronal => 1,
        Plane::Sagittal => 2,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(out, t.rank());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialises configuration, parameters and optimiser state.
pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, T::BYTES);
    let c = &model.config;
    put_u32(&mut out, c.num_classes);
    out.extend_from_slice(&c.dropout_keep.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&c.input_offset.to_le_bytes());
    out.extend_from_slice(&c.input_scale.to_le_bytes());
    out.push(plane_code(c.plane));
    put_u32(&mut out, c.branches.len());
    for b in &c.branches {
        put_u32(&mut out, b.patch_size);
        put_u32(&mut out, b.fc_width);
        put_u32(&mut out, b.layers.len());
        for l in &b.layers {
            put_u32(&mut out, l.kernel);
            put_u32(&mut out, l.channels);
            out.push(l.pool as u8);
        }
    }
    let layers = model.layers();
    put_u32(&mut out, 2 * layers.len() + model.optimizer.mean_square.len());
    for l in &layers {
        put_tensor(&mut out, &l.weights);
        put_tensor(&mut out, &l.biases);
    }
    for t in &model.optimizer.mean_square {
        put_tensor(&mut out, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: {what} needs {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn tensor<T: Scalar>(&mut self, expected: &[usize], what: &str) -> Result<Tensor<T>> {
        let at = self.pos as u64;
        let rank = self.u32(what)?;
        if rank != expected.len() {
            return Err(Error::format(at, format!("{what}: rank {rank}, expected {}", expected.len())));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(what)? as usize);
        }
        if shape != expected {
            return Err(Error::format(at, format!("{what}: shape {shape:?}, expected {expected:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * T::BYTES, what)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(&shape, data)
    }
}

/// Rebuilds a model; `expected_classes` guards against loading a model
/// trained for another label set.
pub fn decode<T: Scalar>(bytes: &[u8], expected_classes: Option<usize>) -> Result<Model<T>> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::format(bytes.len() as u64, "file too short for a checkpoint"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 8,
    };
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(Error::format(body_len as u64, "checksum mismatch"));
    }
    let elem = r.u32("element size")?;
    if elem != T::BYTES {
        return Err(Error::format(12, format!("stored {elem}-byte elements, reader uses {}", T::BYTES)));
    }
    let num_classes = r.u32("class count")?;
    let dropout_keep = r.f64("dropout")?;
    let seed = r.u64("seed")?;
    let input_offset = r.f32("input offset")?;
    let input_scale = r.f32("input scale")?;
    let at = r.pos as u64;
    let plane = match r.u8("plane")? {
        0 => Plane::Axial,
        1 => Plane::Coronal,
        2 => Plane::Sagittal,
        other => return Err(Error::format(at, format!("unknown plane code {other}"))),
    };
    let at = r.pos as u64;
    let nb = r.u32("branch count")?;
    if nb > MAX_ENTRIES {
        return Err(Error::format(at, format!("{nb} branches")));
    }
    let mut branches = Vec::new();
    for _ in 0..nb {
        let patch_size = r.u32("patch size")?;
        let fc_width = r.u32("fc width")?;
        let at = r.pos as u64;
        let nl = r.u32("layer count")?;
        if nl > MAX_ENTRIES {
            return Err(Error::format(at, format!("{nl} layers")));
        }
        let mut layers = Vec::new();
        for _ in 0..nl {
            layers.push(ConvLayerSpec {
                kernel: r.u32("kernel")?,
                channels: r.u32("channels")?,
                pool: r.u8("pool flag")? != 0,
            });
        }
        branches.push(BranchSpec {
            patch_size,
            layers,
            fc_width,
        });
    }
    let config = NetworkConfig {
        branches,
        num_classes,
        dropout_keep,
        seed,
        input_offset,
        input_scale,
        plane,
    };
    config
        .validate()
        .map_err(|e| Error::format(r.pos as u64, format!("invalid stored configuration: {e}")))?;
    if let Some(n) = expected_classes {
        if n != num_classes {
            return Err(Error::Config(format!("checkpoint has {num_classes} classes, expected {n}")));
        }
    }
    // A freshly built model provides the expected tensor shapes.
    let mut model = Model::<T>::new(config)?;
    let count_at = r.pos as u64;
    let count = r.u32("tensor count")?;
    let want = 2 * model.layers().len() + model.optimizer.mean_square.len();
    if count != want {
        return Err(Error::format(count_at, format!("{count} tensors, expected {want}")));
    }
    for (i, l) in model.layers_mut().into_iter().enumerate() {
        let w = r.tensor(&l.weights.shape().to_vec(), &format!("layer {i} weights"))?;
        let b = r.tensor(&l.biases.shape().to_vec(), &format!("layer {i} biases"))?;
        *l = LayerParams::new(w, b);
    }
    let mut mean_square = Vec::with_capacity(model.optimizer.mean_square.len());
    for (i, t) in model.optimizer.mean_square.iter().enumerate() {
        mean_square.push(r.tensor(&t.shape().to_vec(), &format!("optimiser tensor {i}"))?);
    }
    model.optimizer = OptimizerState { mean_square };
    if r.pos != body_len {
        return Err(Error::format(r.pos as u64, "trailing bytes after the last tensor"));
    }
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path, expected_classes: Option<usize>) -> Result<Model<T>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?, expected_classes)
}
