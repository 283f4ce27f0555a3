//! Volume files: a single-file NIfTI-1 subset (`.nii`) and a raw payload
//! described by a text header (`.vhdr`).
//!
//! NIfTI files are little-endian, uncompressed and hold `u8`, `i16` or `f32`
//! voxels; the slice dimension of `dim_info` carries the acquisition plane.
//! The text header has one `key = value` per line:
//!
//! ```text
//! dims = 96 96 16
//! spacing_mm = 1 1 2
//! dtype = f32
//! data_file = image.raw
//! plane = axial
//! ```
//!
//! `plane` is optional (axial by default); `data_file` is relative to the
//! header's directory. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{BrainMask, DataType, Geometry, LabelVolume, Plane, Volume};

pub const NIFTI_HEADER_BYTES: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const NIFTI_MAGIC: &[u8; 4] = b"n+1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Nifti,
    RawHeader,
}

impl Format {
    pub fn of(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => Ok(Format::Nifti),
            Some("vhdr") => Ok(Format::RawHeader),
            _ => Err(Error::Input(format!(
                "{}: unknown volume format (expected .nii or .vhdr)",
                path.display()
            ))),
        }
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match Format::of(path)? {
        Format::Nifti => parse_nifti(&fs::read(path).map_err(|e| Error::io(path, e))?),
        Format::RawHeader => read_raw(path),
    }
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    if let Some((i, v)) = volume.data().iter().enumerate().find(|(_, &v)| !volume.dtype.represents(v)) {
        return Err(Error::Input(format!(
            "voxel {i} value {v} is not representable as {}",
            volume.dtype.name()
        )));
    }
    match Format::of(path)? {
        Format::Nifti => {
            if let Some(&e) = volume.geometry.extents.iter().find(|&&e| e > i16::MAX as usize) {
                return Err(Error::Input(format!("extent {e} does not fit a NIfTI-1 header")));
            }
            fs::write(path, encode_nifti(volume)).map_err(|e| Error::io(path, e))
        }
        Format::RawHeader => write_raw(volume, path),
    }
}

/// Reads a label map; `num_classes = None` infers `max label + 1`.
pub fn read_labels(path: &Path, num_classes: Option<usize>) -> Result<LabelVolume> {
    LabelVolume::from_volume(&read_volume(path)?, num_classes)
}

/// Writes a label map as 8-bit integers.
pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    write_volume(&labels.to_volume(), path)
}

/// Reads a mask; every non-zero voxel is inside.
pub fn read_mask(path: &Path) -> Result<BrainMask> {
    Ok(BrainMask::from_volume(&read_volume(path)?))
}

pub fn write_mask(mask: &BrainMask, plane: Plane, path: &Path) -> Result<()> {
    write_volume(&mask.to_volume(plane), path)
}

fn dtype_code(d: DataType) -> (i16, i16) {
    match d {
        DataType::U8 => (2, 8),
        DataType::I16 => (4, 16),
        DataType::F32 => (16, 32),
    }
}

fn slice_dim(p: Plane) -> u8 {
    // NIfTI counts dimensions from 1 in x, y, z order.
    p.axes().2 as u8 + 1
}

fn encode_payload(volume: &Volume, out: &mut Vec<u8>) {
    for &v in volume.data() {
        match volume.dtype {
            DataType::U8 => out.push(v as u8),
            DataType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            DataType::F32 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

fn decode_payload(bytes: &[u8], dtype: DataType, slope: f32, inter: f32) -> Vec<f32> {
    let raw: Vec<f32> = match dtype {
        DataType::U8 => bytes.iter().map(|&b| b as f32).collect(),
        DataType::I16 => bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        DataType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        raw.into_iter().map(|v| v * slope + inter).collect()
    } else {
        raw
    }
}

pub fn encode_nifti(volume: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(NIFTI_HEADER_BYTES as i32).to_le_bytes());
    h[38] = b'r';
    h[39] = slice_dim(volume.plane) << 4;
    let g = volume.geometry;
    put_i16(&mut h, 40, 3);
    for (i, &e) in g.extents.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, e as i16);
    }
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    let (code, bitpix) = dtype_code(volume.dtype);
    put_i16(&mut h, 70, code);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in g.spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    // xyzt_units: millimetres.
    h[123] = 2;
    h[344..348].copy_from_slice(NIFTI_MAGIC);
    encode_payload(volume, &mut h);
    h
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_BYTES {
        return Err(Error::format(
            bytes.len() as u64,
            format!("file ends inside the {NIFTI_HEADER_BYTES}-byte header"),
        ));
    }
    let i16_at = |at: usize| i16::from_le_bytes([bytes[at], bytes[at + 1]]);
    let f32_at = |at: usize| f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != NIFTI_HEADER_BYTES as i32 {
        let detail = if sizeof_hdr.swap_bytes() == NIFTI_HEADER_BYTES as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("header size {sizeof_hdr}, expected {NIFTI_HEADER_BYTES}")
        };
        return Err(Error::format(0, detail));
    }
    if &bytes[344..348] != NIFTI_MAGIC {
        return Err(Error::format(344, "bad magic (only single-file \"n+1\" is supported)"));
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(40, format!("dim[0] = {ndim} outside 1..=7")));
    }
    let mut extents = [1usize; 3];
    for d in 1..=ndim as usize {
        let e = i16_at(40 + 2 * d);
        if e < 1 {
            return Err(Error::format(40 + 2 * d as u64, format!("dim[{d}] = {e} must be positive")));
        }
        if d <= 3 {
            extents[d - 1] = e as usize;
        } else if e != 1 {
            return Err(Error::format(40 + 2 * d as u64, format!("dim[{d}] = {e}: only 3-D volumes are supported")));
        }
    }
    let code = i16_at(70);
    let dtype = match code {
        2 => DataType::U8,
        4 => DataType::I16,
        16 => DataType::F32,
        other => return Err(Error::format(70, format!("unsupported datatype code {other}"))),
    };
    let bitpix = i16_at(72);
    if bitpix as usize != dtype.bytes() * 8 {
        return Err(Error::format(72, format!("bitpix {bitpix} does not match datatype {}", dtype.name())));
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = if i < ndim as usize { f32_at(80 + 4 * i) } else { 1.0 };
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::format(80 + 4 * i as u64, format!("pixdim[{}] = {v} must be positive", i + 1)));
        }
        *s = v;
    }
    let vox_offset = f32_at(108);
    if !(vox_offset.is_finite() && vox_offset >= NIFTI_HEADER_BYTES as f32 && vox_offset.fract() == 0.0) {
        return Err(Error::format(108, format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let payload = extents
        .iter()
        .try_fold(dtype.bytes(), |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(42, "extent product overflows"))?;
    let end = start
        .checked_add(payload)
        .ok_or_else(|| Error::format(108, "payload end overflows"))?;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: need {payload} bytes from offset {start}"),
        ));
    }
    let plane = match (bytes[39] >> 4) & 3 {
        1 => Plane::Sagittal,
        2 => Plane::Coronal,
        _ => Plane::Axial,
    };
    let geometry = Geometry::new(extents, spacing)?;
    let data = decode_payload(&bytes[start..end], dtype, f32_at(112), f32_at(116));
    Ok(Volume::new(geometry, plane, data)?.with_dtype(dtype))
}

/// Parsed text header.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeader {
    pub geometry: Geometry,
    pub dtype: DataType,
    pub data_file: PathBuf,
    pub plane: Plane,
}

impl RawHeader {
    pub fn to_text(&self) -> String {
        let [x, y, z] = self.geometry.extents;
        let [sx, sy, sz] = self.geometry.spacing;
        format!(
            "dims = {x} {y} {z}\nspacing_mm = {sx:?} {sy:?} {sz:?}\ndtype = {}\ndata_file = {}\nplane = {}\n",
            self.dtype.name(),
            self.data_file.display(),
            self.plane
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields: BTreeMap<&str, (u64, &str)> = BTreeMap::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len() as u64;
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::format(here, format!("expected 'key = value', got '{body}'")))?;
            let key = key.trim();
            if !matches!(key, "dims" | "spacing_mm" | "dtype" | "data_file" | "plane") {
                return Err(Error::format(here, format!("unknown key '{key}'")));
            }
            if fields.insert(key, (here, value.trim())).is_some() {
                return Err(Error::format(here, format!("duplicate key '{key}'")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::format(offset, format!("missing key '{k}'")));
        fn triple<T: std::str::FromStr>((at, v): (u64, &str), what: &str) -> Result<[T; 3]> {
            let parts: Vec<T> = v
                .split_whitespace()
                .map(|p| p.parse().map_err(|_| Error::format(at, format!("bad {what} entry '{p}'"))))
                .collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::format(at, format!("{what} needs exactly 3 values")))
        }
        let extents = triple::<usize>(get("dims")?, "dims")?;
        let spacing = triple::<f32>(get("spacing_mm")?, "spacing_mm")?;
        let (at, dt) = get("dtype")?;
        let dtype = dt.parse().map_err(|_| Error::format(at, format!("unsupported dtype '{dt}'")))?;
        let (at, file) = get("data_file")?;
        if file.is_empty() {
            return Err(Error::format(at, "empty data_file"));
        }
        let plane = match fields.get("plane") {
            Some(&(at, p)) => p.parse().map_err(|_| Error::format(at, format!("unknown plane '{p}'")))?,
            None => Plane::Axial,
        };
        let geometry = Geometry::new(extents, spacing)?;
        Ok(Self {
            geometry,
            dtype,
            data_file: PathBuf::from(file),
            plane,
        })
    }
}

fn read_raw(path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = RawHeader::parse(&text)?;
    let data_path = path.parent().unwrap_or(Path::new(".")).join(&header.data_file);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let want = header
        .geometry
        .extents
        .iter()
        .try_fold(header.dtype.bytes(), |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(0, "extent product overflows"))?;
    if bytes.len() != want {
        return Err(Error::format(
            bytes.len().min(want) as u64,
            format!("{}: payload is {} bytes, header declares {want}", data_path.display(), bytes.len()),
        ));
    }
    let data = decode_payload(&bytes, header.dtype, 0.0, 0.0);
    Ok(Volume::new(header.geometry, header.plane, data)?.with_dtype(header.dtype))
}

fn write_raw(volume: &Volume, path: &Path) -> Result<()> {
    let data_file = path.with_extension("raw");
    let name = data_file
        .file_name()
        .ok_or_else(|| Error::Input(format!("{}: no file name", path.display())))?;
    let header = RawHeader {
        geometry: volume.geometry,
        dtype: volume.dtype,
        data_file: PathBuf::from(name),
        plane: volume.plane,
    };
    let mut payload = Vec::with_capacity(volume.data().len() * volume.dtype.bytes());
    encode_payload(volume, &mut payload);
    fs::write(&data_file, payload).map_err(|e| Error::io(&data_file, e))?;
    fs::write(path, header.to_text()).map_err(|e| Error::io(path, e))
}
