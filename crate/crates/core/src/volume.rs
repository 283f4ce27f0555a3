//! Volumetric images, label maps and brain masks.
//!
//! All carriers store voxels flat with `x` varying fastest, then `y`, then
//! `z` (the on-disk order of both supported file formats).

use std::fmt;
use std::str::FromStr;

use crate::error::{Axis, Error, Result};

/// Spacing values closer than this (mm) are considered equal.
pub const SPACING_TOLERANCE_MM: f64 = 1e-4;

/// Upper end of the intensity range inside the brain mask after scaling.
pub const INTENSITY_MAX: f32 = 1023.0;

/// The plane the slices were acquired in; patches are taken from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Plane {
    /// Slices stacked along `z`; in-plane rows follow `y`, columns `x`.
    #[default]
    Axial,
    /// Slices stacked along `y`; rows follow `z`, columns `x`.
    Coronal,
    /// Slices stacked along `x`; rows follow `z`, columns `y`.
    Sagittal,
}

impl Plane {
    /// `(row axis, column axis, slice axis)` as volume axis indices.
    pub fn axes(self) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (1, 0, 2),
            Plane::Coronal => (2, 0, 1),
            Plane::Sagittal => (2, 1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::Config(format!("unknown acquisition plane '{other}'"))),
        }
    }
}

/// On-disk scalar type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataType {
    U8,
    I16,
    #[default]
    F32,
}

impl DataType {
    pub fn bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::U8 => "u8",
            DataType::I16 => "i16",
            DataType::F32 => "f32",
        }
    }

    /// Whether `v` survives a store/load cycle in this type unchanged.
    pub fn represents(self, v: f32) -> bool {
        match self {
            DataType::U8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            DataType::I16 => v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v),
            DataType::F32 => true,
        }
    }
}

impl FromStr for DataType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "u8" => Ok(DataType::U8),
            "i16" => Ok(DataType::I16),
            "f32" => Ok(DataType::F32),
            other => Err(Error::Config(format!("unsupported dtype '{other}'"))),
        }
    }
}

/// Grid extents and physical voxel spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
}

impl Geometry {
    pub fn new(extents: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        for axis in Axis::ALL {
            let i = axis.index();
            if extents[i] == 0 {
                return Err(Error::Geometry {
                    axis,
                    detail: "extent must be at least 1".into(),
                });
            }
            if !(spacing[i] > 0.0 && spacing[i].is_finite()) {
                return Err(Error::Geometry {
                    axis,
                    detail: format!("spacing {} must be positive", spacing[i]),
                });
            }
        }
        extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Input(format!("extents {extents:?} overflow")))?;
        Ok(Self { extents, spacing })
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        (z * self.extents[1] + y) * self.extents[0] + x
    }

    pub fn coord(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.extents;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        c.iter().zip(&self.extents).all(|(&v, &e)| v < e)
    }

    /// Errors naming the first axis on which `self` and `other` disagree.
    pub fn check_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        for axis in Axis::ALL {
            let i = axis.index();
            if self.extents[i] != other.extents[i] {
                return Err(Error::Geometry {
                    axis,
                    detail: format!("{what}: extent {} vs {}", self.extents[i], other.extents[i]),
                });
            }
        }
        for axis in Axis::ALL {
            let i = axis.index();
            let d = (self.spacing[i] as f64 - other.spacing[i] as f64).abs();
            if d > SPACING_TOLERANCE_MM {
                return Err(Error::Geometry {
                    axis,
                    detail: format!("{what}: spacing {} mm vs {} mm", self.spacing[i], other.spacing[i]),
                });
            }
        }
        Ok(())
    }
}

/// Scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub plane: Plane,
    /// Storage type used when the volume is written.
    pub dtype: DataType,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, plane: Plane, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::dim("voxel count", geometry.len(), data.len()));
        }
        Ok(Self {
            geometry,
            plane,
            dtype: DataType::F32,
            data,
        })
    }

    pub fn with_dtype(mut self, dtype: DataType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, c: [usize; 3]) -> f32 {
        self.data[self.geometry.index(c)]
    }
}

/// Per-voxel class indices in `[0, num_classes)`; `0` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub geometry: Geometry,
    pub plane: Plane,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, plane: Plane, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if !(1..=256).contains(&num_classes) {
            return Err(Error::Config(format!("class count {num_classes} outside 1..=256")));
        }
        if labels.len() != geometry.len() {
            return Err(Error::dim("label count", geometry.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            geometry,
            plane,
            num_classes,
            labels,
        })
    }

    pub fn background(geometry: Geometry, plane: Plane, num_classes: usize) -> Result<Self> {
        Self::new(geometry, plane, num_classes, vec![0; geometry.len()])
    }

    /// Interprets integer-valued voxels as labels. With `num_classes = None`
    /// the class count is `max label + 1` (at least 2).
    pub fn from_volume(v: &Volume, num_classes: Option<usize>) -> Result<Self> {
        let mut labels = Vec::with_capacity(v.data.len());
        for (i, &x) in v.data.iter().enumerate() {
            if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
                return Err(Error::Input(format!("voxel {i} holds {x}, not a label in 0..=255")));
            }
            labels.push(x as u8);
        }
        let n = num_classes.unwrap_or_else(|| labels.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2)));
        Self::new(v.geometry, v.plane, n, labels)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry,
            plane: self.plane,
            dtype: DataType::U8,
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn at(&self, c: [usize; 3]) -> u8 {
        self.labels[self.geometry.index(c)]
    }

    pub fn set(&mut self, c: [usize; 3], label: u8) -> Result<()> {
        if label as usize >= self.num_classes {
            return Err(Error::Input(format!("label {label} outside [0, {})", self.num_classes)));
        }
        let i = self.geometry.index(c);
        self.labels[i] = label;
        Ok(())
    }
}

/// Voxels considered for sampling and classification.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask {
    pub geometry: Geometry,
    mask: Vec<bool>,
}

impl BrainMask {
    pub fn new(geometry: Geometry, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != geometry.len() {
            return Err(Error::dim("mask voxel count", geometry.len(), mask.len()));
        }
        Ok(Self { geometry, mask })
    }

    pub fn full(geometry: Geometry) -> Self {
        Self {
            geometry,
            mask: vec![true; geometry.len()],
        }
    }

    /// Non-zero voxels are inside the mask.
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            geometry: v.geometry,
            mask: v.data.iter().map(|&x| x != 0.0).collect(),
        }
    }

    pub fn to_volume(&self, plane: Plane) -> Volume {
        Volume {
            geometry: self.geometry,
            plane,
            dtype: DataType::U8,
            data: self.mask.iter().map(|&m| m as u8 as f32).collect(),
        }
    }

    pub fn values(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        self.mask[self.geometry.index(c)]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Flat indices of the voxels inside the mask, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

/// Checks that the mask (and labels, when given) share the image geometry.
pub fn validate_geometry(volume: &Volume, mask: &BrainMask, labels: Option<&LabelVolume>) -> Result<()> {
    volume.geometry.check_matches(&mask.geometry, "mask vs image")?;
    if let Some(l) = labels {
        volume.geometry.check_matches(&l.geometry, "labels vs image")?;
    }
    Ok(())
}

/// Result of [`scale_intensities`].
#[derive(Debug, Clone)]
pub struct Scaled {
    pub volume: Volume,
    /// Set when the mask held a single intensity and no range could be mapped.
    pub warning: Option<String>,
}

/// Linearly maps the intensity range found inside `mask` onto
/// `[0, INTENSITY_MAX]`; voxels outside the mask follow the same map.
///
/// A constant-intensity mask degenerates to a pure shift, so every masked
/// voxel becomes 0, and a warning is returned.
pub fn scale_intensities(volume: &Volume, mask: &BrainMask) -> Result<Scaled> {
    volume.geometry.check_matches(&mask.geometry, "mask vs image")?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for i in mask.indices() {
        let v = volume.data[i];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::Input("brain mask is empty".into()));
    }
    let mut out = volume.clone();
    out.dtype = DataType::F32;
    let warning = if hi > lo {
        let (lo, range) = (lo as f64, (hi - lo) as f64);
        for v in out.data.iter_mut() {
            *v = ((*v as f64 - lo) / range * INTENSITY_MAX as f64) as f32;
        }
        None
    } else {
        for v in out.data.iter_mut() {
            *v -= lo;
        }
        let msg = format!("constant intensity {lo} inside the brain mask; masked voxels set to 0");
        log::warn!("{msg}");
        Some(msg)
    };
    Ok(Scaled { volume: out, warning })
}
