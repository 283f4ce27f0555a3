//! Synthetic labelled volumes for exercising the pipeline end to end.
//!
//! Foreground classes are laid out as nested ellipsoidal shells whose radial
//! coordinate is folded by an angular ripple. Class 2 (when present) is a
//! thin folded ribbon; the others are thicker bands, with the highest class
//! forming the core.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{write_labels, write_mask, write_volume};
use crate::rng;
use crate::volume::{BrainMask, Geometry, LabelVolume, Plane, Volume};

pub const DEFAULT_EXTENTS: [usize; 3] = [96, 96, 16];
pub const DEFAULT_SPACING: [f32; 3] = [1.0, 1.0, 2.0];
pub const DEFAULT_NOISE_SIGMA: f32 = 25.0;
/// Mean intensity of the highest class; class `c` sits at `c/(N−1)` of it.
pub const INTENSITY_SPAN: f32 = 900.0;
/// Dilation radius (in voxels, cubic neighbourhood) of the foreground that
/// forms the mask.
pub const MASK_MARGIN: usize = 2;
/// Smallest in-plane extent accepted.
pub const MIN_IN_PLANE: usize = 32;

/// Generated image with its reference labels and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub mask: BrainMask,
}

impl Phantom {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.num_classes()];
        for &l in self.labels.labels() {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Writes `{stem}_image`, `{stem}_labels` and `{stem}_mask` with the
    /// given extension (`vhdr` or `nii`) into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, ext: &str) -> Result<[std::path::PathBuf; 3]> {
        let paths = ["image", "labels", "mask"].map(|k| dir.join(format!("{stem}_{k}.{ext}")));
        write_volume(&self.volume, &paths[0])?;
        write_labels(&self.labels, &paths[1])?;
        write_mask(&self.mask, self.volume.plane, &paths[2])?;
        Ok(paths)
    }
}

/// Mean intensity of every class, background included.
pub fn class_means(num_classes: usize) -> Vec<f32> {
    (0..num_classes)
        .map(|c| INTENSITY_SPAN * c as f32 / (num_classes - 1) as f32)
        .collect()
}

/// Random placement of the nested structures.
struct Layout {
    centre: [f64; 3],
    radii: [f64; 3],
    folds: f64,
    fold_depth: f64,
    phase: f64,
    twist: f64,
}

impl Layout {
    fn draw<R: Rng>(ext: [usize; 3], rng: &mut R) -> Self {
        let c = |n: usize, rng: &mut R| (n as f64 - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * n as f64;
        Self {
            centre: [c(ext[0], rng), c(ext[1], rng), (ext[2] as f64 - 1.0) / 2.0],
            radii: [
                ext[0] as f64 * rng.random_range(0.40..0.44),
                ext[1] as f64 * rng.random_range(0.40..0.44),
                ext[2] as f64 * rng.random_range(0.75..0.85),
            ],
            folds: rng.random_range(5..=8) as f64,
            fold_depth: rng.random_range(0.05..0.07),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            twist: rng.random_range(0.5..1.5),
        }
    }

    /// Folded normalised radius: below 1 inside the outer surface.
    fn radius(&self, p: [usize; 3]) -> f64 {
        let d: Vec<f64> = (0..3).map(|i| (p[i] as f64 - self.centre[i]) / self.radii[i]).collect();
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let theta = d[1].atan2(d[0]);
        // The ripple fades towards the centre so the core stays compact.
        let ripple = self.fold_depth * (self.folds * theta + self.phase + self.twist * d[2]).sin();
        r + ripple * (r / 0.6).min(1.0)
    }
}

/// Outer edges (in folded radius) of the foreground bands, outermost first.
/// The second band is a thin ribbon.
fn band_edges(num_fg: usize) -> Vec<f64> {
    if num_fg == 1 {
        return vec![1.0];
    }
    let ribbon = 0.07;
    let outer = 0.18;
    let mut edges = vec![1.0, 1.0 - outer, 1.0 - outer - ribbon];
    // Remaining bands split the inner cross-section into equal areas; the
    // last is the core.
    let rest = num_fg - 2;
    let inner = *edges.last().expect("three edges");
    for k in 1..rest {
        edges.push(inner * (1.0 - k as f64 / rest as f64).sqrt());
    }
    edges.truncate(num_fg);
    edges
}

fn dilate(fg: &[bool], g: &Geometry, margin: usize) -> Vec<bool> {
    let [nx, ny, nz] = g.extents;
    let m = margin as isize;
    let mut out = vec![false; fg.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !fg[g.index([x, y, z])] {
                    continue;
                }
                for dz in -m..=m {
                    for dy in -m..=m {
                        for dx in -m..=m {
                            let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                            if xx >= 0 && yy >= 0 && zz >= 0 && (xx as usize) < nx && (yy as usize) < ny && (zz as usize) < nz {
                                out[g.index([xx as usize, yy as usize, zz as usize])] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_request(extents: [usize; 3], num_classes: usize, noise_sigma: f32) -> Result<Geometry> {
    if num_classes < 2 {
        return Err(Error::Config(format!("phantom needs at least 2 classes, got {num_classes}")));
    }
    if num_classes > 256 {
        return Err(Error::Config(format!("at most 256 classes, got {num_classes}")));
    }
    if extents[0] < MIN_IN_PLANE || extents[1] < MIN_IN_PLANE {
        return Err(Error::Config(format!(
            "in-plane extents {}×{} below the minimum {MIN_IN_PLANE}",
            extents[0], extents[1]
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    Geometry::new(extents, [1.0; 3])
}

fn finish<R: Rng>(
    g: Geometry,
    num_classes: usize,
    labels: Vec<u8>,
    means: &[f32],
    noise_sigma: f32,
    rng: &mut R,
) -> Result<Phantom> {
    let mut counts = vec![0usize; num_classes];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "extents {:?} are too small for {num_classes} classes: class {c} is empty",
            g.extents
        )));
    }
    let noise = Normal::new(0.0f32, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = labels.iter().map(|&l| means[l as usize] + noise.sample(rng)).collect();
    let fg: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let mask = BrainMask::new(g, dilate(&fg, &g, MASK_MARGIN))?;
    Ok(Phantom {
        volume: Volume::new(g, Plane::Axial, data)?,
        labels: LabelVolume::new(g, Plane::Axial, num_classes, labels)?,
        mask,
    })
}

/// Nested-shell phantom with class means evenly spaced over
/// `[0, INTENSITY_SPAN]` and additive Gaussian noise. Fails when the class
/// means are closer than three noise standard deviations or a class ends up
/// empty.
pub fn generate_phantom(
    extents: [usize; 3],
    spacing: [f32; 3],
    num_classes: usize,
    noise_sigma: f32,
    seed: u64,
) -> Result<Phantom> {
    let g = check_request(extents, num_classes, noise_sigma)?;
    let g = Geometry::new(g.extents, spacing)?;
    let means = class_means(num_classes);
    let step = means[1] - means[0];
    if step < 3.0 * noise_sigma {
        return Err(Error::Config(format!(
            "{num_classes} classes leave means {step} apart, less than 3 × noise sigma {noise_sigma}"
        )));
    }
    let mut rng = rng::derive(seed, &[rng::PHANTOM]);
    let layout = Layout::draw(extents, &mut rng);
    let edges = band_edges(num_classes - 1);
    let labels: Vec<u8> = (0..g.len())
        .map(|i| {
            let r = layout.radius(g.coord(i));
            // Band k (outermost first) is class k + 1; the core is the last.
            match edges.iter().rposition(|&e| r < e) {
                Some(k) => (k + 1) as u8,
                None => 0,
            }
        })
        .collect();
    finish(g, num_classes, labels, &means, noise_sigma, &mut rng)
}

/// Default-sized phantom.
pub fn default_phantom(num_classes: usize, seed: u64) -> Result<Phantom> {
    generate_phantom(DEFAULT_EXTENTS, DEFAULT_SPACING, num_classes, DEFAULT_NOISE_SIGMA, seed)
}

/// Four-class phantom where local appearance is ambiguous: the outer band
/// (class 1) and the core (class 3) share one intensity and are told apart
/// only by their position relative to the folded ribbon (class 2) and the
/// outer surface, which a small patch does not see from deep inside either.
pub fn generate_context_phantom(extents: [usize; 3], spacing: [f32; 3], noise_sigma: f32, seed: u64) -> Result<Phantom> {
    let g = check_request(extents, 4, noise_sigma)?;
    let g = Geometry::new(g.extents, spacing)?;
    let mut rng = rng::derive(seed, &[rng::PHANTOM, 1]);
    let layout = Layout::draw(extents, &mut rng);
    let (outer, ribbon) = (0.58, 0.50);
    let labels: Vec<u8> = (0..g.len())
        .map(|i| {
            let r = layout.radius(g.coord(i));
            if r >= 1.0 {
                0
            } else if r >= outer {
                1
            } else if r >= ribbon {
                2
            } else {
                3
            }
        })
        .collect();
    let means = [0.0, 500.0, 850.0, 500.0];
    finish(g, 4, labels, &means, noise_sigma, &mut rng)
}
