//! Whole-volume segmentation and first-layer kernel inspection.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::patch::extract_group;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{validate_geometry, BrainMask, DataType, LabelVolume, Volume};

/// Output of [`segment`].
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: LabelVolume,
    /// One float volume per class, when requested; zero outside the mask.
    pub probabilities: Option<Vec<Volume>>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Labels every masked voxel with its most probable class; voxels outside
/// the mask are background. The volume must already be intensity-scaled.
pub fn segment<T: Scalar>(
    volume: &Volume,
    mask: &BrainMask,
    model: &Model<T>,
    batch_size: usize,
    threads: usize,
    with_probabilities: bool,
) -> Result<Segmentation> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    validate_geometry(volume, mask, None)?;
    if volume.plane != model.config.plane {
        return Err(Error::Config(format!(
            "volume is {} but the model was trained on {} patches",
            volume.plane, model.config.plane
        )));
    }
    let n = model.config.num_classes;
    let g = volume.geometry;
    let mut labels = LabelVolume::background(g, volume.plane, n)?;
    let mut probs = with_probabilities.then(|| vec![vec![0f32; g.len()]; n]);
    let indices: Vec<usize> = mask.indices().collect();
    let sizes = model.config.patch_sizes();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Tensor<T>> = pool.install(|| {
        indices
            .par_chunks(batch_size)
            .map(|chunk| {
                let groups = chunk
                    .iter()
                    .map(|&i| extract_group(volume, g.coord(i), &sizes))
                    .collect::<Result<Vec<_>>>()?;
                model.predict(&groups)
            })
            .collect::<Result<_>>()
    })?;
    let mut out = Vec::with_capacity(g.len());
    out.extend_from_slice(labels.labels());
    for (chunk, p) in indices.chunks(batch_size).zip(&results) {
        for (&i, row) in chunk.iter().zip(p.data().chunks_exact(n)) {
            out[i] = argmax(row) as u8;
            if let Some(pv) = probs.as_mut() {
                for (c, &v) in row.iter().enumerate() {
                    pv[c][i] = v.as_f64() as f32;
                }
            }
        }
    }
    labels = LabelVolume::new(g, volume.plane, n, out)?;
    let probabilities = probs
        .map(|pv| {
            pv.into_iter()
                .map(|d| Volume::new(g, volume.plane, d).map(|v| v.with_dtype(DataType::F32)))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(Segmentation { labels, probabilities })
}

/// Min-max normalises one kernel to [0, 1]; a constant kernel maps to 0.5.
pub fn normalize_kernel(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Grayscale tile grid in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid {
    pub width: usize,
    pub height: usize,
    pub tiles: usize,
    pub pixels: Vec<f32>,
}

impl KernelGrid {
    /// Binary PGM with 8-bit gray levels.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

const GAP: usize = 1;

/// Lays out every `(kernel, input channel)` slice of a conv weight tensor
/// `[O, C, K, K]` as separately normalised tiles, row-major in a near-square
/// grid separated by one-pixel black gaps.
pub fn kernel_grid(weights: &Tensor<f32>) -> Result<KernelGrid> {
    let &[o, c, k, k2] = weights.shape() else {
        return Err(Error::dim("kernel tensor rank", 4, weights.rank()));
    };
    if k != k2 {
        return Err(Error::dim("kernel width", k, k2));
    }
    let tiles = o * c;
    let cols = (tiles as f64).sqrt().ceil().max(1.0) as usize;
    let rows = tiles.div_ceil(cols);
    let width = cols * (k + GAP) - GAP;
    let height = rows * (k + GAP) - GAP;
    let mut pixels = vec![0.0; width * height];
    for (t, kernel) in weights.data().chunks_exact(k * k).enumerate() {
        let (tr, tc) = (t / cols, t % cols);
        for (j, v) in normalize_kernel(kernel).into_iter().enumerate() {
            let (y, x) = (tr * (k + GAP) + j / k, tc * (k + GAP) + j % k);
            pixels[y * width + x] = v;
        }
    }
    Ok(KernelGrid {
        width,
        height,
        tiles,
        pixels,
    })
}

/// Text dump of a conv weight tensor: a `# kernels C channels K size`
/// header, then one line per `(kernel, channel)` slice with its `K·K`
/// values in row-major order.
pub fn kernels_to_text(weights: &Tensor<f32>) -> Result<String> {
    let &[o, c, k, _] = weights.shape() else {
        return Err(Error::dim("kernel tensor rank", 4, weights.rank()));
    };
    let mut out = format!("# kernels {o} channels {c} size {k}\n");
    for kernel in weights.data().chunks_exact(k * k) {
        let line: Vec<String> = kernel.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

/// Inverse of [`kernels_to_text`].
pub fn kernels_from_text(text: &str) -> Result<Tensor<f32>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Input("empty kernel dump".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let dims = match fields.as_slice() {
        ["#", "kernels", o, "channels", c, "size", k] => [o, c, k].map(|s| s.parse::<usize>()),
        _ => return Err(Error::Input(format!("bad kernel dump header: {header}"))),
    };
    let [o, c, k] = match dims {
        [Ok(o), Ok(c), Ok(k)] => [o, c, k],
        _ => return Err(Error::Input(format!("bad kernel dump header: {header}"))),
    };
    let mut data = Vec::with_capacity(o * c * k * k);
    for (n, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f32>()
                    .map_err(|e| Error::Input(format!("kernel dump line {}: {e}", n + 2)))?,
            );
        }
    }
    Tensor::from_vec(&[o, c, k, k], data)
}

/// Writes the grid image of one conv layer (`layer` counts from 1) of the
/// branch with patch size `branch` to `image_path`, and its values as text
/// to `text_path`.
pub fn dump_kernels<T: Scalar>(model: &Model<T>, branch: usize, layer: usize, image_path: &Path, text_path: &Path) -> Result<KernelGrid> {
    let bi = model
        .config
        .branches
        .iter()
        .position(|b| b.patch_size == branch)
        .ok_or_else(|| Error::Config(format!("no branch with patch size {branch}")))?;
    let convs = &model.branches[bi].convs;
    if layer == 0 || layer > convs.len() {
        return Err(Error::Config(format!(
            "branch {branch} has layers 1..={}, got {layer}",
            convs.len()
        )));
    }
    let weights: Tensor<f32> = convs[layer - 1].weights.cast();
    let grid = kernel_grid(&weights)?;
    std::fs::write(image_path, grid.to_pgm()).map_err(|e| Error::io(image_path, e))?;
    std::fs::write(text_path, kernels_to_text(&weights)?).map_err(|e| Error::io(text_path, e))?;
    Ok(grid)
}
