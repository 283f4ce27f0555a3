//! Overlap and surface-distance evaluation of label volumes.

use std::fmt::Write as _;

use crate::error::Result;
use crate::volume::{Geometry, LabelVolume};

fn check_pair(pred: &LabelVolume, reference: &LabelVolume) -> Result<()> {
    pred.geometry.check_matches(&reference.geometry, "prediction vs reference")
}

fn class_mask(v: &LabelVolume, class: usize) -> Vec<bool> {
    v.labels().iter().map(|&l| l as usize == class).collect()
}

/// `2|A∩B| / (|A|+|B|)` for the voxels labelled `class`; `None` when the
/// class is absent from both volumes.
pub fn dice(pred: &LabelVolume, reference: &LabelVolume, class: usize) -> Result<Option<f64>> {
    check_pair(pred, reference)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
        let (ip, ir) = (p as usize == class, r as usize == class);
        a += ip as usize;
        b += ir as usize;
        both += (ip && ir) as usize;
    }
    Ok((a + b > 0).then(|| 2.0 * both as f64 / (a + b) as f64))
}

/// Mask voxels with at least one 6-connected neighbour outside the mask;
/// positions beyond the volume border count as outside.
pub fn boundary(mask: &[bool], extents: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = extents;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if !mask[i] {
                    continue;
                }
                out[i] = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny];
            }
        }
    }
    out
}

/// Lower envelope of the parabolas `w·(p−q)² + f(q)` over the finite `f(q)`.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], sites: &mut Vec<usize>, cuts: &mut Vec<f64>) {
    sites.clear();
    cuts.clear();
    let key = |q: usize| f[q] + w * (q * q) as f64;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            let Some(&v) = sites.last() else {
                cuts.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(q) - key(v)) / (2.0 * w * (q - v) as f64);
            if s <= *cuts.last().expect("one cut per site") {
                sites.pop();
                cuts.pop();
            } else {
                cuts.push(s);
                break;
            }
        }
        sites.push(q);
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while j + 1 < sites.len() && cuts[j + 1] < p as f64 {
            j += 1;
        }
        let d = p as f64 - sites[j] as f64;
        *o = w * d * d + f[sites[j]];
    }
}

/// Exact Euclidean distance in mm from every voxel to the nearest `true`
/// voxel of `features`, honouring anisotropic spacing. Infinite when there
/// are no features.
pub fn distance_map(features: &[bool], geometry: &Geometry) -> Vec<f64> {
    let [nx, ny, nz] = geometry.extents;
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let (mut sites, mut cuts) = (Vec::new(), Vec::new());
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = geometry.extents[axis];
        let sp = geometry.spacing[axis] as f64;
        let w = sp * sp;
        let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
        let stride = strides[axis];
        for z in 0..if axis == 2 { 1 } else { nz } {
            for y in 0..if axis == 1 { 1 } else { ny } {
                for x in 0..if axis == 0 { 1 } else { nx } {
                    let base = (z * ny + y) * nx + x;
                    for (k, l) in line.iter_mut().enumerate() {
                        *l = d[base + k * stride];
                    }
                    envelope_1d(&line, w, &mut out, &mut sites, &mut cuts);
                    for (k, &o) in out.iter().enumerate() {
                        d[base + k * stride] = o;
                    }
                }
            }
        }
    }
    d.iter_mut().for_each(|v| *v = v.sqrt());
    d
}

/// Symmetric mean surface distance in mm for `class`: the mean, over the
/// boundary voxels of both masks, of the distance to the nearest boundary
/// voxel of the other mask. `None` when either mask is empty.
pub fn mean_surface_distance(pred: &LabelVolume, reference: &LabelVolume, class: usize) -> Result<Option<f64>> {
    check_pair(pred, reference)?;
    let g = pred.geometry;
    let (a, b) = (class_mask(pred, class), class_mask(reference, class));
    if !a.contains(&true) || !b.contains(&true) {
        return Ok(None);
    }
    let (ba, bb) = (boundary(&a, g.extents), boundary(&b, g.extents));
    let (da, db) = (distance_map(&ba, &g), distance_map(&bb, &g));
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..g.len() {
        if ba[i] {
            sum += db[i];
            count += 1;
        }
        if bb[i] {
            sum += da[i];
            count += 1;
        }
    }
    Ok(Some(sum / count as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: Option<f64>,
    /// Mean surface distance in mm.
    pub msd: Option<f64>,
}

/// Mean and sample standard deviation of the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

/// Per-class metrics of one case, background excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
}

/// Metrics for classes `1..N`, where `N` is the larger class count of the
/// two volumes.
pub fn evaluate(pred: &LabelVolume, reference: &LabelVolume) -> Result<MetricsReport> {
    check_pair(pred, reference)?;
    let n = pred.num_classes().max(reference.num_classes());
    let classes = (1..n)
        .map(|class| {
            Ok(ClassMetrics {
                class,
                dice: dice(pred, reference, class)?,
                msd: mean_surface_distance(pred, reference, class)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport { classes })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn fmt_summary(s: Option<Summary>) -> String {
    s.map_or_else(|| "n/a".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.sd))
}

impl MetricsReport {
    /// Mean ± sd of the defined Dice values across classes.
    pub fn dice_summary(&self) -> Option<Summary> {
        Summary::of(self.classes.iter().map(|c| c.dice))
    }

    pub fn msd_summary(&self) -> Option<Summary> {
        Summary::of(self.classes.iter().map(|c| c.msd))
    }

    /// `class,dice,msd_mm` rows followed by a `mean` row; undefined values
    /// are written as `n/a`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dice,msd_mm\n");
        for c in &self.classes {
            let _ = writeln!(out, "{},{},{}", c.class, fmt_opt(c.dice), fmt_opt(c.msd));
        }
        let _ = writeln!(
            out,
            "mean,{},{}",
            fmt_opt(self.dice_summary().map(|s| s.mean)),
            fmt_opt(self.msd_summary().map(|s| s.mean))
        );
        out
    }

    /// One column per class, one row per metric, and a final column with
    /// the mean ± sd over classes.
    pub fn to_table(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend(self.classes.iter().map(|c| format!("class {}", c.class)));
        header.push("mean ± sd".into());
        let mut dice_row = vec!["Dice".to_string()];
        dice_row.extend(self.classes.iter().map(|c| fmt_opt(c.dice)));
        dice_row.push(fmt_summary(self.dice_summary()));
        let mut msd_row = vec!["MSD [mm]".to_string()];
        msd_row.extend(self.classes.iter().map(|c| fmt_opt(c.msd)));
        msd_row.push(fmt_summary(self.msd_summary()));
        render_table(&[header, dice_row, msd_row])
    }
}

/// Per-class mean ± sd over several cases.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub cases: usize,
    /// `(class, dice, msd)`.
    pub classes: Vec<(usize, Option<Summary>, Option<Summary>)>,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let n = reports.iter().map(|r| r.classes.len()).max().unwrap_or(0);
    let pick = |i: usize, f: fn(&ClassMetrics) -> Option<f64>| {
        Summary::of(reports.iter().map(|r| r.classes.get(i).and_then(f)))
    };
    AggregateReport {
        cases: reports.len(),
        classes: (0..n).map(|i| (i + 1, pick(i, |c| c.dice), pick(i, |c| c.msd))).collect(),
    }
}

impl AggregateReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dice_mean,dice_sd,msd_mean_mm,msd_sd_mm\n");
        for (class, d, m) in &self.classes {
            let _ = writeln!(
                out,
                "{class},{},{},{},{}",
                fmt_opt(d.map(|s| s.mean)),
                fmt_opt(d.map(|s| s.sd)),
                fmt_opt(m.map(|s| s.mean)),
                fmt_opt(m.map(|s| s.sd))
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut header = vec![format!("{} cases", self.cases)];
        header.extend(self.classes.iter().map(|c| format!("class {}", c.0)));
        let mut dice_row = vec!["Dice".to_string()];
        dice_row.extend(self.classes.iter().map(|c| fmt_summary(c.1)));
        let mut msd_row = vec!["MSD [mm]".to_string()];
        msd_row.extend(self.classes.iter().map(|c| fmt_summary(c.2)));
        render_table(&[header, dice_row, msd_row])
    }
}

fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if ri == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    out
}
