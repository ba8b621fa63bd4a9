//! Overlap and surface-distance metrics, and per-run reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, Tissue};
use crate::meta::pool::SegBatch;
use crate::network::UNet;
use crate::params::ParamSet;
use crate::synthgen::Sample;

/// Binary 2-D mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!("mask {height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_labels(labels: &LabelMap, sample: usize, class: u8) -> Self {
        Self { height: labels.height(), width: labels.width(), data: labels.mask(sample, class) }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width && self.data[y as usize * self.width + x as usize]
    }

    /// Mask voxels with at least one face neighbour outside the mask; the
    /// outside of the grid counts as outside the mask.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let (yi, xi) = (y as isize, x as isize);
                if self.at(yi, xi) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !self.at(yi + dy, xi + dx)) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn check_extents(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "mask extents {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, or 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_extents(gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// with sample spacing `h`.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let pos = |i: usize| i as f64 * h;
    let meet = |q: usize, p: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    let mut k = 0;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every grid point to the nearest
/// point of `sites`, with per-axis spacing `(dy, dx)`.
fn squared_distance_map(height: usize, width: usize, sites: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; height * width];
    for &(y, x) in sites {
        grid[y * width + x] = 0.0;
    }
    let n = height.max(width);
    let (mut v, mut z, mut buf, mut col) = (vec![0; n], vec![0.0; n + 1], vec![0.0; n], vec![0.0; n]);
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col[..height], spacing.0, &mut buf[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = buf[y];
        }
    }
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width].to_vec();
        edt_1d(row, spacing.1, &mut buf[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&buf[..width]);
    }
    grid
}

/// Average symmetric surface distance between mask boundaries, `None` when
/// either mask is empty. `spacing` is `(row, column)` voxel size.
pub fn asd(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<Option<f64>> {
    pred.check_extents(gt)?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let to_g = squared_distance_map(gt.height, gt.width, &bg, spacing);
    let to_p = squared_distance_map(pred.height, pred.width, &bp, spacing);
    let sum = bp.iter().map(|&(y, x)| to_g[y * gt.width + x].sqrt()).sum::<f64>()
        + bg.iter().map(|&(y, x)| to_p[y * pred.width + x].sqrt()).sum::<f64>();
    Ok(Some(sum / (bp.len() + bg.len()) as f64))
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub tissue: Tissue,
    pub dice: Vec<f64>,
    /// `None` where either mask was empty.
    pub asd: Vec<Option<f64>>,
}

impl ClassMetrics {
    pub fn dice_stats(&self) -> (f64, f64) {
        mean_std(&self.dice).unwrap_or((f64::NAN, f64::NAN))
    }

    pub fn asd_stats(&self) -> Option<(f64, f64)> {
        mean_std(&self.asd.iter().flatten().copied().collect::<Vec<_>>())
    }

    pub fn asd_missing(&self) -> usize {
        self.asd.iter().filter(|a| a.is_none()).count()
    }
}

/// Per-tissue metrics over a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn from_predictions(pred: &LabelMap, gt: &LabelMap, spacing: (f64, f64)) -> Result<Self> {
        if pred.batch() != gt.batch() || pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape("prediction and ground truth extents differ".into()));
        }
        let mut classes = Vec::new();
        for tissue in Tissue::ALL {
            let mut m = ClassMetrics { tissue, dice: Vec::new(), asd: Vec::new() };
            for n in 0..gt.batch() {
                let p = Mask::from_labels(pred, n, tissue.index() as u8);
                let g = Mask::from_labels(gt, n, tissue.index() as u8);
                m.dice.push(dice(&p, &g)?);
                m.asd.push(asd(&p, &g, spacing)?);
            }
            classes.push(m);
        }
        Ok(Self { classes })
    }

    pub fn class(&self, tissue: Tissue) -> &ClassMetrics {
        self.classes.iter().find(|c| c.tissue == tissue).expect("every tissue is reported")
    }

    /// Mean over tissues of the per-tissue mean Dice.
    pub fn mean_dice(&self) -> f64 {
        self.classes.iter().map(|c| c.dice_stats().0).sum::<f64>() / self.classes.len() as f64
    }

    /// Text table, one row per tissue, `mean±std`.
    pub fn summary(&self) -> String {
        let mut out = String::from("class  dice            asd\n");
        for c in &self.classes {
            let (dm, ds) = c.dice_stats();
            let asd = match c.asd_stats() {
                Some((am, asd)) => format!("{am:.4}±{asd:.4}"),
                None => "NA".into(),
            };
            let missing = if c.asd_missing() > 0 { format!(" ({} missing)", c.asd_missing()) } else { String::new() };
            let _ = writeln!(out, "{:<6} {dm:.4}±{ds:.4}   {asd}{missing}", c.tissue.name());
        }
        let _ = writeln!(out, "mean   {:.4}", self.mean_dice());
        out
    }

    /// CSV rows `run_id,domain,shots,class,dice,asd` holding per-tissue means.
    pub fn csv_rows(&self, run_id: &str, domain: &str, shots: usize) -> Vec<String> {
        self.classes
            .iter()
            .map(|c| {
                let asd = c.asd_stats().map_or("NA".to_string(), |(m, _)| format!("{m:.6}"));
                format!("{run_id},{domain},{shots},{},{:.6},{asd}", c.tissue.name(), c.dice_stats().0)
            })
            .collect()
    }
}

pub const CSV_HEADER: &str = "run_id,domain,shots,class,dice,asd";

/// Argmax segmentation of each test sample with full network parameters.
pub fn predict_labels(net: &UNet, params: &ParamSet, samples: &[Sample]) -> Result<LabelMap> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut maps = Vec::with_capacity(samples.len());
    for s in samples {
        let batch = SegBatch::from_samples(&[s])?;
        maps.push(LabelMap::argmax(&net.predict(params, &batch.images)?)?);
    }
    LabelMap::stack(&maps)
}

/// Segments every test sample and scores it against its label.
pub fn evaluate_run(net: &UNet, params: &ParamSet, test: &[Sample]) -> Result<MetricReport> {
    let pred = predict_labels(net, params, test)?;
    let gt = LabelMap::stack(&test.iter().map(|s| s.label.clone()).collect::<Vec<_>>())?;
    MetricReport::from_predictions(&pred, &gt, (1.0, 1.0))
}
