//! Segmentation objective and the class-aware prototype regularizer.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, Tissue};
use crate::membank::Prototypes;
use crate::network::FeaturePyramid;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const COSINE_NORM_FLOOR: f64 = 1e-12;
pub const DEFAULT_MARGIN: f64 = 1.5;
pub const DEFAULT_REG_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RegConfig {
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the regularizer in the outer loss.
    pub weight: f64,
    /// Pyramid levels that feed the regularizer; `None` taps every scale.
    pub taps: Option<Vec<usize>>,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN, weight: DEFAULT_REG_WEIGHT, taps: None }
    }
}

impl RegConfig {
    pub fn disabled() -> Self {
        Self { weight: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) || !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularizer margin {} and weight {} must be finite and non-negative",
                self.margin, self.weight
            )));
        }
        Ok(())
    }

    pub fn taps_level(&self, level: usize) -> bool {
        self.taps.as_ref().map_or(true, |t| t.contains(&level))
    }
}

/// `1 - x·y / (|x||y|)`, or 1 when either norm is below the floor.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < COSINE_NORM_FLOOR || ny < COSINE_NORM_FLOOR {
        return 1.0;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    1.0 - dot / (nx * ny)
}

/// Soft Dice (mean over classes) plus mean voxel cross-entropy.
///
/// Dice sums run over the whole batch. `logits` is `[N, C, H, W]`.
pub fn dice_ce_loss(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::Shape(format!("dice_ce_loss expects NCHW logits, got {shape:?}")));
    };
    if labels.batch() != n || labels.height() != h || labels.width() != w {
        return Err(Error::Shape(format!(
            "labels {}x{}x{} do not match logits {shape:?}",
            labels.batch(),
            labels.height(),
            labels.width()
        )));
    }
    let onehot = labels.one_hot(c)?;
    let g_sum = class_totals(&onehot);
    let g = tape.constant(onehot)?;

    let p = tape.softmax_channels(logits)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.channel_sum(pg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_const(num, DICE_SMOOTH)?;
    let p_sum = tape.channel_sum(p)?;
    let g_sum = tape.constant(g_sum)?;
    let den = tape.add(p_sum, g_sum)?;
    let den = tape.add_const(den, DICE_SMOOTH)?;
    let ratio = tape.div(num, den)?;
    let ratio = tape.mean(ratio)?;
    let dice = tape.scale(ratio, -1.0)?;
    let dice = tape.add_const(dice, 1.0)?;

    let logp = tape.log_softmax_channels(logits)?;
    let picked = tape.mul(logp, g)?;
    let picked = tape.sum(picked)?;
    let ce = tape.scale(picked, -1.0 / (n * h * w) as f64)?;
    tape.add(dice, ce)
}

fn class_totals(onehot: &Tensor) -> Tensor {
    let s = onehot.shape();
    let (n, c, sp) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (k, o) in out.iter_mut().enumerate() {
            *o += onehot.data()[(b * c + k) * sp..][..sp].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(out)
}

/// Per-scale weight `2^-(K-1-k)` where `k = 0` is the coarsest of `K` scales.
pub fn deep_supervision_weights(scales: usize) -> Vec<f64> {
    (0..scales).map(|k| 0.5f64.powi((scales - 1 - k) as i32)).collect()
}

/// Weighted sum of [`dice_ce_loss`] over the pyramid, labels downsampled to
/// each scale.
pub fn deep_supervised_loss(tape: &mut Tape, pyramid: &FeaturePyramid, labels: &LabelMap) -> Result<Var> {
    if pyramid.scales.is_empty() {
        return Err(Error::Shape("empty feature pyramid".into()));
    }
    let weights = deep_supervision_weights(pyramid.scales.len());
    let mut terms = Vec::with_capacity(weights.len());
    for (scale, wk) in pyramid.scales.iter().zip(weights) {
        let lab = downsample_labels(labels, 1 << scale.level)?;
        let l = dice_ce_loss(tape, scale.logits, &lab)?;
        terms.push(tape.scale(l, wk)?);
    }
    tape.add_many(&terms)
}

/// Majority vote over `factor x factor` windows; ties go to the smaller class.
pub fn downsample_labels(labels: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 || labels.height() % factor != 0 || labels.width() % factor != 0 {
        return Err(Error::Shape(format!(
            "label extents {}x{} not divisible by {factor}",
            labels.height(),
            labels.width()
        )));
    }
    if factor == 1 {
        return Ok(labels.clone());
    }
    let (oh, ow) = (labels.height() / factor, labels.width() / factor);
    let mut out = Vec::with_capacity(labels.batch() * oh * ow);
    let mut counts = [0usize; 256];
    for n in 0..labels.batch() {
        for y in 0..oh {
            for x in 0..ow {
                counts.fill(0);
                for dy in 0..factor {
                    for dx in 0..factor {
                        counts[labels.get(n, y * factor + dy, x * factor + dx) as usize] += 1;
                    }
                }
                let mut best = 0;
                for (c, &k) in counts.iter().enumerate() {
                    if k > counts[best] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    LabelMap::new(labels.batch(), oh, ow, out)
}

/// Batch-pooled mean feature of each tissue at one scale. `None` marks a
/// tissue with no voxels.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClassFeatures {
    vars: [Option<Var>; 3],
}

impl ClassFeatures {
    pub fn get(&self, tissue: Tissue) -> Option<Var> {
        self.vars[tissue.index() - 1]
    }

    pub fn present(&self, tissue: Tissue) -> bool {
        self.get(tissue).is_some()
    }

    pub fn values(&self, tape: &Tape) -> PooledValues {
        PooledValues(self.vars.map(|v| v.map(|v| tape.value(v).data().to_vec())))
    }
}

/// Detached copy of [`ClassFeatures`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PooledValues(pub [Option<Vec<f64>>; 3]);

impl PooledValues {
    pub fn get(&self, tissue: Tissue) -> Option<&[f64]> {
        self.0[tissue.index() - 1].as_deref()
    }
}

/// Mean of `features[:, :, y, x]` over every voxel of each tissue in the batch.
pub fn class_pool(tape: &mut Tape, features: Var, labels: &LabelMap) -> Result<ClassFeatures> {
    let shape = tape.value(features).shape().to_vec();
    let [n, _, h, w] = shape[..] else {
        return Err(Error::Shape(format!("class_pool expects NCHW features, got {shape:?}")));
    };
    if labels.batch() != n || labels.height() != h || labels.width() != w {
        return Err(Error::Shape("class_pool label extents differ from features".into()));
    }
    let mut out = ClassFeatures::default();
    for tissue in Tissue::ALL {
        let count = labels.count(tissue.index() as u8);
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        let weights = labels.data().iter().map(|&c| if c as usize == tissue.index() { inv } else { 0.0 }).collect();
        out.vars[tissue.index() - 1] = Some(tape.weighted_pool(features, weights)?);
    }
    Ok(out)
}

/// `max(0, d(p, same) - d(p, other1) - d(p, other2) + margin)` on values.
pub fn triplet_value(p: &[f64], same: &[f64], other1: &[f64], other2: &[f64], margin: f64) -> f64 {
    (cosine_distance(p, same) - cosine_distance(p, other1) - cosine_distance(p, other2) + margin).max(0.0)
}

/// Tape form of [`triplet_value`]; the prototype is a constant.
pub fn triplet_term(tape: &mut Tape, p: &[f64], same: Var, other1: Var, other2: Var, margin: f64) -> Result<Var> {
    let ds = tape.cosine_to_const(same, p.to_vec())?;
    let d1 = tape.cosine_to_const(other1, p.to_vec())?;
    let d2 = tape.cosine_to_const(other2, p.to_vec())?;
    let t = tape.sub(ds, d1)?;
    let t = tape.sub(t, d2)?;
    let t = tape.add_const(t, margin)?;
    tape.relu(t)
}

/// Pooled features of one outer batch at one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct ScaleFeatures {
    pub level: usize,
    pub classes: ClassFeatures,
}

/// Triplet terms anchored at each tissue's prototype, summed over tissues,
/// scales and outer datasets, then divided by `3 * K * datasets`.
///
/// Terms with a missing prototype or a missing tissue contribute 0. Every
/// dataset must list the same `K` scales.
pub fn reg_loss(tape: &mut Tape, datasets: &[Vec<ScaleFeatures>], prototypes: &Prototypes, margin: f64) -> Result<Var> {
    let k = datasets.first().map_or(0, Vec::len);
    if datasets.iter().any(|d| d.len() != k) {
        return Err(Error::Shape("outer datasets carry different scale counts".into()));
    }
    let mut terms = Vec::new();
    for scales in datasets {
        for sf in scales {
            for anchor in Tissue::ALL {
                let Some(p) = prototypes.get(anchor, sf.level) else { continue };
                let [o1, o2] = anchor.others();
                let (Some(s), Some(a), Some(b)) = (sf.classes.get(anchor), sf.classes.get(o1), sf.classes.get(o2))
                else {
                    continue;
                };
                terms.push(triplet_term(tape, p, s, a, b, margin)?);
            }
        }
    }
    if terms.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let total = tape.add_many(&terms)?;
    tape.scale(total, 1.0 / (3 * k * datasets.len()) as f64)
}

/// `seg + weight * reg`.
pub fn outer1_loss(tape: &mut Tape, seg: Var, reg: Var, weight: f64) -> Result<Var> {
    if weight == 0.0 {
        return Ok(seg);
    }
    let r = tape.scale(reg, weight)?;
    tape.add(seg, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ScaleOutput;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item().unwrap()
    }

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[-1.0, 0.0]), 1.0);
    }

    #[test]
    fn triplet_examples() {
        let (x, y, nx) = ([1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]);
        assert_eq!(triplet_value(&x, &x, &y, &nx, 1.5), 0.0);
        assert_eq!(triplet_value(&x, &y, &x, &x, 1.5), 2.5);
        assert_eq!(triplet_value(&x, &x, &x, &x, 0.0), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln4_cross_entropy() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let total = eval(|t| {
            let l = t.constant(Tensor::zeros(&[1, 4, 2, 2]))?;
            dice_ce_loss(t, l, &labels)
        });
        // every class has one voxel: dice ratio = (0.5 + s) / (2 + s)
        let s = DICE_SMOOTH;
        let dice = 1.0 - (0.5 + s) / (2.0 + s);
        assert!((total - dice - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_prediction_is_small() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let logits = labels.one_hot(4).unwrap().scale(100.0);
        let total = eval(|t| {
            let l = t.constant(logits)?;
            dice_ce_loss(t, l, &labels)
        });
        assert!(total < 1e-3, "{total}");
    }

    #[test]
    fn two_class_hand_case() {
        // probabilities of class 1: 0.8, 0.3, 0.6, 0.1; labels 1, 0, 1, 0
        let q = [0.8f64, 0.3, 0.6, 0.1];
        let labels = LabelMap::new(1, 2, 2, vec![1, 0, 1, 0]).unwrap();
        let mut logits = vec![0.0; 8];
        for (i, &qi) in q.iter().enumerate() {
            logits[4 + i] = (qi / (1.0 - qi)).ln();
        }
        let total = eval(|t| {
            let l = t.constant(Tensor::new(vec![1, 2, 2, 2], logits)?)?;
            dice_ce_loss(t, l, &labels)
        });
        let s = DICE_SMOOTH;
        // class 1: inter 1.4, sum p 1.8, sum g 2; class 0: inter 1.6, sum p 2.2, sum g 2
        let d1 = (2.8 + s) / (3.8 + s);
        let d0 = (3.2 + s) / (4.2 + s);
        let ce = -(0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln() + 0.9f64.ln()) / 4.0;
        assert!((total - (1.0 - (d0 + d1) / 2.0 + ce)).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let labels = LabelMap::new(1, 1, 2, vec![0, 4]).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 4, 1, 2])).unwrap();
        assert!(dice_ce_loss(&mut tape, l, &labels).is_err());
    }

    #[test]
    fn deep_supervision_hand_sum() {
        let labels = LabelMap::new(1, 2, 2, vec![1, 1, 1, 3]).unwrap();
        let coarse = LabelMap::new(1, 1, 1, vec![1]).unwrap();
        let mut tape = Tape::new();
        let fine = tape.constant(labels.one_hot(4).unwrap().scale(100.0)).unwrap();
        let c = tape.constant(Tensor::zeros(&[1, 4, 1, 1])).unwrap();
        let pyramid = FeaturePyramid {
            scales: vec![
                ScaleOutput { level: 1, features: c, logits: c },
                ScaleOutput { level: 0, features: fine, logits: fine },
            ],
        };
        let got = deep_supervised_loss(&mut tape, &pyramid, &labels).unwrap();
        let got = tape.value(got).item().unwrap();
        let lf = dice_ce_loss(&mut tape, fine, &labels).unwrap();
        let lc = dice_ce_loss(&mut tape, c, &coarse).unwrap();
        let want = tape.value(lf).item().unwrap() + 0.5 * tape.value(lc).item().unwrap();
        assert!((got - want).abs() < 1e-14);
        assert_eq!(deep_supervision_weights(3), vec![0.25, 0.5, 1.0]);
    }

    /// Reference majority vote: count every class by brute force, keep the
    /// first maximum in class order.
    fn vote(window: &[u8]) -> u8 {
        (0..4u8).max_by_key(|&c| (window.iter().filter(|&&v| v == c).count(), std::cmp::Reverse(c))).unwrap()
    }

    #[test]
    fn downsample_examples_and_exhaustive_windows() {
        let m = |v: Vec<u8>| LabelMap::new(1, 2, 2, v).unwrap();
        assert_eq!(downsample_labels(&m(vec![1, 1, 2, 3]), 2).unwrap().data(), &[1]);
        assert_eq!(downsample_labels(&m(vec![1, 2, 1, 2]), 2).unwrap().data(), &[1]);
        for code in 0..256u32 {
            let w: Vec<u8> = (0..4).map(|i| ((code >> (2 * i)) & 3) as u8).collect();
            assert_eq!(downsample_labels(&m(w.clone()), 2).unwrap().data(), &[vote(&w)], "{w:?}");
        }
        let c = LabelMap::filled(2, 8, 8, 2);
        for f in [1, 2, 4, 8] {
            let d = downsample_labels(&c, f).unwrap();
            assert!(d.data().iter().all(|&v| v == 2));
        }
        assert!(downsample_labels(&c, 3).is_err());
    }

    #[test]
    fn class_pool_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let lab = LabelMap::new(1, 1, 1, vec![2]).unwrap();
        let pooled = class_pool(&mut tape, f, &lab).unwrap().values(&tape);
        assert_eq!(pooled.get(Tissue::Gm), Some(&[1.0, 2.0][..]));
        assert!(pooled.get(Tissue::Csf).is_none() && pooled.get(Tissue::Wm).is_none());

        let f = tape.constant(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, 0.0, 0.0]).unwrap()).unwrap();
        let lab = LabelMap::new(1, 1, 2, vec![2, 2]).unwrap();
        let pooled = class_pool(&mut tape, f, &lab).unwrap().values(&tape);
        assert_eq!(pooled.get(Tissue::Gm), Some(&[2.0, 0.0][..]));
    }

    #[test]
    fn reg_loss_normalization_and_empty_bank() {
        let mut tape = Tape::new();
        let feat = |t: &mut Tape, v: Vec<f64>| t.constant(Tensor::new(vec![1, 2, 1, 3], v).unwrap()).unwrap();
        // voxel features (1,0), (1,0), (0,1) labeled CSF, GM, WM
        let fb = feat(&mut tape, vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let lab = LabelMap::new(1, 1, 3, vec![1, 2, 3]).unwrap();
        let cb = class_pool(&mut tape, fb, &lab).unwrap();
        let empty = ClassFeatures::default();
        let datasets = vec![vec![ScaleFeatures { level: 0, classes: cb }], vec![ScaleFeatures { level: 0, classes: empty }]];

        let none = reg_loss(&mut tape, &datasets, &Prototypes::default(), 1.5).unwrap();
        assert_eq!(tape.value(none).item().unwrap(), 0.0);

        // only a GM prototype (0,1); dataset C has no features
        let mut protos = Prototypes::default();
        protos.insert(Tissue::Gm, 0, vec![0.0, 1.0]);
        let v = triplet_value(&[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.5);
        assert_eq!(v, 1.5);
        let r = reg_loss(&mut tape, &datasets, &protos, 1.5).unwrap();
        assert_eq!(tape.value(r).item().unwrap(), v / 6.0);
    }

    #[test]
    fn outer1_arithmetic() {
        let got = eval(|t| {
            let s = t.constant(Tensor::scalar(1.0))?;
            let r = t.constant(Tensor::scalar(0.5))?;
            outer1_loss(t, s, r, 0.1)
        });
        assert!((got - 1.05).abs() < 1e-15);
    }
}
