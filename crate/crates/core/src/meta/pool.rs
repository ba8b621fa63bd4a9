//! Training domains, batch assembly and augmentation.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::synthgen::{Domain, Sample};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-8;

/// Network input `[N, 1, H, W]` with matching labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    pub images: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip_probability: f64,
    /// Half-width of the uniform multiplicative jitter applied after
    /// normalization.
    pub scale_jitter: f64,
    /// Half-width of the uniform additive jitter.
    pub shift_jitter: f64,
}

impl Augment {
    pub const NONE: Augment = Augment { flip_probability: 0.0, scale_jitter: 0.0, shift_jitter: 0.0 };
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip_probability: 0.5, scale_jitter: 0.1, shift_jitter: 0.1 }
    }
}

/// Zero-mean, unit-variance copy of one image.
pub fn normalize(image: &[f64]) -> Vec<f64> {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(STD_FLOOR);
    image.iter().map(|v| (v - mean) * inv).collect()
}

fn flip_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

/// Per-sample augmentation draw.
#[derive(Clone, Copy, Debug)]
struct Plan {
    flip: bool,
    scale: f64,
    shift: f64,
}

const IDENTITY: Plan = Plan { flip: false, scale: 1.0, shift: 0.0 };

impl SegBatch {
    /// Normalized batch without augmentation.
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        Self::assemble(samples, &vec![IDENTITY; samples.len()])
    }

    /// Normalized batch with random horizontal flips and intensity jitter.
    pub fn augmented<R: Rng>(samples: &[&Sample], aug: &Augment, rng: &mut R) -> Result<Self> {
        let jitter = |rng: &mut R, half: f64| if half > 0.0 { rng.gen_range(-half..half) } else { 0.0 };
        let plans: Vec<Plan> = samples
            .iter()
            .map(|_| Plan {
                flip: aug.flip_probability > 0.0 && rng.gen_bool(aug.flip_probability.min(1.0)),
                scale: 1.0 + jitter(rng, aug.scale_jitter),
                shift: jitter(rng, aug.shift_jitter),
            })
            .collect();
        Self::assemble(samples, &plans)
    }

    fn assemble(samples: &[&Sample], plans: &[Plan]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let [h, w] = first.image.shape()[..] else {
            return Err(Error::Shape(format!("sample image must be 2-D, got {:?}", first.image.shape())));
        };
        let mut images = Vec::with_capacity(samples.len() * h * w);
        let mut labels = Vec::with_capacity(samples.len());
        for (s, plan) in samples.iter().zip(plans) {
            if s.image.shape() != [h, w] || s.label.height() != h || s.label.width() != w {
                return Err(Error::Shape("samples in a batch must share extents".into()));
            }
            let mut img = normalize(s.image.data());
            if plan.flip {
                flip_rows(&mut img, w);
            }
            images.extend(img.iter().map(|v| v * plan.scale + plan.shift));
            labels.push(if plan.flip { s.label.flip_horizontal() } else { s.label.clone() });
        }
        Ok(Self { images: Tensor::new(vec![samples.len(), 1, h, w], images)?, labels: LabelMap::stack(&labels)? })
    }

    pub fn len(&self) -> usize {
        self.labels.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Domain roles for one iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub inner: usize,
    pub outer: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DomainPool {
    domains: Vec<Domain>,
    batch_size: usize,
    augment: Augment,
}

impl DomainPool {
    pub const OUTER_DOMAINS: usize = 2;

    pub fn new(domains: Vec<Domain>, batch_size: usize, augment: Augment) -> Result<Self> {
        if domains.len() < 1 + Self::OUTER_DOMAINS {
            return Err(Error::InvalidArgument(format!("need at least 3 domains, got {}", domains.len())));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if let Some(d) = domains.iter().find(|d| d.samples.len() < batch_size) {
            return Err(Error::InvalidArgument(format!(
                "domain `{}` has {} samples, fewer than the batch size {batch_size}",
                d.spec.name,
                d.samples.len()
            )));
        }
        Ok(Self { domains, batch_size, augment })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Uniform inner domain; two distinct outer domains among the rest.
    pub fn assign<R: Rng>(&self, rng: &mut R) -> Assignment {
        let inner = rng.gen_range(0..self.domains.len());
        let mut rest: Vec<usize> = (0..self.domains.len()).filter(|&d| d != inner).collect();
        rest.shuffle(rng);
        rest.truncate(Self::OUTER_DOMAINS);
        rest.sort_unstable();
        Assignment { inner, outer: rest }
    }

    /// Distinct random samples from one domain, augmented.
    pub fn batch<R: Rng>(&self, domain: usize, rng: &mut R) -> Result<SegBatch> {
        let d = self.domains.get(domain).ok_or_else(|| Error::InvalidArgument(format!("no domain {domain}")))?;
        let picks = index::sample(rng, d.samples.len(), self.batch_size);
        let samples: Vec<&Sample> = picks.iter().map(|i| &d.samples[i]).collect();
        SegBatch::augmented(&samples, &self.augment, rng)
    }
}
