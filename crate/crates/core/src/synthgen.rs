//! Synthetic multi-domain brain-like images.
//!
//! Anatomy is a perturbed disc with a WM core, a GM ring and a CSF ring on a
//! background. Domains share anatomy and differ in tissue contrast, noise,
//! bias field and (for the atrophy domain) ring thickness.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::labels::{LabelMap, Tissue};
use crate::tensor::Tensor;

pub const MIN_EXTENT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Morphology {
    /// Multiplier on the GM ring width.
    pub gm_thickness: f64,
    /// Fraction in `[0, 1)` by which the GM outer boundary retreats towards
    /// the WM core; the freed band becomes CSF.
    pub atrophy: f64,
}

impl Default for Morphology {
    fn default() -> Self {
        Self { gm_thickness: 1.0, atrophy: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Mean intensity of background, CSF, GM and WM.
    pub means: [f64; 4],
    pub noise: f64,
    pub bias_amplitude: f64,
    /// Number of low-frequency cosine components in the bias field.
    pub bias_components: usize,
    pub morphology: Morphology,
}

impl DomainSpec {
    fn preset(name: &str, means: [f64; 4], morphology: Morphology) -> Self {
        Self { name: name.into(), means, noise: 0.05, bias_amplitude: 0.05, bias_components: 3, morphology }
    }

    /// WM brightest, then GM, then CSF.
    pub fn adult() -> Self {
        Self::preset("adult", [0.0, 0.2, 0.5, 0.8], Morphology::default())
    }

    /// GM brighter than WM.
    pub fn infant() -> Self {
        Self::preset("infant", [0.0, 0.25, 0.7, 0.45], Morphology::default())
    }

    /// Adult-like contrast with thinned GM and enlarged CSF.
    pub fn atrophy() -> Self {
        Self::preset("atrophy", [0.0, 0.15, 0.5, 0.75], Morphology { gm_thickness: 1.0, atrophy: 0.5 })
    }

    /// GM and WM nearly indistinguishable by intensity.
    pub fn isointense() -> Self {
        Self::preset("isointense", [0.0, 0.25, 0.58, 0.60], Morphology::default())
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidArgument(format!("domain `{}`: means must lie in [0, 1]", self.name)));
        }
        if !(self.noise >= 0.0) || !(self.bias_amplitude >= 0.0) {
            return Err(Error::InvalidArgument(format!("domain `{}`: negative noise or bias", self.name)));
        }
        let m = self.morphology;
        if !(m.gm_thickness > 0.0) || !(0.0..1.0).contains(&m.atrophy) {
            return Err(Error::InvalidArgument(format!("domain `{}`: invalid morphology", self.name)));
        }
        Ok(())
    }

    fn write(&self, m: &mut Manifest, prefix: &str) {
        m.set(format!("{prefix}.name"), &self.name);
        m.set(format!("{prefix}.means"), self.means.map(|v| v.to_string()).join(","));
        m.set(format!("{prefix}.noise"), self.noise);
        m.set(format!("{prefix}.bias_amplitude"), self.bias_amplitude);
        m.set(format!("{prefix}.bias_components"), self.bias_components);
        m.set(format!("{prefix}.gm_thickness"), self.morphology.gm_thickness);
        m.set(format!("{prefix}.atrophy"), self.morphology.atrophy);
    }

    fn read(m: &Manifest, prefix: &str, origin: &Path) -> Result<Self> {
        let means: Vec<f64> = m
            .require(&format!("{prefix}.means"), origin)?
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(origin, format!("bad {prefix}.means")))?;
        let means: [f64; 4] = means.try_into().map_err(|_| Error::format(origin, "expected four means"))?;
        Ok(Self {
            name: m.require(&format!("{prefix}.name"), origin)?.to_string(),
            means,
            noise: m.parse_value(&format!("{prefix}.noise"), origin)?,
            bias_amplitude: m.parse_value(&format!("{prefix}.bias_amplitude"), origin)?,
            bias_components: m.parse_value(&format!("{prefix}.bias_components"), origin)?,
            morphology: Morphology {
                gm_thickness: m.parse_value(&format!("{prefix}.gm_thickness"), origin)?,
                atrophy: m.parse_value(&format!("{prefix}.atrophy"), origin)?,
            },
        })
    }
}

/// Splits a seed into independent streams.
fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// Concentric anatomy for one subject. Deterministic per seed; the
/// morphology only moves the ring boundaries.
pub fn generate_label_map(seed: u64, height: usize, width: usize, morphology: Morphology) -> Result<LabelMap> {
    if height < MIN_EXTENT || width < MIN_EXTENT {
        return Err(Error::InvalidArgument(format!(
            "extents {height}x{width} too small for three rings (minimum {MIN_EXTENT})"
        )));
    }
    let mut rng = stream(seed, 1);
    let half = height.min(width) as f64 / 2.0;
    let cy = height as f64 / 2.0 - 0.5 + rng.gen_range(-0.06..0.06) * half;
    let cx = width as f64 / 2.0 - 0.5 + rng.gen_range(-0.06..0.06) * half;
    let outer = half * rng.gen_range(0.78..0.86);
    let wm = rng.gen_range(0.40..0.50);
    let gm = 0.25 * morphology.gm_thickness * rng.gen_range(0.85..1.15);
    // shared outline and a finer wiggle on the GM boundary
    let shape: Vec<(f64, f64)> = (2..=4).map(|_| (rng.gen_range(0.0..0.07), rng.gen_range(0.0..2.0 * PI))).collect();
    let wiggle: Vec<(f64, f64)> = (5..=7).map(|_| (rng.gen_range(0.0..0.04), rng.gen_range(0.0..2.0 * PI))).collect();
    let r_wm = wm;
    let r_gm_full = (wm + gm).min(0.92);
    let r_gm = r_gm_full - morphology.atrophy * (r_gm_full - r_wm) * 0.6;

    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let angle = dy.atan2(dx);
            let s = 1.0 + shape.iter().enumerate().map(|(i, (a, p))| a * ((i + 2) as f64 * angle + p).cos()).sum::<f64>();
            let g = wiggle.iter().enumerate().map(|(i, (a, p))| a * ((i + 5) as f64 * angle + p).cos()).sum::<f64>();
            let rho = (dy * dy + dx * dx).sqrt() / (outer * s);
            let class = if rho < r_wm {
                Tissue::Wm.index()
            } else if rho < r_gm + g * (r_gm - r_wm) {
                Tissue::Gm.index()
            } else if rho < 1.0 {
                Tissue::Csf.index()
            } else {
                0
            };
            data.push(class as u8);
        }
    }
    LabelMap::new(1, height, width, data)
}

/// `mean[label] + bias + noise`, clamped to `[0, 1]` and rounded to `f32`
/// so that the on-disk copy is exact.
pub fn render(label: &LabelMap, spec: &DomainSpec, seed: u64) -> Result<Tensor> {
    if label.max_class() as usize >= spec.means.len() {
        return Err(Error::InvalidArgument(format!("label value {} has no intensity", label.max_class())));
    }
    let mut rng = stream(seed, 2);
    let (h, w) = (label.height(), label.width());
    let comps: Vec<(f64, f64, f64, f64)> = (0..spec.bias_components)
        .map(|_| (rng.gen_range(0.2..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let total: f64 = comps.iter().map(|c| c.0).sum::<f64>().max(1e-12);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(label.data().len());
    for n in 0..label.batch() {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
                let bias = spec.bias_amplitude
                    * comps.iter().map(|&(a, fy, fx, p)| a * (PI * (fy * u + fx * v) + p).cos()).sum::<f64>()
                    / total;
                let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let value = spec.means[label.get(n, y, x) as usize] + bias + e;
                out.push(value.clamp(0.0, 1.0) as f32 as f64);
            }
        }
    }
    Tensor::new(vec![label.batch(), h, w], out)
}

/// One subject: raw image `[H, W]` in `[0, 1]` and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: LabelMap,
    pub domain: String,
    pub seed: u64,
}

impl Sample {
    pub fn generate(spec: &DomainSpec, seed: u64, extent: usize) -> Result<Self> {
        let label = generate_label_map(seed, extent, extent, spec.morphology)?;
        let image = render(&label, spec, seed)?.reshape(&[extent, extent])?;
        Ok(Self { image, label, domain: spec.name.clone(), seed })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeldOut {
    pub spec: DomainSpec,
    pub support: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub extent: usize,
    pub train_domains: Vec<DomainSpec>,
    pub per_domain: usize,
    pub heldout: DomainSpec,
    pub support: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 32,
            train_domains: vec![DomainSpec::adult(), DomainSpec::infant(), DomainSpec::atrophy()],
            per_domain: 40,
            heldout: DomainSpec::isointense(),
            support: 1,
            test: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_domains.len() < 3 {
            return Err(Error::InvalidArgument("need at least three training domains".into()));
        }
        if self.per_domain == 0 {
            return Err(Error::InvalidArgument("training domains cannot be empty".into()));
        }
        if self.support == 0 || self.test < 2 {
            return Err(Error::InvalidArgument(format!(
                "held-out split needs at least 1 support and 2 test samples, got {} and {}",
                self.support, self.test
            )));
        }
        if self.extent < MIN_EXTENT {
            return Err(Error::InvalidArgument(format!("extent {} below {MIN_EXTENT}", self.extent)));
        }
        let mut names: Vec<&str> = self.train_domains.iter().map(|d| d.name.as_str()).collect();
        names.push(&self.heldout.name);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("domain names must be unique".into()));
        }
        self.train_domains.iter().chain([&self.heldout]).try_for_each(DomainSpec::validate)
    }

    /// Seed of the `index`-th subject overall; distinct for distinct indices.
    fn subject_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<Domain>,
    pub heldout: HeldOut,
}

/// Generates every split. Subjects are numbered across all splits so that no
/// seed is reused.
pub fn build_pool(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let mut index = 0;
    let mut next = |spec: &DomainSpec| {
        let s = Sample::generate(spec, config.subject_seed(index), config.extent);
        index += 1;
        s
    };
    let mut train = Vec::new();
    for spec in &config.train_domains {
        let samples = (0..config.per_domain).map(|_| next(spec)).collect::<Result<_>>()?;
        train.push(Domain { spec: spec.clone(), samples });
    }
    let support = (0..config.support).map(|_| next(&config.heldout)).collect::<Result<_>>()?;
    let test = (0..config.test).map(|_| next(&config.heldout)).collect::<Result<_>>()?;
    Ok(Dataset { config: config.clone(), train, heldout: HeldOut { spec: config.heldout.clone(), support, test } })
}

pub const DATASET_MANIFEST: &str = "dataset.manifest";

impl DataConfig {
    fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("format", "dumeta-dataset-1");
        m.set("seed", self.seed);
        m.set("extent", self.extent);
        m.set("per_domain", self.per_domain);
        m.set("support", self.support);
        m.set("test", self.test);
        m.set("train_domains", self.train_domains.len());
        for (i, d) in self.train_domains.iter().enumerate() {
            d.write(&mut m, &format!("train.{i}"));
        }
        self.heldout.write(&mut m, "heldout");
        m
    }

    pub fn from_manifest(m: &Manifest, origin: &Path) -> Result<Self> {
        let n: usize = m.parse_value("train_domains", origin)?;
        Ok(Self {
            seed: m.parse_value("seed", origin)?,
            extent: m.parse_value("extent", origin)?,
            train_domains: (0..n).map(|i| DomainSpec::read(m, &format!("train.{i}"), origin)).collect::<Result<_>>()?,
            per_domain: m.parse_value("per_domain", origin)?,
            heldout: DomainSpec::read(m, "heldout", origin)?,
            support: m.parse_value("support", origin)?,
            test: m.parse_value("test", origin)?,
        })
    }
}

fn write_split(dir: &Path, samples: &[Sample], m: &mut Manifest, key: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        io::write_dmt(&dir.join(format!("{i:03}_image.dmt")), &s.image)?;
        io::write_dmt(&dir.join(format!("{i:03}_label.dmt")), &s.label.to_tensor())?;
        m.set(format!("{key}.{i}.seed"), s.seed);
    }
    Ok(())
}

fn read_split(dir: &Path, spec: &DomainSpec, m: &Manifest, key: &str, count: usize, origin: &Path) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let image = io::read_dmt(&dir.join(format!("{i:03}_image.dmt")))?;
            let label = LabelMap::from_tensor(&io::read_dmt(&dir.join(format!("{i:03}_label.dmt")))?)?;
            if image.shape() != [label.height(), label.width()] {
                return Err(Error::format(dir, format!("sample {i}: image and label extents differ")));
            }
            Ok(Sample { image, label, domain: spec.name.clone(), seed: m.parse_value(&format!("{key}.{i}.seed"), origin)? })
        })
        .collect()
}

impl Dataset {
    /// `<root>/<domain>/{train,support,test}/NNN_{image,label}.dmt` plus
    /// `dataset.manifest`.
    pub fn save(&self, root: &Path) -> Result<()> {
        io::ensure_dir(root)?;
        let mut m = self.config.to_manifest();
        for d in &self.train {
            write_split(&root.join(&d.spec.name).join("train"), &d.samples, &mut m, &format!("sample.{}.train", d.spec.name))?;
        }
        let h = &self.heldout;
        let base = root.join(&h.spec.name);
        write_split(&base.join("support"), &h.support, &mut m, &format!("sample.{}.support", h.spec.name))?;
        write_split(&base.join("test"), &h.test, &mut m, &format!("sample.{}.test", h.spec.name))?;
        m.write(&root.join(DATASET_MANIFEST))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let origin = root.join(DATASET_MANIFEST);
        let m = Manifest::read(&origin)?;
        let config = DataConfig::from_manifest(&m, &origin)?;
        let mut train = Vec::new();
        for spec in &config.train_domains {
            let dir = root.join(&spec.name).join("train");
            let key = format!("sample.{}.train", spec.name);
            train.push(Domain { spec: spec.clone(), samples: read_split(&dir, spec, &m, &key, config.per_domain, &origin)? });
        }
        let h = &config.heldout;
        let base = root.join(&h.name);
        let support = read_split(&base.join("support"), h, &m, &format!("sample.{}.support", h.name), config.support, &origin)?;
        let test = read_split(&base.join("test"), h, &m, &format!("sample.{}.test", h.name), config.test, &origin)?;
        Ok(Self { heldout: HeldOut { spec: h.clone(), support, test }, train, config })
    }

    /// Rebuilds the dataset from the manifest alone.
    pub fn regenerate(root: &Path) -> Result<Self> {
        let origin = root.join(DATASET_MANIFEST);
        build_pool(&DataConfig::from_manifest(&Manifest::read(&origin)?, &origin)?)
    }
}
