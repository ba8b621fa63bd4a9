//! Run configuration, read from TOML.
//!
//! Every section is optional; omitted keys take their defaults. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RegConfig;
use crate::meta::pool::Augment;
use crate::meta::seg::{TrainConfig, TrainMode};
use crate::meta::{LRSchedule, MilOrder};
use crate::network::{FinetuneMask, NetworkConfig};
use crate::synthgen::DataConfig;

pub const MAX_CAPACITY: usize = 100_000;
pub const MARGIN_RANGE: (f64, f64) = (0.0, 4.0);
pub const REG_WEIGHT_RANGE: (f64, f64) = (0.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory for meta-train, meta-test, ablate and convlab output.
    pub out: PathBuf,
    pub data: DataSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub reg: RegSection,
    pub test: TestSection,
    pub ablate: AblateSection,
    pub convlab: ConvlabSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory written by `gen-data`.
    pub root: PathBuf,
    pub extent: usize,
    pub per_domain: usize,
    pub support: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub depth: usize,
    pub base_channels: usize,
    /// Index into the layer sequence where the head begins; defaults to the
    /// start of the decoder.
    pub split_point: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Full,
    MflOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    Poly,
    Theorem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderName {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub mode: ModeName,
    pub schedule: ScheduleName,
    /// Inner (head) step size, or its base value under poly decay.
    pub alpha: f64,
    /// Outer step size, or its base value under poly decay.
    pub beta: f64,
    /// Theorem schedule only.
    pub lipschitz: f64,
    pub c1: f64,
    pub c2: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub mil_order: OrderName,
    pub push_inner: bool,
    pub reg_in_outer2: bool,
    pub hvp_eps: f64,
    /// Checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegSection {
    pub enabled: bool,
    /// Triplet margin λ₁.
    pub margin: f64,
    /// Regularizer weight λ₂.
    pub weight: f64,
    /// Memory-bank capacity N per class and scale.
    pub capacity: usize,
    /// Tapped pyramid levels; all decoder levels when absent.
    pub taps: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSection {
    pub shots: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub finetune: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub capacity: Vec<usize>,
    pub finetune_depth: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvlabSection {
    pub seed: u64,
    pub omega_dim: usize,
    pub theta_dim: usize,
    pub condition: f64,
    pub sigma: f64,
    pub repeats: usize,
    pub horizons: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataSection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
            reg: RegSection::default(),
            test: TestSection::default(),
            ablate: AblateSection::default(),
            convlab: ConvlabSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { root: PathBuf::from("data"), extent: 16, per_domain: 40, support: 5, test: 10 }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkConfig::default();
        Self { depth: n.depth, base_channels: n.base_channels, split_point: None }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 300,
            mode: ModeName::Full,
            schedule: ScheduleName::Poly,
            alpha: 0.1,
            beta: 0.01,
            lipschitz: 1.0,
            c1: 1.0,
            c2: 1.0,
            batch_size: 2,
            augment: true,
            mil_order: OrderName::First,
            push_inner: false,
            reg_in_outer2: false,
            hvp_eps: crate::autodiff::DEFAULT_HVP_EPS,
            checkpoint_every: 100,
        }
    }
}

impl Default for RegSection {
    fn default() -> Self {
        let r = RegConfig::default();
        Self { enabled: true, margin: r.margin, weight: r.weight, capacity: crate::membank::DEFAULT_CAPACITY, taps: None }
    }
}

impl Default for TestSection {
    fn default() -> Self {
        Self { shots: vec![0, 1, 5], steps: 20, lr: 0.001, finetune: "last3".into() }
    }
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            lambda1: vec![1.2, 1.35, 1.5, 1.65],
            lambda2: vec![0.01, 0.05, 0.1, 0.5],
            capacity: vec![1, 10, 100, 1000],
            finetune_depth: vec!["none".into(), "up:1".into(), "up:2".into(), "up:3".into(), "all".into()],
        }
    }
}

impl Default for ConvlabSection {
    fn default() -> Self {
        Self {
            seed: 2024,
            omega_dim: 6,
            theta_dim: 4,
            condition: 4.0,
            sigma: 0.5,
            repeats: 20,
            horizons: vec![100, 1000, 10_000, 100_000],
        }
    }
}

fn in_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn rate(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
    }
    Ok(())
}

fn capacity(v: usize) -> Result<()> {
    if v == 0 || v > MAX_CAPACITY {
        return Err(Error::Config(format!("bank capacity {v} outside 1..={MAX_CAPACITY}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.data_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.network_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        rate("train.alpha", t.alpha)?;
        rate("train.beta", t.beta)?;
        if t.batch_size == 0 || t.batch_size > self.data.per_domain {
            return Err(Error::Config(format!(
                "train.batch_size {} must lie in 1..={} (data.per_domain)",
                t.batch_size, self.data.per_domain
            )));
        }
        if !(t.hvp_eps > 0.0 && t.hvp_eps.is_finite()) {
            return Err(Error::Config(format!("train.hvp_eps must be positive, got {}", t.hvp_eps)));
        }
        if t.schedule == ScheduleName::Theorem && !(t.lipschitz > 0.0) {
            return Err(Error::Config("theorem schedule needs train.lipschitz > 0".into()));
        }
        in_range("reg.margin", self.reg.margin, MARGIN_RANGE)?;
        in_range("reg.weight", self.reg.weight, REG_WEIGHT_RANGE)?;
        capacity(self.reg.capacity)?;
        if let Some(taps) = &self.reg.taps {
            if let Some(&l) = taps.iter().find(|&&l| l >= self.network.depth) {
                return Err(Error::Config(format!("reg.taps level {l} not below depth {}", self.network.depth)));
            }
        }
        if self.test.shots.is_empty() {
            return Err(Error::Config("test.shots is empty".into()));
        }
        if let Some(&s) = self.test.shots.iter().find(|&&s| s > self.data.support) {
            return Err(Error::Config(format!("{s} shots exceed the support size {}", self.data.support)));
        }
        rate("test.lr", self.test.lr)?;
        FinetuneMask::parse(&self.test.finetune)?;
        self.ablate.lambda1.iter().try_for_each(|&v| in_range("ablate.lambda1", v, MARGIN_RANGE))?;
        self.ablate.lambda2.iter().try_for_each(|&v| in_range("ablate.lambda2", v, REG_WEIGHT_RANGE))?;
        self.ablate.capacity.iter().try_for_each(|&v| capacity(v))?;
        self.ablate.finetune_depth.iter().try_for_each(|m| FinetuneMask::parse(m).map(|_| ()))?;
        let c = &self.convlab;
        if c.omega_dim == 0 || c.theta_dim == 0 || !(c.condition >= 1.0) || c.repeats == 0 {
            return Err(Error::Config("convlab needs positive dimensions and repeats, condition >= 1".into()));
        }
        if c.horizons.len() < 3 || c.horizons.contains(&0) {
            return Err(Error::Config("convlab needs at least three positive horizons".into()));
        }
        rate("convlab.sigma", c.sigma)
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seed: self.seed,
            extent: self.data.extent,
            per_domain: self.data.per_domain,
            support: self.data.support,
            test: self.data.test,
            ..DataConfig::default()
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig { depth: self.network.depth, base_channels: self.network.base_channels, ..NetworkConfig::default() }
    }

    pub fn reg_config(&self) -> RegConfig {
        if !self.reg.enabled {
            return RegConfig::disabled();
        }
        RegConfig { margin: self.reg.margin, weight: self.reg.weight, taps: self.reg.taps.clone() }
    }

    pub fn augment(&self) -> Augment {
        if self.train.augment {
            Augment::default()
        } else {
            Augment::NONE
        }
    }

    pub fn finetune_mask(&self) -> Result<FinetuneMask> {
        FinetuneMask::parse(&self.test.finetune)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let schedule = match t.schedule {
            ScheduleName::Poly => LRSchedule::poly(t.alpha, t.beta, t.iterations),
            ScheduleName::Theorem => {
                LRSchedule::Theorem { lipschitz: t.lipschitz, c1: t.c1, c2: t.c2, horizon: t.iterations }
            }
        };
        TrainConfig {
            mode: match t.mode {
                ModeName::Full => TrainMode::Full,
                ModeName::MflOnly => TrainMode::MflOnly,
            },
            schedule,
            reg: self.reg_config(),
            reg_in_outer2: t.reg_in_outer2,
            mil_order: match t.mil_order {
                OrderName::First => MilOrder::First,
                OrderName::Second => MilOrder::second(),
            },
            hvp_eps: t.hvp_eps,
            bank_capacity: self.reg.capacity,
            push_inner: t.push_inner,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.train.mode = ModeName::MflOnly;
        c.reg.taps = Some(vec![0, 2]);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_and_enums() {
        let c = RunConfig::from_toml("[train]\nmode = \"mfl-only\"\niterations = 5\n[reg]\ncapacity = 10\n").unwrap();
        assert_eq!(c.train.iterations, 5);
        assert_eq!(c.train_config().mode, TrainMode::MflOnly);
        assert_eq!(c.train_config().bank_capacity, 10);
        assert_eq!(c.test, TestSection::default());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[reg]\ncapacity = 0",
            "[reg]\nmargin = -1.0",
            "[reg]\nweight = 11.0",
            "[test]\nshots = [6]",
            "[test]\nfinetune = \"middle\"",
            "[train]\nalpha = -0.1",
            "[data]\nextent = 8",
            "[convlab]\nhorizons = [10, 100]",
            "unknown = 1",
        ] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn disabled_reg_has_zero_weight() {
        let c = RunConfig::from_toml("[reg]\nenabled = false").unwrap();
        assert_eq!(c.train_config().reg.weight, 0.0);
    }
}
