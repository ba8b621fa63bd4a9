//! Commands behind the CLI: data generation, meta-training, few-shot
//! meta-testing, ablation sweeps and the convergence lab.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.toml        verbatim config snapshot
//! <out>/metrics.csv        one row per iteration
//! <out>/validation.csv     held-in Dice at each checkpoint
//! <out>/checkpoint/        params.manifest, theta/<id>.dmt, head/<id>.dmt, bank/
//! <out>/meta_test.csv      per-class metrics for every shot count
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::convlab::{run_rate_experiment, run_trace, verify_bound, BoundReport, QuadraticBilevel, RateConfig, RatePoint, SLOPE_TOLERANCE};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, MetricReport, CSV_HEADER};
use crate::io::{self, format_shape, parse_shape, Manifest};
use crate::membank::MemoryBank;
use crate::meta::pool::{DomainPool, SegBatch};
use crate::meta::seg::{dumeta_iteration, meta_test_finetune, IterationLog, MetaState, TrainConfig, TrainMode};
use crate::meta::LRSchedule;
use crate::network::{FinetuneMask, ParamPartition, UNet};
use crate::optim::SgdConfig;
use crate::params::ParamSet;
use crate::synthgen::{build_pool, Dataset, Sample, DATASET_MANIFEST};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const VALIDATION_CSV: &str = "validation.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const META_TEST_CSV: &str = "meta_test.csv";
const CHECKPOINT_MANIFEST: &str = "params.manifest";
const VALIDATION_SAMPLES: usize = 4;

const METRICS_HEADER: &str = "t,inner_domain,alpha,beta,inner_loss,outer1_loss,outer2_loss,theta_grad_norm,phi_grad_norm";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        io::ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn optional(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn metrics_row(log: &IterationLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        log.t,
        log.inner_domain,
        log.alpha,
        log.beta,
        log.inner_loss,
        log.outer1_loss,
        optional(log.outer2_loss),
        log.theta_grad_norm,
        optional(log.phi_grad_norm)
    )
}

/// Writes the synthetic dataset to `root` and returns its tree hash.
pub fn cmd_gen_data(config: &RunConfig, root: &Path) -> Result<String> {
    let dataset = build_pool(&config.data_config())?;
    if root.exists() {
        // stale samples from a larger previous run would survive a plain overwrite
        for d in dataset.train.iter().map(|d| &d.spec.name).chain([&dataset.heldout.spec.name]) {
            let dir = root.join(d);
            if dir.is_dir() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
    }
    dataset.save(root)?;
    io::tree_hash(root)
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let root = &config.data.root;
    if !root.join(DATASET_MANIFEST).is_file() {
        return Err(Error::Config(format!("no dataset at {} (run gen-data first)", root.display())));
    }
    Dataset::load(root)
}

/// Network, partition and data shared by training and testing.
pub struct Experiment {
    pub net: UNet,
    pub partition: ParamPartition,
    pub dataset: Dataset,
}

impl Experiment {
    pub fn new(config: &RunConfig, dataset: Dataset) -> Result<Self> {
        let net = UNet::new(config.network_config())?;
        let split = config.network.split_point.unwrap_or_else(|| net.default_split_point());
        let partition = net.split_params(split)?;
        Ok(Self { net, partition, dataset })
    }

    pub fn pool(&self, config: &RunConfig) -> Result<DomainPool> {
        DomainPool::new(self.dataset.train.clone(), config.train.batch_size, config.augment())
    }

    /// Mean Dice of each training domain on its first few samples.
    pub fn validate(&self, params: &ParamSet) -> Result<Vec<(String, f64)>> {
        self.dataset
            .train
            .iter()
            .map(|d| {
                let n = d.samples.len().min(VALIDATION_SAMPLES);
                Ok((d.spec.name.clone(), evaluate_run(&self.net, params, &d.samples[..n])?.mean_dice()))
            })
            .collect()
    }

    /// Fine-tunes the head on the first `shots` support samples, then scores
    /// the held-out test split. Zero shots evaluates the head as given.
    pub fn meta_test(&self, config: &RunConfig, ckpt: &Checkpoint, shots: usize, mask: FinetuneMask) -> Result<MetricReport> {
        let support = &self.dataset.heldout.support;
        if shots > support.len() {
            return Err(Error::InvalidArgument(format!("{shots} shots exceed the support size {}", support.len())));
        }
        let head = if shots == 0 {
            ckpt.head.clone()
        } else {
            let samples: Vec<&Sample> = support[..shots].iter().collect();
            let batch = SegBatch::from_samples(&samples)?;
            let ids = self.net.finetune_ids(&self.partition, mask)?;
            meta_test_finetune(
                &self.net,
                &ckpt.theta,
                &ckpt.head,
                &batch,
                config.test.steps,
                &ids,
                config.test.lr,
                SgdConfig::nesterov(),
            )?
        };
        evaluate_run(&self.net, &ckpt.theta.merged(&head)?, &self.dataset.heldout.test)
    }
}

/// Encoder and the head a meta-test starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub theta: ParamSet,
    pub head: ParamSet,
    pub t: usize,
}

fn write_params(dir: &Path, group: &str, params: &ParamSet, m: &mut Manifest) -> Result<()> {
    for (id, t) in params.iter() {
        m.set(format!("{group}:{id}"), format_shape(t.shape()));
        io::write_dmt(&dir.join(group).join(format!("{id}.dmt")), t)?;
    }
    Ok(())
}

fn read_params(dir: &Path, group: &str, m: &Manifest, origin: &Path) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (id, shape) in m.with_prefix(&format!("{group}:")) {
        let shape = parse_shape(shape).ok_or_else(|| Error::format(origin, format!("bad shape for `{id}`")))?;
        let t = io::read_dmt(&dir.join(group).join(format!("{id}.dmt")))?;
        if t.shape() != shape {
            return Err(Error::format(origin, format!("`{id}` has shape {:?}, manifest says {shape:?}", t.shape())));
        }
        out.insert(id, t);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_state(state: &MetaState, mode: TrainMode) -> Self {
        Self { theta: state.theta.clone(), head: state.head_init(mode).clone(), t: state.t }
    }

    /// The values a save/load round trip yields (storage is `f32`).
    pub fn stored(&self) -> Self {
        let r = |p: &ParamSet| p.map(|t| t.map(|v| v as f32 as f64));
        Self { theta: r(&self.theta), head: r(&self.head), t: self.t }
    }

    /// Untrained parameters, the starting point of the random-init baseline.
    pub fn initial(exp: &Experiment, seed: u64) -> Result<Self> {
        let (theta, head) = exp.partition.split(&exp.net.init_params(seed))?;
        Ok(Self { theta, head, t: 0 })
    }

    pub fn save(&self, dir: &Path, bank: Option<&MemoryBank>) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let mut m = Manifest::new();
        m.set("format", "dumeta-checkpoint-1");
        m.set("t", self.t);
        write_params(&tmp, "theta", &self.theta, &mut m)?;
        write_params(&tmp, "head", &self.head, &mut m)?;
        if let Some(bank) = bank {
            bank.save(&tmp.join("bank"))?;
        }
        m.write(&tmp.join(CHECKPOINT_MANIFEST))?;
        // swap in only once complete, so a crash keeps the previous checkpoint
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let origin = dir.join(CHECKPOINT_MANIFEST);
        let m = Manifest::read(&origin)?;
        if m.get("format") != Some("dumeta-checkpoint-1") {
            return Err(Error::format(&origin, "not a checkpoint manifest"));
        }
        Ok(Self {
            t: m.parse_value("t", &origin)?,
            theta: read_params(dir, "theta", &m, &origin)?,
            head: read_params(dir, "head", &m, &origin)?,
        })
    }

    /// Fails unless the parameters match the experiment's partition exactly.
    pub fn check(&self, exp: &Experiment) -> Result<()> {
        let (theta, head) = exp.partition.split(&exp.net.init_params(0))?;
        for (group, want, got) in [("encoder", &theta, &self.theta), ("head", &head, &self.head)] {
            if !want.congruent(got) {
                return Err(Error::Config(format!("checkpoint {group} parameters do not match the configured network")));
            }
        }
        Ok(())
    }
}

/// Runs meta-training in memory. `on_iteration` sees every log row.
pub fn train(
    exp: &Experiment,
    config: &RunConfig,
    train_config: &TrainConfig,
    mut on_iteration: impl FnMut(&MetaState, &IterationLog) -> Result<()>,
) -> Result<MetaState> {
    let pool = exp.pool(config)?;
    let mut state = MetaState::new(&exp.net, &exp.partition, config.seed, train_config)?;
    for _ in 0..config.train.iterations {
        let log = dumeta_iteration(&exp.net, &mut state, &pool, train_config)?;
        on_iteration(&state, &log)?;
    }
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub checkpoint: Checkpoint,
    pub iterations: usize,
    pub metrics_hash: String,
}

/// Meta-trains into `config.out`. On divergence the last periodic checkpoint
/// stays in place and the error is returned.
pub fn cmd_meta_train(config: &RunConfig) -> Result<TrainSummary> {
    let exp = Experiment::new(config, load_dataset(config)?)?;
    meta_train_with(&exp, config)
}

pub fn meta_train_with(exp: &Experiment, config: &RunConfig) -> Result<TrainSummary> {
    let out = &config.out;
    io::ensure_dir(out)?;
    write_text(&out.join(CONFIG_SNAPSHOT), &config.to_toml())?;
    let tc = config.train_config();
    let mode = tc.mode;
    let ckpt_dir = out.join(CHECKPOINT_DIR);

    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut validation = String::from("t,domain,mean_dice\n");
    let initial = Checkpoint::initial(exp, config.seed)?;
    initial.save(&ckpt_dir, None)?;

    let record_validation = |state: &MetaState, validation: &mut String| -> Result<()> {
        for (domain, d) in exp.validate(&state.theta.merged(state.head_init(mode))?)? {
            let _ = writeln!(validation, "{},{domain},{d}", state.t);
        }
        Ok(())
    };

    let every = config.train.checkpoint_every;
    let result = train(exp, config, &tc, |state, log| {
        metrics.push_str(&metrics_row(log));
        metrics.push('\n');
        if every > 0 && state.t % every == 0 && state.t < config.train.iterations {
            Checkpoint::from_state(state, mode).save(&ckpt_dir, Some(&state.bank))?;
            record_validation(state, &mut validation)?;
        }
        Ok(())
    });
    write_text(&out.join(METRICS_CSV), &metrics)?;
    let state = match result {
        Ok(s) => s,
        Err(e) => {
            write_text(&out.join(VALIDATION_CSV), &validation)?;
            return Err(e);
        }
    };
    record_validation(&state, &mut validation)?;
    write_text(&out.join(VALIDATION_CSV), &validation)?;
    let checkpoint = Checkpoint::from_state(&state, mode);
    checkpoint.save(&ckpt_dir, Some(&state.bank))?;
    Ok(TrainSummary {
        run_dir: out.clone(),
        checkpoint: checkpoint.stored(),
        iterations: state.t,
        metrics_hash: io::file_hash(&out.join(METRICS_CSV))?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotReport {
    pub shots: usize,
    pub report: MetricReport,
}

pub fn run_id(config: &RunConfig) -> String {
    config.out.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
}

fn report_csv(run: &str, domain: &str, reports: &[ShotReport]) -> String {
    let mut csv = format!("{CSV_HEADER}\n");
    for r in reports {
        for row in r.report.csv_rows(run, domain, r.shots) {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    csv
}

/// Meta-tests a checkpoint for every configured shot count and writes
/// `meta_test.csv` into `config.out`.
pub fn cmd_meta_test(config: &RunConfig, checkpoint: &Path) -> Result<Vec<ShotReport>> {
    let exp = Experiment::new(config, load_dataset(config)?)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    meta_test_with(&exp, config, &ckpt)
}

pub fn meta_test_with(exp: &Experiment, config: &RunConfig, ckpt: &Checkpoint) -> Result<Vec<ShotReport>> {
    ckpt.check(exp)?;
    let mask = config.finetune_mask()?;
    let reports: Vec<ShotReport> = config
        .test
        .shots
        .iter()
        .map(|&shots| Ok(ShotReport { shots, report: exp.meta_test(config, ckpt, shots, mask)? }))
        .collect::<Result<_>>()?;
    let domain = &exp.dataset.heldout.spec.name;
    write_text(&config.out.join(META_TEST_CSV), &report_csv(&run_id(config), domain, &reports))?;
    let mut summary = String::new();
    for r in &reports {
        let _ = writeln!(summary, "{} shot(s)\n{}", r.shots, r.report.summary());
    }
    write_text(&config.out.join("meta_test.txt"), &summary)?;
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Lambda1,
    Lambda2,
    Capacity,
    FinetuneDepth,
}

impl AblationAxis {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "lambda1" => Ok(Self::Lambda1),
            "lambda2" => Ok(Self::Lambda2),
            "capacity" => Ok(Self::Capacity),
            "finetune-depth" => Ok(Self::FinetuneDepth),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lambda1 => "lambda1",
            Self::Lambda2 => "lambda2",
            Self::Capacity => "capacity",
            Self::FinetuneDepth => "finetune-depth",
        }
    }

    /// Configured sweep values, rendered, each with the config it runs under.
    fn legs(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let a = &base.ablate;
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Lambda1 => a.lambda1.iter().map(|&v| (v.to_string(), with(&|c| c.reg.margin = v))).collect(),
            Self::Lambda2 => a.lambda2.iter().map(|&v| (v.to_string(), with(&|c| c.reg.weight = v))).collect(),
            Self::Capacity => a.capacity.iter().map(|&v| (v.to_string(), with(&|c| c.reg.capacity = v))).collect(),
            Self::FinetuneDepth => {
                a.finetune_depth.iter().map(|v| (v.clone(), with(&|c| c.test.finetune = v.clone()))).collect()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationLeg {
    pub value: String,
    pub reports: Vec<ShotReport>,
}

/// One meta-test per axis value. Fine-tune depth shares one trained
/// checkpoint; the other axes retrain per value.
pub fn cmd_ablate(config: &RunConfig, axis: AblationAxis) -> Result<Vec<AblationLeg>> {
    let legs = axis.legs(config);
    if legs.is_empty() {
        return Err(Error::Config(format!("no values configured for ablation axis `{}`", axis.name())));
    }
    for (_, c) in &legs {
        c.validate()?;
    }
    let exp = Experiment::new(config, load_dataset(config)?)?;
    let root = config.out.join(format!("ablate-{}", axis.name()));
    let shared = if axis == AblationAxis::FinetuneDepth {
        let mut c = config.clone();
        c.out = root.join("train");
        Some(meta_train_with(&exp, &c)?.checkpoint)
    } else {
        None
    };
    let mut out = Vec::new();
    let mut csv = format!("{CSV_HEADER}\n");
    for (value, mut c) in legs {
        c.out = root.join(value.replace([':', '/'], "_"));
        let ckpt = match &shared {
            Some(ck) => ck.clone(),
            None => meta_train_with(&exp, &c)?.checkpoint,
        };
        let reports = meta_test_with(&exp, &c, &ckpt)?;
        let run = format!("{}={value}", axis.name());
        for r in &reports {
            for row in r.report.csv_rows(&run, &exp.dataset.heldout.spec.name, r.shots) {
                csv.push_str(&row);
                csv.push('\n');
            }
        }
        out.push(AblationLeg { value, reports });
    }
    write_text(&config.out.join(format!("ablate_{}.csv", axis.name())), &csv)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvlabOutcome {
    pub noisy: Vec<RatePoint>,
    pub deterministic: Vec<RatePoint>,
    pub mfl: BoundReport,
    pub mil: BoundReport,
    /// Fit on a constant trace; must fail.
    pub control: BoundReport,
    /// The noiseless ensemble lies strictly below the noisy one at every
    /// horizon.
    pub deterministic_faster: bool,
}

impl ConvlabOutcome {
    pub fn pass(&self) -> bool {
        self.mfl.pass && self.mil.pass && !self.control.pass && self.deterministic_faster
    }

    pub fn render(&self) -> String {
        let mut s = String::from("horizon,theta_min_grad_sq,phi_min_grad_sq,rho,theta_noiseless,phi_noiseless\n");
        for (p, d) in self.noisy.iter().zip(&self.deterministic) {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:.4},{:e},{:e}",
                p.horizon, p.theta_min_grad_sq, p.phi_min_grad_sq, p.rho, d.theta_min_grad_sq, d.phi_min_grad_sq
            );
        }
        let _ = writeln!(s, "{}", self.mfl.render("encoder (MFL)"));
        let _ = writeln!(s, "{}", self.mil.render("head init (MIL)"));
        let _ = writeln!(s, "{}", self.control.render("constant control"));
        let _ = writeln!(s, "noiseless strictly faster: {}", self.deterministic_faster);
        let _ = writeln!(s, "overall: {}", if self.pass() { "PASS" } else { "FAIL" });
        s
    }
}

/// Runs the rate experiment on the configured quadratic instance and writes
/// `convlab_report.txt` and `convlab_trace.csv` (first horizon, first
/// repeat) into `config.out`.
pub fn cmd_convlab(config: &RunConfig) -> Result<ConvlabOutcome> {
    let c = &config.convlab;
    let problem = QuadraticBilevel::random(c.seed, c.omega_dim, c.theta_dim, c.condition)?;
    let rc = RateConfig::for_problem(&problem, c.sigma, c.repeats, c.seed);
    let noisy = run_rate_experiment(&problem, &c.horizons, &rc)?;
    let deterministic = run_rate_experiment(&problem, &c.horizons, &RateConfig { sigma: 0.0, repeats: 1, ..rc })?;
    let pts = |f: fn(&RatePoint) -> f64| noisy.iter().map(|p| (p.horizon, f(p))).collect::<Vec<_>>();
    let mfl = verify_bound(&pts(|p| p.theta_min_grad_sq), SLOPE_TOLERANCE)?;
    let mil = verify_bound(&pts(|p| p.phi_min_grad_sq), SLOPE_TOLERANCE)?;
    let first = noisy.first().map_or(1.0, |p| p.theta_min_grad_sq);
    let control = verify_bound(&noisy.iter().map(|p| (p.horizon, first)).collect::<Vec<_>>(), SLOPE_TOLERANCE)?;
    let deterministic_faster = noisy.iter().zip(&deterministic).all(|(n, d)| {
        d.theta_min_grad_sq < n.theta_min_grad_sq && d.phi_min_grad_sq < n.phi_min_grad_sq
    });
    let outcome = ConvlabOutcome { noisy, deterministic, mfl, mil, control, deterministic_faster };

    io::ensure_dir(&config.out)?;
    write_text(&config.out.join("convlab_report.txt"), &outcome.render())?;
    let schedule = LRSchedule::Theorem { lipschitz: problem.lipschitz(), c1: rc.c1, c2: rc.c2, horizon: c.horizons[0] };
    let trace = run_trace(&problem, &schedule, c.sigma, c.seed)?;
    write_text(&config.out.join("convlab_trace.csv"), &trace.to_csv())?;
    Ok(outcome)
}
