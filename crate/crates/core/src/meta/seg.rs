//! The segmentation instance of the bilevel problem, the training loop and
//! the few-shot meta-test protocol.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pool::{DomainPool, SegBatch};
use super::{inner_step, mfl_hypergradient, mil_hypergradient, BilevelObjective, LRSchedule, LossGrads, MilOrder};
use crate::autodiff::{Tape, Var, DEFAULT_HVP_EPS};
use crate::error::{Error, Result};
use crate::labels::Tissue;
use crate::losses::{
    class_pool, deep_supervised_loss, downsample_labels, outer1_loss, reg_loss, PooledValues, RegConfig, ScaleFeatures,
};
use crate::membank::{MemoryBank, Prototypes};
use crate::network::{ParamPartition, UNet};
use crate::optim::{Sgd, SgdConfig};
use crate::params::ParamSet;

/// Pooled class features of one batch, per tapped pyramid level.
pub type BatchFeatures = Vec<(usize, PooledValues)>;

/// Deep-supervised Dice+CE on a U-Net, with the prototype regularizer on the
/// first outer loss.
pub struct SegObjective<'a> {
    pub net: &'a UNet,
    pub reg: RegConfig,
    pub prototypes: Prototypes,
    /// Adds the regularizer to the head-initialization loss as well.
    pub reg_in_outer2: bool,
}

struct Evaluation {
    grads: LossGrads,
    features: Vec<BatchFeatures>,
}

impl<'a> SegObjective<'a> {
    pub fn new(net: &'a UNet, reg: RegConfig, prototypes: Prototypes) -> Self {
        Self { net, reg, prototypes, reg_in_outer2: false }
    }

    fn evaluate(&self, theta: &ParamSet, omega: &ParamSet, batches: &[SegBatch], with_reg: bool, pool: bool) -> Result<Evaluation> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("no batches to evaluate".into()));
        }
        let mut tape = Tape::new();
        let vars = tape.register(&theta.merged(omega)?)?;
        let use_reg = with_reg && self.reg.weight > 0.0;
        let mut seg_terms = Vec::with_capacity(batches.len());
        let mut scale_feats: Vec<Vec<ScaleFeatures>> = Vec::with_capacity(batches.len());
        for b in batches {
            let x = tape.constant(b.images.clone())?;
            let pyramid = self.net.forward(&mut tape, &vars, x)?;
            seg_terms.push(deep_supervised_loss(&mut tape, &pyramid, &b.labels)?);
            let mut per_scale = Vec::new();
            if use_reg || pool {
                for s in pyramid.scales.iter().filter(|s| self.reg.taps_level(s.level)) {
                    let labels = downsample_labels(&b.labels, 1 << s.level)?;
                    per_scale.push(ScaleFeatures { level: s.level, classes: class_pool(&mut tape, s.features, &labels)? });
                }
            }
            scale_feats.push(per_scale);
        }
        let seg = mean(&mut tape, &seg_terms)?;
        let total = if use_reg {
            let reg = reg_loss(&mut tape, &scale_feats, &self.prototypes, self.reg.margin)?;
            outer1_loss(&mut tape, seg, reg, self.reg.weight)?
        } else {
            seg
        };
        let loss = tape.value(total).item()?;
        let mut grads = tape.backward(total)?;
        let theta_grad = grads.restrict_to(theta)?;
        grads = grads.restrict_to(omega)?;
        let features = if pool {
            scale_feats.iter().map(|per| per.iter().map(|sf| (sf.level, sf.classes.values(&tape))).collect()).collect()
        } else {
            Vec::new()
        };
        Ok(Evaluation { grads: LossGrads { loss, theta: theta_grad, omega: grads }, features })
    }

    /// Pooled features of one batch without gradients.
    pub fn pooled(&self, theta: &ParamSet, omega: &ParamSet, batch: &SegBatch) -> Result<BatchFeatures> {
        let mut tape = Tape::new();
        let vars = tape.register(&theta.merged(omega)?)?;
        let x = tape.constant(batch.images.clone())?;
        let pyramid = self.net.forward(&mut tape, &vars, x)?;
        let mut out = Vec::new();
        for s in pyramid.scales.iter().filter(|s| self.reg.taps_level(s.level)) {
            let labels = downsample_labels(&batch.labels, 1 << s.level)?;
            out.push((s.level, class_pool(&mut tape, s.features, &labels)?.values(&tape)));
        }
        Ok(out)
    }
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    let s = tape.add_many(terms)?;
    tape.scale(s, 1.0 / terms.len() as f64)
}

impl BilevelObjective for SegObjective<'_> {
    type Batch = SegBatch;
    type Aux = Vec<BatchFeatures>;

    fn inner(&self, theta: &ParamSet, omega: &ParamSet, batch: &SegBatch) -> Result<LossGrads> {
        Ok(self.evaluate(theta, omega, std::slice::from_ref(batch), false, false)?.grads)
    }

    fn outer1(&self, theta: &ParamSet, omega: &ParamSet, batches: &[SegBatch]) -> Result<(LossGrads, Self::Aux)> {
        let e = self.evaluate(theta, omega, batches, true, true)?;
        Ok((e.grads, e.features))
    }

    fn outer2(&self, theta: &ParamSet, omega: &ParamSet, batches: &[SegBatch]) -> Result<LossGrads> {
        Ok(self.evaluate(theta, omega, batches, self.reg_in_outer2, false)?.grads)
    }
}

/// Which outer loops run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Encoder and head-initialization updates.
    Full,
    /// Encoder update only; the head carries its inner-step result forward.
    MflOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub schedule: LRSchedule,
    pub reg: RegConfig,
    pub reg_in_outer2: bool,
    pub mil_order: MilOrder,
    pub hvp_eps: f64,
    pub bank_capacity: usize,
    /// Also push features of the inner batch into the bank.
    pub push_inner: bool,
    pub optimizer: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Full,
            schedule: LRSchedule::poly(0.01, 0.01, 1000),
            reg: RegConfig::default(),
            reg_in_outer2: false,
            mil_order: MilOrder::First,
            hvp_eps: DEFAULT_HVP_EPS,
            bank_capacity: crate::membank::DEFAULT_CAPACITY,
            push_inner: false,
            optimizer: SgdConfig::nesterov(),
        }
    }
}

impl TrainConfig {
    /// `(α, β)` for the zero-based iteration `t`.
    pub fn rates(&self, t: usize) -> Result<(f64, f64)> {
        match self.schedule {
            LRSchedule::Poly { .. } => self.schedule.rates(t),
            LRSchedule::Theorem { .. } => self.schedule.rates(t + 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaState {
    pub theta: ParamSet,
    /// Head meta-initialization.
    pub phi: ParamSet,
    /// Working head; equals φ at the start of a full iteration.
    pub omega: ParamSet,
    pub t: usize,
    pub theta_opt: Sgd,
    pub phi_opt: Sgd,
    pub bank: MemoryBank,
    pub rng: ChaCha8Rng,
}

impl MetaState {
    pub fn new(net: &UNet, partition: &ParamPartition, seed: u64, config: &TrainConfig) -> Result<Self> {
        let (theta, omega) = partition.split(&net.init_params(seed))?;
        Ok(Self {
            theta,
            phi: omega.clone(),
            omega,
            t: 0,
            theta_opt: Sgd::new(config.optimizer),
            phi_opt: Sgd::new(config.optimizer),
            bank: MemoryBank::new(config.bank_capacity)?,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_d0_e7a),
        })
    }

    /// Head that meta-test starts from.
    pub fn head_init(&self, mode: TrainMode) -> &ParamSet {
        match mode {
            TrainMode::Full => &self.phi,
            TrainMode::MflOnly => &self.omega,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub t: usize,
    pub inner_domain: usize,
    pub alpha: f64,
    pub beta: f64,
    pub inner_loss: f64,
    pub outer1_loss: f64,
    pub outer2_loss: Option<f64>,
    pub theta_grad_norm: f64,
    pub phi_grad_norm: Option<f64>,
}

const DIVERGENCE_NORM: f64 = 1e12;

fn guard(what: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_NORM {
        return Err(Error::Divergence(format!("{what} reached {value}")));
    }
    Ok(())
}

fn push_features(bank: &mut MemoryBank, feats: &BatchFeatures) -> Result<()> {
    for (level, pooled) in feats {
        for tissue in Tissue::ALL {
            if let Some(f) = pooled.get(tissue) {
                bank.push(tissue, *level, f)?;
            }
        }
    }
    Ok(())
}

/// One meta-training iteration.
///
/// Seeds ω from φ (full mode), takes the inner step on one domain, updates θ
/// from the hypergradient on the two other domains, updates φ on fresh
/// batches of those domains, and finally records the outer-batch features in
/// the bank.
pub fn dumeta_iteration(net: &UNet, state: &mut MetaState, pool: &DomainPool, config: &TrainConfig) -> Result<IterationLog> {
    let (alpha, beta) = config.rates(state.t)?;
    let omega = match config.mode {
        TrainMode::Full => state.phi.clone(),
        TrainMode::MflOnly => state.omega.clone(),
    };
    let roles = pool.assign(&mut state.rng);
    let inner_batch = pool.batch(roles.inner, &mut state.rng)?;
    let outer: Vec<SegBatch> = roles.outer.iter().map(|&d| pool.batch(d, &mut state.rng)).collect::<Result<_>>()?;

    let mut obj = SegObjective::new(net, config.reg.clone(), state.bank.snapshot());
    obj.reg_in_outer2 = config.reg_in_outer2;
    let numeric = |e: Error| match e {
        Error::NonFinite(m) => Error::Divergence(m),
        e => e,
    };

    let inner = inner_step(&obj, &state.theta, &omega, &inner_batch, alpha).map_err(numeric)?;
    guard("inner loss", inner.loss)?;
    let hg = mfl_hypergradient(&obj, &state.theta, &omega, &inner.omega_star, &inner_batch, &outer, alpha, config.hvp_eps)
        .map_err(numeric)?;
    guard("outer loss", hg.outer_loss)?;
    let theta_grad_norm = hg.total.norm();
    guard("encoder hypergradient norm", theta_grad_norm)?;

    let inner_feats = if config.push_inner {
        Some(obj.pooled(&state.theta, &inner.omega_star, &inner_batch)?)
    } else {
        None
    };

    let mut outer2_loss = None;
    let mut phi_grad_norm = None;
    let mut next_phi = None;
    if config.mode == TrainMode::Full {
        let fresh: Vec<SegBatch> = roles.outer.iter().map(|&d| pool.batch(d, &mut state.rng)).collect::<Result<_>>()?;
        let g = mil_hypergradient(
            &obj,
            &state.theta,
            &omega,
            &inner.omega_star,
            &inner_batch,
            &fresh,
            alpha,
            config.mil_order,
            config.hvp_eps,
        )
        .map_err(numeric)?;
        guard("head loss", g.outer_loss)?;
        let norm = g.total.norm();
        guard("head-initialization gradient norm", norm)?;
        outer2_loss = Some(g.outer_loss);
        phi_grad_norm = Some(norm);
        if beta > 0.0 {
            next_phi = Some(state.phi_opt.step(&state.phi, &g.total, beta)?);
        }
    }

    if beta > 0.0 {
        state.theta = state.theta_opt.step(&state.theta, &hg.total, beta)?;
    }
    match config.mode {
        TrainMode::Full => {
            if let Some(phi) = next_phi {
                state.phi = phi;
            }
            state.omega = state.phi.clone();
        }
        TrainMode::MflOnly => {
            state.omega = inner.omega_star.clone();
            state.phi = state.omega.clone();
        }
    }

    for feats in &hg.aux {
        push_features(&mut state.bank, feats)?;
    }
    if let Some(feats) = &inner_feats {
        push_features(&mut state.bank, feats)?;
    }

    let log = IterationLog {
        t: state.t,
        inner_domain: roles.inner,
        alpha,
        beta,
        inner_loss: inner.loss,
        outer1_loss: hg.outer_loss,
        outer2_loss,
        theta_grad_norm,
        phi_grad_norm,
    };
    state.t += 1;
    Ok(log)
}

/// Adapts the head on a labeled support set with the encoder frozen.
///
/// ω starts at φ; only the ids in `trainable` move, for `steps` Nesterov
/// steps on the deep-supervised Dice+CE loss.
pub fn meta_test_finetune(
    net: &UNet,
    theta: &ParamSet,
    phi: &ParamSet,
    support: &SegBatch,
    steps: usize,
    trainable: &BTreeSet<String>,
    lr: f64,
    optimizer: SgdConfig,
) -> Result<ParamSet> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    if let Some(id) = trainable.iter().find(|id| !phi.contains(id)) {
        return Err(Error::InvalidArgument(format!("fine-tune id `{id}` is not a head parameter")));
    }
    let mut omega = phi.clone();
    if steps == 0 || trainable.is_empty() {
        return Ok(omega);
    }
    let obj = SegObjective::new(net, RegConfig::disabled(), Prototypes::default());
    let mut opt = Sgd::new(optimizer);
    for _ in 0..steps {
        let lg = obj.inner(theta, &omega, support)?;
        guard("fine-tune loss", lg.loss)?;
        omega = opt.step_masked(&omega, &lg.omega, lr, Some(trainable))?;
    }
    Ok(omega)
}
