//! Independent oracles shared by the integration suites and the acceptance
//! target. Each check returns measured errors; callers decide tolerances.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use dumeta::autodiff::{finite_diff_grad_params, ParamVars, Tape, Var};
use dumeta::convlab::QuadraticBilevel;
use dumeta::eval::{asd, dice, Mask};
use dumeta::labels::{LabelMap, Tissue};
use dumeta::losses::{dice_ce_loss, deep_supervised_loss, RegConfig};
use dumeta::membank::{MemoryBank, Prototypes};
use dumeta::meta::pool::SegBatch;
use dumeta::meta::seg::SegObjective;
use dumeta::meta::{inner_step, mfl_hypergradient, mfl_outer_step, mil_hypergradient, BilevelObjective, LossGrads, MilOrder};
use dumeta::network::{NetworkConfig, UNet};
use dumeta::synthgen::{DomainSpec, Sample};
use dumeta::{ParamSet, Result, Tensor};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values whose magnitude stays above `floor`, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], floor: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(floor..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub error: f64,
}

/// Backward pass against central differences of the scalar
/// `Σ w ⊙ op(params)` with fixed random weights `w`.
pub fn grad_check(name: &str, params: ParamSet, op: impl Fn(&mut Tape, &ParamVars) -> Result<Var>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let shape = {
        let mut t = Tape::new();
        let v = t.register(&params).unwrap();
        let out = op(&mut t, &v).unwrap();
        t.value(out).shape().to_vec()
    };
    let weights = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let build = |p: &ParamSet| -> Result<(Tape, Var)> {
        let mut t = Tape::new();
        let v = t.register(p)?;
        let out = op(&mut t, &v)?;
        let w = t.constant(weights.clone())?;
        let prod = t.mul(out, w)?;
        let root = t.sum(prod)?;
        Ok((t, root))
    };
    let (tape, root) = build(&params).unwrap();
    let ad = tape.backward(root).unwrap();
    let fd = finite_diff_grad_params(
        |p| {
            let (t, r) = build(p)?;
            t.value(r).item()
        },
        &params,
        1e-6,
    )
    .unwrap();
    Check { name: name.into(), error: rel_err(&ad.flatten(), &fd.flatten()) }
}

fn set(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v);
    }
    p
}

/// Every tape primitive through [`grad_check`].
pub fn primitive_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, -1.0, 1.0);
    let ab = set(vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))]);
    let mut rng2 = ChaCha8Rng::seed_from_u64(12);
    let pos = set(vec![("a", random_tensor(&mut rng2, &[2, 3], 0.5, 2.0))]);
    let den = set(vec![("a", r(&[2, 3])), ("b", random_tensor(&mut rng2, &[2, 3], 0.5, 2.0))]);
    let kinked = set(vec![("a", away_from_zero(&mut rng2, &[2, 3], 0.05))]);
    let chw = set(vec![("a", r(&[2, 3, 2, 2])), ("b", r(&[2, 2, 2, 2]))]);
    let conv = set(vec![("x", r(&[2, 2, 4, 4])), ("w", r(&[3, 2, 3, 3])), ("b", r(&[3]))]);
    let up = set(vec![("x", r(&[1, 2, 3, 3])), ("w", r(&[2, 3, 2, 2])), ("b", r(&[3]))]);
    let norm = set(vec![("x", r(&[2, 3, 3, 3])), ("g", r(&[3])), ("b", r(&[3]))]);
    let vec4 = set(vec![("a", r(&[4]))]);
    let target = r(&[4]).into_data();
    let pool_w: Vec<f64> = (0..8).map(|i| (i % 3) as f64 * 0.25).collect();

    let g = |p: &ParamVars, id: &str| p.get(id).unwrap();
    vec![
        grad_check("add", ab.clone(), |t, p| t.add(g(p, "a"), g(p, "b"))),
        grad_check("sub", ab.clone(), |t, p| t.sub(g(p, "a"), g(p, "b"))),
        grad_check("mul", ab.clone(), |t, p| t.mul(g(p, "a"), g(p, "b"))),
        grad_check("div", den, |t, p| t.div(g(p, "a"), g(p, "b"))),
        grad_check("scale", ab.clone(), |t, p| t.scale(g(p, "a"), -1.7)),
        grad_check("add_const", ab.clone(), |t, p| t.add_const(g(p, "a"), 0.3)),
        grad_check("relu", kinked, |t, p| t.relu(g(p, "a"))),
        grad_check("log", pos.clone(), |t, p| t.log(g(p, "a"))),
        grad_check("exp", ab.clone(), |t, p| t.exp(g(p, "a"))),
        grad_check("square", ab.clone(), |t, p| t.square(g(p, "a"))),
        grad_check("sum", ab.clone(), |t, p| t.sum(g(p, "a"))),
        grad_check("mean", ab.clone(), |t, p| t.mean(g(p, "a"))),
        grad_check("add_many", ab.clone(), |t, p| {
            let (a, b) = (g(p, "a"), g(p, "b"));
            t.add_many(&[a, b, a])
        }),
        grad_check("softmax_channels", chw.clone(), |t, p| t.softmax_channels(g(p, "a"))),
        grad_check("log_softmax_channels", chw.clone(), |t, p| t.log_softmax_channels(g(p, "a"))),
        grad_check("channel_sum", chw.clone(), |t, p| t.channel_sum(g(p, "a"))),
        grad_check("concat_channels", chw.clone(), |t, p| t.concat_channels(g(p, "a"), g(p, "b"))),
        grad_check("conv2d", conv.clone(), |t, p| t.conv2d(g(p, "x"), g(p, "w"), Some(g(p, "b")), 1, 1)),
        grad_check("conv2d_stride2", conv, |t, p| t.conv2d(g(p, "x"), g(p, "w"), None, 2, 1)),
        grad_check("conv_transpose2d", up, |t, p| t.conv_transpose2d(g(p, "x"), g(p, "w"), Some(g(p, "b")))),
        grad_check("instance_norm", norm, |t, p| t.instance_norm(g(p, "x"), g(p, "g"), g(p, "b"), 1e-5)),
        grad_check("weighted_pool", chw, move |t, p| t.weighted_pool(g(p, "b"), pool_w.clone())),
        grad_check("cosine_to_const", vec4, move |t, p| t.cosine_to_const(g(p, "a"), target.clone())),
    ]
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> LabelMap {
    LabelMap::new(n, h, w, (0..n * h * w).map(|_| rng.gen_range(0..4)).collect()).unwrap()
}

/// Dice+CE on `[2, 4, 8, 8]` logits.
pub fn dice_ce_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = random_labels(&mut rng, 2, 8, 8);
    let logits = set(vec![("z", random_tensor(&mut rng, &[2, 4, 8, 8], -2.0, 2.0))]);
    let build = |p: &ParamSet| -> Result<(Tape, Var)> {
        let mut t = Tape::new();
        let v = t.register(p)?;
        let l = dice_ce_loss(&mut t, v.get("z")?, &labels)?;
        Ok((t, l))
    };
    let (tape, root) = build(&logits).unwrap();
    let ad = tape.backward(root).unwrap();
    let fd = finite_diff_grad_params(
        |p| {
            let (t, r) = build(p)?;
            t.value(r).item()
        },
        &logits,
        1e-6,
    )
    .unwrap();
    Check { name: "dice_ce_loss 8x8".into(), error: rel_err(&ad.flatten(), &fd.flatten()) }
}

/// Deep-supervised loss of a small U-Net on an 8×8 input, split into the
/// encoder and head gradients.
pub fn network_checks() -> Vec<Check> {
    let net = UNet::new(NetworkConfig { depth: 2, base_channels: 2, ..Default::default() }).unwrap();
    let part = net.split_params(net.default_split_point()).unwrap();
    let params = net.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[1, 1, 8, 8], -1.0, 1.0);
    let labels = random_labels(&mut rng, 1, 8, 8);
    let loss = |p: &ParamSet| -> Result<(Tape, Var)> {
        let mut t = Tape::new();
        let v = t.register(p)?;
        let input = t.constant(x.clone())?;
        let pyr = net.forward(&mut t, &v, input)?;
        let l = deep_supervised_loss(&mut t, &pyr, &labels)?;
        Ok((t, l))
    };
    let (tape, root) = loss(&params).unwrap();
    let ad = tape.backward(root).unwrap();
    let (theta, omega) = part.split(&params).unwrap();
    let mut out = Vec::new();
    for (name, group, other) in [("network encoder", &theta, &omega), ("network head", &omega, &theta)] {
        let fd = finite_diff_grad_params(
            |p| {
                let (t, r) = loss(&p.merged(other)?)?;
                t.value(r).item()
            },
            group,
            1e-6,
        )
        .unwrap();
        let ad_group = ad.restrict_to(group).unwrap();
        out.push(Check { name: name.into(), error: rel_err(&ad_group.flatten(), &fd.flatten()) });
    }
    out
}

/// Relative error of the engine's MFL step gradient against the closed form
/// on `count` random quadratic instances.
pub fn quadratic_hypergradient_errors(count: u64) -> Vec<f64> {
    (0..count)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = rng.gen_range(2..8);
            let m = rng.gen_range(1..6);
            let p = QuadraticBilevel::random(seed, n, m, rng.gen_range(1.0..20.0)).unwrap();
            let theta = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let omega = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let alpha = rng.gen_range(0.01..0.5) / p.lambda_max_a();
            let (t, w) = (p.theta_params(&theta), p.omega_params(&omega));
            let star = inner_step(&p, &t, &w, &(), alpha).unwrap().omega_star;
            let (_, hg) = mfl_outer_step(&p, &t, &w, &star, &(), &[()], alpha, 0.1, 1e-3).unwrap();
            let exact = p.exact_hypergradient(&theta, &omega, alpha);
            rel_err(&hg.total.flatten(), exact.as_slice())
        })
        .collect()
}

/// Tiny network hypergradient against central differences of the unrolled
/// scalar `θ ↦ L_outer1(ω - α ∇_ω L_inner(ω, θ), θ)`. Returns the parameter
/// count and the relative error.
pub fn tiny_net_hypergradient() -> (usize, f64) {
    let net = UNet::new(NetworkConfig { depth: 1, base_channels: 2, ..Default::default() }).unwrap();
    let part = net.split_params(net.default_split_point()).unwrap();
    let (theta, omega) = part.split(&net.init_params(9)).unwrap();
    let batch = |spec: DomainSpec, seed: u64| {
        let s = Sample::generate(&spec, seed, 16).unwrap();
        SegBatch::from_samples(&[&s]).unwrap()
    };
    let inner = batch(DomainSpec::adult(), 1);
    let outer = vec![batch(DomainSpec::infant(), 2), batch(DomainSpec::atrophy(), 3)];

    // prototypes from a third batch so the regularizer is active
    let probe = SegObjective::new(&net, RegConfig::default(), Prototypes::default());
    let feats = probe.pooled(&theta, &omega, &batch(DomainSpec::isointense(), 4)).unwrap();
    let mut protos = Prototypes::default();
    for (level, pooled) in &feats {
        for tissue in Tissue::ALL {
            if let Some(f) = pooled.get(tissue) {
                protos.insert(tissue, *level, f.iter().map(|v| v + 0.1).collect());
            }
        }
    }
    let obj = SegObjective::new(&net, RegConfig::default(), protos);
    let alpha = 0.05;
    let star = inner_step(&obj, &theta, &omega, &inner, alpha).unwrap().omega_star;
    let hg = mfl_hypergradient(&obj, &theta, &omega, &star, &inner, &outer, alpha, 1e-4).unwrap();

    let unrolled = |t: &ParamSet| -> Result<f64> {
        let g = obj.inner(t, &omega, &inner)?.omega;
        let ws = omega.axpy(-alpha, &g)?;
        Ok(obj.outer1(t, &ws, &outer)?.0.loss)
    };
    let fd = finite_diff_grad_params(unrolled, &theta, 1e-5).unwrap();
    (theta.numel() + omega.numel(), rel_err(&hg.total.flatten(), &fd.flatten()))
}

/// `L_inner = a ω³/6 + c ω θ + ω²/2`, `L_outer2 = (ω - 1)²/2`.
pub struct ScalarCubic {
    pub a: f64,
    pub c: f64,
}

fn scalar(id: &str, v: f64) -> ParamSet {
    ParamSet::single(id, Tensor::scalar(v))
}

fn value(p: &ParamSet, id: &str) -> f64 {
    p.require(id).unwrap().item().unwrap()
}

impl BilevelObjective for ScalarCubic {
    type Batch = ();
    type Aux = ();

    fn inner(&self, theta: &ParamSet, omega: &ParamSet, _: &()) -> Result<LossGrads> {
        let (t, w) = (value(theta, "t"), value(omega, "w"));
        Ok(LossGrads {
            loss: self.a * w.powi(3) / 6.0 + self.c * w * t + w * w / 2.0,
            theta: scalar("t", self.c * w),
            omega: scalar("w", self.a * w * w / 2.0 + self.c * t + w),
        })
    }

    fn outer1(&self, theta: &ParamSet, omega: &ParamSet, b: &[()]) -> Result<(LossGrads, ())> {
        Ok((self.outer2(theta, omega, b)?, ()))
    }

    fn outer2(&self, _: &ParamSet, omega: &ParamSet, _: &[()]) -> Result<LossGrads> {
        let w = value(omega, "w");
        Ok(LossGrads { loss: (w - 1.0).powi(2) / 2.0, theta: scalar("t", 0.0), omega: scalar("w", w - 1.0) })
    }
}

#[derive(Clone, Debug)]
pub struct MilScalarResult {
    /// Largest relative error of the second-order update against
    /// `(1 - α L″(φ)) (ω* - 1)`.
    pub second_order_error: f64,
    /// `|second - first| / α` at shrinking α, per case; constant means the
    /// gap closes linearly.
    pub gap_over_alpha: Vec<Vec<f64>>,
    /// `|second - first|` at the smallest α, worst case.
    pub smallest_gap: f64,
}

pub fn mil_scalar_checks() -> MilScalarResult {
    let cases = [(1.0, 0.5, 0.3, 0.7, 0.2), (-2.0, 1.0, 1.5, -0.4, 0.05), (3.0, -0.7, -0.8, 0.1, 0.4), (0.0, 2.0, 0.5, 0.5, 0.1)];
    let mut worst = 0.0f64;
    let mut ratios = Vec::new();
    let mut smallest_gap = 0.0f64;
    for &(a, c, phi, theta, alpha) in &cases {
        let obj = ScalarCubic { a, c };
        let (t, p) = (scalar("t", theta), scalar("w", phi));
        let star = inner_step(&obj, &t, &p, &(), alpha).unwrap().omega_star;
        let g = mil_hypergradient(&obj, &t, &p, &star, &(), &[()], alpha, MilOrder::second(), 1e-3).unwrap();
        let ws = value(&star, "w");
        let want = (1.0 - alpha * (a * phi + 1.0)) * (ws - 1.0);
        worst = worst.max((value(&g.total, "w") - want).abs() / want.abs().max(1e-12));

        let mut row = Vec::new();
        for alpha in [1e-2, 1e-4, 1e-6] {
            let star = inner_step(&obj, &t, &p, &(), alpha).unwrap().omega_star;
            let second = mil_hypergradient(&obj, &t, &p, &star, &(), &[()], alpha, MilOrder::second(), 1e-3).unwrap();
            let first = mil_hypergradient(&obj, &t, &p, &star, &(), &[()], alpha, MilOrder::First, 1e-3).unwrap();
            let gap = (value(&second.total, "w") - value(&first.total, "w")).abs();
            row.push(gap / alpha);
            if alpha == 1e-6 {
                smallest_gap = smallest_gap.max(gap);
            }
        }
        ratios.push(row);
    }
    MilScalarResult { second_order_error: worst, gap_over_alpha: ratios, smallest_gap }
}

/// Replays `ops` random pushes and prototype queries against a plain deque
/// model; returns the first disagreement.
pub fn membank_oracle(seed: u64, ops: usize, capacity: usize) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = MemoryBank::new(capacity).unwrap();
    let levels = 2;
    let mut model: Vec<VecDeque<Vec<f64>>> = vec![VecDeque::new(); 3 * levels];
    let dim = |level: usize| 2 + level;
    for op in 0..ops {
        let tissue = Tissue::ALL[rng.gen_range(0..3)];
        let level = rng.gen_range(0..levels);
        let slot = (tissue.index() - 1) * levels + level;
        if rng.gen_bool(0.7) {
            let f: Vec<f64> = (0..dim(level)).map(|_| rng.gen_range(-10.0..10.0)).collect();
            bank.push(tissue, level, &f).map_err(|e| e.to_string())?;
            model[slot].push_back(f);
            if model[slot].len() > capacity {
                model[slot].pop_front();
            }
        } else {
            let want: Option<Vec<f64>> = (!model[slot].is_empty()).then(|| {
                let n = model[slot].len() as f64;
                (0..dim(level)).map(|k| model[slot].iter().map(|v| v[k]).sum::<f64>() / n).collect()
            });
            let got = bank.prototype(tissue, level);
            match (&got, &want) {
                (None, None) => {}
                (Some(g), Some(w)) => {
                    if rel_err(g, w) > 1e-12 {
                        return Err(format!("op {op}: prototype {g:?} vs {w:?}"));
                    }
                }
                _ => return Err(format!("op {op}: presence differs ({got:?} vs {want:?})")),
            }
            let contents = bank.contents(tissue, level);
            if contents != model[slot].iter().cloned().collect::<Vec<_>>() {
                return Err(format!("op {op}: FIFO contents differ"));
            }
        }
    }
    Ok(())
}

/// After `capacity` identical pushes the prototype equals the value bit for bit.
pub fn membank_identical_pushes(capacity: usize) -> bool {
    let mut bank = MemoryBank::new(capacity).unwrap();
    let v = vec![0.1, -1.0 / 3.0, 7.25e-3, 1e10 + 0.7];
    for _ in 0..capacity {
        bank.push(Tissue::Gm, 0, &[9.0, 9.0, 9.0, 9.0]).unwrap();
    }
    for _ in 0..capacity {
        bank.push(Tissue::Gm, 0, &v).unwrap();
    }
    bank.prototype(Tissue::Gm, 0).is_some_and(|p| p.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()))
}

fn brute_boundary(m: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(y, x) && (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// All-pairs boundary distances.
pub fn brute_asd(p: &[bool], g: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Option<f64> {
    let (bp, bg) = (brute_boundary(p, h, w), brute_boundary(g, h, w));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let d = |a: (usize, usize), b: (usize, usize)| {
        let dy = (a.0 as f64 - b.0 as f64) * spacing.0;
        let dx = (a.1 as f64 - b.1 as f64) * spacing.1;
        (dy * dy + dx * dx).sqrt()
    };
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        from.iter().map(|&a| to.iter().map(|&b| d(a, b)).fold(f64::INFINITY, f64::min)).sum()
    };
    Some((nearest(&bp, &bg) + nearest(&bg, &bp)) / (bp.len() + bg.len()) as f64)
}

pub fn brute_dice(p: &[bool], g: &[bool]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|a| **a).count() + g.iter().filter(|b| **b).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

#[derive(Clone, Debug)]
pub struct MetricOracle {
    pub dice_error: f64,
    pub asd_error: f64,
    pub missing_agree: bool,
}

/// `pairs` random mask pairs of assorted shapes, densities and spacings.
pub fn metric_oracle(seed: u64, pairs: usize) -> MetricOracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricOracle { dice_error: 0.0, asd_error: 0.0, missing_agree: true };
    for i in 0..pairs {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let (dp, dg) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let mut p: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(dp)).collect();
        let g: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(dg)).collect();
        if i % 10 == 0 {
            p.iter_mut().for_each(|v| *v = false);
        }
        let spacing = if i % 2 == 0 { (1.0, 1.0) } else { (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)) };
        let (mp, mg) = (Mask::new(h, w, p.clone()).unwrap(), Mask::new(h, w, g.clone()).unwrap());
        out.dice_error = out.dice_error.max((dice(&mp, &mg).unwrap() - brute_dice(&p, &g)).abs());
        match (asd(&mp, &mg, spacing).unwrap(), brute_asd(&p, &g, h, w, spacing)) {
            (Some(a), Some(b)) => out.asd_error = out.asd_error.max((a - b).abs()),
            (None, None) => {}
            _ => out.missing_agree = false,
        }
    }
    out
}

/// The 2×4 shifted-block Dice and the 3-pixel point-pair ASD.
pub fn metric_hand_cases() -> (f64, Option<f64>) {
    let block = |cols: [usize; 2]| {
        let mut d = vec![false; 8];
        for y in 0..2 {
            for x in cols {
                d[y * 4 + x] = true;
            }
        }
        Mask::new(2, 4, d).unwrap()
    };
    let d = dice(&block([0, 1]), &block([1, 2])).unwrap();
    let point = |x: usize| {
        let mut v = vec![false; 5];
        v[x] = true;
        Mask::new(1, 5, v).unwrap()
    };
    (d, asd(&point(0), &point(3), (1.0, 1.0)).unwrap())
}

/// Ids outside `mask` that differ between two parameter sets.
pub fn changed_outside(a: &ParamSet, b: &ParamSet, mask: &BTreeSet<String>) -> Vec<String> {
    a.iter()
        .filter(|(id, t)| !mask.contains(*id) && b.get(id).map_or(true, |u| u.data().iter().zip(t.data()).any(|(x, y)| x.to_bits() != y.to_bits())))
        .map(|(id, _)| id.to_string())
        .collect()
}
