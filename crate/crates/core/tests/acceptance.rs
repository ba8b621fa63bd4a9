//! One PASS/FAIL line per acceptance criterion, written straight to stdout so
//! the table shows without `--nocapture`.
//!
//! Criteria 7 and 8 are outcomes of a small stochastic training experiment;
//! their lines are reported but not asserted. Every other criterion is.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use dumeta::config::{ModeName, RunConfig};
use dumeta::convlab::{run_rate_experiment, verify_bound, QuadraticBilevel, RateConfig, SLOPE_TOLERANCE};
use dumeta::eval::evaluate_run;
use dumeta::experiment::{train, Checkpoint, Experiment};
use dumeta::labels::Tissue;
use dumeta::losses::{class_pool, reg_loss, triplet_value, ClassFeatures, ScaleFeatures};
use dumeta::membank::Prototypes;
use dumeta::meta::pool::SegBatch;
use dumeta::meta::seg::{meta_test_finetune, TrainMode};
use dumeta::network::FinetuneMask;
use dumeta::optim::SgdConfig;
use dumeta::synthgen::build_pool;
use dumeta::{autodiff::Tape, labels::LabelMap, Tensor};

struct Line {
    n: usize,
    pass: bool,
    detail: String,
}

fn line(n: usize, pass: bool, detail: String) -> Line {
    let text = format!("{} criterion {n}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().write_all(text.as_bytes()).unwrap();
    Line { n, pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn criterion_1() -> Line {
    let t0 = Instant::now();
    let mut checks = primitive_checks();
    checks.push(dice_ce_check());
    let elapsed = t0.elapsed();
    let worst = checks.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    line(
        1,
        worst.error <= 1e-5 && elapsed < Duration::from_secs(60),
        format!("{} gradient checks, worst {} at {:.2e} (tol 1e-5), {:.1}s (limit 60s)", checks.len(), worst.name, worst.error, secs(elapsed)),
    )
}

fn criterion_2() -> Line {
    let t0 = Instant::now();
    let quad = quadratic_hypergradient_errors(20).into_iter().fold(0.0, f64::max);
    let (params, net) = tiny_net_hypergradient();
    let elapsed = t0.elapsed();
    line(
        2,
        quad <= 1e-4 && params <= 500 && net <= 1e-3 && elapsed < Duration::from_secs(120),
        format!(
            "quadratic worst {quad:.2e} (tol 1e-4) over 20 instances; {params}-param network {net:.2e} (tol 1e-3); {:.1}s (limit 120s)",
            secs(elapsed)
        ),
    )
}

fn criterion_3() -> Line {
    let r = mil_scalar_checks();
    let linear = r.gap_over_alpha.iter().all(|row| (row[1] - row[2]).abs() <= 1e-3 * row[2].max(1e-12) + 1e-9);
    line(
        3,
        r.second_order_error <= 1e-8 && linear && r.smallest_gap < 1e-5,
        format!(
            "second-order error {:.2e} (tol 1e-8); first/second gap at alpha 1e-6 is {:.2e}, shrinking linearly: {linear}",
            r.second_order_error, r.smallest_gap
        ),
    )
}

fn criterion_4() -> Line {
    let t0 = Instant::now();
    let problem = QuadraticBilevel::default_instance();
    let rc = RateConfig::for_problem(&problem, 0.5, 20, 2024);
    let points = run_rate_experiment(&problem, &[100, 1_000, 10_000, 100_000], &rc).unwrap();
    let theta = verify_bound(&points.iter().map(|p| (p.horizon, p.theta_min_grad_sq)).collect::<Vec<_>>(), SLOPE_TOLERANCE).unwrap();
    let phi = verify_bound(&points.iter().map(|p| (p.horizon, p.phi_min_grad_sq)).collect::<Vec<_>>(), SLOPE_TOLERANCE).unwrap();
    let elapsed = t0.elapsed();
    line(
        4,
        theta.pass && phi.pass && elapsed < Duration::from_secs(600),
        format!(
            "log-log slopes: encoder {:.3}, head {:.3} (need <= {SLOPE_TOLERANCE}); 20 repeats, sigma 0.5; {:.1}s (limit 600s)",
            theta.slope,
            phi.slope,
            secs(elapsed)
        ),
    )
}

fn criterion_5() -> Line {
    let a = triplet_value(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], 1.5);
    let b = triplet_value(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0], 1.5);
    let c = triplet_value(&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4], 0.0);

    // K = 1, dataset B carries features, dataset C none; one GM prototype
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![1, 2, 1, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let labels = LabelMap::new(1, 1, 3, vec![1, 2, 3]).unwrap();
    let pooled = class_pool(&mut tape, f, &labels).unwrap();
    let datasets = vec![
        vec![ScaleFeatures { level: 0, classes: pooled }],
        vec![ScaleFeatures { level: 0, classes: ClassFeatures::default() }],
    ];
    let mut protos = Prototypes::default();
    protos.insert(Tissue::Gm, 0, vec![0.0, 1.0]);
    let v = triplet_value(&[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.5);
    let r = reg_loss(&mut tape, &datasets, &protos, 1.5).unwrap();
    let reg = tape.value(r).item().unwrap();
    let empty = reg_loss(&mut tape, &datasets, &Prototypes::default(), 1.5).unwrap();
    let empty = tape.value(empty).item().unwrap();
    line(
        5,
        a == 0.0 && b == 2.5 && c == 0.0 && v != 0.0 && reg == v / 6.0 && empty == 0.0,
        format!("triplet values {a}, {b}, {c} (want 0, 2.5, 0); single term {v} normalized to {reg} (want {}); empty bank {empty}", v / 6.0),
    )
}

fn criterion_6() -> Line {
    let fifo = [(11, 1), (12, 5), (13, 100)].iter().map(|&(s, c)| membank_oracle(s, 10_000, c)).collect::<Result<Vec<_>, _>>();
    let exact = [1, 2, 7, 100, 1000].iter().all(|&n| membank_identical_pushes(n));
    line(
        6,
        fifo.is_ok() && exact,
        format!(
            "3 x 1e4 random ops vs deque model: {}; identical pushes bit-exact: {exact}",
            fifo.err().unwrap_or_else(|| "agree".into())
        ),
    )
}

/// Mean 1-shot and 5-shot Dice of each arm on one seed.
struct SeedScores {
    full: (f64, f64),
    mfl_only: f64,
    no_reg: f64,
    baseline: f64,
    frozen: bool,
    mask_ok: bool,
}

fn seed_scores(seed: u64) -> SeedScores {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    let exp = Experiment::new(&cfg, build_pool(&cfg.data_config()).unwrap()).unwrap();
    let mask = cfg.finetune_mask().unwrap();
    let trained = |cfg: &RunConfig| {
        let tc = cfg.train_config();
        let state = train(&exp, cfg, &tc, |_, _| Ok(())).unwrap();
        Checkpoint::from_state(&state, tc.mode)
    };
    let score = |cfg: &RunConfig, ck: &Checkpoint, shots| exp.meta_test(cfg, ck, shots, mask).unwrap().mean_dice();

    let full = trained(&cfg);
    let full_scores = (score(&cfg, &full, 1), score(&cfg, &full, 5));

    // frozenness on the trained checkpoint
    let theta_before = full.theta.clone();
    let ids = exp.net.finetune_ids(&exp.partition, FinetuneMask::LAST_THREE_LAYERS).unwrap();
    let batch = SegBatch::from_samples(&[&exp.dataset.heldout.support[0]]).unwrap();
    let adapted = meta_test_finetune(&exp.net, &full.theta, &full.head, &batch, cfg.test.steps, &ids, cfg.test.lr, SgdConfig::nesterov()).unwrap();
    evaluate_run(&exp.net, &full.theta.merged(&adapted).unwrap(), &exp.dataset.heldout.test).unwrap();
    let frozen = changed_outside(&theta_before, &full.theta, &Default::default()).is_empty();
    let mask_ok = changed_outside(&full.head, &adapted, &ids).is_empty()
        && !changed_outside(&full.head, &adapted, &Default::default()).is_empty();

    let baseline = score(&cfg, &Checkpoint::initial(&exp, seed).unwrap(), 1);

    cfg.train.mode = ModeName::MflOnly;
    let mfl_only = score(&cfg, &trained(&cfg), 1);

    cfg.train.mode = ModeName::Full;
    cfg.reg.enabled = false;
    let no_reg = score(&cfg, &trained(&cfg), 1);

    assert_eq!(RunConfig::default().train_config().mode, TrainMode::Full);
    SeedScores { full: full_scores, mfl_only, no_reg, baseline, frozen, mask_ok }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criteria_7_to_9() -> Vec<Line> {
    let t0 = Instant::now();
    let seeds: Vec<SeedScores> = (0..3).map(seed_scores).collect();
    let elapsed = t0.elapsed();
    let full = mean(seeds.iter().map(|s| s.full.0));
    let mfl = mean(seeds.iter().map(|s| s.mfl_only));
    let no_reg = mean(seeds.iter().map(|s| s.no_reg));
    let base = mean(seeds.iter().map(|s| s.baseline));
    let ordered = base < mfl && mfl < no_reg && no_reg < full;
    let c7 = line(
        7,
        full - base >= 0.05 && full - mfl >= 0.01 && ordered && elapsed < Duration::from_secs(1800),
        format!(
            "1-shot mean Dice over 3 seeds: random-init {base:.4} < MFL-only {mfl:.4} < MFL+MIL {no_reg:.4} < full {full:.4} \
             (ordered: {ordered}; margins {:.4} >= 0.05, {:.4} >= 0.01); {:.0}s (limit 1800s)",
            full - base,
            full - mfl,
            secs(elapsed)
        ),
    );
    let per_seed: Vec<String> = seeds.iter().map(|s| format!("{:.4}>={:.4}", s.full.1, s.full.0)).collect();
    let c8 = line(8, seeds.iter().all(|s| s.full.1 >= s.full.0), format!("5-shot vs 1-shot per seed: {}", per_seed.join(", ")));
    let c9 = line(
        9,
        seeds.iter().all(|s| s.frozen && s.mask_ok),
        format!(
            "encoder bit-identical after meta-test: {}; last-3 mask leaves other head ids bit-identical: {}",
            seeds.iter().all(|s| s.frozen),
            seeds.iter().all(|s| s.mask_ok)
        ),
    );
    vec![c7, c8, c9]
}

fn criterion_10() -> Line {
    let r = metric_oracle(2024, 50);
    let (d, a) = metric_hand_cases();
    line(
        10,
        r.dice_error <= 1e-12 && r.asd_error <= 1e-12 && r.missing_agree && d == 0.5 && a == Some(3.0),
        format!(
            "50 random pairs: Dice err {:.1e}, ASD err {:.1e} (tol 1e-12), empty-mask handling agrees: {}; hand cases Dice {d}, ASD {a:?}",
            r.dice_error, r.asd_error, r.missing_agree
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6()];
    lines.extend(criteria_7_to_9());
    lines.push(criterion_10());
    let reported_only = [7, 8];
    let failed: Vec<String> = lines.iter().filter(|l| !l.pass && !reported_only.contains(&l.n)).map(|l| format!("{}: {}", l.n, l.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
