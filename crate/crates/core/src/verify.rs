//! Self-contained numerical verification suites with fixed seeds.
//!
//! Every check compares library code against an independent oracle (sample
//! quantiles, finite differences, direct enumeration, brute-force
//! permutation) and reports the measured residual next to its limit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diversity::{
    behavior_distance, compute_alpha, euler_residual, nmd_grad, nmd_hat, nmd_hat_deviations, projection_defect,
    projection_limits_report, w2_bures_diag, w2_shared_cov, DeviationSet, GaussianPolicyOutput, PolicyFn,
    ALPHA_CAP, ALPHA_FLOOR,
};
use crate::env::geometry::Rect;
use crate::env::scripted::pressure_plate_actions;
use crate::env::{
    detect_events, instance_seed, is_shielded, observe, parse_perturbations, plate_layout, plate_walls, reset,
    step, step_batch, step_with_plan, PomgState, TaskConfig,
};
use crate::error::{usage, Result};
use crate::event::{EventKind, Signal};
use crate::hypernet::{encode_event, generate, maybe_requery, HypernetParams, HypernetShape, QueryContext};
use crate::model::ModelConfig;
use crate::numeric::{finite_diff_grad, relative_error, Activation, MlpParams, Params, Tensor2};
use crate::policy::{realized_team_nmd, unscaled_team_nmd, LoraPair, PolicyBackbone};
use crate::trainer::{loss_and_grads, TrainConfig, Trainer};

pub const SUITES: &[&str] = &["metric", "estimator", "gradient", "projection", "env", "query"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Test fixture: flips the sign of the analytic diversity gradient so the
    /// gradient suite must fail.
    pub mutate_grad_sign: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    /// Diagnostics printed without a pass/fail verdict.
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn bound(&mut self, name: &str, measured: f64, limit: f64) {
        self.checks.push(Check {
            name: name.into(),
            passed: measured <= limit,
            detail: format!("measured {measured:.3e}, limit {limit:.0e}"),
        });
    }

    fn floor(&mut self, name: &str, measured: f64, limit: f64) {
        self.checks.push(Check {
            name: name.into(),
            passed: measured >= limit,
            detail: format!("measured {measured:.3e}, floor {limit:.0e}"),
        });
    }

    fn flag(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    /// Human-readable lines: one per check, then the notes.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("suite {}", self.name)];
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            out.push(format!("  [{tag}] {}: {}", c.name, c.detail));
        }
        out.extend(self.notes.iter().map(|n| format!("  {n}")));
        out
    }
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<SuiteReport> {
    match name {
        "metric" => metric_suite(opts),
        "estimator" => estimator_suite(opts),
        "gradient" => gradient_suite(opts),
        "projection" => projection_suite(opts),
        "env" => env_suite(opts),
        "query" => query_suite(opts),
        _ => usage(format!("unknown suite `{name}` (expected all or one of {})", SUITES.join(", "))),
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, opts)).collect()
}

fn rng_for(opts: &VerifyOptions, stream: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(instance_seed(opts.seed, stream))
}

fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Square-root mean squared difference of the sorted samples.
pub fn empirical_w2_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len().min(b.len()).max(1);
    (a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64).sqrt()
}

/// `n` draws from `N(mean, std²)`, one uniformly placed in each of `n`
/// equal-probability strata.
pub fn stratified_normal(rng: &mut impl Rng, mean: f64, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(mean, std).expect("positive std");
    (0..n)
        .map(|i| {
            let u: f64 = rng.gen_range(0.0..1.0);
            dist.inverse_cdf(((i as f64 + u) / n as f64).clamp(1e-300, 1.0 - 1e-16))
        })
        .collect()
}

fn metric_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("metric");
    let mut rng = rng_for(opts, 1);

    let mut worst_w2: f64 = 0.0;
    let mut worst_shared: f64 = 0.0;
    for _ in 0..20 {
        let (ma, mb) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let (sa, sb) = (rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0));
        let exact = w2_bures_diag(&[ma], &[sa], &[mb], &[sb])?;
        let xa = stratified_normal(&mut rng, ma, sa, 100_000);
        let xb = stratified_normal(&mut rng, mb, sb, 100_000);
        worst_w2 = worst_w2.max((exact - empirical_w2_1d(xa, xb)).abs() / exact);

        let shared = w2_bures_diag(&[ma], &[sa], &[mb], &[sa])?;
        worst_shared = worst_shared.max((shared - w2_shared_cov(&[ma], &[mb])?).abs());
    }
    rep.bound("closed-form W2 vs sample quantiles (20 pairs, 1e5 samples), relative", worst_w2, 1e-2);
    rep.bound("shared-std W2 equals mean distance", worst_shared, 1e-12);

    // Random tanh-linear behaviors sharing one log-std.
    let (obs_dim, act_dim) = (3, 2);
    let mut asym: f64 = 0.0;
    let mut min_d = f64::INFINITY;
    let mut min_slack = f64::INFINITY;
    let mut self_d: f64 = 0.0;
    for _ in 0..1000 {
        let log_std = uniform_vec(&mut rng, act_dim, -1.0, 0.5);
        let weights: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                (
                    uniform_vec(&mut rng, act_dim * obs_dim, -1.5, 1.5),
                    uniform_vec(&mut rng, act_dim, -0.5, 0.5),
                )
            })
            .collect();
        let policy = |k: usize| {
            let (w, b) = weights[k].clone();
            let ls = log_std.clone();
            move |o: &[f64]| GaussianPolicyOutput {
                mean: (0..act_dim)
                    .map(|i| (b[i] + (0..obs_dim).map(|j| w[i * obs_dim + j] * o[j]).sum::<f64>()).tanh())
                    .collect(),
                log_std: ls.clone(),
            }
        };
        let n_obs = rng.gen_range(1..8);
        let obs: Vec<Vec<f64>> = (0..n_obs).map(|_| uniform_vec(&mut rng, obs_dim, -1.0, 1.0)).collect();
        let d = |a: usize, b: usize| behavior_distance(policy(a), policy(b), &obs);
        let (ab, ba, bc, ac) = (d(0, 1)?, d(1, 0)?, d(1, 2)?, d(0, 2)?);
        asym = asym.max((ab - ba).abs());
        min_d = min_d.min(ab.min(bc).min(ac));
        min_slack = min_slack.min(ab + bc - ac);
        self_d = self_d.max(d(0, 0)?.abs());
    }
    rep.bound("pseudometric symmetry over 1000 triples", asym, 0.0);
    rep.floor("pseudometric nonnegativity", min_d, 0.0);
    rep.floor("triangle inequality slack", min_slack, -1e-9);
    rep.bound("distance to self", self_d, 0.0);
    Ok(rep)
}

fn constant(mean: Vec<f64>) -> impl Fn(&[f64]) -> GaussianPolicyOutput {
    move |_| GaussianPolicyOutput {
        mean: mean.clone(),
        log_std: vec![0.0; mean.len()],
    }
}

/// Random backbone and LoRA set for the policy-level checks.
fn random_policy_config(rng: &mut ChaCha8Rng) -> Result<(PolicyBackbone, Vec<LoraPair>, Vec<Vec<f64>>)> {
    let obs_dim = rng.gen_range(2..6);
    let d = rng.gen_range(2..7);
    let act = rng.gen_range(1..4);
    let rank = rng.gen_range(1..=d);
    let b = rng.gen_range(2..6);
    let hidden = rng.gen_range(3..8);
    let net = MlpParams::init(rng, &[obs_dim, hidden, d], Activation::Tanh, Activation::Tanh);
    let w_shared = Tensor2::from_vec(act, d, uniform_vec(rng, act * d, -1.0, 1.0));
    let log_std = Tensor2::from_vec(1, act, uniform_vec(rng, act, -1.0, 0.0));
    let backbone = PolicyBackbone::new(net, w_shared, log_std)?;
    let loras = (0..b)
        .map(|_| {
            LoraPair::new(
                Tensor2::from_vec(rank, d, uniform_vec(rng, rank * d, -1.0, 1.0)),
                Tensor2::from_vec(act, rank, uniform_vec(rng, act * rank, -1.0, 1.0)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let n_obs = rng.gen_range(1..10);
    let obs = (0..n_obs).map(|_| uniform_vec(rng, obs_dim, -1.0, 1.0)).collect();
    Ok((backbone, loras, obs))
}

fn estimator_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("estimator");
    let obs = vec![vec![0.0]];

    let same = constant(vec![0.3, -0.2]);
    let identical = nmd_hat(&[&same as &PolicyFn<'_>, &same, &same], &obs)?;
    let (p0, p1) = (constant(vec![0.0, 0.0]), constant(vec![0.6, 0.8]));
    let single = nmd_hat(&[&p0 as &PolicyFn<'_>, &p1], &obs)?;
    let (q0, q1, q2) = (constant(vec![0.0]), constant(vec![1.0]), constant(vec![2.0]));
    let three = nmd_hat(&[&q0 as &PolicyFn<'_>, &q1, &q2], &obs)?;
    let err = identical.abs().max((single - 1.0).abs()).max((three - 4.0 / 3.0).abs());
    rep.bound("worked examples 0, 1, 4/3", err, 1e-12);

    let mut rng = rng_for(opts, 2);
    let mut homog: f64 = 0.0;
    for _ in 0..200 {
        let b = rng.gen_range(2..7);
        let da = rng.gen_range(1..5);
        let devs = DeviationSet::new((0..b).map(|_| uniform_vec(&mut rng, da, -1.0, 1.0)).collect())?;
        let base = nmd_hat_deviations(&devs, 1);
        for t in [0.5, 2.0, 10.0] {
            homog = homog.max((nmd_hat_deviations(&devs.scaled(t), 1) - t * base).abs() / base);
        }
    }
    rep.bound("degree-1 homogeneity, t in {0.5, 2, 10}", homog, 1e-12);

    let mut exact: f64 = 0.0;
    let mut reduction: f64 = 0.0;
    let mut done = 0;
    while done < 200 {
        let (backbone, loras, obs) = random_policy_config(&mut rng)?;
        let nmd_des = (rng.gen_range(0.05f64.ln()..2.0f64.ln())).exp();
        let unscaled = unscaled_team_nmd(&backbone, &loras, &obs)?;
        if unscaled <= ALPHA_FLOOR {
            continue;
        }
        let alpha = compute_alpha(nmd_des, unscaled, ALPHA_FLOOR, ALPHA_CAP)?;
        if alpha >= ALPHA_CAP {
            continue;
        }
        let realized = realized_team_nmd(&backbone, &loras, alpha, &obs)?;
        exact = exact.max((realized - nmd_des).abs() / nmd_des);
        let unit = realized_team_nmd(&backbone, &loras, 1.0, &obs)?;
        reduction = reduction.max((unit - unscaled).abs() / unscaled);
        done += 1;
    }
    rep.bound("realized diversity equals target (200 configs), relative", exact, 1e-10);
    rep.bound("shared-backbone reduction at alpha = 1, relative", reduction, 1e-12);
    Ok(rep)
}

/// Finite-difference check of the PPO loss gradient with respect to random
/// hypernetwork coordinates on a tiny frozen batch; returns the worst
/// relative error and the number of coordinates compared.
pub fn ppo_gradient_check(seed: u64, coords: usize) -> Result<(f64, usize)> {
    let mut task = TaskConfig::dispersion(2, 2);
    task.horizon = 4;
    let mc = ModelConfig {
        feature_hidden: vec![8, 8],
        critic_hidden: vec![8],
        embed: 8,
        heads: 2,
        blocks: 1,
        ff: 8,
        rank: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        envs: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(task, mc, tc)?;
    let batch = tr.collect()?;
    let idx: Vec<usize> = (0..batch.steps.len()).collect();
    // One step away from ratio 1, where the clipped surrogate is symmetric.
    let (_, grads) = loss_and_grads(&tr.model, &batch, &idx, &tr.config)?;
    tr.adam.step(&mut tr.model, &grads);
    let (_, grads) = loss_and_grads(&tr.model, &batch, &idx, &tr.config)?;

    let tensors = tr.model.tensors();
    let hyper: Vec<usize> = (0..tensors.len())
        .filter(|&i| tensors[i].0.starts_with("hypernet."))
        .collect();
    let set = |tr: &mut Trainer, tensor: usize, coord: usize, value: f64| {
        let mut k = 0;
        tr.model.visit_mut("", &mut |_, t| {
            if k == tensor {
                t.data_mut()[coord] = value;
            }
            k += 1;
        });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, 1));
    let h = 1e-6;
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for _ in 0..coords * 100 {
        if checked == coords {
            break;
        }
        let ti = hyper[rng.gen_range(0..hyper.len())];
        let c = rng.gen_range(0..tensors[ti].1.len());
        let orig = tensors[ti].1.data()[c];
        set(&mut tr, ti, c, orig + h);
        let hi = loss_and_grads(&tr.model, &batch, &idx, &tr.config)?.0.total;
        set(&mut tr, ti, c, orig - h);
        let lo = loss_and_grads(&tr.model, &batch, &idx, &tr.config)?.0.total;
        set(&mut tr, ti, c, orig);
        let fd = (hi - lo) / (2.0 * h);
        let an = grads[ti].data()[c];
        if an.abs() < 1e-8 && fd.abs() < 1e-8 {
            continue;
        }
        worst = worst.max(relative_error(an, fd, 1e-8));
        checked += 1;
    }
    Ok((worst, checked))
}

fn gradient_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("gradient");
    let mut rng = rng_for(opts, 3);
    let sign = if opts.mutate_grad_sign { -1.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let b = rng.gen_range(2..6);
        let da = rng.gen_range(1..5);
        let obs_count = rng.gen_range(1..4);
        let devs: Vec<Vec<f64>> = (0..b).map(|_| uniform_vec(&mut rng, da, -1.0, 1.0)).collect();
        let set = DeviationSet::new(devs.clone())?;
        let m = rng.gen_range(0..b);
        let analytic: Vec<f64> = nmd_grad(&set, obs_count, m)?.iter().map(|g| sign * g).collect();
        let f = |x: &[f64]| {
            let mut d = devs.clone();
            d[m] = x.to_vec();
            DeviationSet::new(d).map_or(f64::NAN, |s| nmd_hat_deviations(&s, obs_count))
        };
        let fd = finite_diff_grad(f, &devs[m], 1e-6)?;
        for (a, n) in analytic.iter().zip(&fd) {
            if a.abs() >= 1e-8 || n.abs() >= 1e-8 {
                worst = worst.max(relative_error(*a, *n, 1e-8));
            }
        }
    }
    rep.bound("diversity gradient vs finite differences (50 configs)", worst, 1e-4);

    let (ppo_worst, checked) = ppo_gradient_check(opts.seed, 20)?;
    rep.flag(
        "PPO loss gradient through the hypernetwork vs finite differences",
        checked == 20 && ppo_worst <= 1e-3,
        format!("measured {ppo_worst:.3e} over {checked} coordinates, limit 1e-3"),
    );
    Ok(rep)
}

fn summary(values: &mut [f64]) -> String {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return "no samples".into();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    format!(
        "n={n} min={:.4} median={:.4} mean={:.4} max={:.4}",
        values[0],
        values[n / 2],
        mean,
        values[n - 1]
    )
}

fn projection_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("projection");
    let mut rng = rng_for(opts, 4);

    let mut identity: f64 = 0.0;
    let mut ks = Vec::new();
    for _ in 0..500 {
        let b = rng.gen_range(2..7);
        let da = rng.gen_range(1..5);
        let set = DeviationSet::new((0..b).map(|_| uniform_vec(&mut rng, da, -1.0, 1.0)).collect())?;
        let m = rng.gen_range(0..b);
        let n_hat = nmd_hat_deviations(&set, 1);
        let grad = nmd_grad(&set, 1, m)?;
        let d = projection_defect(set.get(m), &grad, n_hat)?;
        identity = identity.max(d.identity_residual);
        ks.push(d.k);
    }
    rep.bound("rank-one defect identity (500 configs)", identity, 1e-10);
    rep.notes.push(format!("k statistics: {}", summary(&mut ks)));

    // Only u_m nonzero: every pair involving m has length |u_m|, so k = 1.
    let mut idem: f64 = 0.0;
    for _ in 0..100 {
        let b = rng.gen_range(2..7);
        let da = rng.gen_range(1..5);
        let m = rng.gen_range(0..b);
        let mut devs = vec![vec![0.0; da]; b];
        devs[m] = uniform_vec(&mut rng, da, -1.0, 1.0);
        let set = DeviationSet::new(devs)?;
        let grad = nmd_grad(&set, 1, m)?;
        idem = idem.max(projection_defect(set.get(m), &grad, nmd_hat_deviations(&set, 1))?.idempotency_gap);
    }
    rep.bound("idempotency when the other deviations vanish", idem, 1e-6);

    let mut vanish: f64 = 0.0;
    let mut dominant: f64 = 0.0;
    let mut unit_rows = Vec::new();
    for _ in 0..100 {
        let da = rng.gen_range(2..5);
        let set = DeviationSet::new((0..3).map(|_| uniform_vec(&mut rng, da, -1.0, 1.0)).collect())?;
        let rows = projection_limits_report(&set, 0, &[1e-6, 1.0, 1e6])?;
        vanish = vanish.max(rows[0].dist_identity);
        unit_rows.push(rows[1].dist_identity);
        dominant = dominant.max(rows[2].dist_orthogonal_projector);
    }
    rep.bound("vanishing regime t = 1e-6: distance to identity", vanish, 1e-4);
    rep.bound("dominant regime t = 1e6: distance to orthogonal projector", dominant, 1e-3);
    rep.notes.push(format!("dominant-regime limit distance (worst of 100): {dominant:.3e}"));
    rep.notes.push(format!("t = 1 distance to identity: {}", summary(&mut unit_rows)));

    for b in 2..=6 {
        let mut res = Vec::new();
        for _ in 0..200 {
            let da = rng.gen_range(1..5);
            let set = DeviationSet::new((0..b).map(|_| uniform_vec(&mut rng, da, -1.0, 1.0)).collect())?;
            for m in 0..b {
                res.push(euler_residual(&set, 1, m)?);
            }
        }
        rep.notes.push(format!("Euler residual audit B={b}: {}", summary(&mut res)));
    }
    Ok(rep)
}

fn run_scripted(cfg: &TaskConfig, seed: u64) -> Result<(bool, Vec<PomgState>)> {
    let (mut s, _) = reset(cfg, seed)?;
    let mut states = vec![s.clone()];
    loop {
        let out = step(cfg, &s, &pressure_plate_actions(cfg, &s))?;
        s = out.state;
        states.push(s.clone());
        if out.done {
            return Ok((s.completed, states));
        }
    }
}

fn in_wall(p: [f64; 2], walls: &[Rect], r: f64) -> bool {
    walls.iter().any(|w| w.expanded(r - 1e-9).contains(p))
}

fn env_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("env");
    let cfg = TaskConfig::pressure_plate();
    let r = cfg.physics.agent_radius;

    let mut completed = 0;
    let mut penetrations = 0;
    let mut door_mismatch = 0;
    for k in 0..20 {
        let (done, states) = run_scripted(&cfg, instance_seed(opts.seed, k))?;
        completed += usize::from(done);
        for s in &states[1..] {
            let walls = plate_walls(s.door_open);
            penetrations += s.positions.iter().filter(|&&p| in_wall(p, &walls, r)).count();
            let pressed = |plate: [f64; 2]| {
                s.live_agents().into_iter().any(|i| {
                    let p = s.positions[i];
                    (p[0] - plate[0]).hypot(p[1] - plate[1]) <= cfg.physics.plate_radius
                })
            };
            let plates = [pressed(plate_layout::PLATE_1), pressed(plate_layout::PLATE_2)];
            if s.plates != plates || s.door_open != (plates[0] || plates[1]) {
                door_mismatch += 1;
            }
        }
    }
    rep.flag(
        "scripted three-phase controller completes Pressure Plate",
        completed == 20,
        format!("{completed}/20 episodes"),
    );
    rep.flag("no agent inside a wall", penetrations == 0, format!("{penetrations} violations"));
    rep.flag("door open exactly while a plate is pressed", door_mismatch == 0, format!("{door_mismatch} mismatched states"));

    let (mut s, _) = reset(&cfg, 0)?;
    s.positions[0] = [-0.2, 0.0];
    let mut crossed = false;
    for _ in 0..100 {
        s = step(&cfg, &s, &[[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])?.state;
        crossed |= s.positions[0][0] >= 0.0;
    }
    rep.flag("closed door blocks the wall gap", !crossed, if crossed { "agent crossed" } else { "held" });

    let (prev, _) = reset(&cfg, 0)?;
    let mut curr = prev.clone();
    curr.plates = [true, false];
    curr.door_open = true;
    let door = detect_events(&prev, &curr).signal_code() == Some(Signal::DoorOpened);
    curr.live[2] = false;
    let removal = detect_events(&prev, &curr);
    let priority = door && removal.kind == EventKind::AgentRemoved && detect_events(&prev, &prev).is_null();
    rep.flag("one event per step, highest priority wins", priority, format!("door={door} removal={:?}", removal.kind));

    let wind = TaskConfig::wind_flocking();
    let (mut w, _) = reset(&wind, 0)?;
    let mut cone = Vec::new();
    for (pos, expected) in [
        ([0.0, -0.1], true),
        ([0.1, -0.1], false),
        ([0.0, -0.3], false),
        ([0.0, 0.1], false),
    ] {
        w.positions = vec![[0.0, 0.0], pos];
        cone.push(is_shielded(&wind.physics, &w, 1) == expected);
    }
    w.positions = vec![[0.0, 0.0], [0.0, -0.1]];
    cone.push(!is_shielded(&wind.physics, &w, 0));
    rep.flag(
        "shielding cone: behind, oblique, far, upwind, larger agent",
        cone.iter().all(|&c| c),
        format!("{cone:?}"),
    );

    let disp = TaskConfig::dispersion(3, 3);
    let mut states: Vec<PomgState> = (0..6)
        .map(|i| reset(&disp, instance_seed(opts.seed, 100 + i)).map(|x| x.0))
        .collect::<Result<_>>()?;
    let mut batch_ok = true;
    for t in 0..30 {
        let actions: Vec<Vec<[f64; 2]>> = (0..6)
            .map(|e| {
                (0..3)
                    .map(|k| [((t * 7 + e * 3 + k) as f64).sin(), ((t + e + 5 * k) as f64).cos()])
                    .collect()
            })
            .collect();
        let outs = step_batch(&disp, &states, &actions)?;
        for (e, out) in outs.iter().enumerate() {
            batch_ok &= *out == step(&disp, &states[e], &actions[e])?;
        }
        states = outs.into_iter().map(|o| o.state).collect();
    }
    rep.flag("batched stepping matches independent stepping", batch_ok, "6 envs x 30 steps");

    let mut latch_counts = Vec::new();
    for k in 0..10 {
        let (mut s, _) = reset(&cfg, instance_seed(opts.seed, 200 + k))?;
        let mut plan = parse_perturbations("remove:first_on_plate2")?;
        plan.validate(&cfg)?;
        let mut removals = 0;
        loop {
            let out = step_with_plan(&cfg, &s, &pressure_plate_actions(&cfg, &s), &mut plan)?;
            removals += usize::from(out.event.kind == EventKind::AgentRemoved);
            s = out.state;
            if out.done {
                break;
            }
        }
        latch_counts.push(removals);
    }
    rep.flag(
        "plate-2 removal fires exactly once per episode",
        latch_counts.iter().all(|&c| c == 1),
        format!("removals per episode {latch_counts:?}"),
    );
    Ok(rep)
}

fn small_hypernet(rng: &mut ChaCha8Rng, obs_dim: usize) -> Result<HypernetParams> {
    HypernetParams::init(
        rng,
        HypernetShape {
            obs_dim,
            embed: 8,
            heads: 2,
            blocks: 2,
            ff: 16,
            rank: 2,
            feature_dim: 6,
            action_dim: 2,
        },
    )
}

fn query_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("query");
    let mut rng = rng_for(opts, 6);
    let cfg = TaskConfig::pressure_plate();
    let params = small_hypernet(&mut rng, cfg.obs_width())?;

    let mut mismatched = 0;
    let mut total_events = 0;
    for ep in 0..100 {
        let (mut s, _) = reset(&cfg, instance_seed(opts.seed, 300 + ep))?;
        let mut spec = vec![format!("target:{:.3}@{}", rng.gen_range(0.05..2.0), rng.gen_range(0..60))];
        if rng.gen_bool(0.5) {
            spec.push("remove:first_on_plate2".into());
        }
        if rng.gen_bool(0.5) {
            spec.push(format!("capability:{}={:.2}@{}", rng.gen_range(0..3), rng.gen_range(0.3..1.0), rng.gen_range(0..60)));
        }
        let mut plan = parse_perturbations(&spec.join(","))?;
        plan.validate(&cfg)?;
        let random_actions = ep % 4 == 3;
        let nmd_des = 0.5;
        let mut calls = 0;
        let mut events = 0;
        let mut assignment = None;
        let mut ev = crate::event::EventRecord::null(0);
        loop {
            let obs = observe(&cfg, &s);
            let agents = s.live_agents();
            let ctx = QueryContext {
                params: &params,
                observations: &obs,
                agents: &agents,
                nmd_des,
            };
            let (next, called) = maybe_requery(assignment.as_ref(), &ev, s.timestep, &ctx)?;
            calls += usize::from(called);
            assignment = Some(next);
            let actions: Vec<[f64; 2]> = if random_actions {
                (0..agents.len()).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
            } else {
                pressure_plate_actions(&cfg, &s)
            };
            let out = step_with_plan(&cfg, &s, &actions, &mut plan)?;
            s = out.state;
            if out.done {
                break;
            }
            ev = out.event;
            events += usize::from(!ev.is_null());
        }
        total_events += events;
        if calls != events + 1 {
            mismatched += 1;
        }
    }
    rep.flag(
        "hypernetwork calls = events + 1 in every episode",
        mismatched == 0,
        format!("100 episodes, {total_events} events, {mismatched} mismatched"),
    );

    let mut worst: f64 = 0.0;
    for n in [2, 3, 5, 8] {
        let params = small_hypernet(&mut rng, 5)?;
        let obs: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut rng, 5, -1.0, 1.0)).collect();
        let event = encode_event(&crate::event::EventRecord::signal(Signal::Plate1On, 3));
        let base = generate(&params, &obs, &event, 0.7)?;
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| obs[i].clone()).collect();
            let out = generate(&params, &permuted, &event, 0.7)?;
            for (k, &i) in perm.iter().enumerate() {
                let diff = out[k]
                    .flatten()
                    .iter()
                    .zip(base[i].flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(diff);
            }
        }
    }
    rep.bound("permutation equivariance, N in {2, 3, 5, 8}", worst, 1e-10);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_oracle_on_shifted_samples() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().rev().map(|v| v + 2.0).collect();
        assert!((empirical_w2_1d(a, b) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope", &VerifyOptions::default()).is_err());
    }

    #[test]
    fn mutated_gradient_fails() {
        let opts = VerifyOptions {
            mutate_grad_sign: true,
            ..VerifyOptions::default()
        };
        let rep = run_suite("gradient", &opts).unwrap();
        assert!(!rep.passed());
    }
}
