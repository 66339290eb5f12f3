//! Numerical checks of the inequalities the learners rely on.
//!
//! Deterministic checks must hold with zero violations. Monte Carlo checks
//! compare an empirical frequency with its target minus a 3σ binomial slack.
//! Every check draws from its own [`Purpose::Verification`] stream.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    cfpo_run, depo_run, hyperparams_theory, omd_step, po_ablation_run, repo_run, sigmoid,
    RunContext, RunOptions, RunRecord, Variant,
};
use crate::covlinalg::{symmetric_sqrt, CovarianceAccumulator};
use crate::error::{Error, Result};
use crate::mdpcore::{
    gen_mixture, gen_tabular_onehot, optimal_policy_dp, policy_value_dp,
    truncated_feature_occupancy, value_difference_residual, ContractionMap, LinearMdp,
    PolicyTable, QTable,
};
use crate::rng::{stream, Purpose, RunSeed, StreamRng};

/// Base seed of every verification stream.
pub const VERIFY_SEED: u64 = 0x5EED_2024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Smallest `RHS − LHS` seen (or `frequency − threshold`).
    pub worst_margin: f64,
    pub trials: u64,
    pub details: String,
}

impl CheckResult {
    fn new(name: &str, worst_margin: f64, tolerance: f64, trials: u64, details: String) -> Self {
        Self {
            name: name.to_string(),
            passed: worst_margin >= -tolerance,
            worst_margin,
            trials,
            details: format!("{details}; tolerance {tolerance:e}"),
        }
    }

    /// `name PASS|FAIL margin=... trials=...`
    pub fn line(&self) -> String {
        format!(
            "{:<32} {} worst_margin={:+.6e} trials={} ({})",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.worst_margin,
            self.trials,
            self.details
        )
    }
}

fn check_rng(tag: u64) -> StreamRng {
    stream(VERIFY_SEED, tag, Purpose::Verification)
}

/// One-sided 3σ binomial slack for a target probability `p` over `n` trials.
pub fn three_sigma(p: f64, n: u64) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

// ---------------------------------------------------------------------------
// scalar inequalities

fn logistic_objective(y: f64, beta_w: f64, ln_k: f64) -> f64 {
    y * sigmoid(-beta_w * y + ln_k)
}

/// Max of `f` on `[lo, hi]`: dense grid, then golden-section refinement
/// around the best grid cell.
fn grid_golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid: usize) -> f64 {
    if hi <= lo {
        return f(lo);
    }
    let step = (hi - lo) / grid as f64;
    let (mut best_i, mut best) = (0, f(lo));
    for i in 1..=grid {
        let v = f(lo + step * i as f64);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let mut a = lo + step * best_i.saturating_sub(1) as f64;
    let mut b = (lo + step * (best_i + 1) as f64).min(hi);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..100 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    best.max(f((a + b) / 2.0))
}

/// `max_{y ≥ 0} y·σ(−β_w y + ln K) ≤ 2 ln K / β_w`.
pub fn check_logistic_linear() -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut trials = 0;
    let mut detail = String::new();
    for &beta_w in &[0.5, 1.0, 4.0, 16.0] {
        for &k in &[1.0, 2.0, 10.0, 1e3, 1e6] {
            let ln_k: f64 = f64::ln(k);
            let max = grid_golden_max(
                |y| logistic_objective(y, beta_w, ln_k),
                0.0,
                10.0 * ln_k / beta_w,
                10_000,
            );
            let margin = 2.0 * ln_k / beta_w - max;
            if margin < worst {
                worst = margin;
                detail = format!("tightest at beta_w={beta_w}, K={k}: max {max:.6e}");
            }
            trials += 1;
        }
    }
    CheckResult::new("logistic_linear", worst, 1e-9, trials, detail)
}

/// `σ(x − ln K) ≤ 2(x² + 1/K)` on `x ∈ [0, 10]`.
pub fn check_logistic_quadratic() -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut trials = 0;
    let n = 10_000;
    for &k in &[1.0, 10.0, 1e3] {
        for i in 0..=n {
            let x = 10.0 * i as f64 / n as f64;
            let margin = 2.0 * (x * x + 1.0 / k) - sigmoid(x - f64::ln(k));
            worst = worst.min(margin);
            trials += 1;
        }
    }
    CheckResult::new(
        "logistic_quadratic",
        worst,
        1e-12,
        trials,
        "K in {1, 10, 1e3}, 10^4-point grid".into(),
    )
}

// ---------------------------------------------------------------------------
// matrix inequalities

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn log_det_pd(m: &DMatrix<f64>) -> f64 {
    let chol = m.clone().cholesky().expect("positive definite");
    2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// `N ⪰ M ≻ 0 ⇒ ‖v‖²_N ≤ (det N / det M)·‖v‖²_M`, relative margin.
pub fn check_matrix_norm_inequality<R: Rng + ?Sized>(rng: &mut R) -> CheckResult {
    let mut worst = f64::INFINITY;
    let trials = 1000;
    for t in 0..trials {
        let d = rng.random_range(1..=6);
        let a = random_matrix(d, d, rng);
        let eps = rng.random_range(0.01..1.0);
        let m = &a * a.transpose() + DMatrix::identity(d, d) * eps;
        let n = match t % 10 {
            0 => m.clone(),
            1 => &m * 2.0,
            _ => {
                let r = rng.random_range(0..=d);
                let b = random_matrix(d, r, rng);
                &m + &b * b.transpose()
            }
        };
        let v = if t % 50 == 3 {
            DVector::zeros(d)
        } else {
            random_vector(d, rng)
        };
        let lhs = quad(&n, &v);
        let rhs = (log_det_pd(&n) - log_det_pd(&m)).exp() * quad(&m, &v);
        let margin = if rhs > 0.0 { (rhs - lhs) / rhs } else { -lhs };
        worst = worst.min(margin);
    }
    CheckResult::new(
        "matrix_norm_inequality",
        worst,
        1e-9,
        trials,
        "relative margin, dim 1..=6".into(),
    )
}

fn op_norm_sym(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

/// `‖Λ^{1/2} − Λ'^{1/2}‖ ≤ ‖Λ − Λ'‖ / (2√λ)` for `Λ, Λ' ⪰ λI`.
pub fn check_sqrt_lipschitz<R: Rng + ?Sized>(rng: &mut R) -> CheckResult {
    let mut worst = f64::INFINITY;
    let trials = 1000;
    for t in 0..trials {
        let d = rng.random_range(1..=6);
        let lambda = rng.random_range(0.05..2.0);
        let floor = DMatrix::identity(d, d) * lambda;
        let a = random_matrix(d, d, rng) * rng.random_range(0.0..2.0);
        let l1 = &floor + &a * a.transpose();
        let l2 = if t % 20 == 0 {
            l1.clone()
        } else {
            let b = random_matrix(d, d, rng) * rng.random_range(0.0..2.0);
            &floor + &b * b.transpose()
        };
        let lhs = op_norm_sym(&(symmetric_sqrt(&l1) - symmetric_sqrt(&l2)));
        let rhs = op_norm_sym(&(&l1 - &l2)) / (2.0 * lambda.sqrt());
        let margin = if rhs > 0.0 { (rhs - lhs) / rhs } else { -lhs };
        worst = worst.min(margin);
    }
    CheckResult::new(
        "sqrt_lipschitz",
        worst,
        1e-8,
        trials,
        "operator norm, relative margin".into(),
    )
}

/// Sum of `‖z_t‖_{V_t⁻¹}` with `V_t = I + Σ_{s<t} z_s z_sᵀ`.
pub fn elliptical_sum(zs: &[DVector<f64>], dim: usize) -> Result<f64> {
    let mut cov = CovarianceAccumulator::new(dim)?;
    let mut total = 0.0;
    for z in zs {
        total += cov.mahalanobis_inv(z)?;
        cov.update(z)?;
    }
    Ok(total)
}

pub fn elliptical_bound(t: usize, dim: usize) -> f64 {
    let tf = t as f64;
    (2.0 * tf * dim as f64 * (tf + 1.0).ln()).sqrt()
}

/// `Σ_t ‖z_t‖_{V_t⁻¹} ≤ √(2 T d' ln(T+1))` for `‖z_t‖ ≤ 1`.
pub fn check_elliptical_potential<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let mut worst = f64::INFINITY;
    let trials = 100;
    for s in 0..trials {
        let dim = rng.random_range(1..=8);
        let t = if s % 4 == 0 {
            10_000
        } else {
            (10f64.powf(rng.random_range(0.0..4.0))) as usize
        };
        let fixed = random_vector(dim, rng).normalize();
        let zs: Vec<DVector<f64>> = (0..t)
            .map(|_| match s % 5 {
                0 => fixed.clone(),
                1 => &fixed * rng.random_range(-1.0..1.0),
                2 => DVector::zeros(dim),
                _ => {
                    let g = random_vector(dim, rng);
                    let n = g.norm();
                    if n == 0.0 {
                        g
                    } else {
                        g / n * rng.random::<f64>().sqrt()
                    }
                }
            })
            .collect();
        let margin = elliptical_bound(t, dim) - elliptical_sum(&zs, dim)?;
        worst = worst.min(margin);
    }
    Ok(CheckResult::new(
        "elliptical_potential",
        worst,
        0.0,
        trials,
        "lambda = 1, dim 1..=8, T up to 10^4".into(),
    ))
}

/// Realized regret of exponential weights against the best fixed action
/// and the certificate `ln A / η + η Σ_t Σ_a x_t(a) y_t(a)²`.
pub fn omd_regret_and_bound(losses: &[Vec<f64>], eta: f64) -> Result<(f64, f64)> {
    omd_play(losses.len(), losses.first().map_or(1, |l| l.len()), eta, |t, _| {
        losses[t].clone()
    })
}

/// Like [`omd_regret_and_bound`] with losses chosen after seeing `x_t`.
fn omd_play(
    rounds: usize,
    num_actions: usize,
    eta: f64,
    mut loss_of: impl FnMut(usize, &[f64]) -> Vec<f64>,
) -> Result<(f64, f64)> {
    let mut x = vec![1.0 / num_actions as f64; num_actions];
    let mut totals = vec![0.0; num_actions];
    let (mut played, mut second) = (0.0, 0.0);
    for t in 0..rounds {
        let y = loss_of(t, &x);
        for a in 0..num_actions {
            played += x[a] * y[a];
            second += x[a] * y[a] * y[a];
            totals[a] += y[a];
        }
        x = omd_step(&x, &y, eta)?;
    }
    let best = totals.iter().cloned().fold(f64::INFINITY, f64::min);
    let regret = played - if rounds == 0 { 0.0 } else { best };
    Ok((regret, (num_actions as f64).ln() / eta + eta * second))
}

pub fn check_omd_bound<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let mut worst = f64::INFINITY;
    let trials = 1000;
    for s in 0..trials {
        let (na, t, eta) = if s == 0 {
            (4, 500, 0.05)
        } else {
            (
                rng.random_range(1..=8),
                rng.random_range(1..=500),
                rng.random_range(0.01..1.0),
            )
        };
        let family = if s == 0 { 2 } else { s % 4 };
        let constant: Vec<f64> = (0..na).map(|_| rng.random::<f64>()).collect();
        let mut draws = Vec::with_capacity(t * na);
        for _ in 0..t * na {
            draws.push(rng.random::<f64>());
        }
        let (regret, bound) = omd_play(t, na, eta, |i, x| match family {
            0 => draws[i * na..(i + 1) * na].to_vec(),
            1 => draws[i * na..(i + 1) * na]
                .iter()
                .map(|u| (2.0 * u - 1.0) / eta)
                .collect(),
            2 => {
                let top = x
                    .iter()
                    .enumerate()
                    .fold(0, |b, (a, v)| if *v > x[b] { a } else { b });
                (0..na).map(|a| if a == top { 1.0 } else { -1.0 }).collect()
            }
            _ => constant.clone(),
        })?;
        let tol_scale = 1.0 + bound.abs();
        worst = worst.min((bound - regret) / tol_scale);
    }
    Ok(CheckResult::new(
        "omd_bound",
        worst,
        1e-9,
        trials,
        "uniform, scaled signed, adaptive ±1 and constant losses with eta*y >= -1; margin relative to 1+bound".into(),
    ))
}

// ---------------------------------------------------------------------------
// DP identities

fn small_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<LinearMdp> {
    let hz = rng.random_range(1..=4);
    let s = rng.random_range(1..=5);
    let na = rng.random_range(1..=3);
    if rng.random_bool(0.25) {
        gen_tabular_onehot(s, na, hz, rng)
    } else {
        gen_mixture(rng.random_range(1..=4), s, na, hz, rng)
    }
}

/// Residual of the extended value-difference identity on random
/// `(π, π̂, Q̂)` triples.
pub fn check_value_difference<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let trials = 50;
    let mut worst_residual: f64 = 0.0;
    for _ in 0..trials {
        let mdp = small_instance(rng)?;
        let (hz, s, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
        let pi = PolicyTable::random(hz, s, na, rng);
        let pihat = PolicyTable::random(hz, s, na, rng);
        let mut q = QTable::zeros(hz, s, na);
        for h in 0..hz {
            for x in 0..s {
                for a in 0..na {
                    q.set(h, x, a, rng.random_range(-(hz as f64)..hz as f64));
                }
            }
        }
        worst_residual = worst_residual.max(value_difference_residual(&mdp, &pi, &pihat, &q)?);
    }
    Ok(CheckResult::new(
        "value_difference",
        -worst_residual,
        1e-9,
        trials,
        format!("max residual {worst_residual:.3e}"),
    ))
}

/// `V̄ ≤ V` for contracted values, plus the occupancy route
/// `φ̄ᵀθ = V̄_1(x1)` computed independently of the backward recursion.
pub fn check_contracted_optimism<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let trials = 200;
    let mut worst = f64::INFINITY;
    let mut dual_gap: f64 = 0.0;
    let mut identity_gap: f64 = 0.0;
    let mut zero_max: f64 = 0.0;
    for t in 0..trials {
        let mdp = small_instance(rng)?;
        let (hz, s, na, d) = (mdp.horizon(), mdp.num_states(), mdp.num_actions(), mdp.d());
        let pi = PolicyTable::random(hz, s, na, rng);
        let rho_vals: Vec<f64> = (0..hz * s * na)
            .map(|_| match t % 10 {
                0 => 1.0,
                1 => 0.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let rho = ContractionMap::from_fn(hz, s, na, |h, x, a| rho_vals[(h * s + x) * na + a]);
        let v = policy_value_dp(&mdp, &pi, None)?;
        let vbar = policy_value_dp(&mdp, &pi, Some(&rho))?;
        for h in 0..hz {
            for x in 0..s {
                worst = worst.min(v[h][x] - vbar[h][x]);
                match t % 10 {
                    0 => identity_gap = identity_gap.max((v[h][x] - vbar[h][x]).abs()),
                    1 => zero_max = zero_max.max(vbar[h][x].abs()),
                    _ => {}
                }
            }
        }
        let occ = truncated_feature_occupancy(&mdp, &pi, &rho)?;
        let mut theta = DVector::zeros(d * hz);
        for h in 0..hz {
            theta.rows_mut(h * d, d).copy_from(mdp.theta(h));
        }
        dual_gap = dual_gap.max((occ.dot(&theta) - vbar[0][mdp.x1()]).abs());
    }
    let mut result = CheckResult::new(
        "contracted_optimism",
        worst,
        1e-10,
        trials,
        format!(
            "occupancy route gap {dual_gap:.3e}, rho=1 gap {identity_gap:.3e}, rho=0 max {zero_max:.3e}"
        ),
    );
    result.passed &= dual_gap <= 1e-10 && identity_gap <= 1e-12 && zero_max == 0.0;
    Ok(result)
}

// ---------------------------------------------------------------------------
// epoch bound

/// `(3/2)·dH·ln(2K)` for CFPO, `3·dH·ln(2K)` for the ensembles.
pub fn epoch_bound(variant: Variant, d: usize, horizon: usize, k: usize) -> f64 {
    let base = (d * horizon) as f64 * (2.0 * k as f64).ln();
    match variant {
        Variant::Cfpo => 1.5 * base,
        Variant::Repo | Variant::Depo => 3.0 * base,
    }
}

pub fn epoch_margin(record: &RunRecord, variant: Variant, mdp: &LinearMdp) -> f64 {
    epoch_bound(variant, mdp.d(), mdp.horizon(), record.rows.len().max(1))
        - record.epoch_count() as f64
}

fn run_variant(
    mdp: &LinearMdp,
    variant: Variant,
    k: usize,
    scale: f64,
    seed: RunSeed,
    options: RunOptions,
) -> Result<RunRecord> {
    let (pi_star, v_star) = optimal_policy_dp(mdp)?;
    let hp = hyperparams_theory(
        mdp.d(),
        mdp.horizon(),
        k,
        mdp.num_actions(),
        0.1,
        variant,
        scale,
    )?;
    let ctx = RunContext {
        seed,
        pi_star: &pi_star,
        v_star,
        options,
    };
    match variant {
        Variant::Cfpo => cfpo_run(mdp, &hp, k, &ctx),
        Variant::Repo => repo_run(mdp, &hp, k, &ctx),
        Variant::Depo => depo_run(mdp, &hp, k, &ctx),
    }
}

/// Epoch counts of all three learners on random small instances.
pub fn check_epoch_bound<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let mut jobs = Vec::new();
    for i in 0..12 {
        let mdp = gen_mixture(
            rng.random_range(1..=3),
            rng.random_range(2..=4),
            rng.random_range(2..=3),
            rng.random_range(1..=3),
            rng,
        )?;
        let k = [2, 50, 300][i % 3];
        let scale = [1.0, 0.05][i % 2];
        for variant in [Variant::Cfpo, Variant::Repo, Variant::Depo] {
            jobs.push((mdp.clone(), variant, k, scale, i as u64));
        }
    }
    let margins = jobs
        .par_iter()
        .map(|(mdp, variant, k, scale, i)| {
            let rec = run_variant(
                mdp,
                *variant,
                *k,
                *scale,
                RunSeed::new(VERIFY_SEED, *i),
                RunOptions::default(),
            )?;
            Ok(epoch_margin(&rec, *variant, mdp))
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(CheckResult::new(
        "epoch_bound",
        worst,
        0.0,
        margins.len() as u64,
        "cfpo, repo and depo runs, K in {2, 50, 300}".into(),
    ))
}

// ---------------------------------------------------------------------------
// Monte Carlo checks

/// Frequency of `max_{i≤m} g_i ≥ σ` for i.i.d. `N(0, σ²)` draws.
pub fn anticoncentration_frequency<R: Rng + ?Sized>(
    m: usize,
    sigma: f64,
    trials: u64,
    rng: &mut R,
) -> f64 {
    let mut hits = 0u64;
    for _ in 0..trials {
        let mut best = f64::NEG_INFINITY;
        for _ in 0..m {
            let g: f64 = StandardNormal.sample(rng);
            best = best.max(sigma * g);
        }
        if best >= sigma {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

pub fn check_gaussian_anticoncentration<R: Rng + ?Sized>(rng: &mut R) -> CheckResult {
    let trials = 100_000;
    let mut worst = f64::INFINITY;
    let mut details = Vec::new();
    for &m in &[9usize, 20, 50] {
        let target = 1.0 - (-(m as f64) / 9.0).exp();
        let threshold = target - three_sigma(target, trials);
        for &sigma in &[1.0, 3.0] {
            let freq = anticoncentration_frequency(m, sigma, trials, rng);
            worst = worst.min(freq - threshold);
            details.push(format!("m={m} sigma={sigma}: {freq:.5} vs {threshold:.5}"));
        }
    }
    CheckResult::new(
        "gaussian_anticoncentration",
        worst,
        0.0,
        6 * trials,
        details.join(", "),
    )
}

pub fn gaussian_norm_radius(d: usize, delta: f64) -> f64 {
    (1.5 * d as f64 + 4.0 * (1.0 / delta).ln()).sqrt()
}

pub fn check_gaussian_norm<R: Rng + ?Sized>(rng: &mut R) -> CheckResult {
    let trials = 100_000u64;
    let mut worst = f64::INFINITY;
    let mut details = Vec::new();
    let mut sanity_ok = true;
    for &d in &[2usize, 8, 32] {
        let mut sq = Vec::with_capacity(trials as usize);
        for _ in 0..trials {
            let s: f64 = (0..d)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    g * g
                })
                .sum();
            sq.push(s);
        }
        let mean = sq.iter().sum::<f64>() / trials as f64;
        if (mean - d as f64).abs() > 3.0 * (2.0 * d as f64 / trials as f64).sqrt() {
            sanity_ok = false;
        }
        for &delta in &[0.1, 0.01] {
            let r = gaussian_norm_radius(d, delta);
            let freq = sq.iter().filter(|s| s.sqrt() <= r).count() as f64 / trials as f64;
            let threshold = 1.0 - delta - three_sigma(1.0 - delta, trials);
            worst = worst.min(freq - threshold);
            details.push(format!("d={d} delta={delta}: {freq:.5}"));
        }
    }
    let mut res = CheckResult::new(
        "gaussian_norm",
        worst,
        0.0,
        3 * trials,
        format!(
            "{}; chi-square mean sanity {}",
            details.join(", "),
            if sanity_ok { "ok" } else { "FAILED" }
        ),
    );
    res.passed &= sanity_ok;
    res
}

/// Violation frequency of `Σ E[X_t | F_{t−1}] ≤ 2 Σ X_t + 4 ln(2/δ)` for an
/// adapted sequence produced by `step(prev, rng) -> (mean, draw)`.
pub fn bernstein_violation_frequency<R, F>(
    t: usize,
    delta: f64,
    reps: u64,
    rng: &mut R,
    mut step: F,
) -> f64
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], &mut R) -> (f64, f64),
{
    let slack = 4.0 * (2.0 / delta).ln();
    let mut violations = 0u64;
    let mut history = Vec::with_capacity(t);
    for _ in 0..reps {
        history.clear();
        let (mut means, mut sum) = (0.0, 0.0);
        for _ in 0..t {
            let (mu, x) = step(&history, rng);
            means += mu;
            sum += x;
            history.push(x);
        }
        if means > 2.0 * sum + slack {
            violations += 1;
        }
    }
    violations as f64 / reps as f64
}

pub fn check_bernstein<R: Rng + ?Sized>(rng: &mut R) -> CheckResult {
    let (t, delta, reps) = (1000, 0.05, 10_000u64);
    let allowed = delta + three_sigma(delta, reps);
    let bern = |p: f64, rng: &mut R| if rng.random_bool(p) { 1.0 } else { 0.0 };
    let freqs = [
        (
            "bernoulli(0.5)",
            bernstein_violation_frequency(t, delta, reps, rng, |_, r| (0.5, bern(0.5, r))),
        ),
        (
            "previous-outcome switching",
            bernstein_violation_frequency(t, delta, reps, rng, |h, r| {
                let p = if h.last() == Some(&1.0) { 0.3 } else { 0.01 };
                (p, bern(p, r))
            }),
        ),
        (
            "running-mean uniform",
            bernstein_violation_frequency(t, delta, reps, rng, |h, r| {
                let avg = if h.is_empty() {
                    0.5
                } else {
                    h.iter().sum::<f64>() / h.len() as f64
                };
                let c = 0.02 + 0.9 * avg;
                (c / 2.0, c * r.random::<f64>())
            }),
        ),
        (
            "deterministic",
            bernstein_violation_frequency(t, delta, 100, rng, |h, _| {
                let x = (h.len() % 7) as f64 / 7.0;
                (x, x)
            }),
        ),
    ];
    let worst = freqs
        .iter()
        .map(|(_, f)| allowed - f)
        .fold(f64::INFINITY, f64::min);
    let details = freqs
        .iter()
        .map(|(n, f)| format!("{n}: {f:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    CheckResult::new(
        "bernstein",
        worst,
        0.0,
        3 * reps + 100,
        format!("violation frequencies vs {allowed:.4}: {details}"),
    )
}

// ---------------------------------------------------------------------------
// runtime checks on learner runs

/// Settings of the CFPO runs behind the conditional invariants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeConfig {
    pub runs: usize,
    pub k: usize,
    pub scale: f64,
    pub base_seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            runs: 50,
            k: 2000,
            scale: 1.0,
            base_seed: VERIFY_SEED,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuntimeStats {
    pub runs: usize,
    pub episodes: usize,
    /// Episodes where both error monitors were within `(β_r, β_p)`.
    pub in_bounds: usize,
    pub optimism_violations: usize,
    pub qbound_violations: usize,
    /// Smallest `1e-9 − gap` over in-bounds episodes.
    pub optimism_margin: f64,
    pub qbound_margin: f64,
    pub epoch_margin: f64,
}

/// Small instance `i` of the runtime suites (`d ≤ 4, H ≤ 3, |X| ≤ 5, |A| ≤ 3`).
pub fn runtime_instance(base_seed: u64, i: u64) -> Result<LinearMdp> {
    let mut rng = stream(base_seed, i, Purpose::Environment);
    let d = rng.random_range(2..=4);
    let hz = rng.random_range(2..=3);
    let s = rng.random_range(2..=5);
    let na = rng.random_range(2..=3);
    gen_mixture(d, s, na, hz, &mut rng)
}

pub fn runtime_cfpo_stats(cfg: &RuntimeConfig) -> Result<RuntimeStats> {
    let per_run = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|i| {
            let mdp = runtime_instance(cfg.base_seed, i)?;
            let rec = run_variant(
                &mdp,
                Variant::Cfpo,
                cfg.k,
                cfg.scale,
                RunSeed::new(cfg.base_seed, i),
                RunOptions::default(),
            )?;
            let mut s = RuntimeStats {
                runs: 1,
                episodes: rec.rows.len(),
                optimism_margin: f64::INFINITY,
                qbound_margin: f64::INFINITY,
                epoch_margin: epoch_margin(&rec, Variant::Cfpo, &mdp),
                ..Default::default()
            };
            for r in rec.rows.iter().filter(|r| r.e1 && r.e2) {
                s.in_bounds += 1;
                let om = 1e-9 - r.optimism_gap;
                let qm = 1e-9 - r.qbound_excess;
                s.optimism_violations += usize::from(om < 0.0);
                s.qbound_violations += usize::from(qm < 0.0);
                s.optimism_margin = s.optimism_margin.min(om);
                s.qbound_margin = s.qbound_margin.min(qm);
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_run.into_iter().fold(
        RuntimeStats {
            optimism_margin: f64::INFINITY,
            qbound_margin: f64::INFINITY,
            epoch_margin: f64::INFINITY,
            ..Default::default()
        },
        |a, b| RuntimeStats {
            runs: a.runs + b.runs,
            episodes: a.episodes + b.episodes,
            in_bounds: a.in_bounds + b.in_bounds,
            optimism_violations: a.optimism_violations + b.optimism_violations,
            qbound_violations: a.qbound_violations + b.qbound_violations,
            optimism_margin: a.optimism_margin.min(b.optimism_margin),
            qbound_margin: a.qbound_margin.min(b.qbound_margin),
            epoch_margin: a.epoch_margin.min(b.epoch_margin),
        },
    ))
}

/// Pointwise optimism and the Q-bound in every in-bounds CFPO episode, and
/// the epoch bound on every run.
pub fn check_runtime_optimism_and_qbound(cfg: &RuntimeConfig) -> Result<CheckResult> {
    let s = runtime_cfpo_stats(cfg)?;
    let worst = s.optimism_margin.min(s.qbound_margin).min(s.epoch_margin);
    let mut res = CheckResult::new(
        "runtime_optimism_and_qbound",
        worst,
        0.0,
        s.episodes as u64,
        format!(
            "{} runs, {} of {} episodes in bounds, {} optimism and {} q-bound violations, epoch margin {:.3}",
            s.runs, s.in_bounds, s.episodes, s.optimism_violations, s.qbound_violations, s.epoch_margin
        ),
    );
    res.passed &= s.in_bounds > 0;
    Ok(res)
}

/// Settings of the REPO runs behind the E4 statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct E4Config {
    pub runs: usize,
    pub k: usize,
    pub scale: f64,
    pub delta: f64,
    /// Force every perturbation to zero (negative control).
    pub zero: bool,
    pub base_seed: u64,
}

impl Default for E4Config {
    fn default() -> Self {
        Self {
            runs: 12,
            k: 1000,
            scale: 1e-5,
            delta: 0.1,
            zero: false,
            base_seed: VERIFY_SEED ^ 0xE4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct E4Summary {
    pub m: usize,
    pub epochs: usize,
    /// Epochs with a non-zero contracted occupancy of `π*`.
    pub informative: usize,
    pub holds: usize,
    pub target: f64,
    pub threshold: f64,
    pub epoch_margin: f64,
}

impl E4Summary {
    pub fn frequency(&self) -> f64 {
        if self.informative == 0 {
            f64::NAN
        } else {
            self.holds as f64 / self.informative as f64
        }
    }
}

pub fn repo_e4_summary(cfg: &E4Config) -> Result<E4Summary> {
    let per_run = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|i| {
            let mdp = runtime_instance(cfg.base_seed, i)?;
            let (pi_star, v_star) = optimal_policy_dp(&mdp)?;
            let mut hp = hyperparams_theory(
                mdp.d(),
                mdp.horizon(),
                cfg.k,
                mdp.num_actions(),
                cfg.delta,
                Variant::Repo,
                cfg.scale,
            )?;
            hp.disable_perturbation = cfg.zero;
            let ctx = RunContext {
                seed: RunSeed::new(cfg.base_seed, i),
                pi_star: &pi_star,
                v_star,
                options: RunOptions::default(),
            };
            let rec = repo_run(&mdp, &hp, cfg.k, &ctx)?;
            let stats: Vec<_> = rec.epochs.iter().filter_map(|e| e.e4).collect();
            let informative: Vec<_> = stats.iter().filter(|s| s.occupancy_norm > 1e-12).collect();
            Ok((
                hp.m,
                rec.epoch_count(),
                informative.len(),
                informative.iter().filter(|s| s.holds()).count(),
                epoch_margin(&rec, Variant::Repo, &mdp),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = per_run.iter().map(|r| r.0).max().unwrap_or(1);
    let informative: usize = per_run.iter().map(|r| r.2).sum();
    let target = 1.0 - (-(m as f64) / 9.0).exp();
    Ok(E4Summary {
        m,
        epochs: per_run.iter().map(|r| r.1).sum(),
        informative,
        holds: per_run.iter().map(|r| r.3).sum(),
        target,
        threshold: target - three_sigma(target, informative.max(1) as u64),
        epoch_margin: per_run.iter().map(|r| r.4).fold(f64::INFINITY, f64::min),
    })
}

pub fn check_repo_e4(cfg: &E4Config) -> Result<CheckResult> {
    let s = repo_e4_summary(cfg)?;
    let freq = s.frequency();
    let margin = if s.informative == 0 {
        f64::NEG_INFINITY
    } else {
        freq - s.threshold
    };
    let mut res = CheckResult::new(
        "repo_e4",
        margin,
        0.0,
        s.informative as u64,
        format!(
            "m={}, E4 held in {} of {} informative epochs ({} total), threshold {:.6}, epoch margin {:.3}",
            s.m, s.holds, s.informative, s.epochs, s.threshold, s.epoch_margin
        ),
    );
    res.passed &= s.epoch_margin >= 0.0;
    Ok(res)
}

/// With ζ ≡ 0 the E4 statistic must fail on every informative epoch.
pub fn check_repo_e4_negative_control(cfg: &E4Config) -> Result<CheckResult> {
    let s = repo_e4_summary(&E4Config { zero: true, ..*cfg })?;
    let margin = if s.informative == 0 {
        f64::NEG_INFINITY
    } else {
        -(s.holds as f64)
    };
    Ok(CheckResult::new(
        "repo_e4_negative_control",
        margin,
        0.0,
        s.informative as u64,
        format!(
            "zero perturbations: E4 held in {} of {} informative epochs (must be 0)",
            s.holds, s.informative
        ),
    ))
}

/// Hedge weights are simplex vectors at every episode and reset exactly at
/// epoch starts, for REPO and DEPO.
pub fn check_hedge_simplex() -> Result<CheckResult> {
    let jobs: Vec<(u64, Variant, f64)> = (0..6u64)
        .flat_map(|i| [(i, Variant::Repo, 0.05), (i, Variant::Depo, 0.05)])
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, variant, scale)| {
            let mdp = runtime_instance(VERIFY_SEED ^ 0x4ED6, i)?;
            let options = RunOptions {
                record_hedge: true,
                ..Default::default()
            };
            let rec = run_variant(&mdp, variant, 400, scale, RunSeed::new(VERIFY_SEED, i), options)?;
            let mut worst = f64::INFINITY;
            for (row, w) in rec.rows.iter().zip(rec.hedge.as_deref().unwrap_or(&[])) {
                let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
                worst = worst
                    .min(1e-12 - (w.iter().sum::<f64>() - 1.0).abs())
                    .min(1e-12 - (row.hedge_sum - 1.0).abs())
                    .min(min);
            }
            let starts: Vec<usize> = rec.epochs.iter().map(|e| e.start).collect();
            let resets: Vec<usize> = rec.rows.iter().filter(|r| r.hedge_reset).map(|r| r.k).collect();
            if starts != resets {
                worst = f64::NEG_INFINITY;
            }
            Ok((worst, rec.rows.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    Ok(CheckResult::new(
        "hedge_simplex",
        worst,
        0.0,
        results.iter().map(|r| r.1 as u64).sum(),
        "sum within 1e-12, entries >= 0, resets only at epoch starts".into(),
    ))
}

/// REPO with `m = 1` and ζ ≡ 0 reproduces the single-policy ablation.
pub fn check_repo_collapse() -> Result<CheckResult> {
    let trials = 5u64;
    let mismatches = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mdp = runtime_instance(VERIFY_SEED ^ 0xC011, i)?;
            let (pi_star, v_star) = optimal_policy_dp(&mdp)?;
            let k = 300;
            let mut hp = hyperparams_theory(
                mdp.d(),
                mdp.horizon(),
                k,
                mdp.num_actions(),
                0.1,
                Variant::Repo,
                0.05,
            )?;
            hp.m = 1;
            hp.eta_x = 0.0;
            hp.disable_perturbation = true;
            let ctx = RunContext {
                seed: RunSeed::new(VERIFY_SEED, i),
                pi_star: &pi_star,
                v_star,
                options: RunOptions {
                    record_policies: true,
                    ..Default::default()
                },
            };
            let a = repo_run(&mdp, &hp, k, &ctx)?;
            let b = po_ablation_run(&mdp, &hp, k, &ctx)?;
            Ok(usize::from(a.rows != b.rows || a.policies != b.policies))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(CheckResult::new(
        "repo_collapse",
        -(mismatches as f64),
        0.0,
        trials,
        format!("{mismatches} of {trials} runs differ from the ablation"),
    ))
}

/// `2√(2d ln(2KH/δ))`, the confidence radius of the per-step loss estimate.
pub fn reward_error_radius(d: usize, k: usize, horizon: usize, delta: f64) -> f64 {
    2.0 * (2.0 * d as f64 * (2.0 * (k * horizon) as f64 / delta).ln()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardErrorConfig {
    pub runs: usize,
    pub k: usize,
    pub delta: f64,
    pub scale: f64,
    pub base_seed: u64,
}

impl Default for RewardErrorConfig {
    fn default() -> Self {
        Self {
            runs: 200,
            k: 500,
            delta: 0.1,
            scale: 0.05,
            base_seed: VERIFY_SEED ^ 0xE1,
        }
    }
}

/// Fraction of runs in which the loss-estimate error stays within
/// [`reward_error_radius`] at every episode, and the largest error ratio seen.
pub fn reward_error_frequency(cfg: &RewardErrorConfig) -> Result<(f64, f64)> {
    let per_run = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|i| {
            let mdp = runtime_instance(cfg.base_seed, i)?;
            let radius = reward_error_radius(mdp.d(), cfg.k, mdp.horizon(), cfg.delta);
            let rec = run_variant(
                &mdp,
                Variant::Cfpo,
                cfg.k,
                cfg.scale,
                RunSeed::new(cfg.base_seed, i),
                RunOptions::default(),
            )?;
            let worst = rec.rows.iter().map(|r| r.rerr).fold(0.0, f64::max);
            Ok(worst / radius)
        })
        .collect::<Result<Vec<f64>>>()?;
    let held = per_run.iter().filter(|r| **r <= 1.0).count();
    let max_ratio = per_run.iter().cloned().fold(0.0, f64::max);
    Ok((held as f64 / cfg.runs.max(1) as f64, max_ratio))
}

pub fn check_reward_error_frequency(cfg: &RewardErrorConfig) -> Result<CheckResult> {
    let (freq, ratio) = reward_error_frequency(cfg)?;
    Ok(CheckResult::new(
        "reward_error_frequency",
        freq - (1.0 - cfg.delta),
        0.0,
        cfg.runs as u64,
        format!(
            "error within radius at every episode in {:.3} of runs; largest error/radius {ratio:.3}",
            freq
        ),
    ))
}

// ---------------------------------------------------------------------------
// suites

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    Deterministic,
    Statistical,
    Runtime,
}

/// Every check name with its suite.
pub const CHECKS: &[(&str, SuiteKind)] = &[
    ("logistic_linear", SuiteKind::Deterministic),
    ("logistic_quadratic", SuiteKind::Deterministic),
    ("matrix_norm_inequality", SuiteKind::Deterministic),
    ("sqrt_lipschitz", SuiteKind::Deterministic),
    ("elliptical_potential", SuiteKind::Deterministic),
    ("omd_bound", SuiteKind::Deterministic),
    ("value_difference", SuiteKind::Deterministic),
    ("contracted_optimism", SuiteKind::Deterministic),
    ("epoch_bound", SuiteKind::Deterministic),
    ("gaussian_anticoncentration", SuiteKind::Statistical),
    ("gaussian_norm", SuiteKind::Statistical),
    ("bernstein", SuiteKind::Statistical),
    ("runtime_optimism_and_qbound", SuiteKind::Runtime),
    ("repo_e4", SuiteKind::Runtime),
    ("repo_e4_negative_control", SuiteKind::Runtime),
    ("hedge_simplex", SuiteKind::Runtime),
    ("repo_collapse", SuiteKind::Runtime),
    ("reward_error_frequency", SuiteKind::Runtime),
];

/// Runs one check by name.
pub fn run_check(name: &str) -> Result<CheckResult> {
    let tag = CHECKS
        .iter()
        .position(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown check '{name}'")))? as u64;
    let mut rng = check_rng(tag);
    let rng = &mut rng;
    match name {
        "logistic_linear" => Ok(check_logistic_linear()),
        "logistic_quadratic" => Ok(check_logistic_quadratic()),
        "matrix_norm_inequality" => Ok(check_matrix_norm_inequality(rng)),
        "sqrt_lipschitz" => Ok(check_sqrt_lipschitz(rng)),
        "elliptical_potential" => check_elliptical_potential(rng),
        "omd_bound" => check_omd_bound(rng),
        "value_difference" => check_value_difference(rng),
        "contracted_optimism" => check_contracted_optimism(rng),
        "epoch_bound" => check_epoch_bound(rng),
        "gaussian_anticoncentration" => Ok(check_gaussian_anticoncentration(rng)),
        "gaussian_norm" => Ok(check_gaussian_norm(rng)),
        "bernstein" => Ok(check_bernstein(rng)),
        "runtime_optimism_and_qbound" => {
            check_runtime_optimism_and_qbound(&RuntimeConfig::default())
        }
        "repo_e4" => check_repo_e4(&E4Config::default()),
        "repo_e4_negative_control" => check_repo_e4_negative_control(&E4Config::default()),
        "hedge_simplex" => check_hedge_simplex(),
        "repo_collapse" => check_repo_collapse(),
        "reward_error_frequency" => check_reward_error_frequency(&RewardErrorConfig::default()),
        _ => unreachable!("listed in CHECKS"),
    }
}

/// Check names of a suite: `all`, `deterministic`, `statistical`,
/// `runtime`, or a single check name.
pub fn suite_checks(suite: &str) -> Result<Vec<&'static str>> {
    let kind = match suite {
        "all" => None,
        "deterministic" => Some(SuiteKind::Deterministic),
        "statistical" => Some(SuiteKind::Statistical),
        "runtime" => Some(SuiteKind::Runtime),
        other => {
            return CHECKS
                .iter()
                .find(|(n, _)| *n == other)
                .map(|(n, _)| vec![*n])
                .ok_or_else(|| Error::Config(format!("unknown suite or check '{other}'")));
        }
    };
    Ok(CHECKS
        .iter()
        .filter(|(_, k)| kind.is_none_or(|want| *k == want))
        .map(|(n, _)| *n)
        .collect())
}

/// Runs the checks of `suite` in parallel, in listing order.
pub fn run_suite(suite: &str) -> Result<Vec<CheckResult>> {
    suite_checks(suite)?
        .par_iter()
        .map(|n| run_check(n))
        .collect()
}

pub fn write_report(results: &[CheckResult], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(results)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
