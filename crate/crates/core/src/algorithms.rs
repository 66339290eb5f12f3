//! Policy-optimization learners for linear MDPs.
//!
//! All learners share one engine: epochs triggered by a doubling of a
//! covariance determinant, contracted features frozen at the epoch start, a
//! backward pass producing `Q̂`, `V̂` per policy copy, exponential-weights
//! (OMD) policy updates and, for ensembles, hedging over copies.
//!
//! * [`cfpo_run`]: one policy, sigmoid contraction, deterministic bonus.
//! * [`repo_run`]: `m` copies with Gaussian reward perturbations, indicator contraction.
//! * [`depo_run`]: `2dH` copies with deterministic `±` perturbations, aggregate feedback.
//! * [`po_ablation_run`]: one policy, indicator contraction, no bonus.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covlinalg::{block_diag, symmetric_sqrt, CovSnapshot};
use crate::error::{Error, Result};
use crate::estimation::{good_event_check, AggregateThetaEstimator, Estimators, GoodEventMonitor};
use crate::mdpcore::{
    policy_value, sample_categorical, truncated_feature_occupancy, ContractionMap, LinearMdp,
    PolicyTable, QTable, ValueTable,
};
use crate::rng::{Purpose, RunSeed, StreamRng};

/// Largest `η·|q|` accepted by the exponential-weights kernel.
pub const EXPONENT_GUARD: f64 = 50.0;

const SIMPLEX_INPUT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cfpo,
    Repo,
    Depo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub delta: f64,
    pub beta_r: f64,
    pub beta_p: f64,
    pub beta_q: f64,
    pub beta_b: f64,
    pub beta_w: f64,
    pub beta_zeta: f64,
    pub eta_o: f64,
    pub eta_x: f64,
    pub m: usize,
    pub scale: f64,
    pub variant: Variant,
    /// Forces every perturbation to zero (ensemble ablations).
    #[serde(default)]
    pub disable_perturbation: bool,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        for (name, v) in [
            ("beta_r", self.beta_r),
            ("beta_p", self.beta_p),
            ("beta_q", self.beta_q),
            ("beta_b", self.beta_b),
            ("beta_w", self.beta_w),
            ("beta_zeta", self.beta_zeta),
            ("eta_o", self.eta_o),
            ("eta_x", self.eta_x),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale = {} must be positive", self.scale));
        }
        if self.variant == Variant::Cfpo {
            let sum = self.beta_r + self.beta_p;
            if (self.beta_b - sum).abs() > 1e-12 * sum.max(1.0) {
                return bad(format!("beta_b = {} must equal beta_r + beta_p = {sum}", self.beta_b));
            }
        }
        Ok(())
    }
}

/// Theory hyperparameters (natural logs). `β_r`, `β_p` are multiplied by
/// `scale`; everything depending on them is derived from the scaled values.
pub fn hyperparams_theory(
    d: usize,
    horizon: usize,
    k: usize,
    num_actions: usize,
    delta: f64,
    variant: Variant,
    scale: f64,
) -> Result<Hyperparams> {
    if k == 0 || d == 0 || horizon == 0 || num_actions == 0 {
        return Err(Error::Config("d, H, K and |A| must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta = {delta} must lie in (0, 1)")));
    }
    let (df, hf, kf) = (d as f64, horizon as f64, k as f64);
    let beta_q = 2.0 * hf;
    let (beta_r, beta_p) = match variant {
        Variant::Cfpo => (
            2.0 * (2.0 * df * (6.0 * kf * hf / delta).ln()).sqrt(),
            28.0 * hf * df * (10.0 * kf.powi(5) * hf / delta).ln().sqrt(),
        ),
        Variant::Repo | Variant::Depo => (
            2.0 * (2.0 * df * (12.0 * kf * hf / delta).ln()).sqrt(),
            12.0 * beta_q * (df * (60.0 * kf.powi(3) * beta_q / delta).ln()).sqrt(),
        ),
    };
    derive_hyperparams(
        d,
        horizon,
        k,
        num_actions,
        delta,
        variant,
        scale,
        beta_r * scale,
        beta_p * scale,
    )
}

/// Everything that follows from already-scaled `β_r` and `β_p`.
#[allow(clippy::too_many_arguments)]
pub fn derive_hyperparams(
    d: usize,
    horizon: usize,
    k: usize,
    num_actions: usize,
    delta: f64,
    variant: Variant,
    scale: f64,
    beta_r: f64,
    beta_p: f64,
) -> Result<Hyperparams> {
    let (df, hf, kf) = (d as f64, horizon as f64, k as f64);
    let beta_q = 2.0 * hf;
    let m = match variant {
        Variant::Cfpo => 1,
        Variant::Repo => (9.0 * (7.0 * kf / delta).ln()).ceil().max(1.0) as usize,
        Variant::Depo => 2 * d * horizon,
    };
    let beta_zeta = match variant {
        Variant::Cfpo => 0.0,
        _ => (6.0 * df * (6.0 * m as f64 * hf * kf / delta).ln()).sqrt(),
    };
    let sum = beta_r + beta_p;
    let (beta_b, beta_w) = match variant {
        Variant::Cfpo => (sum, 4.0 * sum * kf.ln()),
        _ => (0.0, hf.sqrt() * sum * beta_zeta + sum),
    };
    let common = 3.0 * df * hf * (2.0 * kf).ln() / (kf * beta_q * beta_q);
    let hp = Hyperparams {
        delta,
        beta_r,
        beta_p,
        beta_q,
        beta_b,
        beta_w,
        beta_zeta,
        eta_o: (common * (num_actions as f64).ln()).sqrt(),
        eta_x: (common * (m as f64).ln()).sqrt(),
        m,
        scale,
        variant,
        disable_perturbation: false,
    };
    hp.validate()?;
    Ok(hp)
}

/// `p'(a) ∝ p(a)·exp(−η q(a))`, computed with a min-shift so the largest
/// exponent is zero.
pub fn omd_step(p: &[f64], q: &[f64], eta: f64) -> Result<Vec<f64>> {
    let mut out = p.to_vec();
    omd_in_place(&mut out, q, eta)?;
    Ok(out)
}

/// Hedge over ensemble copies; the same kernel as [`omd_step`].
pub fn hedge_step(p: &[f64], values: &[f64], eta: f64) -> Result<Vec<f64>> {
    omd_step(p, values, eta)
}

fn omd_in_place(p: &mut [f64], q: &[f64], eta: f64) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.is_empty()
        || p.iter().any(|&v| !(v >= 0.0))
        || (p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_INPUT_TOL
    {
        return Err(Error::NotSimplex(format!("{p:?}")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("step size {eta} must be non-negative")));
    }
    let qmax = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(eta * qmax <= EXPONENT_GUARD) {
        return Err(Error::ExponentOverflow(eta * qmax));
    }
    let qmin = q.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (pa, &qa) in p.iter_mut().zip(q) {
        *pa *= (-eta * (qa - qmin)).exp();
        total += *pa;
    }
    for pa in p.iter_mut() {
        *pa /= total;
    }
    Ok(())
}

/// Logistic function, stable for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `σ(−β_w u + ln K)`.
pub fn contraction_sigmoid(u: f64, beta_w: f64, k: f64) -> f64 {
    sigmoid(-beta_w * u + k.ln())
}

/// `1{u ≤ 1/β_w}`.
pub fn contraction_indicator(u: f64, beta_w: f64) -> f64 {
    if beta_w * u <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Draws `ζ ∈ R^{dH}` with per-step blocks `√H(β_r+β_p)·Λ̂_h^{−1/2}·g`.
#[derive(Debug, Clone)]
pub struct ZetaSampler {
    roots: Vec<DMatrix<f64>>,
    scale: f64,
}

impl ZetaSampler {
    pub fn new(snapshots: &[CovSnapshot], beta_r: f64, beta_p: f64) -> Self {
        let horizon = snapshots.len() as f64;
        Self {
            roots: snapshots.iter().map(|s| symmetric_sqrt(&s.lambda_inv)).collect(),
            scale: horizon.sqrt() * (beta_r + beta_p),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.roots.first().map_or(0, |r| r.nrows());
        let mut out = DVector::zeros(d * self.roots.len());
        for (h, root) in self.roots.iter().enumerate() {
            let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            out.rows_mut(h * d, d).copy_from(&(root * g * self.scale));
        }
        out
    }
}

pub fn zeta_sample<R: Rng + ?Sized>(
    rng: &mut R,
    snapshots: &[CovSnapshot],
    beta_r: f64,
    beta_p: f64,
) -> DVector<f64> {
    ZetaSampler::new(snapshots, beta_r, beta_p).sample(rng)
}

/// Per-feature contraction rule applied at each epoch start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContractionRule {
    Sigmoid { beta_w: f64, k: f64 },
    Indicator { beta_w: f64 },
}

impl ContractionRule {
    pub fn apply(&self, u: f64) -> f64 {
        match *self {
            ContractionRule::Sigmoid { beta_w, k } => contraction_sigmoid(u, beta_w, k),
            ContractionRule::Indicator { beta_w } => contraction_indicator(u, beta_w),
        }
    }
}

/// How policy copies differ from one another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ensemble {
    /// One copy, no perturbation.
    Single,
    /// `m` copies with Gaussian perturbations (zero when `zero` is set).
    Randomized { m: usize, zero: bool },
    /// `2dH` copies `θ − √(dH)·χ·Σ_ζ^{1/2} e_i` on the aggregate estimate.
    Deterministic { zero: bool },
}

/// Full description of a learner built on the shared engine.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub contraction: ContractionRule,
    pub bonus: f64,
    pub ensemble: Ensemble,
    pub eta_o: f64,
    pub eta_x: f64,
    pub beta_r: f64,
    pub beta_p: f64,
    pub beta_q: f64,
}

impl EngineConfig {
    pub fn cfpo(hp: &Hyperparams, k: usize) -> Self {
        Self {
            contraction: ContractionRule::Sigmoid {
                beta_w: hp.beta_w,
                k: k as f64,
            },
            bonus: hp.beta_b,
            ensemble: Ensemble::Single,
            ..Self::common(hp)
        }
    }

    pub fn repo(hp: &Hyperparams) -> Self {
        Self {
            contraction: ContractionRule::Indicator { beta_w: hp.beta_w },
            bonus: 0.0,
            ensemble: Ensemble::Randomized {
                m: hp.m,
                zero: hp.disable_perturbation,
            },
            ..Self::common(hp)
        }
    }

    pub fn depo(hp: &Hyperparams) -> Self {
        Self {
            contraction: ContractionRule::Indicator { beta_w: hp.beta_w },
            bonus: 0.0,
            ensemble: Ensemble::Deterministic {
                zero: hp.disable_perturbation,
            },
            ..Self::common(hp)
        }
    }

    pub fn po_ablation(hp: &Hyperparams) -> Self {
        Self {
            contraction: ContractionRule::Indicator { beta_w: hp.beta_w },
            bonus: 0.0,
            ensemble: Ensemble::Single,
            ..Self::common(hp)
        }
    }

    fn common(hp: &Hyperparams) -> Self {
        Self {
            contraction: ContractionRule::Indicator { beta_w: hp.beta_w },
            bonus: 0.0,
            ensemble: Ensemble::Single,
            eta_o: hp.eta_o,
            eta_x: hp.eta_x,
            beta_r: hp.beta_r,
            beta_p: hp.beta_p,
            beta_q: hp.beta_q,
        }
    }
}

/// Shared inputs of a run.
#[derive(Debug, Clone)]
pub struct RunContext<'a> {
    pub seed: RunSeed,
    pub pi_star: &'a PolicyTable,
    pub v_star: f64,
    pub options: RunOptions,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Replace `θ̂_h` by the true `θ_h`.
    pub full_information: bool,
    /// Keep every played policy in the record.
    pub record_policies: bool,
    /// Keep the hedge weights used at every episode.
    pub record_hedge: bool,
}

/// Diagnostics for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    /// One-based episode index.
    pub k: usize,
    /// `V^{π^k}(x1)` of the played policy, by exact DP.
    pub value: f64,
    pub inst_regret: f64,
    pub cum_regret: f64,
    /// Zero-based epoch index.
    pub epoch: usize,
    pub e1: bool,
    pub e2: bool,
    /// `max_h ‖Q̂_h‖_∞` over all copies.
    pub max_abs_q: f64,
    /// Largest reward-estimation error over `h`.
    pub rerr: f64,
    /// Largest dynamics-estimation error over `h` and copies.
    pub derr: f64,
    pub qbound: bool,
    /// Played copy.
    pub arm: usize,
    /// `V̂_1(x1)` of the played copy after this episode's backward pass.
    pub vhat1: f64,
    /// `max Q̂_h(x,a) − φ̄ᵀ(θ_h + ψ_h V̂_{h+1})` over `h, x, a` and copies.
    pub optimism_gap: f64,
    /// `max_h ‖Q̂_h‖_∞ − 2(H − h)` over copies (zero-based `h`).
    pub qbound_excess: f64,
    /// Sum of the hedge weights after this episode's update.
    pub hedge_sum: f64,
    /// The hedge weights were reset to uniform before this episode.
    pub hedge_reset: bool,
}

/// Anti-concentration statistic recorded at an epoch start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct E4Stat {
    /// `max_i φ̄ᵀζ^i` with `φ̄` the contracted occupancy of `π*`.
    pub max_projection: f64,
    /// `‖φ̄‖_{Σ_ζ}`.
    pub sigma_norm: f64,
    pub occupancy_norm: f64,
}

impl E4Stat {
    pub fn holds(&self) -> bool {
        self.max_projection >= self.sigma_norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochInfo {
    /// One-based first episode.
    pub start: usize,
    pub e4: Option<E4Stat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed_index: u64,
    pub v_star: f64,
    pub rows: Vec<EpisodeRow>,
    pub epochs: Vec<EpochInfo>,
    pub policies: Option<Vec<PolicyTable>>,
    pub hedge: Option<Vec<Vec<f64>>>,
}

impl RunRecord {
    pub fn total_regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn epoch_count(&self) -> usize {
        self.epochs.len()
    }

    /// E1 and E2 held at every episode.
    pub fn good_event_always(&self) -> bool {
        self.rows.iter().all(|r| r.e1 && r.e2)
    }
}

/// Deterministic-bonus learner with sigmoid contraction.
pub fn cfpo_run(mdp: &LinearMdp, hp: &Hyperparams, k: usize, ctx: &RunContext) -> Result<RunRecord> {
    hp.validate()?;
    run_engine(mdp, &EngineConfig::cfpo(hp, k), k, ctx)
}

/// Randomized-ensemble learner.
pub fn repo_run(mdp: &LinearMdp, hp: &Hyperparams, k: usize, ctx: &RunContext) -> Result<RunRecord> {
    hp.validate()?;
    run_engine(mdp, &EngineConfig::repo(hp), k, ctx)
}

/// Deterministic-ensemble learner with aggregate feedback.
pub fn depo_run(mdp: &LinearMdp, hp: &Hyperparams, k: usize, ctx: &RunContext) -> Result<RunRecord> {
    hp.validate()?;
    if ctx.options.full_information {
        return Err(Error::Config("depo observes aggregate feedback only".into()));
    }
    run_engine(mdp, &EngineConfig::depo(hp), k, ctx)
}

/// Single policy, indicator contraction, no bonus.
pub fn po_ablation_run(
    mdp: &LinearMdp,
    hp: &Hyperparams,
    k: usize,
    ctx: &RunContext,
) -> Result<RunRecord> {
    hp.validate()?;
    run_engine(mdp, &EngineConfig::po_ablation(hp), k, ctx)
}

/// Plays the uniform policy every episode.
pub fn uniform_baseline_run(mdp: &LinearMdp, k: usize, ctx: &RunContext) -> Result<RunRecord> {
    fixed_policy_run(mdp, &PolicyTable::uniform_for(mdp), k, ctx)
}

/// Plays the optimal policy every episode.
pub fn optimal_run(mdp: &LinearMdp, k: usize, ctx: &RunContext) -> Result<RunRecord> {
    fixed_policy_run(mdp, ctx.pi_star, k, ctx)
}

fn fixed_policy_run(
    mdp: &LinearMdp,
    policy: &PolicyTable,
    k: usize,
    ctx: &RunContext,
) -> Result<RunRecord> {
    let value = policy_value(mdp, policy)?;
    let inst = value - ctx.v_star;
    let mut cum = 0.0;
    let rows = (1..=k)
        .map(|k| {
            cum += inst;
            EpisodeRow {
                k,
                value,
                inst_regret: inst,
                cum_regret: cum,
                epoch: 0,
                e1: true,
                e2: true,
                max_abs_q: 0.0,
                rerr: 0.0,
                derr: 0.0,
                qbound: true,
                arm: 0,
                vhat1: 0.0,
                optimism_gap: 0.0,
                qbound_excess: 0.0,
                hedge_sum: 1.0,
                hedge_reset: k == 1,
            }
        })
        .collect();
    Ok(RunRecord {
        seed_index: ctx.seed.seed_index,
        v_star: ctx.v_star,
        rows,
        epochs: vec![EpochInfo { start: 1, e4: None }],
        policies: ctx.options.record_policies.then(|| vec![policy.clone(); k]),
        hedge: ctx.options.record_hedge.then(|| vec![vec![1.0]; k]),
    })
}

/// One policy copy.
#[derive(Debug, Clone)]
struct PolicyCopy {
    policy: PolicyTable,
    /// Per-step vector subtracted from the loss estimate.
    offset: Vec<DVector<f64>>,
    q: QTable,
    v: ValueTable,
}

struct Engine<'a> {
    mdp: &'a LinearMdp,
    cfg: &'a EngineConfig,
    ctx: &'a RunContext<'a>,
    est: Estimators,
    agg: Option<AggregateThetaEstimator>,
    snapshots: Vec<CovSnapshot>,
    agg_snapshot: Option<CovSnapshot>,
    rho: ContractionMap,
    /// `β_b · ρ · ‖φ‖_{Λ̂⁻¹}` per `(h, x, a)`.
    bonus_term: Vec<f64>,
    copies: Vec<PolicyCopy>,
    hedge: Vec<f64>,
    epochs: Vec<EpochInfo>,
    episode_rng: StreamRng,
    arm_rng: StreamRng,
    perturbation_rng: StreamRng,
}

fn num_copies(cfg: &EngineConfig, mdp: &LinearMdp) -> usize {
    match cfg.ensemble {
        Ensemble::Single => 1,
        Ensemble::Randomized { m, .. } => m,
        Ensemble::Deterministic { .. } => 2 * mdp.d() * mdp.horizon(),
    }
}

/// Runs any [`EngineConfig`] for `k` episodes.
pub fn run_engine(
    mdp: &LinearMdp,
    cfg: &EngineConfig,
    k: usize,
    ctx: &RunContext,
) -> Result<RunRecord> {
    let mut engine = Engine::new(mdp, cfg, ctx)?;
    let mut rows = Vec::with_capacity(k);
    let mut policies = ctx.options.record_policies.then(Vec::new);
    let mut hedge_log = ctx.options.record_hedge.then(Vec::new);
    let mut cum = 0.0;
    for episode in 1..=k {
        let reset = engine.maybe_start_epoch(episode)?;
        let arm = engine.choose_arm();
        if let Some(log) = hedge_log.as_mut() {
            log.push(engine.hedge.clone());
        }
        let played = engine.copies[arm].policy.clone();
        let value = policy_value(mdp, &played)?;
        let inst = value - ctx.v_star;
        cum += inst;
        engine.play_and_observe(&played)?;
        let diag = engine.backward_pass()?;
        engine.update_hedge()?;
        rows.push(EpisodeRow {
            k: episode,
            value,
            inst_regret: inst,
            cum_regret: cum,
            epoch: engine.epochs.len() - 1,
            e1: diag.flags.0,
            e2: diag.flags.1,
            max_abs_q: diag.max_abs_q,
            rerr: diag.rerr,
            derr: diag.derr,
            qbound: diag.flags.2,
            arm,
            vhat1: engine.copies[arm].v[0][mdp.x1()],
            optimism_gap: diag.optimism_gap,
            qbound_excess: diag.qbound_excess,
            hedge_sum: engine.hedge.iter().sum(),
            hedge_reset: reset,
        });
        if let Some(p) = policies.as_mut() {
            p.push(played);
        }
    }
    Ok(RunRecord {
        seed_index: ctx.seed.seed_index,
        v_star: ctx.v_star,
        rows,
        epochs: engine.epochs,
        policies,
        hedge: hedge_log,
    })
}

struct PassDiagnostics {
    flags: (bool, bool, bool),
    max_abs_q: f64,
    rerr: f64,
    derr: f64,
    optimism_gap: f64,
    qbound_excess: f64,
}

impl<'a> Engine<'a> {
    fn new(mdp: &'a LinearMdp, cfg: &'a EngineConfig, ctx: &'a RunContext<'a>) -> Result<Self> {
        let (hz, s, na, d) = (mdp.horizon(), mdp.num_states(), mdp.num_actions(), mdp.d());
        let mut est = Estimators::for_mdp(mdp)?;
        if ctx.options.full_information {
            est = est.with_known_theta(mdp);
        }
        let agg = match cfg.ensemble {
            Ensemble::Deterministic { .. } => Some(AggregateThetaEstimator::new(d * hz)?),
            _ => None,
        };
        let n = num_copies(cfg, mdp);
        let copy = PolicyCopy {
            policy: PolicyTable::uniform(hz, s, na),
            offset: vec![DVector::zeros(d); hz],
            q: QTable::zeros(hz, s, na),
            v: vec![vec![0.0; s]; hz + 1],
        };
        Ok(Self {
            mdp,
            cfg,
            ctx,
            est,
            agg,
            snapshots: Vec::new(),
            agg_snapshot: None,
            rho: ContractionMap::constant(hz, s, na, 1.0),
            bonus_term: vec![0.0; hz * s * na],
            copies: vec![copy; n],
            hedge: vec![1.0 / n as f64; n],
            epochs: Vec::new(),
            episode_rng: ctx.seed.stream(Purpose::Episode),
            arm_rng: ctx.seed.stream(Purpose::ArmSelection),
            perturbation_rng: ctx.seed.stream(Purpose::Perturbation),
        })
    }

    fn maybe_start_epoch(&mut self, episode: usize) -> Result<bool> {
        let mut trigger = self.epochs.is_empty();
        if !trigger {
            for h in 0..self.mdp.horizon() {
                let snap = self.snapshots[h].log_det;
                if self.est.step_mut(h).cov_mut().det_doubled(snap)? {
                    trigger = true;
                    break;
                }
            }
        }
        if !trigger {
            if let (Some(agg), Some(snap)) = (self.agg.as_mut(), self.agg_snapshot.as_ref()) {
                trigger = agg.cov_mut().det_doubled(snap.log_det)?;
            }
        }
        if trigger {
            self.start_epoch(episode)?;
        }
        Ok(trigger)
    }

    fn start_epoch(&mut self, episode: usize) -> Result<()> {
        let mdp = self.mdp;
        let (hz, s, na, d) = (mdp.horizon(), mdp.num_states(), mdp.num_actions(), mdp.d());
        self.snapshots = (0..hz).map(|h| self.est.step(h).cov().snapshot()).collect();
        self.agg_snapshot = self.agg.as_ref().map(|a| a.cov().snapshot());

        let mut u = vec![0.0; hz * s * na];
        for h in 0..hz {
            for x in 0..s {
                for a in 0..na {
                    u[(h * s + x) * na + a] = self.snapshots[h].mahalanobis_inv(mdp.phi(x, a))?;
                }
            }
        }
        let rule = self.cfg.contraction;
        self.rho = ContractionMap::from_fn(hz, s, na, |h, x, a| rule.apply(u[(h * s + x) * na + a]));
        for h in 0..hz {
            for x in 0..s {
                for a in 0..na {
                    let i = (h * s + x) * na + a;
                    self.bonus_term[i] = self.cfg.bonus * self.rho.get(h, x, a) * u[i];
                }
            }
        }

        for c in &mut self.copies {
            c.policy.reset_uniform();
        }
        let n = self.copies.len();
        self.hedge = vec![1.0 / n as f64; n];

        let mut e4 = None;
        match self.cfg.ensemble {
            Ensemble::Single => {}
            Ensemble::Randomized { zero, .. } => {
                let sampler = ZetaSampler::new(&self.snapshots, self.cfg.beta_r, self.cfg.beta_p);
                let mut zetas = Vec::with_capacity(n);
                for c in &mut self.copies {
                    let zeta = if zero {
                        DVector::zeros(d * hz)
                    } else {
                        sampler.sample(&mut self.perturbation_rng)
                    };
                    for h in 0..hz {
                        c.offset[h] = zeta.rows(h * d, d).into_owned();
                    }
                    zetas.push(zeta);
                }
                e4 = Some(self.e4_statistic(&zetas)?);
            }
            Ensemble::Deterministic { zero } => {
                let sigma = self.depo_sigma();
                let root = symmetric_sqrt(&sigma);
                let radius = ((d * hz) as f64).sqrt();
                for (idx, c) in self.copies.iter_mut().enumerate() {
                    let (i, chi) = (idx / 2, if idx % 2 == 0 { 1.0 } else { -1.0 });
                    let col = if zero {
                        DVector::zeros(d * hz)
                    } else {
                        root.column(i) * (radius * chi)
                    };
                    for h in 0..hz {
                        c.offset[h] = col.rows(h * d, d).into_owned();
                    }
                }
            }
        }
        self.epochs.push(EpochInfo { start: episode, e4 });
        Ok(())
    }

    /// `Σ_ζ = 2β_r²Λ̂⁻¹ + 2Hβ_p²·diag(Λ̂_h⁻¹)`.
    fn depo_sigma(&self) -> DMatrix<f64> {
        let hz = self.mdp.horizon() as f64;
        let blocks: Vec<&DMatrix<f64>> = self.snapshots.iter().map(|s| &s.lambda_inv).collect();
        let diag = block_diag(&blocks);
        let agg_inv = &self.agg_snapshot.as_ref().expect("aggregate snapshot").lambda_inv;
        agg_inv * (2.0 * self.cfg.beta_r.powi(2)) + diag * (2.0 * hz * self.cfg.beta_p.powi(2))
    }

    fn e4_statistic(&self, zetas: &[DVector<f64>]) -> Result<E4Stat> {
        let mdp = self.mdp;
        let (hz, d) = (mdp.horizon(), mdp.d());
        let occ = truncated_feature_occupancy(mdp, self.ctx.pi_star, &self.rho)?;
        let max_projection = zetas
            .iter()
            .map(|z| occ.dot(z))
            .fold(f64::NEG_INFINITY, f64::max);
        let scale = (hz as f64) * (self.cfg.beta_r + self.cfg.beta_p).powi(2);
        let mut sq = 0.0;
        for h in 0..hz {
            let block = occ.rows(h * d, d).into_owned();
            sq += scale * self.snapshots[h].mahalanobis_inv(&block)?.powi(2);
        }
        Ok(E4Stat {
            max_projection,
            sigma_norm: sq.sqrt(),
            occupancy_norm: occ.norm(),
        })
    }

    fn choose_arm(&mut self) -> usize {
        if self.copies.len() == 1 {
            0
        } else {
            sample_categorical(&self.hedge, &mut self.arm_rng)
        }
    }

    fn play_and_observe(&mut self, policy: &PolicyTable) -> Result<()> {
        let mdp = self.mdp;
        let (hz, d) = (mdp.horizon(), mdp.d());
        let traj = mdp.sample_episode(policy, &mut self.episode_rng)?;
        let aggregate = self.agg.is_some();
        for (h, step) in traj.steps.iter().enumerate() {
            let next = traj.steps.get(h + 1).map(|s| s.x);
            let loss = (!aggregate).then_some(step.loss);
            self.est.observe(h, mdp.phi(step.x, step.a), loss, next)?;
        }
        if let Some(agg) = self.agg.as_mut() {
            let mut concat = DVector::zeros(d * hz);
            for (h, step) in traj.steps.iter().enumerate() {
                concat.rows_mut(h * d, d).copy_from(mdp.phi(step.x, step.a));
            }
            agg.update(&concat, traj.aggregate_loss)?;
        }
        Ok(())
    }

    /// Loss estimate per step: per-step ridge or blocks of the aggregate one.
    fn theta_estimates(&self) -> Vec<DVector<f64>> {
        let (hz, d) = (self.mdp.horizon(), self.mdp.d());
        match &self.agg {
            Some(agg) => {
                let t = agg.theta_hat();
                (0..hz).map(|h| t.rows(h * d, d).into_owned()).collect()
            }
            None => (0..hz).map(|h| self.est.theta_hat(h)).collect(),
        }
    }

    fn backward_pass(&mut self) -> Result<PassDiagnostics> {
        let mdp = self.mdp;
        let (hz, s, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
        let theta = self.theta_estimates();
        let mut monitor = GoodEventMonitor::new(hz);
        let rerr = match &self.agg {
            Some(agg) => {
                let mut truth = DVector::zeros(mdp.d() * hz);
                for h in 0..hz {
                    truth.rows_mut(h * mdp.d(), mdp.d()).copy_from(mdp.theta(h));
                }
                let e = agg.cov().mahalanobis(&(truth - agg.theta_hat()))?;
                monitor.reward_error.iter_mut().for_each(|r| *r = e);
                e
            }
            None => {
                monitor.record_rewards(&self.est, mdp)?;
                monitor.max_reward_error()
            }
        };

        let mut optimism_gap = f64::NEG_INFINITY;
        let mut qbound_excess = f64::NEG_INFINITY;
        for c in &mut self.copies {
            for h in (0..hz).rev() {
                let w = &theta[h] - &c.offset[h] + self.est.psi_apply(h, &c.v[h + 1])?;
                let truth = mdp.theta(h) + mdp.psi_apply(h, &c.v[h + 1]);
                for x in 0..s {
                    let mut vx = 0.0;
                    for a in 0..na {
                        let phi = mdp.phi(x, a);
                        let rho = self.rho.get(h, x, a);
                        let q = rho * phi.dot(&w) - self.bonus_term[(h * s + x) * na + a];
                        c.q.set(h, x, a, q);
                        vx += c.policy.row(h, x)[a] * q;
                        optimism_gap = optimism_gap.max(q - rho * phi.dot(&truth));
                    }
                    c.v[h][x] = vx;
                }
                qbound_excess = qbound_excess.max(c.q.sup_norm_at(h) - 2.0 * (hz - h) as f64);
            }
            for h in 0..hz {
                for x in 0..s {
                    let q = c.q.row(h, x).to_vec();
                    omd_in_place(c.policy.row_mut(h, x), &q, self.cfg.eta_o)?;
                }
            }
            monitor.record_values(&self.est, mdp, &c.v, &c.q)?;
        }
        let flags = good_event_check(&monitor, self.cfg.beta_r, self.cfg.beta_p, self.cfg.beta_q);
        Ok(PassDiagnostics {
            flags: (flags.e1, flags.e2, flags.qbound),
            max_abs_q: monitor.q_sup,
            rerr,
            derr: monitor.max_dynamics_error(),
            optimism_gap,
            qbound_excess,
        })
    }

    fn update_hedge(&mut self) -> Result<()> {
        if self.copies.len() == 1 {
            return Ok(());
        }
        let x1 = self.mdp.x1();
        let values: Vec<f64> = self.copies.iter().map(|c| c.v[0][x1]).collect();
        omd_in_place(&mut self.hedge, &values, self.cfg.eta_x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covlinalg::CovarianceAccumulator;
    use crate::mdpcore::{gen_mixture, optimal_policy_dp, LinearMdpParts, LossNoise};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(pi: &PolicyTable, v: f64, seed: u64) -> RunContext<'_> {
        RunContext {
            seed: RunSeed::new(7, seed),
            pi_star: pi,
            v_star: v,
            options: RunOptions::default(),
        }
    }

    fn small_mdp(seed: u64) -> LinearMdp {
        gen_mixture(3, 4, 3, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn omd_examples() {
        let p = omd_step(&[0.5, 0.5], &[0.0, 1.0], 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        let base = [0.2, 0.3, 0.5];
        assert_eq!(omd_step(&base, &[4.0, 4.0, 4.0], 2.0).unwrap(), base.to_vec());
        assert_eq!(omd_step(&base, &[1.0, 7.0, -3.0], 0.0).unwrap(), base.to_vec());
        assert_eq!(hedge_step(&[1.0], &[3.0], 0.7).unwrap(), vec![1.0]);
    }

    #[test]
    fn omd_shift_invariance() {
        let p = [0.1, 0.6, 0.3];
        let a = omd_step(&p, &[0.2, 0.9, -0.4], 1.3).unwrap();
        let b = omd_step(&p, &[5.2, 5.9, 4.6], 0.2 * 1.3 / 0.2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn omd_rejects_bad_input() {
        assert!(matches!(omd_step(&[0.5, 0.6], &[0.0, 0.0], 1.0), Err(Error::NotSimplex(_))));
        assert!(matches!(omd_step(&[0.5, 0.5], &[0.0, 60.0], 1.0), Err(Error::ExponentOverflow(_))));
        assert!(omd_step(&[0.5, 0.5], &[0.0], 1.0).is_err());
    }

    #[test]
    fn contraction_examples() {
        assert!((contraction_sigmoid(0.0, 3.0, 99.0) - 0.99).abs() < 1e-15);
        assert!((contraction_sigmoid(10f64.ln() / 2.0, 2.0, 10.0) - 0.5).abs() < 1e-15);
        for k in [2.0, 10.0, 1000.0] {
            let beta_w = 1.7;
            for i in 0..=300 {
                let u = 3.0 * i as f64 / 300.0;
                let r = contraction_sigmoid(u, beta_w, k);
                assert!(r > 0.0 && r <= k / (k + 1.0) + 1e-15);
                assert!(1.0 - r <= 2.0 * ((beta_w * u).powi(2) + 1.0 / k) + 1e-15);
            }
        }
        let beta_w = 4.0;
        assert_eq!(contraction_indicator(0.0, beta_w), 1.0);
        assert_eq!(contraction_indicator(0.25, beta_w), 1.0);
        assert_eq!(contraction_indicator(0.25 + 1e-12, beta_w), 0.0);
    }

    #[test]
    fn theory_examples() {
        let hp = hyperparams_theory(4, 5, 1000, 3, 0.1, Variant::Repo, 1.0).unwrap();
        assert_eq!(hp.beta_q, 10.0);
        assert_eq!(hp.m, 101);
        assert_eq!(hp.m, (9.0 * (7000.0f64 / 0.1).ln()).ceil() as usize);
        let hp = hyperparams_theory(4, 5, 1000, 3, 0.1, Variant::Cfpo, 0.3).unwrap();
        let b = hp.beta_r + hp.beta_p;
        assert!((hp.beta_w - 4.0 * b * 1000f64.ln()).abs() < 1e-9 * hp.beta_w);
        assert_eq!(hp.beta_b, b);
        let unscaled = hyperparams_theory(4, 5, 1000, 3, 0.1, Variant::Cfpo, 1.0).unwrap();
        assert!((hp.beta_r - 0.3 * unscaled.beta_r).abs() < 1e-12);
        let depo = hyperparams_theory(2, 3, 100, 2, 0.1, Variant::Depo, 1.0).unwrap();
        assert_eq!(depo.m, 12);
        assert!(hyperparams_theory(2, 3, 100, 2, 1.5, Variant::Depo, 1.0).is_err());
    }

    #[test]
    fn zeta_examples() {
        let snaps = vec![CovarianceAccumulator::new(2).unwrap().snapshot(); 4];
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(zeta_sample(&mut r, &snaps, 0.0, 0.0), DVector::zeros(8));

        // E‖ζ_h‖² = tr(H·I₂) = 8
        let n = 100_000;
        let sampler = ZetaSampler::new(&snaps, 0.4, 0.6);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = sampler.sample(&mut r);
            let v = z.rows(0, 2).norm_squared();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let sigma = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 8.0).abs() <= 3.0 * sigma, "{mean}");
    }

    #[test]
    fn zeta_covariance_matches() {
        let mut acc = CovarianceAccumulator::new(2).unwrap();
        acc.update(&DVector::from_vec(vec![0.6, 0.8])).unwrap();
        acc.update(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let snaps = vec![acc.snapshot(), acc.snapshot()];
        let target = &snaps[0].lambda_inv * (2.0 * 1.5f64.powi(2));
        let sampler = ZetaSampler::new(&snaps, 1.0, 0.5);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut s = DMatrix::zeros(2, 2);
        let mut s2 = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let z = sampler.sample(&mut r).rows(2, 2).into_owned();
            let outer = &z * z.transpose();
            s2 += outer.component_mul(&outer);
            s += outer;
        }
        for i in 0..2 {
            for j in 0..2 {
                let mean = s[(i, j)] / n as f64;
                let var = s2[(i, j)] / n as f64 - mean * mean;
                let sigma = (var / n as f64).sqrt();
                assert!((mean - target[(i, j)]).abs() <= 3.0 * sigma, "{i}{j}: {mean} vs {}", target[(i, j)]);
            }
        }
    }

    #[test]
    fn single_episode_plays_uniform() {
        let m = small_mdp(1);
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let hp = hyperparams_theory(3, 3, 1, 3, 0.1, Variant::Cfpo, 0.05).unwrap();
        let c = RunContext {
            options: RunOptions {
                record_policies: true,
                ..RunOptions::default()
            },
            ..ctx(&pi, v, 0)
        };
        let rec = cfpo_run(&m, &hp, 1, &c).unwrap();
        assert_eq!(rec.epoch_count(), 1);
        assert_eq!(rec.policies.unwrap()[0], PolicyTable::uniform_for(&m));
    }

    #[test]
    fn runs_are_deterministic() {
        let m = small_mdp(2);
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let hp = hyperparams_theory(3, 3, 200, 3, 0.1, Variant::Cfpo, 0.05).unwrap();
        let a = cfpo_run(&m, &hp, 200, &ctx(&pi, v, 3)).unwrap();
        let b = cfpo_run(&m, &hp, 200, &ctx(&pi, v, 3)).unwrap();
        assert_eq!(a, b);
        let c = cfpo_run(&m, &hp, 200, &ctx(&pi, v, 4)).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    /// Zero loss vectors, no bonus: every Q̂ is zero and policies stay uniform.
    #[test]
    fn zero_losses_keep_uniform_policy() {
        let mut parts = small_mdp(3).to_parts();
        for t in &mut parts.theta {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let m = LinearMdp::from_parts(parts).unwrap();
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let hp = Hyperparams {
            beta_b: 0.0,
            beta_r: 0.0,
            beta_p: 0.0,
            ..hyperparams_theory(3, 3, 50, 3, 0.1, Variant::Cfpo, 1.0).unwrap()
        };
        let c = RunContext {
            options: RunOptions {
                record_policies: true,
                ..RunOptions::default()
            },
            ..ctx(&pi, v, 0)
        };
        let rec = cfpo_run(&m, &hp, 50, &c).unwrap();
        assert!(rec.rows.iter().all(|r| r.max_abs_q == 0.0));
        let uniform = PolicyTable::uniform_for(&m);
        assert!(rec.policies.unwrap().iter().all(|p| *p == uniform));
    }

    /// One step, known θ, no bonus, no contraction: Q̂ is the mean loss.
    #[test]
    fn one_step_known_theta_recovers_losses() {
        let m = gen_mixture(2, 3, 3, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let cfg = EngineConfig {
            contraction: ContractionRule::Indicator {
                beta_w: 0.0,
            },
            bonus: 0.0,
            ensemble: Ensemble::Single,
            eta_o: 0.5,
            eta_x: 0.0,
            beta_r: 0.0,
            beta_p: 0.0,
            beta_q: 2.0,
        };
        let c = RunContext {
            options: RunOptions {
                full_information: true,
                ..RunOptions::default()
            },
            ..ctx(&pi, v, 0)
        };
        let mut engine = Engine::new(&m, &cfg, &c).unwrap();
        engine.maybe_start_epoch(1).unwrap();
        engine.backward_pass().unwrap();
        for x in 0..3 {
            for a in 0..3 {
                let q = engine.copies[0].q.get(0, x, a);
                assert!((q - m.phi(x, a).dot(m.theta(0))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_pass_is_reproducible() {
        let m = small_mdp(6);
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let hp = hyperparams_theory(3, 3, 100, 3, 0.1, Variant::Cfpo, 0.05).unwrap();
        let cfg = EngineConfig::cfpo(&hp, 100);
        let c = ctx(&pi, v, 1);
        let mut engine = Engine::new(&m, &cfg, &c).unwrap();
        for k in 1..=30 {
            engine.maybe_start_epoch(k).unwrap();
            let played = engine.copies[0].policy.clone();
            engine.play_and_observe(&played).unwrap();
            engine.backward_pass().unwrap();
        }
        let saved = engine.copies[0].clone();
        let mut a = saved.clone();
        let mut b = saved;
        engine.copies[0] = a.clone();
        engine.backward_pass().unwrap();
        a = engine.copies[0].clone();
        engine.copies[0] = b.clone();
        engine.backward_pass().unwrap();
        b = engine.copies[0].clone();
        assert_eq!(a.q, b.q);
        assert_eq!(a.v, b.v);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn depo_offsets_follow_formula() {
        let m = LinearMdp::from_parts(LinearMdpParts {
            d: 1,
            horizon: 1,
            num_states: 1,
            num_actions: 2,
            x1: 0,
            phi: vec![vec![vec![1.0], vec![1.0]]],
            theta: vec![vec![0.5]],
            psi: vec![vec![vec![1.0]]],
            loss_noise: LossNoise::Deterministic,
        })
        .unwrap();
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let hp = hyperparams_theory(1, 1, 10, 2, 0.1, Variant::Depo, 0.01).unwrap();
        let cfg = EngineConfig::depo(&hp);
        let c = ctx(&pi, v, 0);
        let mut engine = Engine::new(&m, &cfg, &c).unwrap();
        assert_eq!(engine.copies.len(), 2);
        engine.maybe_start_epoch(1).unwrap();
        // Λ̂ = I for both covariances: Σ_ζ = 2β_r² + 2β_p²
        let root = (2.0 * hp.beta_r.powi(2) + 2.0 * hp.beta_p.powi(2)).sqrt();
        assert!((engine.copies[0].offset[0][0] - root).abs() < 1e-12);
        assert!((engine.copies[1].offset[0][0] + root).abs() < 1e-12);
    }

    #[test]
    fn depo_identity_covariance_offset() {
        // With Σ_ζ = I (β_r² = β_p² = 1/4, H = 1), copy (1, +1) subtracts √(dH)·e₁.
        let m = gen_mixture(2, 2, 2, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let cfg = EngineConfig {
            contraction: ContractionRule::Indicator { beta_w: 1.0 },
            bonus: 0.0,
            ensemble: Ensemble::Deterministic { zero: false },
            eta_o: 0.1,
            eta_x: 0.1,
            beta_r: 0.5,
            beta_p: 0.5,
            beta_q: 2.0,
        };
        let c = ctx(&pi, v, 0);
        let mut engine = Engine::new(&m, &cfg, &c).unwrap();
        engine.maybe_start_epoch(1).unwrap();
        let theta_plus = -engine.copies[0].offset[0].clone();
        assert!((theta_plus - DVector::from_vec(vec![-(2f64).sqrt(), 0.0])).amax() < 1e-12);
    }

    #[test]
    fn hedge_resets_only_at_epoch_starts() {
        let m = small_mdp(9);
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let hp = hyperparams_theory(3, 3, 300, 3, 0.1, Variant::Depo, 0.01).unwrap();
        let c = RunContext {
            options: RunOptions {
                record_hedge: true,
                ..RunOptions::default()
            },
            ..ctx(&pi, v, 2)
        };
        let rec = depo_run(&m, &hp, 300, &c).unwrap();
        let hedge = rec.hedge.as_ref().unwrap();
        let starts: Vec<usize> = rec.epochs.iter().map(|e| e.start).collect();
        let n = hedge[0].len() as f64;
        for (i, row) in rec.rows.iter().enumerate() {
            let is_start = starts.contains(&row.k);
            assert_eq!(row.hedge_reset, is_start);
            if is_start {
                assert!(hedge[i].iter().all(|&p| p == 1.0 / n));
            }
            assert!((row.hedge_sum - 1.0).abs() <= 1e-12);
        }
        let bound = 3.0 * 3.0 * 3.0 * (600f64).ln();
        assert!((rec.epoch_count() as f64) <= bound);
    }

    #[test]
    fn repo_collapses_to_ablation() {
        let m = small_mdp(10);
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        let base = hyperparams_theory(3, 3, 300, 3, 0.1, Variant::Repo, 1e-3).unwrap();
        let hp = Hyperparams {
            m: 1,
            eta_x: 0.0,
            disable_perturbation: true,
            ..base
        };
        let c = ctx(&pi, v, 5);
        let a = repo_run(&m, &hp, 300, &c).unwrap();
        let b = po_ablation_run(&m, &hp, 300, &c).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn weight_sum_identity() {
        // A policy updated by OMD from uniform equals softmax of −η·Σ Q̂.
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let eta = 0.3;
        let mut p = vec![0.25; 4];
        let mut total = [0.0; 4];
        for _ in 0..20 {
            let q: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            p = omd_step(&p, &q, eta).unwrap();
            for (t, v) in total.iter_mut().zip(&q) {
                *t += v;
            }
        }
        let z: f64 = total.iter().map(|t| (-eta * t).exp()).sum();
        for (a, t) in total.iter().enumerate() {
            assert!((p[a] - (-eta * t).exp() / z).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn omd_output_is_simplex(
                raw in proptest::collection::vec(0.01f64..1.0, 1..8),
                qs in proptest::collection::vec(-10.0f64..10.0, 8),
                eta in 0.0f64..4.0,
            ) {
                let total: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let q = &qs[..p.len()];
                let out = omd_step(&p, q, eta).unwrap();
                prop_assert!(out.iter().all(|&v| v >= 0.0));
                prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn sigmoid_contraction_decreases(u in 0.0f64..5.0, du in 0.0f64..5.0, beta_w in 0.0f64..20.0) {
                prop_assert!(contraction_sigmoid(u + du, beta_w, 50.0) <= contraction_sigmoid(u, beta_w, 50.0));
            }
        }
    }
}
