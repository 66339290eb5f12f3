//! Finite linear MDPs: the model, validity checks, generators, episode
//! sampling and exact dynamic-programming oracles.
//!
//! Horizon indices are zero-based throughout (`h ∈ 0..H`); value tables carry
//! an extra terminal row `V_H ≡ 0`.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TRANSITION_SUM_TOL: f64 = 1e-9;
const NEGATIVITY_TOL: f64 = 1e-12;
const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNoise {
    /// The observed loss is the mean loss.
    Deterministic,
    /// The observed loss is `Bernoulli(mean loss)`.
    #[default]
    Bernoulli,
}

/// Plain-data form of a [`LinearMdp`]; this is also the `dump-env` JSON schema.
///
/// `phi[x][a]` is a feature vector, `theta[h]` a loss vector and `psi[h]` a
/// `d × num_states` matrix stored row-major, so `psi[h][i][x']` is the `i`-th
/// coordinate of `ψ_h(x')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMdpParts {
    pub d: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub x1: usize,
    pub phi: Vec<Vec<Vec<f64>>>,
    pub theta: Vec<Vec<f64>>,
    pub psi: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub loss_noise: LossNoise,
}

/// Ground-truth linear MDP. Immutable after construction.
#[derive(Debug, Clone)]
pub struct LinearMdp {
    d: usize,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    x1: usize,
    phi: Vec<DVector<f64>>,
    theta: Vec<DVector<f64>>,
    psi: Vec<DMatrix<f64>>,
    loss_noise: LossNoise,
    tables: OnceLock<Tables>,
}

/// Dense transition and loss tables derived from the linear parameters.
#[derive(Debug, Clone)]
struct Tables {
    // [((h*S + x)*A + a)*S + x']
    transition: Vec<f64>,
    // [(h*S + x)*A + a]
    loss: Vec<f64>,
}

/// A broken normalization assumption or an invalid transition/loss row.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FeatureNorm { x: usize, a: usize, norm: f64 },
    ThetaNorm { h: usize, norm: f64 },
    PsiNorm { h: usize, norm: f64 },
    NegativeTransition { h: usize, x: usize, a: usize, next: usize, value: f64 },
    TransitionSum { h: usize, x: usize, a: usize, sum: f64 },
    LossRange { h: usize, x: usize, a: usize, value: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::FeatureNorm { x, a, norm } => write!(f, "‖φ({x},{a})‖ = {norm} > 1"),
            Violation::ThetaNorm { h, norm } => write!(f, "‖θ_{h}‖ = {norm} > √d"),
            Violation::PsiNorm { h, norm } => write!(f, "‖Σ|ψ_{h}(x)|‖ = {norm} > √d"),
            Violation::NegativeTransition { h, x, a, next, value } => {
                write!(f, "P_{h}({next}|{x},{a}) = {value} < 0")
            }
            Violation::TransitionSum { h, x, a, sum } => {
                write!(f, "Σ P_{h}(·|{x},{a}) = {sum} ≠ 1")
            }
            Violation::LossRange { h, x, a, value } => {
                write!(f, "ℓ_{h}({x},{a}) = {value} outside [0,1]")
            }
        }
    }
}

impl PartialEq for LinearMdp {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.horizon == other.horizon
            && self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.x1 == other.x1
            && self.phi == other.phi
            && self.theta == other.theta
            && self.psi == other.psi
            && self.loss_noise == other.loss_noise
    }
}

impl LinearMdp {
    /// Build from parts, checking only shapes (use [`validate`](Self::validate)
    /// for the normalization assumptions).
    pub fn from_parts(parts: LinearMdpParts) -> Result<Self> {
        let LinearMdpParts {
            d,
            horizon,
            num_states,
            num_actions,
            x1,
            phi,
            theta,
            psi,
            loss_noise,
        } = parts;
        for (what, n) in [
            ("d", d),
            ("H", horizon),
            ("num_states", num_states),
            ("num_actions", num_actions),
        ] {
            if n == 0 {
                return Err(Error::Model(format!("{what} must be positive")));
            }
        }
        if x1 >= num_states {
            return Err(Error::Model(format!("x1 = {x1} out of range")));
        }
        let shape_err = |what: &str| Error::Model(format!("{what} has the wrong shape"));
        if phi.len() != num_states || phi.iter().any(|row| row.len() != num_actions) {
            return Err(shape_err("phi"));
        }
        let mut phi_flat = Vec::with_capacity(num_states * num_actions);
        for row in phi {
            for v in row {
                if v.len() != d {
                    return Err(shape_err("phi"));
                }
                phi_flat.push(DVector::from_vec(v));
            }
        }
        if theta.len() != horizon || theta.iter().any(|t| t.len() != d) {
            return Err(shape_err("theta"));
        }
        let theta = theta.into_iter().map(DVector::from_vec).collect();
        if psi.len() != horizon {
            return Err(shape_err("psi"));
        }
        let mut psi_mats = Vec::with_capacity(horizon);
        for m in psi {
            if m.len() != d || m.iter().any(|r| r.len() != num_states) {
                return Err(shape_err("psi"));
            }
            let flat: Vec<f64> = m.into_iter().flatten().collect();
            psi_mats.push(DMatrix::from_row_slice(d, num_states, &flat));
        }
        Ok(Self {
            d,
            horizon,
            num_states,
            num_actions,
            x1,
            phi: phi_flat,
            theta,
            psi: psi_mats,
            loss_noise,
            tables: OnceLock::new(),
        })
    }

    pub fn to_parts(&self) -> LinearMdpParts {
        LinearMdpParts {
            d: self.d,
            horizon: self.horizon,
            num_states: self.num_states,
            num_actions: self.num_actions,
            x1: self.x1,
            phi: (0..self.num_states)
                .map(|x| {
                    (0..self.num_actions)
                        .map(|a| self.phi(x, a).iter().copied().collect())
                        .collect()
                })
                .collect(),
            theta: self.theta.iter().map(|t| t.iter().copied().collect()).collect(),
            psi: self
                .psi
                .iter()
                .map(|m| {
                    m.row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect()
                })
                .collect(),
            loss_noise: self.loss_noise,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_parts())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_parts(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn x1(&self) -> usize {
        self.x1
    }
    pub fn loss_noise(&self) -> LossNoise {
        self.loss_noise
    }

    /// Same model with a different loss-noise mode.
    pub fn with_loss_noise(&self, loss_noise: LossNoise) -> Self {
        let mut out = self.clone();
        out.loss_noise = loss_noise;
        out
    }

    pub fn phi(&self, x: usize, a: usize) -> &DVector<f64> {
        &self.phi[x * self.num_actions + a]
    }
    pub fn theta(&self, h: usize) -> &DVector<f64> {
        &self.theta[h]
    }
    /// `d × num_states` matrix whose column `x'` is `ψ_h(x')`.
    pub fn psi(&self, h: usize) -> &DMatrix<f64> {
        &self.psi[h]
    }

    /// `ψ_h V = Σ_x ψ_h(x) V(x)`.
    pub fn psi_apply(&self, h: usize, v: &[f64]) -> DVector<f64> {
        &self.psi[h] * DVector::from_column_slice(v)
    }

    /// Checks the normalization assumptions and that every `(h, x, a)`
    /// yields a probability vector and a loss in `[0, 1]`.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let sqrt_d = (self.d as f64).sqrt();
        for x in 0..self.num_states {
            for a in 0..self.num_actions {
                let norm = self.phi(x, a).norm();
                if norm > 1.0 + NORM_TOL {
                    out.push(Violation::FeatureNorm { x, a, norm });
                }
            }
        }
        for h in 0..self.horizon {
            let norm = self.theta[h].norm();
            if norm > sqrt_d + NORM_TOL {
                out.push(Violation::ThetaNorm { h, norm });
            }
            let abs_sum: DVector<f64> = self.psi[h].abs().column_sum();
            let norm = abs_sum.norm();
            if norm > sqrt_d + NORM_TOL {
                out.push(Violation::PsiNorm { h, norm });
            }
            for x in 0..self.num_states {
                for a in 0..self.num_actions {
                    let row = self.raw_transition(h, x, a);
                    for (next, &value) in row.iter().enumerate() {
                        if value < -NEGATIVITY_TOL {
                            out.push(Violation::NegativeTransition { h, x, a, next, value });
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > TRANSITION_SUM_TOL {
                        out.push(Violation::TransitionSum { h, x, a, sum });
                    }
                    let value = self.phi(x, a).dot(&self.theta[h]);
                    if !(-NEGATIVITY_TOL..=1.0 + NEGATIVITY_TOL).contains(&value) {
                        out.push(Violation::LossRange { h, x, a, value });
                    }
                }
            }
        }
        out
    }

    fn raw_transition(&self, h: usize, x: usize, a: usize) -> DVector<f64> {
        self.psi[h].tr_mul(self.phi(x, a))
    }

    /// `P_h(·|x,a) = φ(x,a)ᵀψ_h`, with tiny negative entries clamped and the
    /// row renormalized. Rows that are not within `1e-9` of a distribution are
    /// an error.
    pub fn transition_dist(&self, h: usize, x: usize, a: usize) -> Result<Vec<f64>> {
        let row = self.raw_transition(h, x, a);
        if let Some((next, &value)) = row
            .iter()
            .enumerate()
            .find(|(_, &v)| v < -NEGATIVITY_TOL)
        {
            return Err(Error::Model(format!(
                "P_{h}({next}|{x},{a}) = {value} is negative"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > TRANSITION_SUM_TOL {
            return Err(Error::Model(format!(
                "P_{h}(·|{x},{a}) sums to {sum}"
            )));
        }
        let clamped: Vec<f64> = row.iter().map(|&v| v.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        Ok(clamped.into_iter().map(|v| v / total).collect())
    }

    /// `ℓ_h(x,a) = φ(x,a)ᵀθ_h`, clamped into `[0, 1]`.
    pub fn mean_loss(&self, h: usize, x: usize, a: usize) -> f64 {
        self.phi(x, a).dot(&self.theta[h]).clamp(0.0, 1.0)
    }

    fn tables(&self) -> Result<&Tables> {
        if let Some(t) = self.tables.get() {
            return Ok(t);
        }
        let (s, na) = (self.num_states, self.num_actions);
        let mut transition = Vec::with_capacity(self.horizon * s * na * s);
        let mut loss = Vec::with_capacity(self.horizon * s * na);
        for h in 0..self.horizon {
            for x in 0..s {
                for a in 0..na {
                    transition.extend(self.transition_dist(h, x, a)?);
                    loss.push(self.mean_loss(h, x, a));
                }
            }
        }
        Ok(self.tables.get_or_init(|| Tables { transition, loss }))
    }

    /// Cached `P_h(·|x,a)`.
    pub fn p(&self, h: usize, x: usize, a: usize) -> Result<&[f64]> {
        let t = self.tables()?;
        let s = self.num_states;
        let start = ((h * s + x) * self.num_actions + a) * s;
        Ok(&t.transition[start..start + s])
    }

    /// Cached `ℓ_h(x,a)`.
    pub fn loss(&self, h: usize, x: usize, a: usize) -> Result<f64> {
        let t = self.tables()?;
        Ok(t.loss[(h * self.num_states + x) * self.num_actions + a])
    }

    /// Plays `policy` for one episode.
    pub fn sample_episode<R: Rng + ?Sized>(
        &self,
        policy: &PolicyTable,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut steps = Vec::with_capacity(self.horizon);
        let mut x = self.x1;
        let mut aggregate = 0.0;
        for h in 0..self.horizon {
            let a = sample_categorical(policy.row(h, x), rng);
            let mean = self.loss(h, x, a)?;
            let loss = match self.loss_noise {
                LossNoise::Deterministic => mean,
                LossNoise::Bernoulli => {
                    if rng.random::<f64>() < mean {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            aggregate += loss;
            steps.push(Step { x, a, loss });
            if h + 1 < self.horizon {
                x = sample_categorical(self.p(h, x, a)?, rng);
            }
        }
        Ok(Trajectory {
            steps,
            aggregate_loss: aggregate,
        })
    }
}

/// Index drawn from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Per-`(h, x)` distributions over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    pub fn uniform_for(mdp: &LinearMdp) -> Self {
        Self::uniform(mdp.horizon(), mdp.num_states(), mdp.num_actions())
    }

    /// Deterministic policy from `actions[h * num_states + x]`.
    pub fn deterministic(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: &[usize],
    ) -> Self {
        assert_eq!(actions.len(), horizon * num_states);
        let mut probs = vec![0.0; horizon * num_states * num_actions];
        for (row, &a) in actions.iter().enumerate() {
            probs[row * num_actions + a] = 1.0;
        }
        Self {
            horizon,
            num_states,
            num_actions,
            probs,
        }
    }

    /// Random rows drawn uniformly from the simplex.
    pub fn random<R: Rng + ?Sized>(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let mut probs = Vec::with_capacity(horizon * num_states * num_actions);
        for _ in 0..horizon * num_states {
            probs.extend(sample_simplex(num_actions, rng));
        }
        Self {
            horizon,
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, h: usize, x: usize) -> &[f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn row_mut(&mut self, h: usize, x: usize) -> &mut [f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &mut self.probs[start..start + self.num_actions]
    }

    pub fn reset_uniform(&mut self) {
        let p = 1.0 / self.num_actions as f64;
        self.probs.iter_mut().for_each(|v| *v = p);
    }

    /// Every row is non-negative and sums to one within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.probs.chunks(self.num_actions).all(|row| {
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Per-`(h, x, a)` multipliers `ρ ∈ [0, 1]` applied to losses and transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionMap {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    rho: Vec<f64>,
}

impl ContractionMap {
    pub fn constant(horizon: usize, num_states: usize, num_actions: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            horizon,
            num_states,
            num_actions,
            rho: vec![value; horizon * num_states * num_actions],
        }
    }

    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut rho = Vec::with_capacity(horizon * num_states * num_actions);
        for h in 0..horizon {
            for x in 0..num_states {
                for a in 0..num_actions {
                    let v = f(h, x, a);
                    assert!((0.0..=1.0).contains(&v), "contraction {v} outside [0,1]");
                    rho.push(v);
                }
            }
        }
        Self {
            horizon,
            num_states,
            num_actions,
            rho,
        }
    }

    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.rho[(h * self.num_states + x) * self.num_actions + a]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub x: usize,
    pub a: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub aggregate_loss: f64,
}

/// Table of `Q_h(x, a)` values.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            values: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.values[(h * self.num_states + x) * self.num_actions + a]
    }

    pub fn set(&mut self, h: usize, x: usize, a: usize, v: f64) {
        self.values[(h * self.num_states + x) * self.num_actions + a] = v;
    }

    pub fn row(&self, h: usize, x: usize) -> &[f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &self.values[start..start + self.num_actions]
    }

    pub fn row_mut(&mut self, h: usize, x: usize) -> &mut [f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &mut self.values[start..start + self.num_actions]
    }

    /// `max |Q_h(·,·)|` for one step.
    pub fn sup_norm_at(&self, h: usize) -> f64 {
        let n = self.num_states * self.num_actions;
        self.values[h * n..(h + 1) * n]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Value table: `values[h][x]` for `h ∈ 0..=H`, the last row zero.
pub type ValueTable = Vec<Vec<f64>>;

/// Q- and V-tables of `policy`, optionally under the contracted
/// (sub-stochastic) model `ρ·ℓ`, `ρ·P`.
pub fn policy_q_dp(
    mdp: &LinearMdp,
    policy: &PolicyTable,
    contraction: Option<&ContractionMap>,
) -> Result<(QTable, ValueTable)> {
    let (hz, s, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut q = QTable::zeros(hz, s, na);
    let mut v = vec![vec![0.0; s]; hz + 1];
    for h in (0..hz).rev() {
        let (head, tail) = v.split_at_mut(h + 1);
        let next = &tail[0];
        for x in 0..s {
            let mut vx = 0.0;
            for a in 0..na {
                let p = mdp.p(h, x, a)?;
                let backup: f64 = p.iter().zip(next).map(|(p, v)| p * v).sum();
                let mut qa = mdp.loss(h, x, a)? + backup;
                if let Some(rho) = contraction {
                    qa *= rho.get(h, x, a);
                }
                q.set(h, x, a, qa);
                vx += policy.row(h, x)[a] * qa;
            }
            head[h][x] = vx;
        }
    }
    Ok((q, v))
}

/// `V_h^π(x)` for all `h, x`; with a contraction, the sub-stochastic value.
pub fn policy_value_dp(
    mdp: &LinearMdp,
    policy: &PolicyTable,
    contraction: Option<&ContractionMap>,
) -> Result<ValueTable> {
    Ok(policy_q_dp(mdp, policy, contraction)?.1)
}

/// `V_0^π(x1)`.
pub fn policy_value(mdp: &LinearMdp, policy: &PolicyTable) -> Result<f64> {
    Ok(policy_value_dp(mdp, policy, None)?[0][mdp.x1()])
}

/// Bellman-optimal deterministic policy (ties to the lowest action index)
/// and its value at `x1`.
pub fn optimal_policy_dp(mdp: &LinearMdp) -> Result<(PolicyTable, f64)> {
    let (policy, values) = optimal_values_dp(mdp)?;
    Ok((policy, values[0][mdp.x1()]))
}

/// Like [`optimal_policy_dp`] but returns the whole optimal value table.
pub fn optimal_values_dp(mdp: &LinearMdp) -> Result<(PolicyTable, ValueTable)> {
    let (hz, s, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut v = vec![vec![0.0; s]; hz + 1];
    let mut actions = vec![0usize; hz * s];
    for h in (0..hz).rev() {
        for x in 0..s {
            let mut best = f64::INFINITY;
            let mut best_a = 0;
            for a in 0..na {
                let p = mdp.p(h, x, a)?;
                let q = mdp.loss(h, x, a)?
                    + p.iter().zip(&v[h + 1]).map(|(p, v)| p * v).sum::<f64>();
                if q < best {
                    best = q;
                    best_a = a;
                }
            }
            v[h][x] = best;
            actions[h * s + x] = best_a;
        }
    }
    Ok((PolicyTable::deterministic(hz, s, na, &actions), v))
}

/// State distributions `μ_h(x)` of `policy` from `x1`, optionally damped by
/// the contraction (the mass lost at each step is `1 − ρ`).
pub fn state_occupancy(
    mdp: &LinearMdp,
    policy: &PolicyTable,
    contraction: Option<&ContractionMap>,
) -> Result<Vec<Vec<f64>>> {
    let (hz, s, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut mu = vec![vec![0.0; s]; hz];
    mu[0][mdp.x1()] = 1.0;
    for h in 0..hz.saturating_sub(1) {
        let (cur, rest) = mu.split_at_mut(h + 1);
        let next = &mut rest[0];
        for x in 0..s {
            let mass = cur[h][x];
            if mass == 0.0 {
                continue;
            }
            for a in 0..na {
                let rho = contraction.map_or(1.0, |c| c.get(h, x, a));
                let w = mass * policy.row(h, x)[a] * rho;
                if w == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(mdp.p(h, x, a)?) {
                    *n += w * p;
                }
            }
        }
    }
    Ok(mu)
}

/// `φ̄^π ∈ R^{dH}`: per step, the expectation of `ρ_h φ(x_h, a_h)` under the
/// contracted dynamics of `policy`.
pub fn truncated_feature_occupancy(
    mdp: &LinearMdp,
    policy: &PolicyTable,
    contraction: &ContractionMap,
) -> Result<DVector<f64>> {
    let (hz, s, na, d) = (mdp.horizon(), mdp.num_states(), mdp.num_actions(), mdp.d());
    let mu = state_occupancy(mdp, policy, Some(contraction))?;
    let mut out = DVector::zeros(d * hz);
    for h in 0..hz {
        let mut block = out.rows_mut(h * d, d);
        for x in 0..s {
            for a in 0..na {
                let w = mu[h][x] * policy.row(h, x)[a] * contraction.get(h, x, a);
                if w != 0.0 {
                    block.axpy(w, mdp.phi(x, a), 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// `|LHS − RHS|` of the extended value-difference identity for
/// `(π, π̂, Q̂)`, with `V̂_h(x) = Σ_a π̂_h(a|x) Q̂_h(x,a)` and both sides
/// computed exactly.
pub fn value_difference_residual(
    mdp: &LinearMdp,
    pi: &PolicyTable,
    pihat: &PolicyTable,
    qhat: &QTable,
) -> Result<f64> {
    let (hz, s, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut vhat = vec![vec![0.0; s]; hz + 1];
    for h in 0..hz {
        for x in 0..s {
            vhat[h][x] = pihat
                .row(h, x)
                .iter()
                .zip(qhat.row(h, x))
                .map(|(p, q)| p * q)
                .sum();
        }
    }
    let lhs = policy_value(mdp, pi)? - vhat[0][mdp.x1()];

    let mu = state_occupancy(mdp, pi, None)?;
    let mut rhs = 0.0;
    for h in 0..hz {
        for x in 0..s {
            if mu[h][x] == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for a in 0..na {
                let (pa, pha) = (pi.row(h, x)[a], pihat.row(h, x)[a]);
                let q = qhat.get(h, x, a);
                let backup: f64 = mdp
                    .p(h, x, a)?
                    .iter()
                    .zip(&vhat[h + 1])
                    .map(|(p, v)| p * v)
                    .sum();
                inner += q * (pa - pha) + pa * (mdp.loss(h, x, a)? + backup - q);
            }
            rhs += mu[h][x] * inner;
        }
    }
    Ok((lhs - rhs).abs())
}

/// Uniform draw from the probability simplex (Dirichlet(1)).
pub fn sample_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return draws.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Tabular MDP embedded with one-hot features (`d = |X|·|A|`).
pub fn gen_tabular_onehot<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<LinearMdp> {
    let d = num_states * num_actions;
    let phi = (0..num_states)
        .map(|x| {
            (0..num_actions)
                .map(|a| {
                    let mut v = vec![0.0; d];
                    v[x * num_actions + a] = 1.0;
                    v
                })
                .collect()
        })
        .collect();
    let mut theta = Vec::with_capacity(horizon);
    let mut psi = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        theta.push((0..d).map(|_| rng.random::<f64>()).collect());
        psi.push((0..d).map(|_| sample_simplex(num_states, rng)).collect());
    }
    LinearMdp::from_parts(LinearMdpParts {
        d,
        horizon,
        num_states,
        num_actions,
        x1: 0,
        phi,
        theta,
        psi,
        loss_noise: LossNoise::Bernoulli,
    })
}

/// Mixture MDP: features on the `d`-simplex, `ψ_h` built from `d` latent
/// next-state distributions, `θ_h ∈ [0,1]^d`.
pub fn gen_mixture<R: Rng + ?Sized>(
    d: usize,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<LinearMdp> {
    let phi = (0..num_states)
        .map(|_| (0..num_actions).map(|_| sample_simplex(d, rng)).collect())
        .collect();
    let mut theta = Vec::with_capacity(horizon);
    let mut psi = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        theta.push((0..d).map(|_| rng.random::<f64>()).collect());
        psi.push((0..d).map(|_| sample_simplex(num_states, rng)).collect());
    }
    LinearMdp::from_parts(LinearMdpParts {
        d,
        horizon,
        num_states,
        num_actions,
        x1: 0,
        phi,
        theta,
        psi,
        loss_noise: LossNoise::Bernoulli,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Two states, two actions, H = 2 chain with hand-picked numbers.
    fn chain() -> LinearMdp {
        let one_hot = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        LinearMdp::from_parts(LinearMdpParts {
            d: 4,
            horizon: 2,
            num_states: 2,
            num_actions: 2,
            x1: 0,
            phi: vec![vec![one_hot(0), one_hot(1)], vec![one_hot(2), one_hot(3)]],
            theta: vec![vec![0.1, 0.9, 0.5, 0.3], vec![0.2, 0.4, 0.6, 0.8]],
            psi: vec![
                vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5], vec![1.0, 0.0]],
                vec![vec![0.6, 0.4], vec![0.1, 0.9], vec![0.3, 0.7], vec![0.0, 1.0]],
            ],
            loss_noise: LossNoise::Deterministic,
        })
        .unwrap()
    }

    fn single_state(horizon: usize, losses: &[f64]) -> LinearMdp {
        let na = losses.len();
        LinearMdp::from_parts(LinearMdpParts {
            d: na,
            horizon,
            num_states: 1,
            num_actions: na,
            x1: 0,
            phi: vec![(0..na)
                .map(|a| (0..na).map(|i| if i == a { 1.0 } else { 0.0 }).collect())
                .collect()],
            theta: vec![losses.to_vec(); horizon],
            psi: vec![vec![vec![1.0]; na]; horizon],
            loss_noise: LossNoise::Deterministic,
        })
        .unwrap()
    }

    #[test]
    fn generators_pass_validation() {
        for seed in 0..5 {
            let m = gen_tabular_onehot(4, 3, 3, &mut rng(seed)).unwrap();
            assert!(m.validate().is_empty(), "{:?}", m.validate());
            let m = gen_mixture(5, 6, 3, 4, &mut rng(seed)).unwrap();
            assert!(m.validate().is_empty(), "{:?}", m.validate());
            for h in 0..4 {
                for x in 0..6 {
                    for a in 0..3 {
                        let l = m.mean_loss(h, x, a);
                        assert!((0.0..=1.0).contains(&l));
                    }
                }
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_tabular_onehot(3, 2, 2, &mut rng(4)).unwrap();
        let b = gen_tabular_onehot(3, 2, 2, &mut rng(4)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let a = gen_mixture(3, 4, 2, 2, &mut rng(4)).unwrap();
        let b = gen_mixture(3, 4, 2, 2, &mut rng(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn onehot_transitions_copy_the_table() {
        let m = gen_tabular_onehot(3, 2, 2, &mut rng(1)).unwrap();
        let parts = m.to_parts();
        for h in 0..2 {
            for x in 0..3 {
                for a in 0..2 {
                    let i = x * 2 + a;
                    let row = m.transition_dist(h, x, a).unwrap();
                    let sum: f64 = parts.psi[h][i].iter().sum();
                    for xn in 0..3 {
                        assert!((row[xn] - parts.psi[h][i][xn] / sum).abs() < 1e-15);
                    }
                    assert_eq!(m.mean_loss(h, x, a), parts.theta[h][i]);
                }
            }
        }
    }

    #[test]
    fn degenerate_mixture_is_one_chain() {
        let m = gen_mixture(1, 4, 3, 3, &mut rng(2)).unwrap();
        for h in 0..3 {
            let reference = m.transition_dist(h, 0, 0).unwrap();
            for x in 0..4 {
                for a in 0..3 {
                    assert_eq!(m.phi(x, a)[0], 1.0);
                    assert_eq!(m.transition_dist(h, x, a).unwrap(), reference);
                }
            }
        }
    }

    #[test]
    fn validate_reports_theta_norm() {
        let mut parts = single_state(1, &[0.5]).to_parts();
        parts.theta[0][0] = 2.0;
        let m = LinearMdp::from_parts(parts).unwrap();
        let v = m.validate();
        assert!(v.iter().any(|v| matches!(v, Violation::ThetaNorm { h: 0, .. })));
    }

    #[test]
    fn validate_reports_transition_sum() {
        let mut parts = chain().to_parts();
        parts.psi[0][1] = vec![0.2, 0.7];
        let m = LinearMdp::from_parts(parts).unwrap();
        let v = m.validate();
        assert!(v
            .iter()
            .any(|v| matches!(v, Violation::TransitionSum { h: 0, x: 0, a: 1, .. })));
        assert!(m.transition_dist(0, 0, 1).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut parts = chain().to_parts();
        parts.x1 = 5;
        assert!(LinearMdp::from_parts(parts).is_err());
        let mut parts = chain().to_parts();
        parts.theta.pop();
        assert!(LinearMdp::from_parts(parts).is_err());
    }

    #[test]
    fn mixture_endpoints_and_midpoint() {
        let m = LinearMdp::from_parts(LinearMdpParts {
            d: 2,
            horizon: 1,
            num_states: 2,
            num_actions: 3,
            x1: 0,
            phi: vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            ],
            theta: vec![vec![0.2, 0.6]],
            psi: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
            loss_noise: LossNoise::Deterministic,
        })
        .unwrap();
        assert!(m.validate().is_empty());
        assert_eq!(m.transition_dist(0, 0, 0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(m.transition_dist(0, 0, 1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(m.transition_dist(0, 0, 2).unwrap(), vec![0.5, 0.5]);
        assert!((m.mean_loss(0, 1, 2) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_theta_gives_zero_loss() {
        let m = single_state(2, &[0.0, 0.0]);
        assert_eq!(m.mean_loss(1, 0, 1), 0.0);
    }

    #[test]
    fn single_state_episodes_stay_put() {
        let m = single_state(5, &[0.3, 0.6]);
        let pi = PolicyTable::uniform_for(&m);
        let traj = m.sample_episode(&pi, &mut rng(3)).unwrap();
        assert_eq!(traj.steps.len(), 5);
        assert!(traj.steps.iter().all(|s| s.x == 0));
    }

    #[test]
    fn deterministic_losses_match_realized_actions() {
        let m = chain();
        let pi = PolicyTable::uniform_for(&m);
        let mut r = rng(8);
        for _ in 0..20 {
            let traj = m.sample_episode(&pi, &mut r).unwrap();
            let expected: f64 = traj
                .steps
                .iter()
                .enumerate()
                .map(|(h, s)| m.mean_loss(h, s.x, s.a))
                .sum();
            assert_eq!(traj.aggregate_loss, expected);
        }
    }

    #[test]
    fn visit_frequencies_match_occupancy() {
        let m = chain();
        let pi = PolicyTable::uniform_for(&m);
        let mu = state_occupancy(&m, &pi, None).unwrap();
        let n = 100_000;
        let mut visits = [0usize; 2];
        let mut r = rng(12);
        for _ in 0..n {
            let traj = m.sample_episode(&pi, &mut r).unwrap();
            visits[traj.steps[1].x] += 1;
        }
        for x in 0..2 {
            let p = mu[1][x];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = visits[x] as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "x={x}: {freq} vs {p}");
        }
    }

    #[test]
    fn value_of_constant_loss_chain() {
        let m = single_state(4, &[1.0]);
        let pi = PolicyTable::uniform_for(&m);
        assert_eq!(policy_value(&m, &pi).unwrap(), 4.0);
    }

    #[test]
    fn identity_and_full_contraction() {
        let m = gen_mixture(3, 4, 2, 3, &mut rng(6)).unwrap();
        let pi = PolicyTable::random(3, 4, 2, &mut rng(7));
        let plain = policy_value_dp(&m, &pi, None).unwrap();
        let ones = ContractionMap::constant(3, 4, 2, 1.0);
        assert_eq!(policy_value_dp(&m, &pi, Some(&ones)).unwrap(), plain);
        let zero_first = ContractionMap::from_fn(3, 4, 2, |h, _, _| if h == 0 { 0.0 } else { 1.0 });
        let v = policy_value_dp(&m, &pi, Some(&zero_first)).unwrap();
        assert!(v[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn optimal_policy_small_cases() {
        let m = single_state(1, &[0.2, 0.7]);
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        assert_eq!(pi.row(0, 0), &[1.0, 0.0]);
        assert!((v - 0.2).abs() < 1e-15);

        let m = single_state(3, &[0.4, 0.4, 0.4]);
        let (pi, v) = optimal_policy_dp(&m).unwrap();
        assert!((v - 1.2).abs() < 1e-12);
        for h in 0..3 {
            assert_eq!(pi.row(h, 0)[0], 1.0);
        }
    }

    #[test]
    fn optimal_beats_random_policies() {
        let m = gen_tabular_onehot(4, 3, 3, &mut rng(10)).unwrap();
        let (_, v_star) = optimal_policy_dp(&m).unwrap();
        let mut r = rng(11);
        for _ in 0..100 {
            let pi = PolicyTable::random(3, 4, 3, &mut r);
            assert!(v_star <= policy_value(&m, &pi).unwrap() + 1e-12);
        }
    }

    #[test]
    fn bellman_optimality_residual() {
        for seed in 0..10 {
            let m = gen_mixture(3, 5, 3, 4, &mut rng(seed)).unwrap();
            let (pi, v) = optimal_values_dp(&m).unwrap();
            for h in 0..4 {
                for x in 0..5 {
                    let best = (0..3)
                        .map(|a| {
                            m.loss(h, x, a).unwrap()
                                + m.p(h, x, a)
                                    .unwrap()
                                    .iter()
                                    .zip(&v[h + 1])
                                    .map(|(p, v)| p * v)
                                    .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!((v[h][x] - best).abs() <= 1e-12);
                }
            }
            let direct = policy_value_dp(&m, &pi, None).unwrap();
            assert!((direct[0][0] - v[0][0]).abs() <= 1e-12);
        }
    }

    /// Plain tabular DP on the source table, independent of the linear form.
    fn tabular_value(p: &[Vec<Vec<Vec<f64>>>], l: &[Vec<Vec<f64>>], pi: &PolicyTable) -> Vec<f64> {
        let hz = p.len();
        let s = p[0].len();
        let mut v = vec![0.0; s];
        for h in (0..hz).rev() {
            let mut nv = vec![0.0; s];
            for x in 0..s {
                for (a, &pa) in pi.row(h, x).iter().enumerate() {
                    let backup: f64 = p[h][x][a].iter().zip(&v).map(|(p, v)| p * v).sum();
                    nv[x] += pa * (l[h][x][a] + backup);
                }
            }
            v = nv;
        }
        v
    }

    #[test]
    fn onehot_embedding_round_trip() {
        let (s, na, hz) = (4, 3, 3);
        let mut r = rng(13);
        let p: Vec<Vec<Vec<Vec<f64>>>> = (0..hz)
            .map(|_| {
                (0..s)
                    .map(|_| (0..na).map(|_| sample_simplex(s, &mut r)).collect())
                    .collect()
            })
            .collect();
        let l: Vec<Vec<Vec<f64>>> = (0..hz)
            .map(|_| {
                (0..s)
                    .map(|_| (0..na).map(|_| r.random::<f64>()).collect())
                    .collect()
            })
            .collect();
        let d = s * na;
        let m = LinearMdp::from_parts(LinearMdpParts {
            d,
            horizon: hz,
            num_states: s,
            num_actions: na,
            x1: 0,
            phi: (0..s)
                .map(|x| {
                    (0..na)
                        .map(|a| (0..d).map(|i| if i == x * na + a { 1.0 } else { 0.0 }).collect())
                        .collect()
                })
                .collect(),
            theta: (0..hz)
                .map(|h| (0..d).map(|i| l[h][i / na][i % na]).collect())
                .collect(),
            psi: (0..hz)
                .map(|h| (0..d).map(|i| p[h][i / na][i % na].clone()).collect())
                .collect(),
            loss_noise: LossNoise::Deterministic,
        })
        .unwrap();
        assert!(m.validate().is_empty());
        for _ in 0..10 {
            let pi = PolicyTable::random(hz, s, na, &mut r);
            let linear = policy_value_dp(&m, &pi, None).unwrap();
            let tabular = tabular_value(&p, &l, &pi);
            for x in 0..s {
                assert!((linear[0][x] - tabular[x]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn occupancy_special_cases() {
        let m = gen_tabular_onehot(3, 2, 3, &mut rng(14)).unwrap();
        let pi = PolicyTable::random(3, 3, 2, &mut rng(15));
        let ones = ContractionMap::constant(3, 3, 2, 1.0);
        let occ = truncated_feature_occupancy(&m, &pi, &ones).unwrap();
        let mu = state_occupancy(&m, &pi, None).unwrap();
        for h in 0..3 {
            for x in 0..3 {
                for a in 0..2 {
                    let expected = mu[h][x] * pi.row(h, x)[a];
                    assert!((occ[h * 6 + x * 2 + a] - expected).abs() < 1e-15);
                }
            }
        }
        let zeros = ContractionMap::constant(3, 3, 2, 0.0);
        let occ = truncated_feature_occupancy(&m, &pi, &zeros).unwrap();
        assert!(occ.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occupancy_matches_monte_carlo() {
        let m = chain();
        let pi = PolicyTable::random(2, 2, 2, &mut rng(16));
        let rho = ContractionMap::from_fn(2, 2, 2, |h, x, a| [0.9, 0.4, 0.7, 0.2][(h + x + a) % 4]);
        let exact = truncated_feature_occupancy(&m, &pi, &rho).unwrap();

        // Importance form of the contracted expectation: the weight carried
        // into step h is the product of ρ over the earlier steps.
        let n = 100_000;
        let mut r = rng(17);
        let mut sum = DVector::zeros(8);
        let mut sum_sq = DVector::zeros(8);
        for _ in 0..n {
            let traj = m.sample_episode(&pi, &mut r).unwrap();
            let mut carry = 1.0;
            let mut sample = DVector::zeros(8);
            for (h, s) in traj.steps.iter().enumerate() {
                let rh = rho.get(h, s.x, s.a);
                sample.rows_mut(h * 4, 4).axpy(carry * rh, m.phi(s.x, s.a), 1.0);
                carry *= rh;
            }
            sum_sq += sample.component_mul(&sample);
            sum += sample;
        }
        for i in 0..8 {
            let mean = sum[i] / n as f64;
            let var = (sum_sq[i] / n as f64 - mean * mean).max(0.0);
            let sigma = (var / n as f64).sqrt();
            assert!((mean - exact[i]).abs() <= 3.0 * sigma + 1e-12, "coord {i}: {mean} vs {}", exact[i]);
        }
    }

    #[test]
    fn value_difference_identity() {
        let m = gen_mixture(3, 4, 3, 3, &mut rng(18)).unwrap();
        let pihat = PolicyTable::random(3, 4, 3, &mut rng(19));
        let (q, _) = policy_q_dp(&m, &pihat, None).unwrap();
        assert!(value_difference_residual(&m, &pihat, &pihat, &q).unwrap() <= 1e-12);

        let pi = PolicyTable::random(3, 4, 3, &mut rng(20));
        let zero = QTable::zeros(3, 4, 3);
        assert!(value_difference_residual(&m, &pi, &pihat, &zero).unwrap() <= 1e-12);

        let mut r = rng(21);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let m = gen_mixture(3, 5, 3, 4, &mut r).unwrap();
            let pi = PolicyTable::random(4, 5, 3, &mut r);
            let pihat = PolicyTable::random(4, 5, 3, &mut r);
            let mut q = QTable::zeros(4, 5, 3);
            for h in 0..4 {
                for x in 0..5 {
                    for a in 0..3 {
                        q.set(h, x, a, r.random_range(-5.0..5.0));
                    }
                }
            }
            worst = worst.max(value_difference_residual(&m, &pi, &pihat, &q).unwrap());
        }
        assert!(worst <= 1e-9, "{worst:e}");
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = gen_mixture(4, 5, 3, 3, &mut rng(22)).unwrap();
        let text = m.to_json().unwrap();
        let back = LinearMdp::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), text);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["d", "H", "num_states", "num_actions", "x1", "phi", "theta", "psi"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]
            #[test]
            fn contraction_lowers_value(seed in any::<u64>()) {
                let mut r = rng(seed);
                let m = gen_mixture(3, 4, 3, 3, &mut r).unwrap();
                let pi = PolicyTable::random(3, 4, 3, &mut r);
                let rho = ContractionMap::from_fn(3, 4, 3, |_, _, _| r.random::<f64>());
                let full = policy_value_dp(&m, &pi, None).unwrap();
                let contracted = policy_value_dp(&m, &pi, Some(&rho)).unwrap();
                for h in 0..3 {
                    for x in 0..4 {
                        prop_assert!(contracted[h][x] <= full[h][x] + 1e-10);
                    }
                }
                // pointwise larger ρ′ gives a larger value
                let rho2 = ContractionMap::from_fn(3, 4, 3, |h, x, a| {
                    let base = rho.get(h, x, a);
                    base + (1.0 - base) * 0.5
                });
                let bigger = policy_value_dp(&m, &pi, Some(&rho2)).unwrap();
                for h in 0..3 {
                    for x in 0..4 {
                        prop_assert!(contracted[h][x] <= bigger[h][x] + 1e-12);
                    }
                }
            }
        }
    }
}
