//! Ridge estimators for the per-step loss vectors, the dynamics backup
//! operators and the aggregate (episode-level) loss vector, plus monitors
//! that measure their error against the ground truth.

use nalgebra::{DMatrix, DVector};

use crate::covlinalg::CovarianceAccumulator;
use crate::error::{Error, Result};
use crate::mdpcore::{LinearMdp, QTable};

/// Per-step estimator state. `θ̂_h` and `ψ̂_h` share the covariance `Λ_h`.
#[derive(Debug, Clone)]
pub struct StepEstimator {
    cov: CovarianceAccumulator,
    /// `b_h = Σ φ ℓ`
    moment: DVector<f64>,
    /// `M_h = Σ φ e_{x'}ᵀ`, `d × num_states`
    cross_moment: DMatrix<f64>,
}

impl StepEstimator {
    pub fn new(d: usize, num_states: usize) -> Result<Self> {
        Ok(Self {
            cov: CovarianceAccumulator::new(d)?,
            moment: DVector::zeros(d),
            cross_moment: DMatrix::zeros(d, num_states),
        })
    }

    pub fn cov(&self) -> &CovarianceAccumulator {
        &self.cov
    }

    pub fn cov_mut(&mut self) -> &mut CovarianceAccumulator {
        &mut self.cov
    }

    pub fn moment(&self) -> &DVector<f64> {
        &self.moment
    }

    pub fn cross_moment(&self) -> &DMatrix<f64> {
        &self.cross_moment
    }
}

/// Per-step estimators for all `h`, with optional full-information mode in
/// which `θ̂_h` is the true `θ_h`.
#[derive(Debug, Clone)]
pub struct Estimators {
    d: usize,
    num_states: usize,
    steps: Vec<StepEstimator>,
    known_theta: Option<Vec<DVector<f64>>>,
}

impl Estimators {
    pub fn new(d: usize, horizon: usize, num_states: usize) -> Result<Self> {
        Ok(Self {
            d,
            num_states,
            steps: (0..horizon)
                .map(|_| StepEstimator::new(d, num_states))
                .collect::<Result<_>>()?,
            known_theta: None,
        })
    }

    pub fn for_mdp(mdp: &LinearMdp) -> Result<Self> {
        Self::new(mdp.d(), mdp.horizon(), mdp.num_states())
    }

    /// Full-information feedback: `θ̂_h` is replaced by the true `θ_h`.
    pub fn with_known_theta(mut self, mdp: &LinearMdp) -> Self {
        self.known_theta = Some((0..mdp.horizon()).map(|h| mdp.theta(h).clone()).collect());
        self
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, h: usize) -> &StepEstimator {
        &self.steps[h]
    }

    pub fn step_mut(&mut self, h: usize) -> &mut StepEstimator {
        &mut self.steps[h]
    }

    /// One sample at step `h`: the shared covariance gets `φφᵀ` once; the
    /// loss moment and transition moment are updated when present.
    pub fn observe(
        &mut self,
        h: usize,
        phi: &DVector<f64>,
        loss: Option<f64>,
        next: Option<usize>,
    ) -> Result<()> {
        if phi.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: phi.len(),
            });
        }
        if let Some(x) = next {
            if x >= self.num_states {
                return Err(Error::Model(format!("next state {x} out of range")));
            }
        }
        let step = &mut self.steps[h];
        step.cov.update(phi)?;
        if let Some(l) = loss {
            step.moment.axpy(l, phi, 1.0);
        }
        if let Some(x) = next {
            let mut col = step.cross_moment.column_mut(x);
            col += phi;
        }
        Ok(())
    }

    /// Sample that only carries a loss.
    pub fn theta_update(&mut self, h: usize, phi: &DVector<f64>, loss: f64) -> Result<()> {
        self.observe(h, phi, Some(loss), None)
    }

    /// Sample that only carries a transition.
    pub fn psi_update(&mut self, h: usize, phi: &DVector<f64>, next: usize) -> Result<()> {
        self.observe(h, phi, None, Some(next))
    }

    /// `θ̂_h = Λ_h⁻¹ b_h`, or the true `θ_h` in full-information mode.
    pub fn theta_hat(&self, h: usize) -> DVector<f64> {
        match &self.known_theta {
            Some(t) => t[h].clone(),
            None => self.steps[h].cov.lambda_inv() * &self.steps[h].moment,
        }
    }

    /// `ψ̂_h V = Λ_h⁻¹ (M_h V)`.
    pub fn psi_apply(&self, h: usize, v: &[f64]) -> Result<DVector<f64>> {
        if v.len() != self.num_states {
            return Err(Error::DimensionMismatch {
                expected: self.num_states,
                got: v.len(),
            });
        }
        let step = &self.steps[h];
        let mv = &step.cross_moment * DVector::from_column_slice(v);
        Ok(step.cov.lambda_inv() * mv)
    }

    /// `‖θ_h − θ̂_h‖_{Λ_h}`.
    pub fn reward_error_norm(&self, mdp: &LinearMdp, h: usize) -> Result<f64> {
        let err = mdp.theta(h) - self.theta_hat(h);
        self.steps[h].cov.mahalanobis(&err)
    }

    /// `‖(ψ_h − ψ̂_h)V‖_{Λ_h}` with `ψ_h V` computed from the true model.
    pub fn dynamics_error_norm(&self, mdp: &LinearMdp, h: usize, v: &[f64]) -> Result<f64> {
        let err = mdp.psi_apply(h, v) - self.psi_apply(h, v)?;
        self.steps[h].cov.mahalanobis(&err)
    }
}

/// Ridge estimator over concatenated features `φ ∈ R^{dH}` with the episode
/// loss as target.
#[derive(Debug, Clone)]
pub struct AggregateThetaEstimator {
    cov: CovarianceAccumulator,
    moment: DVector<f64>,
}

impl AggregateThetaEstimator {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self {
            cov: CovarianceAccumulator::new(dim)?,
            moment: DVector::zeros(dim),
        })
    }

    pub fn update(&mut self, phi_concat: &DVector<f64>, v: f64) -> Result<()> {
        self.cov.update(phi_concat)?;
        self.moment.axpy(v, phi_concat, 1.0);
        Ok(())
    }

    pub fn theta_hat(&self) -> DVector<f64> {
        self.cov.lambda_inv() * &self.moment
    }

    pub fn cov(&self) -> &CovarianceAccumulator {
        &self.cov
    }

    pub fn cov_mut(&mut self) -> &mut CovarianceAccumulator {
        &mut self.cov
    }

    pub fn moment(&self) -> &DVector<f64> {
        &self.moment
    }
}

/// Error norms recorded during one episode. Dynamics errors and the Q
/// sup-norm keep the maximum over everything recorded (e.g. over copies).
#[derive(Debug, Clone, PartialEq)]
pub struct GoodEventMonitor {
    pub reward_error: Vec<f64>,
    pub dynamics_error: Vec<f64>,
    pub q_sup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoodEventFlags {
    pub e1: bool,
    pub e2: bool,
    pub qbound: bool,
}

impl GoodEventMonitor {
    pub fn new(horizon: usize) -> Self {
        Self {
            reward_error: vec![0.0; horizon],
            dynamics_error: vec![0.0; horizon],
            q_sup: 0.0,
        }
    }

    /// Reward errors for every `h`.
    pub fn record_rewards(&mut self, est: &Estimators, mdp: &LinearMdp) -> Result<()> {
        for h in 0..self.reward_error.len() {
            self.reward_error[h] = est.reward_error_norm(mdp, h)?;
        }
        Ok(())
    }

    /// Dynamics errors against a learner value table `v[h][x]`
    /// (`h ∈ 0..=H`), and the sup-norm of the matching Q-table.
    pub fn record_values(
        &mut self,
        est: &Estimators,
        mdp: &LinearMdp,
        v: &[Vec<f64>],
        q: &QTable,
    ) -> Result<()> {
        for h in 0..self.dynamics_error.len() {
            let e = est.dynamics_error_norm(mdp, h, &v[h + 1])?;
            self.dynamics_error[h] = self.dynamics_error[h].max(e);
            self.q_sup = self.q_sup.max(q.sup_norm_at(h));
        }
        Ok(())
    }

    pub fn max_reward_error(&self) -> f64 {
        self.reward_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_dynamics_error(&self) -> f64 {
        self.dynamics_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn good_event_check(
    monitor: &GoodEventMonitor,
    beta_r: f64,
    beta_p: f64,
    beta_q: f64,
) -> GoodEventFlags {
    GoodEventFlags {
        e1: monitor.reward_error.iter().all(|&e| e <= beta_r),
        e2: monitor.dynamics_error.iter().all(|&e| e <= beta_p),
        qbound: monitor.q_sup <= beta_q,
    }
}
