//! Discounted returns and the two-part value estimate used to rank target
//! candidates.
//!
//! `V_II` extrapolates the recorded return of the target over the time offset
//! `t₀`. `V_I` is the work penalty of the critically damped feedback
//! transient that brings the state onto the renormalized target; its integral
//! has a closed form. The transient integral is undiscounted, which is only
//! accurate while `1/κ ≪ T_γ`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control_law::{CpcFrame, GainSpec, Reparam};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::mathkit::{Mat, Vector};

pub type StateReward = Arc<dyn Fn(&State) -> f64 + Send + Sync>;

/// Discounting and reward weights.
#[derive(Clone)]
pub struct RewardSpec {
    pub t_gamma: f64,
    /// Symmetric, negative semidefinite control penalty `C_τ`.
    pub c_tau: Mat,
    /// State reward `r(x)`; `None` means zero.
    pub state_reward: Option<StateReward>,
}

impl fmt::Debug for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewardSpec")
            .field("t_gamma", &self.t_gamma)
            .field("c_tau", &self.c_tau)
            .field("state_reward", &self.state_reward.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl RewardSpec {
    pub fn new(t_gamma: f64, c_tau: Mat) -> Result<Self> {
        if !(t_gamma > 0.0 && t_gamma.is_finite()) {
            return Err(Error::InvalidParams(format!("T_gamma must be positive, got {t_gamma}")));
        }
        if !c_tau.is_square() || (&c_tau - c_tau.transpose()).norm() > 1e-12 * c_tau.norm().max(1.0) {
            return Err(Error::InvalidParams("C_tau must be symmetric".into()));
        }
        if c_tau.clone().symmetric_eigenvalues().iter().any(|&e| e > 1e-12 * c_tau.norm().max(1.0)) {
            return Err(Error::InvalidParams("C_tau must be negative semidefinite".into()));
        }
        Ok(RewardSpec { t_gamma, c_tau, state_reward: None })
    }

    /// `C_τ = −I`, `T_γ = 1`.
    pub fn unit(m: usize) -> Self {
        RewardSpec { t_gamma: 1.0, c_tau: -Mat::identity(m, m), state_reward: None }
    }

    pub fn with_state_reward(mut self, r: StateReward) -> Self {
        self.state_reward = Some(r);
        self
    }

    pub fn state_reward_at(&self, x: &State) -> f64 {
        self.state_reward.as_ref().map_or(0.0, |r| r(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueBreakdown {
    pub v_total: f64,
    pub v_i: f64,
    pub v_ii: f64,
}

/// `Σᵢ γⁱ rᵢ`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Per-step discount `γ = 1 − Δt/T_γ`.
pub fn discount_factor(dt: f64, t_gamma: f64) -> f64 {
    1.0 - dt / t_gamma
}

/// What the estimate needs to know about the chosen target.
#[derive(Debug, Clone, Copy)]
pub struct TargetTerms<'a> {
    pub x: &'a State,
    pub tau_d: &'a Vector,
    pub g: f64,
}

/// Feedback work terms `w₁ = B_χ⁻¹Δχ̇` and `w₂ = B_χ⁻¹(κΔχ + 2Δχ̇)`, i.e.
/// `Z₁ᵀΔ` and `Z₂ᵀΔ`.
pub fn work_terms(frame: &CpcFrame, dchi: &Vector, dchi_dot: &Vector, kappa: f64) -> (Vector, Vector) {
    let w1 = &frame.b_chi_inv * dchi_dot;
    let w2 = &frame.b_chi_inv * (dchi * kappa + dchi_dot * 2.0);
    (w1, w2)
}

/// `V_I` from the renormalized error.
pub fn v_transient(frame: &CpcFrame, dchi: &Vector, dchi_dot: &Vector, tau_d: &Vector, kappa: f64, spec: &RewardSpec) -> f64 {
    let (w1, w2) = work_terms(frame, dchi, dchi_dot, kappa);
    let c = &spec.c_tau;
    let linear = -2.0 / spec.t_gamma * tau_d.dot(&(c * &w1));
    let quad = kappa / (4.0 * spec.t_gamma) * (w1.dot(&(c * &w1)) + w2.dot(&(c * &w2)));
    linear + quad
}

/// `V_II = G_d + (t₀/T_γ)(τ_dᵀC_ττ_d + r(x_d) − G_d)`.
pub fn v_recorded(target: TargetTerms<'_>, rep: Reparam, spec: &RewardSpec) -> f64 {
    let work = target.tau_d.dot(&(&spec.c_tau * target.tau_d));
    target.g + rep.t0 / spec.t_gamma * (work + spec.state_reward_at(target.x) - target.g)
}

pub fn value_estimate(
    frame: &CpcFrame,
    x0: &State,
    target: TargetTerms<'_>,
    rep: Reparam,
    gain: GainSpec,
    spec: &RewardSpec,
) -> ValueBreakdown {
    let (dchi, dchi_dot) = frame.renormalized_error(x0, target.x, rep);
    let v_i = v_transient(frame, &dchi, &dchi_dot, target.tau_d, gain.kappa(), spec);
    let v_ii = v_recorded(target, rep, spec);
    ValueBreakdown { v_total: v_i + v_ii, v_i, v_ii }
}

/// Selection cost, the negated value estimate.
pub fn cost(frame: &CpcFrame, x0: &State, target: TargetTerms<'_>, rep: Reparam, gain: GainSpec, spec: &RewardSpec) -> f64 {
    -value_estimate(frame, x0, target, rep, gain, spec).v_total
}
