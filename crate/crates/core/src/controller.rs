//! The per-cycle control loop: look up target candidates, pick the cheapest
//! one, compute the CPC torque, and halve the gain until the torque fits the
//! bound. `ControllerState` wraps that with the online control-matrix
//! regression and the cold-start excitation.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control_law::{estimate_b, CpcFrame, GainSpec, Sample, GUARD_TOL};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::mathkit::{Mat, Vector};
use crate::target_store::{TargetCandidate, TargetStore};
use crate::value::{v_recorded, v_transient, RewardSpec, TargetTerms};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Apply zero torque for the cycle.
    #[default]
    Zero,
    /// Repeat the previous command.
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub omega: f64,
    pub s_g: f64,
    pub n_d: usize,
    pub k0: f64,
    pub tau_c: f64,
    pub k_c: f64,
    pub dt: f64,
    pub history_n: usize,
    pub guard_tol: f64,
    pub ridge: f64,
    /// Fit an intercept alongside the control matrix.
    pub affine_regression: bool,
    pub sigma_boot: f64,
    pub fallback: Fallback,
    /// Ignore stored torques and returns (`τ_d = G_d = r = 0`).
    pub acrobot_mode: bool,
    pub t_gamma: f64,
    /// `C_τ = −work_penalty · I`.
    pub work_penalty: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            omega: 10.0,
            s_g: 1.0,
            n_d: 20,
            k0: 2000.0,
            tau_c: 2.0,
            k_c: 2.0,
            dt: 0.01,
            history_n: 7,
            guard_tol: GUARD_TOL,
            ridge: 1e-8,
            affine_regression: false,
            sigma_boot: 0.02,
            fallback: Fallback::Zero,
            acrobot_mode: false,
            t_gamma: 1.0,
            work_penalty: 1.0,
        }
    }
}

impl ControllerConfig {
    pub fn acrobot() -> Self {
        ControllerConfig { s_g: -1.0, acrobot_mode: true, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if !(self.k0 > self.k_c && self.k_c > 0.0) {
            return bad("need k0 > k_c > 0");
        }
        if !(self.tau_c > 0.0) {
            return bad("tau_c must be positive");
        }
        if self.n_d == 0 {
            return bad("n_d must be at least 1");
        }
        if !(self.dt > 0.0) || self.history_n == 0 {
            return bad("dt and history_n must be positive");
        }
        if !(self.sigma_boot >= 0.0 && self.guard_tol >= 0.0 && self.ridge >= 0.0 && self.work_penalty >= 0.0) {
            return bad("sigma_boot, guard_tol, ridge and work_penalty must be non-negative");
        }
        if !(self.t_gamma > 0.0) {
            return bad("t_gamma must be positive");
        }
        Ok(())
    }

    pub fn reward_spec(&self, m: usize) -> RewardSpec {
        RewardSpec { t_gamma: self.t_gamma, c_tau: -Mat::identity(m, m) * self.work_penalty, state_reward: None }
    }
}

/// Result of one pass of the backoff loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub tau: Vector,
    /// Gain used for the returned torque.
    pub k: f64,
    pub iterations: usize,
    /// Dataset index of the target behind the returned torque.
    pub target: usize,
    /// Loop ended on the gain floor with the torque still above the bound.
    pub hit_floor: bool,
}

/// One pass of the control loop with a given control matrix.
pub fn cpc_loop(x0: &State, b: &Mat, store: &TargetStore, cfg: &ControllerConfig) -> Result<LoopOutcome> {
    let frame = CpcFrame::new(b.clone())?;
    let spec = cfg.reward_spec(frame.split.m());
    cpc_loop_with(x0, &frame, store, cfg, &spec)
}

pub fn cpc_loop_with(
    x0: &State,
    frame: &CpcFrame,
    store: &TargetStore,
    cfg: &ControllerConfig,
    spec: &RewardSpec,
) -> Result<LoopOutcome> {
    let candidates = match store.query_candidates(x0, &frame.null, cfg.omega, cfg.s_g, cfg.n_d, cfg.guard_tol) {
        Ok((c, _)) => c,
        Err(Error::VelocityBarDegenerate { .. }) => return Err(Error::NoValidCandidates),
        Err(e) => return Err(e),
    };
    if candidates.is_empty() {
        return Err(Error::NoValidCandidates);
    }
    let m = frame.split.m();
    let zero_tau = Vector::zeros(m);

    // Everything except the gain dependence is fixed for the cycle.
    struct Prepared<'a> {
        cand: &'a TargetCandidate,
        dchi: Vector,
        dchi_dot: Vector,
        tau_d: Vector,
        v_ii: f64,
    }
    let prepared: Vec<Prepared<'_>> = candidates
        .iter()
        .map(|cand| {
            let point = &store.points()[cand.index];
            let (tau_d, g) = if cfg.acrobot_mode { (zero_tau.clone(), 0.0) } else { (point.tau.clone(), point.g) };
            let (dchi, dchi_dot) = frame.renormalized_error(x0, &point.x, cand.rep);
            let v_ii = if cfg.acrobot_mode {
                0.0
            } else {
                v_recorded(TargetTerms { x: &point.x, tau_d: &tau_d, g }, cand.rep, spec)
            };
            Prepared { cand, dchi, dchi_dot, tau_d, v_ii }
        })
        .collect();

    let mut k = cfg.k0;
    let mut iterations = 0;
    loop {
        let gain = GainSpec { k };
        let kappa = gain.kappa();
        let mut best: Option<(f64, &Prepared<'_>)> = None;
        for p in &prepared {
            let cost = -(v_transient(frame, &p.dchi, &p.dchi_dot, &p.tau_d, kappa, spec) + p.v_ii);
            if best.map_or(true, |(c, _)| cost < c) {
                best = Some((cost, p));
            }
        }
        let (_, chosen) = best.expect("candidate list is non-empty");
        let tau = &chosen.tau_d + frame.feedback(&chosen.dchi, &chosen.dchi_dot, gain);
        iterations += 1;
        let used_k = k;
        k /= 2.0;
        let fits = tau.norm() < cfg.tau_c;
        if fits || k < cfg.k_c {
            if !fits {
                log::debug!("gain floor reached with |tau| = {:.3} at k = {used_k}", tau.norm());
            }
            return Ok(LoopOutcome { tau, k: used_k, iterations, target: chosen.cand.index, hit_floor: !fits });
        }
    }
}

/// How the last command was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Bootstrap,
    Cpc,
    Fallback,
}

/// Per-agent controller memory.
#[derive(Debug, Clone)]
pub struct ControllerState {
    history: VecDeque<Sample>,
    prev: Option<(Vector, Vector)>,
    last_b: Option<Mat>,
    last_tau: Vector,
    last_kind: Option<StepKind>,
    last_outcome: Option<LoopOutcome>,
    steps: usize,
    rng: ChaCha8Rng,
    m: usize,
}

impl ControllerState {
    pub fn new(m: usize, seed: u64) -> Self {
        ControllerState {
            history: VecDeque::new(),
            prev: None,
            last_b: None,
            last_tau: Vector::zeros(m),
            last_kind: None,
            last_outcome: None,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            m,
        }
    }

    pub fn history(&self) -> &VecDeque<Sample> {
        &self.history
    }

    pub fn last_b(&self) -> Option<&Mat> {
        self.last_b.as_ref()
    }

    pub fn last_tau(&self) -> &Vector {
        &self.last_tau
    }

    pub fn last_kind(&self) -> Option<StepKind> {
        self.last_kind
    }

    pub fn last_outcome(&self) -> Option<&LoopOutcome> {
        self.last_outcome.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Records the acceleration produced by the previous command.
    fn record(&mut self, x0: &State, cfg: &ControllerConfig) {
        if let Some((prev_qdot, prev_tau)) = self.prev.take() {
            let u = (&x0.qdot - prev_qdot) / cfg.dt;
            self.history.push_back(Sample { tau: prev_tau, u });
            while self.history.len() > cfg.history_n {
                self.history.pop_front();
            }
        }
    }

    fn fallback(&self, cfg: &ControllerConfig) -> Vector {
        match cfg.fallback {
            Fallback::Zero => Vector::zeros(self.m),
            Fallback::Hold => self.last_tau.clone(),
        }
    }
}

/// One control cycle. `x0` must be the state one `cfg.dt` after the previous
/// call; the returned torque is the commanded one (before any disturbance).
pub fn controller_step(ctrl: &mut ControllerState, x0: &State, store: &TargetStore, cfg: &ControllerConfig) -> Vector {
    ctrl.record(x0, cfg);
    let (tau, kind) = if ctrl.history.len() < cfg.history_n {
        let noise = Normal::new(0.0, cfg.sigma_boot).expect("sigma_boot is finite and non-negative");
        (Vector::from_fn(ctrl.m, |_, _| noise.sample(&mut ctrl.rng)), StepKind::Bootstrap)
    } else {
        let history: Vec<Sample> = ctrl.history.iter().cloned().collect();
        let attempt = estimate_b(&history, cfg.ridge, cfg.affine_regression).and_then(|b| {
            ctrl.last_b = Some(b.clone());
            cpc_loop(x0, &b, store, cfg)
        });
        match attempt {
            Ok(out) => {
                let tau = out.tau.clone();
                ctrl.last_outcome = Some(out);
                (tau, StepKind::Cpc)
            }
            Err(e) => {
                log::trace!("step {}: falling back ({e})", ctrl.steps);
                ctrl.last_outcome = None;
                (ctrl.fallback(cfg), StepKind::Fallback)
            }
        }
    };
    let tau = if tau.iter().all(|v| v.is_finite()) { tau } else { Vector::zeros(ctrl.m) };
    ctrl.prev = Some((x0.qdot.clone(), tau.clone()));
    ctrl.last_tau = tau.clone();
    ctrl.last_kind = Some(kind);
    ctrl.steps += 1;
    tau
}
