//! Zero-dynamics controller built on a holonomic virtual constraint
//! `y = χ − h_d(cᵀq)` with affine `h_d`, and the comparison of its feedback
//! term with the CPC feedback term.

use crate::control_law::{renormalized_target, select_rows, CoordSplit, CpcFrame, GainSpec, GUARD_TOL};
use crate::dynamics::{Chain, State};
use crate::error::{Error, Result};
use crate::mathkit::{self, Mat, Vector};

/// Smallest accepted `|cᵀq̇_d|` for a usable phasing variable.
const PHASING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualConstraint {
    /// Unit phasing covector, `θ(q) = cᵀq`.
    pub c: Vector,
    /// Controlled coordinate indices.
    pub chi: Vec<usize>,
    /// `h_d(θ) = offset + slope·θ + ½·curvature·(θ − theta_ref)²`.
    pub offset: Vector,
    pub slope: Vector,
    pub curvature: Vector,
    pub theta_ref: f64,
}

impl VirtualConstraint {
    pub fn theta(&self, q: &Vector) -> f64 {
        self.c.dot(q)
    }

    pub fn h_d(&self, theta: f64) -> Vector {
        let d = theta - self.theta_ref;
        &self.offset + &self.slope * theta + &self.curvature * (0.5 * d * d)
    }

    /// `dh_d/dθ`.
    pub fn h_d_prime(&self, theta: f64) -> Vector {
        &self.slope + &self.curvature * (theta - self.theta_ref)
    }

    /// `y = h(q)`.
    pub fn output(&self, q: &Vector) -> Vector {
        select_rows(q, &self.chi) - self.h_d(self.theta(q))
    }

    /// `∂h/∂q = S_χ − (dh_d/dθ)cᵀ`.
    pub fn jacobian(&self, q: &Vector) -> Mat {
        let mut j = -self.h_d_prime(self.theta(q)) * self.c.transpose();
        for (row, &i) in self.chi.iter().enumerate() {
            j[(row, i)] += 1.0;
        }
        j
    }

    /// `ẏ = (∂h/∂q) q̇`.
    pub fn output_rate(&self, q: &Vector, qdot: &Vector) -> Vector {
        self.jacobian(q) * qdot
    }

    pub fn is_affine(&self) -> bool {
        self.curvature.iter().all(|&v| v == 0.0)
    }
}

fn phasing(xd: &State, c: &Vector) -> Result<(Vector, f64)> {
    let norm = c.norm();
    if !(norm > 0.0) || c.len() != xd.dim() {
        return Err(Error::PhasingDegenerate);
    }
    let c = c / norm;
    let rate = c.dot(&xd.qdot);
    if !(rate.abs() > PHASING_TOL) {
        return Err(Error::PhasingDegenerate);
    }
    Ok((c, rate))
}

/// Affine constraint through `x_d` along its velocity:
/// `h_d(θ) = χ_d + χ̇_d(θ − cᵀq_d)/(cᵀq̇_d)`. `c` is normalized first.
pub fn build_constraint(xd: &State, split: &CoordSplit, c: &Vector) -> Result<VirtualConstraint> {
    let (c, rate) = phasing(xd, c)?;
    let slope = select_rows(&xd.qdot, &split.chi) / rate;
    let theta_d = c.dot(&xd.q);
    let offset = select_rows(&xd.q, &split.chi) - &slope * theta_d;
    let curvature = Vector::zeros(split.m());
    Ok(VirtualConstraint { c, chi: split.chi.clone(), offset, slope, curvature, theta_ref: theta_d })
}

/// Second-order constraint following the local path
/// `q_d + q̇_d τ + ½ q̈_d τ²`, expanded to second order in `θ`.
pub fn build_path_constraint(xd: &State, qddot_d: &Vector, split: &CoordSplit, c: &Vector) -> Result<VirtualConstraint> {
    let mut vc = build_constraint(xd, split, c)?;
    let theta_dot = vc.c.dot(&xd.qdot);
    let theta_ddot = vc.c.dot(qddot_d);
    let chi_dot = select_rows(&xd.qdot, &split.chi);
    let chi_ddot = select_rows(qddot_d, &split.chi);
    vc.curvature = (chi_ddot * theta_dot - chi_dot * theta_ddot) / theta_dot.powi(3);
    Ok(vc)
}

/// Decoupling matrix `A = (∂h/∂q) B(q)`, the Jacobian, and the torque-free
/// part of `ÿ` with the sign flipped.
fn decoupling(chain: &Chain, q: &Vector, qdot: &Vector, vc: &VirtualConstraint) -> Result<(Mat, Mat, Vector)> {
    let terms = chain.manipulator_terms(q, qdot);
    let ch = terms.d.clone().cholesky().ok_or(Error::SingularMatrix { cond: f64::INFINITY })?;
    let j = vc.jacobian(q);
    let a = &j * ch.solve(chain.actuation_matrix());
    let theta_dot = vc.c.dot(qdot);
    let drift = &j * ch.solve(&terms.h) + &vc.curvature * (theta_dot * theta_dot);
    Ok((a, j, drift))
}

fn invert_decoupling(a: &Mat) -> Result<Mat> {
    mathkit::inverse(a).map_err(|_| Error::SingularDecoupling)
}

/// `τ_d^ZD = A⁻¹((∂h/∂q) D⁻¹ H − ∂/∂q((∂h/∂q) q̇) q̇)`, the torque that keeps `ÿ = 0`.
pub fn tau_d_zd(chain: &Chain, x: &State, vc: &VirtualConstraint) -> Result<Vector> {
    let (a, _, drift) = decoupling(chain, &x.q, &x.qdot, vc)?;
    Ok(invert_decoupling(&a)? * drift)
}

/// Feedback part `−A⁻¹(κ² y + 2κ ẏ)`.
pub fn zd_feedback(chain: &Chain, x: &State, vc: &VirtualConstraint, gain: GainSpec) -> Result<Vector> {
    let (a, j, _) = decoupling(chain, &x.q, &x.qdot, vc)?;
    let y = vc.output(&x.q);
    let ydot = &j * &x.qdot;
    Ok(invert_decoupling(&a)? * (y * (-gain.k) - ydot * (2.0 * gain.kappa())))
}

pub fn tau_zd(chain: &Chain, x: &State, vc: &VirtualConstraint, gain: GainSpec) -> Result<Vector> {
    let (a, j, drift) = decoupling(chain, &x.q, &x.qdot, vc)?;
    let a_inv = invert_decoupling(&a)?;
    let y = vc.output(&x.q);
    let ydot = &j * &x.qdot;
    Ok(&a_inv * drift + a_inv * (y * (-gain.k) - ydot * (2.0 * gain.kappa())))
}

/// CPC and ZD feedback at a single state. The CPC side uses the exact control
/// matrix at `x`; the affine constraint runs through the renormalized target
/// with phasing covector `c` (the null covector when `None`).
pub fn feedback_pair(
    chain: &Chain,
    x: &State,
    xd: &State,
    gain: GainSpec,
    c: Option<&Vector>,
) -> Result<(Vector, Vector)> {
    let frame = CpcFrame::new(chain.exact_control_matrix(&x.q))?;
    let rep = frame.reparam(x, xd, GUARD_TOL)?;
    let (q_r, qdot_r) = renormalized_target(xd, rep);
    let c = phasing_covector(&frame, c);
    let vc = build_constraint(&State::new(q_r, qdot_r, x.t), &frame.split, &c)?;
    let (dchi, dchi_dot) = frame.renormalized_error(x, xd, rep);
    Ok((frame.feedback(&dchi, &dchi_dot, gain), zd_feedback(chain, x, &vc, gain)?))
}

fn phasing_covector(frame: &CpcFrame, c: Option<&Vector>) -> Vector {
    match c {
        Some(c) => c.clone(),
        None => frame.null.mat().column(0).into_owned(),
    }
}

/// Relative disagreement of the CPC and ZD feedback terms over the
/// closed-loop transient, with `κ = 1/ε` and null-covector phasing.
pub fn correspondence_gap(chain: &Chain, x: &State, xd: &State, epsilon: f64) -> Result<f64> {
    correspondence_gap_with(chain, x, xd, epsilon, None)
}

/// As [`correspondence_gap`] with an explicit phasing covector.
///
/// The target `x_d` is taken as a point of the unforced trajectory through
/// it. CPC is frozen at `x`: it keeps `B(q⁰)`, its split and the renormalized
/// target line. ZD follows the second-order local path of that trajectory.
/// On a straight path the θ-matched reference only slides along the line the
/// CPC target lies on, so both terms agree for any `c`; the path curvature is
/// what makes the choice of `c` visible.
///
/// The plant is driven by `τ_d^ZD + Δτ_CPC` for `3ε` and the result is
/// `max_t ‖Δτ_CPC(t) − Δτ_ZD(t)‖ / ‖Δτ_CPC(0)‖`. With zero initial feedback
/// there is no transient and the gap is zero.
pub fn correspondence_gap_with(
    chain: &Chain,
    x: &State,
    xd: &State,
    epsilon: f64,
    c: Option<&Vector>,
) -> Result<f64> {
    if chain.n() - chain.m() != 1 {
        return Err(Error::InvalidParams("correspondence gap needs exactly one unactuated direction".into()));
    }
    let gain = GainSpec::from_epsilon(1.0, epsilon)?;
    let frame = CpcFrame::new(chain.exact_control_matrix(&x.q))?;
    let rep = frame.reparam(x, xd, GUARD_TOL)?;
    let (q_r0, qdot_r) = renormalized_target(xd, rep);
    let qddot_d = chain.accel(xd, &Vector::zeros(chain.m()))?;
    let vc = build_path_constraint(xd, &qddot_d, &frame.split, &phasing_covector(&frame, c))?;

    let cpc_feedback = |t: f64, q: &Vector, v: &Vector| {
        let q_r = &q_r0 + &qdot_r * (t - x.t);
        let dchi = select_rows(&(q - q_r), &frame.split.chi);
        let dchi_dot = select_rows(&(v - &qdot_r), &frame.split.chi);
        frame.feedback(&dchi, &dchi_dot, gain)
    };
    let initial = cpc_feedback(x.t, &x.q, &x.qdot).norm();
    if initial == 0.0 {
        return Ok(0.0);
    }

    let window = 3.0 * epsilon;
    let steps = 300;
    let dt = window / steps as f64;
    let mut s = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..=steps {
        let zd = zd_feedback(chain, &s, &vc, gain)?;
        worst = worst.max((cpc_feedback(s.t, &s.q, &s.qdot) - zd).norm());
        if i == steps {
            break;
        }
        s = chain.step_closed_loop(&s, dt, |t, q, v| {
            let here = State::new(q.clone(), v.clone(), t);
            Ok(tau_d_zd(chain, &here, &vc)? + cpc_feedback(t, q, v))
        })?;
    }
    Ok(worst / initial)
}
