//! Planar N-link chain on a frictionless pivot.
//!
//! Joint angles are relative: `q[0]` is measured from vertical-up, `q[i]` from
//! link `i − 1`. Positive angles rotate a link clockwise (toward +x). Every link
//! is a capsule (cylinder with hemispherical caps) whose joints sit at the two
//! cylinder endpoints, so the joint spacing equals the segment length.
//!
//! The equations are assembled in absolute link angles `φ = T q` (T lower
//! triangular ones), where the inertia matrix has the simple form
//! `μ_jk cos(φ_j − φ_k) + δ_jk I`, and then mapped back: `D = Tᵀ M T`,
//! `H = Tᵀ h`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathkit::{self, Mat, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub n_links: usize,
    pub segment_length: f64,
    pub capsule_radius: f64,
    pub density: f64,
    pub gravity: f64,
    pub actuated_joints: Vec<usize>,
}

impl ChainParams {
    /// Two unit capsules (radius 0.1, density 1) with only the elbow actuated.
    pub fn acrobot() -> Self {
        ChainParams {
            n_links: 2,
            segment_length: 1.0,
            capsule_radius: 0.1,
            density: 1.0,
            gravity: 10.0,
            actuated_joints: vec![1],
        }
    }

    /// Same geometry as [`ChainParams::acrobot`] with every joint actuated.
    pub fn fully_actuated(n_links: usize) -> Self {
        ChainParams {
            n_links,
            actuated_joints: (0..n_links).collect(),
            ..Self::acrobot()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_links == 0 {
            return Err(Error::InvalidParams("chain needs at least one link".into()));
        }
        for (name, v) in [
            ("segment_length", self.segment_length),
            ("capsule_radius", self.capsule_radius),
            ("density", self.density),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gravity >= 0.0 && self.gravity.is_finite()) {
            return Err(Error::InvalidParams("gravity must be a finite magnitude".into()));
        }
        let mut seen = vec![false; self.n_links];
        for &j in &self.actuated_joints {
            if j >= self.n_links || seen[j] {
                return Err(Error::InvalidParams(format!("bad actuated joint list {:?}", self.actuated_joints)));
            }
            seen[j] = true;
        }
        Ok(())
    }

    pub fn n_actuated(&self) -> usize {
        self.actuated_joints.len()
    }

    /// The 0/1 selection matrix `B_τ` (N×M).
    pub fn actuation_matrix(&self) -> Mat {
        let mut b = Mat::zeros(self.n_links, self.actuated_joints.len());
        for (col, &j) in self.actuated_joints.iter().enumerate() {
            b[(j, col)] = 1.0;
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vector,
    pub qdot: Vector,
    pub t: f64,
}

impl State {
    pub fn new(q: Vector, qdot: Vector, t: f64) -> Self {
        State { q, qdot, t }
    }

    pub fn at_rest(n: usize) -> Self {
        State::new(Vector::zeros(n), Vector::zeros(n), 0.0)
    }

    pub fn from_slices(q: &[f64], qdot: &[f64], t: f64) -> Self {
        State::new(Vector::from_column_slice(q), Vector::from_column_slice(qdot), t)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTerms {
    pub d: Mat,
    pub h: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassProps {
    pub mass: f64,
    /// Distance from the proximal joint to the centre of mass.
    pub com_offset: f64,
    /// Moment of inertia about the centre of mass, axis normal to the plane.
    pub inertia: f64,
}

/// Mass properties of a capsule of cylinder length `length` and radius `radius`.
pub fn capsule_mass_props(length: f64, radius: f64, density: f64) -> MassProps {
    let r2 = radius * radius;
    let m_cyl = density * PI * r2 * length;
    // One hemisphere.
    let m_hemi = density * 2.0 / 3.0 * PI * r2 * radius;
    let i_cyl = m_cyl * (length * length / 12.0 + r2 / 4.0);
    // Hemisphere about its own centroid (3r/8 from the flat face), transverse axis.
    let i_hemi_com = 83.0 / 320.0 * m_hemi * r2;
    let d = length / 2.0 + 3.0 * radius / 8.0;
    let i_hemi = i_hemi_com + m_hemi * d * d;
    MassProps {
        mass: m_cyl + 2.0 * m_hemi,
        com_offset: length / 2.0,
        inertia: i_cyl + 2.0 * i_hemi,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Rk4,
    SemiImplicitEuler,
}

/// A validated chain with its constant mass coefficients precomputed.
#[derive(Debug, Clone)]
pub struct Chain {
    params: ChainParams,
    props: MassProps,
    b_tau: Mat,
    /// `μ_jk = Σ_i m λ_ij λ_ik`, the absolute-angle inertia coefficients.
    mu: Mat,
    /// `ν_j = Σ_i m λ_ij`, gravity coefficients.
    nu: Vector,
}

impl Chain {
    pub fn new(params: ChainParams) -> Result<Self> {
        params.validate()?;
        let n = params.n_links;
        let props = capsule_mass_props(params.segment_length, params.capsule_radius, params.density);
        let lever = |i: usize, j: usize| -> f64 {
            if j < i {
                params.segment_length
            } else if j == i {
                props.com_offset
            } else {
                0.0
            }
        };
        let mu = Mat::from_fn(n, n, |j, k| (0..n).map(|i| props.mass * lever(i, j) * lever(i, k)).sum());
        let nu = Vector::from_fn(n, |j, _| (0..n).map(|i| props.mass * lever(i, j)).sum());
        let b_tau = params.actuation_matrix();
        Ok(Chain { params, props, b_tau, mu, nu })
    }

    pub fn acrobot() -> Self {
        Chain::new(ChainParams::acrobot()).expect("acrobot parameters are valid")
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn mass_props(&self) -> MassProps {
        self.props
    }

    pub fn n(&self) -> usize {
        self.params.n_links
    }

    pub fn m(&self) -> usize {
        self.params.actuated_joints.len()
    }

    pub fn actuation_matrix(&self) -> &Mat {
        &self.b_tau
    }

    /// Absolute link angles from relative joint angles.
    pub fn absolute_angles(q: &Vector) -> Vector {
        let mut acc = 0.0;
        Vector::from_iterator(
            q.len(),
            q.iter().map(|v| {
                acc += v;
                acc
            }),
        )
    }

    /// `D(q)` and `H(q, q̇)` of `D q̈ + H = B_τ τ`.
    pub fn manipulator_terms(&self, q: &Vector, qdot: &Vector) -> DynamicsTerms {
        let n = self.n();
        let phi = Self::absolute_angles(q);
        let phid = Self::absolute_angles(qdot);
        let g = self.params.gravity;

        let mut m_abs = Mat::zeros(n, n);
        let mut h_abs = Vector::zeros(n);
        for j in 0..n {
            for k in 0..n {
                let dphi = phi[j] - phi[k];
                m_abs[(j, k)] = self.mu[(j, k)] * dphi.cos();
                h_abs[j] += self.mu[(j, k)] * dphi.sin() * phid[k] * phid[k];
            }
            m_abs[(j, j)] += self.props.inertia;
            h_abs[j] -= g * self.nu[j] * phi[j].sin();
        }

        // φ = T q: column sums from the bottom map absolute to relative quantities.
        // (Tᵀ v)_i = Σ_{j≥i} v_j ; (M T)_{jk} = Σ_{l≥k} M_{jl}.
        let mut mt = Mat::zeros(n, n);
        for j in 0..n {
            let mut acc = 0.0;
            for k in (0..n).rev() {
                acc += m_abs[(j, k)];
                mt[(j, k)] = acc;
            }
        }
        let mut d = Mat::zeros(n, n);
        for k in 0..n {
            let mut acc = 0.0;
            for i in (0..n).rev() {
                acc += mt[(i, k)];
                d[(i, k)] = acc;
            }
        }
        let mut h = Vector::zeros(n);
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc += h_abs[i];
            h[i] = acc;
        }
        DynamicsTerms { d, h }
    }

    /// `q̈ = D⁻¹(B_τ τ − H)`.
    pub fn accel(&self, state: &State, tau: &Vector) -> Result<Vector> {
        self.accel_q(&state.q, &state.qdot, tau)
    }

    pub fn accel_q(&self, q: &Vector, qdot: &Vector, tau: &Vector) -> Result<Vector> {
        if tau.len() != self.m() {
            return Err(Error::InvalidParams(format!(
                "expected {} torques, got {}",
                self.m(),
                tau.len()
            )));
        }
        let DynamicsTerms { d, h } = self.manipulator_terms(q, qdot);
        let rhs = &self.b_tau * tau - h;
        match d.clone().cholesky() {
            Some(ch) => Ok(ch.solve(&rhs)),
            None => Err(Error::SingularMatrix { cond: f64::INFINITY }),
        }
    }

    /// Exact control matrix `B(q) = D⁻¹(q) B_τ`.
    pub fn exact_control_matrix(&self, q: &Vector) -> Mat {
        let d = self.manipulator_terms(q, &Vector::zeros(self.n())).d;
        let ch = d.cholesky().expect("chain inertia matrix is positive definite");
        ch.solve(&self.b_tau)
    }

    /// Kinetic plus potential energy (potential zero at the pivot height).
    pub fn energy(&self, state: &State) -> f64 {
        let terms = self.manipulator_terms(&state.q, &Vector::zeros(self.n()));
        let kinetic = 0.5 * state.qdot.dot(&(&terms.d * &state.qdot));
        let phi = Self::absolute_angles(&state.q);
        let potential: f64 = (0..self.n()).map(|j| self.params.gravity * self.nu[j] * phi[j].cos()).sum();
        kinetic + potential
    }

    /// Advances `state` by `dt` with `tau` held constant over the step.
    pub fn step(&self, state: &State, tau: &Vector, dt: f64, method: Integrator) -> Result<State> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParams(format!("time step must be positive, got {dt}")));
        }
        let next = match method {
            Integrator::Rk4 => {
                let (q, v) = (&state.q, &state.qdot);
                let a1 = self.accel_q(q, v, tau)?;
                let q2 = q + v * (0.5 * dt);
                let v2 = v + &a1 * (0.5 * dt);
                let a2 = self.accel_q(&q2, &v2, tau)?;
                let q3 = q + &v2 * (0.5 * dt);
                let v3 = v + &a2 * (0.5 * dt);
                let a3 = self.accel_q(&q3, &v3, tau)?;
                let q4 = q + &v3 * dt;
                let v4 = v + &a3 * dt;
                let a4 = self.accel_q(&q4, &v4, tau)?;
                let qn = q + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
                let vn = v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
                State::new(qn, vn, state.t + dt)
            }
            Integrator::SemiImplicitEuler => {
                let a = self.accel(state, tau)?;
                let vn = &state.qdot + a * dt;
                let qn = &state.q + &vn * dt;
                State::new(qn, vn, state.t + dt)
            }
        };
        if !next.is_finite() {
            return Err(Error::NonFiniteState { t: next.t });
        }
        Ok(next)
    }

    /// RK4 step with the torque re-evaluated by `policy(t, q, q̇)` at every
    /// stage, i.e. a continuous-time closed loop.
    pub fn step_closed_loop<F>(&self, state: &State, dt: f64, mut policy: F) -> Result<State>
    where
        F: FnMut(f64, &Vector, &Vector) -> Result<Vector>,
    {
        let mut f = |t: f64, q: &Vector, v: &Vector| -> Result<Vector> {
            let tau = policy(t, q, v)?;
            self.accel_q(q, v, &tau)
        };
        let (q, v, t, h) = (&state.q, &state.qdot, state.t, dt);
        let a1 = f(t, q, v)?;
        let (q2, v2) = (q + v * (h / 2.0), v + &a1 * (h / 2.0));
        let a2 = f(t + h / 2.0, &q2, &v2)?;
        let (q3, v3) = (q + &v2 * (h / 2.0), v + &a2 * (h / 2.0));
        let a3 = f(t + h / 2.0, &q3, &v3)?;
        let (q4, v4) = (q + &v3 * h, v + &a3 * h);
        let a4 = f(t + h, &q4, &v4)?;
        let qn = q + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0);
        let vn = v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        let next = State::new(qn, vn, t + h);
        if !next.is_finite() {
            return Err(Error::NonFiniteState { t: next.t });
        }
        Ok(next)
    }
}

/// Cholesky-based positive-definiteness check, used by the property tests.
pub fn is_positive_definite(d: &Mat) -> bool {
    (d - d.transpose()).norm() <= 1e-12 * d.norm().max(1.0) && d.clone().cholesky().is_some()
}

/// Convenience wrapper over [`mathkit::inverse`] for callers holding terms.
pub fn inertia_inverse(terms: &DynamicsTerms) -> Result<Mat> {
    mathkit::inverse(&terms.d)
}
