//! CPC control law: controlled/free coordinate split, the null covector of the
//! control matrix, the time reparameterization `(t₀, s)` of a target point,
//! the renormalized (linearized, reparameterized) target, and the feedback
//! law itself. Also the online regression of the control matrix.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Chain, State};
use crate::error::{Error, Result};
use crate::mathkit::{self, Mat, Vector};

/// Default guard on `|q̇̄_dᵀ q̇̄|`.
pub const GUARD_TOL: f64 = 1e-6;

/// Indices of the controlled (χ) and free (ψ) coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordSplit {
    pub chi: Vec<usize>,
    pub psi: Vec<usize>,
}

impl CoordSplit {
    pub fn new(chi: Vec<usize>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in &chi {
            if i >= n || seen[i] {
                return Err(Error::InvalidParams(format!("bad controlled index set {chi:?}")));
            }
            seen[i] = true;
        }
        let psi = (0..n).filter(|i| !seen[*i]).collect();
        Ok(CoordSplit { chi, psi })
    }

    pub fn n(&self) -> usize {
        self.chi.len() + self.psi.len()
    }

    pub fn m(&self) -> usize {
        self.chi.len()
    }
}

pub(crate) fn select_rows(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub(crate) fn select_mat_rows(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

/// Picks M rows of `b` by complete-pivoting elimination (largest remaining
/// entry first), so the selected block has the largest attainable pivots.
/// Returned indices are sorted ascending.
pub fn split_coordinates(b: &Mat) -> Result<CoordSplit> {
    let (n, m) = b.shape();
    if m > n {
        return Err(Error::RankDeficient);
    }
    let scale = b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::RankDeficient);
    }
    let mut work = b.clone();
    let mut row_free = vec![true; n];
    let mut col_free = vec![true; m];
    let mut chi = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best = (0usize, 0usize, -1.0f64);
        for r in (0..n).filter(|r| row_free[*r]) {
            for c in (0..m).filter(|c| col_free[*c]) {
                let v = work[(r, c)].abs();
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        let (pr, pc, pv) = best;
        if pv <= 1e-12 * scale {
            return Err(Error::RankDeficient);
        }
        row_free[pr] = false;
        col_free[pc] = false;
        chi.push(pr);
        let pivot = work[(pr, pc)];
        for r in (0..n).filter(|r| row_free[*r]) {
            let f = work[(r, pc)] / pivot;
            for c in 0..m {
                work[(r, c)] -= f * work[(pr, c)];
            }
        }
    }
    chi.sort_unstable();
    CoordSplit::new(chi, n)
}

/// The N×(N−M) covector `b` with `bᵀB = 0`; its ψ rows form `−I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullCovector(pub Mat);

impl NullCovector {
    pub fn mat(&self) -> &Mat {
        &self.0
    }

    /// `ā = bᵀa`.
    pub fn bar(&self, a: &Vector) -> Vector {
        self.0.tr_mul(a)
    }

    pub fn free_dim(&self) -> usize {
        self.0.ncols()
    }
}

pub fn null_covector(b: &Mat, split: &CoordSplit) -> Result<NullCovector> {
    let b_chi_inv = mathkit::inverse(&select_mat_rows(b, &split.chi))?;
    Ok(null_covector_with_inverse(b, split, &b_chi_inv))
}

fn null_covector_with_inverse(b: &Mat, split: &CoordSplit, b_chi_inv: &Mat) -> NullCovector {
    let n = split.n();
    let free = split.psi.len();
    // (B_ψ B_χ⁻¹)ᵀ fills the χ rows; −I fills the ψ rows.
    let coupling = select_mat_rows(b, &split.psi) * b_chi_inv;
    let mut out = Mat::zeros(n, free);
    for (k, &row) in split.chi.iter().enumerate() {
        for j in 0..free {
            out[(row, j)] = coupling[(j, k)];
        }
    }
    for (j, &row) in split.psi.iter().enumerate() {
        out[(row, j)] = -1.0;
    }
    NullCovector(out)
}

/// Time offset and time scale relating a target point to the current motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reparam {
    pub t0: f64,
    pub s: f64,
}

impl Reparam {
    pub const IDENTITY: Reparam = Reparam { t0: 0.0, s: 1.0 };
}

/// `(t₀, s)` from the projected positions and velocities.
///
/// `t₀ = q̇̄_dᵀ(q̄_d − q̄)/(q̇̄_dᵀq̇̄)`, `s = q̇̄_dᵀq̇̄_d/(q̇̄_dᵀq̇̄)`; with one free
/// coordinate these are the exact scalar ratios. A fully actuated system has
/// no free coordinates and gets the identity reparameterization.
pub fn reparam_params(x0: &State, xd: &State, b: &NullCovector, guard_tol: f64) -> Result<Reparam> {
    if b.free_dim() == 0 {
        return Ok(Reparam::IDENTITY);
    }
    let qbar = b.bar(&x0.q);
    let vbar = b.bar(&x0.qdot);
    let qbar_d = b.bar(&xd.q);
    let vbar_d = b.bar(&xd.qdot);
    reparam_from_bars(&qbar, &vbar, &qbar_d, &vbar_d, guard_tol)
}

pub(crate) fn reparam_from_bars(
    qbar: &Vector,
    vbar: &Vector,
    qbar_d: &Vector,
    vbar_d: &Vector,
    guard_tol: f64,
) -> Result<Reparam> {
    let denom = vbar_d.dot(vbar);
    if !(denom.abs() > guard_tol) {
        return Err(Error::VelocityBarDegenerate { value: denom, guard: guard_tol });
    }
    let t0 = vbar_d.dot(&(qbar_d - qbar)) / denom;
    let s = vbar_d.dot(vbar_d) / denom;
    Ok(Reparam { t0, s })
}

/// Value at `t = 0` and (constant) velocity of `q_d⁰ + q̇_d⁰(t − t₀)/s`.
pub fn renormalized_target(xd: &State, rep: Reparam) -> (Vector, Vector) {
    let qdot_r = &xd.qdot / rep.s;
    let q_r0 = &xd.q - &qdot_r * rep.t0;
    (q_r0, qdot_r)
}

/// Gain `k = κ²` of the critically damped feedback (`k_d = 2√k_p`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSpec {
    pub k: f64,
}

impl GainSpec {
    pub fn new(k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidParams(format!("gain must be positive, got {k}")));
        }
        Ok(GainSpec { k })
    }

    /// From `k_p` and stiffness scale `ε`: `κ = √k_p / ε`.
    pub fn from_epsilon(kp: f64, epsilon: f64) -> Result<Self> {
        Self::new(kp / (epsilon * epsilon))
    }

    pub fn kappa(&self) -> f64 {
        self.k.sqrt()
    }
}

/// Everything about a control matrix that the law needs, computed once.
#[derive(Debug, Clone)]
pub struct CpcFrame {
    pub b: Mat,
    pub split: CoordSplit,
    pub b_chi_inv: Mat,
    pub null: NullCovector,
}

impl CpcFrame {
    pub fn new(b: Mat) -> Result<Self> {
        let split = split_coordinates(&b)?;
        Self::with_split(b, split)
    }

    pub fn with_split(b: Mat, split: CoordSplit) -> Result<Self> {
        if split.n() != b.nrows() || split.m() != b.ncols() {
            return Err(Error::InvalidParams("coordinate split does not match control matrix".into()));
        }
        let b_chi_inv = mathkit::inverse(&select_mat_rows(&b, &split.chi))?;
        let null = null_covector_with_inverse(&b, &split, &b_chi_inv);
        Ok(CpcFrame { b, split, b_chi_inv, null })
    }

    pub fn reparam(&self, x0: &State, xd: &State, guard_tol: f64) -> Result<Reparam> {
        reparam_params(x0, xd, &self.null, guard_tol)
    }

    /// `Δ^r x_χ⁰ = (χ⁰ − χ_r(0), χ̇⁰ − χ̇_r)`.
    pub fn renormalized_error(&self, x0: &State, xd: &State, rep: Reparam) -> (Vector, Vector) {
        let (q_r0, qdot_r) = renormalized_target(xd, rep);
        let dq = &x0.q - q_r0;
        let dv = &x0.qdot - qdot_r;
        (select_rows(&dq, &self.split.chi), select_rows(&dv, &self.split.chi))
    }

    /// Feedback part `−B_χ⁻¹(κ² Δχ + 2κ Δχ̇)`.
    pub fn feedback(&self, dchi: &Vector, dchi_dot: &Vector, gain: GainSpec) -> Vector {
        let kappa = gain.kappa();
        &self.b_chi_inv * (dchi * (-gain.k) - dchi_dot * (2.0 * kappa))
    }

    pub fn tau(&self, x0: &State, xd: &State, rep: Reparam, gain: GainSpec, tau_d: &Vector) -> Vector {
        let (dchi, dchi_dot) = self.renormalized_error(x0, xd, rep);
        tau_d + self.feedback(&dchi, &dchi_dot, gain)
    }
}

/// The CPC torque `τ_d − B_χ⁻¹(κ² Δ^r χ + 2κ Δ^r χ̇)`.
pub fn cpc_tau(
    x0: &State,
    xd: &State,
    b: &Mat,
    split: &CoordSplit,
    rep: Reparam,
    gain: GainSpec,
    tau_d: &Vector,
) -> Result<Vector> {
    let frame = CpcFrame::with_split(b.clone(), split.clone())?;
    Ok(frame.tau(x0, xd, rep, gain, tau_d))
}

/// Minimum-norm torque producing acceleration `u`: `B_τ⁺(D u + H)`.
pub fn feedforward_tau(chain: &Chain, q: &Vector, qdot: &Vector, u: &Vector) -> Result<Vector> {
    let b_tau = chain.actuation_matrix();
    let rank = b_tau.rank(1e-12);
    if rank < chain.n() {
        return Err(Error::NotFullyActuated { rank, n: chain.n() });
    }
    let terms = chain.manipulator_terms(q, qdot);
    let pinv = mathkit::right_pseudoinverse(b_tau)?;
    Ok(pinv * (terms.d * u + terms.h))
}

/// One regression sample: commanded torque and the acceleration it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tau: Vector,
    pub u: Vector,
}

/// Least-squares control matrix from recent `(τ, u)` samples, `u ≈ B τ`.
///
/// With `affine` an intercept column absorbs the torque-independent drift;
/// the returned matrix is still only the N×M torque coefficient.
pub fn estimate_b(history: &[Sample], ridge: f64, affine: bool) -> Result<Mat> {
    let first = history.first().ok_or_else(|| Error::InvalidParams("empty regression history".into()))?;
    let (m, n) = (first.tau.len(), first.u.len());
    let cols = if affine { m + 1 } else { m };
    let a = Mat::from_fn(history.len(), cols, |r, c| if c < m { history[r].tau[c] } else { 1.0 });
    let y = Mat::from_fn(history.len(), n, |r, c| history[r].u[c]);
    let x = mathkit::least_squares(&a, &y, ridge)?;
    Ok(x.rows(0, m).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn col(x: &[f64]) -> Mat {
        Mat::from_column_slice(x.len(), 1, x)
    }

    #[test]
    fn split_picks_dominant_rows() {
        assert_eq!(split_coordinates(&col(&[1.0, 0.5])).unwrap().chi, vec![0]);
        let s = split_coordinates(&col(&[0.0, 1.0])).unwrap();
        assert_eq!((s.chi, s.psi), (vec![1], vec![0]));
        assert!(matches!(split_coordinates(&col(&[0.0, 0.0])), Err(Error::RankDeficient)));
        let rank1 = Mat::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 0.5, 1.0]);
        assert!(matches!(split_coordinates(&rank1), Err(Error::RankDeficient)));
    }

    #[test]
    fn null_covector_cases() {
        let b = col(&[1.0, 0.5]);
        let split = split_coordinates(&b).unwrap();
        let nc = null_covector(&b, &split).unwrap();
        assert_eq!(nc.0, col(&[0.5, -1.0]));
        assert_eq!(nc.0.tr_mul(&b)[(0, 0)], 0.0);

        let full = Mat::from_row_slice(2, 2, &[2.0, 0.1, 0.3, 1.0]);
        let nc = null_covector(&full, &split_coordinates(&full).unwrap()).unwrap();
        assert_eq!(nc.0.shape(), (2, 0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Mat::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let split = split_coordinates(&b).unwrap();
        let nc = null_covector(&b, &split).unwrap();
        assert!(nc.0.tr_mul(&b).norm() < 1e-9);
        for _ in 0..10 {
            let tau = v(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            assert!(nc.bar(&(&b * tau)).norm() < 1e-9);
        }
    }

    #[test]
    fn reparam_cases() {
        let b = NullCovector(col(&[0.0, -1.0]));
        let x = State::from_slices(&[0.3, 0.7], &[0.2, -1.1], 0.0);
        assert_eq!(reparam_params(&x, &x, &b, GUARD_TOL).unwrap(), Reparam::IDENTITY);

        // q̄_d − q̄ = 0.1, q̇̄ = 1, q̇̄_d = 2 (b picks −q₂).
        let x0 = State::from_slices(&[0.0, 0.0], &[0.0, -1.0], 0.0);
        let xd = State::from_slices(&[0.0, -0.1], &[0.0, -2.0], 0.0);
        let r = reparam_params(&x0, &xd, &b, GUARD_TOL).unwrap();
        assert!((r.t0 - 0.1).abs() < 1e-15 && (r.s - 2.0).abs() < 1e-15);

        let still = State::from_slices(&[0.0, 0.0], &[1.0, 0.0], 0.0);
        assert!(matches!(
            reparam_params(&still, &xd, &b, GUARD_TOL),
            Err(Error::VelocityBarDegenerate { .. })
        ));
    }

    #[test]
    fn reparam_two_free_coordinates_parallel_velocities() {
        // Hand reduction: with q̇̄_d = λ q̇̄ the general formula reduces to the
        // scalar ratios along the common direction.
        let b = NullCovector(Mat::from_row_slice(3, 2, &[0.4, -0.2, -1.0, 0.0, 0.0, -1.0]));
        let dir = v(&[0.6, -0.8]);
        let lambda = -1.7;
        let x0 = State::from_slices(&[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0], 0.0);
        let mut qdot = v(&[0.0, 0.0, 0.0]);
        // Solve bᵀq̇ = dir with q̇ = (0, −dir₀, −dir₁).
        qdot[1] = -dir[0];
        qdot[2] = -dir[1];
        let x0 = State::new(x0.q.clone(), qdot.clone(), 0.0);
        let offset = 0.35;
        let mut qd = x0.q.clone();
        qd[1] -= offset * dir[0];
        qd[2] -= offset * dir[1];
        let xd = State::new(qd, &qdot * lambda, 0.0);
        let r = reparam_params(&x0, &xd, &b, GUARD_TOL).unwrap();
        assert!((r.s - lambda).abs() < 1e-12);
        assert!((r.t0 - offset).abs() < 1e-12);
    }

    #[test]
    fn renormalized_target_cases() {
        let xd = State::from_slices(&[0.3, -0.2], &[1.0, 2.0], 0.0);
        let (q, v_) = renormalized_target(&xd, Reparam::IDENTITY);
        assert_eq!((q, v_), (xd.q.clone(), xd.qdot.clone()));
        let (q, v_) = renormalized_target(&xd, Reparam { t0: 0.0, s: -1.0 });
        assert_eq!(q, xd.q);
        assert_eq!(v_, -&xd.qdot);
    }

    #[test]
    fn cpc_tau_cases() {
        let b = col(&[1.0, 0.5]);
        let split = split_coordinates(&b).unwrap();
        let gain = GainSpec::new(4.0).unwrap();
        let tau_d = v(&[0.25]);
        let xd = State::from_slices(&[0.2, 0.1], &[1.0, -0.5], 0.0);
        // On target: no feedback.
        let tau = cpc_tau(&xd, &xd, &b, &split, Reparam::IDENTITY, gain, &tau_d).unwrap();
        assert_eq!(tau, tau_d);
        // Δχ = 0.1, Δχ̇ = 0: feedback −4·0.1 = −0.4.
        let x0 = State::from_slices(&[0.3, 0.1], &[1.0, -0.5], 0.0);
        let tau = cpc_tau(&x0, &xd, &b, &split, Reparam::IDENTITY, gain, &tau_d).unwrap();
        assert!((tau[0] - (0.25 - 0.4)).abs() < 1e-15);
    }

    #[test]
    fn cpc_tau_reduces_to_linear_feedback_when_fully_actuated() {
        let b = Mat::from_row_slice(2, 2, &[2.0, 0.3, -0.4, 1.5]);
        let split = split_coordinates(&b).unwrap();
        let gain = GainSpec::from_epsilon(1.0, 0.1).unwrap();
        let x0 = State::from_slices(&[0.1, 0.2], &[0.3, -0.1], 0.0);
        let xd = State::from_slices(&[0.0, 0.25], &[0.2, 0.0], 0.0);
        let rep = reparam_params(&x0, &xd, &null_covector(&b, &split).unwrap(), GUARD_TOL).unwrap();
        assert_eq!(rep, Reparam::IDENTITY);
        let tau = cpc_tau(&x0, &xd, &b, &split, rep, gain, &v(&[0.0, 0.0])).unwrap();
        let dx = (&x0.q - &xd.q) * gain.k + (&x0.qdot - &xd.qdot) * (2.0 * gain.kappa());
        let expect = -mathkit::inverse(&b).unwrap() * dx;
        assert!((tau - expect).norm() < 1e-10);
    }

    #[test]
    fn feedforward_cases() {
        let mut params = crate::dynamics::ChainParams::fully_actuated(2);
        params.gravity = 0.0;
        let chain = Chain::new(params).unwrap();
        let z = Vector::zeros(2);
        assert_eq!(feedforward_tau(&chain, &v(&[0.3, 0.1]), &z, &z).unwrap(), z);

        let single = Chain::new(crate::dynamics::ChainParams::fully_actuated(1)).unwrap();
        let p = single.mass_props();
        let tau = feedforward_tau(&single, &v(&[std::f64::consts::FRAC_PI_2]), &v(&[0.0]), &v(&[0.0])).unwrap();
        assert!((tau[0].abs() - p.mass * 10.0 * p.com_offset).abs() < 1e-12);

        let chain = Chain::new(crate::dynamics::ChainParams::fully_actuated(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let s = State::new(
                Vector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0)),
                Vector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0)),
                0.0,
            );
            let u = Vector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let tau = feedforward_tau(&chain, &s.q, &s.qdot, &u).unwrap();
            assert!((chain.accel(&s, &tau).unwrap() - u).norm() < 1e-9);
        }
        assert!(matches!(
            feedforward_tau(&Chain::acrobot(), &z, &z, &z),
            Err(Error::NotFullyActuated { .. })
        ));
    }

    #[test]
    fn estimate_b_recovers_linear_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b0 = Mat::from_fn(3, 2, |_, _| rng.gen_range(-5.0..5.0));
        let history: Vec<Sample> = (0..7)
            .map(|_| {
                let tau = v(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                Sample { u: &b0 * &tau, tau }
            })
            .collect();
        let b = estimate_b(&history, 0.0, false).unwrap();
        assert!((b - &b0).norm() < 1e-9);

        let zeros: Vec<Sample> = (0..7).map(|_| Sample { tau: v(&[0.0]), u: v(&[1.0, 2.0]) }).collect();
        assert!(matches!(estimate_b(&zeros, 0.0, false), Err(Error::RankDeficient)));

        // Affine regression removes a constant drift exactly.
        let drift = v(&[0.3, -0.2, 1.0]);
        let shifted: Vec<Sample> = history.iter().map(|s| Sample { tau: s.tau.clone(), u: &s.u + &drift }).collect();
        let b = estimate_b(&shifted, 0.0, true).unwrap();
        assert!((b - &b0).norm() < 1e-9);
    }

    #[test]
    fn estimate_b_tracks_acrobot_near_upright() {
        let chain = Chain::acrobot();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dt = 0.01;
        let mut s = State::from_slices(&[0.01, -0.01], &[0.0, 0.0], 0.0);
        let mut history = Vec::new();
        for _ in 0..7 {
            let tau = v(&[rng.gen_range(-0.05..0.05)]);
            let next = chain.step(&s, &tau, dt, crate::dynamics::Integrator::Rk4).unwrap();
            history.push(Sample { u: (&next.qdot - &s.qdot) / dt, tau });
            s = next;
        }
        let est = estimate_b(&history, 1e-8, false).unwrap();
        let exact = chain.exact_control_matrix(&s.q);
        for i in 0..2 {
            let rel = ((est[(i, 0)] - exact[(i, 0)]) / exact[(i, 0)]).abs();
            assert!(rel < 0.25, "entry {i}: {} vs {}", est[(i, 0)], exact[(i, 0)]);
        }
    }

    proptest! {
        #[test]
        fn null_identity_holds(seed in 0u64..5000, n in 2usize..6, m_raw in 1usize..5) {
            let m = m_raw.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Mat::from_fn(n, m, |_, _| rng.gen_range(-2.0..2.0));
            if let Ok(split) = split_coordinates(&b) {
                let nc = null_covector(&b, &split).unwrap();
                prop_assert!(nc.0.tr_mul(&b).norm() < 1e-9 * (1.0 + nc.0.norm()));
                for (j, &row) in split.psi.iter().enumerate() {
                    for k in 0..split.psi.len() {
                        prop_assert_eq!(nc.0[(row, k)], if j == k { -1.0 } else { 0.0 });
                    }
                }
            }
        }

        #[test]
        fn renormalized_target_preserves_projection(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Mat::from_fn(3, 2, |_, _| rng.gen_range(-2.0..2.0));
            let frame = CpcFrame::new(b).unwrap();
            let rand_state = |rng: &mut ChaCha8Rng| State::new(
                Vector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
                Vector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
                0.0,
            );
            let x0 = rand_state(&mut rng);
            let xd = rand_state(&mut rng);
            if let Ok(rep) = frame.reparam(&x0, &xd, GUARD_TOL) {
                let (q_r0, qdot_r) = renormalized_target(&xd, rep);
                let scale = 1.0 + rep.t0.abs() * xd.qdot.norm() / rep.s.abs();
                prop_assert!((frame.null.bar(&q_r0) - frame.null.bar(&x0.q)).norm() < 1e-10 * scale);
                prop_assert!((frame.null.bar(&qdot_r) - frame.null.bar(&x0.qdot)).norm() < 1e-10 * (1.0 + 1.0 / rep.s.abs()));

                // General formula against the scalar one for a single free coordinate.
                let qb = frame.null.bar(&x0.q)[0];
                let vb = frame.null.bar(&x0.qdot)[0];
                let qbd = frame.null.bar(&xd.q)[0];
                let vbd = frame.null.bar(&xd.qdot)[0];
                let t0 = (qbd - qb) / vb;
                let s = vbd / vb;
                prop_assert!((rep.t0 - t0).abs() <= 1e-12 * t0.abs().max(1.0));
                prop_assert!((rep.s - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }
}
