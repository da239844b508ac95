//! Small dense linear algebra and root finding shared by the rest of the crate.
//!
//! Matrices here are tiny (a handful of rows), so everything is plain
//! `nalgebra` dynamic storage with explicit conditioning checks instead of
//! silently returning garbage for near-singular systems.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Condition-number cap used by [`inverse`], [`solve`] and friends.
pub const COND_CAP: f64 = 1e12;

fn norm1(m: &Mat) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a square matrix with a 1-norm condition check.
pub fn inverse(a: &Mat) -> Result<Mat> {
    inverse_capped(a, COND_CAP)
}

pub fn inverse_capped(a: &Mat, cap: f64) -> Result<Mat> {
    assert!(a.is_square(), "inverse of a non-square matrix");
    let n = a.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let inv = match n {
        1 => {
            let v = a[(0, 0)];
            if v == 0.0 || !v.is_finite() {
                return Err(Error::SingularMatrix { cond: f64::INFINITY });
            }
            Mat::from_element(1, 1, 1.0 / v)
        }
        2 => {
            let m = Matrix2::new(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
            match m.try_inverse() {
                Some(i) => Mat::from_row_slice(2, 2, &[i[(0, 0)], i[(0, 1)], i[(1, 0)], i[(1, 1)]]),
                None => return Err(Error::SingularMatrix { cond: f64::INFINITY }),
            }
        }
        _ => match a.clone().lu().try_inverse() {
            Some(i) => i,
            None => return Err(Error::SingularMatrix { cond: f64::INFINITY }),
        },
    };
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > cap {
        return Err(Error::SingularMatrix { cond });
    }
    Ok(inv)
}

/// Solves `a * x = b` for square `a`.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    Ok(inverse(a)? * b)
}

/// Right pseudoinverse `Bᵀ(BBᵀ)⁻¹` of a full-row-rank matrix.
pub fn right_pseudoinverse(b: &Mat) -> Result<Mat> {
    let bbt = b * b.transpose();
    Ok(b.transpose() * inverse(&bbt)?)
}

/// Ridge-regularized least squares: minimizes `‖A·X − Y‖² + ridge·‖X‖²`.
///
/// Solved through the normal equations, which is adequate for the small,
/// well-scaled regressions in this crate.
pub fn least_squares(a: &Mat, y: &Mat, ridge: f64) -> Result<Mat> {
    if a.nrows() == 0 || a.nrows() != y.nrows() {
        return Err(Error::InvalidParams(format!(
            "least squares needs matching non-empty rows (A: {}, y: {})",
            a.nrows(),
            y.nrows()
        )));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidParams("ridge must be non-negative".into()));
    }
    let mut ata = a.transpose() * a;
    for i in 0..ata.nrows() {
        ata[(i, i)] += ridge;
    }
    let aty = a.transpose() * y;
    match inverse(&ata) {
        Ok(inv) => Ok(inv * aty),
        Err(Error::SingularMatrix { .. }) => Err(Error::RankDeficient),
        Err(e) => Err(e),
    }
}

/// `e^{Ft}` for the critically damped error oscillator `F = [[0, 1], [−κ², −2κ]]`.
pub fn expm_crit_damped(kappa: f64, t: f64) -> Matrix2<f64> {
    let e = (-kappa * t).exp();
    Matrix2::new(
        e * (1.0 + kappa * t),
        e * t,
        -e * kappa * kappa * t,
        e * (1.0 - kappa * t),
    )
}

fn eval_poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

fn eval_poly_deriv(coeffs: &[f64], x: f64) -> (f64, f64) {
    let mut p = 0.0;
    let mut dp = 0.0;
    for &c in coeffs {
        dp = dp * x + p;
        p = p * x + c;
    }
    (p, dp)
}

/// Newton polish against the original coefficients. Keeps the best iterate,
/// so a root sitting at a multiple zero (derivative ≈ 0) is never made worse.
fn polish(coeffs: &[f64], mut x: f64) -> f64 {
    let mut best = x;
    let mut best_val = eval_poly(coeffs, x).abs();
    for _ in 0..8 {
        let (p, dp) = eval_poly_deriv(coeffs, x);
        if p == 0.0 || dp == 0.0 || !dp.is_finite() {
            break;
        }
        let next = x - p / dp;
        if !next.is_finite() {
            break;
        }
        let v = eval_poly(coeffs, next).abs();
        if v < best_val {
            best = next;
            best_val = v;
        }
        if (next - x).abs() <= 1e-16 * next.abs().max(1.0) {
            break;
        }
        x = next;
    }
    best
}

/// Real roots of `a x² + b x + c` (a ≠ 0), with a relative tolerance that
/// snaps slightly negative discriminants to a double root.
fn quadratic_roots(a: f64, b: f64, c: f64, out: &mut Vec<f64>) {
    let disc = b * b - 4.0 * a * c;
    let scale = (b * b).max((4.0 * a * c).abs()).max(f64::MIN_POSITIVE);
    if disc < 0.0 {
        if disc > -1e-12 * scale {
            let r = -b / (2.0 * a);
            out.push(r);
            out.push(r);
        }
        return;
    }
    if disc <= 1e-14 * scale {
        let r = -b / (2.0 * a);
        out.push(r);
        out.push(r);
        return;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let q = if q == 0.0 { -0.5 * sq } else { q };
    let r1 = q / a;
    let r2 = if q != 0.0 { c / q } else { -r1 };
    out.push(r1);
    out.push(r2);
}

/// Real roots of the monic cubic `x³ + a x² + b x + c`.
fn cubic_roots_monic(a: f64, b: f64, c: f64) -> Vec<f64> {
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let mut roots = Vec::with_capacity(3);
    if p == 0.0 && q == 0.0 {
        roots.extend([-shift; 3]);
    } else if disc > 0.0 {
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        roots.push(u + v - shift);
    } else {
        let r = (-p / 3.0).sqrt();
        let arg = if r == 0.0 { 0.0 } else { (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0) };
        let phi = arg.acos();
        for k in 0..3 {
            roots.push(2.0 * r * ((phi + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() - shift);
        }
    }
    let coeffs = [1.0, a, b, c];
    roots.into_iter().map(|r| polish(&coeffs, r)).collect()
}

/// Real roots (with multiplicity, ascending) of `c4 x⁴ + c3 x³ + c2 x² + c1 x + c0`.
///
/// Closed-form Ferrari resolution through the resolvent cubic, then a Newton
/// polish of every root on the original coefficients. Leading coefficients
/// that are negligible relative to the rest drop the degree.
pub fn quartic_real_roots(c4: f64, c3: f64, c2: f64, c1: f64, c0: f64) -> Result<Vec<f64>> {
    let all = [c4, c3, c2, c1, c0];
    if all.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParams("non-finite polynomial coefficient".into()));
    }
    let scale = all.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if c4 == 0.0 && c3 == 0.0 && c2 == 0.0 && c1 == 0.0 {
        return Err(Error::DegeneratePolynomial);
    }
    let negligible = |c: f64| c.abs() <= 1e-14 * scale;

    let mut roots: Vec<f64> = Vec::with_capacity(4);
    if !negligible(c4) {
        let (b, c, d, e) = (c3 / c4, c2 / c4, c1 / c4, c0 / c4);
        // Depressed quartic y⁴ + p y² + q y + r with x = y − b/4.
        let shift = b / 4.0;
        let p = c - 3.0 * b * b / 8.0;
        let q = b * b * b / 8.0 - b * c / 2.0 + d;
        let r = -3.0 * b.powi(4) / 256.0 + b * b * c / 16.0 - b * d / 4.0 + e;
        let pscale = p.abs().max(r.abs().sqrt()).max(q.abs().powf(2.0 / 3.0));
        let mut ys = Vec::with_capacity(4);
        if q.abs() <= 1e-14 * pscale.max(f64::MIN_POSITIVE).powf(1.5) || q == 0.0 {
            // Biquadratic: z² + p z + r = 0 with z = y².
            let mut zs = Vec::with_capacity(2);
            quadratic_roots(1.0, p, r, &mut zs);
            for z in zs {
                if z > 0.0 {
                    let s = z.sqrt();
                    ys.push(s);
                    ys.push(-s);
                } else if z > -1e-12 * pscale.max(1e-300) {
                    ys.push(0.0);
                    ys.push(0.0);
                }
            }
        } else {
            // Resolvent cubic 8m³ + 8p m² + (2p² − 8r) m − q² = 0, take the largest root (> 0).
            let ms = cubic_roots_monic(p, p * p / 4.0 - r, -q * q / 8.0);
            let m = ms.into_iter().fold(f64::NEG_INFINITY, f64::max);
            if m > 0.0 {
                let s = (2.0 * m).sqrt();
                let t = q / (2.0 * s);
                quadratic_roots(1.0, -s, p / 2.0 + m + t, &mut ys);
                quadratic_roots(1.0, s, p / 2.0 + m - t, &mut ys);
            }
        }
        roots.extend(ys.into_iter().map(|y| y - shift));
    } else if !negligible(c3) {
        roots.extend(cubic_roots_monic(c2 / c3, c1 / c3, c0 / c3));
    } else if !negligible(c2) {
        quadratic_roots(c2, c1, c0, &mut roots);
    } else if !negligible(c1) {
        roots.push(-c0 / c1);
    } else {
        return Err(Error::DegeneratePolynomial);
    }

    let tol = 1e-8 * scale.max(1.0);
    let mut out: Vec<f64> = roots
        .into_iter()
        .filter(|r| r.is_finite())
        .map(|r| polish(&all, r))
        .filter(|&r| eval_poly(&all, r).abs() <= tol)
        .collect();
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}
