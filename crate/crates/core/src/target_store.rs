//! Recorded target points, their ball-tree index, and the branch-and-bound
//! search for the lowest proximity-loss candidates.
//!
//! With one free coordinate the proximity loss of a stored point is a sum of
//! two squares of affine functions of that point (`ξ` of its position, `η` of
//! its velocity). Over a ball those two affine maps sweep an ellipse, and the
//! loss extrema on its boundary come from a quartic in `cos θ`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control_law::{reparam_from_bars, NullCovector, Reparam};
use crate::dynamics::{ChainParams, State};
use crate::error::{Error, Result};
use crate::mathkit::{self, Vector};

/// Default maximum number of points in a leaf.
pub const LEAF_SIZE: usize = 16;

/// One recorded sample `(x, τ, G)` with its time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub t: f64,
    pub x: State,
    pub tau: Vector,
    pub g: f64,
    /// Index of the recorded trajectory this point belongs to.
    pub episode: usize,
}

pub fn proximity_loss(t0: f64, s: f64, omega: f64, s_g: f64) -> f64 {
    let a = omega * t0;
    let b = s - s_g;
    a * a + b * b
}

/// A stored point together with its reparameterization and loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCandidate {
    pub index: usize,
    pub rep: Reparam,
    pub loss: f64,
}

/// Affine loss coefficients for one query state.
///
/// `ξ = β_ξᵀq_d − β_ξᵀq⁰` and `η = β_ηᵀq̇_d − s_g`, so `L = ξ² + η²`.
#[derive(Debug, Clone)]
pub struct QueryContext {
    pub beta_xi: Vector,
    pub beta_eta: Vector,
    /// `β_ξᵀq⁰`.
    pub xi_offset: f64,
    pub s_g: f64,
    pub omega: f64,
    /// `|s|` at or below this means `|q̇̄_d q̇̄⁰| ≤ guard_tol`.
    pub s_guard: f64,
}

impl QueryContext {
    pub fn new(x0: &State, b: &NullCovector, omega: f64, s_g: f64, guard_tol: f64) -> Result<Self> {
        if b.free_dim() != 1 {
            return Err(Error::InvalidParams(format!(
                "ball-tree bounds need exactly one free coordinate, got {}",
                b.free_dim()
            )));
        }
        let col = b.mat().column(0).into_owned();
        let vbar = col.dot(&x0.qdot);
        if !(vbar.abs() > guard_tol) || !col.norm().is_finite() {
            return Err(Error::VelocityBarDegenerate { value: vbar, guard: guard_tol });
        }
        let beta_eta = &col / vbar;
        let beta_xi = &beta_eta * omega;
        let xi_offset = beta_xi.dot(&x0.q);
        Ok(QueryContext { beta_xi, beta_eta, xi_offset, s_g, omega, s_guard: guard_tol / (vbar * vbar) })
    }

    /// `(α_ξ, α_η)` at a sphere center `[q_c; q̇_c]`.
    pub fn alphas(&self, center_q: &[f64], center_v: &[f64]) -> (f64, f64) {
        let n = self.beta_xi.len();
        let mut a_xi = -self.xi_offset;
        let mut a_eta = -self.s_g;
        for i in 0..n {
            a_xi += self.beta_xi[i] * center_q[i];
            a_eta += self.beta_eta[i] * center_v[i];
        }
        (a_xi, a_eta)
    }
}

/// Lower and upper bounds of `(α_ξ + a u)² + (α_η + c v)²` over `u² + v² ≤ ρ²`.
pub fn ellipse_bounds(alpha_xi: f64, alpha_eta: f64, a: f64, c: f64, rho: f64) -> (f64, f64) {
    let f = |theta: f64| {
        let u = alpha_xi + a * rho * theta.cos();
        let v = alpha_eta + c * rho * theta.sin();
        u * u + v * v
    };
    let center = alpha_xi * alpha_xi + alpha_eta * alpha_eta;
    if rho == 0.0 || (a == 0.0 && c == 0.0) {
        return (center, center);
    }

    // Unconstrained minimizer inside the disk: the lower bound is zero.
    let inside = {
        let du = if a > 0.0 { alpha_xi / a } else if alpha_xi == 0.0 { 0.0 } else { f64::INFINITY };
        let dv = if c > 0.0 { alpha_eta / c } else if alpha_eta == 0.0 { 0.0 } else { f64::INFINITY };
        du * du + dv * dv <= rho * rho
    };

    // Stationarity ρ(a²−c²) sinθ cosθ + aα_ξ sinθ = cα_η cosθ, squared into a
    // quartic in x = cosθ. Both signs of sinθ are evaluated; extra boundary
    // points cannot spoil the extrema because every one is feasible.
    let p = rho * (a * a - c * c);
    let q = a * alpha_xi;
    let r = c * alpha_eta;
    let mut thetas = [0.0; 12];
    thetas[1] = std::f64::consts::PI;
    thetas[2] = std::f64::consts::FRAC_PI_2;
    thetas[3] = -std::f64::consts::FRAC_PI_2;
    let mut count = 4;
    if let Ok(roots) = mathkit::quartic_real_roots(-p * p, -2.0 * p * q, p * p - q * q - r * r, 2.0 * p * q, q * q) {
        for x in roots {
            if x < -1.0 - 1e-9 || x > 1.0 + 1e-9 {
                continue;
            }
            let base = x.clamp(-1.0, 1.0).acos();
            thetas[count] = base;
            thetas[count + 1] = -base;
            count += 2;
        }
    }
    // Newton polish on the angle itself, keeping an iterate only if it is a
    // better stationary point.
    let df = |t: f64| {
        let (s, co) = t.sin_cos();
        p * s * co + q * s - r * co
    };
    let ddf = |t: f64| {
        let (s, co) = t.sin_cos();
        p * (co * co - s * s) + q * co + r * s
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for mut t in thetas.into_iter().take(count) {
        for _ in 0..3 {
            let d2 = ddf(t);
            if d2 == 0.0 {
                break;
            }
            let next = t - df(t) / d2;
            if df(next).abs() < df(t).abs() {
                t = next;
            } else {
                break;
            }
        }
        let v = f(t);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if inside {
        lo = 0.0;
    }
    (lo.max(0.0), hi)
}

/// Sphere in the `[q; q̇]` embedding holding a contiguous run of the
/// permuted point order.
#[derive(Debug, Clone)]
pub struct BallNode {
    pub center: Vec<f64>,
    pub radius: f64,
    pub start: usize,
    pub end: usize,
    pub children: Option<(usize, usize)>,
}

impl BallNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Lower and upper loss bounds for every point in `node`.
pub fn node_bounds(node: &BallNode, ctx: &QueryContext) -> (f64, f64) {
    let n = ctx.beta_xi.len();
    let (a_xi, a_eta) = ctx.alphas(&node.center[..n], &node.center[n..]);
    ellipse_bounds(a_xi, a_eta, ctx.beta_xi.norm(), ctx.beta_eta.norm(), node.radius)
}

/// Immutable ball tree over a list of points.
#[derive(Debug, Clone)]
pub struct BallTree {
    dim: usize,
    /// Embedded coordinates, row `i` of the permuted order.
    coords: Vec<f64>,
    /// Dataset index of permuted row `i`.
    order: Vec<usize>,
    nodes: Vec<BallNode>,
}

impl BallTree {
    pub fn build(points: &[DataPoint], leaf_size: usize) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptyDataset)?;
        let n = first.x.dim();
        let dim = 2 * n;
        let mut raw = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.x.dim() != n {
                return Err(Error::DatasetSchemaMismatch("points of different dimension".into()));
            }
            raw.extend(p.x.q.iter());
            raw.extend(p.x.qdot.iter());
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        build_node(&raw, dim, &mut order, 0, points.len(), leaf_size.max(1), &mut nodes);
        let mut coords = Vec::with_capacity(raw.len());
        for &i in &order {
            coords.extend_from_slice(&raw[i * dim..(i + 1) * dim]);
        }
        Ok(BallTree { dim, coords, order, nodes })
    }

    pub fn nodes(&self) -> &[BallNode] {
        &self.nodes
    }

    pub fn root(&self) -> &BallNode {
        &self.nodes[0]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embedded coordinates and dataset index of every point under `node`.
    pub fn node_points<'a>(&'a self, node: &BallNode) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
        let dim = self.dim;
        (node.start..node.end).map(move |r| (self.order[r], &self.coords[r * dim..(r + 1) * dim]))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn build_node(
    raw: &[f64],
    dim: usize,
    order: &mut [usize],
    start: usize,
    end: usize,
    leaf_size: usize,
    nodes: &mut Vec<BallNode>,
) -> usize {
    let count = (end - start) as f64;
    let mut center = vec![0.0; dim];
    for &i in &order[start..end] {
        for (c, v) in center.iter_mut().zip(&raw[i * dim..(i + 1) * dim]) {
            *c += v;
        }
    }
    center.iter_mut().for_each(|c| *c /= count);
    let radius = order[start..end]
        .iter()
        .map(|&i| dist2(&center, &raw[i * dim..(i + 1) * dim]))
        .fold(0.0f64, f64::max)
        .sqrt();
    // Containment is checked against the stored float radius; nudge it so
    // rounding in the distance never leaves a point outside.
    let radius = radius * (1.0 + 4.0 * f64::EPSILON);
    let id = nodes.len();
    nodes.push(BallNode { center, radius, start, end, children: None });
    if end - start <= leaf_size {
        return id;
    }

    let mut best_dim = 0;
    let mut best_spread = -1.0;
    for d in 0..dim {
        let (lo, hi) = order[start..end].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = raw[i * dim + d];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best_spread {
            best_spread = hi - lo;
            best_dim = d;
        }
    }
    if best_spread <= 0.0 {
        // All points coincide; splitting cannot shrink the spheres.
        return id;
    }
    let mid = (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid, |&x, &y| {
        raw[x * dim + best_dim].total_cmp(&raw[y * dim + best_dim]).then(x.cmp(&y))
    });
    let left = build_node(raw, dim, order, start, start + mid, leaf_size, nodes);
    let right = build_node(raw, dim, order, start + mid, end, leaf_size, nodes);
    nodes[id].children = Some((left, right));
    id
}

/// Counters from one query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub leaf_evals: usize,
    pub nodes_visited: usize,
}

#[derive(PartialEq)]
struct Ranked {
    loss: f64,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.loss.total_cmp(&other.loss).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Pending {
    lower: f64,
    node: usize,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl Ord for Pending {
    // Reversed so the max-heap pops the smallest lower bound first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.lower.total_cmp(&self.lower).then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Projections `b̄` of the query state, computed once per query. With one
/// free coordinate the per-point work is two dot products and no allocation.
enum Projection<'a> {
    Scalar { col: Vec<f64>, qbar: f64, vbar: f64 },
    General { b: &'a NullCovector, qbar: Vector, vbar: Vector },
}

impl<'a> Projection<'a> {
    fn new(x0: &State, b: &'a NullCovector) -> Self {
        if b.free_dim() == 1 {
            let col: Vec<f64> = b.mat().column(0).iter().copied().collect();
            let dot = |v: &Vector| col.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            Projection::Scalar { qbar: dot(&x0.q), vbar: dot(&x0.qdot), col }
        } else {
            Projection::General { b, qbar: b.bar(&x0.q), vbar: b.bar(&x0.qdot) }
        }
    }

    fn reparam(&self, q_d: &[f64], qdot_d: &[f64], guard_tol: f64) -> Option<Reparam> {
        match self {
            Projection::Scalar { col, qbar, vbar } => {
                let dot = |v: &[f64]| -> f64 { col.iter().zip(v).map(|(a, b)| a * b).sum() };
                let (qbar_d, vbar_d) = (dot(q_d), dot(qdot_d));
                let denom = vbar_d * vbar;
                if !(denom.abs() > guard_tol) {
                    return None;
                }
                Some(Reparam { t0: vbar_d * (qbar_d - qbar) / denom, s: vbar_d * vbar_d / denom })
            }
            Projection::General { b, qbar, vbar } => {
                let q_d = Vector::from_column_slice(q_d);
                let qdot_d = Vector::from_column_slice(qdot_d);
                reparam_from_bars(qbar, vbar, &b.bar(&q_d), &b.bar(&qdot_d), guard_tol).ok()
            }
        }
    }

    fn candidate(&self, index: usize, xd: &State, omega: f64, s_g: f64, guard_tol: f64) -> Option<TargetCandidate> {
        let rep = self.reparam(xd.q.as_slice(), xd.qdot.as_slice(), guard_tol)?;
        Some(TargetCandidate { index, rep, loss: proximity_loss(rep.t0, rep.s, omega, s_g) })
    }
}

/// Recorded points plus their index.
#[derive(Debug, Clone)]
pub struct TargetStore {
    points: Vec<DataPoint>,
    tree: BallTree,
}

impl TargetStore {
    pub fn new(points: Vec<DataPoint>) -> Result<Self> {
        Self::with_leaf_size(points, LEAF_SIZE)
    }

    pub fn with_leaf_size(points: Vec<DataPoint>, leaf_size: usize) -> Result<Self> {
        let tree = BallTree::build(&points, leaf_size)?;
        Ok(TargetStore { points, tree })
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn tree(&self) -> &BallTree {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reparameterization and loss of one stored point, `None` when the
    /// point fails the velocity guard.
    pub fn evaluate(&self, index: usize, x0: &State, b: &NullCovector, omega: f64, s_g: f64, guard_tol: f64) -> Option<TargetCandidate> {
        Projection::new(x0, b).candidate(index, &self.points[index].x, omega, s_g, guard_tol)
    }

    /// Linear scan returning the `n_d` lowest-loss points, ties by index.
    pub fn query_brute_force(
        &self,
        x0: &State,
        b: &NullCovector,
        omega: f64,
        s_g: f64,
        n_d: usize,
        guard_tol: f64,
    ) -> Vec<TargetCandidate> {
        let proj = Projection::new(x0, b);
        let mut all: Vec<TargetCandidate> = self
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| proj.candidate(i, &p.x, omega, s_g, guard_tol))
            .collect();
        all.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
        all.truncate(n_d);
        all
    }

    /// The `n_d` lowest-loss points, sorted by loss then dataset index.
    ///
    /// Uses the ball tree when there is one free coordinate, otherwise a
    /// linear scan.
    pub fn query_candidates(
        &self,
        x0: &State,
        b: &NullCovector,
        omega: f64,
        s_g: f64,
        n_d: usize,
        guard_tol: f64,
    ) -> Result<(Vec<TargetCandidate>, QueryStats)> {
        if b.free_dim() != 1 {
            let out = self.query_brute_force(x0, b, omega, s_g, n_d, guard_tol);
            let stats = QueryStats { leaf_evals: self.points.len(), nodes_visited: 0 };
            return Ok((out, stats));
        }
        let ctx = QueryContext::new(x0, b, omega, s_g, guard_tol)?;
        let mut stats = QueryStats::default();
        if n_d == 0 {
            return Ok((Vec::new(), stats));
        }
        let proj = Projection::new(x0, b);
        let n = x0.dim();
        let a_norm = ctx.beta_xi.norm();
        let c_norm = ctx.beta_eta.norm();
        let nodes = self.tree.nodes();

        let mut best: BinaryHeap<Ranked> = BinaryHeap::with_capacity(n_d + 1);
        let mut upper_cap = f64::INFINITY;
        let mut frontier = BinaryHeap::new();
        let root_bounds = self.bounds_of(0, &ctx, a_norm, c_norm, n_d, &mut upper_cap);
        frontier.push(Pending { lower: root_bounds, node: 0 });

        while let Some(Pending { lower, node }) = frontier.pop() {
            let threshold = if best.len() == n_d { best.peek().map_or(f64::INFINITY, |r| r.loss) } else { f64::INFINITY };
            let threshold = threshold.min(upper_cap);
            if lower > threshold + 1e-12 * (1.0 + threshold) {
                break;
            }
            stats.nodes_visited += 1;
            let nd = &nodes[node];
            match nd.children {
                Some((l, r)) => {
                    for child in [l, r] {
                        let lo = self.bounds_of(child, &ctx, a_norm, c_norm, n_d, &mut upper_cap);
                        frontier.push(Pending { lower: lo, node: child });
                    }
                }
                None => {
                    for (index, coords) in self.tree.node_points(nd) {
                        stats.leaf_evals += 1;
                        let Some(rep) = proj.reparam(&coords[..n], &coords[n..], guard_tol) else { continue };
                        let cand = TargetCandidate { index, rep, loss: proximity_loss(rep.t0, rep.s, omega, s_g) };
                        best.push(Ranked { loss: cand.loss, index });
                        if best.len() > n_d {
                            best.pop();
                        }
                    }
                }
            }
        }

        let mut ranked = best.into_sorted_vec();
        ranked.truncate(n_d);
        let out = ranked
            .into_iter()
            .filter_map(|r| proj.candidate(r.index, &self.points[r.index].x, omega, s_g, guard_tol))
            .collect();
        Ok((out, stats))
    }

    /// Lower bound of `node`; tightens `upper_cap` when the whole node is
    /// guaranteed to hold at least `n_d` guard-passing points.
    fn bounds_of(&self, node: usize, ctx: &QueryContext, a: f64, c: f64, n_d: usize, upper_cap: &mut f64) -> f64 {
        let nd = &self.tree.nodes()[node];
        let n = ctx.beta_xi.len();
        let (a_xi, a_eta) = ctx.alphas(&nd.center[..n], &nd.center[n..]);
        let (lo, hi) = ellipse_bounds(a_xi, a_eta, a, c, nd.radius);
        if nd.len() >= n_d {
            let s_center = a_eta + ctx.s_g;
            let spread = c * nd.radius;
            let guard_free = s_center - spread > ctx.s_guard * 1.01 || s_center + spread < -ctx.s_guard * 1.01;
            if guard_free {
                *upper_cap = upper_cap.min(hi * (1.0 + 1e-9) + 1e-12);
            }
        }
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub n_links: usize,
    pub actuated_joints: Vec<usize>,
    pub dt: f64,
    #[serde(default)]
    pub n_episodes: usize,
}

pub const DATASET_FORMAT: &str = "cpc-dataset/1";

impl DatasetHeader {
    pub fn new(params: &ChainParams, dt: f64, n_episodes: usize) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            n_links: params.n_links,
            actuated_joints: params.actuated_joints.clone(),
            dt,
            n_episodes,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    t: f64,
    q: Vec<f64>,
    qdot: Vec<f64>,
    tau: Vec<f64>,
    #[serde(rename = "G")]
    g: f64,
    #[serde(default)]
    episode: usize,
}

/// Writes the header line followed by one JSON object per point.
pub fn write_dataset<W: Write>(mut w: W, header: &DatasetHeader, points: &[DataPoint]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for p in points {
        let rec = PointRecord {
            t: p.t,
            q: p.x.q.iter().copied().collect(),
            qdot: p.x.qdot.iter().copied().collect(),
            tau: p.tau.iter().copied().collect(),
            g: p.g,
            episode: p.episode,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, header: &DatasetHeader, points: &[DataPoint]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), header, points)
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(DatasetHeader, Vec<DataPoint>)> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or_else(|| Error::DatasetSchemaMismatch("missing header line".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::DatasetSchemaMismatch(format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::DatasetSchemaMismatch(format!("unknown format {:?}", header.format)));
    }
    let m = header.actuated_joints.len();
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PointRecord = serde_json::from_str(&line)
            .map_err(|e| Error::DatasetSchemaMismatch(format!("line {}: {e}", lineno + 2)))?;
        if rec.q.len() != header.n_links || rec.qdot.len() != header.n_links || rec.tau.len() != m {
            return Err(Error::DatasetSchemaMismatch(format!("line {}: wrong vector lengths", lineno + 2)));
        }
        let all_finite = rec.q.iter().chain(&rec.qdot).chain(&rec.tau).all(|v| v.is_finite());
        if !all_finite || !rec.g.is_finite() || !rec.t.is_finite() {
            return Err(Error::DatasetSchemaMismatch(format!("line {}: non-finite value", lineno + 2)));
        }
        points.push(DataPoint {
            t: rec.t,
            x: State::from_slices(&rec.q, &rec.qdot, rec.t),
            tau: Vector::from_vec(rec.tau),
            g: rec.g,
            episode: rec.episode,
        });
    }
    Ok((header, points))
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DataPoint>)> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkit::Mat;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(q: &[f64], v: &[f64], i: usize) -> DataPoint {
        DataPoint { t: i as f64, x: State::from_slices(q, v, i as f64), tau: Vector::zeros(1), g: 0.0, episode: 0 }
    }

    fn random_points(rng: &mut ChaCha8Rng, count: usize) -> Vec<DataPoint> {
        (0..count)
            .map(|i| {
                point(
                    &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    &[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                    i,
                )
            })
            .collect()
    }

    fn acrobot_b() -> NullCovector {
        NullCovector(Mat::from_column_slice(2, 1, &[-1.4, -1.0]))
    }

    #[test]
    fn proximity_loss_cases() {
        assert_eq!(proximity_loss(0.0, 1.0, 10.0, 1.0), 0.0);
        assert!((proximity_loss(0.1, 1.2, 10.0, 1.0) - 1.04).abs() < 1e-12);
        assert_eq!(proximity_loss(0.0, -1.0, 10.0, -1.0), 0.0);
    }

    #[test]
    fn build_cases() {
        assert!(matches!(BallTree::build(&[], LEAF_SIZE), Err(Error::EmptyDataset)));
        let single = BallTree::build(&[point(&[0.1, 0.2], &[0.3, 0.4], 0)], LEAF_SIZE).unwrap();
        assert_eq!(single.nodes().len(), 1);
        assert_eq!(single.root().radius, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 10_000);
        let tree = BallTree::build(&pts, LEAF_SIZE).unwrap();
        for node in tree.nodes() {
            if node.is_leaf() {
                assert!(node.len() <= LEAF_SIZE);
            }
            for (_, c) in tree.node_points(node) {
                assert!(dist2(c, &node.center).sqrt() <= node.radius);
            }
        }
        let again = BallTree::build(&pts, LEAF_SIZE).unwrap();
        assert_eq!(tree.order, again.order);
    }

    #[test]
    fn duplicates_are_distinct_candidates() {
        let pts: Vec<DataPoint> = (0..40).map(|i| point(&[0.1, 0.0], &[0.5, 0.2], i)).collect();
        let store = TargetStore::new(pts).unwrap();
        let x0 = State::from_slices(&[0.0, 0.0], &[0.3, 0.1], 0.0);
        let (c, _) = store.query_candidates(&x0, &acrobot_b(), 10.0, 1.0, 20, 1e-6).unwrap();
        assert_eq!(c.len(), 20);
        assert_eq!(c.iter().map(|c| c.index).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn ellipse_bound_cases() {
        // Centered at the minimizer.
        assert_eq!(ellipse_bounds(0.0, 0.0, 2.0, 1.0, 0.7).0, 0.0);
        let (lo, hi) = ellipse_bounds(0.3, -0.2, 2.0, 1.0, 0.0);
        assert_eq!((lo, hi), (0.13, 0.13));
        // Circle with a = c: distance from (−α) to the disk of radius aρ.
        let (lo, hi) = ellipse_bounds(3.0, 4.0, 1.0, 1.0, 1.0);
        assert!((lo - 16.0).abs() < 1e-12 && (hi - 36.0).abs() < 1e-12);
    }

    #[test]
    fn query_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = TargetStore::new(random_points(&mut rng, 3000)).unwrap();
        for _ in 0..100 {
            let x0 = State::from_slices(
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                &[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                0.0,
            );
            let b = NullCovector(Mat::from_column_slice(2, 1, &[rng.gen_range(-2.0..2.0), -1.0]));
            let s_g = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let Ok((got, stats)) = store.query_candidates(&x0, &b, 10.0, s_g, 20, 1e-6) else { continue };
            let want = store.query_brute_force(&x0, &b, 10.0, s_g, 20, 1e-6);
            assert_eq!(got, want);
            assert!(stats.leaf_evals <= store.len());
        }
    }

    #[test]
    fn n_d_larger_than_store_returns_all_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = TargetStore::new(random_points(&mut rng, 30)).unwrap();
        let x0 = State::from_slices(&[0.0, 0.0], &[0.5, 0.5], 0.0);
        let (c, _) = store.query_candidates(&x0, &acrobot_b(), 10.0, 1.0, 100, 1e-6).unwrap();
        assert_eq!(c.len(), 30);
        assert!(c.windows(2).all(|w| w[0].loss <= w[1].loss));
    }

    #[test]
    fn scalar_projection_matches_vector_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = acrobot_b();
        for _ in 0..1000 {
            let mut r = |n: usize| Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let x0 = State::new(r(2), r(2), 0.0);
            let xd = State::new(r(2), r(2), 0.0);
            let fast = Projection::new(&x0, &b).reparam(xd.q.as_slice(), xd.qdot.as_slice(), crate::control_law::GUARD_TOL);
            let slow = crate::control_law::reparam_params(&x0, &xd, &b, crate::control_law::GUARD_TOL).ok();
            match (fast, slow) {
                (Some(f), Some(s)) => {
                    assert!((f.t0 - s.t0).abs() <= 1e-12 * s.t0.abs().max(1.0));
                    assert!((f.s - s.s).abs() <= 1e-12 * s.s.abs().max(1.0));
                }
                (f, s) => assert_eq!(f.is_some(), s.is_some()),
            }
        }
    }

    #[test]
    fn query_context_rejects_still_state() {
        let x0 = State::from_slices(&[0.0, 0.0], &[0.0, 0.0], 0.0);
        assert!(matches!(
            QueryContext::new(&x0, &acrobot_b(), 10.0, 1.0, 1e-6),
            Err(Error::VelocityBarDegenerate { .. })
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = random_points(&mut rng, 5);
        pts[2].tau = Vector::from_vec(vec![0.1 + 0.2]);
        pts[3].g = -1.0 / 3.0;
        let header = DatasetHeader::new(&ChainParams::acrobot(), 0.01, 1);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &header, &pts).unwrap();
        let (h, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, pts);

        let bad = b"{\"format\":\"cpc-dataset/1\",\"n_links\":2,\"actuated_joints\":[1],\"dt\":0.01}\n{\"t\":0,\"q\":[0],\"qdot\":[0,0],\"tau\":[0],\"G\":0}\n";
        assert!(matches!(read_dataset(&bad[..]), Err(Error::DatasetSchemaMismatch(_))));
    }

    proptest! {
        #[test]
        fn bounds_sandwich_samples(
            axi in -3.0f64..3.0, aeta in -3.0f64..3.0,
            a in 0.0f64..5.0, c in 0.0f64..5.0, rho in 0.0f64..2.0, seed in 0u64..1000,
        ) {
            let (lo, hi) = ellipse_bounds(axi, aeta, a, c, rho);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let r = rho * rng.gen::<f64>().sqrt();
                let th = rng.gen_range(0.0..std::f64::consts::TAU);
                let u = axi + a * r * th.cos();
                let v = aeta + c * r * th.sin();
                let l = u * u + v * v;
                prop_assert!(l >= lo - 1e-9 && l <= hi + 1e-9, "{l} not in [{lo}, {hi}]");
            }
        }

        #[test]
        fn bounds_monotone_in_radius(
            axi in -3.0f64..3.0, aeta in -3.0f64..3.0,
            a in 0.0f64..5.0, c in 0.0f64..5.0, rho in 0.0f64..2.0, grow in 0.0f64..1.0,
        ) {
            let (lo1, hi1) = ellipse_bounds(axi, aeta, a, c, rho);
            let (lo2, hi2) = ellipse_bounds(axi, aeta, a, c, rho + grow);
            prop_assert!(lo2 <= lo1 + 1e-9 && hi2 >= hi1 - 1e-9);
        }
    }
}
