//! Acrobot experiments: recording falls from the upright position, balancing
//! with a controller built from those falls, sweeps over the number of falls,
//! and a fully actuated tracking demo.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control_law::{feedforward_tau, GainSpec};
use crate::controller::{controller_step, ControllerConfig, ControllerState};
use crate::dynamics::{Chain, ChainParams, Integrator, State};
use crate::error::{Error, Result};
use crate::mathkit::{self, Vector};
use crate::target_store::{DataPoint, DatasetHeader, TargetStore};

/// Human-readable statement of the fall test, written into result headers.
pub const FALL_CRITERION: &str = "fall when |q1| > pi/2 or |q1 + q2| > pi/2 (absolute link angle from vertical)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sigma0: f64,
    /// Points recorded per fall.
    pub fall_points: usize,
    /// Control and recording period.
    pub dt: f64,
    /// Physics steps per control period.
    pub substeps: usize,
    pub integrator: Integrator,
    pub t_max: f64,
    pub trials: usize,
    /// Disturbance standard deviation in units of `sigma0`.
    pub noise_mult: f64,
    pub n_falls: usize,
    pub n_f_list: Vec<usize>,
    pub seed: u64,
    pub chain: ChainParams,
    pub controller: ControllerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sigma0: 0.02,
            fall_points: 100,
            dt: 0.01,
            substeps: 10,
            integrator: Integrator::Rk4,
            t_max: 30.0,
            trials: 100,
            noise_mult: 6.0,
            n_falls: 100,
            n_f_list: vec![3, 10, 30, 100],
            seed: 0,
            chain: ChainParams::acrobot(),
            controller: ControllerConfig::acrobot(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        self.controller.validate()?;
        if !(self.dt > 0.0 && self.t_max > 0.0 && self.sigma0 >= 0.0 && self.noise_mult >= 0.0) {
            return Err(Error::InvalidParams("dt, t_max must be positive; sigma0, noise_mult non-negative".into()));
        }
        if self.trials == 0 || self.fall_points == 0 || self.substeps == 0 {
            return Err(Error::InvalidParams("trials, fall_points and substeps must be at least 1".into()));
        }
        if (self.controller.dt - self.dt).abs() > 1e-15 {
            return Err(Error::InvalidParams("controller.dt must equal dt".into()));
        }
        Ok(())
    }

    pub fn noise_amp(&self) -> f64 {
        self.noise_mult * self.sigma0
    }

    pub fn dataset_header(&self, n_episodes: usize) -> DatasetHeader {
        DatasetHeader::new(&self.chain, self.dt, n_episodes)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

/// Seed of one trial: a splitmix64 chain over the master seed, the FNV-1a
/// hash of the experiment id, and the trial index.
pub fn trial_seed(master: u64, experiment: &str, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ fnv1a(experiment)) ^ trial)
}

/// Independent stream within a trial (fall data, disturbance, bootstrap).
pub fn stream_seed(trial_seed: u64, stream: &str) -> u64 {
    splitmix64(trial_seed ^ fnv1a(stream))
}

/// Either link leaning more than a quarter turn from vertical.
pub fn has_fallen(q: &Vector) -> bool {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut phi = 0.0;
    q.iter().any(|qi| {
        phi += qi;
        phi.abs() > half_pi
    })
}

/// One control period with `tau` held over `substeps` physics steps.
pub fn advance(chain: &Chain, state: &State, tau: &Vector, cfg: &ExperimentConfig) -> Result<State> {
    let h = cfg.dt / cfg.substeps as f64;
    let mut s = state.clone();
    for _ in 0..cfg.substeps {
        s = chain.step(&s, tau, h, cfg.integrator)?;
    }
    s.t = state.t + cfg.dt;
    Ok(s)
}

/// Records `n_f` falls of `fall_points` samples each, starting from upright
/// rest under Gaussian torque noise of standard deviation `sigma0`.
pub fn generate_falls(cfg: &ExperimentConfig, n_f: usize, seed: u64) -> Result<Vec<DataPoint>> {
    if n_f == 0 {
        return Err(Error::InvalidParams("n_f must be at least 1".into()));
    }
    let chain = Chain::new(cfg.chain.clone())?;
    let noise = Normal::new(0.0, cfg.sigma0).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut out = Vec::with_capacity(n_f * cfg.fall_points);
    for episode in 0..n_f {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("fall/{episode}")));
        let mut s = State::at_rest(chain.n());
        for _ in 0..cfg.fall_points {
            let tau = Vector::from_fn(chain.m(), |_, _| noise.sample(&mut rng));
            out.push(DataPoint { t: s.t, x: s.clone(), tau: tau.clone(), g: 0.0, episode });
            s = advance(&chain, &s, &tau, cfg)?;
        }
    }
    Ok(out)
}

pub fn write_falls(path: &Path, cfg: &ExperimentConfig, n_f: usize, points: &[DataPoint]) -> Result<()> {
    crate::target_store::save_dataset(path, &cfg.dataset_header(n_f), points)
}

/// Outcome of one balance trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub n_f: usize,
    pub seed: u64,
    pub noise_multiplier: f64,
    /// Time of the fall, or `t_max` if none.
    pub t_f: f64,
    pub fell: bool,
}

/// Which policy drives the balance trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Cpc,
    /// Zero commanded torque; only the disturbance acts.
    Passive,
}

/// Simulates from upright rest with the controller's command plus a Gaussian
/// disturbance on the actuated joint(s) until the fall test fires or
/// `t_max` elapses. The bootstrap cycles count toward the elapsed time.
pub fn run_balance_trial(
    store: &TargetStore,
    cfg: &ExperimentConfig,
    noise_amp: f64,
    seed: u64,
    policy: Policy,
) -> Result<(f64, bool)> {
    let chain = Chain::new(cfg.chain.clone())?;
    if store.points().first().map(|p| p.x.dim()) != Some(chain.n()) {
        return Err(Error::DatasetSchemaMismatch("dataset does not match the chain".into()));
    }
    let noise = Normal::new(0.0, noise_amp).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "disturbance"));
    let mut ctrl = ControllerState::new(chain.m(), stream_seed(seed, "bootstrap"));
    let steps = (cfg.t_max / cfg.dt).round() as usize;
    let mut s = State::at_rest(chain.n());
    for i in 0..steps {
        let cmd = match policy {
            Policy::Cpc => controller_step(&mut ctrl, &s, store, &cfg.controller),
            Policy::Passive => Vector::zeros(chain.m()),
        };
        let tau = cmd + Vector::from_fn(chain.m(), |_, _| noise.sample(&mut rng));
        s = match advance(&chain, &s, &tau, cfg) {
            Ok(next) => next,
            Err(Error::NonFiniteState { .. }) => return Ok(((i + 1) as f64 * cfg.dt, true)),
            Err(e) => return Err(e),
        };
        if has_fallen(&s.q) {
            return Ok(((i + 1) as f64 * cfg.dt, true));
        }
    }
    Ok((cfg.t_max, false))
}

/// Fresh fall data plus one balance trial, all drawn from `seed`.
pub fn resampled_trial(cfg: &ExperimentConfig, n_f: usize, trial_id: usize, seed: u64) -> Result<TrialRecord> {
    let points = generate_falls(cfg, n_f, stream_seed(seed, "falls"))?;
    let store = TargetStore::new(points)?;
    let (t_f, fell) = run_balance_trial(&store, cfg, cfg.noise_amp(), seed, Policy::Cpc)?;
    Ok(TrialRecord { trial_id, n_f, seed, noise_multiplier: cfg.noise_mult, t_f, fell })
}

/// `trials` resampled trials at one `n_f`, sorted by trial id.
pub fn run_trials(cfg: &ExperimentConfig, n_f: usize, experiment: &str) -> Result<Vec<TrialRecord>> {
    let mut out: Vec<TrialRecord> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| resampled_trial(cfg, n_f, i, trial_seed(cfg.seed, experiment, i as u64)))
        .collect::<Result<_>>()?;
    out.sort_by_key(|r| r.trial_id);
    Ok(out)
}

/// Trials at every `n_f` of the sweep, grouped by `n_f`.
pub fn sweep_nf(cfg: &ExperimentConfig) -> Result<Vec<(usize, Vec<TrialRecord>)>> {
    if cfg.n_f_list.is_empty() {
        return Err(Error::InvalidParams("n_f list is empty".into()));
    }
    cfg.n_f_list.iter().map(|&n_f| Ok((n_f, run_trials(cfg, n_f, &format!("sweep/nf={n_f}"))?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean_t_f: f64,
    /// `(T_max − ⟨t_f⟩)/T_max`.
    pub unstable_fraction: f64,
    pub survived_fraction: f64,
}

pub fn summarize(records: &[TrialRecord], t_max: f64) -> Summary {
    let n = records.len().max(1) as f64;
    let mean_t_f = records.iter().map(|r| r.t_f).sum::<f64>() / n;
    let survived = records.iter().filter(|r| !r.fell).count() as f64 / n;
    Summary { mean_t_f, unstable_fraction: (t_max - mean_t_f) / t_max, survived_fraction: survived }
}

/// Writes trial rows and one `mean` row per `n_f`, preceded by `#` comments
/// with the fall criterion and the unstable fraction per group.
pub fn write_trials_csv<W: Write>(mut w: W, cfg: &ExperimentConfig, groups: &[(usize, Vec<TrialRecord>)]) -> Result<()> {
    writeln!(w, "# {FALL_CRITERION}")?;
    writeln!(w, "# t_max = {} s, noise = {} x sigma0 (sigma0 = {}), master seed = {}", cfg.t_max, cfg.noise_mult, cfg.sigma0, cfg.seed)?;
    for (n_f, records) in groups {
        let s = summarize(records, cfg.t_max);
        writeln!(w, "# n_f = {n_f}: mean t_f = {}, unstable fraction = {}", s.mean_t_f, s.unstable_fraction)?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["n_f", "trial_id", "seed", "t_f"])?;
    for (n_f, records) in groups {
        for r in records {
            csv.write_record([n_f.to_string(), r.trial_id.to_string(), r.seed.to_string(), r.t_f.to_string()])?;
        }
        let s = summarize(records, cfg.t_max);
        csv.write_record([n_f.to_string(), "mean".to_string(), String::new(), s.mean_t_f.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

/// Parses rows written by [`write_trials_csv`]; summary rows are skipped.
pub fn read_trials_csv<R: std::io::Read>(r: R) -> Result<Vec<(usize, usize, u64, f64)>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        if &row[1] == "mean" {
            continue;
        }
        let parse = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|e| Error::InvalidParams(format!("bad csv field {}: {e}", &row[i])))
        };
        let int = |i: usize| -> Result<u64> {
            row[i].parse::<u64>().map_err(|e| Error::InvalidParams(format!("bad csv field {}: {e}", &row[i])))
        };
        out.push((int(0)? as usize, int(1)? as usize, int(2)?, parse(3)?));
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        // A constant series carries no ordering information.
        return if vx == vy { 1.0 } else { 0.0 };
    }
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub dt: f64,
    pub duration: f64,
    pub kappa: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub perturbation: f64,
    /// Length of the transient window compared to the envelope, in units of `1/κ`.
    pub transient_window: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            dt: 1e-3,
            duration: 10.0,
            kappa: 20.0,
            amplitude: 0.5,
            frequency: 1.0,
            perturbation: 0.1,
            transient_window: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackReport {
    /// Largest `‖q − q_d‖` when starting on the reference.
    pub on_reference_max_error: f64,
    /// Largest `|‖Δq(t)‖ − envelope(t)|` over the transient, relative to `‖Δq(0)‖`.
    pub envelope_max_rel_dev: f64,
    pub zero_gain_initial_error: f64,
    pub zero_gain_final_error: f64,
}

/// Reference `q_d(t) = A sin(ωt + phase_j)` for each joint.
fn reference(cfg: &TrackConfig, n: usize, t: f64) -> (Vector, Vector, Vector) {
    let w = cfg.frequency;
    let phase = |j: usize| 0.7 * j as f64;
    let q = Vector::from_fn(n, |j, _| cfg.amplitude * (w * t + phase(j)).sin());
    let v = Vector::from_fn(n, |j, _| cfg.amplitude * w * (w * t + phase(j)).cos());
    let a = Vector::from_fn(n, |j, _| -cfg.amplitude * w * w * (w * t + phase(j)).sin());
    (q, v, a)
}

/// Tracking torque `τ_ff + τ_fb` with the critically damped error law.
fn tracking_tau(chain: &Chain, cfg: &TrackConfig, gain: Option<GainSpec>, t: f64, q: &Vector, v: &Vector) -> Result<Vector> {
    let (qd, vd, ad) = reference(cfg, chain.n(), t);
    let u = match gain {
        Some(g) => ad - (q - qd) * g.k - (v - vd) * (2.0 * g.kappa()),
        None => ad,
    };
    feedforward_tau(chain, q, v, &u)
}

fn closed_loop_step(chain: &Chain, cfg: &TrackConfig, gain: Option<GainSpec>, s: &State, h: f64) -> Result<State> {
    chain.step_closed_loop(s, h, |t, q, v| tracking_tau(chain, cfg, gain, t, q, v))
}

/// Fully actuated two-link tracking of a sinusoid.
pub fn track_demo(cfg: &TrackConfig) -> Result<TrackReport> {
    let chain = Chain::new(ChainParams::fully_actuated(2))?;
    let n = chain.n();
    let gain = GainSpec::new(cfg.kappa * cfg.kappa)?;
    let steps = (cfg.duration / cfg.dt).round() as usize;

    let (q0, v0, _) = reference(cfg, n, 0.0);
    let mut s = State::new(q0.clone(), v0.clone(), 0.0);
    let mut on_ref: f64 = 0.0;
    for _ in 0..steps {
        s = closed_loop_step(&chain, cfg, Some(gain), &s, cfg.dt)?;
        let (qd, _, _) = reference(cfg, n, s.t);
        on_ref = on_ref.max((&s.q - qd).norm());
    }

    let offset = Vector::from_element(n, cfg.perturbation);
    let e0 = offset.norm();
    let mut s = State::new(&q0 + &offset, v0.clone(), 0.0);
    let window = (cfg.transient_window / cfg.kappa / cfg.dt).round() as usize;
    let mut dev: f64 = 0.0;
    for _ in 0..window {
        s = closed_loop_step(&chain, cfg, Some(gain), &s, cfg.dt)?;
        let (qd, _, _) = reference(cfg, n, s.t);
        let err = (&s.q - qd).norm();
        let kt = cfg.kappa * s.t;
        let envelope = (1.0 + kt) * (-kt).exp() * e0;
        dev = dev.max((err - envelope).abs() / e0);
        // Cross-check against the matrix exponential of the error oscillator.
        debug_assert!({
            let m = mathkit::expm_crit_damped(cfg.kappa, s.t);
            ((m[(0, 0)] * e0) - envelope).abs() < 1e-9
        });
    }

    let mut s = State::new(&q0 + &offset, &v0 + &offset, 0.0);
    for _ in 0..steps {
        s = closed_loop_step(&chain, cfg, None, &s, cfg.dt)?;
    }
    let (qd, _, _) = reference(cfg, n, s.t);
    Ok(TrackReport {
        on_reference_max_error: on_ref,
        envelope_max_rel_dev: dev,
        zero_gain_initial_error: e0,
        zero_gain_final_error: (&s.q - qd).norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = trial_seed(1, "sweep/nf=3", 0);
        assert_eq!(a, trial_seed(1, "sweep/nf=3", 0));
        assert_ne!(a, trial_seed(1, "sweep/nf=3", 1));
        assert_ne!(a, trial_seed(1, "sweep/nf=10", 0));
        assert_ne!(a, trial_seed(2, "sweep/nf=3", 0));
        assert_ne!(stream_seed(a, "falls"), stream_seed(a, "disturbance"));
    }

    #[test]
    fn fall_criterion() {
        assert!(!has_fallen(&Vector::from_vec(vec![0.3, -0.2])));
        assert!(has_fallen(&Vector::from_vec(vec![1.6, -0.2])));
        assert!(has_fallen(&Vector::from_vec(vec![1.0, 0.6])));
        assert!(!has_fallen(&Vector::from_vec(vec![1.5, -2.5])));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 6.0, 7.0]) - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn falls_start_upright_and_are_deterministic() {
        let cfg = ExperimentConfig::default();
        let a = generate_falls(&cfg, 2, 9).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a[0].x, State::at_rest(2));
        assert_eq!(a[100].x, State::at_rest(2));
        assert_eq!(a[150].episode, 1);
        assert!(a.iter().all(|p| p.g == 0.0));
        assert_eq!(a, generate_falls(&cfg, 2, 9).unwrap());
        assert_ne!(a, generate_falls(&cfg, 2, 10).unwrap());
    }
}
