//! Release acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line and then asserts it. The balancing criteria (1 to 3) run thousands of
//! closed-loop trials and dominate the runtime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpc::control_law::CpcFrame;
use cpc::dynamics::{Chain, Integrator, State};
use cpc::experiment::{
    generate_falls, read_trials_csv, run_trials, spearman, summarize, sweep_nf, track_demo, write_trials_csv,
    ExperimentConfig, TrackConfig,
};
use cpc::mathkit::Vector;
use cpc::target_store::{write_dataset, TargetStore};
use cpc::verify;

const MASTER_SEED: u64 = 2024;

fn report(n: usize, passed: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_balance_from_hundred_falls() {
    let cfg = ExperimentConfig { n_falls: 100, noise_mult: 6.0, seed: MASTER_SEED, ..ExperimentConfig::default() };
    let records = run_trials(&cfg, cfg.n_falls, "acceptance/1").unwrap();
    let s = summarize(&records, cfg.t_max);
    report(
        1,
        s.mean_t_f >= 24.0 && s.unstable_fraction <= 0.2,
        format!(
            "N_f = 100, 6 sigma0, {} trials: mean t_f = {:.2} s (want >= 24), unstable fraction = {:.3} (want <= 0.2)",
            records.len(),
            s.mean_t_f,
            s.unstable_fraction
        ),
    );
}

#[test]
fn criterion_02_small_data_stability() {
    let cfg = ExperimentConfig { n_falls: 10, noise_mult: 1.0, seed: MASTER_SEED, ..ExperimentConfig::default() };
    let records = run_trials(&cfg, cfg.n_falls, "acceptance/2").unwrap();
    let s = summarize(&records, cfg.t_max);
    report(
        2,
        s.survived_fraction >= 0.7,
        format!(
            "N_f = 10, 1 sigma0: {:.0}% of {} trials reach 30 s (want >= 70%), mean t_f = {:.2} s",
            100.0 * s.survived_fraction,
            records.len(),
            s.mean_t_f
        ),
    );
}

#[test]
fn criterion_03_fall_time_trend() {
    let mut n_f = Vec::new();
    let mut means = Vec::new();
    let mut per_sweep = Vec::new();
    for sweep in 0..5u64 {
        let cfg = ExperimentConfig { seed: MASTER_SEED + sweep, ..ExperimentConfig::default() };
        let groups = sweep_nf(&cfg).unwrap();
        let row: Vec<f64> = groups.iter().map(|(_, r)| summarize(r, cfg.t_max).mean_t_f).collect();
        for (k, (nf, _)) in groups.iter().enumerate() {
            n_f.push(*nf as f64);
            means.push(row[k]);
        }
        per_sweep.push(row);
    }
    let rho = spearman(&n_f, &means);
    let table: Vec<String> = per_sweep.iter().map(|r| format!("{r:.2?}")).collect();
    report(
        3,
        rho >= 0.8,
        format!("pooled Spearman rho over 5 sweeps of N_f = [3, 10, 30, 100] is {rho:.3} (want >= 0.8); means {}", table.join(" ")),
    );
}

#[test]
fn criterion_04_search_exactness() {
    let cfg = ExperimentConfig::default();
    let c = &cfg.controller;
    let points = generate_falls(&cfg, 100, MASTER_SEED).unwrap();
    let (mut lo, mut hi) = ([f64::INFINITY; 4], [f64::NEG_INFINITY; 4]);
    for p in &points {
        for (i, v) in p.x.q.iter().chain(p.x.qdot.iter()).enumerate() {
            lo[i] = lo[i].min(*v);
            hi[i] = hi[i].max(*v);
        }
    }
    let store = TargetStore::new(points).unwrap();
    let chain = Chain::acrobot();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let (mut queries, mut mismatches, mut evals) = (0usize, 0usize, 0usize);
    while queries < 1000 {
        let v: Vec<f64> = (0..4).map(|i| rng.gen_range(lo[i]..hi[i])).collect();
        let x = State::from_slices(&v[..2], &v[2..], 0.0);
        let frame = CpcFrame::new(chain.exact_control_matrix(&x.q)).unwrap();
        let Ok((tree, stats)) = store.query_candidates(&x, &frame.null, c.omega, c.s_g, c.n_d, c.guard_tol) else { continue };
        let brute = store.query_brute_force(&x, &frame.null, c.omega, c.s_g, c.n_d, c.guard_tol);
        let mut a: Vec<usize> = tree.iter().map(|t| t.index).collect();
        let mut b: Vec<usize> = brute.iter().map(|t| t.index).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            mismatches += 1;
        }
        evals += stats.leaf_evals;
        queries += 1;
    }
    let ratio = evals as f64 / (queries * store.len()) as f64;
    report(
        4,
        mismatches == 0 && ratio <= 0.3,
        format!(
            "{queries} random queries over {} fall points: {mismatches} mismatches, leaf evaluations {:.1}% of brute force (want <= 30%)",
            store.len(),
            100.0 * ratio
        ),
    );
}

#[test]
fn criterion_05_bound_soundness() {
    let r = verify::bounds_sandwich(1000, 1000, MASTER_SEED, false, 1e-9);
    report(5, r.violations == 0, format!("{} violations in {} x {} samples, worst excess {:.2e}", r.violations, r.pairs, r.samples, r.worst));
}

#[test]
fn criterion_06_transient_value_quadrature() {
    let worst = verify::transient_value_vs_quadrature(100, MASTER_SEED).unwrap();
    report(6, worst <= 1e-3, format!("100 instances, max relative error {worst:.2e} (want <= 1e-3)"));
}

#[test]
fn criterion_07_path_convergence() {
    let chain = Chain::acrobot();
    let slopes: Vec<f64> = verify::convergence_cases()
        .iter()
        .map(|(xd, kick)| verify::slope_of(&verify::convergence_sweep(&chain, xd, kick, &verify::CONVERGENCE_EPSILONS).unwrap()))
        .collect();
    report(7, slopes.iter().all(|s| (s - 1.0).abs() <= 0.3), format!("path error after 5 eps, log-log slopes {slopes:.3?} (want 1.0 +- 0.3)"));
}

#[test]
fn criterion_08_coordinate_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let slopes: Vec<f64> = (0..50)
        .map(|_| {
            let case = verify::InvarianceCase::random(&mut rng);
            verify::slope_of(&verify::invariance_sweep(&case, &verify::EPSILONS).unwrap())
        })
        .collect();
    let (lo, hi) = slopes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    report(8, slopes.iter().all(|s| (s - 1.0).abs() <= 0.3), format!("50 random maps, slopes in [{lo:.3}, {hi:.3}] (want 1.0 +- 0.3)"));
}

#[test]
fn criterion_09_zero_dynamics_correspondence() {
    let mut records = verify::SweepRecords::default();
    let r = verify::correspondence_suite(&mut records).unwrap();
    report(9, r.passed, r.detail);
}

#[test]
fn criterion_10_dynamics_validity() {
    let chain = Chain::acrobot();
    let mut s = State::from_slices(&[2.5, -1.0], &[0.3, 0.0], 0.0);
    let e0 = chain.energy(&s);
    let zero = Vector::zeros(1);
    let mut drift: f64 = 0.0;
    for _ in 0..10_000 {
        s = chain.step(&s, &zero, 1e-3, Integrator::Rk4).unwrap();
        drift = drift.max(((chain.energy(&s) - e0) / e0).abs());
    }
    let track = track_demo(&TrackConfig::default()).unwrap();
    report(
        10,
        drift < 1e-6 && track.envelope_max_rel_dev <= 0.02 && track.on_reference_max_error < 1e-6,
        format!(
            "energy drift {drift:.2e} over 10 s (want < 1e-6); envelope deviation {:.3}% (want <= 2%); on-reference error {:.2e}",
            100.0 * track.envelope_max_rel_dev,
            track.on_reference_max_error
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let cfg = ExperimentConfig { trials: 4, t_max: 2.0, seed: MASTER_SEED, ..ExperimentConfig::default() };
    let dataset = || {
        let points = generate_falls(&cfg, 5, MASTER_SEED).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &cfg.dataset_header(5), &points).unwrap();
        buf
    };
    let trials = || {
        let groups = vec![(3, run_trials(&cfg, 3, "acceptance/11").unwrap())];
        let mut buf = Vec::new();
        write_trials_csv(&mut buf, &cfg, &groups).unwrap();
        (groups, buf)
    };
    let same_dataset = dataset() == dataset();
    let ((groups, csv_a), (_, csv_b)) = (trials(), trials());
    let rows = read_trials_csv(csv_a.as_slice()).unwrap();
    let round_trip = rows.len() == groups[0].1.len()
        && rows.iter().zip(&groups[0].1).all(|(row, rec)| row.3.to_bits() == rec.t_f.to_bits() && row.2 == rec.seed);
    report(
        11,
        same_dataset && csv_a == csv_b && round_trip,
        format!("identical datasets: {same_dataset}; identical trial CSV: {}; lossless t_f round trip: {round_trip}", csv_a == csv_b),
    );
}
