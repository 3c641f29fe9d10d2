//! Desk-scale experiments: heterogeneity sweep, peak-power profile and grouped
//! disaggregation, plus random sampling of points in an inner approximation.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disaggregation::Disaggregator;
use crate::error::{Error, Result};
use crate::ev::{sample, SampleConfig, Scenario};
use crate::inner::{self, InnerMethod, TransformResult};
use crate::lp::{self, LinExpr, LinearProgram, LpStatus, Objective};
use crate::outer::{self, OuterResult};
use crate::polytope::{add_membership_rows, log_abs_det, max_violation, support_point, BaseSet};

pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_TRIALS: usize = 20;

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub n: usize,
    pub horizon: usize,
    pub delta: f64,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub epsilon: f64,
}

impl SweepConfig {
    pub fn new(n: usize, horizon: usize, delta: f64, seed: u64) -> Self {
        SweepConfig {
            n,
            horizon,
            delta,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            trials: DEFAULT_TRIALS,
            seed,
            epsilon: outer::DEFAULT_EPSILON,
        }
    }
}

/// Methods compared in the sweep. The affine column is computed with the
/// decomposed solver, which reaches the same optimum.
pub const SWEEP_METHODS: [(&str, InnerMethod); 3] = [
    ("structure", InnerMethod::Structure),
    ("affine", InnerMethod::Decomposed),
    ("homothet", InnerMethod::Homothet),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    /// Singular inner map; counted with ratio 0.
    Singular,
    /// Solver or sampling failure; excluded from the statistics.
    Failed,
}

impl TrialStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::Singular => "singular",
            TrialStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub trial: usize,
    pub method: &'static str,
    /// `α` for the scalar methods, the trace objective for the affine one.
    pub alpha_or_trace: f64,
    pub logdet_inner: f64,
    pub logdet_outer: f64,
    pub ratio: f64,
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub sigma: f64,
    pub method: &'static str,
    pub mean: f64,
    pub stderr: f64,
    pub valid: usize,
    pub singular: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

fn trial_seed(seed: u64, sigma_idx: usize, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((sigma_idx as u64) << 32 | trial as u64)
}

fn run_trial(cfg: &SweepConfig, sigma: f64, seed: u64, trial: usize) -> Vec<SweepRow> {
    let failed = |method| SweepRow {
        sigma,
        trial,
        method,
        alpha_or_trace: f64::NAN,
        logdet_inner: f64::NAN,
        logdet_outer: f64::NAN,
        ratio: f64::NAN,
        status: TrialStatus::Failed,
    };
    let scen = match sample(&SampleConfig::new(cfg.n, cfg.horizon, cfg.delta, sigma, seed).homogenized(true)) {
        Ok(s) => s,
        Err(_) => return SWEEP_METHODS.iter().map(|(m, _)| failed(*m)).collect(),
    };
    let outer = outer::solve(outer::OuterMethod::Lp, &scen.models, &scen.base, cfg.epsilon);
    let logdet_outer = match &outer {
        Ok(o) => {
            let (s, l) = log_abs_det(&o.q_map);
            if s == 0 { f64::NAN } else { l }
        }
        Err(_) => f64::NAN,
    };
    SWEEP_METHODS
        .iter()
        .map(|&(name, method)| {
            let Ok(r) = inner::solve(method, &scen.models, &scen.base) else {
                return failed(name);
            };
            let (sign, logdet_inner) = log_abs_det(&r.map);
            let mut row = SweepRow {
                sigma,
                trial,
                method: name,
                alpha_or_trace: r.objective,
                logdet_inner,
                logdet_outer,
                ratio: f64::NAN,
                status: TrialStatus::Failed,
            };
            if logdet_outer.is_nan() {
                return row;
            }
            if sign == 0 {
                row.logdet_inner = f64::NEG_INFINITY;
                row.ratio = 0.0;
                row.status = TrialStatus::Singular;
            } else {
                row.ratio = (logdet_inner - logdet_outer).exp();
                row.status = TrialStatus::Ok;
            }
            row
        })
        .collect()
}

/// Volume ratios of each inner method against the LP outer approximation over
/// a grid of heterogeneity levels, with homogenized plug-in windows.
pub fn heterogeneity_sweep(cfg: &SweepConfig) -> Result<SweepTable> {
    if cfg.n == 0 || cfg.horizon == 0 || cfg.trials == 0 || !(cfg.delta > 0.0) {
        return Err(Error::Invalid("sweep needs n, T, trials > 0 and delta > 0".into()));
    }
    if cfg.sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Invalid("sigma must lie in [0, 1]".into()));
    }
    let jobs: Vec<(usize, usize)> =
        (0..cfg.sigmas.len()).flat_map(|s| (0..cfg.trials).map(move |t| (s, t))).collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(s, t)| run_trial(cfg, cfg.sigmas[s], trial_seed(cfg.seed, s, t), t))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut summary = Vec::new();
    for &sigma in &cfg.sigmas {
        for (name, _) in SWEEP_METHODS {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.sigma == sigma && r.method == name).collect();
            let vals: Vec<f64> = group.iter().filter(|r| r.status != TrialStatus::Failed).map(|r| r.ratio).collect();
            let (mean, stderr) = mean_stderr(&vals);
            summary.push(SweepSummary {
                sigma,
                method: name,
                mean,
                stderr,
                valid: vals.len(),
                singular: group.iter().filter(|r| r.status == TrialStatus::Singular).count(),
                failed: group.iter().filter(|r| r.status == TrialStatus::Failed).count(),
            });
        }
    }
    Ok(SweepTable { rows, summary })
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,trial,method,alpha_or_trace,logdet_inner,logdet_outer,ratio,status\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.sigma,
                r.trial,
                r.method,
                r.alpha_or_trace,
                r.logdet_inner,
                r.logdet_outer,
                r.ratio,
                r.status.as_str()
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("sigma,method,mean_ratio,stderr,valid,singular,failed\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.sigma, s.method, s.mean, s.stderr, s.valid, s.singular, s.failed
            );
        }
        out
    }

    pub fn mean(&self, sigma: f64, method: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.sigma == sigma && s.method == method).map(|s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakProfile {
    pub u: DVector<f64>,
    pub base_point: DVector<f64>,
    pub peak: f64,
}

/// Minimizes `‖u‖_∞` over `u = center + map·u₀`, `u₀ ∈ U₀`.
pub fn peak_power_profile(result: &TransformResult, base: &BaseSet) -> Result<PeakProfile> {
    let t = result.horizon();
    if base.horizon != t {
        return Err(Error::Dimension("result and base set horizons differ".into()));
    }
    let mut lp = LinearProgram::new(Objective::Minimize);
    let u0 = lp.free_block("u0", t, 1);
    let peak = lp.nonneg_block("peak", 1, 1).get(0);
    lp.set_cost(peak, 1.0);
    add_membership_rows(&mut lp, &base.polytope, |j| LinExpr::var(u0.get(j)));
    for i in 0..t {
        let mut e = LinExpr::constant(result.center[i]);
        for j in 0..t {
            e.add(u0.get(j), result.map[(i, j)]);
        }
        let mut up = e.clone();
        up.add(peak, -1.0);
        lp.add_le(up, 0.0);
        let mut down = LinExpr::new();
        down.add_expr(&e, -1.0).add(peak, -1.0);
        lp.add_le(down, 0.0);
    }
    let sol = lp::solve_lp(&lp, lp::default_tol());
    if sol.status != LpStatus::Optimal {
        return Err(Error::solver("peak power profile", sol.status));
    }
    let base_point = DVector::from_vec(sol.block_vec(&u0));
    let u = &result.center + &result.map * &base_point;
    let peak = u.amax();
    Ok(PeakProfile { u, base_point, peak })
}

/// Disaggregates `u`, orders resources by arrival period and sums consecutive
/// groups of `group_size`. The last group is smaller when `group_size` does not
/// divide the population.
pub fn group_disaggregation(
    scenario: &Scenario,
    result: &TransformResult,
    u: &DVector<f64>,
    group_size: usize,
    tol: f64,
) -> Result<Vec<DVector<f64>>> {
    if group_size == 0 {
        return Err(Error::Invalid("group size must be positive".into()));
    }
    let parts = Disaggregator::new(result, &scenario.base)?.split(u, tol)?;
    let mut order: Vec<usize> = (0..parts.len()).collect();
    if scenario.params.len() == parts.len() {
        order.sort_by_key(|&i| scenario.params[i].a);
    }
    Ok(order
        .chunks(group_size)
        .map(|chunk| chunk.iter().fold(DVector::zeros(u.len()), |acc, &i| acc + &parts[i]))
        .collect())
}

/// Peak-demo table: period, aggregate power, aggregate net energy and one
/// column per group.
pub fn peak_demo_csv(u: &DVector<f64>, delta: f64, groups: &[DVector<f64>]) -> String {
    let mut out = String::from("period,aggregate_u,aggregate_x");
    for g in 1..=groups.len() {
        let _ = write!(out, ",group_{g}");
    }
    out.push('\n');
    let mut energy = 0.0;
    for k in 0..u.len() {
        energy += delta * u[k];
        let _ = write!(out, "{k},{},{energy}", u[k]);
        for g in groups {
            let _ = write!(out, ",{}", g[k]);
        }
        out.push('\n');
    }
    out
}

/// Random points of `U₀` as convex combinations of support points in random directions.
pub fn sample_base_points(base: &BaseSet, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let t = base.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(2 * t + 8);
    for k in 0..t {
        for s in [1.0, -1.0] {
            let mut c = DVector::zeros(t);
            c[k] = s;
            pool.push(support_point(&base.polytope, &c)?);
        }
    }
    for _ in 0..8 {
        let c = DVector::from_fn(t, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        pool.push(support_point(&base.polytope, &c)?);
    }
    Ok((0..count)
        .map(|_| {
            let k = rng.random_range(1..=pool.len().min(4));
            let mut p = DVector::zeros(t);
            let mut total = 0.0;
            for _ in 0..k {
                let w = -(1.0 - rng.random::<f64>()).ln();
                p += &pool[rng.random_range(0..pool.len())] * w;
                total += w;
            }
            p / total
        })
        .collect())
}

/// Random points of an inner approximation, as images of random base points.
pub fn sample_inner_points(
    result: &TransformResult,
    base: &BaseSet,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    Ok(sample_base_points(base, count, seed)?.into_iter().map(|p| &result.center + &result.map * p).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    /// Largest `max(Hu_i − h_i)` over all disaggregated profiles.
    pub max_violation: f64,
    /// Largest `‖Σu_i − u‖_∞`.
    pub max_sum_error: f64,
    pub failures: usize,
}

/// Disaggregates `samples` random points of the inner approximation and
/// measures the worst individual constraint violation.
pub fn validate_disaggregation(
    scenario: &Scenario,
    result: &TransformResult,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<ValidationReport> {
    if result.per_set.len() != scenario.len() {
        return Err(Error::Dimension("result and scenario population sizes differ".into()));
    }
    let d = Disaggregator::new(result, &scenario.base)?;
    let sets: Vec<_> = scenario.models.iter().map(crate::polytope::battery_to_hpolytope).collect();
    let mut report = ValidationReport { samples, max_violation: 0.0, max_sum_error: 0.0, failures: 0 };
    for u in sample_inner_points(result, &scenario.base, samples, seed)? {
        match d.split(&u, tol) {
            Ok(parts) => {
                let total = parts.iter().fold(DVector::zeros(u.len()), |acc, p| acc + p);
                report.max_sum_error = report.max_sum_error.max((total - &u).amax());
                for (p, set) in parts.iter().zip(&sets) {
                    report.max_violation = report.max_violation.max(max_violation(set, p));
                }
            }
            Err(e) if e.is_solver_failure() => return Err(e),
            Err(_) => report.failures += 1,
        }
    }
    Ok(report)
}

/// Ratio of an inner result against an outer one.
pub fn ratio_of(inner: &TransformResult, outer: &OuterResult) -> Result<f64> {
    crate::polytope::volume_ratio(&inner.map, &outer.q_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::{solve_structure_preserving, SetTransform};
    use crate::polytope::{build_base_set, BatteryModel};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn boxed(lo: f64, hi: f64, t: usize) -> BatteryModel {
        BatteryModel {
            u_lo: vec![lo; t],
            u_hi: vec![hi; t],
            x_lo: vec![-1e3; t],
            x_hi: vec![1e3; t],
            delta: 1.0,
        }
    }

    fn box_result(lo: f64, hi: f64, t: usize) -> (TransformResult, BaseSet) {
        let base = build_base_set(&[boxed(lo, hi, t)]).unwrap();
        let r = TransformResult {
            center: DVector::zeros(t),
            map: DMatrix::identity(t, t),
            per_set: vec![SetTransform { gamma: DVector::zeros(t), gamma_map: DMatrix::identity(t, t), certificate: None }],
            objective: 1.0,
            method: InnerMethod::Structure,
        };
        (r, base)
    }

    #[test]
    fn peak_zero_when_origin_is_feasible() {
        let (r, base) = box_result(-1.0, 2.0, 4);
        let p = peak_power_profile(&r, &base).unwrap();
        assert!(p.peak < 1e-7);
    }

    #[test]
    fn peak_at_lower_corner() {
        let (r, base) = box_result(2.0, 3.0, 3);
        let p = peak_power_profile(&r, &base).unwrap();
        assert_relative_eq!(p.peak, 2.0, epsilon = 1e-6);
        assert_relative_eq!(p.u, DVector::from_element(3, 2.0), epsilon = 1e-6);
    }

    #[test]
    fn peak_beats_random_points() {
        let models = vec![boxed(-1.0, 3.0, 3), boxed(0.5, 1.0, 3)];
        let base = build_base_set(&models).unwrap();
        let r = solve_structure_preserving(&models, &base).unwrap();
        let p = peak_power_profile(&r, &base).unwrap();
        for u in sample_inner_points(&r, &base, 50, 3).unwrap() {
            assert!(p.peak <= u.amax() + 1e-6);
        }
    }

    fn small_scenario() -> (Scenario, TransformResult) {
        let scen = sample(&SampleConfig::new(6, 8, 1.0, 0.5, 4).homogenized(true)).unwrap();
        let r = inner::solve_decomposed(&scen.models, &scen.base).unwrap();
        (scen, r)
    }

    #[test]
    fn groups_sum_to_aggregate() {
        let (scen, r) = small_scenario();
        let u = sample_inner_points(&r, &scen.base, 1, 9).unwrap().remove(0);
        let groups = group_disaggregation(&scen, &r, &u, 4, 1e-7).unwrap();
        assert_eq!(groups.len(), 2);
        assert_relative_eq!(&groups[0] + &groups[1], u, epsilon = 1e-6);

        let whole = group_disaggregation(&scen, &r, &u, 6, 1e-7).unwrap();
        assert_eq!(whole.len(), 1);
        assert_relative_eq!(whole[0], u, epsilon = 1e-6);

        let single = group_disaggregation(&scen, &r, &u, 1, 1e-7).unwrap();
        assert_eq!(single.len(), 6);
        let csv = peak_demo_csv(&u, scen.delta, &groups);
        assert!(csv.starts_with("period,aggregate_u,aggregate_x,group_1,group_2\n"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn validation_is_clean() {
        let (scen, r) = small_scenario();
        let rep = validate_disaggregation(&scen, &r, 40, 1, 1e-7).unwrap();
        assert_eq!(rep.failures, 0);
        assert!(rep.max_violation <= 1e-6);
        assert!(rep.max_sum_error <= 1e-6);
    }

    #[test]
    fn base_samples_are_inside() {
        let (scen, _) = small_scenario();
        for p in sample_base_points(&scen.base, 30, 2).unwrap() {
            assert!(max_violation(&scen.base.polytope, &p) <= 1e-7);
        }
    }

    #[test]
    fn small_sweep_is_deterministic() {
        let mut cfg = SweepConfig::new(3, 4, 1.0, 5);
        cfg.sigmas = vec![0.0, 1.0];
        cfg.trials = 2;
        let a = heterogeneity_sweep(&cfg).unwrap();
        let b = heterogeneity_sweep(&cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.rows.len(), 12);
        for r in a.rows.iter().filter(|r| r.sigma == 0.0) {
            assert!((r.ratio - 1.0).abs() < 1e-4, "{r:?}");
        }
        for r in &a.rows {
            assert!(r.status == TrialStatus::Ok && r.ratio <= 1.0 + 1e-6, "{r:?}");
        }
    }

    #[test]
    fn bad_sweep_config() {
        let mut cfg = SweepConfig::new(3, 4, 1.0, 5);
        cfg.sigmas = vec![1.5];
        assert!(heterogeneity_sweep(&cfg).is_err());
    }
}
