//! Inner approximations `center + map·U₀ ⊆ U₁ ⊕ … ⊕ U_N`.
//!
//! Each method searches per-set transforms `(γ_i, Γ_i)` with `γ_i + Γ_i U₀ ⊆ U_i`;
//! their sums give the aggregate center and map.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::containment::{add_battery_containment, BatteryMap, ContainmentCertificate};
use crate::error::{Error, Result};
use crate::lp::{self, LinExpr, LinearProgram, LpStatus, Objective, VarBlock};
use crate::polytope::{
    battery_to_hpolytope, chebyshev_center, check_shared_shape, cumulative_matrix, matrix_from_rows,
    matrix_to_rows, BaseSet, BatteryModel,
};

/// Lower bound imposed on the structure-preserving scale factor.
pub const ALPHA_MIN: f64 = 1e-9;

/// Homothet scale factors below this are treated as singletons.
const HOMOTHET_ZERO: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerMethod {
    Structure,
    Affine,
    Decomposed,
    Homothet,
}

impl std::str::FromStr for InnerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(InnerMethod::Structure),
            "affine" => Ok(InnerMethod::Affine),
            "decomposed" => Ok(InnerMethod::Decomposed),
            "homothet" => Ok(InnerMethod::Homothet),
            other => Err(Error::Invalid(format!("unknown inner method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetTransform {
    pub gamma: DVector<f64>,
    pub gamma_map: DMatrix<f64>,
    pub certificate: Option<ContainmentCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransformResult", into = "RawTransformResult")]
pub struct TransformResult {
    pub center: DVector<f64>,
    pub map: DMatrix<f64>,
    pub per_set: Vec<SetTransform>,
    pub objective: f64,
    pub method: InnerMethod,
}

#[derive(Serialize, Deserialize)]
struct RawSetTransform {
    gamma: Vec<f64>,
    #[serde(rename = "Gamma")]
    gamma_map: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    certificate: Option<ContainmentCertificate>,
}

#[derive(Serialize, Deserialize)]
struct RawTransformResult {
    center: Vec<f64>,
    map: Vec<Vec<f64>>,
    method: InnerMethod,
    objective: f64,
    per_set: Vec<RawSetTransform>,
}

impl TryFrom<RawTransformResult> for TransformResult {
    type Error = Error;
    fn try_from(raw: RawTransformResult) -> Result<Self> {
        let map = matrix_from_rows(&raw.map)?;
        if map.nrows() != raw.center.len() || !map.is_square() {
            return Err(Error::Dimension("map must be square and match center".into()));
        }
        let per_set = raw
            .per_set
            .into_iter()
            .map(|s| {
                let gamma_map = matrix_from_rows(&s.gamma_map)?;
                if gamma_map.shape() != map.shape() || s.gamma.len() != map.nrows() {
                    return Err(Error::Dimension("per-set transform does not match map".into()));
                }
                Ok(SetTransform { gamma: DVector::from_vec(s.gamma), gamma_map, certificate: s.certificate })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformResult {
            center: DVector::from_vec(raw.center),
            map,
            per_set,
            objective: raw.objective,
            method: raw.method,
        })
    }
}

impl From<TransformResult> for RawTransformResult {
    fn from(r: TransformResult) -> Self {
        RawTransformResult {
            center: r.center.iter().copied().collect(),
            map: matrix_to_rows(&r.map),
            method: r.method,
            objective: r.objective,
            per_set: r
                .per_set
                .into_iter()
                .map(|s| RawSetTransform {
                    gamma: s.gamma.iter().copied().collect(),
                    gamma_map: matrix_to_rows(&s.gamma_map),
                    certificate: s.certificate,
                })
                .collect(),
        }
    }
}

impl TransformResult {
    pub fn horizon(&self) -> usize {
        self.center.len()
    }

    /// Scale factor for structure-preserving and homothet results.
    pub fn alpha(&self) -> Option<f64> {
        match self.method {
            InnerMethod::Structure | InnerMethod::Homothet => Some(self.objective),
            _ => None,
        }
    }

    pub fn without_certificates(mut self) -> Self {
        for s in &mut self.per_set {
            s.certificate = None;
        }
        self
    }
}

pub fn solve(method: InnerMethod, models: &[BatteryModel], base: &BaseSet) -> Result<TransformResult> {
    match method {
        InnerMethod::Structure => solve_structure_preserving(models, base),
        InnerMethod::Affine => solve_general_affine(models, base),
        InnerMethod::Decomposed => solve_decomposed(models, base),
        InnerMethod::Homothet => solve_homothet_baseline(models, base),
    }
}

fn check_inputs(models: &[BatteryModel], base: &BaseSet) -> Result<(usize, f64)> {
    let (t, delta) = check_shared_shape(models)?;
    if base.horizon != t || base.delta != delta {
        return Err(Error::Dimension(format!(
            "base set has T={} δ={} but models have T={t} δ={delta}",
            base.horizon, base.delta
        )));
    }
    Ok((t, delta))
}

struct SetVars {
    gamma: VarBlock,
    phi: VarBlock,
    lambda: VarBlock,
}

/// Per-set variables with a free `Φ_i = Γ_i L⁻¹`.
fn add_free_set(lp: &mut LinearProgram, i: usize, model: &BatteryModel, base: &BaseSet) -> SetVars {
    let (t, delta) = (base.horizon, base.delta);
    let gamma = lp.free_block(&format!("gamma{i}"), t, 1);
    let phi = lp.free_block(&format!("phi{i}"), t, t);
    let map = BatteryMap::from_phi(lp, &format!("psi{i}"), t, delta, phi.vars().map(LinExpr::var).collect());
    let g: Vec<LinExpr> = gamma.vars().map(LinExpr::var).collect();
    let lambda = add_battery_containment(lp, &format!("lambda{i}"), t, delta, base.h0(), &model.rhs(), &g, &map);
    SetVars { gamma, phi, lambda }
}

/// Fixes column `c` of `Γ = Φ L` to `e_c` for each flat base coordinate `c`, matching
/// the `N·U₀` dilation along directions where the base set has no extent.
fn pin_flat_columns(lp: &mut LinearProgram, phi: &VarBlock, flat: &[usize], delta: f64) {
    let t = phi.rows;
    for &c in flat {
        for j in 0..t {
            let mut e = LinExpr::new();
            for k in c..t {
                e.add(phi.at(j, k), delta);
            }
            lp.add_eq(e, if j == c { 1.0 } else { 0.0 });
        }
    }
}

/// Periods where a set's power bounds coincide.
fn fixed_periods(m: &BatteryModel) -> Vec<usize> {
    (0..m.horizon()).filter(|&k| m.u_hi[k] - m.u_lo[k] <= 1e-12 * (1.0 + m.u_hi[k].abs())).collect()
}

/// Removes solver noise from entries that the containment pins exactly: rows of
/// `Γ_i` for periods where `U_i` is fixed vanish outside the flat base columns,
/// and pinned flat columns are exactly `e_c`.
fn snap_fixed_rows(per_set: &mut [SetTransform], models: &[BatteryModel], flat: &[usize], pinned: bool) {
    for (s, m) in per_set.iter_mut().zip(models) {
        if pinned {
            for &c in flat {
                s.gamma_map.set_column(c, &DVector::from_fn(m.horizon(), |r, _| if r == c { 1.0 } else { 0.0 }));
            }
        }
        for t in fixed_periods(m) {
            for k in (0..m.horizon()).filter(|k| !flat.contains(k)) {
                s.gamma_map[(t, k)] = 0.0;
            }
        }
    }
}

/// Sets `γ_i(t)` so that fixed periods of `U_i` are met exactly on `U₀`.
fn fix_offsets(per_set: &mut [SetTransform], models: &[BatteryModel], base: &BaseSet, flat: &[usize]) {
    let level = base.as_model().u_lo;
    for (s, m) in per_set.iter_mut().zip(models) {
        for t in fixed_periods(m) {
            s.gamma[t] = m.u_lo[t] - flat.iter().map(|&c| s.gamma_map[(t, c)] * level[c]).sum::<f64>();
        }
    }
}

fn extract(sol: &lp::LpSolution, v: &SetVars, l: &DMatrix<f64>) -> SetTransform {
    let gamma = DVector::from_vec(sol.block_vec(&v.gamma));
    let gamma_map = sol.block_values(&v.phi) * l;
    let certificate = Some(ContainmentCertificate { lambda: sol.block_values(&v.lambda) });
    SetTransform { gamma, gamma_map, certificate }
}

fn lp_error(context: &str, status: LpStatus) -> Error {
    match status {
        LpStatus::Unbounded => Error::Unbounded(format!("{context}: base set is not full-dimensional")),
        s => Error::solver(context, s),
    }
}

fn assemble(per_set: Vec<SetTransform>, objective: f64, method: InnerMethod, t: usize) -> TransformResult {
    let mut center = DVector::zeros(t);
    let mut map = DMatrix::zeros(t, t);
    for s in &per_set {
        center += &s.gamma;
        map += &s.gamma_map;
    }
    TransformResult { center, map, per_set, objective, method }
}

/// Maximizes `α` over `center + α·U₀`.
pub fn solve_structure_preserving(models: &[BatteryModel], base: &BaseSet) -> Result<TransformResult> {
    let (t, delta) = check_inputs(models, base)?;
    let n = models.len();
    let mut lp = LinearProgram::new(Objective::Maximize);
    let alpha = lp.add_block("alpha", 1, 1, ALPHA_MIN, f64::INFINITY).get(0);
    lp.set_cost(alpha, 1.0);
    let sets: Vec<SetVars> = models.iter().enumerate().map(|(i, m)| add_free_set(&mut lp, i, m, base)).collect();

    // Σ Φ_i = α L⁻¹
    for j in 0..t {
        for k in 0..t {
            let mut e = LinExpr::new();
            for s in &sets {
                e.add(s.phi.at(j, k), 1.0);
            }
            if j == k {
                e.add(alpha, -1.0 / delta);
            } else if j == k + 1 {
                e.add(alpha, 1.0 / delta);
            }
            lp.add_eq(e, 0.0);
        }
    }
    let sol = lp::solve_lp(&lp, lp::default_tol());
    if !sol.is_optimal() {
        return Err(lp_error("structure-preserving inner LP", sol.status));
    }
    let a = sol.value(alpha);
    let l = cumulative_matrix(t, delta);
    let mut per_set: Vec<SetTransform> = sets.iter().map(|v| extract(&sol, v, &l)).collect();
    let flat = base.flat_coordinates(1e-12);
    snap_fixed_rows(&mut per_set, models, &flat, false);

    // spread the coupling residual over the free entries so that Σ Γ_i = α I holds to rounding
    let mut resid = DMatrix::identity(t, t) * a;
    for s in &per_set {
        resid -= &s.gamma_map;
    }
    let fixed: Vec<Vec<usize>> = models.iter().map(fixed_periods).collect();
    for j in 0..t {
        for k in 0..t {
            let free: Vec<usize> =
                (0..n).filter(|&i| flat.contains(&k) || !fixed[i].contains(&j)).collect();
            if free.is_empty() {
                continue;
            }
            let share = resid[(j, k)] / free.len() as f64;
            for i in free {
                per_set[i].gamma_map[(j, k)] += share;
            }
        }
    }
    fix_offsets(&mut per_set, models, base, &flat);
    let mut result = assemble(per_set, a, InnerMethod::Structure, t);
    result.map = DMatrix::identity(t, t) * a;
    Ok(result)
}

/// Maximizes `trace(map)` with all per-set LPs coupled in one program.
pub fn solve_general_affine(models: &[BatteryModel], base: &BaseSet) -> Result<TransformResult> {
    let (t, delta) = check_inputs(models, base)?;
    let flat = base.flat_coordinates(1e-12);
    let mut lp = LinearProgram::new(Objective::Maximize);
    let sets: Vec<SetVars> = models.iter().enumerate().map(|(i, m)| add_free_set(&mut lp, i, m, base)).collect();
    for s in &sets {
        let phi = &s.phi;
        add_trace_cost(&mut lp, phi, delta);
        pin_flat_columns(&mut lp, phi, &flat, delta);
    }
    let sol = lp::solve_lp(&lp, lp::default_tol());
    if !sol.is_optimal() {
        return Err(lp_error("general affine inner LP", sol.status));
    }
    let l = cumulative_matrix(t, delta);
    let mut per_set: Vec<SetTransform> = sets.iter().map(|v| extract(&sol, v, &l)).collect();
    snap_fixed_rows(&mut per_set, models, &flat, true);
    fix_offsets(&mut per_set, models, base, &flat);
    let mut result = assemble(per_set, 0.0, InnerMethod::Affine, t);
    result.objective = result.map.trace();
    Ok(result)
}

/// `trace(Φ L) = δ Σ_{k ≥ j} Φ_jk`.
fn add_trace_cost(lp: &mut LinearProgram, phi: &VarBlock, delta: f64) {
    for j in 0..phi.rows {
        for k in j..phi.cols {
            lp.add_cost(phi.at(j, k), delta);
        }
    }
}

/// Solves one trace-maximizing LP per set and sums the transforms.
pub fn solve_decomposed(models: &[BatteryModel], base: &BaseSet) -> Result<TransformResult> {
    let (t, delta) = check_inputs(models, base)?;
    let flat = base.flat_coordinates(1e-12);
    let l = cumulative_matrix(t, delta);
    let mut per_set = models
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut lp = LinearProgram::new(Objective::Maximize);
            let v = add_free_set(&mut lp, 0, m, base);
            let phi = &v.phi;
            add_trace_cost(&mut lp, phi, delta);
            pin_flat_columns(&mut lp, phi, &flat, delta);
            let sol = lp::solve_lp(&lp, lp::default_tol());
            if !sol.is_optimal() {
                return Err(lp_error(&format!("per-set affine LP for set {i}"), sol.status));
            }
            Ok(extract(&sol, &v, &l))
        })
        .collect::<Result<Vec<SetTransform>>>()?;
    snap_fixed_rows(&mut per_set, models, &flat, true);
    fix_offsets(&mut per_set, models, base, &flat);
    let mut result = assemble(per_set, 0.0, InnerMethod::Decomposed, t);
    result.objective = result.per_set.iter().map(|s| s.gamma_map.trace()).sum();
    Ok(result)
}

/// Largest homothet `γ_i + α_i U₀` inside each set.
pub fn solve_homothet_baseline(models: &[BatteryModel], base: &BaseSet) -> Result<TransformResult> {
    let (t, delta) = check_inputs(models, base)?;
    let per_set = models
        .par_iter()
        .enumerate()
        .map(|(i, m)| homothet_one(i, m, base, t, delta))
        .collect::<Result<Vec<_>>>()?;
    let alpha: f64 = per_set.iter().map(|s| s.gamma_map[(0, 0)]).sum();
    let mut result = assemble(per_set, alpha, InnerMethod::Homothet, t);
    result.map = DMatrix::identity(t, t) * alpha;
    Ok(result)
}

fn homothet_one(i: usize, m: &BatteryModel, base: &BaseSet, t: usize, delta: f64) -> Result<SetTransform> {
    let mut lp = LinearProgram::new(Objective::Maximize);
    let alpha = lp.nonneg_block("alpha", 1, 1).get(0);
    lp.set_cost(alpha, 1.0);
    let gamma = lp.free_block("gamma", t, 1);
    let g: Vec<LinExpr> = gamma.vars().map(LinExpr::var).collect();
    let map = BatteryMap::scaled_identity(alpha, t, delta);
    let lambda = add_battery_containment(&mut lp, "lambda", t, delta, base.h0(), &m.rhs(), &g, &map);
    let sol = lp::solve_lp(&lp, lp::default_tol());
    if !sol.is_optimal() {
        return Err(lp_error(&format!("homothet LP for set {i}"), sol.status));
    }
    let a = sol.value(alpha);
    if a <= HOMOTHET_ZERO {
        let (c, _) = chebyshev_center(&battery_to_hpolytope(m))?;
        return Ok(SetTransform {
            gamma: c,
            gamma_map: DMatrix::zeros(t, t),
            certificate: Some(ContainmentCertificate { lambda: DMatrix::zeros(4 * t, 4 * t) }),
        });
    }
    Ok(SetTransform {
        gamma: DVector::from_vec(sol.block_vec(&gamma)),
        gamma_map: DMatrix::identity(t, t) * a,
        certificate: Some(ContainmentCertificate { lambda: sol.block_values(&lambda) }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::build_base_set;
    use approx::assert_relative_eq;

    fn wide_box(lo: [f64; 2], hi: [f64; 2]) -> BatteryModel {
        BatteryModel {
            u_lo: lo.to_vec(),
            u_hi: hi.to_vec(),
            x_lo: vec![-100.0; 2],
            x_hi: vec![100.0; 2],
            delta: 1.0,
        }
    }

    fn boxes() -> Vec<BatteryModel> {
        vec![wide_box([0.0, 0.0], [1.0, 1.0]), wide_box([0.0, 0.0], [2.0, 2.0])]
    }

    fn rectangles() -> Vec<BatteryModel> {
        vec![wide_box([0.0, 0.0], [2.0, 1.0]), wide_box([0.0, 0.0], [1.0, 2.0])]
    }

    fn certificates_hold(models: &[BatteryModel], base: &BaseSet, r: &TransformResult) {
        for (m, s) in models.iter().zip(&r.per_set) {
            let cert = s.certificate.as_ref().unwrap();
            let v = cert.max_violation(&base.polytope, &battery_to_hpolytope(m), &s.gamma, &s.gamma_map);
            assert!(v < 1e-6, "certificate violation {v}");
        }
    }

    #[test]
    fn structure_boxes_and_rectangles() {
        for models in [boxes(), rectangles()] {
            let base = build_base_set(&models).unwrap();
            let r = solve_structure_preserving(&models, &base).unwrap();
            assert_relative_eq!(r.objective, 2.0, epsilon = 1e-6);
            assert_eq!(r.map, DMatrix::identity(2, 2) * r.objective);
            certificates_hold(&models, &base, &r);
            let sum: DMatrix<f64> = r.per_set.iter().map(|s| &s.gamma_map).sum();
            assert_relative_eq!(sum, r.map, epsilon = 1e-12);
        }
        let base = build_base_set(&rectangles()).unwrap();
        let r = solve_structure_preserving(&rectangles(), &base).unwrap();
        // inner set [0,3]²: center + 2·[0,1.5]²
        assert_relative_eq!(r.center, DVector::zeros(2), epsilon = 1e-6);
    }

    #[test]
    fn identical_models_scale_by_n() {
        let m = BatteryModel {
            u_lo: vec![-1.0, 0.0, -2.0],
            u_hi: vec![2.0, 1.0, 1.0],
            x_lo: vec![-1.0, -1.0, 0.5],
            x_hi: vec![2.0, 2.5, 3.0],
            delta: 0.5,
        };
        let models = vec![m.clone(), m.clone(), m];
        let base = build_base_set(&models).unwrap();
        let s = solve_structure_preserving(&models, &base).unwrap();
        assert_relative_eq!(s.objective, 3.0, epsilon = 1e-6);
        let h = solve_homothet_baseline(&models, &base).unwrap();
        assert_relative_eq!(h.objective, 3.0, epsilon = 1e-6);
        let a = solve_general_affine(&models, &base).unwrap();
        assert!(a.objective >= 9.0 - 1e-6);
    }

    #[test]
    fn affine_and_decomposed_on_rectangles() {
        let models = rectangles();
        let base = build_base_set(&models).unwrap();
        let a = solve_general_affine(&models, &base).unwrap();
        assert_relative_eq!(a.objective, 4.0, epsilon = 1e-6);
        let d = solve_decomposed(&models, &base).unwrap();
        assert_relative_eq!(d.objective, 4.0, epsilon = 1e-6);
        assert_relative_eq!(d.map, DMatrix::identity(2, 2) * 2.0, epsilon = 1e-6);
        assert_relative_eq!(
            d.per_set[0].gamma_map,
            DMatrix::from_diagonal(&DVector::from_vec(vec![4.0 / 3.0, 2.0 / 3.0])),
            epsilon = 1e-6
        );
        certificates_hold(&models, &base, &d);
        certificates_hold(&models, &base, &a);
    }

    #[test]
    fn homothet_examples() {
        let models = boxes();
        let base = build_base_set(&models).unwrap();
        let h = solve_homothet_baseline(&models, &base).unwrap();
        assert_relative_eq!(h.per_set[0].gamma_map[(0, 0)], 2.0 / 3.0, epsilon = 1e-6);
        assert_relative_eq!(h.per_set[1].gamma_map[(0, 0)], 4.0 / 3.0, epsilon = 1e-6);
        assert_relative_eq!(h.objective, 2.0, epsilon = 1e-6);

        let models = rectangles();
        let base = build_base_set(&models).unwrap();
        let h = solve_homothet_baseline(&models, &base).unwrap();
        assert_relative_eq!(h.objective, 4.0 / 3.0, epsilon = 1e-6);
        assert_relative_eq!(h.map.determinant() * 1.5 * 1.5, 4.0, epsilon = 1e-5);
        certificates_hold(&models, &base, &h);
    }

    #[test]
    fn single_model_identity_transform() {
        let m = wide_box([-1.0, 0.0], [1.0, 3.0]);
        let base = build_base_set(std::slice::from_ref(&m)).unwrap();
        let d = solve_decomposed(std::slice::from_ref(&m), &base).unwrap();
        assert_relative_eq!(d.objective, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn flat_homothet_member_gets_chebyshev_center() {
        // the second set is a segment, so no positive homothet of the square fits
        let models = vec![wide_box([0.0, 0.0], [2.0, 2.0]), wide_box([0.0, 1.0], [2.0, 1.0])];
        let base = build_base_set(&models).unwrap();
        let h = solve_homothet_baseline(&models, &base).unwrap();
        assert_eq!(h.per_set[1].gamma_map, DMatrix::zeros(2, 2));
        let p = battery_to_hpolytope(&models[1]);
        assert!(p.contains(&h.per_set[1].gamma, 1e-7));
        assert!(h.objective > 0.0);
    }

    #[test]
    fn flat_base_coordinate_is_pinned() {
        let mk = |hi: f64| BatteryModel {
            u_lo: vec![0.0, -hi, -1.0],
            u_hi: vec![0.0, hi, 2.0],
            x_lo: vec![0.0, -3.0, -2.0],
            x_hi: vec![0.0, 3.0, 4.0],
            delta: 1.0,
        };
        let models = vec![mk(1.0), mk(2.0)];
        let base = build_base_set(&models).unwrap();
        assert_eq!(base.flat_coordinates(1e-12), vec![0]);
        let a = solve_general_affine(&models, &base).unwrap();
        let d = solve_decomposed(&models, &base).unwrap();
        assert_relative_eq!(a.objective, d.objective, max_relative = 1e-6);
        assert_relative_eq!(a.map.column(0).into_owned(), DVector::from_vec(vec![2.0, 0.0, 0.0]), epsilon = 1e-7);
        let s = solve_structure_preserving(&models, &base).unwrap();
        assert!(a.objective >= 3.0 * s.objective - 1e-6);
    }

    #[test]
    fn json_round_trip_and_names() {
        let models = boxes();
        let base = build_base_set(&models).unwrap();
        let r = solve_homothet_baseline(&models, &base).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["center", "map", "method", "objective", "per_set"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["method"], "homothet");
        assert!(v["per_set"][0].get("Gamma").is_some());
        assert!(v["per_set"][0].get("certificate").is_some());
        let back: TransformResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        let lean = serde_json::to_value(r.without_certificates()).unwrap();
        assert!(lean["per_set"][0].get("certificate").is_none());
    }
}
