//! Outer approximations `Q·U₀ ⊇ U₁ ⊕ … ⊕ U_N`.
//!
//! The LP method optimizes the inverse map `Z = Q⁻¹` under strict diagonal dominance,
//! which keeps `Z` invertible while every constraint stays linear.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::containment::{add_battery_containment, BatteryMap, ContainmentCertificate};
use crate::error::{Error, Result};
use crate::lp::{self, LinExpr, LinearProgram, LpStatus, Objective};
use crate::polytope::{check_shared_shape, contains_point, matrix_from_rows, matrix_to_rows, BaseSet, BatteryModel};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const MAX_EPSILON_RETRIES: usize = 5;

/// Extra dominance margin requested from the solver so the reported margin survives
/// its feasibility tolerance.
const MARGIN_BUFFER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterMethod {
    Dilate,
    Lp,
}

impl std::str::FromStr for OuterMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilate" => Ok(OuterMethod::Dilate),
            "lp" => Ok(OuterMethod::Lp),
            other => Err(Error::Invalid(format!("unknown outer method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterSet {
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<ContainmentCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOuterResult", into = "RawOuterResult")]
pub struct OuterResult {
    pub z: DMatrix<f64>,
    pub q_map: DMatrix<f64>,
    pub center: DVector<f64>,
    pub per_set: Vec<OuterSet>,
    pub epsilon: f64,
    pub method: OuterMethod,
}

#[derive(Serialize, Deserialize)]
struct RawOuterResult {
    #[serde(rename = "Z")]
    z: Vec<Vec<f64>>,
    #[serde(rename = "Q_map")]
    q_map: Vec<Vec<f64>>,
    center: Vec<f64>,
    epsilon: f64,
    method: OuterMethod,
    per_set: Vec<OuterSet>,
}

impl TryFrom<RawOuterResult> for OuterResult {
    type Error = Error;
    fn try_from(raw: RawOuterResult) -> Result<Self> {
        let z = matrix_from_rows(&raw.z)?;
        let q_map = matrix_from_rows(&raw.q_map)?;
        if !z.is_square() || z.shape() != q_map.shape() || raw.center.len() != z.nrows() {
            return Err(Error::Dimension("Z, Q_map and center sizes disagree".into()));
        }
        Ok(OuterResult {
            z,
            q_map,
            center: DVector::from_vec(raw.center),
            per_set: raw.per_set,
            epsilon: raw.epsilon,
            method: raw.method,
        })
    }
}

impl From<OuterResult> for RawOuterResult {
    fn from(r: OuterResult) -> Self {
        RawOuterResult {
            z: matrix_to_rows(&r.z),
            q_map: matrix_to_rows(&r.q_map),
            center: r.center.iter().copied().collect(),
            epsilon: r.epsilon,
            method: r.method,
            per_set: r.per_set,
        }
    }
}

impl OuterResult {
    /// Membership in `center + Q·U₀`, tested as `H·Z·(x − center) ≤ h₀`.
    pub fn contains(&self, base: &BaseSet, x: &DVector<f64>, tol: f64) -> bool {
        contains_point(&base.polytope, &(&self.z * (x - &self.center)), tol)
    }

    pub fn without_certificates(mut self) -> Self {
        for s in &mut self.per_set {
            s.certificate = None;
        }
        self
    }
}

/// `min_i (Z_ii − Σ_{j≠i} |Z_ij|)`.
pub fn dominance_margin(z: &DMatrix<f64>) -> f64 {
    (0..z.nrows())
        .map(|i| z[(i, i)] - (0..z.ncols()).filter(|&j| j != i).map(|j| z[(i, j)].abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Inverts a strictly diagonally dominant matrix with positive diagonal.
pub fn invert_map(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !z.is_square() {
        return Err(Error::Dimension("Z must be square".into()));
    }
    let margin = dominance_margin(z);
    if !(margin > 0.0) {
        return Err(Error::NotDominant(margin));
    }
    let q = z.clone().lu().try_inverse().ok_or(Error::Singular)?;
    let resid = (z * &q - DMatrix::identity(z.nrows(), z.ncols())).amax();
    if resid > 1e-8 {
        return Err(Error::Singular);
    }
    Ok(q)
}

/// `Q = N·I`: the base set dilated by the population size.
pub fn dilate_outer(models: &[BatteryModel], base: &BaseSet) -> Result<OuterResult> {
    let (t, _) = check_shared_shape(models)?;
    if base.horizon != t {
        return Err(Error::Dimension("base set horizon differs from models".into()));
    }
    let n = models.len() as f64;
    Ok(OuterResult {
        z: DMatrix::identity(t, t) / n,
        q_map: DMatrix::identity(t, t) * n,
        center: DVector::zeros(t),
        per_set: Vec::new(),
        epsilon: 0.0,
        method: OuterMethod::Dilate,
    })
}

/// Maximizes `trace(Z)` subject to `γ_i + Z U_i ⊆ U₀/N` and
/// `Z_ii ≥ ε + Σ_{j≠i} |Z_ij|`. The outer set is `center + Z⁻¹ U₀` with
/// `center = −Z⁻¹ Σ γ_i`.
pub fn solve_outer_lp(models: &[BatteryModel], base: &BaseSet, epsilon: f64) -> Result<OuterResult> {
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (t, delta) = check_shared_shape(models)?;
    if base.horizon != t || base.delta != delta {
        return Err(Error::Dimension("base set shape differs from models".into()));
    }
    let n = models.len();
    let nf = n as f64;
    let mut lp = LinearProgram::new(Objective::Maximize);
    let z = lp.free_block("Z", t, t);
    let s = lp.nonneg_block("abs", t, t);
    for i in 0..t {
        lp.set_cost(z.at(i, i), 1.0);
        lp.set_bounds(s.at(i, i), 0.0, 0.0);
        let mut dom = LinExpr::var(z.at(i, i));
        for j in (0..t).filter(|&j| j != i) {
            dom.add(s.at(i, j), -1.0);
            let mut up = LinExpr::var(z.at(i, j));
            up.add(s.at(i, j), -1.0);
            lp.add_le(up, 0.0);
            let mut down = LinExpr::term(z.at(i, j), -1.0);
            down.add(s.at(i, j), -1.0);
            lp.add_le(down, 0.0);
        }
        lp.add_ge(dom, epsilon + MARGIN_BUFFER);
    }
    for c in base.flat_coordinates(1e-12) {
        lp.set_bounds(z.at(c, c), 1.0 / nf, 1.0 / nf);
    }

    // Φ = Z L⁻¹
    let phi: Vec<LinExpr> = (0..t)
        .flat_map(|j| (0..t).map(move |k| (j, k)))
        .map(|(j, k)| {
            let mut e = LinExpr::term(z.at(j, k), 1.0 / delta);
            if k + 1 < t {
                e.add(z.at(j, k + 1), -1.0 / delta);
            }
            e
        })
        .collect();
    let map = BatteryMap::from_phi(&mut lp, "psi", t, delta, phi);
    let hy = base.h0() / nf;
    let mut sets = Vec::with_capacity(n);
    for (i, m) in models.iter().enumerate() {
        let gamma = lp.free_block(&format!("gamma{i}"), t, 1);
        let g: Vec<LinExpr> = gamma.vars().map(LinExpr::var).collect();
        let lambda = add_battery_containment(&mut lp, &format!("lambda{i}"), t, delta, &m.rhs(), &hy, &g, &map);
        sets.push((gamma, lambda));
    }
    let sol = lp::solve_lp(&lp, lp::default_tol());
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Unbounded => {
            return Err(Error::Unbounded("outer LP: base set is not full-dimensional".into()))
        }
        st => return Err(Error::solver("outer LP", st)),
    }
    let zm = sol.block_values(&z);
    let q_map = invert_map(&zm)?;
    let gammas: Vec<DVector<f64>> = sets.iter().map(|(g, _)| DVector::from_vec(sol.block_vec(g))).collect();
    let center = -(&q_map * gammas.iter().fold(DVector::zeros(t), |acc, g| acc + g));
    let per_set = gammas
        .into_iter()
        .zip(&sets)
        .map(|(g, (_, lambda))| OuterSet {
            gamma: g.iter().copied().collect(),
            certificate: Some(ContainmentCertificate { lambda: sol.block_values(lambda) }),
        })
        .collect();
    Ok(OuterResult { z: zm, q_map, center, per_set, epsilon, method: OuterMethod::Lp })
}

/// [`solve_outer_lp`], halving `epsilon` after each infeasible attempt.
pub fn solve_outer_lp_with_retry(
    models: &[BatteryModel],
    base: &BaseSet,
    epsilon: f64,
    max_retries: usize,
) -> Result<OuterResult> {
    let mut eps = epsilon;
    let mut attempt = 0;
    loop {
        match solve_outer_lp(models, base, eps) {
            Err(Error::Solver { status: LpStatus::Infeasible, .. }) if attempt < max_retries => {
                eps /= 2.0;
                attempt += 1;
            }
            other => return other,
        }
    }
}

pub fn solve(method: OuterMethod, models: &[BatteryModel], base: &BaseSet, epsilon: f64) -> Result<OuterResult> {
    match method {
        OuterMethod::Dilate => dilate_outer(models, base),
        OuterMethod::Lp => solve_outer_lp_with_retry(models, base, epsilon, MAX_EPSILON_RETRIES),
    }
}
