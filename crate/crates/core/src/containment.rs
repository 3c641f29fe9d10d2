//! Certificates for `γ + Γ·X ⊆ Y` with `X`, `Y` in halfspace form.
//!
//! The containment holds iff some `Λ ≥ 0` satisfies `Λ H_x = H_y Γ` and
//! `Λ h_x ≤ h_y − H_y γ`. Two encoders are provided: a generic one for arbitrary
//! polytopes and a sparse one specialised to battery sets sharing `H = (L; −L; I; −I)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, LinExpr, LinearProgram, LpStatus, Objective, Var, VarBlock};
use crate::polytope::{matrix_from_rows, matrix_to_rows, HPolytope};

/// Nonnegative multiplier matrix witnessing a containment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCertificate", into = "RawCertificate")]
pub struct ContainmentCertificate {
    pub lambda: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCertificate {
    lambda: Vec<Vec<f64>>,
}

impl TryFrom<RawCertificate> for ContainmentCertificate {
    type Error = Error;
    fn try_from(raw: RawCertificate) -> Result<Self> {
        Ok(ContainmentCertificate { lambda: matrix_from_rows(&raw.lambda)? })
    }
}

impl From<ContainmentCertificate> for RawCertificate {
    fn from(c: ContainmentCertificate) -> Self {
        RawCertificate { lambda: matrix_to_rows(&c.lambda) }
    }
}

impl ContainmentCertificate {
    /// Worst violation of the three certificate conditions. Equality residuals are
    /// scaled by `1 + |H_y Γ|`, inequality residuals by `1 + |h_y − H_y γ|`.
    pub fn max_violation(
        &self,
        x: &HPolytope,
        y: &HPolytope,
        gamma: &DVector<f64>,
        gamma_map: &DMatrix<f64>,
    ) -> f64 {
        let neg = self.lambda.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        let rhs_eq = &y.a * gamma_map;
        let lhs_eq = &self.lambda * &x.a;
        let eq = lhs_eq
            .iter()
            .zip(rhs_eq.iter())
            .map(|(l, r)| (l - r).abs() / (1.0 + r.abs()))
            .fold(0.0, f64::max);
        let slack = &y.b - &y.a * gamma;
        let lhs_in = &self.lambda * &x.b;
        let ineq = lhs_in
            .iter()
            .zip(slack.iter())
            .map(|(l, r)| ((l - r) / (1.0 + r.abs())).max(0.0))
            .fold(0.0, f64::max);
        neg.max(eq).max(ineq)
    }
}

/// Handles returned by [`encode_containment_rows`].
#[derive(Debug, Clone)]
pub struct ContainmentBlock {
    pub lambda: VarBlock,
    pub eq_rows: usize,
    pub ineq_rows: usize,
}

/// Adds the containment conditions for `γ + Γ·X ⊆ Y` to `lp`, where the entries of
/// `γ` (length `n_y`) and `Γ` (row-major `n_y × n_x`) are affine expressions.
pub fn encode_containment_rows(
    lp: &mut LinearProgram,
    name: &str,
    x: &HPolytope,
    y: &HPolytope,
    gamma: &[LinExpr],
    gamma_map: &[LinExpr],
) -> Result<ContainmentBlock> {
    let (mx, nx) = x.a.shape();
    let (my, ny) = y.a.shape();
    if gamma.len() != ny || gamma_map.len() != ny * nx {
        return Err(Error::Dimension(format!(
            "containment of R^{nx} in R^{ny}: got γ of length {} and Γ with {} entries",
            gamma.len(),
            gamma_map.len()
        )));
    }
    let lambda = lp.nonneg_block(name, my, mx);
    let mut eq_rows = 0;
    for r in 0..my {
        for k in 0..nx {
            let mut e = LinExpr::new();
            for l in 0..mx {
                e.add(lambda.at(r, l), x.a[(l, k)]);
            }
            for j in 0..ny {
                let hy = y.a[(r, j)];
                if hy != 0.0 {
                    e.add_expr(&gamma_map[j * nx + k], -hy);
                }
            }
            lp.add_eq(e, 0.0);
            eq_rows += 1;
        }
    }
    for r in 0..my {
        let mut e = LinExpr::new();
        for l in 0..mx {
            e.add(lambda.at(r, l), x.b[l]);
        }
        for j in 0..ny {
            let hy = y.a[(r, j)];
            if hy != 0.0 {
                e.add_expr(&gamma[j], hy);
            }
        }
        lp.add_le(e, y.b[r]);
    }
    Ok(ContainmentBlock { lambda, eq_rows, ineq_rows: my })
}

/// Searches for a certificate of `γ + Γ·X ⊆ Y`; `None` when none exists.
pub fn check_containment(
    x: &HPolytope,
    y: &HPolytope,
    gamma: &DVector<f64>,
    gamma_map: &DMatrix<f64>,
    tol: f64,
) -> Result<Option<ContainmentCertificate>> {
    if gamma_map.shape() != (y.dim(), x.dim()) || gamma.len() != y.dim() {
        return Err(Error::Dimension("γ/Γ do not match the polytope dimensions".into()));
    }
    let mut lp = LinearProgram::new(Objective::Minimize);
    let g: Vec<LinExpr> = gamma.iter().map(|&v| LinExpr::constant(v)).collect();
    let gm: Vec<LinExpr> = (0..y.dim())
        .flat_map(|j| (0..x.dim()).map(move |k| (j, k)))
        .map(|(j, k)| LinExpr::constant(gamma_map[(j, k)]))
        .collect();
    let block = encode_containment_rows(&mut lp, "lambda", x, y, &g, &gm)?;
    let sol = lp::solve_lp(&lp, tol);
    match sol.status {
        LpStatus::Optimal => {
            let cert = ContainmentCertificate { lambda: sol.block_values(&block.lambda) };
            let viol = cert.max_violation(x, y, gamma, gamma_map);
            if viol > 10.0 * tol {
                return Err(Error::Solver {
                    context: format!("containment certificate residual {viol:.2e}"),
                    status: LpStatus::NumericalFailure,
                });
            }
            Ok(Some(cert))
        }
        LpStatus::Infeasible => Ok(None),
        s => Err(Error::solver("containment check", s)),
    }
}

/// Affine images `Φ = Γ L⁻¹` and `Ψ = L Φ` of a battery-set map, each `T×T` row-major.
#[derive(Debug, Clone)]
pub(crate) struct BatteryMap {
    pub phi: Vec<LinExpr>,
    pub psi: Vec<LinExpr>,
}

impl BatteryMap {
    /// Introduces `Ψ` variables tied to the given `Φ` by `Ψ_jk = Ψ_{j−1,k} + δ Φ_jk`.
    pub fn from_phi(lp: &mut LinearProgram, name: &str, t: usize, delta: f64, phi: Vec<LinExpr>) -> Self {
        let psi_block = lp.free_block(name, t, t);
        for j in 0..t {
            for k in 0..t {
                let mut e = LinExpr::var(psi_block.at(j, k));
                if j > 0 {
                    e.add(psi_block.at(j - 1, k), -1.0);
                }
                e.add_expr(&phi[j * t + k], -delta);
                lp.add_eq(e, 0.0);
            }
        }
        let psi = psi_block.vars().map(LinExpr::var).collect();
        BatteryMap { phi, psi }
    }

    /// `Γ = α I`, so `Φ = α L⁻¹` and `Ψ = α I`.
    pub fn scaled_identity(alpha: Var, t: usize, delta: f64) -> Self {
        let mut phi = vec![LinExpr::new(); t * t];
        let mut psi = vec![LinExpr::new(); t * t];
        for j in 0..t {
            phi[j * t + j] = LinExpr::term(alpha, 1.0 / delta);
            if j > 0 {
                phi[j * t + j - 1] = LinExpr::term(alpha, -1.0 / delta);
            }
            psi[j * t + j] = LinExpr::var(alpha);
        }
        BatteryMap { phi, psi }
    }
}

/// `L⁻¹`: `1/δ` on the diagonal, `−1/δ` below it.
pub fn cumulative_inverse(t: usize, delta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| {
        if i == j {
            1.0 / delta
        } else if i == j + 1 {
            -1.0 / delta
        } else {
            0.0
        }
    })
}

/// Adds `γ + Γ·X ⊆ Y` for battery sets `X = {H u ≤ h_x}`, `Y = {H u ≤ h_y}`, with the
/// equality block right-multiplied by `L⁻¹` so every row stays short.
pub(crate) fn add_battery_containment(
    lp: &mut LinearProgram,
    name: &str,
    t: usize,
    delta: f64,
    hx: &DVector<f64>,
    hy: &DVector<f64>,
    gamma: &[LinExpr],
    map: &BatteryMap,
) -> VarBlock {
    let m = 4 * t;
    debug_assert_eq!(hx.len(), m);
    debug_assert_eq!(hy.len(), m);
    let lambda = lp.nonneg_block(name, m, m);

    // Lγ via y_k = y_{k−1} + δ γ_k
    let y = lp.free_block(&format!("{name}.cum"), t, 1);
    for k in 0..t {
        let mut e = LinExpr::var(y.get(k));
        if k > 0 {
            e.add(y.get(k - 1), -1.0);
        }
        e.add_expr(&gamma[k], -delta);
        lp.add_eq(e, 0.0);
    }

    let inv = 1.0 / delta;
    for r in 0..m {
        let (blk, q) = (r / t, r % t);
        for k in 0..t {
            let mut e = LinExpr::new();
            e.add(lambda.at(r, k), 1.0)
                .add(lambda.at(r, t + k), -1.0)
                .add(lambda.at(r, 2 * t + k), inv)
                .add(lambda.at(r, 3 * t + k), -inv);
            if k + 1 < t {
                e.add(lambda.at(r, 2 * t + k + 1), -inv).add(lambda.at(r, 3 * t + k + 1), inv);
            }
            match blk {
                0 => e.add_expr(&map.psi[q * t + k], -1.0),
                1 => e.add_expr(&map.psi[q * t + k], 1.0),
                2 => e.add_expr(&map.phi[q * t + k], -1.0),
                _ => e.add_expr(&map.phi[q * t + k], 1.0),
            };
            lp.add_eq(e, 0.0);
        }
        let mut e = LinExpr::new();
        for l in 0..m {
            e.add(lambda.at(r, l), hx[l]);
        }
        match blk {
            0 => e.add(y.get(q), 1.0),
            1 => e.add(y.get(q), -1.0),
            2 => e.add_expr(&gamma[q], 1.0),
            _ => e.add_expr(&gamma[q], -1.0),
        };
        lp.add_le(e, hy[r]);
    }
    lambda
}
