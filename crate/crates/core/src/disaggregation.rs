//! Splitting an aggregate profile of an inner approximation into individual profiles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inner::TransformResult;
use crate::lp::{self, LinExpr, LinearProgram, LpStatus, Objective};
use crate::polytope::{add_membership_rows, chebyshev_center, log_abs_det, max_violation, BaseSet};

/// Condition numbers above this route recovery through the LP.
pub const MAX_CONDITION: f64 = 1e12;

/// Precomputed state for repeated disaggregation against one result.
pub struct Disaggregator<'a> {
    result: &'a TransformResult,
    base: &'a BaseSet,
    inverse: Option<DMatrix<f64>>,
}

impl<'a> Disaggregator<'a> {
    pub fn new(result: &'a TransformResult, base: &'a BaseSet) -> Result<Self> {
        if result.horizon() != base.horizon {
            return Err(Error::Dimension("result and base set horizons differ".into()));
        }
        Ok(Disaggregator { result, base, inverse: stable_inverse(&result.map) })
    }

    pub fn uses_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// A base point `u₀ ∈ U₀` with `center + map·u₀ = u`.
    pub fn base_point(&self, u: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        if u.len() != self.result.horizon() {
            return Err(Error::Dimension("profile length differs from horizon".into()));
        }
        let rhs = u - &self.result.center;
        match &self.inverse {
            Some(inv) => {
                let u0 = inv * rhs;
                let viol = max_violation(&self.base.polytope, &u0);
                if viol > tol {
                    return Err(Error::OutsideInner(viol));
                }
                Ok(u0)
            }
            None => self.base_point_lp(&rhs, tol),
        }
    }

    /// Minimizes the ∞-norm distance to the Chebyshev center of `U₀` over all
    /// base points reaching `rhs`.
    fn base_point_lp(&self, rhs: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        let t = self.result.horizon();
        let (cc, _) = chebyshev_center(&self.base.polytope)?;
        let mut lp = LinearProgram::new(Objective::Minimize);
        let u0 = lp.free_block("u0", t, 1);
        let dev = lp.nonneg_block("dev", 1, 1).get(0);
        lp.set_cost(dev, 1.0);
        add_membership_rows(&mut lp, &self.base.polytope, |j| LinExpr::var(u0.get(j)));
        for i in 0..t {
            let mut e = LinExpr::new();
            for j in 0..t {
                e.add(u0.get(j), self.result.map[(i, j)]);
            }
            lp.add_eq(e, rhs[i]);
            let mut up = LinExpr::var(u0.get(i));
            up.add(dev, -1.0);
            lp.add_le(up, cc[i]);
            let mut down = LinExpr::term(u0.get(i), -1.0);
            down.add(dev, -1.0);
            lp.add_le(down, -cc[i]);
        }
        let sol = lp::solve_lp(&lp, tol.min(lp::default_tol()));
        match sol.status {
            LpStatus::Optimal => Ok(DVector::from_vec(sol.block_vec(&u0))),
            LpStatus::Infeasible => Err(Error::OutsideInner(f64::NAN)),
            s => Err(Error::solver("base point recovery", s)),
        }
    }

    /// Individual profiles `γ_i + Γ_i u₀`.
    pub fn split(&self, u: &DVector<f64>, tol: f64) -> Result<Vec<DVector<f64>>> {
        let u0 = self.base_point(u, tol)?;
        Ok(self.result.per_set.iter().map(|s| &s.gamma + &s.gamma_map * &u0).collect())
    }
}

/// `map⁻¹` when the map is nonsingular and its 1-norm condition number is at most
/// [`MAX_CONDITION`].
fn stable_inverse(map: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (sign, _) = log_abs_det(map);
    if sign == 0 {
        return None;
    }
    let inv = map.clone().lu().try_inverse()?;
    let cond = one_norm(map) * one_norm(&inv);
    (cond.is_finite() && cond <= MAX_CONDITION).then_some(inv)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn recover_base_point(
    result: &TransformResult,
    base: &BaseSet,
    u: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    Disaggregator::new(result, base)?.base_point(u, tol)
}

pub fn disaggregate(
    result: &TransformResult,
    base: &BaseSet,
    u: &DVector<f64>,
    tol: f64,
) -> Result<Vec<DVector<f64>>> {
    Disaggregator::new(result, base)?.split(u, tol)
}
