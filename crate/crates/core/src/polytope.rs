//! Halfspace polytopes, generalized battery models and determinant metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, LinExpr, LinearProgram, LpStatus, Objective};

/// `{x : A x ≤ b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHPolytope", into = "RawHPolytope")]
pub struct HPolytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawHPolytope {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl TryFrom<RawHPolytope> for HPolytope {
    type Error = Error;

    fn try_from(raw: RawHPolytope) -> Result<Self> {
        let a = matrix_from_rows(&raw.a)?;
        HPolytope::new(a, DVector::from_vec(raw.b))
    }
}

impl From<HPolytope> for RawHPolytope {
    fn from(p: HPolytope) -> Self {
        RawHPolytope { a: matrix_to_rows(&p.a), b: p.b.iter().copied().collect() }
    }
}

/// Row-major nested arrays → matrix. An empty list gives a 0×0 matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl HPolytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "A has {} rows but b has {} entries",
                a.nrows(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite polytope entry".into()));
        }
        Ok(HPolytope { a, b })
    }

    /// Axis-aligned box `[lo, hi]`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(i, i)] = 1.0;
            b[i] = hi[i];
            a[(n + i, i)] = -1.0;
            b[n + i] = -lo[i];
        }
        HPolytope { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        contains_point(self, x, tol)
    }
}

/// Generalized battery: `u ∈ [u_lo, u_hi]`, `L u ∈ [x_lo, x_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryModel {
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub delta: f64,
}

impl BatteryModel {
    pub fn horizon(&self) -> usize {
        self.u_lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        if t == 0 {
            return Err(Error::Invalid("battery model with empty horizon".into()));
        }
        if [self.u_hi.len(), self.x_lo.len(), self.x_hi.len()].iter().any(|&l| l != t) {
            return Err(Error::Dimension("battery limit vectors differ in length".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Invalid(format!("delta must be positive, got {}", self.delta)));
        }
        for k in 0..t {
            let vals = [self.u_lo[k], self.u_hi[k], self.x_lo[k], self.x_hi[k]];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite limit at period {k}")));
            }
            if self.u_lo[k] > self.u_hi[k] || self.x_lo[k] > self.x_hi[k] {
                return Err(Error::Invalid(format!("lower limit exceeds upper limit at period {k}")));
            }
        }
        Ok(())
    }

    /// Right-hand side `(x_hi, −x_lo, u_hi, −u_lo)`.
    pub fn rhs(&self) -> DVector<f64> {
        let t = self.horizon();
        DVector::from_fn(4 * t, |r, _| match r / t {
            0 => self.x_hi[r % t],
            1 => -self.x_lo[r % t],
            2 => self.u_hi[r % t],
            _ => -self.u_lo[r % t],
        })
    }

    /// Direct check of the power and energy limits.
    pub fn admits(&self, u: &[f64], tol: f64) -> bool {
        let mut x = 0.0;
        for k in 0..self.horizon() {
            x += self.delta * u[k];
            let ok = u[k] <= self.u_hi[k] + tol * (1.0 + self.u_hi[k].abs())
                && u[k] >= self.u_lo[k] - tol * (1.0 + self.u_lo[k].abs())
                && x <= self.x_hi[k] + tol * (1.0 + self.x_hi[k].abs())
                && x >= self.x_lo[k] - tol * (1.0 + self.x_lo[k].abs());
            if !ok {
                return false;
            }
        }
        true
    }
}

/// Lower-triangular `T×T` matrix with `delta` on and below the diagonal.
pub fn cumulative_matrix(t: usize, delta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| if j <= i { delta } else { 0.0 })
}

/// The shared constraint matrix `(L; −L; I; −I)`.
pub fn battery_matrix(t: usize, delta: f64) -> DMatrix<f64> {
    let l = cumulative_matrix(t, delta);
    let mut h = DMatrix::zeros(4 * t, t);
    h.view_mut((0, 0), (t, t)).copy_from(&l);
    h.view_mut((t, 0), (t, t)).copy_from(&(-&l));
    for k in 0..t {
        h[(2 * t + k, k)] = 1.0;
        h[(3 * t + k, k)] = -1.0;
    }
    h
}

pub fn battery_to_hpolytope(m: &BatteryModel) -> HPolytope {
    HPolytope { a: battery_matrix(m.horizon(), m.delta), b: m.rhs() }
}

/// Base set: the shared battery matrix with the averaged right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSet {
    pub polytope: HPolytope,
    pub horizon: usize,
    pub delta: f64,
}

impl BaseSet {
    pub fn h0(&self) -> &DVector<f64> {
        &self.polytope.b
    }

    /// Periods where the averaged power bounds coincide, so the base set is flat.
    pub fn flat_coordinates(&self, tol: f64) -> Vec<usize> {
        let t = self.horizon;
        let h0 = self.h0();
        (0..t)
            .filter(|&k| {
                let hi = h0[2 * t + k];
                let lo = -h0[3 * t + k];
                hi - lo <= tol * (1.0 + hi.abs() + lo.abs())
            })
            .collect()
    }

    /// Averaged power bounds as a battery model.
    pub fn as_model(&self) -> BatteryModel {
        let t = self.horizon;
        let h0 = self.h0();
        BatteryModel {
            x_hi: (0..t).map(|k| h0[k]).collect(),
            x_lo: (0..t).map(|k| -h0[t + k]).collect(),
            u_hi: (0..t).map(|k| h0[2 * t + k]).collect(),
            u_lo: (0..t).map(|k| -h0[3 * t + k]).collect(),
            delta: self.delta,
        }
    }
}

pub fn check_shared_shape(models: &[BatteryModel]) -> Result<(usize, f64)> {
    let first = models.first().ok_or_else(|| Error::Invalid("empty model list".into()))?;
    let (t, delta) = (first.horizon(), first.delta);
    for (i, m) in models.iter().enumerate() {
        m.validate()?;
        if m.horizon() != t || m.delta != delta {
            return Err(Error::Dimension(format!(
                "model {i} has T={} δ={} but model 0 has T={t} δ={delta}",
                m.horizon(),
                m.delta
            )));
        }
    }
    Ok((t, delta))
}

pub fn build_base_set(models: &[BatteryModel]) -> Result<BaseSet> {
    let (t, delta) = check_shared_shape(models)?;
    let mut h0 = DVector::zeros(4 * t);
    for m in models {
        h0 += m.rhs();
    }
    h0 /= models.len() as f64;
    Ok(BaseSet { polytope: HPolytope { a: battery_matrix(t, delta), b: h0 }, horizon: t, delta })
}

/// `center + map · base`.
#[derive(Debug, Clone, PartialEq)]
pub struct AHPolytope {
    pub center: DVector<f64>,
    pub map: DMatrix<f64>,
    pub base: HPolytope,
}

impl AHPolytope {
    pub fn new(center: DVector<f64>, map: DMatrix<f64>, base: HPolytope) -> Result<Self> {
        if map.ncols() != base.dim() || map.nrows() != center.len() {
            return Err(Error::Dimension("map does not match base or center".into()));
        }
        Ok(AHPolytope { center, map, base })
    }

    pub fn image(&self, u0: &DVector<f64>) -> DVector<f64> {
        &self.center + &self.map * u0
    }
}

/// `A x ≤ b + tol·(1+|b|)` row by row.
pub fn contains_point(p: &HPolytope, x: &DVector<f64>, tol: f64) -> bool {
    let ax = &p.a * x;
    ax.iter().zip(p.b.iter()).all(|(l, r)| *l <= r + tol * (1.0 + r.abs()))
}

/// Largest scaled row violation `max(0, (a·x − b)/(1+|b|))`.
pub fn max_violation(p: &HPolytope, x: &DVector<f64>) -> f64 {
    let ax = &p.a * x;
    ax.iter().zip(p.b.iter()).map(|(l, r)| ((l - r) / (1.0 + r.abs())).max(0.0)).fold(0.0, f64::max)
}

/// A maximizer of `cᵀx` over `p`.
pub fn support_point(p: &HPolytope, c: &DVector<f64>) -> Result<DVector<f64>> {
    if c.len() != p.dim() {
        return Err(Error::Dimension("direction does not match polytope dimension".into()));
    }
    let mut lp = LinearProgram::new(Objective::Maximize);
    let x = lp.free_block("x", p.dim(), 1);
    for j in 0..p.dim() {
        lp.set_cost(x.get(j), c[j]);
    }
    add_membership_rows(&mut lp, p, |j| LinExpr::var(x.get(j)));
    let sol = lp::solve_lp(&lp, lp::default_tol());
    match sol.status {
        LpStatus::Optimal => Ok(DVector::from_vec(sol.block_vec(&x))),
        LpStatus::Unbounded => Err(Error::Unbounded("support direction".into())),
        LpStatus::Infeasible => Err(Error::Empty),
        s => Err(Error::solver("support point", s)),
    }
}

/// Adds `A·x ≤ b` where `x_j` is given by `coord(j)`.
pub(crate) fn add_membership_rows(
    lp: &mut LinearProgram,
    p: &HPolytope,
    coord: impl Fn(usize) -> LinExpr,
) {
    let coords: Vec<LinExpr> = (0..p.dim()).map(coord).collect();
    for i in 0..p.num_rows() {
        let mut e = LinExpr::new();
        for (j, cj) in coords.iter().enumerate() {
            let aij = p.a[(i, j)];
            if aij != 0.0 {
                e.add_expr(cj, aij);
            }
        }
        lp.add_le(e, p.b[i]);
    }
}

/// Center and radius of the largest inscribed ball.
pub fn chebyshev_center(p: &HPolytope) -> Result<(DVector<f64>, f64)> {
    if p.num_rows() == 0 {
        return Err(Error::Invalid("polytope has no rows".into()));
    }
    let mut lp = LinearProgram::new(Objective::Maximize);
    let x = lp.free_block("x", p.dim(), 1);
    let r = lp.nonneg_block("r", 1, 1).get(0);
    lp.set_cost(r, 1.0);
    for i in 0..p.num_rows() {
        let mut e = LinExpr::term(r, p.a.row(i).norm());
        for j in 0..p.dim() {
            e.add(x.get(j), p.a[(i, j)]);
        }
        lp.add_le(e, p.b[i]);
    }
    let sol = lp::solve_lp(&lp, lp::default_tol());
    match sol.status {
        LpStatus::Optimal => Ok((DVector::from_vec(sol.block_vec(&x)), sol.value(r))),
        LpStatus::Infeasible => Err(Error::Empty),
        LpStatus::Unbounded => Err(Error::Unbounded("inscribed ball radius".into())),
        s => Err(Error::solver("chebyshev center", s)),
    }
}

pub fn chebyshev_radius(p: &HPolytope) -> Result<f64> {
    chebyshev_center(p).map(|(_, r)| r)
}

/// `(sign, ln|det M|)` by LU with partial pivoting; sign 0 when a pivot falls below
/// `1e-12·max|M_ij|`.
pub fn log_abs_det(m: &DMatrix<f64>) -> (i8, f64) {
    assert!(m.is_square(), "log_abs_det needs a square matrix");
    let n = m.nrows();
    if n == 0 {
        return (1, 0.0);
    }
    let scale = m.amax();
    if scale == 0.0 {
        return (0, f64::NEG_INFINITY);
    }
    let thresh = 1e-12 * scale;
    let mut a = m.clone();
    let mut sign = 1i8;
    let mut logdet = 0.0;
    for k in 0..n {
        let (mut p, mut best) = (k, a[(k, k)].abs());
        for i in k + 1..n {
            if a[(i, k)].abs() > best {
                best = a[(i, k)].abs();
                p = i;
            }
        }
        if best <= thresh {
            return (0, f64::NEG_INFINITY);
        }
        if p != k {
            a.swap_rows(p, k);
            sign = -sign;
        }
        let pivot = a[(k, k)];
        if pivot < 0.0 {
            sign = -sign;
        }
        logdet += pivot.abs().ln();
        for i in k + 1..n {
            let f = a[(i, k)] / pivot;
            if f != 0.0 {
                for j in k + 1..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
    }
    (sign, logdet)
}

/// `ln(|det inner| / |det outer|)`, `-inf` for a singular inner map.
pub fn log_volume_ratio(inner: &DMatrix<f64>, outer: &DMatrix<f64>) -> Result<f64> {
    if inner.shape() != outer.shape() || !inner.is_square() {
        return Err(Error::Dimension("volume ratio needs square maps of equal size".into()));
    }
    let (so, lo) = log_abs_det(outer);
    if so == 0 {
        return Err(Error::Singular);
    }
    let (si, li) = log_abs_det(inner);
    Ok(if si == 0 { f64::NEG_INFINITY } else { li - lo })
}

pub fn volume_ratio(inner: &DMatrix<f64>, outer: &DMatrix<f64>) -> Result<f64> {
    log_volume_ratio(inner, outer).map(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_box() -> HPolytope {
        HPolytope::from_box(&[0.0, 0.0], &[1.0, 1.0])
    }

    fn triangle(s: f64) -> HPolytope {
        HPolytope::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            DVector::from_vec(vec![s, 0.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn cumulative_matrix_examples() {
        let l = cumulative_matrix(3, 1.0);
        assert_eq!(l, DMatrix::from_row_slice(3, 3, &[1., 0., 0., 1., 1., 0., 1., 1., 1.]));
        assert_eq!(cumulative_matrix(1, 0.5), DMatrix::from_element(1, 1, 0.5));
        let d = 2.0 / 3.0;
        assert_eq!(cumulative_matrix(2, d), DMatrix::from_row_slice(2, 2, &[d, 0., d, d]));
    }

    #[test]
    fn battery_stacking() {
        let m = BatteryModel {
            u_lo: vec![0.0],
            u_hi: vec![2.0],
            x_lo: vec![0.0],
            x_hi: vec![2.0],
            delta: 1.0,
        };
        let p = battery_to_hpolytope(&m);
        assert_eq!(p.a, DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]));
        assert_eq!(p.b.as_slice(), &[2.0, 0.0, 2.0, 0.0]);

        let m = BatteryModel {
            u_lo: vec![0.0; 2],
            u_hi: vec![1.0; 2],
            x_lo: vec![-10.0; 2],
            x_hi: vec![10.0; 2],
            delta: 1.0,
        };
        let b = battery_to_hpolytope(&m).b;
        assert_eq!(b.as_slice(), &[10., 10., 10., 10., 1., 1., 0., 0.]);
    }

    #[test]
    fn base_set_averages() {
        let mk = |w: f64| BatteryModel {
            u_lo: vec![0.0],
            u_hi: vec![w],
            x_lo: vec![0.0],
            x_hi: vec![w],
            delta: 1.0,
        };
        let base = build_base_set(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!(base.h0().as_slice(), &[2.0, 0.0, 2.0, 0.0]);

        let same = build_base_set(&[mk(1.5), mk(1.5), mk(1.5)]).unwrap();
        assert_eq!(same.h0(), &mk(1.5).rhs());

        let wide = |w: f64| BatteryModel {
            u_lo: vec![0.0; 2],
            u_hi: vec![w; 2],
            x_lo: vec![-100.0; 2],
            x_hi: vec![100.0; 2],
            delta: 1.0,
        };
        let b2 = build_base_set(&[wide(1.0), wide(2.0)]).unwrap();
        assert_eq!(&b2.h0().as_slice()[4..], &[1.5, 1.5, 0.0, 0.0]);

        let mut other = mk(1.0);
        other.delta = 0.5;
        assert!(matches!(build_base_set(&[mk(1.0), other]), Err(Error::Dimension(_))));
    }

    #[test]
    fn membership() {
        let p = unit_box();
        assert!(contains_point(&p, &DVector::from_vec(vec![0.5, 0.5]), 1e-9));
        assert!(!contains_point(&p, &DVector::from_vec(vec![1.0 + 1e-3, 0.0]), 1e-6));
        assert!(contains_point(&p, &DVector::from_vec(vec![1.0, 1.0]), 1e-9));
    }

    #[test]
    fn support_points() {
        let p = unit_box();
        let s = support_point(&p, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(s, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-6);
        let s = support_point(&p, &DVector::from_vec(vec![-1.0, 0.0])).unwrap();
        assert!(s[0].abs() < 1e-6);
        let s = support_point(&triangle(1.0), &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(s, DVector::from_vec(vec![1.0, 0.0]), epsilon = 1e-6);
        let half_plane = HPolytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DVector::from_vec(vec![1.0])).unwrap();
        assert!(matches!(
            support_point(&half_plane, &DVector::from_vec(vec![0.0, 1.0])),
            Err(Error::Unbounded(_))
        ));
    }

    #[test]
    fn chebyshev_examples() {
        let r = chebyshev_radius(&HPolytope::from_box(&[0.0, 0.0], &[2.0, 2.0])).unwrap();
        assert_relative_eq!(r, 1.0, epsilon = 1e-7);
        let flat = HPolytope::from_box(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(chebyshev_radius(&flat).unwrap().abs() < 1e-7);
        let r = chebyshev_radius(&triangle(2.0)).unwrap();
        assert_relative_eq!(r, 2.0 - 2f64.sqrt(), epsilon = 1e-7);
        let empty = HPolytope::from_box(&[1.0], &[0.0]);
        assert!(matches!(chebyshev_radius(&empty), Err(Error::Empty)));
    }

    #[test]
    fn log_det_examples() {
        let (s, l) = log_abs_det(&(DMatrix::identity(2, 2) * 2.0));
        assert_eq!(s, 1);
        assert_relative_eq!(l, 4f64.ln(), epsilon = 1e-14);
        let (s, _) = log_abs_det(&DMatrix::from_element(2, 2, 1.0));
        assert_eq!(s, 0);
        let (s, l) = log_abs_det(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!((s, l), (-1, 0.0));
    }

    #[test]
    fn volume_ratio_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(volume_ratio(&(&i2 * 2.0), &(&i2 * 2.0)).unwrap(), 1.0);
        assert_relative_eq!(volume_ratio(&i2, &(&i2 * 2.0)).unwrap(), 0.25);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        assert_relative_eq!(volume_ratio(&p, &(&i2 * 2.0)).unwrap(), 1.0);
        assert!(matches!(volume_ratio(&i2, &DMatrix::zeros(2, 2)), Err(Error::Singular)));
        assert_eq!(volume_ratio(&DMatrix::zeros(2, 2), &i2).unwrap(), 0.0);
    }

    #[test]
    fn json_field_names() {
        let p = unit_box();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["A"][0], serde_json::json!([1.0, 0.0]));
        assert_eq!(v["b"].as_array().unwrap().len(), 4);
        let back: HPolytope = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
        let bad = serde_json::json!({"A": [[1.0], [2.0]], "b": [1.0]});
        assert!(serde_json::from_value::<HPolytope>(bad).is_err());
    }

    #[test]
    fn flat_coordinates_found() {
        let m = BatteryModel {
            u_lo: vec![0.0, -1.0],
            u_hi: vec![0.0, 1.0],
            x_lo: vec![-5.0; 2],
            x_hi: vec![5.0; 2],
            delta: 1.0,
        };
        let base = build_base_set(&[m]).unwrap();
        assert_eq!(base.flat_coordinates(1e-9), vec![0]);
    }
}
