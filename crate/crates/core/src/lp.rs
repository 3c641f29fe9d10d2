//! Linear programs with named variable blocks, solved by an interior-point backend.
//!
//! Every optimization in the crate goes through [`LinearProgram`] and [`solve_lp`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

/// Default feasibility/optimality tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;

static DEFAULT_TOL_BITS: AtomicU64 = AtomicU64::new(0);

/// Process-wide tolerance used by the high-level routines.
pub fn default_tol() -> f64 {
    let bits = DEFAULT_TOL_BITS.load(Ordering::Relaxed);
    if bits == 0 {
        DEFAULT_TOL
    } else {
        f64::from_bits(bits)
    }
}

pub fn set_default_tol(tol: f64) {
    assert!(tol > 0.0 && tol.is_finite(), "tolerance must be positive");
    DEFAULT_TOL_BITS.store(tol.to_bits(), Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

/// A contiguous rows×cols block of variables, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl VarBlock {
    pub fn at(&self, i: usize, j: usize) -> Var {
        debug_assert!(i < self.rows && j < self.cols);
        Var(self.offset + i * self.cols + j)
    }

    pub fn get(&self, k: usize) -> Var {
        debug_assert!(k < self.len());
        Var(self.offset + k)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.len()).map(move |k| Var(self.offset + k))
    }
}

/// Affine expression `Σ coef·var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { terms: Vec::new(), constant: c }
    }

    pub fn var(v: Var) -> Self {
        LinExpr { terms: vec![(v, 1.0)], constant: 0.0 }
    }

    pub fn term(v: Var, c: f64) -> Self {
        LinExpr { terms: vec![(v, c)], constant: 0.0 }
    }

    pub fn add(&mut self, v: Var, c: f64) -> &mut Self {
        if c != 0.0 {
            self.terms.push((v, c));
        }
        self
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        if scale != 0.0 {
            self.terms.extend(other.terms.iter().map(|&(v, c)| (v, c * scale)));
            self.constant += other.constant * scale;
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v.0]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Le,
    Eq,
}

#[derive(Debug, Clone)]
struct Row {
    terms: Vec<(Var, f64)>,
    kind: RowKind,
    rhs: f64,
}

/// A linear program over named variable blocks.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub sense: Objective,
    blocks: Vec<VarBlock>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new(sense: Objective) -> Self {
        LinearProgram {
            sense,
            blocks: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            cost: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Declares a block of variables with common bounds (use infinities for free variables).
    pub fn add_block(&mut self, name: &str, rows: usize, cols: usize, lo: f64, hi: f64) -> VarBlock {
        assert!(
            !self.blocks.iter().any(|b| b.name == name),
            "duplicate variable block {name}"
        );
        let block = VarBlock { name: name.to_string(), offset: self.cost.len(), rows, cols };
        let n = rows * cols;
        self.lower.extend(std::iter::repeat_n(lo, n));
        self.upper.extend(std::iter::repeat_n(hi, n));
        self.cost.extend(std::iter::repeat_n(0.0, n));
        self.blocks.push(block.clone());
        block
    }

    pub fn free_block(&mut self, name: &str, rows: usize, cols: usize) -> VarBlock {
        self.add_block(name, rows, cols, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn nonneg_block(&mut self, name: &str, rows: usize, cols: usize) -> VarBlock {
        self.add_block(name, rows, cols, 0.0, f64::INFINITY)
    }

    pub fn blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_eq_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.kind == RowKind::Eq).count()
    }

    pub fn set_bounds(&mut self, v: Var, lo: f64, hi: f64) {
        self.lower[v.0] = lo;
        self.upper[v.0] = hi;
    }

    pub fn bounds(&self, v: Var) -> (f64, f64) {
        (self.lower[v.0], self.upper[v.0])
    }

    pub fn set_cost(&mut self, v: Var, c: f64) {
        self.cost[v.0] = c;
    }

    pub fn add_cost(&mut self, v: Var, c: f64) {
        self.cost[v.0] += c;
    }

    /// `expr ≤ rhs`
    pub fn add_le(&mut self, expr: LinExpr, rhs: f64) {
        self.push_row(expr, RowKind::Le, rhs);
    }

    /// `expr ≥ rhs`
    pub fn add_ge(&mut self, mut expr: LinExpr, rhs: f64) {
        for t in expr.terms.iter_mut() {
            t.1 = -t.1;
        }
        expr.constant = -expr.constant;
        self.push_row(expr, RowKind::Le, -rhs);
    }

    /// `expr = rhs`
    pub fn add_eq(&mut self, expr: LinExpr, rhs: f64) {
        self.push_row(expr, RowKind::Eq, rhs);
    }

    fn push_row(&mut self, expr: LinExpr, kind: RowKind, rhs: f64) {
        let rhs = rhs - expr.constant;
        assert!(rhs.is_finite(), "constraint rhs must be finite");
        for &(v, c) in &expr.terms {
            assert!(v.0 < self.cost.len(), "constraint references an undeclared variable");
            assert!(c.is_finite(), "constraint coefficient must be finite");
        }
        self.rows.push(Row { terms: expr.terms, kind, rhs });
    }

    /// Largest constraint/bound violation of `x`, each row scaled by `1 + |rhs| + Σ|a_j x_j|`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for row in &self.rows {
            let mut lhs = 0.0;
            let mut mag = 0.0;
            for &(v, c) in &row.terms {
                lhs += c * x[v.0];
                mag += (c * x[v.0]).abs();
            }
            let scale = 1.0 + row.rhs.abs() + mag;
            let viol = match row.kind {
                RowKind::Le => (lhs - row.rhs).max(0.0),
                RowKind::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(viol / scale);
        }
        for (k, &xk) in x.iter().enumerate() {
            let lo = self.lower[k];
            let hi = self.upper[k];
            if xk < lo {
                worst = worst.max((lo - xk) / (1.0 + lo.abs()));
            }
            if xk > hi {
                worst = worst.max((xk - hi) / (1.0 + hi.abs()));
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub objective_value: f64,
    /// Primal point, present iff `status == Optimal`.
    pub x: Option<Vec<f64>>,
    /// Scaled residual of the returned point (see [`LinearProgram::max_violation`]).
    pub max_violation: f64,
    pub iterations: u32,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    pub fn value(&self, v: Var) -> f64 {
        self.x.as_ref().expect("no primal values for a non-optimal LP")[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(self.x.as_ref().expect("no primal values for a non-optimal LP"))
    }

    pub fn block_values(&self, b: &VarBlock) -> DMatrix<f64> {
        let x = self.x.as_ref().expect("no primal values for a non-optimal LP");
        DMatrix::from_row_slice(b.rows, b.cols, &x[b.offset..b.offset + b.len()])
    }

    pub fn block_vec(&self, b: &VarBlock) -> Vec<f64> {
        let x = self.x.as_ref().expect("no primal values for a non-optimal LP");
        x[b.offset..b.offset + b.len()].to_vec()
    }

    /// All block values keyed by block name.
    pub fn values(&self, lp: &LinearProgram) -> BTreeMap<String, DMatrix<f64>> {
        match &self.x {
            None => BTreeMap::new(),
            Some(_) => lp.blocks.iter().map(|b| (b.name.clone(), self.block_values(b))).collect(),
        }
    }
}

/// Scaled residual above which a solver "optimal" is downgraded to a numerical failure.
const ACCEPT_FACTOR: f64 = 1e3;

/// Solves `lp` to tolerance `tol`.
pub fn solve_lp(lp: &LinearProgram, tol: f64) -> LpSolution {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = lp.num_vars();
    let sign = match lp.sense {
        Objective::Maximize => -1.0,
        Objective::Minimize => 1.0,
    };

    let mut ii = Vec::new();
    let mut jj = Vec::new();
    let mut vv = Vec::new();
    let mut b = Vec::new();
    let mut r = 0usize;
    let mut push_row = |terms: &[(Var, f64)], rhs: f64, b: &mut Vec<f64>| {
        for &(v, c) in terms {
            ii.push(r);
            jj.push(v.0);
            vv.push(c);
        }
        b.push(rhs);
        r += 1;
    };
    let mut n_zero = 0;
    for row in lp.rows.iter().filter(|r| r.kind == RowKind::Eq) {
        push_row(&row.terms, row.rhs, &mut b);
        n_zero += 1;
    }
    for row in lp.rows.iter().filter(|r| r.kind == RowKind::Le) {
        push_row(&row.terms, row.rhs, &mut b);
    }
    for k in 0..n {
        if lp.lower[k].is_finite() {
            push_row(&[(Var(k), -1.0)], -lp.lower[k], &mut b);
        }
        if lp.upper[k].is_finite() {
            push_row(&[(Var(k), 1.0)], lp.upper[k], &mut b);
        }
    }
    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, ii, jj, vv);
    let p = CscMatrix::zeros((n, n));
    let q: Vec<f64> = lp.cost.iter().map(|c| sign * c).collect();
    let mut cones = Vec::new();
    if n_zero > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_zero));
    }
    if m > n_zero {
        cones.push(SupportedConeT::NonnegativeConeT(m - n_zero));
    }

    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_feas(tol)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .max_iter(400)
        .build()
        .expect("valid solver settings");

    let failed = |status| LpSolution {
        status,
        objective_value: f64::NAN,
        x: None,
        max_violation: f64::NAN,
        iterations: 0,
    };
    let mut solver = match DefaultSolver::new(&p, &q, &a, &b, &cones, settings) {
        Ok(s) => s,
        Err(_) => return failed(LpStatus::NumericalFailure),
    };
    solver.solve();
    let sol = &solver.solution;
    let iterations = sol.iterations;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let mut x = sol.x.clone();
            for k in 0..n {
                x[k] = x[k].clamp(lp.lower[k], lp.upper[k]);
            }
            let viol = lp.max_violation(&x);
            let objective_value = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
            if !(viol <= ACCEPT_FACTOR * tol) {
                return LpSolution { iterations, max_violation: viol, ..failed(LpStatus::NumericalFailure) };
            }
            LpSolution {
                status: LpStatus::Optimal,
                objective_value,
                x: Some(x),
                max_violation: viol,
                iterations,
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            LpSolution { iterations, ..failed(LpStatus::Infeasible) }
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            LpSolution { iterations, ..failed(LpStatus::Unbounded) }
        }
        _ => LpSolution { iterations, ..failed(LpStatus::NumericalFailure) },
    }
}
