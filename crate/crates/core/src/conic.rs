//! A small modelling layer for linear and second-order cone programs.
//!
//! Programs are assembled from named variables and named constraints so that
//! callers can address primal values and dual values by name after a solve.
//! Solving is delegated to the Clarabel interior-point solver; the rest of the
//! crate only sees [`ConicProgram`] and [`ProgramSolution`].
//!
//! Dual sign convention used throughout:
//!
//! * equality rows report the sensitivity `d(optimal objective) / d(rhs)` in the
//!   declared objective sense;
//! * inequality rows (and variable bounds, reported as `name#lb` / `name#ub`)
//!   report the nonnegative Lagrange multiplier of the row.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::KernelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Affine expression `sum(coef * var) + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn term(v: VarId, c: f64) -> Self {
        Self {
            terms: vec![(v, c)],
            constant: 0.0,
        }
    }

    pub fn from_terms(terms: &[(VarId, f64)]) -> Self {
        Self {
            terms: terms.to_vec(),
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: VarId, c: f64) -> &mut Self {
        self.terms.push((v, c));
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        self.terms
            .extend(other.terms.iter().map(|&(v, c)| (v, c * scale)));
        self.constant += other.constant * scale;
        self
    }

    pub fn with(mut self, v: VarId, c: f64) -> Self {
        self.terms.push((v, c));
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|&(v, c)| (v, c * k)).collect(),
            constant: self.constant * k,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v.0]).sum::<f64>()
    }

    /// Rewrites variable indices through `map` (used when embedding programs).
    pub fn remap(&self, map: &[VarId]) -> Self {
        Self {
            terms: self.terms.iter().map(|&(v, c)| (map[v.0], c)).collect(),
            constant: self.constant,
        }
    }

    /// Merges duplicate variables and drops zero coefficients.
    pub fn compact(&self) -> Self {
        let mut acc: Vec<(VarId, f64)> = Vec::with_capacity(self.terms.len());
        let mut sorted = self.terms.clone();
        sorted.sort_by_key(|t| t.0);
        for (v, c) in sorted {
            match acc.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => acc.push((v, c)),
            }
        }
        acc.retain(|t| t.1 != 0.0);
        Self {
            terms: acc,
            constant: self.constant,
        }
    }
}

impl From<VarId> for LinExpr {
    fn from(v: VarId) -> Self {
        LinExpr::term(v, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub name: String,
    pub expr: LinExpr,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub enum ConeKind {
    /// `||vector|| <= bound`
    SecondOrder { bound: LinExpr, vector: Vec<LinExpr> },
    /// `x * y >= ||vector||^2`, `x, y >= 0`
    Rotated {
        x: LinExpr,
        y: LinExpr,
        vector: Vec<LinExpr>,
    },
}

#[derive(Debug, Clone)]
pub struct ConeConstraint {
    pub name: String,
    pub kind: ConeKind,
}

impl ConeConstraint {
    /// Returns `(lhs, rhs)` of the cone at `x`; the cone holds when `lhs <= rhs`.
    ///
    /// For a second-order cone these are `(||v||, t)`; for a rotated cone
    /// `(||v||^2, x*y)`.
    pub fn sides(&self, x: &[f64]) -> (f64, f64) {
        match &self.kind {
            ConeKind::SecondOrder { bound, vector } => {
                let n = vector.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
                (n, bound.eval(x))
            }
            ConeKind::Rotated { x: a, y: b, vector } => {
                let n2 = vector.iter().map(|e| e.eval(x).powi(2)).sum::<f64>();
                (n2, a.eval(x) * b.eval(x))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Tolerances {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: u32,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            gap_tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericFailure,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ProgramSolution {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    names: HashMap<String, usize>,
    pub duals: HashMap<String, f64>,
    pub cone_duals: HashMap<String, Vec<f64>>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
    pub residuals: Residuals,
}

impl ProgramSolution {
    pub fn value(&self, v: VarId) -> f64 {
        self.primal[v.0]
    }

    pub fn value_by_name(&self, name: &str) -> Option<f64> {
        self.names.get(name).map(|&i| self.primal[i])
    }

    pub fn dual(&self, name: &str) -> Option<f64> {
        self.duals.get(name).copied()
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Maps a non-optimal status onto the corresponding model error.
    pub fn require_optimal(&self, program: &str) -> crate::error::Result<()> {
        use crate::error::ModelError;
        match self.status {
            SolveStatus::Optimal => Ok(()),
            SolveStatus::Infeasible => Err(ModelError::Infeasible {
                program: program.to_string(),
            }),
            SolveStatus::Unbounded => Err(ModelError::Unbounded {
                program: program.to_string(),
            }),
            SolveStatus::NumericFailure => Err(ModelError::Numeric {
                program: program.to_string(),
                primal: self.residuals.primal,
                dual: self.residuals.dual,
                gap: self.residuals.gap,
            }),
        }
    }
}

/// Linear or second-order cone program with named variables and constraints.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub name: String,
    pub sense: Sense,
    objective: LinExpr,
    quadratic: Vec<(VarId, VarId, f64)>,
    variables: Vec<Variable>,
    linear: Vec<LinearConstraint>,
    cones: Vec<ConeConstraint>,
    var_index: HashMap<String, usize>,
    con_index: HashMap<String, ConstraintRef>,
}

#[derive(Debug, Clone, Copy)]
enum ConstraintRef {
    Linear(usize),
    Cone(usize),
}

impl ConicProgram {
    pub fn new(name: impl Into<String>, sense: Sense) -> Self {
        Self {
            name: name.into(),
            sense,
            objective: LinExpr::new(),
            quadratic: Vec::new(),
            variables: Vec::new(),
            linear: Vec::new(),
            cones: Vec::new(),
            var_index: HashMap::new(),
            con_index: HashMap::new(),
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> Result<VarId, KernelError> {
        let name = name.into();
        if lower > upper {
            return Err(KernelError::InvalidBounds(name, lower, upper));
        }
        if lower.is_nan() || upper.is_nan() || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
            return Err(KernelError::NonFinite(name));
        }
        if self.var_index.contains_key(&name) {
            return Err(KernelError::DuplicateName(name));
        }
        let id = self.variables.len();
        self.var_index.insert(name.clone(), id);
        self.variables.push(Variable { name, lower, upper });
        Ok(VarId(id))
    }

    pub fn free_var(&mut self, name: impl Into<String>) -> Result<VarId, KernelError> {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn nonneg_var(&mut self, name: impl Into<String>) -> Result<VarId, KernelError> {
        self.add_var(name, 0.0, f64::INFINITY)
    }

    pub fn set_bounds(&mut self, v: VarId, lower: f64, upper: f64) -> Result<(), KernelError> {
        let var = self
            .variables
            .get_mut(v.0)
            .ok_or(KernelError::UnknownVariable(v.0))?;
        if lower > upper {
            return Err(KernelError::InvalidBounds(var.name.clone(), lower, upper));
        }
        var.lower = lower;
        var.upper = upper;
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.var_index.get(name).map(|&i| VarId(i))
    }

    pub fn variable(&self, v: VarId) -> &Variable {
        &self.variables[v.0]
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn linear_constraints(&self) -> &[LinearConstraint] {
        &self.linear
    }

    pub fn cones(&self) -> &[ConeConstraint] {
        &self.cones
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn quadratic_terms(&self) -> &[(VarId, VarId, f64)] {
        &self.quadratic
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn set_objective(&mut self, expr: LinExpr) {
        self.objective = expr;
    }

    pub fn add_objective_term(&mut self, v: VarId, c: f64) {
        self.objective.add_term(v, c);
    }

    pub fn add_objective_constant(&mut self, c: f64) {
        self.objective.add_constant(c);
    }

    /// Adds `c * x_i * x_j` to the objective. Such terms are only evaluated.
    pub fn add_quadratic_term(&mut self, i: VarId, j: VarId, c: f64) {
        self.quadratic.push((i, j, c));
    }

    fn check_expr(&self, name: &str, e: &LinExpr) -> Result<(), KernelError> {
        if !e.constant.is_finite() {
            return Err(KernelError::NonFinite(name.to_string()));
        }
        for &(v, c) in &e.terms {
            if v.0 >= self.variables.len() {
                return Err(KernelError::UnknownVariable(v.0));
            }
            if !c.is_finite() {
                return Err(KernelError::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    fn claim_name(&mut self, name: &str, r: ConstraintRef) -> Result<(), KernelError> {
        if self.con_index.contains_key(name) {
            return Err(KernelError::DuplicateName(name.to_string()));
        }
        self.con_index.insert(name.to_string(), r);
        Ok(())
    }

    pub fn add_linear(
        &mut self,
        name: impl Into<String>,
        expr: LinExpr,
        relation: Relation,
        rhs: f64,
    ) -> Result<(), KernelError> {
        let name = name.into();
        self.check_expr(&name, &expr)?;
        if !rhs.is_finite() {
            return Err(KernelError::NonFinite(name));
        }
        self.claim_name(&name, ConstraintRef::Linear(self.linear.len()))?;
        self.linear.push(LinearConstraint {
            name,
            expr,
            relation,
            rhs,
        });
        Ok(())
    }

    /// `||vector|| <= bound`
    pub fn add_soc(
        &mut self,
        name: impl Into<String>,
        bound: LinExpr,
        vector: Vec<LinExpr>,
    ) -> Result<(), KernelError> {
        let name = name.into();
        self.check_expr(&name, &bound)?;
        for e in &vector {
            self.check_expr(&name, e)?;
        }
        self.claim_name(&name, ConstraintRef::Cone(self.cones.len()))?;
        self.cones.push(ConeConstraint {
            name,
            kind: ConeKind::SecondOrder { bound, vector },
        });
        Ok(())
    }

    /// `x * y >= ||vector||^2` with `x, y >= 0`
    pub fn add_rotated_cone(
        &mut self,
        name: impl Into<String>,
        x: LinExpr,
        y: LinExpr,
        vector: Vec<LinExpr>,
    ) -> Result<(), KernelError> {
        let name = name.into();
        self.check_expr(&name, &x)?;
        self.check_expr(&name, &y)?;
        for e in &vector {
            self.check_expr(&name, e)?;
        }
        self.claim_name(&name, ConstraintRef::Cone(self.cones.len()))?;
        self.cones.push(ConeConstraint {
            name,
            kind: ConeKind::Rotated { x, y, vector },
        });
        Ok(())
    }

    pub fn has_constraint(&self, name: &str) -> bool {
        self.con_index.contains_key(name)
    }

    pub fn linear_constraint(&self, name: &str) -> Option<&LinearConstraint> {
        match self.con_index.get(name) {
            Some(ConstraintRef::Linear(i)) => Some(&self.linear[*i]),
            _ => None,
        }
    }

    pub fn cone(&self, name: &str) -> Option<&ConeConstraint> {
        match self.con_index.get(name) {
            Some(ConstraintRef::Cone(i)) => Some(&self.cones[*i]),
            _ => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.cones.is_empty()
    }

    /// Copies every variable and constraint of `other` into `self` with names
    /// prefixed by `prefix`. The objective of `other` is not copied. Returns
    /// the index map from `other`'s variables to the new ones.
    pub fn embed(&mut self, other: &ConicProgram, prefix: &str) -> Result<Vec<VarId>, KernelError> {
        let mut map = Vec::with_capacity(other.variables.len());
        for v in &other.variables {
            map.push(self.add_var(format!("{prefix}{}", v.name), v.lower, v.upper)?);
        }
        for c in &other.linear {
            self.add_linear(
                format!("{prefix}{}", c.name),
                c.expr.remap(&map),
                c.relation,
                c.rhs,
            )?;
        }
        for c in &other.cones {
            let name = format!("{prefix}{}", c.name);
            match &c.kind {
                ConeKind::SecondOrder { bound, vector } => self.add_soc(
                    name,
                    bound.remap(&map),
                    vector.iter().map(|e| e.remap(&map)).collect(),
                )?,
                ConeKind::Rotated { x, y, vector } => self.add_rotated_cone(
                    name,
                    x.remap(&map),
                    y.remap(&map),
                    vector.iter().map(|e| e.remap(&map)).collect(),
                )?,
            }
        }
        Ok(map)
    }

    /// Objective value at `x`, including quadratic terms.
    pub fn evaluate_objective(&self, x: &[f64]) -> f64 {
        self.objective.eval(x)
            + self
                .quadratic
                .iter()
                .map(|&(i, j, c)| c * x[i.0] * x[j.0])
                .sum::<f64>()
    }

    /// Largest scaled violation of bounds, linear rows and cones at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (v, &xi) in self.variables.iter().zip(x) {
            if v.lower.is_finite() {
                worst = worst.max((v.lower - xi) / (1.0 + v.lower.abs().max(xmax)));
            }
            if v.upper.is_finite() {
                worst = worst.max((xi - v.upper) / (1.0 + v.upper.abs().max(xmax)));
            }
        }
        for c in &self.linear {
            let lhs = c.expr.eval(x);
            // relative to the largest term so rows of big multipliers are not
            // judged on absolute cancellation error
            let largest = c
                .expr
                .terms
                .iter()
                .map(|&(v, a)| (a * x[v.0]).abs())
                .fold(c.expr.constant.abs(), f64::max);
            let scale = 1.0 + c.rhs.abs().max(largest);
            let viol = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(viol / scale);
        }
        for c in &self.cones {
            let (lhs, rhs) = c.sides(x);
            worst = worst.max((lhs - rhs) / (1.0 + rhs.abs()));
        }
        worst.max(0.0)
    }
}

/// Residual `rhs - lhs` of a cone at a solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConeResidual {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub relative: f64,
}

/// Measures how far each named cone is from holding with equality.
pub fn check_cone_tightness(
    program: &ConicProgram,
    solution: &ProgramSolution,
    which: &[String],
) -> Result<Vec<ConeResidual>, KernelError> {
    which
        .iter()
        .map(|name| {
            let cone = program
                .cone(name)
                .ok_or_else(|| KernelError::UnknownConstraint(name.clone()))?;
            let (lhs, rhs) = cone.sides(&solution.primal);
            let residual = rhs - lhs;
            let relative = if rhs.abs() > 1e-9 { residual / rhs.abs() } else { residual };
            Ok(ConeResidual {
                name: name.clone(),
                lhs,
                rhs,
                residual,
                relative,
            })
        })
        .collect()
}

enum RowKind {
    Linear(usize),
    Lower(usize),
    Upper(usize),
    Fixed(usize),
}

struct Triplets {
    rows: usize,
    entries: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
}

impl Triplets {
    fn push_row(&mut self, coeffs: impl IntoIterator<Item = (usize, f64)>, b: f64) -> usize {
        let r = self.rows;
        for (c, v) in coeffs {
            if v != 0.0 {
                self.entries.push((r, c, v));
            }
        }
        self.b.push(b);
        self.rows += 1;
        r
    }

    fn into_csc(mut self, n: usize) -> (CscMatrix<f64>, Vec<f64>) {
        self.entries.sort_by_key(|e| (e.1, e.0));
        let mut colptr = vec![0usize; n + 1];
        let mut rowval = Vec::with_capacity(self.entries.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *nzval.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
        }
        for c in 0..n {
            colptr[c + 1] += colptr[c];
        }
        (CscMatrix::new(self.rows, n, colptr, rowval, nzval), self.b)
    }
}

/// Solves `program` with the interior-point backend.
///
/// Infeasibility and unboundedness are reported through
/// [`ProgramSolution::status`]; an `Err` means the program could not be
/// handed to the solver at all.
pub fn solve(program: &ConicProgram, tol: &Tolerances) -> Result<ProgramSolution, KernelError> {
    if !program.quadratic.is_empty() {
        return Err(KernelError::QuadraticObjective);
    }
    let n = program.variables.len();
    let sign = match program.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut q = vec![0.0; n];
    for &(v, c) in &program.objective.terms {
        q[v.0] += sign * c;
    }

    let mut t = Triplets {
        rows: 0,
        entries: Vec::new(),
        b: Vec::new(),
    };
    let mut kinds: Vec<RowKind> = Vec::new();

    // equality block
    for (i, c) in program.linear.iter().enumerate() {
        if c.relation == Relation::Eq {
            t.push_row(
                c.expr.terms.iter().map(|&(v, a)| (v.0, a)),
                c.rhs - c.expr.constant,
            );
            kinds.push(RowKind::Linear(i));
        }
    }
    for (j, v) in program.variables.iter().enumerate() {
        if v.lower == v.upper {
            t.push_row([(j, 1.0)], v.lower);
            kinds.push(RowKind::Fixed(j));
        }
    }
    let n_zero = t.rows;

    // inequality block, every row as a*x + s = b with s >= 0
    for (i, c) in program.linear.iter().enumerate() {
        match c.relation {
            Relation::Le => {
                t.push_row(
                    c.expr.terms.iter().map(|&(v, a)| (v.0, a)),
                    c.rhs - c.expr.constant,
                );
            }
            Relation::Ge => {
                t.push_row(
                    c.expr.terms.iter().map(|&(v, a)| (v.0, -a)),
                    c.expr.constant - c.rhs,
                );
            }
            Relation::Eq => continue,
        }
        kinds.push(RowKind::Linear(i));
    }
    for (j, v) in program.variables.iter().enumerate() {
        if v.lower == v.upper {
            continue;
        }
        if v.lower.is_finite() {
            t.push_row([(j, -1.0)], -v.lower);
            kinds.push(RowKind::Lower(j));
        }
        if v.upper.is_finite() {
            t.push_row([(j, 1.0)], v.upper);
            kinds.push(RowKind::Upper(j));
        }
    }
    let n_nonneg = t.rows - n_zero;

    // cone blocks: rows hold s = b - A x = [t; v]
    let mut cone_rows: Vec<(usize, usize)> = Vec::with_capacity(program.cones.len());
    let push_affine = |t: &mut Triplets, e: &LinExpr, scale: f64| {
        t.push_row(
            e.terms.iter().map(|&(v, a)| (v.0, -a * scale)),
            e.constant * scale,
        );
    };
    for c in &program.cones {
        let start = t.rows;
        match &c.kind {
            ConeKind::SecondOrder { bound, vector } => {
                push_affine(&mut t, bound, 1.0);
                for e in vector {
                    push_affine(&mut t, e, 1.0);
                }
            }
            ConeKind::Rotated { x, y, vector } => {
                // x*y >= ||z||^2  <=>  ||(2z, x - y)|| <= x + y
                let mut sum = x.clone();
                sum.add_expr(y, 1.0);
                let mut diff = x.clone();
                diff.add_expr(y, -1.0);
                push_affine(&mut t, &sum, 1.0);
                for e in vector {
                    push_affine(&mut t, e, 2.0);
                }
                push_affine(&mut t, &diff, 1.0);
            }
        }
        cone_rows.push((start, t.rows - start));
    }

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_zero > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_zero));
    }
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }
    for &(_, dim) in &cone_rows {
        cones.push(SupportedConeT::SecondOrderConeT(dim));
    }

    let m = t.rows;
    let (a, b) = t.into_csc(n);
    let p = CscMatrix::new(n, n, vec![0; n + 1], Vec::new(), Vec::new());

    let inner = (tol.feas_tol * 1e-2).min(1e-8);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .presolve_enable(false)
        .max_iter(tol.max_iter)
        .tol_feas(inner)
        .tol_gap_abs(inner)
        .tol_gap_rel(inner)
        .build()
        .map_err(|e| KernelError::Setup(format!("{e:?}")))?;

    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
        .map_err(|e| KernelError::Setup(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;

    let x = sol.x.clone();
    let z = &sol.z;
    let mut duals = HashMap::with_capacity(m);
    for (row, kind) in kinds.iter().enumerate() {
        match *kind {
            RowKind::Linear(i) => {
                let c = &program.linear[i];
                let val = match c.relation {
                    // sensitivity in the declared sense
                    Relation::Eq => -sign * z[row],
                    _ => z[row],
                };
                duals.insert(c.name.clone(), val);
            }
            RowKind::Lower(j) => {
                duals.insert(format!("{}#lb", program.variables[j].name), z[row]);
            }
            RowKind::Upper(j) => {
                duals.insert(format!("{}#ub", program.variables[j].name), z[row]);
            }
            RowKind::Fixed(j) => {
                duals.insert(format!("{}#fix", program.variables[j].name), -sign * z[row]);
            }
        }
    }
    let mut cone_duals = HashMap::with_capacity(program.cones.len());
    for (c, &(start, dim)) in program.cones.iter().zip(&cone_rows) {
        cone_duals.insert(c.name.clone(), z[start..start + dim].to_vec());
    }

    let k = program.objective.constant;
    let objective = sign * sol.obj_val + k;
    let dual_objective = sign * sol.obj_val_dual + k;
    let gap = (objective - dual_objective).abs() / objective.abs().max(1.0);
    let residuals = Residuals {
        primal: program.max_violation(&x),
        dual: sol.r_dual,
        gap,
    };

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            if residuals.primal <= tol.feas_tol && gap <= tol.gap_tol {
                SolveStatus::Optimal
            } else {
                SolveStatus::NumericFailure
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => {
            // A stalled solve that still meets the tolerances is accepted.
            if residuals.primal <= tol.feas_tol && gap <= tol.gap_tol && sol.status == SolverStatus::InsufficientProgress {
                SolveStatus::Optimal
            } else {
                SolveStatus::NumericFailure
            }
        }
    };

    Ok(ProgramSolution {
        status,
        primal: x,
        names: program.var_index.clone(),
        duals,
        cone_duals,
        objective,
        dual_objective,
        iterations: sol.iterations,
        residuals,
    })
}

/// Tolerances plus an optional directory receiving an LP-format dump of
/// every program solved through [`solve_with`].
#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    pub tolerances: Tolerances,
    pub dump_dir: Option<std::path::PathBuf>,
}

static DUMP_COUNTER: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

pub fn solve_with(program: &ConicProgram, opts: &SolveOptions) -> Result<ProgramSolution, KernelError> {
    if let Some(dir) = &opts.dump_dir {
        std::fs::create_dir_all(dir)?;
        let k = DUMP_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let path = dir.join(format!("{:05}_{}.lp", k, sanitize(&program.name)));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_lp_format(program, &mut f)?;
        f.flush()?;
    }
    solve(program, &opts.tolerances)
}

/// Builds the LP dual of a linear program.
///
/// Dual variables are named after the primal rows (and after `var#lb` /
/// `var#ub` / `var#fix` for bounds other than `x >= 0`); dual constraints are
/// named after the primal variables. The dual's sense is opposite to the
/// primal's and its optimal value equals the primal optimal value, constant
/// term included. Inequality multipliers are nonnegative; equality
/// multipliers carry the primal's sensitivity sign convention used by
/// [`solve`].
pub fn dualize_lp(program: &ConicProgram) -> Result<ConicProgram, KernelError> {
    if !program.is_linear() {
        return Err(KernelError::NotLinear(program.name.clone()));
    }
    if !program.quadratic.is_empty() {
        return Err(KernelError::QuadraticObjective);
    }
    // Work in minimisation form: min c'x + k
    let sign = match program.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let n = program.variables.len();
    let mut cost = vec![0.0; n];
    for &(v, c) in &program.objective.terms {
        cost[v.0] += sign * c;
    }
    let k = sign * program.objective.constant;

    struct Row {
        name: String,
        coeffs: Vec<(usize, f64)>,
        relation: Relation,
        b: f64,
    }
    let mut rows: Vec<Row> = Vec::new();
    for c in &program.linear {
        let e = c.expr.compact();
        rows.push(Row {
            name: c.name.clone(),
            coeffs: e.terms.iter().map(|&(v, a)| (v.0, a)).collect(),
            relation: c.relation,
            b: c.rhs - c.expr.constant,
        });
    }
    let mut nonneg = vec![false; n];
    for (j, v) in program.variables.iter().enumerate() {
        if v.lower == v.upper {
            rows.push(Row {
                name: format!("{}#fix", v.name),
                coeffs: vec![(j, 1.0)],
                relation: Relation::Eq,
                b: v.lower,
            });
            continue;
        }
        if v.lower == 0.0 {
            nonneg[j] = true;
        } else if v.lower.is_finite() {
            rows.push(Row {
                name: format!("{}#lb", v.name),
                coeffs: vec![(j, 1.0)],
                relation: Relation::Ge,
                b: v.lower,
            });
        }
        if v.upper.is_finite() {
            rows.push(Row {
                name: format!("{}#ub", v.name),
                coeffs: vec![(j, 1.0)],
                relation: Relation::Le,
                b: v.upper,
            });
        }
    }

    let dual_sense = match program.sense {
        Sense::Minimize => Sense::Maximize,
        Sense::Maximize => Sense::Minimize,
    };
    let mut dual = ConicProgram::new(format!("{}_dual", program.name), dual_sense);
    // min-form dual: max sum(s_i b_i w_i) + k, with s_i = -1 for <= rows
    let mut dual_obj = LinExpr::constant(k);
    let mut columns: Vec<LinExpr> = vec![LinExpr::new(); n];
    for r in &rows {
        let (lo, s) = match r.relation {
            // free multipliers are oriented like the sensitivities from `solve`
            Relation::Eq => (f64::NEG_INFINITY, sign),
            Relation::Ge => (0.0, 1.0),
            Relation::Le => (0.0, -1.0),
        };
        let w = dual.add_var(r.name.clone(), lo, f64::INFINITY)?;
        dual_obj.add_term(w, s * r.b);
        for &(j, a) in &r.coeffs {
            columns[j].add_term(w, s * a);
        }
    }
    for (j, col) in columns.into_iter().enumerate() {
        let rel = if nonneg[j] { Relation::Le } else { Relation::Eq };
        dual.add_linear(program.variables[j].name.clone(), col, rel, cost[j])?;
    }
    // Primal max P* = -(min-form optimum) = -(dual max)
    dual.set_objective(dual_obj.scaled(sign));
    Ok(dual)
}

/// Writes `program` in an LP-style text format for external cross-checks.
///
/// Cones are emitted as quadratic constraints; rotated cones as `x*y` products.
pub fn write_lp_format(program: &ConicProgram, out: &mut impl Write) -> Result<(), KernelError> {
    let name = |v: VarId| sanitize(&program.variables[v.0].name);
    let fmt_expr = |e: &LinExpr| -> String {
        let mut s = String::new();
        for (k, &(v, c)) in e.compact().terms.iter().enumerate() {
            if k > 0 || c < 0.0 {
                s.push_str(if c < 0.0 { " - " } else { " + " });
            }
            let _ = write!(s, "{} {}", c.abs(), name(v));
        }
        if s.is_empty() {
            s.push('0');
        }
        s
    };
    writeln!(out, "\\ {}", program.name)?;
    writeln!(
        out,
        "{}",
        match program.sense {
            Sense::Minimize => "Minimize",
            Sense::Maximize => "Maximize",
        }
    )?;
    writeln!(out, " obj: {}", fmt_expr(&program.objective))?;
    if program.objective.constant != 0.0 {
        writeln!(out, "\\ objective constant {}", program.objective.constant)?;
    }
    writeln!(out, "Subject To")?;
    for c in &program.linear {
        let op = match c.relation {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        };
        writeln!(
            out,
            " {}: {} {} {}",
            sanitize(&c.name),
            fmt_expr(&c.expr),
            op,
            c.rhs - c.expr.constant
        )?;
    }
    for c in &program.cones {
        match &c.kind {
            ConeKind::SecondOrder { bound, vector } => {
                writeln!(out, " \\ cone {}: ||v|| <= t", c.name)?;
                writeln!(out, " {}_t: {} >= {}", sanitize(&c.name), fmt_expr(bound), 0.0)?;
                let sq: Vec<String> = vector.iter().map(|e| format!("({})^2", fmt_expr(e))).collect();
                writeln!(out, " {}: [ {} - ({})^2 ] <= 0", sanitize(&c.name), sq.join(" + "), fmt_expr(bound))?;
            }
            ConeKind::Rotated { x, y, vector } => {
                let sq: Vec<String> = vector.iter().map(|e| format!("({})^2", fmt_expr(e))).collect();
                writeln!(
                    out,
                    " {}: [ {} - ({}) * ({}) ] <= 0",
                    sanitize(&c.name),
                    sq.join(" + "),
                    fmt_expr(x),
                    fmt_expr(y)
                )?;
            }
        }
    }
    writeln!(out, "Bounds")?;
    for v in &program.variables {
        let n = sanitize(&v.name);
        match (v.lower.is_finite(), v.upper.is_finite()) {
            (false, false) => writeln!(out, " {n} free")?,
            (true, false) => writeln!(out, " {n} >= {}", v.lower)?,
            (false, true) => writeln!(out, " -inf <= {n} <= {}", v.upper)?,
            (true, true) => writeln!(out, " {} <= {n} <= {}", v.lower, v.upper)?,
        }
    }
    writeln!(out, "End")?;
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "_.".contains(c) { c } else { '_' })
        .collect()
}
