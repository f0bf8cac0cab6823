//! Dense two-phase simplex.
//!
//! Problems are stated as `minimize c·x` subject to rows `a·x {≤,≥,=} b` and
//! per-variable bounds `l ≤ x ≤ u` (default `0 ≤ x`). Internally every variable
//! is shifted or split to be non-negative, upper bounds become `≤` rows, and the
//! tableau is solved with Bland's rule, which cannot cycle.

use log::trace;
use thiserror::Error;

/// Primal feasibility tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Smallest magnitude accepted as a pivot element.
pub const PIVOT_TOL: f64 = 1e-10;
/// Reduced costs above `-OPTIMALITY_TOL` count as non-negative.
const OPTIMALITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("constraint {row} has {got} coefficients but the objective has {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("variable index {0} out of range")]
    NoSuchVariable(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid bounds for variable {var}: [{lower}, {upper}]")]
    InvalidBounds { var: usize, lower: f64, upper: f64 },
    #[error("simplex exceeded {0} iterations")]
    IterationLimit(usize),
    #[error("numerical breakdown: {0}")]
    NumericalFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// A minimisation problem with dense constraint rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    objective: Vec<f64>,
    constraints: Vec<Constraint>,
    lower: Vec<f64>,
    upper: Vec<Option<f64>>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Result<Self, LpError> {
        if objective.iter().any(|v| !v.is_finite()) {
            return Err(LpError::NonFinite("objective"));
        }
        let n = objective.len();
        Ok(Self {
            objective,
            constraints: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![None; n],
        })
    }

    pub fn add_constraint(
        &mut self,
        coeffs: Vec<f64>,
        relation: Relation,
        rhs: f64,
    ) -> Result<(), LpError> {
        if coeffs.len() != self.objective.len() {
            return Err(LpError::DimensionMismatch {
                row: self.constraints.len(),
                expected: self.objective.len(),
                got: coeffs.len(),
            });
        }
        if coeffs.iter().any(|v| !v.is_finite()) || !rhs.is_finite() {
            return Err(LpError::NonFinite("constraint"));
        }
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
        Ok(())
    }

    /// `lower` may be `-inf` for a free variable; `upper = None` means unbounded above.
    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: Option<f64>) -> Result<(), LpError> {
        if var >= self.objective.len() {
            return Err(LpError::NoSuchVariable(var));
        }
        let up = upper.unwrap_or(f64::INFINITY);
        if lower.is_nan() || lower == f64::INFINITY || up.is_nan() || upper == Some(f64::INFINITY) || up < lower {
            return Err(LpError::InvalidBounds {
                var,
                lower,
                upper: up,
            });
        }
        self.lower[var] = lower;
        self.upper[var] = upper;
        Ok(())
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn bounds(&self, var: usize) -> (f64, Option<f64>) {
        (self.lower[var], self.upper[var])
    }

    /// Largest violation of any row or bound by `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for c in &self.constraints {
            let lhs: f64 = c.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
            let v = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v);
        }
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v);
            if let Some(u) = self.upper[j] {
                worst = worst.max(v - u);
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
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal values; meaningful only when `status == Optimal`.
    pub x: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
}

/// How an original variable maps onto non-negative tableau columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    Shifted { col: usize, lower: f64 },
    Split { pos: usize, neg: usize },
}

struct Tableau {
    /// `m × (ncols + 1)`, last column is the right-hand side.
    rows: Vec<Vec<f64>>,
    /// Reduced costs, last entry is minus the current objective.
    cost: Vec<f64>,
    basis: Vec<usize>,
    ncols: usize,
    iterations: usize,
    max_iterations: usize,
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let piv = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= piv;
        }
        let pivot_row = std::mem::take(&mut self.rows[r]);
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (x, p) in row.iter_mut().zip(&pivot_row) {
                    *x -= f * p;
                }
                row[c] = 0.0;
            }
        }
        let f = self.cost[c];
        if f != 0.0 {
            for (x, p) in self.cost.iter_mut().zip(&pivot_row) {
                *x -= f * p;
            }
            self.cost[c] = 0.0;
        }
        self.rows[r] = pivot_row;
        self.basis[r] = c;
    }

    fn set_costs(&mut self, c: &[f64]) {
        let mut cost = c.to_vec();
        cost.push(0.0);
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = c[b];
            if cb != 0.0 {
                for (x, v) in cost.iter_mut().zip(&self.rows[i]) {
                    *x -= cb * v;
                }
            }
        }
        self.cost = cost;
    }

    /// Bland's rule: lowest-index improving column enters; among minimum-ratio
    /// rows the one whose basic variable has the lowest index leaves.
    fn run(&mut self, allowed: &[bool], phase: u8) -> Result<PhaseOutcome, LpError> {
        let rhs = self.ncols;
        loop {
            let entering = (0..self.ncols).find(|&j| allowed[j] && self.cost[j] < -OPTIMALITY_TOL);
            let Some(c) = entering else {
                return Ok(PhaseOutcome::Optimal);
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                let a = row[c];
                if a > PIVOT_TOL {
                    let ratio = row[rhs].max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                            if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Ok(PhaseOutcome::Unbounded);
            };
            self.iterations += 1;
            if self.iterations > self.max_iterations {
                return Err(LpError::IterationLimit(self.max_iterations));
            }
            trace!(
                "phase {phase} iter {}: x{c} enters, x{} leaves (row {r}), objective {:.12}",
                self.iterations,
                self.basis[r],
                -self.cost[rhs]
            );
            self.pivot(r, c);
            if log::log_enabled!(log::Level::Trace) && self.ncols <= 24 {
                for (i, row) in self.rows.iter().enumerate() {
                    trace!("  basis x{:<3} | {:?}", self.basis[i], row);
                }
                trace!("  cost        | {:?}", self.cost);
            }
            if !self.cost[rhs].is_finite() {
                return Err(LpError::NumericalFailure(format!(
                    "objective became non-finite in phase {phase}"
                )));
            }
        }
    }
}

/// Solves `lp`. Infeasible and unbounded problems are reported through
/// [`LpStatus`]; an `Err` means the solver itself could not be trusted.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let n = lp.num_vars();

    let mut maps = Vec::with_capacity(n);
    let mut ns = 0usize;
    for j in 0..n {
        if lp.lower[j].is_finite() {
            maps.push(VarMap::Shifted {
                col: ns,
                lower: lp.lower[j],
            });
            ns += 1;
        } else {
            maps.push(VarMap::Split { pos: ns, neg: ns + 1 });
            ns += 2;
        }
    }

    // Rows over the structural columns.
    let mut rows: Vec<(Vec<f64>, Relation, f64)> = Vec::new();
    let expand = |coeffs: &[f64], rhs: f64| -> (Vec<f64>, f64) {
        let mut a = vec![0.0; ns];
        let mut b = rhs;
        for (j, &v) in coeffs.iter().enumerate() {
            match maps[j] {
                VarMap::Shifted { col, lower } => {
                    a[col] = v;
                    b -= v * lower;
                }
                VarMap::Split { pos, neg } => {
                    a[pos] = v;
                    a[neg] = -v;
                }
            }
        }
        (a, b)
    };
    for c in &lp.constraints {
        let (a, b) = expand(&c.coeffs, c.rhs);
        rows.push((a, c.relation, b));
    }
    for j in 0..n {
        if let Some(u) = lp.upper[j] {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let (a, b) = expand(&e, u);
            rows.push((a, Relation::Le, b));
        }
    }
    for (a, rel, b) in rows.iter_mut() {
        if *b < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
            *b = -*b;
            *rel = match rel {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
    }

    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let ncols = ns + n_slack + n_art;
    let art_start = ns + n_slack;

    let mut tab_rows = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let (mut next_slack, mut next_art) = (ns, art_start);
    for (a, rel, b) in &rows {
        let mut row = vec![0.0; ncols + 1];
        row[..ns].copy_from_slice(a);
        row[ncols] = *b;
        match rel {
            Relation::Le => {
                row[next_slack] = 1.0;
                basis.push(next_slack);
                next_slack += 1;
            }
            Relation::Ge => {
                row[next_slack] = -1.0;
                next_slack += 1;
                row[next_art] = 1.0;
                basis.push(next_art);
                next_art += 1;
            }
            Relation::Eq => {
                row[next_art] = 1.0;
                basis.push(next_art);
                next_art += 1;
            }
        }
        tab_rows.push(row);
    }

    let mut tab = Tableau {
        rows: tab_rows,
        cost: Vec::new(),
        basis,
        ncols,
        iterations: 0,
        max_iterations: 50_000 + 200 * (m + ncols),
    };
    let rhs_scale = 1.0 + rows.iter().fold(0.0f64, |s, r| s.max(r.2.abs()));

    if n_art > 0 {
        let mut c1 = vec![0.0; ncols];
        c1[art_start..].iter_mut().for_each(|v| *v = 1.0);
        tab.set_costs(&c1);
        let allowed = vec![true; ncols];
        tab.run(&allowed, 1)?;
        let infeasibility = -tab.cost[ncols];
        if infeasibility > FEASIBILITY_TOL * rhs_scale {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: vec![f64::NAN; n],
                objective_value: f64::NAN,
                iterations: tab.iterations,
            });
        }
        // Pivot remaining zero-valued artificials out of the basis; rows where
        // that is impossible are redundant and dropped.
        let mut r = 0;
        while r < tab.rows.len() {
            if tab.basis[r] >= art_start {
                let col = (0..art_start)
                    .filter(|&j| tab.rows[r][j].abs() > PIVOT_TOL)
                    .max_by(|&a, &b| tab.rows[r][a].abs().total_cmp(&tab.rows[r][b].abs()));
                match col {
                    Some(j) => {
                        tab.pivot(r, j);
                        r += 1;
                    }
                    None => {
                        tab.rows.remove(r);
                        tab.basis.remove(r);
                    }
                }
            } else {
                r += 1;
            }
        }
    }

    let mut c2 = vec![0.0; ncols];
    for (j, &cj) in lp.objective.iter().enumerate() {
        match maps[j] {
            VarMap::Shifted { col, .. } => c2[col] = cj,
            VarMap::Split { pos, neg } => {
                c2[pos] = cj;
                c2[neg] = -cj;
            }
        }
    }
    tab.set_costs(&c2);
    let mut allowed = vec![true; ncols];
    allowed[art_start..].iter_mut().for_each(|v| *v = false);
    let outcome = tab.run(&allowed, 2)?;
    if let PhaseOutcome::Unbounded = outcome {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: vec![f64::NAN; n],
            objective_value: f64::NEG_INFINITY,
            iterations: tab.iterations,
        });
    }

    let mut col_values = vec![0.0; ncols];
    for (i, &b) in tab.basis.iter().enumerate() {
        col_values[b] = tab.rows[i][ncols];
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|m| match *m {
            VarMap::Shifted { col, lower } => lower + col_values[col],
            VarMap::Split { pos, neg } => col_values[pos] - col_values[neg],
        })
        .collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LpError::NumericalFailure("non-finite primal value".into()));
    }
    let violation = lp.max_violation(&x);
    if violation > FEASIBILITY_TOL * rhs_scale {
        return Err(LpError::NumericalFailure(format!(
            "solution violates constraints by {violation:e}"
        )));
    }
    let objective_value = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective_value,
        iterations: tab.iterations,
    })
}
