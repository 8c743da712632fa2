//! Dense linear programming via a two-phase revised simplex method.
//!
//! Problems have the form
//!
//! ```text
//! minimize    c · x
//! subject to  A x ≤ b,   E x = d,   lo ≤ x ≤ hi
//! ```
//!
//! with per-variable bounds that may be ±∞.  The solver is deterministic:
//! Dantzig pricing with lowest-index tie breaks, switching permanently to
//! Bland's rule after a run of degenerate pivots so cycling cannot occur.
//! The basis inverse is kept explicitly and refactorized periodically;
//! optimal solutions are verified against the constraints (tolerance `1e-7`,
//! scaled by row norms) and against the dual objective before being
//! returned.
//!
//! Problem sizes in this crate stay small enough (hundreds of rows) that a
//! dense representation is the simplest reliable choice.  A brute-force
//! basic-solution enumerator, [`brute_force_reference`], doubles as an
//! independent oracle for randomized testing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feasibility tolerance, applied scaled by row norms.
pub const FEAS_TOL: f64 = 1e-7;
const PIVOT_TOL: f64 = 1e-9;
const DEGENERATE_STEP: f64 = 1e-12;
const DEGENERATE_LIMIT: u32 = 50;
const REFACTOR_EVERY: u32 = 100;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("linear program is malformed: {0}")]
    Invalid(String),
    #[error("numerical failure in simplex: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Structural variable values (meaningful only when `Optimal`).
    pub x: Vec<f64>,
    /// Objective value (meaningful only when `Optimal`).
    pub objective: f64,
}

/// `minimize c·x  s.t.  A x ≤ b, E x = d, lo ≤ x ≤ hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub a_ineq: Vec<Vec<f64>>,
    pub b_ineq: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub d_eq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    /// A program over `n` variables with no rows and free bounds.
    pub fn new(n: usize) -> Self {
        LinearProgram {
            objective: vec![0.0; n],
            a_ineq: Vec::new(),
            b_ineq: Vec::new(),
            a_eq: Vec::new(),
            d_eq: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.n_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Invalid(format!(
                "bounds sized {}/{} for {} variables",
                self.lower.len(),
                self.upper.len(),
                n
            )));
        }
        if self.a_ineq.len() != self.b_ineq.len() || self.a_eq.len() != self.d_eq.len() {
            return Err(LpError::Invalid("row/rhs count mismatch".into()));
        }
        for row in self.a_ineq.iter().chain(&self.a_eq) {
            if row.len() != n {
                return Err(LpError::Invalid(format!(
                    "row has {} coefficients for {} variables",
                    row.len(),
                    n
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LpError::Invalid("non-finite row coefficient".into()));
            }
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(LpError::Invalid("non-finite objective coefficient".into()));
        }
        if self.b_ineq.iter().chain(&self.d_eq).any(|v| !v.is_finite()) {
            return Err(LpError::Invalid("non-finite right-hand side".into()));
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if lo.is_nan() || hi.is_nan() {
                return Err(LpError::Invalid("NaN bound".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
    /// Free variable resting at zero.
    FreeZero,
}

struct Tableau {
    m: usize,
    /// Column-major constraint matrix over structural + slack + artificial
    /// variables.
    cols: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<VarState>,
    x: Vec<f64>,
    /// Row-major dense basis inverse.
    binv: Vec<f64>,
    n_struct: usize,
    art_start: usize,
    bland: bool,
    degenerate_run: u32,
    pivots_since_refactor: u32,
}

enum StepOutcome {
    Moved,
    OptimalReached,
    Unbounded,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.n_vars();
        let m1 = lp.a_ineq.len();
        let m2 = lp.a_eq.len();
        let m = m1 + m2;
        let n_slack = m1;
        let total = n + n_slack + m; // artificials allocated for every row

        let mut cols = vec![vec![0.0; m]; total];
        for (j, col) in cols.iter_mut().enumerate().take(n) {
            for (i, row) in lp.a_ineq.iter().enumerate() {
                col[i] = row[j];
            }
            for (i, row) in lp.a_eq.iter().enumerate() {
                col[m1 + i] = row[j];
            }
        }
        for i in 0..m1 {
            cols[n + i][i] = 1.0; // slack
        }
        let mut rhs = Vec::with_capacity(m);
        rhs.extend_from_slice(&lp.b_ineq);
        rhs.extend_from_slice(&lp.d_eq);

        let mut lo = lp.lower.clone();
        let mut hi = lp.upper.clone();
        lo.extend(std::iter::repeat(0.0).take(n_slack));
        hi.extend(std::iter::repeat(f64::INFINITY).take(n_slack));
        // Artificial bounds are set when they are activated.
        lo.extend(std::iter::repeat(0.0).take(m));
        hi.extend(std::iter::repeat(0.0).take(m));

        Tableau {
            m,
            cols,
            rhs,
            lo,
            hi,
            cost: vec![0.0; total],
            basis: Vec::new(),
            state: vec![VarState::AtLower; total],
            x: vec![0.0; total],
            binv: Vec::new(),
            n_struct: n,
            art_start: n + n_slack,
            bland: false,
            degenerate_run: 0,
            pivots_since_refactor: 0,
        }
    }

    /// Places nonbasic structurals at a finite bound (or zero when free) and
    /// builds the initial slack/artificial basis.
    fn start_phase_one(&mut self) {
        let m = self.m;
        for j in 0..self.art_start {
            self.state[j] = if self.lo[j].is_finite() {
                self.x[j] = self.lo[j];
                VarState::AtLower
            } else if self.hi[j].is_finite() {
                self.x[j] = self.hi[j];
                VarState::AtUpper
            } else {
                self.x[j] = 0.0;
                VarState::FreeZero
            };
        }
        // Residual of each row at the nonbasic point (slacks included at 0).
        let mut residual = self.rhs.clone();
        for j in 0..self.art_start {
            if self.x[j] != 0.0 {
                for i in 0..m {
                    residual[i] -= self.cols[j][i] * self.x[j];
                }
            }
        }
        self.basis = Vec::with_capacity(m);
        self.binv = vec![0.0; m * m];
        let n_ineq = self.art_start - self.n_struct;
        for i in 0..m {
            let slack = self.n_struct + i;
            if i < n_ineq && residual[i] >= 0.0 {
                // The slack itself is a feasible basic variable.
                self.basis.push(slack);
                self.state[slack] = VarState::Basic(i);
                self.x[slack] = residual[i];
                self.binv[i * m + i] = 1.0;
            } else {
                let art = self.art_start + i;
                let sign = if residual[i] >= 0.0 { 1.0 } else { -1.0 };
                self.cols[art][i] = sign;
                self.hi[art] = f64::INFINITY;
                self.cost[art] = 1.0;
                self.basis.push(art);
                self.state[art] = VarState::Basic(i);
                self.x[art] = residual[i].abs();
                self.binv[i * m + i] = sign;
            }
        }
    }

    fn objective_value(&self) -> f64 {
        self.x.iter().zip(&self.cost).map(|(x, c)| x * c).sum()
    }

    /// Reduced costs for all columns: `d = cost − (c_B B⁻¹) A`.
    fn reduced_costs(&self) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (i, &bi) in self.basis.iter().enumerate() {
            let cb = self.cost[bi];
            if cb != 0.0 {
                for k in 0..m {
                    y[k] += cb * self.binv[i * m + k];
                }
            }
        }
        let mut d = self.cost.clone();
        for (j, col) in self.cols.iter().enumerate() {
            if matches!(self.state[j], VarState::Basic(_)) {
                d[j] = 0.0;
                continue;
            }
            let mut dot = 0.0;
            for i in 0..m {
                dot += y[i] * col[i];
            }
            d[j] -= dot;
        }
        d
    }

    /// Picks the entering column and its direction of movement, or `None`
    /// at optimality.
    fn price(&self, tol: f64) -> Option<(usize, f64)> {
        let d = self.reduced_costs();
        let mut best: Option<(usize, f64, f64)> = None; // (col, dir, merit)
        for j in 0..self.cols.len() {
            if self.lo[j] == self.hi[j] {
                continue; // fixed (includes retired artificials)
            }
            let (eligible, dir) = match self.state[j] {
                VarState::Basic(_) => (false, 0.0),
                VarState::AtLower => (d[j] < -tol, 1.0),
                VarState::AtUpper => (d[j] > tol, -1.0),
                VarState::FreeZero => (d[j].abs() > tol, if d[j] < 0.0 { 1.0 } else { -1.0 }),
            };
            if !eligible {
                continue;
            }
            if self.bland {
                return Some((j, dir)); // lowest index wins outright
            }
            let merit = d[j].abs();
            if best.map_or(true, |(_, _, bm)| merit > bm) {
                best = Some((j, dir, merit));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    /// One simplex pivot (or bound flip) on the entering column.
    fn step(&mut self, enter: usize, dir: f64) -> Result<StepOutcome, LpError> {
        let m = self.m;
        // w = B⁻¹ a_enter
        let mut w = vec![0.0; m];
        for i in 0..m {
            let mut dot = 0.0;
            for k in 0..m {
                dot += self.binv[i * m + k] * self.cols[enter][k];
            }
            w[i] = dot;
        }

        // Ratio test: basic variables blocking at their bounds, plus the
        // entering variable's own opposite bound.
        let own_range = match self.state[enter] {
            VarState::AtLower => self.hi[enter] - self.lo[enter],
            VarState::AtUpper => self.hi[enter] - self.lo[enter],
            _ => f64::INFINITY,
        };
        let mut t_star = own_range;
        let mut leave: Option<(usize, bool)> = None; // (row, hits_upper)
        for (i, &wi) in w.iter().enumerate() {
            let delta = -dir * wi; // d x_basic[i] / dt
            let k = self.basis[i];
            let (t_i, hits_upper) = if delta > PIVOT_TOL {
                ((self.hi[k] - self.x[k]) / delta, true)
            } else if delta < -PIVOT_TOL {
                ((self.lo[k] - self.x[k]) / delta, false)
            } else {
                continue;
            };
            if !t_i.is_finite() {
                continue;
            }
            let t_i = t_i.max(0.0);
            let replace = match leave {
                None => t_i < t_star,
                Some((r, _)) => {
                    if t_i < t_star - DEGENERATE_STEP {
                        true
                    } else if t_i <= t_star + DEGENERATE_STEP {
                        if self.bland {
                            self.basis[i] < self.basis[r]
                        } else {
                            // Prefer the numerically strongest pivot; break
                            // remaining ties on the lowest variable index.
                            let di = (-dir * w[i]).abs();
                            let dr = (-dir * w[r]).abs();
                            di > dr + 1e-15 || (di >= dr - 1e-15 && self.basis[i] < self.basis[r])
                        }
                    } else {
                        false
                    }
                }
            };
            if replace {
                t_star = t_i.min(t_star);
                leave = Some((i, hits_upper));
            }
        }

        if t_star.is_infinite() {
            return Ok(StepOutcome::Unbounded);
        }
        if t_star <= DEGENERATE_STEP {
            self.degenerate_run += 1;
            if self.degenerate_run >= DEGENERATE_LIMIT {
                self.bland = true;
            }
        } else {
            self.degenerate_run = 0;
        }

        // Move the basic variables and the entering variable.
        for (i, &wi) in w.iter().enumerate() {
            let delta = -dir * wi;
            let k = self.basis[i];
            self.x[k] += t_star * delta;
        }
        self.x[enter] += dir * t_star;

        match leave {
            None => {
                // Bound flip: the entering variable traverses its range.
                self.state[enter] = match self.state[enter] {
                    VarState::AtLower => VarState::AtUpper,
                    VarState::AtUpper => VarState::AtLower,
                    other => other,
                };
                // Snap exactly onto the bound to avoid drift.
                self.x[enter] = match self.state[enter] {
                    VarState::AtUpper => self.hi[enter],
                    VarState::AtLower => self.lo[enter],
                    _ => self.x[enter],
                };
                Ok(StepOutcome::Moved)
            }
            Some((r, hits_upper)) => {
                let leaving = self.basis[r];
                let pivot = w[r];
                if pivot.abs() <= PIVOT_TOL {
                    return Err(LpError::Numerical(format!(
                        "pivot {pivot:.3e} below tolerance in row {r}"
                    )));
                }
                self.state[leaving] = if hits_upper {
                    self.x[leaving] = self.hi[leaving];
                    VarState::AtUpper
                } else {
                    self.x[leaving] = self.lo[leaving];
                    VarState::AtLower
                };
                self.basis[r] = enter;
                self.state[enter] = VarState::Basic(r);

                // Product-form update of the basis inverse.
                let inv_pivot = 1.0 / pivot;
                for k in 0..m {
                    self.binv[r * m + k] *= inv_pivot;
                }
                for i in 0..m {
                    if i == r {
                        continue;
                    }
                    let factor = w[i];
                    if factor != 0.0 {
                        for k in 0..m {
                            self.binv[i * m + k] -= factor * self.binv[r * m + k];
                        }
                    }
                }
                self.pivots_since_refactor += 1;
                if self.pivots_since_refactor >= REFACTOR_EVERY {
                    self.refactor()?;
                }
                Ok(StepOutcome::Moved)
            }
        }
    }

    /// Recomputes the basis inverse and basic values from scratch.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        if m == 0 {
            return Ok(());
        }
        // Gauss-Jordan inversion of the basis matrix with partial pivoting.
        let mut aug = vec![0.0; m * 2 * m];
        for (i, &bj) in self.basis.iter().enumerate() {
            for r in 0..m {
                aug[r * 2 * m + i] = self.cols[bj][r];
            }
        }
        for r in 0..m {
            aug[r * 2 * m + m + r] = 1.0;
        }
        for col in 0..m {
            let mut piv_row = col;
            let mut piv_val = aug[col * 2 * m + col].abs();
            for r in col + 1..m {
                let v = aug[r * 2 * m + col].abs();
                if v > piv_val {
                    piv_val = v;
                    piv_row = r;
                }
            }
            if piv_val <= 1e-12 {
                return Err(LpError::Numerical(format!(
                    "singular basis during refactorization (column {col})"
                )));
            }
            if piv_row != col {
                for k in 0..2 * m {
                    aug.swap(col * 2 * m + k, piv_row * 2 * m + k);
                }
            }
            let inv = 1.0 / aug[col * 2 * m + col];
            for k in 0..2 * m {
                aug[col * 2 * m + k] *= inv;
            }
            for r in 0..m {
                if r != col {
                    let f = aug[r * 2 * m + col];
                    if f != 0.0 {
                        for k in 0..2 * m {
                            aug[r * 2 * m + k] -= f * aug[col * 2 * m + k];
                        }
                    }
                }
            }
        }
        for r in 0..m {
            for k in 0..m {
                self.binv[r * m + k] = aug[r * 2 * m + m + k];
            }
        }
        // Basic values: x_B = B⁻¹ (rhs − N x_N).
        let mut rhs = self.rhs.clone();
        for (j, col) in self.cols.iter().enumerate() {
            if !matches!(self.state[j], VarState::Basic(_)) && self.x[j] != 0.0 {
                for i in 0..m {
                    rhs[i] -= col[i] * self.x[j];
                }
            }
        }
        for i in 0..m {
            let mut v = 0.0;
            for k in 0..m {
                v += self.binv[i * m + k] * rhs[k];
            }
            self.x[self.basis[i]] = v;
        }
        // Iterative refinement: on ill-conditioned bases (nearly collinear
        // columns are routine in the belief-weight programs) the inversion
        // alone leaves residuals near κ(B)·eps; each pass through the
        // approximate inverse shrinks them by that same factor.
        for _ in 0..2 {
            let mut resid = self.rhs.clone();
            for (j, col) in self.cols.iter().enumerate() {
                if self.x[j] != 0.0 {
                    for i in 0..m {
                        resid[i] -= col[i] * self.x[j];
                    }
                }
            }
            if resid.iter().all(|r| r.abs() <= 1e-14) {
                break;
            }
            for i in 0..m {
                let mut v = 0.0;
                for k in 0..m {
                    v += self.binv[i * m + k] * resid[k];
                }
                self.x[self.basis[i]] += v;
            }
        }
        self.pivots_since_refactor = 0;
        Ok(())
    }

    fn run_simplex(&mut self, tol: f64, max_iters: u64) -> Result<StepOutcome, LpError> {
        for _ in 0..max_iters {
            match self.price(tol) {
                None => return Ok(StepOutcome::OptimalReached),
                Some((enter, dir)) => match self.step(enter, dir)? {
                    StepOutcome::Unbounded => return Ok(StepOutcome::Unbounded),
                    _ => continue,
                },
            }
        }
        Err(LpError::Numerical(format!(
            "simplex iteration limit {max_iters} exceeded"
        )))
    }

    /// Pivots basic artificials out where possible; rows that cannot be
    /// pivoted are redundant and keep their artificial fixed at zero.
    fn retire_artificials(&mut self) -> Result<(), LpError> {
        let m = self.m;
        for r in 0..m {
            if self.basis[r] < self.art_start {
                continue;
            }
            let mut entered = None;
            for j in 0..self.art_start {
                if matches!(self.state[j], VarState::Basic(_)) || self.lo[j] == self.hi[j] {
                    continue;
                }
                let mut elem = 0.0;
                for k in 0..m {
                    elem += self.binv[r * m + k] * self.cols[j][k];
                }
                if elem.abs() > 1e-7 {
                    entered = Some((j, elem));
                    break;
                }
            }
            if let Some((j, elem)) = entered {
                // Degenerate pivot: the artificial sits at ~0, so swapping it
                // for column j does not move the solution.
                let leaving = self.basis[r];
                self.basis[r] = j;
                let entering_value = self.x[j];
                self.state[j] = VarState::Basic(r);
                self.state[leaving] = VarState::AtLower;
                self.x[leaving] = 0.0;
                let inv = 1.0 / elem;
                // Rebuild the inverse row for the swapped basis column.
                let mut w = vec![0.0; m];
                for i in 0..m {
                    let mut dot = 0.0;
                    for k in 0..m {
                        dot += self.binv[i * m + k] * self.cols[j][k];
                    }
                    w[i] = dot;
                }
                for k in 0..m {
                    self.binv[r * m + k] *= inv;
                }
                for i in 0..m {
                    if i != r && w[i] != 0.0 {
                        for k in 0..m {
                            self.binv[i * m + k] -= w[i] * self.binv[r * m + k];
                        }
                    }
                }
                self.x[j] = entering_value;
            }
        }
        // Retire every artificial: freeze at zero so none can re-enter.
        for a in self.art_start..self.cols.len() {
            self.cost[a] = 0.0;
            self.hi[a] = 0.0;
            if !matches!(self.state[a], VarState::Basic(_)) {
                self.x[a] = 0.0;
                self.state[a] = VarState::AtLower;
            }
        }
        self.refactor()
    }

    /// Largest scaled violation of rows and bounds at the current point.
    fn max_violation(&self, lp: &LinearProgram) -> f64 {
        let n = lp.n_vars();
        let mut worst: f64 = 0.0;
        for (row, &b) in lp.a_ineq.iter().zip(&lp.b_ineq) {
            let lhs: f64 = row.iter().zip(&self.x[..n]).map(|(a, x)| a * x).sum();
            let scale = row.iter().fold(b.abs().max(1.0), |m, v| m.max(v.abs()));
            worst = worst.max((lhs - b) / scale);
        }
        for (row, &d) in lp.a_eq.iter().zip(&lp.d_eq) {
            let lhs: f64 = row.iter().zip(&self.x[..n]).map(|(a, x)| a * x).sum();
            let scale = row.iter().fold(d.abs().max(1.0), |m, v| m.max(v.abs()));
            worst = worst.max((lhs - d).abs() / scale);
        }
        for j in 0..n {
            let scale = self.x[j].abs().max(1.0);
            if self.lo[j].is_finite() {
                worst = worst.max((self.lo[j] - self.x[j]) / scale);
            }
            if self.hi[j].is_finite() {
                worst = worst.max((self.x[j] - self.hi[j]) / scale);
            }
        }
        worst
    }

    /// Identity check tying the objective to the dual at the current basis:
    /// `c·x = y·rhs + Σ_nonbasic d_j x_j`.  A large gap flags basis drift.
    fn duality_gap(&self) -> f64 {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (i, &bi) in self.basis.iter().enumerate() {
            let cb = self.cost[bi];
            if cb != 0.0 {
                for k in 0..m {
                    y[k] += cb * self.binv[i * m + k];
                }
            }
        }
        let mut dual: f64 = y.iter().zip(&self.rhs).map(|(a, b)| a * b).sum();
        for (j, col) in self.cols.iter().enumerate() {
            if matches!(self.state[j], VarState::Basic(_)) || self.x[j] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for i in 0..m {
                dot += y[i] * col[i];
            }
            dual += (self.cost[j] - dot) * self.x[j];
        }
        let primal = self.objective_value();
        (primal - dual).abs() / primal.abs().max(1.0)
    }
}

/// Solves the program, classifying it as optimal, infeasible, or unbounded.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.check()?;
    let n = lp.n_vars();
    for j in 0..n {
        if lp.lower[j] > lp.upper[j] {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: Vec::new(),
                objective: f64::NAN,
            });
        }
    }

    let mut tab = Tableau::build(lp);
    tab.start_phase_one();
    let max_iters = 10_000 + 200 * (tab.m as u64 + tab.cols.len() as u64);

    // Phase 1: minimize the artificial mass (bounded below, never unbounded).
    let needs_phase_one = tab.basis.iter().any(|&b| b >= tab.art_start);
    if needs_phase_one {
        let tol = 1e-9;
        match tab.run_simplex(tol, max_iters)? {
            StepOutcome::Unbounded => {
                return Err(LpError::Numerical("phase one reported unbounded".into()))
            }
            _ => {}
        }
        let rhs_scale = tab.rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if tab.objective_value() > FEAS_TOL * rhs_scale * (tab.m.max(1) as f64) {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: Vec::new(),
                objective: f64::NAN,
            });
        }
        tab.retire_artificials()?;
    }

    // Phase 2: the true objective.
    for j in 0..n {
        tab.cost[j] = lp.objective[j];
    }
    for j in n..tab.art_start {
        tab.cost[j] = 0.0;
    }
    let cost_scale = lp.objective.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * cost_scale;
    tab.degenerate_run = 0;
    match tab.run_simplex(tol, max_iters)? {
        StepOutcome::Unbounded => {
            return Ok(LpSolution {
                status: LpStatus::Unbounded,
                x: Vec::new(),
                objective: f64::NEG_INFINITY,
            })
        }
        _ => {}
    }

    tab.refactor()?;
    let violation = tab.max_violation(lp);
    if violation > FEAS_TOL {
        return Err(LpError::Numerical(format!(
            "optimal basis violates constraints by {violation:.3e} (scaled)"
        )));
    }
    let gap = tab.duality_gap();
    if gap > 1e-6 {
        return Err(LpError::Numerical(format!(
            "primal/dual objective mismatch {gap:.3e} at claimed optimum"
        )));
    }
    let x = tab.x[..n].to_vec();
    let objective = lp.objective.iter().zip(&x).map(|(c, x)| c * x).sum();
    Ok(LpSolution { status: LpStatus::Optimal, x, objective })
}

/// Writes the program as a fixed-layout MPS-like listing for external
/// cross-checks.
pub fn dump_mps(lp: &LinearProgram, name: &str) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "NAME          {name}");
    let _ = writeln!(out, "ROWS");
    let _ = writeln!(out, " N  COST");
    for i in 0..lp.a_ineq.len() {
        let _ = writeln!(out, " L  R{i}");
    }
    for i in 0..lp.a_eq.len() {
        let _ = writeln!(out, " E  Q{i}");
    }
    let _ = writeln!(out, "COLUMNS");
    for j in 0..lp.n_vars() {
        if lp.objective[j] != 0.0 {
            let _ = writeln!(out, "    X{j}  COST  {}", lp.objective[j]);
        }
        for (i, row) in lp.a_ineq.iter().enumerate() {
            if row[j] != 0.0 {
                let _ = writeln!(out, "    X{j}  R{i}  {}", row[j]);
            }
        }
        for (i, row) in lp.a_eq.iter().enumerate() {
            if row[j] != 0.0 {
                let _ = writeln!(out, "    X{j}  Q{i}  {}", row[j]);
            }
        }
    }
    let _ = writeln!(out, "RHS");
    for (i, b) in lp.b_ineq.iter().enumerate() {
        if *b != 0.0 {
            let _ = writeln!(out, "    RHS  R{i}  {b}");
        }
    }
    for (i, d) in lp.d_eq.iter().enumerate() {
        if *d != 0.0 {
            let _ = writeln!(out, "    RHS  Q{i}  {d}");
        }
    }
    let _ = writeln!(out, "BOUNDS");
    for j in 0..lp.n_vars() {
        match (lp.lower[j].is_finite(), lp.upper[j].is_finite()) {
            (true, true) if lp.lower[j] == lp.upper[j] => {
                let _ = writeln!(out, " FX BND  X{j}  {}", lp.lower[j]);
            }
            (lo, hi) => {
                if lo {
                    let _ = writeln!(out, " LO BND  X{j}  {}", lp.lower[j]);
                } else {
                    let _ = writeln!(out, " MI BND  X{j}");
                }
                if hi {
                    let _ = writeln!(out, " UP BND  X{j}  {}", lp.upper[j]);
                }
            }
        }
    }
    let _ = writeln!(out, "ENDATA");
    out
}

/// Brute-force reference for small programs whose variables all have finite
/// lower bounds: enumerates every basis over structural + slack columns,
/// keeps feasible basic solutions, and returns the best objective.
///
/// Exponential in problem size — this exists purely as an independent oracle
/// for randomized testing of [`solve_lp`].
pub fn brute_force_reference(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.check()?;
    let n = lp.n_vars();
    if lp.lower.iter().any(|l| !l.is_finite()) {
        return Err(LpError::Invalid(
            "brute-force reference requires finite lower bounds".into(),
        ));
    }
    let m1 = lp.a_ineq.len();
    let m = m1 + lp.a_eq.len();
    let total = n + m1;

    let column = |j: usize, i: usize| -> f64 {
        if j < n {
            if i < m1 {
                lp.a_ineq[i][j]
            } else {
                lp.a_eq[i - m1][j]
            }
        } else if i < m1 && i == j - n {
            1.0
        } else {
            0.0
        }
    };
    let lo = |j: usize| if j < n { lp.lower[j] } else { 0.0 };
    let hi = |j: usize| if j < n { lp.upper[j] } else { f64::INFINITY };

    let mut rhs0 = Vec::with_capacity(m);
    rhs0.extend_from_slice(&lp.b_ineq);
    rhs0.extend_from_slice(&lp.d_eq);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut feasible_seen = false;

    // Iterate over all basis subsets of size m via bitmask combinations.
    let mut combo: Vec<usize> = (0..m).collect();
    let done = m > total;
    let mut exhausted = done;
    while !exhausted {
        // Solve B x_B = rhs − N x_N with nonbasic at lower bounds.
        let mut rhs = rhs0.clone();
        let in_basis = |j: usize, combo: &[usize]| combo.contains(&j);
        for j in 0..total {
            if !in_basis(j, &combo) && lo(j) != 0.0 {
                for (i, r) in rhs.iter_mut().enumerate() {
                    *r -= column(j, i) * lo(j);
                }
            }
        }
        let mut mat = vec![0.0; m * m];
        for (c, &j) in combo.iter().enumerate() {
            for i in 0..m {
                mat[i * m + c] = column(j, i);
            }
        }
        if let Some(xb) = solve_dense(&mut mat, &mut rhs, m) {
            let mut ok = true;
            for (c, &j) in combo.iter().enumerate() {
                if xb[c] < lo(j) - 1e-9 || xb[c] > hi(j) + 1e-9 {
                    ok = false;
                    break;
                }
            }
            if ok {
                feasible_seen = true;
                let mut x = vec![0.0; total];
                for j in 0..total {
                    x[j] = lo(j);
                }
                for (c, &j) in combo.iter().enumerate() {
                    x[j] = xb[c];
                }
                let obj: f64 = lp.objective.iter().zip(&x[..n]).map(|(c, x)| c * x).sum();
                if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                    best = Some((obj, x[..n].to_vec()));
                }
            }
        }

        // Next combination in lexicographic order.
        let mut k = m;
        loop {
            if k == 0 {
                exhausted = true;
                break;
            }
            k -= 1;
            if combo[k] < total - (m - k) {
                combo[k] += 1;
                for l in k + 1..m {
                    combo[l] = combo[l - 1] + 1;
                }
                break;
            }
        }
    }

    Ok(match best {
        Some((objective, x)) => LpSolution { status: LpStatus::Optimal, x, objective },
        None => {
            debug_assert!(!feasible_seen);
            LpSolution { status: LpStatus::Infeasible, x: Vec::new(), objective: f64::NAN }
        }
    })
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mat: &mut [f64], rhs: &mut [f64], m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let mut piv = col;
        let mut best = mat[col * m + col].abs();
        for r in col + 1..m {
            let v = mat[r * m + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= 1e-11 {
            return None;
        }
        if piv != col {
            for k in 0..m {
                mat.swap(col * m + k, piv * m + k);
            }
            rhs.swap(col, piv);
        }
        let inv = 1.0 / mat[col * m + col];
        for r in col + 1..m {
            let f = mat[r * m + col] * inv;
            if f != 0.0 {
                for k in col..m {
                    mat[r * m + k] -= f * mat[col * m + k];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; m];
    for col in (0..m).rev() {
        let mut v = rhs[col];
        for k in col + 1..m {
            v -= mat[col * m + k] * x[k];
        }
        x[col] = v / mat[col * m + col];
    }
    Some(x)
}
