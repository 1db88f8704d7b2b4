//! Mixed-integer linear programming: sparse model description, a
//! deterministic bounded-variable primal simplex, branch and bound over
//! binary variables, lazy row activation for large inequality-heavy models,
//! and scenario-group queries (support constraints, most binding scenarios).
//!
//! Every variable must carry finite bounds; model builders assign wide box
//! bounds to conceptually free variables. This keeps the bounded simplex
//! and the weak-duality accounting uniform.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Row sense: `<=` or `=`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
}

/// Provenance tag used for scenario-group queries and row activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowGroup {
    /// Constraints independent of any scenario sample.
    Structural,
    /// Specification (big-M / boolean) rows of one scenario sample.
    Spec(usize),
    /// State and input constraints of one scenario sample.
    StateInput(usize),
}

impl RowGroup {
    pub fn scenario(&self) -> Option<usize> {
        match self {
            RowGroup::Structural => None,
            RowGroup::Spec(k) | RowGroup::StateInput(k) => Some(*k),
        }
    }
}

/// One sparse constraint row `sum coeffs . x (<=|=) rhs`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub group: RowGroup,
}

impl Row {
    pub fn le(coeffs: Vec<(usize, f64)>, rhs: f64, group: RowGroup) -> Self {
        Row { coeffs, sense: Sense::Le, rhs, group }
    }

    pub fn eq(coeffs: Vec<(usize, f64)>, rhs: f64, group: RowGroup) -> Self {
        Row { coeffs, sense: Sense::Eq, rhs, group }
    }

    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, v)| v * x[j]).sum()
    }

    /// Slack `rhs - activity`; zero (or negative) means binding (violated).
    pub fn slack(&self, x: &[f64]) -> f64 {
        self.rhs - self.activity(x)
    }
}

/// A mixed-integer linear program `min c . x` subject to rows and bounds.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MilpModel {
    pub objective: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub binary: Vec<bool>,
    pub rows: Vec<Row>,
}

impl MilpModel {
    pub fn new() -> Self {
        MilpModel::default()
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    /// Adds a continuous variable, returning its index.
    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.objective.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.binary.push(false);
        self.objective.len() - 1
    }

    /// Adds a binary variable, returning its index.
    pub fn add_binary(&mut self, cost: f64) -> usize {
        let j = self.add_var(cost, 0.0, 1.0);
        self.binary[j] = true;
        j
    }

    pub fn add_row(&mut self, row: Row) {
        self.rows.push(row);
    }

    pub fn n_binaries(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }

    fn check_finite_bounds(&self) -> Result<()> {
        for j in 0..self.n_vars() {
            if !self.lower[j].is_finite() || !self.upper[j].is_finite() {
                return Err(Error::UnboundedDomain(format!(
                    "variable {j} has non-finite bounds"
                )));
            }
            if self.lower[j] > self.upper[j] + 1e-12 {
                return Err(Error::Infeasible);
            }
        }
        Ok(())
    }

    /// Maximum violation of any row and any bound at `x`.
    pub fn infeasibility(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for row in &self.rows {
            let s = row.slack(x);
            match row.sense {
                Sense::Le => v = v.max(-s),
                Sense::Eq => v = v.max(s.abs()),
            }
        }
        for j in 0..self.n_vars() {
            v = v.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        v
    }
}

/// Basis status of a structural variable in the final LP tableau.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarStatus {
    Basic,
    AtLower,
    AtUpper,
}

/// Dual information for the LP relaxation that produced a solution.
#[derive(Clone, Debug)]
pub struct LpDuals {
    /// Row multipliers, one per model row.
    pub y: Vec<f64>,
    /// Reduced costs of the structural variables.
    pub d: Vec<f64>,
    pub status: Vec<VarStatus>,
}

impl LpDuals {
    /// Dual objective under bounded-variable LP duality:
    /// `y . b + sum_{j at lower} d_j l_j + sum_{j at upper} d_j u_j`.
    pub fn dual_objective(&self, model: &MilpModel) -> f64 {
        let mut g: f64 = self.y.iter().zip(&model.rows).map(|(y, r)| y * r.rhs).sum();
        for j in 0..model.n_vars() {
            match self.status[j] {
                VarStatus::AtLower => g += self.d[j] * model.lower[j],
                VarStatus::AtUpper => g += self.d[j] * model.upper[j],
                VarStatus::Basic => {}
            }
        }
        g
    }
}

/// Solver output: optimal point, objective, node count, and LP duals when
/// the model was a pure LP.
#[derive(Clone, Debug)]
pub struct MilpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub nodes: usize,
    pub duals: Option<LpDuals>,
}

/// Solver-backend boundary: anything that can solve a [`MilpModel`].
pub trait MilpBackend {
    fn solve(&self, model: &MilpModel) -> Result<MilpSolution>;
}

/// The built-in reference solver.
#[derive(Clone, Debug)]
pub struct ReferenceSolver {
    pub node_limit: usize,
    /// Integrality tolerance for branching decisions.
    pub int_tol: f64,
}

impl Default for ReferenceSolver {
    fn default() -> Self {
        ReferenceSolver { node_limit: 2_000_000, int_tol: 1e-6 }
    }
}

impl MilpBackend for ReferenceSolver {
    fn solve(&self, model: &MilpModel) -> Result<MilpSolution> {
        solve_milp(model, self.node_limit, self.int_tol)
    }
}

// ---------------------------------------------------------------------------
// Bounded-variable primal simplex
// ---------------------------------------------------------------------------

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const PHASE1_TOL: f64 = 1e-7;
const DEGENERATE_LIMIT: usize = 50;

struct Tableau {
    /// `m x n_total` dense constraint matrix in the current basis.
    t: Vec<Vec<f64>>,
    /// reduced-cost row, length `n_total`
    cost: Vec<f64>,
    /// basic variable values, length m
    xb: Vec<f64>,
    basis: Vec<usize>,
    /// nonbasic status per column; basic columns hold a stale entry
    at_upper: Vec<bool>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    n_total: usize,
    m: usize,
}

impl Tableau {
    fn value(&self, j: usize) -> f64 {
        if let Some(i) = self.basis.iter().position(|&b| b == j) {
            self.xb[i]
        } else if self.at_upper[j] {
            self.upper[j]
        } else {
            self.lower[j]
        }
    }

    fn basic_flags(&self) -> Vec<bool> {
        let mut b = vec![false; self.n_total];
        for &k in &self.basis {
            b[k] = true;
        }
        b
    }

    /// Runs primal simplex to optimality on the current cost row.
    /// Runs up to `budget` pivots; returns `(optimal, pivots_used)`.
    fn optimize_budget(&mut self, budget: usize) -> Result<(bool, usize)> {
        let mut degenerate_streak = 0usize;
        for it in 0..budget {
            let basic = self.basic_flags();
            // entering column: Dantzig pricing, Bland after a degenerate run
            let bland = degenerate_streak >= DEGENERATE_LIMIT;
            let mut enter: Option<(usize, i8, f64)> = None; // (col, direction, score)
            for j in 0..self.n_total {
                if basic[j] || (self.upper[j] - self.lower[j]).abs() < 1e-15 {
                    continue;
                }
                let d = self.cost[j];
                let dir: i8 = if !self.at_upper[j] && d < -COST_TOL {
                    1
                } else if self.at_upper[j] && d > COST_TOL {
                    -1
                } else {
                    continue;
                };
                if bland {
                    enter = Some((j, dir, 0.0));
                    break;
                }
                let score = d.abs();
                if enter.map(|(_, _, s)| score > s).unwrap_or(true) {
                    enter = Some((j, dir, score));
                }
            }
            let Some((e, dir, _)) = enter else { return Ok((true, it)) };
            let sigma = dir as f64;
            // two-pass ratio test: pass 1 finds the step bound with the
            // ratios relaxed by a feasibility tolerance, pass 2 picks the
            // largest pivot element among rows within that bound, so a row
            // with a near-zero entry never becomes the pivot merely because
            // its exact ratio is marginally smallest
            const RATIO_ZERO: f64 = 1e-12;
            const RATIO_RELAX: f64 = 1e-9;
            let ratio = |i: usize| -> Option<f64> {
                let alpha = sigma * self.t[i][e];
                let bi = self.basis[i];
                let slack = if alpha > RATIO_ZERO {
                    (self.xb[i] - self.lower[bi]) / alpha
                } else if alpha < -RATIO_ZERO {
                    (self.upper[bi] - self.xb[i]) / (-alpha)
                } else {
                    return None;
                };
                slack.is_finite().then(|| slack.max(0.0))
            };
            let mut theta_max = f64::INFINITY;
            for i in 0..self.m {
                let alpha = (sigma * self.t[i][e]).abs();
                if let Some(t_i) = ratio(i) {
                    theta_max = theta_max.min(t_i + RATIO_RELAX / alpha);
                }
            }
            let mut best_t = f64::INFINITY;
            let mut leave: Option<usize> = None;
            for i in 0..self.m {
                let Some(t_i) = ratio(i) else { continue };
                if t_i > theta_max {
                    continue;
                }
                let better = match leave {
                    None => true,
                    Some(l) => {
                        if bland {
                            // anti-cycling: lowest basis variable index wins
                            self.basis[i] < self.basis[l]
                        } else {
                            self.t[i][e].abs() > self.t[l][e].abs()
                        }
                    }
                };
                if better {
                    leave = Some(i);
                    // the step is the exact ratio of the pivot row, so the
                    // leaving variable lands exactly on its bound; rows with
                    // marginally smaller ratios overshoot by at most the
                    // relaxation and are cleaned up at the next rebuild
                    best_t = t_i;
                }
            }
            let flip = self.upper[e] - self.lower[e];
            // prefer a pivot when the ratios coincide, to make progress in
            // the basis rather than oscillating on flips
            let (step, pivot_row) = if leave.is_some() && best_t <= flip + PIVOT_TOL {
                (best_t.min(flip), leave)
            } else {
                (flip, None)
            };
            if !step.is_finite() {
                return Err(Error::Solver("unbounded direction in bounded LP".into()));
            }
            degenerate_streak = if step <= PIVOT_TOL { degenerate_streak + 1 } else { 0 };
            // update basic values along the direction
            for i in 0..self.m {
                self.xb[i] -= sigma * self.t[i][e] * step;
            }
            match pivot_row {
                None => {
                    // bound flip of the entering variable
                    self.at_upper[e] = !self.at_upper[e];
                }
                Some(r) => {
                    let out = self.basis[r];
                    // leaving variable rests at the bound it reached
                    let alpha = sigma * self.t[r][e];
                    self.at_upper[out] = alpha < 0.0;
                    // entering variable becomes basic at its new value
                    let new_val =
                        if dir == 1 { self.lower[e] + step } else { self.upper[e] - step };
                    self.pivot(r, e);
                    self.xb[r] = new_val;
                    self.basis[r] = e;
                }
            }
        }
        Ok((false, budget))
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let piv = self.t[pr][pc];
        debug_assert!(piv.abs() > PIVOT_TOL * 1e-3, "tiny pivot {piv}");
        let inv = 1.0 / piv;
        for v in self.t[pr].iter_mut() {
            *v *= inv;
        }
        let prow = self.t[pr].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == pr {
                continue;
            }
            let f = row[pc];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(&prow) {
                    *v -= f * p;
                }
            }
        }
        let f = self.cost[pc];
        if f != 0.0 {
            for (v, p) in self.cost.iter_mut().zip(&prow) {
                *v -= f * p;
            }
        }
    }

    /// Recomputes the reduced-cost row for a fresh objective `c` (length
    /// `n_total`) under the current basis, by eliminating basic columns.
    fn set_cost(&mut self, c: &[f64]) {
        self.cost = c.to_vec();
        for i in 0..self.m {
            let b = self.basis[i];
            let f = self.cost[b];
            if f != 0.0 {
                let row = self.t[i].clone();
                for (v, p) in self.cost.iter_mut().zip(&row) {
                    *v -= f * p;
                }
            }
        }
    }
}

/// Solves the LP relaxation (binaries treated as continuous in their
/// current bounds). Models with many more rows than variables are solved
/// through their dual, where the simplex basis has one entry per variable
/// instead of one per row.
pub fn solve_lp(model: &MilpModel) -> Result<MilpSolution> {
    model.check_finite_bounds()?;
    let n = model.n_vars();
    if n > 0 && model.rows.len() > 2 * n + 64 {
        // row-heavy models: solve on a growing active subset of rows so the
        // dense tableau stays small and well conditioned
        solve_lp_sifted(model)
    } else {
        solve_lp_primal(model)
    }
}

/// Solves a many-row LP by sifting: start from the equality rows, solve the
/// relaxation with the primal simplex, and pull in the most violated
/// inequality rows until the relaxation optimum satisfies the full model
/// (and is therefore optimal for it). Every variable is boxed, so each
/// relaxation is bounded, and an infeasible relaxation certifies the full
/// model infeasible.
fn solve_lp_sifted(model: &MilpModel) -> Result<MilpSolution> {
    const FEAS_TOL: f64 = 1e-9;
    const BATCH: usize = 192;
    // rows with this much slack at a subproblem optimum are dropped again,
    // for a bounded number of rounds so the loop must terminate
    const DROP_SLACK: f64 = 1e-6;
    const MAX_DROP_ROUNDS: usize = 24;
    let m = model.rows.len();
    let mut active: Vec<usize> =
        (0..m).filter(|&i| model.rows[i].sense == Sense::Eq).collect();
    let mut is_active = vec![false; m];
    for &i in &active {
        is_active[i] = true;
    }
    let mut drop_rounds = 0usize;
    loop {
        let mut sub = MilpModel::new();
        sub.objective = model.objective.clone();
        sub.lower = model.lower.clone();
        sub.upper = model.upper.clone();
        sub.binary = vec![false; model.n_vars()];
        for &i in &active {
            sub.rows.push(model.rows[i].clone());
        }
        let sol = solve_lp_primal(&sub)?;
        let mut violated: Vec<(f64, usize)> = Vec::new();
        for (i, row) in model.rows.iter().enumerate() {
            if !is_active[i] {
                let slack = row.slack(&sol.x);
                if slack < -FEAS_TOL {
                    violated.push((slack, i));
                }
            }
        }
        if violated.is_empty() {
            // scatter the subproblem duals back onto the full row set
            let duals = sol.duals.as_ref().expect("LP solve carries duals");
            let mut y = vec![0.0; m];
            for (pos, &i) in active.iter().enumerate() {
                y[i] = duals.y[pos];
            }
            return Ok(MilpSolution {
                x: sol.x,
                objective: sol.objective,
                nodes: 1,
                duals: Some(LpDuals {
                    y,
                    d: duals.d.clone(),
                    status: duals.status.clone(),
                }),
            });
        }
        violated.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // keep the working set small: retire slack inequality rows before
        // pulling in the next batch of violated ones
        if drop_rounds < MAX_DROP_ROUNDS {
            drop_rounds += 1;
            active.retain(|&i| {
                let row = &model.rows[i];
                let keep = row.sense == Sense::Eq || row.slack(&sol.x) <= DROP_SLACK;
                if !keep {
                    is_active[i] = false;
                }
                keep
            });
        }
        for &(_, i) in violated.iter().take(BATCH) {
            active.push(i);
            is_active[i] = true;
        }
    }
}

/// Column-equilibrated front end for the primal simplex: variables are
/// rescaled so every column has unit max-norm, which keeps the tableau
/// numerically balanced when big-M columns mix with unit ones.
fn solve_lp_primal(model: &MilpModel) -> Result<MilpSolution> {
    let n = model.n_vars();
    let mut col_scale = vec![0.0f64; n];
    for row in &model.rows {
        for &(j, v) in &row.coeffs {
            col_scale[j] = col_scale[j].max(v.abs());
        }
    }
    for v in col_scale.iter_mut() {
        *v = if *v > 0.0 { *v } else { 1.0 };
    }
    if col_scale.iter().all(|&v| v == 1.0) {
        return solve_lp_primal_inner(model);
    }
    let mut scaled = model.clone();
    for j in 0..n {
        let c = col_scale[j];
        scaled.objective[j] /= c;
        scaled.lower[j] = model.lower[j] * c;
        scaled.upper[j] = model.upper[j] * c;
    }
    for row in scaled.rows.iter_mut() {
        for (j, v) in row.coeffs.iter_mut() {
            *v /= col_scale[*j];
        }
    }
    let mut sol = solve_lp_primal_inner(&scaled)?;
    for j in 0..n {
        sol.x[j] = (sol.x[j] / col_scale[j]).clamp(model.lower[j], model.upper[j]);
    }
    sol.objective = model.objective.iter().zip(&sol.x).map(|(c, v)| c * v).sum();
    if let Some(duals) = sol.duals.as_mut() {
        for j in 0..n {
            duals.d[j] *= col_scale[j];
        }
    }
    Ok(sol)
}

/// Two-phase bounded-variable primal simplex over a dense tableau. Bounds
/// must be finite except for upper bounds, which may be infinite.
fn solve_lp_primal_inner(model: &MilpModel) -> Result<MilpSolution> {
    let n = model.n_vars();
    let m = model.rows.len();
    let n_slack = model.rows.iter().filter(|r| r.sense == Sense::Le).count();
    // row equilibration: work on rows scaled to unit max-norm; duals are
    // rescaled on extraction
    let row_scale: Vec<f64> = model
        .rows
        .iter()
        .map(|r| {
            let mx = r.coeffs.iter().map(|&(_, v)| v.abs()).fold(0.0f64, f64::max);
            if mx > 0.0 {
                1.0 / mx
            } else {
                1.0
            }
        })
        .collect();
    // start: structural vars at the finite bound closer to zero (lower on
    // ties); residuals against that point decide which rows need an
    // artificial column (a `<=` row with nonnegative residual starts with
    // its slack basic instead)
    let mut x0 = vec![0.0; n];
    let mut start_upper = vec![false; n];
    for j in 0..n {
        let l = model.lower[j];
        let u = model.upper[j];
        if u.abs() < l.abs() {
            start_upper[j] = true;
            x0[j] = u;
        } else {
            x0[j] = l;
        }
    }
    let mut residual = vec![0.0; m];
    let mut needs_art = vec![false; m];
    let mut n_art = 0usize;
    for (i, row) in model.rows.iter().enumerate() {
        let mut r = row.rhs;
        for &(j, v) in &row.coeffs {
            assert!(j < n, "row references unknown variable {j}");
            r -= v * x0[j];
        }
        residual[i] = r * row_scale[i];
        if row.sense == Sense::Eq || r < 0.0 {
            needs_art[i] = true;
            n_art += 1;
        }
    }
    let n_total = n + n_slack + n_art;
    let mut lower = Vec::with_capacity(n_total);
    let mut upper = Vec::with_capacity(n_total);
    lower.extend_from_slice(&model.lower);
    upper.extend_from_slice(&model.upper);
    for _ in 0..(n_slack + n_art) {
        lower.push(0.0);
        upper.push(f64::INFINITY); // slacks/artificials are unbounded above
    }
    // dense rows: structural | slack | artificial
    let mut t = vec![vec![0.0; n_total]; m];
    let mut slack_col = vec![usize::MAX; m];
    let mut art_col = vec![usize::MAX; m];
    let mut art_sign = vec![1.0f64; m];
    let mut next_slack = n;
    let mut next_art = n + n_slack;
    for (i, row) in model.rows.iter().enumerate() {
        for &(j, v) in &row.coeffs {
            t[i][j] += v * row_scale[i];
        }
        if row.sense == Sense::Le {
            slack_col[i] = next_slack;
            t[i][next_slack] = 1.0;
            next_slack += 1;
        }
        if needs_art[i] {
            art_col[i] = next_art;
            next_art += 1;
        }
    }
    let mut at_upper = vec![false; n_total];
    at_upper[..n].copy_from_slice(&start_upper);
    let mut xb = vec![0.0; m];
    let mut basis = vec![0usize; m];
    for i in 0..m {
        let r = residual[i];
        if !needs_art[i] {
            // `<=` row satisfied at the start point: slack is basic at r
            xb[i] = r;
            basis[i] = slack_col[i];
            continue;
        }
        if r < 0.0 {
            // scale the row so the artificial basis column is +1
            art_sign[i] = -1.0;
            for v in t[i].iter_mut() {
                *v = -*v;
            }
        }
        let a = art_col[i];
        t[i][a] = 1.0;
        xb[i] = r.abs();
        basis[i] = a;
    }
    let mut tab = Tableau {
        t,
        cost: vec![0.0; n_total],
        xb,
        basis,
        at_upper,
        lower,
        upper,
        n_total,
        m,
    };
    // scaled column of the start system: structural j, slack, or artificial
    let fresh_col = |col: usize, out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        if col < n {
            for (i, row) in model.rows.iter().enumerate() {
                for &(jj, v) in &row.coeffs {
                    if jj == col {
                        out[i] += art_sign[i] * row_scale[i] * v;
                    }
                }
            }
        } else if col < n + n_slack {
            for i in 0..m {
                if slack_col[i] == col {
                    out[i] = art_sign[i];
                }
            }
        } else {
            for i in 0..m {
                if art_col[i] == col {
                    out[i] = 1.0;
                }
            }
        }
    };

    // Rebuilds the tableau from its basis against the original (scaled)
    // data, discarding accumulated pivoting roundoff. Small bound
    // violations of the exact basic values are clamped away; they stay
    // tiny because the rebuild runs every few hundred pivots. Returns
    // false when the basis factorization is singular.
    let rebuild = |tab: &mut Tableau| -> bool {
        if m == 0 {
            return true;
        }
        let mut bmat = nalgebra::DMatrix::zeros(m, m);
        let mut colbuf = vec![0.0; m];
        for (k, &col) in tab.basis.iter().enumerate() {
            fresh_col(col, &mut colbuf);
            for i in 0..m {
                bmat[(i, k)] = colbuf[i];
            }
        }
        let lu = bmat.lu();
        let mut rhs = nalgebra::DVector::zeros(m);
        for (i, row) in model.rows.iter().enumerate() {
            rhs[i] = art_sign[i] * row_scale[i] * row.rhs;
        }
        let basic = tab.basic_flags();
        for col in 0..n_total {
            if basic[col] {
                continue;
            }
            let v = if tab.at_upper[col] { tab.upper[col] } else { tab.lower[col] };
            if v != 0.0 {
                fresh_col(col, &mut colbuf);
                for i in 0..m {
                    rhs[i] -= colbuf[i] * v;
                }
            }
        }
        let Some(xb) = lu.solve(&rhs) else { return false };
        let mut rhs_col = nalgebra::DVector::zeros(m);
        let mut fresh_t = vec![vec![0.0; n_total]; m];
        for col in 0..n_total {
            fresh_col(col, &mut colbuf);
            for i in 0..m {
                rhs_col[i] = colbuf[i];
            }
            let Some(sol_col) = lu.solve(&rhs_col) else { return false };
            for i in 0..m {
                fresh_t[i][col] = sol_col[i];
            }
        }
        tab.t = fresh_t;
        for (k, &col) in tab.basis.iter().enumerate() {
            tab.xb[k] = xb[k].clamp(tab.lower[col], tab.upper[col]);
        }
        true
    };

    // Budgeted pivoting with periodic refactorization: the phase ends only
    // when a freshly rebuilt tableau reports optimality without further
    // pivots.
    const REFRESH: usize = 512;
    let run_phase = |tab: &mut Tableau, cost_vec: &[f64]| -> Result<()> {
        tab.set_cost(cost_vec);
        let round_limit = 200 + (50_000 + 200 * (m + n_total)) / REFRESH;
        let mut fresh = false;
        for _ in 0..round_limit {
            let (done, pivots) = match tab.optimize_budget(REFRESH) {
                Ok(r) => r,
                // an unbounded direction on a drifted tableau can be a
                // roundoff phantom: refactorize and re-check before trusting
                Err(Error::Solver(msg)) if msg.contains("unbounded") && !fresh => {
                    if !rebuild(tab) {
                        return Err(Error::Solver(msg));
                    }
                    tab.set_cost(cost_vec);
                    fresh = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if done && fresh && pivots == 0 {
                return Ok(());
            }
            if rebuild(tab) {
                tab.set_cost(cost_vec);
                fresh = true;
            } else {
                // singular basis factor: trust the tableau as it stands
                if done {
                    return Ok(());
                }
                fresh = false;
            }
        }
        Err(Error::Solver("simplex iteration limit reached".into()))
    };

    // phase 1: minimize the sum of artificials (skipped when none exist)
    if n_art > 0 {
        let mut phase1 = vec![0.0; n_total];
        for j in (n + n_slack)..n_total {
            phase1[j] = 1.0;
        }
        run_phase(&mut tab, &phase1)?;
        let infeas: f64 = ((n + n_slack)..n_total).map(|j| tab.value(j)).sum();
        if infeas > PHASE1_TOL {
            return Err(Error::Infeasible);
        }
        // pin artificials to zero before restoring the true objective
        for a in (n + n_slack)..n_total {
            tab.lower[a] = 0.0;
            tab.upper[a] = 0.0;
            tab.at_upper[a] = false;
        }
    }
    let mut cost = vec![0.0; n_total];
    cost[..n].copy_from_slice(&model.objective);
    run_phase(&mut tab, &cost)?;

    // Optimize, then refactorize the final basis against the original
    // (scaled) data: a dense tableau accumulates roundoff over long runs, so
    // the basis is re-priced exactly, and if a reduced cost turns out
    // meaningfully negative the tableau is rebuilt from the basis and
    // pivoting continues.
    const REFINE_TOL: f64 = 1e-7;
    const MAX_REFINES: usize = 12;
    let mut refines = 0usize;
    if m > 0 {
        loop {
            let basic = tab.basic_flags();
            let mut bmat = nalgebra::DMatrix::zeros(m, m);
            let mut colbuf = vec![0.0; m];
            for (k, &col) in tab.basis.iter().enumerate() {
                fresh_col(col, &mut colbuf);
                for i in 0..m {
                    bmat[(i, k)] = colbuf[i];
                }
            }
            let lu = bmat.clone().lu();
            // rhs minus the nonbasic columns at their bounds
            let mut rhs = nalgebra::DVector::zeros(m);
            for (i, row) in model.rows.iter().enumerate() {
                rhs[i] = art_sign[i] * row_scale[i] * row.rhs;
            }
            let mut xval = vec![0.0; n_total];
            for col in 0..n_total {
                if basic[col] {
                    continue;
                }
                let v = if tab.at_upper[col] { tab.upper[col] } else { tab.lower[col] };
                if v != 0.0 {
                    xval[col] = v;
                    fresh_col(col, &mut colbuf);
                    for i in 0..m {
                        rhs[i] -= colbuf[i] * v;
                    }
                }
            }
            let Some(xb) = lu.solve(&rhs) else { break };
            let cb = nalgebra::DVector::from_fn(m, |k, _| {
                let col = tab.basis[k];
                if col < n {
                    model.objective[col]
                } else {
                    0.0
                }
            });
            let Some(ys) = bmat.transpose().lu().solve(&cb) else { break };
            // exact reduced costs; artificials are pinned to zero and get a
            // neutral entry so they never re-enter
            let mut dall = vec![0.0; n_total];
            let mut dual_viol = 0.0f64;
            for col in 0..n_total {
                if basic[col] || col >= n + n_slack {
                    continue;
                }
                fresh_col(col, &mut colbuf);
                let base = if col < n { model.objective[col] } else { 0.0 };
                let r = base - ys.iter().zip(&colbuf).map(|(a, b)| a * b).sum::<f64>();
                dall[col] = r;
                // a column pinned by equal bounds cannot move, so its
                // reduced cost carries no optimality information
                if tab.upper[col] - tab.lower[col] <= 0.0 {
                    continue;
                }
                let v = if tab.at_upper[col] { r.max(0.0) } else { (-r).max(0.0) };
                dual_viol = dual_viol.max(v);
            }
            let mut primal_viol = 0.0f64;
            for (k, &col) in tab.basis.iter().enumerate() {
                primal_viol = primal_viol
                    .max(tab.lower[col] - xb[k])
                    .max(xb[k] - tab.upper[col]);
            }
            // the relaxed ratio test deliberately lets basics overshoot
            // their bounds by up to ~1e-9 per pivot, so the exact basic
            // point can sit a few 1e-7 outside; the extraction below clamps
            // that away, so primal accuracy is accepted up to 1e-6
            if dual_viol <= REFINE_TOL && primal_viol <= 1e-6 {
                // clean optimum: extract everything from the factorization
                for (k, &col) in tab.basis.iter().enumerate() {
                    xval[col] = xb[k];
                }
                let mut y = vec![0.0; m];
                for i in 0..m {
                    y[i] = ys[i] * art_sign[i] * row_scale[i];
                }
                let d: Vec<f64> = (0..n).map(|j| dall[j]).collect();
                let x: Vec<f64> =
                    (0..n).map(|j| xval[j].clamp(model.lower[j], model.upper[j])).collect();
                let objective =
                    model.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
                let status: Vec<VarStatus> = (0..n)
                    .map(|j| {
                        if basic[j] {
                            VarStatus::Basic
                        } else if tab.at_upper[j] {
                            VarStatus::AtUpper
                        } else {
                            VarStatus::AtLower
                        }
                    })
                    .collect();
                return Ok(MilpSolution {
                    x,
                    objective,
                    nodes: 1,
                    duals: Some(LpDuals { y, d, status }),
                });
            }
            refines += 1;
            if refines > MAX_REFINES || primal_viol > 1e-4 {
                return Err(Error::Solver(format!(
                    "simplex refinement stalled: dual violation {dual_viol:.3e}, \
                     primal violation {primal_viol:.3e}"
                )));
            }
            // rebuild from the basis and resume pivoting
            if !rebuild(&mut tab) {
                break;
            }
            run_phase(&mut tab, &cost)?;
        }
    }
    // empty model or singular basis factor: read off the tableau directly
    let basic = tab.basic_flags();
    let x: Vec<f64> = (0..n).map(|j| tab.value(j)).collect();
    let objective = model.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    let mut y = vec![0.0; m];
    for i in 0..m {
        let (col, sign) = if slack_col[i] != usize::MAX {
            (slack_col[i], 1.0)
        } else {
            (art_col[i], art_sign[i])
        };
        y[i] = -tab.cost[col] / sign * row_scale[i];
    }
    let d: Vec<f64> = (0..n).map(|j| tab.cost[j]).collect();
    let status: Vec<VarStatus> = (0..n)
        .map(|j| {
            if basic[j] {
                VarStatus::Basic
            } else if tab.at_upper[j] {
                VarStatus::AtUpper
            } else {
                VarStatus::AtLower
            }
        })
        .collect();
    Ok(MilpSolution { x, objective, nodes: 1, duals: Some(LpDuals { y, d, status }) })
}

// ---------------------------------------------------------------------------
// Branch and bound
// ---------------------------------------------------------------------------

/// Solves a MILP by depth-first branch and bound over the binary variables,
/// branching on the most fractional binary (ties to the lowest index) and
/// exploring the rounded side first. Deterministic by construction.
pub fn solve_milp(model: &MilpModel, node_limit: usize, int_tol: f64) -> Result<MilpSolution> {
    model.check_finite_bounds()?;
    let binaries: Vec<usize> =
        (0..model.n_vars()).filter(|&j| model.binary[j]).collect();
    if binaries.is_empty() {
        return solve_lp(model);
    }
    let mut incumbent: Option<MilpSolution> = None;
    let mut nodes = 0usize;
    // stack of (lower-bound overrides, upper-bound overrides)
    let mut stack: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new()];
    let mut work = model.clone();
    while let Some(fixes) = stack.pop() {
        nodes += 1;
        if nodes > node_limit {
            return Err(Error::NodeLimit(node_limit));
        }
        work.lower.copy_from_slice(&model.lower);
        work.upper.copy_from_slice(&model.upper);
        for &(j, l, u) in &fixes {
            work.lower[j] = l;
            work.upper[j] = u;
        }
        let relax = match solve_lp(&work) {
            Ok(s) => s,
            Err(Error::Infeasible) => continue,
            Err(e) => {
                if std::env::var("MILP_DEBUG_NODE").is_ok() {
                    eprintln!("node fixes: {fixes:?}");
                }
                return Err(e);
            }
        };
        if let Some(inc) = &incumbent {
            if relax.objective >= inc.objective - 1e-12 {
                continue;
            }
        }
        // most fractional binary
        let mut branch: Option<(usize, f64)> = None;
        for &j in &binaries {
            let v = relax.x[j];
            let frac = (v - v.round()).abs();
            if frac > int_tol {
                let dist = (v - 0.5).abs();
                if branch.map(|(_, best)| dist < best - 1e-15).unwrap_or(true) {
                    branch = Some((j, dist));
                }
            }
        }
        match branch {
            None => {
                // integral: snap binaries exactly and accept as incumbent
                let mut sol = relax;
                for &j in &binaries {
                    sol.x[j] = sol.x[j].round();
                }
                sol.objective = model
                    .objective
                    .iter()
                    .zip(&sol.x)
                    .map(|(c, v)| c * v)
                    .sum();
                sol.duals = None;
                if incumbent
                    .as_ref()
                    .map(|i| sol.objective < i.objective - 1e-12)
                    .unwrap_or(true)
                {
                    incumbent = Some(sol);
                }
            }
            Some((j, _)) => {
                let v = relax.x[j];
                let mut near = fixes.clone();
                let mut far = fixes;
                if v >= 0.5 {
                    near.push((j, 1.0, 1.0));
                    far.push((j, 0.0, 0.0));
                } else {
                    near.push((j, 0.0, 0.0));
                    far.push((j, 1.0, 1.0));
                }
                // LIFO: push far first so the rounded side is explored next
                stack.push(far);
                stack.push(near);
            }
        }
    }
    let mut best = incumbent.ok_or(Error::Infeasible)?;
    best.nodes = nodes;
    Ok(best)
}

// ---------------------------------------------------------------------------
// Lazy row activation
// ---------------------------------------------------------------------------

/// Solves a model by activating inequality rows lazily: equalities and
/// structural rows are always active, and violated scenario inequalities are
/// added until the subproblem optimum is feasible for the full model. Each
/// subproblem is a relaxation, so the final solution is exact.
pub fn solve_with_row_generation(
    model: &MilpModel,
    backend: &dyn MilpBackend,
) -> Result<MilpSolution> {
    model.check_finite_bounds()?;
    let always_active = |r: &Row| r.sense == Sense::Eq || r.group == RowGroup::Structural;
    let mut active: Vec<bool> = model.rows.iter().map(always_active).collect();
    const FEAS_TOL: f64 = 1e-9;
    const DROP_TOL: f64 = 1e-7;
    const BATCH: usize = 64;
    const MAX_DROPS: usize = 2;
    // lazily activated rows that come out slack are deactivated again so the
    // working model stays near the support size; a bounded drop count per
    // row guarantees termination
    let mut drops = vec![0usize; model.rows.len()];
    loop {
        let mut sub = MilpModel {
            objective: model.objective.clone(),
            lower: model.lower.clone(),
            upper: model.upper.clone(),
            binary: model.binary.clone(),
            rows: Vec::new(),
        };
        let mut active_idx = Vec::new();
        for (i, row) in model.rows.iter().enumerate() {
            if active[i] {
                sub.rows.push(row.clone());
                active_idx.push(i);
            }
        }
        let sol = backend.solve(&sub)?;
        // most violated inactive rows, up to a batch
        let mut violated: Vec<(usize, f64)> = model
            .rows
            .iter()
            .enumerate()
            .filter(|(i, _)| !active[*i])
            .map(|(i, r)| (i, -r.slack(&sol.x)))
            .filter(|&(_, v)| v > FEAS_TOL)
            .collect();
        if violated.is_empty() {
            // duals would be indexed against the subproblem; drop them and
            // report against the full model
            return Ok(MilpSolution { duals: None, ..sol });
        }
        violated.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (pos, row) in model.rows.iter().enumerate() {
            if active[pos]
                && !always_active(row)
                && drops[pos] < MAX_DROPS
                && row.slack(&sol.x) > DROP_TOL
            {
                active[pos] = false;
                drops[pos] += 1;
            }
        }
        for &(i, _) in violated.iter().take(BATCH) {
            active[i] = true;
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario-group queries
// ---------------------------------------------------------------------------

/// Scenario indices whose constraint group supports the optimum: removing
/// the group's rows strictly improves the objective.
pub fn find_support_constraints(
    model: &MilpModel,
    backend: &dyn MilpBackend,
    tol: f64,
) -> Result<Vec<usize>> {
    let base = backend.solve(model)?;
    let mut scenarios: Vec<usize> =
        model.rows.iter().filter_map(|r| r.group.scenario()).collect();
    scenarios.sort_unstable();
    scenarios.dedup();
    let mut support = Vec::new();
    for k in scenarios {
        let mut reduced = model.clone();
        reduced.rows.retain(|r| r.group.scenario() != Some(k));
        match backend.solve(&reduced) {
            Ok(sol) => {
                if sol.objective < base.objective - tol {
                    support.push(k);
                }
            }
            // removing rows cannot make a feasible model infeasible, but a
            // removed group may unbound the relaxation within box bounds
            Err(Error::Infeasible) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(support)
}

/// Scenarios whose rows are closest to binding at `x`: all scenarios whose
/// minimum inequality slack is within `tol` of the overall minimum, padded
/// with the next-smallest scenarios until at least `min_count` are returned.
pub fn most_binding_scenarios(
    model: &MilpModel,
    x: &[f64],
    tol: f64,
    min_count: usize,
) -> Vec<usize> {
    let mut min_slack: Vec<(usize, f64)> = Vec::new();
    for row in &model.rows {
        if row.sense != Sense::Le {
            continue;
        }
        let Some(k) = row.group.scenario() else { continue };
        let s = row.slack(x);
        match min_slack.iter_mut().find(|(i, _)| *i == k) {
            Some((_, m)) => *m = m.min(s),
            None => min_slack.push((k, s)),
        }
    }
    if min_slack.is_empty() {
        return Vec::new();
    }
    min_slack.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let cutoff = min_slack[0].1 + tol;
    let mut out: Vec<usize> = Vec::new();
    for (i, &(k, s)) in min_slack.iter().enumerate() {
        if s <= cutoff || i < min_count {
            out.push(k);
        }
    }
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

/// Writes a model in a line-oriented text format. Floats use the shortest
/// representation that round-trips, so `import_text(export_text(m))`
/// reproduces the model bit for bit.
pub fn export_text(model: &MilpModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "milp 1");
    let _ = writeln!(s, "vars {}", model.n_vars());
    for j in 0..model.n_vars() {
        let _ = writeln!(
            s,
            "var {} {} {} {}",
            model.objective[j],
            model.lower[j],
            model.upper[j],
            if model.binary[j] { "b" } else { "c" }
        );
    }
    let _ = writeln!(s, "rows {}", model.rows.len());
    for row in &model.rows {
        let sense = match row.sense {
            Sense::Le => "le",
            Sense::Eq => "eq",
        };
        let group = match row.group {
            RowGroup::Structural => "st".to_string(),
            RowGroup::Spec(k) => format!("sp{k}"),
            RowGroup::StateInput(k) => format!("si{k}"),
        };
        let _ = write!(s, "row {sense} {} {group} {}", row.rhs, row.coeffs.len());
        for &(j, v) in &row.coeffs {
            let _ = write!(s, " {j} {v}");
        }
        s.push('\n');
    }
    s
}

/// Parses the format produced by [`export_text`].
pub fn import_text(text: &str) -> Result<MilpModel> {
    let bad = |line: usize, msg: &str| Error::InputFile(format!("line {}: {msg}", line + 1));
    let mut lines = text.lines().enumerate();
    let (i, header) = lines.next().ok_or_else(|| bad(0, "empty input"))?;
    if header.trim() != "milp 1" {
        return Err(bad(i, "expected header `milp 1`"));
    }
    let mut model = MilpModel::new();
    let (i, vars_line) = lines.next().ok_or_else(|| bad(1, "missing `vars` line"))?;
    let n: usize = vars_line
        .strip_prefix("vars ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(i, "expected `vars <n>`"))?;
    for _ in 0..n {
        let (i, line) = lines.next().ok_or_else(|| bad(0, "missing variable line"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "var" {
            return Err(bad(i, "expected `var <cost> <lower> <upper> <b|c>`"));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(i, "bad number"));
        let j = model.add_var(parse(parts[1])?, parse(parts[2])?, parse(parts[3])?);
        match parts[4] {
            "b" => model.binary[j] = true,
            "c" => {}
            _ => return Err(bad(i, "variable kind must be `b` or `c`")),
        }
    }
    let (i, rows_line) = lines.next().ok_or_else(|| bad(0, "missing `rows` line"))?;
    let m: usize = rows_line
        .strip_prefix("rows ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(i, "expected `rows <m>`"))?;
    for _ in 0..m {
        let (i, line) = lines.next().ok_or_else(|| bad(0, "missing row line"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 5 || parts[0] != "row" {
            return Err(bad(i, "expected `row <sense> <rhs> <group> <nnz> ...`"));
        }
        let sense = match parts[1] {
            "le" => Sense::Le,
            "eq" => Sense::Eq,
            _ => return Err(bad(i, "sense must be `le` or `eq`")),
        };
        let rhs: f64 = parts[2].parse().map_err(|_| bad(i, "bad rhs"))?;
        let group = if parts[3] == "st" {
            RowGroup::Structural
        } else if let Some(k) = parts[3].strip_prefix("sp") {
            RowGroup::Spec(k.parse().map_err(|_| bad(i, "bad group index"))?)
        } else if let Some(k) = parts[3].strip_prefix("si") {
            RowGroup::StateInput(k.parse().map_err(|_| bad(i, "bad group index"))?)
        } else {
            return Err(bad(i, "group must be `st`, `sp<k>` or `si<k>`"));
        };
        let nnz: usize = parts[4].parse().map_err(|_| bad(i, "bad nnz"))?;
        if parts.len() != 5 + 2 * nnz {
            return Err(bad(i, "coefficient count mismatch"));
        }
        let mut coeffs = Vec::with_capacity(nnz);
        for t in 0..nnz {
            let j: usize = parts[5 + 2 * t].parse().map_err(|_| bad(i, "bad index"))?;
            let v: f64 = parts[6 + 2 * t].parse().map_err(|_| bad(i, "bad value"))?;
            if j >= model.n_vars() {
                return Err(bad(i, "coefficient references unknown variable"));
            }
            coeffs.push((j, v));
        }
        model.add_row(Row { coeffs, sense, rhs, group });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn st() -> RowGroup {
        RowGroup::Structural
    }

    #[test]
    fn textbook_lp() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36
        let mut m = MilpModel::new();
        let x = m.add_var(-3.0, 0.0, 100.0);
        let y = m.add_var(-5.0, 0.0, 100.0);
        m.add_row(Row::le(vec![(x, 1.0)], 4.0, st()));
        m.add_row(Row::le(vec![(y, 2.0)], 12.0, st()));
        m.add_row(Row::le(vec![(x, 3.0), (y, 2.0)], 18.0, st()));
        let sol = solve_lp(&m).unwrap();
        assert!((sol.objective + 36.0).abs() < 1e-9);
        assert!((sol.x[0] - 2.0).abs() < 1e-9);
        assert!((sol.x[1] - 6.0).abs() < 1e-9);
        // strong duality at the optimum
        let duals = sol.duals.as_ref().unwrap();
        assert!((duals.dual_objective(&m) - sol.objective).abs() < 1e-9);
    }

    #[test]
    fn equality_rows_and_negative_rhs() {
        // min x + y s.t. x - y = -2, x + y >= 1 (as -x - y <= -1), 0<=x,y<=10
        let mut m = MilpModel::new();
        let x = m.add_var(1.0, 0.0, 10.0);
        let y = m.add_var(1.0, 0.0, 10.0);
        m.add_row(Row::eq(vec![(x, 1.0), (y, -1.0)], -2.0, st()));
        m.add_row(Row::le(vec![(x, -1.0), (y, -1.0)], -1.0, st()));
        let sol = solve_lp(&m).unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-9);
        assert!((sol.x[1] - sol.x[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_lp_detected() {
        let mut m = MilpModel::new();
        let x = m.add_var(1.0, 0.0, 1.0);
        m.add_row(Row::le(vec![(x, 1.0)], -5.0, st()));
        assert!(matches!(solve_lp(&m), Err(Error::Infeasible)));
    }

    #[test]
    fn variables_at_upper_bound() {
        let mut m = MilpModel::new();
        m.add_var(-1.0, -3.0, 7.0);
        let sol = solve_lp(&m).unwrap();
        assert_eq!(sol.x[0], 7.0);
        assert_eq!(sol.duals.as_ref().unwrap().status[0], VarStatus::AtUpper);
    }

    #[test]
    fn knapsack_matches_enumeration() {
        // max value knapsack as min of negated value
        let values = [6.0, 10.0, 12.0, 7.0, 3.0];
        let weights = [1.0, 2.0, 3.0, 2.0, 1.0];
        let cap = 5.0;
        let mut m = MilpModel::new();
        let vars: Vec<usize> = values.iter().map(|&v| m.add_binary(-v)).collect();
        m.add_row(Row::le(
            vars.iter().zip(weights.iter()).map(|(&j, &w)| (j, w)).collect(),
            cap,
            st(),
        ));
        let sol = solve_milp(&m, 10_000, 1e-6).unwrap();
        // brute force
        let mut best = f64::INFINITY;
        for mask in 0u32..32 {
            let w: f64 = (0..5).filter(|i| mask >> i & 1 == 1).map(|i| weights[i]).sum();
            if w <= cap {
                let v: f64 = (0..5).filter(|i| mask >> i & 1 == 1).map(|i| -values[i]).sum();
                best = best.min(v);
            }
        }
        assert!((sol.objective - best).abs() < 1e-9);
        for &j in &vars {
            assert!(sol.x[j] == 0.0 || sol.x[j] == 1.0);
        }
    }

    fn random_milp(rng: &mut StdRng) -> MilpModel {
        let n_cont = rng.gen_range(0..=3);
        let n_bin = rng.gen_range(1..=5);
        let mut m = MilpModel::new();
        for _ in 0..n_cont {
            let l = rng.gen_range(-3.0..0.0);
            let u = l + rng.gen_range(0.5..4.0);
            m.add_var(rng.gen_range(-2.0..2.0), l, u);
        }
        for _ in 0..n_bin {
            m.add_binary(rng.gen_range(-2.0..2.0));
        }
        let n = m.n_vars();
        for _ in 0..rng.gen_range(1..=5) {
            let mut coeffs: Vec<(usize, f64)> = Vec::new();
            for j in 0..n {
                if rng.gen_bool(0.7) {
                    coeffs.push((j, rng.gen_range(-2.0..2.0)));
                }
            }
            if coeffs.is_empty() {
                continue;
            }
            let sense = if rng.gen_bool(0.85) { Sense::Le } else { Sense::Eq };
            // keep equalities satisfiable: anchor rhs at a random box point
            let anchor: f64 = coeffs
                .iter()
                .map(|&(j, v)| {
                    let x = if m.binary[j] {
                        if rng.gen_bool(0.5) { 1.0 } else { 0.0 }
                    } else {
                        rng.gen_range(m.lower[j]..=m.upper[j])
                    };
                    v * x
                })
                .sum();
            let rhs = if sense == Sense::Le { anchor + rng.gen_range(0.0..1.0) } else { anchor };
            m.add_row(Row { coeffs, sense, rhs, group: st() });
        }
        m
    }

    /// Enumerates every binary assignment and solves the remaining LP.
    fn enumerate_milp(m: &MilpModel) -> Option<f64> {
        let bins: Vec<usize> = (0..m.n_vars()).filter(|&j| m.binary[j]).collect();
        let mut best: Option<f64> = None;
        for mask in 0u32..(1 << bins.len()) {
            let mut fixed = m.clone();
            for (t, &j) in bins.iter().enumerate() {
                let v = if mask >> t & 1 == 1 { 1.0 } else { 0.0 };
                fixed.lower[j] = v;
                fixed.upper[j] = v;
            }
            if let Ok(sol) = solve_lp(&fixed) {
                best = Some(best.map_or(sol.objective, |b: f64| b.min(sol.objective)));
            }
        }
        best
    }

    #[test]
    fn random_milps_match_enumeration() {
        let mut rng = StdRng::seed_from_u64(99);
        let mut feasible = 0;
        for _ in 0..80 {
            let m = random_milp(&mut rng);
            let oracle = enumerate_milp(&m);
            let got = solve_milp(&m, 100_000, 1e-6);
            match (oracle, got) {
                (Some(best), Ok(sol)) => {
                    feasible += 1;
                    assert!(
                        (sol.objective - best).abs() < 1e-8,
                        "objective {} vs oracle {best}",
                        sol.objective
                    );
                    assert!(m.infeasibility(&sol.x) < 1e-7);
                }
                (None, Err(Error::Infeasible)) => {}
                (o, g) => panic!("oracle {o:?} but solver {g:?}"),
            }
        }
        assert!(feasible > 40, "test generator produced too few feasible models");
    }

    #[test]
    fn solver_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let m = random_milp(&mut rng);
            let a = solve_milp(&m, 100_000, 1e-6);
            let b = solve_milp(&m, 100_000, 1e-6);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a.x, b.x);
                    assert_eq!(a.objective, b.objective);
                    assert_eq!(a.nodes, b.nodes);
                }
                (Err(Error::Infeasible), Err(Error::Infeasible)) => {}
                other => panic!("non-deterministic outcome {other:?}"),
            }
        }
    }

    #[test]
    fn weak_duality_on_random_lps() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..60 {
            let mut m = random_milp(&mut rng);
            m.binary.iter_mut().for_each(|b| *b = false);
            if let Ok(sol) = solve_lp(&m) {
                let duals = sol.duals.as_ref().unwrap();
                assert!(
                    duals.dual_objective(&m) <= sol.objective + 1e-9,
                    "weak duality violated"
                );
                // at an LP optimum the gap closes
                assert!((duals.dual_objective(&m) - sol.objective).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn row_generation_matches_direct_solve() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..25 {
            let mut m = random_milp(&mut rng);
            // tag inequality rows as scenario rows so they start inactive
            for (i, row) in m.rows.iter_mut().enumerate() {
                if row.sense == Sense::Le {
                    row.group = RowGroup::StateInput(i);
                }
            }
            let direct = solve_milp(&m, 100_000, 1e-6);
            let lazy = solve_with_row_generation(&m, &ReferenceSolver::default());
            match (direct, lazy) {
                (Ok(a), Ok(b)) => {
                    assert!((a.objective - b.objective).abs() < 1e-8);
                    assert!(m.infeasibility(&b.x) < 1e-7);
                }
                (Err(Error::Infeasible), Err(Error::Infeasible)) => {}
                other => panic!("row generation mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn support_constraints_found() {
        // min x with scenario k forcing x >= k/10: only the largest scenario
        // supports the optimum
        let mut m = MilpModel::new();
        let x = m.add_var(1.0, -10.0, 10.0);
        for k in 0..4 {
            m.add_row(Row::le(vec![(x, -1.0)], -(k as f64) / 10.0, RowGroup::Spec(k)));
        }
        let support =
            find_support_constraints(&m, &ReferenceSolver::default(), 1e-9).unwrap();
        assert_eq!(support, vec![3]);
    }

    #[test]
    fn binding_scenarios_selected() {
        let mut m = MilpModel::new();
        let x = m.add_var(1.0, -10.0, 10.0);
        for k in 0..4 {
            m.add_row(Row::le(vec![(x, -1.0)], -(k as f64) / 10.0, RowGroup::Spec(k)));
        }
        let sol = solve_milp(&m, 100, 1e-6).unwrap();
        let binding = most_binding_scenarios(&m, &sol.x, 1e-9, 2);
        assert_eq!(binding, vec![2, 3]);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(71);
        for _ in 0..20 {
            let mut m = random_milp(&mut rng);
            for (i, row) in m.rows.iter_mut().enumerate() {
                row.group = match i % 3 {
                    0 => RowGroup::Structural,
                    1 => RowGroup::Spec(i),
                    _ => RowGroup::StateInput(i),
                };
            }
            let text = export_text(&m);
            let back = import_text(&text).unwrap();
            assert_eq!(m.objective, back.objective);
            assert_eq!(m.lower, back.lower);
            assert_eq!(m.upper, back.upper);
            assert_eq!(m.binary, back.binary);
            assert_eq!(m.rows.len(), back.rows.len());
            for (a, b) in m.rows.iter().zip(&back.rows) {
                assert_eq!(a.coeffs, b.coeffs);
                assert_eq!(a.sense, b.sense);
                assert!(a.rhs == b.rhs, "rhs failed to round-trip");
                assert_eq!(a.group, b.group);
            }
            assert_eq!(text, export_text(&back));
        }
    }

    #[test]
    fn import_rejects_malformed_input() {
        assert!(import_text("nonsense").is_err());
        assert!(import_text("milp 1\nvars 1\nvar 0 0 1 z\nrows 0\n").is_err());
        assert!(import_text("milp 1\nvars 0\nrows 1\nrow le 1 st 1 5 1.0\n").is_err());
    }

    #[test]
    fn unbounded_variables_rejected() {
        let mut m = MilpModel::new();
        m.add_var(1.0, f64::NEG_INFINITY, 0.0);
        assert!(matches!(solve_lp(&m), Err(Error::UnboundedDomain(_))));
    }
}
