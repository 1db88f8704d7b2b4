//! Compiles a PNF formula, system, and policy structure into linear
//! constraint blocks over decision variables: big-M indicator rows per atom
//! and time step, Boolean/temporal auxiliary rows, and polyhedral
//! state-input rows, either condensed through the stacked dynamics or over
//! explicit per-sample state variables.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::StackedDynamics;
use crate::error::Error;
use crate::logic::{AtomicProposition, Formula};
use crate::milp::{solve_lp, MilpModel, Row, RowGroup};
use crate::Result;

/// Relaxation of the strict side of the indicator equivalence.
pub const STRICT_TOL: f64 = 1e-6;

/// A bounded polytope `{x : lower <= x <= upper, rows.0 . x <= rows.1}`.
#[derive(Clone, Debug)]
pub struct Polytope {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<(Vec<f64>, f64)>,
}

impl Polytope {
    pub fn box_set(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Polytope { lower, upper, rows: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
            && self
                .rows
                .iter()
                .all(|(a, b)| a.iter().zip(x.iter()).map(|(a, x)| a * x).sum::<f64>() <= b + tol)
    }

    fn check_bounded(&self) -> Result<()> {
        if self.lower.iter().chain(self.upper.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::UnboundedDomain(
                "big-M computation needs a bounded state set".into(),
            ))
        }
    }
}

/// Maximum of `c . x` over a bounded polytope, by LP.
pub fn max_linear(set: &Polytope, c: &[f64]) -> Result<f64> {
    set.check_bounded()?;
    let mut m = MilpModel::new();
    for i in 0..set.dim() {
        m.add_var(-c.get(i).copied().unwrap_or(0.0), set.lower[i], set.upper[i]);
    }
    for (a, b) in &set.rows {
        m.add_row(Row::le(
            a.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect(),
            *b,
            RowGroup::Structural,
        ));
    }
    Ok(-solve_lp(&m)?.objective)
}

/// Domain over which big-M constants must dominate.
#[derive(Clone, Debug)]
pub enum BigMDomain {
    /// A finite set of stage-disturbance values.
    Samples(Vec<DVector<f64>>),
    /// A box over the stage disturbance (exact for affine propositions).
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl BigMDomain {
    fn is_empty(&self) -> bool {
        match self {
            BigMDomain::Samples(s) => s.is_empty(),
            BigMDomain::Box { lower, .. } => lower.is_empty(),
        }
    }
}

/// Per proposition and row: `(M_plus, M_minus)` with
/// `M_minus <= P_j(w) x - rho_j(w) <= M_plus` over `X x domain`.
#[derive(Clone, Debug, Default)]
pub struct BigMTable {
    pub entries: BTreeMap<String, Vec<(f64, f64)>>,
}

impl BigMTable {
    pub fn get(&self, atom: &str, row: usize) -> Result<(f64, f64)> {
        let (p, m) = self
            .entries
            .get(atom)
            .and_then(|rows| rows.get(row))
            .copied()
            .ok_or_else(|| Error::InfiniteBigM { atom: atom.to_string(), row })?;
        if p.is_finite() && m.is_finite() {
            Ok((p, m))
        } else {
            Err(Error::InfiniteBigM { atom: atom.to_string(), row })
        }
    }

    /// Checks domination on a concrete sample set (diagnostic).
    pub fn dominates(
        &self,
        props: &BTreeMap<String, AtomicProposition>,
        x_set: &Polytope,
        samples: &[DVector<f64>],
    ) -> Result<bool> {
        for (id, prop) in props {
            let Some(rows) = self.entries.get(id) else { return Ok(false) };
            for w in samples {
                let (p, rho) = prop.evaluate(w);
                for j in 0..prop.r {
                    let c: Vec<f64> = p.row(j).iter().copied().collect();
                    let hi = max_linear(x_set, &c)? - rho[j];
                    let lo = -max_linear(x_set, &c.iter().map(|v| -v).collect::<Vec<_>>())?
                        - rho[j];
                    if hi > rows[j].0 + 1e-9 || lo < rows[j].1 - 1e-9 {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }
}

/// Computes big-M constants for every proposition row. Affine-in-w rows are
/// bounded exactly (LP over `X`, closed form or enumeration over the
/// disturbance domain); callback rows are bounded by enumeration over the
/// sample set and inflated by a safety factor of 1.5 about the interval
/// midpoint.
pub fn compute_bigm(
    props: &BTreeMap<String, AtomicProposition>,
    x_set: &Polytope,
    domain: &BigMDomain,
) -> Result<BigMTable> {
    x_set.check_bounded()?;
    if domain.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut table = BigMTable::default();
    for (id, prop) in props {
        let mut rows = Vec::with_capacity(prop.r);
        match (&prop.shape, domain) {
            (crate::logic::PropShape::AffineInW { p, rho0, rho_w }, _) => {
                for j in 0..prop.r {
                    let c: Vec<f64> = p.row(j).iter().copied().collect();
                    let max_px = max_linear(x_set, &c)?;
                    let min_px =
                        -max_linear(x_set, &c.iter().map(|v| -v).collect::<Vec<_>>())?;
                    let (rho_min, rho_max) = match domain {
                        BigMDomain::Samples(ws) => {
                            let vals = ws.iter().map(|w| {
                                rho0[j]
                                    + rho_w.row(j).iter().zip(w.iter()).map(|(a, w)| a * w).sum::<f64>()
                            });
                            let mut lo = f64::INFINITY;
                            let mut hi = f64::NEG_INFINITY;
                            for v in vals {
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                            (lo, hi)
                        }
                        BigMDomain::Box { lower, upper } => {
                            let mut lo = rho0[j];
                            let mut hi = rho0[j];
                            for (t, a) in rho_w.row(j).iter().enumerate() {
                                lo += a * if *a >= 0.0 { lower[t] } else { upper[t] };
                                hi += a * if *a >= 0.0 { upper[t] } else { lower[t] };
                            }
                            (lo, hi)
                        }
                    };
                    rows.push((max_px - rho_min, min_px - rho_max));
                }
            }
            (_, BigMDomain::Samples(ws)) => {
                let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); prop.r];
                for w in ws {
                    let (p, rho) = prop.evaluate(w);
                    for j in 0..prop.r {
                        let c: Vec<f64> = p.row(j).iter().copied().collect();
                        let hi = max_linear(x_set, &c)? - rho[j];
                        let lo = -max_linear(x_set, &c.iter().map(|v| -v).collect::<Vec<_>>())?
                            - rho[j];
                        bounds[j].0 = bounds[j].0.max(hi);
                        bounds[j].1 = bounds[j].1.min(lo);
                    }
                }
                // sampled (non-affine) rows: widen by a safety factor
                for (hi, lo) in bounds {
                    let mid = 0.5 * (hi + lo);
                    let half = 0.75 * (hi - lo); // 1.5 x the half-width
                    rows.push((mid + half, mid - half));
                }
            }
            (_, BigMDomain::Box { .. }) => {
                return Err(Error::Parameter(format!(
                    "proposition `{id}` needs a sample-set big-M domain"
                )));
            }
        }
        table.entries.insert(id.clone(), rows);
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Specification template (Big-M encoding)
// ---------------------------------------------------------------------------

/// A recourse variable within one recourse block: continuous auxiliary
/// (`Z`, in `[0,1]`) or binary atom-row indicator (`Delta`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecourseVar {
    Z(usize),
    Delta(usize),
}

/// A literal over a recourse variable: the variable itself or `1 - var`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Term {
    pub var: RecourseVar,
    pub negated: bool,
}

/// Symbolic `<=` row over recourse variables (sample-independent).
#[derive(Clone, Debug)]
pub struct SymRow {
    pub coeffs: Vec<(RecourseVar, f64)>,
    pub rhs: f64,
}

/// One indicator-coupled atom row, instantiated as two big-M inequalities
/// per sample.
#[derive(Clone, Debug)]
pub struct AtomRow {
    pub atom: String,
    pub time: usize,
    pub row: usize,
    pub delta: usize,
    pub m_plus: f64,
    pub m_minus: f64,
    /// The atom occurs positively somewhere in the formula, so the
    /// `delta = 1  =>  row holds` direction must be enforced.
    pub pos: bool,
    /// The atom occurs negated somewhere, so the
    /// `delta = 0  =>  row strictly violated` direction must be enforced.
    pub neg: bool,
}

/// Result of encoding a formula: the recourse dimensions and the symbolic
/// rows to instantiate per sample (atom rows) and per recourse block
/// (Boolean rows).
#[derive(Clone, Debug)]
pub struct SpecTemplate {
    pub n_z: usize,
    pub n_delta: usize,
    pub atom_rows: Vec<AtomRow>,
    pub bool_rows: Vec<SymRow>,
    pub horizon: usize,
    pub tol: f64,
    /// `None` when the root folded to a constant `true`.
    pub trivially_true: bool,
}

#[derive(Clone, Copy, Debug)]
enum Val {
    Const(bool),
    T(Term),
}

struct Builder<'a> {
    props: &'a BTreeMap<String, AtomicProposition>,
    bigm: &'a BigMTable,
    n: usize,
    n_z: usize,
    n_delta: usize,
    atom_rows: Vec<AtomRow>,
    bool_rows: Vec<SymRow>,
    // delta indices per (atom id, time)
    deltas: BTreeMap<(String, usize), Vec<usize>>,
    memo: BTreeMap<(usize, usize), Val>,
}

impl<'a> Builder<'a> {
    fn new_z(&mut self) -> Term {
        self.n_z += 1;
        Term { var: RecourseVar::Z(self.n_z - 1), negated: false }
    }

    /// Adds `coeff * term` to a row under construction, folding the
    /// constant part of negated literals into the right-hand side.
    fn push_term(row: &mut SymRow, term: Term, coeff: f64) {
        if term.negated {
            row.coeffs.push((term.var, -coeff));
            row.rhs -= coeff;
        } else {
            row.coeffs.push((term.var, coeff));
        }
    }

    fn atom_deltas(&mut self, id: &str, k: usize, negated: bool) -> Result<Vec<usize>> {
        if let Some(d) = self.deltas.get(&(id.to_string(), k)) {
            let d = d.clone();
            for ar in self.atom_rows.iter_mut().filter(|ar| ar.atom == id && ar.time == k) {
                ar.pos |= !negated;
                ar.neg |= negated;
            }
            return Ok(d);
        }
        let prop = self
            .props
            .get(id)
            .ok_or_else(|| Error::UnknownAtom(id.to_string()))?;
        let mut out = Vec::with_capacity(prop.r);
        for j in 0..prop.r {
            let (m_plus, m_minus) = self.bigm.get(id, j)?;
            let delta = self.n_delta;
            self.n_delta += 1;
            self.atom_rows.push(AtomRow {
                atom: id.to_string(),
                time: k,
                row: j,
                delta,
                m_plus,
                m_minus,
                pos: !negated,
                neg: negated,
            });
            out.push(delta);
        }
        self.deltas.insert((id.to_string(), k), out.clone());
        Ok(out)
    }

    /// `z = AND(terms)`: `z <= t_i` and `z >= sum t_i - (r-1)`.
    fn conj(&mut self, terms: &[Term]) -> Val {
        debug_assert!(terms.len() >= 2);
        let z = self.new_z();
        for &t in terms {
            let mut row = SymRow { coeffs: vec![(z.var, 1.0)], rhs: 0.0 };
            Self::push_term(&mut row, t, -1.0);
            self.bool_rows.push(row);
        }
        let mut row = SymRow { coeffs: vec![(z.var, -1.0)], rhs: terms.len() as f64 - 1.0 };
        for &t in terms {
            Self::push_term(&mut row, t, 1.0);
        }
        self.bool_rows.push(row);
        Val::T(z)
    }

    /// `z = OR(terms)`: `t_i <= z` and `z <= sum t_i`.
    fn disj(&mut self, terms: &[Term]) -> Val {
        debug_assert!(terms.len() >= 2);
        let z = self.new_z();
        for &t in terms {
            let mut row = SymRow { coeffs: vec![(z.var, -1.0)], rhs: 0.0 };
            Self::push_term(&mut row, t, 1.0);
            self.bool_rows.push(row);
        }
        let mut row = SymRow { coeffs: vec![(z.var, 1.0)], rhs: 0.0 };
        for &t in terms {
            Self::push_term(&mut row, t, -1.0);
        }
        self.bool_rows.push(row);
        Val::T(z)
    }

    fn nary(&mut self, vals: Vec<Val>, and: bool) -> Val {
        let mut terms = Vec::new();
        for v in vals {
            match v {
                Val::Const(b) => {
                    if b != and {
                        // dominating constant: false in AND, true in OR
                        return Val::Const(!and);
                    }
                }
                Val::T(t) => terms.push(t),
            }
        }
        match terms.len() {
            0 => Val::Const(and),
            1 => Val::T(terms[0]),
            _ => {
                if and {
                    self.conj(&terms)
                } else {
                    self.disj(&terms)
                }
            }
        }
    }

    fn encode(&mut self, f: &Formula, k: usize) -> Result<Val> {
        let key = (f as *const Formula as usize, k);
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let val = match f {
            Formula::True => Val::Const(true),
            Formula::False => Val::Const(false),
            Formula::Neg(_) => return Err(Error::NotPnf),
            Formula::Atom(id) => {
                let deltas = self.atom_deltas(id, k, false)?;
                let terms: Vec<Term> = deltas
                    .iter()
                    .map(|&d| Term { var: RecourseVar::Delta(d), negated: false })
                    .collect();
                if terms.len() == 1 {
                    Val::T(terms[0])
                } else {
                    self.conj(&terms)
                }
            }
            Formula::NegAtom(id) => {
                let deltas = self.atom_deltas(id, k, true)?;
                let terms: Vec<Term> = deltas
                    .iter()
                    .map(|&d| Term { var: RecourseVar::Delta(d), negated: true })
                    .collect();
                if terms.len() == 1 {
                    Val::T(terms[0])
                } else {
                    self.disj(&terms)
                }
            }
            Formula::And(fs) => {
                let vals = fs.iter().map(|g| self.encode(g, k)).collect::<Result<Vec<_>>>()?;
                self.nary(vals, true)
            }
            Formula::Or(fs) => {
                let vals = fs.iter().map(|g| self.encode(g, k)).collect::<Result<Vec<_>>>()?;
                self.nary(vals, false)
            }
            Formula::Next(g) => {
                if k == self.n {
                    Val::Const(false)
                } else {
                    self.encode(g, k + 1)?
                }
            }
            Formula::Until(a, b) => {
                // z_k = z_b,k OR (z_a,k AND z_{k+1});  z_N = z_b,N
                let vb = self.encode(b, k)?;
                if k == self.n {
                    vb
                } else {
                    let va = self.encode(a, k)?;
                    let tail = self.encode(f, k + 1)?;
                    let inner = self.nary(vec![va, tail], true);
                    self.nary(vec![vb, inner], false)
                }
            }
            Formula::Release(a, b) => {
                // z_k = z_b,k AND (z_a,k OR z_{k+1});  z_N = z_b,N
                let vb = self.encode(b, k)?;
                if k == self.n {
                    vb
                } else {
                    let va = self.encode(a, k)?;
                    let tail = self.encode(f, k + 1)?;
                    let inner = self.nary(vec![va, tail], false);
                    self.nary(vec![vb, inner], true)
                }
            }
        };
        self.memo.insert(key, val);
        Ok(val)
    }
}

/// Encodes a PNF formula over horizon `N` into a [`SpecTemplate`]. Atom
/// indicators are created only for (atom, time) pairs actually reached by
/// the unrolling; auxiliary `z` variables are continuous in `[0,1]`.
pub fn encode_formula(
    f: &Formula,
    props: &BTreeMap<String, AtomicProposition>,
    bigm: &BigMTable,
    n: usize,
    tol: f64,
) -> Result<SpecTemplate> {
    if !f.is_pnf() {
        return Err(Error::NotPnf);
    }
    let mut b = Builder {
        props,
        bigm,
        n,
        n_z: 0,
        n_delta: 0,
        atom_rows: Vec::new(),
        bool_rows: Vec::new(),
        deltas: BTreeMap::new(),
        memo: BTreeMap::new(),
    };
    let root = b.encode(f, 0)?;
    let mut trivially_true = false;
    match root {
        Val::Const(true) => trivially_true = true,
        Val::Const(false) => {
            // unsatisfiable at the Boolean level: an always-violated row
            b.bool_rows.push(SymRow { coeffs: Vec::new(), rhs: -1.0 });
        }
        Val::T(t) => {
            // pin the root literal to 1
            let mut row = SymRow { coeffs: Vec::new(), rhs: -1.0 };
            Builder::push_term(&mut row, t, -1.0);
            b.bool_rows.push(row);
        }
    }
    Ok(SpecTemplate {
        n_z: b.n_z,
        n_delta: b.n_delta,
        atom_rows: b.atom_rows,
        bool_rows: b.bool_rows,
        horizon: n,
        tol,
        trivially_true,
    })
}

// ---------------------------------------------------------------------------
// Instantiation over decision variables
// ---------------------------------------------------------------------------

/// Expresses stage states and inputs as affine functions of the model's
/// decision variables for one disturbance sample.
pub trait StateAccess {
    /// `p . x_k` as `(sparse coefficients, constant part)`.
    fn state_row(&self, k: usize, p: &[f64]) -> (Vec<(usize, f64)>, f64);
    /// `q . u_k` as `(sparse coefficients, constant part)`.
    fn input_row(&self, k: usize, q: &[f64]) -> (Vec<(usize, f64)>, f64);
}

/// Column offsets of one recourse block inside a [`MilpModel`].
#[derive(Clone, Copy, Debug)]
pub struct RecourseCols {
    pub z0: usize,
    pub delta0: usize,
}

impl RecourseCols {
    pub fn col(&self, v: RecourseVar) -> usize {
        match v {
            RecourseVar::Z(i) => self.z0 + i,
            RecourseVar::Delta(i) => self.delta0 + i,
        }
    }
}

/// Instantiates the per-sample big-M atom rows for one disturbance
/// realization `ws` (stage disturbances `w_0..w_N`).
pub fn atom_spec_rows(
    template: &SpecTemplate,
    props: &BTreeMap<String, AtomicProposition>,
    ws: &[DVector<f64>],
    access: &dyn StateAccess,
    cols: RecourseCols,
    group: RowGroup,
) -> Result<Vec<Row>> {
    let mut out = Vec::with_capacity(2 * template.atom_rows.len());
    for ar in &template.atom_rows {
        let prop = props
            .get(&ar.atom)
            .ok_or_else(|| Error::UnknownAtom(ar.atom.clone()))?;
        let (p, rho) = prop.evaluate(&ws[ar.time]);
        let pj: Vec<f64> = p.row(ar.row).iter().copied().collect();
        let (coeffs, c0) = access.state_row(ar.time, &pj);
        let dcol = cols.col(RecourseVar::Delta(ar.delta));
        // Each implication direction is only needed for the polarity the
        // formula actually uses; enforcing the unused direction would tie
        // every sample's geometry to a shared delta it never reads.
        if ar.pos {
            // delta = 1  =>  P x <= rho, relaxed by M+ otherwise
            let mut upper = coeffs.clone();
            upper.push((dcol, ar.m_plus));
            out.push(Row::le(upper, rho[ar.row] + ar.m_plus - c0, group));
        }
        if ar.neg {
            // delta = 0  =>  P x >= rho + 2 tol, relaxed by M- - 2 tol at
            // delta = 1; the doubled margin keeps solutions on the strict
            // side of an evaluator that accepts rows up to `rho + tol`
            let mut lower: Vec<(usize, f64)> = coeffs.iter().map(|&(j, v)| (j, -v)).collect();
            lower.push((dcol, ar.m_minus - 2.0 * template.tol));
            out.push(Row::le(lower, -rho[ar.row] - 2.0 * template.tol + c0, group));
        }
    }
    Ok(out)
}

/// Instantiates the sample-independent Boolean/temporal rows for one
/// recourse block.
pub fn bool_spec_rows(template: &SpecTemplate, cols: RecourseCols, group: RowGroup) -> Vec<Row> {
    template
        .bool_rows
        .iter()
        .map(|r| {
            Row::le(
                r.coeffs.iter().map(|&(v, c)| (cols.col(v), c)).collect(),
                r.rhs,
                group,
            )
        })
        .collect()
}

/// Adds the recourse variables of one block to a model and returns their
/// column offsets. `z` variables are continuous in `[0,1]`; `delta`
/// variables are binary.
pub fn add_recourse_block(model: &mut MilpModel, template: &SpecTemplate) -> RecourseCols {
    let z0 = model.n_vars();
    for _ in 0..template.n_z {
        model.add_var(0.0, 0.0, 1.0);
    }
    let delta0 = model.n_vars();
    for _ in 0..template.n_delta {
        model.add_binary(0.0);
    }
    RecourseCols { z0, delta0 }
}

/// Per-stage polyhedral state and input rows (`x_k in X` for all stages,
/// `u_k in U` for input stages).
pub fn state_input_rows(
    x_set: Option<&Polytope>,
    u_set: Option<&Polytope>,
    horizon: usize,
    access: &dyn StateAccess,
    group: RowGroup,
) -> Vec<Row> {
    let mut out = Vec::new();
    if let Some(xs) = x_set {
        for k in 0..=horizon {
            for (a, b) in polytope_rows(xs) {
                let (coeffs, c0) = access.state_row(k, &a);
                out.push(Row::le(coeffs, b - c0, group));
            }
        }
    }
    if let Some(us) = u_set {
        for k in 0..horizon {
            for (a, b) in polytope_rows(us) {
                let (coeffs, c0) = access.input_row(k, &a);
                out.push(Row::le(coeffs, b - c0, group));
            }
        }
    }
    out
}

/// All rows of a polytope, with finite box bounds expanded to rows.
pub(crate) fn polytope_rows(set: &Polytope) -> Vec<(Vec<f64>, f64)> {
    let mut out = set.rows.clone();
    let d = set.dim();
    for i in 0..d {
        if set.upper[i].is_finite() {
            let mut a = vec![0.0; d];
            a[i] = 1.0;
            out.push((a, set.upper[i]));
        }
        if set.lower[i].is_finite() {
            let mut a = vec![0.0; d];
            a[i] = -1.0;
            out.push((a, -set.lower[i]));
        }
    }
    out
}

/// Condensed access: states are substituted through the stacked dynamics
/// `x = abold x0 + bbold H kappa + cbold`, so rows are linear in the free
/// entries of `H` (no per-sample state variables).
pub struct CondensedAccess {
    /// `p . x_k` constant part is precomputed from `abold x0 + cbold`.
    x_const: DVector<f64>,
    bbold: DMatrix<f64>,
    kappa: DVector<f64>,
    /// mask-ordered (row, col) positions of the free entries of `H`
    h_entries: Vec<(usize, usize)>,
    h_offset: usize,
    n_x: usize,
    n_u: usize,
}

impl CondensedAccess {
    pub fn new(
        stacked: &StackedDynamics,
        x0: &DVector<f64>,
        kappa: DVector<f64>,
        h_entries: Vec<(usize, usize)>,
        h_offset: usize,
    ) -> Self {
        CondensedAccess {
            x_const: &stacked.abold * x0 + &stacked.cbold,
            bbold: stacked.bbold.clone(),
            kappa,
            h_entries,
            h_offset,
            n_x: stacked.n_x,
            n_u: stacked.n_u,
        }
    }
}

impl StateAccess for CondensedAccess {
    fn state_row(&self, k: usize, p: &[f64]) -> (Vec<(usize, f64)>, f64) {
        // p . x_k = p . const_k + (p . bbold_k) H kappa
        let mut c0 = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            c0 += pi * self.x_const[k * self.n_x + i];
        }
        // m = p . bbold_k, over stacked input rows
        let n_ubold = self.bbold.ncols();
        let mut m = vec![0.0; n_ubold];
        for (i, &pi) in p.iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            let row = self.bbold.row(k * self.n_x + i);
            for (t, v) in row.iter().enumerate() {
                m[t] += pi * v;
            }
        }
        let mut coeffs = Vec::new();
        for (idx, &(r, c)) in self.h_entries.iter().enumerate() {
            let v = m[r] * self.kappa[c];
            if v != 0.0 {
                coeffs.push((self.h_offset + idx, v));
            }
        }
        (coeffs, c0)
    }

    fn input_row(&self, k: usize, q: &[f64]) -> (Vec<(usize, f64)>, f64) {
        // q . u_k = q . (H kappa)_k
        let mut coeffs = Vec::new();
        for (idx, &(r, c)) in self.h_entries.iter().enumerate() {
            if r / self.n_u != k {
                continue;
            }
            let v = q[r % self.n_u] * self.kappa[c];
            if v != 0.0 {
                coeffs.push((self.h_offset + idx, v));
            }
        }
        (coeffs, 0.0)
    }
}

/// Explicit access: states and inputs are model variables
/// (`x_0..x_N`, `u_0..u_{N-1}` contiguous from the given offsets). The
/// dynamics and policy couplings are added as equality rows separately.
pub struct ExplicitAccess {
    pub x_offset: usize,
    pub u_offset: usize,
    pub n_x: usize,
    pub n_u: usize,
}

impl StateAccess for ExplicitAccess {
    fn state_row(&self, k: usize, p: &[f64]) -> (Vec<(usize, f64)>, f64) {
        (
            p.iter()
                .enumerate()
                .filter(|&(_, v)| *v != 0.0)
                .map(|(i, &v)| (self.x_offset + k * self.n_x + i, v))
                .collect(),
            0.0,
        )
    }

    fn input_row(&self, k: usize, q: &[f64]) -> (Vec<(usize, f64)>, f64) {
        (
            q.iter()
                .enumerate()
                .filter(|&(_, v)| *v != 0.0)
                .map(|(i, &v)| (self.u_offset + k * self.n_u + i, v))
                .collect(),
            0.0,
        )
    }
}

/// Fixed access for oracle tests: a concrete trajectory with no decision
/// coupling; every row reduces to a constant.
pub struct FixedAccess {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl StateAccess for FixedAccess {
    fn state_row(&self, k: usize, p: &[f64]) -> (Vec<(usize, f64)>, f64) {
        (Vec::new(), p.iter().zip(self.x[k].iter()).map(|(a, b)| a * b).sum())
    }

    fn input_row(&self, k: usize, q: &[f64]) -> (Vec<(usize, f64)>, f64) {
        (Vec::new(), q.iter().zip(self.u[k].iter()).map(|(a, b)| a * b).sum())
    }
}

/// Bookkeeping of the decision-vector layout for an assembled program.
#[derive(Clone, Debug)]
pub struct DecisionLayout {
    /// Column offset and mask-ordered free entries of `H`.
    pub h_offset: usize,
    pub h_entries: Vec<(usize, usize)>,
    /// One recourse block per recourse-partition piece.
    pub blocks: Vec<RecourseCols>,
    pub n_z: usize,
    pub n_delta: usize,
    /// Epigraph variable column, when the objective needed one.
    pub epigraph: Option<usize>,
    pub n_vars: usize,
}

impl DecisionLayout {
    pub fn free_parameters(&self) -> usize {
        self.h_entries.len()
    }

    pub fn binaries(&self) -> usize {
        self.blocks.len() * self.n_delta
    }
}
