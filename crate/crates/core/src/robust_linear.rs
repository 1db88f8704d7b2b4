//! The fast robust-linear path: box (plus one declared splitting halfspace)
//! support estimation from samples, exact dualization of affine robust
//! rows over polyhedral pieces, assembly of the robust program when the
//! dynamics permit it, and the matching sample bound for the support
//! estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{MatrixFamily, UncertainSystem};
use crate::encoder::{
    add_recourse_block, bool_spec_rows, compute_bigm, polytope_rows, BigMDomain, BigMTable,
    CondensedAccess, DecisionLayout, RecourseCols, RecourseVar, SpecTemplate, StateAccess,
};
use crate::error::Error;
use crate::logic::{to_pnf, PropShape};
use crate::milp::{MilpModel, Row, RowGroup};
use crate::policy::{Halfspace, Piece};
use crate::scenario::{
    closed_form_k, binary_search_k, BoundMethod, Multisample, ObjectiveSpec, ScenarioAssembly,
    ScenarioProblem, StageCost,
};
use crate::Result;

/// Upper bound given to dual multipliers (they are nonnegative and, at any
/// optimum of interest, far below this).
const LAMBDA_BOUND: f64 = 1e6;
const REGION_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Support estimation
// ---------------------------------------------------------------------------

/// One piece of a support estimate: an axis-aligned box, optionally clipped
/// by the declared splitting halfspace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupportPiece {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub halfspace: Option<Halfspace>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A polyhedral estimate of the disturbance support as a union of pieces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupportEstimate {
    pub pieces: Vec<SupportPiece>,
    /// Total inequality count across pieces (drives the sample bound).
    pub m: usize,
}

/// Shape of the support estimate: a single box, or two boxes separated by
/// a halfspace fixed a priori (piece 0 is `a . w <= b`, piece 1 its
/// complement).
#[derive(Clone, Debug)]
pub enum SupportTemplate {
    SingleBox,
    SplitByHalfspace(Halfspace),
}

/// Tight per-piece coordinatewise min/max boxes over the samples assigned
/// to each piece. No inflation is applied; the sample bound of
/// [`k_w_bound`] accounts for mass outside the estimate.
pub fn estimate_support(
    samples: &Multisample,
    template: &SupportTemplate,
) -> Result<SupportEstimate> {
    let dim = samples.data.ncols();
    let halfspaces: Vec<Option<Halfspace>> = match template {
        SupportTemplate::SingleBox => vec![None],
        SupportTemplate::SplitByHalfspace(h) => {
            let flipped = Halfspace {
                a: h.a.iter().map(|v| -v).collect(),
                b: -h.b,
            };
            vec![Some(h.clone()), Some(flipped)]
        }
    };
    let n_pieces = halfspaces.len();
    let mut lower = vec![vec![f64::INFINITY; dim]; n_pieces];
    let mut upper = vec![vec![f64::NEG_INFINITY; dim]; n_pieces];
    let mut counts = vec![0usize; n_pieces];
    for k in 0..samples.rows() {
        let w = samples.stacked(k);
        let piece = match template {
            SupportTemplate::SingleBox => 0,
            SupportTemplate::SplitByHalfspace(h) => {
                let dot: f64 = h.a.iter().zip(w.iter()).map(|(a, w)| a * w).sum();
                usize::from(dot > h.b)
            }
        };
        counts[piece] += 1;
        for t in 0..dim {
            lower[piece][t] = lower[piece][t].min(w[t]);
            upper[piece][t] = upper[piece][t].max(w[t]);
        }
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyPiece(i));
    }
    let pieces: Vec<SupportPiece> = (0..n_pieces)
        .map(|i| SupportPiece {
            halfspace: halfspaces[i].clone(),
            lower: lower[i].clone(),
            upper: upper[i].clone(),
        })
        .collect();
    let m = pieces
        .iter()
        .map(|p| 2 * dim + usize::from(p.halfspace.is_some()))
        .sum();
    Ok(SupportEstimate { pieces, m })
}

// ---------------------------------------------------------------------------
// Dualization
// ---------------------------------------------------------------------------

/// A bounded polyhedron `{w : l <= w <= u, a_i . w <= b_i}` used as the
/// uncertainty region of one robust row.
#[derive(Clone, Debug)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub halfspaces: Vec<Halfspace>,
}

impl Region {
    /// Nonemptiness check: box consistency plus, for each halfspace, the
    /// box minimum of `a . w` not exceeding `b`.
    pub fn is_nonempty(&self) -> bool {
        for t in 0..self.lower.len() {
            if self.lower[t] > self.upper[t] + REGION_TOL {
                return false;
            }
        }
        self.halfspaces.iter().all(|h| {
            let min: f64 = h
                .a
                .iter()
                .enumerate()
                .map(|(t, &a)| (a * self.lower[t]).min(a * self.upper[t]))
                .sum();
            min <= h.b + REGION_TOL
        })
    }

    /// A uniformly random point of the bounding box, rejected against the
    /// halfspaces (testing helper; panics after too many rejections).
    #[cfg(test)]
    fn sample_point(&self, rng: &mut impl rand::Rng) -> DVector<f64> {
        for _ in 0..10_000 {
            let w = DVector::from_fn(self.lower.len(), |t, _| {
                if self.upper[t] > self.lower[t] {
                    rng.gen_range(self.lower[t]..=self.upper[t])
                } else {
                    self.lower[t]
                }
            });
            let inside = self.halfspaces.iter().all(|h| {
                h.a.iter().zip(w.iter()).map(|(a, w)| a * w).sum::<f64>() <= h.b
            });
            if inside {
                return w;
            }
        }
        panic!("region sampling failed");
    }
}

impl SupportPiece {
    pub fn region(&self) -> Region {
        Region {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            halfspaces: self.halfspace.iter().cloned().collect(),
        }
    }
}

/// Intersection of a partition piece with a support piece, as a region.
pub fn intersect_region(piece: &Piece, support: &SupportPiece) -> Region {
    let dim = support.lower.len();
    let lower: Vec<f64> = (0..dim).map(|t| piece.lower_at(t).max(support.lower[t])).collect();
    let upper: Vec<f64> = (0..dim).map(|t| piece.upper_at(t).min(support.upper[t])).collect();
    let mut halfspaces = piece.halfspaces.clone();
    halfspaces.extend(support.halfspace.iter().cloned());
    Region { lower, upper, halfspaces }
}

/// One decision variable's affine-in-`w` coefficient inside a robust row.
#[derive(Clone, Debug)]
pub struct RobustTerm {
    pub var: usize,
    pub coeff0: f64,
    /// Coefficient of each `w` coordinate; empty means none.
    pub coeff_w: Vec<f64>,
}

/// A robust inequality `max_w [ c0 + cw . w + sum_j theta_j (p_j + q_j . w) ] <= 0`
/// over a region of `w` values.
#[derive(Clone, Debug)]
pub struct RobustRow {
    pub terms: Vec<RobustTerm>,
    pub const0: f64,
    pub const_w: Vec<f64>,
    pub group: RowGroup,
}

impl RobustRow {
    fn coeff_at(&self, term: &RobustTerm, t: usize) -> f64 {
        term.coeff_w.get(t).copied().unwrap_or(0.0)
    }

    /// Value of the row at a concrete `(theta, w)` (testing/replay helper).
    pub fn value(&self, x: &[f64], w: &DVector<f64>) -> f64 {
        let mut v = self.const0;
        for (t, &c) in self.const_w.iter().enumerate() {
            v += c * w[t];
        }
        for term in &self.terms {
            let mut coeff = term.coeff0;
            for (t, &q) in term.coeff_w.iter().enumerate() {
                coeff += q * w[t];
            }
            v += coeff * x[term.var];
        }
        v
    }
}

/// Replaces `max_{w in region} row(theta, w) <= 0` by the exact dual
/// certificate: multipliers `lambda >= 0` with `G^T lambda = a(theta)` and
/// `g . lambda + b(theta) <= 0`, appended to the model. Coordinates of `w`
/// that appear nowhere in the row are eliminated along with their
/// multipliers.
pub fn dualize_row(model: &mut MilpModel, row: &RobustRow, region: &Region) -> Result<()> {
    let dim = region.lower.len();
    if row.const_w.len() > dim {
        return Err(Error::Dimension(format!(
            "robust row has {} w-coefficients over a region of dimension {dim}",
            row.const_w.len()
        )));
    }
    // coordinates the row actually touches
    let mut active = vec![false; dim];
    for (t, &c) in row.const_w.iter().enumerate() {
        active[t] |= c != 0.0;
    }
    for term in &row.terms {
        for (t, &q) in term.coeff_w.iter().enumerate() {
            active[t] |= q != 0.0;
        }
    }
    // halfspaces couple coordinates: include a halfspace when it touches an
    // active coordinate, then activate all its coordinates, to fixpoint
    let mut use_half = vec![false; region.halfspaces.len()];
    loop {
        let mut changed = false;
        for (i, h) in region.halfspaces.iter().enumerate() {
            if use_half[i] {
                continue;
            }
            if h.a.iter().enumerate().any(|(t, &a)| a != 0.0 && active[t]) {
                use_half[i] = true;
                for (t, &a) in h.a.iter().enumerate() {
                    if a != 0.0 && !active[t] {
                        active[t] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let coords: Vec<usize> = (0..dim).filter(|&t| active[t]).collect();
    if coords.is_empty() {
        // constant in w: a plain inequality
        let coeffs: Vec<(usize, f64)> = row
            .terms
            .iter()
            .filter(|t| t.coeff0 != 0.0)
            .map(|t| (t.var, t.coeff0))
            .collect();
        model.add_row(Row::le(coeffs, -row.const0, row.group));
        return Ok(());
    }
    for &t in &coords {
        if !region.lower[t].is_finite() || !region.upper[t].is_finite() {
            return Err(Error::UnboundedDomain(format!(
                "robust row touches w coordinate {t} with non-finite region bounds"
            )));
        }
    }
    // multipliers: (upper, lower) per active coordinate, one per used
    // halfspace
    let mut lam_up = Vec::with_capacity(coords.len());
    let mut lam_lo = Vec::with_capacity(coords.len());
    for _ in &coords {
        lam_up.push(model.add_var(0.0, 0.0, LAMBDA_BOUND));
        lam_lo.push(model.add_var(0.0, 0.0, LAMBDA_BOUND));
    }
    let lam_h: Vec<Option<usize>> = use_half
        .iter()
        .map(|&u| u.then(|| model.add_var(0.0, 0.0, LAMBDA_BOUND)))
        .collect();
    // G^T lambda = a(theta), one equality per active coordinate
    for (i, &t) in coords.iter().enumerate() {
        let mut coeffs = vec![(lam_up[i], 1.0), (lam_lo[i], -1.0)];
        for (hi, h) in region.halfspaces.iter().enumerate() {
            if let Some(col) = lam_h[hi] {
                if h.a[t] != 0.0 {
                    coeffs.push((col, h.a[t]));
                }
            }
        }
        for term in &row.terms {
            let q = row.coeff_at(term, t);
            if q != 0.0 {
                coeffs.push((term.var, -q));
            }
        }
        let rhs = row.const_w.get(t).copied().unwrap_or(0.0);
        model.add_row(Row::eq(coeffs, rhs, row.group));
    }
    // g . lambda + b(theta) <= 0
    let mut coeffs = Vec::new();
    for (i, &t) in coords.iter().enumerate() {
        coeffs.push((lam_up[i], region.upper[t]));
        coeffs.push((lam_lo[i], -region.lower[t]));
    }
    for (hi, h) in region.halfspaces.iter().enumerate() {
        if let Some(col) = lam_h[hi] {
            coeffs.push((col, h.b));
        }
    }
    for term in &row.terms {
        if term.coeff0 != 0.0 {
            coeffs.push((term.var, term.coeff0));
        }
    }
    model.add_row(Row::le(coeffs, -row.const0, row.group));
    Ok(())
}

// ---------------------------------------------------------------------------
// Robust program assembly
// ---------------------------------------------------------------------------

/// Affine decomposition `M(w) = base + sum_t terms[t] w[t]` of a stage
/// matrix, or an error when the family is not affine.
fn affine_parts(m: &MatrixFamily, n_w: usize, what: &str) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    match m {
        MatrixFamily::Constant(b) => Ok((b.clone(), vec![DMatrix::zeros(b.nrows(), b.ncols()); n_w])),
        MatrixFamily::AffineInW { base, terms } => {
            let mut ts = terms.clone();
            ts.resize(n_w, DMatrix::zeros(base.nrows(), base.ncols()));
            Ok((base.clone(), ts))
        }
        MatrixFamily::Callback { .. } => Err(Error::Parameter(format!(
            "{what} must be constant or affine in w for the robust-linear path"
        ))),
    }
}

fn constant_matrix(m: &MatrixFamily, what: &str) -> Result<DMatrix<f64>> {
    match m {
        MatrixFamily::Constant(b) => Ok(b.clone()),
        _ => Err(Error::Parameter(format!(
            "{what} must be constant for the robust-linear path"
        ))),
    }
}

/// Condensed affine-in-`w` access for one policy piece: every state and
/// input row becomes a [`RobustRow`] fragment over the decision variables.
struct RobustCondensed {
    /// `abold x0 + cbold(0)`
    x_const: DVector<f64>,
    /// columns: d x_stacked / d w_stacked (zero for the last stage block)
    c_w: DMatrix<f64>,
    bbold: DMatrix<f64>,
    /// first kappa column of this piece's `(1, w)` block
    block0: usize,
    dim: usize,
    h_entries: Vec<(usize, usize)>,
    h_offset: usize,
    n_x: usize,
    n_u: usize,
}

impl RobustCondensed {
    #[allow(clippy::too_many_arguments)]
    fn new(
        sys: &UncertainSystem,
        x0: &DVector<f64>,
        horizon: usize,
        piece: usize,
        h_entries: Vec<(usize, usize)>,
        h_offset: usize,
    ) -> Result<Self> {
        constant_matrix(&sys.a, "A")?;
        constant_matrix(&sys.b, "B")?;
        affine_parts(&sys.c, sys.n_w, "c")?;
        let dim = (horizon + 1) * sys.n_w;
        let zeros: Vec<DVector<f64>> = (0..=horizon).map(|_| DVector::zeros(sys.n_w)).collect();
        let base = sys.stack(&zeros, horizon)?;
        let x_const = &base.abold * x0 + &base.cbold;
        // cbold is affine in the stacked w: probe one coordinate at a time
        let mut c_w = DMatrix::zeros((horizon + 1) * sys.n_x, dim);
        for j in 0..horizon {
            for t in 0..sys.n_w {
                let mut ws = zeros.clone();
                ws[j][t] = 1.0;
                let probe = sys.stack(&ws, horizon)?;
                c_w.column_mut(j * sys.n_w + t)
                    .copy_from(&(&probe.cbold - &base.cbold));
            }
        }
        Ok(RobustCondensed {
            x_const,
            c_w,
            bbold: base.bbold,
            block0: piece * (dim + 1),
            dim,
            h_entries,
            h_offset,
            n_x: sys.n_x,
            n_u: sys.n_u,
        })
    }

    /// `p . x_k` as a robust-row fragment `(terms, const0, const_w)`.
    fn state_row(&self, k: usize, p: &[f64]) -> (Vec<RobustTerm>, f64, Vec<f64>) {
        let mut const0 = 0.0;
        let mut const_w = vec![0.0; self.dim];
        for (i, &pi) in p.iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            let r = k * self.n_x + i;
            const0 += pi * self.x_const[r];
            for t in 0..self.dim {
                const_w[t] += pi * self.c_w[(r, t)];
            }
        }
        // m = p . bbold_k over stacked input rows
        let n_ubold = self.bbold.ncols();
        let mut m = vec![0.0; n_ubold];
        for (i, &pi) in p.iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            let brow = self.bbold.row(k * self.n_x + i);
            for (t, v) in brow.iter().enumerate() {
                m[t] += pi * v;
            }
        }
        let terms = self.h_terms(&m);
        (terms, const0, const_w)
    }

    /// `q . u_k` as a robust-row fragment.
    fn input_row(&self, k: usize, q: &[f64]) -> (Vec<RobustTerm>, f64, Vec<f64>) {
        let mut m = vec![0.0; self.bbold.ncols()];
        for (i, &qi) in q.iter().enumerate() {
            m[k * self.n_u + i] = qi;
        }
        (self.h_terms(&m), 0.0, vec![0.0; self.dim])
    }

    /// Terms of `m . H kappa(w)` over the free entries of `H`, using this
    /// piece's `(1, w)` kappa block.
    fn h_terms(&self, m: &[f64]) -> Vec<RobustTerm> {
        let mut terms = Vec::new();
        for (idx, &(r, c)) in self.h_entries.iter().enumerate() {
            if m[r] == 0.0 || c < self.block0 || c > self.block0 + self.dim {
                continue;
            }
            let var = self.h_offset + idx;
            if c == self.block0 {
                terms.push(RobustTerm { var, coeff0: m[r], coeff_w: Vec::new() });
            } else {
                let mut coeff_w = vec![0.0; self.dim];
                coeff_w[c - self.block0 - 1] = m[r];
                terms.push(RobustTerm { var, coeff0: 0.0, coeff_w });
            }
        }
        terms
    }
}

/// Robust counterparts of the per-sample big-M atom rows for one policy
/// piece, plus the state/input polyhedron rows, all as [`RobustRow`]s.
fn robust_rows_for_piece(
    prob: &ScenarioProblem,
    template: &SpecTemplate,
    access: &RobustCondensed,
    cols: RecourseCols,
) -> Result<Vec<RobustRow>> {
    let n = prob.policy.horizon;
    let mut out = Vec::new();
    if !template.trivially_true {
        for ar in &template.atom_rows {
            let prop = prob
                .props
                .get(&ar.atom)
                .ok_or_else(|| Error::UnknownAtom(ar.atom.clone()))?;
            let (p, rho0, rho_w) = match &prop.shape {
                PropShape::AffineInW { p, rho0, rho_w } => (p, rho0, rho_w),
                _ => {
                    return Err(Error::Parameter(format!(
                        "proposition `{}` is not affine; use the scenario path",
                        ar.atom
                    )))
                }
            };
            let prow: Vec<f64> = p.row(ar.row).iter().copied().collect();
            let (terms, c0, cw) = access.state_row(ar.time, &prow);
            let dcol = cols.col(RecourseVar::Delta(ar.delta));
            let stage0 = ar.time * prob.sys.n_w;
            // rho(w_k) contributes -rho_w w_k on the <= side
            let mut cw_up = cw.clone();
            for t in 0..rho_w.ncols().min(prob.sys.n_w) {
                cw_up[stage0 + t] -= rho_w[(ar.row, t)];
            }
            // Each implication direction is only emitted for the polarity
            // the formula uses, mirroring the per-sample rows.
            if ar.pos {
                // delta = 1  =>  P x - rho(w) <= 0, relaxed by M+ otherwise
                let mut up_terms = terms.clone();
                up_terms.push(RobustTerm { var: dcol, coeff0: ar.m_plus, coeff_w: Vec::new() });
                out.push(RobustRow {
                    terms: up_terms,
                    const0: c0 - rho0[ar.row] - ar.m_plus,
                    const_w: cw_up,
                    group: RowGroup::Structural,
                });
            }
            if ar.neg {
                // delta = 0  =>  rho(w) + 2 tol - P x <= 0; margin doubled
                // to stay strictly above an evaluator accepting rows up to
                // rho + tol, relaxation widened to keep delta = 1 exact
                let mut lo_terms: Vec<RobustTerm> = terms
                    .iter()
                    .map(|t| RobustTerm {
                        var: t.var,
                        coeff0: -t.coeff0,
                        coeff_w: t.coeff_w.iter().map(|v| -v).collect(),
                    })
                    .collect();
                lo_terms.push(RobustTerm {
                    var: dcol,
                    coeff0: ar.m_minus - 2.0 * template.tol,
                    coeff_w: Vec::new(),
                });
                let mut cw_lo: Vec<f64> = cw.iter().map(|v| -v).collect();
                for t in 0..rho_w.ncols().min(prob.sys.n_w) {
                    cw_lo[stage0 + t] += rho_w[(ar.row, t)];
                }
                out.push(RobustRow {
                    terms: lo_terms,
                    const0: -c0 + rho0[ar.row] + 2.0 * template.tol,
                    const_w: cw_lo,
                    group: RowGroup::Structural,
                });
            }
        }
    }
    if let Some(xs) = &prob.x_set {
        for k in 0..=n {
            for (a, b) in polytope_rows(xs) {
                let (terms, c0, cw) = access.state_row(k, &a);
                out.push(RobustRow {
                    terms,
                    const0: c0 - b,
                    const_w: cw,
                    group: RowGroup::Structural,
                });
            }
        }
    }
    if let Some(us) = &prob.u_set {
        for k in 0..n {
            for (a, b) in polytope_rows(us) {
                let (terms, c0, cw) = access.input_row(k, &a);
                out.push(RobustRow {
                    terms,
                    const0: c0 - b,
                    const_w: cw,
                    group: RowGroup::Structural,
                });
            }
        }
    }
    Ok(out)
}

/// Assembles the robust-linear program: every specification and
/// state-input row must hold for all disturbances in the intersection of
/// its policy piece with each support piece. Requires constant `A`, `B`,
/// affine `c`, and affine propositions. The sample-average objective uses
/// the training multisample; the worst-case objective is dualized like a
/// constraint.
pub fn assemble_robust_program(
    prob: &ScenarioProblem,
    support: &SupportEstimate,
    training: Option<&Multisample>,
) -> Result<ScenarioAssembly> {
    let n = prob.policy.horizon;
    let dim = (n + 1) * prob.sys.n_w;
    for sp in &support.pieces {
        if sp.lower.len() != dim {
            return Err(Error::Dimension(format!(
                "support piece dimension {} does not match (N+1) n_w = {dim}",
                sp.lower.len()
            )));
        }
    }
    let n_pieces = prob.policy.partition.len();
    if prob.recourse.pieces() != n_pieces {
        return Err(Error::Parameter(
            "robust path requires recourse partition equal to the policy partition".into(),
        ));
    }
    let pnf = to_pnf(&prob.formula);
    let uses_atoms = !pnf.atoms().is_empty();
    // big-M over the bounding box of the whole support estimate
    let bigm = if uses_atoms {
        let xs = prob.x_set.as_ref().ok_or(Error::UnboundedDomain(
            "specification atoms need a bounded state set for big-M".into(),
        ))?;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for sp in &support.pieces {
            for t in 0..dim {
                lo[t] = lo[t].min(sp.lower[t]);
                hi[t] = hi[t].max(sp.upper[t]);
            }
        }
        compute_bigm(&prob.props, xs, &BigMDomain::Box { lower: lo, upper: hi })?
    } else {
        BigMTable::default()
    };
    let template = crate::encoder::encode_formula(&pnf, &prob.props, &bigm, n, prob.tol)?;

    let mut model = MilpModel::new();
    let h_offset = model.n_vars();
    let mask = prob.policy.causality_mask();
    let mut h_entries = Vec::new();
    for r in 0..mask.nrows() {
        for c in 0..mask.ncols() {
            if mask[(r, c)] {
                h_entries.push((r, c));
                model.add_var(0.0, -prob.h_bound, prob.h_bound);
            }
        }
    }
    let mut blocks = Vec::new();
    for _ in 0..n_pieces {
        blocks.push(add_recourse_block(&mut model, &template));
    }
    let epigraph = match prob.objective {
        ObjectiveSpec::WorstCase(_) => {
            Some(model.add_var(1.0, -LAMBDA_BOUND, LAMBDA_BOUND))
        }
        _ => None,
    };

    for i in 0..n_pieces {
        let access = RobustCondensed::new(
            &prob.sys,
            &prob.x0,
            n,
            i,
            h_entries.clone(),
            h_offset,
        )?;
        let mut rows = robust_rows_for_piece(prob, &template, &access, blocks[i])?;
        if let ObjectiveSpec::WorstCase(cost) = &prob.objective {
            rows.push(worst_case_row(cost, &access, epigraph.unwrap())?);
        }
        let piece = &prob.policy.partition.pieces[i];
        let mut covered = false;
        for sp in &support.pieces {
            let region = intersect_region(piece, sp);
            if !region.is_nonempty() {
                continue;
            }
            covered = true;
            for row in &rows {
                dualize_row(&mut model, row, &region)?;
            }
        }
        if !covered {
            return Err(Error::EmptyPiece(i));
        }
        if !template.trivially_true {
            for row in bool_spec_rows(&template, blocks[i], RowGroup::Structural) {
                model.add_row(row);
            }
        }
    }

    let mut objective_offset = 0.0;
    if let ObjectiveSpec::SampleAverage(cost) = &prob.objective {
        let samples = training.ok_or(Error::Parameter(
            "sample-average objective needs a training multisample".into(),
        ))?;
        if samples.rows() == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let scale = 1.0 / samples.rows() as f64;
        for k in 0..samples.rows() {
            let ws = samples.stages(k);
            let stacked = prob.sys.stack(&ws, n)?;
            let (kappa, _, _) = prob.policy.kappa(&samples.stacked(k));
            let access =
                CondensedAccess::new(&stacked, &prob.x0, kappa, h_entries.clone(), h_offset);
            let (coeffs, c0) = accumulate_cost(cost, &access);
            for (j, v) in coeffs {
                model.objective[j] += scale * v;
            }
            objective_offset += scale * c0;
        }
    }

    let layout = DecisionLayout {
        h_offset,
        h_entries,
        blocks,
        n_z: template.n_z,
        n_delta: template.n_delta,
        epigraph,
        n_vars: model.n_vars(),
    };
    Ok(ScenarioAssembly {
        model,
        layout,
        template,
        objective_offset,
        piece_of_sample: Vec::new(),
    })
}

/// `cost(theta, w) - t <= 0` as a robust row for the epigraph objective.
fn worst_case_row(
    cost: &StageCost,
    access: &RobustCondensed,
    epigraph: usize,
) -> Result<RobustRow> {
    let mut terms: Vec<RobustTerm> = Vec::new();
    let mut const0 = 0.0;
    let mut const_w = vec![0.0; access.dim];
    let mut absorb = |(ts, c0, cw): (Vec<RobustTerm>, f64, Vec<f64>)| {
        merge_terms(&mut terms, ts);
        const0 += c0;
        for (t, v) in cw.into_iter().enumerate() {
            const_w[t] += v;
        }
    };
    for (k, c) in &cost.x_terms {
        absorb(access.state_row(*k, c));
    }
    for (k, q) in &cost.u_terms {
        absorb(access.input_row(*k, q));
    }
    terms.push(RobustTerm { var: epigraph, coeff0: -1.0, coeff_w: Vec::new() });
    Ok(RobustRow { terms, const0, const_w, group: RowGroup::Structural })
}

fn merge_terms(into: &mut Vec<RobustTerm>, from: Vec<RobustTerm>) {
    for t in from {
        if let Some(existing) = into.iter_mut().find(|e| e.var == t.var) {
            existing.coeff0 += t.coeff0;
            if existing.coeff_w.len() < t.coeff_w.len() {
                existing.coeff_w.resize(t.coeff_w.len(), 0.0);
            }
            for (i, v) in t.coeff_w.iter().enumerate() {
                existing.coeff_w[i] += v;
            }
        } else {
            into.push(t);
        }
    }
}

fn accumulate_cost(cost: &StageCost, access: &dyn StateAccess) -> (Vec<(usize, f64)>, f64) {
    use std::collections::BTreeMap;
    let mut coeffs: BTreeMap<usize, f64> = BTreeMap::new();
    let mut c0 = 0.0;
    for (k, c) in &cost.x_terms {
        let (cs, cst) = access.state_row(*k, c);
        for (j, v) in cs {
            *coeffs.entry(j).or_insert(0.0) += v;
        }
        c0 += cst;
    }
    for (k, q) in &cost.u_terms {
        let (cs, cst) = access.input_row(*k, q);
        for (j, v) in cs {
            *coeffs.entry(j).or_insert(0.0) += v;
        }
        c0 += cst;
    }
    (coeffs.into_iter().collect(), c0)
}

// ---------------------------------------------------------------------------
// Sample bound for the support estimate
// ---------------------------------------------------------------------------

/// Sample count guaranteeing the support estimate's coverage: with `m`
/// inequalities over `(N+1) n_w` dimensions the decision dimension is
/// `m (N+1) n_w + m`.
pub fn k_w_bound(
    eps: f64,
    beta: f64,
    m: usize,
    horizon: usize,
    n_w: usize,
    method: BoundMethod,
) -> Result<usize> {
    if m == 0 {
        return Err(Error::Parameter("m must be at least 1".into()));
    }
    let dims = m * (horizon + 1) * n_w + m;
    match method {
        BoundMethod::ClosedForm => closed_form_k(eps, beta, 0, dims),
        BoundMethod::BinarySearch => binary_search_k(eps, beta, dims, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MatrixFamily;
    use crate::logic::{eval_bounded, AtomicProposition, Formula, Trajectory};
    use crate::milp::{solve_lp, MilpBackend, ReferenceSolver};
    use crate::policy::{Partition, PolicySpec, RecourseSpec};
    use crate::scenario::assemble_scenario_program;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn ms_from_rows(rows: Vec<Vec<f64>>, n_w: usize) -> Multisample {
        let ncols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Multisample {
            data: DMatrix::from_row_slice(rows.len(), ncols, &flat),
            n_w,
            provenance: "test".into(),
        }
    }

    #[test]
    fn single_box_example() {
        let ms = ms_from_rows(vec![vec![0.0, 0.0], vec![1.0, 2.0]], 1);
        let est = estimate_support(&ms, &SupportTemplate::SingleBox).unwrap();
        assert_eq!(est.pieces.len(), 1);
        assert_eq!(est.pieces[0].lower, vec![0.0, 0.0]);
        assert_eq!(est.pieces[0].upper, vec![1.0, 2.0]);
        assert_eq!(est.m, 4);
    }

    #[test]
    fn boxes_never_shrink() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut rows: Vec<Vec<f64>> =
            (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let before = estimate_support(&ms_from_rows(rows.clone(), 3), &SupportTemplate::SingleBox)
            .unwrap();
        rows.push((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let after =
            estimate_support(&ms_from_rows(rows, 3), &SupportTemplate::SingleBox).unwrap();
        for t in 0..3 {
            assert!(after.pieces[0].lower[t] <= before.pieces[0].lower[t]);
            assert!(after.pieces[0].upper[t] >= before.pieces[0].upper[t]);
        }
    }

    #[test]
    fn split_purity_and_empty_piece() {
        let h = Halfspace { a: vec![1.0, -1.0], b: 0.0 }; // w0 <= w1
        let ms = ms_from_rows(
            vec![vec![0.0, 1.0], vec![-1.0, 0.5], vec![2.0, 0.0], vec![1.0, -1.0]],
            1,
        );
        let est = estimate_support(&ms, &SupportTemplate::SplitByHalfspace(h.clone())).unwrap();
        assert_eq!(est.pieces.len(), 2);
        assert_eq!(est.m, 2 * (2 * 2 + 1));
        // piece 0 holds the w0 <= w1 samples
        assert_eq!(est.pieces[0].upper, vec![0.0, 1.0]);
        // all on one side -> empty piece error
        let one_sided = ms_from_rows(vec![vec![0.0, 1.0], vec![-1.0, 0.5]], 1);
        assert!(matches!(
            estimate_support(&one_sided, &SupportTemplate::SplitByHalfspace(Halfspace {
                a: vec![-1.0, 1.0],
                b: -10.0,
            })),
            Err(Error::EmptyPiece(_))
        ));
    }

    #[test]
    fn support_estimate_json_round_trip() {
        let est = SupportEstimate {
            pieces: vec![SupportPiece {
                halfspace: Some(Halfspace { a: vec![1.0], b: 0.5 }),
                lower: vec![-1.0],
                upper: vec![1.0],
            }],
            m: 3,
        };
        let json = serde_json::to_string(&est).unwrap();
        let back: SupportEstimate = serde_json::from_str(&json).unwrap();
        assert_eq!(back.m, 3);
        assert_eq!(back.pieces[0].lower, vec![-1.0]);
        assert!(back.pieces[0].halfspace.is_some());
    }

    #[test]
    fn dualize_hand_examples() {
        // max_{w in [-1,1]} 2w + 1 <= 0 is violated; the dual is infeasible
        let region = Region { lower: vec![-1.0], upper: vec![1.0], halfspaces: Vec::new() };
        let mut model = MilpModel::new();
        let row = RobustRow {
            terms: Vec::new(),
            const0: 1.0,
            const_w: vec![2.0],
            group: RowGroup::Structural,
        };
        dualize_row(&mut model, &row, &region).unwrap();
        assert!(matches!(solve_lp(&model), Err(Error::Infeasible)));

        // max_{w in [0,1]^2} (w1 - w2) - 1 <= 0 holds
        let region = Region {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            halfspaces: Vec::new(),
        };
        let mut model = MilpModel::new();
        let row = RobustRow {
            terms: Vec::new(),
            const0: -1.0,
            const_w: vec![1.0, -1.0],
            group: RowGroup::Structural,
        };
        dualize_row(&mut model, &row, &region).unwrap();
        assert!(solve_lp(&model).is_ok());
    }

    /// Dualized epigraph minimum equals the vertex-enumeration worst case.
    #[test]
    fn dualization_matches_vertex_oracle() {
        let mut rng = StdRng::seed_from_u64(77);
        for case in 0..100 {
            let dim = rng.gen_range(1..=4);
            let lower: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..0.0)).collect();
            let upper: Vec<f64> =
                lower.iter().map(|&l| l + rng.gen_range(0.1..2.0)).collect();
            // optional halfspace through the box
            let halfspaces = if rng.gen_bool(0.5) {
                let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mid: f64 = (0..dim)
                    .map(|t| a[t] * 0.5 * (lower[t] + upper[t]))
                    .sum();
                vec![Halfspace { a, b: mid + 0.1 }]
            } else {
                Vec::new()
            };
            let region = Region { lower: lower.clone(), upper: upper.clone(), halfspaces };
            // fixed theta, free epigraph t: min t s.t. a(w) theta + c(w) <= t
            let theta = rng.gen_range(-1.0..1.0);
            let const0 = rng.gen_range(-1.0..1.0);
            let const_w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q_w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p0 = rng.gen_range(-1.0..1.0);
            let mut model = MilpModel::new();
            let th = model.add_var(0.0, theta, theta);
            let t = model.add_var(1.0, -100.0, 100.0);
            let row = RobustRow {
                terms: vec![
                    RobustTerm { var: th, coeff0: p0, coeff_w: q_w.clone() },
                    RobustTerm { var: t, coeff0: -1.0, coeff_w: Vec::new() },
                ],
                const0,
                const_w: const_w.clone(),
                group: RowGroup::Structural,
            };
            dualize_row(&mut model, &row, &region).unwrap();
            let sol = solve_lp(&model).unwrap();
            // vertex oracle over the region's vertices (box vertices kept
            // when inside every halfspace; halfspace cuts handled by also
            // scanning edge intersections in 1-2 dims would be overkill,
            // so restrict the halfspace case to verifying soundness)
            if region.halfspaces.is_empty() {
                let mut worst = f64::NEG_INFINITY;
                for mask in 0..(1usize << dim) {
                    let w = DVector::from_fn(dim, |tt, _| {
                        if mask >> tt & 1 == 1 { upper[tt] } else { lower[tt] }
                    });
                    let mut v = const0 + theta * p0;
                    for tt in 0..dim {
                        v += (const_w[tt] + theta * q_w[tt]) * w[tt];
                    }
                    worst = worst.max(v);
                }
                assert!(
                    (sol.objective - worst).abs() < 1e-8,
                    "case {case}: dual {} vs vertex {}",
                    sol.objective,
                    worst
                );
            }
            // soundness at random interior points, halfspace or not
            for _ in 0..200 {
                let w = region.sample_point(&mut rng);
                assert!(
                    row.value(&sol.x, &w) <= 1e-8,
                    "case {case}: robust row violated at sampled w"
                );
            }
        }
    }

    fn robust_toy(rho_w_scale: f64, c_affine: bool) -> ScenarioProblem {
        let c = if c_affine {
            MatrixFamily::AffineInW {
                base: DMatrix::zeros(1, 1),
                terms: vec![DMatrix::from_row_slice(1, 1, &[0.1])],
            }
        } else {
            MatrixFamily::Constant(DMatrix::zeros(1, 1))
        };
        let sys = UncertainSystem::new(
            MatrixFamily::Constant(DMatrix::from_row_slice(1, 1, &[1.0])),
            MatrixFamily::Constant(DMatrix::from_row_slice(1, 1, &[1.0])),
            c,
            1,
        )
        .unwrap();
        let mut props = BTreeMap::new();
        props.insert(
            "obs".to_string(),
            AtomicProposition::affine(
                "obs",
                DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
                DVector::from_column_slice(&[0.7, -0.3]),
                DMatrix::from_row_slice(2, 1, &[rho_w_scale, -rho_w_scale]),
            ),
        );
        let n = 3;
        let policy = PolicySpec::new(1, 1, n, 2, Partition::trivial(n + 1)).unwrap();
        ScenarioProblem {
            sys,
            formula: Formula::Next(Box::new(Formula::always(Formula::NegAtom("obs".into())))),
            props,
            x0: DVector::from_column_slice(&[0.5]),
            recourse: RecourseSpec::trivial(n + 1),
            policy,
            x_set: Some(crate::encoder::Polytope::box_set(vec![-2.0], vec![2.0])),
            u_set: Some(crate::encoder::Polytope::box_set(vec![-1.0], vec![1.0])),
            objective: ObjectiveSpec::None,
            h_bound: 100.0,
            tol: 1e-6,
            sparse_states: false,
        }
    }

    #[test]
    fn degenerate_support_equals_single_sample_scenario() {
        // point support: the robust model must agree with the scenario
        // program built on that single sample
        let mut prob = robust_toy(0.1, true);
        prob.objective = ObjectiveSpec::SampleAverage(StageCost {
            x_terms: vec![(3, vec![1.0])],
            u_terms: Vec::new(),
        });
        let wbar = vec![0.3, -0.2, 0.5, 0.1];
        let support = SupportEstimate {
            pieces: vec![SupportPiece {
                halfspace: None,
                lower: wbar.clone(),
                upper: wbar.clone(),
            }],
            m: 8,
        };
        let training = ms_from_rows(vec![wbar.clone()], 1);
        let robust = assemble_robust_program(&prob, &support, Some(&training)).unwrap();
        let scen = assemble_scenario_program(&prob, &training, 1, 0).unwrap();
        let solver = ReferenceSolver::default();
        let r = solver.solve(&robust.model).unwrap();
        let s = solver.solve(&scen.model).unwrap();
        assert!(
            ((r.objective + robust.objective_offset) - (s.objective + scen.objective_offset))
                .abs()
                < 1e-6,
            "robust {} vs scenario {}",
            r.objective + robust.objective_offset,
            s.objective + scen.objective_offset
        );
    }

    #[test]
    fn robust_solution_feasible_at_all_vertices() {
        let prob = robust_toy(0.1, true);
        let support = SupportEstimate {
            pieces: vec![SupportPiece {
                halfspace: None,
                lower: vec![-1.0; 4],
                upper: vec![1.0; 4],
            }],
            m: 8,
        };
        let asm = assemble_robust_program(&prob, &support, None).unwrap();
        let sol = ReferenceSolver::default().solve(&asm.model).unwrap();
        let policy = asm.extract_policy(&prob.policy, &sol.x).unwrap();
        let pnf = to_pnf(&prob.formula);
        for mask in 0..16u32 {
            let wbold = DVector::from_fn(4, |t, _| {
                if mask >> t & 1 == 1 { 1.0 } else { -1.0 }
            });
            let ws: Vec<DVector<f64>> =
                (0..4).map(|t| DVector::from_column_slice(&[wbold[t]])).collect();
            let (us, flagged) = policy.evaluate(&wbold);
            assert!(!flagged);
            let xs = prob.sys.simulate(&prob.x0, &us, &ws).unwrap();
            for x in &xs {
                assert!(prob.x_set.as_ref().unwrap().contains(x, 1e-7));
            }
            for u in &us {
                assert!(prob.u_set.as_ref().unwrap().contains(u, 1e-7));
            }
            let traj = Trajectory::new(xs, ws).unwrap();
            assert!(
                eval_bounded(&pnf, &traj, &prob.props, 0, 1e-9).unwrap(),
                "vertex {mask} violates the formula"
            );
        }
    }

    #[test]
    fn worst_case_objective_dualizes() {
        let mut prob = robust_toy(0.1, true);
        prob.objective = ObjectiveSpec::WorstCase(StageCost {
            x_terms: vec![(3, vec![1.0])],
            u_terms: Vec::new(),
        });
        let support = SupportEstimate {
            pieces: vec![SupportPiece {
                halfspace: None,
                lower: vec![-1.0; 4],
                upper: vec![1.0; 4],
            }],
            m: 8,
        };
        let asm = assemble_robust_program(&prob, &support, None).unwrap();
        let sol = ReferenceSolver::default().solve(&asm.model).unwrap();
        let policy = asm.extract_policy(&prob.policy, &sol.x).unwrap();
        // no vertex cost may exceed the epigraph optimum
        let mut worst = f64::NEG_INFINITY;
        for mask in 0..16u32 {
            let wbold = DVector::from_fn(4, |t, _| {
                if mask >> t & 1 == 1 { 1.0 } else { -1.0 }
            });
            let ws: Vec<DVector<f64>> =
                (0..4).map(|t| DVector::from_column_slice(&[wbold[t]])).collect();
            let (us, _) = policy.evaluate(&wbold);
            let xs = prob.sys.simulate(&prob.x0, &us, &ws).unwrap();
            worst = worst.max(xs[3][0]);
        }
        assert!(worst <= sol.objective + 1e-7, "vertex cost {worst} exceeds epigraph {}", sol.objective);
    }

    #[test]
    fn nonlinear_inputs_rejected() {
        let mut prob = robust_toy(0.1, true);
        prob.sys.a = MatrixFamily::AffineInW {
            base: DMatrix::from_row_slice(1, 1, &[1.0]),
            terms: vec![DMatrix::from_row_slice(1, 1, &[0.5])],
        };
        let support = SupportEstimate {
            pieces: vec![SupportPiece { halfspace: None, lower: vec![0.0; 4], upper: vec![0.0; 4] }],
            m: 8,
        };
        assert!(matches!(
            assemble_robust_program(&prob, &support, None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn k_w_reference_values() {
        assert_eq!(k_w_bound(0.05, 1e-3, 4, 1, 1, BoundMethod::ClosedForm).unwrap(), 567);
        // doubling m increases the bound
        let base = k_w_bound(0.05, 1e-3, 4, 1, 1, BoundMethod::ClosedForm).unwrap();
        let doubled = k_w_bound(0.05, 1e-3, 8, 1, 1, BoundMethod::ClosedForm).unwrap();
        assert!(doubled > base);
        // binary-search variant never exceeds the closed form
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let eps = rng.gen_range(0.01..0.5);
            let beta = rng.gen_range(1e-6..0.1);
            let m = rng.gen_range(1..=6);
            let n = rng.gen_range(0..=4);
            let n_w = rng.gen_range(1..=3);
            let bs = k_w_bound(eps, beta, m, n, n_w, BoundMethod::BinarySearch).unwrap();
            let cf = k_w_bound(eps, beta, m, n, n_w, BoundMethod::ClosedForm).unwrap();
            assert!(bs <= cf);
        }
    }
}
