//! Scenario-based synthesis: sample-complexity calculators, assembly of the
//! sampled mixed-integer program from (system, formula, policy structure,
//! multisample), empirical violation estimation on fresh samples, and the
//! support-dimension counterexample with one supporting constraint per
//! sample.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dynamics::UncertainSystem;
use crate::encoder::{
    add_recourse_block, atom_spec_rows, bool_spec_rows, compute_bigm, state_input_rows,
    BigMDomain, BigMTable, CondensedAccess, DecisionLayout, ExplicitAccess, Polytope,
    RecourseCols, SpecTemplate, StateAccess,
};
use crate::error::Error;
use crate::logic::{eval_bounded, to_pnf, AtomicProposition, Formula, Trajectory};
use crate::milp::{find_support_constraints, MilpBackend, MilpModel, Row, RowGroup};
use crate::policy::{PolicyParam, PolicySpec, RecourseSpec};
use crate::Result;

/// Box bound assigned to conceptually free decision variables (explicit
/// states/inputs, epigraph); far outside physically reachable scales.
const FREE_BOUND: f64 = 1e6;

// ---------------------------------------------------------------------------
// Sample-complexity calculators
// ---------------------------------------------------------------------------

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// Closed-form sample count
/// `K = ceil( e/(e-1) * (1/eps) * ( ln(2^mult / beta) + dims - 1 ) )`.
pub fn closed_form_k(eps: f64, beta: f64, multiplier_exponent: usize, dims: usize) -> Result<usize> {
    check_unit("eps", eps)?;
    check_unit("beta", beta)?;
    if dims < 1 {
        return Err(Error::Parameter("dims must be at least 1".into()));
    }
    let e = std::f64::consts::E;
    let ln_term = multiplier_exponent as f64 * std::f64::consts::LN_2 - beta.ln();
    let k = e / (e - 1.0) * (1.0 / eps) * (ln_term + dims as f64 - 1.0);
    Ok((k.ceil() as usize).max(1))
}

/// Binomial lower tail `sum_{i=0}^{zeta-1} C(K,i) eps^i (1-eps)^(K-i)`,
/// evaluated in the log domain with compensated summation.
pub fn binomial_tail(k: usize, eps: f64, zeta: usize) -> f64 {
    if zeta == 0 {
        return 0.0;
    }
    debug_assert!(zeta <= k + 1, "zeta = {zeta} out of range for K = {k}");
    let (ln_e, ln_1e) = (eps.ln(), (-eps).ln_1p());
    // log-sum-exp over the term logs, then exponentiate once
    let ln_kf = ln_gamma(k as f64 + 1.0);
    let logs: Vec<f64> = (0..zeta.min(k + 1))
        .map(|i| {
            ln_kf - ln_gamma(i as f64 + 1.0) - ln_gamma((k - i) as f64 + 1.0)
                + i as f64 * ln_e
                + (k - i) as f64 * ln_1e
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    // Kahan-compensated sum of the rescaled terms
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for l in logs {
        let y = (l - m).exp() - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    (m + sum.ln()).exp()
}

/// Minimal `K` with `2^mult * binomial_tail(K, eps, zeta) <= beta`, by
/// monotone bisection bracketed by `[zeta, closed_form_k]`.
pub fn binary_search_k(
    eps: f64,
    beta: f64,
    zeta: usize,
    multiplier_exponent: usize,
) -> Result<usize> {
    check_unit("eps", eps)?;
    check_unit("beta", beta)?;
    let ln_beta = beta.ln() - multiplier_exponent as f64 * std::f64::consts::LN_2;
    // small slack so exact-boundary cases are not rejected by rounding
    let ok = |k: usize| binomial_tail(k, eps, zeta).ln() <= ln_beta + 1e-12;
    let mut hi = closed_form_k(eps, beta, multiplier_exponent, zeta.max(1))?;
    let mut lo = zeta.max(1);
    if ok(lo) {
        return Ok(lo);
    }
    while !ok(hi) {
        // the closed form dominates in theory; tolerate rounding by growing
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Which calculator produced the sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    ClosedForm,
    BinarySearch,
}

/// Violation/confidence targets plus problem dimensions, with the derived
/// sample counts for the specification and state-input constraint families.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleBudget {
    pub eps_phi: f64,
    pub eps_s: f64,
    pub beta_phi: f64,
    pub beta_s: f64,
    /// free policy parameters
    pub d: usize,
    pub p_delta: usize,
    /// continuous/binary recourse dimensions per recourse copy
    pub n_c: usize,
    pub n_b: usize,
    pub method: BoundMethod,
    #[serde(rename = "K_phi")]
    pub k_phi: usize,
    #[serde(rename = "K_s")]
    pub k_s: usize,
}

impl SampleBudget {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        eps_phi: f64,
        eps_s: f64,
        beta_phi: f64,
        beta_s: f64,
        d: usize,
        p_delta: usize,
        n_c: usize,
        n_b: usize,
        method: BoundMethod,
    ) -> Result<Self> {
        let dims_phi = (d + p_delta * n_c).max(1);
        let mult = p_delta * n_b;
        let k_phi = match method {
            BoundMethod::ClosedForm => closed_form_k(eps_phi, beta_phi, mult, dims_phi)?,
            BoundMethod::BinarySearch => binary_search_k(eps_phi, beta_phi, dims_phi, mult)?,
        };
        let dims_s = d.max(1);
        let k_s = match method {
            BoundMethod::ClosedForm => closed_form_k(eps_s, beta_s, 0, dims_s)?,
            BoundMethod::BinarySearch => binary_search_k(eps_s, beta_s, dims_s, 0)?,
        };
        Ok(SampleBudget {
            eps_phi,
            eps_s,
            beta_phi,
            beta_s,
            d,
            p_delta,
            n_c,
            n_b,
            method,
            k_phi,
            k_s,
        })
    }
}

// ---------------------------------------------------------------------------
// Multisample
// ---------------------------------------------------------------------------

/// A batch of stacked disturbance realizations: one row per realization,
/// `(N+1) * n_w` columns. Rows are assumed i.i.d.; ensuring that is the
/// sampler's responsibility.
#[derive(Clone, Debug)]
pub struct Multisample {
    pub data: DMatrix<f64>,
    pub n_w: usize,
    pub provenance: String,
}

impl Multisample {
    pub fn from_sampler<R: Rng>(
        rows: usize,
        stages: usize,
        n_w: usize,
        rng: &mut R,
        mut sampler: impl FnMut(&mut R) -> DVector<f64>,
        provenance: &str,
    ) -> Self {
        let dim = stages * n_w;
        let mut data = DMatrix::zeros(rows, dim);
        for k in 0..rows {
            let w = sampler(rng);
            assert_eq!(w.len(), dim, "sampler returned wrong dimension");
            data.row_mut(k).copy_from(&w.transpose());
        }
        Multisample { data, n_w, provenance: provenance.to_string() }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    /// The stacked realization of row `k`.
    pub fn stacked(&self, k: usize) -> DVector<f64> {
        self.data.row(k).transpose()
    }

    /// Row `k` split into per-stage disturbances `w_0..w_N`.
    pub fn stages(&self, k: usize) -> Vec<DVector<f64>> {
        let n_stages = self.data.ncols() / self.n_w;
        (0..n_stages)
            .map(|t| {
                DVector::from_fn(self.n_w, |i, _| self.data[(k, t * self.n_w + i)])
            })
            .collect()
    }

    /// All stage disturbances of rows `0..count`, flattened (big-M domain).
    pub fn stage_pool(&self, count: usize) -> Vec<DVector<f64>> {
        (0..count.min(self.rows())).flat_map(|k| self.stages(k)).collect()
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path.as_ref())?;
        let n_stages = self.data.ncols() / self.n_w;
        let header: Vec<String> = (0..n_stages)
            .flat_map(|t| (0..self.n_w).map(move |i| format!("w{t}_{i}")))
            .collect();
        wtr.write_record(&header)?;
        for k in 0..self.rows() {
            let rec: Vec<String> =
                self.data.row(k).iter().map(|v| format!("{v}")).collect();
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P, n_w: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let width = rdr.headers()?.len();
        if width == 0 || width % n_w != 0 {
            return Err(Error::InputFile(format!(
                "{}: {width} columns is not a multiple of n_w = {n_w}",
                path.display()
            )));
        }
        let mut rows: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::InputFile(format!(
                    "{}: ragged row {count}",
                    path.display()
                )));
            }
            for field in rec.iter() {
                rows.push(field.trim().parse::<f64>().map_err(|_| {
                    Error::InputFile(format!("{}: bad number `{field}`", path.display()))
                })?);
            }
            count += 1;
        }
        Ok(Multisample {
            data: DMatrix::from_row_slice(count, width, &rows),
            n_w,
            provenance: path.display().to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Scenario program assembly
// ---------------------------------------------------------------------------

/// A linear stage cost `sum_k c_k . x_k + sum_k q_k . u_k` applied per
/// sample.
#[derive(Clone, Debug, Default)]
pub struct StageCost {
    pub x_terms: Vec<(usize, Vec<f64>)>,
    pub u_terms: Vec<(usize, Vec<f64>)>,
}

impl StageCost {
    fn accumulate(&self, access: &dyn StateAccess) -> (Vec<(usize, f64)>, f64) {
        let mut coeffs: BTreeMap<usize, f64> = BTreeMap::new();
        let mut c0 = 0.0;
        for (k, c) in &self.x_terms {
            let (cs, c) = {
                let (cs, cst) = access.state_row(*k, c);
                (cs, cst)
            };
            for (j, v) in cs {
                *coeffs.entry(j).or_insert(0.0) += v;
            }
            c0 += c;
        }
        for (k, q) in &self.u_terms {
            let (cs, c) = access.input_row(*k, q);
            for (j, v) in cs {
                *coeffs.entry(j).or_insert(0.0) += v;
            }
            c0 += c;
        }
        (coeffs.into_iter().collect(), c0)
    }
}

/// Objective of the scenario program (always minimized).
#[derive(Clone, Debug)]
pub enum ObjectiveSpec {
    /// Pure feasibility.
    None,
    /// Sample average of the stage cost over the specification samples.
    SampleAverage(StageCost),
    /// Epigraph of the worst sampled stage cost.
    WorstCase(StageCost),
}

/// Everything that defines one synthesis instance except the samples.
#[derive(Clone, Debug)]
pub struct ScenarioProblem {
    pub sys: UncertainSystem,
    pub formula: Formula,
    pub props: BTreeMap<String, AtomicProposition>,
    pub x0: DVector<f64>,
    pub policy: PolicySpec,
    pub recourse: RecourseSpec,
    pub x_set: Option<Polytope>,
    pub u_set: Option<Polytope>,
    pub objective: ObjectiveSpec,
    /// Box bound for the free policy parameters.
    pub h_bound: f64,
    pub tol: f64,
    /// Instantiate explicit per-sample state/input variables with equality
    /// rows instead of condensing through the stacked dynamics.
    pub sparse_states: bool,
}

/// An assembled scenario program with its variable bookkeeping.
#[derive(Clone, Debug)]
pub struct ScenarioAssembly {
    pub model: MilpModel,
    pub layout: DecisionLayout,
    pub template: SpecTemplate,
    /// Constant part of the objective dropped from the linear model.
    pub objective_offset: f64,
    /// Recourse piece index used by each specification sample.
    pub piece_of_sample: Vec<usize>,
}

impl ScenarioAssembly {
    /// Reconstructs the policy matrix from a solution vector.
    pub fn extract_policy(&self, spec: &PolicySpec, x: &[f64]) -> Result<PolicyParam> {
        let mask = spec.causality_mask();
        let mut h = DMatrix::zeros(mask.nrows(), mask.ncols());
        for (idx, &(r, c)) in self.layout.h_entries.iter().enumerate() {
            h[(r, c)] = x[self.layout.h_offset + idx];
        }
        PolicyParam::new(spec.clone(), h)
    }
}

fn mask_entries(spec: &PolicySpec) -> Vec<(usize, usize)> {
    let mask = spec.causality_mask();
    let mut entries = Vec::new();
    for r in 0..mask.nrows() {
        for c in 0..mask.ncols() {
            if mask[(r, c)] {
                entries.push((r, c));
            }
        }
    }
    entries
}

/// Builds the scenario program: the first `k_phi` multisample rows
/// instantiate specification blocks, the next `k_s` rows instantiate
/// state-input blocks only. Big-M constants are computed over the stage
/// disturbances of the specification samples.
pub fn assemble_scenario_program(
    prob: &ScenarioProblem,
    samples: &Multisample,
    k_phi: usize,
    k_s: usize,
) -> Result<ScenarioAssembly> {
    if k_phi == 0 {
        return Err(Error::Parameter("k_phi must be at least 1".into()));
    }
    if k_phi + k_s > samples.rows() {
        return Err(Error::Parameter(format!(
            "sample split {k_phi}+{k_s} exceeds multisample rows {}",
            samples.rows()
        )));
    }
    let n = prob.policy.horizon;
    let pnf = to_pnf(&prob.formula);
    let uses_atoms = !pnf.atoms().is_empty();
    let x_set = prob.x_set.as_ref();
    let bigm = if uses_atoms {
        let xs = x_set.ok_or(Error::UnboundedDomain(
            "specification atoms need a bounded state set for big-M".into(),
        ))?;
        compute_bigm(&prob.props, xs, &BigMDomain::Samples(samples.stage_pool(k_phi)))?
    } else {
        BigMTable::default()
    };
    let template = crate::encoder::encode_formula(&pnf, &prob.props, &bigm, n, prob.tol)?;

    let mut model = MilpModel::new();
    // policy parameters
    let h_offset = model.n_vars();
    let h_entries = mask_entries(&prob.policy);
    for _ in &h_entries {
        model.add_var(0.0, -prob.h_bound, prob.h_bound);
    }
    // recourse blocks, one per recourse-partition piece
    let mut blocks: Vec<RecourseCols> = Vec::new();
    for _ in 0..prob.recourse.pieces() {
        blocks.push(add_recourse_block(&mut model, &template));
    }
    // epigraph variable
    let epigraph = match prob.objective {
        ObjectiveSpec::WorstCase(_) => Some(model.add_var(1.0, -FREE_BOUND, FREE_BOUND)),
        _ => None,
    };

    let mut objective_offset = 0.0;
    let mut piece_of_sample = Vec::with_capacity(k_phi);
    for k in 0..k_phi + k_s {
        let ws = samples.stages(k);
        if ws.len() < n + 1 {
            return Err(Error::Dimension(format!(
                "multisample provides {} stages, horizon needs {}",
                ws.len(),
                n + 1
            )));
        }
        let wbold = samples.stacked(k);
        let (kappa, _, _) = prob.policy.kappa(&wbold);
        let access: Box<dyn StateAccess> = if prob.sparse_states {
            Box::new(explicit_sample_vars(
                &mut model,
                prob,
                &ws,
                &kappa,
                h_offset,
                &h_entries,
                k,
            )?)
        } else {
            let stacked = prob.sys.stack(&ws, n)?;
            Box::new(CondensedAccess::new(
                &stacked,
                &prob.x0,
                kappa,
                h_entries.clone(),
                h_offset,
            ))
        };
        if k < k_phi {
            let piece = prob.recourse.locate(&wbold).0;
            piece_of_sample.push(piece);
            if !template.trivially_true {
                let cols = blocks[piece];
                for row in atom_spec_rows(
                    &template,
                    &prob.props,
                    &ws,
                    access.as_ref(),
                    cols,
                    RowGroup::Spec(k),
                )? {
                    model.add_row(row);
                }
            }
            match &prob.objective {
                ObjectiveSpec::None => {}
                ObjectiveSpec::SampleAverage(cost) => {
                    let (coeffs, c0) = cost.accumulate(access.as_ref());
                    let scale = 1.0 / k_phi as f64;
                    for (j, v) in coeffs {
                        model.objective[j] += scale * v;
                    }
                    objective_offset += scale * c0;
                }
                ObjectiveSpec::WorstCase(cost) => {
                    let (mut coeffs, c0) = cost.accumulate(access.as_ref());
                    coeffs.push((epigraph.unwrap(), -1.0));
                    model.add_row(Row::le(coeffs, -c0, RowGroup::Spec(k)));
                }
            }
        }
        for row in state_input_rows(
            x_set,
            prob.u_set.as_ref(),
            n,
            access.as_ref(),
            RowGroup::StateInput(k),
        ) {
            model.add_row(row);
        }
    }
    // Boolean/temporal rows per recourse block (sample-independent)
    if !template.trivially_true {
        for cols in &blocks {
            for row in bool_spec_rows(&template, *cols, RowGroup::Structural) {
                model.add_row(row);
            }
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
    Ok(ScenarioAssembly { model, layout, template, objective_offset, piece_of_sample })
}

/// Adds explicit state/input variables and the coupling equality rows
/// (initial state, dynamics, policy) for one sample.
fn explicit_sample_vars(
    model: &mut MilpModel,
    prob: &ScenarioProblem,
    ws: &[DVector<f64>],
    kappa: &DVector<f64>,
    h_offset: usize,
    h_entries: &[(usize, usize)],
    sample: usize,
) -> Result<ExplicitAccess> {
    let n = prob.policy.horizon;
    let (n_x, n_u) = (prob.sys.n_x, prob.sys.n_u);
    let x_offset = model.n_vars();
    for _ in 0..(n + 1) * n_x {
        model.add_var(0.0, -FREE_BOUND, FREE_BOUND);
    }
    let u_offset = model.n_vars();
    for _ in 0..n * n_u {
        model.add_var(0.0, -FREE_BOUND, FREE_BOUND);
    }
    let group = RowGroup::StateInput(sample);
    // x_0 = x0
    for i in 0..n_x {
        model.add_row(Row::eq(vec![(x_offset + i, 1.0)], prob.x0[i], group));
    }
    // x_{k+1} - A(w_k) x_k - B(w_k) u_k = c(w_k)
    for k in 0..n {
        let a = prob.sys.a.evaluate(&ws[k]);
        let b = prob.sys.b.evaluate(&ws[k]);
        let c = prob.sys.c.evaluate(&ws[k]);
        for i in 0..n_x {
            let mut coeffs = vec![(x_offset + (k + 1) * n_x + i, 1.0)];
            for j in 0..n_x {
                if a[(i, j)] != 0.0 {
                    coeffs.push((x_offset + k * n_x + j, -a[(i, j)]));
                }
            }
            for j in 0..n_u {
                if b[(i, j)] != 0.0 {
                    coeffs.push((u_offset + k * n_u + j, -b[(i, j)]));
                }
            }
            model.add_row(Row::eq(coeffs, c[(i, 0)], group));
        }
    }
    // u_k = (H kappa)_k
    for r in 0..n * n_u {
        let mut coeffs = vec![(u_offset + r, 1.0)];
        for (idx, &(hr, hc)) in h_entries.iter().enumerate() {
            if hr == r && kappa[hc] != 0.0 {
                coeffs.push((h_offset + idx, -kappa[hc]));
            }
        }
        model.add_row(Row::eq(coeffs, 0.0, group));
    }
    Ok(ExplicitAccess { x_offset, u_offset, n_x, n_u })
}

// ---------------------------------------------------------------------------
// Empirical violation
// ---------------------------------------------------------------------------

/// Empirical violation frequencies of a policy on a fresh multisample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmpiricalViolation {
    pub eps_hat_phi: f64,
    pub eps_hat_s: f64,
    pub out_of_partition: usize,
    pub samples: usize,
}

/// Replays the closed loop on every fresh sample and reports the fraction
/// violating the formula and the fraction violating any state-input row.
pub fn empirical_violation(
    policy: &PolicyParam,
    sys: &UncertainSystem,
    formula: &Formula,
    props: &BTreeMap<String, AtomicProposition>,
    x0: &DVector<f64>,
    x_set: Option<&Polytope>,
    u_set: Option<&Polytope>,
    fresh: &Multisample,
    tol: f64,
) -> Result<EmpiricalViolation> {
    if fresh.rows() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let pnf = to_pnf(formula);
    let mut bad_phi = 0usize;
    let mut bad_s = 0usize;
    let mut out_of_partition = 0usize;
    for k in 0..fresh.rows() {
        let wbold = fresh.stacked(k);
        let ws = fresh.stages(k);
        let (us, flagged) = policy.evaluate(&wbold);
        if flagged {
            out_of_partition += 1;
        }
        let xs = sys.simulate(x0, &us, &ws)?;
        let traj = Trajectory::new(xs.clone(), ws)?;
        if !eval_bounded(&pnf, &traj, props, 0, tol)? {
            bad_phi += 1;
        }
        let mut s_ok = true;
        if let Some(xset) = x_set {
            s_ok &= xs.iter().all(|x| xset.contains(x, tol));
        }
        if let Some(uset) = u_set {
            s_ok &= us.iter().all(|u| uset.contains(u, tol));
        }
        if !s_ok {
            bad_s += 1;
        }
    }
    Ok(EmpiricalViolation {
        eps_hat_phi: bad_phi as f64 / fresh.rows() as f64,
        eps_hat_s: bad_s as f64 / fresh.rows() as f64,
        out_of_partition,
        samples: fresh.rows(),
    })
}

// ---------------------------------------------------------------------------
// Support-dimension counterexample
// ---------------------------------------------------------------------------

/// Output of [`helly_counterexample`].
#[derive(Clone, Debug)]
pub struct CounterexampleReport {
    pub model: MilpModel,
    pub support: Vec<usize>,
    /// True when every sampled constraint group is supporting.
    pub all_supporting: bool,
}

/// Builds the 2-parameter program whose sampled piecewise constraints are
/// all supporting, for any sample count: decision `(h1, h2)` with
/// `0 <= h1 <= 1`, minimize `h2`, and per sample `k` the disjunction
/// `h1 - w1 - h2 <= 0  or  w1 + 2 w2 - h1 - h2 <= 0` encoded with one
/// binary. Verifies supportness by group removal.
pub fn helly_counterexample(
    k_phi: usize,
    rng: &mut impl Rng,
    backend: &dyn MilpBackend,
) -> Result<CounterexampleReport> {
    if k_phi == 0 {
        return Err(Error::Parameter("k_phi must be at least 1".into()));
    }
    let kf = k_phi as f64;
    let mut model = MilpModel::new();
    let h1 = model.add_var(0.0, 0.0, 1.0);
    let h2 = model.add_var(1.0, -10.0, 10.0);
    const M: f64 = 64.0;
    for k in 1..=k_phi {
        let center = (4.0 * k as f64 - 5.0) / (4.0 * kf);
        let w1 = center + rng.gen_range(-1.0..1.0) / (16.0 * kf);
        let w2 = 1.0 / kf + rng.gen_range(0.0..1.0) / (8.0 * kf);
        let b = model.add_binary(0.0);
        let group = RowGroup::Spec(k - 1);
        // h1 - h2 <= w1 + M (1 - b)
        model.add_row(Row::le(
            vec![(h1, 1.0), (h2, -1.0), (b, M)],
            w1 + M,
            group,
        ));
        // -h1 - h2 <= -(w1 + 2 w2) + M b
        model.add_row(Row::le(
            vec![(h1, -1.0), (h2, -1.0), (b, -M)],
            -(w1 + 2.0 * w2),
            group,
        ));
    }
    let support = find_support_constraints(&model, backend, 1e-7)?;
    let all_supporting = support.len() == k_phi;
    Ok(CounterexampleReport { model, support, all_supporting })
}
