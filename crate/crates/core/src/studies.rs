//! Executable highway case studies: a car avoiding a turning truck under the
//! scenario route, and an overtaking maneuver against a laterally drifting
//! truck under the robust-linear route.
//!
//! Both studies share one vehicle model (a double integrator discretized by
//! zero-order hold) and differ only in the disturbance process, the
//! constraint-set parameters, and the synthesis route. Desk-scale and
//! paper-scale runs share every code path; only the `CaseConfig` numbers
//! differ.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dynamics::{MatrixFamily, UncertainSystem};
use crate::encoder::Polytope;
use crate::error::Error;
use crate::logic::{AtomicProposition, Formula};
use crate::milp::{solve_with_row_generation, MilpBackend, ReferenceSolver};
use crate::policy::{
    refine_partition, Halfspace, Partition, Piece, PolicyParam, PolicySpec, RecourseSpec,
};
use crate::robust_linear::{
    assemble_robust_program, estimate_support, k_w_bound, SupportEstimate, SupportPiece,
    SupportTemplate,
};
use crate::scenario::{
    assemble_scenario_program, empirical_violation, BoundMethod, Multisample, ObjectiveSpec,
    SampleBudget, ScenarioProblem, StageCost,
};
use crate::Result;

/// km/h to m/s.
const KMH: f64 = 1.0 / 3.6;
/// Truck footprint plus car footprint, long side (9 m + 4.5 m).
const OBSTACLE_LENGTH: f64 = 13.5;
/// Truck footprint plus car footprint, short side (2.5 m + 2 m).
const OBSTACLE_WIDTH: f64 = 4.5;
/// Lane half-width offset of lane centers from the road axis.
const LANE_CENTER: f64 = 1.75;

/// Which highway scenario a configuration describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    /// Oncoming truck performing a 90-degree counter-clockwise turn across
    /// the car's lane; scenario route with a memory-limited affine policy.
    Turning,
    /// Slow truck ahead drifting laterally; robust-linear route with a
    /// piecewise affine policy split by the truck's lateral direction.
    Overtaking,
}

/// Problem size preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Small instances that the reference solver finishes in minutes.
    Desk,
    /// Full-size instances; intended for an external MILP backend.
    Paper,
}

/// All tunable numbers of one case-study run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseConfig {
    pub kind: CaseKind,
    pub scale: Scale,
    /// Horizon N.
    pub n: usize,
    /// Sampling time in seconds.
    pub ts: f64,
    /// Specification samples (turning) or support/training samples
    /// (overtaking). Zero means: size from the theoretical bound.
    pub k_phi: usize,
    /// Extra state-input-only samples (turning route). Zero with
    /// `k_phi == 0` means: size from the theoretical bound.
    pub k_s: usize,
    /// Fresh samples for the empirical violation estimate.
    pub fresh: usize,
    /// Policy memory (number of past disturbance stages each input sees).
    pub memory: usize,
    /// Number of policy pieces (overtaking route).
    pub pieces: usize,
    pub seed: u64,
    pub eps_phi: f64,
    pub eps_s: f64,
    pub beta: f64,
}

impl CaseConfig {
    pub fn turning(scale: Scale, seed: u64) -> Self {
        let (n, ts, k_phi, k_s) = match scale {
            Scale::Desk => (5, 0.8, 200, 60),
            Scale::Paper => (10, 0.4, 0, 0),
        };
        CaseConfig {
            kind: CaseKind::Turning,
            scale,
            n,
            ts,
            k_phi,
            k_s,
            fresh: 10_000,
            memory: 3,
            pieces: 1,
            seed,
            eps_phi: 0.05,
            eps_s: 0.3,
            beta: 1e-3,
        }
    }

    pub fn overtaking(scale: Scale, pieces: usize, seed: u64) -> Self {
        let (n, ts, k_phi) = match scale {
            Scale::Desk => (5, 1.0, 150),
            Scale::Paper => (10, 0.4, 0),
        };
        CaseConfig {
            kind: CaseKind::Overtaking,
            scale,
            n,
            ts,
            k_phi,
            k_s: 0,
            fresh: 10_000,
            memory: 1,
            pieces,
            seed,
            eps_phi: 0.05,
            eps_s: 0.05,
            beta: 1e-3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.ts <= 0.0 {
            return Err(Error::Parameter("horizon and sampling time must be positive".into()));
        }
        if self.scale == Scale::Desk && (self.n > 6 || self.k_phi > 300) {
            return Err(Error::Parameter(
                "desk scale caps the horizon at 6 and the sample count at 300".into(),
            ));
        }
        if self.pieces == 0 {
            return Err(Error::Parameter("at least one policy piece is required".into()));
        }
        Ok(())
    }
}

/// Seed stream for fresh evaluation samples, decorrelated from training.
fn fresh_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x5851_f42d_4c95_7f2d)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi - lo <= 0.0 {
        hi
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Samples trajectories of the turning truck. The truck drives a unicycle at
/// constant forward speed 22 km/h from the known pose (44 m, 1.75 m, 0 rad),
/// turning counter-clockwise by a uniformly distributed angle increment each
/// step; the increments are capped so the accumulated heading never exceeds
/// 90 degrees. Each step integrates the continuous unicycle exactly along a
/// constant-curvature arc. Stage disturbance: w_k = (y1_k, y2_k, theta_k).
pub fn sample_turning(cfg: &CaseConfig, count: usize, seed: u64) -> Multisample {
    let v = 22.0 * KMH;
    let n = cfg.n;
    let lo0 = (std::f64::consts::PI - 0.66) / (2.0 * (n as f64 + 1.0));
    let hi0 = (std::f64::consts::PI + 0.66) / (2.0 * (n as f64 + 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Multisample::from_sampler(
        count,
        n + 1,
        3,
        &mut rng,
        |rng| {
            let mut w = DVector::zeros(3 * (n + 1));
            let (mut y1, mut y2, mut th) = (44.0, LANE_CENTER, 0.0f64);
            let mut acc = 0.0f64;
            w[0] = y1;
            w[1] = y2;
            w[2] = th;
            for k in 1..=n {
                let remaining = std::f64::consts::FRAC_PI_2 - acc;
                let hi = hi0.min(remaining);
                let lo = lo0.min(hi);
                let d = uniform(rng, lo, hi).max(0.0);
                acc += d;
                let th_next = th + d;
                if d.abs() > 1e-9 {
                    // Exact constant-curvature arc; the truck is oncoming,
                    // so forward motion points toward decreasing y1.
                    let r = v * cfg.ts / d;
                    y1 -= r * (th_next.sin() - th.sin());
                    y2 -= r * (th.cos() - th_next.cos());
                } else {
                    y1 -= v * cfg.ts * th.cos();
                    y2 -= v * cfg.ts * th.sin();
                }
                th = th_next;
                w[3 * k] = y1;
                w[3 * k + 1] = y2;
                w[3 * k + 2] = th;
            }
            w
        },
        &format!("turning(seed={seed})"),
    )
}

/// Samples trajectories of the truck ahead in the overtaking study, expressed
/// in a reference frame moving at 100 km/h. The truck's forward position y1
/// is uncertain but constant; its lateral position starts at a shifted
/// uniform around the middle-lane center and then drifts with a per-step
/// lateral velocity whose sign is fixed by the initial branch (starting at or
/// above -1.75 m moves left, otherwise right). w_k = (y1, y2_k).
pub fn sample_overtaking(cfg: &CaseConfig, count: usize, seed: u64) -> Multisample {
    let vl = 3.75 * KMH;
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Multisample::from_sampler(
        count,
        n + 1,
        2,
        &mut rng,
        |rng| {
            let mut w = DVector::zeros(2 * (n + 1));
            let y1 = uniform(rng, 13.5, 17.5);
            let mut y2 = cfg.ts * uniform(rng, -vl, vl) - LANE_CENTER;
            let moves_left = y2 >= -LANE_CENTER;
            w[0] = y1;
            w[1] = y2;
            for k in 1..=n {
                let step = uniform(rng, 0.0, vl) * cfg.ts;
                y2 += if moves_left { step } else { -step };
                w[2 * k] = y1;
                w[2 * k + 1] = y2;
            }
            w
        },
        &format!("overtaking(seed={seed})"),
    )
}

/// The car model plus constraint sets and the avoidance specification for
/// one case study.
pub struct CarSetup {
    pub sys: UncertainSystem,
    pub x0: DVector<f64>,
    pub x_set: Polytope,
    pub u_set: Polytope,
    pub props: BTreeMap<String, AtomicProposition>,
    pub formula: Formula,
}

/// Rows of a weighted, shifted 1-norm ball
/// `|z_i - c_i|/r_i + |z_j - c_j|/r_j <= 1` over coordinates `(i, j)`.
fn one_norm_rows(
    dim: usize,
    coords: (usize, usize),
    center: (f64, f64),
    radii: (f64, f64),
) -> Vec<(Vec<f64>, f64)> {
    let mut rows = Vec::with_capacity(4);
    for s1 in [1.0, -1.0] {
        for s2 in [1.0, -1.0] {
            let mut a = vec![0.0; dim];
            a[coords.0] = s1 / radii.0;
            a[coords.1] = s2 / radii.1;
            let b = 1.0 + s1 * center.0 / radii.0 + s2 * center.1 / radii.1;
            rows.push((a, b));
        }
    }
    rows
}

/// Builds the double-integrator car (exact zero-order-hold discretization),
/// its input and state constraint sets, and the truck-avoidance formula for
/// the configured case. The obstacle half-dimensions already include the
/// car's own length and width.
pub fn build_car(cfg: &CaseConfig) -> Result<CarSetup> {
    cfg.validate()?;
    let ts = cfg.ts;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, ts, 0.0, //
            0.0, 1.0, 0.0, ts, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let g = ts * ts / 2.0;
    let b = DMatrix::from_row_slice(4, 2, &[g, 0.0, 0.0, g, ts, 0.0, 0.0, ts]);
    let n_w = match cfg.kind {
        CaseKind::Turning => 3,
        CaseKind::Overtaking => 2,
    };
    let sys = UncertainSystem::new(
        MatrixFamily::Constant(a),
        MatrixFamily::Constant(b),
        MatrixFamily::Constant(DMatrix::zeros(4, 1)),
        n_w,
    )?;

    let mut props = BTreeMap::new();
    let (x0, x_set, u_set) = match cfg.kind {
        CaseKind::Turning => {
            // Oncoming-traffic frame: the car keeps the lane x2 in [-3.5, 0]
            // while braking (u1 in [-10, -3] via the shifted 1-norm ball).
            let u_center = (-6.5, 0.0);
            let u_radii = (3.5, 5.0);
            let mut u_set = Polytope::box_set(
                vec![u_center.0 - u_radii.0, u_center.1 - u_radii.1],
                vec![u_center.0 + u_radii.0, u_center.1 + u_radii.1],
            );
            u_set.rows = one_norm_rows(2, (0, 1), u_center, u_radii);

            let v_bar = (40.0 * KMH, 0.0);
            let v_radii = (40.0 * KMH, 20.0 * KMH);
            let mut x_set = Polytope::box_set(
                vec![-10.0, -3.5, v_bar.0 - v_radii.0, v_bar.1 - v_radii.1],
                vec![120.0, 0.0, v_bar.0 + v_radii.0, v_bar.1 + v_radii.1],
            );
            x_set.rows = one_norm_rows(4, (2, 3), v_bar, v_radii);

            props.insert(
                "truck".to_string(),
                AtomicProposition::rotated_box(
                    "truck",
                    [0, 1],
                    2,
                    [OBSTACLE_LENGTH, OBSTACLE_WIDTH],
                ),
            );
            let x0 = DVector::from_column_slice(&[0.0, -LANE_CENTER, 50.0 * KMH, 0.0]);
            (x0, x_set, u_set)
        }
        CaseKind::Overtaking => {
            // Co-moving frame at 100 km/h; the car starts in the right lane
            // x2 in [0, 3.5] with zero relative speed.
            let u_radii = (3.5, 5.0);
            let mut u_set = Polytope::box_set(
                vec![-u_radii.0, -u_radii.1],
                vec![u_radii.0, u_radii.1],
            );
            u_set.rows = one_norm_rows(2, (0, 1), (0.0, 0.0), u_radii);

            let v_bar = (10.0 * KMH, 0.0);
            let v_radii = (20.0 * KMH, 20.0 * KMH);
            let mut x_set = Polytope::box_set(
                vec![-10.0, 0.0, v_bar.0 - v_radii.0, v_bar.1 - v_radii.1],
                vec![60.0, 3.5, v_bar.0 + v_radii.0, v_bar.1 + v_radii.1],
            );
            x_set.rows = one_norm_rows(4, (2, 3), v_bar, v_radii);

            // Axis-aligned truck box around the uncertain position: the
            // rows act on (x1, x2).
            let p = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
            let half_l = OBSTACLE_LENGTH / 2.0;
            let half_w = OBSTACLE_WIDTH / 2.0;
            let rho0 = DVector::from_column_slice(&[half_l, half_l, half_w, half_w]);
            let rho_w =
                DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
            props.insert(
                "truck".to_string(),
                AtomicProposition::affine("truck", p, rho0, rho_w),
            );
            let x0 = DVector::from_column_slice(&[0.0, LANE_CENTER, 0.0, 0.0]);
            (x0, x_set, u_set)
        }
    };
    let formula = Formula::always(Formula::NegAtom("truck".into()));
    Ok(CarSetup { sys, x0, x_set, u_set, props, formula })
}

/// Mean and tail percentiles of a sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub mean: f64,
    pub p5: f64,
    pub p95: f64,
}

impl ObjectiveStats {
    pub fn from_values(values: &[f64]) -> Self {
        assert!(!values.is_empty());
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let pick = |q: f64| {
            let idx = (q * (sorted.len() - 1) as f64).round() as usize;
            sorted[idx]
        };
        ObjectiveStats { mean, p5: pick(0.05), p95: pick(0.95) }
    }
}

/// Size and effort figures of the solved program(s).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverStats {
    pub nodes: usize,
    /// In-sample objective (mean terminal forward position, meters).
    pub objective: f64,
    pub variables: usize,
    pub rows: usize,
    pub binaries: usize,
}

/// Machine-readable run summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseReport {
    pub config: CaseConfig,
    /// Sample-size accounting: scenario budget (turning) or the robust
    /// support-sample bound (overtaking).
    pub budget: serde_json::Value,
    pub solver_stats: SolverStats,
    pub eps_hat_phi: f64,
    pub eps_hat_s: f64,
    pub out_of_partition: usize,
    /// Terminal forward position across the fresh samples.
    pub objective_stats: ObjectiveStats,
}

/// Everything a run produces, for callers that keep computing.
pub struct StudyOutcome {
    pub report: CaseReport,
    pub policy: PolicyParam,
    /// Terminal forward position per fresh sample.
    pub terminals: Vec<f64>,
    /// Overtaking study: whether the truck of each fresh sample drifts left.
    pub moving_left: Vec<bool>,
    /// Overtaking study: whether the car ends ahead of the truck.
    pub overtaken: Vec<bool>,
    pub fresh: Multisample,
}

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes closed-loop replays of the first `count` samples as one CSV with
/// columns `t, x1..x4, u1, u2, w...` (inputs are blank at the final stage).
pub fn write_trajectories_csv(
    path: &Path,
    setup: &CarSetup,
    policy: &PolicyParam,
    samples: &Multisample,
    count: usize,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut wtr = csv::Writer::from_path(&tmp)?;
        let mut header = vec!["sample".to_string(), "t".to_string()];
        header.extend((1..=4).map(|i| format!("x{i}")));
        header.extend((1..=2).map(|i| format!("u{i}")));
        header.extend((0..samples.n_w).map(|i| format!("w{i}")));
        wtr.write_record(&header)?;
        for s in 0..count.min(samples.rows()) {
            let ws = samples.stages(s);
            let (us, _) = policy.evaluate(&samples.stacked(s));
            let xs = setup.sys.simulate(&setup.x0, &us, &ws)?;
            for (t, x) in xs.iter().enumerate() {
                let mut rec = vec![s.to_string(), t.to_string()];
                rec.extend(x.iter().map(|v| format!("{v}")));
                if t < us.len() {
                    rec.extend(us[t].iter().map(|v| format!("{v}")));
                } else {
                    rec.extend(std::iter::repeat(String::new()).take(2));
                }
                rec.extend(ws[t].iter().map(|v| format!("{v}")));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_artifacts(
    outdir: &Path,
    setup: &CarSetup,
    outcome: &StudyOutcome,
    replays: usize,
) -> Result<()> {
    fs::create_dir_all(outdir)?;
    atomic_write(
        &outdir.join("report.json"),
        &serde_json::to_string_pretty(&outcome.report)?,
    )?;
    atomic_write(
        &outdir.join("policy.json"),
        &serde_json::to_string_pretty(&outcome.policy.to_json())?,
    )?;
    write_trajectories_csv(
        &outdir.join("trajectories.csv"),
        setup,
        &outcome.policy,
        &outcome.fresh,
        replays,
    )?;
    Ok(())
}

fn terminal_positions(
    setup: &CarSetup,
    policy: &PolicyParam,
    samples: &Multisample,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.rows());
    for s in 0..samples.rows() {
        let ws = samples.stages(s);
        let (us, _) = policy.evaluate(&samples.stacked(s));
        let xs = setup.sys.simulate(&setup.x0, &us, &ws)?;
        out.push(xs.last().unwrap()[0]);
    }
    Ok(out)
}

/// Runs the turning-truck study end to end: sizes the sample budget, draws
/// the multisample, assembles and solves the scenario program with lazy row
/// generation, and evaluates the policy on fresh samples. With `outdir`,
/// emits `report.json`, `policy.json`, and replay trajectories.
pub fn run_case_study_1(cfg: &CaseConfig, outdir: Option<&Path>) -> Result<StudyOutcome> {
    cfg.validate()?;
    if cfg.kind != CaseKind::Turning {
        return Err(Error::Parameter("config is not a turning-truck setup".into()));
    }
    let setup = build_car(cfg)?;
    let dim = (cfg.n + 1) * 3;
    let policy_spec = PolicySpec::new(2, 3, cfg.n, cfg.memory, Partition::trivial(dim))?;
    let d = policy_spec.free_parameters();

    let problem = |objective: ObjectiveSpec| ScenarioProblem {
        sys: setup.sys.clone(),
        formula: setup.formula.clone(),
        props: setup.props.clone(),
        x0: setup.x0.clone(),
        policy: policy_spec.clone(),
        recourse: RecourseSpec::trivial(dim),
        x_set: Some(setup.x_set.clone()),
        u_set: Some(setup.u_set.clone()),
        objective,
        h_bound: 50.0,
        tol: 1e-6,
        sparse_states: false,
    };

    // Maximize the expected terminal forward position (the solver minimizes).
    let stage_cost = StageCost { x_terms: vec![(cfg.n, vec![-1.0, 0.0, 0.0, 0.0])], u_terms: vec![] };
    let prob = problem(ObjectiveSpec::SampleAverage(stage_cost));

    // Size the binary/continuous recourse counts from a pilot assembly so
    // the theoretical budget matches the solved program.
    let pilot = sample_turning(cfg, 1, cfg.seed);
    let pilot_asm = assemble_scenario_program(&prob, &pilot, 1, 0)?;
    let (n_c, n_b) = (pilot_asm.template.n_z, pilot_asm.template.n_delta);
    let budget = SampleBudget::compute(
        cfg.eps_phi,
        cfg.eps_s,
        cfg.beta,
        cfg.beta,
        d,
        1,
        n_c,
        n_b,
        BoundMethod::BinarySearch,
    )?;
    let (k_phi, k_s) = if cfg.k_phi == 0 {
        (budget.k_phi, budget.k_s)
    } else {
        (cfg.k_phi, cfg.k_s)
    };

    let training = sample_turning(cfg, k_phi + k_s, cfg.seed);
    let asm = assemble_scenario_program(&prob, &training, k_phi, k_s)?;
    let backend = ReferenceSolver::default();
    let sol = solve_with_row_generation(&asm.model, &backend)?;
    let policy = asm.extract_policy(&policy_spec, &sol.x)?;

    let fresh = sample_turning(cfg, cfg.fresh, fresh_seed(cfg.seed));
    let viol = empirical_violation(
        &policy,
        &setup.sys,
        &setup.formula,
        &setup.props,
        &setup.x0,
        Some(&setup.x_set),
        Some(&setup.u_set),
        &fresh,
        prob.tol,
    )?;
    let terminals = terminal_positions(&setup, &policy, &fresh)?;

    let report = CaseReport {
        config: cfg.clone(),
        budget: serde_json::to_value(&budget)?,
        solver_stats: SolverStats {
            nodes: sol.nodes,
            objective: -(sol.objective + asm.objective_offset),
            variables: asm.model.n_vars(),
            rows: asm.model.rows.len(),
            binaries: asm.model.n_binaries(),
        },
        eps_hat_phi: viol.eps_hat_phi,
        eps_hat_s: viol.eps_hat_s,
        out_of_partition: viol.out_of_partition,
        objective_stats: ObjectiveStats::from_values(&terminals),
    };
    let outcome = StudyOutcome {
        report,
        policy,
        terminals,
        moving_left: Vec::new(),
        overtaken: Vec::new(),
        fresh,
    };
    if let Some(dir) = outdir {
        write_artifacts(dir, &setup, &outcome, 10)?;
    }
    Ok(outcome)
}

/// Collapses a support estimate into its single bounding box (used at P = 1,
/// where the policy cannot distinguish the two lateral-motion branches).
fn bounding_box(support: &SupportEstimate) -> SupportEstimate {
    let dim = support.pieces[0].lower.len();
    let mut lower = vec![f64::INFINITY; dim];
    let mut upper = vec![f64::NEG_INFINITY; dim];
    for p in &support.pieces {
        for t in 0..dim {
            lower[t] = lower[t].min(p.lower[t]);
            upper[t] = upper[t].max(p.upper[t]);
        }
    }
    SupportEstimate {
        pieces: vec![SupportPiece { halfspace: None, lower, upper }],
        m: 2 * dim,
    }
}

/// Builds the policy partition for `pieces` pieces: pieces 0/1 are the lateral
/// branches split by `w2_1 <= w2_0`; further pieces refine the left-moving
/// branch by axis-aligned splits of the stage-0 coordinates, placed where the
/// training samples of a piece are most spread.
fn overtaking_partition(
    dim: usize,
    n_w: usize,
    pieces: usize,
    training: &Multisample,
) -> Result<(Partition, Halfspace)> {
    let mut a = vec![0.0; dim];
    a[n_w + 1] = 1.0;
    a[1] = -1.0;
    let split = Halfspace { a, b: 0.0 };
    if pieces == 1 {
        return Ok((Partition::trivial(dim), split));
    }
    let mut right = Piece::whole(dim);
    right.halfspaces.push(split.clone());
    let mut left = Piece::whole(dim);
    left.halfspaces.push(Halfspace {
        a: split.a.iter().map(|v| -v).collect(),
        b: -split.b,
    });
    let mut partition = Partition { dim, pieces: vec![right, left] };
    while partition.len() < pieces {
        let binding: Vec<(usize, DVector<f64>)> = (0..training.rows())
            .map(|s| {
                let w = training.stacked(s);
                (partition.locate(&w).0, w)
            })
            .collect();
        // Only the left-moving branch (piece 1 and pieces split off from it)
        // is refined; splits act on the stage-0 coordinates so the pieces
        // stay decidable from the first observation.
        let eligible: Vec<usize> = (1..partition.len()).collect();
        partition = refine_partition(&partition, &binding, &eligible, &[0, 1])?;
    }
    Ok((partition, split))
}

/// Runs the overtaking study end to end: estimates the two-piece disturbance
/// support, refines the left-moving branch up to `cfg.pieces` policy pieces,
/// solves one robust program per piece (the program decomposes exactly across
/// pieces), and evaluates the combined piecewise policy on fresh samples.
pub fn run_case_study_2(cfg: &CaseConfig, outdir: Option<&Path>) -> Result<StudyOutcome> {
    cfg.validate()?;
    if cfg.kind != CaseKind::Overtaking {
        return Err(Error::Parameter("config is not an overtaking setup".into()));
    }
    let setup = build_car(cfg)?;
    let n_w = 2;
    let dim = (cfg.n + 1) * n_w;

    // Inequality count of the two-box support template is known a priori,
    // so the sample bound can size the draw when no count is configured.
    let m = 2 * (2 * dim + 1);
    let k_w = k_w_bound(cfg.eps_phi, cfg.beta, m, cfg.n, n_w, BoundMethod::BinarySearch)?;
    let k_train = if cfg.k_phi == 0 { k_w } else { cfg.k_phi };

    let training = sample_overtaking(cfg, k_train, cfg.seed);
    let (partition, split) = overtaking_partition(dim, n_w, cfg.pieces, &training)?;
    let support = estimate_support(&training, &SupportTemplate::SplitByHalfspace(split))?;
    // At P = 1 a single affine policy must cover both branches jointly; the
    // box hull of the estimate is the corresponding one-piece support.
    let support_used =
        if cfg.pieces == 1 { bounding_box(&support) } else { support.clone() };

    let full_spec = PolicySpec::new(2, n_w, cfg.n, cfg.memory, partition.clone())?;
    let block = full_spec.n_kappa() / partition.len();
    let mut h_full = DMatrix::zeros(full_spec.n_inputs_stacked(), full_spec.n_kappa());

    let mut nodes = 0usize;
    let mut rows = 0usize;
    let mut vars = 0usize;
    let mut binaries = 0usize;
    let mut in_sample_sum = 0.0;
    let mut in_sample_count = 0usize;
    let stage_cost =
        StageCost { x_terms: vec![(cfg.n, vec![-1.0, 0.0, 0.0, 0.0])], u_terms: vec![] };
    let backend = ReferenceSolver::default();

    for (i, piece) in partition.pieces.iter().enumerate() {
        let sub_partition = Partition { dim, pieces: vec![piece.clone()] };
        let rows_in_piece: Vec<usize> = (0..training.rows())
            .filter(|&s| partition.locate(&training.stacked(s)).0 == i)
            .collect();
        let piece_training = if rows_in_piece.is_empty() {
            None
        } else {
            let mut data = DMatrix::zeros(rows_in_piece.len(), dim);
            for (r, &s) in rows_in_piece.iter().enumerate() {
                data.row_mut(r).copy_from(&training.data.row(s));
            }
            Some(Multisample {
                data,
                n_w,
                provenance: format!("{} piece {i}", training.provenance),
            })
        };
        let objective = if piece_training.is_some() {
            ObjectiveSpec::SampleAverage(stage_cost.clone())
        } else {
            ObjectiveSpec::None
        };
        let prob = ScenarioProblem {
            sys: setup.sys.clone(),
            formula: setup.formula.clone(),
            props: setup.props.clone(),
            x0: setup.x0.clone(),
            policy: PolicySpec::new(2, n_w, cfg.n, cfg.memory, sub_partition.clone())?,
            recourse: RecourseSpec { partition: sub_partition },
            x_set: Some(setup.x_set.clone()),
            u_set: Some(setup.u_set.clone()),
            objective,
            h_bound: 50.0,
            tol: 1e-6,
            sparse_states: false,
        };
        let asm = assemble_robust_program(&prob, &support_used, piece_training.as_ref())?;
        let sol = backend.solve(&asm.model)?;
        let sub_policy = asm.extract_policy(&prob.policy, &sol.x)?;
        h_full
            .view_mut((0, i * block), (h_full.nrows(), block))
            .copy_from(&sub_policy.h);
        nodes += sol.nodes;
        rows += asm.model.rows.len();
        vars += asm.model.n_vars();
        binaries += asm.model.n_binaries();
        if !rows_in_piece.is_empty() {
            in_sample_sum -=
                (sol.objective + asm.objective_offset) * rows_in_piece.len() as f64;
            in_sample_count += rows_in_piece.len();
        }
    }

    let policy = PolicyParam::new(full_spec, h_full)?;
    let fresh = sample_overtaking(cfg, cfg.fresh, fresh_seed(cfg.seed));
    let viol = empirical_violation(
        &policy,
        &setup.sys,
        &setup.formula,
        &setup.props,
        &setup.x0,
        Some(&setup.x_set),
        Some(&setup.u_set),
        &fresh,
        1e-6,
    )?;
    let terminals = terminal_positions(&setup, &policy, &fresh)?;
    let mut moving_left = Vec::with_capacity(fresh.rows());
    let mut overtaken = Vec::with_capacity(fresh.rows());
    for s in 0..fresh.rows() {
        let w = fresh.stacked(s);
        moving_left.push(w[n_w + 1] > w[1]);
        overtaken.push(terminals[s] >= w[0] + OBSTACLE_LENGTH / 2.0);
    }

    let report = CaseReport {
        config: cfg.clone(),
        budget: json!({ "K_w": k_w, "m": support.m, "method": "binary_search" }),
        solver_stats: SolverStats {
            nodes,
            objective: if in_sample_count > 0 {
                in_sample_sum / in_sample_count as f64
            } else {
                f64::NAN
            },
            variables: vars,
            rows,
            binaries,
        },
        eps_hat_phi: viol.eps_hat_phi,
        eps_hat_s: viol.eps_hat_s,
        out_of_partition: viol.out_of_partition,
        objective_stats: ObjectiveStats::from_values(&terminals),
    };
    let outcome =
        StudyOutcome { report, policy, terminals, moving_left, overtaken, fresh };
    if let Some(dir) = outdir {
        write_artifacts(dir, &setup, &outcome, 10)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{eval_bounded, Trajectory};

    fn desk_turning() -> CaseConfig {
        CaseConfig::turning(Scale::Desk, 7)
    }

    fn desk_overtaking(pieces: usize) -> CaseConfig {
        CaseConfig::overtaking(Scale::Desk, pieces, 7)
    }

    #[test]
    fn turning_sampler_pins_the_initial_pose_and_caps_the_turn() {
        let cfg = desk_turning();
        let ms = sample_turning(&cfg, 2000, 11);
        let n = cfg.n;
        let lo0 = (std::f64::consts::PI - 0.66) / (2.0 * (n as f64 + 1.0));
        let hi0 = (std::f64::consts::PI + 0.66) / (2.0 * (n as f64 + 1.0));
        let slack = (std::f64::consts::FRAC_PI_2 - n as f64 * lo0).max(0.0) + (hi0 - lo0);
        for s in 0..ms.rows() {
            let w = ms.stacked(s);
            assert_eq!((w[0], w[1], w[2]), (44.0, 1.75, 0.0));
            let theta_n = w[3 * n + 2];
            assert!(theta_n <= std::f64::consts::FRAC_PI_2 + 1e-12);
            assert!(theta_n >= std::f64::consts::FRAC_PI_2 - slack - 1e-12);
            // headings are non-decreasing and per-step increments bounded
            for k in 1..=n {
                let d = w[3 * k + 2] - w[3 * (k - 1) + 2];
                assert!(d >= -1e-12 && d <= hi0 + 1e-12);
            }
            // the truck advances: forward position strictly decreases
            assert!(w[3 * n] < w[0]);
        }
    }

    #[test]
    fn turning_steps_follow_exact_arcs() {
        let cfg = desk_turning();
        let ms = sample_turning(&cfg, 50, 3);
        let v = 22.0 * KMH;
        for s in 0..ms.rows() {
            let w = ms.stacked(s);
            for k in 1..=cfg.n {
                let (y1a, y2a, tha) = (w[3 * (k - 1)], w[3 * (k - 1) + 1], w[3 * (k - 1) + 2]);
                let (y1b, y2b, thb) = (w[3 * k], w[3 * k + 1], w[3 * k + 2]);
                let d = thb - tha;
                // chord length of a constant-curvature arc of length v*ts
                let chord = if d.abs() > 1e-9 {
                    2.0 * (v * cfg.ts / d) * (d / 2.0).sin()
                } else {
                    v * cfg.ts
                };
                let step = ((y1b - y1a).powi(2) + (y2b - y2a).powi(2)).sqrt();
                assert!((step - chord.abs()).abs() < 1e-9, "sample {s} step {k}");
            }
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let cfg = desk_turning();
        let a = sample_turning(&cfg, 40, 5);
        let b = sample_turning(&cfg, 40, 5);
        assert_eq!(a.data, b.data);
        let cfg2 = desk_overtaking(2);
        let a = sample_overtaking(&cfg2, 40, 5);
        let b = sample_overtaking(&cfg2, 40, 5);
        assert_eq!(a.data, b.data);
        let c = sample_overtaking(&cfg2, 40, 6);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn overtaking_sampler_is_branch_pure_and_respects_the_initial_box() {
        let cfg = desk_overtaking(2);
        let ms = sample_overtaking(&cfg, 2000, 13);
        let vl = 3.75 * KMH;
        let mut left = 0usize;
        for s in 0..ms.rows() {
            let w = ms.stacked(s);
            assert!(w[0] >= 13.5 && w[0] <= 17.5);
            assert!(w[1] >= -1.75 - cfg.ts * vl - 1e-12 && w[1] <= -1.75 + cfg.ts * vl + 1e-12);
            let sign = (w[3] - w[1]).signum();
            for k in 1..=cfg.n {
                let d = w[2 * k + 1] - w[2 * (k - 1) + 1];
                assert!(d * sign >= -1e-12, "lateral direction reversed");
                assert_eq!(w[2 * k], w[0], "forward position must stay constant");
            }
            if w[1] >= -1.75 {
                left += 1;
            }
        }
        // each y2_0 branch carries half the mass
        let frac = left as f64 / ms.rows() as f64;
        assert!((frac - 0.5).abs() < 0.05, "left-branch frequency {frac}");
    }

    #[test]
    fn car_model_matches_the_zero_order_hold() {
        let mut cfg = desk_turning();
        cfg.ts = 0.4;
        let setup = build_car(&cfg).unwrap();
        let a = setup.sys.a.evaluate(&DVector::zeros(3));
        let b = setup.sys.b.evaluate(&DVector::zeros(3));
        assert_eq!(a[(0, 2)], 0.4);
        assert_eq!(b[(0, 0)], 0.08);
        assert_eq!(b[(2, 0)], 0.4);
        assert_eq!(b[(1, 0)], 0.0);
    }

    #[test]
    fn input_set_is_centered_on_the_braking_point() {
        let cfg = desk_turning();
        let setup = build_car(&cfg).unwrap();
        let center = DVector::from_column_slice(&[-6.5, 0.0]);
        assert!(setup.u_set.contains(&center, 1e-12));
        for (a, b) in &setup.u_set.rows {
            let lhs = a[0] * center[0] + a[1] * center[1];
            assert!((b - lhs - 1.0).abs() < 1e-12, "each 1-norm row has unit slack at the center");
        }
        assert!(!setup.u_set.contains(&DVector::from_column_slice(&[-2.9, 0.0]), 1e-9));
        assert!(!setup.u_set.contains(&DVector::from_column_slice(&[-6.5, 5.1]), 1e-9));
    }

    #[test]
    fn velocity_ball_vertices_behave_as_predicted() {
        let cfg = desk_turning();
        let setup = build_car(&cfg).unwrap();
        let vbar = 40.0 * KMH;
        // axis vertices of the 1-norm ball lie on the boundary
        for v in [
            DVector::from_column_slice(&[5.0, -1.0, vbar + 40.0 * KMH, 0.0]),
            DVector::from_column_slice(&[5.0, -1.0, vbar, 20.0 * KMH]),
            DVector::from_column_slice(&[5.0, -1.0, 0.0, 0.0]),
        ] {
            assert!(setup.x_set.contains(&v, 1e-9));
        }
        // the box corner violates the coupled ball constraint
        let corner =
            DVector::from_column_slice(&[5.0, -1.0, vbar + 40.0 * KMH, 20.0 * KMH]);
        assert!(!setup.x_set.contains(&corner, 1e-9));
    }

    fn mini_turning() -> CaseConfig {
        let mut cfg = desk_turning();
        cfg.n = 4;
        cfg.k_phi = 25;
        cfg.k_s = 10;
        cfg.fresh = 400;
        cfg
    }

    #[test]
    fn turning_study_satisfies_all_training_samples() {
        let cfg = mini_turning();
        let outcome = run_case_study_1(&cfg, None).unwrap();
        let setup = build_car(&cfg).unwrap();
        // in-sample guarantee: the solved policy satisfies every training
        // sample exactly (replay through the true dynamics and semantics)
        let training = sample_turning(&cfg, cfg.k_phi + cfg.k_s, cfg.seed);
        let viol = empirical_violation(
            &outcome.policy,
            &setup.sys,
            &setup.formula,
            &setup.props,
            &setup.x0,
            Some(&setup.x_set),
            Some(&setup.u_set),
            &training,
            1e-6,
        )
        .unwrap();
        assert_eq!(viol.eps_hat_phi, 0.0, "a training sample violates the formula");
        assert!(viol.eps_hat_s <= 1e-9, "a specification sample violates X/U");
        // fresh-sample violation is small even at mini scale
        assert!(outcome.report.eps_hat_phi <= 0.2, "eps_hat_phi = {}", outcome.report.eps_hat_phi);
        // the car never crosses the truck box on a spot-checked fresh replay
        let ws = outcome.fresh.stages(0);
        let (us, _) = outcome.policy.evaluate(&outcome.fresh.stacked(0));
        let xs = setup.sys.simulate(&setup.x0, &us, &ws).unwrap();
        let traj = Trajectory::new(xs, ws).unwrap();
        assert!(eval_bounded(&setup.formula, &traj, &setup.props, 0, 1e-6).unwrap());
    }

    #[test]
    fn turning_policy_respects_the_memory_mask() {
        let cfg = mini_turning();
        let outcome = run_case_study_1(&cfg, None).unwrap();
        let mask = outcome.policy.spec.causality_mask();
        for r in 0..outcome.policy.h.nrows() {
            for c in 0..outcome.policy.h.ncols() {
                if !mask[(r, c)] {
                    assert_eq!(outcome.policy.h[(r, c)], 0.0);
                }
            }
        }
        // u_3 must not see the stage-0 pose: with memory 3, input row 3*n_u
        // has a masked-out column for w_0
        let n_u = 2;
        let row = 3 * n_u;
        assert!(!mask[(row, 1)], "memory window must exclude stage-0 poses at k = 3");
        assert!(mask[(row, 1 + 3 * 3)], "memory window must include stage-1 poses at k = 3");
    }

    #[test]
    fn turning_study_writes_report_policy_and_replays() {
        let cfg = mini_turning();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_case_study_1(&cfg, Some(dir.path())).unwrap();
        let report: CaseReport = serde_json::from_str(
            &fs::read_to_string(dir.path().join("report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report.solver_stats.nodes, outcome.report.solver_stats.nodes);
        assert!(report.budget["K_phi"].as_u64().unwrap() > 0);
        let policy_json: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("policy.json")).unwrap(),
        )
        .unwrap();
        let policy = PolicyParam::from_json(&policy_json).unwrap();
        assert_eq!(policy.h, outcome.policy.h);
        let csv = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
        assert!(csv.starts_with("sample,t,x1,x2,x3,x4,u1,u2,w0,w1,w2"));
        assert_eq!(csv.lines().count(), 1 + 10 * (cfg.n + 1));
    }

    fn mini_overtaking(pieces: usize) -> CaseConfig {
        let mut cfg = desk_overtaking(pieces);
        cfg.k_phi = 60;
        cfg.fresh = 400;
        cfg
    }

    #[test]
    fn overtaking_partition_refines_only_the_left_branch() {
        let cfg = mini_overtaking(4);
        let training = sample_overtaking(&cfg, cfg.k_phi, cfg.seed);
        let dim = (cfg.n + 1) * 2;
        let (partition, split) = overtaking_partition(dim, 2, 4, &training).unwrap();
        assert_eq!(partition.len(), 4);
        // piece 0 keeps the right-branch halfspace and stays unrefined
        assert_eq!(partition.pieces[0].halfspaces[0].a, split.a);
        assert!(partition.pieces[0].lower.iter().all(|b| b.is_none()));
        // all other pieces carry the flipped halfspace
        for p in &partition.pieces[1..] {
            assert_eq!(p.halfspaces[0].a[1], 1.0);
            assert_eq!(p.halfspaces[0].a[3], -1.0);
        }
        // refinement boxes touch only stage-0 coordinates
        for p in &partition.pieces {
            for t in 2..dim {
                assert!(p.lower[t].is_none() && p.upper[t].is_none());
            }
        }
    }

    #[test]
    fn one_piece_policy_never_overtakes_and_two_pieces_do() {
        let one = run_case_study_2(&mini_overtaking(1), None).unwrap();
        let two = run_case_study_2(&mini_overtaking(2), None).unwrap();
        // safety on fresh samples
        assert!(one.report.eps_hat_phi <= 0.05, "P=1 eps_hat_phi = {}", one.report.eps_hat_phi);
        assert!(two.report.eps_hat_phi <= 0.05, "P=2 eps_hat_phi = {}", two.report.eps_hat_phi);
        // with a single affine piece the car stays behind the truck on every
        // left-branch sample
        for s in 0..one.fresh.rows() {
            if one.moving_left[s] {
                assert!(!one.overtaken[s], "P=1 overtook on a left-branch sample {s}");
            }
        }
        // two pieces overtake on most right-branch samples and improve the
        // mean terminal position strictly
        let right: Vec<usize> =
            (0..two.fresh.rows()).filter(|&s| !two.moving_left[s]).collect();
        let overtaken = right.iter().filter(|&&s| two.overtaken[s]).count();
        assert!(
            overtaken as f64 >= 0.9 * right.len() as f64,
            "P=2 overtook on only {overtaken}/{} right-branch samples",
            right.len()
        );
        assert!(
            two.report.objective_stats.mean > one.report.objective_stats.mean + 1.0,
            "P=2 mean {} should clearly exceed P=1 mean {}",
            two.report.objective_stats.mean,
            one.report.objective_stats.mean
        );
    }

    #[test]
    fn overtaking_training_samples_are_all_satisfied() {
        let cfg = mini_overtaking(2);
        let outcome = run_case_study_2(&cfg, None).unwrap();
        let setup = build_car(&cfg).unwrap();
        let training = sample_overtaking(&cfg, cfg.k_phi, cfg.seed);
        let viol = empirical_violation(
            &outcome.policy,
            &setup.sys,
            &setup.formula,
            &setup.props,
            &setup.x0,
            Some(&setup.x_set),
            Some(&setup.u_set),
            &training,
            1e-6,
        )
        .unwrap();
        assert_eq!(viol.eps_hat_phi, 0.0);
        assert!(viol.eps_hat_s <= 1e-9);
        assert_eq!(viol.out_of_partition, 0);
    }

    #[test]
    fn refining_the_left_branch_never_hurts_the_mean() {
        let three = run_case_study_2(&mini_overtaking(3), None).unwrap();
        let two = run_case_study_2(&mini_overtaking(2), None).unwrap();
        assert!(
            three.report.objective_stats.mean >= two.report.objective_stats.mean - 1e-6,
            "P=3 mean {} dropped below P=2 mean {}",
            three.report.objective_stats.mean,
            two.report.objective_stats.mean
        );
    }

    #[test]
    fn desk_scale_guard_rejects_oversized_instances() {
        let mut cfg = desk_turning();
        cfg.n = 9;
        assert!(matches!(run_case_study_1(&cfg, None), Err(Error::Parameter(_))));
        let mut cfg = desk_turning();
        cfg.k_phi = 500;
        assert!(matches!(build_car(&cfg), Err(Error::Parameter(_))));
        // mismatched kinds are rejected
        assert!(matches!(
            run_case_study_2(&desk_turning(), None),
            Err(Error::Parameter(_))
        ));
    }
}
