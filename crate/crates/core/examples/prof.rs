use tlsyn::milp::{solve_lp, solve_with_row_generation, MilpBackend, ReferenceSolver};
use tlsyn::policy::{Partition, PolicySpec, RecourseSpec};
use tlsyn::scenario::{
    assemble_scenario_program, ObjectiveSpec, ScenarioProblem, StageCost,
};
use tlsyn::studies::{build_car, sample_turning, CaseConfig, Scale};

fn main() {
    let mut cfg = CaseConfig::turning(Scale::Desk, 7);
    cfg.n = 4;
    cfg.k_phi = 25;
    cfg.k_s = 10;
    cfg.fresh = 400;
    let setup = build_car(&cfg).unwrap();
    let dim = (cfg.n + 1) * 3;
    let policy_spec = PolicySpec::new(2, 3, cfg.n, cfg.memory, Partition::trivial(dim)).unwrap();
    let stage_cost =
        StageCost { x_terms: vec![(cfg.n, vec![-1.0, 0.0, 0.0, 0.0])], u_terms: vec![] };
    let prob = ScenarioProblem {
        sys: setup.sys.clone(),
        formula: setup.formula.clone(),
        props: setup.props.clone(),
        x0: setup.x0.clone(),
        policy: policy_spec.clone(),
        recourse: RecourseSpec::trivial(dim),
        x_set: Some(setup.x_set.clone()),
        u_set: Some(setup.u_set.clone()),
        objective: ObjectiveSpec::SampleAverage(stage_cost),
        h_bound: 50.0,
        tol: 1e-6,
        sparse_states: false,
    };
    let training = sample_turning(&cfg, cfg.k_phi + cfg.k_s, cfg.seed);
    let asm = assemble_scenario_program(&prob, &training, cfg.k_phi, cfg.k_s).unwrap();
    println!(
        "model: vars {} rows {} binaries {}",
        asm.model.n_vars(),
        asm.model.rows.len(),
        asm.model.n_binaries()
    );
    // root LP relaxation (binaries relaxed) through the public dispatcher
    let mut relaxed = asm.model.clone();
    for b in relaxed.binary.iter_mut() {
        *b = false;
    }
    let t0 = std::time::Instant::now();
    match solve_lp(&relaxed) {
        Ok(s) => println!(
            "root lp: obj {} infeas {:.3e} in {:?}",
            s.objective,
            relaxed.infeasibility(&s.x),
            t0.elapsed()
        ),
        Err(e) => println!("root lp: error {e:?} in {:?}", t0.elapsed()),
    }
    let t1 = std::time::Instant::now();
    // ground truth: constant hard-braking policy, u1 = -5, u2 = 0
    {
        use nalgebra::DMatrix;
        use tlsyn::logic::eval_bounded;
        use tlsyn::logic::Trajectory;
        use tlsyn::policy::PolicyParam;
        for level in [-3.1f64, -3.5, -4.0, -4.3, -4.6, -5.0] {
            let mask = policy_spec.causality_mask();
            let mut h = DMatrix::zeros(mask.nrows(), mask.ncols());
            for t in 0..cfg.n {
                h[(2 * t, 0)] = level;
            }
            let pol = PolicyParam::new(policy_spec.clone(), h).unwrap();
            let mut sat = 0usize;
            let mut in_sets = 0usize;
            let mut both = 0usize;
            for k in 0..training.rows() {
                let ws = training.stages(k);
                let (us, _) = pol.evaluate(&training.stacked(k));
                let xs = setup.sys.simulate(&setup.x0, &us, &ws).unwrap();
                let traj = Trajectory::new(xs.clone(), ws.clone()).unwrap();
                let f = eval_bounded(&setup.formula, &traj, &setup.props, 0, 1e-6).unwrap();
                if f {
                    sat += 1;
                }
                let ok_x = xs.iter().all(|x| setup.x_set.contains(x, 1e-9));
                let ok_u = us.iter().all(|u| setup.u_set.contains(u, 1e-9));
                if ok_x && ok_u {
                    in_sets += 1;
                    if f {
                        both += 1;
                    }
                }
            }
            println!(
                "braking {level}: {sat}/{} formula, {in_sets} sets, {both} both",
                training.rows()
            );
        }
    }
    // which truck-box faces does braking -4 violate, per sample and step?
    {
        use nalgebra::DMatrix;
        let mask = policy_spec.causality_mask();
        let mut h = DMatrix::zeros(mask.nrows(), mask.ncols());
        for t in 0..cfg.n {
            h[(2 * t, 0)] = -4.0;
        }
        let pol = tlsyn::policy::PolicyParam::new(policy_spec.clone(), h).unwrap();
        let prop = &setup.props["truck"];
        for t in 0..=cfg.n {
            let mut common: u32 = 0xF;
            let mut masks = Vec::new();
            for k in 0..training.rows() {
                let ws = training.stages(k);
                let (us, _) = pol.evaluate(&training.stacked(k));
                let xs = setup.sys.simulate(&setup.x0, &us, &ws).unwrap();
                let (pm, rho) = prop.evaluate(&ws[t]);
                let mut viol: u32 = 0;
                for r in 0..pm.nrows() {
                    let lhs: f64 = (0..pm.ncols()).map(|c| pm[(r, c)] * xs[t][c]).sum();
                    if lhs > rho[r] + 2e-6 {
                        viol |= 1 << r;
                    }
                }
                common &= viol;
                masks.push(viol);
            }
            println!("t={t}: common faces {common:04b} masks {:?}", &masks[..8.min(masks.len())]);
        }
    }
    // pin H to the -4 braking policy and ask the solver for the rest
    {
        let mut pinned = asm.model.clone();
        let mask = policy_spec.causality_mask();
        let mut entries = Vec::new();
        for r in 0..mask.nrows() {
            for c in 0..mask.ncols() {
                if mask[(r, c)] {
                    entries.push((r, c));
                }
            }
        }
        for (idx, &(r, c)) in entries.iter().enumerate() {
            let v = if c == 0 && r % 2 == 0 { -4.0 } else { 0.0 };
            pinned.lower[idx] = v;
            pinned.upper[idx] = v;
        }
        // pin the binaries: select face 2 at every time step
        let delta0 = entries.len() + asm.template.n_z;
        for ar in &asm.template.atom_rows {
            let v = if ar.row == 2 { 0.0 } else { 1.0 };
            pinned.lower[delta0 + ar.delta] = v;
            pinned.upper[delta0 + ar.delta] = v;
        }
        println!("template: n_z {} n_delta {}", asm.template.n_z, asm.template.n_delta);
        // hand-built candidate: z = 1 everywhere, pinned H and deltas
        let mut cand = vec![0.0; pinned.n_vars()];
        for (idx, &(r, c)) in entries.iter().enumerate() {
            cand[idx] = if c == 0 && r % 2 == 0 { -4.0 } else { 0.0 };
        }
        for z in 0..asm.template.n_z {
            cand[entries.len() + z] = 1.0;
        }
        for ar in &asm.template.atom_rows {
            cand[delta0 + ar.delta] = if ar.row == 2 { 0.0 } else { 1.0 };
        }
        let mut worst: Vec<(f64, usize)> = pinned
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| (row.slack(&cand), i))
            .filter(|(sl, _)| *sl < -1e-9)
            .collect();
        worst.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        println!("violated rows: {}", worst.len());
        for &(sl, i) in worst.iter().take(6) {
            println!(
                "  slack {sl:.4e} row {i} group {:?} sense {:?} rhs {:.4} coeffs {:?}",
                pinned.rows[i].group,
                pinned.rows[i].sense,
                pinned.rows[i].rhs,
                &pinned.rows[i].coeffs[..pinned.rows[i].coeffs.len().min(8)]
            );
        }
        let backend = ReferenceSolver::default();
        match solve_with_row_generation(&pinned, &backend) {
            Ok(sol) => println!(
                "pinned braking policy: feasible, obj {} infeas {:.3e}",
                sol.objective,
                pinned.infeasibility(&sol.x)
            ),
            Err(e) => println!("pinned braking policy: error {e:?}"),
        }
    }
    let backend = ReferenceSolver::default();
    match solve_with_row_generation(&asm.model, &backend) {
        Ok(s) => println!(
            "milp: obj {} nodes {} infeas {:.3e} in {:?}",
            s.objective,
            s.nodes,
            asm.model.infeasibility(&s.x),
            t1.elapsed()
        ),
        Err(e) => println!("milp: error {e:?} in {:?}", t1.elapsed()),
    }
}
