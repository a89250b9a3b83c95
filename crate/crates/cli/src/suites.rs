//! The six verification suites.

use rand::{Rng, RngCore};
use serde_json::json;

use mfcrand::bsde::{
    bang_bang_intensity, representation_check, solve_constrained_limit, solve_penalised, MONOTONICITY_TOL,
};
use mfcrand::controls::{
    control_distance, identify_decomposed_to_flat, identify_flat_to_decomposed, ControlRef, DecomposedAction,
    DecomposedControl, FlatControl, KappaKind,
};
use mfcrand::dynamics::{
    restart_particles, restart_path, sample_particle_noise, simulate_particles_with_noise, suffix_equal,
    tree_pushforward, ParticleControl,
};
use mfcrand::randomisation::{
    approximate_control_by_ppp, estimate_approximation_distance, girsanov_weight, sample_b_path, ConstantIntensity,
    IntensityControl, LogisticIntensity, PerStepIntensity,
};
use mfcrand::rng::{mean_se, replicate, stream};
use mfcrand::value::{
    dpp_check, instance_value_direct, intro_example, mc_tree_consistency, restriction_check, value_randomised_mc,
    value_report, Instance, SuiteSettings,
};
use mfcrand::Error;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::report::{Check, SuiteOutput, Table};

pub const SUITES: [&str; 6] = ["equivalence", "bsde", "dpp", "example", "girsanov", "approx"];

/// Independent seed for one experiment, derived from the run seed.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    stream(seed, tag).next_u64()
}

fn kinds(cfg: &ExperimentConfig) -> Result<[KappaKind; 2], CliError> {
    let parse = |i: usize| {
        KappaKind::parse(&cfg.lambda.kinds[i]).map_err(|_| CliError::Config {
            path: format!("lambda.kinds[{i}]"),
            message: format!("unknown κ construction `{}`", cfg.lambda.kinds[i]),
        })
    };
    Ok([parse(0)?, parse(1)?])
}

pub fn run_suite(name: &str, cfg: &ExperimentConfig, insts: &[Instance]) -> Result<SuiteOutput, CliError> {
    match name {
        "equivalence" => equivalence(cfg, insts),
        "bsde" => bsde(cfg, insts),
        "dpp" => dpp(cfg, insts),
        "example" => example(cfg),
        "girsanov" => girsanov(cfg, insts),
        "approx" => approx(cfg, insts),
        other => Err(CliError::Config {
            path: "subcommand".into(),
            message: format!("unknown suite `{other}`"),
        }),
    }
}

fn max_of(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

fn random_action<R: Rng>(inst: &Instance, k: usize, rng: &mut R) -> DecomposedAction {
    let n = inst.actions.len();
    let values = (0..inst.tree.atom_count(k)).map(|_| rng.random_range(0..n)).collect();
    DecomposedAction::new(&inst.tree, k, values).expect("one action per atom")
}

/// A decomposed control with independent uniform actions at every node.
pub fn random_control<R: Rng>(inst: &Instance, rng: &mut R) -> DecomposedControl {
    let mut draw = |k: usize, _node: usize| random_action(inst, k, rng);
    DecomposedControl::from_fn(&inst.tree, &mut draw).expect("well-formed random control")
}

/// A decomposed control whose action on step `k ≥ 1` is already fixed at
/// `t_{k-1}`: a lifted action of `𝒜_{t_{k-1}}` chosen per parent node.
pub fn random_lagged_control<R: Rng>(inst: &Instance, rng: &mut R) -> DecomposedControl {
    let tree = &inst.tree;
    let nb = tree.b_branching();
    let mut per_parent: Vec<Vec<DecomposedAction>> = Vec::new();
    for k in 0..tree.steps() {
        let row = if k == 0 {
            vec![random_action(inst, 0, rng)]
        } else {
            (0..tree.node_count(k - 1))
                .map(|_| random_action(inst, k - 1, rng).lift(tree, k))
                .collect()
        };
        per_parent.push(row);
    }
    DecomposedControl::from_fn(tree, |k, node| {
        let parent = if k == 0 { 0 } else { node / nb };
        per_parent[k][parent].clone()
    })
    .expect("well-formed lagged control")
}

/// The fixed controls of the consistency and flow checks: constant first
/// action, constant last action, then random ones.
pub fn fixed_controls(inst: &Instance, count: usize, seed: u64) -> Vec<DecomposedControl> {
    let mut rng = stream(seed, 0);
    (0..count)
        .map(|i| match i {
            0 => DecomposedControl::constant(&inst.tree, 0),
            1 => DecomposedControl::constant(&inst.tree, inst.actions.len() - 1),
            _ => random_control(inst, &mut rng),
        })
        .collect()
}

/// Exact identities on every instance, plus the Monte Carlo checks.
pub fn equivalence(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<SuiteOutput, CliError> {
    let tol = &cfg.tolerances;
    let settings = SuiteSettings {
        levels: cfg.bsde.levels.clone(),
        per_mark: cfg.lambda.per_mark,
        kinds: kinds(cfg)?,
    };
    let mut table = Table::new(
        "equivalence",
        &[
            "instance",
            "v_direct",
            "v_bsde_limit",
            "v_bsde_richardson",
            "equivalence_residual",
            "alpha_residual",
            "lambda_residual",
            "max_dpp_residual",
            "law_invariance_residual",
            "restart_residual",
        ],
    );
    let mut reports = Vec::new();
    for inst in insts {
        let r = value_report(inst, &settings)?;
        table.push(vec![
            r.instance.label.clone().into(),
            r.v_direct.into(),
            r.v_bsde_limit.into(),
            r.v_bsde_richardson.into(),
            r.equivalence_residual.into(),
            r.alpha_residual.into(),
            r.lambda_residual.into(),
            max_of(r.dpp_residuals.iter().map(|x| x.1)).into(),
            r.law_invariance_residual.into(),
            r.restart_residual.into(),
        ]);
        reports.push(r);
    }
    let worst = |f: fn(&mfcrand::value::ValueReport) -> f64| max_of(reports.iter().map(f));
    let mut checks = vec![
        Check::at_most("equivalence", worst(|r| r.equivalence_residual), tol.equivalence),
        Check::at_most("initial-action independence", worst(|r| r.alpha_residual), tol.alpha),
        Check::at_most("lambda independence", worst(|r| r.lambda_residual), tol.lambda),
        Check::at_most("law invariance", worst(|r| r.law_invariance_residual), tol.law_invariance),
        Check::at_most("restart consistency", worst(|r| r.restart_residual), tol.restart),
    ];

    let (mc_table, mc_check) = mc_values(cfg, insts, &reports.iter().map(|r| r.v_direct).collect::<Vec<_>>())?;
    checks.push(mc_check);
    let (cons_table, cons_check) = mc_consistency(cfg, insts)?;
    checks.push(cons_check);
    let (flow_table, flow_checks) = flow(cfg, insts)?;
    checks.extend(flow_checks);
    let (iso_table, iso_checks) = identification(cfg, insts)?;
    checks.extend(iso_checks);

    Ok(SuiteOutput {
        suite: "equivalence".into(),
        results: json!({ "reports": reports }),
        tables: vec![table, mc_table, cons_table, flow_table, iso_table],
        checks,
        attachments: Vec::new(),
    })
}

/// Tilted particle estimates over `ν ≡ 1`, two constants and bang-bang
/// intensities of pilot solves; the best must not beat the value.
pub fn mc_values(cfg: &ExperimentConfig, insts: &[Instance], v_direct: &[f64]) -> Result<(Table, Check), CliError> {
    let mc = &cfg.mc;
    let kind = kinds(cfg)?[0];
    let mut table = Table::new("mc", &["instance", "intensity", "mean", "se", "v_direct"]);
    let mut worst_excess = f64::NEG_INFINITY;
    for (i, inst) in insts.iter().enumerate() {
        let lam = inst.lambda(kind, mc.lambda_per_mark)?;
        let rand = inst.randomisation(&lam)?;
        let mt = inst.mark_tree(inst.steps())?;
        let mut owned: Vec<Box<dyn IntensityControl>> = vec![
            Box::new(ConstantIntensity(1.0)),
            Box::new(ConstantIntensity(0.1)),
            Box::new(ConstantIntensity(10.0)),
        ];
        for &n in &mc.pilot_levels {
            let pilot = solve_penalised(&mt, &lam, n, 0, mt.terminal())?;
            owned.push(Box::new(bang_bang_intensity(&mt, &pilot, n, mc.pilot_floor)?));
        }
        let family: Vec<&dyn IntensityControl> = owned.iter().map(|b| b.as_ref()).collect();
        let seed = sub_seed(cfg.run.seed, 100 + i as u64);
        let v = value_randomised_mc(inst, &rand, 0, &family, mc.particles, mc.reps, seed)?;
        for e in &v.entries {
            table.push(vec![
                inst.descriptor.label.clone().into(),
                e.name.clone().into(),
                e.mean.into(),
                e.se.into(),
                v_direct[i].into(),
            ]);
        }
        worst_excess = worst_excess.max((v.best - v_direct[i]) / v.best_se.max(f64::MIN_POSITIVE));
    }
    let check = Check::at_most("randomised value below direct value (SE units)", worst_excess, cfg.tolerances.mc_se);
    Ok((table, check))
}

/// Exact tree value of fixed controls against particle estimates.
pub fn mc_consistency(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<(Table, Check), CliError> {
    let mc = &cfg.mc;
    let mut table = Table::new("mc_consistency", &["instance", "control", "tree", "mc", "se", "z"]);
    let mut worst: f64 = 0.0;
    for (i, inst) in insts.iter().enumerate() {
        let controls = fixed_controls(inst, mc.consistency_controls, sub_seed(cfg.run.seed, 200 + i as u64));
        for (c, ctl) in controls.iter().enumerate() {
            let seed = sub_seed(cfg.run.seed, 300 + (i * 16 + c) as u64);
            let r = mc_tree_consistency(inst, ctl, mc.consistency_particles, mc.consistency_reps, seed)?;
            let z = (r.mc - r.tree).abs() / r.se.max(f64::MIN_POSITIVE);
            worst = worst.max(z);
            table.push(vec![
                inst.descriptor.label.clone().into(),
                c.into(),
                r.tree.into(),
                r.mc.into(),
                r.se.into(),
                z.into(),
            ]);
        }
    }
    Ok((table, Check::at_most("particle/tree consistency (SE units)", worst, cfg.tolerances.mc_se)))
}

/// Restarting from an intermediate step reproduces the suffix bit for bit,
/// on the tree and on particles with the same noise.
pub fn flow(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<(Table, Vec<Check>), CliError> {
    let mut table = Table::new("flow", &["instance", "control", "engine", "s", "bit_equal"]);
    let (mut tree_ok, mut particles_ok) = (true, true);
    for (i, inst) in insts.iter().enumerate() {
        let controls = fixed_controls(inst, cfg.mc.consistency_controls, sub_seed(cfg.run.seed, 200 + i as u64));
        for (c, ctl) in controls.iter().enumerate() {
            let path = tree_pushforward(&inst.tree, inst.coeffs.as_ref(), &inst.actions, &inst.xi, ctl)?;
            let mut rng = stream(sub_seed(cfg.run.seed, 400 + i as u64), c as u64);
            let (roots, w_edges) = sample_particle_noise(&inst.tree, 256, &mut rng);
            let b = sample_b_path(&inst.tree, &mut rng);
            let pctl = ParticleControl::Decomposed(ctl);
            let particles = simulate_particles_with_noise(
                &inst.tree,
                inst.coeffs.as_ref(),
                &inst.actions,
                &inst.xi,
                pctl,
                b,
                roots,
                w_edges,
            )?;
            for s in 0..=inst.steps() {
                let restarted = restart_path(&inst.tree, inst.coeffs.as_ref(), &inst.actions, &path, ctl, s)?;
                let eq = suffix_equal(&path, &restarted);
                tree_ok &= eq;
                table.push(vec![inst.descriptor.label.clone().into(), c.into(), "tree".into(), s.into(), eq.into()]);
                let replay = restart_particles(&inst.tree, inst.coeffs.as_ref(), &inst.actions, pctl, &particles, s)?;
                let eq = replay.states.len() == particles.states.len()
                    && replay.states[s..]
                        .iter()
                        .zip(&particles.states[s..])
                        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
                particles_ok &= eq;
                table.push(vec![
                    inst.descriptor.label.clone().into(),
                    c.into(),
                    "particles".into(),
                    s.into(),
                    eq.into(),
                ]);
            }
        }
    }
    Ok((
        table,
        vec![Check::flag("flow property on trees", tree_ok), Check::flag("flow property on particles", particles_ok)],
    ))
}

/// A flat control that reads only the node and atom at each step.
fn random_adapted_flat<R: Rng>(inst: &Instance, rng: &mut R) -> FlatControl {
    let tree = &inst.tree;
    let n = inst.actions.len();
    let table: Vec<Vec<usize>> = (0..tree.steps())
        .map(|k| (0..tree.node_count(k) * tree.atom_count(k)).map(|_| rng.random_range(0..n)).collect())
        .collect();
    FlatControl::adapted(tree, |k, v, a| table[k][v * tree.atom_count(k) + a])
}

/// Random adapted flat-control pairs: distances agree across the
/// identification and both round trips are identities.
pub fn identification(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<(Table, Vec<Check>), CliError> {
    const PAIRS: usize = 100;
    let mut table = Table::new("identification", &["instance", "pair", "d_flat", "d_decomposed", "difference"]);
    let mut worst: f64 = 0.0;
    let mut round_trips = true;
    let mut rejects_anticipating = true;
    let mut rng = stream(sub_seed(cfg.run.seed, 500), 0);
    for p in 0..PAIRS {
        let inst = &insts[p % insts.len()];
        let tree = &inst.tree;
        let f1 = random_adapted_flat(inst, &mut rng);
        let f2 = random_adapted_flat(inst, &mut rng);
        let d1 = identify_flat_to_decomposed(tree, &f1)?;
        let d2 = identify_flat_to_decomposed(tree, &f2)?;
        let flat = control_distance(tree, &inst.actions, ControlRef::Flat(&f1), ControlRef::Flat(&f2))?;
        let dec = control_distance(tree, &inst.actions, ControlRef::Decomposed(&d1), ControlRef::Decomposed(&d2))?;
        let diff = (flat - dec).abs();
        worst = worst.max(diff);
        round_trips &= identify_decomposed_to_flat(tree, &d1) == f1;
        let again = identify_flat_to_decomposed(tree, &identify_decomposed_to_flat(tree, &d1))?;
        round_trips &= (0..tree.steps())
            .all(|k| (0..tree.node_count(k)).all(|v| again.at(k, v) == d1.at(k, v)));
        // A control reading the last common edge on step 0 is not adapted.
        if tree.steps() > 1 && tree.b_branching() > 1 {
            let peek = FlatControl::from_fn(tree, |k, v, _| if k == 0 { v % 2 } else { 0 });
            rejects_anticipating &= matches!(identify_flat_to_decomposed(tree, &peek), Err(Error::NotMeasurable(_)));
        }
        table.push(vec![inst.descriptor.label.clone().into(), p.into(), flat.into(), dec.into(), diff.into()]);
    }
    Ok((
        table,
        vec![
            Check::at_most("identification isometry", worst, cfg.tolerances.isometry),
            Check::flag("identification round trips", round_trips && rejects_anticipating),
        ],
    ))
}

/// Penalised sweep, monotonicity, the constrained limit and the
/// representation over intensity grids.
pub fn bsde(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<SuiteOutput, CliError> {
    let tol = &cfg.tolerances;
    let kind = kinds(cfg)?[0];
    let levels = &cfg.bsde.levels;
    let mut summary = Table::new("bsde_summary", &["instance", "level", "y_root", "gap_to_limit"]);
    let mut repr = Table::new(
        "bsde_representation",
        &["instance", "level", "members", "max_excess", "root_gap", "max_node_gap"],
    );
    let mut attachments = Vec::new();
    let (mut violation, mut gap, mut constraint, mut excess) = (0.0f64, 0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut monotone_failures = Vec::new();
    let mut reports = Vec::new();
    for inst in insts {
        let label = &inst.descriptor.label;
        let lam = inst.lambda(kind, cfg.lambda.per_mark)?;
        let mt = inst.mark_tree(inst.steps())?;
        let (limit, sols, report) = match solve_constrained_limit(&mt, &lam, levels, 0, mt.terminal()) {
            Ok(x) => x,
            Err(Error::Monotonicity { violation: v, step, node }) => {
                violation = violation.max(v);
                monotone_failures.push(format!("{label}: step {step} node {node}"));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        violation = violation.max(report.max_violation);
        gap = gap.max(report.last_gap);
        constraint = constraint.max(report.max_u_on_support);
        for (n, y) in levels.iter().zip(&report.root_values) {
            summary.push(vec![label.clone().into(), (*n).into(), (*y).into(), (y - limit.root()).into()]);
        }
        summary.push(vec![label.clone().into(), f64::INFINITY.into(), limit.root().into(), 0.0.into()]);

        let mut nodes = Vec::new();
        for (i, sol) in sols.iter().chain(std::iter::once(&limit)).enumerate() {
            sol.write_csv(&mt, &mut nodes, i == 0)?;
        }
        attachments.push((format!("bsde_nodes_{label}.csv"), String::from_utf8(nodes).expect("ascii csv")));

        for &n in &cfg.bsde.representation_levels {
            let sol = solve_penalised(&mt, &lam, n, 0, mt.terminal())?;
            let mut owned: Vec<Box<dyn IntensityControl>> = vec![Box::new(ConstantIntensity(1.0f64.min(n)))];
            for eps in [1e-1, 1e-3, 1e-6] {
                if eps <= n {
                    owned.push(Box::new(bang_bang_intensity(&mt, &sol, n, eps)?));
                }
            }
            let grid: Vec<&dyn IntensityControl> = owned.iter().map(|b| b.as_ref()).collect();
            let r = representation_check(&mt, &lam, &sol, &grid, mt.terminal())?;
            excess = excess.max(r.max_excess);
            repr.push(vec![
                label.clone().into(),
                n.into(),
                grid.len().into(),
                r.max_excess.into(),
                r.root_gap.into(),
                r.max_node_gap.into(),
            ]);
        }
        reports.push(json!({ "instance": label, "report": report }));
    }
    let mut mono = Check::at_most("penalised monotonicity", violation, tol.monotonicity.min(MONOTONICITY_TOL));
    if !monotone_failures.is_empty() {
        mono = mono.with_note(monotone_failures.join("; "));
    }
    Ok(SuiteOutput {
        suite: "bsde".into(),
        tables: vec![summary, repr],
        checks: vec![
            mono,
            Check::at_most("largest level against the constrained limit", gap, tol.bellman_gap),
            Check::at_most("jump constraint on the support", constraint.max(0.0), tol.representation),
            Check::at_most("tilted values below the penalised solution", excess.max(0.0), tol.representation),
        ],
        attachments,
        results: json!({ "limits": reports }),
    })
}

/// Randomised dynamic programming at every grid time, and the restriction to
/// intensities that ignore the past.
pub fn dpp(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<SuiteOutput, CliError> {
    let kind = kinds(cfg)?[0];
    let mut table = Table::new("dpp", &["instance", "s", "lhs", "rhs", "residual", "best_intensity"]);
    let mut restr = Table::new(
        "restriction",
        &["instance", "s", "p_even", "sup_restricted", "sup_full", "residual"],
    );
    let (mut interior, mut ends, mut restriction) = (0.0f64, 0.0f64, 0.0f64);
    for inst in insts {
        let label = &inst.descriptor.label;
        let lam = inst.lambda(kind, cfg.lambda.per_mark)?;
        for s in 0..=inst.steps() {
            let r = dpp_check(inst, &lam, 0, s)?;
            if s > 0 && s < inst.steps() {
                interior = interior.max(r.residual);
            } else {
                ends = ends.max(r.residual);
            }
            table.push(vec![
                label.clone().into(),
                s.into(),
                r.lhs.into(),
                r.rhs.into(),
                r.residual.into(),
                r.best_intensity.into(),
            ]);
        }
        for s in 0..inst.steps() {
            let r = restriction_check(inst, kind, cfg.lambda.per_mark, 0, s)?;
            restriction = restriction.max(r.residual);
            restr.push(vec![
                label.clone().into(),
                s.into(),
                r.p_even.into(),
                r.sup_restricted.into(),
                r.sup_full.into(),
                r.residual.into(),
            ]);
        }
    }
    Ok(SuiteOutput {
        suite: "dpp".into(),
        tables: vec![table, restr],
        checks: vec![
            Check::at_most("randomised dynamic programming", interior, cfg.tolerances.dpp),
            Check::at_most("dynamic programming at the end points", ends, cfg.tolerances.dpp),
            Check::at_most("history restriction", restriction, cfg.tolerances.restriction),
        ],
        attachments: Vec::new(),
        results: json!({}),
    })
}

/// The one-dimensional counterexample on `[0, 1]`, solved by ODE over
/// one-switch bang-bang controls.
pub fn example(cfg: &ExperimentConfig) -> Result<SuiteOutput, CliError> {
    let r = intro_example(cfg.example.steps)?;
    let mut table = Table::new(
        "example",
        &[
            "convention",
            "v",
            "v_minus",
            "v_plus",
            "gap",
            "v_minus_atomwise",
            "v_plus_atomwise",
            "gap_atomwise",
            "j_all_plus",
            "claimed_v",
            "claimed_v_minus",
            "claimed_v_plus",
        ],
    );
    let mut checks = Vec::new();
    for c in &r.conventions {
        table.push(vec![
            c.convention.clone().into(),
            c.v.into(),
            c.v_minus.into(),
            c.v_plus.into(),
            c.gap.into(),
            c.v_minus_atomwise.into(),
            c.v_plus_atomwise.into(),
            c.gap_atomwise.into(),
            c.j_all_plus.into(),
            r.claimed_v.into(),
            r.claimed_v_minus.into(),
            r.claimed_v_plus.into(),
        ]);
        checks.push(Check::above(
            &format!("decoupling gap, shared control ({})", c.convention),
            c.gap,
            cfg.tolerances.intro_gap,
        ));
        checks.push(Check::above(
            &format!("decoupling gap, atomwise control ({})", c.convention),
            c.gap_atomwise,
            cfg.tolerances.intro_gap,
        ));
    }
    Ok(SuiteOutput {
        suite: "example".into(),
        tables: vec![table],
        checks,
        attachments: Vec::new(),
        results: serde_json::to_value(&r)?,
    })
}

/// Five intensity controls between the floor and the ceiling.
pub fn girsanov_family(
    cfg: &ExperimentConfig,
    inst: &Instance,
    lam: &mfcrand::controls::LambdaFamily,
) -> Result<Vec<Box<dyn IntensityControl>>, CliError> {
    let (lo, hi) = (cfg.girsanov.floor, cfg.girsanov.ceiling);
    let m = inst.steps();
    let per_step = (0..m)
        .map(|k| {
            let w = if m > 1 { k as f64 / (m - 1) as f64 } else { 0.0 };
            lo * (hi / lo).powf(w)
        })
        .collect();
    let mt = inst.mark_tree(m)?;
    let pilot = solve_penalised(&mt, lam, hi, 0, mt.terminal())?;
    Ok(vec![
        Box::new(ConstantIntensity(lo)),
        Box::new(ConstantIntensity(hi)),
        Box::new(PerStepIntensity(per_step)),
        Box::new(LogisticIntensity {
            lo,
            hi,
            theta: [0.3, -0.4, 1.0, 0.5],
        }),
        Box::new(bang_bang_intensity(&mt, &pilot, hi, lo)?),
    ])
}

/// `E[L^ν_T] = 1`: exactly on the tree and by plain Monte Carlo.
pub fn girsanov(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<SuiteOutput, CliError> {
    let g = &cfg.girsanov;
    let inst = &insts[0];
    let lam = inst.lambda(kinds(cfg)?[0], g.lambda_per_mark)?;
    let rand = inst.randomisation(&lam)?;
    let family = girsanov_family(cfg, inst, &lam)?;
    let b_probs = inst.tree.b_lattice().probs().to_vec();
    let horizon = inst.tree.grid().horizon();
    let mut table = Table::new("girsanov", &["intensity", "exact", "exact_error", "mc_mean", "mc_se", "z"]);
    let (mut exact_err, mut worst_z) = (0.0f64, 0.0f64);
    for (j, nu) in family.iter().enumerate() {
        let (exact, _) = rand.exact_moments(nu.as_ref(), &b_probs, 0)?;
        let seed = sub_seed(cfg.run.seed, 600 + j as u64);
        let samples = replicate(g.paths, seed, |_, rng| -> mfcrand::Result<f64> {
            let b = sample_b_path(&inst.tree, rng);
            let mpp = rand.sample_ppp(rng);
            girsanov_weight(&rand, nu.as_ref(), &mpp, &b, 0, horizon)
        });
        let samples: Vec<f64> = samples.into_iter().collect::<mfcrand::Result<_>>()?;
        let (mean, se) = mean_se(&samples);
        let z = (mean - 1.0).abs() / se.max(f64::MIN_POSITIVE);
        exact_err = exact_err.max((exact - 1.0).abs());
        worst_z = worst_z.max(z);
        table.push(vec![
            nu.name().into(),
            exact.into(),
            (exact - 1.0).abs().into(),
            mean.into(),
            se.into(),
            z.into(),
        ]);
    }
    Ok(SuiteOutput {
        suite: "girsanov".into(),
        tables: vec![table],
        checks: vec![
            Check::at_most("exact density mean", exact_err, cfg.tolerances.girsanov_exact),
            Check::at_most("sampled density mean (SE units)", worst_z, g.se_multiple),
        ],
        attachments: Vec::new(),
        results: json!({ "instance": inst.descriptor.label }),
    })
}

/// Distance between lagged decomposed controls and their point-process
/// approximations.
pub fn approx(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<SuiteOutput, CliError> {
    let a = &cfg.approx;
    let inst = &insts[0];
    let lam = inst.lambda(kinds(cfg)?[0], a.lambda_per_mark)?;
    let rand = inst.randomisation(&lam)?;
    let mut table = Table::new("approx", &["control", "delta", "mean", "se", "upper", "pass"]);
    let mut worst_margin = f64::NEG_INFINITY;
    let mut rng = stream(sub_seed(cfg.run.seed, 700), 0);
    for c in 0..a.controls {
        let ahat = random_lagged_control(inst, &mut rng);
        for (j, &delta) in a.deltas.iter().enumerate() {
            let approx = approximate_control_by_ppp(&inst.tree, &inst.actions, &rand, &ahat, delta, a.floor, a.ceiling)?;
            let seed = sub_seed(cfg.run.seed, 800 + (c * 8 + j) as u64);
            let (mean, se) = estimate_approximation_distance(&inst.tree, &inst.actions, &rand, &ahat, &approx, a.reps, seed)?;
            let upper = mean + a.z * se;
            worst_margin = worst_margin.max(upper / delta);
            table.push(vec![c.into(), delta.into(), mean.into(), se.into(), upper.into(), (upper < delta).into()]);
        }
    }
    let mut check = Check::at_most("approximation distance / delta at 95%", worst_margin, 1.0);
    check.pass = worst_margin < 1.0;
    check.relation = "<";
    Ok(SuiteOutput {
        suite: "approx".into(),
        tables: vec![table],
        checks: vec![check],
        attachments: Vec::new(),
        results: json!({ "instance": inst.descriptor.label }),
    })
}

/// `value_direct` and the constrained limit only, for timing.
pub fn equivalence_core(cfg: &ExperimentConfig, insts: &[Instance]) -> Result<f64, CliError> {
    let kind = kinds(cfg)?[0];
    let mut worst: f64 = 0.0;
    for inst in insts {
        let v = instance_value_direct(inst)?;
        let lam = inst.lambda(kind, cfg.lambda.per_mark)?;
        let b = mfcrand::value::value_randomised_bsde(inst, &lam, 0, &cfg.bsde.levels)?;
        worst = worst.max((b.limit - v).abs());
    }
    Ok(worst)
}
