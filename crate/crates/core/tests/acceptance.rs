//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that are not met are reported, not hidden; the process exits non-zero
//! on a failed criterion only when `ASMPC_ACCEPTANCE_STRICT` is set, so the regular
//! test run stays usable while the report stays honest.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asmpc_core::bnn::{self, draw_noise, Batch, BnnModel};
use asmpc_core::config::RunConfig;
use asmpc_core::dynamics::{Dynamics, LinearModel};
use asmpc_core::harness::{self, Residual};
use asmpc_core::io;
use asmpc_core::lpv::LpvModel;
use asmpc_core::meta::{self, MetaConfig, MetaKnowledge, UpdateLaw};
use asmpc_core::pipeline::{self, Artifacts, ModelChoice};
use asmpc_core::plant::{self, BoxSet};
use asmpc_core::scenario::{self, ScenarioSet, UncertaintyBounds};
use asmpc_core::smpc::{self, diag, OcpSpec};

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Central-difference check; relative error per coordinate, floored at a small
/// fraction of the largest gradient entry so exact zeros do not divide by zero.
fn fd_max_rel_err(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize]) -> f64 {
    let h = 1e-6;
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    coords
        .iter()
        .map(|&i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

fn gradient_suite(art: &Artifacts, cfg: &RunConfig) -> Check {
    let start = Instant::now();
    let data = plant::build_mismatch_dataset(&art.data, &art.nominal.model);
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    // ELBO of the trained network on a real minibatch, all parameters.
    let batch = Batch::from_records(data.records[..32].iter()).map_err(err)?;
    let eps: Vec<Vec<f64>> = (0..2).map(|_| draw_noise(&mut rng)).collect();
    let params = art.bnn.params();
    let elbo = |p: &[f64]| {
        bnn::elbo_with_noise(&art.bnn, p, &batch, &eps, 0.05, cfg.bnn.sigma_obs)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    };
    let (_, g) = bnn::elbo_with_noise(&art.bnn, &params, &batch, &eps, 0.05, cfg.bnn.sigma_obs).map_err(err)?;
    let all: Vec<usize> = (0..params.len()).collect();
    let e_elbo = fd_max_rel_err(&elbo, &params, &g, &all);

    // Task loss through the adaptation step, w.r.t. the update law and the global head.
    let mcfg = MetaConfig { kl_weight: 1e-2, n_samples: 2, ..cfg.meta.clone() };
    let mut mk = art.meta.clone();
    let mut psi = mk.psi.to_flat();
    for v in psi.iter_mut() {
        *v += rng.random_range(-1e-3..1e-3);
    }
    mk.psi = UpdateLaw::from_flat(mcfg.window, &psi).map_err(err)?;
    let anchor = meta::valid_anchors(&data, mcfg.window, mcfg.horizon)[40];
    let teps: Vec<Vec<f64>> = (0..mcfg.noise_per_task()).map(|_| draw_noise(&mut rng)).collect();
    let tg = meta::task_loss_with_noise(&mk, None, &data, anchor, &mcfg, &teps).map_err(err)?;
    let loss_psi = |p: &[f64]| {
        let mut m = mk.clone();
        m.psi = UpdateLaw::from_flat(mcfg.window, p).expect("shape");
        meta::task_loss_with_noise(&m, None, &data, anchor, &mcfg, &teps).map(|t| t.loss).unwrap_or(f64::NAN)
    };
    let coords: Vec<usize> = (0..psi.len()).step_by(37).collect();
    let e_psi = fd_max_rel_err(&loss_psi, &psi, &tg.grad_psi, &coords);
    let w = mk.head.to_flat();
    let loss_w = |p: &[f64]| {
        let mut m = mk.clone();
        m.head = bnn::HeadPosterior::from_flat(p).expect("shape");
        meta::task_loss_with_noise(&m, None, &data, anchor, &mcfg, &teps).map(|t| t.loss).unwrap_or(f64::NAN)
    };
    let all_w: Vec<usize> = (0..w.len()).collect();
    let e_w = fd_max_rel_err(&loss_w, &w, &tg.grad_w, &all_w);

    // Penalized OCP objective with the fitted nominal model and three scenarios.
    let spec = OcpSpec::default();
    let scen = scenario::generate([0.01, -0.02], [0.005, 0.01], &[3.0], UncertaintyBounds::default()).map_err(err)?;
    let x0 = [-1.0, 5.0];
    let z: Vec<f64> = (0..spec.dim(3)).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (_, gz) = smpc::objective_grad(&spec, &art.nominal.model, &scen, x0, &z, 1e4).map_err(err)?;
    let obj = |z: &[f64]| smpc::objective_value(&spec, &art.nominal.model, &scen, x0, z, 1e4).unwrap_or(f64::NAN);
    let all_z: Vec<usize> = (0..z.len()).collect();
    let e_ocp = fd_max_rel_err(&obj, &z, &gz, &all_z);

    let secs = start.elapsed().as_secs_f64();
    let worst = e_elbo.max(e_psi).max(e_w).max(e_ocp);
    Ok((
        worst < 1e-4 && secs < 30.0,
        format!(
            "max rel err ELBO {e_elbo:.1e}, update law {e_psi:.1e}, global head {e_w:.1e}, OCP {e_ocp:.1e}; {secs:.1} s"
        ),
    ))
}

fn moment_matching(art: &Artifacts) -> Check {
    let p = scenario::moment_match_probs(&[3.0]).map_err(err)?;
    let exact = [8.0 / 9.0, 1.0 / 18.0, 1.0 / 18.0];
    let p_err = p.iter().zip(exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..200 {
        let stats = if trial < 20 {
            let r = &art.data.records[trial * 37];
            art.bnn.mc_stats(r.x, r.u, 50, trial as u64).map_err(err)?
        } else {
            let draws: Vec<[f64; 2]> = (0..50)
                .map(|_| [rng.random_range(-0.05..0.05), rng.random_range(-0.2..0.2)])
                .collect();
            bnn::sample_stats(&draws)
        };
        let s = scenario::generate(stats.mean, stats.std, &[3.0], UncertaintyBounds([10.0, 10.0])).map_err(err)?;
        for j in 0..2 {
            let mean: f64 = s.values.iter().zip(&s.probs).map(|(v, p)| p * v[j]).sum();
            let var: f64 = s.values.iter().zip(&s.probs).map(|(v, p)| p * (v[j] - stats.mean[j]).powi(2)).sum();
            worst = worst.max((mean - stats.mean[j]).abs()).max((var - stats.std[j].powi(2)).abs());
        }
    }
    Ok((
        p_err <= 1e-12 && worst <= 1e-12,
        format!("probabilities off by {p_err:.1e}; worst mean/variance mismatch {worst:.1e} over 200 ensembles"),
    ))
}

fn degenerate_posterior(art: &Artifacts) -> Check {
    let mut sharp = art.bnn.clone();
    let mut head = sharp.head.clone();
    head.rho_w.iter_mut().flatten().for_each(|r| *r = -1e4);
    head.rho_b.iter_mut().for_each(|r| *r = -1e4);
    sharp.head = head;
    let ann = &art.bnn;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for i in 0..1000 {
        let x = [rng.random_range(-5.0..3.0), rng.random_range(0.0..10.0)];
        let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let w = bnn::sample_head(&sharp.theta(), &draw_noise(&mut rng));
        let sampled = sharp.forward(x, u, &w);
        let stats = sharp.mc_stats(x, u, 4, i).map_err(err)?;
        let reference = ann.forward_mean(x, u);
        if sampled != reference || stats.mean != reference || stats.std != [0.0, 0.0] {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/1000 inputs differ from the mean network")))
}

fn nominal_model(cfg: &RunConfig) -> Check {
    let start = Instant::now();
    let (data, _) = pipeline::collect(cfg).map_err(err)?;
    let fit = pipeline::fit_nominal(cfg, &data).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let b = fit.bfr.0;
    Ok((
        b[0] >= 85.0 && b[1] >= 85.0 && secs < 10.0,
        format!(
            "one-step BFR x1 {:.2}%, x2 {:.2}% on {} test records; {secs:.2} s",
            b[0],
            b[1],
            fit.test_idx.len()
        ),
    ))
}

fn grid_best(spec: &OcpSpec, f: &LpvModel, scen: &ScenarioSet, x0: [f64; 2], w: f64) -> f64 {
    let grid: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
    let quad = |m: &[f64; 4], v: [f64; 2]| v[0] * (m[0] * v[0] + m[1] * v[1]) + v[1] * (m[2] * v[0] + m[3] * v[1]);
    // Squared distance outside the state box, summed over axes.
    let pen = |x: [f64; 2]| {
        (0..2)
            .map(|a| {
                let d = (spec.state_box.lo[a] - x[a]).max(x[a] - spec.state_box.hi[a]).max(0.0);
                d * d
            })
            .sum::<f64>()
    };
    let mut best = f64::INFINITY;
    for &a0 in &grid {
        for &b0 in &grid {
            let u0 = [a0, b0];
            let mut total = 0.0;
            for (g, p) in scen.values.iter().zip(&scen.probs) {
                let step = |x: [f64; 2], u: [f64; 2]| {
                    let y = f.eval(x, u);
                    [y[0] + g[0], y[1] + g[1]]
                };
                let x1 = step(x0, u0);
                let head = p * (quad(&spec.q, x0) + quad(&spec.r, u0)) + w * pen(x1);
                let mut tail = f64::INFINITY;
                for &a1 in &grid {
                    for &b1 in &grid {
                        let u1 = [a1, b1];
                        let x2 = step(x1, u1);
                        tail = tail.min(p * (quad(&spec.q, x1) + quad(&spec.r, u1) + quad(&spec.p, x2)) + w * pen(x2));
                    }
                }
                total += head + tail;
            }
            best = best.min(total);
        }
    }
    best
}

fn ocp_quality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let spec = OcpSpec { horizon: 2, ..OcpSpec::default() };
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..20 {
        let mut f = LpvModel::zeros();
        f.a[0] = [1.0 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.9];
        f.b[0] = [0.1 + rng.random_range(0.0..0.2), 0.0, rng.random_range(-0.05..0.05), 0.1 + rng.random_range(0.0..0.2)];
        for k in 1..3 {
            for i in 0..4 {
                f.a[k][i] = rng.random_range(-0.02..0.02);
                f.b[k][i] = rng.random_range(-0.02..0.02);
            }
        }
        let mean = [rng.random_range(-0.05..0.05), rng.random_range(-0.2..0.2)];
        let std = [rng.random_range(0.0..0.02), rng.random_range(0.0..0.08)];
        let scen = scenario::generate(mean, std, &[3.0], UncertaintyBounds::default()).map_err(err)?;
        let x0 = [rng.random_range(-5.0..3.0), rng.random_range(0.0..10.0)];
        let sol = smpc::solve(&spec, &f, &scen, x0, None).map_err(err)?;
        let best = grid_best(&spec, &f, &scen, x0, 1e6);
        worst_gap = worst_gap.max(sol.diagnostics.penalized_cost - best);
    }

    // Unconstrained two-step LQR on a linear stub, solved in closed form.
    let lin = LinearModel { a: [1.1, 0.2, -0.1, 0.9], b: [0.5, 0.0, 0.1, 0.3] };
    let wide = BoxSet::new([-1e6, -1e6], [1e6, 1e6]);
    let lspec = OcpSpec {
        horizon: 2,
        r: diag(0.5),
        state_box: wide,
        input_box: BoxSet::new([-100.0, -100.0], [100.0, 100.0]),
        tol: 1e-10,
        ..OcpSpec::default()
    };
    let x0 = [1.0, -2.0];
    let sol = smpc::solve(&lspec, &lin, &ScenarioSet::certain([0.0, 0.0]), x0, None).map_err(err)?;
    let a = nalgebra::Matrix2::from_row_slice(&lin.a);
    let b = nalgebra::Matrix2::from_row_slice(&lin.b);
    let mut gamma = nalgebra::DMatrix::<f64>::zeros(4, 4);
    gamma.view_mut((0, 0), (2, 2)).copy_from(&b);
    gamma.view_mut((2, 0), (2, 2)).copy_from(&(a * b));
    gamma.view_mut((2, 2), (2, 2)).copy_from(&b);
    let mut phi = nalgebra::DMatrix::<f64>::zeros(4, 2);
    phi.view_mut((0, 0), (2, 2)).copy_from(&a);
    phi.view_mut((2, 0), (2, 2)).copy_from(&(a * a));
    let hess = gamma.transpose() * &gamma + nalgebra::DMatrix::<f64>::identity(4, 4) * 0.5;
    let rhs = gamma.transpose() * &phi * nalgebra::DVector::from_vec(x0.to_vec());
    let u = -hess.lu().solve(&rhs).ok_or("singular LQR system")?;
    let got = [sol.u0[0], sol.u0[1], sol.tails[0][0][0], sol.tails[0][0][1]];
    let lqr_err = (0..4).map(|i| (got[i] - u[i]).abs()).fold(0.0, f64::max);
    Ok((
        worst_gap <= 1e-3 && lqr_err <= 1e-5,
        format!("worst solver − grid cost {worst_gap:.2e} over 20 instances; LQR input error {lqr_err:.1e}"),
    ))
}

fn adaptation_gain(art: &Artifacts) -> Check {
    let g = pipeline::adaptation_gain(&art.meta, &art.nominal.model, &art.heldout).map_err(err)?;
    Ok((
        g.anchors >= 100 && g.adapted_mse <= 1.05 * g.global_mse && g.adapted_mse < g.global_mse,
        format!(
            "{} held-out anchors: adapted MSE {:.3e} vs global {:.3e} (ratio {:.3})",
            g.anchors,
            g.adapted_mse,
            g.global_mse,
            g.adapted_mse / g.global_mse
        ),
    ))
}

fn closed_loop(cfg: &RunConfig, art: &Artifacts, train_secs: f64) -> Check {
    let start = Instant::now();
    let log = pipeline::run(cfg, &art.nominal.model, &art.meta, ModelChoice::Maml).map_err(err)?;
    let secs = train_secs + start.elapsed().as_secs_f64();
    let s = harness::safety_report(&log).map_err(err)?;
    let tail = harness::tail_norm(&log, 120).unwrap_or(f64::INFINITY);
    let (a, b, c) = (s.violation_fraction == 0.0, tail <= 0.2, s.containment_rate >= 0.9);
    Ok((
        a && b && c && secs < 300.0,
        format!(
            "(a) violation fraction {:.3} [{}], (b) max ‖x‖∞ for k ≥ 120 {tail:.3} [{}], (c) containment {:.3} [{}]; final state ({:.3}, {:.3}); {secs:.1} s",
            s.violation_fraction,
            ok(a),
            ok(b),
            s.containment_rate,
            ok(c),
            s.final_state[0],
            s.final_state[1],
        ),
    ))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

fn comparison(cfg: &RunConfig, art: &Artifacts) -> Check {
    let a = pipeline::run(cfg, &art.nominal.model, &art.meta, ModelChoice::Maml).map_err(err)?;
    let g = pipeline::run(cfg, &art.nominal.model, &art.meta, ModelChoice::Global).map_err(err)?;
    let c = harness::compare_runs(&a, &g).map_err(err)?;
    Ok((
        c.adaptive_cost_lower,
        format!(
            "closed-loop cost maml {:.3} vs global {:.3}; global reaches |x1| ≤ 0.1: {}",
            c.adaptive.closed_loop_cost, c.fixed.closed_loop_cost, c.fixed_reaches_x1_tol
        ),
    ))
}

fn write_all(dir: &Path, cfg: &RunConfig, art: &Artifacts) -> Result<(), String> {
    io::write_json(&dir.join("config.json"), cfg).map_err(err)?;
    io::write_dataset(&dir.join("data.csv"), &art.data).map_err(err)?;
    io::write_dataset(&dir.join("heldout.csv"), &art.heldout).map_err(err)?;
    io::write_json(&dir.join("nominal.json"), &art.nominal.model).map_err(err)?;
    io::write_json(&dir.join("bnn.json"), &art.bnn).map_err(err)?;
    io::write_json(&dir.join("meta.json"), &art.meta).map_err(err)?;
    for which in [ModelChoice::Maml, ModelChoice::Global] {
        let log = pipeline::run(cfg, &art.nominal.model, &art.meta, which).map_err(err)?;
        io::write_run_log(&dir.join(format!("run_{}.csv", which.name())), &log).map_err(err)?;
    }
    Ok(())
}

fn determinism(cfg: &RunConfig, art: &Artifacts) -> Check {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    write_all(a.path(), cfg, art)?;
    let again = pipeline::train_all(cfg).map_err(err)?;
    write_all(b.path(), cfg, &again)?;
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .map_err(err)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.path().join(n)).ok() != std::fs::read(b.path().join(n)).ok())
        .collect();
    Ok((
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", names.len()),
    ))
}

fn null_law(cfg: &RunConfig, art: &Artifacts) -> Check {
    let mut mk: MetaKnowledge = art.meta.clone();
    mk.psi = UpdateLaw::zeros(mk.window());
    let global: BnnModel = mk.global_model();
    let a = harness::run_closed_loop(Residual::Adaptive(&mk), &art.nominal.model, &cfg.closed_loop).map_err(err)?;
    let g = harness::run_closed_loop(Residual::Fixed(&global), &art.nominal.model, &cfg.closed_loop).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let (pa, pg) = (dir.path().join("a.csv"), dir.path().join("g.csv"));
    io::write_run_log(&pa, &a).map_err(err)?;
    io::write_run_log(&pg, &g).map_err(err)?;
    let same_bytes = std::fs::read(&pa).map_err(err)? == std::fs::read(&pg).map_err(err)?;
    let same_steps = a.steps == g.steps;
    Ok((
        same_bytes && same_steps && a.steps.len() == cfg.closed_loop.steps,
        format!("{} steps; logs identical: {}", a.steps.len(), same_bytes && same_steps),
    ))
}

fn main() {
    let cfg = RunConfig::default();
    let t = Instant::now();
    let trained = pipeline::train_all(&cfg);
    let train_secs = t.elapsed().as_secs_f64();
    let art = match &trained {
        Ok(a) => Some(a),
        Err(e) => {
            println!("training pipeline failed: {e}");
            None
        }
    };
    let needs = |f: &dyn Fn(&Artifacts) -> Check| match art {
        Some(a) => f(a),
        None => Err("no trained artifacts".into()),
    };
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient suite", needs(&|a| gradient_suite(a, &cfg))),
        ("moment matching", needs(&moment_matching)),
        ("zero-variance posterior equals mean network", needs(&degenerate_posterior)),
        ("nominal model fit", nominal_model(&cfg)),
        ("OCP solver quality", ocp_quality()),
        ("adaptation gain", needs(&adaptation_gain)),
        ("closed-loop run from (-1, 5)", needs(&|a| closed_loop(&cfg, a, train_secs))),
        ("adaptive vs fixed comparison", needs(&|a| comparison(&cfg, a))),
        ("pipeline determinism", needs(&|a| determinism(&cfg, a))),
        ("null update law equals fixed model", needs(&|a| null_law(&cfg, a))),
    ];
    let mut passed = 0;
    for (i, (name, outcome)) in criteria.iter().enumerate() {
        let (pass, detail) = match outcome {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        passed += pass as usize;
        println!("{} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {passed}/{} criteria met", criteria.len());
    if passed < criteria.len() && std::env::var_os("ASMPC_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
