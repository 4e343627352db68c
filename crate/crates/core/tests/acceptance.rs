//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test --release --test acceptance -- --nocapture` to see the lines.

mod common;

use common::*;
use std::time::Instant;
use stochdyn::coefficients::{cost_constant_k, CoefficientNorms, CoefficientSet, Expr};
use stochdyn::control::{hum_continuation, null_control_report, HumOptions, PenalizedProblem};
use stochdyn::forward::{coupled_eigenbasis, factorization_oracle, solve_forward, ForwardTrajectory, Propagator};
use stochdyn::geometry::{build_mesh, build_mesh_polar, Geometry, Mesh, TimeGrid};
use stochdyn::linalg::SolverOptions;
use stochdyn::noise::{build_tree, conditional_expectation, martingale_increment, NoiseSource, PathEnsemble};
use stochdyn::verify::{
    carleman_threshold, transpose_defect, verify_carleman, verify_dissipation, verify_duality, verify_observability,
    ObservabilityOptions,
};
use stochdyn::weights::{make_psi, CarlemanWeights, TimeClamp};

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn psi_suite() -> Outcome {
    let cases: Vec<(Geometry, Mesh)> = {
        let gi = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
        let gd = Geometry::disk(1.0, 0.0, 0.5).unwrap();
        vec![(gi, build_mesh(&gi, 65).unwrap()), (gd, build_mesh_polar(&gd, 32, 64).unwrap())]
    };
    let mut failures = Vec::new();
    let mut min_c = f64::INFINITY;
    for (g, mesh) in &cases {
        let psi = make_psi(g, &g.control).unwrap();
        let on_boundary: Vec<bool> = {
            let mut b = vec![false; mesh.n_bulk()];
            for &i in &mesh.boundary {
                b[i] = true;
            }
            b
        };
        for (i, &p) in mesh.nodes.iter().enumerate() {
            let v = psi.psi(p);
            if on_boundary[i] {
                if v.abs() > 1e-12 {
                    failures.push(format!("psi({p:?}) = {v:e} on boundary"));
                }
            } else if v <= 0.0 {
                failures.push(format!("psi({p:?}) = {v:e} in interior"));
            }
            let gr = psi.grad(p);
            if !g.control.contains(p) && gr[0].hypot(gr[1]) <= 0.0 {
                failures.push(format!("grad psi vanishes at {p:?} outside G1"));
            }
        }
        for (s, &i) in mesh.boundary.iter().enumerate() {
            let dn = psi.normal_derivative(mesh.nodes[i], mesh.normals[s]);
            min_c = min_c.min(-dn);
            if dn > -psi.c * (1.0 - 1e-12) {
                failures.push(format!("normal derivative {dn} at {:?} exceeds -c = {}", mesh.nodes[i], -psi.c));
            }
        }
    }
    outcome(failures.is_empty(), if failures.is_empty() { format!("interval n_x=65, disk 32x64; min -d_nu psi = {min_c}") } else { failures.join("; ") })
}

fn noise_exactness() -> Outcome {
    let tree = build_tree(12, 1.0, false).unwrap();
    let mut moment_err: f64 = 0.0;
    for l in 0..=12 {
        let t = l as f64 / 12.0;
        moment_err = moment_err.max(tree.expectation(l, &|k| tree.w(l, k)).abs());
        moment_err = moment_err.max((tree.expectation(l, &|k| tree.w(l, k).powi(2)) - t).abs());
    }
    // X = sin(W_T) + W_T³ on the leaves.
    let leaves: Vec<f64> = (0..tree.level_len(12)).map(|k| tree.w(12, k).sin() + tree.w(12, k).powi(3)).collect();
    let total = tree.expectation(12, &|k| leaves[k]);
    let mut values = leaves.clone();
    let mut tower_err: f64 = 0.0;
    let mut repr_err: f64 = 0.0;
    for l in (0..12).rev() {
        let parent = conditional_expectation(&tree, l, &values).unwrap();
        let z = martingale_increment(&tree, l, &values).unwrap();
        for k in 0..tree.level_len(l + 1) {
            let p = tree.parent(l + 1, k);
            let rebuilt = parent[p] + z[p] * tree.increment(l + 1, k);
            repr_err = repr_err.max((rebuilt - values[k]).abs());
        }
        tower_err = tower_err.max((tree.expectation(l, &|k| parent[k]) - total).abs());
        values = parent;
    }
    let pass = moment_err <= 1e-12 && tower_err <= 1e-14 && repr_err <= 1e-14;
    outcome(pass, format!("depth 12: moments {moment_err:.2e}, tower {tower_err:.2e}, representation {repr_err:.2e}"))
}

fn strong_error(prop: &Propagator, traj: &ForwardTrajectory, oracle: &ForwardTrajectory, noise: &dyn NoiseSource) -> f64 {
    let nt = noise.n_steps();
    noise
        .expectation(nt, &|k| {
            let d: Vec<f64> = traj.levels[nt][k].iter().zip(&oracle.levels[nt][k]).map(|(a, b)| a - b).collect();
            prop.mesh.state_inner(&d, &d)
        })
        .sqrt()
}

fn fitted_order(steps: &[usize], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn convergence_errors(coeffs: &CoefficientSet, n_paths: usize) -> (Vec<usize>, Vec<f64>) {
    let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
    let mesh = build_mesh(&g, 17).unwrap();
    let z0 = nodal(&mesh, |p| (std::f64::consts::PI * p[0]).sin() + 0.5 * p[0]);
    let finest = PathEnsemble::new(n_paths, 128, 1.0, 7).unwrap();
    let steps = vec![16, 32, 64, 128];
    let errors = steps
        .iter()
        .map(|&n| {
            let noise = finest.coarsen(128 / n).unwrap();
            let grid = TimeGrid::new(1.0, n).unwrap();
            let prop = Propagator::new(&mesh, coeffs, &grid, &SolverOptions::default()).unwrap();
            let traj = solve_forward(&prop, &z0, None, &noise, false).unwrap();
            let oracle = factorization_oracle(&prop, &z0, &noise, 1).unwrap();
            strong_error(&prop, &traj, &oracle, &noise)
        })
        .collect();
    (steps, errors)
}

fn forward_convergence() -> Outcome {
    let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
    let mut stochastic = CoefficientSet::zero(&g);
    stochastic.a2 = Expr::constant(0.5);
    stochastic.b2 = Expr::constant(0.5);
    let (steps, err_s) = convergence_errors(&stochastic, 400);
    let order_s = fitted_order(&steps, &err_s);
    let (_, err_d) = convergence_errors(&CoefficientSet::zero(&g), 1);
    let order_d = fitted_order(&steps, &err_d);
    outcome(
        order_s >= 0.4 && order_d >= 0.9,
        format!("strong order {order_s:.3} (errors {}); deterministic order {order_d:.3} (errors {})", sci(&err_s), sci(&err_d)),
    )
}

fn adjointness() -> Outcome {
    let s = interval(9, 4, "constant");
    let defect = transpose_defect(&s.prop, &s.tree).unwrap();
    let mut residual: f64 = 0.0;
    for seed in 0..5 {
        residual = residual.max(verify_duality(&s.prop, &s.tree, seed, false).unwrap().terms.residual);
    }
    let faulty = Propagator::new(&s.mesh, &s.coeffs, &s.grid, &SolverOptions::default()).unwrap().with_backward_perturbation(1e-3);
    let injected = verify_duality(&faulty, &s.tree, 0, false).unwrap().terms.residual;
    outcome(
        defect <= 1e-10 && residual <= 1e-10 && injected > 1e-6,
        format!("transpose defect {defect:.2e}, duality residual {residual:.2e}, with 1e-3 fault {injected:.2e}"),
    )
}

fn dissipation() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for s in [interval(33, 10, "zero"), disk(12, 24, 8, "zero")] {
        let z0 = nodal(&s.mesh, |p| 1.0 + p[0] * (3.0 * p[1] + 1.0).sin() + (5.0 * p[0]).cos());
        let traj = solve_forward(&s.prop, &z0, None, &s.tree, false).unwrap();
        let rep = verify_dissipation(&s.coeffs, &s.mesh, &s.grid, &traj, &s.tree);
        pass &= rep.r2 == 0.0 && rep.monotone && rep.finite;
        lines.push(format!("r2={} max step increase {:.2e}", rep.r2, rep.max_increase));
    }
    outcome(pass, lines.join("; "))
}

fn hum() -> Outcome {
    let s = interval(65, 8, "zero");
    let basis = coupled_eigenbasis(&s.mesh).unwrap();
    let mode = basis.modes[0].clone();
    let nt = s.tree.n_steps();
    let prob = PenalizedProblem { prop: &s.prop, tree: &s.tree, terminal: vec![mode; s.tree.level_len(nt)] };
    let eps = [1e-1, 1e-2, 1e-3, 1e-4];
    let res = hum_continuation(&prob, &eps, &HumOptions::default()).unwrap();
    let resid = res.iter().map(|r| r.optimality_residual).fold(0.0, f64::max);
    let scaled: Vec<f64> = res.iter().map(|r| r.y0_norm.powi(2) / r.eps).collect();
    let spread = scaled.iter().cloned().fold(0.0, f64::max) / scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let u: Vec<f64> = res.iter().map(|r| r.u_norm_sq.sqrt()).collect();
    let last = res.last().unwrap();
    let ratio = last.y0_norm / last.terminal_norm;
    // Bounded: the last decade adds less than the one before it.
    let bounded = u.iter().all(|x| x.is_finite()) && (u[3] - u[2]) <= (u[2] - u[1]).max(0.0) + 1e-12 * u[3];
    outcome(
        resid <= 1e-8 && spread < 10.0 && bounded && ratio <= 1e-2,
        format!("max residual {resid:.2e}; y0^2/eps {} (spread {spread:.2}); |u| {u:.4?}; |y0|/|yT| at 1e-4 = {ratio:.2e}", sci(&scaled)),
    )
}

fn observability() -> Outcome {
    let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
    let mesh = build_mesh(&g, 17).unwrap();
    let coeffs = CoefficientSet::zero(&g);
    let basis = coupled_eigenbasis(&mesh).unwrap();
    let mut ensemble: Vec<Vec<f64>> = basis.modes.iter().take(4).cloned().collect();
    ensemble.push(nodal(&mesh, |p| (p[0] - 0.1).max(0.0) * (0.95 - p[0]).max(0.0)));
    let rep = verify_observability(&mesh, &coeffs, &[0.2, 0.4, 0.8], &ensemble, &SolverOptions::default(), &ObservabilityOptions::default())
        .unwrap();
    let c: Vec<f64> = rep.rows.iter().map(|r| r.c_obs).collect();
    let fit = rep.fit.unwrap();
    outcome(
        c.iter().all(|x| x.is_finite() && *x > 0.0) && fit.q > 0.0 && fit.r2 >= 0.9,
        format!("C_obs {}; fit p={:.3} q={:.3} R2={:.4}", sci(&c), fit.p, fit.q, fit.r2),
    )
}

fn carleman() -> Outcome {
    let s = interval(33, 12, "zero");
    let psi = make_psi(&s.geometry, &s.geometry.control).unwrap();
    let lambda1 = carleman_threshold(&s.coeffs, &s.mesh, &s.grid, 1.0);
    let weights = CarlemanWeights::new(psi, 2.0, 2.0 * lambda1, 1.0).unwrap();
    let lambdas: Vec<f64> = [2.0, 4.0, 8.0, 16.0].iter().map(|m| m * lambda1).collect();
    let basis = coupled_eigenbasis(&s.mesh).unwrap();
    let ensemble: Vec<Vec<f64>> = vec![basis.modes[0].clone(), basis.modes[2].clone(), nodal(&s.mesh, |p| 1.0 + p[0])];
    let clamp = TimeClamp::Steps(1);
    let rep = verify_carleman(&s.prop, &weights, &lambdas, &ensemble, None, &s.tree, clamp, lambda1).unwrap();
    let scaled: Vec<Vec<f64>> = ensemble.iter().map(|z| z.iter().map(|v| 5.0 * v).collect()).collect();
    let rep5 = verify_carleman(&s.prop, &weights, &lambdas, &scaled, None, &s.tree, clamp, lambda1).unwrap();
    let homog = rep.rows.iter().zip(&rep5.rows).map(|(a, b)| rel_diff(a.ratio, b.ratio)).fold(0.0, f64::max);
    let ratios: Vec<f64> = rep.rows.iter().map(|r| r.ratio).collect();
    let growth = rep.growth();
    outcome(
        growth <= 10.0 && homog <= 1e-10 && ratios.iter().all(|r| r.is_finite() && *r > 0.0),
        format!("lambda1={lambda1}; ratios {}; growth {growth:.3}; scaling defect {homog:.1e}", sci(&ratios)),
    )
}

fn cost_constant() -> Outcome {
    let zero = CoefficientNorms::default();
    let k0 = cost_constant_k(&zero, 1.0);
    let k1 = cost_constant_k(&CoefficientNorms { a1: 1.0, ..zero }, 1.0);
    let s = interval(17, 6, "zero");
    let basis = coupled_eigenbasis(&s.mesh).unwrap();
    let nt = s.tree.n_steps();
    let prob = PenalizedProblem { prop: &s.prop, tree: &s.tree, terminal: vec![basis.modes[0].clone(); s.tree.level_len(nt)] };
    let res = hum_continuation(&prob, &[1e-2], &HumOptions::default()).unwrap();
    let rep = null_control_report(&res[0], k0, 1.0, 1e-1);
    let yt2 = res[0].terminal_norm.powi(2);
    let meets = |c: f64| rep.u_norm_sq <= (c * rep.k).exp() * yt2;
    let smallest_ok = meets(rep.smallest_c) && (rep.smallest_c == 0.0 || !meets(rep.smallest_c - 0.01));
    outcome(
        k0 == 2.0 && k1 == 4.0 && smallest_ok,
        format!("K(0,T=1)={k0}, K(|a1|=1,T=1)={k1}; smallest C={} with bound_ratio {:.3}", rep.smallest_c, rep.u_norm_sq / ((rep.smallest_c * rep.k).exp() * yt2)),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 psi suite", psi_suite),
        ("2 noise exactness", noise_exactness),
        ("3 forward convergence", forward_convergence),
        ("4 discrete adjointness", adjointness),
        ("5 pure dissipation", dissipation),
        ("6 HUM null control", hum),
        ("7 observability shape", observability),
        ("8 Carleman boundedness", carleman),
        ("9 cost-constant plumbing", cost_constant),
    ];
    let mut failed = Vec::new();
    println!();
    for (name, run) in criteria {
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
