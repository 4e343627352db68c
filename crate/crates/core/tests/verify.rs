mod common;

use common::*;
use stochdyn::coefficients::Expr;
use stochdyn::forward::{solve_forward, Propagator};
use stochdyn::linalg::SolverOptions;
use stochdyn::verify::*;
use stochdyn::weights::{make_psi, CarlemanWeights, TimeClamp};

fn weights(s: &Setup) -> CarlemanWeights {
    CarlemanWeights::new(make_psi(&s.geometry, &s.geometry.control).unwrap(), 2.0, 4.0, 1.0).unwrap()
}

#[test]
fn carleman_terms_vanish_for_zero_data() {
    let s = interval(17, 6, "zero");
    let rep = verify_carleman(&s.prop, &weights(&s), &[4.0, 8.0], &[vec![0.0; 17]], None, &s.tree, TimeClamp::Steps(1), 2.0).unwrap();
    for r in &rep.rows {
        assert_eq!([r.lhs_bulk_z, r.lhs_surf_z, r.lhs_bulk_grad, r.lhs_surf_grad, r.rhs_control, r.ratio], [0.0; 6]);
    }
}

#[test]
fn carleman_terms_are_quadratic_in_the_data() {
    let s = disk(4, 12, 6, "zero");
    let z0 = nodal(&s.mesh, |p| 1.0 + p[0] * p[1] + p[0]);
    let z3: Vec<f64> = z0.iter().map(|v| 3.0 * v).collect();
    let w = weights(&s);
    let a = verify_carleman(&s.prop, &w, &[3.0, 6.0], &[z0], None, &s.tree, TimeClamp::Steps(1), 0.0).unwrap();
    let b = verify_carleman(&s.prop, &w, &[3.0, 6.0], &[z3], None, &s.tree, TimeClamp::Steps(1), 0.0).unwrap();
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        assert!(rel_diff(9.0 * ra.lhs_bulk_z, rb.lhs_bulk_z) < 1e-12);
        assert!(rel_diff(9.0 * ra.lhs_surf_grad, rb.lhs_surf_grad) < 1e-12);
        assert!(rel_diff(9.0 * ra.rhs_control, rb.rhs_control) < 1e-12);
        assert!(rel_diff(ra.ratio, rb.ratio) < 1e-12);
        assert!(!ra.below_threshold);
    }
}

#[test]
fn observability_constant_grows_for_short_horizons() {
    let s = interval(17, 4, "zero");
    let ensemble = vec![nodal(&s.mesh, |p| (3.0 * p[0]).cos()), nodal(&s.mesh, |_| 1.0)];
    let rep = verify_observability(&s.mesh, &s.coeffs, &[0.25, 0.5, 1.0], &ensemble, &SolverOptions::default(), &ObservabilityOptions { n_t: 4, ..Default::default() }).unwrap();
    assert!(rep.increasing_as_t_decreases);
    for r in &rep.rows {
        assert!(r.c_obs >= r.ensemble_max && r.c_obs.is_finite());
        assert!(r.pencil_max.is_some_and(|p| p >= r.ensemble_max * (1.0 - 1e-10)));
    }
}

#[test]
fn dissipation_constant_is_stable_and_scale_free() {
    let run = |nt: usize, scale: f64| {
        let mut s = interval(17, nt, "zero");
        s.coeffs.a1 = Expr::constant(1.0);
        let prop = Propagator::new(&s.mesh, &s.coeffs, &s.grid, &SolverOptions::default()).unwrap();
        let z0 = nodal(&s.mesh, |p| scale * (1.0 + p[0]));
        let traj = solve_forward(&prop, &z0, None, &s.tree, false).unwrap();
        verify_dissipation(&s.coeffs, &s.mesh, &s.grid, &traj, &s.tree)
    };
    let base = run(6, 1.0);
    assert_eq!(base.r2, 1.0);
    assert!(base.finite && base.monotone);
    let c = base.c_max.unwrap();
    assert!(c <= 1.0);
    assert!(rel_diff(run(6, 3.0).c_max.unwrap(), c) < 1e-12);
    let fine = run(12, 1.0).c_max.unwrap();
    assert!(rel_diff(fine, c) < 0.1, "{c} vs {fine}");
}

#[test]
fn transpose_defect_is_round_off() {
    let s = interval(9, 3, "constant");
    assert!(transpose_defect(&s.prop, &s.tree).unwrap() < 1e-13);
}
