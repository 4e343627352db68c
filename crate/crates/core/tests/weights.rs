mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochdyn::geometry::Geometry;
use stochdyn::weights::*;

fn weights(g: &Geometry, mu: f64, lambda: f64) -> CarlemanWeights {
    CarlemanWeights::new(make_psi(g, &g.control).unwrap(), mu, lambda, 1.0).unwrap()
}

#[test]
fn shifted_weight_dominates_unshifted() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for g in [Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap(), Geometry::disk(1.0, 0.0, 0.5).unwrap()] {
        let w = weights(&g, 2.0, 5.0);
        for _ in 0..1000 {
            let t: f64 = rng.random_range(1e-3..1.0 - 1e-3);
            let p = match g.domain {
                stochdyn::geometry::Domain::Interval { .. } => [rng.random_range(0.0..1.0), 0.0],
                _ => {
                    let (r, a): (f64, f64) = (rng.random_range(0.0..1.0f64).sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
                    [r * a.cos(), r * a.sin()]
                }
            };
            let eps: f64 = 10f64.powf(rng.random_range(-6.0..0.0));
            // α < 0, so the larger shifted denominator gives θ ≤ θ_ε, i.e. θ_ε⁻¹ ≤ θ⁻¹.
            assert!(w.alpha_eps(t, p, eps) >= w.alpha(t, p));
            // θ² θ_ε⁻² ≤ 1
            assert!(2.0 * w.ln_theta(t, p) - 2.0 * w.ln_theta_eps(t, p, eps) <= 0.0);
            assert!(w.alpha(t, p) < 0.0);
        }
    }
}

#[test]
fn weights_are_constant_on_the_boundary() {
    let s = disk(8, 24, 4, "zero");
    let w = weights(&s.geometry, 2.0, 3.0);
    for t in [0.1, 0.5, 0.9] {
        let a: Vec<f64> = s.mesh.boundary.iter().map(|&i| w.alpha(t, s.mesh.nodes[i])).collect();
        let f: Vec<f64> = s.mesh.boundary.iter().map(|&i| w.phi(t, s.mesh.nodes[i])).collect();
        let spread = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread(&a) <= 1e-14 * a[0].abs().max(1.0));
        assert!(spread(&f) <= 1e-14 * f[0].abs().max(1.0));
        assert!((f[0] - 1.0 / (t * (1.0 - t))).abs() < 1e-12 * f[0]);
    }
}

#[test]
fn evaluation_at_time_boundary_is_flagged() {
    let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
    let w = weights(&g, 2.0, 10.0);
    let v = eval_weights(&w, 0.0, [0.5, 0.0]).unwrap();
    assert!(v.at_time_boundary && v.theta == 0.0);
    assert!(eval_weights(&w, 1.5, [0.5, 0.0]).is_err());
    let small = eval_weights(&w, 1e-4, [0.5, 0.0]).unwrap();
    assert!(small.theta < 1e-300);
    let mid = eval_weights(&w, 0.5, [0.5, 0.0]).unwrap();
    assert!((mid.phi - 4.0 * 0.5f64.exp()).abs() < 1e-12);
}

#[test]
fn lambda_and_mu_must_exceed_one() {
    let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
    let psi = make_psi(&g, &g.control).unwrap();
    assert!(CarlemanWeights::new(psi.clone(), 1.0, 2.0, 1.0).is_err());
    assert!(CarlemanWeights::new(psi, 2.0, 0.5, 1.0).is_err());
}
