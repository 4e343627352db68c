//! Auxiliary function ψ and the weight family α, φ, θ = e^{λα}, θ_ε.
//!
//! θ spans hundreds of orders of magnitude, so consumers work with `ln θ = λα` and combine
//! logarithms before exponentiating.

use crate::error::{Error, Result};
use crate::geometry::{Domain, Geometry, Mesh, Point, Region, TimeGrid};
use serde::{Deserialize, Serialize};

/// Closed-form ψ: `(x−a)(b−x)` on an interval, `R² − |x|²` on a disk.
#[derive(Clone, Debug, Serialize)]
pub struct AuxFunction {
    pub geometry: Geometry,
    pub g1: Region,
    /// min over Γ of −∂_ν ψ.
    pub c: f64,
    /// |ψ|_∞.
    pub max: f64,
    pub critical_point: Point,
}

/// Builds ψ for `geometry`; `g1` must contain the critical point of ψ.
pub fn make_psi(geometry: &Geometry, g1: &Region) -> Result<AuxFunction> {
    let (c, max, critical_point) = match geometry.domain {
        Domain::Interval { a, b } => (b - a, ((b - a) / 2.0).powi(2), [(a + b) / 2.0, 0.0]),
        Domain::Disk { radius } => (2.0 * radius, radius * radius, [0.0, 0.0]),
    };
    let compatible = matches!(
        (geometry.domain, g1),
        (Domain::Interval { .. }, Region::SubInterval { .. }) | (Domain::Disk { .. }, Region::Annulus { .. })
    );
    if !compatible {
        return Err(Error::Geometry("G1 kind does not match the domain".into()));
    }
    if !g1.contains(critical_point) {
        return Err(Error::Geometry(format!(
            "critical point {critical_point:?} of psi lies outside G1; grad psi would vanish off G1"
        )));
    }
    Ok(AuxFunction { geometry: *geometry, g1: *g1, c, max, critical_point })
}

impl AuxFunction {
    pub fn psi(&self, p: Point) -> f64 {
        match self.geometry.domain {
            Domain::Interval { a, b } => (p[0] - a) * (b - p[0]),
            Domain::Disk { radius } => radius * radius - p[0] * p[0] - p[1] * p[1],
        }
    }

    pub fn grad(&self, p: Point) -> Point {
        match self.geometry.domain {
            Domain::Interval { a, b } => [a + b - 2.0 * p[0], 0.0],
            Domain::Disk { .. } => [-2.0 * p[0], -2.0 * p[1]],
        }
    }

    pub fn normal_derivative(&self, p: Point, normal: Point) -> f64 {
        let g = self.grad(p);
        g[0] * normal[0] + g[1] * normal[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightValues {
    pub alpha: f64,
    pub phi: f64,
    pub theta: f64,
    /// Set for t ∈ {0, T}: θ is the limit 0 and α, φ are infinite.
    pub at_time_boundary: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CarlemanWeights {
    pub psi: AuxFunction,
    pub mu: f64,
    pub lambda: f64,
    pub horizon: f64,
}

impl CarlemanWeights {
    pub fn new(psi: AuxFunction, mu: f64, lambda: f64, horizon: f64) -> Result<Self> {
        if !(mu > 1.0) || !(lambda > 1.0) || !(horizon > 0.0) {
            return Err(Error::Invalid(format!("need mu > 1, lambda > 1, T > 0 (got {mu}, {lambda}, {horizon})")));
        }
        Ok(CarlemanWeights { psi, mu, lambda, horizon })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.psi.clone(), self.mu, lambda, self.horizon)
    }

    fn bump(&self, t: f64, eps: f64) -> f64 {
        1.0 / ((t + eps) * (self.horizon - t + eps))
    }

    /// α_ε; ε = 0 gives α.
    pub fn alpha_eps(&self, t: f64, p: Point, eps: f64) -> f64 {
        let e = (self.mu * self.psi.psi(p)).exp() - (2.0 * self.mu * self.psi.max).exp();
        e * self.bump(t, eps)
    }

    pub fn alpha(&self, t: f64, p: Point) -> f64 {
        self.alpha_eps(t, p, 0.0)
    }

    pub fn phi(&self, t: f64, p: Point) -> f64 {
        (self.mu * self.psi.psi(p)).exp() * self.bump(t, 0.0)
    }

    pub fn ln_phi(&self, t: f64, p: Point) -> f64 {
        self.mu * self.psi.psi(p) + self.bump(t, 0.0).ln()
    }

    /// ln θ = λα.
    pub fn ln_theta(&self, t: f64, p: Point) -> f64 {
        self.lambda * self.alpha(t, p)
    }

    /// ln θ_ε = λα_ε.
    pub fn ln_theta_eps(&self, t: f64, p: Point, eps: f64) -> f64 {
        self.lambda * self.alpha_eps(t, p, eps)
    }
}

/// α, φ, θ at (t, x). Times outside [0, T] are rejected; t ∈ {0, T} returns the limits.
pub fn eval_weights(w: &CarlemanWeights, t: f64, p: Point) -> Result<WeightValues> {
    if !(0.0..=w.horizon).contains(&t) || t.is_nan() {
        return Err(Error::Invalid(format!("t = {t} outside [0, {}]", w.horizon)));
    }
    if t == 0.0 || t == w.horizon {
        return Ok(WeightValues { alpha: f64::NEG_INFINITY, phi: f64::INFINITY, theta: 0.0, at_time_boundary: true });
    }
    let alpha = w.alpha(t, p);
    Ok(WeightValues { alpha, phi: w.phi(t, p), theta: (w.lambda * alpha).exp(), at_time_boundary: false })
}

/// Which interior time levels carry θ-weighted quadratures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeClamp {
    /// Skip this many steps at each end (at least one).
    Steps(usize),
    /// Skip the levels within this time of each end (at least one step).
    Time(f64),
}

impl Default for TimeClamp {
    fn default() -> Self {
        TimeClamp::Steps(1)
    }
}

/// Inclusive range of active levels.
pub fn active_levels(grid: &TimeGrid, clamp: TimeClamp) -> Result<(usize, usize)> {
    let lo = match clamp {
        TimeClamp::Steps(s) => s.max(1),
        TimeClamp::Time(tau) => ((tau / grid.dt()) - 1e-9).ceil().max(1.0) as usize,
    };
    if 2 * lo > grid.n_t {
        return Err(Error::Invalid(format!("clamp of {lo} steps leaves no interior level on {} steps", grid.n_t)));
    }
    Ok((lo, grid.n_t - lo))
}

/// Estimated constants of the weight bounds over interior grid times and mesh nodes.
#[derive(Clone, Debug, Serialize)]
pub struct WeightConstants {
    /// min φT² (the bound reads φ ≥ C T⁻²).
    pub phi_lower: f64,
    /// max |φ_t| / (Tφ²).
    pub phi_t: f64,
    /// max |α_t| / (T e^{2μ|ψ|∞} φ²).
    pub alpha_t: f64,
    /// max |(θ²φ)_t| / (Tλθ²φ³).
    pub theta2phi_t: f64,
    /// max |∇(θ²φ)| / (λθ²φ²).
    pub grad_theta2phi: f64,
}

impl WeightConstants {
    pub fn as_array(&self) -> [f64; 5] {
        [self.phi_lower, self.phi_t, self.alpha_t, self.theta2phi_t, self.grad_theta2phi]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightBoundsReport {
    pub coarse: WeightConstants,
    pub refined: WeightConstants,
    pub max_relative_change: f64,
    pub finite: bool,
    pub stable: bool,
}

fn constants_on(w: &CarlemanWeights, mesh: &Mesh, grid: &TimeGrid) -> WeightConstants {
    let tt = w.horizon;
    let e2 = (2.0 * w.mu * w.psi.max).exp();
    let mut c = WeightConstants { phi_lower: f64::INFINITY, phi_t: 0.0, alpha_t: 0.0, theta2phi_t: 0.0, grad_theta2phi: 0.0 };
    for n in 1..grid.n_t {
        let t = grid.t(n);
        let d = 1e-5 * t.min(tt - t);
        for &p in &mesh.nodes {
            let phi = w.phi(t, p);
            let phi_t = (w.phi(t + d, p) - w.phi(t - d, p)) / (2.0 * d);
            let alpha_t = (w.alpha(t + d, p) - w.alpha(t - d, p)) / (2.0 * d);
            c.phi_lower = c.phi_lower.min(phi * tt * tt);
            c.phi_t = c.phi_t.max(phi_t.abs() / (tt * phi * phi));
            c.alpha_t = c.alpha_t.max(alpha_t.abs() / (tt * e2 * phi * phi));
            let log_rate = 2.0 * w.lambda * alpha_t + phi_t / phi;
            c.theta2phi_t = c.theta2phi_t.max(log_rate.abs() / (tt * w.lambda * phi * phi));
            let g = w.psi.grad(p);
            let gn = g[0].hypot(g[1]);
            c.grad_theta2phi = c.grad_theta2phi.max(w.mu * gn * (2.0 * w.lambda * phi + 1.0) / (w.lambda * phi));
        }
    }
    c
}

/// Estimates the weight-bound constants on `grid` and on a grid with twice the steps, and
/// checks that each is finite and changes by less than 10%.
pub fn check_weight_bounds(w: &CarlemanWeights, mesh: &Mesh, grid: &TimeGrid) -> Result<WeightBoundsReport> {
    let coarse = constants_on(w, mesh, grid);
    let refined = constants_on(w, mesh, &TimeGrid::new(grid.horizon, 2 * grid.n_t)?);
    let mut change: f64 = 0.0;
    let mut finite = true;
    for (a, b) in coarse.as_array().iter().zip(refined.as_array()) {
        finite &= a.is_finite() && b.is_finite();
        let scale = a.abs().max(b.abs());
        if scale > 0.0 {
            change = change.max((a - b).abs() / scale);
        }
    }
    Ok(WeightBoundsReport { coarse, refined, max_relative_change: change, finite, stable: finite && change < 0.1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, build_mesh_polar};

    #[test]
    fn interval_psi_examples() {
        let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
        let psi = make_psi(&g, &g.control).unwrap();
        assert_eq!(psi.psi([0.5, 0.0]), 0.25);
        assert_eq!(psi.psi([0.0, 0.0]), 0.0);
        assert_eq!(psi.psi([1.0, 0.0]), 0.0);
        assert_eq!(psi.c, 1.0);
        assert!(make_psi(&g, &Region::SubInterval { lo: 0.6, hi: 0.8 }).is_err());
    }

    #[test]
    fn disk_psi_examples() {
        let g = Geometry::disk(1.0, 0.0, 0.5).unwrap();
        let psi = make_psi(&g, &g.control).unwrap();
        assert_eq!(psi.c, 2.0);
        let m = build_mesh_polar(&g, 8, 16).unwrap();
        for (&i, n) in m.boundary.iter().zip(&m.normals) {
            assert!((psi.normal_derivative(m.nodes[i], *n) + 2.0).abs() < 1e-14);
        }
        let annulus = Geometry::disk(1.0, 0.2, 0.5).unwrap();
        assert!(make_psi(&annulus, &annulus.control).is_err());
    }

    #[test]
    fn phi_at_centre() {
        let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
        let w = CarlemanWeights::new(make_psi(&g, &g.control).unwrap(), 2.0, 3.0, 1.0).unwrap();
        let v = eval_weights(&w, 0.5, [0.5, 0.0]).unwrap();
        assert!((v.phi - 4.0 * 0.5f64.exp()).abs() < 1e-12);
        assert!((v.phi - 6.5949).abs() < 1e-4);
        let b0 = eval_weights(&w, 0.3, [0.0, 0.0]).unwrap();
        let b1 = eval_weights(&w, 0.3, [1.0, 0.0]).unwrap();
        assert_eq!(b0.phi, b1.phi);
        assert!((b0.phi - 1.0 / (0.3 * 0.7)).abs() < 1e-12);
        let edge = eval_weights(&w, 0.0, [0.5, 0.0]).unwrap();
        assert!(edge.at_time_boundary && edge.theta == 0.0);
        assert!(eval_weights(&w, 1.5, [0.5, 0.0]).is_err());
        let w10 = w.with_lambda(10.0).unwrap();
        assert!(eval_weights(&w10, 1e-4, [0.5, 0.0]).unwrap().theta < 1e-300);
    }

    #[test]
    fn weight_bounds_are_stable() {
        let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
        let m = build_mesh(&g, 17).unwrap();
        let w = CarlemanWeights::new(make_psi(&g, &g.control).unwrap(), 2.0, 4.0, 1.0).unwrap();
        let r = check_weight_bounds(&w, &m, &TimeGrid::new(1.0, 40).unwrap()).unwrap();
        assert!(r.stable, "{r:?}");
        assert!(r.coarse.phi_lower >= 4.0 - 1e-12);
    }

    #[test]
    fn alpha_t_vanishes_at_mid_time() {
        let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
        let w = CarlemanWeights::new(make_psi(&g, &g.control).unwrap(), 2.0, 4.0, 1.0).unwrap();
        for x in [0.0, 0.2, 0.5, 0.9] {
            let d = 1e-6;
            let at = (w.alpha(0.5 + d, [x, 0.0]) - w.alpha(0.5 - d, [x, 0.0])) / (2.0 * d);
            assert!(at.abs() < 1e-6);
        }
    }

    #[test]
    fn clamp_ranges() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        assert_eq!(active_levels(&grid, TimeClamp::Steps(1)).unwrap(), (1, 15));
        assert_eq!(active_levels(&grid, TimeClamp::Time(0.125)).unwrap(), (2, 14));
        assert_eq!(active_levels(&grid, TimeClamp::Steps(0)).unwrap(), (1, 15));
        assert!(active_levels(&grid, TimeClamp::Steps(9)).is_err());
    }
}
