#![allow(dead_code)]

use stochdyn::coefficients::CoefficientSet;
use stochdyn::forward::Propagator;
use stochdyn::geometry::{build_mesh, build_mesh_polar, Geometry, Mesh, TimeGrid};
use stochdyn::linalg::SolverOptions;
use stochdyn::noise::{build_tree, NoiseTree};

pub struct Setup {
    pub geometry: Geometry,
    pub mesh: Mesh,
    pub coeffs: CoefficientSet,
    pub grid: TimeGrid,
    pub prop: Propagator,
    pub tree: NoiseTree,
}

pub fn setup(geometry: Geometry, mesh: Mesh, coeffs: CoefficientSet, horizon: f64, n_t: usize) -> Setup {
    let grid = TimeGrid::new(horizon, n_t).unwrap();
    let prop = Propagator::new(&mesh, &coeffs, &grid, &SolverOptions::default()).unwrap();
    let tree = build_tree(n_t, horizon, false).unwrap();
    Setup { geometry, mesh, coeffs, grid, prop, tree }
}

/// Unit interval, controlled on (0.3, 0.7).
pub fn interval(n_x: usize, n_t: usize, preset: &str) -> Setup {
    let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
    let mesh = build_mesh(&g, n_x).unwrap();
    let c = CoefficientSet::preset(preset, &g).unwrap();
    setup(g, mesh, c, 1.0, n_t)
}

/// Unit disk, controlled on the disc of radius 0.5.
pub fn disk(n_r: usize, n_theta: usize, n_t: usize, preset: &str) -> Setup {
    let g = Geometry::disk(1.0, 0.0, 0.5).unwrap();
    let mesh = build_mesh_polar(&g, n_r, n_theta).unwrap();
    let c = CoefficientSet::preset(preset, &g).unwrap();
    setup(g, mesh, c, 1.0, n_t)
}

/// Interpolates `f` at the mesh nodes.
pub fn nodal(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    mesh.nodes.iter().map(|&p| f(p)).collect()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
