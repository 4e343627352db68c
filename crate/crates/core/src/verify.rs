//! Empirical checks of the weighted (Carleman) estimate, the observability constant and its
//! small-T shape, energy dissipation, and forward/backward duality.

use crate::backward::{duality_residual, solve_backward, Control, DualityTerms, NodeValues};
use crate::coefficients::{cost_constant_k, dissipation_rate, lambda_min, CoefficientSet};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ForwardTrajectory, Propagator, SourceSet};
use crate::geometry::{Mesh, TimeGrid};
use crate::linalg::SolverOptions;
use crate::noise::{build_tree, NoiseSource, NoiseTree};
use crate::weights::{active_levels, CarlemanWeights, TimeClamp};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Weighted-estimate terms for one λ. Every term is multiplied by `exp(-log_scale)` so that
/// large λ does not underflow; the ratio is unaffected.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CarlemanRow {
    pub lambda: f64,
    /// λ is below the configured threshold λ₁; the row is still computed.
    pub below_threshold: bool,
    pub log_scale: f64,
    /// Ensemble member attaining the largest ratio.
    pub member: usize,
    pub lhs_bulk_z: f64,
    pub lhs_surf_z: f64,
    pub lhs_bulk_grad: f64,
    pub lhs_surf_grad: f64,
    pub rhs_control: f64,
    pub rhs_source: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CarlemanReport {
    pub lambda_threshold: f64,
    pub active_levels: (usize, usize),
    pub general_mode: bool,
    pub rows: Vec<CarlemanRow>,
}

impl CarlemanReport {
    /// Largest ratio over the sweep divided by the ratio at the smallest λ.
    pub fn growth(&self) -> f64 {
        let first = self.rows.first().map_or(0.0, |r| r.ratio);
        let max = self.rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
        if first > 0.0 {
            max / first
        } else {
            0.0
        }
    }
}

/// `exp(lw)·x²` in the log domain.
fn wsq(lw: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        (lw + 2.0 * x.abs().ln()).exp()
    }
}

fn carleman_terms(
    mesh: &Mesh,
    grid: &TimeGrid,
    noise: &dyn NoiseSource,
    weights: &CarlemanWeights,
    (lo, hi): (usize, usize),
    traj: &ForwardTrajectory,
    sources: Option<&SourceSet>,
) -> CarlemanRow {
    let lam = weights.lambda;
    let ln_lam = lam.ln();
    let dt = grid.dt();
    let cw = mesh.control_weights();
    // α is largest at mid-horizon; shift by its maximum over nodes.
    let shift = mesh.nodes.iter().map(|&p| 2.0 * weights.ln_theta(0.5 * grid.horizon, p)).fold(f64::NEG_INFINITY, f64::max);
    let mut row = CarlemanRow { lambda: lam, log_scale: shift, ..Default::default() };
    for l in lo..=hi {
        let t = grid.t(l);
        let lt: Vec<f64> = mesh.nodes.iter().map(|&p| 2.0 * weights.ln_theta(t, p) - shift).collect();
        let lp: Vec<f64> = mesh.nodes.iter().map(|&p| weights.ln_phi(t, p)).collect();
        let edge_lw = |mid| ln_lam + 2.0 * weights.ln_theta(t, mid) - shift + weights.ln_phi(t, mid);
        let bulk_edge_lw: Vec<f64> = mesh.edges.iter().map(|e| edge_lw(e.mid)).collect();
        let surf_edge_lw: Vec<f64> = mesh.surf_edges.iter().map(|e| edge_lw(e.mid)).collect();
        let level = |k: usize| -> [f64; 7] {
            let z = &traj.levels[l][k];
            let mut a = [0.0; 7];
            for i in 0..mesh.n_bulk() {
                let lw = 3.0 * ln_lam + lt[i] + 3.0 * lp[i];
                a[0] += mesh.bulk_weights[i] * wsq(lw, z[i]);
                a[4] += cw[i] * wsq(lw, z[i]);
            }
            for (s, &i) in mesh.boundary.iter().enumerate() {
                a[1] += mesh.surf_weights[s] * wsq(3.0 * ln_lam + lt[i] + 3.0 * lp[i], z[i]);
            }
            for (e, lw) in mesh.edges.iter().zip(&bulk_edge_lw) {
                a[2] += e.volume * wsq(*lw, (z[e.j] - z[e.i]) / e.length);
            }
            for (e, lw) in mesh.surf_edges.iter().zip(&surf_edge_lw) {
                a[3] += e.volume * wsq(*lw, (z[mesh.boundary[e.j]] - z[mesh.boundary[e.i]]) / e.length);
            }
            if let Some(src) = sources {
                let w = noise.w(l, k);
                for (i, &p) in mesh.nodes.iter().enumerate() {
                    let f = src.f.eval(t, p);
                    a[5] += mesh.bulk_weights[i]
                        * (wsq(lt[i], src.f0.eval(t, p, w))
                            + wsq(2.0 * ln_lam + lt[i] + 2.0 * lp[i], src.f1.eval(t, p, w))
                            + wsq(2.0 * ln_lam + lt[i] + 2.0 * lp[i], f[0].hypot(f[1])));
                }
                for (s, &i) in mesh.boundary.iter().enumerate() {
                    let p = mesh.nodes[i];
                    let f = src.f_gamma.eval(t, p);
                    a[5] += mesh.surf_weights[s]
                        * (wsq(lt[i], src.f0_gamma.eval(t, p, w))
                            + wsq(2.0 * ln_lam + lt[i] + 2.0 * lp[i], src.f1_gamma.eval(t, p, w))
                            + wsq(2.0 * ln_lam + lt[i] + 2.0 * lp[i], f[0].hypot(f[1])));
                }
            }
            a
        };
        let mut acc = [0.0; 7];
        for k in 0..noise.level_len(l) {
            let p = noise.prob(l, k);
            for (x, y) in acc.iter_mut().zip(level(k)) {
                *x += dt * p * y;
            }
        }
        row.lhs_bulk_z += acc[0];
        row.lhs_surf_z += acc[1];
        row.lhs_bulk_grad += acc[2];
        row.lhs_surf_grad += acc[3];
        row.rhs_control += acc[4];
        row.rhs_source += acc[5];
    }
    let lhs = row.lhs_bulk_z + row.lhs_surf_z + row.lhs_bulk_grad + row.lhs_surf_grad;
    let rhs = row.rhs_control + row.rhs_source;
    row.ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
    row
}

/// Sweeps λ over `lambdas` for every initial state in `ensemble` and reports, per λ, the
/// member with the largest LHS/RHS ratio. With `sources` the forward system is driven by them
/// and the RHS gains their weighted norms; without, the RHS is the control-region term alone.
pub fn verify_carleman(
    prop: &Propagator,
    weights: &CarlemanWeights,
    lambdas: &[f64],
    ensemble: &[Vec<f64>],
    sources: Option<&SourceSet>,
    noise: &dyn NoiseSource,
    clamp: TimeClamp,
    lambda_threshold: f64,
) -> Result<CarlemanReport> {
    if ensemble.is_empty() || lambdas.is_empty() {
        return Err(Error::Invalid("empty ensemble or lambda sweep".into()));
    }
    let range = active_levels(&prop.grid, clamp)?;
    let trajs: Vec<ForwardTrajectory> =
        ensemble.par_iter().map(|z0| solve_forward(prop, z0, sources, noise, false)).collect::<Result<_>>()?;
    let rows: Vec<CarlemanRow> = lambdas
        .par_iter()
        .map(|&lam| -> Result<CarlemanRow> {
            let w = weights.with_lambda(lam)?;
            let mut best: Option<CarlemanRow> = None;
            for (m, traj) in trajs.iter().enumerate() {
                let mut row = carleman_terms(&prop.mesh, &prop.grid, noise, &w, range, traj, sources);
                row.member = m;
                if best.as_ref().is_none_or(|b| row.ratio > b.ratio) {
                    best = Some(row);
                }
            }
            let mut row = best.expect("non-empty ensemble");
            row.below_threshold = lam < lambda_threshold;
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(CarlemanReport { lambda_threshold, active_levels: range, general_mode: sources.is_some(), rows })
}

/// λ₁ for the given coefficients and generic constant C.
pub fn carleman_threshold(coeffs: &CoefficientSet, mesh: &Mesh, grid: &TimeGrid, c: f64) -> f64 {
    lambda_min(&coeffs.sup_norms(mesh, grid), grid.horizon, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservabilityOptions {
    pub n_t: usize,
    /// Add the maximal generalized eigenvalue of the dense (terminal, observation) pencil
    /// when the state has at most this many nodes.
    pub max_pencil_dim: usize,
    /// Replace the terminal energy by `𝔼∫_{T/4}^{3T/4}|z|²`.
    pub truncate: bool,
}

impl Default for ObservabilityOptions {
    fn default() -> Self {
        ObservabilityOptions { n_t: 6, max_pencil_dim: 300, truncate: false }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservabilityRow {
    pub horizon: f64,
    pub c_obs: f64,
    pub ensemble_max: f64,
    pub pencil_max: Option<f64>,
    pub k: f64,
    /// Members whose observation fell below 1e-14.
    pub excluded: usize,
}

/// Least-squares fit of `ln C_obs = p + q/T`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ObservabilityFit {
    pub p: f64,
    pub q: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservabilityReport {
    pub rows: Vec<ObservabilityRow>,
    pub fit: Option<ObservabilityFit>,
    /// C_obs strictly increases as T decreases.
    pub increasing_as_t_decreases: bool,
}

struct Quadratures {
    terminal: f64,
    observed: f64,
}

fn observation_level_range(grid: &TimeGrid, truncate: bool) -> Vec<usize> {
    (1..=grid.n_t).filter(|&l| !truncate || (grid.t(l) >= 0.25 * grid.horizon && grid.t(l) <= 0.75 * grid.horizon)).collect()
}

fn quadratures(prop: &Propagator, noise: &dyn NoiseSource, a: &ForwardTrajectory, b: &ForwardTrajectory, truncate: bool) -> Quadratures {
    let mesh = &prop.mesh;
    let nt = noise.n_steps();
    let dt = prop.dt();
    let cw = mesh.control_weights();
    let terminal = if truncate {
        observation_level_range(&prop.grid, true)
            .into_iter()
            .map(|l| dt * noise.expectation(l, &|k| mesh.state_inner(&a.levels[l][k], &b.levels[l][k])))
            .sum()
    } else {
        noise.expectation(nt, &|k| mesh.state_inner(&a.levels[nt][k], &b.levels[nt][k]))
    };
    let observed = (1..=nt)
        .map(|l| dt * noise.expectation(l, &|k| crate::linalg::weighted_dot(&cw, &a.levels[l][k], &b.levels[l][k])))
        .sum();
    Quadratures { terminal, observed }
}

/// `λ_max` of `top x = λ obs x` through the Cholesky factor of `obs`.
fn pencil_max(top: DMatrix<f64>, obs: DMatrix<f64>) -> Result<f64> {
    let n = obs.nrows();
    let scale = (0..n).map(|i| obs[(i, i)]).fold(0.0, f64::max);
    let chol = obs
        .clone()
        .cholesky()
        .or_else(|| (obs + DMatrix::identity(n, n) * (1e-14 * scale)).cholesky())
        .ok_or_else(|| Error::Numerical("observation Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    let li = l.clone().try_inverse().ok_or_else(|| Error::Numerical("singular observation factor".into()))?;
    let m = &li * top * li.transpose();
    let sym = (&m + m.transpose()) * 0.5;
    Ok(sym.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Estimates the observability constant for each horizon on a full tree of depth
/// `opts.n_t`, then fits its small-T shape.
pub fn verify_observability(
    mesh: &Mesh,
    coeffs: &CoefficientSet,
    horizons: &[f64],
    ensemble: &[Vec<f64>],
    solver: &SolverOptions,
    opts: &ObservabilityOptions,
) -> Result<ObservabilityReport> {
    if ensemble.is_empty() {
        return Err(Error::Invalid("empty ensemble".into()));
    }
    let rows: Vec<ObservabilityRow> = horizons
        .iter()
        .map(|&horizon| -> Result<ObservabilityRow> {
            let grid = TimeGrid::new(horizon, opts.n_t)?;
            let prop = Propagator::new(mesh, coeffs, &grid, solver)?;
            let tree = build_tree(opts.n_t, horizon, false)?;
            let quotients: Vec<Option<f64>> = ensemble
                .par_iter()
                .map(|z0| -> Result<Option<f64>> {
                    let traj = solve_forward(&prop, z0, None, &tree, true)?;
                    let q = quadratures(&prop, &tree, &traj, &traj, opts.truncate);
                    Ok((q.observed >= 1e-14).then(|| q.terminal / q.observed))
                })
                .collect::<Result<_>>()?;
            let excluded = quotients.iter().filter(|q| q.is_none()).count();
            let ensemble_max = quotients.iter().flatten().cloned().fold(0.0, f64::max);
            let pencil = if mesh.n_bulk() <= opts.max_pencil_dim { Some(observability_pencil(&prop, &tree, opts.truncate)?) } else { None };
            let c_obs = ensemble_max.max(pencil.unwrap_or(0.0));
            let k = cost_constant_k(&coeffs.sup_norms(mesh, &grid), horizon);
            Ok(ObservabilityRow { horizon, c_obs, ensemble_max, pencil_max: pencil, k, excluded })
        })
        .collect::<Result<_>>()?;
    let fit = fit_inverse_time(&rows);
    let mut sorted: Vec<&ObservabilityRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.horizon.total_cmp(&b.horizon));
    let increasing_as_t_decreases = sorted.windows(2).all(|w| w[0].c_obs > w[1].c_obs);
    Ok(ObservabilityReport { rows, fit, increasing_as_t_decreases })
}

/// Largest observability quotient over all initial states, from forward solves of a basis.
pub fn observability_pencil(prop: &Propagator, tree: &NoiseTree, truncate: bool) -> Result<f64> {
    let n = prop.n();
    let basis: Vec<ForwardTrajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            solve_forward(prop, &e, None, tree, true)
        })
        .collect::<Result<_>>()?;
    let entries: Vec<(usize, usize, Quadratures)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i..n).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, quadratures(prop, tree, &basis[i], &basis[j], truncate)))
        .collect();
    let mut top = DMatrix::zeros(n, n);
    let mut obs = DMatrix::zeros(n, n);
    for (i, j, q) in entries {
        top[(i, j)] = q.terminal;
        top[(j, i)] = q.terminal;
        obs[(i, j)] = q.observed;
        obs[(j, i)] = q.observed;
    }
    pencil_max(top, obs)
}

fn fit_inverse_time(rows: &[ObservabilityRow]) -> Option<ObservabilityFit> {
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.c_obs > 0.0).map(|r| (1.0 / r.horizon, r.c_obs.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let q = sxy / sxx;
    let p = my - q * mx;
    let ss_res: f64 = pts.iter().map(|pt| (pt.1 - p - q * pt.0).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Some(ObservabilityFit { p, q, r2 })
}

#[derive(Clone, Debug, Serialize)]
pub struct DissipationReport {
    pub r2: f64,
    /// 𝔼|(z, z_Γ)(t_n)|² per level.
    pub energies: Vec<f64>,
    /// Smallest c with E(T) ≤ e^{c (T − t_n) r₂} E(t_n), for n < N; absent when r₂ = 0 or E(t_n) = 0.
    pub constants: Vec<Option<f64>>,
    pub c_max: Option<f64>,
    /// Largest relative step increase max(E_{n+1}/E_n − 1, 0).
    pub max_increase: f64,
    pub monotone: bool,
    pub finite: bool,
}

/// Relative slack for the per-step monotonicity test (round-off on a stationary state).
pub const MONOTONE_SLACK: f64 = 1e-12;

/// Energy profile of a trajectory against the exponential bound with rate r₂.
pub fn verify_dissipation(coeffs: &CoefficientSet, mesh: &Mesh, grid: &TimeGrid, traj: &ForwardTrajectory, noise: &dyn NoiseSource) -> DissipationReport {
    let r2 = dissipation_rate(&coeffs.sup_norms(mesh, grid));
    let nt = noise.n_steps();
    let energies: Vec<f64> = (0..=nt).map(|l| traj.mean_energy(mesh, noise, l)).collect();
    let e_final = energies[nt];
    let constants: Vec<Option<f64>> = (0..nt)
        .map(|n| (r2 > 0.0 && energies[n] > 0.0 && e_final > 0.0).then(|| (e_final / energies[n]).ln() / ((grid.horizon - grid.t(n)) * r2)))
        .collect();
    let c_max = constants.iter().flatten().cloned().reduce(f64::max);
    let max_increase = energies.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] - 1.0 } else if w[1] > 0.0 { f64::INFINITY } else { 0.0 }).fold(0.0, f64::max);
    let finite = energies.iter().all(|e| e.is_finite()) && constants.iter().flatten().all(|c| c.is_finite());
    DissipationReport { r2, energies, constants, c_max, max_increase, monotone: max_increase <= MONOTONE_SLACK, finite }
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityReport {
    pub terms: DualityTerms,
    /// Largest entrywise mismatch between the backward map and the transpose of the forward
    /// map, relative to the largest entry.
    pub transpose_defect: Option<f64>,
}

/// Relative entrywise defect between `y_T ↦ M y(0)` and the adjoint of `z₀ ↦ z(T)` on a tree.
pub fn transpose_defect(prop: &Propagator, tree: &NoiseTree) -> Result<f64> {
    let n = prop.n();
    let nt = tree.n_steps();
    let leaves = tree.level_len(nt);
    let mesh = &prop.mesh;
    let fwd: Vec<ForwardTrajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            solve_forward(prop, &e, None, tree, true)
        })
        .collect::<Result<_>>()?;
    let pair_mass: Vec<f64> = (0..n).map(|i| {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        mesh.state_inner(&e, &e)
    }).collect();
    let rows: Vec<(f64, f64)> = (0..leaves * n)
        .into_par_iter()
        .map(|idx| -> Result<(f64, f64)> {
            let (k, j) = (idx / n, idx % n);
            let mut terminal = vec![vec![0.0; n]; leaves];
            terminal[k][j] = 1.0;
            let y0 = solve_backward(prop, tree, &terminal, None, None)?.y[0][0].clone();
            let mut defect: f64 = 0.0;
            let mut size: f64 = 0.0;
            for i in 0..n {
                let a = pair_mass[i] * y0[i];
                let b = tree.prob(nt, k) * pair_mass[j] * fwd[i].levels[nt][k][j];
                defect = defect.max((a - b).abs());
                size = size.max(a.abs()).max(b.abs());
            }
            Ok((defect, size))
        })
        .collect::<Result<_>>()?;
    let defect = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let size = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(if size > 0.0 { defect / size } else { 0.0 })
}

/// Duality residual for seeded random initial state, terminal data, control and source.
pub fn verify_duality(prop: &Propagator, tree: &NoiseTree, seed: u64, with_transpose: bool) -> Result<DualityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = prop.n();
    let nt = tree.n_steps();
    let mut random = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let z0 = random(n);
    let terminal: Vec<Vec<f64>> = (0..tree.level_len(nt)).map(|_| random(n)).collect();
    let mut control_levels: NodeValues = vec![Vec::new(); nt + 1];
    let mut source: NodeValues = vec![Vec::new(); nt + 1];
    for l in 0..=nt {
        control_levels[l] = (0..tree.level_len(l)).map(|_| random(n)).collect();
        source[l] = (0..tree.level_len(l)).map(|_| random(n)).collect();
    }
    let control = Control { levels: control_levels };
    let fwd = solve_forward(prop, &z0, None, tree, true)?;
    let bwd = solve_backward(prop, tree, &terminal, Some(&control), Some(&source))?;
    let terms = duality_residual(prop, tree, &fwd, &bwd, Some(&control), Some(&source))?;
    let transpose = if with_transpose { Some(transpose_defect(prop, tree)?) } else { None };
    Ok(DualityReport { terms, transpose_defect: transpose })
}
