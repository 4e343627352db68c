//! Penalized null controls: HUM for the backward system and the weighted auxiliary problem.
//!
//! Both are linear–quadratic problems in a control living on G₀ at tree nodes. The reduced
//! normal operators are applied with one backward and one forward sweep and solved by
//! conjugate gradient; the transpose contract between the sweeps makes them symmetric.

use crate::backward::{solve_backward, BackwardState, Control, NodeValues};
use crate::coefficients::{CoefficientSet, Expr, VectorField};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ForwardTrajectory, Propagator};
use crate::linalg::conjugate_gradient;
use crate::noise::{NoiseSource, NoiseTree};
use crate::weights::{active_levels, CarlemanWeights, TimeClamp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Flat coordinates of a control: G₀ nodes at every node of levels `lo..=hi`.
struct Layout {
    lo: usize,
    hi: usize,
    g0: Vec<usize>,
    offsets: Vec<usize>,
    len: usize,
}

impl Layout {
    fn new(noise: &dyn NoiseSource, mask: &[bool], lo: usize, hi: usize) -> Self {
        let g0: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        let mut offsets = vec![0; noise.n_steps() + 2];
        let mut len = 0;
        for l in lo..=hi {
            offsets[l] = len;
            len += noise.level_len(l) * g0.len();
        }
        Layout { lo, hi, g0, offsets, len }
    }

    fn index(&self, level: usize, k: usize, j: usize) -> usize {
        self.offsets[level] + k * self.g0.len() + j
    }

    fn to_control(&self, flat: &[f64], noise: &dyn NoiseSource, n: usize) -> Control {
        Control::from_fn(noise, n, |l, k| {
            let mut v = vec![0.0; n];
            if l >= self.lo && l <= self.hi {
                for (j, &i) in self.g0.iter().enumerate() {
                    v[i] = flat[self.index(l, k, j)];
                }
            }
            v
        })
    }

    fn gather(&self, values: &NodeValues, noise: &dyn NoiseSource) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for l in self.lo..=self.hi {
            for k in 0..noise.level_len(l) {
                for (j, &i) in self.g0.iter().enumerate() {
                    out[self.index(l, k, j)] = values[l][k][i];
                }
            }
        }
        out
    }

    /// Quadrature weights `Δt · p(node) · w_G(i)` of the control inner product.
    fn weights(&self, noise: &dyn NoiseSource, dt: f64, bulk_weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for l in self.lo..=self.hi {
            for k in 0..noise.level_len(l) {
                let p = noise.prob(l, k);
                for (j, &i) in self.g0.iter().enumerate() {
                    out[self.index(l, k, j)] = dt * p * bulk_weights[i];
                }
            }
        }
        out
    }
}

fn weighted(w: &[f64]) -> impl Fn(&[f64], &[f64]) -> f64 + '_ {
    move |a, b| a.iter().zip(b).zip(w).map(|((x, y), w)| w * x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumOptions {
    /// Relative residual target of conjugate gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation of the fallback fixed-point iteration.
    pub picard_relaxation: f64,
    pub picard_max_iter: usize,
    /// Target of the fixed-point residual ρ.
    pub optimality_tol: f64,
}

impl Default for HumOptions {
    fn default() -> Self {
        HumOptions { tol: 1e-14, max_iter: 2000, picard_relaxation: 0.5, picard_max_iter: 2000, optimality_tol: 1e-8 }
    }
}

/// Terminal data and dynamics of the penalized problem `min ½‖u‖² + (1/2ε)|y(0)|²`.
pub struct PenalizedProblem<'a> {
    pub prop: &'a Propagator,
    pub tree: &'a NoiseTree,
    /// One state per leaf.
    pub terminal: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ControlResult {
    pub eps: f64,
    #[serde(skip)]
    pub u: Control,
    /// 𝔼-norm of (y(0), y_Γ(0)).
    pub y0_norm: f64,
    /// 𝔼 ∫_{Q₀} u² (right-endpoint rule in time).
    pub u_norm_sq: f64,
    pub terminal_norm: f64,
    pub objective: f64,
    /// ρ = |u + 1_{G₀} z_ε| / |u|.
    pub optimality_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: String,
    pub condition_estimate: f64,
}

struct HumOps<'a> {
    prob: &'a PenalizedProblem<'a>,
    layout: Layout,
    weights: Vec<f64>,
    zero_terminal: Vec<Vec<f64>>,
}

impl<'a> HumOps<'a> {
    fn new(prob: &'a PenalizedProblem<'a>) -> Self {
        let mesh = &prob.prop.mesh;
        let nt = prob.tree.n_steps();
        let layout = Layout::new(prob.tree, &mesh.control_mask, 1, nt);
        let weights = layout.weights(prob.tree, prob.prop.dt(), &mesh.bulk_weights);
        let zero_terminal = vec![vec![0.0; prob.prop.n()]; prob.tree.level_len(nt)];
        HumOps { prob, layout, weights, zero_terminal }
    }

    /// y(0) for control `u` and zero terminal data.
    fn control_to_state(&self, u: &[f64]) -> Result<Vec<f64>> {
        let c = self.layout.to_control(u, self.prob.tree, self.prob.prop.n());
        Ok(solve_backward(self.prob.prop, self.prob.tree, &self.zero_terminal, Some(&c), None)?.y[0][0].clone())
    }

    /// 1_{G₀} z on levels 1..=N for the forward solution from `z0`.
    fn observe(&self, z0: &[f64]) -> Result<Vec<f64>> {
        let traj = solve_forward(self.prob.prop, z0, None, self.prob.tree, true)?;
        Ok(self.layout.gather(&traj.levels, self.prob.tree))
    }
}

/// Solves the penalized HUM problem for one ε by conjugate gradient on
/// `u − (1/ε) 1_{G₀} z[y(0; u, 0)] = (1/ε) 1_{G₀} z[y(0; 0, y_T)]`, falling back to relaxed
/// fixed-point iteration on `u = −1_{G₀} z_ε` if CG does not converge.
pub fn hum_control(prob: &PenalizedProblem, eps: f64, opts: &HumOptions, warm: Option<&Control>) -> Result<ControlResult> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps = {eps} must be positive")));
    }
    let ops = HumOps::new(prob);
    let mesh = &prob.prop.mesh;
    let nt = prob.tree.n_steps();
    let inner = weighted(&ops.weights);
    let free = solve_backward(prob.prop, prob.tree, &prob.terminal, None, None)?;
    let y0_free = free.y[0][0].clone();
    let terminal_norm = prob.tree.expectation(nt, &|k| mesh.state_inner(&prob.terminal[k], &prob.terminal[k])).sqrt();

    let b: Vec<f64> = ops.observe(&y0_free)?.iter().map(|v| v / eps).collect();
    let apply = |u: &[f64]| -> Vec<f64> {
        let y0 = ops.control_to_state(u).expect("backward sweep");
        let z = ops.observe(&y0).expect("forward sweep");
        u.iter().zip(&z).map(|(a, b)| a - b / eps).collect()
    };
    let x0 = warm.map(|c| ops.layout.gather(&c.levels, prob.tree));
    let cg = conjugate_gradient(&apply, |r| r.to_vec(), &inner, &b, x0.as_deref(), opts.tol, opts.max_iter);

    let residual_of = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut y0 = ops.control_to_state(u)?;
        crate::linalg::axpy(1.0, &y0_free, &mut y0);
        let z0: Vec<f64> = y0.iter().map(|v| -v / eps).collect();
        let z = ops.observe(&z0)?;
        let diff: Vec<f64> = u.iter().zip(&z).map(|(a, b)| a + b).collect();
        let un = inner(u, u).sqrt();
        let rho = if un > 0.0 { inner(&diff, &diff).sqrt() / un } else { inner(&z, &z).sqrt() };
        Ok((rho, y0))
    };

    let (mut u, mut iterations, mut method) = (cg.x.clone(), cg.iterations, "conjugate-gradient".to_string());
    let (mut rho, mut y0) = residual_of(&u)?;
    if !cg.converged || rho > opts.optimality_tol {
        let omega = opts.picard_relaxation;
        let mut v = u.clone();
        let mut best = (rho, u.clone(), y0.clone());
        for it in 0..opts.picard_max_iter {
            let (r, y) = residual_of(&v)?;
            if r < best.0 {
                best = (r, v.clone(), y.clone());
            }
            if r <= opts.optimality_tol || !r.is_finite() {
                iterations += it;
                break;
            }
            let z0: Vec<f64> = y.iter().map(|x| -x / eps).collect();
            let z = ops.observe(&z0)?;
            for (vi, zi) in v.iter_mut().zip(&z) {
                *vi = (1.0 - omega) * *vi - omega * zi;
            }
        }
        if best.0 < rho {
            method = "fixed-point".into();
            rho = best.0;
            u = best.1;
            y0 = best.2;
        }
        if rho > opts.optimality_tol {
            return Err(Error::Numerical(format!(
                "penalized HUM did not converge at eps = {eps:.3e}: residual {rho:.3e}, CG relative residual {:.3e} after {} iterations, condition estimate {:.3e}",
                cg.relative_residual, cg.iterations, cg.condition_estimate
            )));
        }
    }
    let y0_sq = mesh.state_inner(&y0, &y0);
    let u_norm_sq = inner(&u, &u);
    Ok(ControlResult {
        eps,
        u: ops.layout.to_control(&u, prob.tree, prob.prop.n()),
        y0_norm: y0_sq.sqrt(),
        u_norm_sq,
        terminal_norm,
        objective: 0.5 * u_norm_sq + 0.5 * y0_sq / eps,
        optimality_residual: rho,
        iterations,
        converged: true,
        method,
        condition_estimate: cg.condition_estimate,
    })
}

/// ε-continuation: solves from the largest ε down, warm-starting each solve.
pub fn hum_continuation(prob: &PenalizedProblem, eps_schedule: &[f64], opts: &HumOptions) -> Result<Vec<ControlResult>> {
    let mut eps: Vec<f64> = eps_schedule.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    let mut out: Vec<ControlResult> = Vec::with_capacity(eps.len());
    for e in eps {
        let warm = out.last().map(|r| r.u.clone());
        out.push(hum_control(prob, e, opts, warm.as_ref())?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct NullControlReport {
    pub eps: f64,
    pub y0_ratio: f64,
    pub u_norm_sq: f64,
    pub k: f64,
    pub c: f64,
    /// e^{CK} |y_T|².
    pub bound: f64,
    pub bound_ratio: f64,
    pub threshold: f64,
    pub success: bool,
    /// Smallest C on the scan grid `0.01·j` with bound_ratio ≤ 1.
    pub smallest_c: f64,
}

/// Null-control summary: `|y(0)|/|y_T|`, the cost bound `e^{CK}|y_T|²` and the smallest
/// scanned C meeting it.
pub fn null_control_report(result: &ControlResult, k: f64, c: f64, threshold: f64) -> NullControlReport {
    let yt2 = result.terminal_norm * result.terminal_norm;
    let ratio_at = |c: f64| if yt2 > 0.0 { result.u_norm_sq / ((c * k).exp() * yt2) } else { 0.0 };
    let mut smallest_c = 0.0;
    while ratio_at(smallest_c) > 1.0 && smallest_c < 1e4 {
        smallest_c = ((smallest_c * 100.0).round() + 1.0) / 100.0;
    }
    let y0_ratio = if result.terminal_norm > 0.0 { result.y0_norm / result.terminal_norm } else { 0.0 };
    NullControlReport {
        eps: result.eps,
        y0_ratio,
        u_norm_sq: result.u_norm_sq,
        k,
        c,
        bound: (c * k).exp() * yt2,
        bound_ratio: ratio_at(c),
        threshold,
        success: y0_ratio <= threshold,
        smallest_c,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxOptions {
    pub eps: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub clamp: TimeClamp,
}

impl Default for AuxOptions {
    fn default() -> Self {
        AuxOptions { eps: 1e-2, tol: 1e-12, max_iter: 5000, clamp: TimeClamp::Steps(1) }
    }
}

/// Terms of the weighted estimate for the auxiliary controlled system, over active levels.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AuxEstimate {
    /// λ⁻³ 𝔼∫ θ⁻²φ⁻³ v²
    pub lhs_v: f64,
    /// 𝔼∫ θ⁻² r²
    pub lhs_r_bulk: f64,
    /// 𝔼∫_Σ θ⁻² r_Γ²
    pub lhs_r_surf: f64,
    /// λ⁻² 𝔼∫ θ⁻²φ⁻² |∇r|²
    pub lhs_grad_bulk: f64,
    /// λ⁻² 𝔼∫_Σ θ⁻²φ⁻² |∇_Γ r_Γ|²
    pub lhs_grad_surf: f64,
    /// λ⁻² 𝔼∫ θ⁻²φ⁻² R₁²
    pub lhs_r1: f64,
    /// λ⁻² 𝔼∫_Σ θ⁻²φ⁻² R₂²
    pub lhs_r2: f64,
    /// λ³ 𝔼∫ θ²φ³ z²
    pub rhs_bulk: f64,
    /// λ³ 𝔼∫_Σ θ²φ³ z_Γ²
    pub rhs_surf: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// 𝔼 |(r(0), r_Γ(0))|²
    pub r0_sq: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuxResult {
    pub eps: f64,
    pub estimate: AuxEstimate,
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
    pub condition_estimate: f64,
    #[serde(skip)]
    pub v: Control,
    #[serde(skip)]
    pub r: BackwardState,
}

/// `exp(lw)·x²` without forming the possibly overflowing factor.
fn wsq(lw: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        (lw + 2.0 * x.abs().ln()).exp()
    }
}

/// `exp(lw)·x` in the log domain.
fn wmul(lw: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * (lw + x.abs().ln()).exp()
    }
}

/// The auxiliary problem keeps only the principal part of the dynamics.
fn heat_coefficients(c: &CoefficientSet) -> CoefficientSet {
    CoefficientSet {
        a1: Expr::default(),
        a2: Expr::default(),
        b: VectorField::default(),
        b1: Expr::default(),
        b2: Expr::default(),
        b_gamma: VectorField::default(),
        ..c.clone()
    }
}

/// Penalized control of the auxiliary backward system sourced by `λ³θ²φ³z`, with control
/// weight `λ⁻³θ⁻²φ⁻³` and state penalty `θ_ε⁻²`. The optimality condition is
/// `v = 1_{G₀} λ³θ²φ³ q` with `q` the forward heat flow from `r(0)/ε` driven by `θ_ε⁻² r`.
pub struct AuxProblem<'a> {
    heat: Propagator,
    tree: &'a NoiseTree,
    z: &'a ForwardTrajectory,
    weights: &'a CarlemanWeights,
    eps: f64,
    lo: usize,
    hi: usize,
    ln_theta: Vec<Vec<f64>>,
    ln_phi: Vec<Vec<f64>>,
    ln_theta_eps: Vec<Vec<f64>>,
    layout: Layout,
    quad: Vec<f64>,
    log_cost: Vec<f64>,
    source: NodeValues,
    zero_terminal: Vec<Vec<f64>>,
}

impl<'a> AuxProblem<'a> {
    pub fn new(
        prop: &Propagator,
        tree: &'a NoiseTree,
        z: &'a ForwardTrajectory,
        weights: &'a CarlemanWeights,
        eps: f64,
        clamp: TimeClamp,
    ) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("eps = {eps} must be positive")));
        }
        let nt = tree.n_steps();
        if prop.grid.n_t != nt || z.levels.len() != nt + 1 || (0..=nt).any(|l| z.levels[l].len() != tree.level_len(l)) {
            return Err(Error::Tree("trajectory does not live on this tree".into()));
        }
        let heat = Propagator::new(&prop.mesh, &heat_coefficients(&prop.coeffs), &prop.grid, &prop.solver_options)?;
        let mesh = &heat.mesh;
        let n = heat.n();
        let lam = weights.lambda;
        let (lo, hi) = active_levels(&heat.grid, clamp)?;
        let active = |l: usize| l >= lo && l <= hi;
        let per_level = |f: &dyn Fn(f64, [f64; 2]) -> f64| -> Vec<Vec<f64>> {
            (0..=nt)
                .map(|l| if active(l) { mesh.nodes.iter().map(|&p| f(heat.grid.t(l), p)).collect() } else { Vec::new() })
                .collect()
        };
        let ln_theta = per_level(&|t, p| weights.ln_theta(t, p));
        let ln_phi = per_level(&|t, p| weights.ln_phi(t, p));
        let ln_theta_eps = per_level(&|t, p| weights.ln_theta_eps(t, p, eps));

        let layout = Layout::new(tree, &mesh.control_mask, lo, hi);
        let quad = layout.weights(tree, heat.dt(), &mesh.bulk_weights);
        let mut log_cost = vec![0.0; layout.len];
        for l in lo..=hi {
            for k in 0..tree.level_len(l) {
                for (j, &i) in layout.g0.iter().enumerate() {
                    log_cost[layout.index(l, k, j)] = -3.0 * lam.ln() - 2.0 * ln_theta[l][i] - 3.0 * ln_phi[l][i];
                }
            }
        }
        let mut source: NodeValues = vec![Vec::new(); nt + 1];
        for l in 1..=nt {
            source[l] = (0..tree.level_len(l))
                .map(|k| {
                    if active(l) {
                        (0..n).map(|i| wmul(3.0 * lam.ln() + 2.0 * ln_theta[l][i] + 3.0 * ln_phi[l][i], z.levels[l][k][i])).collect()
                    } else {
                        vec![0.0; n]
                    }
                })
                .collect();
        }
        let zero_terminal = vec![vec![0.0; n]; tree.level_len(nt)];
        Ok(AuxProblem { heat, tree, z, weights, eps, lo, hi, ln_theta, ln_phi, ln_theta_eps, layout, quad, log_cost, source, zero_terminal })
    }

    fn active(&self, l: usize) -> bool {
        l >= self.lo && l <= self.hi
    }

    /// The state `r` for control `v` (flat), with or without the `z` source.
    fn state(&self, v: Option<&[f64]>, with_source: bool) -> Result<BackwardState> {
        let c = v.map(|v| self.layout.to_control(v, self.tree, self.heat.n()));
        solve_backward(&self.heat, self.tree, &self.zero_terminal, c.as_ref(), if with_source { Some(&self.source) } else { None })
    }

    /// Forward adjoint sweep: `1_{G₀} q⁻` on active levels.
    fn adjoint(&self, r: &BackwardState) -> Result<Vec<f64>> {
        let nt = self.tree.n_steps();
        let n = self.heat.n();
        let dt = self.heat.dt();
        let mut q_prev: Vec<Vec<f64>> = vec![r.y[0][0].iter().map(|v| v / self.eps).collect()];
        let mut pre: NodeValues = vec![Vec::new(); nt + 1];
        for lvl in 0..nt {
            let next: Result<Vec<(Vec<f64>, Vec<f64>)>> = (0..self.tree.level_len(lvl + 1))
                .into_par_iter()
                .map(|k| {
                    let p = self.tree.parent(lvl + 1, k);
                    let rhs = self.heat.explicit(lvl, self.tree.w(lvl, p), self.tree.increment(lvl + 1, k), &q_prev[p]);
                    let qm = self.heat.solve(lvl + 1, &rhs)?;
                    let mut q = qm.clone();
                    if self.active(lvl + 1) {
                        for i in 0..n {
                            q[i] += dt * wmul(-2.0 * self.ln_theta_eps[lvl + 1][i], r.y[lvl + 1][k][i]);
                        }
                    }
                    Ok((qm, q))
                })
                .collect();
            let (qm, q): (Vec<_>, Vec<_>) = next?.into_iter().unzip();
            pre[lvl + 1] = qm;
            q_prev = q;
        }
        Ok(self.layout.gather(&pre, self.tree))
    }

    /// `J_ε(v)`; controls outside G₀ or the active levels are ignored.
    pub fn objective(&self, v: &Control) -> Result<f64> {
        let flat = self.layout.gather(&v.levels, self.tree);
        let r = self.state(Some(&flat), true)?;
        let mesh = &self.heat.mesh;
        let mut j = 0.0;
        for (i, x) in flat.iter().enumerate() {
            j += 0.5 * self.quad[i] * wsq(self.log_cost[i], *x);
        }
        for l in self.lo..=self.hi {
            for k in 0..self.tree.level_len(l) {
                let p = self.tree.prob(l, k);
                let rv = &r.y[l][k];
                let mut s = 0.0;
                for i in 0..self.heat.n() {
                    let m = mesh.bulk_weights[i];
                    s += m * wsq(-2.0 * self.ln_theta_eps[l][i], rv[i]);
                }
                for (b, &i) in mesh.boundary.iter().enumerate() {
                    s += mesh.surf_weights[b] * wsq(-2.0 * self.ln_theta_eps[l][i], rv[i]);
                }
                j += 0.5 * self.heat.dt() * p * s;
            }
        }
        j += 0.5 * mesh.state_inner(&r.y[0][0], &r.y[0][0]) / self.eps;
        Ok(j)
    }

    pub fn solve(&self, tol: f64, max_iter: usize) -> Result<AuxResult> {
        let inner = weighted(&self.quad);
        let b = self.adjoint(&self.state(None, true)?)?;
        let apply = |v: &[f64]| -> Vec<f64> {
            let q = self.adjoint(&self.state(Some(v), false).expect("backward sweep")).expect("forward sweep");
            v.iter().zip(&q).zip(&self.log_cost).map(|((vi, qi), lc)| wmul(*lc, *vi) - qi).collect()
        };
        let precond = |r: &[f64]| -> Vec<f64> { r.iter().zip(&self.log_cost).map(|(ri, lc)| wmul(-lc, *ri)).collect() };
        let cg = conjugate_gradient(&apply, precond, &inner, &b, None, tol, max_iter);
        if !cg.converged {
            return Err(Error::Numerical(format!(
                "auxiliary control did not converge: relative residual {:.3e} after {} iterations, condition estimate {:.3e}",
                cg.relative_residual, cg.iterations, cg.condition_estimate
            )));
        }
        let v = cg.x;
        let r = self.state(Some(&v), true)?;
        let estimate = self.estimate(&v, &r);
        Ok(AuxResult {
            eps: self.eps,
            estimate,
            iterations: cg.iterations,
            converged: true,
            relative_residual: cg.relative_residual,
            condition_estimate: cg.condition_estimate,
            v: self.layout.to_control(&v, self.tree, self.heat.n()),
            r,
        })
    }

    fn estimate(&self, v: &[f64], r: &BackwardState) -> AuxEstimate {
        let mesh = &self.heat.mesh;
        let (tree, weights, z) = (self.tree, self.weights, self.z);
        let nt = tree.n_steps();
        let dt = self.heat.dt();
        let ln_lam = weights.lambda.ln();
        let mut est = AuxEstimate::default();
        for (i, x) in v.iter().enumerate() {
            est.lhs_v += self.quad[i] * wsq(self.log_cost[i], *x);
        }
        for l in self.lo..=self.hi {
            let t = self.heat.grid.t(l);
            let (lt, lp) = (&self.ln_theta[l], &self.ln_phi[l]);
            let lw_r = |i: usize| -2.0 * lt[i];
            let lw_big = |i: usize| -2.0 * ln_lam - 2.0 * lt[i] - 2.0 * lp[i];
            let lw_z = |i: usize| 3.0 * ln_lam + 2.0 * lt[i] + 3.0 * lp[i];
            let edge_lw = |mid| -2.0 * ln_lam - 2.0 * weights.ln_theta(t, mid) - 2.0 * weights.ln_phi(t, mid);
            for k in 0..tree.level_len(l) {
                let p = tree.prob(l, k);
                let (rv, zv) = (&r.y[l][k], &z.levels[l][k]);
                for i in 0..mesh.n_bulk() {
                    let wg = dt * p * mesh.bulk_weights[i];
                    est.lhs_r_bulk += wg * wsq(lw_r(i), rv[i]);
                    est.rhs_bulk += wg * wsq(lw_z(i), zv[i]);
                    if l < nt {
                        est.lhs_r1 += wg * wsq(lw_big(i), r.big_y[l][k][i]);
                    }
                }
                for (s, &i) in mesh.boundary.iter().enumerate() {
                    let ws = dt * p * mesh.surf_weights[s];
                    est.lhs_r_surf += ws * wsq(lw_r(i), rv[i]);
                    est.rhs_surf += ws * wsq(lw_z(i), zv[i]);
                    if l < nt {
                        est.lhs_r2 += ws * wsq(lw_big(i), r.big_y[l][k][i]);
                    }
                }
                for e in &mesh.edges {
                    est.lhs_grad_bulk += dt * p * e.volume * wsq(edge_lw(e.mid), (rv[e.j] - rv[e.i]) / e.length);
                }
                for e in &mesh.surf_edges {
                    let g = (rv[mesh.boundary[e.j]] - rv[mesh.boundary[e.i]]) / e.length;
                    est.lhs_grad_surf += dt * p * e.volume * wsq(edge_lw(e.mid), g);
                }
            }
        }
        est.lhs = est.lhs_v + est.lhs_r_bulk + est.lhs_r_surf + est.lhs_grad_bulk + est.lhs_grad_surf + est.lhs_r1 + est.lhs_r2;
        est.rhs = est.rhs_bulk + est.rhs_surf;
        est.ratio = if est.rhs > 0.0 { est.lhs / est.rhs } else { 0.0 };
        est.r0_sq = mesh.state_inner(&r.y[0][0], &r.y[0][0]);
        est
    }
}

/// Builds and solves the auxiliary problem in one call.
pub fn aux_control(
    prop: &Propagator,
    tree: &NoiseTree,
    z: &ForwardTrajectory,
    weights: &CarlemanWeights,
    opts: &AuxOptions,
) -> Result<AuxResult> {
    AuxProblem::new(prop, tree, z, weights, opts.eps, opts.clamp)?.solve(opts.tol, opts.max_iter)
}

/// `½‖u‖² + (1/2ε)|y(0)|²` for a given control.
pub fn hum_objective(prob: &PenalizedProblem, eps: f64, u: &Control) -> Result<f64> {
    let ops = HumOps::new(prob);
    let flat = ops.layout.gather(&u.levels, prob.tree);
    let y = solve_backward(prob.prop, prob.tree, &prob.terminal, Some(&ops.layout.to_control(&flat, prob.tree, prob.prop.n())), None)?;
    let y0 = &y.y[0][0];
    let u_sq = crate::linalg::weighted_dot(&ops.weights, &flat, &flat);
    Ok(0.5 * u_sq + 0.5 * prob.prop.mesh.state_inner(y0, y0) / eps)
}
