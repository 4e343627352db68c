//! Semi-implicit time stepping of the forward bulk–surface system on any noise source.
//!
//! One step reads `(M + Δt K_{n+1}) z_{n+1} = E_n z_n + Δt g_n + ΔW h_n` with
//! `E_n = M − Δt (C_n + R_n) − ΔW N_n`: diffusion implicit, convection, reaction and the
//! Itô noise term explicit at the left endpoint.

use crate::coefficients::{CoefficientSet, Expr, VectorField};
use crate::error::{check_len, Error, Result};
use crate::geometry::{
    bulk_stiffness, convection_parts, fold_load, fold_surface, surface_stiffness, weak_divergence_load, BulkSurfaceField, Mesh,
    Point, TimeGrid,
};
use crate::linalg::{matvec, matvec_t, to_dense, Sparse, SolverOptions, SpdSolver};
use crate::noise::NoiseSource;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

struct LevelOps {
    t: f64,
    stiffness: Arc<Sparse>,
    convection: Arc<Sparse>,
    solver: Arc<SpdSolver>,
    reaction: Option<Vec<f64>>,
    noise: Option<Vec<f64>>,
}

/// Per-level operators and factorizations shared by the forward and backward solvers.
pub struct Propagator {
    pub mesh: Mesh,
    pub coeffs: CoefficientSet,
    pub grid: TimeGrid,
    pub mass: Vec<f64>,
    pub solver_options: SolverOptions,
    levels: Vec<LevelOps>,
    backward_perturbation: f64,
}

impl Propagator {
    pub fn new(mesh: &Mesh, coeffs: &CoefficientSet, grid: &TimeGrid, solver_options: &SolverOptions) -> Result<Self> {
        coeffs.validate()?;
        let dt = grid.dt();
        let mass = mesh.pair_mass();
        let stiffness_at = |t: f64| -> Result<Sparse> {
            Ok(fold_surface(mesh, &bulk_stiffness(mesh, coeffs, t)?, &surface_stiffness(mesh, coeffs, t)?))
        };
        let convection_at = |t: f64| -> Result<Sparse> {
            let (cb, cs) = convection_parts(mesh, coeffs, t)?;
            Ok(fold_surface(mesh, &cb, &cs))
        };
        let system = |k: &Sparse| -> Result<SpdSolver> {
            let mut t: Vec<(usize, usize, f64)> = k.triplet_iter().map(|(i, j, v)| (i, j, dt * v)).collect();
            for (i, m) in mass.iter().enumerate() {
                t.push((i, i, *m));
            }
            SpdSolver::new(&crate::linalg::csr_from_triplets(mesh.n_bulk(), mesh.n_bulk(), &t), solver_options)
        };
        let conv_time = [&coeffs.b.x, &coeffs.b.y, &coeffs.b_gamma.x, &coeffs.b_gamma.y].iter().any(|e| e.depends_on_time());
        let scalar_time = [&coeffs.a1, &coeffs.a2, &coeffs.b1, &coeffs.b2].iter().any(|e| e.depends_on_time());
        let mut levels: Vec<LevelOps> = Vec::with_capacity(grid.n_t + 1);
        for n in 0..=grid.n_t {
            let t = grid.t(n);
            let (stiffness, solver) = if n > 0 && !coeffs.diffusion_depends_on_time() {
                (levels[n - 1].stiffness.clone(), levels[n - 1].solver.clone())
            } else {
                let k = stiffness_at(t)?;
                let s = system(&k)?;
                (Arc::new(k), Arc::new(s))
            };
            let convection = if n > 0 && !conv_time { levels[n - 1].convection.clone() } else { Arc::new(convection_at(t)?) };
            let (reaction, noise) = if coeffs.depends_on_noise() {
                (None, None)
            } else if n > 0 && !scalar_time {
                (levels[n - 1].reaction.clone(), levels[n - 1].noise.clone())
            } else {
                (Some(coeffs.reaction_diag(mesh, t, 0.0)), Some(coeffs.noise_diag(mesh, t, 0.0)))
            };
            levels.push(LevelOps { t, stiffness, convection, solver, reaction, noise });
        }
        Ok(Propagator {
            mesh: mesh.clone(),
            coeffs: coeffs.clone(),
            grid: *grid,
            mass,
            solver_options: *solver_options,
            levels,
            backward_perturbation: 0.0,
        })
    }

    /// Perturbs the backward explicit matrix by `delta·M`; used to check that the duality
    /// residual detects a broken transpose.
    #[doc(hidden)]
    pub fn with_backward_perturbation(mut self, delta: f64) -> Self {
        self.backward_perturbation = delta;
        self
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn stiffness(&self, level: usize) -> &Sparse {
        &self.levels[level].stiffness
    }

    pub fn convection(&self, level: usize) -> &Sparse {
        &self.levels[level].convection
    }

    pub fn reaction(&self, level: usize, w: f64) -> Vec<f64> {
        match &self.levels[level].reaction {
            Some(r) => r.clone(),
            None => self.coeffs.reaction_diag(&self.mesh, self.levels[level].t, w),
        }
    }

    pub fn noise(&self, level: usize, w: f64) -> Vec<f64> {
        match &self.levels[level].noise {
            Some(r) => r.clone(),
            None => self.coeffs.noise_diag(&self.mesh, self.levels[level].t, w),
        }
    }

    /// `E_n z = M z − Δt (C_n + R_n) z − ΔW N_n z` with scalars at `(t_n, w)`.
    pub fn explicit(&self, level: usize, w: f64, dw: f64, z: &[f64]) -> Vec<f64> {
        let dt = self.dt();
        let cz = matvec(&self.levels[level].convection, z);
        let r = self.reaction(level, w);
        let nd = self.noise(level, w);
        (0..z.len()).map(|i| self.mass[i] * z[i] - dt * (cz[i] + r[i] * z[i]) - dw * nd[i] * z[i]).collect()
    }

    /// `E_nᵀ y`.
    pub fn explicit_t(&self, level: usize, w: f64, dw: f64, y: &[f64]) -> Vec<f64> {
        let dt = self.dt();
        let cy = matvec_t(&self.levels[level].convection, y);
        let r = self.reaction(level, w);
        let nd = self.noise(level, w);
        let d = self.backward_perturbation;
        (0..y.len())
            .map(|i| (1.0 + d) * self.mass[i] * y[i] - dt * (cy[i] + r[i] * y[i]) - dw * nd[i] * y[i])
            .collect()
    }

    /// Solves `(M + Δt K_level) x = rhs`.
    pub fn solve(&self, level: usize, rhs: &[f64]) -> Result<Vec<f64>> {
        self.levels[level].solver.solve(rhs)
    }

    /// `(M + Δt K_level) x`.
    pub fn apply_system(&self, level: usize, x: &[f64]) -> Vec<f64> {
        let kx = matvec(&self.levels[level].stiffness, x);
        let dt = self.dt();
        x.iter().zip(&kx).zip(&self.mass).map(|((xi, ki), m)| m * xi + dt * ki).collect()
    }

    /// Largest admissible Δt for explicit convection, `h / (2|B|∞)`; infinite without convection.
    pub fn convection_limit(&self) -> f64 {
        let norms = self.coeffs.sup_norms(&self.mesh, &self.grid);
        let b = norms.b.max(norms.b_gamma);
        if b == 0.0 {
            f64::INFINITY
        } else {
            self.mesh.h / (2.0 * b)
        }
    }

    pub fn check_stability(&self, force: bool) -> Result<()> {
        let limit = self.convection_limit();
        if self.dt() > limit {
            if force {
                eprintln!("warning: dt = {:.4e} exceeds the convection limit {:.4e}; continuing (forced)", self.dt(), limit);
            } else {
                return Err(Error::Stability { dt: self.dt(), limit });
            }
        }
        Ok(())
    }
}

/// Sources of the forward system: `(F₀ + div F) dt + F₁ dW` in the bulk and
/// `(F₀Γ − F·ν + div_Γ F_Γ) dt + F₁Γ dW` on Γ.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSet {
    #[serde(default)]
    pub f0: Expr,
    #[serde(default)]
    pub f1: Expr,
    #[serde(default)]
    pub f: VectorField,
    #[serde(default)]
    pub f0_gamma: Expr,
    #[serde(default)]
    pub f1_gamma: Expr,
    #[serde(default)]
    pub f_gamma: VectorField,
}

impl SourceSet {
    pub fn is_zero(&self) -> bool {
        self.f0.is_zero() && self.f1.is_zero() && self.f.is_zero() && self.f0_gamma.is_zero() && self.f1_gamma.is_zero() && self.f_gamma.is_zero()
    }

    pub fn has_noise(&self) -> bool {
        !(self.f1.is_zero() && self.f1_gamma.is_zero())
    }

    pub fn depends_on_noise(&self) -> bool {
        [&self.f0, &self.f1, &self.f0_gamma, &self.f1_gamma].iter().any(|e| e.depends_on_noise())
    }

    /// Load vector of `F₀ + div F` (bulk) and `F₀Γ + div_Γ F_Γ` (surface) at (t, W).
    pub fn drift_load(&self, mesh: &Mesh, t: f64, w: f64) -> Result<Vec<f64>> {
        let f: Vec<Point> = mesh.nodes.iter().map(|&p| self.f.eval(t, p)).collect();
        let fg: Vec<Point> = mesh.boundary.iter().map(|&i| self.f_gamma.eval(t, mesh.nodes[i])).collect();
        let mut load = fold_load(mesh, &weak_divergence_load(&f, &fg, mesh)?);
        for (i, (&p, wg)) in mesh.nodes.iter().zip(&mesh.bulk_weights).enumerate() {
            load[i] += wg * self.f0.eval(t, p, w);
        }
        for (&i, ws) in mesh.boundary.iter().zip(&mesh.surf_weights) {
            load[i] += ws * self.f0_gamma.eval(t, mesh.nodes[i], w);
        }
        Ok(load)
    }

    /// Load vector of `F₁` (bulk) and `F₁Γ` (surface) at (t, W).
    pub fn noise_load(&self, mesh: &Mesh, t: f64, w: f64) -> Vec<f64> {
        let mut load: Vec<f64> = mesh.nodes.iter().zip(&mesh.bulk_weights).map(|(&p, wg)| wg * self.f1.eval(t, p, w)).collect();
        for (&i, ws) in mesh.boundary.iter().zip(&mesh.surf_weights) {
            load[i] += ws * self.f1_gamma.eval(t, mesh.nodes[i], w);
        }
        load
    }
}

/// States per level and node; level 0 has the single deterministic initial state.
#[derive(Clone, Debug)]
pub struct ForwardTrajectory {
    pub levels: Vec<Vec<Vec<f64>>>,
}

impl ForwardTrajectory {
    pub fn n_steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn state(&self, level: usize, k: usize) -> &[f64] {
        &self.levels[level][k]
    }

    /// 𝔼 |(z, z_Γ)(t_level)|² in the pair 𝕃² norm.
    pub fn mean_energy(&self, mesh: &Mesh, noise: &dyn NoiseSource, level: usize) -> f64 {
        noise.expectation(level, &|k| mesh.state_inner(&self.levels[level][k], &self.levels[level][k]))
    }

    /// 𝔼 z(t_level) per node.
    pub fn mean(&self, noise: &dyn NoiseSource, level: usize) -> Vec<f64> {
        let n = self.levels[level][0].len();
        (0..n).map(|i| noise.expectation(level, &|k| self.levels[level][k][i])).collect()
    }

    /// Var z(t_level) per node.
    pub fn variance(&self, noise: &dyn NoiseSource, level: usize) -> Vec<f64> {
        let mean = self.mean(noise, level);
        (0..mean.len())
            .map(|i| noise.expectation(level, &|k| (self.levels[level][k][i] - mean[i]).powi(2)))
            .collect()
    }

    /// Writes every node state as little-endian binary: magic `SDTR`, `u64` levels, `u64`
    /// state length, then per level a `u64` node count followed by the contiguous doubles.
    pub fn write_binary<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"SDTR")?;
        w.write_all(&(self.levels.len() as u64).to_le_bytes())?;
        let n = self.levels[0][0].len() as u64;
        w.write_all(&n.to_le_bytes())?;
        for level in &self.levels {
            w.write_all(&(level.len() as u64).to_le_bytes())?;
            for state in level {
                for v in state {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

/// One semi-implicit step from level `level` to `level + 1`.
pub fn step_forward(
    prop: &Propagator,
    level: usize,
    w: f64,
    dw: f64,
    z: &[f64],
    drift_load: Option<&[f64]>,
    noise_load: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_len(prop.n(), z.len())?;
    let dt = prop.dt();
    let mut rhs = prop.explicit(level, w, dw, z);
    if let Some(g) = drift_load {
        crate::linalg::axpy(dt, g, &mut rhs);
    }
    if let Some(h) = noise_load {
        crate::linalg::axpy(dw, h, &mut rhs);
    }
    prop.solve(level + 1, &rhs)
}

fn check_noise_compat(prop: &Propagator, noise: &dyn NoiseSource) -> Result<()> {
    if noise.n_steps() != prop.grid.n_t || (noise.dt() - prop.dt()).abs() > 1e-12 * prop.dt() {
        return Err(Error::Invalid(format!(
            "noise source has {} steps of {:.4e}, time grid has {} steps of {:.4e}",
            noise.n_steps(),
            noise.dt(),
            prop.grid.n_t,
            prop.dt()
        )));
    }
    Ok(())
}

/// Solves the forward system from deterministic `z0` on every node of `noise`. Without
/// explicit sources this is the adjoint system with drift `−a₁z + div(zB)` and noise `−a₂z dW`.
pub fn solve_forward(
    prop: &Propagator,
    z0: &[f64],
    sources: Option<&SourceSet>,
    noise: &dyn NoiseSource,
    force: bool,
) -> Result<ForwardTrajectory> {
    check_len(prop.n(), z0.len())?;
    check_noise_compat(prop, noise)?;
    let sources = sources.filter(|s| !s.is_zero());
    if noise.recombining() {
        let noisy = prop.coeffs.has_noise_terms()
            || prop.coeffs.depends_on_noise()
            || sources.is_some_and(|s| s.has_noise() || s.depends_on_noise());
        if noisy {
            return Err(Error::Invalid(
                "forward solves on a recombining tree need noise-free, W-independent dynamics".into(),
            ));
        }
    }
    prop.check_stability(force)?;
    let mut levels = vec![vec![z0.to_vec()]];
    for n in 0..noise.n_steps() {
        let prev = &levels[n];
        let t = prop.grid.t(n);
        let next: Result<Vec<Vec<f64>>> = (0..noise.level_len(n + 1))
            .into_par_iter()
            .map(|k| {
                let p = noise.parent(n + 1, k);
                let w = noise.w(n, p);
                let dw = noise.increment(n + 1, k);
                let (g, h) = match sources {
                    Some(s) => (Some(s.drift_load(&prop.mesh, t, w)?), Some(s.noise_load(&prop.mesh, t, w))),
                    None => (None, None),
                };
                step_forward(prop, n, w, dw, &prev[p], g.as_deref(), h.as_deref())
            })
            .collect();
        levels.push(next?);
    }
    Ok(ForwardTrajectory { levels })
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    /// (𝔼 ∫₀ᵀ |z|²_{ℍ¹} dt)^{1/2} / |z₀|_{𝕃²}; zero for zero data.
    pub h1_ratio: f64,
    pub sup_l2_sq: f64,
    pub sup_level: usize,
    pub initial_l2_sq: f64,
    pub l2_profile: Vec<f64>,
}

/// Energy diagnostics of a trajectory; the time integral uses the right-endpoint rule.
pub fn energy_estimate_check(traj: &ForwardTrajectory, mesh: &Mesh, noise: &dyn NoiseSource) -> EnergyReport {
    let dt = noise.dt();
    let profile: Vec<f64> = (0..traj.levels.len()).map(|n| traj.mean_energy(mesh, noise, n)).collect();
    let mut h1 = 0.0;
    for n in 1..traj.levels.len() {
        h1 += dt * noise.expectation(n, &|k| {
            let z = &traj.levels[n][k];
            let (gb, gs) = mesh.gradient_energy(z, |_| 1.0, |_| 1.0);
            mesh.state_inner(z, z) + gb + gs
        });
    }
    let (sup_level, sup) = profile.iter().enumerate().fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let init = profile[0];
    EnergyReport {
        h1_ratio: if init > 0.0 { (h1 / init).sqrt() } else { 0.0 },
        sup_l2_sq: sup,
        sup_level,
        initial_l2_sq: init,
        l2_profile: profile,
    }
}

/// 𝕃²-orthonormal eigenpairs of the unit-coefficient coupled operator (A = A_Γ = I), sorted
/// by eigenvalue. Each mode is a state whose trace is the surface component.
#[derive(Clone, Debug)]
pub struct Eigenbasis {
    pub values: Vec<f64>,
    pub modes: Vec<Vec<f64>>,
}

pub fn coupled_eigenbasis(mesh: &Mesh) -> Result<Eigenbasis> {
    let unit = CoefficientSet::zero(&mesh.geometry);
    let k = to_dense(&fold_surface(mesh, &bulk_stiffness(mesh, &unit, 0.0)?, &surface_stiffness(mesh, &unit, 0.0)?));
    let m = mesh.pair_mass();
    let n = m.len();
    let s: Vec<f64> = m.iter().map(|v| 1.0 / v.sqrt()).collect();
    let a = DMatrix::from_fn(n, n, |i, j| s[i] * k[(i, j)] * s[j]);
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let modes = order
        .iter()
        .map(|&c| (0..n).map(|i| s[i] * eig.eigenvectors[(i, c)]).collect())
        .collect();
    Ok(Eigenbasis { values, modes })
}

impl Eigenbasis {
    /// Coefficients ⟨f, e_i⟩_{𝕃²} of a pair field on the first `n_modes` modes.
    pub fn project(&self, mesh: &Mesh, f: &BulkSurfaceField, n_modes: usize) -> Result<Vec<f64>> {
        mesh.check_field(f)?;
        let mut wf: Vec<f64> = f.bulk.iter().zip(&mesh.bulk_weights).map(|(a, w)| a * w).collect();
        for ((s, w), &i) in f.surf.iter().zip(&mesh.surf_weights).zip(&mesh.boundary) {
            wf[i] += s * w;
        }
        Ok(self.modes[..n_modes].iter().map(|e| crate::linalg::dot(e, &wf)).collect())
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.modes[0].len()];
        for (c, e) in coeffs.iter().zip(&self.modes) {
            crate::linalg::axpy(*c, e, &mut out);
        }
        out
    }
}

/// Galerkin scheme on the first `n_modes` eigenpairs with the same semi-implicit stepper;
/// the initial pair is 𝕃²-projected. Returns the synthesized states.
pub fn galerkin_solve(
    z0: &BulkSurfaceField,
    prop: &Propagator,
    noise: &dyn NoiseSource,
    basis: &Eigenbasis,
    n_modes: usize,
) -> Result<ForwardTrajectory> {
    if n_modes == 0 || n_modes > basis.modes.len() {
        return Err(Error::Invalid(format!("n_modes = {n_modes} must be in 1..={}", basis.modes.len())));
    }
    check_noise_compat(prop, noise)?;
    let phi = &basis.modes[..n_modes];
    let reduce = |apply: &dyn Fn(&[f64]) -> Vec<f64>| -> DMatrix<f64> {
        let mut r = DMatrix::zeros(n_modes, n_modes);
        for (j, ej) in phi.iter().enumerate() {
            let y = apply(ej);
            for (i, ei) in phi.iter().enumerate() {
                r[(i, j)] = crate::linalg::dot(ei, &y);
            }
        }
        r
    };
    let mut systems: Vec<Option<Arc<nalgebra::Cholesky<f64, nalgebra::Dyn>>>> = vec![None];
    for n in 1..=noise.n_steps() {
        if n > 1 && !prop.coeffs.diffusion_depends_on_time() {
            systems.push(systems[1].clone());
            continue;
        }
        let s = reduce(&|x| prop.apply_system(n, x));
        let chol = s.cholesky().ok_or_else(|| Error::Numerical("reduced system not positive definite".into()))?;
        systems.push(Some(Arc::new(chol)));
    }
    let c0 = basis.project(&prop.mesh, z0, n_modes)?;
    let mut coeff_levels = vec![vec![c0]];
    for n in 0..noise.n_steps() {
        let prev = &coeff_levels[n];
        let chol = systems[n + 1].as_ref().unwrap();
        let next: Vec<Vec<f64>> = (0..noise.level_len(n + 1))
            .into_par_iter()
            .map(|k| {
                let p = noise.parent(n + 1, k);
                let z = basis.synthesize(&prev[p]);
                let ez = prop.explicit(n, noise.w(n, p), noise.increment(n + 1, k), &z);
                let rhs = DVector::from_iterator(n_modes, phi.iter().map(|e| crate::linalg::dot(e, &ez)));
                chol.solve(&rhs).as_slice().to_vec()
            })
            .collect();
        coeff_levels.push(next);
    }
    Ok(ForwardTrajectory {
        levels: coeff_levels.iter().map(|lvl| lvl.iter().map(|c| basis.synthesize(c)).collect()).collect(),
    })
}

/// Reference solution for constant `a₂ = b₂ = σ`: `z = exp(−σW − σ²t/2) v` with `v` the
/// deterministic solution of `dv = (div(A∇v) − a₁v + div(vB)) dt`, propagated by dense matrix
/// exponentials over `substeps` sub-intervals per step (exact when coefficients are
/// time-independent).
pub fn factorization_oracle(prop: &Propagator, z0: &[f64], noise: &dyn NoiseSource, substeps: usize) -> Result<ForwardTrajectory> {
    check_len(prop.n(), z0.len())?;
    check_noise_compat(prop, noise)?;
    let c = &prop.coeffs;
    let sigma = match (c.a2.as_constant(), c.b2.as_constant()) {
        (Some(a), Some(b)) if a == b => a,
        _ => return Err(Error::Invalid("factorization oracle needs spatially constant a2 = b2".into())),
    };
    if c.depends_on_noise() {
        return Err(Error::Invalid("factorization oracle needs W-independent coefficients".into()));
    }
    let mesh = &prop.mesh;
    let n = prop.n();
    let generator = |t: f64| -> Result<DMatrix<f64>> {
        let k = to_dense(&fold_surface(mesh, &bulk_stiffness(mesh, c, t)?, &surface_stiffness(mesh, c, t)?));
        let (cb, cs) = convection_parts(mesh, c, t)?;
        let cv = to_dense(&fold_surface(mesh, &cb, &cs));
        let r = c.reaction_diag(mesh, t, 0.0);
        Ok(DMatrix::from_fn(n, n, |i, j| -(k[(i, j)] + cv[(i, j)] + if i == j { r[i] } else { 0.0 }) / prop.mass[i]))
    };
    let time_dependent = c.diffusion_depends_on_time()
        || [&c.a1, &c.b1, &c.b.x, &c.b.y, &c.b_gamma.x, &c.b_gamma.y].iter().any(|e| e.depends_on_time());
    let dt = prop.dt();
    let substeps = substeps.max(1);
    let fixed = if time_dependent { None } else { Some((generator(0.0)? * dt).exp()) };
    let mut v = vec![DVector::from_column_slice(z0)];
    for step in 0..noise.n_steps() {
        let next = match &fixed {
            Some(p) => p * &v[step],
            None => {
                let delta = dt / substeps as f64;
                let mut x = v[step].clone();
                for s in 0..substeps {
                    let tm = prop.grid.t(step) + (s as f64 + 0.5) * delta;
                    x = (generator(tm)? * delta).exp() * x;
                }
                x
            }
        };
        v.push(next);
    }
    let levels = (0..=noise.n_steps())
        .map(|lvl| {
            let t = prop.grid.t(lvl);
            (0..noise.level_len(lvl))
                .map(|k| {
                    let f = (-sigma * noise.w(lvl, k) - 0.5 * sigma * sigma * t).exp();
                    v[lvl].iter().map(|x| f * x).collect()
                })
                .collect()
        })
        .collect();
    Ok(ForwardTrajectory { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, Geometry};
    use crate::noise::build_tree;

    fn setup(preset: &str, n_t: usize) -> (Propagator, crate::noise::NoiseTree) {
        let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
        let m = build_mesh(&g, 9).unwrap();
        let c = CoefficientSet::preset(preset, &g).unwrap();
        let grid = TimeGrid::new(1.0, n_t).unwrap();
        (Propagator::new(&m, &c, &grid, &SolverOptions::default()).unwrap(), build_tree(n_t, 1.0, false).unwrap())
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let (p, tree) = setup("constant", 4);
        let z = step_forward(&p, 0, 0.0, 0.5, &vec![0.0; 9], None, None).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let traj = solve_forward(&p, &vec![0.0; 9], None, &tree, true).unwrap();
        assert!(traj.levels.iter().flatten().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn recombining_forward_needs_noise_free_dynamics() {
        let (p, _) = setup("constant", 4);
        let rec = build_tree(4, 1.0, true).unwrap();
        assert!(solve_forward(&p, &vec![1.0; 9], None, &rec, false).is_err());
        let (q, _) = setup("zero", 4);
        assert!(solve_forward(&q, &vec![1.0; 9], None, &rec, false).is_ok());
    }

    #[test]
    fn stability_guard() {
        let g = Geometry::interval(0.0, 1.0, 0.3, 0.7).unwrap();
        let m = build_mesh(&g, 9).unwrap();
        let mut c = CoefficientSet::zero(&g);
        c.b = VectorField::constant([10.0, 0.0]);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let p = Propagator::new(&m, &c, &grid, &SolverOptions::default()).unwrap();
        let tree = build_tree(4, 1.0, false).unwrap();
        assert!(matches!(solve_forward(&p, &vec![1.0; 9], None, &tree, false), Err(Error::Stability { .. })));
        assert!(solve_forward(&p, &vec![1.0; 9], None, &tree, true).is_ok());
    }
}
