//! Backward induction on the noise tree, built as the exact algebraic transpose of the
//! forward stepper.
//!
//! For a parent node with children `±` (increments `±√Δt`) and child loads `ℓ_±`,
//! `M y = ½ Σ_± E_±ᵀ (M + Δt K_{n+1})⁻¹ (M y_± − Δt ℓ_±)`, where `E_±` is the forward
//! explicit matrix of the parent. Then every forward trajectory `z` satisfies
//! `⟨y_n, z_n⟩ = 𝔼_n[⟨y_{n+1}, z_{n+1}⟩] − Δt 𝔼_n[ℓ_{n+1}·z_{n+1}]`.

use crate::error::{check_len, Error, Result};
use crate::forward::{ForwardTrajectory, Propagator};
use crate::geometry::{BulkSurfaceField, Mesh};
use crate::noise::{NoiseSource, NoiseTree};
use rayon::prelude::*;

/// Node values per level: `values[level][node]` is a state vector.
pub type NodeValues = Vec<Vec<Vec<f64>>>;

/// A control on G₀ given per tree node for levels `1..=N` (level 0 is empty). Values off G₀
/// are ignored. Node-indexed values on the tree are adapted by construction.
#[derive(Clone, Debug)]
pub struct Control {
    pub levels: NodeValues,
}

impl Control {
    pub fn zeros(tree: &dyn NoiseSource, n: usize) -> Self {
        let mut levels = vec![Vec::new()];
        for l in 1..=tree.n_steps() {
            levels.push(vec![vec![0.0; n]; tree.level_len(l)]);
        }
        Control { levels }
    }

    pub fn from_fn(tree: &dyn NoiseSource, n: usize, f: impl Fn(usize, usize) -> Vec<f64>) -> Self {
        let mut levels = vec![Vec::new()];
        for l in 1..=tree.n_steps() {
            levels.push((0..tree.level_len(l)).map(|k| f(l, k)).inspect(|v| debug_assert_eq!(v.len(), n)).collect());
        }
        Control { levels }
    }

    fn check(&self, tree: &dyn NoiseSource, n: usize) -> Result<()> {
        if self.levels.len() != tree.n_steps() + 1 {
            return Err(Error::Invalid("control must be indexed by the tree levels 0..=N".into()));
        }
        for l in 1..=tree.n_steps() {
            check_len(tree.level_len(l), self.levels[l].len())?;
            for v in &self.levels[l] {
                check_len(n, v.len())?;
            }
        }
        Ok(())
    }
}

/// Solution of the backward system on a tree: `y` on levels `0..=N` and the martingale
/// integrand `Y` on levels `0..N`, with `y_± = m ± Y √Δt` at every parent.
#[derive(Clone, Debug)]
pub struct BackwardState {
    pub y: NodeValues,
    pub big_y: NodeValues,
}

impl BackwardState {
    /// `(y, y_Γ)` at a node.
    pub fn field(&self, mesh: &Mesh, level: usize, k: usize) -> BulkSurfaceField {
        mesh.state_to_field(&self.y[level][k])
    }

    /// `(Y, Ỹ)` at a node.
    pub fn martingale_field(&self, mesh: &Mesh, level: usize, k: usize) -> BulkSurfaceField {
        mesh.state_to_field(&self.big_y[level][k])
    }

    pub fn initial(&self) -> &[f64] {
        &self.y[0][0]
    }
}

/// Backward induction from leaf data `terminal` (one state per leaf), with optional control
/// `u` on G₀ and optional pair source `f` (per node, levels `1..=N`), both entering as loads
/// `w_{G₀} u + M f` at the child level.
pub fn solve_backward(
    prop: &Propagator,
    noise: &dyn NoiseSource,
    terminal: &[Vec<f64>],
    control: Option<&Control>,
    source: Option<&NodeValues>,
) -> Result<BackwardState> {
    let tree: &NoiseTree = noise.as_tree().ok_or_else(|| Error::Tree("backward solves need the tree backend".into()))?;
    let nt = tree.n_steps();
    if nt != prop.grid.n_t || (tree.dt() - prop.dt()).abs() > 1e-12 * prop.dt() {
        return Err(Error::Invalid("tree and time grid disagree".into()));
    }
    let n = prop.n();
    check_len(tree.level_len(nt), terminal.len())?;
    for y in terminal {
        check_len(n, y.len())?;
    }
    if let Some(u) = control {
        u.check(tree, n)?;
    }
    if let Some(f) = source {
        if f.len() != nt + 1 {
            return Err(Error::Invalid("source must be indexed by the tree levels 0..=N".into()));
        }
        for l in 1..=nt {
            check_len(tree.level_len(l), f[l].len())?;
        }
    }
    let dt = prop.dt();
    let sq = dt.sqrt();
    let cw = prop.mesh.control_weights();
    let mass = &prop.mass;

    let mut y: NodeValues = vec![Vec::new(); nt + 1];
    let mut big_y: NodeValues = vec![Vec::new(); nt];
    y[nt] = terminal.to_vec();
    for level in (0..nt).rev() {
        let children = &y[level + 1];
        let pre_solve = |k: usize| -> Vec<f64> {
            let mut a: Vec<f64> = children[k].iter().zip(mass).map(|(v, m)| m * v).collect();
            if let Some(u) = control {
                for i in 0..n {
                    a[i] -= dt * cw[i] * u.levels[level + 1][k][i];
                }
            }
            if let Some(f) = source {
                for i in 0..n {
                    a[i] -= dt * mass[i] * f[level + 1][k][i];
                }
            }
            a
        };
        let results: Result<Vec<(Vec<f64>, Vec<f64>)>> = (0..tree.level_len(level))
            .into_par_iter()
            .map(|k| {
                let (ku, kd) = tree.children(level, k);
                let w = tree.w(level, k);
                let vu = prop.solve(level + 1, &pre_solve(ku))?;
                let vd = prop.solve(level + 1, &pre_solve(kd))?;
                let eu = prop.explicit_t(level, w, sq, &vu);
                let ed = prop.explicit_t(level, w, -sq, &vd);
                let yp: Vec<f64> = (0..n).map(|i| 0.5 * (eu[i] + ed[i]) / mass[i]).collect();
                let mart: Vec<f64> = (0..n).map(|i| (children[ku][i] - children[kd][i]) / (2.0 * sq)).collect();
                Ok((yp, mart))
            })
            .collect();
        let (yl, ml): (Vec<_>, Vec<_>) = results?.into_iter().unzip();
        y[level] = yl;
        big_y[level] = ml;
    }
    Ok(BackwardState { y, big_y })
}

/// The three terms of the discrete duality identity and the relative residual.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct DualityTerms {
    /// 𝔼⟨(y_T, y_{Γ,T}), (z(T), z_Γ(T))⟩
    pub terminal: f64,
    /// ⟨(y(0), y_Γ(0)), (z₀, z_{Γ,0})⟩
    pub initial: f64,
    /// Δt Σ_{n=1}^{N} 𝔼 ∫_{G₀} u_n z_n plus the source pairing
    pub control: f64,
    pub residual: f64,
}

/// Relative residual of `𝔼⟨y_T, z(T)⟩ − ⟨y(0), z₀⟩ − 𝔼 Σ Δt ∫ 1_{G₀} u z` for a forward
/// trajectory and a backward state on the same tree.
pub fn duality_residual(
    prop: &Propagator,
    noise: &dyn NoiseSource,
    fwd: &ForwardTrajectory,
    bwd: &BackwardState,
    control: Option<&Control>,
    source: Option<&NodeValues>,
) -> Result<DualityTerms> {
    let nt = noise.n_steps();
    if fwd.levels.len() != nt + 1 || bwd.y.len() != nt + 1 {
        return Err(Error::Tree("trajectories live on different trees".into()));
    }
    for l in 0..=nt {
        if fwd.levels[l].len() != noise.level_len(l) || bwd.y[l].len() != noise.level_len(l) {
            return Err(Error::Tree(format!("level {l} sizes differ between forward and backward")));
        }
    }
    let mesh = &prop.mesh;
    let dt = prop.dt();
    let cw = mesh.control_weights();
    let terminal = noise.expectation(nt, &|k| mesh.state_inner(&bwd.y[nt][k], &fwd.levels[nt][k]));
    let initial = mesh.state_inner(&bwd.y[0][0], &fwd.levels[0][0]);
    let mut ctrl = 0.0;
    for l in 1..=nt {
        if let Some(u) = control {
            ctrl += dt * noise.expectation(l, &|k| crate::linalg::weighted_dot(&cw, &u.levels[l][k], &fwd.levels[l][k]));
        }
        if let Some(f) = source {
            ctrl += dt * noise.expectation(l, &|k| mesh.state_inner(&f[l][k], &fwd.levels[l][k]));
        }
    }
    let scale = terminal.abs().max(initial.abs()).max(ctrl.abs());
    let residual = if scale == 0.0 { 0.0 } else { (terminal - initial - ctrl).abs() / scale };
    Ok(DualityTerms { terminal, initial, control: ctrl, residual })
}
