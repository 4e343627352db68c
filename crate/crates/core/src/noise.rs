//! Brownian increments: an exact binary tree (full or recombining) and a seeded Monte Carlo
//! path ensemble behind one [`NoiseSource`] interface.
//!
//! Nodes are addressed by `(level, index)`. Level 0 holds the single root (W = 0).

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const MAX_FULL_DEPTH: usize = 16;
pub const MAX_RECOMBINING_DEPTH: usize = 4096;

pub trait NoiseSource: Sync {
    fn n_steps(&self) -> usize;
    fn dt(&self) -> f64;
    fn level_len(&self, level: usize) -> usize;
    /// Index of the parent of node `(level, k)`, `level ≥ 1`. On a recombining tree this is
    /// a canonical choice among the two parents.
    fn parent(&self, level: usize, k: usize) -> usize;
    fn w(&self, level: usize, k: usize) -> f64;
    fn prob(&self, level: usize, k: usize) -> f64;
    /// True when distinct paths share nodes.
    fn recombining(&self) -> bool {
        false
    }
    fn as_tree(&self) -> Option<&NoiseTree> {
        None
    }
    fn increment(&self, level: usize, k: usize) -> f64 {
        self.w(level, k) - self.w(level - 1, self.parent(level, k))
    }
    fn horizon(&self) -> f64 {
        self.dt() * self.n_steps() as f64
    }
    /// Probability-weighted sum of `f(k)` over a level, in index order.
    fn expectation(&self, level: usize, f: &dyn Fn(usize) -> f64) -> f64 {
        (0..self.level_len(level)).map(|k| self.prob(level, k) * f(k)).sum()
    }
}

/// Binary tree of ±√Δt increments with probability ½ each.
#[derive(Clone, Debug)]
pub struct NoiseTree {
    n_t: usize,
    dt: f64,
    recombining: bool,
    w: Vec<Vec<f64>>,
    prob: Vec<Vec<f64>>,
}

/// Builds a full binary tree (children of `k` are `2k` up and `2k+1` down) or a recombining
/// lattice (node `k` at level `n` has `k` down-moves, children `k` up and `k+1` down).
pub fn build_tree(n_t: usize, horizon: f64, recombining: bool) -> Result<NoiseTree> {
    if n_t == 0 {
        return Err(Error::Tree("tree depth must be at least 1".into()));
    }
    let limit = if recombining { MAX_RECOMBINING_DEPTH } else { MAX_FULL_DEPTH };
    if n_t > limit {
        return Err(Error::Tree(format!("depth {n_t} exceeds the limit {limit}")));
    }
    if !(horizon > 0.0) {
        return Err(Error::Tree(format!("horizon {horizon} must be positive")));
    }
    let dt = horizon / n_t as f64;
    let sq = dt.sqrt();
    let mut w = vec![vec![0.0]];
    let mut prob = vec![vec![1.0]];
    for n in 1..=n_t {
        if recombining {
            w.push((0..=n).map(|k| (n as f64 - 2.0 * k as f64) * sq).collect());
            let prev = &prob[n - 1];
            let p = (0..=n)
                .map(|k| {
                    let up = if k < n { prev[k] } else { 0.0 };
                    let down = if k > 0 { prev[k - 1] } else { 0.0 };
                    0.5 * (up + down)
                })
                .collect();
            prob.push(p);
        } else {
            let prev = &w[n - 1];
            let len = 1usize << n;
            w.push((0..len).map(|k| prev[k / 2] + if k % 2 == 0 { sq } else { -sq }).collect());
            prob.push(vec![0.5f64.powi(n as i32); len]);
        }
    }
    Ok(NoiseTree { n_t, dt, recombining, w, prob })
}

impl NoiseTree {
    /// (up, down) children of node `(level, k)`.
    pub fn children(&self, _level: usize, k: usize) -> (usize, usize) {
        if self.recombining {
            (k, k + 1)
        } else {
            (2 * k, 2 * k + 1)
        }
    }

    /// W values along the path from the root to `(level, k)` on a full tree.
    pub fn path_to(&self, level: usize, k: usize) -> Result<PathView> {
        if self.recombining {
            return Err(Error::Tree("paths are not unique on a recombining tree".into()));
        }
        let mut w = vec![0.0; level + 1];
        let mut idx = k;
        for n in (0..=level).rev() {
            w[n] = self.w[n][idx];
            idx /= 2;
        }
        Ok(PathView { dt: self.dt, w })
    }

    /// Ancestor index of `(level, k)` at level `ancestor_level` on a full tree.
    pub fn ancestor(&self, level: usize, k: usize, ancestor_level: usize) -> usize {
        k >> (level - ancestor_level)
    }

    fn check_level(&self, level: usize, child_values: &[f64]) -> Result<()> {
        if level >= self.n_t {
            return Err(Error::Tree(format!("level {level} has no children (depth {})", self.n_t)));
        }
        if child_values.len() != self.level_len(level + 1) {
            return Err(Error::Shape { expected: self.level_len(level + 1), got: child_values.len() });
        }
        Ok(())
    }
}

impl NoiseSource for NoiseTree {
    fn n_steps(&self) -> usize {
        self.n_t
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn level_len(&self, level: usize) -> usize {
        self.w[level].len()
    }
    fn parent(&self, level: usize, k: usize) -> usize {
        if self.recombining {
            if k < level {
                k
            } else {
                k - 1
            }
        } else {
            k / 2
        }
    }
    fn w(&self, level: usize, k: usize) -> f64 {
        self.w[level][k]
    }
    fn prob(&self, level: usize, k: usize) -> f64 {
        self.prob[level][k]
    }
    fn recombining(&self) -> bool {
        self.recombining
    }
    fn as_tree(&self) -> Option<&NoiseTree> {
        Some(self)
    }
}

/// ½(up + down) for every node of `level`, from values on `level + 1`.
pub fn conditional_expectation(tree: &NoiseTree, level: usize, child_values: &[f64]) -> Result<Vec<f64>> {
    tree.check_level(level, child_values)?;
    Ok((0..tree.level_len(level))
        .map(|k| {
            let (u, d) = tree.children(level, k);
            0.5 * (child_values[u] + child_values[d])
        })
        .collect())
}

/// (up − down)/(2√Δt) for every node of `level`: the exact martingale integrand.
pub fn martingale_increment(tree: &NoiseTree, level: usize, child_values: &[f64]) -> Result<Vec<f64>> {
    tree.check_level(level, child_values)?;
    let s = 2.0 * tree.dt.sqrt();
    Ok((0..tree.level_len(level))
        .map(|k| {
            let (u, d) = tree.children(level, k);
            (child_values[u] - child_values[d]) / s
        })
        .collect())
}

/// A single path (one node per level).
#[derive(Clone, Debug)]
pub struct PathView {
    pub dt: f64,
    pub w: Vec<f64>,
}

impl NoiseSource for PathView {
    fn n_steps(&self) -> usize {
        self.w.len() - 1
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn level_len(&self, _level: usize) -> usize {
        1
    }
    fn parent(&self, _level: usize, _k: usize) -> usize {
        0
    }
    fn w(&self, level: usize, _k: usize) -> f64 {
        self.w[level]
    }
    fn prob(&self, _level: usize, _k: usize) -> f64 {
        1.0
    }
}

/// Seeded Gaussian increments: `n_paths` independent paths sharing the root.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub seed: u64,
    dt: f64,
    /// Path-major increments, `n_paths × n_t`.
    increments: Vec<f64>,
    w: Vec<Vec<f64>>,
    n_t: usize,
}

impl PathEnsemble {
    pub fn new(n_paths: usize, n_t: usize, horizon: f64, seed: u64) -> Result<Self> {
        if n_paths == 0 || n_t == 0 || !(horizon > 0.0) {
            return Err(Error::Invalid("path ensemble needs n_paths, n_t >= 1 and a positive horizon".into()));
        }
        let dt = horizon / n_t as f64;
        let sq = dt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let increments: Vec<f64> = (0..n_paths * n_t)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sq
            })
            .collect();
        Ok(Self::from_increments(n_paths, n_t, dt, seed, increments))
    }

    fn from_increments(n_paths: usize, n_t: usize, dt: f64, seed: u64, increments: Vec<f64>) -> Self {
        let mut w = vec![vec![0.0]];
        for n in 1..=n_t {
            let prev = if n == 1 { vec![0.0; n_paths] } else { w[n - 1].clone() };
            w.push((0..n_paths).map(|p| prev[p] + increments[p * n_t + n - 1]).collect());
        }
        PathEnsemble { n_paths, seed, dt, increments, w, n_t }
    }

    /// The same Brownian paths on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_t % factor != 0 {
            return Err(Error::Invalid(format!("cannot coarsen {} steps by {factor}", self.n_t)));
        }
        let n_t = self.n_t / factor;
        let mut inc = vec![0.0; self.n_paths * n_t];
        for p in 0..self.n_paths {
            for n in 0..n_t {
                inc[p * n_t + n] = (0..factor).map(|j| self.increments[p * self.n_t + n * factor + j]).sum();
            }
        }
        Ok(Self::from_increments(self.n_paths, n_t, self.dt * factor as f64, self.seed, inc))
    }

    pub fn increments(&self, path: usize) -> &[f64] {
        &self.increments[path * self.n_t..(path + 1) * self.n_t]
    }
}

impl NoiseSource for PathEnsemble {
    fn n_steps(&self) -> usize {
        self.n_t
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn level_len(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.n_paths
        }
    }
    fn parent(&self, level: usize, k: usize) -> usize {
        if level == 1 {
            0
        } else {
            k
        }
    }
    fn w(&self, level: usize, k: usize) -> f64 {
        self.w[level][k]
    }
    fn prob(&self, level: usize, _k: usize) -> f64 {
        if level == 0 {
            1.0
        } else {
            1.0 / self.n_paths as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_tree_leaves() {
        let t = build_tree(2, 1.0, false).unwrap();
        let s = 0.5f64.sqrt();
        let expect = [2.0 * s, 0.0, 0.0, -2.0 * s];
        for (k, e) in expect.iter().enumerate() {
            assert!((t.w(2, k) - e).abs() < 1e-15);
        }
        let m1 = t.expectation(2, &|k| t.w(2, k));
        let m2 = t.expectation(2, &|k| t.w(2, k).powi(2));
        assert!(m1.abs() < 1e-15);
        assert!((m2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_step_tree() {
        let t = build_tree(1, 2.0, false).unwrap();
        assert_eq!(t.level_len(1), 2);
        assert!((t.w(1, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((t.w(1, 1) + 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.prob(1, 0), 0.5);
    }

    #[test]
    fn recombining_binomial_probabilities() {
        let t = build_tree(3, 1.0, true).unwrap();
        assert_eq!(t.level_len(3), 4);
        let p: Vec<f64> = (0..4).map(|k| t.prob(3, k)).collect();
        assert_eq!(p, vec![0.125, 0.375, 0.375, 0.125]);
        for k in 0..4 {
            let parent = t.parent(3, k);
            let (u, d) = t.children(2, parent);
            assert!(u == k || d == k);
        }
    }

    #[test]
    fn depth_limits() {
        assert!(build_tree(17, 1.0, false).is_err());
        assert!(build_tree(0, 1.0, false).is_err());
        assert!(build_tree(4097, 1.0, true).is_err());
        assert!(build_tree(200, 1.0, true).is_ok());
    }

    #[test]
    fn conditional_expectation_examples() {
        let t = build_tree(1, 1.0, false).unwrap();
        assert_eq!(conditional_expectation(&t, 0, &[3.0, 3.0]).unwrap(), vec![3.0]);
        assert_eq!(conditional_expectation(&t, 0, &[2.0, 0.0]).unwrap(), vec![1.0]);
        assert!(conditional_expectation(&t, 1, &[2.0, 0.0]).is_err());
        assert!(conditional_expectation(&t, 0, &[2.0]).is_err());
    }

    #[test]
    fn martingale_increment_examples() {
        let t = build_tree(3, 1.0, false).unwrap();
        for level in 0..3 {
            let w: Vec<f64> = (0..t.level_len(level + 1)).map(|k| t.w(level + 1, k)).collect();
            for y in martingale_increment(&t, level, &w).unwrap() {
                assert!((y - 1.0).abs() < 1e-14);
            }
            let c = vec![4.0; w.len()];
            assert!(martingale_increment(&t, level, &c).unwrap().iter().all(|&y| y == 0.0));
        }
    }

    #[test]
    fn ensemble_is_reproducible_and_coarsens() {
        let a = PathEnsemble::new(50, 8, 1.0, 7).unwrap();
        let b = PathEnsemble::new(50, 8, 1.0, 7).unwrap();
        assert_eq!(a.increments(3), b.increments(3));
        let c = a.coarsen(4).unwrap();
        assert_eq!(c.n_steps(), 2);
        for p in 0..50 {
            assert!((c.w(2, p) - a.w(8, p)).abs() < 1e-14);
            assert!((c.w(1, p) - a.w(4, p)).abs() < 1e-14);
        }
        assert!(a.coarsen(3).is_err());
    }
}
