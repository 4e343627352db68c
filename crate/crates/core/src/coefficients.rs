//! Equation coefficients, presets, sup-norms, ellipticity, the cost constant K and λ₁.

use crate::error::{Error, Result};
use crate::geometry::{sym_min_eig, Domain, Geometry, Mesh, Point, TimeGrid};
use serde::{Deserialize, Serialize};

/// One term `c · x^px · y^py · t^pt · W^pw · cos(kx·x + ky·y + kt·t + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub c: f64,
    #[serde(default)]
    pub px: u32,
    #[serde(default)]
    pub py: u32,
    #[serde(default)]
    pub pt: u32,
    #[serde(default)]
    pub pw: u32,
    #[serde(default)]
    pub kx: f64,
    #[serde(default)]
    pub ky: f64,
    #[serde(default)]
    pub kt: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Term {
    pub fn constant(c: f64) -> Self {
        Term { c, px: 0, py: 0, pt: 0, pw: 0, kx: 0.0, ky: 0.0, kt: 0.0, phase: 0.0 }
    }

    fn eval(&self, t: f64, p: Point, w: f64) -> f64 {
        let mut v = self.c * p[0].powi(self.px as i32) * p[1].powi(self.py as i32) * t.powi(self.pt as i32) * w.powi(self.pw as i32);
        if self.kx != 0.0 || self.ky != 0.0 || self.kt != 0.0 || self.phase != 0.0 {
            v *= (self.kx * p[0] + self.ky * p[1] + self.kt * t + self.phase).cos();
        }
        v
    }
}

/// Scalar expression in (t, x, y, W): a sum of [`Term`]s. Deserializes from a number or a term list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "ExprRepr", into = "Vec<Term>")]
pub struct Expr {
    pub terms: Vec<Term>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExprRepr {
    Number(f64),
    Terms(Vec<Term>),
}

impl From<ExprRepr> for Expr {
    fn from(r: ExprRepr) -> Self {
        match r {
            ExprRepr::Number(c) => Expr::constant(c),
            ExprRepr::Terms(terms) => Expr { terms },
        }
    }
}

impl From<Expr> for Vec<Term> {
    fn from(e: Expr) -> Self {
        e.terms
    }
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        if c == 0.0 {
            Expr { terms: Vec::new() }
        } else {
            Expr { terms: vec![Term::constant(c)] }
        }
    }

    pub fn term(t: Term) -> Self {
        Expr { terms: vec![t] }
    }

    pub fn eval(&self, t: f64, p: Point, w: f64) -> f64 {
        self.terms.iter().map(|term| term.eval(t, p, w)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.c == 0.0)
    }

    pub fn depends_on_noise(&self) -> bool {
        self.terms.iter().any(|t| t.c != 0.0 && t.pw > 0)
    }

    pub fn depends_on_time(&self) -> bool {
        self.terms.iter().any(|t| t.c != 0.0 && (t.pt > 0 || t.kt != 0.0))
    }

    /// Constant value if the expression has no (t, x, y, W) dependence.
    pub fn as_constant(&self) -> Option<f64> {
        let mut c = 0.0;
        for t in &self.terms {
            if t.c == 0.0 {
                continue;
            }
            if t.px > 0 || t.py > 0 || t.pt > 0 || t.pw > 0 || t.kx != 0.0 || t.ky != 0.0 || t.kt != 0.0 {
                return None;
            }
            c += t.c * t.phase.cos();
        }
        Some(c)
    }
}

/// 2×2 matrix field; entries deterministic functions of (t, x).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixField {
    pub xx: Expr,
    #[serde(default)]
    pub xy: Expr,
    #[serde(default)]
    pub yx: Expr,
    #[serde(default)]
    pub yy: Expr,
}

impl MatrixField {
    pub fn identity() -> Self {
        MatrixField { xx: Expr::constant(1.0), xy: Expr::default(), yx: Expr::default(), yy: Expr::constant(1.0) }
    }

    pub fn constant(a: [[f64; 2]; 2]) -> Self {
        MatrixField {
            xx: Expr::constant(a[0][0]),
            xy: Expr::constant(a[0][1]),
            yx: Expr::constant(a[1][0]),
            yy: Expr::constant(a[1][1]),
        }
    }

    pub fn eval(&self, t: f64, p: Point) -> [[f64; 2]; 2] {
        [[self.xx.eval(t, p, 0.0), self.xy.eval(t, p, 0.0)], [self.yx.eval(t, p, 0.0), self.yy.eval(t, p, 0.0)]]
    }

    fn entries(&self) -> [&Expr; 4] {
        [&self.xx, &self.xy, &self.yx, &self.yy]
    }
}

/// Vector field; components deterministic functions of (t, x).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorField {
    #[serde(default)]
    pub x: Expr,
    #[serde(default)]
    pub y: Expr,
}

impl VectorField {
    pub fn constant(v: Point) -> Self {
        VectorField { x: Expr::constant(v[0]), y: Expr::constant(v[1]) }
    }

    pub fn eval(&self, t: f64, p: Point) -> Point {
        [self.x.eval(t, p, 0.0), self.y.eval(t, p, 0.0)]
    }

    pub fn is_zero(&self) -> bool {
        self.x.is_zero() && self.y.is_zero()
    }
}

/// (A, A_Γ, a₁, a₂, B, B_Γ, b₁, b₂) and the ellipticity constant β.
/// Scalars may depend on W (tree-measurable mode); A, A_Γ, B, B_Γ are deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    pub a: MatrixField,
    pub a_gamma: MatrixField,
    #[serde(default)]
    pub a1: Expr,
    #[serde(default)]
    pub a2: Expr,
    #[serde(default)]
    pub b: VectorField,
    #[serde(default)]
    pub b1: Expr,
    #[serde(default)]
    pub b2: Expr,
    #[serde(default)]
    pub b_gamma: VectorField,
    pub beta: f64,
}

pub const PRESETS: [&str; 3] = ["zero", "constant", "shear-convection"];

impl CoefficientSet {
    /// A = A_Γ = I, every lower-order coefficient zero.
    pub fn zero(_geometry: &Geometry) -> Self {
        CoefficientSet {
            a: MatrixField::identity(),
            a_gamma: MatrixField::identity(),
            a1: Expr::default(),
            a2: Expr::default(),
            b: VectorField::default(),
            b1: Expr::default(),
            b2: Expr::default(),
            b_gamma: VectorField::default(),
            beta: 1.0,
        }
    }

    pub fn preset(name: &str, geometry: &Geometry) -> Result<Self> {
        let mut c = Self::zero(geometry);
        match name {
            "zero" => {}
            "constant" => {
                c.a1 = Expr::constant(1.0);
                c.a2 = Expr::constant(0.5);
                c.b1 = Expr::constant(1.0);
                c.b2 = Expr::constant(0.5);
                c.b = match geometry.domain {
                    Domain::Interval { .. } => VectorField::constant([0.5, 0.0]),
                    Domain::Disk { .. } => VectorField::constant([0.5, 0.25]),
                };
            }
            "shear-convection" => {
                c.a = MatrixField::constant([[1.5, 0.25], [0.25, 1.0]]);
                c.beta = 0.5;
                c.b = VectorField {
                    x: Expr { terms: vec![Term::constant(0.25), Term { py: 1, ..Term::constant(0.5) }] },
                    y: Expr::term(Term { px: 1, ..Term::constant(-0.25) }),
                };
                if let Domain::Disk { radius } = geometry.domain {
                    let s = 0.5 / radius;
                    c.b_gamma = VectorField {
                        x: Expr::term(Term { py: 1, ..Term::constant(-s) }),
                        y: Expr::term(Term { px: 1, ..Term::constant(s) }),
                    };
                }
            }
            other => {
                return Err(Error::Config {
                    key: "coefficients.preset".into(),
                    message: format!("unknown preset `{other}` (expected one of {PRESETS:?})"),
                })
            }
        }
        Ok(c)
    }

    /// Rejects W-dependence in A, A_Γ, B, B_Γ and a non-positive β.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config { key: "coefficients.beta".into(), message: "beta must be positive".into() });
        }
        let fields: [(&str, Vec<&Expr>); 4] = [
            ("a", self.a.entries().to_vec()),
            ("a_gamma", self.a_gamma.entries().to_vec()),
            ("b", vec![&self.b.x, &self.b.y]),
            ("b_gamma", vec![&self.b_gamma.x, &self.b_gamma.y]),
        ];
        for (name, exprs) in fields {
            if exprs.iter().any(|e| e.depends_on_noise()) {
                return Err(Error::Config {
                    key: format!("coefficients.{name}"),
                    message: "diffusion and convection coefficients must not depend on W".into(),
                });
            }
        }
        Ok(())
    }

    pub fn depends_on_noise(&self) -> bool {
        [&self.a1, &self.a2, &self.b1, &self.b2].iter().any(|e| e.depends_on_noise())
    }

    pub fn diffusion_depends_on_time(&self) -> bool {
        self.a.entries().iter().chain(self.a_gamma.entries().iter()).any(|e| e.depends_on_time())
    }

    pub fn has_noise_terms(&self) -> bool {
        !(self.a2.is_zero() && self.b2.is_zero())
    }

    pub fn has_convection(&self) -> bool {
        !(self.b.is_zero() && self.b_gamma.is_zero())
    }

    /// Diagonal reaction form `w_G a₁ + Pᵀ w_Γ b₁` at (t, W).
    pub fn reaction_diag(&self, mesh: &Mesh, t: f64, w: f64) -> Vec<f64> {
        scalar_pair_diag(mesh, &self.a1, &self.b1, t, w)
    }

    /// Diagonal noise form `w_G a₂ + Pᵀ w_Γ b₂` at (t, W).
    pub fn noise_diag(&self, mesh: &Mesh, t: f64, w: f64) -> Vec<f64> {
        scalar_pair_diag(mesh, &self.a2, &self.b2, t, w)
    }

    /// Sampled sup-norms over the space-time grid (and the recombining W lattice when the
    /// scalars depend on W). These are lower bounds of the essential suprema.
    pub fn sup_norms(&self, mesh: &Mesh, grid: &TimeGrid) -> CoefficientNorms {
        let mut n = CoefficientNorms::default();
        let sq = grid.dt().sqrt();
        for level in 0..=grid.n_t {
            let t = grid.t(level);
            let ws: Vec<f64> = if self.depends_on_noise() {
                (0..=level).map(|k| (level as f64 - 2.0 * k as f64) * sq).collect()
            } else {
                vec![0.0]
            };
            for &w in &ws {
                for &p in &mesh.nodes {
                    n.a1 = n.a1.max(self.a1.eval(t, p, w).abs());
                    n.a2 = n.a2.max(self.a2.eval(t, p, w).abs());
                }
                for &i in &mesh.boundary {
                    let p = mesh.nodes[i];
                    n.b1 = n.b1.max(self.b1.eval(t, p, w).abs());
                    n.b2 = n.b2.max(self.b2.eval(t, p, w).abs());
                }
            }
            for &p in &mesh.nodes {
                let b = self.b.eval(t, p);
                n.b = n.b.max(b[0].hypot(b[1]));
            }
            if mesh.geometry.dimension() == 2 {
                for &i in &mesh.boundary {
                    let b = self.b_gamma.eval(t, mesh.nodes[i]);
                    n.b_gamma = n.b_gamma.max(b[0].hypot(b[1]));
                }
            }
        }
        if mesh.geometry.dimension() == 1 {
            n.b = 0.0;
            for &p in &mesh.nodes {
                for level in 0..=grid.n_t {
                    n.b = n.b.max(self.b.eval(grid.t(level), p)[0].abs());
                }
            }
        }
        n
    }
}

fn scalar_pair_diag(mesh: &Mesh, bulk: &Expr, surf: &Expr, t: f64, w: f64) -> Vec<f64> {
    let mut d: Vec<f64> = mesh.nodes.iter().zip(&mesh.bulk_weights).map(|(&p, wg)| wg * bulk.eval(t, p, w)).collect();
    for (&i, ws) in mesh.boundary.iter().zip(&mesh.surf_weights) {
        d[i] += ws * surf.eval(t, mesh.nodes[i], w);
    }
    d
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoefficientNorms {
    pub a1: f64,
    pub a2: f64,
    pub b: f64,
    pub b1: f64,
    pub b2: f64,
    pub b_gamma: f64,
}

/// Smallest eigenvalue of A over sampled (t, node), and of A_Γ along the tangent on Γ.
/// Fails on asymmetry or a non-positive minimum.
pub fn check_ellipticity(coeffs: &CoefficientSet, mesh: &Mesh, grid: &TimeGrid) -> Result<f64> {
    let mut beta = f64::INFINITY;
    let dim = mesh.geometry.dimension();
    for level in 0..=grid.n_t {
        let t = grid.t(level);
        for (i, &p) in mesh.nodes.iter().enumerate() {
            let a = coeffs.a.eval(t, p);
            if (a[0][1] - a[1][0]).abs() > 1e-12 * (1.0 + a[0][1].abs()) {
                return Err(Error::NonSymmetric(format!("bulk node {i}, t = {t}")));
            }
            beta = beta.min(if dim == 1 { a[0][0] } else { sym_min_eig(a) });
        }
        if dim == 2 {
            for (k, (&i, tau)) in mesh.boundary.iter().zip(&mesh.tangents).enumerate() {
                let a = coeffs.a_gamma.eval(t, mesh.nodes[i]);
                if (a[0][1] - a[1][0]).abs() > 1e-12 * (1.0 + a[0][1].abs()) {
                    return Err(Error::NonSymmetric(format!("boundary node {k}, t = {t}")));
                }
                let q = tau[0] * (a[0][0] * tau[0] + a[0][1] * tau[1]) + tau[1] * (a[1][0] * tau[0] + a[1][1] * tau[1]);
                beta = beta.min(q);
            }
        }
    }
    if beta <= 0.0 {
        return Err(Error::Ellipticity { min_eig: beta, beta: 0.0, location: "sampled grid".into() });
    }
    Ok(beta)
}

/// K = 1 + 1/T + |a₁|^{2/3} + T|a₁| + |b₁|^{2/3} + T|b₁| + (1+T)(|a₂|² + |B|² + |b₂|² + |B_Γ|²).
pub fn cost_constant_k(n: &CoefficientNorms, horizon: f64) -> f64 {
    let t = horizon;
    1.0 + 1.0 / t + n.a1.powf(2.0 / 3.0) + t * n.a1 + n.b1.powf(2.0 / 3.0) + t * n.b1
        + (1.0 + t) * (n.a2 * n.a2 + n.b * n.b + n.b2 * n.b2 + n.b_gamma * n.b_gamma)
}

/// λ₁ = C [T + T²(1 + |a₁|^{2/3} + |a₂|² + |B|² + |b₁|^{2/3} + |b₂|² + |B_Γ|²)].
pub fn lambda_min(n: &CoefficientNorms, horizon: f64, c: f64) -> f64 {
    let t = horizon;
    c * (t + t * t
        * (1.0 + n.a1.powf(2.0 / 3.0) + n.a2 * n.a2 + n.b * n.b + n.b1.powf(2.0 / 3.0) + n.b2 * n.b2 + n.b_gamma * n.b_gamma))
}

/// r₂ = |a₁| + |a₂|² + |B|² + |b₁| + |b₂|² + |B_Γ|².
pub fn dissipation_rate(n: &CoefficientNorms) -> f64 {
    n.a1 + n.a2 * n.a2 + n.b * n.b + n.b1 + n.b2 * n.b2 + n.b_gamma * n.b_gamma
}
