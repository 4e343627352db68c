//! Bulk–surface meshes, pair fields, inner products and assembly of the coupled weak forms.
//!
//! The discrete state of an ℍ¹ pair is the vector of bulk nodal values; the surface
//! component is its trace on the boundary nodes. Operators act on that state vector with
//! the surface contributions folded in through the trace map.

use crate::coefficients::CoefficientSet;
use crate::error::{check_len, Error, Result};
use crate::linalg::{csr_from_triplets, Sparse};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Domain {
    Interval { a: f64, b: f64 },
    Disk { radius: f64 },
}

/// Control region G₀. `Annulus` with `r0 = 0` is the centred disc `{r < r1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Region {
    SubInterval { lo: f64, hi: f64 },
    Annulus { r0: f64, r1: f64 },
}

impl Region {
    /// Open-set membership.
    pub fn contains(&self, p: Point) -> bool {
        match *self {
            Region::SubInterval { lo, hi } => p[0] > lo && p[0] < hi,
            Region::Annulus { r0, r1 } => {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                (r > r0 || (r0 == 0.0 && r == 0.0)) && r < r1
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub domain: Domain,
    pub control: Region,
}

impl Geometry {
    pub fn new(domain: Domain, control: Region) -> Result<Self> {
        let g = Geometry { domain, control };
        g.validate()?;
        Ok(g)
    }

    pub fn interval(a: f64, b: f64, lo: f64, hi: f64) -> Result<Self> {
        Self::new(Domain::Interval { a, b }, Region::SubInterval { lo, hi })
    }

    pub fn disk(radius: f64, r0: f64, r1: f64) -> Result<Self> {
        Self::new(Domain::Disk { radius }, Region::Annulus { r0, r1 })
    }

    pub fn validate(&self) -> Result<()> {
        match (self.domain, self.control) {
            (Domain::Interval { a, b }, Region::SubInterval { lo, hi }) => {
                if !(b > a) || !a.is_finite() || !b.is_finite() {
                    return Err(Error::Geometry(format!("interval ({a}, {b}) has no length")));
                }
                if !(a < lo && lo < hi && hi < b) {
                    return Err(Error::Geometry(format!(
                        "control interval ({lo}, {hi}) must satisfy {a} < lo < hi < {b}"
                    )));
                }
                Ok(())
            }
            (Domain::Disk { radius }, Region::Annulus { r0, r1 }) => {
                if !(radius > 0.0) || !radius.is_finite() {
                    return Err(Error::Geometry(format!("disk radius {radius} must be positive")));
                }
                if !(0.0 <= r0 && r0 < r1 && r1 < radius) {
                    return Err(Error::Geometry(format!(
                        "control annulus ({r0}, {r1}) must satisfy 0 <= r0 < r1 < {radius}"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Geometry("control region kind does not match the domain".into())),
        }
    }

    pub fn bulk_measure(&self) -> f64 {
        match self.domain {
            Domain::Interval { a, b } => b - a,
            Domain::Disk { radius } => PI * radius * radius,
        }
    }

    pub fn surface_measure(&self) -> f64 {
        match self.domain {
            Domain::Interval { .. } => 2.0,
            Domain::Disk { radius } => 2.0 * PI * radius,
        }
    }

    pub fn dimension(&self) -> usize {
        match self.domain {
            Domain::Interval { .. } => 1,
            Domain::Disk { .. } => 2,
        }
    }
}

/// A finite-volume edge between two nodes. `volume` is the dual-face area times the edge
/// length, so `Σ_e volume · (d·∇u)²` approximates `∫|∇u|²`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub volume: f64,
    pub length: f64,
    pub dir: Point,
    pub mid: Point,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mesh {
    pub geometry: Geometry,
    pub nodes: Vec<Point>,
    /// Bulk index of each boundary node (the trace map).
    pub boundary: Vec<usize>,
    pub normals: Vec<Point>,
    pub tangents: Vec<Point>,
    pub h: f64,
    pub bulk_weights: Vec<f64>,
    pub surf_weights: Vec<f64>,
    pub control_mask: Vec<bool>,
    pub edges: Vec<Edge>,
    /// Edges along Γ; `i`, `j` index boundary nodes.
    pub surf_edges: Vec<Edge>,
    pub polar: Option<(usize, usize)>,
}

/// Builds a mesh. For the Disk, `n_x` is the number of rings and the grid has `2·n_x` angles.
pub fn build_mesh(geometry: &Geometry, n_x: usize) -> Result<Mesh> {
    if n_x < 8 {
        return Err(Error::Invalid(format!("n_x = {n_x} must be at least 8")));
    }
    match geometry.domain {
        Domain::Interval { .. } => build_interval(geometry, n_x),
        Domain::Disk { .. } => build_polar(geometry, n_x, 2 * n_x),
    }
}

/// Polar Disk mesh with `n_r` rings (plus the pole) and `n_theta` angles.
pub fn build_mesh_polar(geometry: &Geometry, n_r: usize, n_theta: usize) -> Result<Mesh> {
    match geometry.domain {
        Domain::Disk { .. } => build_polar(geometry, n_r, n_theta),
        Domain::Interval { .. } => build_interval(geometry, n_r),
    }
}

fn build_interval(geometry: &Geometry, n_x: usize) -> Result<Mesh> {
    geometry.validate()?;
    let (a, b) = match geometry.domain {
        Domain::Interval { a, b } => (a, b),
        _ => unreachable!(),
    };
    if n_x < 3 {
        return Err(Error::Invalid("interval mesh needs at least 3 nodes".into()));
    }
    let h = (b - a) / (n_x - 1) as f64;
    let nodes: Vec<Point> = (0..n_x)
        .map(|i| {
            let x = if i == n_x - 1 { b } else { a + i as f64 * h };
            [x, 0.0]
        })
        .collect();
    let mut bulk_weights = vec![h; n_x];
    bulk_weights[0] = h / 2.0;
    bulk_weights[n_x - 1] = h / 2.0;
    let edges = (0..n_x - 1)
        .map(|i| Edge {
            i,
            j: i + 1,
            volume: h,
            length: h,
            dir: [1.0, 0.0],
            mid: [0.5 * (nodes[i][0] + nodes[i + 1][0]), 0.0],
        })
        .collect();
    let control_mask = nodes.iter().map(|&p| geometry.control.contains(p)).collect();
    let mesh = Mesh {
        geometry: *geometry,
        nodes,
        boundary: vec![0, n_x - 1],
        normals: vec![[-1.0, 0.0], [1.0, 0.0]],
        tangents: vec![[0.0, 0.0], [0.0, 0.0]],
        h,
        bulk_weights,
        surf_weights: vec![1.0, 1.0],
        control_mask,
        edges,
        surf_edges: Vec::new(),
        polar: None,
    };
    mesh.check_control_interior()?;
    Ok(mesh)
}

fn build_polar(geometry: &Geometry, n_r: usize, n_theta: usize) -> Result<Mesh> {
    geometry.validate()?;
    let radius = match geometry.domain {
        Domain::Disk { radius } => radius,
        _ => unreachable!(),
    };
    if n_r < 2 || n_theta < 8 {
        return Err(Error::Invalid(format!("polar grid {n_r}x{n_theta} too coarse (need n_r >= 2, n_theta >= 8)")));
    }
    let hr = radius / n_r as f64;
    let dth = 2.0 * PI / n_theta as f64;
    let idx = |j: usize, k: usize| 1 + (j - 1) * n_theta + (k % n_theta);
    let angle = |k: usize| k as f64 * dth;
    let unit = |th: f64| [th.cos(), th.sin()];

    let mut nodes = vec![[0.0, 0.0]];
    let mut bulk_weights = vec![PI * (hr / 2.0) * (hr / 2.0)];
    for j in 1..=n_r {
        let r = if j == n_r { radius } else { j as f64 * hr };
        let area = if j == n_r {
            PI * (radius * radius - (radius - hr / 2.0).powi(2)) / n_theta as f64
        } else {
            2.0 * PI * r * hr / n_theta as f64
        };
        for k in 0..n_theta {
            let u = unit(angle(k));
            nodes.push([r * u[0], r * u[1]]);
            bulk_weights.push(area);
        }
    }

    let mut edges = Vec::new();
    for k in 0..n_theta {
        let u = unit(angle(k));
        edges.push(Edge {
            i: 0,
            j: idx(1, k),
            volume: (hr / 2.0) * dth * hr,
            length: hr,
            dir: u,
            mid: [0.5 * hr * u[0], 0.5 * hr * u[1]],
        });
    }
    for j in 1..n_r {
        let rh = (j as f64 + 0.5) * hr;
        for k in 0..n_theta {
            let u = unit(angle(k));
            edges.push(Edge {
                i: idx(j, k),
                j: idx(j + 1, k),
                volume: rh * dth * hr,
                length: hr,
                dir: u,
                mid: [rh * u[0], rh * u[1]],
            });
        }
    }
    for j in 1..=n_r {
        let r = j as f64 * hr;
        let face = if j == n_r { hr / 2.0 } else { hr };
        for k in 0..n_theta {
            let th = angle(k) + 0.5 * dth;
            let len = r * dth;
            edges.push(Edge {
                i: idx(j, k),
                j: idx(j, k + 1),
                volume: face * len,
                length: len,
                dir: [-th.sin(), th.cos()],
                mid: [r * th.cos(), r * th.sin()],
            });
        }
    }

    let boundary: Vec<usize> = (0..n_theta).map(|k| idx(n_r, k)).collect();
    let normals: Vec<Point> = (0..n_theta).map(|k| unit(angle(k))).collect();
    let tangents: Vec<Point> = normals.iter().map(|n| [-n[1], n[0]]).collect();
    let surf_len = radius * dth;
    let surf_edges = (0..n_theta)
        .map(|k| {
            let th = angle(k) + 0.5 * dth;
            Edge {
                i: k,
                j: (k + 1) % n_theta,
                volume: surf_len,
                length: surf_len,
                dir: [-th.sin(), th.cos()],
                mid: [radius * th.cos(), radius * th.sin()],
            }
        })
        .collect();
    let control_mask = nodes.iter().map(|&p| geometry.control.contains(p)).collect();
    let mesh = Mesh {
        geometry: *geometry,
        nodes,
        boundary,
        normals,
        tangents,
        h: hr.max(radius * dth),
        bulk_weights,
        surf_weights: vec![surf_len; n_theta],
        control_mask,
        edges,
        surf_edges,
        polar: Some((n_r, n_theta)),
    };
    mesh.check_control_interior()?;
    Ok(mesh)
}

/// Uniform time grid on [0, T].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_t: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_t: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Invalid(format!("horizon {horizon} must be positive")));
        }
        if n_t < 2 {
            return Err(Error::Invalid(format!("n_t = {n_t} must be at least 2")));
        }
        Ok(TimeGrid { horizon, n_t })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.n_t {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }
}

/// A pair (bulk values, boundary values) representing (z, z_Γ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BulkSurfaceField {
    pub bulk: Vec<f64>,
    pub surf: Vec<f64>,
}

impl BulkSurfaceField {
    pub fn zeros(mesh: &Mesh) -> Self {
        BulkSurfaceField { bulk: vec![0.0; mesh.n_bulk()], surf: vec![0.0; mesh.n_surf()] }
    }

    pub fn constant(mesh: &Mesh, bulk: f64, surf: f64) -> Self {
        BulkSurfaceField { bulk: vec![bulk; mesh.n_bulk()], surf: vec![surf; mesh.n_surf()] }
    }

    /// Nodal interpolation of `f`; the surface part is read at the boundary nodes.
    pub fn interpolate(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Self {
        let bulk: Vec<f64> = mesh.nodes.iter().map(|&p| f(p)).collect();
        let surf = mesh.trace(&bulk);
        BulkSurfaceField { bulk, surf }
    }

    pub fn scale(&self, s: f64) -> Self {
        BulkSurfaceField {
            bulk: self.bulk.iter().map(|v| s * v).collect(),
            surf: self.surf.iter().map(|v| s * v).collect(),
        }
    }
}

impl Mesh {
    pub fn n_bulk(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_surf(&self) -> usize {
        self.boundary.len()
    }

    fn check_control_interior(&self) -> Result<()> {
        if !self.control_mask.iter().any(|&m| m) {
            return Err(Error::Geometry("control region contains no mesh node".into()));
        }
        for &b in &self.boundary {
            if self.control_mask[b] {
                return Err(Error::Geometry("control region touches the boundary".into()));
            }
        }
        Ok(())
    }

    /// Trace map: bulk values at the boundary nodes.
    pub fn trace(&self, bulk: &[f64]) -> Vec<f64> {
        self.boundary.iter().map(|&i| bulk[i]).collect()
    }

    /// Adjoint of the trace map: scatter surface values onto their bulk nodes.
    pub fn trace_adjoint(&self, surf: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bulk()];
        for (s, &i) in surf.iter().zip(&self.boundary) {
            out[i] += s;
        }
        out
    }

    /// Lumped mass of the coupled pair: `diag(w_G) + Pᵀ diag(w_Γ) P`.
    pub fn pair_mass(&self) -> Vec<f64> {
        let mut m = self.bulk_weights.clone();
        for (w, &i) in self.surf_weights.iter().zip(&self.boundary) {
            m[i] += w;
        }
        m
    }

    /// Bulk quadrature weights restricted to G₀.
    pub fn control_weights(&self) -> Vec<f64> {
        self.bulk_weights
            .iter()
            .zip(&self.control_mask)
            .map(|(&w, &m)| if m { w } else { 0.0 })
            .collect()
    }

    pub fn state_to_field(&self, u: &[f64]) -> BulkSurfaceField {
        BulkSurfaceField { bulk: u.to_vec(), surf: self.trace(u) }
    }

    /// 𝕃²-projection of a pair onto trace-compatible states; the identity on compatible pairs.
    pub fn field_to_state(&self, f: &BulkSurfaceField) -> Result<Vec<f64>> {
        self.check_field(f)?;
        let m = self.pair_mass();
        let mut u: Vec<f64> = f.bulk.iter().zip(&self.bulk_weights).map(|(v, w)| v * w).collect();
        for ((s, w), &i) in f.surf.iter().zip(&self.surf_weights).zip(&self.boundary) {
            u[i] += w * s;
        }
        for (ui, mi) in u.iter_mut().zip(&m) {
            *ui /= mi;
        }
        Ok(u)
    }

    pub fn check_field(&self, f: &BulkSurfaceField) -> Result<()> {
        check_len(self.n_bulk(), f.bulk.len())?;
        check_len(self.n_surf(), f.surf.len())
    }

    /// Largest deviation between `surf` and the trace of `bulk`.
    pub fn trace_defect(&self, f: &BulkSurfaceField) -> f64 {
        self.trace(&f.bulk).iter().zip(&f.surf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Inner product of states `uᵀ M v` with the lumped pair mass.
    pub fn state_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut s: f64 = u.iter().zip(v).zip(&self.bulk_weights).map(|((a, b), w)| a * b * w).sum();
        for (w, &i) in self.surf_weights.iter().zip(&self.boundary) {
            s += w * u[i] * v[i];
        }
        s
    }

    /// Bulk-surface edge gradient energy `Σ_e V_e ((u_j−u_i)/ℓ_e)²` with optional per-edge weights.
    pub fn gradient_energy(&self, u: &[f64], bulk_weight: impl Fn(&Edge) -> f64, surf_weight: impl Fn(&Edge) -> f64) -> (f64, f64) {
        let bulk = self
            .edges
            .iter()
            .map(|e| {
                let g = (u[e.j] - u[e.i]) / e.length;
                bulk_weight(e) * e.volume * g * g
            })
            .sum();
        let surf = self
            .surf_edges
            .iter()
            .map(|e| {
                let g = (u[self.boundary[e.j]] - u[self.boundary[e.i]]) / e.length;
                surf_weight(e) * e.volume * g * g
            })
            .sum();
        (bulk, surf)
    }

    /// Serializable summary for JSON dumps.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "geometry": self.geometry,
            "n_bulk": self.n_bulk(),
            "n_surf": self.n_surf(),
            "h": self.h,
            "nodes": self.nodes,
            "boundary": self.boundary,
            "control_mask": self.control_mask,
            "bulk_weights": self.bulk_weights,
            "surf_weights": self.surf_weights,
        })
    }
}

/// 𝕃² inner product of two pairs: bulk quadrature plus surface quadrature.
pub fn inner_l2(u: &BulkSurfaceField, v: &BulkSurfaceField, mesh: &Mesh) -> Result<f64> {
    mesh.check_field(u)?;
    mesh.check_field(v)?;
    let bulk: f64 = u.bulk.iter().zip(&v.bulk).zip(&mesh.bulk_weights).map(|((a, b), w)| a * b * w).sum();
    let surf: f64 = u.surf.iter().zip(&v.surf).zip(&mesh.surf_weights).map(|((a, b), w)| a * b * w).sum();
    Ok(bulk + surf)
}

/// Discrete operators at one time level. Surface matrices live on boundary indices; the
/// `coupled_*` accessors fold them onto the bulk state through the trace map.
#[derive(Clone, Debug)]
pub struct DiscreteOperators {
    pub mass_bulk: Vec<f64>,
    pub mass_surf: Vec<f64>,
    pub stiffness_bulk: Sparse,
    pub stiffness_surf: Sparse,
    pub convection_bulk: Sparse,
    pub convection_surf: Sparse,
    /// Diagonal reaction forms `w_G a₁` and `w_Γ b₁`.
    pub reaction_bulk: Vec<f64>,
    pub reaction_surf: Vec<f64>,
}

/// Assembles every operator at time `t` with tree-measurable scalars evaluated at `W = 0`.
pub fn assemble_operators(mesh: &Mesh, coeffs: &CoefficientSet, t: f64) -> Result<DiscreteOperators> {
    let (mass_bulk, mass_surf) = (mesh.bulk_weights.clone(), mesh.surf_weights.clone());
    let stiffness_bulk = bulk_stiffness(mesh, coeffs, t)?;
    let stiffness_surf = surface_stiffness(mesh, coeffs, t)?;
    let (convection_bulk, convection_surf) = convection_parts(mesh, coeffs, t)?;
    let reaction_bulk = mesh.nodes.iter().zip(&mesh.bulk_weights).map(|(&p, w)| w * coeffs.a1.eval(t, p, 0.0)).collect();
    let reaction_surf = mesh
        .boundary
        .iter()
        .zip(&mesh.surf_weights)
        .map(|(&i, w)| w * coeffs.b1.eval(t, mesh.nodes[i], 0.0))
        .collect();
    Ok(DiscreteOperators {
        mass_bulk,
        mass_surf,
        stiffness_bulk,
        stiffness_surf,
        convection_bulk,
        convection_surf,
        reaction_bulk,
        reaction_surf,
    })
}

impl DiscreteOperators {
    pub fn coupled_stiffness(&self, mesh: &Mesh) -> Sparse {
        fold_surface(mesh, &self.stiffness_bulk, &self.stiffness_surf)
    }

    pub fn coupled_convection(&self, mesh: &Mesh) -> Sparse {
        fold_surface(mesh, &self.convection_bulk, &self.convection_surf)
    }
}

/// `K_bulk + Pᵀ K_surf P`.
pub fn fold_surface(mesh: &Mesh, bulk: &Sparse, surf: &Sparse) -> Sparse {
    let mut t: Vec<(usize, usize, f64)> = bulk.triplet_iter().map(|(i, j, v)| (i, j, *v)).collect();
    for (i, j, v) in surf.triplet_iter() {
        t.push((mesh.boundary[i], mesh.boundary[j], *v));
    }
    csr_from_triplets(mesh.n_bulk(), mesh.n_bulk(), &t)
}

fn quad_form(a: [[f64; 2]; 2], d: Point) -> f64 {
    d[0] * (a[0][0] * d[0] + a[0][1] * d[1]) + d[1] * (a[1][0] * d[0] + a[1][1] * d[1])
}

fn edge_stiffness(n: usize, edges: &[Edge], coef: impl Fn(&Edge) -> f64) -> Sparse {
    let mut t = Vec::with_capacity(4 * edges.len());
    for e in edges {
        let k = e.volume / (e.length * e.length) * coef(e);
        t.push((e.i, e.i, k));
        t.push((e.j, e.j, k));
        t.push((e.i, e.j, -k));
        t.push((e.j, e.i, -k));
    }
    csr_from_triplets(n, n, &t)
}

/// Bulk stiffness for A at time `t`. Checks ellipticity at every node.
pub fn bulk_stiffness(mesh: &Mesh, coeffs: &CoefficientSet, t: f64) -> Result<Sparse> {
    let dim = mesh.geometry.dimension();
    for (i, &p) in mesh.nodes.iter().enumerate() {
        let a = coeffs.a.eval(t, p);
        if (a[0][1] - a[1][0]).abs() > 1e-12 * (1.0 + a[0][1].abs()) {
            return Err(Error::NonSymmetric(format!("bulk node {i}, t = {t}")));
        }
        let min_eig = if dim == 1 { a[0][0] } else { sym_min_eig(a) };
        if min_eig < coeffs.beta * (1.0 - 1e-12) {
            return Err(Error::Ellipticity { min_eig, beta: coeffs.beta, location: format!("bulk node {i}, t = {t}") });
        }
    }
    Ok(edge_stiffness(mesh.n_bulk(), &mesh.edges, |e| quad_form(coeffs.a.eval(t, e.mid), e.dir)))
}

/// Surface (Laplace–Beltrami) stiffness for A_Γ at time `t`, on boundary indices.
pub fn surface_stiffness(mesh: &Mesh, coeffs: &CoefficientSet, t: f64) -> Result<Sparse> {
    for (k, (&i, tau)) in mesh.boundary.iter().zip(&mesh.tangents).enumerate() {
        if mesh.surf_edges.is_empty() {
            break;
        }
        let a = coeffs.a_gamma.eval(t, mesh.nodes[i]);
        if (a[0][1] - a[1][0]).abs() > 1e-12 * (1.0 + a[0][1].abs()) {
            return Err(Error::NonSymmetric(format!("boundary node {k}, t = {t}")));
        }
        let q = quad_form(a, *tau);
        if q < coeffs.beta * (1.0 - 1e-12) {
            return Err(Error::Ellipticity { min_eig: q, beta: coeffs.beta, location: format!("boundary node {k}, t = {t}") });
        }
    }
    Ok(edge_stiffness(mesh.n_surf(), &mesh.surf_edges, |e| quad_form(coeffs.a_gamma.eval(t, e.mid), e.dir)))
}

pub(crate) fn sym_min_eig(a: [[f64; 2]; 2]) -> f64 {
    let tr = a[0][0] + a[1][1];
    let disc = ((a[0][0] - a[1][1]).powi(2) / 4.0 + a[0][1] * a[1][0]).max(0.0).sqrt();
    tr / 2.0 - disc
}

/// Checks that a surface vector field is tangential; on the Interval Γ has no tangent space.
pub fn check_tangential(mesh: &Mesh, f_gamma: &[Point]) -> Result<()> {
    check_len(mesh.n_surf(), f_gamma.len())?;
    for (k, (f, n)) in f_gamma.iter().zip(&mesh.normals).enumerate() {
        let scale = 1.0 + f[0].abs() + f[1].abs();
        let normal = match mesh.geometry.domain {
            Domain::Interval { .. } => f[0].abs() + f[1].abs(),
            Domain::Disk { .. } => (f[0] * n[0] + f[1] * n[1]).abs(),
        };
        if normal > 1e-12 * scale {
            return Err(Error::NonTangential { node: k, normal });
        }
    }
    Ok(())
}

/// Edge form `Σ_e (V_e/ℓ_e) (η_j−η_i) · ½(F_i·d_e + F_j·d_e)` as a sparse matrix acting on
/// the nodal scalar multiplying the vector field.
fn edge_flux_matrix(n: usize, edges: &[Edge], field: &[Point]) -> Sparse {
    let mut t = Vec::with_capacity(4 * edges.len());
    for e in edges {
        let s = e.volume / e.length * 0.5;
        let fi = s * (field[e.i][0] * e.dir[0] + field[e.i][1] * e.dir[1]);
        let fj = s * (field[e.j][0] * e.dir[0] + field[e.j][1] * e.dir[1]);
        t.push((e.j, e.i, fi));
        t.push((e.j, e.j, fj));
        t.push((e.i, e.i, -fi));
        t.push((e.i, e.j, -fj));
    }
    csr_from_triplets(n, n, &t)
}

/// Convection forms: `ηᵀ C z = ∫ z B·∇η dx + ∫_Γ z_Γ B_Γ·∇_Γ η_Γ dσ`.
pub fn convection_parts(mesh: &Mesh, coeffs: &CoefficientSet, t: f64) -> Result<(Sparse, Sparse)> {
    let b: Vec<Point> = mesh.nodes.iter().map(|&p| coeffs.b.eval(t, p)).collect();
    let bg: Vec<Point> = mesh.boundary.iter().map(|&i| coeffs.b_gamma.eval(t, mesh.nodes[i])).collect();
    check_tangential(mesh, &bg)?;
    Ok((edge_flux_matrix(mesh.n_bulk(), &mesh.edges, &b), edge_flux_matrix(mesh.n_surf(), &mesh.surf_edges, &bg)))
}

/// Coefficients of the load functional `η ↦ −∫_G F·∇η dx − ∫_Γ F_Γ·∇_Γ η_Γ dσ`, split into a
/// bulk part and a surface part. The boundary pairing ⟨F·ν, η_Γ⟩ never appears: it cancels
/// against the explicit −F·ν surface source of the coupled system.
pub fn weak_divergence_load(f: &[Point], f_gamma: &[Point], mesh: &Mesh) -> Result<BulkSurfaceField> {
    check_len(mesh.n_bulk(), f.len())?;
    check_tangential(mesh, f_gamma)?;
    let mut bulk = vec![0.0; mesh.n_bulk()];
    for e in &mesh.edges {
        let fd = 0.5 * ((f[e.i][0] + f[e.j][0]) * e.dir[0] + (f[e.i][1] + f[e.j][1]) * e.dir[1]);
        let s = e.volume / e.length * fd;
        bulk[e.j] -= s;
        bulk[e.i] += s;
    }
    let mut surf = vec![0.0; mesh.n_surf()];
    for e in &mesh.surf_edges {
        let fd = 0.5 * ((f_gamma[e.i][0] + f_gamma[e.j][0]) * e.dir[0] + (f_gamma[e.i][1] + f_gamma[e.j][1]) * e.dir[1]);
        let s = e.volume / e.length * fd;
        surf[e.j] -= s;
        surf[e.i] += s;
    }
    Ok(BulkSurfaceField { bulk, surf })
}

/// Folds a split load (bulk part, surface part) onto the state vector.
pub fn fold_load(mesh: &Mesh, load: &BulkSurfaceField) -> Vec<f64> {
    let mut out = load.bulk.clone();
    for (s, &i) in load.surf.iter().zip(&mesh.boundary) {
        out[i] += s;
    }
    out
}
