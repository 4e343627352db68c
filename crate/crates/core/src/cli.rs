//! Experiment driver: JSON configuration with dotted overrides, subcommand dispatch and
//! structured outputs (manifest.json, report.json, CSV and gnuplot data files).
//!
//! Exit codes: 0 success, 2 configuration error, 3 invariant failure, 4 numerical failure.

use crate::backward::{duality_residual, solve_backward};
use crate::coefficients::{check_ellipticity, cost_constant_k, dissipation_rate, CoefficientSet, Expr};
use crate::control::{aux_control, hum_continuation, null_control_report, AuxOptions, HumOptions, PenalizedProblem};
use crate::error::{Error, Result};
use crate::forward::{coupled_eigenbasis, energy_estimate_check, solve_forward, Propagator, SourceSet};
use crate::geometry::{build_mesh, build_mesh_polar, BulkSurfaceField, Domain, Geometry, Mesh, Region, TimeGrid};
use crate::linalg::{write_matrix_market, SolverOptions};
use crate::noise::{build_tree, NoiseSource, NoiseTree, PathEnsemble};
use crate::verify::{
    carleman_threshold, verify_carleman, verify_dissipation, verify_duality, verify_observability, ObservabilityOptions,
};
use crate::weights::{check_weight_bounds, make_psi, CarlemanWeights, TimeClamp};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Default output directory when neither `--out` nor `output.dir` is given.
pub const OUT_DIR_ENV: &str = "STOCHDYN_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "stochdyn", version, about = "Stochastic bulk-surface parabolic systems: simulation, null control, estimate checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set mesh.n_x=33` (value parsed as JSON, else string).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for Monte Carlo paths and random ensemble members.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// Solve the forward system from the configured initial state.
    SimulateForward,
    /// Solve the backward system from the configured terminal state.
    SimulateBackward,
    /// Penalized HUM controls over the ε schedule and the null-control check.
    HumControl,
    /// Auxiliary weighted control problem and its estimate.
    AuxControl,
    /// Weighted estimate ratios over a λ sweep.
    VerifyCarleman,
    /// Observability constants over several horizons.
    VerifyObservability,
    /// Forward/backward duality residual and transpose defect.
    VerifyDuality,
    /// Energy decay against the exponential bound.
    VerifyDissipation,
    /// Weight function properties and bounds.
    WeightsReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SimulateForward => "simulate-forward",
            Command::SimulateBackward => "simulate-backward",
            Command::HumControl => "hum-control",
            Command::AuxControl => "aux-control",
            Command::VerifyCarleman => "verify-carleman",
            Command::VerifyObservability => "verify-observability",
            Command::VerifyDuality => "verify-duality",
            Command::VerifyDissipation => "verify-dissipation",
            Command::WeightsReport => "weights-report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Interval nodes, or radial rings on the disk.
    pub n_x: usize,
    /// Angular nodes on the disk; default `2 n_x`.
    pub n_theta: Option<usize>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { n_x: 17, n_theta: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub horizon: f64,
    pub n_t: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { horizon: 1.0, n_t: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientConfig {
    /// One of `zero`, `constant`, `shear-convection`; ignored when `custom` is set.
    pub preset: String,
    pub custom: Option<CoefficientSet>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        CoefficientConfig { preset: "zero".into(), custom: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseBackend {
    Tree,
    Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub backend: NoiseBackend,
    pub recombining: bool,
    pub paths: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { backend: NoiseBackend::Tree, recombining: false, paths: 256, seed: 0 }
    }
}

/// Deterministic initial state (forward runs) or terminal state (backward runs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StateConfig {
    Zero,
    Constant { value: f64 },
    /// Eigenfunction of the unit-coefficient coupled operator, 0-based.
    Mode { index: usize, amplitude: f64 },
    /// Bulk and surface expressions in (x, y), projected onto the discrete state space.
    Field { bulk: Expr, surf: Option<Expr> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub mu: f64,
    /// Base λ of the sweep; default is the threshold λ₁.
    pub lambda: Option<f64>,
    /// Generic constant C in λ₁ = C[T + T²(…)].
    pub generic_c: f64,
    pub lambda_multipliers: Vec<f64>,
    pub clamp: TimeClamp,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig { mu: 2.0, lambda: None, generic_c: 1.0, lambda_multipliers: vec![2.0, 4.0, 8.0, 16.0], clamp: TimeClamp::Steps(1) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub eps: Vec<f64>,
    pub hum: HumOptions,
    /// Required |y(0)|/|y_T| at the smallest ε.
    pub null_threshold: f64,
    /// C in the cost bound e^{CK}|y_T|².
    pub bound_c: f64,
    pub aux_eps: f64,
    pub aux_mu: f64,
    pub aux_lambda: f64,
    pub aux_tol: f64,
    pub aux_max_iter: usize,
    pub aux_clamp: TimeClamp,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            eps: vec![1e-1, 1e-2, 1e-3, 1e-4],
            hum: HumOptions::default(),
            null_threshold: 1e-2,
            bound_c: 1.0,
            aux_eps: 1e-2,
            aux_mu: 1.05,
            aux_lambda: 1.5,
            aux_tol: 1e-12,
            aux_max_iter: 5000,
            aux_clamp: TimeClamp::Time(0.125),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Leading eigenfunctions included.
    pub modes: usize,
    /// Random smooth members (seeded combinations of the first eight modes).
    pub random: usize,
    /// Include the configured initial state.
    pub include_initial: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { modes: 3, random: 2, include_initial: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservabilityConfig {
    pub horizons: Vec<f64>,
    pub n_t: usize,
    pub max_pencil_dim: usize,
    pub truncate: bool,
}

impl Default for ObservabilityConfig {
    fn default() -> Self {
        let o = ObservabilityOptions::default();
        ObservabilityConfig { horizons: vec![0.2, 0.4, 0.8], n_t: o.n_t, max_pencil_dim: o.max_pencil_dim, truncate: o.truncate }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Write `trajectory.bin` for forward runs.
    pub trajectory: bool,
    /// Write Matrix Market files of the level-0 operators.
    pub matrices: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub duality: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { duality: 1e-10 }
    }
}

/// Full experiment configuration. Every field has a default, so `{}` is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub geometry: Geometry,
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub coefficients: CoefficientConfig,
    pub sources: Option<SourceSet>,
    pub noise: NoiseConfig,
    pub initial: StateConfig,
    pub weights: WeightConfig,
    pub control: ControlConfig,
    pub ensemble: EnsembleConfig,
    pub observability: ObservabilityConfig,
    pub solver: SolverOptions,
    /// Run past the convection step limit.
    pub force: bool,
    pub tolerances: Tolerances,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            geometry: Geometry { domain: Domain::Interval { a: 0.0, b: 1.0 }, control: Region::SubInterval { lo: 0.3, hi: 0.7 } },
            mesh: MeshConfig::default(),
            time: TimeConfig::default(),
            coefficients: CoefficientConfig::default(),
            sources: None,
            noise: NoiseConfig::default(),
            initial: StateConfig::Mode { index: 0, amplitude: 1.0 },
            weights: WeightConfig::default(),
            control: ControlConfig::default(),
            ensemble: EnsembleConfig::default(),
            observability: ObservabilityConfig::default(),
            solver: SolverOptions::default(),
            force: false,
            tolerances: Tolerances::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// SHA-256 of the resolved configuration without the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn schema(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

/// Sets `key` (dotted path) in a JSON object tree, creating intermediate objects.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| schema(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(schema(assignment, "empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (depth, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| schema(&parts[..depth].join("."), "not an object; cannot set a sub-key"))?;
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("loop returns on the last key")
}

/// Reads and resolves a configuration: file (or `{}`), then overrides, then the seed flag.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| schema("--config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| schema("--config", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(schema("", "configuration must be a JSON object"));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut root, &format!("noise.seed={s}"))?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        schema(if path == "." { "" } else { &path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(|e| schema("geometry", e.to_string()))?;
        if let Some(c) = &self.coefficients.custom {
            c.validate()?;
        } else if !crate::coefficients::PRESETS.contains(&self.coefficients.preset.as_str()) {
            return Err(schema("coefficients.preset", format!("unknown preset `{}`", self.coefficients.preset)));
        }
        if !(self.time.horizon > 0.0) {
            return Err(schema("time.horizon", "must be positive"));
        }
        if self.time.n_t < 2 {
            return Err(schema("time.n_t", "must be at least 2"));
        }
        if self.noise.backend == NoiseBackend::Paths && self.noise.paths == 0 {
            return Err(schema("noise.paths", "must be positive"));
        }
        if self.control.eps.is_empty() || self.control.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(schema("control.eps", "need at least one positive value"));
        }
        if !(self.weights.mu > 1.0) {
            return Err(schema("weights.mu", "must exceed 1"));
        }
        if self.weights.lambda_multipliers.is_empty() || self.weights.lambda_multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(schema("weights.lambda_multipliers", "need at least one positive value"));
        }
        if self.observability.horizons.iter().any(|t| !(*t > 0.0)) {
            return Err(schema("observability.horizons", "must be positive"));
        }
        Ok(())
    }
}

/// Resolved numerical objects shared by the subcommands.
struct Context {
    cfg: ExperimentConfig,
    mesh: Mesh,
    coeffs: CoefficientSet,
    grid: TimeGrid,
    prop: Propagator,
}

impl Context {
    fn new(cfg: ExperimentConfig) -> Result<Self> {
        let mesh = build_mesh_for(&cfg.geometry, &cfg.mesh)?;
        let coeffs = match &cfg.coefficients.custom {
            Some(c) => c.clone(),
            None => CoefficientSet::preset(&cfg.coefficients.preset, &cfg.geometry)?,
        };
        let grid = TimeGrid::new(cfg.time.horizon, cfg.time.n_t)?;
        check_ellipticity(&coeffs, &mesh, &grid)?;
        let prop = Propagator::new(&mesh, &coeffs, &grid, &cfg.solver)?;
        Ok(Context { cfg, mesh, coeffs, grid, prop })
    }

    fn tree(&self) -> Result<NoiseTree> {
        if self.cfg.noise.backend != NoiseBackend::Tree {
            return Err(schema("noise.backend", "this subcommand needs the tree backend"));
        }
        build_tree(self.grid.n_t, self.grid.horizon, self.cfg.noise.recombining)
    }

    fn noise(&self) -> Result<Box<dyn NoiseSource>> {
        Ok(match self.cfg.noise.backend {
            NoiseBackend::Tree => Box::new(self.tree()?),
            NoiseBackend::Paths => Box::new(PathEnsemble::new(self.cfg.noise.paths, self.grid.n_t, self.grid.horizon, self.cfg.noise.seed)?),
        })
    }

    fn state(&self, s: &StateConfig) -> Result<Vec<f64>> {
        state_from_config(&self.mesh, s)
    }

    fn sources(&self) -> Option<&SourceSet> {
        self.cfg.sources.as_ref().filter(|s| !s.is_zero())
    }

    /// Modes, seeded random smooth combinations, and optionally the initial state.
    fn ensemble(&self) -> Result<Vec<Vec<f64>>> {
        let e = &self.cfg.ensemble;
        let basis = coupled_eigenbasis(&self.mesh)?;
        let mut out: Vec<Vec<f64>> = basis.modes.iter().take(e.modes).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.noise.seed);
        let n_modes = basis.modes.len().min(8);
        for _ in 0..e.random {
            let mut z = vec![0.0; self.mesh.n_bulk()];
            for (j, mode) in basis.modes.iter().take(n_modes).enumerate() {
                let c: f64 = StandardNormal.sample(&mut rng);
                crate::linalg::axpy(c / (j + 1) as f64, mode, &mut z);
            }
            out.push(z);
        }
        if e.include_initial {
            out.push(self.state(&self.cfg.initial)?);
        }
        if out.is_empty() {
            return Err(schema("ensemble", "ensemble is empty"));
        }
        Ok(out)
    }

    fn lambda_base(&self) -> f64 {
        self.cfg.weights.lambda.unwrap_or_else(|| carleman_threshold(&self.coeffs, &self.mesh, &self.grid, self.cfg.weights.generic_c))
    }

    fn weights(&self, mu: f64, lambda: f64) -> Result<CarlemanWeights> {
        let psi = make_psi(&self.cfg.geometry, &self.cfg.geometry.control).map_err(|e| schema("geometry.control", e.to_string()))?;
        CarlemanWeights::new(psi, mu, lambda.max(1.0 + 1e-9), self.grid.horizon)
    }
}

fn build_mesh_for(g: &Geometry, m: &MeshConfig) -> Result<Mesh> {
    match g.domain {
        Domain::Interval { .. } => build_mesh(g, m.n_x),
        Domain::Disk { .. } => match m.n_theta {
            Some(nt) => build_mesh_polar(g, m.n_x, nt),
            None => build_mesh(g, m.n_x),
        },
    }
    .map_err(|e| schema("mesh", e.to_string()))
}

fn state_from_config(mesh: &Mesh, s: &StateConfig) -> Result<Vec<f64>> {
    Ok(match s {
        StateConfig::Zero => vec![0.0; mesh.n_bulk()],
        StateConfig::Constant { value } => vec![*value; mesh.n_bulk()],
        StateConfig::Mode { index, amplitude } => {
            let basis = coupled_eigenbasis(mesh)?;
            let mode = basis.modes.get(*index).ok_or_else(|| schema("initial.index", format!("only {} modes", basis.modes.len())))?;
            mode.iter().map(|v| amplitude * v).collect()
        }
        StateConfig::Field { bulk, surf } => {
            let b: Vec<f64> = mesh.nodes.iter().map(|&p| bulk.eval(0.0, p, 0.0)).collect();
            let s: Vec<f64> = match surf {
                Some(e) => mesh.boundary.iter().map(|&i| e.eval(0.0, mesh.nodes[i], 0.0)).collect(),
                None => mesh.trace(&b),
            };
            mesh.field_to_state(&BulkSurfaceField { bulk: b, surf: s })?
        }
    })
}

/// One asserted property of a run.
#[derive(Clone, Debug, Serialize)]
pub struct Invariant {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> Invariant {
    Invariant { name: name.into(), pass, detail }
}

/// A CSV table; the config hash is appended as the last column.
struct Table {
    name: String,
    header: Vec<&'static str>,
    rows: Vec<Vec<f64>>,
}

struct Outcome {
    results: Value,
    invariants: Vec<Invariant>,
    tables: Vec<Table>,
    /// gnuplot data files: (name, header, rows).
    data: Vec<Table>,
    binary: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    fn new(results: Value) -> Self {
        Outcome { results, invariants: Vec::new(), tables: Vec::new(), data: Vec::new(), binary: Vec::new() }
    }
}

fn finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

fn simulate_forward(ctx: &Context) -> Result<Outcome> {
    let noise = ctx.noise()?;
    let z0 = ctx.state(&ctx.cfg.initial)?;
    let traj = solve_forward(&ctx.prop, &z0, ctx.sources(), noise.as_ref(), ctx.cfg.force)?;
    let energy = energy_estimate_check(&traj, &ctx.mesh, noise.as_ref());
    let nt = ctx.grid.n_t;
    let mean_final = traj.mean(noise.as_ref(), nt);
    let mut out = Outcome::new(json!({
        "mesh": { "n_bulk": ctx.mesh.n_bulk(), "n_surf": ctx.mesh.n_surf(), "h": ctx.mesh.h },
        "energy": energy,
        "final_mean_energy": energy.l2_profile[nt],
        "final_mean_state_norm": ctx.mesh.state_inner(&mean_final, &mean_final).sqrt(),
    }));
    out.invariants.push(check("finite", finite(&energy.l2_profile) && energy.h1_ratio.is_finite(), format!("h1 ratio {:.6e}", energy.h1_ratio)));
    let r2 = dissipation_rate(&ctx.coeffs.sup_norms(&ctx.mesh, &ctx.grid));
    if r2 == 0.0 && ctx.sources().is_none() {
        let rep = verify_dissipation(&ctx.coeffs, &ctx.mesh, &ctx.grid, &traj, noise.as_ref());
        out.invariants.push(check("dissipation", rep.monotone, format!("max step increase {:.3e}", rep.max_increase)));
    }
    out.tables.push(Table {
        name: "forward_energy".into(),
        header: vec!["level", "t", "mean_energy"],
        rows: (0..=nt).map(|l| vec![l as f64, ctx.grid.t(l), energy.l2_profile[l]]).collect(),
    });
    if ctx.cfg.output.trajectory {
        let mut buf = Vec::new();
        traj.write_binary(&mut buf)?;
        out.binary.push(("trajectory.bin".into(), buf));
    }
    if ctx.cfg.output.matrices {
        for (name, m) in [("stiffness", ctx.prop.stiffness(0)), ("convection", ctx.prop.convection(0))] {
            let mut buf = Vec::new();
            write_matrix_market(m, &mut buf)?;
            out.binary.push((format!("{name}_level0.mtx"), buf));
        }
    }
    Ok(out)
}

fn simulate_backward(ctx: &Context) -> Result<Outcome> {
    let tree = ctx.tree()?;
    let nt = ctx.grid.n_t;
    let yt = ctx.state(&ctx.cfg.initial)?;
    let terminal = vec![yt.clone(); tree.level_len(nt)];
    let bwd = solve_backward(&ctx.prop, &tree, &terminal, None, None)?;
    let mesh = &ctx.mesh;
    let y_energy: Vec<f64> = (0..=nt).map(|l| tree.expectation(l, &|k| mesh.state_inner(&bwd.y[l][k], &bwd.y[l][k]))).collect();
    let z_energy: Vec<f64> = (0..nt).map(|l| tree.expectation(l, &|k| mesh.state_inner(&bwd.big_y[l][k], &bwd.big_y[l][k]))).collect();
    let fwd = solve_forward(&ctx.prop, &yt, None, &tree, true)?;
    let duality = duality_residual(&ctx.prop, &tree, &fwd, &bwd, None, None)?;
    let mut out = Outcome::new(json!({
        "y0_norm": y_energy[0].sqrt(),
        "terminal_norm": y_energy[nt].sqrt(),
        "duality": duality,
    }));
    out.invariants.push(check("finite", finite(&y_energy) && finite(&z_energy), String::new()));
    out.invariants.push(check("duality", duality.residual <= ctx.cfg.tolerances.duality, format!("residual {:.3e}", duality.residual)));
    out.tables.push(Table {
        name: "backward_energy".into(),
        header: vec!["level", "t", "mean_y_energy", "mean_martingale_energy"],
        rows: (0..=nt).map(|l| vec![l as f64, ctx.grid.t(l), y_energy[l], if l < nt { z_energy[l] } else { f64::NAN }]).collect(),
    });
    Ok(out)
}

fn hum(ctx: &Context) -> Result<Outcome> {
    let tree = ctx.tree()?;
    let nt = ctx.grid.n_t;
    let yt = ctx.state(&ctx.cfg.initial)?;
    let prob = PenalizedProblem { prop: &ctx.prop, tree: &tree, terminal: vec![yt; tree.level_len(nt)] };
    let c = &ctx.cfg.control;
    let results = hum_continuation(&prob, &c.eps, &c.hum)?;
    let k = cost_constant_k(&ctx.coeffs.sup_norms(&ctx.mesh, &ctx.grid), ctx.grid.horizon);
    let reports: Vec<_> = results.iter().map(|r| null_control_report(r, k, c.bound_c, c.null_threshold)).collect();
    let last = reports.last().expect("non-empty schedule");
    let mut out = Outcome::new(json!({ "k": k, "runs": results, "null_control": reports }));
    let resid = results.iter().map(|r| r.optimality_residual).fold(0.0, f64::max);
    out.invariants.push(check("optimality", resid <= c.hum.optimality_tol, format!("max residual {resid:.3e}")));
    out.invariants.push(check(
        "null_control",
        last.success,
        format!("|y(0)|/|y_T| = {:.3e} at eps = {:.1e} (threshold {:.1e})", last.y0_ratio, last.eps, c.null_threshold),
    ));
    out.tables.push(Table {
        name: "hum".into(),
        header: vec!["eps", "y0_norm", "u_norm_sq", "objective", "optimality_residual", "iterations", "y0_ratio", "bound_ratio", "smallest_c"],
        rows: results
            .iter()
            .zip(&reports)
            .map(|(r, n)| vec![r.eps, r.y0_norm, r.u_norm_sq, r.objective, r.optimality_residual, r.iterations as f64, n.y0_ratio, n.bound_ratio, n.smallest_c])
            .collect(),
    });
    Ok(out)
}

fn aux(ctx: &Context) -> Result<Outcome> {
    let tree = ctx.tree()?;
    let z0 = ctx.state(&ctx.cfg.initial)?;
    let z = solve_forward(&ctx.prop, &z0, None, &tree, ctx.cfg.force)?;
    let c = &ctx.cfg.control;
    let weights = ctx.weights(c.aux_mu, c.aux_lambda)?;
    let opts = AuxOptions { eps: c.aux_eps, tol: c.aux_tol, max_iter: c.aux_max_iter, clamp: c.aux_clamp };
    let res = aux_control(&ctx.prop, &tree, &z, &weights, &opts)?;
    let e = &res.estimate;
    let terms = [e.lhs_v, e.lhs_r_bulk, e.lhs_r_surf, e.lhs_grad_bulk, e.lhs_grad_surf, e.lhs_r1, e.lhs_r2, e.rhs_bulk, e.rhs_surf];
    let mut out = Outcome::new(json!({ "result": res, "r0_sq_over_eps": e.r0_sq / c.aux_eps }));
    out.invariants.push(check("finite", finite(&terms) && e.ratio.is_finite() && terms.iter().all(|t| *t >= 0.0), format!("ratio {:.6e}", e.ratio)));
    out.tables.push(Table {
        name: "aux_estimate".into(),
        header: vec!["lhs_v", "lhs_r_bulk", "lhs_r_surf", "lhs_grad_bulk", "lhs_grad_surf", "lhs_r1", "lhs_r2", "rhs_bulk", "rhs_surf", "ratio", "r0_sq"],
        rows: vec![terms.iter().cloned().chain([e.ratio, e.r0_sq]).collect()],
    });
    Ok(out)
}

fn carleman(ctx: &Context) -> Result<Outcome> {
    let noise = ctx.noise()?;
    let threshold = carleman_threshold(&ctx.coeffs, &ctx.mesh, &ctx.grid, ctx.cfg.weights.generic_c);
    let base = ctx.lambda_base();
    let lambdas: Vec<f64> = ctx.cfg.weights.lambda_multipliers.iter().map(|m| m * base).collect();
    let weights = ctx.weights(ctx.cfg.weights.mu, lambdas[0])?;
    let ensemble = ctx.ensemble()?;
    let rep = verify_carleman(&ctx.prop, &weights, &lambdas, &ensemble, ctx.sources(), noise.as_ref(), ctx.cfg.weights.clamp, threshold)?;
    let growth = rep.growth();
    let rows: Vec<Vec<f64>> = rep
        .rows
        .iter()
        .map(|r| {
            vec![r.lambda, r.log_scale, r.lhs_bulk_z, r.lhs_surf_z, r.lhs_bulk_grad, r.lhs_surf_grad, r.rhs_control, r.rhs_source, r.ratio, r.member as f64, r.below_threshold as u8 as f64]
        })
        .collect();
    let mut out = Outcome::new(json!({ "report": rep, "growth": growth, "ensemble_size": ensemble.len() }));
    let ok = rows.iter().all(|r| finite(r) && r[2..9].iter().all(|v| *v >= 0.0));
    out.invariants.push(check("finite_nonnegative", ok, format!("growth over sweep {growth:.4}")));
    let header = vec!["lambda", "log_scale", "lhs_bulk_z", "lhs_surf_z", "lhs_bulk_grad", "lhs_surf_grad", "rhs_control", "rhs_source", "ratio", "member", "below_threshold"];
    out.data.push(Table { name: "carleman".into(), header: header.clone(), rows: rows.clone() });
    out.tables.push(Table { name: "carleman".into(), header, rows });
    Ok(out)
}

fn observability(ctx: &Context) -> Result<Outcome> {
    let o = &ctx.cfg.observability;
    let opts = ObservabilityOptions { n_t: o.n_t, max_pencil_dim: o.max_pencil_dim, truncate: o.truncate };
    let ensemble = ctx.ensemble()?;
    let rep = verify_observability(&ctx.mesh, &ctx.coeffs, &o.horizons, &ensemble, &ctx.cfg.solver, &opts)?;
    let rows: Vec<Vec<f64>> =
        rep.rows.iter().map(|r| vec![r.horizon, r.c_obs, r.ensemble_max, r.pencil_max.unwrap_or(f64::NAN), r.k, r.excluded as f64]).collect();
    let mut out = Outcome::new(json!({ "report": rep }));
    let ok = rep.rows.iter().all(|r| r.c_obs.is_finite() && r.c_obs > 0.0);
    let excluded: usize = rep.rows.iter().map(|r| r.excluded).sum();
    out.invariants.push(check("positive_finite", ok, format!("{excluded} member(s) excluded for vanishing observation")));
    let header = vec!["horizon", "c_obs", "ensemble_max", "pencil_max", "k", "excluded"];
    out.data.push(Table { name: "observability".into(), header: header.clone(), rows: rows.clone() });
    out.tables.push(Table { name: "observability".into(), header, rows });
    Ok(out)
}

fn duality(ctx: &Context) -> Result<Outcome> {
    let tree = ctx.tree()?;
    let solves = ctx.prop.n() * tree.level_len(ctx.grid.n_t);
    let rep = verify_duality(&ctx.prop, &tree, ctx.cfg.noise.seed, solves <= 20_000)?;
    let tol = ctx.cfg.tolerances.duality;
    let mut out = Outcome::new(json!({ "report": rep }));
    out.invariants.push(check("duality", rep.terms.residual <= tol, format!("residual {:.3e}", rep.terms.residual)));
    if let Some(d) = rep.transpose_defect {
        out.invariants.push(check("transpose", d <= tol, format!("defect {d:.3e}")));
    }
    out.tables.push(Table {
        name: "duality".into(),
        header: vec!["terminal", "initial", "control", "residual", "transpose_defect"],
        rows: vec![vec![rep.terms.terminal, rep.terms.initial, rep.terms.control, rep.terms.residual, rep.transpose_defect.unwrap_or(f64::NAN)]],
    });
    Ok(out)
}

fn dissipation(ctx: &Context) -> Result<Outcome> {
    let noise = ctx.noise()?;
    let z0 = ctx.state(&ctx.cfg.initial)?;
    let traj = solve_forward(&ctx.prop, &z0, None, noise.as_ref(), ctx.cfg.force)?;
    let rep = verify_dissipation(&ctx.coeffs, &ctx.mesh, &ctx.grid, &traj, noise.as_ref());
    let nt = ctx.grid.n_t;
    let rows = (0..=nt)
        .map(|l| vec![l as f64, ctx.grid.t(l), rep.energies[l], rep.constants.get(l).copied().flatten().unwrap_or(f64::NAN)])
        .collect();
    let mut out = Outcome::new(json!({ "report": rep }));
    out.invariants.push(check("finite", rep.finite, format!("c_max {:?}", rep.c_max)));
    if rep.r2 == 0.0 {
        out.invariants.push(check("monotone", rep.monotone, format!("max step increase {:.3e}", rep.max_increase)));
    }
    out.tables.push(Table { name: "dissipation".into(), header: vec!["level", "t", "energy", "c_n"], rows });
    Ok(out)
}

fn weights_report(ctx: &Context) -> Result<Outcome> {
    let w = ctx.weights(ctx.cfg.weights.mu, ctx.lambda_base())?;
    let bounds = check_weight_bounds(&w, &ctx.mesh, &ctx.grid)?;
    let psi = &w.psi;
    let mut psi_ok = true;
    for (s, &i) in ctx.mesh.boundary.iter().enumerate() {
        let p = ctx.mesh.nodes[i];
        psi_ok &= psi.psi(p).abs() <= 1e-12 && psi.normal_derivative(p, ctx.mesh.normals[s]) <= -psi.c * (1.0 - 1e-12);
    }
    let mut rows = Vec::new();
    for l in 1..ctx.grid.n_t {
        let t = ctx.grid.t(l);
        for &p in &ctx.mesh.nodes {
            rows.push(vec![t, p[0], p[1], psi.psi(p), w.alpha(t, p), w.phi(t, p), w.ln_theta(t, p)]);
        }
    }
    let mut out = Outcome::new(json!({ "lambda": w.lambda, "mu": w.mu, "psi": psi, "bounds": bounds }));
    out.invariants.push(check("psi_boundary", psi_ok, format!("c = {}", psi.c)));
    out.invariants.push(check("bounds_stable", bounds.stable, format!("max relative change {:.3e}", bounds.max_relative_change)));
    out.tables.push(Table { name: "weights".into(), header: vec!["t", "x", "y", "psi", "alpha", "phi", "ln_theta"], rows });
    Ok(out)
}

fn execute(command: Command, ctx: &Context) -> Result<Outcome> {
    match command {
        Command::SimulateForward => simulate_forward(ctx),
        Command::SimulateBackward => simulate_backward(ctx),
        Command::HumControl => hum(ctx),
        Command::AuxControl => aux(ctx),
        Command::VerifyCarleman => carleman(ctx),
        Command::VerifyObservability => observability(ctx),
        Command::VerifyDuality => duality(ctx),
        Command::VerifyDissipation => dissipation(ctx),
        Command::WeightsReport => weights_report(ctx),
    }
}

fn csv_text(t: &Table, hash: &str) -> String {
    let mut s = t.header.join(",");
    s.push_str(",config_hash\n");
    for r in &t.rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(","));
        s.push(',');
        s.push_str(hash);
        s.push('\n');
    }
    s
}

fn dat_text(t: &Table, hash: &str, command: &str) -> String {
    let mut s = format!("# {command} config_hash={hash}\n# {}\n", t.header.join(" "));
    for r in &t.rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

fn write_outputs(dir: &Path, command: Command, cfg: &ExperimentConfig, out: &Outcome, threads: Option<usize>) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let mut files = vec!["manifest.json".to_string(), "report.json".to_string()];
    let report = json!({
        "subcommand": command.name(),
        "config_hash": hash,
        "passed": out.invariants.iter().all(|i| i.pass),
        "invariants": out.invariants,
        "results": out.results,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    for t in &out.tables {
        let name = format!("{}.csv", t.name);
        fs::write(dir.join(&name), csv_text(t, &hash))?;
        files.push(name);
    }
    for t in &out.data {
        let name = format!("{}.dat", t.name);
        fs::write(dir.join(&name), dat_text(t, &hash, command.name()))?;
        files.push(name);
    }
    for (name, bytes) in &out.binary {
        fs::write(dir.join(name), bytes)?;
        files.push(name.clone());
    }
    let manifest = json!({
        "tool": "stochdyn",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": command.name(),
        "config_hash": hash,
        "seed": cfg.noise.seed,
        "threads": threads,
        "files": files,
        "config": cfg,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    Ok(files)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Invalid(_) | Error::Geometry(_) | Error::Ellipticity { .. } | Error::NonSymmetric(_) | Error::NonTangential { .. } => EXIT_SCHEMA,
        _ => EXIT_NUMERICAL,
    }
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("stochdyn-out"))
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_output(args, &mut std::io::stdout().lock())
}

/// [`run`] with the invariant summary written to `stdout`; write errors are ignored.
pub fn run_with_output<I, T>(args: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_SCHEMA } else { EXIT_OK };
        }
    };
    let cfg = match load_config(cli.config.as_deref(), &cli.set, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_SCHEMA;
        }
    };
    let dir = output_dir(&cli, &cfg);
    let job = || -> Result<(Outcome, ExperimentConfig)> {
        let ctx = Context::new(cfg.clone())?;
        let out = execute(cli.command, &ctx)?;
        Ok((out, ctx.cfg))
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(job),
            Err(e) => {
                eprintln!("error: cannot start {n} threads: {e}");
                return EXIT_SCHEMA;
            }
        },
        None => job(),
    };
    let (out, cfg) = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if let Err(e) = write_outputs(&dir, cli.command, &cfg, &out, cli.threads) {
        eprintln!("error: writing outputs to {}: {e}", dir.display());
        return EXIT_NUMERICAL;
    }
    for inv in &out.invariants {
        let status = if inv.pass { "ok" } else { "FAILED" };
        let _ = writeln!(stdout, "{}: {status} {}", inv.name, inv.detail);
    }
    let _ = writeln!(stdout, "outputs written to {}", dir.display());
    if out.invariants.iter().all(|i| i.pass) {
        EXIT_OK
    } else {
        EXIT_INVARIANT
    }
}
