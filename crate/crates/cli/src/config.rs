//! Versioned JSON configuration of an inversion run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, CliError, CliResult};

pub const CONFIG_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub version: u64,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub physics: Vec<PhysicsSpec>,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub scheduler: SchedulerSpec,
    #[serde(default)]
    pub continuation: Option<ContinuationSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub shape: Vec<usize>,
    pub widths: Vec<f64>,
    #[serde(default)]
    pub origin: Option<Vec<f64>>,
}

/// Axis-aligned box of constant value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant(f64),
    /// Model file written by the export module.
    File(PathBuf),
    Blocks { background: f64, blocks: Vec<BlockSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub mesh: MeshSpec,
    pub initial: FieldSpec,
    /// Model used to synthesize observed data.
    pub truth: FieldSpec,
    pub bounds: [f64; 2],
    /// Reference model of the regularizer; defaults to the initial model.
    #[serde(default)]
    pub reference: Option<FieldSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    Identity,
    Exp,
    VelToCond { a: f64, b: f64, c: f64 },
    SlownessSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PointSet {
    Points(Vec<Vec<f64>>),
    /// `count` equally spaced points from `start` to `end`.
    Line { start: Vec<f64>, end: Vec<f64>, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DipoleSet {
    Pairs(Vec<[Vec<f64>; 2]>),
    /// Electrodes on a line; each dipole joins electrodes `k` and `k + spacing`.
    Line { start: Vec<f64>, end: Vec<f64>, electrodes: usize, spacing: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    #[default]
    Direct,
    Cg,
    Bicgstab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One batch per (physics, frequency).
    #[default]
    PerFrequency,
    PerSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Top,
    Bottom,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhysicsSpec {
    Dc {
        /// Simulation mesh; absent means the model mesh is used directly.
        #[serde(default)]
        mesh: Option<MeshSpec>,
        sources: DipoleSet,
        receivers: DipoleSet,
        map: MapSpec,
        #[serde(default)]
        solver: SolverChoice,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        grouping: Grouping,
    },
    Eikonal {
        #[serde(default)]
        mesh: Option<MeshSpec>,
        sources: PointSet,
        receivers: PointSet,
        map: MapSpec,
        #[serde(default)]
        source_radius: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        grouping: Grouping,
    },
    Helmholtz {
        #[serde(default)]
        mesh: Option<MeshSpec>,
        sources: PointSet,
        receivers: PointSet,
        map: MapSpec,
        /// Frequencies in Hz.
        frequencies: Vec<f64>,
        pad: usize,
        strength: f64,
        #[serde(default)]
        free_surface: Option<Surface>,
        #[serde(default)]
        solver: SolverChoice,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        grouping: Grouping,
    },
}

impl PhysicsSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dc { .. } => "dc",
            Self::Eikonal { .. } => "eikonal",
            Self::Helmholtz { .. } => "helmholtz",
        }
    }

    pub fn mesh(&self) -> Option<&MeshSpec> {
        match self {
            Self::Dc { mesh, .. } | Self::Eikonal { mesh, .. } | Self::Helmholtz { mesh, .. } => mesh.as_ref(),
        }
    }

    pub fn noise(&self) -> f64 {
        match self {
            Self::Dc { noise, .. } | Self::Eikonal { noise, .. } | Self::Helmholtz { noise, .. } => *noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerSpec {
    Diffusion,
    Tv { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MisfitSpec {
    L2,
    SmoothL1 { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerSpec {
    Regularizer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmijoSpec {
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoSpec {
    fn default() -> Self {
        Self { c1: 1e-4, max_backtracks: 10 }
    }
}

fn default_misfit() -> MisfitSpec {
    MisfitSpec::L2
}

fn default_regularizer() -> RegularizerSpec {
    RegularizerSpec::Diffusion
}

fn default_preconditioner() -> PreconditionerSpec {
    PreconditionerSpec::Regularizer
}

fn default_pcg_tol() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub max_gn: usize,
    pub max_pcg: usize,
    pub alpha: f64,
    #[serde(default = "default_regularizer")]
    pub regularizer: RegularizerSpec,
    #[serde(default = "default_misfit")]
    pub misfit: MisfitSpec,
    #[serde(default)]
    pub armijo: ArmijoSpec,
    #[serde(default = "default_preconditioner")]
    pub preconditioner: PreconditionerSpec,
    #[serde(default = "default_pcg_tol")]
    pub pcg_tol: f64,
    /// Cap on the largest entry of a search direction.
    #[serde(default)]
    pub max_step: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    #[default]
    Dynamic,
    Static,
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSpec {
    pub mode: ModeSpec,
    pub n_workers: usize,
}

impl Default for SchedulerSpec {
    fn default() -> Self {
        Self { mode: ModeSpec::Dynamic, n_workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSpec {
    /// Frequency sets in Hz, one per stage.
    pub stages: Vec<Vec<f64>>,
    pub cycles: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_prefix() -> String {
    "run".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_prefix")]
    pub prefix: String,
    /// Record elapsed seconds in the convergence CSV; off gives byte-stable files.
    #[serde(default = "yes")]
    pub wall_clock: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_dir(), prefix: default_prefix(), wall_clock: true }
    }
}

fn bad(path: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Config { path: path.into(), reason: reason.into() }
}

fn check_mesh(path: &str, mesh: &MeshSpec) -> CliResult<()> {
    let dim = mesh.shape.len();
    if !(2..=3).contains(&dim) {
        return Err(bad(format!("{path}.shape"), format!("{dim} axes; 2 or 3 supported")));
    }
    if mesh.widths.len() != dim {
        return Err(bad(format!("{path}.widths"), format!("{} widths for {dim} axes", mesh.widths.len())));
    }
    if let Some(i) = mesh.shape.iter().position(|&n| n < 2) {
        return Err(bad(format!("{path}.shape[{i}]"), "needs at least 2 cells"));
    }
    if let Some(i) = mesh.widths.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(bad(format!("{path}.widths[{i}]"), "cell widths must be positive"));
    }
    if let Some(o) = &mesh.origin {
        if o.len() != dim {
            return Err(bad(format!("{path}.origin"), format!("{} coordinates for {dim} axes", o.len())));
        }
    }
    Ok(())
}

fn check_field(path: &str, field: &FieldSpec, dim: usize) -> CliResult<()> {
    match field {
        FieldSpec::Constant(v) if !v.is_finite() => Err(bad(path, "value must be finite")),
        FieldSpec::File(p) if !p.exists() => Err(bad(path, format!("file {} does not exist", p.display()))),
        FieldSpec::Blocks { blocks, .. } => {
            for (i, b) in blocks.iter().enumerate() {
                if b.min.len() != dim || b.max.len() != dim {
                    return Err(bad(format!("{path}.blocks[{i}]"), format!("corners must have {dim} coordinates")));
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn check_points(path: &str, set: &PointSet, dim: usize) -> CliResult<()> {
    match set {
        PointSet::Points(p) => {
            if p.is_empty() {
                return Err(bad(path, "no points"));
            }
            if let Some(i) = p.iter().position(|x| x.len() != dim) {
                return Err(bad(format!("{path}[{i}]"), format!("expected {dim} coordinates")));
            }
        }
        PointSet::Line { start, end, count } => {
            if start.len() != dim || end.len() != dim {
                return Err(bad(path, format!("line ends need {dim} coordinates")));
            }
            if *count == 0 {
                return Err(bad(format!("{path}.count"), "must be positive"));
            }
        }
    }
    Ok(())
}

fn check_dipoles(path: &str, set: &DipoleSet, dim: usize) -> CliResult<()> {
    match set {
        DipoleSet::Pairs(p) => {
            if p.is_empty() {
                return Err(bad(path, "no dipoles"));
            }
            if let Some(i) = p.iter().position(|[a, b]| a.len() != dim || b.len() != dim) {
                return Err(bad(format!("{path}[{i}]"), format!("expected {dim} coordinates per electrode")));
            }
        }
        DipoleSet::Line { start, end, electrodes, spacing } => {
            if start.len() != dim || end.len() != dim {
                return Err(bad(path, format!("line ends need {dim} coordinates")));
            }
            if *spacing == 0 || spacing >= electrodes {
                return Err(bad(format!("{path}.spacing"), "must be positive and below the electrode count"));
            }
        }
    }
    Ok(())
}

impl InversionConfig {
    pub fn from_value(value: Value) -> CliResult<Self> {
        let found = value.get("version").and_then(Value::as_u64).unwrap_or(0);
        if found != CONFIG_VERSION {
            return Err(CliError::Version { found, expected: CONFIG_VERSION });
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| bad("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies `path=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut value: Value = serde_json::from_str(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        check_mesh("model.mesh", &m.mesh)?;
        let dim = m.mesh.shape.len();
        let [lo, hi] = m.bounds;
        if !(lo < hi) {
            return Err(bad("model.bounds", format!("lower bound {lo} is not below upper bound {hi}")));
        }
        check_field("model.initial", &m.initial, dim)?;
        check_field("model.truth", &m.truth, dim)?;
        if let Some(r) = &m.reference {
            check_field("model.reference", r, dim)?;
        }
        if self.physics.is_empty() {
            return Err(bad("physics", "at least one physics entry is required"));
        }
        for (i, p) in self.physics.iter().enumerate() {
            let path = format!("physics[{i}]");
            if let Some(mesh) = p.mesh() {
                check_mesh(&format!("{path}.mesh"), mesh)?;
                if mesh.shape.len() != dim {
                    return Err(bad(format!("{path}.mesh"), "dimension differs from the model mesh"));
                }
            }
            if !(p.noise() >= 0.0) {
                return Err(bad(format!("{path}.noise"), "must be non-negative"));
            }
            match p {
                PhysicsSpec::Dc { sources, receivers, .. } => {
                    check_dipoles(&format!("{path}.sources"), sources, dim)?;
                    check_dipoles(&format!("{path}.receivers"), receivers, dim)?;
                }
                PhysicsSpec::Eikonal { sources, receivers, source_radius, mesh, .. } => {
                    check_points(&format!("{path}.sources"), sources, dim)?;
                    check_points(&format!("{path}.receivers"), receivers, dim)?;
                    if !(*source_radius >= 0.0) {
                        return Err(bad(format!("{path}.source_radius"), "must be non-negative"));
                    }
                    if mesh.is_some() {
                        return Err(bad(format!("{path}.mesh"), "eikonal runs on the model mesh"));
                    }
                }
                PhysicsSpec::Helmholtz { sources, receivers, frequencies, strength, solver, .. } => {
                    check_points(&format!("{path}.sources"), sources, dim)?;
                    check_points(&format!("{path}.receivers"), receivers, dim)?;
                    if frequencies.is_empty() {
                        return Err(bad(format!("{path}.frequencies"), "no frequencies"));
                    }
                    if let Some(k) = frequencies.iter().position(|f| !(*f > 0.0 && f.is_finite())) {
                        return Err(bad(format!("{path}.frequencies[{k}]"), "frequencies must be positive"));
                    }
                    if !(*strength >= 0.0) {
                        return Err(bad(format!("{path}.strength"), "must be non-negative"));
                    }
                    if *solver == SolverChoice::Cg {
                        return Err(bad(format!("{path}.solver"), "CG needs an SPD operator; use direct or bicgstab"));
                    }
                }
            }
        }
        let o = &self.optimizer;
        if o.max_gn == 0 {
            return Err(bad("optimizer.max_gn", "must be positive"));
        }
        if !(o.alpha >= 0.0) {
            return Err(bad("optimizer.alpha", "must be non-negative"));
        }
        if !(o.armijo.c1 > 0.0 && o.armijo.c1 < 1.0) {
            return Err(bad("optimizer.armijo.c1", "must lie in (0, 1)"));
        }
        if self.scheduler.n_workers == 0 {
            return Err(bad("scheduler.n_workers", "must be positive"));
        }
        if let Some(c) = &self.continuation {
            if c.stages.is_empty() {
                return Err(bad("continuation.stages", "no stages"));
            }
            if c.cycles == 0 {
                return Err(bad("continuation.cycles", "must be positive"));
            }
            let known: Vec<f64> = self
                .physics
                .iter()
                .filter_map(|p| match p {
                    PhysicsSpec::Helmholtz { frequencies, .. } => Some(frequencies.clone()),
                    _ => None,
                })
                .flatten()
                .collect();
            let mut prev_low = 0.0;
            for (s, stage) in c.stages.iter().enumerate() {
                if stage.is_empty() {
                    return Err(bad(format!("continuation.stages[{s}]"), "empty stage"));
                }
                if let Some(f) = stage.iter().find(|f| !known.contains(f)) {
                    return Err(bad(format!("continuation.stages[{s}]"), format!("frequency {f} is not simulated")));
                }
                let low = stage.iter().copied().fold(f64::INFINITY, f64::min);
                if low < prev_low {
                    return Err(bad(format!("continuation.stages[{s}]"), "frequencies must ascend across stages"));
                }
                prev_low = low;
            }
        }
        Ok(())
    }
}

/// Applies `a.b[2].c=value`; `value` is parsed as JSON, or taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| CliError::Override(spec.into()))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut node = root;
    for part in path.split('.') {
        if part.is_empty() {
            return Err(CliError::Override(spec.into()));
        }
        let (key, index) = match part.split_once('[') {
            Some((k, rest)) => {
                let i = rest.strip_suffix(']').and_then(|s| s.parse::<usize>().ok());
                (k, Some(i.ok_or_else(|| CliError::Override(spec.into()))?))
            }
            None => (part, None),
        };
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().ok_or_else(|| CliError::Override(spec.into()))?;
        node = map.entry(key).or_insert(Value::Null);
        if let Some(i) = index {
            node = node.get_mut(i).ok_or_else(|| CliError::Override(format!("{spec} (index {i} out of range)")))?;
        }
    }
    *node = new;
    Ok(())
}
