//! Builds misfit terms from a config, runs the optimizer and writes artifacts.

use std::path::PathBuf;

use geoinvert::forward::{
    build_attenuation_layer, dipole_matrix, point_matrix, DcProblem, EikonalProblem, ForwardProblem, HelmholtzProblem,
    Side,
};
use geoinvert::inverse::{
    projected_gauss_newton, ArmijoOptions, Bounds, DiffusionReg, Executor, GnOptions, GnState, MisfitKind, MisfitTerm,
    ModelMap, Preconditioning, Regularizer, SerialExecutor, TvReg,
};
use geoinvert::mesh::{interp_mesh_to_mesh, TensorMesh};
use geoinvert::scheduler::{Mode, PoolOptions, WorkerPool};
use geoinvert::sparse::{SolverKind, SolverSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{
    DipoleSet, FieldSpec, Grouping, InversionConfig, MapSpec, MeshSpec, MisfitSpec, ModeSpec, PhysicsSpec, PointSet,
    PreconditionerSpec, RegularizerSpec, SolverChoice, Surface,
};
use crate::error::{core_err, io_err, CliError, CliResult};
use crate::export::{read_model, write_convergence, write_model, ConvergenceRow};

/// Relative noise floor, as a fraction of the largest datum of a survey.
const NOISE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct TermInfo {
    pub physics: &'static str,
    pub frequency: Option<f64>,
    /// Source indices of the survey covered by the term.
    pub sources: Vec<usize>,
}

/// Everything needed to run the optimizer on a config.
#[derive(Clone)]
pub struct Problem {
    pub mesh: TensorMesh,
    pub truth: Vec<f64>,
    pub initial: Vec<f64>,
    pub reference: Vec<f64>,
    pub bounds: Bounds,
    pub terms: Vec<MisfitTerm>,
    pub info: Vec<TermInfo>,
}

impl Problem {
    pub fn n_data(&self) -> usize {
        self.terms.iter().map(|t| t.observed().len()).sum()
    }

    /// `‖m − m_true‖ / ‖m_true‖`.
    pub fn model_error(&self, m: &[f64]) -> f64 {
        let num: f64 = m.iter().zip(&self.truth).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = self.truth.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    }
}

pub fn build_mesh(spec: &MeshSpec) -> CliResult<TensorMesh> {
    let widths = spec.shape.iter().zip(&spec.widths).map(|(&n, &h)| vec![h; n]).collect();
    let origin = spec.origin.clone().unwrap_or_else(|| vec![0.0; spec.shape.len()]);
    TensorMesh::new(widths, origin).map_err(core_err("building a mesh"))
}

fn build_field(spec: &FieldSpec, mesh: &TensorMesh, what: &str) -> CliResult<Vec<f64>> {
    match spec {
        FieldSpec::Constant(v) => Ok(vec![*v; mesh.n_cells()]),
        FieldSpec::File(path) => {
            let (shape, values) = read_model(path)?;
            if shape != mesh.shape() {
                return Err(CliError::Config {
                    path: format!("model.{what}"),
                    reason: format!("file shape {shape:?} differs from mesh shape {:?}", mesh.shape()),
                });
            }
            Ok(values)
        }
        FieldSpec::Blocks { background, blocks } => Ok((0..mesh.n_cells())
            .map(|k| {
                let c = mesh.cell_center(k);
                blocks
                    .iter()
                    .rev()
                    .find(|b| c.iter().enumerate().all(|(a, x)| *x >= b.min[a] && *x <= b.max[a]))
                    .map_or(*background, |b| b.value)
            })
            .collect()),
    }
}

fn map_of(spec: MapSpec) -> ModelMap {
    match spec {
        MapSpec::Identity => ModelMap::Identity,
        MapSpec::Exp => ModelMap::Exp,
        MapSpec::VelToCond { a, b, c } => ModelMap::VelToCond { a, b, c },
        MapSpec::SlownessSquared => ModelMap::SlownessSquared,
    }
}

fn solver_of(choice: SolverChoice) -> SolverSpec {
    match choice {
        SolverChoice::Direct => SolverSpec::direct(),
        SolverChoice::Cg => SolverSpec::iterative(SolverKind::PcgSsor, 1e-12, 10_000),
        SolverChoice::Bicgstab => SolverSpec::iterative(SolverKind::Bicgstab, 1e-12, 10_000),
    }
}

fn points(set: &PointSet) -> Vec<Vec<f64>> {
    match set {
        PointSet::Points(p) => p.clone(),
        PointSet::Line { start, end, count } => (0..*count)
            .map(|k| {
                let t = if *count > 1 { k as f64 / (*count - 1) as f64 } else { 0.0 };
                start.iter().zip(end).map(|(a, b)| a + t * (b - a)).collect()
            })
            .collect(),
    }
}

fn dipoles(set: &DipoleSet) -> Vec<(Vec<f64>, Vec<f64>)> {
    match set {
        DipoleSet::Pairs(p) => p.iter().map(|[a, b]| (a.clone(), b.clone())).collect(),
        DipoleSet::Line { start, end, electrodes, spacing } => {
            let e = points(&PointSet::Line { start: start.clone(), end: end.clone(), count: *electrodes });
            (0..electrodes - spacing).map(|k| (e[k].clone(), e[k + spacing].clone())).collect()
        }
    }
}

fn groups(n_sources: usize, grouping: Grouping) -> Vec<Vec<usize>> {
    match grouping {
        Grouping::PerFrequency => vec![(0..n_sources).collect()],
        Grouping::PerSource => (0..n_sources).map(|s| vec![s]).collect(),
    }
}

fn surface_side(s: Surface, dim: usize) -> Side {
    let vertical = dim - 1;
    match s {
        Surface::Top => Side { axis: vertical, upper: true },
        Surface::Bottom => Side { axis: vertical, upper: false },
        Surface::Left => Side { axis: 0, upper: false },
        Surface::Right => Side { axis: 0, upper: true },
    }
}

struct Synth<'a> {
    model_mesh: &'a TensorMesh,
    truth: &'a [f64],
    kind: MisfitKind,
    rng: ChaCha8Rng,
}

impl Synth<'_> {
    /// Simulates data at the true model, adds relative Gaussian noise and
    /// returns the term with weights `1 / σ`. Noise-free surveys are weighted
    /// as if the noise level were 1%.
    fn term(
        &mut self,
        mut forward: Box<dyn ForwardProblem>,
        map: ModelMap,
        transfer: Option<geoinvert::sparse::CsrMatrix<f64>>,
        noise: f64,
    ) -> CliResult<MisfitTerm> {
        let x = match &transfer {
            Some(t) => t.spmv(self.truth).map_err(core_err("transferring the true model"))?,
            None => self.truth.to_vec(),
        };
        let (coeff, _) = map.apply(&x);
        let clean = forward.forward(&coeff).map_err(core_err("simulating observed data"))?;
        forward.clear_cache();
        let peak = clean.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let level = if noise > 0.0 { noise } else { 0.01 };
        let sigma: Vec<f64> = clean.iter().map(|d| level * (d.abs() + NOISE_FLOOR * peak).max(f64::MIN_POSITIVE)).collect();
        let observed: Vec<f64> = clean
            .iter()
            .zip(&sigma)
            .map(|(d, s)| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                if noise > 0.0 {
                    d + e * s
                } else {
                    *d
                }
            })
            .collect();
        let weights = sigma.iter().map(|s| 1.0 / s).collect();
        MisfitTerm::new(forward, observed, weights, self.kind, map, transfer).map_err(core_err("building a misfit term"))
    }
}

/// Builds meshes, synthesizes observed data and groups them into misfit terms.
pub fn build_problem(cfg: &InversionConfig) -> CliResult<Problem> {
    let mesh = build_mesh(&cfg.model.mesh)?;
    let dim = mesh.dim();
    let truth = build_field(&cfg.model.truth, &mesh, "truth")?;
    let [lo, hi] = cfg.model.bounds;
    let initial: Vec<f64> = build_field(&cfg.model.initial, &mesh, "initial")?.iter().map(|v| v.clamp(lo, hi)).collect();
    let reference = match &cfg.model.reference {
        Some(r) => build_field(r, &mesh, "reference")?,
        None => initial.clone(),
    };
    let bounds = Bounds::uniform(mesh.n_cells(), lo, hi).map_err(core_err("model bounds"))?;
    let kind = match cfg.optimizer.misfit {
        MisfitSpec::L2 => MisfitKind::WeightedL2,
        MisfitSpec::SmoothL1 { eps } => MisfitKind::SmoothL1 { eps },
    };
    let mut synth = Synth { model_mesh: &mesh, truth: &truth, kind, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let mut terms = Vec::new();
    let mut info = Vec::new();

    for (i, phys) in cfg.physics.iter().enumerate() {
        let ctx = |what: &str| format!("physics[{i}] ({}): {what}", phys.name());
        let (sim_mesh, transfer) = match phys.mesh() {
            Some(spec) => {
                let m = build_mesh(spec)?;
                let t = interp_mesh_to_mesh(synth.model_mesh, &m).map_err(core_err(ctx("mesh transfer")))?;
                (m, Some(t.matrix))
            }
            None => (mesh.clone(), None),
        };
        match phys {
            PhysicsSpec::Dc { sources, receivers, map, solver, noise, grouping, .. } => {
                let src = dipoles(sources);
                let rec = dipole_matrix(&sim_mesh, &dipoles(receivers)).map_err(core_err(ctx("receivers")))?;
                for g in groups(src.len(), *grouping) {
                    let pairs: Vec<_> = g.iter().map(|&s| src[s].clone()).collect();
                    let s = dipole_matrix(&sim_mesh, &pairs).map_err(core_err(ctx("sources")))?;
                    let p = DcProblem::new(sim_mesh.clone(), s, rec.clone(), solver_of(*solver))
                        .map_err(core_err(ctx("survey")))?;
                    terms.push(synth.term(Box::new(p), map_of(*map), transfer.clone(), *noise)?);
                    info.push(TermInfo { physics: "dc", frequency: None, sources: g });
                }
            }
            PhysicsSpec::Eikonal { sources, receivers, map, source_radius, noise, grouping, .. } => {
                let src: Vec<usize> = points(sources).iter().map(|p| sim_mesh.locate(p)).collect();
                let rec = point_matrix(&sim_mesh, &points(receivers)).map_err(core_err(ctx("receivers")))?;
                for g in groups(src.len(), *grouping) {
                    let cells = g.iter().map(|&s| src[s]).collect();
                    let p = EikonalProblem::new(sim_mesh.clone(), cells, rec.clone())
                        .map_err(core_err(ctx("survey")))?
                        .with_source_radius(*source_radius);
                    terms.push(synth.term(Box::new(p), map_of(*map), transfer.clone(), *noise)?);
                    info.push(TermInfo { physics: "eikonal", frequency: None, sources: g });
                }
            }
            PhysicsSpec::Helmholtz {
                sources, receivers, map, frequencies, pad, strength, free_surface, solver, noise, grouping, ..
            } => {
                let src = points(sources);
                let rec = point_matrix(&sim_mesh, &points(receivers)).map_err(core_err(ctx("receivers")))?;
                let gamma = build_attenuation_layer(&sim_mesh, *pad, *strength, free_surface.map(|s| surface_side(s, dim)))
                    .map_err(core_err(ctx("absorbing layer")))?;
                let rho = vec![1.0; sim_mesh.n_cells()];
                for &f in frequencies {
                    for g in groups(src.len(), *grouping) {
                        let pts: Vec<_> = g.iter().map(|&s| src[s].clone()).collect();
                        let s = point_matrix(&sim_mesh, &pts).map_err(core_err(ctx("sources")))?;
                        let omega = 2.0 * std::f64::consts::PI * f;
                        let p = HelmholtzProblem::new(
                            sim_mesh.clone(),
                            &rho,
                            gamma.clone(),
                            omega,
                            s,
                            rec.clone(),
                            solver_of(*solver),
                        )
                        .map_err(core_err(ctx("survey")))?;
                        terms.push(synth.term(Box::new(p), map_of(*map), transfer.clone(), *noise)?);
                        info.push(TermInfo { physics: "helmholtz", frequency: Some(f), sources: g });
                    }
                }
            }
        }
    }
    Ok(Problem { mesh, truth, initial, reference, bounds, terms, info })
}

pub fn gn_options(cfg: &InversionConfig) -> GnOptions {
    let o = &cfg.optimizer;
    let mut opts = GnOptions::new(o.alpha);
    opts.max_gn = o.max_gn;
    opts.max_pcg = o.max_pcg;
    opts.pcg_tol = o.pcg_tol;
    opts.max_step = o.max_step;
    opts.armijo = ArmijoOptions { c1: o.armijo.c1, max_backtracks: o.armijo.max_backtracks };
    opts.preconditioning = match o.preconditioner {
        PreconditionerSpec::Regularizer => Preconditioning::RegularizerHessian,
        PreconditionerSpec::None => Preconditioning::None,
    };
    opts
}

pub fn regularizer(cfg: &InversionConfig, problem: &Problem) -> Box<dyn Regularizer> {
    match cfg.optimizer.regularizer {
        RegularizerSpec::Diffusion => Box::new(DiffusionReg::new(&problem.mesh, problem.reference.clone())),
        RegularizerSpec::Tv { eps } => Box::new(TvReg::new(&problem.mesh, eps)),
    }
}

pub fn executor(cfg: &InversionConfig, terms: Vec<MisfitTerm>) -> CliResult<Box<dyn Executor>> {
    let n = cfg.scheduler.n_workers;
    let exec: Box<dyn Executor> = match cfg.scheduler.mode {
        ModeSpec::Serial => Box::new(SerialExecutor::new(terms).map_err(core_err("serial executor"))?),
        ModeSpec::Dynamic => {
            Box::new(WorkerPool::new(terms, PoolOptions::new(n, Mode::Dynamic)).map_err(core_err("worker pool"))?)
        }
        ModeSpec::Static => {
            Box::new(WorkerPool::new(terms, PoolOptions::new(n, Mode::Static)).map_err(core_err("worker pool"))?)
        }
    };
    Ok(exec)
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: usize,
    pub cycle: usize,
    /// Empty for runs without continuation.
    pub frequencies: Vec<f64>,
    pub state: GnState,
    pub csv: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub stages: Vec<StageOutcome>,
    pub model: Vec<f64>,
    pub model_error: f64,
    pub convergence: PathBuf,
    pub model_file: PathBuf,
}

impl RunReport {
    pub fn initial_objective(&self) -> f64 {
        self.stages.first().map_or(f64::NAN, |s| s.state.initial_objective)
    }

    pub fn final_objective(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.state.final_objective())
    }
}

#[derive(Serialize)]
struct ModelMeta<'a> {
    shape: Vec<usize>,
    bounds: [f64; 2],
    stages: usize,
    initial_objective: f64,
    final_objective: f64,
    model_error: f64,
    convergence: &'a str,
}

/// Runs one optimizer stage per (cycle, frequency set), warm-starting each
/// from the previous result. Without continuation there is a single stage
/// over all terms.
pub fn run_inversion(cfg: &InversionConfig) -> CliResult<RunReport> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    run_problem(cfg, &problem)
}

pub fn run_problem(cfg: &InversionConfig, problem: &Problem) -> CliResult<RunReport> {
    run_problem_with(cfg, problem, gn_options(cfg))
}

/// [`run_problem`] with explicit optimizer options.
pub fn run_problem_with(cfg: &InversionConfig, problem: &Problem, opts: GnOptions) -> CliResult<RunReport> {
    let out = &cfg.output;
    std::fs::create_dir_all(&out.dir).map_err(io_err(&out.dir))?;
    let plan: Vec<(usize, Option<Vec<f64>>)> = match &cfg.continuation {
        Some(c) => (0..c.cycles).flat_map(|cy| c.stages.iter().map(move |s| (cy, Some(s.clone())))).collect(),
        None => vec![(0, None)],
    };
    let reg = regularizer(cfg, problem);
    let mut m = problem.initial.clone();
    let mut stages = Vec::new();
    let mut rows = Vec::new();
    let convergence = out.dir.join(format!("{}_convergence.csv", out.prefix));
    let mut failure = None;

    for (stage, (cycle, freqs)) in plan.into_iter().enumerate() {
        let terms: Vec<MisfitTerm> = problem
            .terms
            .iter()
            .zip(&problem.info)
            .filter(|(_, i)| match (&freqs, i.frequency) {
                (Some(set), Some(f)) => set.contains(&f),
                _ => true,
            })
            .map(|(t, _)| t.clone())
            .collect();
        let mut exec = executor(cfg, terms)?;
        let state = match projected_gauss_newton(exec.as_mut(), reg.as_ref(), m.clone(), problem.bounds.clone(), &opts) {
            Ok(s) => s,
            Err(source) => {
                failure = Some(CliError::Stage { stage, source });
                break;
            }
        };
        let stage_rows: Vec<ConvergenceRow> =
            state.history.iter().map(|r| ConvergenceRow::from_record(r, stage, out.wall_clock)).collect();
        let csv = if cfg.continuation.is_some() {
            let p = out.dir.join(format!("{}_stage{stage:02}.csv", out.prefix));
            write_convergence(&p, &stage_rows)?;
            p
        } else {
            convergence.clone()
        };
        rows.extend(stage_rows);
        m = state.model.clone();
        stages.push(StageOutcome { stage, cycle, frequencies: freqs.unwrap_or_default(), state, csv });
    }

    write_convergence(&convergence, &rows)?;
    let model_file = out.dir.join(format!("{}_model.bin", out.prefix));
    write_model(&model_file, &problem.mesh.shape(), &m)?;
    let report = RunReport { model_error: problem.model_error(&m), stages, model: m, convergence, model_file };
    let meta = ModelMeta {
        shape: problem.mesh.shape(),
        bounds: cfg.model.bounds,
        stages: report.stages.len(),
        initial_objective: report.initial_objective(),
        final_objective: report.final_objective(),
        model_error: report.model_error,
        convergence: report.convergence.to_str().unwrap_or_default(),
    };
    let meta_path = out.dir.join(format!("{}_model.json", out.prefix));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(io_err(&meta_path))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Predicted data of every term at `m`, concatenated in term order.
pub fn simulate(problem: &Problem, m: &[f64]) -> CliResult<Vec<f64>> {
    let mut out = Vec::new();
    for t in &problem.terms {
        let mut t = t.clone();
        t.evaluate(m, false).map_err(core_err("forward simulation"))?;
        out.extend(t.predicted().unwrap_or_default());
    }
    Ok(out)
}
