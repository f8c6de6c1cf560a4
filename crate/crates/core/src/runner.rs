//! Experiment pipeline: generate, train, operate, evaluate, and write artifacts.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::controller::{self, measure, ControllerConfig, LocalView, Plant, StabilityReport};
use crate::error::{Error, Result};
use crate::feeder::{build_sensitivities, load_feeder, FeederGraph, LinearVoltageModel};
use crate::oracle::{baseline_update, gamma_estimate, solve_opf_linear_from, BaselineState, OpfSolution};
use crate::policy::PolicyParams;
use crate::scenario::{convexity_constants, generate_profile, read_scenario, write_scenario, Scenario, ScenarioStep};
use crate::trainer::{self, EpochLog, TrainerConfig, TrainerState};

/// Pipeline stage, used for error reporting and process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Feeder,
    Scenario,
    Stability,
    Train,
    Operate,
    Oracle,
    Evaluate,
    Io,
}

impl Stage {
    pub fn code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Feeder => 3,
            Stage::Scenario => 4,
            Stage::Stability => 5,
            Stage::Train => 6,
            Stage::Operate => 7,
            Stage::Oracle => 8,
            Stage::Evaluate => 9,
            Stage::Io => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Feeder => "feeder",
            Stage::Scenario => "scenario",
            Stage::Stability => "stability",
            Stage::Train => "train",
            Stage::Operate => "operate",
            Stage::Oracle => "oracle",
            Stage::Evaluate => "evaluate",
            Stage::Io => "io",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Setpoints and squared voltages over a horizon, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<usize>,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub p_u: Vec<Vec<f64>>,
    pub q_u: Vec<Vec<f64>>,
    /// Per-step optimal objective; only oracle trajectories carry it.
    pub objective: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self { t: Vec::new(), x: Vec::new(), v: Vec::new(), p_u: Vec::new(), q_u: Vec::new(), objective: None }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, data: &ScenarioStep, x: Vec<f64>, v: Vec<f64>) {
        self.t.push(data.t);
        self.x.push(x);
        self.v.push(v);
        self.p_u.push(data.p_u.clone());
        self.q_u.push(data.q_u.clone());
    }
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new()
    }
}

/// Header of trajectory CSVs; oracle files append `objective`.
pub const TRAJECTORY_HEADER: [&str; 7] = ["t", "node", "p", "q", "v", "p_u", "q_u"];

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<&str> = TRAJECTORY_HEADER.to_vec();
    if traj.objective.is_some() {
        header.push("objective");
    }
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for k in 0..traj.len() {
        let n = traj.v[k].len();
        for i in 0..n {
            let mut rec = vec![
                traj.t[k].to_string(),
                (i + 1).to_string(),
                traj.x[k][i].to_string(),
                traj.x[k][n + i].to_string(),
                traj.v[k][i].to_string(),
                traj.p_u[k][i].to_string(),
                traj.q_u[k][i].to_string(),
            ];
            if let Some(obj) = &traj.objective {
                rec.push(obj[k].to_string());
            }
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let headers = r.headers().map_err(|e| Error::io(path, e.into()))?.clone();
    let with_obj = headers.len() == 8 && &headers[7] == "objective";
    if headers.len() < 7 || headers.iter().take(7).ne(TRAJECTORY_HEADER.iter().copied()) {
        return Err(Error::Parse { line: 1, msg: format!("unexpected trajectory header in {}", path.display()) });
    }
    let mut rows: Vec<(usize, usize, [f64; 5], Option<f64>)> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path, e.into()))?;
        let line = k + 2;
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| Error::Parse { line, msg: e.to_string() });
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| Error::Parse { line, msg: e.to_string() });
        let obj = if with_obj { Some(num(7)?) } else { None };
        rows.push((int(0)?, int(1)?, [num(2)?, num(3)?, num(4)?, num(5)?, num(6)?], obj));
    }
    let n = rows.iter().map(|r| r.1).max().unwrap_or(0);
    if n == 0 || rows.len() % n != 0 {
        return Err(Error::Parse { line: 0, msg: "trajectory rows do not form complete steps".into() });
    }
    let mut traj = Trajectory::new();
    let mut objective = Vec::new();
    for chunk in rows.chunks(n) {
        let t = chunk[0].0;
        let mut x = vec![0.0; 2 * n];
        let (mut v, mut pu, mut qu) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (i, row) in chunk.iter().enumerate() {
            if row.0 != t || row.1 != i + 1 {
                return Err(Error::Parse { line: 0, msg: format!("rows for step {t} are out of order") });
            }
            x[i] = row.2[0];
            x[n + i] = row.2[1];
            v[i] = row.2[2];
            pu[i] = row.2[3];
            qu[i] = row.2[4];
        }
        if let Some(o) = chunk[0].3 {
            objective.push(o);
        }
        traj.t.push(t);
        traj.x.push(x);
        traj.v.push(v);
        traj.p_u.push(pu);
        traj.q_u.push(qu);
    }
    if with_obj {
        traj.objective = Some(objective);
    }
    Ok(traj)
}

/// Summary statistics of a controlled trajectory against the oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluationReport {
    pub absolute_gap: f64,
    pub relative_gap: f64,
    pub volt_violation: f64,
    /// Steps left out of the relative gap because the optimal objective is zero.
    pub excluded_steps: usize,
    pub steps: usize,
}

/// Compare `controlled` with `oracle` step by step. Costs come from `steps`,
/// voltage limits are the square roots of the squared-voltage limits.
pub fn evaluate(controlled: &Trajectory, oracle: &Trajectory, steps: &[ScenarioStep]) -> Result<EvaluationReport> {
    let t_len = controlled.len();
    if oracle.len() != t_len || steps.len() != t_len {
        return Err(Error::dim(format!("horizons differ: controlled {t_len}, oracle {}, scenario {}", oracle.len(), steps.len())));
    }
    if t_len == 0 {
        return Err(Error::dim("empty horizon"));
    }
    let objective = oracle.objective.as_ref().ok_or_else(|| Error::dim("oracle trajectory has no objective column"))?;
    let (mut abs_sum, mut rel_sum, mut viol_sum) = (0.0, 0.0, 0.0);
    let mut excluded = 0usize;
    for k in 0..t_len {
        let data = &steps[k];
        let f = data.cost.value(&controlled.x[k]);
        let f_star = objective[k];
        let gap = (f - f_star).abs();
        abs_sum += gap;
        if f_star == 0.0 {
            excluded += 1;
        } else {
            rel_sum += gap / f_star;
        }
        let (v_lo, v_hi) = (data.limits.v_lo.sqrt(), data.limits.v_hi.sqrt());
        let (mut lo2, mut hi2) = (0.0, 0.0);
        for &v in &controlled.v[k] {
            let mag = v.max(0.0).sqrt();
            lo2 += (v_lo - mag).max(0.0).powi(2);
            hi2 += (mag - v_hi).max(0.0).powi(2);
        }
        viol_sum += lo2.sqrt() + hi2.sqrt();
    }
    let t = t_len as f64;
    let included = t_len - excluded;
    Ok(EvaluationReport {
        absolute_gap: abs_sum / t,
        relative_gap: if included == 0 { 0.0 } else { rel_sum / included as f64 },
        volt_violation: viol_sum / t,
        excluded_steps: excluded,
        steps: t_len,
    })
}

/// Mean wall-clock cost of the controller update, excluding plant solves.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTiming {
    pub mean_step_seconds: f64,
    pub per_node_seconds: f64,
}

/// Feeder, sensitivities and scenarios shared by every stage.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub graph: FeederGraph,
    pub model: LinearVoltageModel,
    pub train: Vec<Scenario>,
    pub test: Scenario,
}

pub fn load_graph(cfg: &ExperimentConfig) -> StageResult<(FeederGraph, LinearVoltageModel)> {
    let mut graph = load_feeder(&cfg.feeder.path).stage(Stage::Feeder)?;
    if let Some(v0) = cfg.feeder.v0 {
        graph.v0 = v0;
    }
    let model = build_sensitivities(&graph, graph.v0);
    Ok((graph, model))
}

pub fn prepare(cfg: &ExperimentConfig) -> StageResult<Prepared> {
    cfg.trainer.validate().stage(Stage::Config)?;
    let (graph, model) = load_graph(cfg)?;
    let sc = &cfg.scenario;
    let train = if sc.train_files.is_empty() {
        sc.train_seeds.iter().map(|&s| generate_profile(&graph, &sc.generator, s)).collect::<Result<Vec<_>>>()
    } else {
        sc.train_files.iter().map(|p| read_scenario(p)).collect::<Result<Vec<_>>>()
    }
    .stage(Stage::Scenario)?;
    let test = match &sc.test_file {
        Some(p) => read_scenario(p),
        None => generate_profile(&graph, &sc.generator, sc.test_seed),
    }
    .stage(Stage::Scenario)?;
    if train.is_empty() {
        return Err(Error::Config("no training scenarios".into())).stage(Stage::Scenario);
    }
    for s in train.iter().chain(std::iter::once(&test)) {
        if s.n() != model.n() {
            return Err(Error::dim(format!("scenario has {} nodes, feeder has {}", s.n(), model.n()))).stage(Stage::Scenario);
        }
    }
    Ok(Prepared { cfg: cfg.clone(), graph, model, train, test })
}

impl Prepared {
    /// Starting setpoint for every operated trajectory.
    pub fn x0(&self) -> Vec<f64> {
        self.test.steps[0].bounds.midpoint()
    }

    pub fn controller_config(&self, trainer: &TrainerConfig) -> ControllerConfig {
        ControllerConfig { plant: self.cfg.controller.plant, ..trainer.controller() }
    }

    pub fn stability(&self, policy: &PolicyParams, alpha: f64) -> StabilityReport {
        let (m, xi) = convexity_constants(&self.train[0].steps[0].cost);
        controller::check_stability(m, xi, self.model.a_norm, policy, alpha)
    }
}

/// Drive the learned controller through `steps` from `x0`.
pub fn operate_policy(
    steps: &[ScenarioStep],
    policy: &PolicyParams,
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    ccfg: &ControllerConfig,
    x0: &[f64],
) -> Result<(Trajectory, StepTiming)> {
    let n = model.n();
    let mut traj = Trajectory::new();
    let mut x = x0.to_vec();
    let mut elapsed = 0.0;
    for data in steps {
        let v_hat = measure(ccfg.plant, &x, data, model, graph)?;
        let started = Instant::now();
        let mut next = x.clone();
        for i in 0..n {
            let view = LocalView::of(&x, &v_hat, data, i);
            let node = policy.node_of(i + 1).map(|k| &policy.nodes[k]);
            let (p, q) = controller::local_update(&view, node, ccfg.alpha);
            next[i] = p;
            next[n + i] = q;
        }
        elapsed += started.elapsed().as_secs_f64();
        let v = measure(ccfg.plant, &next, data, model, graph)?;
        traj.push(data, next.clone(), v);
        x = next;
    }
    let mean = elapsed / steps.len().max(1) as f64;
    let nodes = policy.nodes.len().max(1) as f64;
    Ok((traj, StepTiming { mean_step_seconds: mean, per_node_seconds: mean / nodes }))
}

/// Drive the primal-dual baseline through `steps` from `x0`.
pub fn operate_baseline(
    steps: &[ScenarioStep],
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    plant: Plant,
    alpha_b: f64,
    sigma_b: f64,
    x0: &[f64],
) -> Result<(Trajectory, StepTiming)> {
    let mut traj = Trajectory::new();
    let mut state = BaselineState::new(x0.to_vec(), alpha_b, sigma_b);
    let mut elapsed = 0.0;
    for data in steps {
        let v_hat = measure(plant, &state.x, data, model, graph)?;
        let started = Instant::now();
        state = baseline_update(&state, &v_hat, data, model);
        elapsed += started.elapsed().as_secs_f64();
        let v = measure(plant, &state.x, data, model, graph)?;
        traj.push(data, state.x.clone(), v);
    }
    let mean = elapsed / steps.len().max(1) as f64;
    let controllable = steps.first().map_or(1, |s| s.bounds.free_coordinates().len().div_ceil(2)).max(1);
    Ok((traj, StepTiming { mean_step_seconds: mean, per_node_seconds: mean / controllable as f64 }))
}

/// Every controllable unit held at its lower bound.
pub fn operate_no_control(steps: &[ScenarioStep], model: &LinearVoltageModel, graph: &FeederGraph, plant: Plant) -> Result<Trajectory> {
    let mut traj = Trajectory::new();
    for data in steps {
        let x = data.bounds.lower();
        let v = measure(plant, &x, data, model, graph)?;
        traj.push(data, x, v);
    }
    Ok(traj)
}

/// Per-step OPF optimum on the linear model, warm-starting the duals.
pub fn oracle_solutions(steps: &[ScenarioStep], model: &LinearVoltageModel, tol: f64, cap: usize) -> Result<Vec<OpfSolution>> {
    let n = model.n();
    let (mut mu_lo, mut mu_hi) = (vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::with_capacity(steps.len());
    for data in steps {
        let sol = solve_opf_linear_from(data, model, tol, cap, &mu_lo, &mu_hi)?;
        mu_lo.clone_from(&sol.mu_lo);
        mu_hi.clone_from(&sol.mu_hi);
        out.push(sol);
    }
    Ok(out)
}

pub fn oracle_trajectory(steps: &[ScenarioStep], solutions: &[OpfSolution]) -> Trajectory {
    let mut traj = Trajectory::new();
    for (data, sol) in steps.iter().zip(solutions) {
        traj.push(data, sol.x_star.clone(), sol.v_star.clone());
    }
    traj.objective = Some(solutions.iter().map(|s| s.objective).collect());
    traj
}

/// Oracle setpoints applied to the nonlinear plant.
pub fn oracle_nonlinear(steps: &[ScenarioStep], solutions: &[OpfSolution], model: &LinearVoltageModel, graph: &FeederGraph) -> Result<Trajectory> {
    let mut traj = Trajectory::new();
    for (data, sol) in steps.iter().zip(solutions) {
        let v = measure(Plant::Nonlinear, &sol.x_star, data, model, graph)?;
        traj.push(data, sol.x_star.clone(), v);
    }
    traj.objective = Some(solutions.iter().map(|s| s.objective).collect());
    Ok(traj)
}

/// Reference trajectories that do not depend on the learned policy.
#[derive(Debug, Clone)]
pub struct References {
    pub solutions: Vec<OpfSolution>,
    pub oracle: Trajectory,
    pub oracle_nonlinear: Trajectory,
    pub baseline: Trajectory,
    pub baseline_timing: StepTiming,
    pub no_control: Trajectory,
    pub gamma: f64,
}

pub fn references(prep: &Prepared) -> StageResult<References> {
    let steps = &prep.test.steps;
    let cfg = &prep.cfg;
    let solutions = oracle_solutions(steps, &prep.model, cfg.oracle.tol, cfg.oracle.cap).stage(Stage::Oracle)?;
    let oracle = oracle_trajectory(steps, &solutions);
    let oracle_nl = oracle_nonlinear(steps, &solutions, &prep.model, &prep.graph).stage(Stage::Oracle)?;
    let plant = cfg.controller.plant;
    let (baseline, baseline_timing) =
        operate_baseline(steps, &prep.model, &prep.graph, plant, cfg.baseline_alpha(), cfg.baseline.sigma, &prep.x0()).stage(Stage::Operate)?;
    let no_control = operate_no_control(steps, &prep.model, &prep.graph, plant).stage(Stage::Operate)?;
    let gamma = gamma_estimate(&solutions);
    Ok(References { solutions, oracle, oracle_nonlinear: oracle_nl, baseline, baseline_timing, no_control, gamma })
}

/// Largest distance between linear-plant equilibria and the oracle optimum.
pub fn approximation_error(steps: &[ScenarioStep], solutions: &[OpfSolution], policy: &PolicyParams, model: &LinearVoltageModel, graph: &FeederGraph, alpha: f64) -> Result<f64> {
    let ccfg = ControllerConfig { alpha, plant: Plant::Linear, ..ControllerConfig::default() };
    let mut worst: f64 = 0.0;
    let mut start: Option<Vec<f64>> = None;
    for (data, sol) in steps.iter().zip(solutions) {
        let x0 = start.take().unwrap_or_else(|| data.bounds.midpoint());
        let eq = controller::solve_equilibrium_from(data, policy, model, graph, &ccfg, &x0)?;
        let d = eq.x_dag.iter().zip(&sol.x_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(d);
        start = Some(eq.x_dag);
    }
    Ok(worst)
}

/// Contraction factor and tracking bound inputs for the trained policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub alpha: f64,
    pub rho: f64,
    pub gamma: f64,
    pub l_h: f64,
    pub approx_eps: f64,
    /// `None` when the contraction factor is not below one.
    pub tracking_bound: Option<f64>,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let bound = self.tracking_bound.map_or_else(|| "none".to_string(), |b| b.to_string());
        format!(
            "alpha={}\nrho={}\ngamma={}\nl_h={}\napprox_eps={}\ntracking_bound={}\n",
            self.alpha, self.rho, self.gamma, self.l_h, self.approx_eps, bound
        )
    }
}

/// Result of operating one trained policy on the test day.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub state: TrainerState,
    pub log: Vec<EpochLog>,
    pub trajectory: Trajectory,
    pub timing: StepTiming,
    pub report: EvaluationReport,
}

pub fn train_policy(prep: &Prepared, tcfg: &TrainerConfig) -> StageResult<(TrainerState, Vec<EpochLog>)> {
    let policy = trainer::initial_policy(&prep.train, tcfg, &prep.model).stage(Stage::Train)?;
    let report = prep.stability(&policy, tcfg.alpha);
    if !report.all_pass() {
        return Err(Error::Unstable(format!("{report:?}"))).stage(Stage::Stability);
    }
    trainer::train_from(TrainerState::new(policy, tcfg), &prep.train, tcfg, &prep.graph, &prep.model).stage(Stage::Train)
}

/// Train with `tcfg`, operate on the test day and evaluate against the oracle.
pub fn run_policy(prep: &Prepared, refs: &References, tcfg: &TrainerConfig) -> StageResult<PolicyRun> {
    let (state, log) = train_policy(prep, tcfg)?;
    let ccfg = prep.controller_config(tcfg);
    let (trajectory, timing) = operate_policy(&prep.test.steps, &state.policy, &prep.model, &prep.graph, &ccfg, &prep.x0()).stage(Stage::Operate)?;
    let report = evaluate(&trajectory, &refs.oracle, &prep.test.steps).stage(Stage::Evaluate)?;
    Ok(PolicyRun { state, log, trajectory, timing, report })
}

pub const REPORT_HEADER: &str = "controller,absolute_gap,relative_gap,volt_violation,excluded_steps,steps";

pub fn report_line(label: &str, r: &EvaluationReport) -> String {
    format!("{label},{},{},{},{},{}", r.absolute_gap, r.relative_gap, r.volt_violation, r.excluded_steps, r.steps)
}

fn write_text(path: &Path, text: &str) -> StageResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e)).stage(Stage::Io)
}

fn create_dir(dir: &Path) -> StageResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage(Stage::Io)
}

/// Record the failing stage next to the partial artifacts.
fn record_failure(dir: &Path, err: &StageError) {
    let path = dir.join("error.txt");
    if let Ok(mut f) = fs::File::create(&path) {
        let _ = writeln!(f, "stage={}\nmessage={}", err.stage, err.source);
    }
}

fn manifest(cfg: &ExperimentConfig, prep: &Prepared, extra: &[(&str, String)]) -> String {
    let fmt_vec = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    let mut lines = vec![
        ("package", env!("CARGO_PKG_NAME").to_string()),
        ("version", env!("CARGO_PKG_VERSION").to_string()),
        ("config_hash", cfg.hash()),
        ("feeder", cfg.feeder.path.display().to_string()),
        ("buses", prep.graph.n().to_string()),
        ("a_norm", prep.model.a_norm.to_string()),
        ("train_seeds", prep.train.iter().map(|s| s.seed.to_string()).collect::<Vec<_>>().join(" ")),
        ("test_seed", prep.test.seed.to_string()),
        ("trainer_seed", cfg.trainer.seed.to_string()),
        ("test_steps", prep.test.steps.len().to_string()),
        ("x0", "box_midpoint".to_string()),
        ("x0_values", fmt_vec(&prep.x0())),
        ("plant", format!("{:?}", cfg.controller.plant).to_lowercase()),
    ];
    lines.extend(extra.iter().map(|(k, v)| (*k, v.clone())));
    lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Full pipeline into `cfg.output.dir`. Returns the artifact directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> StageResult<PathBuf> {
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let result = run_into(cfg, &dir);
    if let Err(e) = &result {
        record_failure(&dir, e);
    }
    result.map(|()| dir)
}

fn run_into(cfg: &ExperimentConfig, dir: &Path) -> StageResult<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let prep = prepare(cfg)?;
    write_scenario(&prep.test, &dir.join("test.csv")).stage(Stage::Io)?;

    let tcfg = &cfg.trainer;
    let (state, log) = match &cfg.evaluate.policy {
        Some(path) => {
            let policy = PolicyParams::load(path).stage(Stage::Config)?;
            let report = prep.stability(&policy, tcfg.alpha);
            if !report.all_pass() {
                return Err(Error::Unstable(format!("{report:?}"))).stage(Stage::Stability);
            }
            (TrainerState::new(policy, tcfg), Vec::new())
        }
        None => {
            let initial = trainer::initial_policy(&prep.train, tcfg, &prep.model).stage(Stage::Train)?;
            let report = prep.stability(&initial, tcfg.alpha);
            write_text(&dir.join("stability.txt"), &stability_text(&report))?;
            if !report.all_pass() {
                return Err(Error::Unstable(format!("{report:?}"))).stage(Stage::Stability);
            }
            trainer::train_from(TrainerState::new(initial, tcfg), &prep.train, tcfg, &prep.graph, &prep.model).stage(Stage::Train)?
        }
    };
    trainer::write_log(&log, &dir.join("training_log.csv")).stage(Stage::Io)?;
    state.policy.save(&dir.join("policy.txt")).stage(Stage::Io)?;

    let ccfg = prep.controller_config(tcfg);
    let (proposed, timing) = operate_policy(&prep.test.steps, &state.policy, &prep.model, &prep.graph, &ccfg, &prep.x0()).stage(Stage::Operate)?;
    write_trajectory(&proposed, &dir.join("trajectory_proposed.csv")).stage(Stage::Io)?;

    let refs = references(&prep)?;
    write_trajectory(&refs.oracle, &dir.join("oracle.csv")).stage(Stage::Io)?;
    write_trajectory(&refs.oracle_nonlinear, &dir.join("oracle_nonlinear.csv")).stage(Stage::Io)?;
    write_trajectory(&refs.baseline, &dir.join("trajectory_baseline.csv")).stage(Stage::Io)?;
    write_trajectory(&refs.no_control, &dir.join("trajectory_no_control.csv")).stage(Stage::Io)?;

    let reports = evaluate_trajectories(&prep.test.steps, &refs.oracle, &[("proposed", &proposed), ("baseline", &refs.baseline), ("no_control", &refs.no_control)])?;
    write_text(&dir.join("report.csv"), &reports)?;

    let final_report = prep.stability(&state.policy, tcfg.alpha);
    let eps = approximation_error(&prep.test.steps, &refs.solutions, &state.policy, &prep.model, &prep.graph, tcfg.alpha).stage(Stage::Evaluate)?;
    let summary = summarize(tcfg.alpha, &final_report, refs.gamma, eps);
    write_text(&dir.join("summary.txt"), &summary.to_text())?;
    write_text(
        &dir.join("timing.txt"),
        &format!(
            "proposed_mean_step_seconds={}\nproposed_per_node_seconds={}\nbaseline_mean_step_seconds={}\nbaseline_per_node_seconds={}\n",
            timing.mean_step_seconds, timing.per_node_seconds, refs.baseline_timing.mean_step_seconds, refs.baseline_timing.per_node_seconds
        ),
    )?;
    let extra = [("alpha", tcfg.alpha.to_string()), ("beta", tcfg.beta.to_string()), ("rho", final_report.rho.to_string())];
    write_text(&dir.join("manifest.txt"), &manifest(cfg, &prep, &extra))?;
    Ok(())
}

pub fn summarize(alpha: f64, report: &StabilityReport, gamma: f64, approx_eps: f64) -> RunSummary {
    let l_h = alpha;
    let tracking_bound = controller::tracking_bound(report.rho, gamma, l_h, approx_eps).ok();
    RunSummary { alpha, rho: report.rho, gamma, l_h, approx_eps, tracking_bound }
}

pub fn stability_text(r: &StabilityReport) -> String {
    format!(
        "c1={}\nc2={}\nc3={}\nc3_threshold={}\nc3_margin={}\nlipschitz={}\nstep_ok={}\nstep_bound={}\nrho={}\nrho_below_one={}\nk_max={}\nall_pass={}\n",
        r.c1, r.c2, r.c3, r.c3_threshold, r.c3_margin, r.lipschitz, r.step_ok, r.step_bound, r.rho, r.rho_below_one, r.k_max, r.all_pass()
    )
}

fn evaluate_trajectories(steps: &[ScenarioStep], oracle: &Trajectory, runs: &[(&str, &Trajectory)]) -> StageResult<String> {
    let mut out = format!("{REPORT_HEADER}\n");
    for (label, traj) in runs {
        let r = evaluate(traj, oracle, steps).stage(Stage::Evaluate)?;
        out.push_str(&report_line(label, &r));
        out.push('\n');
    }
    Ok(out)
}

/// Recompute `report.csv` from the trajectories stored in an artifact directory.
pub fn evaluate_dir(dir: &Path) -> StageResult<String> {
    let test = read_scenario(&dir.join("test.csv")).stage(Stage::Io)?;
    let oracle = read_trajectory(&dir.join("oracle.csv")).stage(Stage::Io)?;
    let mut runs = Vec::new();
    for label in ["proposed", "baseline", "no_control"] {
        let path = dir.join(format!("trajectory_{label}.csv"));
        if path.exists() {
            runs.push((label, read_trajectory(&path).stage(Stage::Io)?));
        }
    }
    let refs: Vec<(&str, &Trajectory)> = runs.iter().map(|(l, t)| (*l, t)).collect();
    evaluate_trajectories(&test.steps, &oracle, &refs)
}

/// Train and evaluate one policy per (beta, seed) pair; writes `sweep.csv`.
pub fn sweep_beta(cfg: &ExperimentConfig) -> StageResult<PathBuf> {
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let result = (|| {
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
        let prep = prepare(cfg)?;
        let refs = references(&prep)?;
        let mut out = String::from("beta,seed,absolute_gap,relative_gap,volt_violation,excluded_steps,steps\n");
        for label in ["baseline", "no_control"] {
            let traj = if label == "baseline" { &refs.baseline } else { &refs.no_control };
            let r = evaluate(traj, &refs.oracle, &prep.test.steps).stage(Stage::Evaluate)?;
            out.push_str(&format!("{label},,{},{},{},{},{}\n", r.absolute_gap, r.relative_gap, r.volt_violation, r.excluded_steps, r.steps));
        }
        for &beta in &cfg.sweep.betas {
            for &seed in &cfg.sweep.seeds {
                let tcfg = TrainerConfig { beta, seed, ..cfg.trainer.clone() };
                let run = run_policy(&prep, &refs, &tcfg)?;
                let r = run.report;
                log::info!("beta {beta} seed {seed}: gap {:.4e} violation {:.4e}", r.absolute_gap, r.volt_violation);
                out.push_str(&format!("{beta},{seed},{},{},{},{},{}\n", r.absolute_gap, r.relative_gap, r.volt_violation, r.excluded_steps, r.steps));
                write_text(&dir.join("sweep.csv"), &out)?;
            }
        }
        write_text(&dir.join("sweep.csv"), &out)?;
        write_text(&dir.join("manifest.txt"), &manifest(cfg, &prep, &[]))
    })();
    if let Err(e) = &result {
        record_failure(&dir, e);
    }
    result.map(|()| dir)
}
