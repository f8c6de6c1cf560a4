//! Stochastic primal-dual training of the feedback policies against
//! chance-constrained voltage limits.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{self, measure, solve_frozen, ControllerConfig, Equilibrium, Plant};
use crate::error::{Error, Result};
use crate::feeder::{FeederGraph, LinearVoltageModel};
use crate::policy::{enforce_conditions, flatten_grads, init_policy, Arch, BatchTape, ChannelGrad, PolicyParams};
use crate::powerflow::{solve_nonlinear_warm, solve_nonlinear_with, InjectionState, SweepOptions};
use crate::scenario::{convexity_constants, Scenario, ScenarioStep};

/// Which plant supplies equilibria and voltage sensitivities during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Linear plant, analytic sensitivities.
    Gradient,
    /// Nonlinear plant, two-point finite-difference sensitivities.
    GradientFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed,
    Learned,
}

/// How the equilibrium sensitivity to the policy output is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradRule {
    /// `dx/du = -1 / (2 w)` per interior coordinate, ignoring the voltage feedback.
    Local,
    /// Solves the linear system including the `k v` feedback through the plant.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_mode: LambdaMode,
    pub lambda_value: f64,
    pub sigma_phi: f64,
    pub sigma_lambda: f64,
    pub sigma_mu: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eq_tol: f64,
    pub eq_max_iters: usize,
    pub grad_rule: GradRule,
    pub zo_step: f64,
    pub hidden_layers: usize,
    pub width: usize,
    /// Initial gains as a fraction of `k_max`.
    pub k_init: f64,
    /// Initial equilibrium setpoint as a fraction of each box, used to calibrate output biases.
    pub init_setpoint: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Gradient,
            alpha: 0.48,
            beta: 0.1,
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 5e-4,
            sigma_phi: 1e-3,
            sigma_lambda: 1e-3,
            sigma_mu: 100.0,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            eq_tol: 1e-9,
            eq_max_iters: 2000,
            grad_rule: GradRule::Local,
            zo_step: 1e-3,
            hidden_layers: 3,
            width: 64,
            k_init: 0.5,
            init_setpoint: 0.05,
        }
    }
}

impl TrainerConfig {
    pub fn arch(&self) -> Arch {
        Arch { hidden_layers: self.hidden_layers, width: self.width }
    }

    pub fn plant(&self) -> Plant {
        match self.mode {
            TrainMode::Gradient => Plant::Linear,
            TrainMode::GradientFree => Plant::Nonlinear,
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig { alpha: self.alpha, plant: self.plant(), eq_tol: self.eq_tol, eq_max_iters: self.eq_max_iters }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.batch_size == 0 || !(self.alpha > 0.0) || !(self.eq_tol > 0.0) || !(self.zo_step > 0.0) {
            return Err(Error::Config("batch_size, alpha, eq_tol and zo_step must be positive".into()));
        }
        if !self.lambda_value.is_finite() || !(0.0..=1.0).contains(&self.init_setpoint) {
            return Err(Error::Config("lambda_value must be finite and init_setpoint in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Moments of dead units decay geometrically; subnormals would make every later step slow.
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// First and second moment estimates for the policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One descent step on `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = flush(B1 * self.m[k] + (1.0 - B1) * grad[k]);
            self.v[k] = flush(B2 * self.v[k] + (1.0 - B2) * grad[k] * grad[k]);
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub policy: PolicyParams,
    pub mu_lo: Vec<f64>,
    pub mu_hi: Vec<f64>,
    pub lambda_lo: Vec<f64>,
    pub lambda_hi: Vec<f64>,
    pub beta: f64,
    pub lambda_mode: LambdaMode,
    pub sigma_phi: f64,
    pub sigma_lambda: f64,
    pub sigma_mu: f64,
    pub epoch: usize,
    pub adam: AdamState,
}

impl TrainerState {
    pub fn new(policy: PolicyParams, cfg: &TrainerConfig) -> Self {
        let n = policy.n;
        let len = policy.param_count();
        Self {
            policy,
            mu_lo: vec![0.0; n],
            mu_hi: vec![0.0; n],
            lambda_lo: vec![cfg.lambda_value; n],
            lambda_hi: vec![cfg.lambda_value; n],
            beta: cfg.beta,
            lambda_mode: cfg.lambda_mode,
            sigma_phi: cfg.sigma_phi,
            sigma_lambda: cfg.sigma_lambda,
            sigma_mu: cfg.sigma_mu,
            epoch: 0,
            adam: AdamState::new(len),
        }
    }
}

/// Samples and their equilibria; `None` marks a skipped sample.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub samples: Vec<&'a ScenarioStep>,
    pub equilibria: Vec<Option<Equilibrium>>,
}

impl Batch<'_> {
    fn used(&self) -> impl Iterator<Item = (&ScenarioStep, &Equilibrium)> {
        self.samples.iter().zip(&self.equilibria).filter_map(|(s, e)| e.as_ref().map(|e| (*s, e)))
    }

    pub fn used_count(&self) -> usize {
        self.equilibria.iter().filter(|e| e.is_some()).count()
    }
}

/// `max(lambda + g, 0)`.
pub fn hinge_surrogate(lambda: f64, g: f64) -> f64 {
    (lambda + g).max(0.0)
}

/// Indicator of `x >= 0`.
pub fn indicator(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Per-node batch means of the hinge surrogates and indicators, lower side then upper.
fn hinge_means(batch: &Batch, ts: &TrainerState) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = ts.mu_lo.len();
    let (mut h_lo, mut h_hi, mut i_lo, mut i_hi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let s = batch.used_count().max(1) as f64;
    for (data, eq) in batch.used() {
        let lim = data.limits;
        for j in 0..n {
            let g_lo = lim.v_lo - eq.v_dag[j];
            let g_hi = eq.v_dag[j] - lim.v_hi;
            h_lo[j] += hinge_surrogate(ts.lambda_lo[j], g_lo) / s;
            h_hi[j] += hinge_surrogate(ts.lambda_hi[j], g_hi) / s;
            i_lo[j] += indicator(ts.lambda_lo[j] + g_lo) / s;
            i_hi[j] += indicator(ts.lambda_hi[j] + g_hi) / s;
        }
    }
    (h_lo, h_hi, i_lo, i_hi)
}

/// Empirical Lagrangian over the batch.
pub fn lagrangian(batch: &Batch, ts: &TrainerState) -> Result<f64> {
    let n = ts.mu_lo.len();
    let s = batch.used_count().max(1) as f64;
    let mut cost = 0.0;
    for (step, eq) in batch.used() {
        if eq.v_dag.len() != n || eq.x_dag.len() != 2 * n {
            return Err(Error::dim("equilibrium does not match the trainer state"));
        }
        cost += step.cost.value(&eq.x_dag) / s;
    }
    let (h_lo, h_hi, _, _) = hinge_means(batch, ts);
    let mut dual = 0.0;
    for j in 0..n {
        dual += ts.mu_lo[j] * (h_lo[j] - ts.beta * ts.lambda_lo[j]);
        dual += ts.mu_hi[j] * (h_hi[j] - ts.beta * ts.lambda_hi[j]);
    }
    Ok(cost + dual)
}

/// `mu * (mean indicator - beta)` per node for both sides.
pub fn grad_lambda(batch: &Batch, ts: &TrainerState) -> Result<(Vec<f64>, Vec<f64>)> {
    if ts.lambda_mode != LambdaMode::Learned {
        return Err(Error::Config("lambda gradient requested with fixed offsets".into()));
    }
    let (_, _, i_lo, i_hi) = hinge_means(batch, ts);
    let g_lo = i_lo.iter().zip(&ts.mu_lo).map(|(i, m)| m * (i - ts.beta)).collect();
    let g_hi = i_hi.iter().zip(&ts.mu_hi).map(|(i, m)| m * (i - ts.beta)).collect();
    Ok((g_lo, g_hi))
}

/// Projected dual ascent on both sides.
pub fn dual_update(ts: &mut TrainerState, batch: &Batch) {
    let (h_lo, h_hi, _, _) = hinge_means(batch, ts);
    for j in 0..ts.mu_lo.len() {
        ts.mu_lo[j] = (ts.mu_lo[j] + ts.sigma_mu * (h_lo[j] - ts.beta * ts.lambda_lo[j])).max(0.0);
        ts.mu_hi[j] = (ts.mu_hi[j] + ts.sigma_mu * (h_hi[j] - ts.beta * ts.lambda_hi[j])).max(0.0);
    }
}

/// Two-point finite-difference voltage Jacobian around `x`, N x 2N. Only the
/// listed columns are probed (all when `columns` is `None`); the rest are zero.
#[allow(clippy::too_many_arguments)]
pub fn zo_voltage_jacobian(
    plant: Plant,
    graph: &FeederGraph,
    model: &LinearVoltageModel,
    data: &ScenarioStep,
    x: &[f64],
    eps: f64,
    columns: Option<&[usize]>,
) -> Result<DMatrix<f64>> {
    let n = data.p_u.len();
    if x.len() != 2 * n || !(eps > 0.0) {
        return Err(Error::dim("probe point must have length 2N and eps > 0"));
    }
    let all: Vec<usize> = (0..2 * n).collect();
    let cols = columns.unwrap_or(&all);
    let opts = SweepOptions { tol: 1e-13, max_iter: 500 };
    let center = match plant {
        Plant::Linear => None,
        Plant::Nonlinear => {
            let s = InjectionState::from_stacked(x, &data.p_u, &data.q_u);
            Some(solve_nonlinear_with(graph, &s, model.v0, opts)?)
        }
    };
    let probe = |xp: &[f64], k: usize| -> Result<Vec<f64>> {
        let r = match &center {
            None => measure(Plant::Linear, xp, data, model, graph),
            Some(warm) => {
                let s = InjectionState::from_stacked(xp, &data.p_u, &data.q_u);
                solve_nonlinear_warm(graph, &s, model.v0, opts, warm).and_then(|sol| {
                    if sol.converged {
                        Ok(sol.v)
                    } else {
                        Err(Error::PowerFlowDiverged { t: data.t })
                    }
                })
            }
        };
        r.map_err(|e| Error::ZeroOrderProbe { column: k, source: Box::new(e) })
    };
    let mut jac = DMatrix::zeros(n, 2 * n);
    let mut xp = x.to_vec();
    for &k in cols {
        xp[k] = x[k] + eps;
        let up = probe(&xp, k)?;
        xp[k] = x[k] - eps;
        let down = probe(&xp, k)?;
        xp[k] = x[k];
        for i in 0..n {
            jac[(i, k)] = (up[i] - down[i]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// Weight of each voltage in `dL/dv`: the dual times the active hinge indicator.
fn hinge_weights(data: &ScenarioStep, eq: &Equilibrium, ts: &TrainerState) -> Vec<f64> {
    let lim = data.limits;
    (0..data.p_u.len())
        .map(|j| {
            let lo = indicator(ts.lambda_lo[j] + lim.v_lo - eq.v_dag[j]);
            let hi = indicator(ts.lambda_hi[j] + eq.v_dag[j] - lim.v_hi);
            -ts.mu_lo[j] * lo + ts.mu_hi[j] * hi
        })
        .collect()
}

/// Per-sample quantities shared by the gradient computations.
struct SampleGrad {
    /// `dL/du` per policy channel (in `policy.coordinates()` order), already divided by batch size.
    upstream: Vec<f64>,
    /// Voltage at each channel's node.
    v_node: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn sample_upstream(
    data: &ScenarioStep,
    eq: &Equilibrium,
    ts: &TrainerState,
    coords: &[usize],
    mlp_out: &[f64],
    jac: &dyn Fn(usize, usize) -> f64,
    alpha: f64,
    rule: GradRule,
    scale: f64,
) -> Result<SampleGrad> {
    let n = data.p_u.len();
    let two_w = 2.0 * data.cost.weight;
    let w = hinge_weights(data, eq, ts);
    let policy = &ts.policy;
    let mut interior = Vec::new();
    let mut g = Vec::new();
    let v_node: Vec<f64> = coords.iter().map(|&c| eq.v_dag[c % n]).collect();
    for (j, &c) in coords.iter().enumerate() {
        let x = eq.x_dag[c];
        let k = policy.channel(c).map_or(0.0, |ch| ch.k);
        let pre = x - alpha * (two_w * (x - data.cost.floor(c)) + mlp_out[j] + k * v_node[j]);
        if (data.bounds.clamp(c, pre) - pre).abs() <= 1e-12 && data.bounds.hi(c) > data.bounds.lo(c) {
            interior.push(j);
            let dl_dx: f64 = (0..n).map(|i| jac(i, c) * w[i]).sum::<f64>() + two_w * (x - data.cost.floor(c));
            g.push(dl_dx);
        }
    }
    let mut upstream = vec![0.0; coords.len()];
    match rule {
        GradRule::Local => {
            for (r, &j) in interior.iter().enumerate() {
                upstream[j] = -g[r] / two_w * scale;
            }
        }
        GradRule::Implicit => {
            let m = interior.len();
            if m > 0 {
                let mut mat = DMatrix::zeros(m, m);
                for (r, &jr) in interior.iter().enumerate() {
                    let cr = coords[jr];
                    let kr = policy.channel(cr).map_or(0.0, |ch| ch.k);
                    for (s, &js) in interior.iter().enumerate() {
                        mat[(r, s)] = kr * jac(cr % n, coords[js]);
                    }
                    mat[(r, r)] += two_w;
                }
                let y = mat
                    .transpose()
                    .lu()
                    .solve(&DVector::from_vec(g))
                    .ok_or_else(|| Error::InvalidConstants("singular equilibrium sensitivity system".into()))?;
                for (r, &j) in interior.iter().enumerate() {
                    upstream[j] = -y[r] * scale;
                }
            }
        }
    }
    Ok(SampleGrad { upstream, v_node })
}

/// Channel inputs (`p_u` or `q_u` at the channel's node) per sample.
fn channel_inputs(samples: &[&ScenarioStep], c: usize, n: usize) -> Vec<f64> {
    samples.iter().map(|s| if c < n { s.p_u[c] } else { s.q_u[c - n] }).collect()
}

fn batch_tapes(policy: &PolicyParams, samples: &[&ScenarioStep]) -> (Vec<usize>, Vec<BatchTape>) {
    let coords = policy.coordinates();
    let tapes = coords
        .iter()
        .map(|&c| policy.channel(c).expect("coordinate has a channel").mlp_batch(&channel_inputs(samples, c, policy.n)))
        .collect();
    (coords, tapes)
}

/// Network outputs of sample `s` laid out over `data`'s free coordinates.
fn outputs_for_sample(data: &ScenarioStep, coords: &[usize], tapes: &[BatchTape], s: usize) -> Vec<f64> {
    data.bounds
        .free_coordinates()
        .into_iter()
        .map(|c| coords.iter().position(|&cc| cc == c).map_or(0.0, |j| tapes[j].out[s]))
        .collect()
}

/// Policy gradient of the Lagrangian, flattened like [`PolicyParams::flat`].
///
/// `jacobians` replaces the linear sensitivities per sample when given.
pub fn grad_policy(
    batch: &Batch,
    ts: &TrainerState,
    model: &LinearVoltageModel,
    alpha: f64,
    rule: GradRule,
    jacobians: Option<&[DMatrix<f64>]>,
) -> Result<Vec<f64>> {
    let (coords, tapes) = batch_tapes(&ts.policy, &batch.samples);
    grad_with_tapes(batch, ts, model, alpha, rule, jacobians, &coords, &tapes)
}

#[allow(clippy::too_many_arguments)]
fn grad_with_tapes(
    batch: &Batch,
    ts: &TrainerState,
    model: &LinearVoltageModel,
    alpha: f64,
    rule: GradRule,
    jacobians: Option<&[DMatrix<f64>]>,
    coords: &[usize],
    tapes: &[BatchTape],
) -> Result<Vec<f64>> {
    let s_total = batch.samples.len();
    let used = batch.used_count();
    let mut upstream = vec![vec![0.0; s_total]; coords.len()];
    let mut v_node = vec![vec![0.0; s_total]; coords.len()];
    if used > 0 {
        let scale = 1.0 / used as f64;
        for (s, (data, eq)) in batch.samples.iter().zip(&batch.equilibria).enumerate() {
            let Some(eq) = eq else { continue };
            let out: Vec<f64> = tapes.iter().map(|t| t.out[s]).collect();
            let sg = match jacobians {
                Some(js) => {
                    let jm = &js[s];
                    sample_upstream(data, eq, ts, coords, &out, &|i, c| jm[(i, c)], alpha, rule, scale)?
                }
                None => sample_upstream(data, eq, ts, coords, &out, &|i, c| model.a_at(i, c), alpha, rule, scale)?,
            };
            for j in 0..coords.len() {
                upstream[j][s] = sg.upstream[j];
                v_node[j][s] = sg.v_node[j];
            }
        }
    }
    let mut grads = Vec::with_capacity(ts.policy.nodes.len());
    let n_nodes = ts.policy.nodes.len();
    for (k, nd) in ts.policy.nodes.iter().enumerate() {
        let mut gp = ChannelGrad::zeros_like(&nd.p);
        let mut gq = ChannelGrad::zeros_like(&nd.q);
        nd.p.backward_batch(&tapes[k], &upstream[k], &v_node[k], &mut gp)?;
        nd.q.backward_batch(&tapes[n_nodes + k], &upstream[n_nodes + k], &v_node[n_nodes + k], &mut gq)?;
        grads.push((gp, gq));
    }
    Ok(flatten_grads(&grads))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lagrangian: f64,
    pub mean_cost: f64,
    pub viol_rate_lo: f64,
    pub viol_rate_hi: f64,
    pub mu_norm: f64,
    pub skipped: usize,
}

pub const LOG_HEADER: &str = "epoch,lagrangian,mean_cost,viol_rate_lo,viol_rate_hi,mu_norm";

/// Set the last-layer biases so the initial equilibria sit at `fraction` of each box.
fn calibrate_outputs(policy: &mut PolicyParams, steps: &[&ScenarioStep], v0: f64, fraction: f64) {
    let Some(first) = steps.first() else { return };
    let n = policy.n;
    let two_w = 2.0 * first.cost.weight;
    for c in policy.coordinates() {
        let target = first.bounds.lo(c) + fraction * (first.bounds.hi(c) - first.bounds.lo(c));
        let floor = first.cost.floor(c);
        let ch = policy.channel_mut(c).unwrap();
        let last = ch.biases.len() - 1;
        ch.biases[last][0] = 0.0;
        let raw: f64 = steps.iter().map(|s| ch.mlp(if c < n { s.p_u[c] } else { s.q_u[c - n] })).sum::<f64>() / steps.len() as f64;
        ch.biases[last][0] = -(two_w * (target - floor) + ch.k * v0) - raw;
    }
}

/// Fresh policy for the pooled training steps: random weights, fitted input
/// normalization and calibrated output biases.
pub fn initial_policy(scenarios: &[Scenario], cfg: &TrainerConfig, model: &LinearVoltageModel) -> Result<PolicyParams> {
    let steps: Vec<&ScenarioStep> = scenarios.iter().flat_map(|s| s.steps.iter()).collect();
    let first = steps.first().ok_or_else(|| Error::Config("no training steps".into()))?;
    let (m, xi) = convexity_constants(&first.cost);
    let kmax = controller::k_max(m, xi, model.a_norm, cfg.alpha)?;
    let controllable = &scenarios[0].controllable;
    let mut policy = init_policy(model.n(), controllable, cfg.arch(), kmax, cfg.k_init, cfg.seed)?;
    policy.fit_normalization(steps.iter().copied());
    calibrate_outputs(&mut policy, &steps, model.v0, cfg.init_setpoint);
    Ok(policy)
}

/// Solve equilibria for a batch using shared network outputs and warm starts.
fn solve_batch<'a>(
    samples: &[&'a ScenarioStep],
    starts: &[Option<Vec<f64>>],
    policy: &PolicyParams,
    coords: &[usize],
    tapes: &[BatchTape],
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    ccfg: &ControllerConfig,
) -> Result<Vec<Option<Equilibrium>>> {
    let mut out = Vec::with_capacity(samples.len());
    for (s, data) in samples.iter().enumerate() {
        let b = outputs_for_sample(data, coords, tapes, s);
        let x0 = starts[s].clone().unwrap_or_else(|| data.bounds.midpoint());
        let eq = match solve_frozen(data, policy, model, graph, ccfg, &x0, &b) {
            Ok(eq) => eq,
            Err(Error::VoltageCollapse { .. } | Error::PowerFlowDiverged { .. }) => {
                out.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        out.push(if eq.converged { Some(eq) } else { None });
    }
    Ok(out)
}

/// Run the primal-dual loop over every step of `scenarios`.
pub fn train(
    scenarios: &[Scenario],
    cfg: &TrainerConfig,
    graph: &FeederGraph,
    model: &LinearVoltageModel,
) -> Result<(TrainerState, Vec<EpochLog>)> {
    cfg.validate()?;
    let policy = initial_policy(scenarios, cfg, model)?;
    train_from(TrainerState::new(policy, cfg), scenarios, cfg, graph, model)
}

/// Continue training from an existing state.
pub fn train_from(
    mut ts: TrainerState,
    scenarios: &[Scenario],
    cfg: &TrainerConfig,
    graph: &FeederGraph,
    model: &LinearVoltageModel,
) -> Result<(TrainerState, Vec<EpochLog>)> {
    cfg.validate()?;
    let steps: Vec<&ScenarioStep> = scenarios.iter().flat_map(|s| s.steps.iter()).collect();
    let first = steps.first().ok_or_else(|| Error::Config("no training steps".into()))?;
    let (m, xi) = convexity_constants(&first.cost);
    let report = controller::check_stability(m, xi, model.a_norm, &ts.policy, cfg.alpha);
    if !report.all_pass() {
        return Err(Error::Unstable(format!("{report:?}")));
    }
    let k_max = ts.policy.k_max;
    let ccfg = cfg.controller();
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; steps.len()];
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut lag_sum, mut cost_sum, mut batches, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        let mut viol_lo = vec![0.0; n];
        let mut viol_hi = vec![0.0; n];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&ScenarioStep> = chunk.iter().map(|&k| steps[k]).collect();
            let starts: Vec<Option<Vec<f64>>> = chunk.iter().map(|&k| warm[k].clone()).collect();
            let (coords, tapes) = batch_tapes(&ts.policy, &samples);
            let equilibria = solve_batch(&samples, &starts, &ts.policy, &coords, &tapes, model, graph, &ccfg)?;
            for (&k, eq) in chunk.iter().zip(&equilibria) {
                if let Some(eq) = eq {
                    warm[k] = Some(eq.x_dag.clone());
                }
            }
            let batch = Batch { samples, equilibria };
            skipped += batch.samples.len() - batch.used_count();
            if batch.used_count() == 0 {
                continue;
            }
            for (data, eq) in batch.used() {
                seen += 1;
                cost_sum += data.cost.value(&eq.x_dag);
                for j in 0..n {
                    viol_lo[j] += f64::from(u8::from(eq.v_dag[j] < data.limits.v_lo));
                    viol_hi[j] += f64::from(u8::from(eq.v_dag[j] > data.limits.v_hi));
                }
            }
            lag_sum += lagrangian(&batch, &ts)?;
            batches += 1;

            let jacobians = match cfg.mode {
                TrainMode::Gradient => None,
                TrainMode::GradientFree => {
                    let cols = batch.samples[0].bounds.free_coordinates();
                    let mut js = Vec::with_capacity(batch.samples.len());
                    for (data, eq) in batch.samples.iter().zip(&batch.equilibria) {
                        // Under the local rule the Jacobian only enters through the hinge weights.
                        let needed = eq.as_ref().filter(|eq| {
                            cfg.grad_rule == GradRule::Implicit || hinge_weights(data, eq, &ts).iter().any(|&w| w != 0.0)
                        });
                        js.push(match needed {
                            Some(eq) => zo_voltage_jacobian(Plant::Nonlinear, graph, model, data, &eq.x_dag, cfg.zo_step, Some(&cols))?,
                            None => DMatrix::zeros(n, 2 * n),
                        });
                    }
                    Some(js)
                }
            };
            let grad = grad_with_tapes(&batch, &ts, model, cfg.alpha, cfg.grad_rule, jacobians.as_deref(), &coords, &tapes)?;
            let mut flat = ts.policy.flat();
            ts.adam.step(&mut flat, &grad, ts.sigma_phi);
            ts.policy.set_flat(&flat)?;
            enforce_conditions(&mut ts.policy, k_max);
            if ts.lambda_mode == LambdaMode::Learned {
                let (g_lo, g_hi) = grad_lambda(&batch, &ts)?;
                for j in 0..n {
                    ts.lambda_lo[j] = (ts.lambda_lo[j] - ts.sigma_lambda * g_lo[j]).max(0.0);
                    ts.lambda_hi[j] = (ts.lambda_hi[j] - ts.sigma_lambda * g_hi[j]).max(0.0);
                }
            }
            dual_update(&mut ts, &batch);
        }
        ts.epoch += 1;
        let denom = seen.max(1) as f64;
        let mu_norm = ts.mu_lo.iter().chain(&ts.mu_hi).map(|m| m * m).sum::<f64>().sqrt();
        let entry = EpochLog {
            epoch: ts.epoch,
            lagrangian: lag_sum / batches.max(1) as f64,
            mean_cost: cost_sum / denom,
            viol_rate_lo: viol_lo.iter().fold(0.0, |a, &b| f64::max(a, b)) / denom,
            viol_rate_hi: viol_hi.iter().fold(0.0, |a, &b| f64::max(a, b)) / denom,
            mu_norm,
            skipped,
        };
        log::info!(
            "epoch {} lagrangian {:.6e} cost {:.6e} viol {:.4}/{:.4} |mu| {:.3e}",
            entry.epoch,
            entry.lagrangian,
            entry.mean_cost,
            entry.viol_rate_lo,
            entry.viol_rate_hi,
            entry.mu_norm
        );
        log.push(entry);
    }
    Ok((ts, log))
}

/// Largest per-node frequency of voltage-limit violation at the equilibria of `steps`.
pub fn violation_frequency(
    policy: &PolicyParams,
    steps: &[&ScenarioStep],
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    ccfg: &ControllerConfig,
) -> Result<f64> {
    let n = model.n();
    let mut counts = vec![0usize; n];
    let mut used = 0usize;
    let mut start: Option<Vec<f64>> = None;
    for data in steps {
        let x0 = start.take().unwrap_or_else(|| data.bounds.midpoint());
        let eq = controller::solve_equilibrium_from(data, policy, model, graph, ccfg, &x0)?;
        if !eq.converged {
            return Err(Error::EquilibriumNotConverged { t: data.t, gap: eq.residual, iterations: eq.iterations });
        }
        used += 1;
        for j in 0..n {
            if eq.v_dag[j] < data.limits.v_lo || eq.v_dag[j] > data.limits.v_hi {
                counts[j] += 1;
            }
        }
        start = Some(eq.x_dag);
    }
    Ok(counts.into_iter().max().unwrap_or(0) as f64 / used.max(1) as f64)
}

/// Write the per-epoch log as CSV.
pub fn write_log(log: &[EpochLog], path: &std::path::Path) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, e.lagrangian, e.mean_cost, e.viol_rate_lo, e.viol_rate_hi, e.mu_norm));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_sensitivities, parse_feeder};
    use crate::scenario::{BoxLimits, CostModel, VoltageLimits};
    use std::sync::Arc;

    fn state(n: usize, mu: f64, beta: f64) -> TrainerState {
        let cfg = TrainerConfig { beta, ..Default::default() };
        let mut ts = TrainerState::new(PolicyParams::empty(n), &cfg);
        ts.mu_lo = vec![mu; n];
        ts.mu_hi = vec![mu; n];
        ts.lambda_mode = LambdaMode::Learned;
        ts
    }

    fn step_with(n: usize) -> ScenarioStep {
        ScenarioStep {
            t: 0,
            tau: 6.0,
            p_u: vec![0.0; n],
            q_u: vec![0.0; n],
            cost: Arc::new(CostModel { p_floor: vec![0.0; n], q_floor: vec![0.0; n], weight: 1.0 }),
            bounds: Arc::new(BoxLimits { p_lo: vec![0.0; n], p_hi: vec![1.0; n], q_lo: vec![0.0; n], q_hi: vec![1.0; n] }),
            limits: VoltageLimits::default(),
        }
    }

    fn eq_at(x: Vec<f64>, v: Vec<f64>) -> Option<Equilibrium> {
        Some(Equilibrium { x_dag: x, v_dag: v, iterations: 1, converged: true, residual: 0.0, gaps: vec![] })
    }

    #[test]
    fn hinge_examples_and_majorization() {
        assert_eq!(hinge_surrogate(0.1, -1.0), 0.0);
        assert_eq!(hinge_surrogate(0.1, 0.0), 0.1);
        for lam in [1e-4, 1e-2, 1.0] {
            for k in 0..=2000 {
                let g = -1.0 + k as f64 * 1e-3;
                assert!(indicator(g) <= hinge_surrogate(lam, g) / lam);
            }
        }
    }

    #[test]
    fn lagrangian_reductions() {
        let s = step_with(1);
        let batch = Batch { samples: vec![&s], equilibria: vec![eq_at(vec![0.3, 0.1], vec![1.0])] };
        let ts = state(1, 0.0, 0.1);
        assert!((lagrangian(&batch, &ts).unwrap() - 0.1).abs() < 1e-15);
        let ts = state(1, 1.0, 0.1);
        let expect = 0.1 - 0.1 * (5e-4 + 5e-4);
        assert!((lagrangian(&batch, &ts).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn lambda_gradient_examples() {
        let s = step_with(1);
        let ok = Batch { samples: vec![&s, &s], equilibria: vec![eq_at(vec![0.0, 0.0], vec![1.0]); 2] };
        let bad = Batch { samples: vec![&s, &s], equilibria: vec![eq_at(vec![0.0, 0.0], vec![0.8]); 2] };
        let ts = state(1, 1.0, 0.1);
        assert!((grad_lambda(&ok, &ts).unwrap().0[0] + 0.1).abs() < 1e-15);
        assert!((grad_lambda(&bad, &ts).unwrap().0[0] - 0.9).abs() < 1e-15);
        let ts0 = state(1, 0.0, 0.1);
        assert_eq!(grad_lambda(&bad, &ts0).unwrap().0[0], 0.0);
        let mut fixed = ts.clone();
        fixed.lambda_mode = LambdaMode::Fixed;
        assert!(grad_lambda(&ok, &fixed).is_err());
    }

    #[test]
    fn dual_update_examples() {
        let s = step_with(2);
        let feasible = Batch { samples: vec![&s], equilibria: vec![eq_at(vec![0.0; 4], vec![1.0, 1.0])] };
        let mut ts = state(2, 1.0, 0.1);
        dual_update(&mut ts, &feasible);
        assert!((ts.mu_lo[0] - (1.0 - 100.0 * 0.1 * 5e-4)).abs() < 1e-12);
        let mut ts = state(2, 0.0, 0.1);
        dual_update(&mut ts, &feasible);
        assert_eq!(ts.mu_lo, vec![0.0, 0.0]);
        let one_bad = Batch { samples: vec![&s], equilibria: vec![eq_at(vec![0.0; 4], vec![0.85, 1.0])] };
        dual_update(&mut ts, &one_bad);
        assert!(ts.mu_lo[0] > 0.0);
        assert_eq!(ts.mu_lo[1], 0.0);
        assert!(ts.mu_hi.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut a = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[2.0, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn adam_moments_never_go_subnormal() {
        let mut a = AdamState::new(1);
        let mut p = vec![0.5];
        a.step(&mut p, &[1.0], 0.1);
        for _ in 0..10_000 {
            a.step(&mut p, &[0.0], 0.1);
            assert!(a.m[0] == 0.0 || a.m[0].is_normal());
            assert!(a.v[0] == 0.0 || a.v[0].is_normal());
        }
        assert_eq!(a.m[0], 0.0);
    }

    #[test]
    fn zero_order_recovers_linear_sensitivities() {
        let g = parse_feeder(include_str!("../data/feeder8.feeder")).unwrap();
        let m = build_sensitivities(&g, 1.0);
        let s = step_with(7);
        let x: Vec<f64> = (0..14).map(|k| 0.05 * k as f64).collect();
        let j = zo_voltage_jacobian(Plant::Linear, &g, &m, &s, &x, 1e-3, None).unwrap();
        assert!((j - m.a()).abs().max() < 1e-10);
    }

    fn toy() -> (FeederGraph, LinearVoltageModel, Scenario) {
        let g = parse_feeder("buses: 2, base_kva: 100, v0: 1\nline,0,1,0.05,0.05,pu").unwrap();
        let m = build_sensitivities(&g, 1.0);
        let steps = (0..40)
            .map(|t| {
                let mut s = step_with(1);
                s.t = t;
                s.p_u = vec![-0.8 - 0.2 * (t as f64 * 0.7).sin().abs()];
                s.q_u = vec![-0.3];
                s
            })
            .collect();
        (g, m, Scenario { steps, seed: 0, provenance: "toy".into(), controllable: vec![1] })
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (g, m, scn) = toy();
        let cfg = TrainerConfig { epochs: 0, hidden_layers: 1, width: 4, ..Default::default() };
        let policy = initial_policy(std::slice::from_ref(&scn), &cfg, &m).unwrap();
        let init = TrainerState::new(policy, &cfg);
        let (ts, log) = train_from(init.clone(), std::slice::from_ref(&scn), &cfg, &g, &m).unwrap();
        assert_eq!(ts, init);
        assert!(log.is_empty());
    }

    #[test]
    fn toy_training_clears_lower_violation() {
        let (g, m, scn) = toy();
        let cfg = TrainerConfig {
            epochs: 200,
            batch_size: 8,
            hidden_layers: 1,
            width: 8,
            beta: 0.1,
            sigma_phi: 1e-2,
            k_init: 0.01,
            init_setpoint: 0.0,
            ..Default::default()
        };
        let steps: Vec<&ScenarioStep> = scn.steps.iter().collect();
        let before = violation_frequency(&initial_policy(std::slice::from_ref(&scn), &cfg, &m).unwrap(), &steps, &m, &g, &cfg.controller()).unwrap();
        assert!(before > 0.5, "toy must start violated, got {before}");
        let (ts, _) = train(std::slice::from_ref(&scn), &cfg, &g, &m).unwrap();
        let after = violation_frequency(&ts.policy, &steps, &m, &g, &cfg.controller()).unwrap();
        assert!(after < cfg.beta, "violation rate {after}");
        assert!(ts.mu_lo.iter().chain(&ts.mu_hi).all(|&x| x >= 0.0));
    }
}
