//! Real-time projected-gradient dynamics with learned local feedback, their
//! equilibria, and the stability diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{FeederGraph, LinearVoltageModel};
use crate::policy::{NodePolicy, PolicyParams};
use crate::powerflow::{env_voltage, solve_nonlinear, solve_nonlinear_warm, InjectionState, PowerFlowSolution, SweepOptions};
use crate::scenario::ScenarioStep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plant {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub alpha: f64,
    pub plant: Plant,
    pub eq_tol: f64,
    pub eq_max_iters: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { alpha: 0.48, plant: Plant::Nonlinear, eq_tol: 1e-9, eq_max_iters: 2000 }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.eq_tol > 0.0) {
            return Err(Error::Config(format!("alpha and eq_tol must be positive (alpha={}, eq_tol={})", self.alpha, self.eq_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub x: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x_dag: Vec<f64>,
    pub v_dag: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Last fixed-point step length.
    pub residual: f64,
    /// Step length of every iteration.
    pub gaps: Vec<f64>,
}

/// Everything node `i` needs for its update; nothing else is visible to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalView {
    pub p: f64,
    pub q: f64,
    pub v_hat: f64,
    pub p_u: f64,
    pub q_u: f64,
    pub p_floor: f64,
    pub q_floor: f64,
    pub weight: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    pub q_lo: f64,
    pub q_hi: f64,
}

impl LocalView {
    pub fn of(x: &[f64], v_hat: &[f64], step: &ScenarioStep, i: usize) -> Self {
        let n = step.p_u.len();
        Self {
            p: x[i],
            q: x[n + i],
            v_hat: v_hat[i],
            p_u: step.p_u[i],
            q_u: step.q_u[i],
            p_floor: step.cost.p_floor[i],
            q_floor: step.cost.q_floor[i],
            weight: step.cost.weight,
            p_lo: step.bounds.p_lo[i],
            p_hi: step.bounds.p_hi[i],
            q_lo: step.bounds.q_lo[i],
            q_hi: step.bounds.q_hi[i],
        }
    }
}

/// One node's projected-gradient update with its own policy channels.
pub fn local_update(view: &LocalView, node: Option<&NodePolicy>, alpha: f64) -> (f64, f64) {
    let (up, uq) = match node {
        Some(nd) => (nd.p.mlp(view.p_u) + nd.p.k * view.v_hat, nd.q.mlp(view.q_u) + nd.q.k * view.v_hat),
        None => (0.0, 0.0),
    };
    let two_w = 2.0 * view.weight;
    let p = view.p - alpha * (two_w * (view.p - view.p_floor) + up);
    let q = view.q - alpha * (two_w * (view.q - view.q_floor) + uq);
    (p.max(view.p_lo).min(view.p_hi), q.max(view.q_lo).min(view.q_hi))
}

/// Squared voltages produced by the plant for setpoint `x` under `step`'s injections.
pub fn measure(plant: Plant, x: &[f64], step: &ScenarioStep, model: &LinearVoltageModel, graph: &FeederGraph) -> Result<Vec<f64>> {
    match plant {
        Plant::Linear => {
            let mut v = model.apply(x);
            for (a, b) in v.iter_mut().zip(env_voltage(model, &step.p_u, &step.q_u)) {
                *a += b;
            }
            Ok(v)
        }
        Plant::Nonlinear => {
            let s = InjectionState::from_stacked(x, &step.p_u, &step.q_u);
            let sol = solve_nonlinear(graph, &s, model.v0)?;
            if !sol.converged {
                return Err(Error::PowerFlowDiverged { t: step.t });
            }
            Ok(sol.v)
        }
    }
}

/// Advance the controller by one slot: measure with the previous setpoint,
/// update every node locally, apply, and re-measure.
pub fn step(
    state: &ControllerState,
    data: &ScenarioStep,
    policy: &PolicyParams,
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    cfg: &ControllerConfig,
) -> Result<ControllerState> {
    let n = data.p_u.len();
    if state.x.len() != 2 * n || policy.n != n {
        return Err(Error::dim("controller state, policy and scenario disagree on N"));
    }
    let v_hat = measure(cfg.plant, &state.x, data, model, graph)?;
    let mut x = state.x.clone();
    for i in 0..n {
        let view = LocalView::of(&state.x, &v_hat, data, i);
        let node = policy.node_of(i + 1).map(|k| &policy.nodes[k]);
        let (p, q) = local_update(&view, node, cfg.alpha);
        x[i] = p;
        x[n + i] = q;
    }
    let v_hat = measure(cfg.plant, &x, data, model, graph)?;
    Ok(ControllerState { x, v_hat, t: data.t + 1 })
}

/// Network outputs `MLP(d)` for every free coordinate of `data` (zero where no
/// channel exists), in `free_coordinates` order.
pub fn mlp_outputs(data: &ScenarioStep, policy: &PolicyParams) -> Vec<f64> {
    let n = data.p_u.len();
    data.bounds
        .free_coordinates()
        .into_iter()
        .map(|c| match policy.channel(c) {
            Some(ch) => ch.mlp(if c < n { data.p_u[c] } else { data.q_u[c - n] }),
            None => 0.0,
        })
        .collect()
}

/// Fixed point of the frozen-scenario dynamics started from the box midpoint.
pub fn solve_equilibrium(
    data: &ScenarioStep,
    policy: &PolicyParams,
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    cfg: &ControllerConfig,
) -> Result<Equilibrium> {
    let x0 = data.bounds.midpoint();
    solve_equilibrium_from(data, policy, model, graph, cfg, &x0)
}

pub fn solve_equilibrium_from(
    data: &ScenarioStep,
    policy: &PolicyParams,
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    cfg: &ControllerConfig,
    x0: &[f64],
) -> Result<Equilibrium> {
    let b = mlp_outputs(data, policy);
    solve_frozen(data, policy, model, graph, cfg, x0, &b)
}

/// Picard iteration with precomputed network outputs `b` (one per free coordinate).
pub fn solve_frozen(
    data: &ScenarioStep,
    policy: &PolicyParams,
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    cfg: &ControllerConfig,
    x0: &[f64],
    b: &[f64],
) -> Result<Equilibrium> {
    let n = data.p_u.len();
    if x0.len() != 2 * n || model.n() != n {
        return Err(Error::dim("start point and model must match the scenario"));
    }
    let free = data.bounds.free_coordinates();
    if b.len() != free.len() {
        return Err(Error::dim("one network output per free coordinate"));
    }
    let alpha = cfg.alpha;
    let two_w = 2.0 * data.cost.weight;
    let k: Vec<f64> = free.iter().map(|&c| policy.channel(c).map_or(0.0, |ch| ch.k)).collect();
    let rows: Vec<usize> = free.iter().map(|&c| c % n).collect();
    let floor: Vec<f64> = free.iter().map(|&c| data.cost.floor(c)).collect();
    let lo: Vec<f64> = free.iter().map(|&c| data.bounds.lo(c)).collect();
    let hi: Vec<f64> = free.iter().map(|&c| data.bounds.hi(c)).collect();

    let mut x = data.bounds.lower();
    for &c in &free {
        x[c] = data.bounds.clamp(c, x0[c]);
    }
    let mut xf: Vec<f64> = free.iter().map(|&c| x[c]).collect();

    // Linear plant: v at the policy rows is affine in the free coordinates.
    let linear = match cfg.plant {
        Plant::Linear => {
            let mut fixed = x.clone();
            for &c in &free {
                fixed[c] = 0.0;
            }
            let mut base = model.apply(&fixed);
            for (a, e) in base.iter_mut().zip(env_voltage(model, &data.p_u, &data.q_u)) {
                *a += e;
            }
            let base_rows: Vec<f64> = rows.iter().map(|&i| base[i]).collect();
            let a_sub: Vec<f64> = rows.iter().flat_map(|&i| free.iter().map(move |&c| (i, c))).map(|(i, c)| model.a_at(i, c)).collect();
            Some((base_rows, a_sub))
        }
        Plant::Nonlinear => None,
    };

    let nf = free.len();
    let mut v_rows = vec![0.0; nf];
    let mut gaps = Vec::new();
    let mut converged = nf == 0;
    let mut iterations = 0;
    let mut residual = 0.0;
    let mut last_flow: Option<PowerFlowSolution> = None;
    while !converged && iterations < cfg.eq_max_iters {
        iterations += 1;
        match &linear {
            Some((base, a_sub)) => {
                for r in 0..nf {
                    let row = &a_sub[r * nf..(r + 1) * nf];
                    v_rows[r] = base[r] + row.iter().zip(&xf).map(|(a, x)| a * x).sum::<f64>();
                }
            }
            None => {
                for (r, &c) in free.iter().enumerate() {
                    x[c] = xf[r];
                }
                let s = InjectionState::from_stacked(&x, &data.p_u, &data.q_u);
                let sol = match &last_flow {
                    Some(w) => solve_nonlinear_warm(graph, &s, model.v0, SweepOptions::default(), w)?,
                    None => solve_nonlinear(graph, &s, model.v0)?,
                };
                if !sol.converged {
                    return Err(Error::PowerFlowDiverged { t: data.t });
                }
                for r in 0..nf {
                    v_rows[r] = sol.v[rows[r]];
                }
                last_flow = Some(sol);
            }
        }
        let mut gap2 = 0.0;
        for r in 0..nf {
            let u = b[r] + k[r] * v_rows[r];
            let next = (xf[r] - alpha * (two_w * (xf[r] - floor[r]) + u)).max(lo[r]).min(hi[r]);
            gap2 += (next - xf[r]) * (next - xf[r]);
            xf[r] = next;
        }
        residual = gap2.sqrt();
        if !residual.is_finite() {
            break;
        }
        gaps.push(residual);
        converged = residual < cfg.eq_tol;
    }
    for (r, &c) in free.iter().enumerate() {
        x[c] = xf[r];
    }
    let v_dag = measure(cfg.plant, &x, data, model, graph)?;
    Ok(Equilibrium { x_dag: x, v_dag, iterations, converged, residual, gaps })
}

/// `1 - sqrt(1 - 2 alpha m + alpha^2 xi^2)` over `alpha ||A||`, the bound on the
/// policy's voltage Lipschitz constant.
pub fn c3_threshold(m: f64, xi: f64, a_norm: f64, alpha: f64) -> Result<f64> {
    let rad = 1.0 - 2.0 * alpha * m + alpha * alpha * xi * xi;
    if rad < 0.0 || !(alpha > 0.0) || !(a_norm > 0.0) {
        return Err(Error::InvalidConstants(format!("m={m}, xi={xi}, alpha={alpha}, |A|={a_norm}")));
    }
    Ok((1.0 - rad.sqrt()) / (alpha * a_norm))
}

/// Gain clamp: 95% of the threshold.
pub fn k_max(m: f64, xi: f64, a_norm: f64, alpha: f64) -> Result<f64> {
    Ok(0.95 * c3_threshold(m, xi, a_norm, alpha)?)
}

/// Contraction factor of the closed loop.
pub fn rho_alpha(m: f64, xi: f64, l_theta: f64, a_norm: f64, alpha: f64) -> Result<f64> {
    let la = l_theta * a_norm;
    let rad = 1.0 + alpha * alpha * (xi * xi + la * la + 2.0 * xi * la) - 2.0 * alpha * m;
    if !(alpha > 0.0) || !(l_theta >= 0.0) {
        return Err(Error::InvalidConstants(format!("alpha={alpha}, L={l_theta}")));
    }
    if rad < 0.0 || !rad.is_finite() {
        return Err(Error::InvalidConstants(format!("negative radicand {rad}")));
    }
    Ok(rad.sqrt())
}

/// Asymptotic tracking error bound.
pub fn tracking_bound(rho: f64, gamma: f64, l_h: f64, approx_eps: f64) -> Result<f64> {
    if !(rho < 1.0) {
        return Err(Error::NoContraction(rho));
    }
    Ok((rho * gamma + (1.0 + rho) * l_h * approx_eps) / (1.0 - rho))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Separability holds by construction of the policy class.
    pub c1: bool,
    /// Gains finite and nonnegative.
    pub c2: bool,
    pub c3: bool,
    pub c3_threshold: f64,
    /// `threshold - L`; negative when violated.
    pub c3_margin: f64,
    pub lipschitz: f64,
    pub step_ok: bool,
    pub step_bound: f64,
    pub rho: f64,
    pub rho_below_one: bool,
    pub k_max: f64,
}

impl StabilityReport {
    /// Conditions for a unique equilibrium. The contraction factor is reported separately.
    pub fn all_pass(&self) -> bool {
        self.c1 && self.c2 && self.c3 && self.step_ok
    }
}

pub fn check_stability(m: f64, xi: f64, a_norm: f64, policy: &PolicyParams, alpha: f64) -> StabilityReport {
    let step_bound = 2.0 * m / (xi * xi);
    let threshold = c3_threshold(m, xi, a_norm, alpha).unwrap_or(f64::NAN);
    let lipschitz = policy.lipschitz();
    let c2 = policy.nodes.iter().all(|nd| {
        [&nd.p, &nd.q].iter().all(|ch| {
            ch.k.is_finite()
                && ch.k >= 0.0
                && ch.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
                && ch.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
        })
    });
    let rho = rho_alpha(m, xi, lipschitz, a_norm, alpha).unwrap_or(f64::NAN);
    StabilityReport {
        c1: true,
        c2,
        c3: lipschitz < threshold,
        c3_threshold: threshold,
        c3_margin: threshold - lipschitz,
        lipschitz,
        step_ok: alpha > 0.0 && alpha < step_bound,
        step_bound,
        rho,
        rho_below_one: rho < 1.0,
        k_max: 0.95 * threshold,
    }
}

/// Measured `||dx_dag|| / ||delta||` when every policy output is shifted by `probe`.
pub fn lemma1_check(
    data: &ScenarioStep,
    policy: &PolicyParams,
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    cfg: &ControllerConfig,
    probe: f64,
) -> Result<f64> {
    if probe == 0.0 {
        return Ok(0.0);
    }
    let b = mlp_outputs(data, policy);
    let free = data.bounds.free_coordinates();
    let x0 = data.bounds.midpoint();
    let base = solve_frozen(data, policy, model, graph, cfg, &x0, &b)?;
    let mut shifted = b.clone();
    let mut probed = 0usize;
    for (r, &c) in free.iter().enumerate() {
        if policy.channel(c).is_some() {
            shifted[r] += probe;
            probed += 1;
        }
    }
    let moved = solve_frozen(data, policy, model, graph, cfg, &base.x_dag, &shifted)?;
    for e in [&base, &moved] {
        if !e.converged {
            return Err(Error::EquilibriumNotConverged { t: data.t, gap: e.residual, iterations: e.iterations });
        }
    }
    let dx: f64 = base.x_dag.iter().zip(&moved.x_dag).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(dx / (probe.abs() * (probed as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_sensitivities, parse_feeder};
    use crate::policy::{init_policy, Arch};
    use crate::scenario::{BoxLimits, CostModel, VoltageLimits};
    use std::sync::Arc;

    fn setup() -> (FeederGraph, LinearVoltageModel, ScenarioStep) {
        let g = parse_feeder(include_str!("../data/feeder8.feeder")).unwrap();
        let m = build_sensitivities(&g, 1.0);
        let n = 7;
        let mut hi = vec![0.0; n];
        for i in [3, 5, 6] {
            hi[i] = 1.0;
        }
        let step = ScenarioStep {
            t: 0,
            tau: 6.0,
            p_u: (0..n).map(|i| -0.2 - 0.02 * i as f64).collect(),
            q_u: vec![-0.1; n],
            cost: Arc::new(CostModel { p_floor: vec![0.0; n], q_floor: vec![0.0; n], weight: 1.0 }),
            bounds: Arc::new(BoxLimits { p_lo: vec![0.0; n], p_hi: hi.clone(), q_lo: vec![0.0; n], q_hi: hi }),
            limits: VoltageLimits::default(),
        };
        (g, m, step)
    }

    #[test]
    fn rho_by_hand() {
        assert!((rho_alpha(2.0, 2.0, 0.0, 1.0, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!(rho_alpha(2.0, 0.1, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn tracking_bound_by_hand() {
        assert_eq!(tracking_bound(0.5, 0.0, 0.48, 0.0).unwrap(), 0.0);
        assert!((tracking_bound(0.5, 0.1, 0.0, 0.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(tracking_bound(1.0, 0.1, 0.5, 0.0), Err(Error::NoContraction(_))));
    }

    #[test]
    fn stability_report_boundaries() {
        let (_, m, step) = setup();
        let kmax = k_max(2.0, 2.0, m.a_norm, 0.48).unwrap();
        let mut p = init_policy(7, &[4, 6, 7], Arch { hidden_layers: 1, width: 4 }, kmax, 0.5, 0).unwrap();
        assert!(check_stability(2.0, 2.0, m.a_norm, &p, 0.48).all_pass());
        assert!(!check_stability(2.0, 2.0, m.a_norm, &p, 1.0).step_ok);
        p.nodes[0].p.k = 2.0 * kmax;
        let r = check_stability(2.0, 2.0, m.a_norm, &p, 0.48);
        assert!(!r.c3 && r.c3_margin < 0.0);
        let _ = step;
    }

    #[test]
    fn zero_step_size_freezes_setpoints() {
        let (g, m, step_data) = setup();
        let p = PolicyParams::empty(7);
        let cfg = ControllerConfig { alpha: 0.0, ..Default::default() };
        let st = ControllerState { x: step_data.bounds.midpoint(), v_hat: vec![1.0; 7], t: 0 };
        let next = step(&st, &step_data, &p, &m, &g, &cfg).unwrap();
        assert_eq!(next.x, st.x);
        assert_ne!(next.v_hat, st.v_hat);
    }

    #[test]
    fn zero_policy_step_is_gradient_descent() {
        let (g, m, step_data) = setup();
        let p = PolicyParams::empty(7);
        let cfg = ControllerConfig { alpha: 0.25, plant: Plant::Linear, ..Default::default() };
        let st = ControllerState { x: step_data.bounds.midpoint(), v_hat: vec![1.0; 7], t: 0 };
        let next = step(&st, &step_data, &p, &m, &g, &cfg).unwrap();
        for (a, b) in next.x.iter().zip(&st.x) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_step() {
        let (g, m, step_data) = setup();
        let kmax = k_max(2.0, 2.0, m.a_norm, 0.48).unwrap();
        let mut p = init_policy(7, &[4, 6, 7], Arch { hidden_layers: 2, width: 8 }, kmax, 0.3, 2).unwrap();
        for nd in &mut p.nodes {
            nd.p.biases.last_mut().unwrap()[0] = -1.5;
            nd.q.biases.last_mut().unwrap()[0] = -1.2;
        }
        for plant in [Plant::Linear, Plant::Nonlinear] {
            let cfg = ControllerConfig { plant, eq_tol: 1e-11, ..Default::default() };
            let eq = solve_equilibrium(&step_data, &p, &m, &g, &cfg).unwrap();
            assert!(eq.converged);
            let st = ControllerState { x: eq.x_dag.clone(), v_hat: eq.v_dag.clone(), t: 0 };
            let next = step(&st, &step_data, &p, &m, &g, &cfg).unwrap();
            let moved: f64 = next.x.iter().zip(&eq.x_dag).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(moved < 2.0 * cfg.eq_tol, "{plant:?}: {moved}");
        }
    }

    #[test]
    fn zero_policy_equilibrium_is_cost_floor() {
        let (g, m, step_data) = setup();
        let cfg = ControllerConfig { plant: Plant::Linear, ..Default::default() };
        let eq = solve_equilibrium(&step_data, &PolicyParams::empty(7), &m, &g, &cfg).unwrap();
        assert!(eq.converged);
        assert!(eq.x_dag.iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn local_update_ignores_other_nodes() {
        let (_, m, step_data) = setup();
        let kmax = k_max(2.0, 2.0, m.a_norm, 0.48).unwrap();
        let p = init_policy(7, &[4, 6, 7], Arch { hidden_layers: 1, width: 4 }, kmax, 0.5, 0).unwrap();
        let x = step_data.bounds.midpoint();
        let v = vec![0.97; 7];
        let i = 5;
        let before = local_update(&LocalView::of(&x, &v, &step_data, i), Some(&p.nodes[1]), 0.48);
        let mut other = step_data.clone();
        let mut x2 = x.clone();
        let mut v2 = v.clone();
        for j in (0..7).filter(|&j| j != i) {
            other.p_u[j] = 9.0;
            other.q_u[j] = -9.0;
            x2[j] = 0.123;
            x2[7 + j] = 0.321;
            v2[j] = 0.5;
        }
        let after = local_update(&LocalView::of(&x2, &v2, &other, i), Some(&p.nodes[1]), 0.48);
        assert_eq!(before, after);
    }

    #[test]
    fn lemma1_zero_probe() {
        let (g, m, step_data) = setup();
        let cfg = ControllerConfig { plant: Plant::Linear, ..Default::default() };
        let p = init_policy(7, &[4, 6, 7], Arch { hidden_layers: 1, width: 4 }, 1.0, 0.0, 0).unwrap();
        assert_eq!(lemma1_check(&step_data, &p, &m, &g, &cfg, 0.0).unwrap(), 0.0);
    }
}
