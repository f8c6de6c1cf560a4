//! Branch flow (DistFlow) plant and its lossless linearization.

use crate::error::{Error, Result};
use crate::feeder::{FeederGraph, LinearVoltageModel};

/// Controllable and uncontrollable injections, indexed by non-root bus minus one.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub p_u: Vec<f64>,
    pub q_u: Vec<f64>,
}

impl InjectionState {
    pub fn zeros(n: usize) -> Self {
        Self { p: vec![0.0; n], q: vec![0.0; n], p_u: vec![0.0; n], q_u: vec![0.0; n] }
    }

    /// Build from a stacked setpoint `x = [p; q]`.
    pub fn from_stacked(x: &[f64], p_u: &[f64], q_u: &[f64]) -> Self {
        let n = p_u.len();
        Self { p: x[..n].to_vec(), q: x[n..].to_vec(), p_u: p_u.to_vec(), q_u: q_u.to_vec() }
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    fn check(&self, n: usize) -> Result<()> {
        for (name, v) in [("p", &self.p), ("q", &self.q), ("p_u", &self.p_u), ("q_u", &self.q_u)] {
            if v.len() != n {
                return Err(Error::dim(format!("{name} has length {}, feeder has {n} nodes", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::dim(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v: Vec<f64>,
    /// Sending-end active flow on the line feeding each bus.
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub ell: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// Stop when the voltage update falls below this and the current update
    /// below this times the largest current (at least one).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500 }
    }
}

/// Backward/forward sweep with default tolerances.
pub fn solve_nonlinear(graph: &FeederGraph, s: &InjectionState, v0: f64) -> Result<PowerFlowSolution> {
    solve_nonlinear_with(graph, s, v0, SweepOptions::default())
}

pub fn solve_nonlinear_with(
    graph: &FeederGraph,
    s: &InjectionState,
    v0: f64,
    opts: SweepOptions,
) -> Result<PowerFlowSolution> {
    sweep(graph, s, v0, opts, None)
}

/// Same sweep, started from the branch currents of a nearby solution.
pub fn solve_nonlinear_warm(
    graph: &FeederGraph,
    s: &InjectionState,
    v0: f64,
    opts: SweepOptions,
    warm: &PowerFlowSolution,
) -> Result<PowerFlowSolution> {
    if warm.ell.len() != graph.n() {
        return Err(Error::dim("warm start does not match the feeder"));
    }
    sweep(graph, s, v0, opts, Some(warm))
}

/// Flattened line data in breadth-first order; `parent` is `usize::MAX` at the root.
struct Hop {
    k: usize,
    parent: usize,
    r: f64,
    x: f64,
    z2: f64,
}

fn sweep(graph: &FeederGraph, s: &InjectionState, v0: f64, opts: SweepOptions, warm: Option<&PowerFlowSolution>) -> Result<PowerFlowSolution> {
    let n = graph.n();
    s.check(n)?;
    if !(v0 > 0.0) {
        return Err(Error::Config(format!("slack voltage must be positive, got {v0}")));
    }
    let hops: Vec<Hop> = graph
        .order()
        .iter()
        .map(|&j| {
            let l = graph.line_to(j);
            Hop { k: j - 1, parent: if l.from_bus == 0 { usize::MAX } else { l.from_bus - 1 }, r: l.r, x: l.x, z2: l.z_squared() }
        })
        .collect();
    let load_p: Vec<f64> = s.p_u.iter().zip(&s.p).map(|(a, b)| -(a + b)).collect();
    let load_q: Vec<f64> = s.q_u.iter().zip(&s.q).map(|(a, b)| -(a + b)).collect();
    let mut p_flow = vec![0.0; n];
    let mut q_flow = vec![0.0; n];
    let (mut ell, mut v) = match warm {
        Some(w) => (w.ell.clone(), w.v.clone()),
        None => (vec![0.0; n], vec![v0; n]),
    };
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        // Backward: own load plus losses, then push each subtree total to its parent.
        for h in &hops {
            p_flow[h.k] = load_p[h.k] + h.r * ell[h.k];
            q_flow[h.k] = load_q[h.k] + h.x * ell[h.k];
        }
        for h in hops.iter().rev() {
            if h.parent != usize::MAX {
                p_flow[h.parent] += p_flow[h.k];
                q_flow[h.parent] += q_flow[h.k];
            }
        }
        // Forward: voltages, then currents from the parent voltage.
        let mut dv: f64 = 0.0;
        for h in &hops {
            let vi = if h.parent == usize::MAX { v0 } else { v[h.parent] };
            let vj = vi - 2.0 * (h.r * p_flow[h.k] + h.x * q_flow[h.k]) + h.z2 * ell[h.k];
            if !(vj > 0.0) {
                return Err(Error::VoltageCollapse { iteration: iterations, bus: h.k + 1 });
            }
            dv = dv.max((vj - v[h.k]).abs());
            v[h.k] = vj;
        }
        let mut dl: f64 = 0.0;
        let mut l_max: f64 = 1.0;
        for h in &hops {
            let vi = if h.parent == usize::MAX { v0 } else { v[h.parent] };
            let lj = (p_flow[h.k] * p_flow[h.k] + q_flow[h.k] * q_flow[h.k]) / vi;
            dl = dl.max((lj - ell[h.k]).abs());
            l_max = l_max.max(lj);
            ell[h.k] = lj;
        }
        if dv < opts.tol && dl < opts.tol * l_max {
            converged = true;
            break;
        }
    }
    Ok(PowerFlowSolution { v, p_flow, q_flow, ell, iterations, converged })
}

/// Largest absolute violation across the four branch flow equation families.
pub fn residual(graph: &FeederGraph, s: &InjectionState, sol: &PowerFlowSolution, v0: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for line in &graph.lines {
        let j = line.to_bus;
        let k = j - 1;
        let vi = if line.from_bus == 0 { v0 } else { sol.v[line.from_bus - 1] };
        let down_p: f64 = graph.children[j].iter().map(|&c| sol.p_flow[c - 1]).sum();
        let down_q: f64 = graph.children[j].iter().map(|&c| sol.q_flow[c - 1]).sum();
        let ra = sol.p_flow[k] - (-s.p_u[k] - s.p[k] + down_p + line.r * sol.ell[k]);
        let rb = sol.q_flow[k] - (-s.q_u[k] - s.q[k] + down_q + line.x * sol.ell[k]);
        let rc = sol.v[k] - (vi - 2.0 * (line.r * sol.p_flow[k] + line.x * sol.q_flow[k]) + line.z_squared() * sol.ell[k]);
        let rd = sol.ell[k] * vi - (sol.p_flow[k].powi(2) + sol.q_flow[k].powi(2));
        worst = worst.max(ra.abs()).max(rb.abs()).max(rc.abs()).max(rd.abs());
    }
    worst
}

/// `v0 1 + R p_u + X q_u`.
pub fn env_voltage(model: &LinearVoltageModel, p_u: &[f64], q_u: &[f64]) -> Vec<f64> {
    let n = model.n();
    let mut stacked = Vec::with_capacity(2 * n);
    stacked.extend_from_slice(p_u);
    stacked.extend_from_slice(q_u);
    let mut v = model.apply(&stacked);
    for x in &mut v {
        *x += model.v0;
    }
    v
}

/// Linearized voltages `R p + X q + v_env`.
pub fn solve_linear(model: &LinearVoltageModel, s: &InjectionState) -> Vec<f64> {
    let n = model.n();
    let mut stacked = Vec::with_capacity(2 * n);
    for (a, b) in s.p.iter().zip(&s.p_u) {
        stacked.push(a + b);
    }
    for (a, b) in s.q.iter().zip(&s.q_u) {
        stacked.push(a + b);
    }
    let mut v = model.apply(&stacked);
    for x in &mut v {
        *x += model.v0;
    }
    v
}
