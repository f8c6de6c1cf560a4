//! Reference solutions: the per-step linearized OPF optimum and the
//! centralized primal-dual feedback baseline.

use nalgebra::{DMatrix, DVector};

use crate::controller::{measure, Plant};
use crate::error::{Error, Result};
use crate::feeder::{FeederGraph, LinearVoltageModel};
use crate::powerflow::env_voltage;
use crate::scenario::ScenarioStep;

#[derive(Debug, Clone, PartialEq)]
pub struct OpfSolution {
    pub x_star: Vec<f64>,
    pub v_star: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub mu_lo: Vec<f64>,
    pub mu_hi: Vec<f64>,
}

/// Individual KKT violations of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktCertificate {
    /// Projected-gradient residual of the Lagrangian over the box.
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktCertificate {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Evaluate the KKT conditions of the linearized OPF at `(x, mu_lo, mu_hi)`.
pub fn kkt_certificate(data: &ScenarioStep, model: &LinearVoltageModel, x: &[f64], mu_lo: &[f64], mu_hi: &[f64]) -> KktCertificate {
    let n = model.n();
    let mut v = model.apply(x);
    for (a, e) in v.iter_mut().zip(env_voltage(model, &data.p_u, &data.q_u)) {
        *a += e;
    }
    let diff: Vec<f64> = mu_hi.iter().zip(mu_lo).map(|(h, l)| h - l).collect();
    let at = model.apply_transpose(&diff);
    let grad = data.cost.grad(x);
    let mut stationarity: f64 = 0.0;
    let mut primal: f64 = 0.0;
    for c in 0..2 * n {
        let g = grad[c] + at[c];
        stationarity = stationarity.max((x[c] - data.bounds.clamp(c, x[c] - g)).abs());
        primal = primal.max(data.bounds.lo(c) - x[c]).max(x[c] - data.bounds.hi(c));
    }
    let lim = data.limits;
    let mut dual: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for j in 0..n {
        primal = primal.max(lim.v_lo - v[j]).max(v[j] - lim.v_hi);
        dual = dual.max(-mu_lo[j]).max(-mu_hi[j]);
        complementarity = complementarity.max((mu_lo[j] * (v[j] - lim.v_lo)).abs()).max((mu_hi[j] * (lim.v_hi - v[j])).abs());
    }
    KktCertificate { stationarity, primal: primal.max(0.0), dual: dual.max(0.0), complementarity }
}

const DUAL_GUARD: f64 = 1e8;

/// Minimize the generation cost under the linearized voltage limits and the box.
pub fn solve_opf_linear(data: &ScenarioStep, model: &LinearVoltageModel, tol: f64, cap: usize) -> Result<OpfSolution> {
    let n = model.n();
    solve_opf_linear_from(data, model, tol, cap, &vec![0.0; n], &vec![0.0; n])
}

/// Same as [`solve_opf_linear`] with an explicit dual starting point.
pub fn solve_opf_linear_from(
    data: &ScenarioStep,
    model: &LinearVoltageModel,
    tol: f64,
    cap: usize,
    mu_lo0: &[f64],
    mu_hi0: &[f64],
) -> Result<OpfSolution> {
    let n = model.n();
    if data.p_u.len() != n || mu_lo0.len() != n || mu_hi0.len() != n {
        return Err(Error::dim("OPF inputs must match the model size"));
    }
    let two_w = 2.0 * data.cost.weight;
    let lim = data.limits;
    let free = data.bounds.free_coordinates();
    let fixed = data.bounds.lower();
    let mut base = model.apply(&{
        let mut f = fixed.clone();
        for &c in &free {
            f[c] = 0.0;
        }
        f
    });
    for (a, e) in base.iter_mut().zip(env_voltage(model, &data.p_u, &data.q_u)) {
        *a += e;
    }
    let nf = free.len();
    let a_f = DMatrix::from_fn(n, nf, |i, r| model.a_at(i, free[r]));
    let floor: Vec<f64> = free.iter().map(|&c| data.cost.floor(c)).collect();
    let lo: Vec<f64> = free.iter().map(|&c| data.bounds.lo(c)).collect();
    let hi: Vec<f64> = free.iter().map(|&c| data.bounds.hi(c)).collect();

    let primal_of = |nu: &DVector<f64>| -> Vec<f64> {
        let at = a_f.tr_mul(nu);
        (0..nf).map(|r| (floor[r] - at[r] / two_w).max(lo[r]).min(hi[r])).collect()
    };
    let assemble = |xf: &[f64]| -> Vec<f64> {
        let mut x = fixed.clone();
        for (r, &c) in free.iter().enumerate() {
            x[c] = xf[r];
        }
        x
    };
    let volts = |xf: &[f64]| -> Vec<f64> {
        let dv = &a_f * DVector::from_column_slice(xf);
        base.iter().zip(dv.iter()).map(|(b, d)| b + d).collect()
    };

    let lip = (model.a_norm * model.a_norm / data.cost.weight).max(1e-12);
    let step = 1.0 / lip;
    let mut mu_lo = DVector::from_column_slice(mu_lo0).map(|m| m.max(0.0));
    let mut mu_hi = DVector::from_column_slice(mu_hi0).map(|m| m.max(0.0));
    let (mut y_lo, mut y_hi) = (mu_lo.clone(), mu_hi.clone());
    let mut theta: f64 = 1.0;
    let mut best: Option<(f64, Vec<f64>, DVector<f64>, DVector<f64>)> = None;

    for it in 1..=cap {
        let xf = primal_of(&(&y_hi - &y_lo));
        let v = volts(&xf);
        let next_lo = DVector::from_fn(n, |j, _| (y_lo[j] + step * (lim.v_lo - v[j])).max(0.0));
        let next_hi = DVector::from_fn(n, |j, _| (y_hi[j] + step * (v[j] - lim.v_hi)).max(0.0));
        if next_lo.amax().max(next_hi.amax()) > DUAL_GUARD {
            return Err(Error::Infeasible { t: data.t });
        }
        // Gradient-based restart keeps the accelerated scheme monotone.
        let ascent = (&y_lo - &next_lo).dot(&(&next_lo - &mu_lo)) + (&y_hi - &next_hi).dot(&(&next_hi - &mu_hi));
        let theta_next = if ascent > 0.0 { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) };
        let mom = if ascent > 0.0 { 0.0 } else { (theta - 1.0) / theta_next };
        y_lo = &next_lo + (&next_lo - &mu_lo) * mom;
        y_hi = &next_hi + (&next_hi - &mu_hi) * mom;
        y_lo.apply(|m| *m = m.max(0.0));
        y_hi.apply(|m| *m = m.max(0.0));
        mu_lo = next_lo;
        mu_hi = next_hi;
        theta = theta_next;

        if it % 25 == 0 || it == cap {
            let xf = primal_of(&(&mu_hi - &mu_lo));
            let mut candidates = vec![(xf.clone(), mu_lo.clone(), mu_hi.clone())];
            if let Some(p) = polish(&xf, &mu_lo, &mu_hi, &a_f, &base, &floor, &lo, &hi, two_w, lim.v_lo, lim.v_hi) {
                candidates.insert(0, p);
            }
            for (xf, ml, mh) in candidates {
                let x = assemble(&xf);
                let cert = kkt_certificate(data, model, &x, ml.as_slice(), mh.as_slice()).max();
                if best.as_ref().is_none_or(|b| cert < b.0) {
                    best = Some((cert, xf, ml, mh));
                }
            }
            if best.as_ref().is_some_and(|b| b.0 <= tol) {
                let (cert, xf, ml, mh) = best.unwrap();
                return Ok(finish(data, model, assemble(&xf), ml, mh, cert, it));
            }
        }
    }
    let (cert, xf, ml, mh) = best.expect("cap is at least one check");
    let x = assemble(&xf);
    let c = kkt_certificate(data, model, &x, ml.as_slice(), mh.as_slice());
    if c.primal > tol.sqrt() {
        return Err(Error::Infeasible { t: data.t });
    }
    Ok(finish(data, model, x, ml, mh, cert, cap))
}

fn finish(
    data: &ScenarioStep,
    model: &LinearVoltageModel,
    x: Vec<f64>,
    mu_lo: DVector<f64>,
    mu_hi: DVector<f64>,
    cert: f64,
    iterations: usize,
) -> OpfSolution {
    let mut v = model.apply(&x);
    for (a, e) in v.iter_mut().zip(env_voltage(model, &data.p_u, &data.q_u)) {
        *a += e;
    }
    OpfSolution {
        objective: data.cost.value(&x),
        x_star: x,
        v_star: v,
        kkt_residual: cert,
        iterations,
        mu_lo: mu_lo.iter().copied().collect(),
        mu_hi: mu_hi.iter().copied().collect(),
    }
}

/// Solve the equality-constrained problem on the active set guessed from a dual iterate.
#[allow(clippy::too_many_arguments)]
fn polish(
    xf: &[f64],
    mu_lo: &DVector<f64>,
    mu_hi: &DVector<f64>,
    a_f: &DMatrix<f64>,
    base: &[f64],
    floor: &[f64],
    lo: &[f64],
    hi: &[f64],
    two_w: f64,
    v_lo: f64,
    v_hi: f64,
) -> Option<(Vec<f64>, DVector<f64>, DVector<f64>)> {
    let n = a_f.nrows();
    let nf = a_f.ncols();
    let rows: Vec<(usize, f64)> = (0..n)
        .filter_map(|j| {
            if mu_lo[j] > 0.0 {
                Some((j, v_lo))
            } else if mu_hi[j] > 0.0 {
                Some((j, v_hi))
            } else {
                None
            }
        })
        .collect();
    let interior: Vec<usize> = (0..nf).filter(|&r| xf[r] > lo[r] && xf[r] < hi[r]).collect();
    let mut x = xf.to_vec();
    let ns = rows.len();
    let mut nu = DVector::zeros(ns);
    if ns > 0 {
        let a_si = DMatrix::from_fn(ns, interior.len(), |s, r| a_f[(rows[s].0, interior[r])]);
        let gram = &a_si * a_si.transpose() / two_w;
        let rhs = DVector::from_fn(ns, |s, _| {
            let (j, target) = rows[s];
            let fixed: f64 = (0..nf).filter(|r| !interior.contains(r)).map(|r| a_f[(j, r)] * xf[r]).sum();
            let free: f64 = interior.iter().map(|&r| a_f[(j, r)] * floor[r]).sum();
            free + fixed + base[j] - target
        });
        nu = gram.lu().solve(&rhs)?;
        for (k, &r) in interior.iter().enumerate() {
            let shift: f64 = (0..ns).map(|s| a_si[(s, k)] * nu[s]).sum();
            x[r] = (floor[r] - shift / two_w).max(lo[r]).min(hi[r]);
        }
    } else {
        for &r in &interior {
            x[r] = floor[r].max(lo[r]).min(hi[r]);
        }
    }
    let mut ml = DVector::zeros(n);
    let mut mh = DVector::zeros(n);
    for (s, &(j, target)) in rows.iter().enumerate() {
        // nu is mu_hi - mu_lo on the row.
        if target == v_lo {
            ml[j] = (-nu[s]).max(0.0);
        } else {
            mh[j] = nu[s].max(0.0);
        }
    }
    Some((x, ml, mh))
}

/// Largest step between consecutive optimizers.
pub fn gamma_estimate(solutions: &[OpfSolution]) -> f64 {
    solutions
        .windows(2)
        .map(|w| w[0].x_star.iter().zip(&w[1].x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Centralized primal-dual feedback controller used for comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub x: Vec<f64>,
    pub mu_lo: Vec<f64>,
    pub mu_hi: Vec<f64>,
    pub alpha_b: f64,
    pub sigma_b: f64,
}

impl BaselineState {
    pub fn new(x: Vec<f64>, alpha_b: f64, sigma_b: f64) -> Self {
        let n = x.len() / 2;
        Self { x, mu_lo: vec![0.0; n], mu_hi: vec![0.0; n], alpha_b, sigma_b }
    }
}

/// One baseline update fed by the nonlinear plant.
pub fn baseline_step(state: &BaselineState, data: &ScenarioStep, model: &LinearVoltageModel, graph: &FeederGraph) -> Result<BaselineState> {
    baseline_step_with(state, data, model, graph, Plant::Nonlinear)
}

pub fn baseline_step_with(
    state: &BaselineState,
    data: &ScenarioStep,
    model: &LinearVoltageModel,
    graph: &FeederGraph,
    plant: Plant,
) -> Result<BaselineState> {
    let n = model.n();
    if state.x.len() != 2 * n {
        return Err(Error::dim("baseline state does not match the model"));
    }
    let v_hat = measure(plant, &state.x, data, model, graph)?;
    Ok(baseline_update(state, &v_hat, data, model))
}

/// Dual and primal baseline update given a voltage measurement.
pub fn baseline_update(state: &BaselineState, v_hat: &[f64], data: &ScenarioStep, model: &LinearVoltageModel) -> BaselineState {
    let n = model.n();
    let lim = data.limits;
    let mu_lo: Vec<f64> = (0..n).map(|j| (state.mu_lo[j] + state.sigma_b * (lim.v_lo - v_hat[j])).max(0.0)).collect();
    let mu_hi: Vec<f64> = (0..n).map(|j| (state.mu_hi[j] + state.sigma_b * (v_hat[j] - lim.v_hi)).max(0.0)).collect();
    let diff: Vec<f64> = mu_hi.iter().zip(&mu_lo).map(|(h, l)| h - l).collect();
    let at = model.apply_transpose(&diff);
    let grad = data.cost.grad(&state.x);
    let x = (0..2 * n).map(|c| data.bounds.clamp(c, state.x[c] - state.alpha_b * (grad[c] + at[c]))).collect();
    BaselineState { x, mu_lo, mu_hi, alpha_b: state.alpha_b, sigma_b: state.sigma_b }
}
