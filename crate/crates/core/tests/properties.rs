use std::sync::Arc;

use proptest::prelude::*;

use feedback_opf::controller::{local_update, solve_equilibrium_from, ControllerConfig, LocalView, Plant};
use feedback_opf::feeder::{build_sensitivities, parse_feeder, FeederGraph};
use feedback_opf::policy::{enforce_conditions, init_policy, Arch};
use feedback_opf::powerflow::{residual, solve_nonlinear, InjectionState};
use feedback_opf::scenario::{project_box, BoxLimits, CostModel, ScenarioStep, VoltageLimits};
use feedback_opf::trainer::{dual_update, hinge_surrogate, indicator, Batch, TrainerConfig, TrainerState};
use feedback_opf::{controller, Equilibrium};

/// Random radial feeder: bus `i` hangs off a uniformly chosen earlier bus.
fn feeder_strategy(max_buses: usize) -> impl Strategy<Value = (Vec<usize>, Vec<(f64, f64)>)> {
    (2..=max_buses).prop_flat_map(|n| {
        let parents: Vec<BoxedStrategy<usize>> = (1..n).map(|i| (0..i).boxed()).collect();
        let imp = proptest::collection::vec((1e-3..0.03f64, 1e-3..0.03f64), n - 1);
        (parents, imp)
    })
}

fn feeder_text(parents: &[usize], imp: &[(f64, f64)], scale: f64) -> String {
    let mut s = format!("buses: {}, base_kva: 100, v0: 1.0\n", parents.len() + 1);
    for (i, (&p, &(r, x))) in parents.iter().zip(imp).enumerate() {
        s.push_str(&format!("line,{},{},{},{},pu\n", p, i + 1, r * scale, x * scale));
    }
    s
}

fn build(parents: &[usize], imp: &[(f64, f64)]) -> FeederGraph {
    parse_feeder(&feeder_text(parents, imp, 1.0)).unwrap()
}

fn step(n: usize, p_u: Vec<f64>, q_u: Vec<f64>) -> ScenarioStep {
    ScenarioStep {
        t: 0,
        tau: 6.0,
        p_u,
        q_u,
        cost: Arc::new(CostModel { p_floor: vec![0.0; n], q_floor: vec![0.0; n], weight: 1.0 }),
        bounds: Arc::new(BoxLimits { p_lo: vec![0.0; n], p_hi: vec![1.0; n], q_lo: vec![0.0; n], q_hi: vec![1.0; n] }),
        limits: VoltageLimits::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sensitivities_symmetric_and_match_shared_path((parents, imp) in feeder_strategy(12)) {
        let g = build(&parents, &imp);
        let m = build_sensitivities(&g, 1.0);
        let n = g.n();
        for i in 1..=n {
            let pi = g.path_to_root(i).unwrap();
            for j in 1..=n {
                let pj = g.path_to_root(j).unwrap();
                let (mut r, mut x) = (0.0, 0.0);
                for a in &pi {
                    if pj.iter().any(|b| b.to_bus == a.to_bus) {
                        r += 2.0 * a.r;
                        x += 2.0 * a.x;
                    }
                }
                prop_assert!((m.r[(i - 1, j - 1)] - r).abs() <= 1e-15);
                prop_assert!((m.x[(i - 1, j - 1)] - x).abs() <= 1e-15);
                prop_assert_eq!(m.r[(i - 1, j - 1)], m.r[(j - 1, i - 1)]);
            }
        }
    }

    #[test]
    fn sensitivities_scale_with_impedance((parents, imp) in feeder_strategy(10), c in 0.5..4.0f64) {
        let a = build_sensitivities(&build(&parents, &imp), 1.0);
        let b = build_sensitivities(&parse_feeder(&feeder_text(&parents, &imp, c)).unwrap(), 1.0);
        prop_assert!((&a.r * c - &b.r).abs().max() <= 1e-12);
        prop_assert!((&a.x * c - &b.x).abs().max() <= 1e-12);
    }

    #[test]
    fn projection_idempotent_and_nonexpansive(
        xs in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..8),
        lo in proptest::collection::vec(-1.0..0.5f64, 8),
        span in proptest::collection::vec(0.0..2.0f64, 8),
    ) {
        let n = xs.len().div_ceil(2);
        let dim = 2 * n;
        let b = BoxLimits {
            p_lo: lo[..n].to_vec(),
            p_hi: (0..n).map(|i| lo[i] + span[i]).collect(),
            q_lo: lo[..n].iter().map(|v| v - 0.1).collect(),
            q_hi: (0..n).map(|i| lo[i] - 0.1 + span[i]).collect(),
        };
        let x: Vec<f64> = (0..dim).map(|k| xs[k % xs.len()].0).collect();
        let y: Vec<f64> = (0..dim).map(|k| xs[k % xs.len()].1).collect();
        let px = project_box(&x, &b);
        prop_assert_eq!(project_box(&px, &b), px.clone());
        let py = project_box(&y, &b);
        let d = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d(&px, &py) <= d(&x, &y) + 1e-12);
    }

    #[test]
    fn nonlinear_solutions_satisfy_branch_flow(
        (parents, imp) in feeder_strategy(15),
        loads in proptest::collection::vec((0.0..0.8f64, 0.0..0.4f64, 0.0..0.6f64, 0.0..0.3f64), 15),
    ) {
        let g = build(&parents, &imp);
        let n = g.n();
        let s = InjectionState {
            p: loads[..n].iter().map(|l| l.2).collect(),
            q: loads[..n].iter().map(|l| l.3).collect(),
            p_u: loads[..n].iter().map(|l| -l.0).collect(),
            q_u: loads[..n].iter().map(|l| -l.1).collect(),
        };
        if let Ok(sol) = solve_nonlinear(&g, &s, 1.0) {
            if sol.converged {
                prop_assert!(residual(&g, &s, &sol, 1.0) <= 1e-8);
                prop_assert!(sol.ell.iter().all(|&l| l >= 0.0));
                prop_assert!(sol.v.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn local_update_stays_in_box(
        p in -2.0..3.0f64, q in -2.0..3.0f64, v in 0.8..1.2f64, pu in -2.0..2.0f64, qu in -2.0..2.0f64,
        alpha in 0.01..1.0f64, seed in 0u64..1000,
    ) {
        let policy = init_policy(1, &[1], Arch { hidden_layers: 2, width: 8 }, 1.0, 0.5, seed).unwrap();
        let view = LocalView {
            p, q, v_hat: v, p_u: pu, q_u: qu, p_floor: 0.0, q_floor: 0.0, weight: 1.0,
            p_lo: -0.5, p_hi: 1.5, q_lo: 0.0, q_hi: 0.7,
        };
        let (np, nq) = local_update(&view, Some(&policy.nodes[0]), alpha);
        prop_assert!((-0.5..=1.5).contains(&np));
        prop_assert!((0.0..=0.7).contains(&nq));
    }

    #[test]
    fn equilibrium_is_start_independent_under_gain_clamp(
        (parents, imp) in feeder_strategy(8),
        seed in 0u64..500,
        loads in proptest::collection::vec(0.0..0.5f64, 8),
    ) {
        let g = build(&parents, &imp);
        let m = build_sensitivities(&g, 1.0);
        let n = g.n();
        let kmax = controller::k_max(2.0, 2.0, m.a_norm, 0.48).unwrap();
        let nodes: Vec<usize> = (1..=n).collect();
        let mut policy = init_policy(n, &nodes, Arch { hidden_layers: 1, width: 8 }, kmax, 1.0, seed).unwrap();
        enforce_conditions(&mut policy, kmax);
        let data = step(n, loads[..n].iter().map(|l| -l).collect(), vec![-0.1; n]);
        let cfg = ControllerConfig { plant: Plant::Linear, eq_tol: 1e-12, eq_max_iters: 20_000, ..ControllerConfig::default() };
        let a = solve_equilibrium_from(&data, &policy, &m, &g, &cfg, &vec![0.0; 2 * n]).unwrap();
        let b = solve_equilibrium_from(&data, &policy, &m, &g, &cfg, &vec![1.0; 2 * n]).unwrap();
        prop_assert!(a.converged && b.converged);
        let d = a.x_dag.iter().zip(&b.x_dag).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        prop_assert!(d <= 1e-10, "starts disagree by {}", d);
    }

    #[test]
    fn duals_stay_nonnegative(
        mu in proptest::collection::vec(0.0..10.0f64, 3),
        vs in proptest::collection::vec(0.8..1.2f64, 3),
        beta in 0.01..0.9f64,
        sigma in 0.1..500.0f64,
    ) {
        let n = 3;
        let policy = init_policy(n, &[1], Arch { hidden_layers: 1, width: 2 }, 1.0, 0.5, 0).unwrap();
        let cfg = TrainerConfig { beta, sigma_mu: sigma, ..TrainerConfig::default() };
        let mut ts = TrainerState::new(policy, &cfg);
        ts.mu_lo = mu.clone();
        ts.mu_hi = mu.iter().map(|m| m * 0.5).collect();
        let data = step(n, vec![0.0; n], vec![0.0; n]);
        let eq = Equilibrium { x_dag: vec![0.0; 2 * n], v_dag: vs, iterations: 1, converged: true, residual: 0.0, gaps: vec![] };
        let batch = Batch { samples: vec![&data], equilibria: vec![Some(eq)] };
        dual_update(&mut ts, &batch);
        prop_assert!(ts.mu_lo.iter().chain(&ts.mu_hi).all(|&m| m >= 0.0));
    }

    #[test]
    fn hinge_majorizes_indicator(lambda in 1e-6..10.0f64, g in -20.0..20.0f64) {
        prop_assert!(indicator(g) <= hinge_surrogate(lambda, g) / lambda + 1e-12);
    }
}
