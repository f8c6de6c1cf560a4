//! Time-varying OPF instances: exogenous injections, costs and capability boxes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::FeederGraph;

/// Quadratic generation cost `weight * ((p - p_floor)^2 + (q - q_floor)^2)` per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub p_floor: Vec<f64>,
    pub q_floor: Vec<f64>,
    pub weight: f64,
}

impl CostModel {
    pub fn n(&self) -> usize {
        self.p_floor.len()
    }

    /// Floor of stacked coordinate `c`.
    #[inline]
    pub fn floor(&self, c: usize) -> f64 {
        let n = self.n();
        if c < n {
            self.p_floor[c]
        } else {
            self.q_floor[c - n]
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        cost_value(self, &x[..self.n()], &x[self.n()..])
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        cost_grad(self, &x[..self.n()], &x[self.n()..])
    }
}

pub fn cost_value(cost: &CostModel, p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().zip(&cost.p_floor).map(|(a, b)| (a - b) * (a - b)).sum();
    let sq: f64 = q.iter().zip(&cost.q_floor).map(|(a, b)| (a - b) * (a - b)).sum();
    cost.weight * (sp + sq)
}

/// Stacked `[df/dp; df/dq]`.
pub fn cost_grad(cost: &CostModel, p: &[f64], q: &[f64]) -> Vec<f64> {
    let two_w = 2.0 * cost.weight;
    p.iter()
        .zip(&cost.p_floor)
        .chain(q.iter().zip(&cost.q_floor))
        .map(|(a, b)| two_w * (a - b))
        .collect()
}

/// Strong convexity and smoothness constants `(m, xi)`.
pub fn convexity_constants(cost: &CostModel) -> (f64, f64) {
    (2.0 * cost.weight, 2.0 * cost.weight)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxLimits {
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
}

impl BoxLimits {
    pub fn n(&self) -> usize {
        self.p_lo.len()
    }

    #[inline]
    pub fn lo(&self, c: usize) -> f64 {
        let n = self.n();
        if c < n {
            self.p_lo[c]
        } else {
            self.q_lo[c - n]
        }
    }

    #[inline]
    pub fn hi(&self, c: usize) -> f64 {
        let n = self.n();
        if c < n {
            self.p_hi[c]
        } else {
            self.q_hi[c - n]
        }
    }

    #[inline]
    pub fn clamp(&self, c: usize, value: f64) -> f64 {
        value.max(self.lo(c)).min(self.hi(c))
    }

    pub fn lower(&self) -> Vec<f64> {
        self.p_lo.iter().chain(&self.q_lo).copied().collect()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        (0..2 * self.n()).map(|c| 0.5 * (self.lo(c) + self.hi(c))).collect()
    }

    /// Stacked coordinates whose box is not a single point.
    pub fn free_coordinates(&self) -> Vec<usize> {
        (0..2 * self.n()).filter(|&c| self.hi(c) > self.lo(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        for v in [&self.p_hi, &self.q_lo, &self.q_hi] {
            if v.len() != n {
                return Err(Error::dim("box limit vectors differ in length"));
            }
        }
        for c in 0..2 * n {
            if !(self.lo(c) <= self.hi(c)) {
                return Err(Error::Config(format!("box coordinate {c} has lo > hi")));
            }
        }
        Ok(())
    }
}

/// Elementwise clamp of a stacked `[p; q]` vector.
pub fn project_box(x: &[f64], bounds: &BoxLimits) -> Vec<f64> {
    x.iter().enumerate().map(|(c, &v)| bounds.clamp(c, v)).collect()
}

/// Squared-voltage limits shared by every node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub v_lo: f64,
    pub v_hi: f64,
}

impl Default for VoltageLimits {
    fn default() -> Self {
        Self { v_lo: 0.9025, v_hi: 1.1025 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioStep {
    pub t: usize,
    pub tau: f64,
    pub p_u: Vec<f64>,
    pub q_u: Vec<f64>,
    pub cost: Arc<CostModel>,
    pub bounds: Arc<BoxLimits>,
    pub limits: VoltageLimits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub steps: Vec<ScenarioStep>,
    pub seed: u64,
    pub provenance: String,
    /// Bus ids whose injections are controllable, in policy order.
    pub controllable: Vec<usize>,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.steps.first().map(|s| s.p_u.len()).unwrap_or(0)
    }
}

fn default_trend() -> Vec<[f64; 2]> {
    // Net demand rising into the evening as solar output fades.
    vec![
        [16.0, 0.55],
        [17.0, 0.62],
        [18.0, 0.78],
        [19.0, 0.93],
        [20.0, 1.00],
        [21.0, 0.97],
        [22.0, 0.90],
        [23.0, 0.80],
        [24.0, 0.70],
    ]
}

/// Settings for the synthetic load generator. Loads are per node in kW / kVAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Bus names (or numeric ids) with controllable injections.
    pub controllable: Vec<String>,
    /// Default load per bus name: `[kW, kVAR]`.
    pub loads: BTreeMap<String, [f64; 2]>,
    pub horizon: usize,
    /// Slot length in seconds.
    pub tau: f64,
    pub start_hour: f64,
    /// Spacing of the coarse profile that gets interpolated down to `tau`.
    pub coarse_minutes: f64,
    /// `(hour, fraction)` breakpoints of the daily trend.
    pub trend: Vec<[f64; 2]>,
    /// Relative jitter applied to each coarse trend point.
    pub trend_jitter: f64,
    /// Optional CSV with `hour,fraction` rows replacing `trend`.
    pub trend_csv: Option<PathBuf>,
    pub noise_sd: f64,
    /// Scales the random load term; 0 disables it.
    pub noise_scale: f64,
    /// Use one random draw for both active and reactive load.
    pub joint_pq: bool,
    pub p_max_kw: f64,
    pub q_max_kvar: f64,
    pub cost_weight: f64,
    pub v_lo: f64,
    pub v_hi: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            controllable: Vec::new(),
            loads: BTreeMap::new(),
            horizon: 4800,
            tau: 6.0,
            start_hour: 16.0,
            coarse_minutes: 5.0,
            trend: default_trend(),
            trend_jitter: 0.0,
            trend_csv: None,
            noise_sd: 0.1,
            noise_scale: 1.0,
            joint_pq: true,
            p_max_kw: 500.0,
            q_max_kvar: 300.0,
            cost_weight: 1.0,
            v_lo: 0.9025,
            v_hi: 1.1025,
        }
    }
}

fn resolve_bus(graph: &FeederGraph, key: &str) -> Result<usize> {
    if let Some(id) = graph.bus_by_name(key) {
        return Ok(id);
    }
    match key.parse::<usize>() {
        Ok(id) if id < graph.buses.len() => Ok(id),
        Ok(id) => Err(Error::UnknownBus(id)),
        Err(_) => Err(Error::Config(format!("unknown bus `{key}`"))),
    }
}

fn interpolate(points: &[[f64; 2]], x: f64) -> f64 {
    if x <= points[0][0] {
        return points[0][1];
    }
    for w in points.windows(2) {
        let ([x0, y0], [x1, y1]) = (w[0], w[1]);
        if x <= x1 {
            return if x1 > x0 { y0 + (y1 - y0) * (x - x0) / (x1 - x0) } else { y1 };
        }
    }
    points[points.len() - 1][1]
}

fn read_trend_csv(path: &Path) -> Result<Vec<[f64; 2]>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<(f64, f64)>() {
        let (h, f) = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        out.push([h, f]);
    }
    Ok(out)
}

/// Synthetic net-load scenario: a smooth normalized trend plus per-node noise.
pub fn generate_profile(graph: &FeederGraph, cfg: &GeneratorConfig, seed: u64) -> Result<Scenario> {
    let n = graph.n();
    let base = graph.base_power;
    if cfg.horizon == 0 || !(cfg.tau > 0.0) || !(cfg.coarse_minutes > 0.0) {
        return Err(Error::Config("horizon, tau and coarse_minutes must be positive".into()));
    }
    let mut d_p = vec![0.0; n];
    let mut d_q = vec![0.0; n];
    for (key, [kw, kvar]) in &cfg.loads {
        let bus = resolve_bus(graph, key)?;
        if bus == 0 {
            return Err(Error::Config("the substation cannot carry a load".into()));
        }
        d_p[bus - 1] = kw / base;
        d_q[bus - 1] = kvar / base;
    }
    let mut controllable = Vec::with_capacity(cfg.controllable.len());
    for key in &cfg.controllable {
        let bus = resolve_bus(graph, key)?;
        if bus == 0 || controllable.contains(&bus) {
            return Err(Error::Config(format!("invalid controllable bus `{key}`")));
        }
        if cfg.noise_scale != 0.0 && d_p[bus - 1] * base <= 0.0 {
            return Err(Error::Config(format!("controllable bus `{key}` has zero default load")));
        }
        controllable.push(bus);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = match &cfg.trend_csv {
        Some(path) => read_trend_csv(path)?,
        None => cfg.trend.clone(),
    };
    if points.is_empty() {
        return Err(Error::Config("trend needs at least one breakpoint".into()));
    }
    points.sort_by(|a, b| a[0].total_cmp(&b[0]));

    let coarse_s = cfg.coarse_minutes * 60.0;
    let span = cfg.horizon as f64 * cfg.tau;
    let n_coarse = (span / coarse_s).ceil() as usize + 1;
    let mut coarse: Vec<f64> = (0..n_coarse)
        .map(|k| {
            let hour = cfg.start_hour + k as f64 * coarse_s / 3600.0;
            let z: f64 = StandardNormal.sample(&mut rng);
            interpolate(&points, hour) * (1.0 + cfg.trend_jitter * z)
        })
        .collect();
    let peak = coarse.iter().cloned().fold(f64::MIN, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Config("trend must have a positive maximum".into()));
    }
    for c in &mut coarse {
        *c = (*c / peak).max(f64::MIN_POSITIVE);
    }

    let noise = Normal::new(1.0, cfg.noise_sd).map_err(|e| Error::Config(format!("noise_sd: {e}")))?;
    let lo_p = vec![0.0; n];
    let mut hi_p = vec![0.0; n];
    let mut hi_q = vec![0.0; n];
    for &bus in &controllable {
        hi_p[bus - 1] = cfg.p_max_kw / base;
        hi_q[bus - 1] = cfg.q_max_kvar / base;
    }
    let bounds = Arc::new(BoxLimits { p_lo: lo_p.clone(), p_hi: hi_p, q_lo: vec![0.0; n], q_hi: hi_q });
    let cost = Arc::new(CostModel { p_floor: lo_p, q_floor: vec![0.0; n], weight: cfg.cost_weight });
    let limits = VoltageLimits { v_lo: cfg.v_lo, v_hi: cfg.v_hi };

    let mut steps = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let pos = t as f64 * cfg.tau / coarse_s;
        let k = (pos.floor() as usize).min(n_coarse - 1);
        let frac = pos - k as f64;
        let trend = if k + 1 < n_coarse { coarse[k] + (coarse[k + 1] - coarse[k]) * frac } else { coarse[k] };
        let mut p_u: Vec<f64> = d_p.iter().map(|d| -d).collect();
        let mut q_u: Vec<f64> = d_q.iter().map(|d| -d).collect();
        for &bus in &controllable {
            let i = bus - 1;
            let scale = cfg.noise_scale / (d_p[i] * base).sqrt();
            let (kp, kq) = if cfg.noise_scale == 0.0 {
                (trend, trend)
            } else if cfg.joint_pq {
                let r = scale * noise.sample(&mut rng);
                (trend + r, trend + r)
            } else {
                let rp = scale * noise.sample(&mut rng);
                let rq = scale * noise.sample(&mut rng);
                (trend + rp, trend + rq)
            };
            p_u[i] = -kp * d_p[i];
            q_u[i] = -kq * d_q[i];
        }
        steps.push(ScenarioStep {
            t,
            tau: cfg.tau,
            p_u,
            q_u,
            cost: Arc::clone(&cost),
            bounds: Arc::clone(&bounds),
            limits,
        });
    }
    let provenance = format!(
        "synthetic: {} controllable nodes, {} steps of {} s from hour {}, seed {seed}",
        controllable.len(),
        cfg.horizon,
        cfg.tau,
        cfg.start_hour
    );
    Ok(Scenario { steps, seed, provenance, controllable })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    horizon: usize,
    tau: f64,
    n: usize,
    seed: u64,
    provenance: String,
    controllable: Vec<usize>,
    limits: VoltageLimits,
    cost: CostModel,
    #[serde(rename = "box")]
    bounds: BoxLimits,
}

/// Sidecar path next to a scenario CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("toml")
}

/// Write `t,node,p_u,q_u` rows plus a TOML sidecar. Costs and boxes must be
/// constant over the horizon.
pub fn write_scenario(scn: &Scenario, csv_path: &Path) -> Result<()> {
    let first = scn.steps.first().ok_or_else(|| Error::Config("empty scenario".into()))?;
    if scn.steps.iter().any(|s| s.cost != first.cost || s.bounds != first.bounds || s.limits != first.limits) {
        return Err(Error::Config("only scenarios with constant cost and box limits can be written".into()));
    }
    let io = |e: csv::Error| Error::Config(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(csv_path).map_err(io)?;
    w.write_record(["t", "node", "p_u", "q_u"]).map_err(io)?;
    for s in &scn.steps {
        for i in 0..s.p_u.len() {
            w.write_record(&[s.t.to_string(), (i + 1).to_string(), s.p_u[i].to_string(), s.q_u[i].to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let side = Sidecar {
        horizon: scn.steps.len(),
        tau: first.tau,
        n: first.p_u.len(),
        seed: scn.seed,
        provenance: scn.provenance.clone(),
        controllable: scn.controllable.clone(),
        limits: first.limits,
        cost: (*first.cost).clone(),
        bounds: (*first.bounds).clone(),
    };
    let text = toml::to_string(&side).map_err(|e| Error::Config(e.to_string()))?;
    let side_path = sidecar_path(csv_path);
    std::fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
}

pub fn read_scenario(csv_path: &Path) -> Result<Scenario> {
    let side_path = sidecar_path(csv_path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", side_path.display())))?;
    side.bounds.validate()?;
    let n = side.n;
    let cost = Arc::new(side.cost);
    let bounds = Arc::new(side.bounds);
    let mut steps: Vec<ScenarioStep> = (0..side.horizon)
        .map(|t| ScenarioStep {
            t,
            tau: side.tau,
            p_u: vec![f64::NAN; n],
            q_u: vec![f64::NAN; n],
            cost: Arc::clone(&cost),
            bounds: Arc::clone(&bounds),
            limits: side.limits,
        })
        .collect();
    let err = |e: csv::Error| Error::Config(format!("{}: {e}", csv_path.display()));
    let mut rdr = csv::Reader::from_path(csv_path).map_err(err)?;
    for rec in rdr.deserialize::<(usize, usize, f64, f64)>() {
        let (t, node, p, q) = rec.map_err(err)?;
        if t >= side.horizon || node == 0 || node > n {
            return Err(Error::Config(format!("{}: row t={t} node={node} out of range", csv_path.display())));
        }
        steps[t].p_u[node - 1] = p;
        steps[t].q_u[node - 1] = q;
    }
    if steps.iter().any(|s| s.p_u.iter().chain(&s.q_u).any(|x| x.is_nan())) {
        return Err(Error::Config(format!("{}: missing rows", csv_path.display())));
    }
    Ok(Scenario { steps, seed: side.seed, provenance: side.provenance, controllable: side.controllable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::parse_feeder;

    fn eight_bus() -> FeederGraph {
        parse_feeder(include_str!("../data/feeder8.feeder")).unwrap()
    }

    fn small_cfg() -> GeneratorConfig {
        let mut loads = BTreeMap::new();
        for b in 1..=7 {
            loads.insert(b.to_string(), [20.0 + b as f64, 10.0]);
        }
        GeneratorConfig {
            controllable: vec!["4".into(), "6".into()],
            loads,
            horizon: 50,
            trend_jitter: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn cost_at_anchor_and_by_hand() {
        let c = CostModel { p_floor: vec![0.1], q_floor: vec![0.2], weight: 1.0 };
        assert_eq!(c.value(&[0.1, 0.2]), 0.0);
        assert_eq!(c.grad(&[0.1, 0.2]), vec![0.0, 0.0]);
        assert!((c.value(&[0.4, 0.2]) - 0.09).abs() < 1e-15);
        assert!((c.grad(&[0.4, 0.2])[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn cost_gradient_matches_finite_difference() {
        let c = CostModel { p_floor: vec![0.1, -0.3], q_floor: vec![0.0, 0.5], weight: 0.7 };
        let x = [0.25, 0.4, -0.1, 0.9];
        let g = c.grad(&x);
        for k in 0..4 {
            let h = 1e-6;
            let mut a = x;
            let mut b = x;
            a[k] += h;
            b[k] -= h;
            let fd = (c.value(&a) - c.value(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-8 * g[k].abs().max(1.0));
        }
    }

    #[test]
    fn convexity_constants_scale_with_weight() {
        let c = CostModel { p_floor: vec![0.0], q_floor: vec![0.0], weight: 1.0 };
        assert_eq!(convexity_constants(&c), (2.0, 2.0));
        let c = CostModel { weight: 0.5, ..c };
        assert_eq!(convexity_constants(&c), (1.0, 1.0));
    }

    #[test]
    fn projection_cases() {
        let b = BoxLimits { p_lo: vec![0.0], p_hi: vec![1.0], q_lo: vec![-1.0], q_hi: vec![1.0] };
        assert_eq!(project_box(&[0.5, 0.0], &b), vec![0.5, 0.0]);
        assert_eq!(project_box(&[5.0, 5.0], &b), vec![1.0, 1.0]);
        assert_eq!(b.free_coordinates(), vec![0, 1]);
    }

    #[test]
    fn degenerate_generator_reproduces_default_load() {
        let g = eight_bus();
        let cfg = GeneratorConfig {
            trend: vec![[0.0, 1.0], [48.0, 1.0]],
            noise_scale: 0.0,
            trend_jitter: 0.0,
            ..small_cfg()
        };
        let s = generate_profile(&g, &cfg, 3).unwrap();
        for st in &s.steps {
            for i in 0..7 {
                assert_eq!(st.p_u[i], -cfg.loads[&(i + 1).to_string()][0] / 100.0);
                assert_eq!(st.q_u[i], -0.1);
            }
        }
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let g = eight_bus();
        let a = generate_profile(&g, &small_cfg(), 7).unwrap();
        let b = generate_profile(&g, &small_cfg(), 7).unwrap();
        let c = generate_profile(&g, &small_cfg(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.steps[10].p_u, c.steps[10].p_u);
        // Only controllable nodes vary.
        assert_eq!(a.steps[0].p_u[0], a.steps[30].p_u[0]);
        assert_ne!(a.steps[0].p_u[3], a.steps[30].p_u[3]);
    }

    #[test]
    fn independent_draws_decouple_p_and_q() {
        let g = eight_bus();
        let cfg = GeneratorConfig { joint_pq: false, ..small_cfg() };
        let s = generate_profile(&g, &cfg, 1).unwrap();
        let i = 3;
        let d = &cfg.loads["4"];
        let kp = -s.steps[5].p_u[i] * 100.0 / d[0];
        let kq = -s.steps[5].q_u[i] * 100.0 / d[1];
        assert!((kp - kq).abs() > 1e-9);
    }

    #[test]
    fn generator_errors() {
        let g = eight_bus();
        let cfg = GeneratorConfig { controllable: vec!["99".into()], ..small_cfg() };
        assert!(matches!(generate_profile(&g, &cfg, 1), Err(Error::UnknownBus(99))));
        let mut cfg = small_cfg();
        cfg.loads.remove("4");
        assert!(matches!(generate_profile(&g, &cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn scenario_file_round_trip() {
        let g = eight_bus();
        let s = generate_profile(&g, &small_cfg(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("day.csv");
        write_scenario(&s, &path).unwrap();
        let back = read_scenario(&path).unwrap();
        assert_eq!(s, back);
    }
}
