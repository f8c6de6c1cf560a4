//! Radial feeder topology and the linearized (LinDistFlow) voltage sensitivities.
//!
//! Bus `0` is the substation. Non-root bus `j` maps to row/column `j - 1` of
//! every per-node vector and matrix in the crate, and the line feeding bus
//! `j` is stored at `lines[j - 1]`.

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub name: String,
}

/// A series impedance between a parent bus and its child, in per-unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
}

impl Line {
    pub fn z_squared(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }
}

/// A validated radial network rooted at bus 0.
#[derive(Debug, Clone)]
pub struct FeederGraph {
    pub buses: Vec<Bus>,
    /// `lines[j - 1]` feeds bus `j`, oriented parent to child.
    pub lines: Vec<Line>,
    pub children: Vec<Vec<usize>>,
    /// Base power in kVA used for per-unit conversion.
    pub base_power: f64,
    /// Squared slack voltage declared by the feeder file (per-unit²).
    pub v0: f64,
    order: Vec<usize>,
    parent: Vec<Option<usize>>,
}

impl FeederGraph {
    /// Orient and validate an edge list. Input lines may use either orientation.
    pub fn from_lines(buses: Vec<Bus>, raw: Vec<Line>, base_power: f64, v0: f64) -> Result<Self> {
        let n_bus = buses.len();
        if n_bus < 2 {
            return Err(Error::Config("a feeder needs the root and at least one bus".into()));
        }
        for (k, b) in buses.iter().enumerate() {
            if b.id != k {
                return Err(Error::Config(format!("bus ids must be contiguous from 0, found {} at position {k}", b.id)));
            }
        }
        if !(base_power > 0.0) {
            return Err(Error::Config(format!("base power must be positive, got {base_power}")));
        }
        if !(v0 > 0.0) {
            return Err(Error::Config(format!("slack voltage must be positive, got {v0}")));
        }

        let mut seen = HashSet::new();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_bus];
        for (k, line) in raw.iter().enumerate() {
            for bus in [line.from_bus, line.to_bus] {
                if bus >= n_bus {
                    return Err(Error::UnknownBus(bus));
                }
            }
            if !(line.r > 0.0 && line.x > 0.0) || !line.r.is_finite() || !line.x.is_finite() {
                return Err(Error::NonPositiveImpedance {
                    from: line.from_bus,
                    to: line.to_bus,
                    r: line.r,
                    x: line.x,
                });
            }
            if !seen.insert((line.from_bus, line.to_bus)) {
                return Err(Error::DuplicateLine { from: line.from_bus, to: line.to_bus });
            }
            if line.from_bus == line.to_bus {
                return Err(Error::Cycle { from: line.from_bus, to: line.to_bus });
            }
            adjacency[line.from_bus].push((line.to_bus, k));
            adjacency[line.to_bus].push((line.from_bus, k));
        }

        // Breadth-first orientation from the root.
        let mut parent = vec![None; n_bus];
        let mut via = vec![usize::MAX; n_bus];
        let mut visited = vec![false; n_bus];
        let mut order = Vec::with_capacity(n_bus - 1);
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(w, k) in &adjacency[u] {
                if k == via[u] {
                    continue;
                }
                if visited[w] {
                    return Err(Error::Cycle { from: raw[k].from_bus, to: raw[k].to_bus });
                }
                visited[w] = true;
                parent[w] = Some(u);
                via[w] = k;
                order.push(w);
                queue.push_back(w);
            }
        }
        if let Some(bus) = visited.iter().position(|v| !v) {
            return Err(Error::Disconnected { bus });
        }

        let mut lines = Vec::with_capacity(n_bus - 1);
        let mut children = vec![Vec::new(); n_bus];
        for j in 1..n_bus {
            let p = parent[j].expect("visited non-root bus has a parent");
            let src = raw[via[j]];
            lines.push(Line { from_bus: p, to_bus: j, r: src.r, x: src.x });
            children[p].push(j);
        }
        for c in &mut children {
            c.sort_unstable();
        }

        Ok(Self { buses, lines, children, base_power, v0, order, parent })
    }

    /// Number of non-root buses.
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn parent(&self, bus: usize) -> Option<usize> {
        self.parent.get(bus).copied().flatten()
    }

    /// Line feeding `bus` (non-root).
    pub fn line_to(&self, bus: usize) -> &Line {
        &self.lines[bus - 1]
    }

    /// Non-root buses in breadth-first order; parents precede children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Lines from `node` up to the root, nearest first. Empty for the root.
    pub fn path_to_root(&self, node: usize) -> Result<Vec<Line>> {
        if node >= self.buses.len() {
            return Err(Error::UnknownBus(node));
        }
        let mut path = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            path.push(*self.line_to(cur));
            cur = p;
        }
        Ok(path)
    }

    /// Maximum number of lines between the root and any bus.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.buses.len()];
        for &j in &self.order {
            depth[j] = depth[self.parent(j).unwrap()] + 1;
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Bus id for a name label, if any bus carries it.
    pub fn bus_by_name(&self, name: &str) -> Option<usize> {
        self.buses.iter().find(|b| b.name == name).map(|b| b.id)
    }

    /// Serialize in per-unit using the feeder text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "buses: {}, base_kva: {}, v0: {}", self.buses.len(), self.base_power, self.v0);
        for b in &self.buses {
            let _ = writeln!(s, "bus,{},{}", b.id, b.name);
        }
        for l in &self.lines {
            let _ = writeln!(s, "line,{},{},{},{},pu", l.from_bus, l.to_bus, l.r, l.x);
        }
        s
    }
}

/// Read a feeder file from disk.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederGraph> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_feeder(&text)
}

/// Parse the feeder text format.
///
/// ```text
/// buses: 3, base_kva: 100, v0: 1.0, base_kv: 2.77
/// bus,1,load-a
/// line,0,1,0.01,0.02,pu
/// line,1,2,0.35,0.18,ohm
/// ```
///
/// `base_kv` is only needed when some line is given in ohms.
pub fn parse_feeder(text: &str) -> Result<FeederGraph> {
    let mut header: Option<(usize, f64, f64, Option<f64>)> = None;
    let mut names: Vec<(usize, String, usize)> = Vec::new();
    let mut raw: Vec<(usize, usize, f64, f64, bool, usize)> = Vec::new();

    for (idx, full) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = full.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        if header.is_none() {
            let mut buses = None;
            let mut base = None;
            let mut v0 = None;
            let mut kv = None;
            for item in line.split(',') {
                let (k, v) = item
                    .split_once(':')
                    .ok_or_else(|| perr(format!("expected `key: value` in header, got `{}`", item.trim())))?;
                let v = v.trim();
                match k.trim() {
                    "buses" => buses = Some(v.parse::<usize>().map_err(|e| perr(format!("buses: {e}")))?),
                    "base_kva" => base = Some(v.parse::<f64>().map_err(|e| perr(format!("base_kva: {e}")))?),
                    "v0" => v0 = Some(v.parse::<f64>().map_err(|e| perr(format!("v0: {e}")))?),
                    "base_kv" => kv = Some(v.parse::<f64>().map_err(|e| perr(format!("base_kv: {e}")))?),
                    other => return Err(perr(format!("unknown header key `{other}`"))),
                }
            }
            let buses = buses.ok_or_else(|| perr("header is missing `buses`".into()))?;
            let base = base.ok_or_else(|| perr("header is missing `base_kva`".into()))?;
            let v0 = v0.ok_or_else(|| perr("header is missing `v0`".into()))?;
            header = Some((buses, base, v0, kv));
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match fields[0] {
            "bus" => {
                if fields.len() != 3 {
                    return Err(perr(format!("bus record needs 3 fields, got {}", fields.len())));
                }
                let id = fields[1].parse::<usize>().map_err(|e| perr(format!("bus id: {e}")))?;
                names.push((id, fields[2].to_string(), lineno));
            }
            "line" => {
                if fields.len() != 6 {
                    return Err(perr(format!("line record needs 6 fields, got {}", fields.len())));
                }
                let from = fields[1].parse::<usize>().map_err(|e| perr(format!("from bus: {e}")))?;
                let to = fields[2].parse::<usize>().map_err(|e| perr(format!("to bus: {e}")))?;
                let r = fields[3].parse::<f64>().map_err(|e| perr(format!("r: {e}")))?;
                let x = fields[4].parse::<f64>().map_err(|e| perr(format!("x: {e}")))?;
                let ohm = match fields[5] {
                    "ohm" => true,
                    "pu" => false,
                    u => return Err(perr(format!("unknown impedance unit `{u}`"))),
                };
                raw.push((from, to, r, x, ohm, lineno));
            }
            other => return Err(perr(format!("unknown record type `{other}`"))),
        }
    }

    let (n_bus, base_kva, v0, base_kv) = header.ok_or_else(|| Error::Parse { line: 0, msg: "missing header".into() })?;
    let mut buses: Vec<Bus> = (0..n_bus).map(|id| Bus { id, name: id.to_string() }).collect();
    for (id, name, lineno) in names {
        let bus = buses.get_mut(id).ok_or(Error::Parse { line: lineno, msg: format!("bus id {id} out of range") })?;
        bus.name = name;
    }
    let mut lines = Vec::with_capacity(raw.len());
    for (from, to, r, x, ohm, lineno) in raw {
        let (r, x) = if ohm {
            let kv = base_kv.ok_or(Error::Parse { line: lineno, msg: "ohm units require `base_kv` in the header".into() })?;
            let z_base = kv * kv * 1000.0 / base_kva;
            (r / z_base, x / z_base)
        } else {
            (r, x)
        };
        lines.push(Line { from_bus: from, to_bus: to, r, x });
    }
    FeederGraph::from_lines(buses, lines, base_kva, v0)
}

/// Sensitivities of squared voltages to injections under the lossless
/// linearization: `v = R p + X q + v_env`.
#[derive(Debug, Clone)]
pub struct LinearVoltageModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub v0: f64,
    /// Cached spectral norm of `[R X]`.
    pub a_norm: f64,
}

impl LinearVoltageModel {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    /// Stacked `A = [R X]`, N x 2N.
    pub fn a(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, 2 * n);
        a.view_mut((0, 0), (n, n)).copy_from(&self.r);
        a.view_mut((0, n), (n, n)).copy_from(&self.x);
        a
    }

    /// Entry `A[i, c]`.
    #[inline]
    pub fn a_at(&self, i: usize, c: usize) -> f64 {
        let n = self.n();
        if c < n {
            self.r[(i, c)]
        } else {
            self.x[(i, c - n)]
        }
    }

    /// `A x` for a stacked `x = [p; q]`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(x.len(), 2 * n);
        let mut out = vec![0.0; n];
        for c in 0..n {
            let (pc, qc) = (x[c], x[n + c]);
            if pc != 0.0 {
                for (o, r) in out.iter_mut().zip(self.r.column(c).iter()) {
                    *o += r * pc;
                }
            }
            if qc != 0.0 {
                for (o, xv) in out.iter_mut().zip(self.x.column(c).iter()) {
                    *o += xv * qc;
                }
            }
        }
        out
    }

    /// `A^T w`, length 2N.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(w.len(), n);
        let mut out = vec![0.0; 2 * n];
        for c in 0..n {
            out[c] = self.r.column(c).iter().zip(w).map(|(a, b)| a * b).sum();
            out[n + c] = self.x.column(c).iter().zip(w).map(|(a, b)| a * b).sum();
        }
        out
    }
}

/// Build `R`, `X` from common root paths and cache `||[R X]||_2`.
pub fn build_sensitivities(graph: &FeederGraph, v0: f64) -> LinearVoltageModel {
    let n = graph.n();
    // Cumulative doubled resistance/reactance from the root to each bus.
    let mut cum_r = vec![0.0; n + 1];
    let mut cum_x = vec![0.0; n + 1];
    let mut depth = vec![0usize; n + 1];
    for &j in graph.order() {
        let l = graph.line_to(j);
        cum_r[j] = cum_r[l.from_bus] + 2.0 * l.r;
        cum_x[j] = cum_x[l.from_bus] + 2.0 * l.x;
        depth[j] = depth[l.from_bus] + 1;
    }
    let ancestor = |mut a: usize, mut b: usize| {
        while depth[a] > depth[b] {
            a = graph.parent(a).unwrap();
        }
        while depth[b] > depth[a] {
            b = graph.parent(b).unwrap();
        }
        while a != b {
            a = graph.parent(a).unwrap();
            b = graph.parent(b).unwrap();
        }
        a
    };
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let m = ancestor(i, j);
            r[(i - 1, j - 1)] = cum_r[m];
            r[(j - 1, i - 1)] = cum_r[m];
            x[(i - 1, j - 1)] = cum_x[m];
            x[(j - 1, i - 1)] = cum_x[m];
        }
    }
    let mut model = LinearVoltageModel { r, x, v0, a_norm: 0.0 };
    model.a_norm = spectral_norm(&model);
    model
}

const POWER_ITER_CAP: usize = 10_000;
const POWER_ITER_TOL: f64 = 1e-12;

/// `||[R X]||_2` by power iteration on `R R^T + X X^T`, started from all-ones.
pub fn spectral_norm(model: &LinearVoltageModel) -> f64 {
    let n = model.n();
    let gram = &model.r * model.r.transpose() + &model.x * model.x.transpose();
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_CAP {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w / norm;
        let rayleigh = next.dot(&(&gram * &next));
        let done = (rayleigh - lambda).abs() <= POWER_ITER_TOL * rayleigh;
        lambda = rayleigh;
        v = next;
        if done {
            break;
        }
    }
    lambda.sqrt()
}

/// `true` when both `R` and `X` admit a Cholesky factorization.
pub fn is_positive_definite(model: &LinearVoltageModel) -> bool {
    model.r.clone().cholesky().is_some() && model.x.clone().cholesky().is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EIGHT_BUS: &str = include_str!("../data/feeder8.feeder");

    fn chain() -> FeederGraph {
        parse_feeder("buses: 3, base_kva: 100, v0: 1\nline,0,1,0.01,0.02,pu\nline,1,2,0.01,0.02,pu\n").unwrap()
    }

    #[test]
    fn minimal_two_bus() {
        let g = parse_feeder("buses: 2, base_kva: 100, v0: 1\nline,0,1,0.01,0.02,pu").unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.lines[0], Line { from_bus: 0, to_bus: 1, r: 0.01, x: 0.02 });
    }

    #[test]
    fn cycle_is_rejected() {
        let err = parse_feeder("buses: 3, base_kva: 100, v0: 1\nline,0,1,1,1,pu\nline,1,2,1,1,pu\nline,2,1,1,1,pu").unwrap_err();
        assert!(matches!(err, Error::Cycle { .. }), "{err}");
        assert!(err.to_string().contains("cycle detected"));
    }

    #[test]
    fn structural_errors_name_the_offender() {
        let e = parse_feeder("buses: 4, base_kva: 100, v0: 1\nline,0,1,1,1,pu\nline,2,3,1,1,pu").unwrap_err();
        assert!(matches!(e, Error::Disconnected { bus: 2 }), "{e}");
        let e = parse_feeder("buses: 3, base_kva: 100, v0: 1\nline,0,1,1,1,pu\nline,0,1,1,1,pu").unwrap_err();
        assert!(matches!(e, Error::DuplicateLine { from: 0, to: 1 }), "{e}");
        let e = parse_feeder("buses: 2, base_kva: 100, v0: 1\nline,0,1,0,1,pu").unwrap_err();
        assert!(matches!(e, Error::NonPositiveImpedance { from: 0, to: 1, .. }), "{e}");
        let e = parse_feeder("buses: 2, base_kva: 100, v0: 1\nline,0,7,1,1,pu").unwrap_err();
        assert!(matches!(e, Error::UnknownBus(7)), "{e}");
        let e = parse_feeder("buses: 2, base_kva: 100, v0: 1\nline,0,1,abc,1,pu").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_feeder("buses: 2, base_kva: 100, v0: 1\nline,0,1,1,1,ohm").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn reversed_lines_are_oriented_from_root() {
        let g = parse_feeder("buses: 3, base_kva: 100, v0: 1\nline,1,0,0.01,0.02,pu\nline,2,1,0.03,0.04,pu").unwrap();
        assert_eq!(g.line_to(1).from_bus, 0);
        assert_eq!(g.line_to(2).from_bus, 1);
        assert_eq!(g.line_to(2).r, 0.03);
        assert_eq!(g.children[1], vec![2]);
    }

    #[test]
    fn ohm_lines_convert_to_per_unit() {
        let g = parse_feeder("buses: 2, base_kva: 100, v0: 1, base_kv: 2\n# z_base = 40 ohm\nline,0,1,4,8,ohm").unwrap();
        assert!((g.lines[0].r - 0.1).abs() < 1e-15);
        assert!((g.lines[0].x - 0.2).abs() < 1e-15);
    }

    #[test]
    fn paths_to_root() {
        let g = chain();
        let p = g.path_to_root(2).unwrap();
        assert_eq!(p.iter().map(|l| (l.from_bus, l.to_bus)).collect::<Vec<_>>(), vec![(1, 2), (0, 1)]);
        assert!(g.path_to_root(0).unwrap().is_empty());
        assert!(matches!(g.path_to_root(9), Err(Error::UnknownBus(9))));
    }

    #[test]
    fn eight_bus_example_shape() {
        let g = parse_feeder(EIGHT_BUS).unwrap();
        assert_eq!(g.n(), 7);
        assert_eq!(g.depth(), 3);
        // Hand-traced: 7 -> 3 -> 1 -> 0.
        let p = g.path_to_root(7).unwrap();
        assert_eq!(p.iter().map(|l| l.to_bus).collect::<Vec<_>>(), vec![7, 3, 1]);
    }

    #[test]
    fn chain_sensitivities() {
        let g = parse_feeder("buses: 3, base_kva: 100, v0: 1\nline,0,1,0.01,0.02,pu\nline,1,2,0.01,0.02,pu").unwrap();
        let m = build_sensitivities(&g, 1.0);
        let expect = [[0.02, 0.02], [0.02, 0.04]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.r[(i, j)] - expect[i][j]).abs() < 1e-15);
                assert!((m.x[(i, j)] - 2.0 * expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn star_has_no_coupling() {
        let g = parse_feeder("buses: 3, base_kva: 100, v0: 1\nline,0,1,0.01,0.02,pu\nline,0,2,0.03,0.01,pu").unwrap();
        let m = build_sensitivities(&g, 1.0);
        assert_eq!(m.r[(0, 1)], 0.0);
        assert_eq!(m.x[(1, 0)], 0.0);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let g = parse_feeder(EIGHT_BUS).unwrap();
        let m = build_sensitivities(&g, 1.0);
        let svd = m.a().svd(false, false);
        let top = svd.singular_values.max();
        assert!((m.a_norm - top).abs() <= 1e-10 * top, "{} vs {}", m.a_norm, top);
        assert!(is_positive_definite(&m));
    }

    #[test]
    fn apply_matches_dense_product() {
        let g = parse_feeder(EIGHT_BUS).unwrap();
        let m = build_sensitivities(&g, 1.0);
        let x: Vec<f64> = (0..14).map(|k| (k as f64 * 0.37).sin()).collect();
        let dense = m.a() * nalgebra::DVector::from_column_slice(&x);
        for (a, b) in m.apply(&x).iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let w: Vec<f64> = (0..7).map(|k| (k as f64 * 0.91).cos()).collect();
        let dense_t = m.a().transpose() * nalgebra::DVector::from_column_slice(&w);
        for (a, b) in m.apply_transpose(&w).iter().zip(dense_t.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn text_round_trip() {
        let g = parse_feeder(EIGHT_BUS).unwrap();
        let h = parse_feeder(&g.to_text()).unwrap();
        assert_eq!(g.lines, h.lines);
        assert_eq!(g.buses, h.buses);
    }
}
