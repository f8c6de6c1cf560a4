//! Per-node learnable feedback `u = MLP(d_i) + k v_i` for the p and q channels.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::ScenarioStep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self { hidden_layers: 3, width: 64 }
    }
}

/// Single-input ReLU network plus a linear voltage term.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpChannel {
    /// `hidden_layers + 1` matrices, `W_1` is `width x 1` and the last is `1 x width`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub k: f64,
    /// Input normalization: the network sees `(d - shift) / scale`.
    pub shift: f64,
    pub scale: f64,
}

/// Pre-activations recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    input: f64,
    v: f64,
    pre: Vec<DVector<f64>>,
}

/// Gradient with the same shape as an [`MlpChannel`]'s trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub k: f64,
}

impl ChannelGrad {
    pub fn zeros_like(ch: &MlpChannel) -> Self {
        Self {
            weights: ch.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: ch.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            k: 0.0,
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out.push(self.k);
    }
}

impl MlpChannel {
    pub fn zeros(arch: Arch) -> Self {
        let mut weights = Vec::with_capacity(arch.hidden_layers + 1);
        let mut biases = Vec::with_capacity(arch.hidden_layers + 1);
        let mut fan_in = 1;
        for _ in 0..arch.hidden_layers {
            weights.push(DMatrix::zeros(arch.width, fan_in));
            biases.push(DVector::zeros(arch.width));
            fan_in = arch.width;
        }
        weights.push(DMatrix::zeros(1, fan_in));
        biases.push(DVector::zeros(1));
        Self { weights, biases, k: 0.0, shift: 0.0, scale: 1.0 }
    }

    fn random(arch: Arch, rng: &mut ChaCha8Rng) -> Self {
        let mut ch = Self::zeros(arch);
        for w in &mut ch.weights {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            for x in w.iter_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        ch
    }

    fn normalize(&self, d: f64) -> f64 {
        (d - self.shift) / self.scale
    }

    /// Network output without the voltage term.
    pub fn mlp(&self, d: f64) -> f64 {
        let last = self.weights.len() - 1;
        let mut h = DVector::from_element(1, self.normalize(d));
        for l in 0..last {
            h = &self.weights[l] * h + &self.biases[l];
            h.apply(|x| *x = x.max(0.0));
        }
        (&self.weights[last] * h)[0] + self.biases[last][0]
    }

    /// Network outputs for a batch of inputs, keeping activations for [`MlpChannel::backward_batch`].
    pub fn mlp_batch(&self, ds: &[f64]) -> BatchTape {
        let s = ds.len();
        let last = self.weights.len() - 1;
        let input = DMatrix::from_iterator(1, s, ds.iter().map(|&d| self.normalize(d)));
        let mut pre = Vec::with_capacity(last);
        let mut h = input.clone();
        for l in 0..last {
            let mut z = &self.weights[l] * &h;
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            h = z.map(|x| x.max(0.0));
            pre.push(z);
        }
        let out = (&self.weights[last] * &h).add_scalar(self.biases[last][0]);
        BatchTape { input, pre, out: out.iter().copied().collect() }
    }

    /// Accumulate parameter gradients for a batch given `dL/du` per sample and
    /// the voltages that multiplied `k`.
    pub fn backward_batch(&self, tape: &BatchTape, upstream: &[f64], vs: &[f64], grad: &mut ChannelGrad) -> Result<()> {
        let last = self.weights.len() - 1;
        let s = upstream.len();
        if tape.pre.len() != last || tape.out.len() != s || vs.len() != s {
            return Err(Error::TapeMismatch);
        }
        grad.k += upstream.iter().zip(vs).map(|(a, b)| a * b).sum::<f64>();
        let mut delta = DMatrix::from_row_slice(1, s, upstream);
        for l in (0..=last).rev() {
            let h_prev = if l == 0 { tape.input.clone() } else { tape.pre[l - 1].map(|x| x.max(0.0)) };
            grad.weights[l] += &delta * h_prev.transpose();
            grad.biases[l] += delta.column_sum();
            if l > 0 {
                let mut next = self.weights[l].transpose() * &delta;
                next.zip_apply(&tape.pre[l - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = next;
            }
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>() + 1
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out.push(self.k);
    }

    fn unflatten_from(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let len = w.len();
            w.as_mut_slice().copy_from_slice(&src[at..at + len]);
            at += len;
            let len = b.len();
            b.as_mut_slice().copy_from_slice(&src[at..at + len]);
            at += len;
        }
        self.k = src[at];
        at + 1
    }
}

/// Activations from [`MlpChannel::mlp_batch`].
#[derive(Debug, Clone)]
pub struct BatchTape {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    pub out: Vec<f64>,
}

/// Evaluate `u = MLP(d) + k v` and record the activations.
pub fn forward(ch: &MlpChannel, v: f64, d: f64) -> (f64, Tape) {
    let last = ch.weights.len() - 1;
    let input = ch.normalize(d);
    let mut h = DVector::from_element(1, input);
    let mut pre = Vec::with_capacity(last);
    for l in 0..last {
        let z = &ch.weights[l] * &h + &ch.biases[l];
        h = z.map(|x| x.max(0.0));
        pre.push(z);
    }
    let u = (&ch.weights[last] * h)[0] + ch.biases[last][0] + ch.k * v;
    (u, Tape { input, v, pre })
}

/// Reverse-mode gradients of `u` scaled by `upstream`. Returns the parameter
/// gradient and `(du/dv, du/dd)`.
pub fn backward(ch: &MlpChannel, tape: &Tape, upstream: f64) -> Result<(ChannelGrad, (f64, f64))> {
    let last = ch.weights.len() - 1;
    if tape.pre.len() != last || tape.pre.iter().zip(&ch.biases).any(|(z, b)| z.len() != b.len()) {
        return Err(Error::TapeMismatch);
    }
    let mut grad = ChannelGrad::zeros_like(ch);
    grad.k = upstream * tape.v;
    let mut delta = DVector::from_element(1, upstream);
    // Same recursion with unit upstream gives du/dd.
    let mut sens = DVector::from_element(1, 1.0);
    for l in (0..=last).rev() {
        let h_prev = if l == 0 { DVector::from_element(1, tape.input) } else { tape.pre[l - 1].map(|x| x.max(0.0)) };
        grad.weights[l] = &delta * h_prev.transpose();
        grad.biases[l] = delta.clone();
        let mut next = ch.weights[l].transpose() * &delta;
        let mut next_s = ch.weights[l].transpose() * &sens;
        if l > 0 {
            for ((g, s), z) in next.iter_mut().zip(next_s.iter_mut()).zip(tape.pre[l - 1].iter()) {
                if *z <= 0.0 {
                    *g = 0.0;
                    *s = 0.0;
                }
            }
        }
        delta = next;
        sens = next_s;
    }
    Ok((grad, (ch.k, sens[0] / ch.scale)))
}

/// Both channels at one controllable node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePolicy {
    pub bus: usize,
    pub p: MlpChannel,
    pub q: MlpChannel,
}

impl NodePolicy {
    /// Euclidean norm of the voltage gains, the node's Lipschitz constant in `v`.
    pub fn gain_norm(&self) -> f64 {
        self.p.k.hypot(self.q.k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Arch,
    pub k_max: f64,
    /// Number of non-root buses in the feeder.
    pub n: usize,
    pub nodes: Vec<NodePolicy>,
}

impl PolicyParams {
    /// Policy with no controllable nodes; every output is zero.
    pub fn empty(n: usize) -> Self {
        Self { arch: Arch::default(), k_max: 0.0, n, nodes: Vec::new() }
    }

    /// Node slot for non-root bus `bus`.
    pub fn node_of(&self, bus: usize) -> Option<usize> {
        self.nodes.iter().position(|nd| nd.bus == bus)
    }

    /// Stacked coordinate `c` (`c < n` is p, otherwise q) to its channel.
    pub fn channel(&self, c: usize) -> Option<&MlpChannel> {
        let bus = c % self.n + 1;
        let nd = self.nodes.iter().find(|nd| nd.bus == bus)?;
        Some(if c < self.n { &nd.p } else { &nd.q })
    }

    pub fn channel_mut(&mut self, c: usize) -> Option<&mut MlpChannel> {
        let n = self.n;
        let bus = c % n + 1;
        let nd = self.nodes.iter_mut().find(|nd| nd.bus == bus)?;
        Some(if c < n { &mut nd.p } else { &mut nd.q })
    }

    /// Stacked coordinates of every channel, p channels first.
    pub fn coordinates(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.nodes.iter().map(|nd| nd.bus - 1).collect();
        out.extend(self.nodes.iter().map(|nd| self.n + nd.bus - 1));
        out
    }

    /// Lipschitz constant of the policy in its voltage argument.
    pub fn lipschitz(&self) -> f64 {
        self.nodes.iter().map(NodePolicy::gain_norm).fold(0.0, f64::max)
    }

    /// Fit input normalization to the injections seen in `steps`.
    pub fn fit_normalization<'a>(&mut self, steps: impl IntoIterator<Item = &'a ScenarioStep> + Clone) {
        for nd in &mut self.nodes {
            let i = nd.bus - 1;
            for (ch, pick) in [(&mut nd.p, 0usize), (&mut nd.q, 1)] {
                let mut count = 0.0;
                let mut mean = 0.0;
                let mut m2 = 0.0;
                for s in steps.clone() {
                    let d = if pick == 0 { s.p_u[i] } else { s.q_u[i] };
                    count += 1.0;
                    let delta = d - mean;
                    mean += delta / count;
                    m2 += delta * (d - mean);
                }
                let sd = if count > 1.0 { (m2 / count).sqrt() } else { 0.0 };
                ch.shift = mean;
                ch.scale = if sd > 1e-12 { sd } else { 1.0 };
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|nd| nd.p.param_count() + nd.q.param_count()).sum()
    }

    /// All trainable parameters in a fixed order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for nd in &self.nodes {
            nd.p.flatten_into(&mut out);
            nd.q.flatten_into(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::dim(format!("expected {} parameters, got {}", self.param_count(), src.len())));
        }
        let mut at = 0;
        for nd in &mut self.nodes {
            at += nd.p.unflatten_from(&src[at..]);
            at += nd.q.unflatten_from(&src[at..]);
        }
        Ok(())
    }

    /// Write the checkpoint text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "feedback-opf-policy v1");
        let _ = writeln!(s, "n {}", self.n);
        let _ = writeln!(s, "arch {} {}", self.arch.hidden_layers, self.arch.width);
        let _ = writeln!(s, "k_max {}", self.k_max);
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for nd in &self.nodes {
            let _ = writeln!(s, "node {}", nd.bus);
            for (tag, ch) in [("p", &nd.p), ("q", &nd.q)] {
                let _ = writeln!(s, "channel {tag} {} {} {}", ch.k, ch.shift, ch.scale);
                for (w, b) in ch.weights.iter().zip(&ch.biases) {
                    let _ = write!(s, "layer {} {}", w.nrows(), w.ncols());
                    for x in w.iter().chain(b.iter()) {
                        let _ = write!(s, " {x}");
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |want: &str| -> Result<(usize, Vec<&str>)> {
            let (i, line) = lines.next().ok_or(Error::Parse { line: 0, msg: format!("missing `{want}` record") })?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.first() != Some(&want) {
                return Err(Error::Parse { line: i + 1, msg: format!("expected `{want}`") });
            }
            Ok((i + 1, toks))
        };
        fn num<T: std::str::FromStr>(line: usize, tok: Option<&&str>) -> Result<T> {
            tok.and_then(|t| t.parse().ok()).ok_or(Error::Parse { line, msg: "bad number".into() })
        }
        let (ln, head) = next("feedback-opf-policy")?;
        if head.get(1) != Some(&"v1") {
            return Err(Error::Parse { line: ln, msg: "unsupported checkpoint version".into() });
        }
        let (ln, t) = next("n")?;
        let n: usize = num(ln, t.get(1))?;
        let (ln, t) = next("arch")?;
        let arch = Arch { hidden_layers: num(ln, t.get(1))?, width: num(ln, t.get(2))? };
        let (ln, t) = next("k_max")?;
        let k_max: f64 = num(ln, t.get(1))?;
        let (ln, t) = next("nodes")?;
        let count: usize = num(ln, t.get(1))?;
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, t) = next("node")?;
            let bus: usize = num(ln, t.get(1))?;
            if bus == 0 || bus > n {
                return Err(Error::Parse { line: ln, msg: format!("bus {bus} out of range") });
            }
            let mut chans = Vec::with_capacity(2);
            for _ in 0..2 {
                let (ln, t) = next("channel")?;
                let mut ch = MlpChannel::zeros(arch);
                ch.k = num(ln, t.get(2))?;
                ch.shift = num(ln, t.get(3))?;
                ch.scale = num(ln, t.get(4))?;
                for l in 0..=arch.hidden_layers {
                    let (ln, t) = next("layer")?;
                    let (r, c): (usize, usize) = (num(ln, t.get(1))?, num(ln, t.get(2))?);
                    if (r, c) != ch.weights[l].shape() {
                        return Err(Error::Parse { line: ln, msg: "layer shape does not match arch".into() });
                    }
                    if t.len() != 3 + r * c + r {
                        return Err(Error::Parse { line: ln, msg: "wrong number of layer values".into() });
                    }
                    for (k, x) in ch.weights[l].iter_mut().enumerate() {
                        *x = num(ln, t.get(3 + k))?;
                    }
                    for (k, x) in ch.biases[l].iter_mut().enumerate() {
                        *x = num(ln, t.get(3 + r * c + k))?;
                    }
                }
                chans.push(ch);
            }
            let q = chans.pop().unwrap();
            let p = chans.pop().unwrap();
            nodes.push(NodePolicy { bus, p, q });
        }
        Ok(Self { arch, k_max, n, nodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Random network weights, zero biases and `k = k_init * k_max` on every channel.
pub fn init_policy(n: usize, controllable: &[usize], arch: Arch, k_max: f64, k_init: f64, seed: u64) -> Result<PolicyParams> {
    if !(k_max > 0.0) || !k_max.is_finite() {
        return Err(Error::InvalidConstants(format!("k_max must be positive, got {k_max}")));
    }
    if arch.width == 0 {
        return Err(Error::Config("hidden width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::with_capacity(controllable.len());
    for &bus in controllable {
        if bus == 0 || bus > n {
            return Err(Error::UnknownBus(bus));
        }
        let mut p = MlpChannel::random(arch, &mut rng);
        let mut q = MlpChannel::random(arch, &mut rng);
        p.k = k_init * k_max;
        q.k = k_init * k_max;
        nodes.push(NodePolicy { bus, p, q });
    }
    let mut params = PolicyParams { arch, k_max, n, nodes };
    enforce_conditions(&mut params, k_max);
    Ok(params)
}

/// Keep every gain nonnegative and each node's gain norm within `k_max`.
pub fn enforce_conditions(params: &mut PolicyParams, k_max: f64) {
    for nd in &mut params.nodes {
        nd.p.k = nd.p.k.max(0.0);
        nd.q.k = nd.q.k.max(0.0);
        let norm = nd.gain_norm();
        if norm > k_max {
            let s = k_max / norm;
            nd.p.k *= s;
            nd.q.k *= s;
        }
    }
}

/// Flatten a per-channel gradient list in the same order as [`PolicyParams::flat`].
pub fn flatten_grads(grads: &[(ChannelGrad, ChannelGrad)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (p, q) in grads {
        p.flatten_into(&mut out);
        q.flatten_into(&mut out);
    }
    out
}
