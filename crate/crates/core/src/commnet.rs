//! The broadcast-and-listen policy.
//!
//! Every agent runs the same encoders on its own observation, broadcasts a
//! message derived from its message logits, and listens by taking an
//! attention-weighted sum over all broadcast messages (its own included).
//! The action head sees `[e_i; w_i; μ_i; m_aggr,i]`, so gradient reaches the
//! message encoder through μ even when the broadcast message is an argmax.
//!
//! All graph-building code works on a batch of `B` independent steps with
//! `n` agents each; rows are laid out step-major (`row = b * n + i`).

use bcomm_grad::init::{identity_jitter, orthogonal};
use bcomm_grad::rng::Rng;
use bcomm_grad::{argmax, categorical_sample_logprob, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::protocol::{AttentionMode, Protocol, ProtocolKind};
use crate::CoreError;

type Result<T> = std::result::Result<T, CoreError>;

/// Shapes of the policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub protocol: Protocol,
    pub attention_mode: AttentionMode,
}

impl Architecture {
    pub fn new(
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        protocol: Protocol,
        attention_mode: AttentionMode,
    ) -> Self {
        Self {
            n_agents,
            obs_dim,
            n_actions,
            hidden: 64,
            attn_dim: 32,
            protocol,
            attention_mode,
        }
    }

    /// Width of the augmented embedding ê.
    pub fn aug_dim(&self) -> usize {
        if self.protocol.communicates() {
            self.hidden + self.n_agents + self.protocol.logit_dim() + self.protocol.message_dim()
        } else {
            self.hidden
        }
    }

    /// Named parameter shapes in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let h = self.hidden;
        let mut out = vec![
            ("obs.w1", vec![self.obs_dim, h]),
            ("obs.b1", vec![h]),
            ("obs.w2", vec![h, h]),
            ("obs.b2", vec![h]),
        ];
        if self.protocol.communicates() {
            let l = self.protocol.logit_dim();
            out.extend([
                ("attn.w", vec![h, self.attn_dim]),
                ("attn.b", vec![self.attn_dim]),
                ("msg.w", vec![h, l]),
                ("msg.b", vec![l]),
                ("attn.wa", vec![self.attn_dim, self.attn_dim]),
            ]);
        }
        out.extend([
            ("pi.w1", vec![self.aug_dim(), h]),
            ("pi.b1", vec![h]),
            ("pi.w2", vec![h, self.n_actions]),
            ("pi.b2", vec![self.n_actions]),
        ]);
        out
    }
}

/// Shared parameters of all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct CommPolicyParams {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

/// Positions of each named tensor in [`CommPolicyParams::tensors`].
struct Slots {
    obs: [usize; 4],
    comm: Option<[usize; 5]>,
    pi: [usize; 4],
}

impl Slots {
    fn of(arch: &Architecture) -> Self {
        if arch.protocol.communicates() {
            Slots {
                obs: [0, 1, 2, 3],
                comm: Some([4, 5, 6, 7, 8]),
                pi: [9, 10, 11, 12],
            }
        } else {
            Slots {
                obs: [0, 1, 2, 3],
                comm: None,
                pi: [4, 5, 6, 7],
            }
        }
    }
}

impl CommPolicyParams {
    /// Orthogonal weights, zero biases, near-identity `W_a`.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Self {
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let gain = match name {
                    "attn.wa" => return identity_jitter(shape[0], 0.01, rng),
                    // small attention logits keep the initial weights close to uniform
                    "attn.w" => 0.1,
                    "msg.w" => 1.0,
                    "pi.w2" => 0.01,
                    _ => std::f64::consts::SQRT_2,
                };
                orthogonal(shape[0], shape[1], gain, rng)
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(CoreError::invalid(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(CoreError::invalid(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.arch.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Graph handles for every intermediate of one batched forward pass.
#[derive(Debug, Clone)]
pub struct CommVars {
    pub params: Vec<Var>,
    pub e: Var,
    pub c: Option<Var>,
    pub mu: Option<Var>,
    pub s: Option<Var>,
    pub w: Option<Var>,
    pub m: Option<Var>,
    pub m_aggr: Option<Var>,
    pub aug: Var,
    pub logits: Var,
}

/// Concrete values of one step's forward pass (`n` agents).
#[derive(Debug, Clone, PartialEq)]
pub struct CommForwardTrace {
    pub e: Tensor,
    pub c: Option<Tensor>,
    pub mu: Option<Tensor>,
    pub s: Option<Tensor>,
    pub w: Option<Tensor>,
    pub m: Option<Tensor>,
    pub m_aggr: Option<Tensor>,
    pub aug: Tensor,
    pub action_logits: Tensor,
}

/// Row-wise one-hot argmax of message logits, lowest index on ties.
pub fn discretize_onehot(mu: &Tensor) -> Tensor {
    let b = mu.cols();
    let mut out = vec![0.0; mu.numel()];
    for r in 0..mu.rows() {
        out[r * b + argmax(mu.row(r))] = 1.0;
    }
    Tensor::new(mu.shape().to_vec(), out).expect("shape preserved")
}

/// Bit `k` is set when `μ_k ≥ μ_{k+b}` (argmax over the pair, lowest index on ties).
pub fn discretize_bitstring(mu: &Tensor) -> Result<Tensor> {
    let width = mu.cols();
    if !width.is_multiple_of(2) {
        return Err(CoreError::invalid(format!(
            "bit-string logits need an even width, got {width}"
        )));
    }
    let b = width / 2;
    let mut out = Vec::with_capacity(mu.rows() * b);
    for r in 0..mu.rows() {
        let row = mu.row(r);
        out.extend((0..b).map(|k| if row[k] >= row[k + b] { 1.0 } else { 0.0 }));
    }
    let mut shape = mu.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = b;
    Ok(Tensor::new(shape, out)?)
}

/// Discrete message for each row of μ under `protocol`, or μ itself for
/// continuous messages.
pub fn messages_from_logits(protocol: &Protocol, mu: &Tensor) -> Result<Tensor> {
    match protocol.kind {
        ProtocolKind::OneHot => Ok(discretize_onehot(mu)),
        ProtocolKind::BitString => discretize_bitstring(mu),
        ProtocolKind::Continuous => Ok(mu.clone()),
        ProtocolKind::None => Err(CoreError::invalid("protocol none sends no messages")),
    }
}

/// Smallest gap between the winning logit and its competitor over all rows;
/// argmax discretization is locally constant when this is positive.
pub fn min_tie_margin(protocol: &Protocol, mu: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    for r in 0..mu.rows() {
        let row = mu.row(r);
        match protocol.kind {
            ProtocolKind::OneHot => {
                let best = argmax(row);
                for (k, v) in row.iter().enumerate() {
                    if k != best {
                        margin = margin.min(row[best] - v);
                    }
                }
            }
            ProtocolKind::BitString => {
                let b = row.len() / 2;
                for k in 0..b {
                    margin = margin.min((row[k] - row[k + b]).abs());
                }
            }
            _ => {}
        }
    }
    margin
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// Attention scores `s_ij = c_jᵀ W_a c_i` and weights `softmax_j(s_i·)` for
/// `c` of shape `[B, n, d_a]`; uniform mode yields `1/n` and no scores.
pub fn attention_graph(
    g: &mut Graph,
    c: Var,
    w_a: Var,
    mode: AttentionMode,
) -> Result<(Option<Var>, Var)> {
    let shape = g.value(c).shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::invalid(format!(
            "attention logits must be [B, n, d], got {shape:?}"
        )));
    }
    let (batch, n) = (shape[0], shape[1]);
    match mode {
        AttentionMode::Uniform => {
            let w = g.constant(Tensor::full([batch, n, n], 1.0 / n as f64));
            Ok((None, w))
        }
        AttentionMode::Learned => {
            // u_i = W_a c_i, then s_ij = u_i · c_j
            let u = g.matmul_nt(c, w_a)?;
            let s = g.bmm_nt(u, c)?;
            let w = g.softmax(s, 2)?;
            Ok((Some(s), w))
        }
    }
}

/// Standalone attention for a single step: `c` is `n × d_a`.
pub fn attention_weights(
    c: &Tensor,
    w_a: &Tensor,
    mode: AttentionMode,
) -> Result<(Option<Tensor>, Tensor)> {
    if c.rank() != 2 || w_a.shape() != [c.cols(), c.cols()] {
        return Err(CoreError::invalid(format!(
            "attention shapes c {:?}, W_a {:?}",
            c.shape(),
            w_a.shape()
        )));
    }
    let mut g = Graph::new();
    let n = c.rows();
    let cv = g.constant(c.clone().reshape([1, n, c.cols()])?);
    let wv = g.constant(w_a.clone());
    let (s, w) = attention_graph(&mut g, cv, wv, mode)?;
    let s = s
        .map(|s| g.value(s).clone().reshape([n, n]))
        .transpose()?;
    Ok((s, g.value(w).clone().reshape([n, n])?))
}

/// `m_aggr,i = Σ_j w_ij m_j` for one step.
pub fn aggregate_messages(w: &Tensor, m: &Tensor) -> Result<Tensor> {
    let n = w.rows();
    if w.shape() != [n, n] || m.rows() != n || m.rank() != 2 {
        return Err(CoreError::invalid(format!(
            "aggregate shapes w {:?}, m {:?}",
            w.shape(),
            m.shape()
        )));
    }
    let mut g = Graph::new();
    let wv = g.constant(w.clone().reshape([1, n, n])?);
    let mv = g.constant(m.clone().reshape([1, n, m.cols()])?);
    let out = g.bmm(wv, mv)?;
    Ok(g.value(out).clone().reshape([n, m.cols()])?)
}

impl CommPolicyParams {
    fn check_obs(&self, obs: &Tensor) -> Result<usize> {
        let a = &self.arch;
        let s = obs.shape();
        if s.len() != 3 || s[1] != a.n_agents || s[2] != a.obs_dim || s[1] == 0 {
            return Err(CoreError::invalid(format!(
                "observations must be [B, {}, {}], got {s:?}",
                a.n_agents, a.obs_dim
            )));
        }
        Ok(s[0])
    }

    /// Build the batched forward pass on `g`.
    ///
    /// `obs` is `[B, n, obs_dim]`. `overrides`, when given, has one entry per
    /// row (`B·n`); a `Some` entry replaces that agent's broadcast message
    /// (discrete protocols substitute the binary vector before aggregation).
    pub fn build(
        &self,
        g: &mut Graph,
        params: &[Var],
        obs: &Tensor,
        overrides: Option<&[Option<Vec<f64>>]>,
    ) -> Result<CommVars> {
        let batch = self.check_obs(obs)?;
        let a = &self.arch;
        let n = a.n_agents;
        let rows = batch * n;
        let slots = Slots::of(a);
        let p = |i: usize| params[i];

        let x = g.constant(obs.clone().reshape([rows, a.obs_dim])?);
        let h1 = linear(g, x, p(slots.obs[0]), p(slots.obs[1]))?;
        let h1 = g.tanh(h1);
        let e = linear(g, h1, p(slots.obs[2]), p(slots.obs[3]))?;
        let e = g.tanh(e);

        let mut vars = CommVars {
            params: params.to_vec(),
            e,
            c: None,
            mu: None,
            s: None,
            w: None,
            m: None,
            m_aggr: None,
            aug: e,
            logits: e,
        };

        if let Some([aw, ab, mw, mb, wa]) = slots.comm {
            let md = a.protocol.message_dim();
            let c = linear(g, e, p(aw), p(ab))?;
            let mu = linear(g, e, p(mw), p(mb))?;
            let c3 = g.reshape(c, [batch, n, a.attn_dim])?;
            let (s, w) = attention_graph(g, c3, p(wa), a.attention_mode)?;

            let m = match (a.protocol.kind, overrides) {
                (ProtocolKind::Continuous, None) => mu,
                _ => {
                    let mut msg = messages_from_logits(&a.protocol, g.value(mu))?;
                    if let Some(ov) = overrides {
                        if ov.len() != rows {
                            return Err(CoreError::invalid(format!(
                                "{} message overrides for {rows} rows",
                                ov.len()
                            )));
                        }
                        for (r, o) in ov.iter().enumerate() {
                            if let Some(v) = o {
                                if v.len() != md {
                                    return Err(CoreError::invalid(format!(
                                        "override for row {r} has width {}, expected {md}",
                                        v.len()
                                    )));
                                }
                                msg.row_mut(r).copy_from_slice(v);
                            }
                        }
                    }
                    g.constant(msg)
                }
            };
            let m3 = g.reshape(m, [batch, n, md])?;
            let aggr = g.bmm(w, m3)?;
            let aggr = g.reshape(aggr, [rows, md])?;
            let w_rows = g.reshape(w, [rows, n])?;
            let aug = g.concat(&[e, w_rows, mu, aggr])?;
            vars.c = Some(c);
            vars.mu = Some(mu);
            vars.s = s;
            vars.w = Some(w);
            vars.m = Some(m);
            vars.m_aggr = Some(aggr);
            vars.aug = aug;
        }

        let h = linear(g, vars.aug, p(slots.pi[0]), p(slots.pi[1]))?;
        let h = g.tanh(h);
        vars.logits = linear(g, h, p(slots.pi[2]), p(slots.pi[3]))?;
        Ok(vars)
    }

    /// Forward pass without gradient bookkeeping beyond the graph itself.
    pub fn forward(
        &self,
        obs: &Tensor,
        overrides: Option<&[Option<Vec<f64>>]>,
    ) -> Result<BatchForward> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let vars = self.build(&mut g, &params, obs, overrides)?;
        let batch = obs.shape()[0];
        let n = self.arch.n_agents;
        let flat = |v: Option<Var>, g: &Graph| -> Option<Tensor> {
            v.map(|v| {
                let t = g.value(v);
                let c = t.cols();
                t.clone().reshape([t.numel() / c, c]).expect("same size")
            })
        };
        Ok(BatchForward {
            batch,
            n_agents: n,
            e: g.value(vars.e).clone(),
            c: flat(vars.c, &g),
            mu: flat(vars.mu, &g),
            s: flat(vars.s, &g),
            w: flat(vars.w, &g),
            m: flat(vars.m, &g),
            m_aggr: flat(vars.m_aggr, &g),
            aug: g.value(vars.aug).clone(),
            logits: g.value(vars.logits).clone(),
        })
    }

    /// One step for `n` agents: forward pass plus one categorical sample per agent.
    pub fn comm_forward(&self, obs: &Tensor, rng: &mut Rng) -> Result<CommStep> {
        let n = self.arch.n_agents;
        let obs = obs.clone().reshape([1, n, self.arch.obs_dim])?;
        let fwd = self.forward(&obs, None)?;
        let mut actions = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut entropy = Vec::with_capacity(n);
        for i in 0..n {
            let s = categorical_sample_logprob(fwd.logits.row(i), rng);
            actions.push(s.action);
            log_probs.push(s.log_prob);
            entropy.push(s.entropy);
        }
        Ok(CommStep {
            trace: fwd.step_trace(0),
            actions,
            log_probs,
            entropy,
        })
    }
}

/// Result of [`CommPolicyParams::comm_forward`].
#[derive(Debug, Clone)]
pub struct CommStep {
    pub trace: CommForwardTrace,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub entropy: Vec<f64>,
}

/// Concrete values of a batched forward pass, each `[B·n, ·]`.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub batch: usize,
    pub n_agents: usize,
    pub e: Tensor,
    pub c: Option<Tensor>,
    pub mu: Option<Tensor>,
    pub s: Option<Tensor>,
    pub w: Option<Tensor>,
    pub m: Option<Tensor>,
    pub m_aggr: Option<Tensor>,
    pub aug: Tensor,
    pub logits: Tensor,
}

fn rows_of(t: &Tensor, from: usize, count: usize) -> Tensor {
    let c = t.cols();
    Tensor::new([count, c], t.data()[from * c..(from + count) * c].to_vec()).expect("in range")
}

impl BatchForward {
    /// The `n`-agent trace of batch entry `b`.
    pub fn step_trace(&self, b: usize) -> CommForwardTrace {
        let n = self.n_agents;
        let take = |t: &Tensor| rows_of(t, b * n, n);
        CommForwardTrace {
            e: take(&self.e),
            c: self.c.as_ref().map(take),
            mu: self.mu.as_ref().map(take),
            s: self.s.as_ref().map(take),
            w: self.w.as_ref().map(take),
            m: self.m.as_ref().map(take),
            m_aggr: self.m_aggr.as_ref().map(take),
            aug: take(&self.aug),
            action_logits: take(&self.logits),
        }
    }

    /// Greedy action for every row.
    pub fn argmax_actions(&self) -> Vec<usize> {
        self.logits.argmax_rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcomm_grad::rng::stream;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn onehot_examples() {
        let m = discretize_onehot(&t(&[1, 3], &[0.1, 0.5, 0.2]));
        assert_eq!(m.data(), &[0.0, 1.0, 0.0]);
        let m = discretize_onehot(&t(&[1, 3], &[1.0, 1.0, 0.0]));
        assert_eq!(m.data(), &[1.0, 0.0, 0.0]);
        let m = discretize_onehot(&t(&[1, 5], &[0.0, -1.0, 3.0, 0.5, 2.9]));
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bitstring_examples() {
        let m = discretize_bitstring(&t(&[1, 4], &[2.0, -1.0, 0.0, 1.0])).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);
        let mu = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let m = discretize_bitstring(&t(&[1, 10], &mu)).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0, 1.0]);
        let m = discretize_bitstring(&t(&[1, 2], &[0.3, 0.3])).unwrap();
        assert_eq!(m.data(), &[1.0]);
        assert!(discretize_bitstring(&t(&[1, 3], &[0.0; 3])).is_err());
    }

    #[test]
    fn attention_hand_example() {
        let c = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (s, w) = attention_weights(&c, &eye, AttentionMode::Learned).unwrap();
        assert_eq!(s.unwrap().row(0), &[1.0, 0.0]);
        let want = [0.731_058_578_6, 0.268_941_421_4];
        for (x, y) in w.row(0).iter().zip(want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_attention_logits_give_uniform_weights() {
        let c = t(&[3, 2], &[0.4, -1.0, 0.4, -1.0, 0.4, -1.0]);
        let wa = t(&[2, 2], &[0.3, 2.0, -1.0, 0.7]);
        let (_, w) = attention_weights(&c, &wa, AttentionMode::Learned).unwrap();
        for v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_mode_ignores_logits() {
        let c = t(&[4, 2], &[5.0, 1.0, -3.0, 0.0, 2.0, 2.0, 0.1, 9.0]);
        let wa = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (s, w) = attention_weights(&c, &wa, AttentionMode::Uniform).unwrap();
        assert!(s.is_none());
        assert!(w.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn aggregation_examples() {
        let m = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let pick = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(aggregate_messages(&pick, &m).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        let half = t(&[2, 2], &[0.5; 4]);
        assert_eq!(aggregate_messages(&half, &m).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn aggregation_matches_matrix_product() {
        // doubly-stochastic w built as an average of permutation matrices
        let w = t(
            &[4, 4],
            &[
                0.5, 0.25, 0.25, 0.0, //
                0.25, 0.5, 0.0, 0.25, //
                0.0, 0.25, 0.5, 0.25, //
                0.25, 0.0, 0.25, 0.5,
            ],
        );
        let m = t(&[4, 3], &[1., 0., 1., 0., 1., 1., 1., 1., 0., 0., 0., 1.]);
        let got = aggregate_messages(&w, &m).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                let want: f64 = (0..4).map(|j| w.row(i)[j] * m.row(j)[k]).sum();
                assert!((got.row(i)[k] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_encoder_gives_zero_embeddings() {
        let arch = Architecture::new(3, 5, 4, Protocol::bitstring(3), AttentionMode::Learned);
        let mut p = CommPolicyParams::init(arch, &mut stream(1, 0));
        for i in 0..4 {
            p.tensors[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let obs = Tensor::full([1, 3, 5], 0.7);
        let f = p.forward(&obs, None).unwrap();
        assert_eq!(f.e.shape(), &[3, 64]);
        assert!(f.e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_agent_attends_to_itself() {
        for protocol in [
            Protocol::continuous(4),
            Protocol::onehot(4),
            Protocol::bitstring(3),
        ] {
            let arch = Architecture::new(1, 6, 3, protocol, AttentionMode::Learned);
            let p = CommPolicyParams::init(arch, &mut stream(4, 0));
            let obs = Tensor::full([1, 1, 6], 0.3);
            let step = p.comm_forward(&obs, &mut stream(4, 1)).unwrap();
            let tr = step.trace;
            assert!((tr.w.unwrap().item() - 1.0).abs() < 1e-15);
            assert_eq!(tr.m_aggr.unwrap(), tr.m.unwrap());
        }
    }

    #[test]
    fn layout_matches_augmented_width() {
        let arch = Architecture::new(4, 77, 6, Protocol::bitstring(4), AttentionMode::Learned);
        assert_eq!(arch.aug_dim(), 64 + 4 + 8 + 4);
        let none = Architecture::new(4, 77, 6, Protocol::none(), AttentionMode::Learned);
        assert_eq!(none.aug_dim(), 64);
        assert_eq!(none.layout().len(), 8);
        assert_eq!(arch.layout().len(), 13);
    }

    #[test]
    fn wrong_observation_shape_is_rejected() {
        let arch = Architecture::new(2, 3, 2, Protocol::onehot(2), AttentionMode::Learned);
        let p = CommPolicyParams::init(arch, &mut stream(0, 0));
        assert!(p.forward(&Tensor::zeros([1, 3, 3]), None).is_err());
        assert!(p.forward(&Tensor::zeros([1, 2, 4]), None).is_err());
    }
}
