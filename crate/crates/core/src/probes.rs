//! Positive listening and signaling probes.
//!
//! A listening probe predicts agent `i`'s action from the aggregate of the
//! *other* agents' messages; a signaling probe predicts it from the message
//! `i` sent. Both are one-hidden-layer ReLU classifiers scored on a held-out
//! stratified split.

use std::collections::BTreeMap;
use std::path::Path;

use bcomm_grad::init::orthogonal;
use bcomm_grad::rng::{stream, stream_id, Rng};
use bcomm_grad::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::commnet::{CommForwardTrace, CommPolicyParams};
use crate::envs::EnvConfig;
use crate::trainer::{eval_env_rng, streams};
use crate::{CoreError, Protocol};

/// One (agent, step) sample from a greedy evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub episode: usize,
    pub step: usize,
    pub agent: usize,
    pub observation: Vec<f64>,
    /// Message `m_i` broadcast by the agent.
    pub message: Vec<f64>,
    /// Aggregate of the other agents' messages under renormalized attention.
    pub masked_aggregate: Vec<f64>,
    pub action: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            train_fraction: 0.8,
            epochs: 200,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CoreError::invalid("probe train fraction must lie in (0, 1)"));
        }
        if self.hidden == 0 || self.epochs == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(CoreError::invalid(
                "probe hidden width, epochs and learning rate must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Input: masked aggregate of received messages.
    Listening,
    /// Input: the agent's own message.
    Signaling,
    /// Most frequent training label, no input.
    Majority,
}

impl ProbeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeKind::Listening => "listening",
            ProbeKind::Signaling => "signaling",
            ProbeKind::Majority => "majority",
        }
    }
}

/// Aggregate for agent `i` with `w_ii` zeroed and the row renormalized.
pub fn masked_aggregate(trace: &CommForwardTrace, i: usize) -> Result<Vec<f64>, CoreError> {
    let (w, m) = match (&trace.w, &trace.m) {
        (Some(w), Some(m)) => (w, m),
        _ => return Err(CoreError::invalid("trace carries no messages")),
    };
    masked_aggregate_rows(w, m, i)
}

/// [`masked_aggregate`] on an explicit `[n, n]` weight and `[n, d]` message matrix.
pub fn masked_aggregate_rows(w: &Tensor, m: &Tensor, i: usize) -> Result<Vec<f64>, CoreError> {
    let n = w.rows();
    if n < 2 {
        return Err(CoreError::invalid(
            "masked aggregation needs at least two agents",
        ));
    }
    if i >= n || w.cols() != n || m.rows() != n {
        return Err(CoreError::invalid(format!(
            "agent {i} with weights {:?} and messages {:?}",
            w.shape(),
            m.shape()
        )));
    }
    let row = w.row(i);
    let mass: f64 = (0..n).filter(|&j| j != i).map(|j| row[j]).sum();
    let d = m.cols();
    let mut out = vec![0.0; d];
    for j in (0..n).filter(|&j| j != i) {
        let wbar = if mass > 0.0 {
            row[j] / mass
        } else {
            1.0 / (n - 1) as f64
        };
        for (o, v) in out.iter_mut().zip(m.row(j)) {
            *o += wbar * v;
        }
    }
    Ok(out)
}

/// Records from `episodes` greedy evaluation episodes (same environment
/// streams as [`crate::trainer::evaluate_policy`] under `seed`).
pub fn build_probe_dataset(
    policy: &CommPolicyParams,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<ProbeRecord>, CoreError> {
    if !policy.arch.protocol.communicates() {
        return Err(CoreError::invalid("probes need a communicating policy"));
    }
    let spec = env.spec();
    let (n, od) = (spec.n_agents, spec.obs_dim);
    let mut envs = (0..episodes)
        .map(|e| env.make(eval_env_rng(seed, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut steps = vec![0usize; episodes];
    let mut records = Vec::new();
    loop {
        let active: Vec<usize> = (0..episodes).filter(|&e| !envs[e].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let mut data = Vec::with_capacity(active.len() * n * od);
        for &e in &active {
            data.extend(envs[e].observations());
        }
        let obs = Tensor::new([active.len(), n, od], data)?;
        let fwd = policy.forward(&obs, None)?;
        let actions = fwd.argmax_actions();
        for (slot, &e) in active.iter().enumerate() {
            let trace = fwd.step_trace(slot);
            let m = trace.m.as_ref().expect("communicating policy");
            for i in 0..n {
                let row = slot * n + i;
                records.push(ProbeRecord {
                    episode: e,
                    step: steps[e],
                    agent: i,
                    observation: obs.data()[row * od..(row + 1) * od].to_vec(),
                    message: m.row(i).to_vec(),
                    masked_aggregate: masked_aggregate(&trace, i)?,
                    action: actions[row],
                });
            }
            envs[e].step(&actions[slot * n..(slot + 1) * n])?;
            steps[e] += 1;
        }
    }
    records.sort_by_key(|r| (r.episode, r.step, r.agent));
    Ok(records)
}

/// Stratified split: per label, a shuffled `train_fraction` share (rounded,
/// at least one) goes to training. Returns sorted `(train, test)` indices.
pub fn stratified_split(
    labels: &[usize],
    train_fraction: f64,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_label.values_mut() {
        idx.shuffle(rng);
        let k = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Trained probe with the input standardization fitted on its training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `w1 [d, h]`, `b1 [h]`, `w2 [h, classes]`, `b2 [classes]`.
    pub tensors: Vec<Tensor>,
}

impl ProbeClassifier {
    fn standardize(&self, x: &[Vec<f64>]) -> Result<Tensor, CoreError> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(x.len() * d);
        for row in x {
            if row.len() != d {
                return Err(CoreError::invalid(format!(
                    "probe input width {} != {d}",
                    row.len()
                )));
            }
            data.extend(
                row.iter()
                    .zip(self.mean.iter().zip(&self.scale))
                    .map(|(v, (m, s))| (v - m) / s),
            );
        }
        Ok(Tensor::new([x.len(), d], data)?)
    }

    fn logits(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, CoreError> {
        let h = g.matmul(x, params[0])?;
        let h = g.add(h, params[1])?;
        let h = g.relu(h);
        let o = g.matmul(h, params[2])?;
        Ok(g.add(o, params[3])?)
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>, CoreError> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let params: Vec<Var> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let xs = g.constant(self.standardize(x)?);
        let l = self.logits(&mut g, &params, xs)?;
        Ok(g.value(l).argmax_rows())
    }
}

/// Fit a probe on `(x, labels)` by full-batch Adam on cross-entropy.
pub fn train_probe(
    x: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
    rng: &mut Rng,
) -> Result<ProbeClassifier, CoreError> {
    config.validate()?;
    if x.is_empty() || x.len() != labels.len() {
        return Err(CoreError::invalid("probe needs matching, non-empty inputs and labels"));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(CoreError::invalid(format!(
            "probe training data has the single label {first}; nothing to discriminate"
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::invalid(format!("label {l} outside {classes} classes")));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for row in x {
        for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let mut clf = ProbeClassifier {
        mean,
        scale,
        tensors: vec![
            orthogonal(d.max(1), config.hidden, std::f64::consts::SQRT_2, rng),
            Tensor::zeros([config.hidden]),
            orthogonal(config.hidden, classes, 1.0, rng),
            Tensor::zeros([classes]),
        ],
    };
    let xs = clf.standardize(x)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &clf.tensors,
    );
    for _ in 0..config.epochs {
        let mut g = Graph::new();
        let params: Vec<Var> = clf.tensors.iter().map(|t| g.param(t.clone())).collect();
        let xv = g.constant(xs.clone());
        let logits = clf.logits(&mut g, &params, xv)?;
        let loss = g.cross_entropy_logits(logits, labels)?;
        if !g.value(loss).item().is_finite() {
            return Err(CoreError::Diverged {
                reason: "non-finite probe loss".into(),
                dump: String::new(),
            });
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = params
            .iter()
            .zip(&clf.tensors)
            .map(|(v, t)| grads.take_or_zeros(*v, t))
            .collect();
        opt.step(&mut clf.tensors, &grads)?;
    }
    Ok(clf)
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Held-out accuracy of `clf` on `(x, labels)`.
pub fn eval_probe(
    clf: &ProbeClassifier,
    x: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64, CoreError> {
    Ok(accuracy(&clf.predict(x)?, labels))
}

/// Held-out outcome of one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub accuracy: f64,
    /// Per test record: prediction correct.
    pub correct: Vec<bool>,
    pub n_records: usize,
}

/// Split `records`, train the requested probe and score it on the test part.
/// The split depends only on the labels and `config.seed`, so probes of
/// different kinds on the same records share it.
pub fn run_probe(
    records: &[ProbeRecord],
    kind: ProbeKind,
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult, CoreError> {
    config.validate()?;
    let labels: Vec<usize> = records.iter().map(|r| r.action).collect();
    let mut split_rng = stream(config.seed, stream_id(streams::PROBE, 0, 0));
    let (train, test) = stratified_split(&labels, config.train_fraction, &mut split_rng);
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let (y_train, y_test) = (pick(&train), pick(&test));
    let predictions = match kind {
        ProbeKind::Majority => {
            let mut counts = vec![0usize; classes.max(1)];
            for &l in &y_train {
                if l < counts.len() {
                    counts[l] += 1;
                }
            }
            let top = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i);
            vec![top; y_test.len()]
        }
        ProbeKind::Listening | ProbeKind::Signaling => {
            let input = |i: usize| -> Vec<f64> {
                match kind {
                    ProbeKind::Listening => records[i].masked_aggregate.clone(),
                    _ => records[i].message.clone(),
                }
            };
            let x_train: Vec<Vec<f64>> = train.iter().map(|&i| input(i)).collect();
            let x_test: Vec<Vec<f64>> = test.iter().map(|&i| input(i)).collect();
            let mut rng = stream(config.seed, stream_id(streams::PROBE, 1, kind as u64));
            let clf = train_probe(&x_train, &y_train, classes, config, &mut rng)?;
            clf.predict(&x_test)?
        }
    };
    let correct: Vec<bool> = predictions.iter().zip(&y_test).map(|(p, l)| p == l).collect();
    Ok(ProbeResult {
        kind,
        accuracy: accuracy(&predictions, &y_test),
        correct,
        n_records: records.len(),
    })
}

fn quantiles(mut v: Vec<f64>, level: f64) -> (f64, f64) {
    v.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
    (at(tail), at(1.0 - tail))
}

fn resample_mean(x: &[bool], rng: &mut Rng) -> f64 {
    let hits = (0..x.len())
        .filter(|_| x[rng.random_range(0..x.len())])
        .count();
    hits as f64 / x.len() as f64
}

/// Percentile bootstrap interval for an accuracy.
pub fn bootstrap_accuracy_ci(
    correct: &[bool],
    resamples: usize,
    level: f64,
    rng: &mut Rng,
) -> Result<(f64, f64), CoreError> {
    if correct.is_empty() || resamples == 0 {
        return Err(CoreError::invalid("bootstrap needs samples and resamples"));
    }
    Ok(quantiles(
        (0..resamples).map(|_| resample_mean(correct, rng)).collect(),
        level,
    ))
}

/// Percentile bootstrap interval for `acc(a) − acc(b)`. Paired resampling
/// (same index for both) when the outcomes refer to the same test records.
pub fn bootstrap_difference_ci(
    a: &[bool],
    b: &[bool],
    paired: bool,
    resamples: usize,
    level: f64,
    rng: &mut Rng,
) -> Result<(f64, f64), CoreError> {
    if a.is_empty() || b.is_empty() || resamples == 0 {
        return Err(CoreError::invalid("bootstrap needs samples and resamples"));
    }
    if paired && a.len() != b.len() {
        return Err(CoreError::invalid("paired bootstrap needs equal lengths"));
    }
    let diffs = (0..resamples)
        .map(|_| {
            if paired {
                let mut d = 0i64;
                for _ in 0..a.len() {
                    let k = rng.random_range(0..a.len());
                    d += a[k] as i64 - b[k] as i64;
                }
                d as f64 / a.len() as f64
            } else {
                resample_mean(a, rng) - resample_mean(b, rng)
            }
        })
        .collect();
    Ok(quantiles(diffs, level))
}

/// One row of the probe results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub protocol: String,
    pub bandwidth: usize,
    pub vocab_size: Option<u64>,
    pub probe_kind: ProbeKind,
    pub accuracy: f64,
    pub n_records: usize,
    pub seed: u64,
}

impl ProbeRow {
    pub fn new(protocol: &Protocol, result: &ProbeResult, seed: u64) -> Self {
        Self {
            protocol: protocol.label(),
            bandwidth: protocol.bandwidth,
            vocab_size: protocol.vocab_size(),
            probe_kind: result.kind,
            accuracy: result.accuracy,
            n_records: result.n_records,
            seed,
        }
    }
}

/// Append rows to a probe CSV, writing the header for a new file.
pub fn append_probe_csv(path: &Path, rows: &[ProbeRow]) -> Result<(), CoreError> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)
            .map_err(|e| CoreError::Env(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}
