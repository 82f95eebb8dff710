//! Categorical distributions over logit rows.

use crate::rng::Rng;
use rand::Rng as _;

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|x| x - log_z).collect()
}

/// Entropy `-Σ p log p` of the softmax of `logits`.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax_row(logits)
        .iter()
        .map(|&lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalSample {
    pub action: usize,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Draw an index from `softmax(logits)` by inverse-CDF sampling.
pub fn categorical_sample_logprob(logits: &[f64], rng: &mut Rng) -> CategoricalSample {
    let logp = log_softmax_row(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut action = logp.len() - 1;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            action = i;
            break;
        }
    }
    CategoricalSample {
        action,
        log_prob: logp[action],
        entropy: entropy(logits),
    }
}
