//! Strategies, property bodies and oracles shared by the property tests and
//! the acceptance runner.
#![allow(dead_code)]

use bcomm_core::commnet::{Architecture, BatchForward, CommPolicyParams};
use bcomm_core::probes::masked_aggregate_rows;
use bcomm_core::{AttentionMode, Protocol};
use bcomm_grad::rng::stream;
use bcomm_grad::Tensor;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub const OBS_DIM: usize = 5;

/// Small policy with a sharpened attention encoder so attention rows are far
/// from uniform.
pub fn policy(n: usize, protocol: Protocol, mode: AttentionMode, seed: u64) -> CommPolicyParams {
    let arch = Architecture {
        hidden: 12,
        attn_dim: 6,
        ..Architecture::new(n, OBS_DIM, 4, protocol, mode)
    };
    let mut p = CommPolicyParams::init(arch, &mut stream(seed, 0));
    for (name, t) in p.names().into_iter().zip(p.tensors.iter_mut()) {
        if name == "attn.w" {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    p
}

pub fn protocol_strategy() -> impl Strategy<Value = Protocol> {
    prop_oneof![
        (1usize..6).prop_map(Protocol::continuous),
        (1usize..6).prop_map(Protocol::onehot),
        (1usize..6).prop_map(Protocol::bitstring),
    ]
}

pub fn obs_strategy(b: usize, n: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, b * n * OBS_DIM)
        .prop_map(move |d| Tensor::new([b, n, OBS_DIM], d).unwrap())
}

/// Observations for a random agent count in `1..5`.
pub fn sized_obs_strategy() -> impl Strategy<Value = (usize, Tensor)> {
    (1usize..5).prop_flat_map(|n| obs_strategy(2, n).prop_map(move |o| (n, o)))
}

pub fn permutation_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

pub fn masked_case_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        proptest::collection::vec(0.01f64..1.0, 4),
        proptest::collection::vec(-5.0f64..5.0, 6),
    )
}

pub fn forward_pair(p: &CommPolicyParams, obs: &Tensor, perm: &[usize]) -> (BatchForward, BatchForward) {
    let od = obs.shape()[2];
    let mut permuted = Vec::with_capacity(obs.data().len());
    for &k in perm {
        permuted.extend_from_slice(&obs.data()[k * od..(k + 1) * od]);
    }
    let moved = Tensor::new([1, perm.len(), od], permuted).unwrap();
    (p.forward(obs, None).unwrap(), p.forward(&moved, None).unwrap())
}

/// Zeroes the rows of `pi.w1` that read the attention row `w_i`, the only
/// position-indexed input of the action head.
pub fn without_positional_block(mut p: CommPolicyParams) -> CommPolicyParams {
    let (hidden, n) = (p.arch.hidden, p.arch.n_agents);
    let k = p.names().iter().position(|&n| n == "pi.w1").unwrap();
    let cols = p.tensors[k].shape()[1];
    p.tensors[k].data_mut()[hidden * cols..(hidden + n) * cols]
        .iter_mut()
        .for_each(|v| *v = 0.0);
    p
}

pub fn attention_rows_are_distributions(protocol: Protocol, seed: u64, n: usize, obs: &Tensor) -> Result<(), TestCaseError> {
    let p = policy(n, protocol, AttentionMode::Learned, seed);
    let w = p.forward(obs, None).unwrap().w.unwrap();
    for r in 0..w.rows() {
        let row = w.row(r);
        prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    Ok(())
}

pub fn discrete_messages_are_well_formed(b: usize, seed: u64, obs: &Tensor) -> Result<(), TestCaseError> {
    for protocol in [Protocol::onehot(b), Protocol::bitstring(b)] {
        let p = policy(obs.shape()[1], protocol, AttentionMode::Learned, seed);
        let m = p.forward(obs, None).unwrap().m.unwrap();
        for r in 0..m.rows() {
            let row = m.row(r);
            prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
            if protocol == Protocol::onehot(b) {
                prop_assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
            }
        }
    }
    Ok(())
}

/// Permuting agents permutes e, c, μ, m, m_aggr and logits rows and w on both
/// axes. The action head also reads `w_i` by position, so logits are compared
/// with that block neutralised.
pub fn agent_permutation_permutes_outputs(
    protocol: Protocol,
    seed: u64,
    obs: &Tensor,
    perm: &[usize],
) -> Result<(), TestCaseError> {
    let n = perm.len();
    let p = without_positional_block(policy(n, protocol, AttentionMode::Learned, seed));
    let (a, b) = forward_pair(&p, obs, perm);
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|r| t.row(r).to_vec()).collect() };
    let mut pairs = vec![(rows(&a.e), rows(&b.e)), (rows(&a.logits), rows(&b.logits))];
    for (x, y) in [(&a.c, &b.c), (&a.mu, &b.mu), (&a.m, &b.m), (&a.m_aggr, &b.m_aggr)] {
        pairs.push((rows(x.as_ref().unwrap()), rows(y.as_ref().unwrap())));
    }
    for (orig, moved) in pairs {
        for i in 0..n {
            for (x, y) in moved[i].iter().zip(&orig[perm[i]]) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
    let (wa, wb) = (a.w.unwrap(), b.w.unwrap());
    for i in 0..n {
        for j in 0..n {
            prop_assert!((wb.row(i)[j] - wa.row(perm[i])[perm[j]]).abs() < 1e-9);
        }
    }
    Ok(())
}

pub fn two_agent_masked_aggregate_is_the_other_message(w: &[f64], m: &[f64]) -> Result<(), TestCaseError> {
    let mut w = w.to_vec();
    for r in 0..2 {
        let s = w[2 * r] + w[2 * r + 1];
        w[2 * r] /= s;
        w[2 * r + 1] /= s;
    }
    let wt = Tensor::new([2, 2], w).unwrap();
    let mt = Tensor::new([2, 3], m.to_vec()).unwrap();
    prop_assert_eq!(masked_aggregate_rows(&wt, &mt, 0).unwrap(), m[3..].to_vec());
    prop_assert_eq!(masked_aggregate_rows(&wt, &mt, 1).unwrap(), m[..3].to_vec());
    Ok(())
}

/// `A_t = Σ_{l=0}^{T-1-t} (γλ)^l (r_{t+l} + γ V_{t+l+1} − V_{t+l})`, summed directly.
pub fn gae_double_sum(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t_max = r.len();
    (0..t_max)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..t_max - t {
                let k = t + l;
                let delta = r[k] + gamma * v[k + 1] - v[k];
                total += (gamma * lambda).powi(l as i32) * delta;
            }
            total
        })
        .collect()
}

/// Largest deviation of `compute_gae` from the double sum, over advantages and returns.
pub fn gae_error(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> f64 {
    let (adv, ret) = bcomm_core::trainer::compute_gae(r, v, gamma, lambda).unwrap();
    let want = gae_double_sum(r, v, gamma, lambda);
    let mut worst = 0.0f64;
    for t in 0..r.len() {
        worst = worst.max((adv[t] - want[t]).abs());
        worst = worst.max((ret[t] - (want[t] + v[t])).abs());
    }
    worst
}
