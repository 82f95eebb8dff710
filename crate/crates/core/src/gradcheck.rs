//! Finite-difference check of the complete policy loss: batched
//! communication forward pass followed by the clipped PPO surrogate.

use bcomm_grad::rng::Rng;
use bcomm_grad::{check_gradients, log_softmax_row, GradCheckReport, GradError, Tensor};
use rand::Rng as _;

use crate::commnet::{min_tie_margin, Architecture, CommPolicyParams};
use crate::trainer::{policy_loss_graph, Minibatch};
use crate::{AttentionMode, CoreError, Protocol};

/// Smallest admissible gap between competing message logits. Central
/// differences move μ by far less than this, so argmax stays put.
pub const TIE_MARGIN: f64 = 1e-3;

fn random_obs(b: usize, n: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(
        [b, n, d],
        (0..b * n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("positive extents")
}

/// Check the PPO loss of a small random policy under `protocol`.
///
/// Behavior log-probs are offset by `0`, `+ln 1.5` or `−ln 1.5` so the batch
/// holds unclipped samples and samples far inside both clipped regions.
/// Observation batches whose messages sit within [`TIE_MARGIN`] of an argmax
/// tie are redrawn.
pub fn ppo_loss_gradcheck(
    protocol: Protocol,
    attention_mode: AttentionMode,
    h: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport, CoreError> {
    let arch = Architecture {
        hidden: 8,
        attn_dim: 4,
        ..Architecture::new(3, 5, 4, protocol, attention_mode)
    };
    let mut policy = CommPolicyParams::init(arch, rng);
    // larger message and attention weights than at init, so those paths matter
    for (name, t) in policy.names().into_iter().zip(policy.tensors.iter_mut()) {
        if matches!(name, "attn.w" | "msg.w" | "pi.w2") {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let (b, n) = (4, arch.n_agents);
    let mut obs = random_obs(b, n, arch.obs_dim, rng);
    let mut fwd = policy.forward(&obs, None)?;
    let mut tries = 0;
    while protocol.is_discrete()
        && min_tie_margin(&protocol, fwd.mu.as_ref().expect("messages")) < TIE_MARGIN
    {
        tries += 1;
        if tries > 1000 {
            return Err(CoreError::State("no tie-free observation batch found".into()));
        }
        obs = random_obs(b, n, arch.obs_dim, rng);
        fwd = policy.forward(&obs, None)?;
    }
    let rows = b * n;
    let actions: Vec<usize> = (0..rows).map(|_| rng.random_range(0..arch.n_actions)).collect();
    let shifts = [0.0, 1.5f64.ln(), -(1.5f64.ln())];
    let old_log_probs = (0..rows)
        .map(|r| log_softmax_row(fwd.logits.row(r))[actions[r]] - shifts[r % 3])
        .collect();
    let advantages = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mb = Minibatch {
        obs,
        actions,
        old_log_probs,
        advantages,
        states: None,
        returns: vec![0.0; b],
    };
    let report = check_gradients(
        &policy.tensors,
        |g, vars| {
            policy_loss_graph(g, &policy, vars, &mb, 0.2, 0.01)
                .map(|l| l.loss)
                .map_err(|e| match e {
                    CoreError::Grad(e) => e,
                    other => GradError::Shape {
                        op: "ppo_loss",
                        detail: other.to_string(),
                    },
                })
        },
        h,
        64,
        rng,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcomm_grad::rng::stream;

    #[test]
    fn continuous_loss_passes() {
        let r = ppo_loss_gradcheck(
            Protocol::continuous(3),
            AttentionMode::Learned,
            1e-5,
            &mut stream(0, 0),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.coords_checked > 100);
    }
}
