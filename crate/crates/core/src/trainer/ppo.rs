use bcomm_grad::adam::clip_grad_norm;
use bcomm_grad::rng::{stream, stream_id};
use bcomm_grad::{Adam, Graph, Tensor, Var};
use rand::seq::SliceRandom;

use super::gae::normalize;
use super::rollout::Trajectory;
use super::streams;
use super::value::ValueParams;
use super::TrainConfig;
use crate::commnet::CommPolicyParams;
use crate::CoreError;

/// Samples for one gradient step. Agent rows are step-major (`B·n`).
#[derive(Debug, Clone)]
pub struct Minibatch {
    /// `[B, n, obs_dim]`.
    pub obs: Tensor,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// `[B, state_dim]`, present for a centralized baseline.
    pub states: Option<Tensor>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    /// Gather steps `(episode, t)` from `batch`; `advantages` is indexed like
    /// the flattened batch.
    fn gather(
        batch: &[Trajectory],
        index: &[(usize, usize)],
        advantages: &[Vec<f64>],
        with_states: bool,
    ) -> Result<Self, CoreError> {
        let first = &batch[0];
        let (n, od) = (first.n_agents, first.obs_dim);
        let b = index.len();
        let mut obs = Vec::with_capacity(b * n * od);
        let mut actions = Vec::with_capacity(b * n);
        let mut old = Vec::with_capacity(b * n);
        let mut adv = Vec::with_capacity(b * n);
        let mut states = Vec::new();
        let mut returns = Vec::with_capacity(b);
        for &(e, t) in index {
            let tr = &batch[e];
            obs.extend_from_slice(&tr.observations[t]);
            actions.extend_from_slice(&tr.actions[t]);
            old.extend_from_slice(&tr.log_probs[t]);
            adv.extend(std::iter::repeat_n(advantages[e][t], n));
            if with_states {
                states.extend_from_slice(&tr.states[t]);
            }
            returns.push(tr.returns[t]);
        }
        let states = if with_states {
            let sd = first.states[0].len();
            Some(Tensor::new([b, sd], states)?)
        } else {
            None
        };
        Ok(Self {
            obs: Tensor::new([b, n, od], obs)?,
            actions,
            old_log_probs: old,
            advantages: adv,
            states,
            returns,
        })
    }
}

/// Policy loss node and the diagnostics measured while building it.
#[derive(Debug, Clone, Copy)]
pub struct PolicyLoss {
    /// `−(mean surrogate + β · mean entropy)`.
    pub loss: Var,
    pub surrogate: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
}

/// Clipped-surrogate loss on `g`.
///
/// `min(rÂ, clip(r)Â)` is written as `mask · rÂ + (1 − mask) · clip(r)Â` with
/// `mask = [rÂ ≤ clip(r)Â]` held constant; the clipped branch carries no
/// gradient, so values and gradients agree with the min form.
pub fn policy_loss_graph(
    g: &mut Graph,
    policy: &CommPolicyParams,
    params: &[Var],
    mb: &Minibatch,
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<PolicyLoss, CoreError> {
    let rows = mb.actions.len();
    if mb.old_log_probs.len() != rows || mb.advantages.len() != rows {
        return Err(CoreError::invalid("minibatch columns disagree in length"));
    }
    let vars = policy.build(g, params, &mb.obs, None)?;
    let logp_all = g.log_softmax(vars.logits, 1)?;
    let logp = g.gather(logp_all, &mb.actions)?;
    let old = g.constant(Tensor::vector(&mb.old_log_probs));
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);

    let r = g.value(ratio).data().to_vec();
    let mut live = Vec::with_capacity(rows);
    let mut frozen = Vec::with_capacity(rows);
    for (&r, &a) in r.iter().zip(&mb.advantages) {
        let clipped = r.clamp(1.0 - clip_eps, 1.0 + clip_eps);
        if r * a <= clipped * a {
            live.push(a);
            frozen.push(0.0);
        } else {
            live.push(0.0);
            frozen.push(clipped * a);
        }
    }
    let live = g.constant(Tensor::vector(&live));
    let frozen = g.constant(Tensor::vector(&frozen));
    let surr = g.mul(ratio, live)?;
    let surr = g.add(surr, frozen)?;
    let surr = g.mean(surr);

    let p = g.softmax(vars.logits, 1)?;
    let plogp = g.mul(p, logp_all)?;
    let neg_h = g.sum_last(plogp);
    let neg_h = g.mean(neg_h);

    let surrogate = g.value(surr).item();
    let entropy = -g.value(neg_h).item();
    let neg_surr = g.scale(surr, -1.0);
    let ent_term = g.scale(neg_h, entropy_coef);
    let loss = g.add(neg_surr, ent_term)?;
    Ok(PolicyLoss {
        loss,
        surrogate,
        entropy,
        mean_ratio: r.iter().sum::<f64>() / rows as f64,
    })
}

/// Policy loss diagnostics and its gradient with respect to every tensor.
pub fn policy_gradients(
    policy: &CommPolicyParams,
    mb: &Minibatch,
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<(PolicyLoss, f64, Vec<Tensor>), CoreError> {
    let mut g = Graph::new();
    let params: Vec<Var> = policy.tensors.iter().map(|t| g.param(t.clone())).collect();
    let pl = policy_loss_graph(&mut g, policy, &params, mb, clip_eps, entropy_coef)?;
    let loss = g.value(pl.loss).item();
    let mut grads = g.backward(pl.loss)?;
    let grads = params
        .iter()
        .zip(&policy.tensors)
        .map(|(v, t)| grads.take_or_zeros(*v, t))
        .collect();
    Ok((pl, loss, grads))
}

fn value_gradients(
    value: &ValueParams,
    states: &Tensor,
    returns: &[f64],
    coef: f64,
) -> Result<(f64, Vec<Tensor>), CoreError> {
    let mut g = Graph::new();
    let params: Vec<Var> = value.tensors.iter().map(|t| g.param(t.clone())).collect();
    let s = g.constant(states.clone());
    let v = value.build(&mut g, &params, s)?;
    let target = g.constant(Tensor::new([returns.len(), 1], returns.to_vec())?);
    let d = g.sub(v, target)?;
    let sq = g.mul(d, d)?;
    let mse = g.mean(sq);
    let loss = g.scale(mse, coef);
    let mse_value = g.value(mse).item();
    let mut grads = g.backward(loss)?;
    let grads = params
        .iter()
        .zip(&value.tensors)
        .map(|(v, t)| grads.take_or_zeros(*v, t))
        .collect();
    Ok((mse_value, grads))
}

fn dump(names: &[&str], tensors: &[Tensor], grads: &[Tensor]) -> String {
    names
        .iter()
        .zip(tensors.iter().zip(grads))
        .map(|(n, (t, g))| {
            format!(
                "  {n:<10} {:?} |θ|={:.6e} finite={} |∇|={:.6e} finite={}",
                t.shape(),
                t.sq_norm().sqrt(),
                t.is_finite(),
                g.sq_norm().sqrt(),
                g.is_finite()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Averages over the gradient steps of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub steps: usize,
}

/// `epochs × minibatches` Adam steps on the clipped surrogate, plus value
/// regression when a value net is supplied. Advantages are normalized over
/// the batch first (written back into `batch`).
pub fn ppo_update(
    batch: &mut [Trajectory],
    policy: &mut CommPolicyParams,
    policy_opt: &mut Adam,
    mut value: Option<(&mut ValueParams, &mut Adam)>,
    config: &TrainConfig,
    iteration: u64,
) -> Result<UpdateMetrics, CoreError> {
    if batch.is_empty() || batch.iter().all(Trajectory::is_empty) {
        return Err(CoreError::invalid("PPO update on an empty batch"));
    }
    let mut flat: Vec<f64> = batch.iter().flat_map(|t| t.advantages.clone()).collect();
    normalize(&mut flat);
    let mut k = 0;
    for t in batch.iter_mut() {
        let len = t.len();
        t.advantages.copy_from_slice(&flat[k..k + len]);
        k += len;
    }
    let advantages: Vec<Vec<f64>> = batch.iter().map(|t| t.advantages.clone()).collect();

    let mut index: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(e, t)| (0..t.len()).map(move |s| (e, s)))
        .collect();
    let mb_count = config.minibatches.min(index.len());
    let mut rng = stream(config.seed, stream_id(streams::MINIBATCH, iteration, 0));
    let names = policy.names();
    let mut out = UpdateMetrics::default();

    for _ in 0..config.epochs {
        index.shuffle(&mut rng);
        for m in 0..mb_count {
            let lo = m * index.len() / mb_count;
            let hi = (m + 1) * index.len() / mb_count;
            let mb = Minibatch::gather(batch, &index[lo..hi], &advantages, value.is_some())?;

            let (pl, loss, mut grads) =
                policy_gradients(policy, &mb, config.clip_eps, config.entropy_coef)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(CoreError::Diverged {
                    reason: format!("non-finite policy loss {loss} at iteration {iteration}"),
                    dump: dump(&names, &policy.tensors, &grads),
                });
            }
            clip_grad_norm(&mut grads, config.max_grad_norm);
            policy_opt.step(&mut policy.tensors, &grads)?;

            if let (Some((v, opt)), Some(states)) = (value.as_mut(), mb.states.as_ref()) {
                let (vl, mut vg) = value_gradients(v, states, &mb.returns, config.value_coef)?;
                if !vl.is_finite() || vg.iter().any(|g| !g.is_finite()) {
                    let vnames: Vec<&str> =
                        ValueParams::layout(v.state_dim, v.hidden).iter().map(|l| l.0).collect();
                    return Err(CoreError::Diverged {
                        reason: format!("non-finite value loss {vl} at iteration {iteration}"),
                        dump: dump(&vnames, &v.tensors, &vg),
                    });
                }
                clip_grad_norm(&mut vg, config.max_grad_norm);
                opt.step(&mut v.tensors, &vg)?;
                out.value_loss += vl;
            }
            out.policy_loss += -pl.surrogate;
            out.entropy += pl.entropy;
            out.mean_ratio += pl.mean_ratio;
            out.steps += 1;
        }
    }
    let s = out.steps as f64;
    out.policy_loss /= s;
    out.value_loss /= s;
    out.entropy /= s;
    out.mean_ratio /= s;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commnet::Architecture;
    use crate::{AttentionMode, Protocol};
    use bcomm_grad::rng::stream;

    fn policy(protocol: Protocol) -> CommPolicyParams {
        let arch = Architecture::new(3, 6, 4, protocol, AttentionMode::Learned);
        CommPolicyParams::init(arch, &mut stream(3, 0))
    }

    fn minibatch(p: &CommPolicyParams, b: usize, adv: f64) -> Minibatch {
        let n = p.arch.n_agents;
        let od = p.arch.obs_dim;
        let obs = Tensor::new(
            [b, n, od],
            (0..b * n * od).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect(),
        )
        .unwrap();
        let fwd = p.forward(&obs, None).unwrap();
        let actions: Vec<usize> = (0..b * n).map(|i| i % p.arch.n_actions).collect();
        let old = actions
            .iter()
            .enumerate()
            .map(|(r, &a)| bcomm_grad::log_softmax_row(fwd.logits.row(r))[a])
            .collect();
        Minibatch {
            obs,
            actions,
            old_log_probs: old,
            advantages: (0..b * n).map(|i| adv * ((i % 3) as f64 - 0.7)).collect(),
            states: None,
            returns: vec![0.0; b],
        }
    }

    #[test]
    fn first_step_ratio_is_one_and_surrogate_is_mean_advantage() {
        let p = policy(Protocol::bitstring(3));
        let mb = minibatch(&p, 4, 1.0);
        let (pl, loss, _) = policy_gradients(&p, &mb, 0.2, 0.01).unwrap();
        let mean_adv = mb.advantages.iter().sum::<f64>() / mb.advantages.len() as f64;
        assert!((pl.mean_ratio - 1.0).abs() < 1e-12);
        assert!((pl.surrogate - mean_adv).abs() < 1e-12);
        assert!((loss - (-(mean_adv + 0.01 * pl.entropy))).abs() < 1e-12);
    }

    #[test]
    fn ratio_above_clip_contributes_clipped_advantage() {
        let p = policy(Protocol::none());
        let mut mb = minibatch(&p, 1, 1.0);
        mb.obs = Tensor::new([1, 3, 6], mb.obs.data().to_vec()).unwrap();
        mb.advantages = vec![2.0, 2.0, 2.0];
        // force r = 1.5 by lowering the behavior log-probs by ln 1.5
        let shifted: Vec<f64> = mb.old_log_probs.iter().map(|l| l - 1.5f64.ln()).collect();
        mb.old_log_probs = shifted;
        let (pl, _, grads) = policy_gradients(&p, &mb, 0.2, 0.0).unwrap();
        assert!((pl.mean_ratio - 1.5).abs() < 1e-12);
        assert!((pl.surrogate - 1.2 * 2.0).abs() < 1e-12);
        assert!(grads.iter().all(|g| g.sq_norm() == 0.0));
    }

    #[test]
    fn uniform_policy_with_zero_advantage_has_zero_gradient() {
        let mut p = policy(Protocol::continuous(2));
        let last = p.tensors.len() - 2;
        p.tensors[last].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut mb = minibatch(&p, 3, 0.0);
        mb.advantages.iter_mut().for_each(|a| *a = 0.0);
        let (_, _, grads) = policy_gradients(&p, &mb, 0.2, 0.0).unwrap();
        for g in grads {
            assert!(g.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn unbounded_clip_without_entropy_is_vanilla_policy_gradient() {
        let p = policy(Protocol::onehot(4));
        let mb = minibatch(&p, 5, 1.3);
        let (_, _, ppo) = policy_gradients(&p, &mb, f64::INFINITY, 0.0).unwrap();

        // −mean(log π(a|o) · Â)
        let mut g = Graph::new();
        let params: Vec<Var> = p.tensors.iter().map(|t| g.param(t.clone())).collect();
        let vars = p.build(&mut g, &params, &mb.obs, None).unwrap();
        let lp = g.log_softmax(vars.logits, 1).unwrap();
        let lp = g.gather(lp, &mb.actions).unwrap();
        let a = g.constant(Tensor::vector(&mb.advantages));
        let weighted = g.mul(lp, a).unwrap();
        let mean = g.mean(weighted);
        let loss = g.scale(mean, -1.0);
        let mut grads = g.backward(loss).unwrap();
        for ((v, t), want) in params.iter().zip(&p.tensors).zip(&ppo) {
            let got = grads.take_or_zeros(*v, t);
            for (x, y) in got.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let mut p = policy(Protocol::continuous(2));
        p.tensors[0].data_mut()[0] = f64::NAN;
        let mut batch = vec![Trajectory {
            n_agents: 3,
            obs_dim: 6,
            observations: vec![vec![0.5; 18]; 4],
            actions: vec![vec![0, 1, 2]; 4],
            log_probs: vec![vec![-1.0; 3]; 4],
            messages: vec![vec![]; 4],
            attention: vec![vec![]; 4],
            rewards: vec![1.0, 0.0, 2.0, 1.0],
            states: vec![vec![0.0]; 4],
            values: vec![0.0; 4],
            advantages: vec![1.0, -1.0, 0.5, 0.0],
            returns: vec![1.0; 4],
            normalized_return: None,
        }];
        let mut opt = Adam::new(Default::default(), &p.tensors);
        let cfg = TrainConfig {
            baseline: super::super::BaselineKind::Zero,
            ..TrainConfig::default()
        };
        match ppo_update(&mut batch, &mut p, &mut opt, None, &cfg, 0) {
            Err(CoreError::Diverged { dump, .. }) => assert!(dump.contains("obs.w1")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn advantages_are_normalized_across_the_batch() {
        let p0 = policy(Protocol::none());
        let mut p = p0.clone();
        let mk = |adv: Vec<f64>| Trajectory {
            n_agents: 3,
            obs_dim: 6,
            observations: vec![vec![0.1; 18]; adv.len()],
            actions: vec![vec![0, 1, 2]; adv.len()],
            log_probs: vec![vec![-1.386; 3]; adv.len()],
            messages: vec![vec![]; adv.len()],
            attention: vec![vec![]; adv.len()],
            rewards: vec![0.0; adv.len()],
            states: vec![vec![0.0]; adv.len()],
            values: vec![0.0; adv.len()],
            returns: vec![0.0; adv.len()],
            advantages: adv,
            normalized_return: None,
        };
        let mut batch = vec![mk(vec![1.0, 4.0, -2.0]), mk(vec![7.0, 0.5])];
        let mut opt = Adam::new(Default::default(), &p.tensors);
        let cfg = TrainConfig {
            epochs: 1,
            minibatches: 1,
            ..TrainConfig::default()
        };
        ppo_update(&mut batch, &mut p, &mut opt, None, &cfg, 0).unwrap();
        let all: Vec<f64> = batch.iter().flat_map(|t| t.advantages.clone()).collect();
        let mean = all.iter().sum::<f64>() / 5.0;
        let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
        assert_ne!(p.tensors, p0.tensors);
    }
}
