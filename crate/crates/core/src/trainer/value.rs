//! Baselines: zero, or a centralized MLP on the global state.

use bcomm_grad::init::orthogonal;
use bcomm_grad::rng::Rng;
use bcomm_grad::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Zero,
    #[default]
    Centralized,
}

/// `state_dim → hidden → hidden → 1` with tanh hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    pub state_dim: usize,
    pub hidden: usize,
    pub tensors: Vec<Tensor>,
}

impl ValueParams {
    pub fn layout(state_dim: usize, hidden: usize) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("value.w1", vec![state_dim, hidden]),
            ("value.b1", vec![hidden]),
            ("value.w2", vec![hidden, hidden]),
            ("value.b2", vec![hidden]),
            ("value.w3", vec![hidden, 1]),
            ("value.b3", vec![1]),
        ]
    }

    pub fn init(state_dim: usize, rng: &mut Rng) -> Self {
        let hidden = 64;
        let tensors = Self::layout(state_dim, hidden)
            .into_iter()
            .map(|(name, shape)| match shape.len() {
                1 => Tensor::zeros(shape),
                _ => {
                    let gain = if name == "value.w3" {
                        1.0
                    } else {
                        std::f64::consts::SQRT_2
                    };
                    orthogonal(shape[0], shape[1], gain, rng)
                }
            })
            .collect();
        Self {
            state_dim,
            hidden,
            tensors,
        }
    }

    pub fn from_tensors(state_dim: usize, tensors: Vec<Tensor>) -> Result<Self, CoreError> {
        let hidden = tensors.first().map_or(0, |t| t.cols());
        let layout = Self::layout(state_dim, hidden);
        if layout.len() != tensors.len()
            || layout
                .iter()
                .zip(&tensors)
                .any(|((_, s), t)| t.shape() != s.as_slice())
        {
            return Err(CoreError::invalid("value tensors do not match the layout"));
        }
        Ok(Self {
            state_dim,
            hidden,
            tensors,
        })
    }

    /// `[B, state_dim] -> [B, 1]`.
    pub fn build(&self, g: &mut Graph, params: &[Var], states: Var) -> Result<Var, CoreError> {
        let h = g.matmul(states, params[0])?;
        let h = g.add(h, params[1])?;
        let h = g.tanh(h);
        let h = g.matmul(h, params[2])?;
        let h = g.add(h, params[3])?;
        let h = g.tanh(h);
        let v = g.matmul(h, params[4])?;
        Ok(g.add(v, params[5])?)
    }

    /// Value estimate for each row of `states` (`[B, state_dim]`).
    pub fn forward(&self, states: &Tensor) -> Result<Vec<f64>, CoreError> {
        if states.rank() != 2 || states.cols() != self.state_dim {
            return Err(CoreError::invalid(format!(
                "value states must be [B, {}], got {:?}",
                self.state_dim,
                states.shape()
            )));
        }
        let mut g = Graph::new();
        let params: Vec<Var> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let s = g.constant(states.clone());
        let v = self.build(&mut g, &params, s)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// Baseline value of a single global state.
pub fn value_forward(
    state: &[f64],
    params: Option<&ValueParams>,
    kind: BaselineKind,
) -> Result<f64, CoreError> {
    match (kind, params) {
        (BaselineKind::Zero, _) => Ok(0.0),
        (BaselineKind::Centralized, Some(p)) => {
            let t = Tensor::new([1, state.len()], state.to_vec())?;
            Ok(p.forward(&t)?[0])
        }
        (BaselineKind::Centralized, None) => Err(CoreError::invalid(
            "centralized baseline requires value parameters",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcomm_grad::rng::stream;
    use bcomm_grad::{Adam, AdamConfig};

    #[test]
    fn zero_baseline_is_zero() {
        assert_eq!(value_forward(&[1.0, 5.0], None, BaselineKind::Zero).unwrap(), 0.0);
    }

    #[test]
    fn zero_weights_return_the_output_bias() {
        let mut p = ValueParams::init(4, &mut stream(0, 0));
        for t in p.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.tensors[5] = Tensor::vector(&[1.25]);
        let v = value_forward(&[0.3, -1.0, 2.0, 0.0], Some(&p), BaselineKind::Centralized);
        assert_eq!(v.unwrap(), 1.25);
    }

    #[test]
    fn regression_on_constant_returns_converges() {
        let mut p = ValueParams::init(3, &mut stream(1, 0));
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            &p.tensors,
        );
        let states = Tensor::new(
            [8, 3],
            (0..24).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect(),
        )
        .unwrap();
        for _ in 0..2000 {
            let mut g = Graph::new();
            let vars: Vec<Var> = p.tensors.iter().map(|t| g.param(t.clone())).collect();
            let s = g.constant(states.clone());
            let v = p.build(&mut g, &vars, s).unwrap();
            let target = g.constant(Tensor::full([8, 1], 3.5));
            let d = g.sub(v, target).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.mean(sq);
            let mut grads = g.backward(loss).unwrap();
            let gs: Vec<Tensor> = vars
                .iter()
                .zip(&p.tensors)
                .map(|(v, t)| grads.take_or_zeros(*v, t))
                .collect();
            opt.step(&mut p.tensors, &gs).unwrap();
        }
        for v in p.forward(&states).unwrap() {
            assert!((v - 3.5).abs() < 1e-3, "{v}");
        }
    }
}
