//! Central-difference gradient checking.

use crate::rng::Rng;
use crate::{GradError, Graph, Result, Tensor, Var};
use rand::seq::index::sample;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compare the analytic gradient of `loss` against central differences.
///
/// `loss` builds the scalar loss on a fresh graph from the given parameter
/// leaves. At most `max_coords` coordinates per parameter are checked,
/// sampled with `rng` when a tensor is larger than that.
pub fn check_gradients<F>(
    params: &[Tensor],
    loss: F,
    h: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = loss(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = loss(&mut g, &vars)?;
    let base = g.value(root).item();
    if !base.is_finite() {
        return Err(GradError::NonFinite("gradient check loss"));
    }
    let again = eval(params)?;
    if again != base {
        return Err(GradError::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let mut grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.take_or_zeros(*var, &params[pi]);
        let numel = params[pi].numel();
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            sample(rng, numel, max_coords).into_vec()
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (pi, c);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Per-primitive gradient checks on random instances.
///
/// Each primitive is wrapped as `sum(op(x) ⊙ r)` with a random constant `r`
/// so every output coordinate contributes. Returns (name, worst relative
/// error across `instances` draws).
pub fn primitive_suite(instances: usize, rng: &mut Rng) -> Result<Vec<(&'static str, f64)>> {
    type Build = fn(&mut Graph, &[Var]) -> Result<Var>;
    // (name, input shapes, positive inputs, build)
    let cases: Vec<(&'static str, Vec<Vec<usize>>, bool, Build)> = vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], false, |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], false, |g, v| g.matmul_nt(v[0], v[1])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 3]], false, |g, v| g.bmm(v[0], v[1])),
        ("bmm_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], false, |g, v| g.bmm_nt(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![4]], false, |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], false, |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3, 4], vec![3, 4]], false, |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], false, |g, v| Ok(g.scale(v[0], -1.7))),
        ("concat", vec![vec![3, 2], vec![3, 4], vec![3, 1]], false, |g, v| {
            g.concat(&[v[0], v[1], v[2]])
        }),
        ("relu", vec![vec![4, 5]], false, |g, v| Ok(g.relu(v[0]))),
        ("tanh", vec![vec![4, 5]], false, |g, v| Ok(g.tanh(v[0]))),
        ("exp", vec![vec![4, 5]], false, |g, v| Ok(g.exp(v[0]))),
        ("log", vec![vec![4, 5]], true, |g, v| Ok(g.log(v[0]))),
        ("softmax", vec![vec![3, 5]], false, |g, v| g.softmax(v[0], 1)),
        ("softmax_axis0", vec![vec![3, 5]], false, |g, v| g.softmax(v[0], 0)),
        ("log_softmax", vec![vec![3, 5]], false, |g, v| g.log_softmax(v[0], 1)),
        ("sum_last", vec![vec![3, 5]], false, |g, v| Ok(g.sum_last(v[0]))),
        ("sum", vec![vec![3, 5]], false, |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![3, 5]], false, |g, v| Ok(g.mean(v[0]))),
        ("gather", vec![vec![4, 3]], false, |g, v| g.gather(v[0], &[2, 0, 1, 2])),
        ("reshape", vec![vec![2, 6]], false, |g, v| g.reshape(v[0], [3, 4])),
        ("cross_entropy", vec![vec![3, 5]], false, |g, v| {
            g.cross_entropy_logits(v[0], &[4, 0, 2])
        }),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, positive, build) in cases {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let params: Vec<Tensor> = shapes
                .iter()
                .map(|s| random_tensor(s, positive, rng))
                .collect();
            // Random output weights, drawn once per instance.
            let probe = {
                let mut g = Graph::new();
                let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
                let y = build(&mut g, &vars)?;
                random_tensor(g.value(y).shape(), false, rng)
            };
            let rep = check_gradients(
                &params,
                |g, v| {
                    let y = build(g, v)?;
                    let r = g.constant(probe.clone());
                    let weighted = g.mul(y, r)?;
                    Ok(g.sum(weighted))
                },
                1e-5,
                64,
                rng,
            )?;
            worst = worst.max(rep.max_rel_error);
        }
        out.push((name, worst));
    }
    Ok(out)
}

/// Uniform entries in ±[0.1, 1.5] (kept off zero so relu kinks are never
/// straddled), or in [0.2, 2.0] when `positive`.
fn random_tensor(shape: &[usize], positive: bool, rng: &mut Rng) -> Tensor {
    use rand::Rng as _;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if positive {
                rng.random_range(0.2..2.0)
            } else {
                let mag = rng.random_range(0.1..1.5);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let params = vec![Tensor::vector(&[0.3, -1.7, 2.2])];
        let mut rng = stream(0, 0);
        let rep = check_gradients(
            &params,
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s3 = g.scale(sq, 3.0);
                Ok(g.sum(s3))
            },
            1e-5,
            16,
            &mut rng,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert_eq!(rep.coords_checked, 3);
    }

    #[test]
    fn nondeterministic_loss_is_reported() {
        let params = vec![Tensor::scalar(1.0)];
        let calls = Cell::new(0.0);
        let mut rng = stream(0, 0);
        let res = check_gradients(
            &params,
            |g, v| {
                calls.set(calls.get() + 1.0);
                let c = g.constant(Tensor::scalar(calls.get()));
                g.mul(v[0], c)
            },
            1e-5,
            4,
            &mut rng,
        );
        assert!(matches!(res, Err(GradError::NonDeterministic { .. })));
    }
}
