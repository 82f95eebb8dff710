//! Parameter initializers.

use crate::rng::Rng;
use crate::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Orthogonal `rows × cols` matrix scaled by `gain` (Gram-Schmidt on a
/// Gaussian draw, orthonormalizing along the shorter side).
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = gain
                * if rows <= cols {
                    basis[r][c]
                } else {
                    basis[c][r]
                };
        }
    }
    Tensor::new([rows, cols], data).expect("extents positive")
}

/// Identity plus uniform noise in `[-noise, noise]`.
pub fn identity_jitter(dim: usize, noise: f64, rng: &mut Rng) -> Tensor {
    let mut data = vec![0.0; dim * dim];
    for (i, v) in data.iter_mut().enumerate() {
        let base = if i / dim == i % dim { 1.0 } else { 0.0 };
        *v = base + rng.random_range(-noise..=noise);
    }
    Tensor::new([dim, dim], data).expect("extents positive")
}
