//! Small numeric helpers shared by the model pieces.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable softmax over a fixed-size score vector.
pub fn softmax<const N: usize>(z: [f64; N]) -> [f64; N] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = z.map(|v| (v - m).exp());
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Pulls an upstream gradient on softmax outputs back to its inputs.
pub fn softmax_backward<const N: usize>(probs: &[f64; N], g: &[f64; N]) -> [f64; N] {
    let dot: f64 = probs.iter().zip(g).map(|(p, g)| p * g).sum();
    std::array::from_fn(|i| probs[i] * (g[i] - dot))
}

/// Glorot-uniform matrix of shape `(rows, cols)`.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn uniform_vec<R: Rng>(len: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    let dist = Uniform::new_inclusive(-scale, scale).expect("finite bounds");
    Array1::from_shape_simple_fn(len, || dist.sample(rng))
}

/// Rank-one update `m += a ⊗ b`.
pub fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            m.row_mut(i).scaled_add(ai, b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_values() {
        let p = softmax([2f64.ln(), 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let p = softmax([3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15);
        let p = softmax([1000.0, 1000.0, 1000.0]);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_logit_inverse() {
        for p in [1e-4, 0.25, 0.5, 0.9, 1.0 - 1e-4] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let z = [0.3, -1.2, 0.8];
        let g = [1.5, -0.5, 2.0];
        let analytic = softmax_backward(&softmax(z), &g);
        for i in 0..3 {
            let f = |d: f64| {
                let mut zz = z;
                zz[i] += d;
                softmax(zz).iter().zip(&g).map(|(p, g)| p * g).sum::<f64>()
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }
}
