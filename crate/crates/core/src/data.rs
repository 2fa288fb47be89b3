//! Synthetic class-conditional latents.
//!
//! Class `k` has the mean pattern
//!
//! ```text
//! mu_k(i, j, l) = 2.5 * s(k, l) * (2 g_k(u, v) - 1)
//! g_k(u, v)     = exp(-((u - cu_k)^2 + (v - cv_k)^2) / (2 * 0.2^2))
//! u = (i + 0.5) / n,  v = (j + 0.5) / n
//! cu_k = 0.5 + 0.25 cos(theta_k),  cv_k = 0.5 + 0.25 sin(theta_k)
//! theta_k = 2 pi (k mod 8) / 8 + 0.3 floor(k / 8)
//! s(k, l) = +1 if bit (l mod 3) of k is set, else -1
//! ```
//!
//! and a sample is `clamp(mu_k + 0.1 * N(0, 1), -3, 3)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub const PATTERN_AMPLITUDE: f64 = 2.5;
pub const BUMP_SIGMA: f64 = 0.2;
pub const NOISE_STD: f64 = 0.1;
pub const CLAMP: f64 = 3.0;

fn bump_center(class_id: usize) -> (f64, f64) {
    let theta = 2.0 * PI * (class_id % 8) as f64 / 8.0 + 0.3 * (class_id / 8) as f64;
    (0.5 + 0.25 * theta.cos(), 0.5 + 0.25 * theta.sin())
}

fn channel_sign(class_id: usize, l: usize) -> f64 {
    if (class_id >> (l % 3)) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Noise-free pattern of `class_id` at `n x n x c`.
pub fn class_mean(class_id: usize, n: usize, c: usize) -> Tensor {
    let (cu, cv) = bump_center(class_id);
    let denom = 2.0 * BUMP_SIGMA * BUMP_SIGMA;
    Tensor::from_fn(n, n, c, |i, j, l| {
        let u = (i as f64 + 0.5) / n as f64;
        let v = (j as f64 + 0.5) / n as f64;
        let g = (-((u - cu).powi(2) + (v - cv).powi(2)) / denom).exp();
        PATTERN_AMPLITUDE * channel_sign(class_id, l) * (2.0 * g - 1.0)
    })
}

/// One draw from class `class_id`.
pub fn synth_sample<R: Rng + ?Sized>(rng: &mut R, class_id: usize, n: usize, c: usize) -> Tensor {
    let mut x = class_mean(class_id, n, c);
    for v in x.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + NOISE_STD * z).clamp(-CLAMP, CLAMP);
    }
    x
}

/// `h x w x c` tensor of independent standard normals.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, c: usize) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_given_seed() {
        let a = synth_sample(&mut ChaCha8Rng::seed_from_u64(5), 3, 8, 3);
        let b = synth_sample(&mut ChaCha8Rng::seed_from_u64(5), 3, 8, 3);
        assert_eq!(a, b);
        assert_eq!(a.shape(), (8, 8, 3));
    }

    #[test]
    fn entries_are_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..8 {
            let x = synth_sample(&mut rng, k, 8, 3);
            assert!(x.data().iter().all(|v| v.abs() <= CLAMP));
        }
    }
}
