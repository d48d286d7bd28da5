//! Seed splitting and random matrix draws shared by the axiom checker and the
//! market simulator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use rand::SeedableRng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for an independent stream, e.g. one day or one trial.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`).
pub fn haar_orthogonal<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, n, n).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Log-uniform draw in `[lo, hi]`.
pub fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Spectrum of length `n` with largest value `top` and condition number
/// `cond`. Interior values sit on a jittered logarithmic grid, so consecutive
/// eigenvalues stay at least a fixed ratio apart and eigenvectors are well
/// determined.
pub fn spectrum<R: Rng>(rng: &mut R, n: usize, top: f64, cond: f64) -> Vec<f64> {
    if n == 1 {
        return vec![top];
    }
    let step = cond.ln() / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let jitter = if i == 0 || i == n - 1 {
                0.0
            } else {
                rng.random_range(-0.25..=0.25) * step
            };
            top * (-(i as f64) * step + jitter).exp()
        })
        .collect()
}

/// `Q diag(lambda) Q^T` with Haar `Q`.
pub fn random_psd<R: Rng>(rng: &mut R, eigenvalues: &[f64]) -> DMatrix<f64> {
    let q = haar_orthogonal(rng, eigenvalues.len());
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random permutation matrix.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    DMatrix::from_fn(n, n, |i, j| if idx[i] == j { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_is_orthogonal() {
        let mut r = rng(7);
        for n in 1..8 {
            let q = haar_orthogonal(&mut r, n);
            assert!((&q * q.transpose() - DMatrix::identity(n, n)).norm() < 1e-12);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }

    #[test]
    fn spectrum_has_requested_condition() {
        let mut r = rng(3);
        let s = spectrum(&mut r, 5, 2.0, 1e6);
        assert_eq!(s[0], 2.0);
        assert!((s[0] / s[4] - 1e6).abs() < 1e-3);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }
}
