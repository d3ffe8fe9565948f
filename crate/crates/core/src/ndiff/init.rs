use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Uniform on `[-b, b]` with `b = sqrt(6 / (rows + cols))`, deterministic per seed.
pub fn glorot_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    glorot_with(rows, cols, &mut rng)
}

pub fn glorot_with<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = glorot_bound(rows, cols);
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

pub fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_within_bound() {
        let t = glorot_init(2, 2, 7);
        let b = glorot_bound(2, 2);
        assert!((b - 1.224744871391589).abs() < 1e-12);
        assert!(t.data().iter().all(|x| x.abs() <= b));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(glorot_init(5, 3, 11), glorot_init(5, 3, 11));
        assert_ne!(glorot_init(5, 3, 11), glorot_init(5, 3, 12));
    }

    #[test]
    fn mean_is_near_zero() {
        let t = glorot_init(1000, 100, 3);
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }
}
