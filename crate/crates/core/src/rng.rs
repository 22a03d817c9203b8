//! Seeded random streams and the complex Gaussian draws used throughout.

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

/// Root stream for a seed.
pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `index` of `seed`. Trials running in parallel each
/// take their own sub-stream so results do not depend on scheduling.
pub fn substream(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// One circularly-symmetric CN(0, 1) sample.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex<f64> {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// `rows x cols` matrix of i.i.d. CN(0, 1) entries, filled column-major.
pub fn complex_normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DMatrix<Complex<f64>> {
    DMatrix::from_fn(rows, cols, |_, _| complex_normal(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_and_repeat() {
        let a: u64 = substream(7, 0).random();
        let b: u64 = substream(7, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, substream(7, 0).random::<u64>());
    }

    #[test]
    fn complex_normal_has_unit_power() {
        let mut rng = seeded(1);
        let n = 200_000;
        let p: f64 = (0..n).map(|_| complex_normal(&mut rng).norm_sqr()).sum::<f64>() / n as f64;
        assert!((p - 1.0).abs() < 0.01, "{p}");
    }
}
