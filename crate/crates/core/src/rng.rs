//! Seeded, splittable random streams.
//!
//! A stream is ChaCha8 keyed by `seed` with the cipher's 64-bit stream
//! selector set to `stream_id`, so distinct ids give independent sequences
//! and a replay of `(seed, stream_id)` is bit-identical.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream keyed by a label path, e.g. `[TAG, iter, task]`.
    pub fn derived(seed: u64, labels: &[u64]) -> Self {
        Self::new(seed, stream_label(labels))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in the open interval (0, 1), 53 bits of resolution.
    pub fn uniform_open(&mut self) -> f64 {
        let bits = self.inner.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_open()
    }

    pub fn std_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Standard Gumbel draw `-ln(-ln U)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn sample_uniform<T: Real>(&mut self, n: usize) -> Tensor<T> {
        Tensor::from_vec((0..n).map(|_| open_unit::<T>(self.uniform_open())).collect())
    }

    pub fn sample_std_normal<T: Real>(&mut self, n: usize) -> Tensor<T> {
        Tensor::from_vec((0..n).map(|_| T::lit(self.std_normal())).collect())
    }

    pub fn sample_gumbel<T: Real>(&mut self, n: usize) -> Tensor<T> {
        Tensor::from_vec((0..n).map(|_| T::lit(self.gumbel())).collect())
    }
}

// f32 rounding can push 1 - 2^-54 onto 1.0.
fn open_unit<T: Real>(u: f64) -> T {
    let v = T::lit(u);
    let half_eps = T::epsilon() / T::lit(2.0);
    if v >= T::one() {
        T::one() - half_eps
    } else if v <= T::zero() {
        half_eps
    } else {
        v
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a label path into a stream id.
pub fn stream_label(labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(0x5157_4C57_4D45_5441u64, |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_is_identical() {
        let a: Tensor<f64> = RngStream::new(42, 0).sample_uniform(64);
        let b: Tensor<f64> = RngStream::new(42, 0).sample_uniform(64);
        assert!(a.bit_eq(&b));
        let c: Tensor<f64> = RngStream::new(42, 1).sample_uniform(64);
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn uniform_mean() {
        let u: Tensor<f64> = RngStream::new(7, 3).sample_uniform(100_000);
        let m = u.mean();
        assert!((0.49..=0.51).contains(&m), "mean {m}");
        assert!(u.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn normal_variance() {
        let z: Tensor<f64> = RngStream::new(11, 5).sample_std_normal(100_000);
        let m = z.mean();
        let var = z.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (z.len() - 1) as f64;
        assert!((0.98..=1.02).contains(&var), "var {var}");
    }

    #[test]
    fn f32_uniform_stays_open() {
        assert!(open_unit::<f32>(1.0 - 1e-17) < 1.0);
        assert!(open_unit::<f32>(1e-300) > 0.0);
        let g: Tensor<f32> = RngStream::new(1, 1).sample_gumbel(10_000);
        assert!(g.all_finite());
    }

    #[test]
    fn labels_separate_streams() {
        assert_ne!(stream_label(&[1, 2]), stream_label(&[2, 1]));
        assert_ne!(stream_label(&[0]), stream_label(&[0, 0]));
    }
}
