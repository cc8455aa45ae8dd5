//! Dense vector kernels over flat parameter vectors and seeded random streams.
//!
//! Reductions accumulate in index order so results never depend on scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Flat model parameter (or gradient) vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Errors if any entry is NaN or infinite.
    pub fn ensure_finite(&self, context: impl FnOnce() -> String) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(context()))
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc + v * v)
    }

    /// In-place `self += alpha * x`.
    pub fn add_scaled(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        check_len(self, x)?;
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.0 {
            *v *= alpha;
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len(self, other)?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Largest coordinate-wise absolute difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        check_len(self, other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        })
    }
}

pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a, b)?;
    Ok(a.0.iter().zip(&b.0).fold(0.0, |acc, (x, y)| acc + x * y))
}

/// Returns `y + alpha * x`; the inputs are untouched.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    check_len(x, y)?;
    Ok(ParamVector(
        x.0.iter().zip(&y.0).map(|(xv, yv)| yv + alpha * xv).collect(),
    ))
}

pub fn l2norm(v: &ParamVector) -> f64 {
    v.squared_norm().sqrt()
}

/// Well-known stream identifiers. Client streams use the client index directly.
pub mod streams {
    pub const SERVER_SAMPLING: u64 = 1 << 40;
    pub const FIXED_POINT_BATCHES: u64 = 2 << 40;
    pub const LOCAL_TRAINING: u64 = 3 << 40;
    pub const RATE_BATCHES: u64 = 4 << 40;
    pub const PARTITION: u64 = 5 << 40;
    pub const SYNTHETIC: u64 = 6 << 40;
    pub const BOUND_PROBES: u64 = 7 << 40;
    pub const SPLIT: u64 = 8 << 40;
}

/// Seeded random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha12 with the stream id placed in the cipher's stream word, so
/// two streams with different ids never share state and each one replays
/// bit-identically no matter which order streams are created or consumed in.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream keyed by `(stream_id, sub)`.
    pub fn derive(&self, sub: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream_id ^ mix(sub)))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in ascending order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates over the prefix
        for i in 0..k.min(n) {
            let j = self.rng.random_range(i..n);
            all.swap(i, j);
        }
        all.truncate(k.min(n));
        all.sort_unstable();
        all
    }

    /// Uniformly distributed direction on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> ParamVector {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-300 {
                return ParamVector(v.into_iter().map(|x| x / n).collect());
            }
        }
    }

    pub(crate) fn rng_mut(&mut self) -> &mut impl RngCore {
        &mut self.rng
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_vec(rng: &mut RngStream, n: usize) -> ParamVector {
        ParamVector::new((0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
    }

    #[test]
    fn dot_annihilator_and_identity() {
        let mut rng = RngStream::new(1, 0);
        let x = random_vec(&mut rng, 7);
        assert_eq!(dot(&ParamVector::zeros(7), &x).unwrap(), 0.0);
        let e1 = ParamVector::new(vec![1.0, 0.0, 0.0]);
        assert_eq!(dot(&e1, &e1).unwrap(), 1.0);
    }

    #[test]
    fn dot_matches_naive_loop() {
        let mut rng = RngStream::new(7, 3);
        let a = random_vec(&mut rng, 1000);
        let b = random_vec(&mut rng, 1000);
        let mut naive = 0.0;
        for i in 0..1000 {
            naive += a.as_slice()[i] * b.as_slice()[i];
        }
        let got = dot(&a, &b).unwrap();
        assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1e-300));
    }

    #[test]
    fn dot_rejects_mismatched_lengths() {
        let err = dot(&ParamVector::zeros(3), &ParamVector::zeros(4)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn axpy_cases() {
        let x = ParamVector::new(vec![2.0, 4.0]);
        let y = ParamVector::new(vec![1.0, 1.0]);
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(axpy(1.0, &x, &ParamVector::zeros(2)).unwrap(), x);
        assert_eq!(
            axpy(-0.5, &x, &y).unwrap(),
            ParamVector::new(vec![0.0, -1.0])
        );
        assert!(axpy(1.0, &x, &ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn l2norm_cases() {
        assert_eq!(l2norm(&ParamVector::zeros(5)), 0.0);
        assert_eq!(l2norm(&ParamVector::new(vec![3.0, 4.0])), 5.0);
        let mut rng = RngStream::new(9, 9);
        let v = random_vec(&mut rng, 321);
        let oracle = dot(&v, &v).unwrap().sqrt();
        assert!((l2norm(&v) - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn streams_replay_identically() {
        let mut a = RngStream::new(42, 5);
        let mut b = RngStream::new(42, 5);
        for _ in 0..10_000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn streams_are_order_independent() {
        // Interleaving consumption of two streams must not change either one.
        let mut a = RngStream::new(42, 1);
        let mut b = RngStream::new(42, 2);
        let interleaved: Vec<(f64, f64)> = (0..100).map(|_| (a.uniform(), b.uniform())).collect();
        let mut a2 = RngStream::new(42, 1);
        let a_only: Vec<f64> = (0..100).map(|_| a2.uniform()).collect();
        let mut b2 = RngStream::new(42, 2);
        let b_only: Vec<f64> = (0..100).map(|_| b2.uniform()).collect();
        for (i, (x, y)) in interleaved.iter().enumerate() {
            assert_eq!(*x, a_only[i]);
            assert_eq!(*y, b_only[i]);
        }
        assert_ne!(a_only, b_only);
    }

    #[test]
    fn sample_without_replacement_is_distinct_sorted() {
        let mut rng = RngStream::new(3, 3);
        let s = rng.sample_without_replacement(100, 20);
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn dot_is_symmetric(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 0..64)) {
            let a = ParamVector::new(v.iter().map(|p| p.0).collect());
            let b = ParamVector::new(v.iter().map(|p| p.1).collect());
            prop_assert_eq!(dot(&a, &b).unwrap().to_bits(), dot(&b, &a).unwrap().to_bits());
        }

        #[test]
        fn norm_squared_matches_dot(v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let a = ParamVector::new(v);
            let d = dot(&a, &a).unwrap();
            let n = l2norm(&a);
            prop_assert!((n * n - d).abs() <= 1e-12 * d.max(1e-300));
        }
    }
}
