use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use super::NumericsError;

/// Deterministic labelled random stream.
///
/// The ChaCha key is derived from `(seed, label)`, and the stream position is
/// the draw counter: every uniform or integer draw consumes one 64-bit word,
/// every normal draw two. Streams for parallel work are split by label, never
/// shared.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    counter: u64,
    core: ChaCha12Rng,
}

fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"pmsacl-rng\0");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            seed,
            label: label.to_string(),
            counter: 0,
            core: ChaCha12Rng::from_seed(derive_key(seed, label)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of 64-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Child stream keyed by `label/sub`.
    pub fn split(&self, sub: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.label, sub))
    }

    pub fn split_indexed(&self, sub: &str, index: u64) -> Self {
        Self::new(self.seed, &format!("{}/{}#{}", self.label, sub, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.core.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; consumes two words.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `lo..hi` by 128-bit multiply-high.
    pub fn integer(&mut self, lo: i64, hi: i64) -> Result<i64, NumericsError> {
        if hi <= lo {
            return Err(NumericsError::EmptyRange { lo, hi });
        }
        let span = (hi - lo) as u64;
        let r = ((self.next_u64() as u128 * span as u128) >> 64) as u64;
        Ok(lo + r as i64)
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.integer(0, n as i64).expect("non-empty index range") as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_label_repeat() {
        let mut a = RngStream::new(7, "aug");
        let mut b = RngStream::new(7, "aug");
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn labels_differ() {
        let mut a = RngStream::new(7, "aug");
        let mut b = RngStream::new(7, "init");
        let va: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
        assert_eq!(va.iter().zip(&vb).filter(|(x, y)| x == y).count(), 0);
    }

    #[test]
    fn counter_advance_is_fixed() {
        let mut r = RngStream::new(1, "c");
        r.uniform();
        assert_eq!(r.counter(), 1);
        r.normal();
        assert_eq!(r.counter(), 3);
        r.integer(0, 4).unwrap();
        assert_eq!(r.counter(), 4);
    }

    #[test]
    fn counter_position_is_stream_position() {
        // Drawing a normal is the same as drawing two uniforms.
        let mut a = RngStream::new(3, "x");
        let mut b = RngStream::new(3, "x");
        a.normal();
        b.uniform();
        b.uniform();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn empty_integer_range() {
        let mut r = RngStream::new(1, "c");
        assert!(matches!(r.integer(3, 3), Err(NumericsError::EmptyRange { .. })));
    }

    #[test]
    fn integer_classes_within_three_sigma() {
        let n = 100_000usize;
        let mut r = RngStream::new(11, "hist");
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[r.integer(0, 4).unwrap() as usize] += 1;
        }
        // Binomial(n, 1/4): sigma = sqrt(n p (1-p)).
        let mean = n as f64 * 0.25;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(5, "n");
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.02 && (v - 1.0).abs() < 0.03, "{m} {v}");
    }

    #[test]
    fn uniform_bounds() {
        let mut r = RngStream::new(2, "u");
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
