use super::{NumericsError, Result, Scalar, Tensor};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator with a cached Box-Muller normal transform.
///
/// The state advances by a fixed odd increment (a Weyl counter) and each
/// output is the counter passed through two xor-shift/multiply rounds. Only
/// wrapping integer arithmetic is involved, so sequences are identical on
/// every platform. Normals come in pairs from
/// `sqrt(-2 ln u1) · (cos 2πu2, sin 2πu2)` with `u1 ∈ (0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent generator for a named sub-stream; the parent is not advanced.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut mix = Self::new(seed ^ stream.wrapping_mul(GOLDEN_GAMMA).rotate_left(17));
        let s = mix.next_u64() ^ stream;
        Self::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (unbiased, by rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Tensor of i.i.d. `N(0, std²)` entries.
    pub fn normal_tensor<S: Scalar>(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Result<Tensor<S>> {
        Tensor::from_fn(shape, |_| S::lit(self.normal() * std))
    }
}

/// `n × dim` matrix of standard normal latents.
pub fn sample_latents<S: Scalar>(rng: &mut Rng, n: usize, dim: usize) -> Result<Tensor<S>> {
    if n == 0 || dim == 0 {
        return Err(NumericsError::invalid(
            "sample_latents",
            format!("need n, dim >= 1 (got n={n}, dim={dim})"),
        ));
    }
    rng.normal_tensor(vec![n, dim], 1.0)
}
