//! Seeded counter-based Gaussian streams.
//!
//! Every consumer derives an independent ChaCha20 stream from `(seed, stream)`.
//! Sample `s` of a channel sample set uses stream `s`, so generation order and
//! worker count never change the drawn values.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    fn box_muller(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Unit-variance real normal.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (a, b) = self.box_muller();
        self.spare = Some(b);
        a
    }

    /// Circular complex normal with unit total variance: `(x + iy)/sqrt(2)`.
    pub fn complex_normal(&mut self) -> Complex64 {
        let (x, y) = self.box_muller();
        Complex64::new(x, y) * std::f64::consts::FRAC_1_SQRT_2
    }
}
