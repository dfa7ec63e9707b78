//! Seeded pseudo-random numbers with a stable cross-platform stream.
//!
//! The generator is splitmix64: a tiny, well-mixed 64-bit stream that needs
//! no warm-up and produces the same sequence everywhere. Gaussian samples
//! come from the Box-Muller transform with the spare value cached, so each
//! call consumes a fixed number of uniform draws and the stream stays
//! aligned across runs.

/// Deterministic pseudo-random generator (splitmix64 core).
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed, spare: None }
    }

    /// Next raw 64-bit value.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform double in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal sample via Box-Muller; the paired sample is cached.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // Map the uniform draw into (0, 1] so the log is always finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform random sign, +1.0 or -1.0.
    pub fn next_sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Matrix with i.i.d. `N(0, std^2)` entries, filled row-major.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> crate::Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.next_gaussian() * std).collect();
        crate::Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }
}
