use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Scalar};

/// Seed plus the name of the generator it feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
}

impl RngSpec {
    pub const ALGORITHM: &'static str = "chacha20";

    pub fn new(seed: u64) -> Self {
        RngSpec { seed }
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Independent generator for `stream`. Weights use stream 0, inputs 1.
    pub fn generator(&self, stream: u64) -> Gaussian {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Gaussian { rng }
    }

    /// Spec for trial `i` of a repeated experiment.
    pub fn trial(&self, i: u64) -> Self {
        RngSpec {
            seed: self.seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }
}

pub struct Gaussian {
    rng: ChaCha20Rng,
}

impl Gaussian {
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.rng.random_range(0..n)
    }

    /// Matrix with i.i.d. `N(0, std²)` entries, drawn row by row.
    pub fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::from_f64(self.normal() * std))
    }

    /// Haar-distributed orthogonal `n×n` matrix (Gram-Schmidt on a Gaussian).
    pub fn orthogonal(&mut self, n: usize) -> Matrix<f64> {
        loop {
            let g: Matrix<f64> = self.matrix(n, n, 1.0);
            let mut q = Matrix::zeros(n, n);
            let mut ok = true;
            for j in 0..n {
                let mut v = g.column(j);
                for k in 0..j {
                    let qk = q.column(k);
                    let proj: f64 = v.iter().zip(&qk).map(|(a, b)| a * b).sum();
                    for (vi, qi) in v.iter_mut().zip(&qk) {
                        *vi -= proj * qi;
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-8 {
                    ok = false;
                    break;
                }
                for (i, vi) in v.iter().enumerate() {
                    q[(i, j)] = vi / norm;
                }
            }
            if ok {
                return q;
            }
        }
    }
}
