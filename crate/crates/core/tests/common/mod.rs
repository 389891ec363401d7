//! Test-only oracles shared by the integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

use lightformer::autograd::Parameter;
use lightformer::{Result, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms; central differences carry ~1e-10 absolute noise.
pub const FD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error between backprop gradients and central finite
/// differences, over every element of every parameter.
///
/// `loss` must rebuild the graph from the current parameter values.
pub fn max_gradcheck_error(params: &[Parameter], loss: &mut dyn FnMut() -> Result<Tensor>) -> (f64, String) {
    for p in params {
        p.value.zero_grad();
    }
    loss().unwrap().backward().unwrap();
    let analytic: Vec<Vec<f64>> =
        params.iter().map(|p| p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()])).collect();

    let mut worst = (0.0, String::new());
    for (p, grad) in params.iter().zip(&analytic) {
        for idx in 0..p.value.numel() {
            let original = p.value.data()[idx];
            p.value.data_mut().unwrap()[idx] = original + FD_STEP;
            let plus = loss().unwrap().item().unwrap();
            p.value.data_mut().unwrap()[idx] = original - FD_STEP;
            let minus = loss().unwrap().item().unwrap();
            p.value.data_mut().unwrap()[idx] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(grad[idx], numeric);
            if err > worst.0 {
                worst = (err, format!("{}[{idx}]: analytic {} numeric {numeric}", p.name, grad[idx]));
            }
        }
    }
    for p in params {
        p.value.zero_grad();
    }
    worst
}

/// Tiny deterministic generator for test inputs (SplitMix64).
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.uniform()).collect()
    }
}

pub fn leaf(rng: &mut TestRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::leaf(shape, rng.vec(n)).unwrap()
}

/// Naive boolean matrix product `a · b`.
pub fn bool_product(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).any(|k| a[i][k] && b[k][j])).collect()).collect()
}
