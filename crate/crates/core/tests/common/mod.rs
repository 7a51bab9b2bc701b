#![allow(dead_code)]

pub mod cases;
pub mod oracles;

use pecas_core::rng::Rng;
use pecas_core::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}
