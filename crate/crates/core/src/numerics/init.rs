use rand::Rng;

use crate::numerics::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `rows x cols` matrix
/// (`fan_out = rows`, `fan_in = cols`).
pub fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, &[rows, cols], bound)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
