use super::rng::StreamRng;
use super::tensor::Tensor;
use crate::error::NumericError;

/// `(fan_in, fan_out)` for a weight of the given shape. Matrices are laid out
/// `[in, out]`; trailing dimensions beyond two act as a receptive field.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [rows, cols] => (*rows, *cols),
        [rows, cols, rest @ ..] => {
            let field: usize = rest.iter().product();
            (rows * field, cols * field)
        }
        [] => (1, 1),
    }
}

/// Uniform Glorot initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(shape: &[usize], seed: u64, stream: u64) -> Result<Tensor, NumericError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(NumericError::BadShape {
            shape: shape.to_vec(),
            len: 0,
        });
    }
    let (fan_in, fan_out) = fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = StreamRng::new(seed, stream);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (2.0 * rng.next_f64() - 1.0) * bound).collect();
    Tensor::new(shape.to_vec(), data)
}
