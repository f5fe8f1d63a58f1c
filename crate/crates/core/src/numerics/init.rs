//! Parameter initializers. All draws happen in f64 and are then narrowed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Element, Tensor};

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

/// Normal with std `sqrt(2 / fan_out)`, where `fan_out = out_channels · kh · kw`.
pub fn kaiming_normal_fan_out<T: Element, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let fan_out: usize = shape[0] * shape[2..].iter().product::<usize>();
    let std = (2.0 / fan_out as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}
