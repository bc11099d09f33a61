#![allow(dead_code)]

pub mod gradsuite;
pub mod invariants;
pub mod reference;

use fvlab::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn normal_vec(rng: &mut impl Rng, n: usize, sigma: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, sigma).unwrap();
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], sigma: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, sigma)).unwrap()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
