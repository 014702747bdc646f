//! Shared fixtures for the benchmarks.

use spcl::dataio::{gen_synthetic, SyntheticConfig};
use spcl::encoder::init_params;
use spcl::rng::{Purpose, StreamRng};
use spcl::{EncoderConfig, EncoderParams, ImageGray, Tensor};

/// Desk-sized encoder with seed-0 parameters.
pub fn desk_encoder() -> (EncoderConfig, EncoderParams) {
    let cfg = EncoderConfig::default();
    let params = init_params(&cfg, &mut StreamRng::new(0, Purpose::Init, 0)).expect("default config is valid");
    (cfg, params)
}

pub fn synthetic_images(count: usize) -> Vec<ImageGray> {
    gen_synthetic(&SyntheticConfig::default(), 0, count)
        .expect("default synthetic config is valid")
        .into_iter()
        .map(|(img, _)| img)
        .collect()
}

/// `rows` Gaussian rows of width `dim`, L2-normalized.
pub fn unit_rows(rows: usize, dim: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = StreamRng::new(seed, Purpose::Data, 0);
    let data: Vec<f32> = (0..rows * dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    spcl::numeric::l2_normalize_rows(&Tensor::new(&[rows, dim], data).unwrap()).unwrap()
}
