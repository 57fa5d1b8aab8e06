#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakseg::classifier::Architecture;
use weakseg::{ClassifierModel, ImageSample, Mask, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pixels(rng: &mut impl Rng, size: usize) -> Tensor3 {
    Tensor3::from_fn(3, size, size, |_, _, _| rng.gen_range(0.0..1.0))
}

pub fn random_sample(seed: u64, size: usize, label: u8) -> ImageSample {
    let mut r = rng(seed);
    ImageSample::new(format!("r{seed}"), random_pixels(&mut r, size), label, None).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

/// A sample whose ground truth is `gt`.
pub fn with_gt(id: &str, gt: Mask) -> ImageSample {
    let (h, w) = gt.shape();
    ImageSample::new(id, Tensor3::filled(3, h, w, 0.5), 1, Some(gt)).unwrap()
}

/// Small 32×32 architecture for fast tests.
pub fn tiny_arch() -> Architecture {
    Architecture {
        input_size: (32, 32),
        widths: vec![4, 4, 8],
        pooled_blocks: 2,
        ..Architecture::small()
    }
}

pub fn tiny_model(seed: u64) -> ClassifierModel {
    ClassifierModel::new(tiny_arch(), seed).unwrap()
}
