//! Geometric augmentation (90 degree rotations and flips) and fixed
//! normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SegmentationSample;
use crate::tensor::Tensor;

pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.5;

/// Rotates every channel of `[C, H, W]` by 90 degrees counter-clockwise.
pub fn rot90(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = x.data();
    // new[r][col] = old[col][w - 1 - r], new shape [C, W, H]
    Tensor::from_fn(&[c, w, h], |i| {
        let ch = i / (w * h);
        let r = (i / h) % w;
        let col = i % h;
        src[ch * h * w + col * w + (w - 1 - r)]
    })
}

/// Mirrors left to right.
pub fn hflip(x: &Tensor) -> Tensor {
    let w = x.shape()[2];
    let src = x.data();
    Tensor::from_fn(x.shape(), |i| {
        let col = i % w;
        src[i - col + (w - 1 - col)]
    })
}

/// Mirrors top to bottom.
pub fn vflip(x: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let src = x.data();
    Tensor::from_fn(x.shape(), |i| {
        let plane = i / (h * w);
        let r = (i / w) % h;
        let col = i % w;
        src[plane * h * w + (h - 1 - r) * w + col]
    })
}

/// `(x - 0.5) / 0.5` on every pixel.
pub fn normalize(x: &Tensor) -> Tensor {
    x.map(|v| (v - NORM_MEAN) / NORM_STD)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            quarter_turns: rng.random_range(0..4),
            hflip: rng.random(),
            vflip: rng.random(),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for _ in 0..self.quarter_turns {
            y = rot90(&y);
        }
        if self.hflip {
            y = hflip(&y);
        }
        if self.vflip {
            y = vflip(&y);
        }
        y
    }
}

/// Applies one geometric transform to image and mask alike. No normalization.
pub fn transform_sample(s: &SegmentationSample, t: Transform) -> SegmentationSample {
    SegmentationSample {
        id: s.id.clone(),
        image: t.apply(&s.image),
        mask: t.apply(&s.mask),
    }
}

/// Random rotation/flip chosen by `seed`, then normalization of the image.
pub fn augment(s: &SegmentationSample, seed: u64) -> SegmentationSample {
    let mut out = transform_sample(s, Transform::from_seed(seed));
    out.image = normalize(&out.image);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_sample, DatasetSpec};

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn rot90_small_case() {
        // [[0,1],[2,3]] rotated counter-clockwise is [[1,3],[0,2]]
        let y = rot90(&ramp(1, 2, 2));
        assert_eq!(y.data(), &[1.0, 3.0, 0.0, 2.0]);
        let r = rot90(&ramp(1, 2, 3));
        assert_eq!(r.shape(), &[1, 3, 2]);
        assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn four_rotations_and_double_flips_are_identity() {
        let x = ramp(2, 5, 5);
        let mut y = x.clone();
        for _ in 0..4 {
            y = rot90(&y);
        }
        assert_eq!(y, x);
        assert_eq!(hflip(&hflip(&x)), x);
        assert_eq!(vflip(&vflip(&x)), x);
        assert_ne!(hflip(&x), x);
    }

    #[test]
    fn identity_seed_only_normalizes() {
        let seed = (0..).find(|s| Transform::from_seed(*s).is_identity()).unwrap();
        let s = generate_sample(&DatasetSpec::default(), 0);
        let a = augment(&s, seed);
        assert_eq!(a.mask, s.mask);
        assert_eq!(a.image, normalize(&s.image));
    }

    #[test]
    fn augmentation_keeps_mask_binary_and_count() {
        let s = generate_sample(&DatasetSpec::default(), 1);
        for seed in 0..50 {
            let a = augment(&s, seed);
            assert!(a.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
            assert_eq!(a.mask.sum(), s.mask.sum());
        }
    }
}
