//! Seeded synthetic lesion-on-background images with analytic masks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::SegmentationSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Blob,
}

impl ShapeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Blob => "blob",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeFamily::Ellipse),
            "blob" => Ok(ShapeFamily::Blob),
            _ => Err(Error::InvalidArgument(format!("unknown shape family `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_samples: usize,
    /// Image height and width.
    pub size: usize,
    pub family: ShapeFamily,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Range of the foreground intensity offset.
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 64,
            size: 64,
            family: ShapeFamily::Ellipse,
            noise: 0.08,
            contrast: (0.25, 0.45),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 5 {
            return Err(Error::Config("a dataset needs at least 5 samples".into()));
        }
        if self.size < 32 {
            return Err(Error::Config("image size must be at least 32".into()));
        }
        if !(self.noise >= 0.0) || !(self.contrast.0 <= self.contrast.1) {
            return Err(Error::Config("noise must be >= 0 and the contrast range ordered".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; mixes `seed` and `index` into an independent stream seed.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e9b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One foreground region in pixel coordinates.
///
/// Centres are multiples of 1/16 so that 90 degree rotations of the
/// parameters are exact in floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Orientation of the principal axes within one quarter turn.
    pub angle: f64,
    /// Extra whole quarter turns, applied exactly.
    pub quarter_turns: u8,
    /// Radial harmonics `(k, amplitude, phase)`; empty for an ellipse.
    pub harmonics: Vec<(u32, f64, f64)>,
}

impl Shape {
    /// Whether the point `(x, y)` lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (mut dx, mut dy) = (x - self.cx, y - self.cy);
        for _ in 0..self.quarter_turns % 4 {
            (dx, dy) = (-dy, dx);
        }
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let q = (u / self.rx).powi(2) + (v / self.ry).powi(2);
        if self.harmonics.is_empty() {
            return q <= 1.0;
        }
        let phi = v.atan2(u);
        let scale: f64 = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(k, a, p)| a * (k as f64 * phi + p).cos())
                .sum::<f64>();
        q <= scale * scale
    }

    /// Parameters of this shape after rotating a `size x size` image by 90
    /// degrees counter-clockwise.
    pub fn rotate90(&self, size: usize) -> Shape {
        Shape {
            cx: self.cy,
            cy: size as f64 - self.cx,
            quarter_turns: (self.quarter_turns + 1) % 4,
            ..self.clone()
        }
    }
}

/// Everything needed to render one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shapes: Vec<Shape>,
    pub background: [f64; 3],
    /// Per-channel foreground offset.
    pub offset: [f64; 3],
    pub noise_seed: u64,
}

fn dyadic(v: f64) -> f64 {
    (v * 16.0).round() / 16.0
}

impl Scene {
    pub fn sample(spec: &DatasetSpec, index: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index as u64));
        let s = spec.size as f64;
        let count = rng.random_range(1..=3);
        let shapes = (0..count)
            .map(|_| {
                let cx = dyadic(rng.random_range(0.25..0.75) * s);
                let cy = dyadic(rng.random_range(0.25..0.75) * s);
                let (lo, hi) = match spec.family {
                    ShapeFamily::Ellipse => (0.10, 0.22),
                    ShapeFamily::Blob => (0.13, 0.22),
                };
                let rx = rng.random_range(lo..hi) * s;
                let ry = rng.random_range(lo..hi) * s;
                let angle = rng.random_range(0.0..PI / 2.0);
                let harmonics = match spec.family {
                    ShapeFamily::Ellipse => Vec::new(),
                    ShapeFamily::Blob => (0..rng.random_range(2..=4))
                        .map(|_| {
                            (
                                rng.random_range(2..=5),
                                rng.random_range(0.0..0.08),
                                rng.random_range(0.0..2.0 * PI),
                            )
                        })
                        .collect(),
                };
                Shape {
                    cx,
                    cy,
                    rx,
                    ry,
                    angle,
                    quarter_turns: 0,
                    harmonics,
                }
            })
            .collect();
        let base = rng.random_range(0.25..0.45);
        let background = [0, 1, 2].map(|_| base + rng.random_range(-0.05..0.05));
        let c = if spec.contrast.0 < spec.contrast.1 {
            rng.random_range(spec.contrast.0..spec.contrast.1)
        } else {
            spec.contrast.0
        };
        let offset = [0, 1, 2].map(|_| c * rng.random_range(0.85..1.0));
        Scene {
            shapes,
            background,
            offset,
            noise_seed: rng.random(),
        }
    }

    /// `[1, size, size]` analytic membership at pixel centres.
    pub fn mask(&self, size: usize) -> Tensor {
        Tensor::from_fn(&[1, size, size], |i| {
            let (r, c) = (i / size, i % size);
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            self.shapes.iter().any(|sh| sh.contains(x, y)) as u8 as f64
        })
    }

    /// Noise-free `[3, size, size]` image.
    pub fn clean_image(&self, mask: &Tensor) -> Tensor {
        let hw = mask.len();
        Tensor::from_fn(&[3, mask.shape()[1], mask.shape()[2]], |i| {
            let (ch, p) = (i / hw, i % hw);
            (self.background[ch] + self.offset[ch] * mask.data()[p]).clamp(0.0, 1.0)
        })
    }

    pub fn render(&self, spec: &DatasetSpec, id: String) -> SegmentationSample {
        let mask = self.mask(spec.size);
        let mut image = self.clean_image(&mask);
        if spec.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            for v in image.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + spec.noise * n).clamp(0.0, 1.0);
            }
        }
        SegmentationSample { id, image, mask }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

pub fn generate_sample(spec: &DatasetSpec, index: usize) -> SegmentationSample {
    Scene::sample(spec, index).render(spec, sample_id(index))
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SegmentationSample>> {
    generate_dataset_parallel(spec, 1)
}

/// Same output as [`generate_dataset`] for any worker count.
pub fn generate_dataset_parallel(spec: &DatasetSpec, workers: usize) -> Result<Vec<SegmentationSample>> {
    spec.validate()?;
    let workers = workers.clamp(1, spec.n_samples);
    if workers == 1 {
        return Ok((0..spec.n_samples).map(|i| generate_sample(spec, i)).collect());
    }
    let mut out: Vec<Option<SegmentationSample>> = vec![None; spec.n_samples];
    let chunk = spec.n_samples.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slots) in out.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(generate_sample(spec, w * chunk + j));
                }
            });
        }
    });
    Ok(out.into_iter().map(|s| s.expect("every slot filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::augment::rot90;

    #[test]
    fn generation_is_deterministic_across_workers() {
        let spec = DatasetSpec {
            n_samples: 11,
            size: 32,
            ..DatasetSpec::default()
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        let c = generate_dataset_parallel(&spec, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn foreground_fraction_in_range() {
        for family in [ShapeFamily::Ellipse, ShapeFamily::Blob] {
            let spec = DatasetSpec {
                n_samples: 100,
                family,
                ..DatasetSpec::default()
            };
            for s in generate_dataset(&spec).unwrap() {
                let frac = s.mask.sum() / s.mask.len() as f64;
                assert!((0.02..=0.6).contains(&frac), "{family} {}: {frac}", s.id);
            }
        }
    }

    #[test]
    fn noiseless_sample_is_clean_rendering() {
        let spec = DatasetSpec {
            noise: 0.0,
            contrast: (1.0, 1.0),
            n_samples: 5,
            size: 32,
            ..DatasetSpec::default()
        };
        let scene = Scene::sample(&spec, 3);
        let s = scene.render(&spec, "x".into());
        let mut ellipse_mask = Tensor::zeros(&[1, 32, 32]);
        for r in 0..32 {
            for c in 0..32 {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let inside = scene.shapes.iter().any(|sh| {
                    let (dx, dy) = (x - sh.cx, y - sh.cy);
                    let (sn, cs) = sh.angle.sin_cos();
                    let u = cs * dx + sn * dy;
                    let v = -sn * dx + cs * dy;
                    (u / sh.rx).powi(2) + (v / sh.ry).powi(2) <= 1.0
                });
                ellipse_mask.set(&[0, r, c], inside as u8 as f64);
            }
        }
        assert_eq!(s.mask, ellipse_mask);
        assert_eq!(s.image, scene.clean_image(&s.mask));
        for ch in 0..3 {
            let fg = scene.background[ch] + scene.offset[ch];
            for p in 0..32 * 32 {
                let expect = if s.mask.data()[p] == 1.0 { fg.min(1.0) } else { scene.background[ch] };
                assert_eq!(s.image.data()[ch * 1024 + p], expect);
            }
        }
    }

    #[test]
    fn rotated_parameters_give_rotated_mask() {
        for family in [ShapeFamily::Ellipse, ShapeFamily::Blob] {
            let spec = DatasetSpec {
                family,
                size: 48,
                ..DatasetSpec::default()
            };
            for i in 0..20 {
                let mut scene = Scene::sample(&spec, i);
                let mut mask = scene.mask(48);
                for _ in 0..4 {
                    scene.shapes = scene.shapes.iter().map(|s| s.rotate90(48)).collect();
                    mask = rot90(&mask);
                    assert_eq!(scene.mask(48), mask);
                }
            }
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| sample_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec { n_samples: 4, ..DatasetSpec::default() }.validate().is_err());
        assert!(DatasetSpec { size: 16, ..DatasetSpec::default() }.validate().is_err());
        assert!(DatasetSpec::default().validate().is_ok());
    }
}
