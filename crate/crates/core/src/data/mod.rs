//! Segmentation samples: synthetic generation, augmentation, splitting,
//! batching and on-disk datasets.

pub mod augment;
pub mod pnm;
pub mod synth;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, normalize, Transform};
pub use synth::{generate_dataset, generate_dataset_parallel, DatasetSpec, ShapeFamily};

/// An image in `[0, 1]` (`[3, H, W]`) with its binary mask (`[1, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl SegmentationSample {
    pub fn validate(&self) -> Result<()> {
        let (i, m) = (self.image.shape(), self.mask.shape());
        if i.len() != 3 || m.len() != 3 || m[0] != 1 || i[1..] != m[1..] {
            return Err(Error::Dimension(format!(
                "sample {}: image {i:?} and mask {m:?} disagree",
                self.id
            )));
        }
        if !self.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0) {
            return Err(Error::Format(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

/// Number of training samples for `n` items at `fraction`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1)
}

/// Seeded shuffle into `ceil(fraction * n)` training and the rest validation.
pub fn split<T: Clone>(samples: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("split needs at least 2 samples".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = train_count(samples.len(), fraction);
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..k]), pick(&order[k..])))
}

/// Stacks images and masks into `[N, 3, H, W]` and `[N, 1, H, W]`.
pub fn stack(samples: &[&SegmentationSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot batch zero samples".into()))?;
    let mut image = Vec::with_capacity(samples.len() * first.image.len());
    let mut mask = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != first.image.shape() || s.mask.shape() != first.mask.shape() {
            return Err(Error::Dimension(format!(
                "sample {} has a different shape from {}",
                s.id, first.id
            )));
        }
        image.extend_from_slice(s.image.data());
        mask.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    let mut ishape = vec![n];
    ishape.extend_from_slice(first.image.shape());
    let mut mshape = vec![n];
    mshape.extend_from_slice(first.mask.shape());
    Ok((Tensor::new(&ishape, image)?, Tensor::new(&mshape, mask)?))
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.txt` under `root`.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[SegmentationSample]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut manifest = String::new();
    for s in samples {
        s.validate()?;
        if s.id.is_empty() || s.id.contains(['/', '\\', '\n']) {
            return Err(Error::InvalidArgument(format!("unusable sample id `{}`", s.id)));
        }
        pnm::write_ppm(root.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        pnm::write_pgm(root.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; masks are thresholded at 0.5.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<SegmentationSample>> {
    let root = root.as_ref();
    let manifest = fs::read_to_string(root.join("manifest.txt"))?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let image = pnm::read_ppm(root.join("images").join(format!("{id}.ppm")))?;
            let mask = pnm::read_pgm(root.join("masks").join(format!("{id}.pgm")))?
                .map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let s = SegmentationSample {
                id: id.to_string(),
                image,
                mask,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        for (n, t) in [(5, 4), (100, 80), (647, 518), (2, 1)] {
            let v: Vec<usize> = (0..n).collect();
            let (a, b) = split(&v, 0.8, 1).unwrap();
            assert_eq!((a.len(), b.len()), (t, n - t), "n={n}");
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            assert_eq!(all, v);
        }
    }

    #[test]
    fn split_is_seeded() {
        let v: Vec<usize> = (0..50).collect();
        assert_eq!(split(&v, 0.8, 3).unwrap(), split(&v, 0.8, 3).unwrap());
        assert_ne!(split(&v, 0.8, 3).unwrap(), split(&v, 0.8, 4).unwrap());
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        assert!(split(&[1], 0.8, 0).is_err());
        assert!(split(&[1, 2, 3], 1.0, 0).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_samples: 5,
            size: 32,
            ..DatasetSpec::default()
        };
        let samples = generate_dataset(&spec).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 510.0 + 1e-15);
        }
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 5);
    }

    #[test]
    fn stack_builds_batches() {
        let spec = DatasetSpec {
            n_samples: 5,
            size: 32,
            ..DatasetSpec::default()
        };
        let s = generate_dataset(&spec).unwrap();
        let (x, y) = stack(&[&s[0], &s[3]]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert_eq!(&x.data()[3 * 1024..], s[3].image.data());
    }
}
