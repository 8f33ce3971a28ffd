//! Dice + binary cross-entropy training loss and overlap metrics.

use crate::error::{Error, Result};
use crate::tensor::sigmoid_scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    /// Dice smoothing term.
    pub smooth: f64,
    /// Probability threshold for binarizing predictions.
    pub threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_bce: 1.0,
            smooth: 1.0,
            threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dice >= 0.0 && self.lambda_bce >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::Config("dice smoothing must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, logits: Var, target: Var) -> Result<()> {
    if g.shape(logits) != g.shape(target) || g.shape(logits).len() != 4 {
        return Err(Error::Dimension(format!(
            "loss expects matching [N, K, H, W] logits and target, got {:?} and {:?}",
            g.shape(logits),
            g.shape(target)
        )));
    }
    Ok(())
}

/// `1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε)` per sample and class, averaged.
pub fn dice_loss(g: &mut Graph, logits: Var, target: Var, smooth: f64) -> Result<Var> {
    check_pair(g, logits, target)?;
    let sh = g.shape(logits).to_vec();
    let per = [sh[0], sh[1], 1, 1];
    let p = g.sigmoid(logits);
    let py = g.mul(p, target)?;
    let inter = g.sum_to(py, &per)?;
    let sp = g.sum_to(p, &per)?;
    let sy = g.sum_to(target, &per)?;
    let num = g.affine(inter, 2.0, smooth);
    let den = g.add(sp, sy)?;
    let den = g.affine(den, 1.0, smooth);
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio);
    Ok(g.affine(m, -1.0, 1.0))
}

/// Mean pixel-wise binary cross-entropy on logits.
pub fn bce_loss(g: &mut Graph, logits: Var, target: Var) -> Result<Var> {
    check_pair(g, logits, target)?;
    g.bce_with_logits(logits, target)
}

pub fn total_loss(g: &mut Graph, logits: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let d = dice_loss(g, logits, target, cfg.smooth)?;
    let b = bce_loss(g, logits, target)?;
    let d = g.affine(d, cfg.lambda_dice, 0.0);
    let b = g.affine(b, cfg.lambda_bce, 0.0);
    g.add(d, b)
}

/// `1` where `sigmoid(z) >= threshold`, else `0`.
pub fn binarize(logits: &Tensor, threshold: f64) -> Tensor {
    logits.map(|z| if sigmoid_scalar(z) >= threshold { 1.0 } else { 0.0 })
}

fn counts(pred: &[f64], target: &[f64]) -> (usize, usize, usize) {
    assert_eq!(pred.len(), target.len(), "mask sizes differ");
    let mut inter = 0;
    let mut np = 0;
    let mut ny = 0;
    for (&p, &y) in pred.iter().zip(target) {
        let (p, y) = (p >= 0.5, y >= 0.5);
        inter += (p && y) as usize;
        np += p as usize;
        ny += y as usize;
    }
    (inter, np, ny)
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou(pred: &[f64], target: &[f64]) -> f64 {
    let (i, p, y) = counts(pred, target);
    let union = p + y - i;
    if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    }
}

/// Dice/F1 overlap of two binary masks; two empty masks score 1.
pub fn f1(pred: &[f64], target: &[f64]) -> f64 {
    let (i, p, y) = counts(pred, target);
    if p + y == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + y) as f64
    }
}

/// Per-sample IoU and F1 of a `[N, K, H, W]` batch.
pub fn sample_metrics(logits: &Tensor, target: &Tensor, threshold: f64) -> Vec<(f64, f64)> {
    assert_eq!(logits.shape(), target.shape(), "metric shapes differ");
    let n = logits.shape()[0];
    let per = logits.len() / n.max(1);
    let pred = binarize(logits, threshold);
    pred.data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(p, y)| (iou(p, y), f1(p, y)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, LAYER_TOLERANCE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl Fn(&mut Graph, Var, Var) -> Result<Var>, z: Tensor, y: Tensor) -> f64 {
        let mut g = Graph::new();
        let z = g.constant(z);
        let y = g.constant(y);
        let l = f(&mut g, z, y).unwrap();
        g.value(l).item()
    }

    fn mask(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { 0.0 })
    }

    #[test]
    fn dice_perfect_prediction() {
        let y = mask(1, &[2, 1, 8, 8]);
        let z = y.map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        assert!(eval(|g, a, b| dice_loss(g, a, b, 1.0), z, y) < 1e-6);
    }

    #[test]
    fn dice_all_wrong_plug_in() {
        let y = Tensor::ones(&[1, 1, 16, 16]);
        let z = Tensor::full(&[1, 1, 16, 16], -60.0);
        let l = eval(|g, a, b| dice_loss(g, a, b, 1.0), z, y);
        assert!((l - (1.0 - 1.0 / 257.0)).abs() < 1e-12, "{l}");
    }

    #[test]
    fn dice_empty_mask_rescued_by_smoothing() {
        let y = Tensor::zeros(&[1, 1, 16, 16]);
        let z = Tensor::full(&[1, 1, 16, 16], -40.0);
        assert!(eval(|g, a, b| dice_loss(g, a, b, 1.0), z, y) < 1e-12);
    }

    #[test]
    fn bce_reference_values() {
        let half = eval(bce_loss, Tensor::zeros(&[1, 1, 4, 4]), mask(2, &[1, 1, 4, 4]));
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        let y = mask(3, &[1, 1, 4, 4]);
        let z = y.map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        assert!(eval(bce_loss, z, y) < 1e-8);
        let one = eval(bce_loss, Tensor::ones(&[1, 1, 1, 1]), Tensor::ones(&[1, 1, 1, 1]));
        let oracle = -(1.0 / (1.0 + (-1.0f64).exp())).ln();
        assert!((one - oracle).abs() < 1e-15);
        assert!((one - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn total_loss_weights() {
        let z = Tensor::randn(&[2, 1, 4, 4], 2.0, &mut ChaCha8Rng::seed_from_u64(4));
        let y = mask(5, &[2, 1, 4, 4]);
        let bce = eval(bce_loss, z.clone(), y.clone());
        let dice = eval(|g, a, b| dice_loss(g, a, b, 1.0), z.clone(), y.clone());
        let only = |ld, lb| {
            let cfg = LossConfig {
                lambda_dice: ld,
                lambda_bce: lb,
                ..LossConfig::default()
            };
            eval(move |g, a, b| total_loss(g, a, b, &cfg), z.clone(), y.clone())
        };
        assert_eq!(only(0.0, 1.0), bce);
        assert_eq!(only(1.0, 0.0), dice);
        assert_eq!(only(0.0, 0.0), 0.0);
    }

    #[test]
    fn total_loss_plug_in() {
        let y = Tensor::ones(&[1, 1, 16, 16]);
        let z = Tensor::zeros(&[1, 1, 16, 16]);
        let l = eval(|g, a, b| total_loss(g, a, b, &LossConfig::default()), z, y);
        let oracle = std::f64::consts::LN_2 + (1.0 - 257.0 / 385.0);
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let z = Tensor::randn(&[2, 1, 3, 3], 1.5, &mut ChaCha8Rng::seed_from_u64(6));
        let y = mask(7, &[2, 1, 3, 3]);
        let cfg = LossConfig::default();
        for (name, which) in [("dice", 0), ("bce", 1), ("total", 2)] {
            let y = y.clone();
            let e = check_fn(name, &[z.clone()], LAYER_TOLERANCE, move |g, v| {
                let t = g.constant(y.clone());
                match which {
                    0 => dice_loss(g, v[0], t, cfg.smooth),
                    1 => bce_loss(g, v[0], t),
                    _ => total_loss(g, v[0], t, &cfg),
                }
            })
            .unwrap();
            assert!(e.passed(), "{e:?}");
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let y = g.constant(Tensor::zeros(&[1, 1, 4, 2]));
        assert!(dice_loss(&mut g, z, y, 1.0).is_err());
    }

    #[test]
    fn metric_reference_cases() {
        let y = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!((iou(&y, &y), f1(&y, &y)), (1.0, 1.0));
        let p = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!((iou(&p, &y), f1(&p, &y)), (0.0, 0.0));
        let p = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert!((iou(&p, &y) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(f1(&p, &y), 0.5);
        let e = [0.0; 8];
        assert_eq!((iou(&e, &e), f1(&e, &e)), (1.0, 1.0));
    }

    #[test]
    fn binarize_uses_threshold() {
        let z = Tensor::new(&[3], vec![-0.1, 0.0, 3.0]).unwrap();
        assert_eq!(binarize(&z, 0.5).data(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize(&z, 0.9).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            threshold: 1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
