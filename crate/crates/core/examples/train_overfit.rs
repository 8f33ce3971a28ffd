//! Fits the desk-scale network to eight synthetic images. Usage:
//! `train_overfit [epochs]` (default 60; 300 reaches near-perfect IoU).

use uman::data::{generate_dataset, DatasetSpec};
use uman::train::{evaluate, train_with, RunConfig};

fn main() -> uman::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(60), |a| a.parse()).map_err(|e| uman::Error::InvalidArgument(format!("epochs: {e}")))?;
    let all = generate_dataset(&DatasetSpec {
        n_samples: 10,
        size: 64,
        seed: 7,
        ..DatasetSpec::default()
    })?;
    let (train_set, val_set) = all.split_at(8);

    let mut cfg = RunConfig::default();
    cfg.optim.epochs = epochs;
    cfg.optim.batch_size = 2;
    cfg.optim.augment = false;

    let out = train_with(&cfg, train_set, val_set, None, |e| {
        if e.epoch % 10 == 0 || e.epoch == 1 {
            println!("epoch {:>4}  train loss {:.4}  val IoU {:.4}", e.epoch, e.train_loss, e.val.iou);
        }
    })?;
    let m = evaluate(&out.last, train_set, &cfg.loss)?;
    println!("train set after {epochs} epochs: IoU {:.4}, F1 {:.4}, loss {:.4}", m.iou, m.f1, m.loss);
    println!("{}", out.report);
    Ok(())
}
