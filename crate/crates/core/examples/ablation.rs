//! A small `pagf` ablation table: every arm trains on the same split with
//! the same seed. Usage: `ablation [epochs]` (default 5).

use uman::ablate::{ablate, AblationTable};
use uman::data::{generate_dataset, split, DatasetSpec};
use uman::network::NetworkConfig;
use uman::train::RunConfig;

fn main() -> uman::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let all = generate_dataset(&DatasetSpec {
        n_samples: 16,
        size: 32,
        ..DatasetSpec::default()
    })?;
    let mut base = RunConfig::default();
    base.network = NetworkConfig {
        embed_dims: [4, 8, 12, 16, 24],
        man_depths: [1, 1, 1],
        ..NetworkConfig::desk()
    };
    base.optim.epochs = epochs;
    let (train_set, val_set) = split(&all, base.train_fraction, base.optim.seed)?;
    let report = ablate(AblationTable::Pagf, &base, &train_set, &val_set, None, |r| {
        eprintln!("finished {}", r.label);
    })?;
    print!("{report}");
    Ok(())
}
