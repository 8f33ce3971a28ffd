//! Saves a model, reloads it into a fresh one and shows that predictions
//! match bit for bit; a truncated file is rejected.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uman::checkpoint;
use uman::network::{Model, NetworkConfig};
use uman::Tensor;

fn main() -> uman::Result<()> {
    let cfg = NetworkConfig::desk();
    let mut trained = Model::new(&cfg, 1)?;
    trained.params.round_to_f32();
    let dir = std::env::temp_dir().join("uman_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.bin");
    checkpoint::save(&path, &trained)?;

    let mut fresh = Model::new(&cfg, 99)?;
    checkpoint::load_into(&path, &mut fresh)?;
    let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let a = trained.predict(&x, false)?;
    let b = fresh.predict(&x, false)?;
    println!("{} bytes, predictions identical: {}", std::fs::metadata(&path)?.len(), a == b);

    let bytes = std::fs::read(&path)?;
    std::fs::write(&path, &bytes[..bytes.len() - 7])?;
    match checkpoint::load_into(&path, &mut fresh) {
        Ok(()) => println!("unexpected: truncated checkpoint loaded"),
        Err(e) => println!("truncated checkpoint rejected: {e}"),
    }
    Ok(())
}
