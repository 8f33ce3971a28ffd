//! Generates a seeded synthetic dataset and writes it as PPM images and PGM
//! masks. Usage: `synth_dataset [out_dir]`.

use uman::data::{generate_dataset_parallel, read_dataset, write_dataset, DatasetSpec, ShapeFamily};

fn main() -> uman::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_out".into());
    for family in [ShapeFamily::Ellipse, ShapeFamily::Blob] {
        let spec = DatasetSpec {
            n_samples: 6,
            size: 64,
            family,
            seed: 9,
            ..DatasetSpec::default()
        };
        let samples = generate_dataset_parallel(&spec, 2)?;
        let dir = std::path::Path::new(&out).join(family.as_str());
        write_dataset(&dir, &samples)?;
        for s in &samples {
            let fg = s.mask.sum() / s.mask.len() as f64;
            println!("{} {:<8} foreground {:>5.1}%", family.as_str(), s.id, 100.0 * fg);
        }
        let back = read_dataset(&dir)?;
        println!("wrote {} samples to {}; re-read {}", samples.len(), dir.display(), back.len());
    }
    Ok(())
}
