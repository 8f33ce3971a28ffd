//! Attention-gated skip fusion in each ablation mode, with the attention and
//! gate statistics of the full module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uman::pagf::{Pagf, PagfMode};
use uman::params::{BufferStore, Builder, ParameterStore, Session};
use uman::Tensor;

fn stats(t: &Tensor) -> String {
    let (lo, hi) = t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    format!("min {lo:.3} mean {:.3} max {hi:.3}", t.sum() / t.len() as f64)
}

fn main() -> uman::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let decoder = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng);
    let encoder = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng);

    for mode in PagfMode::ALL {
        let mut params = ParameterStore::new();
        let mut buffers = BufferStore::new();
        let m = Pagf::new(&mut Builder::new(&mut params, &mut buffers, &mut rng), "pagf", 16, mode)?;
        let mut s = Session::new(&params, &mut buffers, false, false, 0);
        let d = s.graph.constant(decoder.clone());
        let e = s.graph.constant(encoder.clone());
        let t = m.trace(&mut s, d, e)?;
        println!("{:<24} out {:?}  {:>6} parameters", mode.label(), s.graph.shape(t.output), params.count_parameters());
        if mode == PagfMode::Full {
            println!("  attention: {}", stats(s.graph.value(t.attention.expect("full mode attends"))));
            println!("  gate:      {}", stats(s.graph.value(t.gate.expect("full mode gates"))));
        }
    }
    Ok(())
}
