//! Reverse-mode autodiff on a tiny logistic model, checked against finite
//! differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uman::gradcheck::check_fn;
use uman::{Graph, Tensor};

fn main() -> uman::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let w = Tensor::randn(&[1, 3], 0.5, &mut rng);
    let y = Tensor::new(&[4, 1], vec![1.0, 0.0, 1.0, 0.0])?;

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.leaf(w.clone());
    let yv = g.constant(y.clone());
    let z = g.linear(xv, wv, None)?;
    let loss = g.bce_with_logits(z, yv)?;
    println!("loss = {:.6}", g.value(loss).item());

    let grads = g.backward(loss)?;
    println!("dL/dw = {:?}", grads.get(wv).expect("w is a leaf").data());

    let entry = check_fn("logistic", &[x, w, y], 1e-6, |g, v| {
        let z = g.linear(v[0], v[1], None)?;
        g.bce_with_logits(z, v[2])
    })?;
    println!("finite-difference check: max rel err {:.2e} ({})", entry.max_rel_error, if entry.passed() { "PASS" } else { "FAIL" });
    Ok(())
}
