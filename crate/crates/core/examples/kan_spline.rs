//! B-spline basis values on the extended grid and a KAN layer applied to a
//! batch of tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uman::kan::{KanLayer, SplineGrid};
use uman::params::{BufferStore, Builder, ParameterStore, Session};
use uman::Tensor;

fn main() -> uman::Result<()> {
    let grid = SplineGrid::new(5, 3, -1.0, 1.0)?;
    println!("knots: {:?}", grid.knots().iter().map(|t| format!("{t:.2}")).collect::<Vec<_>>());
    let mut basis = vec![0.0; grid.num_basis()];
    for x in [-1.0, -0.5, 0.0, 0.3, 1.0] {
        grid.eval(x, &mut basis, None);
        let row: Vec<String> = basis.iter().map(|b| format!("{b:.3}")).collect();
        println!("x = {x:>5.2}  B = [{}]  sum = {:.12}", row.join(" "), basis.iter().sum::<f64>());
    }

    let mut params = ParameterStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = KanLayer::new(&mut Builder::new(&mut params, &mut buffers, &mut rng), "kan", 4, 2, grid)?;
    let x = Tensor::uniform(&[2, 6, 4], -1.0, 1.0, &mut rng);
    let mut s = Session::new(&params, &mut buffers, false, false, 0);
    let xv = s.graph.constant(x);
    let y = layer.forward(&mut s, xv)?;
    println!("KAN layer [2, 6, 4] -> {:?}, {} parameters", s.graph.shape(y), params.count_parameters());
    Ok(())
}
