//! One multi-scale adaptive stage: patch embedding, a KAN branch and a
//! multi-scale depthwise attention branch merged by learnable scalars.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uman::kan::SplineGrid;
use uman::man::{ManStage, ManStageConfig};
use uman::params::{BufferStore, Builder, ParameterStore, Session};
use uman::Tensor;

fn main() -> uman::Result<()> {
    let cfg = ManStageConfig {
        c_in: 16,
        dim: 24,
        depth: 2,
        stride: 2,
        kernels: Some(vec![1, 3, 5]),
        grid: SplineGrid::new(5, 3, -1.0, 1.0)?,
        drop_path: 0.0,
    };
    let mut params = ParameterStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stage = ManStage::new(&mut Builder::new(&mut params, &mut buffers, &mut rng), "man", &cfg)?;

    let x = Tensor::randn(&[2, 16, 32, 32], 1.0, &mut rng);
    let mut s = Session::new(&params, &mut buffers, false, false, 0);
    let xv = s.graph.constant(x);
    let y = stage.forward(&mut s, xv)?;
    println!("[2, 16, 32, 32] -> {:?}", s.graph.shape(y));

    for p in params.iter().filter(|p| p.value.len() == 1) {
        println!("fusion scalar {} = {}", p.name, p.value.item());
    }
    println!("{} parameters", params.count_parameters());
    Ok(())
}
