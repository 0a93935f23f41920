//! Checks hand-written backward rules against central differences.

use mcsagan::gradcheck::{check_fn, CheckConfig};
use mcsagan::tensor::{grad, GradOptions, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mcsagan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(&[1, 2, 5, 5, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3, 3], 0.3, &mut rng);
    let b = Tensor::<f64>::randn(&[3], 0.1, &mut rng);

    let report = check_fn(
        &[x, w, b],
        |a| a[0].conv3d(&a[1], Some(&a[2]), 1, 1)?.leaky_relu(0.2)?.square()?.mean_all(),
        CheckConfig::default(),
    )?;
    println!("conv3d -> leaky_relu -> square -> mean");
    println!("  coordinates checked: {}", report.coords);
    println!("  max relative error:  {:.3e}", report.max_rel_err);
    println!("  passes at 1e-4:      {}", report.passes(1e-4));

    // gradients of gradients
    let v = Tensor::<f64>::from_f64(&[0.5, -1.0, 2.0], &[3])?.requires_grad_(true);
    let y = v.powf(3.0)?.sum_all()?;
    let opts = GradOptions { create_graph: true, ..Default::default() };
    let g = grad(&y, &[&v], opts)?.remove(0).expect("v is on the graph");
    let gg = g.sum_all()?.backward()?;
    println!("d/dv sum(3 v^2) = {:?} (expect 6 v)", gg.get(&v).unwrap().to_vec());
    Ok(())
}
