//! Loss terms and image metrics on a phantom and degraded copies of it.

use mcsagan::data::{generate_phantom, PhantomSpec};
use mcsagan::losses::{gradient_penalty_at, msssim_loss, reconstruction_loss, LossWeights, SsimConfig};
use mcsagan::metrics::{dice, ms_ssim, mse, psnr, ssim};
use mcsagan::networks::Contrast;
use mcsagan::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mcsagan::Result<()> {
    let s = generate_phantom(&PhantomSpec::default())?;
    let d = s.dims();
    let y = s.target(Contrast::T1c).reshape(&[1, 1, d[0], d[1], d[2]])?;
    let mask = s.mask.reshape(&[1, 1, d[0], d[1], d[2]])?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    println!("{:>6} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8}", "noise", "mse", "psnr", "ssim", "ms-ssim", "L_rec", "L_msssim");
    for sigma in [0.0, 0.02, 0.05, 0.1, 0.2] {
        let noise = Tensor::<f32>::randn(y.shape(), sigma, &mut rng);
        let y_hat = y.add(&noise)?;
        let rec = reconstruction_loss(&y_hat, &y, &mask, LossWeights::default().mask_alpha)?.item()?;
        let ms = msssim_loss(&y_hat, &y, &SsimConfig::default())?.item()?;
        println!(
            "{sigma:>6.2} {:>9.2e} {:>8.2} {:>8.4} {:>8.4} {rec:>8.4} {ms:>8.4}",
            mse(&y_hat, &y)?,
            psnr(&y_hat, &y, 2.0)?,
            ssim(&y_hat, &y)?,
            ms_ssim(&y_hat, &y)?
        );
    }

    println!("dice(mask, mask) = {}", dice(&mask, &mask)?);

    // A critic that sums its input has unit gradient everywhere, so the
    // penalty is (sqrt(N) - 1)^2 for N voxels.
    let real = Tensor::<f64>::randn(&[2, 1, 4, 4, 4], 1.0, &mut rng);
    let fake = Tensor::<f64>::randn(&[2, 1, 4, 4, 4], 1.0, &mut rng);
    let gp = gradient_penalty_at(|v| v.sum_all(), &real, &fake, &[0.3, 0.7])?.item()?;
    println!("gradient penalty of a summing critic over 64 voxels: {gp:.6} (expect 49)");
    Ok(())
}
