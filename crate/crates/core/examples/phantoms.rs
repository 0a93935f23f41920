//! Generates a small paired cohort and writes one subject to disk.

use mcsagan::data::{generate_cohort, generate_raw, write_volume, PhantomSpec};
use mcsagan::networks::Contrast;

fn main() -> mcsagan::Result<()> {
    let spec = PhantomSpec::default();
    let raw = generate_raw(&PhantomSpec { seed: 3, ..spec.clone() })?;
    println!("raw phantom seed 3: tumour fraction {:.4}", raw.tumour_fraction());

    let ds = generate_cohort(&spec, 6, 42)?;
    for s in &ds.samples {
        let tumour = s.mask.data().iter().filter(|&&v| v > 0.5).count();
        let range = |c: Contrast| {
            let d = s.target(c).data();
            let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            format!("{}[{lo:+.2}, {hi:+.2}]", c.name())
        };
        println!(
            "{} dims {:?} tumour voxels {tumour:5} {} {} {}",
            s.subject_id,
            s.dims(),
            range(Contrast::T2f),
            range(Contrast::T1c),
            range(Contrast::T1n)
        );
    }

    let dir = std::env::temp_dir().join("mcsagan-phantoms");
    ds.save(&dir)?;
    write_volume(dir.join("first-t2w.mcsv"), &ds.samples[0].source)?;
    println!("saved cohort to {}", dir.display());
    Ok(())
}
