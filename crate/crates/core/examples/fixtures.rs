//! Regenerate the frozen test fixtures in `tests/fixtures/`.
//!
//! ```text
//! cargo run -p mflow-core --example fixtures
//! ```

use std::fmt::Write as _;
use std::path::Path;

use mflow_core::analytic::AnalyticFlow;
use mflow_core::data::{gen_2d, Augment, Dataset, Dist2d};
use mflow_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HEADER: &str = "# generated by: cargo run -p mflow-core --example fixtures\n";

fn row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let moons = gen_2d("two_moons", 4, &mut rng)?;
    let mut text = format!("{HEADER}x,y\n");
    for i in 0..moons.rows() {
        writeln!(text, "{}", row(moons.row(i)))?;
    }
    std::fs::write(dir.join("two_moons_seed7.csv"), text)?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = Dataset::Gen2d(Dist2d::TwoMoons).make_batch(2, &mut rng, 0.5, &Augment::none())?;
    let mut text = format!("{HEADER}z0_x,z0_y,z1_x,z1_y,lr,label,t,s\n");
    for i in 0..2 {
        let mut v = batch.z0.row(i).to_vec();
        v.extend(batch.z1.row(i));
        v.extend(batch.lr.row(i));
        v.extend([batch.labels[i] as f64, batch.t[i], batch.s[i]]);
        writeln!(text, "{}", row(&v))?;
    }
    std::fs::write(dir.join("batch_seed11.csv"), text)?;

    let mut text = format!("{HEADER}mu,sigma,x,t,s,steps,u\n");
    for (mu, sigma, x, t, s) in [(0.0, 1.0, 1.0, 0.25, 0.75), (2.0, 0.5, 1.0, 0.3, 0.9), (-1.0, 0.25, 0.5, 0.0, 1.0)] {
        let flow = AnalyticFlow::new(vec![mu], sigma)?;
        let u = flow.exact_avg_velocity(&Tensor::new(&[1, 1], vec![x])?, t, s, 4096)?;
        writeln!(text, "{}", row(&[mu, sigma, x, t, s, 4096.0, u.data()[0]]))?;
    }
    std::fs::write(dir.join("avg_velocity_golden.csv"), text)?;

    // Two 4x4 images and their PSNR from a direct mean-squared-error sum.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = a.iter().map(|v| (v + 0.2 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)).collect();
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 16.0;
    let mut text = format!("{HEADER}image,p0,p1,p2,p3,p4,p5,p6,p7,p8,p9,p10,p11,p12,p13,p14,p15\n");
    writeln!(text, "a,{}", row(&a))?;
    writeln!(text, "b,{}", row(&b))?;
    writeln!(text, "psnr,{:?}", 10.0 * (1.0 / mse).log10())?;
    std::fs::write(dir.join("psnr_pair.csv"), text)?;

    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
