//! How closely random Fourier features reproduce the squared-exponential
//! kernel as the feature count grows.

use vcal::rff::{KernelParams, RandomFeatureLayer};

fn main() -> vcal::Result<()> {
    let kernel = KernelParams::new(1.5, vec![2.0, 0.5])?;
    let pairs = [([0.0, 0.0], [0.3, -0.2]), ([1.0, 0.5], [0.2, 1.5]), ([-1.0, 2.0], [1.0, -2.0])];
    println!("{:>8} {:>12} {:>12}", "n_rf", "max |error|", "mean |error|");
    for n_rf in [10, 100, 1000, 10_000] {
        let layer = RandomFeatureLayer::build(2, n_rf, kernel.clone(), 42)?;
        let mut max: f64 = 0.0;
        let mut sum = 0.0;
        for (x, y) in &pairs {
            let err = (layer.empirical_kernel(x, y)? - kernel.eval(x, y)).abs();
            max = max.max(err);
            sum += err;
        }
        println!("{n_rf:>8} {max:>12.5} {:>12.5}", sum / pairs.len() as f64);
    }

    let layer = RandomFeatureLayer::build(2, 8, kernel, 7)?;
    let phi = layer.features(&[0.4, -0.1])?;
    let norm: f64 = phi.values.iter().map(|v| v * v).sum();
    println!("\n8 features at (0.4, -0.1): {:?}", phi.values);
    println!("squared norm {norm:.6} equals sigma^2 = {:.6}", 1.5f64 * 1.5);
    Ok(())
}
