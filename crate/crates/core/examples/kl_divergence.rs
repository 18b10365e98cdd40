//! Closed-form Gaussian KL next to a Monte-Carlo estimate.

use gruode::encoder::gaussian_kl_value;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn log_density(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pairs = [
        ((0.0, 1.0), (0.0, 1.0)),
        ((0.5, 0.8), (0.0, 1.0)),
        ((-1.0, 0.3), (0.2, 0.9)),
        ((2.0, 1.5), (-0.5, 0.7)),
    ];
    println!("{:>18} {:>18} {:>10} {:>10}", "q (mu, sigma)", "p (mu, sigma)", "exact", "MC");
    for ((qm, qs), (pm, ps)) in pairs {
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = qm + qs * rng.sample::<f64, _>(StandardNormal);
            sum += log_density(x, qm, qs) - log_density(x, pm, ps);
        }
        println!(
            "{:>18} {:>18} {:>10.5} {:>10.5}",
            format!("({qm}, {qs})"),
            format!("({pm}, {ps})"),
            gaussian_kl_value(qm, qs, pm, ps),
            sum / n as f64
        );
    }
}
