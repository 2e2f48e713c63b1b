//! Noise multipliers for the ε ∈ {1, 3, 8} grid, plus the forward check.
//!
//!     cargo run --example calibrate_budget

use dualpriv::accountant::{
    calibrate_sigma, default_orders, epsilon_spent, gaussian_mechanism_sigma, PrivacySpec,
};

fn main() -> dualpriv::Result<()> {
    println!(
        "single-shot Gaussian mechanism (Δf=1, ε=1, δ=1e-5): σ = {:.5}",
        gaussian_mechanism_sigma(1.0, 1.0, 1e-5)?
    );
    println!();

    let n = 50_000usize;
    let m = 256usize;
    let steps = n.div_ceil(m) * 3;
    let q = m as f64 / n as f64;
    let delta = 1.0 / n as f64;
    println!("N={n}, m={m}, q={q}, T={steps}, δ={delta:e}");
    println!("{:>4} {:>10} {:>12} {:>6}", "ε", "σ", "ε spent", "α");
    for eps in [1.0, 3.0, 8.0] {
        let spec = PrivacySpec {
            epsilon: eps,
            delta,
            sample_rate: q,
            steps,
            clip: 1.0,
        };
        let s = calibrate_sigma(&spec)?;
        let (spent, order) = epsilon_spent(s.sigma, q, steps, delta, &default_orders())?;
        println!("{eps:>4} {:>10.4} {spent:>12.6} {order:>6}", s.sigma);
    }
    Ok(())
}
