//! Global-error convergence of the fixed-step schemes on dh/dt = -h.

use gruode::odeint::{self, ORDER_STEPS};

fn main() -> gruode::Result<()> {
    println!("steps: {ORDER_STEPS:?}");
    for check in odeint::order_suite()? {
        println!(
            "{:<6} slope {:.3}  expected {} ± {}  {}",
            check.scheme.to_string(),
            check.slope,
            check.expected,
            check.tolerance,
            if check.passed() { "ok" } else { "off" }
        );
    }
    Ok(())
}
