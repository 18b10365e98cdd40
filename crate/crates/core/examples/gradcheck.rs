//! Finite-difference gradient verification of every differentiable component.

fn main() -> gruode::Result<()> {
    let results = gruode::gradcheck::run_all()?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<40} {:>5} scalars  max rel err {:.3e}  {}",
            r.name,
            r.scalars,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
