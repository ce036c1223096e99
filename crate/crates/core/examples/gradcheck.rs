//! Finite-difference verification of every differentiable operation.
//!
//! cargo run --example gradcheck -- [seeds]

fn main() -> attnas::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let report = attnas::gradcheck::run_gradcheck(0, seeds)?;
    println!("{report}");
    if !report.all_passed() {
        eprintln!("failing: {}", report.failing().join(", "));
        std::process::exit(2);
    }
    Ok(())
}
