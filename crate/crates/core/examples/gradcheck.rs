//! Runs the finite-difference suites and prints one line per case.

use std::time::Instant;

use deeppyramid::gradcheck::{run_suite, Suite, SuiteOptions};

fn main() -> deeppyramid::Result<()> {
    let suite: Suite = std::env::args().nth(1).as_deref().unwrap_or("all").parse()?;
    let start = Instant::now();
    let reports = run_suite(suite, &SuiteOptions::default())?;
    for (s, r) in &reports {
        println!("[{s}] {r}");
    }
    let failed = reports.iter().filter(|(_, r)| !r.passed()).count();
    println!("{} cases, {failed} failed, {:.1?}", reports.len(), start.elapsed());
    Ok(())
}
