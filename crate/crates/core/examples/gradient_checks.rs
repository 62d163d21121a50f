//! Central-difference gradient checks over every differentiable operator
//! and loss, in double precision.

use cgdet::checks::{run_suite, SuiteOptions};

fn main() -> cgdet::Result<()> {
    let opts = SuiteOptions { seeds: 2, ..Default::default() };
    let report = run_suite(&opts)?;
    for item in &report.items {
        println!("{:<22} {:>5} coords  max rel err {:.2e}  {}", item.name, item.coords, item.max_rel_err, if item.passed { "ok" } else { "FAIL" });
    }
    println!("h = {:e}, tol = {:e}: {}", report.h, report.tol, if report.passed { "all passed" } else { "failures" });
    Ok(())
}
