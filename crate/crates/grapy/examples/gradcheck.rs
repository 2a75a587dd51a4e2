//! Finite-difference checks of every differentiable operation and of the
//! whole model, as run by `grapy gradcheck`.

fn main() -> grapy::Result<()> {
    let t = std::time::Instant::now();
    let reports = grapy::gradcheck::run_all(0)?;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>5} entries  max rel error {:.2e}  {status}", r.name, r.checked, r.max_rel_error);
    }
    println!("{} suites in {:.2?}", reports.len(), t.elapsed());
    Ok(())
}
