//! Scratch probe: runs the full gradient suite and prints one line per
//! block.

fn main() {
    let t0 = std::time::Instant::now();
    let reports = gspc_core::verify::gradient_suite(None).unwrap();
    for r in &reports {
        println!(
            "{:12} max_rel_error {:10.3e}  tol {:.0e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
