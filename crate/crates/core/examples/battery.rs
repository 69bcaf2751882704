use tirsiam_core::verify;

fn main() {
    let t0 = std::time::Instant::now();
    for c in verify::run_all().unwrap() {
        println!("[{}] {} — {} ({:?})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail, t0.elapsed());
    }
}
