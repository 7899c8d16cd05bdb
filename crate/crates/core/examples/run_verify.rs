fn main() {
    for r in srpose_kit_core::verify::run_all("") {
        println!("{} {} ({:?}) {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.elapsed, r.detail);
    }
}
