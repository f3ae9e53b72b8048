use edgewbc_core::check;

#[test]
fn all_reference_checks_pass() {
    let lines = check::run_all(7, 500);
    for l in &lines {
        println!("{l}");
    }
    assert!(lines.iter().all(|l| l.passed()));
}
