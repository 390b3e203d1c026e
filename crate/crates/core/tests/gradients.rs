use microcor_core::gradsuite::{self, STEP, TOLERANCE};

#[test]
fn every_gradient_matches_central_differences() {
    let cases = gradsuite::run(STEP).unwrap();
    assert!(cases.len() >= 23);
    for c in &cases {
        println!("{:40} rel {:.2e} abs {:.2e} n {}", c.name, c.report.max_rel_error, c.report.max_abs_error, c.report.checked);
    }
    for c in &cases {
        assert!(c.report.checked > 0, "{} checked nothing", c.name);
        assert!(c.report.max_rel_error < TOLERANCE, "{}: {:?}", c.name, c.report);
    }
}
