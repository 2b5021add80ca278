use adamorph::checks::{model_grad_error, objective_grad_error, primitive_grad_errors, GRAD_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    let errors = primitive_grad_errors(21).unwrap();
    assert!(errors.len() >= 25);
    let bad: Vec<_> = errors.iter().filter(|(_, e)| !(*e < GRAD_TOL)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn tiny_model_matches_finite_differences() {
    let e = model_grad_error(5).unwrap();
    assert!(e < GRAD_TOL, "{e}");
}

#[test]
fn objective_matches_finite_differences() {
    let e = objective_grad_error(2).unwrap();
    assert!(e < GRAD_TOL, "{e}");
}
