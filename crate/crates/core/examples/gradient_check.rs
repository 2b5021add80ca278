//! Finite-difference verification of the differentiation primitives, the
//! model forward pass and the physics objective.

use adamorph::checks;

fn main() -> adamorph::Result<()> {
    for (name, err) in checks::primitive_grad_errors(0)? {
        println!("{name:>16}: max relative error {err:.2e}");
    }
    println!("{:>16}: max relative error {:.2e}", "model", checks::model_grad_error(0)?);
    println!("{:>16}: max relative error {:.2e}", "objective", checks::objective_grad_error(0)?);
    Ok(())
}
