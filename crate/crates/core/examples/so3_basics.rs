//! Exponential and logarithm maps, the 6D representation and Gram-Schmidt
//! projection on SO(3).

use adamorph::so3::{self, Rotation};
use nalgebra::{Matrix3, Vector3};

fn main() -> adamorph::Result<()> {
    let w = Vector3::new(0.3, -1.1, 0.7);
    let r = so3::exp_map(&w);
    println!("exp({w:?}) =\n{}", r.matrix());
    println!("log(exp(w)) = {:?}", so3::log_map(&r));

    let r6 = so3::to_6d(&r);
    let back = so3::from_6d(&r6)?;
    println!("6d = {:?}, round-trip error {:.2e}", r6.0, (back.matrix() - r.matrix()).abs().max());

    let yaw = Rotation::yaw(0.5);
    println!("geodesic angle to a 0.5 rad yaw: {:.6}", so3::geodesic_angle(&r, &yaw));

    let drifted = r.matrix() + Matrix3::from_element(1e-3);
    let fixed = so3::gram_schmidt_project(&drifted)?;
    let (orth, det) = fixed.defect();
    println!("projected drifted matrix: orthonormality defect {orth:.2e}, det {det:.15}");
    Ok(())
}
