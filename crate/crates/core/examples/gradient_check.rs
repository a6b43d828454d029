//! Finite-difference check of every objective's analytic gradient, followed
//! by a deliberately broken adjoint to show that the check catches it.

use selfstrae::autograd::OpKind;
use selfstrae::model::Objective;
use selfstrae::objectives::gradcheck_objective;

fn main() -> selfstrae::Result<()> {
    for objective in Objective::ALL {
        let r = gradcheck_objective(objective, 0, 10, 1e-5, None)?;
        println!("{objective:<12} max rel err {:.2e}  passed {}", r.max_rel_err, r.passed);
    }
    let broken = gradcheck_objective(Objective::Ceco, 0, 10, 1e-5, Some(OpKind::Compose))?;
    println!("ceco with a negated compose adjoint: max rel err {:.2e}  passed {}", broken.max_rel_err, broken.passed);
    Ok(())
}
