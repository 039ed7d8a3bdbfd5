//! Adjoint sensitivities of the penalty system against central differences,
//! on the piston model away from the wall and across an impact.

use backlash::adjoint::{adjoint_gradient_check, GradientCheck};
use backlash::model::{builtin_example1, builtin_example2, PistonParams};
use backlash::{BangBangControl, IntegratorConfig, SystemState};

fn main() -> backlash::Result<()> {
    let cfg = IntegratorConfig {
        rel_tol: 1e-10,
        abs_tol: 1e-12,
        ..IntegratorConfig::default()
    };
    let model = builtin_example2(PistonParams::default())?;
    let ctl = BangBangControl::single(1.0, vec![0.7], model.control_box(), 1.5)?;
    let init = SystemState::new(vec![0.0], -3.0, vec![0.0], 0.0);
    for dir in [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.3, -0.5, 0.2, 0.7]] {
        let r = adjoint_gradient_check(&model, 1e4, &ctl, &init, 1.5, &dir, &cfg, 3000)?;
        println!("direction {dir:?}: {r:?}");
    }

    let model = builtin_example1();
    let ctl = BangBangControl::single(1.0, vec![2.0], model.control_box(), 3.0)?;
    let r = adjoint_gradient_check(&model, 1e4, &ctl, &SystemState::scalar(-0.5, 1.0), 3.0, &[0.0, 1.0], &cfg, 3000)?;
    match r {
        GradientCheck::Inconclusive => println!("across an impact: inconclusive, as expected"),
        other => println!("across an impact: {other:?}"),
    }
    Ok(())
}
