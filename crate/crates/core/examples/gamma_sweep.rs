//! Certifies that penalty trajectories converge to the backlash limit for
//! Example 1 and for the piston model.

use backlash::limits::{certify_backlash, gamma_sweep, Thresholds};
use backlash::model::{builtin_example1, builtin_example2, PistonParams};
use backlash::{ConstantControl, IntegratorConfig, SystemState};

fn main() -> backlash::Result<()> {
    let gammas = [1e4, 1e5, 1e6, 1e7, 1e8];
    let cfg = IntegratorConfig::default();
    let cases = [
        ("example 1", builtin_example1(), SystemState::scalar(-0.5, 1.0)),
        (
            "piston",
            builtin_example2(PistonParams::from_coefficients(1.0, 2.0, 0.5))?,
            SystemState::new(vec![0.0], -0.5, vec![0.0], 1.0),
        ),
    ];
    for (name, model, init) in &cases {
        let sweep = gamma_sweep(model, &ConstantControl::scalar(1.0), init, 1.0, &gammas, &cfg)?;
        let rep = certify_backlash(&sweep, &Thresholds::default());
        println!("{name}:");
        for (g, y) in &rep.sup_y_by_gamma {
            println!("  gamma {g:>7.0e}  max y {y:.4e}");
        }
        println!("  layer exponent {:?}", rep.layer_exponent);
        println!("  (x,y,v) gaps {:?}", rep.uniform_xyv_gaps);
        println!("  nu gaps {:?}", rep.nu_weakstar_gaps);
        println!("  impacts {:?}, post-impact w {:?}", rep.impact_times, rep.post_impact_w);
        println!("  certified {} {:?}", rep.certified, rep.failures);
    }
    Ok(())
}
