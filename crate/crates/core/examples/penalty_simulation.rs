//! Example 1 pushed into the wall by u ≡ 1, integrated with the penalty
//! force for a few stiffness values.

use backlash::integrator::integrate_penalty;
use backlash::model::builtin_example1;
use backlash::{ConstantControl, IntegratorConfig, SystemState};

fn main() -> backlash::Result<()> {
    let model = builtin_example1();
    let init = SystemState::scalar(-0.5, 1.0);
    let cfg = IntegratorConfig::default();
    println!("{:>8} {:>12} {:>14} {:>10} {:>8}", "gamma", "max y", "max y*sqrt(g)", "nu(T)", "nodes");
    for gamma in [1e2, 1e4, 1e6] {
        let traj = integrate_penalty(&model, gamma, &ConstantControl::scalar(1.0), 1.0, &cfg, &init)?;
        println!(
            "{gamma:>8.0e} {:>12.4e} {:>14.4} {:>10.6} {:>8}",
            traj.max_y(),
            traj.max_y() * gamma.sqrt(),
            traj.final_nu(),
            traj.len()
        );
    }
    Ok(())
}
