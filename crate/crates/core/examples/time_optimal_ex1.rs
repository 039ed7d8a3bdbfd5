//! Time-optimal transfers of Example 1, with and without wall contact.

use backlash::integrator::integrate;
use backlash::model::builtin_example1;
use backlash::optimal::{solve_time_optimal, OptimizeOptions, TargetSpec};
use backlash::{Dynamics, IntegratorConfig, SystemState};

fn main() -> backlash::Result<()> {
    let model = builtin_example1();
    let cfg = IntegratorConfig::default();
    let opts = OptimizeOptions::default();
    let cases = [((-2.0, 0.0), (-1.0, 0.0)), ((-1.0, -1.0), (-2.0, 0.0)), ((-1.0, 1.5), (-1.0, 0.0))];
    for ((y0, w0), (y1, w1)) in cases {
        let init = SystemState::scalar(y0, w0);
        let target = TargetSpec::point(&SystemState::scalar(y1, w1));
        let r = solve_time_optimal(&model, Dynamics::Limit, &init, &target, &opts, &cfg)?;
        let traj = integrate(&model, Dynamics::Limit, &r.control, r.t_opt, &cfg, &init)?;
        println!(
            "({y0}, {w0}) -> ({y1}, {w1}): T = {:.5}, signs {:?}, switches {:?}",
            r.t_opt,
            r.signs(),
            r.control.channels[0].switch_times
        );
        for a in &traj.atoms {
            println!("    impact at {:.5}, mass {:.5}", a.time, a.mass);
        }
    }
    Ok(())
}
