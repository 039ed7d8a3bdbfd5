//! Piston in a spring-mounted cylinder with negligible friction. The
//! cylinder starts displaced and moving; both bodies are brought to rest.
//! Takes about a minute.

use backlash::integrator::integrate;
use backlash::model::{builtin_example2, PistonParams};
use backlash::optimal::{solve_time_optimal, OptimizeOptions, TargetSpec};
use backlash::{Dynamics, IntegratorConfig, SystemState};
use nalgebra::DMatrix;

fn main() -> backlash::Result<()> {
    let model = builtin_example2(PistonParams::from_coefficients(1.0, 1e-3, 1e-3))?;
    let cfg = IntegratorConfig::default();
    // x = X + Y, y = Y − X with cylinder X and piston Y.
    let init = SystemState::new(vec![0.0], -1.0, vec![-0.088], 0.088);
    let goal = SystemState::new(vec![-0.5], -0.5, vec![0.0], 0.0);
    let target = TargetSpec::ellipsoid(goal.to_flat(), &DMatrix::identity(4, 4), 0.02f64.powi(2));
    let r = solve_time_optimal(&model, Dynamics::Limit, &init, &target, &OptimizeOptions::default(), &cfg)?;
    println!("T = {:.5}, signs {:?}, switches {:?}", r.t_opt, r.signs(), r.control.channels[0].switch_times);
    let traj = integrate(&model, Dynamics::Limit, &r.control, r.t_opt, &cfg, &init)?;
    for a in &traj.atoms {
        println!("impact at {:.5}, mass {:.5}", a.time, a.mass);
    }
    println!("{:>8} {:>9} {:>9} {:>8}", "t", "X", "Y", "contact");
    let step = (traj.len() / 20).max(1);
    for k in (0..traj.len()).step_by(step) {
        let s = &traj.states[k];
        let (x, y) = ((s.x[0] - s.y) / 2.0, (s.x[0] + s.y) / 2.0);
        println!("{:>8.4} {x:>9.5} {y:>9.5} {:>8}", traj.times[k], traj.contact[k]);
    }
    Ok(())
}
