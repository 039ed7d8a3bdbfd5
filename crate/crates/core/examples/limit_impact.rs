//! Limit system: an absolutely inelastic impact followed by a contact arc
//! and a release once the control turns away from the wall.

use backlash::integrator::integrate_limit;
use backlash::model::builtin_example1;
use backlash::{BangBangControl, IntegratorConfig, SystemState};

fn main() -> backlash::Result<()> {
    let model = builtin_example1();
    let control = BangBangControl::single(1.0, vec![1.5], model.control_box(), 3.0)?;
    let traj = integrate_limit(&model, &control, 3.0, &IntegratorConfig::default(), &SystemState::scalar(-0.5, 1.0))?;
    for a in &traj.atoms {
        println!("atom at t = {:.6}, mass {:.6}", a.time, a.mass);
    }
    for e in &traj.events {
        println!("{:>10.6} {:?}", e.time, e.kind);
    }
    let on_wall = traj.contact.iter().filter(|c| **c).count();
    println!("nodes on the wall: {on_wall} of {}", traj.len());
    println!("nu(T) = {:.6}, final state {:?}", traj.final_nu(), traj.final_state());
    Ok(())
}
