//! Maximum-principle check on a time-optimal transfer, and the same check on
//! a slightly wrong costate.

use backlash::adjoint::{integrate_adjoint, switching_covector, verify_theorem2, AdjointConfig, PmpTolerances};
use backlash::integrator::integrate;
use backlash::model::builtin_example1;
use backlash::optimal::{solve_time_optimal, OptimizeOptions, TargetSpec};
use backlash::{Dynamics, IntegratorConfig, SystemState};

fn main() -> backlash::Result<()> {
    let model = builtin_example1();
    let cfg = IntegratorConfig::default();
    let acfg = AdjointConfig::default();
    let init = SystemState::scalar(-2.0, 0.0);
    let target = TargetSpec::point(&SystemState::scalar(-1.0, 0.0));
    let r = solve_time_optimal(&model, Dynamics::Limit, &init, &target, &OptimizeOptions::default(), &cfg)?;
    let traj = integrate(&model, Dynamics::Limit, &r.control, r.t_opt, &cfg, &init)?;
    let cov = switching_covector(&model, &traj, &r.control, &acfg)?;
    println!("T = {:.5}, terminal covector {:?}", r.t_opt, cov);

    let adj = integrate_adjoint(&model, &traj, &cov, &acfg)?;
    let rep = verify_theorem2(&model, &traj, &adj, &PmpTolerances::default())?;
    println!("{rep:#?}");

    let mut bad = cov.clone();
    bad.r *= 1.01;
    let adj = integrate_adjoint(&model, &traj, &bad, &acfg)?;
    let rep = verify_theorem2(&model, &traj, &adj, &PmpTolerances::default())?;
    println!("perturbed: pass = {}, failures {:?}", rep.pass, rep.failures);
    Ok(())
}
