//! Stabilizing feedback and Lyapunov neighborhood around a rest point of
//! Example 1, then a time-optimal run into it.

use backlash::adjoint::{integrate_adjoint, verify_theorem2, AdjointConfig, PmpTolerances};
use backlash::integrator::integrate;
use backlash::model::builtin_example1;
use backlash::optimal::{solve_time_optimal, OptimizeOptions, TargetSpec};
use backlash::stabilize::{admissibility_violation, build_neighborhood, lyapunov_inequality_margin, transversality};
use backlash::{Dynamics, IntegratorConfig, SystemState};

fn main() -> backlash::Result<()> {
    let model = builtin_example1();
    let nb = build_neighborhood(&model, &SystemState::scalar(-1.0, 0.0), &[0.0], 7)?;
    println!("C = {}V = {}epsilon = {:.6}", nb.c, nb.v, nb.epsilon);
    println!("rho: eigen bound {:.6}, refined {:.6}", nb.rho.eigen_bound, nb.rho.refined);
    let a_cl = &nb.linearized.a + &nb.linearized.b * &nb.c;
    println!("lyapunov margin {:.2e}", lyapunov_inequality_margin(&nb.v, &a_cl, 1000, 1));
    println!(
        "admissibility {:.3}",
        admissibility_violation(&nb.v, &nb.c, nb.epsilon, model.control_box(), &[0.0], 1000, 2)
    );

    let cfg = IntegratorConfig::default();
    let init = SystemState::scalar(-2.0, 0.0);
    let target = TargetSpec::ellipsoid(nb.center().to_vec(), &nb.v, nb.epsilon);
    let r = solve_time_optimal(&model, Dynamics::Limit, &init, &target, &OptimizeOptions::default(), &cfg)?;
    let traj = integrate(&model, Dynamics::Limit, &r.control, r.t_opt, &cfg, &init)?;
    let cov = transversality(&r.terminal_state.to_flat(), nb.center(), &nb.v)?;
    let adj = integrate_adjoint(&model, &traj, &cov, &AdjointConfig::default())?;
    let rep = verify_theorem2(&model, &traj, &adj, &PmpTolerances::default())?;
    println!("T = {:.5}, entry {:?}", r.t_opt, r.terminal_state);
    println!("pmp pass {}, H_bar = {:.5} vs rho = {:.5}", rep.pass, rep.h_bar, nb.rho.refined);
    Ok(())
}
