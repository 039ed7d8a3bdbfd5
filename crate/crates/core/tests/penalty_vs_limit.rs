use backlash::integrator::integrate;
use backlash::limits::{extract_measure, max_window_increment};
use backlash::model::builtin_example1;
use backlash::optimal::{optimize_switching, solve_time_optimal, OptimizeOptions, TargetSpec};
use backlash::{Dynamics, IntegratorConfig, SystemState};

#[test]
fn penalty_optimum_is_close_to_limit_optimum_through_the_wall() {
    let m = builtin_example1();
    let cfg = IntegratorConfig::default();
    let opts = OptimizeOptions::default();
    let init = SystemState::scalar(-1.0, 1.5);
    let target = TargetSpec::point(&SystemState::scalar(-1.0, 0.0));
    let lim = solve_time_optimal(&m, Dynamics::Limit, &init, &target, &opts, &cfg).unwrap();

    let tl = integrate(&m, Dynamics::Limit, &lim.control, lim.t_opt, &cfg, &init).unwrap();
    let atom = tl.atoms[0];

    // The limit control ends at T_lim; leave room for a later entry.
    let mut guess = lim.control.clone();
    guess.horizon = 1.2 * lim.t_opt;
    let mut gaps = Vec::new();
    for gamma in [1e4, 1e6] {
        let pen = optimize_switching(&m, Dynamics::Penalty(gamma), &init, &target, &guess, &opts, &cfg).unwrap();
        assert_eq!(pen.signs(), lim.signs());
        let gap = (pen.t_opt - lim.t_opt).abs();
        assert!(gap <= 10.0 / gamma.sqrt(), "gamma {gamma}: penalty {} vs limit {}", pen.t_opt, lim.t_opt);
        gaps.push(gap);

        let tp = integrate(&m, Dynamics::Penalty(gamma), &pen.control, pen.t_opt, &cfg, &init).unwrap();
        let meas = extract_measure(&tp, 0.1 * max_window_increment(&tp));
        assert_eq!(meas.atoms.len(), 1);
        assert!((meas.atoms[0].mass - atom.mass).abs() <= 0.02 * atom.mass);
        assert!((meas.atoms[0].time - atom.time).abs() <= 10.0 / gamma.sqrt());
    }
    assert!(gaps[1] * 5.0 <= gaps[0], "{gaps:?}");
}

#[test]
fn contact_free_optimum_does_not_depend_on_gamma() {
    let m = builtin_example1();
    let cfg = IntegratorConfig::default();
    let opts = OptimizeOptions::default();
    let init = SystemState::scalar(-3.0, 0.5);
    let target = TargetSpec::point(&SystemState::scalar(-1.0, 0.0));
    let lim = solve_time_optimal(&m, Dynamics::Limit, &init, &target, &opts, &cfg).unwrap();
    let mut guess = lim.control.clone();
    guess.horizon = 1.2 * lim.t_opt;
    let pen = optimize_switching(&m, Dynamics::Penalty(1e3), &init, &target, &guess, &opts, &cfg).unwrap();
    assert!((pen.t_opt - lim.t_opt).abs() < 1e-6, "{} vs {}", pen.t_opt, lim.t_opt);
}
