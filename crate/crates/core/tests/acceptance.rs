//! Acceptance criteria. Runs as a plain binary and prints one line per
//! criterion; exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use backlash::adjoint::{
    adjoint_gradient_check, contact_arc_matrix, integrate_adjoint, switching_covector, verify_theorem2, AdjointConfig,
    GradientCheck, PmpTolerances,
};
use backlash::integrator::{boundary_layer_closed_form, integrate, integrate_layer_ode, integrate_limit};
use backlash::limits::{
    certify_backlash, extract_measure, fit_layer_exponent, gamma_sweep, max_window_increment, penalty_impacts,
    GammaSweep, Thresholds,
};
use backlash::model::{builtin_example1, builtin_example2, PistonParams};
use backlash::optimal::{solve_time_optimal, OptimizeOptions, TargetSpec};
use backlash::stabilize::{admissibility_violation, build_neighborhood, lyapunov_inequality_margin, transversality};
use backlash::{BangBangControl, CanonicalModel, ConstantControl, Dynamics, IntegratorConfig, SystemState, Trajectory};
use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1() -> Outcome {
    let cfg = IntegratorConfig {
        rel_tol: 1e-12,
        abs_tol: 1e-14,
        ..IntegratorConfig::default()
    };
    let mut worst: f64 = 0.0;
    for m_bar in [1.0_f64, 10.0] {
        for gamma in [1e2, 1e4, 1e6] {
            let end = 5.0 / (m_bar * gamma).sqrt();
            let taus: Vec<f64> = (0..=200).map(|i| end * i as f64 / 200.0).collect();
            let num = integrate_layer_ode(m_bar, gamma, &taus, &cfg).map_err(|e| e.to_string())?;
            for (tau, y) in taus.iter().zip(&num) {
                let exact = boundary_layer_closed_form(m_bar, gamma, *tau);
                if exact != 0.0 {
                    worst = worst.max(((y - exact) / exact).abs());
                } else {
                    worst = worst.max(y.abs());
                }
            }
        }
    }
    check(worst <= 1e-6, format!("max relative error {worst:.2e}"))
}

fn ex1_wall_sweep() -> Result<GammaSweep, String> {
    let m = builtin_example1();
    gamma_sweep(
        &m,
        &ConstantControl::scalar(1.0),
        &SystemState::scalar(-0.5, 0.0),
        2.0,
        &[1e2, 1e3, 1e4, 1e5, 1e6],
        &IntegratorConfig::default(),
    )
    .map_err(|e| e.to_string())
}

fn c2(sweep: &GammaSweep) -> Outcome {
    let pairs: Vec<(f64, f64)> = sweep.gammas.iter().zip(&sweep.trajectories).map(|(g, t)| (*g, t.max_y())).collect();
    let k = fit_layer_exponent(&pairs).map_err(|e| e.to_string())?;
    check((-0.6..=-0.4).contains(&k), format!("fitted exponent {k:.4}"))
}

fn c3(sweep: &GammaSweep) -> Outcome {
    let gamma = *sweep.gammas.last().unwrap();
    let traj = sweep.trajectories.last().unwrap();
    let hit = *penalty_impacts(traj).first().ok_or("no impact at the largest gamma")?;
    let n = traj.n;
    let w_before = traj.sample(hit).0[2 * n + 1];
    let w_after = traj.sample(hit + 10.0 / gamma.sqrt()).0[2 * n + 1];
    check(
        w_before > 0.0 && w_after.abs() <= 0.05 * w_before,
        format!("w(impact-) = {w_before:.4}, w(impact + 10/sqrt(gamma)) = {w_after:.2e}"),
    )
}

fn atom_gap(model: &CanonicalModel, init: &SystemState, t_final: f64, penalty: &Trajectory) -> Result<f64, String> {
    let cfg = IntegratorConfig::default();
    let lim = integrate_limit(model, &ConstantControl::scalar(1.0), t_final, &cfg, init).map_err(|e| e.to_string())?;
    let ml = extract_measure(&lim, 0.1 * max_window_increment(&lim));
    let mp = extract_measure(penalty, 0.1 * max_window_increment(penalty));
    if ml.atoms.len() != 1 || mp.atoms.len() != 1 {
        return Err(format!("atom counts: limit {}, penalty {}", ml.atoms.len(), mp.atoms.len()));
    }
    Ok(((mp.atoms[0].mass - ml.atoms[0].mass) / ml.atoms[0].mass).abs())
}

fn c4() -> Outcome {
    let gammas = [1e4, 1e5, 1e6, 1e7, 1e8];
    let cfg = IntegratorConfig::default();
    let cases = [
        ("ex1", builtin_example1(), SystemState::scalar(-0.5, 1.0)),
        (
            "ex2",
            builtin_example2(PistonParams::from_coefficients(1.0, 2.0, 0.5)).map_err(|e| e.to_string())?,
            SystemState::new(vec![0.0], -0.5, vec![0.0], 1.0),
        ),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, model, init) in &cases {
        let sweep = gamma_sweep(model, &ConstantControl::scalar(1.0), init, 1.0, &gammas, &cfg).map_err(|e| e.to_string())?;
        let rep = certify_backlash(&sweep, &Thresholds::default());
        let gap = atom_gap(model, init, 1.0, sweep.trajectories.last().unwrap())?;
        ok &= rep.certified && gap <= 0.02;
        lines.push(format!(
            "{name}: certified={} failures={:?} atom gap {:.2}%",
            rep.certified,
            rep.failures,
            100.0 * gap
        ));
    }
    check(ok, lines.join("; "))
}

fn c5() -> Outcome {
    let m = builtin_example1();
    let cfg = IntegratorConfig::default();
    let opts = OptimizeOptions::default();
    let solve = |init: SystemState, goal: SystemState| {
        solve_time_optimal(&m, Dynamics::Limit, &init, &TargetSpec::point(&goal), &opts, &cfg).map_err(|e| e.to_string())
    };
    let mut lines = Vec::new();
    let mut ok = true;

    let free = [((-2.0, 0.0), (-1.0, 0.0)), ((-3.0, 0.5), (-1.0, 0.0)), ((-1.0, -1.0), (-2.0, 0.0)), ((-4.0, 1.0), (-1.5, 0.0))];
    let mut counts = Vec::new();
    for ((y0, w0), (y1, w1)) in free {
        let r = solve(SystemState::scalar(y0, w0), SystemState::scalar(y1, w1))?;
        ok &= r.switch_count() <= 1;
        counts.push(r.switch_count());
    }
    lines.push(format!("no-contact switch counts {counts:?}"));

    // Rest to rest over distance d: bang-bang with T = 2·√d.
    let r = solve(SystemState::scalar(-2.0, 0.0), SystemState::scalar(-1.0, 0.0))?;
    let oracle = 2.0 * 1f64.sqrt();
    ok &= (r.t_opt - oracle).abs() <= 0.01;
    lines.push(format!("rest-to-rest T = {:.5} (oracle {oracle})", r.t_opt));

    let r = solve(SystemState::scalar(-1.0, 1.5), SystemState::scalar(-1.0, 0.0))?;
    let traj = integrate(&m, Dynamics::Limit, &r.control, r.t_opt, &cfg, &SystemState::scalar(-1.0, 1.5))
        .map_err(|e| e.to_string())?;
    let atom = traj.atoms.first().copied();
    let released = atom.is_some_and(|a| {
        traj.times.iter().zip(&traj.states).any(|(t, s)| *t > a.time && s.y < -1e-3)
    });
    let structure = r.signs() == vec![1.0, -1.0, 1.0] && traj.atoms.len() == 1 && released;
    ok &= structure;
    lines.push(format!(
        "wall instance T = {:.5} signs {:?} switches {:?} atoms {:?} released {released}",
        r.t_opt,
        r.signs(),
        r.control.channels[0].switch_times,
        traj.atoms
    ));
    check(ok, lines.join("; "))
}

fn c6() -> Outcome {
    let m = builtin_example2(PistonParams::from_coefficients(1.0, 1e-3, 1e-3)).map_err(|e| e.to_string())?;
    let cfg = IntegratorConfig::default();
    // Cylinder at X = 0.5 moving left, piston at rest at Y = −0.5. Both end
    // at rest with X = 0 and Y = −0.5.
    let init = SystemState::new(vec![0.0], -1.0, vec![-0.088], 0.088);
    let goal = SystemState::new(vec![-0.5], -0.5, vec![0.0], 0.0);
    let tol = 0.02;
    let target = TargetSpec::ellipsoid(goal.to_flat(), &DMatrix::identity(4, 4), tol * tol);
    let r = solve_time_optimal(&m, Dynamics::Limit, &init, &target, &OptimizeOptions::default(), &cfg)
        .map_err(|e| e.to_string())?;
    let traj = integrate(&m, Dynamics::Limit, &r.control, r.t_opt, &cfg, &init).map_err(|e| e.to_string())?;
    let sw = r.control.channels[0].switch_times.clone();
    // Accelerate, impact, brake with the bodies together, final correction.
    let impact_between = sw.len() == 2 && traj.atoms.iter().any(|a| a.time > sw[0] && a.time < sw[1]);
    check(
        r.signs() == vec![1.0, -1.0, 1.0] && impact_between,
        format!("T = {:.4} signs {:?} switches {:?} atoms {:?}", r.t_opt, r.signs(), sw, traj.atoms),
    )
}

fn c7() -> Outcome {
    let m = builtin_example1();
    let cfg = IntegratorConfig::default();
    let acfg = AdjointConfig::default();
    let tol = PmpTolerances::default();
    let init = SystemState::scalar(-2.0, 0.0);
    let target = TargetSpec::point(&SystemState::scalar(-1.0, 0.0));
    let r = solve_time_optimal(&m, Dynamics::Limit, &init, &target, &OptimizeOptions::default(), &cfg)
        .map_err(|e| e.to_string())?;
    let traj = integrate(&m, Dynamics::Limit, &r.control, r.t_opt, &cfg, &init).map_err(|e| e.to_string())?;
    let cov = switching_covector(&m, &traj, &r.control, &acfg).map_err(|e| e.to_string())?;
    let adj = integrate_adjoint(&m, &traj, &cov, &acfg).map_err(|e| e.to_string())?;
    let rep = verify_theorem2(&m, &traj, &adj, &tol).map_err(|e| e.to_string())?;
    let mut bad = cov.clone();
    bad.r *= 1.01;
    let adj_bad = integrate_adjoint(&m, &traj, &bad, &acfg).map_err(|e| e.to_string())?;
    let rep_bad = verify_theorem2(&m, &traj, &adj_bad, &tol).map_err(|e| e.to_string())?;
    let ok = rep.pass
        && rep.hamiltonian_drift <= 1e-5
        && rep.max_condition_violation <= 1e-6
        && (rep.nontriviality - 1.0).abs() <= 1e-9
        && rep.mu_support_violation <= 1e-8
        && !rep_bad.pass;
    check(
        ok,
        format!(
            "drift {:.1e}, max-condition {:.1e}, nontriviality {:.12}, mu {:.1e}; perturbed fails {:?}",
            rep.hamiltonian_drift, rep.max_condition_violation, rep.nontriviality, rep.mu_support_violation, rep_bad.failures
        ),
    )
}

/// Eigenvalues with the zero eigenvalue split off by rank decisions: its
/// algebraic multiplicity is `dim ker Aᵏ` once the kernel stops growing, and
/// the rest of the spectrum is that of `A` on the invariant subspace
/// `range Aᵏ`. A plain QR iteration smears a defective zero eigenvalue over
/// a disc of radius ~√ε.
fn spectrum(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = a.nrows();
    let rank_of = |m: &DMatrix<f64>| {
        let sv = m.singular_values();
        let tol = 1e-10 * sv.max().max(1.0);
        sv.iter().filter(|s| **s > tol).count()
    };
    let mut power = a.clone();
    let mut rank = rank_of(&power);
    loop {
        let next = a * &power;
        let r = rank_of(&next);
        if r == rank {
            break;
        }
        power = next;
        rank = r;
    }
    let mut out = vec![Complex::new(0.0, 0.0); n - rank];
    if rank > 0 {
        let u = power.svd(true, false).u.expect("left singular vectors");
        let q = u.columns(0, rank).into_owned();
        let restricted = q.transpose() * a * &q;
        out.extend(restricted.complex_eigenvalues().iter().copied());
    }
    out
}

fn c8() -> Outcome {
    let mut worst: f64 = 0.0;
    for (a, c) in [(1.0, 0.5), (2.0, 0.1), (0.5, 2.0)] {
        let eig = spectrum(&contact_arc_matrix(a, 0.0, c));
        let disc = Complex::new(c * c - 2.0 * a, 0.0).sqrt();
        let roots = [Complex::new(0.0, 0.0), Complex::new(0.0, 0.0), c + disc, c - disc];
        if eig.len() != roots.len() {
            return Err(format!("{} eigenvalues for (a, c) = ({a}, {c})", eig.len()));
        }
        // Greedy matching of eigenvalues to roots.
        let mut used = [false; 4];
        for e in &eig {
            let (k, d) = roots
                .iter()
                .enumerate()
                .filter(|(k, _)| !used[*k])
                .map(|(k, r)| (k, (e - r).norm()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            used[k] = true;
            worst = worst.max(d);
        }
    }
    check(worst <= 1e-10, format!("max eigenvalue/root distance {worst:.2e}"))
}

fn c9() -> Outcome {
    let model = builtin_example2(PistonParams::default()).map_err(|e| e.to_string())?;
    let ctl = BangBangControl::single(1.0, vec![0.7], model.control_box(), 1.5).map_err(|e| e.to_string())?;
    let init = SystemState::new(vec![0.0], -3.0, vec![0.0], 0.0);
    let cfg = IntegratorConfig {
        rel_tol: 1e-10,
        abs_tol: 1e-12,
        ..IntegratorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut gaps = Vec::new();
    for _ in 0..5 {
        let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        match adjoint_gradient_check(&model, 1e4, &ctl, &init, 1.5, &dir, &cfg, 3000).map_err(|e| e.to_string())? {
            GradientCheck::Compared { rel_gap, .. } => gaps.push(rel_gap),
            GradientCheck::Inconclusive => return Err("left the contact-free regime".into()),
        }
    }
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.2e}")).collect();
    check(worst <= 1e-6, format!("rel gaps [{}]", shown.join(", ")))
}

fn c10() -> Outcome {
    let m = builtin_example1();
    let cfg = IntegratorConfig::default();
    let acfg = AdjointConfig::default();
    let eq = SystemState::scalar(-1.0, 0.0);
    let nb = build_neighborhood(&m, &eq, &[0.0], 7).map_err(|e| e.to_string())?;
    let a_cl = &nb.linearized.a + &nb.linearized.b * &nb.c;
    let lyap = lyapunov_inequality_margin(&nb.v, &a_cl, 1000, 11);
    let lyap_tol = 1e-9 * (1.0 + nb.v.norm() * a_cl.norm());
    let adm = admissibility_violation(&nb.v, &nb.c, nb.epsilon, m.control_box(), &[0.0], 1000, 13);

    let init = SystemState::scalar(-2.0, 0.0);
    let target = TargetSpec::ellipsoid(nb.center().to_vec(), &nb.v, nb.epsilon);
    let r = solve_time_optimal(&m, Dynamics::Limit, &init, &target, &OptimizeOptions::default(), &cfg)
        .map_err(|e| e.to_string())?;
    let traj = integrate(&m, Dynamics::Limit, &r.control, r.t_opt, &cfg, &init).map_err(|e| e.to_string())?;
    let cov = transversality(&r.terminal_state.to_flat(), nb.center(), &nb.v).map_err(|e| e.to_string())?;
    let adj = integrate_adjoint(&m, &traj, &cov, &acfg).map_err(|e| e.to_string())?;
    let rep = verify_theorem2(&m, &traj, &adj, &PmpTolerances::default()).map_err(|e| e.to_string())?;
    let rho = nb.rho.refined;
    let ok = lyap <= lyap_tol && adm <= 0.0 && rep.pass && rep.h_bar >= rho - 1e-6;
    check(
        ok,
        format!(
            "eps {:.4}, lyapunov margin {lyap:.1e} (tol {lyap_tol:.1e}), admissibility {adm:.2e}, T = {:.4}, pmp pass {}, H_bar {:.4} >= rho {rho:.4}",
            nb.epsilon, r.t_opt, rep.pass, rep.h_bar
        ),
    )
}

fn report(k: usize, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let dt = t0.elapsed();
    let slow = if dt > budget { format!(" [over budget {budget:?}]") } else { String::new() };
    match &out {
        Ok(d) => println!("criterion {k}: PASS {d} ({dt:.2?}){slow}"),
        Err(d) => println!("criterion {k}: FAIL {d} ({dt:.2?}){slow}"),
    }
    out.is_ok()
}

fn main() -> ExitCode {
    let s = |x: u64| Duration::from_secs(x);
    let mut ok = true;
    ok &= report(1, s(1), c1);
    let t0 = Instant::now();
    let sweep = ex1_wall_sweep();
    let sweep_time = t0.elapsed();
    match sweep {
        Ok(sw) => {
            ok &= report(2, s(30).saturating_sub(sweep_time), || c2(&sw));
            ok &= report(3, s(30).saturating_sub(sweep_time), || c3(&sw));
        }
        Err(e) => {
            println!("criterion 2: FAIL {e}");
            println!("criterion 3: FAIL {e}");
            ok = false;
        }
    }
    println!("  (shared sweep for 2 and 3: {sweep_time:.2?})");
    ok &= report(4, s(60), c4);
    ok &= report(5, s(60), c5);
    ok &= report(6, s(300), c6);
    ok &= report(7, s(30), c7);
    ok &= report(8, s(1), c8);
    ok &= report(9, s(10), c9);
    ok &= report(10, s(60), c10);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
