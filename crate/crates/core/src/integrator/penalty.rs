use super::rk::{self, Direction, OdeSystem, Stepper, Stop};
use super::{check_common, segments, Dynamics, EventKind, IntegratorConfig, Trajectory, TrajectoryEvent};
use crate::control::ControlSignal;
use crate::error::{Error, Result};
use crate::model::{CanonicalModel, SystemState};

/// Flat layout `[x, y, v, w, ν]`.
pub(crate) struct PenaltySystem<'a> {
    pub model: &'a CanonicalModel,
    pub gamma: f64,
    pub u: Vec<f64>,
    pub cap: f64,
    pub band: f64,
}

impl<'a> PenaltySystem<'a> {
    pub fn new(model: &'a CanonicalModel, gamma: f64, u: Vec<f64>, cfg: &IntegratorConfig) -> Self {
        PenaltySystem {
            model,
            gamma,
            u,
            cap: cfg.gamma_step_cap / gamma.sqrt(),
            band: cfg.contact_band,
        }
    }
}

impl OdeSystem for PenaltySystem<'_> {
    fn dim(&self) -> usize {
        2 * self.model.n() + 3
    }

    fn rhs(&self, z: &[f64], dz: &mut [f64]) {
        let n = self.model.n();
        let (x, y, v, w) = (&z[..n], z[n], &z[n + 1..2 * n + 1], z[2 * n + 1]);
        dz[..n].copy_from_slice(v);
        dz[n] = w;
        self.model.f_into(x, y, v, w, &self.u, &mut dz[n + 1..2 * n + 1]);
        let push = self.gamma * y.max(0.0) * w.max(0.0);
        dz[2 * n + 1] = self.model.g_raw(x, y, v, w, &self.u) - push;
        dz[2 * n + 2] = push;
    }

    fn n_events(&self) -> usize {
        2
    }

    fn event(&self, k: usize, z: &[f64]) -> f64 {
        let n = self.model.n();
        if k == 0 {
            z[n]
        } else {
            z[2 * n + 1]
        }
    }

    fn direction(&self, _k: usize) -> Direction {
        Direction::Either
    }

    fn dip_component(&self, k: usize) -> Option<usize> {
        (k == 0).then_some(self.model.n())
    }

    fn max_step(&self, z: &[f64]) -> f64 {
        if z[self.model.n()] >= -self.band {
            self.cap
        } else {
            f64::INFINITY
        }
    }
}

pub(crate) fn unpack(n: usize, z: &[f64]) -> (SystemState, f64) {
    (
        SystemState {
            x: z[..n].to_vec(),
            y: z[n],
            v: z[n + 1..2 * n + 1].to_vec(),
            w: z[2 * n + 1],
        },
        z[2 * n + 2],
    )
}

pub(crate) fn pack(s: &SystemState, nu: f64) -> Vec<f64> {
    let mut z = s.to_flat();
    z.push(nu);
    z
}

/// Penalty trajectory on `[0, t_final]`.
pub fn integrate_penalty(
    model: &CanonicalModel,
    gamma: f64,
    control: &dyn ControlSignal,
    t_final: f64,
    cfg: &IntegratorConfig,
    init: &SystemState,
) -> Result<Trajectory> {
    if !(t_final > 0.0) {
        return Err(Error::arg("t_final must be positive"));
    }
    integrate_penalty_from(model, gamma, control, 0.0, t_final, cfg, init, 0.0)
}

#[allow(clippy::too_many_arguments)]
pub fn integrate_penalty_from(
    model: &CanonicalModel,
    gamma: f64,
    control: &dyn ControlSignal,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    init: &SystemState,
    nu0: f64,
) -> Result<Trajectory> {
    Dynamics::Penalty(gamma).validate()?;
    check_common(model, control, t0, t1, cfg, init)?;
    let n = model.n();
    let mut traj = Trajectory::empty(Dynamics::Penalty(gamma), n, model.m());
    let bounds = segments(control, t0, t1);
    let band = cfg.contact_band;
    let t_scale = t1.abs().max(t1 - t0);
    let mut z = pack(init, nu0);
    let mut t = t0;
    let mut h = cfg.dt_max.min((t1 - t0).max(1e-12) * 1e-2);
    let u0 = control.value(0.5 * (bounds[0] + bounds[1.min(bounds.len() - 1)]));
    traj.push(t0, init.clone(), u0, nu0, init.y >= -band);
    for (si, seg) in bounds.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        if si > 0 {
            traj.events.push(TrajectoryEvent {
                time: a,
                kind: EventKind::ControlSwitch,
            });
        }
        let u = control.value(0.5 * (a + b));
        let sys = PenaltySystem::new(model, gamma, u.clone(), cfg);
        while t < b {
            let end = {
                let traj = &mut traj;
                let u = &u;
                rk::run(&sys, t, b, &z, h, cfg, t_scale, &mut |tn, zn| {
                    let (s, nu) = unpack(n, zn);
                    let c = s.y >= -band;
                    traj.push(tn, s, u.clone(), nu, c);
                })?
            };
            t = end.t;
            z = end.z;
            h = end.h;
            if let Stop::Event(k) = end.stop {
                traj.events.push(TrajectoryEvent {
                    time: t,
                    kind: if k == 0 { EventKind::YZero } else { EventKind::WZero },
                });
            }
        }
        t = b;
    }
    Ok(traj)
}

/// One embedded step of the penalty system.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyStep {
    pub state: SystemState,
    pub nu_increment: f64,
    /// Scaled local error estimate (≤ 1 passes the configured tolerances).
    pub error_estimate: f64,
}

pub fn step_penalty(
    model: &CanonicalModel,
    gamma: f64,
    s: &SystemState,
    u: &[f64],
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<PenaltyStep> {
    Dynamics::Penalty(gamma).validate()?;
    model.check_state(s)?;
    model.check_control(u)?;
    if !(dt > 0.0) {
        return Err(Error::arg("dt must be positive"));
    }
    let sys = PenaltySystem::new(model, gamma, u.to_vec(), cfg);
    let z = pack(s, 0.0);
    let d = z.len();
    let mut k1 = vec![0.0; d];
    sys.rhs(&z, &mut k1);
    let mut out = vec![0.0; d];
    let mut k7 = vec![0.0; d];
    let err = Stepper::new(d).step(&sys, &z, &k1, dt, cfg, &mut out, &mut k7);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            time: dt,
            message: "non-finite state after step".into(),
        });
    }
    let (state, nu) = unpack(model.n(), &out);
    Ok(PenaltyStep {
        state,
        nu_increment: nu,
        error_estimate: err,
    })
}

/// Fixed-step integration on a uniform grid of `steps` intervals plus the
/// control breakpoints, without event location. The map from the initial
/// state to the final state is then a fixed composition of RK steps, which is
/// what finite-difference gradient checks need.
pub fn integrate_penalty_on_grid(
    model: &CanonicalModel,
    gamma: f64,
    control: &dyn ControlSignal,
    t_final: f64,
    steps: usize,
    init: &SystemState,
) -> Result<Trajectory> {
    let cfg = IntegratorConfig::default();
    Dynamics::Penalty(gamma).validate()?;
    check_common(model, control, 0.0, t_final, &cfg, init)?;
    if steps == 0 {
        return Err(Error::arg("steps must be positive"));
    }
    let n = model.n();
    let mut grid: Vec<f64> = (0..=steps).map(|i| t_final * i as f64 / steps as f64).collect();
    grid.extend(control.breakpoints(0.0, t_final));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut traj = Trajectory::empty(Dynamics::Penalty(gamma), n, model.m());
    let mut z = pack(init, 0.0);
    let d = z.len();
    let mut st = Stepper::new(d);
    let mut k1 = vec![0.0; d];
    let mut out = vec![0.0; d];
    let mut k7 = vec![0.0; d];
    traj.push(0.0, init.clone(), control.value(0.5 * grid[1]), 0.0, init.y >= -cfg.contact_band);
    for w in grid.windows(2) {
        let u = control.value(0.5 * (w[0] + w[1]));
        let sys = PenaltySystem::new(model, gamma, u.clone(), &cfg);
        sys.rhs(&z, &mut k1);
        st.step(&sys, &z, &k1, w[1] - w[0], &cfg, &mut out, &mut k7);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                time: w[1],
                message: "non-finite state".into(),
            });
        }
        std::mem::swap(&mut z, &mut out);
        let (s, nu) = unpack(n, &z);
        let c = s.y >= -cfg.contact_band;
        traj.push(w[1], s, u, nu, c);
    }
    Ok(traj)
}

/// Solution of `ẏ = M̄ − (γ/2)·y²`, `y(0) = 0`:
/// `√(2M̄/γ)·tanh(√(M̄γ/2)·τ)`.
pub fn boundary_layer_closed_form(m_bar: f64, gamma: f64, tau: f64) -> f64 {
    (2.0 * m_bar / gamma).sqrt() * ((m_bar * gamma / 2.0).sqrt() * tau).tanh()
}

struct LayerOde {
    m_bar: f64,
    gamma: f64,
}

impl OdeSystem for LayerOde {
    fn dim(&self) -> usize {
        1
    }
    fn rhs(&self, z: &[f64], dz: &mut [f64]) {
        dz[0] = self.m_bar - 0.5 * self.gamma * z[0] * z[0];
    }
}

/// Numerical solution of the layer equation `ẏ = M̄ − (γ/2)·y²`, `y(0) = 0`,
/// sampled at the nondecreasing times `taus`.
pub fn integrate_layer_ode(m_bar: f64, gamma: f64, taus: &[f64], cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    if !(m_bar > 0.0) || !(gamma > 0.0) {
        return Err(Error::arg("M_bar and gamma must be positive"));
    }
    let sys = LayerOde { m_bar, gamma };
    let t_end = taus.iter().copied().fold(0.0, f64::max);
    let mut cfg = *cfg;
    cfg.dt_max = cfg.dt_max.min(0.05 / (m_bar * gamma).sqrt());
    let mut out = Vec::with_capacity(taus.len());
    let mut t = 0.0;
    let mut z = vec![0.0];
    let mut h = cfg.dt_max;
    for &tau in taus {
        if tau < t {
            return Err(Error::arg("taus must be nondecreasing and non-negative"));
        }
        if tau > t {
            let end = rk::run(&sys, t, tau, &z, h, &cfg, t_end.max(1e-300), &mut |_, _| {})?;
            t = end.t;
            z = end.z;
            h = end.h;
        }
        out.push(z[0]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{BangBangControl, ConstantControl};
    use crate::model::{builtin_example1, builtin_example2, ControlBox, PistonParams};

    #[test]
    fn closed_form_limits() {
        assert_eq!(boundary_layer_closed_form(1.0, 2.0, 0.0), 0.0);
        assert!((boundary_layer_closed_form(1.0, 2.0, 50.0) - 1.0).abs() < 1e-15);
        assert!((boundary_layer_closed_form(1.0, 2.0, 1.0) - 0.761594155955765).abs() < 1e-12);
    }

    #[test]
    fn layer_ode_matches_closed_form() {
        let cfg = IntegratorConfig::default().tightened(100.0);
        for &(mb, g) in &[(1.0_f64, 1e2), (10.0, 1e6)] {
            let end = 5.0 / (mb * g).sqrt();
            let taus: Vec<f64> = (0..=50).map(|i| end * i as f64 / 50.0).collect();
            let ys = integrate_layer_ode(mb, g, &taus, &cfg).unwrap();
            for (t, y) in taus.iter().zip(&ys).skip(1) {
                let e = boundary_layer_closed_form(mb, g, *t);
                assert!(((y - e) / e).abs() < 1e-6, "τ={t}: {y} vs {e}");
            }
        }
    }

    #[test]
    fn equilibrium_stays_put() {
        let m = builtin_example1();
        let tr = integrate_penalty(
            &m,
            1e4,
            &ConstantControl::scalar(0.0),
            2.0,
            &IntegratorConfig::default(),
            &SystemState::scalar(-1.0, 0.0),
        )
        .unwrap();
        assert!(tr.states.iter().all(|s| s.y == -1.0 && s.w == 0.0));
        assert!(tr.nu.iter().all(|&v| v == 0.0));
        assert_eq!(tr.t_final(), 2.0);
    }

    #[test]
    fn free_arc_is_the_double_integrator() {
        let m = builtin_example1();
        let tr = integrate_penalty(
            &m,
            1e4,
            &ConstantControl::scalar(1.0),
            1.4,
            &IntegratorConfig::default(),
            &SystemState::scalar(-1.0, 0.0),
        )
        .unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert!((s.y - (-1.0 + t * t / 2.0)).abs() < 1e-12);
            assert!((s.w - t).abs() < 1e-12);
        }
        assert_eq!(tr.final_nu(), 0.0);
    }

    #[test]
    fn wall_is_entered_and_held_near_zero() {
        let m = builtin_example1();
        let cfg = IntegratorConfig::default();
        let init = SystemState::scalar(0.0, 1.0);
        let mut peaks = Vec::new();
        for &g in &[1e4, 1e6] {
            let tr = integrate_penalty(&m, g, &ConstantControl::scalar(1.0), 1.0, &cfg, &init).unwrap();
            assert!(tr.nu.windows(2).all(|w| w[1] >= w[0]));
            peaks.push(tr.max_y());
        }
        let ratio = peaks[0] / peaks[1];
        assert!((ratio - 10.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn step_penalty_force_arithmetic() {
        let m = builtin_example1();
        let cfg = IntegratorConfig::default();
        // Tiny step: the w-increment is dt·(g − γ·y·w) to first order.
        let s = SystemState::scalar(0.1, 2.0);
        let dt = 1e-9;
        let r = step_penalty(&m, 100.0, &s, &[0.0], dt, &cfg).unwrap();
        assert!(((r.state.w - 2.0) / dt + 20.0).abs() < 1e-4);
        assert!((r.nu_increment / dt - 20.0).abs() < 1e-4);
        // y < 0: plain ODE.
        let s = SystemState::scalar(-1.0, 0.5);
        let r = step_penalty(&m, 100.0, &s, &[1.0], 0.1, &cfg).unwrap();
        assert_eq!(r.nu_increment, 0.0);
        assert!((r.state.w - 0.6).abs() < 1e-14);
        // y > 0, w < 0: no penalty.
        let s = SystemState::scalar(0.1, -1.0);
        let r = step_penalty(&m, 100.0, &s, &[0.0], 0.01, &cfg).unwrap();
        assert_eq!(r.nu_increment, 0.0);
    }

    #[test]
    fn rejects_nonpositive_gamma() {
        let m = builtin_example1();
        let e = integrate_penalty(
            &m,
            -5.0,
            &ConstantControl::scalar(0.0),
            1.0,
            &IntegratorConfig::default(),
            &SystemState::scalar(-1.0, 0.0),
        );
        assert!(matches!(e, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn control_switches_become_grid_points() {
        let m = builtin_example2(PistonParams::default()).unwrap();
        let c = BangBangControl::single(1.0, vec![0.3, 0.7], &ControlBox::symmetric(1, 1.0), 1.0).unwrap();
        let tr = integrate_penalty(
            &m,
            1e3,
            &c,
            1.0,
            &IntegratorConfig::default(),
            &SystemState::new(vec![0.0], -1.0, vec![0.0], 0.0),
        )
        .unwrap();
        assert!(tr.times.contains(&0.3) && tr.times.contains(&0.7));
        assert_eq!(tr.event_times(EventKind::ControlSwitch), vec![0.3, 0.7]);
        let i = tr.times.iter().position(|&t| t == 0.3).unwrap();
        assert_eq!(tr.controls[i], vec![1.0]);
        assert_eq!(tr.controls[i + 1], vec![-1.0]);
    }

    #[test]
    fn fixed_grid_matches_adaptive() {
        let m = builtin_example2(PistonParams::default()).unwrap();
        let init = SystemState::new(vec![0.2], -1.0, vec![0.1], 0.3);
        let c = ConstantControl::scalar(-1.0);
        let a = integrate_penalty(&m, 1e3, &c, 1.0, &IntegratorConfig::default().tightened(100.0), &init).unwrap();
        let b = integrate_penalty_on_grid(&m, 1e3, &c, 1.0, 200, &init).unwrap();
        let d: f64 = a
            .final_state()
            .to_flat()
            .iter()
            .zip(b.final_state().to_flat())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-9, "{d}");
    }
}
