use super::penalty::{pack, unpack};
use super::rk::{self, Direction, OdeSystem, Stop};
use super::{check_common, segments, Atom, Dynamics, EventKind, IntegratorConfig, Trajectory, TrajectoryEvent};
use crate::control::ControlSignal;
use crate::error::{Error, Result};
use crate::model::{dot, CanonicalModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Free,
    Contact,
}

/// `y < 0`: the unconstrained ODE; stops when `y` reaches zero.
struct FreeSystem<'a> {
    model: &'a CanonicalModel,
    u: Vec<f64>,
}

impl OdeSystem for FreeSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.model.n() + 3
    }

    fn rhs(&self, z: &[f64], dz: &mut [f64]) {
        let n = self.model.n();
        let (x, y, v, w) = (&z[..n], z[n], &z[n + 1..2 * n + 1], z[2 * n + 1]);
        dz[..n].copy_from_slice(v);
        dz[n] = w;
        self.model.f_into(x, y, v, w, &self.u, &mut dz[n + 1..2 * n + 1]);
        dz[2 * n + 1] = self.model.g_raw(x, y, v, w, &self.u);
        dz[2 * n + 2] = 0.0;
    }

    fn n_events(&self) -> usize {
        1
    }

    fn event(&self, _k: usize, z: &[f64]) -> f64 {
        z[self.model.n()]
    }

    fn direction(&self, _k: usize) -> Direction {
        Direction::Rising
    }

    fn dip_component(&self, _k: usize) -> Option<usize> {
        Some(self.model.n())
    }
}

/// `y = w = 0` held; ν grows at the rate of the wall force `g`. Stops when
/// `g` turns negative.
struct ContactSystem<'a> {
    model: &'a CanonicalModel,
    u: Vec<f64>,
    singular: bool,
}

impl ContactSystem<'_> {
    fn control(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        if self.singular {
            holding_control(self.model, x, v, &self.u)
        } else {
            self.u.clone()
        }
    }

    fn force(&self, z: &[f64]) -> f64 {
        let n = self.model.n();
        let (x, v) = (&z[..n], &z[n + 1..2 * n + 1]);
        let u = self.control(x, v);
        self.model.g_raw(x, 0.0, v, 0.0, &u)
    }
}

impl OdeSystem for ContactSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.model.n() + 3
    }

    fn rhs(&self, z: &[f64], dz: &mut [f64]) {
        let n = self.model.n();
        let (x, v) = (&z[..n], &z[n + 1..2 * n + 1]);
        let u = self.control(x, v);
        dz[..n].copy_from_slice(v);
        dz[n] = 0.0;
        self.model.f_into(x, 0.0, v, 0.0, &u, &mut dz[n + 1..2 * n + 1]);
        dz[2 * n + 1] = 0.0;
        dz[2 * n + 2] = self.model.g_raw(x, 0.0, v, 0.0, &u);
    }

    fn n_events(&self) -> usize {
        1
    }

    fn event(&self, _k: usize, z: &[f64]) -> f64 {
        self.force(z)
    }

    fn direction(&self, _k: usize) -> Direction {
        Direction::Falling
    }
}

/// Control closest to `u` along `g3` that makes the wall force vanish at
/// `y = w = 0`, clipped to the box. Falls back to `u` when `|g3| ≤ 1e-12`.
pub(crate) fn holding_control(model: &CanonicalModel, x: &[f64], v: &[f64], u: &[f64]) -> Vec<f64> {
    let s = crate::model::SystemState {
        x: x.to_vec(),
        y: 0.0,
        v: v.to_vec(),
        w: 0.0,
    };
    let (_, g3) = model.control_coefficients(&s);
    let nn = dot(&g3, &g3);
    if nn.sqrt() <= 1e-12 {
        return u.to_vec();
    }
    let g = model.g_raw(x, 0.0, v, 0.0, u);
    let mut out: Vec<f64> = u.iter().zip(&g3).map(|(ui, gi)| ui - g * gi / nn).collect();
    model.control_box().clamp(&mut out);
    out
}

/// Limit trajectory on `[0, t_final]`.
pub fn integrate_limit(
    model: &CanonicalModel,
    control: &dyn ControlSignal,
    t_final: f64,
    cfg: &IntegratorConfig,
    init: &crate::model::SystemState,
) -> Result<Trajectory> {
    if !(t_final > 0.0) {
        return Err(Error::arg("t_final must be positive"));
    }
    integrate_limit_from(model, control, 0.0, t_final, cfg, init, 0.0)
}

struct Run<'a> {
    model: &'a CanonicalModel,
    cfg: &'a IntegratorConfig,
    traj: Trajectory,
    z: Vec<f64>,
    mode: Mode,
}

impl Run<'_> {
    fn n(&self) -> usize {
        self.model.n()
    }

    fn push_current(&mut self, t: f64, u: &[f64]) {
        let (s, nu) = unpack(self.n(), &self.z);
        self.traj.push(t, s, u.to_vec(), nu, self.mode == Mode::Contact);
    }

    fn wall_force(&self, u: &[f64], singular: bool) -> f64 {
        let n = self.n();
        let (x, v) = (&self.z[..n], &self.z[n + 1..2 * n + 1]);
        let uu = if singular {
            holding_control(self.model, x, v, u)
        } else {
            u.to_vec()
        };
        self.model.g_raw(x, 0.0, v, 0.0, &uu)
    }

    fn effective_control(&self, u: &[f64], singular: bool) -> Vec<f64> {
        if self.mode == Mode::Contact && singular {
            let n = self.n();
            holding_control(self.model, &self.z[..n], &self.z[n + 1..2 * n + 1], u)
        } else {
            u.to_vec()
        }
    }

    /// Decides the mode at time `t` and applies an impact if the state is at
    /// the wall moving outward.
    fn settle(&mut self, t: f64, u: &[f64], singular: bool) {
        let n = self.n();
        let band = self.cfg.contact_band;
        let y = self.z[n];
        let w = self.z[2 * n + 1];
        let before = self.mode;
        if y < -band || w < -band {
            self.mode = Mode::Free;
        } else if self.mode == Mode::Contact && y == 0.0 && w == 0.0 {
            // Ties keep the contact.
            if self.wall_force(u, singular) < 0.0 {
                self.mode = Mode::Free;
            }
        } else {
            if w > 0.0 {
                // Impact (or tangential arrival when w ≤ band): kill the
                // outward velocity and book it as impulse. The node before
                // the jump is already on the trajectory.
                self.z[2 * n + 2] += w;
                if w > band {
                    self.traj.atoms.push(Atom { time: t, mass: w });
                    self.traj.events.push(TrajectoryEvent {
                        time: t,
                        kind: EventKind::Impact,
                    });
                }
            }
            let force = self.wall_force(u, singular);
            if force >= 0.0 {
                self.z[n] = 0.0;
                self.z[2 * n + 1] = 0.0;
                self.mode = Mode::Contact;
            } else {
                self.z[n] = y.min(0.0);
                self.z[2 * n + 1] = w.min(0.0);
                self.mode = Mode::Free;
            }
            if w > 0.0 {
                let u_now = self.effective_control(u, singular);
                self.push_current(t, &u_now);
            }
        }
        match (before, self.mode) {
            (Mode::Free, Mode::Contact) => self.traj.events.push(TrajectoryEvent {
                time: t,
                kind: EventKind::ContactEnter,
            }),
            (Mode::Contact, Mode::Free) => self.traj.events.push(TrajectoryEvent {
                time: t,
                kind: EventKind::ContactExit,
            }),
            _ => {}
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn integrate_limit_from(
    model: &CanonicalModel,
    control: &dyn ControlSignal,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    init: &crate::model::SystemState,
    nu0: f64,
) -> Result<Trajectory> {
    check_common(model, control, t0, t1, cfg, init)?;
    if init.y > cfg.contact_band {
        return Err(Error::contract(format!(
            "limit integration needs y ≤ 0 initially, got y = {}",
            init.y
        )));
    }
    let n = model.n();
    let bounds = segments(control, t0, t1);
    let t_scale = t1.abs().max(t1 - t0);
    let mut run = Run {
        model,
        cfg,
        traj: Trajectory::empty(Dynamics::Limit, n, model.m()),
        z: pack(init, nu0),
        mode: Mode::Free,
    };
    let mut h = cfg.dt_max.min((t1 - t0).max(1e-12) * 1e-2);
    let mut t = t0;

    for (si, seg) in bounds.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        let mid = 0.5 * (a + b);
        let u = control.value(mid);
        let singular = control.singular(mid);
        if si == 0 {
            run.push_current(t0, &u);
        } else {
            run.traj.events.push(TrajectoryEvent {
                time: a,
                kind: EventKind::ControlSwitch,
            });
        }
        run.settle(a, &u, singular);
        if si == 0 && run.traj.len() == 1 && run.mode == Mode::Contact {
            // Started in contact: the first node already reflects it.
            run.traj.contact[0] = true;
        }
        while t < b {
            let end = match run.mode {
                Mode::Free => {
                    let sys = FreeSystem {
                        model,
                        u: u.clone(),
                    };
                    let traj = &mut run.traj;
                    rk::run(&sys, t, b, &run.z, h, cfg, t_scale, &mut |tn, zn| {
                        let (s, nu) = unpack(n, zn);
                        traj.push(tn, s, u.clone(), nu, false);
                    })?
                }
                Mode::Contact => {
                    let sys = ContactSystem {
                        model,
                        u: u.clone(),
                        singular,
                    };
                    let traj = &mut run.traj;
                    rk::run(&sys, t, b, &run.z, h, cfg, t_scale, &mut |tn, zn| {
                        let (s, nu) = unpack(n, zn);
                        let uu = sys.control(&s.x, &s.v);
                        traj.push(tn, s, uu, nu, true);
                    })?
                }
            };
            t = end.t;
            run.z = end.z;
            h = end.h;
            if let Stop::Event(_) = end.stop {
                match run.mode {
                    Mode::Free => run.settle(t, &u, singular),
                    Mode::Contact => {
                        run.mode = Mode::Free;
                        run.traj.events.push(TrajectoryEvent {
                            time: t,
                            kind: EventKind::ContactExit,
                        });
                    }
                }
            }
        }
        t = b;
    }
    Ok(run.traj)
}

#[cfg(test)]
mod tests {
    use super::super::integrate_penalty;
    use super::*;
    use crate::control::{BangBangControl, ConstantControl};
    use crate::model::{builtin_example1, builtin_example2, ControlBox, PistonParams, SystemState};

    fn cfg() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    #[test]
    fn impact_time_and_atom_match_the_quadratic() {
        let m = builtin_example1();
        let tr = integrate_limit(&m, &ConstantControl::scalar(1.0), 1.0, &cfg(), &SystemState::scalar(-0.5, 1.0)).unwrap();
        assert_eq!(tr.atoms.len(), 1);
        let t_hit = 2f64.sqrt() - 1.0;
        assert!((tr.atoms[0].time - t_hit).abs() < 1e-11);
        assert!((tr.atoms[0].mass - 2f64.sqrt()).abs() < 1e-10);
        // Contact persists with ν growing at rate g = 1.
        let nu_end = tr.final_nu();
        assert!((nu_end - (2f64.sqrt() + (1.0 - t_hit))).abs() < 1e-9);
        assert!(tr.states.iter().all(|s| s.y <= 1e-9));
        let k = tr.times.iter().position(|&t| t >= t_hit).unwrap();
        assert!(tr.states[k].w > 1.0, "left limit kept");
        assert_eq!(tr.states[k + 1].w, 0.0, "w(t+) = 0");
        assert_eq!(tr.times[k], tr.times[k + 1]);
        assert!(tr.final_state().y == 0.0 && tr.final_state().w == 0.0);
    }

    #[test]
    fn switching_to_minus_one_releases_contact() {
        let m = builtin_example1();
        let c = BangBangControl::single(1.0, vec![1.0], &ControlBox::symmetric(1, 1.0), 2.0).unwrap();
        let tr = integrate_limit(&m, &c, 2.0, &cfg(), &SystemState::scalar(-0.5, 1.0)).unwrap();
        assert_eq!(tr.event_times(EventKind::ContactExit), vec![1.0]);
        let s = tr.final_state();
        assert!((s.y + 0.5).abs() < 1e-10 && (s.w + 1.0).abs() < 1e-10);
        assert!(tr.nu.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn starting_in_contact_with_positive_force() {
        let m = builtin_example1();
        let tr = integrate_limit(&m, &ConstantControl::scalar(1.0), 2.0, &cfg(), &SystemState::scalar(0.0, 0.0)).unwrap();
        assert!(tr.contact.iter().all(|&c| c));
        assert!((tr.final_nu() - 2.0).abs() < 1e-12);
        assert!(tr.atoms.is_empty());
    }

    #[test]
    fn rejects_positive_initial_y() {
        let m = builtin_example1();
        let r = integrate_limit(&m, &ConstantControl::scalar(1.0), 1.0, &cfg(), &SystemState::scalar(0.1, 0.0));
        assert!(matches!(r, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn singular_arc_holds_the_wall_without_force() {
        let m = builtin_example1();
        let c = BangBangControl::single(1.0, vec![], &ControlBox::symmetric(1, 1.0), 1.0)
            .unwrap()
            .with_singular_arcs(vec![(0.5, 1.0)]);
        let tr = integrate_limit(&m, &c, 1.0, &cfg(), &SystemState::scalar(0.0, 0.0)).unwrap();
        assert!((tr.final_nu() - 0.5).abs() < 1e-12);
        assert_eq!(tr.controls.last().unwrap(), &vec![0.0]);
    }

    #[test]
    fn example2_impact_then_contact() {
        let m = builtin_example2(PistonParams::default()).unwrap();
        let init = SystemState::new(vec![0.0], -0.5, vec![0.0], 1.5);
        let tr = integrate_limit(&m, &ConstantControl::scalar(1.0), 3.0, &cfg(), &init).unwrap();
        assert!(!tr.atoms.is_empty());
        assert!(tr.states.iter().all(|s| s.y <= 1e-9));
        for t in tr.impact_times() {
            let k = tr.times.iter().rposition(|&s| s == t).unwrap();
            assert_eq!(tr.states[k].w, 0.0);
        }
    }

    #[test]
    fn penalty_approaches_limit() {
        let m = builtin_example1();
        let init = SystemState::scalar(-0.5, 1.0);
        let c = ConstantControl::scalar(1.0);
        let lim = integrate_limit(&m, &c, 1.0, &cfg(), &init).unwrap();
        let pen = integrate_penalty(&m, 1e6, &c, 1.0, &cfg(), &init).unwrap();
        let (zl, _) = lim.sample(1.0);
        let (zp, _) = pen.sample(1.0);
        assert!((zl[0] - zp[0]).abs() < 5e-3);
        assert!((lim.final_nu() - pen.final_nu()).abs() < 2e-2);
    }
}
