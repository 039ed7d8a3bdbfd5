//! Integration of the penalty system and of the limit (impact/contact) system.
//!
//! Penalty system, for a fixed stiffness `γ > 0`:
//!
//! ```text
//! ẋ = v,  ẏ = w,  v̇ = f(x,y,v,w,u),  ẇ = g(x,y,v,w,u) − γ·y₊·w₊
//! ```
//!
//! with the cumulative impulse `ν(t) = ∫ γ·y₊·w₊` carried as an extra
//! component. The limit system keeps `y ≤ 0`: an impact adds an atom `w(t−)`
//! to `ν` and sets `w = 0`, and a contact arc holds `y = w = 0` while the wall
//! force `g` is non-negative.

mod limit;
mod penalty;
pub(crate) mod rk;

use serde::{Deserialize, Serialize};

use crate::control::ControlSignal;
use crate::error::{Error, Result};
use crate::model::{CanonicalModel, SystemState};

pub use limit::{integrate_limit, integrate_limit_from};
pub use penalty::{
    boundary_layer_closed_form, integrate_layer_ode, integrate_penalty, integrate_penalty_from,
    integrate_penalty_on_grid,
    step_penalty, PenaltyStep,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub dt_max: f64,
    /// Half-width of the `|y|` band treated as contact. Also used as the
    /// speed below which an arrival at the wall counts as tangential.
    pub contact_band: f64,
    /// Inside the contact band the step is capped at `gamma_step_cap/√γ`.
    pub gamma_step_cap: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            dt_max: 1e-2,
            contact_band: 1e-9,
            gamma_step_cap: 0.1,
            max_steps: 20_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("dt_max", self.dt_max),
            ("contact_band", self.contact_band),
            ("gamma_step_cap", self.gamma_step_cap),
        ];
        for (k, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("integrator.{k}"), "must be positive"));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::config("integrator.max_steps", "must be positive"));
        }
        Ok(())
    }

    /// Same configuration with both tolerances divided by `factor`.
    pub fn tightened(&self, factor: f64) -> Self {
        IntegratorConfig {
            rel_tol: self.rel_tol / factor,
            abs_tol: self.abs_tol / factor,
            ..*self
        }
    }
}

/// Which dynamics produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dynamics {
    Penalty(f64),
    Limit,
}

impl Dynamics {
    pub fn gamma(&self) -> Option<f64> {
        match self {
            Dynamics::Penalty(g) => Some(*g),
            Dynamics::Limit => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Dynamics::Penalty(g) => format!("{g:e}"),
            Dynamics::Limit => "limit".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dynamics::Penalty(g) if !(*g > 0.0) || !g.is_finite() => {
                Err(Error::arg("gamma must be positive"))
            }
            _ => Ok(()),
        }
    }
}

impl Serialize for Dynamics {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Dynamics::Penalty(g) => s.serialize_f64(*g),
            Dynamics::Limit => s.serialize_str("limit"),
        }
    }
}

impl<'de> Deserialize<'de> for Dynamics {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) => Ok(Dynamics::Penalty(g)),
            Raw::Str(s) if s.eq_ignore_ascii_case("limit") => Ok(Dynamics::Limit),
            Raw::Str(s) => s
                .parse::<f64>()
                .map(Dynamics::Penalty)
                .map_err(|_| serde::de::Error::custom(format!("expected a number or \"limit\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// `y` crossed zero (penalty runs).
    YZero,
    /// `w` crossed zero (penalty runs).
    WZero,
    /// Arrival at the wall with positive speed; an atom was added to ν.
    Impact,
    ContactEnter,
    ContactExit,
    ControlSwitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub time: f64,
    pub mass: f64,
}

/// Integrated trajectory.
///
/// `times` is nondecreasing. A time appears twice only at an impact of the
/// limit system: first with the state before the jump, then after it.
/// `controls[i]` is the control used on `(times[i-1], times[i]]`;
/// `controls[0]` is the value right after the start.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dynamics: Dynamics,
    pub n: usize,
    pub m: usize,
    pub times: Vec<f64>,
    pub states: Vec<SystemState>,
    pub controls: Vec<Vec<f64>>,
    pub nu: Vec<f64>,
    /// Node lies on a contact arc (limit) or inside the contact band (penalty).
    pub contact: Vec<bool>,
    pub atoms: Vec<Atom>,
    pub events: Vec<TrajectoryEvent>,
}

impl Trajectory {
    pub(crate) fn empty(dynamics: Dynamics, n: usize, m: usize) -> Self {
        Trajectory {
            dynamics,
            n,
            m,
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            nu: Vec::new(),
            contact: Vec::new(),
            atoms: Vec::new(),
            events: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, t: f64, s: SystemState, u: Vec<f64>, nu: f64, contact: bool) {
        // ν is a quadrature of a non-negative integrand; guard against
        // round-off dips from the negative RK weight.
        let nu = match self.nu.last() {
            Some(&prev) if nu < prev => prev,
            _ => nu,
        };
        self.times.push(t);
        self.states.push(s);
        self.controls.push(u);
        self.nu.push(nu);
        self.contact.push(contact);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_final(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn final_state(&self) -> &SystemState {
        self.states.last().expect("trajectory has at least one node")
    }

    pub fn final_nu(&self) -> f64 {
        *self.nu.last().unwrap_or(&0.0)
    }

    pub fn max_y(&self) -> f64 {
        self.states.iter().map(|s| s.y).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Time of the node with the largest `y`.
    pub fn argmax_y(&self) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for (t, s) in self.times.iter().zip(&self.states) {
            if s.y > best.0 {
                best = (s.y, *t);
            }
        }
        best.1
    }

    pub fn sup_state_norm(&self) -> f64 {
        self.states.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }

    pub fn sup_abs_w(&self) -> f64 {
        self.states.iter().map(|s| s.w.abs()).fold(0.0, f64::max)
    }

    /// Index `i` with `times[i] ≤ t`, taking the right limit at duplicated times.
    fn locate(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.saturating_sub(1).min(self.times.len() - 1)
    }

    /// Linear interpolation of the flat state and ν at `t` (right limit at jumps).
    pub fn sample(&self, t: f64) -> (Vec<f64>, f64) {
        let i = self.locate(t);
        if i + 1 >= self.times.len() || t <= self.times[i] {
            return (self.states[i].to_flat(), self.nu[i]);
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let a = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
        let z0 = self.states[i].to_flat();
        let z1 = self.states[i + 1].to_flat();
        let z = z0.iter().zip(&z1).map(|(p, q)| p + a * (q - p)).collect();
        (z, self.nu[i] + a * (self.nu[i + 1] - self.nu[i]))
    }

    pub fn impact_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Impact)
            .map(|e| e.time)
            .collect()
    }

    pub fn event_times(&self, kind: EventKind) -> Vec<f64> {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.time).collect()
    }

    /// First time `y` reaches the band `y ≥ −contact_band`, if any.
    pub fn first_contact_time(&self, band: f64) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.states)
            .find(|(_, s)| s.y >= -band)
            .map(|(t, _)| *t)
    }
}

/// Penalty or limit integration from `init` at time 0.
pub fn integrate(
    model: &CanonicalModel,
    dynamics: Dynamics,
    control: &dyn ControlSignal,
    t_final: f64,
    cfg: &IntegratorConfig,
    init: &SystemState,
) -> Result<Trajectory> {
    match dynamics {
        Dynamics::Penalty(g) => integrate_penalty(model, g, control, t_final, cfg, init),
        Dynamics::Limit => integrate_limit(model, control, t_final, cfg, init),
    }
}

/// Integration over `[t0, t1]` starting from `(init, nu0)`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_from(
    model: &CanonicalModel,
    dynamics: Dynamics,
    control: &dyn ControlSignal,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    init: &SystemState,
    nu0: f64,
) -> Result<Trajectory> {
    match dynamics {
        Dynamics::Penalty(g) => integrate_penalty_from(model, g, control, t0, t1, cfg, init, nu0),
        Dynamics::Limit => integrate_limit_from(model, control, t0, t1, cfg, init, nu0),
    }
}

pub(crate) fn check_common(
    model: &CanonicalModel,
    control: &dyn ControlSignal,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    init: &SystemState,
) -> Result<()> {
    model.check_state(init)?;
    if !init.is_finite() {
        return Err(Error::contract("initial state has non-finite entries"));
    }
    if control.dim() != model.m() {
        return Err(Error::contract(format!(
            "control has dimension {}, model expects {}",
            control.dim(),
            model.m()
        )));
    }
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::arg("integration interval must satisfy t0 ≤ t1"));
    }
    cfg.validate()
}

/// Rate `(v, w, f, g − γ·y₊·w₊)` of the flat state; `held` freezes `(y, w)`
/// on a contact arc of the limit system.
pub(crate) fn state_rate(model: &CanonicalModel, gamma: f64, z: &[f64], u: &[f64], held: bool) -> Vec<f64> {
    let n = model.n();
    let (x, y, v, w) = (&z[..n], z[n], &z[n + 1..2 * n + 1], z[2 * n + 1]);
    let mut d = Vec::with_capacity(2 * n + 2);
    d.extend_from_slice(v);
    d.push(if held { 0.0 } else { w });
    let mut f = vec![0.0; n];
    model.f_into(x, y, v, w, u, &mut f);
    d.extend(f);
    let g = model.g_raw(x, y, v, w, u);
    d.push(if held { 0.0 } else { g - gamma * y.max(0.0) * w.max(0.0) });
    d
}

/// Cubic Hermite interpolant at `θ ∈ [0, 1]` of an interval of length `h`.
pub(crate) fn hermite(za: &[f64], da: &[f64], zb: &[f64], db: &[f64], h: f64, theta: f64) -> Vec<f64> {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    (0..za.len())
        .map(|k| h00 * za[k] + h10 * h * da[k] + h01 * zb[k] + h11 * h * db[k])
        .collect()
}

/// Segment boundaries `t0 = s_0 < s_1 < … < s_k = t1` at control breakpoints.
pub(crate) fn segments(control: &dyn ControlSignal, t0: f64, t1: f64) -> Vec<f64> {
    let mut s = vec![t0];
    s.extend(control.breakpoints(t0, t1));
    s.push(t1);
    s.dedup();
    s
}
