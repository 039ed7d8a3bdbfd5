//! Dormand–Prince 5(4) with step-size control and zero-crossing events.
//!
//! Events are located by re-stepping from the start of the offending step
//! with a shortened step (Illinois iteration), so the located state is an
//! ordinary RK state. The driver stops just past the root, where the event
//! function already has its new sign.

use super::IntegratorConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Rising,
    Falling,
    Either,
}

impl Direction {
    fn crossed(self, before: f64, after: f64) -> bool {
        let up = before < 0.0 && after >= 0.0;
        let down = before > 0.0 && after <= 0.0;
        match self {
            Direction::Rising => up,
            Direction::Falling => down,
            Direction::Either => up || down,
        }
    }
}

pub(crate) trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, z: &[f64], dz: &mut [f64]);

    fn n_events(&self) -> usize {
        0
    }
    fn event(&self, _k: usize, _z: &[f64]) -> f64 {
        0.0
    }
    fn direction(&self, _k: usize) -> Direction {
        Direction::Either
    }
    /// Component whose cubic interpolant is sampled inside each step to catch
    /// double crossings of event `k`; the event must equal that component.
    fn dip_component(&self, _k: usize) -> Option<usize> {
        None
    }
    fn max_step(&self, _z: &[f64]) -> f64 {
        f64::INFINITY
    }
    /// Components included in the error norm (defaults to all).
    fn error_components(&self) -> usize {
        self.dim()
    }
}

// Autonomous systems only, so the stage nodes c_i are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

pub(crate) struct Stepper {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Stepper {
    pub(crate) fn new(dim: usize) -> Self {
        Stepper {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
        }
    }

    /// One step of size `h` from `z` with `k1 = f(z)`. Writes the fifth-order
    /// solution into `out` and `f(out)` into `k7`; returns the scaled error norm
    /// (≤ 1 means acceptable).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step<S: OdeSystem + ?Sized>(
        &mut self,
        sys: &S,
        z: &[f64],
        k1: &[f64],
        h: f64,
        cfg: &IntegratorConfig,
        out: &mut [f64],
        k7: &mut [f64],
    ) -> f64 {
        let d = z.len();
        let [_, k2, k3, k4, k5, k6, _] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..d {
            tmp[i] = z[i] + h * A21 * k1[i];
        }
        sys.rhs(tmp, k2);
        for i in 0..d {
            tmp[i] = z[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(tmp, k3);
        for i in 0..d {
            tmp[i] = z[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(tmp, k4);
        for i in 0..d {
            tmp[i] = z[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(tmp, k5);
        for i in 0..d {
            tmp[i] = z[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(tmp, k6);
        for i in 0..d {
            out[i] = z[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        sys.rhs(out, k7);
        let mut err: f64 = 0.0;
        for i in 0..sys.error_components() {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = cfg.abs_tol + cfg.rel_tol * z[i].abs().max(out[i].abs());
            let r = (e / sc).abs();
            if r.is_nan() {
                return f64::INFINITY;
            }
            err = err.max(r);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        err
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Stop {
    End,
    Event(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct SegmentEnd {
    pub t: f64,
    pub z: Vec<f64>,
    pub stop: Stop,
    /// Step size to try next.
    pub h: f64,
}

/// Integrates from `t0` towards `t1`, calling `node` after every accepted step.
/// Stops at `t1` or just past the first event crossing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    t1: f64,
    z0: &[f64],
    h0: f64,
    cfg: &IntegratorConfig,
    t_scale: f64,
    node: &mut dyn FnMut(f64, &[f64]),
) -> Result<SegmentEnd> {
    let d = sys.dim();
    let mut st = Stepper::new(d);
    let mut t = t0;
    let mut z = z0.to_vec();
    let mut k1 = vec![0.0; d];
    sys.rhs(&z, &mut k1);
    let mut znew = vec![0.0; d];
    let mut k7 = vec![0.0; d];
    let ne = sys.n_events();
    let mut e_old: Vec<f64> = (0..ne).map(|k| sys.event(k, &z)).collect();
    let mut h = h0.min(cfg.dt_max).max(0.0);
    if !(h > 0.0) {
        h = cfg.dt_max.min((t1 - t0).abs().max(1e-12));
    }
    let h_min = 1e-14 * t_scale.abs().max(1e-300);
    let mut steps = 0usize;
    let mut h_next_out = h;

    while t < t1 {
        steps += 1;
        if steps > cfg.max_steps {
            return Err(Error::Integration {
                time: t,
                message: format!("exceeded {} steps", cfg.max_steps),
            });
        }
        let cap = cfg.dt_max.min(sys.max_step(&z));
        let mut hh = h.min(cap);
        let mut last = false;
        if t + hh >= t1 || (t1 - (t + hh)) <= 1e-13 * t1.abs().max(1.0) {
            hh = t1 - t;
            last = true;
        }
        let err = st.step(sys, &z, &k1, hh, cfg, &mut znew, &mut k7);
        if !(err <= 1.0) {
            let fac = if err.is_finite() {
                (0.9 * err.powf(-0.2)).clamp(0.2, 1.0)
            } else {
                0.2
            };
            h = hh * fac;
            if h < h_min {
                return Err(Error::Stiffness { time: t, dt: h });
            }
            continue;
        }
        let grow = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };

        // Event detection on the accepted step.
        let mut first: Option<(usize, f64)> = None;
        for (k, &e_prev) in e_old.iter().enumerate().take(ne) {
            let e_new = sys.event(k, &znew);
            let dir = sys.direction(k);
            let mut bracket_hi = if dir.crossed(e_prev, e_new) { Some(1.0) } else { None };
            if bracket_hi.is_none() && e_prev != 0.0 && e_prev.signum() == e_new.signum() {
                if let Some(c) = sys.dip_component(k) {
                    bracket_hi = dip_bracket(dir, z[c], znew[c], hh * k1[c], hh * k7[c]);
                }
            }
            let Some(hi) = bracket_hi else { continue };
            if let Some(theta) =
                locate(sys, &mut st, &z, &k1, hh, cfg, k, e_prev, hi, t)?
            {
                if first.is_none_or(|(_, f)| theta < f) {
                    first = Some((k, theta));
                }
            }
        }

        if let Some((k, theta)) = first {
            let he = hh * theta;
            let mut ze = vec![0.0; d];
            let mut kd = vec![0.0; d];
            st.step(sys, &z, &k1, he, cfg, &mut ze, &mut kd);
            let te = if theta >= 1.0 && last { t1 } else { t + he };
            node(te, &ze);
            return Ok(SegmentEnd {
                t: te,
                z: ze,
                stop: Stop::Event(k),
                h: hh.max(h_min * 10.0),
            });
        }

        t = if last { t1 } else { t + hh };
        std::mem::swap(&mut z, &mut znew);
        std::mem::swap(&mut k1, &mut k7);
        for (k, e) in e_old.iter_mut().enumerate() {
            *e = sys.event(k, &z);
        }
        node(t, &z);
        if !last {
            h = hh * grow;
            h_next_out = h;
        } else {
            h_next_out = h.max(hh);
        }
    }
    Ok(SegmentEnd {
        t,
        z,
        stop: Stop::End,
        h: h_next_out,
    })
}

/// Samples the cubic Hermite interpolant of one component at interior points
/// and returns the first fraction where it has crossed in `dir`.
fn dip_bracket(dir: Direction, y0: f64, y1: f64, d0: f64, d1: f64) -> Option<f64> {
    for &s in &[0.25, 0.5, 0.75] {
        let s2 = s * s;
        let s3 = s2 * s;
        let y = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * d0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * d1;
        if dir.crossed(y0, y) {
            return Some(s);
        }
    }
    None
}

/// Illinois iteration on the step fraction. Returns the fraction just past the
/// root, or `None` if re-stepping shows no crossing after all.
#[allow(clippy::too_many_arguments)]
fn locate<S: OdeSystem + ?Sized>(
    sys: &S,
    st: &mut Stepper,
    z: &[f64],
    k1: &[f64],
    h: f64,
    cfg: &IntegratorConfig,
    k: usize,
    e0: f64,
    hi0: f64,
    t: f64,
) -> Result<Option<f64>> {
    let d = z.len();
    let mut zt = vec![0.0; d];
    let mut kt = vec![0.0; d];
    let mut eval = |theta: f64, st: &mut Stepper| -> f64 {
        st.step(sys, z, k1, h * theta, cfg, &mut zt, &mut kt);
        sys.event(k, &zt)
    };
    let dir = sys.direction(k);
    let (mut lo, mut flo) = (0.0, e0);
    let (mut hi, mut fhi) = (hi0, eval(hi0, st));
    if !dir.crossed(flo, fhi) {
        return Ok(None);
    }
    let tol = 1e-13 * t.abs().max(1.0) / h.abs().max(1e-300);
    let mut side = 0i32;
    for _ in 0..200 {
        if (hi - lo) <= tol || fhi == 0.0 {
            return Ok(Some(hi));
        }
        let mut mid = (lo * fhi - hi * flo) / (fhi - flo);
        if !(mid > lo && mid < hi) {
            mid = 0.5 * (lo + hi);
        }
        let fm = eval(mid, st);
        if fm == 0.0 {
            return Ok(Some(mid));
        }
        if dir.crossed(flo, fm) {
            hi = mid;
            fhi = fm;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        } else {
            lo = mid;
            flo = fm;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        }
    }
    Err(Error::EventLocation {
        lo: t + lo * h,
        hi: t + hi * h,
    })
}
