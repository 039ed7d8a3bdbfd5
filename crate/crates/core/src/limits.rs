//! γ-sweeps of the penalty system and convergence certification.
//!
//! A sweep integrates the same scenario for increasing stiffness values and
//! compares consecutive members on a shared grid. Uniform convergence is
//! checked for `(x, y, v)`; for `w` and `ν` the comparison is pointwise off
//! the impact layers and through the running integral of `ν`, respectively.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlSignal;
use crate::error::{Error, Result};
use crate::integrator::{integrate_penalty, Atom, Dynamics, EventKind, IntegratorConfig, Trajectory};
use crate::model::{CanonicalModel, SystemState};

/// Number of points of the shared resampling grid.
pub const SWEEP_GRID: usize = 2000;

#[derive(Debug, Clone)]
pub struct GammaSweep {
    pub gammas: Vec<f64>,
    pub t_final: f64,
    pub init: SystemState,
    pub trajectories: Vec<Trajectory>,
    pub grid: Vec<f64>,
    /// Flat states `(x, y, v, w)` on `grid`, one row set per γ.
    pub states: Vec<Vec<Vec<f64>>>,
    /// Cumulative ν on `grid`, one per γ.
    pub nu: Vec<Vec<f64>>,
}

pub fn validate_gammas(gammas: &[f64]) -> Result<()> {
    if gammas.len() < 3 {
        return Err(Error::arg("at least 3 gammas required"));
    }
    if gammas.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        return Err(Error::arg("gamma must be positive"));
    }
    if gammas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("gammas must be strictly increasing"));
    }
    Ok(())
}

/// Integrates every γ (in parallel) and resamples onto a shared uniform grid.
pub fn gamma_sweep(
    model: &CanonicalModel,
    control: &dyn ControlSignal,
    init: &SystemState,
    t_final: f64,
    gammas: &[f64],
    cfg: &IntegratorConfig,
) -> Result<GammaSweep> {
    validate_gammas(gammas)?;
    let runs: Vec<Result<Trajectory>> = gammas
        .par_iter()
        .map(|&g| {
            integrate_penalty(model, g, control, t_final, cfg, init).map_err(|e| Error::Sweep {
                gamma: g,
                source: Box::new(e),
            })
        })
        .collect();
    let trajectories = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let grid: Vec<f64> = (0..SWEEP_GRID)
        .map(|i| t_final * i as f64 / (SWEEP_GRID - 1) as f64)
        .collect();
    let mut states = Vec::with_capacity(gammas.len());
    let mut nu = Vec::with_capacity(gammas.len());
    for tr in &trajectories {
        let (s, n): (Vec<_>, Vec<_>) = grid.iter().map(|&t| tr.sample(t)).unzip();
        states.push(s);
        nu.push(n);
    }
    Ok(GammaSweep {
        gammas: gammas.to_vec(),
        t_final,
        init: init.clone(),
        trajectories,
        grid,
        states,
        nu,
    })
}

/// Least-squares slope of `log(max_y)` against `log(γ)`. Pairs with
/// non-positive `max_y` are skipped.
pub fn fit_layer_exponent(pairs: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(g, y)| *g > 0.0 && *y > 0.0 && g.is_finite() && y.is_finite())
        .map(|(g, y)| (g.ln(), y.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Fit(format!(
            "need at least 3 pairs with positive max y, have {}",
            pts.len()
        )));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("all gammas coincide".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeMeasure {
    pub grid: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub atoms: Vec<Atom>,
}

impl CumulativeMeasure {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0) - self.cumulative.first().copied().unwrap_or(0.0)
    }
}

/// Width of the window used to lump penalty impulses into atoms.
pub fn atom_window(gamma: f64) -> f64 {
    5.0 / gamma.sqrt()
}

/// Largest increment of `ν` over any window of the atom width (limit
/// trajectories: the largest atom).
pub fn max_window_increment(traj: &Trajectory) -> f64 {
    match traj.dynamics {
        Dynamics::Limit => traj.atoms.iter().map(|a| a.mass).fold(0.0, f64::max),
        Dynamics::Penalty(g) => {
            let w = atom_window(g);
            (0..traj.len()).map(|i| window_increment(traj, i, w)).fold(0.0, f64::max)
        }
    }
}

fn window_increment(traj: &Trajectory, i: usize, width: f64) -> f64 {
    let t = traj.times[i];
    let (_, end) = traj.sample((t + width).min(traj.t_final()));
    end - traj.nu[i]
}

/// Cumulative ν and its atoms. For penalty runs an atom is the largest
/// increment over a window of width `5/√γ` among windows that start within
/// one window length of the first window exceeding `atom_threshold`.
pub fn extract_measure(traj: &Trajectory, atom_threshold: f64) -> CumulativeMeasure {
    let grid = traj.times.clone();
    let cumulative = traj.nu.clone();
    let atoms = match traj.dynamics {
        Dynamics::Limit => traj
            .atoms
            .iter()
            .filter(|a| a.mass > atom_threshold)
            .copied()
            .collect(),
        Dynamics::Penalty(g) => {
            let w = atom_window(g);
            let mut atoms = Vec::new();
            let mut i = 0;
            while i < traj.len() {
                if window_increment(traj, i, w) <= atom_threshold {
                    i += 1;
                    continue;
                }
                let t_first = traj.times[i];
                let mut best = (window_increment(traj, i, w), i);
                let mut j = i + 1;
                while j < traj.len() && traj.times[j] <= t_first + w {
                    let inc = window_increment(traj, j, w);
                    if inc > best.0 {
                        best = (inc, j);
                    }
                    j += 1;
                }
                let start = traj.times[best.1];
                // Time where half of the lumped mass has accumulated.
                let half = traj.nu[best.1] + 0.5 * best.0;
                let k = (best.1..traj.len()).find(|&k| traj.nu[k] >= half).unwrap_or(best.1);
                atoms.push(Atom {
                    time: traj.times[k],
                    mass: best.0,
                });
                let stop = start + w;
                i = best.1;
                while i < traj.len() && traj.times[i] < stop {
                    i += 1;
                }
            }
            atoms
        }
    };
    CumulativeMeasure {
        grid,
        cumulative,
        atoms,
    }
}

/// Relative thresholds of [`certify_backlash`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// `(x, y, v)` gap threshold is `xyv·(1 + sup|state|)`.
    pub xyv: f64,
    /// ν gap threshold is `nu·(total ν)`.
    pub nu: f64,
    /// Post-impact speed threshold is `w·(1 + sup|w|)`.
    pub w: f64,
    /// Allowed factor over the fitted layer constant at the largest γ.
    pub layer_slack: f64,
    /// Impact bands are `band_factor/√γ` wide.
    pub band_factor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            xyv: 1e-3,
            nu: 1e-2,
            w: 1e-2,
            layer_slack: 1.1,
            band_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub gammas: Vec<f64>,
    pub sup_y_by_gamma: Vec<(f64, f64)>,
    pub layer_exponent: Option<f64>,
    /// `max_γ max_y·√γ` over all but the largest γ.
    pub layer_constant: f64,
    pub uniform_xyv_gaps: Vec<f64>,
    pub w_pointwise_gaps: Vec<f64>,
    /// `max(|Δν(T)|, sup_t |∫₀ᵗ Δν|)` between consecutive members.
    pub nu_weakstar_gaps: Vec<f64>,
    /// Impact times of the largest-γ run.
    pub impact_times: Vec<f64>,
    /// `w` of the largest-γ run at `band_factor/√γ` after each impact.
    pub post_impact_w: Vec<f64>,
    pub threshold_xyv: f64,
    pub threshold_nu: f64,
    pub threshold_w: f64,
    pub band_width: f64,
    pub xyv_ok: bool,
    pub nu_ok: bool,
    pub layer_ok: bool,
    pub impact_ok: bool,
    /// Reported only; not part of `certified`.
    pub w_ok: bool,
    pub certified: bool,
    pub failures: Vec<String>,
}

/// Impact times of a penalty run: zero crossings of `y` with `w > 0`.
pub fn penalty_impacts(traj: &Trajectory) -> Vec<f64> {
    let mut out = Vec::new();
    let ev = traj.event_times(EventKind::YZero);
    for t in ev {
        let k = traj.times.partition_point(|&s| s < t).min(traj.len() - 1);
        // y is zero up to rounding at the event node; the direction decides.
        if traj.states[k].w > 0.0 {
            out.push(t);
        }
    }
    // Runs that start on the wall moving outward.
    if let Some(s) = traj.states.first() {
        if s.y >= 0.0 && s.w > 0.0 && out.first() != Some(&traj.times[0]) {
            out.insert(0, traj.times[0]);
        }
    }
    out
}

fn is_nonincreasing(g: &[f64]) -> bool {
    g.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14)
}

pub fn certify_backlash(sweep: &GammaSweep, th: &Thresholds) -> ConvergenceReport {
    let k = sweep.gammas.len();
    let n = sweep.init.dim();
    let grid = &sweep.grid;
    let mut failures = Vec::new();

    let sup_y_by_gamma: Vec<(f64, f64)> = sweep
        .gammas
        .iter()
        .zip(&sweep.trajectories)
        .map(|(g, t)| (*g, t.max_y()))
        .collect();
    let layer_exponent = fit_layer_exponent(&sup_y_by_gamma).ok();
    let layer_constant = sup_y_by_gamma[..k - 1]
        .iter()
        .map(|(g, y)| y.max(0.0) * g.sqrt())
        .fold(0.0, f64::max);

    let sup_state = sweep
        .states
        .iter()
        .flatten()
        .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let sup_w = sweep.states.iter().flatten().map(|z| z[2 * n + 1].abs()).fold(0.0, f64::max);
    let total_nu = sweep.nu[k - 1].last().copied().unwrap_or(0.0);
    let threshold_xyv = th.xyv * (1.0 + sup_state);
    let threshold_nu = th.nu * total_nu;
    let threshold_w = th.w * (1.0 + sup_w);

    let impacts_by: Vec<Vec<f64>> = sweep.trajectories.iter().map(penalty_impacts).collect();
    let mut uniform_xyv_gaps = Vec::with_capacity(k - 1);
    let mut w_pointwise_gaps = Vec::with_capacity(k - 1);
    let mut nu_weakstar_gaps = Vec::with_capacity(k - 1);
    for j in 0..k - 1 {
        let (a, b) = (&sweep.states[j], &sweep.states[j + 1]);
        let mut gx: f64 = 0.0;
        let mut gw: f64 = 0.0;
        let band = th.band_factor / sweep.gammas[j].sqrt();
        let hits: Vec<f64> = impacts_by[j].iter().chain(&impacts_by[j + 1]).copied().collect();
        for (i, t) in grid.iter().enumerate() {
            for c in 0..2 * n + 1 {
                gx = gx.max((a[i][c] - b[i][c]).abs());
            }
            if hits.iter().all(|h| (t - h).abs() > band) {
                gw = gw.max((a[i][2 * n + 1] - b[i][2 * n + 1]).abs());
            }
        }
        uniform_xyv_gaps.push(gx);
        w_pointwise_gaps.push(gw);
        let (na, nb) = (&sweep.nu[j], &sweep.nu[j + 1]);
        let mut integral: f64 = 0.0;
        let mut sup_int: f64 = 0.0;
        for i in 1..grid.len() {
            let d0 = na[i - 1] - nb[i - 1];
            let d1 = na[i] - nb[i];
            integral += 0.5 * (d0 + d1) * (grid[i] - grid[i - 1]);
            sup_int = sup_int.max(integral.abs());
        }
        let end_gap = (na.last().unwrap() - nb.last().unwrap()).abs();
        nu_weakstar_gaps.push(end_gap.max(sup_int));
    }

    let xyv_ok = is_nonincreasing(&uniform_xyv_gaps)
        && uniform_xyv_gaps.last().is_some_and(|g| *g <= threshold_xyv);
    if !xyv_ok {
        failures.push(format!(
            "(x,y,v) gaps {uniform_xyv_gaps:?} not decreasing below {threshold_xyv:e}"
        ));
    }
    let nu_ok = nu_weakstar_gaps.last().is_some_and(|g| *g <= threshold_nu + 1e-12);
    if !nu_ok {
        failures.push(format!("nu gaps {nu_weakstar_gaps:?} above {threshold_nu:e}"));
    }
    let w_ok = w_pointwise_gaps.last().is_some_and(|g| *g <= threshold_w);

    let (g_max, y_max) = sup_y_by_gamma[k - 1];
    let layer_bound = th.layer_slack * layer_constant / g_max.sqrt();
    let layer_ok = y_max <= 0.0 || y_max <= layer_bound;
    if !layer_ok {
        failures.push(format!(
            "max y {y_max:e} at gamma {g_max:e} exceeds {layer_bound:e}"
        ));
    }

    let last = &sweep.trajectories[k - 1];
    let band_width = th.band_factor / g_max.sqrt();
    let impact_times = impacts_by[k - 1].clone();
    let post_impact_w: Vec<f64> = impact_times
        .iter()
        .map(|&t| {
            let tt = (t + band_width).min(last.t_final());
            last.sample(tt).0[2 * n + 1].max(0.0)
        })
        .collect();
    let impact_ok = post_impact_w.iter().all(|w| *w <= threshold_w);
    if !impact_ok {
        failures.push(format!(
            "post-impact w {post_impact_w:?} above {threshold_w:e}"
        ));
    }

    let certified = xyv_ok && nu_ok && layer_ok && impact_ok;
    ConvergenceReport {
        gammas: sweep.gammas.clone(),
        sup_y_by_gamma,
        layer_exponent,
        layer_constant,
        uniform_xyv_gaps,
        w_pointwise_gaps,
        nu_weakstar_gaps,
        impact_times,
        post_impact_w,
        threshold_xyv,
        threshold_nu,
        threshold_w,
        band_width,
        xyv_ok,
        nu_ok,
        layer_ok,
        impact_ok,
        w_ok,
        certified,
        failures,
    }
}
