//! Time-optimal control by switching-time search.
//!
//! [`brute_force_oracle`] enumerates bang-bang controls with switches on a
//! time grid; [`optimize_switching`] refines switch times by coordinate
//! descent with golden-section line searches on the first-entry time.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{BangBangControl, ControlSignal};
use crate::error::{Error, Result};
use crate::integrator::{integrate_from, state_rate, Dynamics, IntegratorConfig, Trajectory};
use crate::model::{CanonicalModel, SystemState};

/// Default radius of the ball around a point target.
pub const POINT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSpec {
    /// Ball of radius `tol` around a flat state `(x1, y1, v1, w1)`.
    Point { state: Vec<f64>, tol: f64 },
    /// `⟨z − center, V(z − center)⟩ ≤ epsilon`, `V` stored row-major.
    Ellipsoid { center: Vec<f64>, v: Vec<f64>, epsilon: f64 },
}

impl TargetSpec {
    pub fn point(s: &SystemState) -> Self {
        TargetSpec::Point {
            state: s.to_flat(),
            tol: POINT_TOLERANCE,
        }
    }

    pub fn ellipsoid(center: Vec<f64>, v: &DMatrix<f64>, epsilon: f64) -> Self {
        let d = v.nrows();
        let flat = (0..d * d).map(|k| v[(k / d, k % d)]).collect();
        TargetSpec::Ellipsoid { center, v: flat, epsilon }
    }

    pub fn center(&self) -> &[f64] {
        match self {
            TargetSpec::Point { state, .. } => state,
            TargetSpec::Ellipsoid { center, .. } => center,
        }
    }

    pub fn dim(&self) -> usize {
        self.center().len()
    }

    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        match self {
            TargetSpec::Point { .. } => None,
            TargetSpec::Ellipsoid { v, center, .. } => Some(DMatrix::from_row_slice(center.len(), center.len(), v)),
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.dim() != state_dim {
            return Err(Error::contract(format!(
                "target has dimension {}, state has {state_dim}",
                self.dim()
            )));
        }
        match self {
            TargetSpec::Point { state, tol } => {
                let n = (state.len() - 2) / 2;
                if !(state[n] < 0.0) {
                    return Err(Error::arg("point target needs y1 < 0"));
                }
                if !(*tol > 0.0) {
                    return Err(Error::arg("point target tolerance must be positive"));
                }
            }
            TargetSpec::Ellipsoid { center, v, epsilon } => {
                if !(*epsilon > 0.0) {
                    return Err(Error::arg("ellipsoid level epsilon must be positive"));
                }
                let d = center.len();
                if v.len() != d * d {
                    return Err(Error::contract("ellipsoid matrix has the wrong size"));
                }
                let m = DMatrix::from_row_slice(d, d, v);
                if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
                    return Err(Error::arg("ellipsoid matrix must be symmetric"));
                }
                if !(m.symmetric_eigen().eigenvalues.min() > 0.0) {
                    return Err(Error::arg("ellipsoid matrix must be positive definite"));
                }
            }
        }
        Ok(())
    }

    /// Non-positive exactly on the target.
    pub fn level(&self, z: &[f64]) -> f64 {
        match self {
            TargetSpec::Point { state, tol } => dist(z, state) - tol,
            TargetSpec::Ellipsoid { center, v, epsilon } => {
                let d = center.len();
                let dz: Vec<f64> = z.iter().zip(center).map(|(a, b)| a - b).collect();
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += dz[i] * v[i * d + j] * dz[j];
                    }
                }
                q - epsilon
            }
        }
    }

    /// Distance to the point, or the ellipsoid level value.
    pub fn residual(&self, z: &[f64]) -> f64 {
        match self {
            TargetSpec::Point { state, .. } => dist(z, state),
            TargetSpec::Ellipsoid { .. } => self.level(z),
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.level(z) <= 0.0
    }

    /// Superset containing every state within distance `tol` of the target.
    fn loosened(&self, tol: f64) -> Self {
        match self {
            TargetSpec::Point { state, tol: t } => TargetSpec::Point {
                state: state.clone(),
                tol: t.max(tol),
            },
            TargetSpec::Ellipsoid { center, v, epsilon } => {
                let lmax = self.matrix().map_or(0.0, |m| m.symmetric_eigen().eigenvalues.max());
                let root = epsilon.sqrt() + tol * lmax.sqrt();
                TargetSpec::Ellipsoid {
                    center: center.clone(),
                    v: v.clone(),
                    epsilon: root * root,
                }
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: String,
    pub iteration: usize,
    pub t: f64,
    pub switches: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalResult {
    pub control: BangBangControl,
    pub t_opt: f64,
    pub terminal_state: SystemState,
    pub terminal_residual: f64,
    pub dynamics: Dynamics,
    pub target: TargetSpec,
    pub solver_trace: Vec<TraceEntry>,
}

impl OptimalResult {
    pub fn switch_count(&self) -> usize {
        self.control.switch_count()
    }

    pub fn signs(&self) -> Vec<f64> {
        self.control.signs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeOptions {
    pub max_switches: usize,
    /// Cell width of the oracle's switching grid.
    pub grid_dt: f64,
    /// Search horizon; `10·(1 + |init − target center|)` when absent.
    pub t_max: Option<f64>,
    /// The oracle accepts states within `slack·grid_dt` of the target.
    pub oracle_slack: f64,
    pub max_sweeps: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            max_switches: 3,
            grid_dt: 0.05,
            t_max: None,
            oracle_slack: 2.0,
            max_sweeps: 60,
        }
    }
}

pub fn default_horizon(init: &SystemState, target: &TargetSpec) -> f64 {
    10.0 * (1.0 + dist(&init.to_flat(), target.center()))
}

/// Constant control with forced breakpoints so that every grid time becomes
/// a node of the integrated trajectory.
struct GridControl<'a> {
    u: Vec<f64>,
    grid: &'a [f64],
}

impl ControlSignal for GridControl<'_> {
    fn dim(&self) -> usize {
        self.u.len()
    }

    fn value(&self, _t: f64) -> Vec<f64> {
        self.u.clone()
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let a = self.grid.partition_point(|&s| s <= t0);
        let b = self.grid.partition_point(|&s| s < t1);
        self.grid[a..b].to_vec()
    }
}

/// Scan of a trajectory against a target.
#[derive(Debug, Clone)]
pub struct Entry {
    pub time: f64,
    pub state: SystemState,
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub entry: Option<Entry>,
    /// Smallest level value seen (positive when the target is missed).
    pub closest: f64,
}

/// Golden-section minimizer of a scalar function on `[a, b]`.
pub(crate) fn golden_section(mut a: f64, mut b: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    const R: f64 = 0.618_033_988_749_894_8;
    let mut c = b - R * (b - a);
    let mut d = a + R * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - R * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + R * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Integrates over `[0, t_max]` and locates the first entry into `target`.
///
/// Each interval is screened with a cubic Hermite interpolant of the state;
/// a candidate crossing is then located by Illinois iterations on states
/// re-integrated from the left node.
#[allow(clippy::too_many_arguments)]
pub fn first_entry(
    model: &CanonicalModel,
    dynamics: Dynamics,
    control: &dyn ControlSignal,
    init: &SystemState,
    t_max: f64,
    cfg: &IntegratorConfig,
    target: &TargetSpec,
) -> Result<Scan> {
    let z0 = init.to_flat();
    let l0 = target.level(&z0);
    if l0 <= 0.0 {
        return Ok(Scan {
            entry: Some(Entry {
                time: 0.0,
                state: init.clone(),
            }),
            closest: l0,
        });
    }
    let traj = integrate_from(model, dynamics, control, 0.0, t_max, cfg, init, 0.0)?;
    scan_trajectory(model, dynamics, control, &traj, cfg, target)
}

fn scan_trajectory(
    model: &CanonicalModel,
    dynamics: Dynamics,
    control: &dyn ControlSignal,
    traj: &Trajectory,
    cfg: &IntegratorConfig,
    target: &TargetSpec,
) -> Result<Scan> {
    let n = model.n();
    let gamma = dynamics.gamma().unwrap_or(0.0);
    let mut closest = f64::INFINITY;
    for i in 0..traj.len().saturating_sub(1) {
        let (ta, tb) = (traj.times[i], traj.times[i + 1]);
        let za = traj.states[i].to_flat();
        let zb = traj.states[i + 1].to_flat();
        let la = target.level(&za);
        closest = closest.min(la);
        let h = tb - ta;
        if h <= 0.0 {
            continue;
        }
        let u = &traj.controls[i + 1];
        let held = matches!(dynamics, Dynamics::Limit) && traj.contact[i] && traj.contact[i + 1];
        let da = state_rate(model, gamma, &za, u, held);
        let db = state_rate(model, gamma, &zb, u, held);
        let level_at = |th: f64| target.level(&crate::integrator::hermite(&za, &da, &zb, &db, h, th));
        // Coarse screen, then refine the smallest sample.
        const K: usize = 24;
        let mut best = (0.0, la);
        for k in 1..=K {
            let th = k as f64 / K as f64;
            let l = level_at(th);
            if l < best.1 {
                best = (th, l);
            }
        }
        if best.1 > 0.0 {
            let lo = (best.0 - 1.0 / K as f64).max(0.0);
            let hi = (best.0 + 1.0 / K as f64).min(1.0);
            let (th, l) = golden_section(lo, hi, 1e-9, level_at);
            if l < best.1 {
                best = (th, l);
            }
        }
        closest = closest.min(best.1);
        if best.1 > 0.0 {
            continue;
        }
        // Bracket [ta, ta + θ·h] with level > 0 on the left; confirm by integration.
        let state_at = |t: f64| -> Result<Vec<f64>> {
            if t <= ta {
                return Ok(za.clone());
            }
            let seg = integrate_from(model, dynamics, control, ta, t, cfg, &traj.states[i], traj.nu[i])?;
            Ok(seg.final_state().to_flat())
        };
        let mut t_hi = ta + best.0 * h;
        let mut z_hi = state_at(t_hi)?;
        let mut l_hi = target.level(&z_hi);
        if l_hi > 0.0 {
            // The interpolant dipped but the integrated state did not.
            if l_hi < closest {
                closest = l_hi;
            }
            continue;
        }
        let mut t_lo = ta;
        let mut l_lo = la;
        let mut side = 0i8;
        for _ in 0..100 {
            if t_hi - t_lo <= 1e-13 * (1.0 + t_hi.abs()) {
                break;
            }
            let mut t = t_hi - l_hi * (t_hi - t_lo) / (l_hi - l_lo);
            if !(t > t_lo && t < t_hi) {
                t = 0.5 * (t_lo + t_hi);
            }
            let z = state_at(t)?;
            let l = target.level(&z);
            if l <= 0.0 {
                t_hi = t;
                z_hi = z;
                l_hi = l;
                if side == -1 {
                    l_lo *= 0.5;
                }
                side = -1;
            } else {
                t_lo = t;
                l_lo = l;
                if side == 1 {
                    l_hi *= 0.5;
                }
                side = 1;
            }
        }
        return Ok(Scan {
            entry: Some(Entry {
                time: t_hi,
                state: SystemState::from_flat(n, &z_hi)?,
            }),
            closest: closest.min(l_hi),
        });
    }
    if let Some(last) = traj.states.last() {
        closest = closest.min(target.level(&last.to_flat()));
    }
    Ok(Scan { entry: None, closest })
}

fn check_problem(model: &CanonicalModel, init: &SystemState, target: &TargetSpec, dynamics: Dynamics) -> Result<()> {
    model.check_state(init)?;
    target.validate(model.state_dim())?;
    dynamics.validate()
}

struct Oracle<'a> {
    model: &'a CanonicalModel,
    dynamics: Dynamics,
    cfg: IntegratorConfig,
    target: TargetSpec,
    grid: Vec<f64>,
    lo: f64,
    hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Candidate {
    /// Grid index of the hit.
    hit: usize,
    initial: f64,
    switches: Vec<usize>,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        (self.hit, self.switches.len(), &self.switches, self.initial > 0.0)
            < (other.hit, other.switches.len(), &other.switches, other.initial > 0.0)
    }
}

impl Oracle<'_> {
    /// States at the grid times after `start` under constant `u`, up to index `end`.
    fn arc(&self, start: usize, end: usize, z: &SystemState, nu: f64, u: f64) -> Result<Vec<(SystemState, f64)>> {
        if end <= start {
            return Ok(Vec::new());
        }
        let ctl = GridControl {
            u: vec![u],
            grid: &self.grid,
        };
        let traj = integrate_from(self.model, self.dynamics, &ctl, self.grid[start], self.grid[end], &self.cfg, z, nu)?;
        let mut out = Vec::with_capacity(end - start);
        let mut k = 0;
        for j in start + 1..=end {
            let t = self.grid[j];
            while k + 1 < traj.len() && traj.times[k + 1] <= t {
                k += 1;
            }
            out.push((traj.states[k].clone(), traj.nu[k]));
        }
        Ok(out)
    }

    fn other(&self, u: f64) -> f64 {
        if u == self.hi {
            self.lo
        } else {
            self.hi
        }
    }

    /// Depth-first search with exactly `k` switches; `bound` is an exclusive
    /// bound on the hit index.
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        &self,
        start: usize,
        z: &SystemState,
        nu: f64,
        u: f64,
        k: usize,
        initial: f64,
        switches: &mut Vec<usize>,
        best: &mut Option<Candidate>,
        bound: usize,
    ) -> Result<()> {
        let limit = best.as_ref().map_or(bound, |b| b.hit.min(bound));
        let end = (limit.saturating_sub(1)).min(self.grid.len() - 1);
        if end <= start {
            return Ok(());
        }
        let arc = self.arc(start, end, z, nu, u)?;
        for (off, (s, nu_j)) in arc.iter().enumerate() {
            let j = start + 1 + off;
            let limit = best.as_ref().map_or(bound, |b| b.hit.min(bound));
            if j >= limit {
                break;
            }
            if self.target.contains(&s.to_flat()) {
                if switches.len() == k {
                    let c = Candidate {
                        hit: j,
                        initial,
                        switches: switches.clone(),
                    };
                    if best.as_ref().is_none_or(|b| c.better_than(b)) {
                        *best = Some(c);
                    }
                }
                return Ok(());
            }
            if switches.len() < k && j + 1 < self.grid.len() {
                switches.push(j);
                self.dfs(j, s, *nu_j, self.other(u), k, initial, switches, best, bound)?;
                switches.pop();
            }
        }
        Ok(())
    }
}

/// Exhaustive search over bang-bang controls with at most `max_switches`
/// switches on the grid `{j·grid_dt}`, recording the earliest grid time at
/// which the target is hit.
///
/// Ties go to fewer switches, then to lexicographically earlier switch
/// times, then to the lower initial value.
pub fn brute_force_oracle(
    model: &CanonicalModel,
    dynamics: Dynamics,
    init: &SystemState,
    target: &TargetSpec,
    opts: &OptimizeOptions,
    cfg: &IntegratorConfig,
) -> Result<OptimalResult> {
    check_problem(model, init, target, dynamics)?;
    if model.m() != 1 {
        return Err(Error::arg("the oracle supports a single control channel"));
    }
    if opts.max_switches > 3 {
        return Err(Error::arg("the oracle supports at most 3 switches"));
    }
    if !(opts.grid_dt > 0.0) {
        return Err(Error::arg("grid_dt must be positive"));
    }
    let t_max = opts.t_max.unwrap_or_else(|| default_horizon(init, target));
    let cells = (t_max / opts.grid_dt).ceil() as usize;
    let grid: Vec<f64> = (0..=cells).map(|j| j as f64 * opts.grid_dt).collect();
    let oracle_target = target.loosened(opts.oracle_slack * opts.grid_dt);
    let bx = model.control_box();
    let oracle = Oracle {
        model,
        dynamics,
        cfg: *cfg,
        target: oracle_target,
        grid,
        lo: bx.lo[0],
        hi: bx.hi[0],
    };
    let mut trace = Vec::new();
    let finish = |c: &Candidate, trace: Vec<TraceEntry>| -> Result<OptimalResult> {
        let t = oracle.grid[c.hit];
        let times: Vec<f64> = c.switches.iter().map(|&j| oracle.grid[j]).collect();
        let control = BangBangControl::single(c.initial, times, bx, t.max(f64::MIN_POSITIVE))?;
        let end = if t > 0.0 {
            integrate_from(model, dynamics, &control, 0.0, t, cfg, init, 0.0)?.final_state().clone()
        } else {
            init.clone()
        };
        Ok(OptimalResult {
            terminal_residual: target.residual(&end.to_flat()),
            control,
            t_opt: t,
            terminal_state: end,
            dynamics,
            target: target.clone(),
            solver_trace: trace,
        })
    };
    if oracle.target.contains(&init.to_flat()) {
        return finish(
            &Candidate {
                hit: 0,
                initial: oracle.hi,
                switches: vec![],
            },
            trace,
        );
    }
    // Switch-free arcs, reused as prefixes of every deeper search.
    let last = oracle.grid.len() - 1;
    let prefix_lo = oracle.arc(0, last, init, 0.0, oracle.lo)?;
    let prefix_hi = oracle.arc(0, last, init, 0.0, oracle.hi)?;
    let mut best: Option<Candidate> = None;
    for (u, prefix) in [(oracle.lo, &prefix_lo), (oracle.hi, &prefix_hi)] {
        if let Some(j) = prefix.iter().position(|(s, _)| oracle.target.contains(&s.to_flat())) {
            let c = Candidate {
                hit: j + 1,
                initial: u,
                switches: vec![],
            };
            if best.as_ref().is_none_or(|b| c.better_than(b)) {
                best = Some(c);
            }
        }
    }
    let mut closest = f64::INFINITY;
    for (s, _) in prefix_lo.iter().chain(&prefix_hi) {
        closest = closest.min(oracle.target.level(&s.to_flat()));
    }
    if let Some(b) = &best {
        trace.push(TraceEntry {
            stage: "oracle".into(),
            iteration: 0,
            t: oracle.grid[b.hit],
            switches: vec![],
        });
    }
    // Searching hits below a capped index is exact whenever it finds one, so
    // the cap doubles until something is found.
    let mut cap = 16.min(last);
    loop {
        let mut found = best.clone();
        let mut level_trace = Vec::new();
        for k in 1..=opts.max_switches {
            let bound = found.as_ref().map_or(cap + 1, |b| b.hit.min(cap + 1));
            let tasks: Vec<(f64, usize)> = [oracle.lo, oracle.hi]
                .iter()
                .flat_map(|&u| (1..bound.min(last)).map(move |j| (u, j)))
                .collect();
            let results: Vec<Result<Option<Candidate>>> = tasks
                .par_iter()
                .map(|&(u, j)| {
                    let prefix = if u == oracle.lo { &prefix_lo } else { &prefix_hi };
                    // A prefix that already hits cannot be extended profitably.
                    if prefix[..j].iter().any(|(s, _)| oracle.target.contains(&s.to_flat())) {
                        return Ok(None);
                    }
                    let (z, nu) = &prefix[j - 1];
                    let mut local = None;
                    let mut sw = vec![j];
                    oracle.dfs(j, z, *nu, oracle.other(u), k, u, &mut sw, &mut local, bound)?;
                    Ok(local)
                })
                .collect();
            // Every candidate at this depth hits strictly before `bound`.
            let mut improved = false;
            for r in results {
                if let Some(c) = r? {
                    if !improved || found.as_ref().is_some_and(|b| c.better_than(b)) {
                        found = Some(c);
                        improved = true;
                    }
                }
            }
            if improved {
                let b = found.as_ref().expect("improved");
                level_trace.push(TraceEntry {
                    stage: "oracle".into(),
                    iteration: k,
                    t: oracle.grid[b.hit],
                    switches: b.switches.iter().map(|&j| oracle.grid[j]).collect(),
                });
            }
        }
        if found.as_ref().is_some_and(|b| b.hit <= cap) || cap >= last {
            best = found;
            trace.append(&mut level_trace);
            break;
        }
        cap = (2 * cap).min(last);
    }
    match best {
        Some(c) => finish(&c, trace),
        None => Err(Error::Reachability { best_residual: closest }),
    }
}

/// Objective of the refinement: first-entry time, or `t_max` plus the
/// closest level value when the target is missed.
fn entry_objective(
    model: &CanonicalModel,
    dynamics: Dynamics,
    control: &BangBangControl,
    init: &SystemState,
    t_max: f64,
    cfg: &IntegratorConfig,
    target: &TargetSpec,
) -> (f64, Option<Entry>) {
    match first_entry(model, dynamics, control, init, t_max, cfg, target) {
        Ok(scan) => match scan.entry {
            Some(e) => (e.time, Some(e)),
            None => (t_max + scan.closest.max(0.0), None),
        },
        Err(_) => (f64::INFINITY, None),
    }
}

fn with_switches(base: &BangBangControl, flat: &[f64]) -> BangBangControl {
    let mut c = base.clone();
    let mut k = 0;
    for ch in &mut c.channels {
        for s in &mut ch.switch_times {
            *s = flat[k];
            k += 1;
        }
    }
    c
}

/// Refines the switch times of `init_guess` by coordinate descent, each
/// coordinate minimized by golden section between its neighbours.
///
/// The objective is the first-entry time into `target` over
/// `[0, init_guess.horizon]`; misses are charged `horizon + closest level`.
pub fn optimize_switching(
    model: &CanonicalModel,
    dynamics: Dynamics,
    init: &SystemState,
    target: &TargetSpec,
    init_guess: &BangBangControl,
    opts: &OptimizeOptions,
    cfg: &IntegratorConfig,
) -> Result<OptimalResult> {
    check_problem(model, init, target, dynamics)?;
    init_guess.validate()?;
    if init_guess.dim() != model.m() {
        return Err(Error::contract("initial guess has the wrong number of channels"));
    }
    let t_max = init_guess.horizon;
    let mut theta: Vec<f64> = init_guess
        .channels
        .iter()
        .flat_map(|c| c.switch_times.iter().copied())
        .collect();
    let owner: Vec<usize> = init_guess
        .channels
        .iter()
        .enumerate()
        .flat_map(|(i, c)| std::iter::repeat_n(i, c.switch_times.len()))
        .collect();
    // The target is approached through shrinking supersets, since a thin
    // hit set stalls coordinate moves.
    let floor = match target {
        TargetSpec::Point { tol, .. } => *tol * 10.0,
        TargetSpec::Ellipsoid { .. } => 1e-4,
    };
    let mut stages = Vec::new();
    let mut r = opts.oracle_slack * opts.grid_dt;
    while r > floor {
        stages.push(target.loosened(r));
        r *= 0.1;
    }
    stages.push(target.clone());
    let mut trace = Vec::new();
    let mut best_entry = None;
    let mut iteration = 0;
    for stage in &stages {
        let eval = |th: &[f64], cap: f64| {
            entry_objective(model, dynamics, &with_switches(init_guess, th), init, cap, cfg, stage)
        };
        // Misses only need integrating a little past the incumbent.
        let cap_of = |best: f64| if best.is_finite() { t_max.min(1.5 * best + opts.grid_dt) } else { t_max };
        let (mut best_t, first) = eval(&theta, t_max);
        best_entry = first;
        trace.push(TraceEntry {
            stage: "refine".into(),
            iteration,
            t: best_t,
            switches: theta.clone(),
        });
        let mut width = opts.grid_dt.max(1e-6) * 2.0;
        for _ in 1..=opts.max_sweeps {
            iteration += 1;
            let mut max_move: f64 = 0.0;
            for k in 0..theta.len() {
                // Neighbours on the same channel bound the coordinate.
                let prev = (0..k).rev().find(|&j| owner[j] == owner[k]).map_or(0.0, |j| theta[j]);
                let next = (k + 1..theta.len()).find(|&j| owner[j] == owner[k]).map_or(t_max, |j| theta[j]);
                let gap = 1e-12 * t_max;
                let a = (theta[k] - width).max(prev + gap);
                let b = (theta[k] + width).min(next - gap);
                if !(b > a) {
                    continue;
                }
                let cap = cap_of(best_t);
                let mut trial = theta.clone();
                let (arg, val) = golden_section(a, b, 1e-12 * t_max.max(1.0), |s| {
                    trial[k] = s;
                    eval(&trial, cap).0
                });
                if val < best_t {
                    max_move = max_move.max((arg - theta[k]).abs());
                    theta[k] = arg;
                    (best_t, best_entry) = eval(&theta, cap);
                }
            }
            trace.push(TraceEntry {
                stage: "refine".into(),
                iteration,
                t: best_t,
                switches: theta.clone(),
            });
            if max_move < 1e-9 * best_t.max(1e-9) {
                if width <= 1e-7 * t_max {
                    break;
                }
                width *= 0.1;
            } else {
                width = width.max(4.0 * max_move);
            }
        }
    }
    let entry = match best_entry {
        Some(e) => e,
        None => {
            return Err(Error::Structure {
                suggested_max_switches: init_guess.switch_count() + 1,
            })
        }
    };
    // Switches at or after the entry time are never used.
    let mut control = with_switches(init_guess, &theta).truncated(entry.time);
    control.horizon = entry.time.max(f64::MIN_POSITIVE);
    Ok(OptimalResult {
        terminal_residual: target.residual(&entry.state.to_flat()),
        control,
        t_opt: entry.time,
        terminal_state: entry.state,
        dynamics,
        target: target.clone(),
        solver_trace: trace,
    })
}

/// Oracle followed by refinement of its best structure.
pub fn solve_time_optimal(
    model: &CanonicalModel,
    dynamics: Dynamics,
    init: &SystemState,
    target: &TargetSpec,
    opts: &OptimizeOptions,
    cfg: &IntegratorConfig,
) -> Result<OptimalResult> {
    let oracle = brute_force_oracle(model, dynamics, init, target, opts, cfg)?;
    if oracle.t_opt == 0.0 && target.contains(&init.to_flat()) {
        return Ok(oracle);
    }
    let t_max = opts.t_max.unwrap_or_else(|| default_horizon(init, target));
    let mut guess = oracle.control.clone();
    guess.horizon = t_max;
    let mut refined = optimize_switching(model, dynamics, init, target, &guess, opts, cfg)?;
    let mut trace = oracle.solver_trace;
    trace.append(&mut refined.solver_trace);
    refined.solver_trace = trace;
    Ok(refined)
}

/// Smallest horizon `T` (to `1e-8`) at which the control shape rescaled to
/// `T` ends inside the target. Horizons are first sampled on a uniform grid
/// of `(0, shape.horizon]` to find a bracket.
pub fn reach_time_bisection(
    model: &CanonicalModel,
    dynamics: Dynamics,
    shape: &BangBangControl,
    init: &SystemState,
    target: &TargetSpec,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    check_problem(model, init, target, dynamics)?;
    shape.validate()?;
    const DELTA_T: f64 = 1e-8;
    const SAMPLES: usize = 1000;
    let end_level = |t: f64| -> Result<f64> {
        if t <= 0.0 {
            return Ok(target.level(&init.to_flat()));
        }
        let c = shape.rescaled(t);
        let traj = integrate_from(model, dynamics, &c, 0.0, t, cfg, init, 0.0)?;
        Ok(target.level(&traj.final_state().to_flat()))
    };
    if end_level(0.0)? <= 0.0 {
        return Ok(0.0);
    }
    let t_max = shape.horizon;
    let mut lo = 0.0;
    let mut hi = None;
    let mut closest = f64::INFINITY;
    for k in 1..=SAMPLES {
        let t = t_max * k as f64 / SAMPLES as f64;
        let l = end_level(t)?;
        closest = closest.min(l);
        if l <= 0.0 {
            hi = Some(t);
            break;
        }
        lo = t;
    }
    let mut hi = hi.ok_or(Error::Reachability { best_residual: closest })?;
    while hi - lo > DELTA_T {
        let mid = 0.5 * (lo + hi);
        if end_level(mid)? <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Whether every node before the entry stays strictly inside `y < 0` with
/// no atoms: the instance never touches the wall.
pub fn is_contact_free(traj: &Trajectory, band: f64) -> bool {
    traj.atoms.is_empty() && traj.states.iter().all(|s| s.y < -band)
}
