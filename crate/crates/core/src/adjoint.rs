//! Adjoint system along a primal trajectory, maximum-principle residuals and
//! related diagnostics.
//!
//! With `z = (x, y, v, w)` and `λ = (q, s, p, r)` the adjoint of the penalty
//! system is `λ̇ = −J(z)ᵀλ` where `J` is the Jacobian of `(v, w, f, ĝ)` and
//! `ĝ = g − γ·y₊·w₊`. The penalty derivatives are taken with selectors
//! `h_y, h_w ∈ [0, 1]`. The multiplier `σ = s − γ·h_w·y₊·r` satisfies the
//! limit-form equations
//!
//! ```text
//! q̇ = −(∇x f)ᵀp − ∇x g·r
//! dσ = −⟨∂y f, p⟩dt − ∂y g·r dt + dμ
//! ṗ = −q − (∇v f)ᵀp − ∇v g·r
//! ṙ = −σ − ⟨∂w f, p⟩ − ∂w g·r
//! ```
//!
//! which is what [`verify_theorem2`] checks. For limit trajectories the
//! adjoint is integrated with `γ = 0`, i.e. with the candidate `μ ≡ 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::control::BangBangControl;
use crate::error::{Error, Result};
use crate::integrator::{
    hermite, integrate_penalty, integrate_penalty_on_grid, state_rate, Dynamics, IntegratorConfig, Trajectory,
};
use crate::model::{dot, CanonicalModel, SystemState};

/// Costate `(q, σ, p, r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointState {
    pub q: Vec<f64>,
    pub sigma: f64,
    pub p: Vec<f64>,
    pub r: f64,
}

impl AdjointState {
    pub fn new(q: Vec<f64>, sigma: f64, p: Vec<f64>, r: f64) -> Self {
        AdjointState { q, sigma, p, r }
    }

    pub fn zeros(n: usize) -> Self {
        AdjointState::new(vec![0.0; n], 0.0, vec![0.0; n], 0.0)
    }

    /// Splits `[q, σ, p, r]`; panics on a length other than `2n + 2`.
    pub fn from_flat(n: usize, z: &[f64]) -> Self {
        assert_eq!(z.len(), 2 * n + 2, "adjoint length");
        AdjointState {
            q: z[..n].to_vec(),
            sigma: z[n],
            p: z[n + 1..2 * n + 1].to_vec(),
            r: z[2 * n + 1],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.q.len() + 2);
        z.extend_from_slice(&self.q);
        z.push(self.sigma);
        z.extend_from_slice(&self.p);
        z.push(self.r);
        z
    }

    pub fn norm_sq(&self) -> f64 {
        self.to_flat().iter().map(|c| c * c).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|c| c.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        let z: Vec<f64> = self.to_flat().iter().map(|c| c * k).collect();
        AdjointState::from_flat(self.q.len(), &z)
    }

    /// Rescaled to `|λ|² = 1`.
    pub fn normalized(&self) -> Result<Self> {
        let nn = self.norm_sq().sqrt();
        if !(nn > 0.0) || !nn.is_finite() {
            return Err(Error::arg("cannot normalize a zero or non-finite covector"));
        }
        Ok(self.scaled(1.0 / nn))
    }
}

/// Sign in front of `σ` in the `ṙ` equation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaSign {
    /// `ṙ = −σ − …`
    #[default]
    Minus,
    /// `ṙ = +σ − …`
    Plus,
}

impl SigmaSign {
    fn factor(self) -> f64 {
        match self {
            SigmaSign::Minus => -1.0,
            SigmaSign::Plus => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdjointConfig {
    /// Largest RK4 substep inside a primal interval.
    pub max_substep: f64,
    /// Half-width of the band where `h_y`, `h_w` take the value ½.
    pub tol_h: f64,
    pub sigma_sign: SigmaSign,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        AdjointConfig {
            max_substep: 2e-3,
            tol_h: 1e-12,
            sigma_sign: SigmaSign::Minus,
        }
    }
}

fn selector(v: f64, tol: f64) -> f64 {
    if v > tol {
        1.0
    } else if v < -tol {
        0.0
    } else {
        0.5
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjointTrajectory {
    pub n: usize,
    pub times: Vec<f64>,
    /// `(q, σ, p, r)` at the primal nodes.
    pub adjoints: Vec<AdjointState>,
    /// The approximating multiplier `s` (equal to `σ` off the penalty layer).
    pub s: Vec<f64>,
    /// `μ([0, t])`.
    pub mu_cumulative: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    pub h_y: Vec<f64>,
    pub h_w: Vec<f64>,
    pub sigma_sign: SigmaSign,
}

impl AdjointTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal(&self) -> &AdjointState {
        self.adjoints.last().expect("non-empty adjoint")
    }

    pub fn initial(&self) -> &AdjointState {
        &self.adjoints[0]
    }
}

/// Primal data on one interval of the grid.
struct Interval<'a> {
    ta: f64,
    h: f64,
    za: Vec<f64>,
    zb: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    u: &'a [f64],
}

impl<'a> Interval<'a> {
    fn new(model: &CanonicalModel, gamma: f64, primal: &'a Trajectory, i: usize) -> Self {
        let u = &primal.controls[i + 1][..];
        let held = matches!(primal.dynamics, Dynamics::Limit) && primal.contact[i] && primal.contact[i + 1];
        let za = primal.states[i].to_flat();
        let zb = primal.states[i + 1].to_flat();
        let da = state_rate(model, gamma, &za, u, held);
        let db = state_rate(model, gamma, &zb, u, held);
        Interval {
            ta: primal.times[i],
            h: primal.times[i + 1] - primal.times[i],
            za,
            zb,
            da,
            db,
            u,
        }
    }

    fn at(&self, t: f64) -> Vec<f64> {
        if self.h <= 0.0 {
            return self.za.clone();
        }
        let th = ((t - self.ta) / self.h).clamp(0.0, 1.0);
        hermite(&self.za, &self.da, &self.zb, &self.db, self.h, th)
    }
}

/// `Jᵀ·(p, r)` of `(f, g)` split into the `x, y, v, w` blocks.
fn fg_transpose_action(model: &CanonicalModel, z: &[f64], u: &[f64], p: &[f64], r: f64) -> Vec<f64> {
    let n = model.n();
    let s = SystemState::from_flat(n, z).expect("flat dims");
    let jac: DMatrix<f64> = model.jacobian_fg(&s, u);
    let mut out = vec![0.0; 2 * n + 2];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = jac[(n, k)] * r;
        for i in 0..n {
            acc += jac[(i, k)] * p[i];
        }
        *o = acc;
    }
    out
}

/// Right-hand side for `(q, s, p, r, m)` with `ṁ = γ·h_y·w₊·r`.
fn adjoint_rhs(model: &CanonicalModel, gamma: f64, cfg: &AdjointConfig, z: &[f64], u: &[f64], lam: &[f64]) -> Vec<f64> {
    let n = model.n();
    let (y, w) = (z[n], z[2 * n + 1]);
    let (s, p, r) = (lam[n], &lam[n + 1..2 * n + 1], lam[2 * n + 1]);
    let jt = fg_transpose_action(model, z, u, p, r);
    let hy = selector(y, cfg.tol_h);
    let hw = selector(w, cfg.tol_h);
    let pen_y = gamma * hy * w.max(0.0) * r;
    let pen_w = gamma * hw * y.max(0.0) * r;
    let mut d = vec![0.0; 2 * n + 3];
    for i in 0..n {
        d[i] = -jt[i];
        d[n + 1 + i] = -lam[i] - jt[n + 1 + i];
    }
    d[n] = -jt[n] + pen_y;
    d[2 * n + 1] = cfg.sigma_sign.factor() * s - jt[2 * n + 1] + pen_w;
    d[2 * n + 2] = pen_y;
    d
}

fn check_dims(model: &CanonicalModel, primal: &Trajectory, terminal: &AdjointState) -> Result<()> {
    if primal.n != model.n() || primal.m != model.m() {
        return Err(Error::contract("primal trajectory does not match the model"));
    }
    if terminal.q.len() != model.n() || terminal.p.len() != model.n() {
        return Err(Error::contract(format!(
            "terminal covector has block size {}, model has n = {}",
            terminal.q.len(),
            model.n()
        )));
    }
    if primal.len() < 2 {
        return Err(Error::contract("primal trajectory needs at least two nodes"));
    }
    Ok(())
}

/// Backward RK4 on the primal grid for either kind of trajectory.
pub fn integrate_adjoint(
    model: &CanonicalModel,
    primal: &Trajectory,
    terminal: &AdjointState,
    cfg: &AdjointConfig,
) -> Result<AdjointTrajectory> {
    check_dims(model, primal, terminal)?;
    if !terminal.is_finite() {
        return Err(Error::contract("terminal covector has non-finite entries"));
    }
    let gamma = primal.dynamics.gamma().unwrap_or(0.0);
    let n = model.n();
    let d = 2 * n + 3;
    let len = primal.len();
    let mut lam_nodes = vec![vec![0.0; d]; len];
    let mut lam = terminal.to_flat();
    lam.push(0.0);
    lam_nodes[len - 1] = lam.clone();
    for i in (0..len - 1).rev() {
        let iv = Interval::new(model, gamma, primal, i);
        if iv.h > 0.0 {
            let ns = (iv.h / cfg.max_substep).ceil().max(1.0) as usize;
            let hs = iv.h / ns as f64;
            for k in (0..ns).rev() {
                let tb = iv.ta + (k + 1) as f64 * hs;
                let tm = tb - 0.5 * hs;
                let ta = tb - hs;
                let zb = iv.at(tb);
                let zm = iv.at(tm);
                let za = iv.at(ta);
                // Backward in time: dλ/dτ = −rhs with τ = −t.
                let k1 = adjoint_rhs(model, gamma, cfg, &zb, iv.u, &lam);
                let l2: Vec<f64> = lam.iter().zip(&k1).map(|(l, k)| l - 0.5 * hs * k).collect();
                let k2 = adjoint_rhs(model, gamma, cfg, &zm, iv.u, &l2);
                let l3: Vec<f64> = lam.iter().zip(&k2).map(|(l, k)| l - 0.5 * hs * k).collect();
                let k3 = adjoint_rhs(model, gamma, cfg, &zm, iv.u, &l3);
                let l4: Vec<f64> = lam.iter().zip(&k3).map(|(l, k)| l - hs * k).collect();
                let k4 = adjoint_rhs(model, gamma, cfg, &za, iv.u, &l4);
                for j in 0..d {
                    lam[j] -= hs / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
            if lam.iter().any(|c| !c.is_finite()) {
                return Err(Error::AdjointBlowUp { time: iv.ta });
            }
        }
        lam_nodes[i] = lam.clone();
    }

    let mut out = AdjointTrajectory {
        n,
        times: primal.times.clone(),
        adjoints: Vec::with_capacity(len),
        s: Vec::with_capacity(len),
        mu_cumulative: Vec::with_capacity(len),
        hamiltonian: Vec::with_capacity(len),
        h_y: Vec::with_capacity(len),
        h_w: Vec::with_capacity(len),
        sigma_sign: cfg.sigma_sign,
    };
    let m0 = lam_nodes[0][d - 1];
    let mut layer0 = 0.0;
    for (i, l) in lam_nodes.iter().enumerate() {
        let st = &primal.states[i];
        let hy = selector(st.y, cfg.tol_h);
        let hw = selector(st.w, cfg.tol_h);
        let r = l[2 * n + 1];
        let layer = gamma * hw * st.y.max(0.0) * r;
        if i == 0 {
            layer0 = layer;
        }
        let s = l[n];
        let mut a = AdjointState::from_flat(n, &l[..d - 1]);
        a.sigma = s - layer;
        out.mu_cumulative.push((l[d - 1] - m0) - (layer - layer0));
        let u = &primal.controls[i];
        let raw = AdjointState { sigma: s, ..a.clone() };
        out.hamiltonian.push(hamiltonian(model, primal.dynamics, st, &raw, u));
        out.adjoints.push(a);
        out.s.push(s);
        out.h_y.push(hy);
        out.h_w.push(hw);
    }
    Ok(out)
}

/// Approximating adjoint along a penalty trajectory at `gamma`.
pub fn integrate_adjoint_penalty(
    model: &CanonicalModel,
    gamma: f64,
    primal: &Trajectory,
    terminal: &AdjointState,
    cfg: &AdjointConfig,
) -> Result<AdjointTrajectory> {
    match primal.dynamics {
        Dynamics::Penalty(g) if g == gamma => integrate_adjoint(model, primal, terminal, cfg),
        _ => Err(Error::contract(format!(
            "primal was integrated with {}, not penalty γ = {gamma}",
            primal.dynamics.label()
        ))),
    }
}

/// `⟨q, v⟩ + σ·w + ⟨p, f⟩ + r·ĝ`.
///
/// For penalty dynamics `a.sigma` is read as `s` and `ĝ = g − γ·y₊·w₊`;
/// for the limit `ĝ = g`.
pub fn hamiltonian(model: &CanonicalModel, dynamics: Dynamics, s: &SystemState, a: &AdjointState, u: &[f64]) -> f64 {
    let n = model.n();
    let mut f = vec![0.0; n];
    model.f_into(&s.x, s.y, &s.v, s.w, u, &mut f);
    let mut g = model.g_raw(&s.x, s.y, &s.v, s.w, u);
    if let Some(gamma) = dynamics.gamma() {
        g -= gamma * s.y.max(0.0) * s.w.max(0.0);
    }
    dot(&a.q, &s.v) + a.sigma * s.w + dot(&a.p, &f) + a.r * g
}

/// Switching coefficients `⟨p, f3_i⟩ + r·g3_i` per channel.
pub fn switching_coefficients(model: &CanonicalModel, s: &SystemState, a: &AdjointState) -> Vec<f64> {
    let (f3, g3) = model.control_coefficients(s);
    (0..model.m())
        .map(|i| {
            let mut c = a.r * g3[i];
            for k in 0..model.n() {
                c += a.p[k] * f3[(k, i)];
            }
            c
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxConditionTrace {
    /// `H(u*) − H(û)` per node (the smaller of the two one-sided controls).
    pub residual: Vec<f64>,
    /// Box maximizer per node.
    pub suggested: Vec<Vec<f64>>,
    /// Node has a channel with `|coefficient| ≤ switch_tol`.
    pub degenerate: Vec<bool>,
    pub max_violation: f64,
    pub degenerate_count: usize,
}

pub fn max_condition_residual(
    model: &CanonicalModel,
    primal: &Trajectory,
    adj: &AdjointTrajectory,
    switch_tol: f64,
) -> MaxConditionTrace {
    let bx = model.control_box();
    let len = primal.len();
    let mut out = MaxConditionTrace {
        residual: Vec::with_capacity(len),
        suggested: Vec::with_capacity(len),
        degenerate: Vec::with_capacity(len),
        max_violation: 0.0,
        degenerate_count: 0,
    };
    for i in 0..len {
        let coef = switching_coefficients(model, &primal.states[i], &adj.adjoints[i]);
        let left = &primal.controls[i];
        let right = &primal.controls[(i + 1).min(len - 1)];
        let mut best = left.clone();
        let mut degenerate = false;
        for (c, b) in coef.iter().zip(best.iter_mut()).enumerate().map(|(k, (c, b))| ((k, *c), b)) {
            let (k, c) = c;
            if c > switch_tol {
                *b = bx.hi[k];
            } else if c < -switch_tol {
                *b = bx.lo[k];
            } else {
                degenerate = true;
            }
        }
        let gap = |u: &[f64]| -> f64 {
            coef.iter()
                .enumerate()
                .filter(|(_, c)| c.abs() > switch_tol)
                .map(|(k, c)| c * (best[k] - u[k]))
                .sum::<f64>()
        };
        let res = gap(left).min(gap(right)).max(0.0);
        out.max_violation = out.max_violation.max(res);
        if degenerate {
            out.degenerate_count += 1;
        }
        out.residual.push(res);
        out.suggested.push(best);
        out.degenerate.push(degenerate);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmpTolerances {
    /// Per-interval integral defect of the `q`, `p`, `r` and `σ` equations.
    pub residual: f64,
    /// Relative drift `max|H − H̄| / (1 + |H̄|)`.
    pub hamiltonian: f64,
    pub max_condition: f64,
    pub nontriviality: f64,
    pub mu: f64,
    pub h_bar: f64,
    /// `y < −contact` counts as off the wall.
    pub contact: f64,
    pub switch_tol: f64,
}

impl Default for PmpTolerances {
    fn default() -> Self {
        PmpTolerances {
            residual: 1e-6,
            hamiltonian: 1e-5,
            max_condition: 1e-6,
            nontriviality: 1e-9,
            mu: 1e-8,
            h_bar: 1e-8,
            contact: 1e-6,
            switch_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmpReport {
    pub residual_q: f64,
    pub residual_p: f64,
    pub residual_r: f64,
    pub sigma_defect: f64,
    pub max_condition_violation: f64,
    pub degenerate_points: usize,
    pub hamiltonian_drift: f64,
    pub h_bar: f64,
    pub nontriviality: f64,
    pub mu_support_violation: f64,
    pub sigma_sign: SigmaSign,
    pub tolerances: PmpTolerances,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Node indices excluded from the Hamiltonian drift: both copies of every
/// impact node and, for penalty runs, a `10/√γ` band around each impact.
fn drift_mask(primal: &Trajectory) -> Vec<bool> {
    let len = primal.len();
    let mut skip = vec![false; len];
    for i in 1..len {
        if primal.times[i] == primal.times[i - 1] {
            skip[i] = true;
            skip[i - 1] = true;
        }
    }
    if let Some(gamma) = primal.dynamics.gamma() {
        let band = 10.0 / gamma.sqrt();
        let hits = crate::limits::penalty_impacts(primal);
        for (i, t) in primal.times.iter().enumerate() {
            if hits.iter().any(|h| (t - h).abs() <= band) {
                skip[i] = true;
            }
        }
    }
    skip
}

/// Per-interval defects of the limit-form adjoint equations, using Simpson's
/// rule with a Hermite midpoint for the costate.
struct Defects {
    q: f64,
    p: f64,
    r: f64,
    /// `Δσ − ∫(rhs) dt` per interval.
    dmu: Vec<f64>,
}

fn limit_form_defects(model: &CanonicalModel, primal: &Trajectory, adj: &AdjointTrajectory) -> Defects {
    let n = model.n();
    let gamma = primal.dynamics.gamma().unwrap_or(0.0);
    let cfg = AdjointConfig {
        sigma_sign: adj.sigma_sign,
        ..AdjointConfig::default()
    };
    let mut out = Defects {
        q: 0.0,
        p: 0.0,
        r: 0.0,
        dmu: vec![0.0; primal.len().saturating_sub(1)],
    };
    for i in 0..primal.len() - 1 {
        let iv = Interval::new(model, gamma, primal, i);
        if iv.h <= 0.0 {
            continue;
        }
        let la = adj.adjoints[i].to_flat();
        let lb = adj.adjoints[i + 1].to_flat();
        // σ-form rhs: the limit equations, γ-terms absorbed into σ and μ.
        let rhs = |z: &[f64], l: &[f64]| -> Vec<f64> {
            let mut ext = l.to_vec();
            ext.push(0.0);
            let mut d = adjoint_rhs(model, 0.0, &cfg, z, iv.u, &ext);
            d.pop();
            d
        };
        let da = rhs(&iv.za, &la);
        let db = rhs(&iv.zb, &lb);
        let lm = hermite(&la, &da, &lb, &db, iv.h, 0.5);
        let zm = iv.at(iv.ta + 0.5 * iv.h);
        let dm = rhs(&zm, &lm);
        for k in 0..2 * n + 2 {
            let defect = (lb[k] - la[k]) - iv.h / 6.0 * (da[k] + 4.0 * dm[k] + db[k]);
            if k < n {
                out.q = out.q.max(defect.abs());
            } else if k == n {
                out.dmu[i] = defect;
            } else if k < 2 * n + 1 {
                out.p = out.p.max(defect.abs());
            } else {
                out.r = out.r.max(defect.abs());
            }
        }
    }
    out
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Residuals of the limiting maximum-principle conditions along `primal`.
pub fn verify_theorem2(
    model: &CanonicalModel,
    primal: &Trajectory,
    adj: &AdjointTrajectory,
    tol: &PmpTolerances,
) -> Result<PmpReport> {
    check_dims(model, primal, adj.terminal())?;
    if adj.len() != primal.len() || adj.times.iter().zip(&primal.times).any(|(a, b)| a != b) {
        return Err(Error::contract("adjoint and primal grids differ"));
    }
    let defects = limit_form_defects(model, primal, adj);
    let free = |i: usize| primal.states[i].y < -tol.contact && primal.states[i + 1].y < -tol.contact;
    let mut sigma_defect: f64 = 0.0;
    let mut mu_support = 0.0;
    for i in 0..primal.len() - 1 {
        if !free(i) {
            continue;
        }
        let dmu_recorded = adj.mu_cumulative[i + 1] - adj.mu_cumulative[i];
        sigma_defect = sigma_defect.max((defects.dmu[i] - dmu_recorded).abs());
        mu_support += dmu_recorded.abs();
    }
    let mc = max_condition_residual(model, primal, adj, tol.switch_tol);

    // Limit-form Hamiltonian (identical to the penalty form written with s).
    let hs: Vec<f64> = (0..primal.len())
        .map(|i| hamiltonian(model, Dynamics::Limit, &primal.states[i], &adj.adjoints[i], &primal.controls[i]))
        .collect();
    let mask = drift_mask(primal);
    let kept: Vec<f64> = hs.iter().zip(&mask).filter(|(_, s)| !**s).map(|(h, _)| *h).collect();
    let h_bar = median(&kept);
    let drift = kept.iter().map(|h| (h - h_bar).abs()).fold(0.0, f64::max);
    let nontriviality = adj.terminal().norm_sq();

    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("residual_q", defects.q <= tol.residual);
    check("residual_p", defects.p <= tol.residual);
    check("residual_r", defects.r <= tol.residual);
    check("sigma_defect", sigma_defect <= tol.residual);
    check("max_condition_violation", mc.max_violation <= tol.max_condition);
    check("hamiltonian_drift", drift <= tol.hamiltonian * (1.0 + h_bar.abs()));
    check("h_bar", h_bar >= -tol.h_bar);
    check("nontriviality", (nontriviality - 1.0).abs() <= tol.nontriviality);
    check("mu_support_violation", mu_support <= tol.mu);
    Ok(PmpReport {
        residual_q: defects.q,
        residual_p: defects.p,
        residual_r: defects.r,
        sigma_defect,
        max_condition_violation: mc.max_violation,
        degenerate_points: mc.degenerate_count,
        hamiltonian_drift: drift,
        h_bar,
        nontriviality,
        mu_support_violation: mu_support,
        sigma_sign: adj.sigma_sign,
        tolerances: *tol,
        pass: failures.is_empty(),
        failures,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MainAssumptionReport {
    /// Total length of grid intervals with `y ≥ 0` and `|w| ≤ tol_w` at both ends.
    pub measure_e: f64,
    /// Largest discrete derivative of `−∂w g·r + γ·h_w·y₊·r` on those intervals.
    pub derivative_defect: f64,
    pub intervals: Vec<(f64, f64)>,
}

pub fn main_assumption_diagnostic(
    model: &CanonicalModel,
    primal: &Trajectory,
    adj: &AdjointTrajectory,
    tol_w: f64,
) -> MainAssumptionReport {
    let gamma = primal.dynamics.gamma().unwrap_or(0.0);
    let n = model.n();
    let phi = |i: usize| -> f64 {
        let s = &primal.states[i];
        let jac = model.jacobian_fg(s, &primal.controls[i]);
        let r = adj.adjoints[i].r;
        -jac[(n, 2 * n + 1)] * r + gamma * adj.h_w[i] * s.y.max(0.0) * r
    };
    let in_e = |i: usize| primal.states[i].y >= 0.0 && primal.states[i].w.abs() <= tol_w;
    let mut report = MainAssumptionReport {
        measure_e: 0.0,
        derivative_defect: 0.0,
        intervals: Vec::new(),
    };
    let mut open: Option<f64> = None;
    for i in 0..primal.len().saturating_sub(1) {
        let h = primal.times[i + 1] - primal.times[i];
        if in_e(i) && in_e(i + 1) && h > 0.0 {
            report.measure_e += h;
            report.derivative_defect = report.derivative_defect.max(((phi(i + 1) - phi(i)) / h).abs());
            open.get_or_insert(primal.times[i]);
        } else if let Some(a) = open.take() {
            report.intervals.push((a, primal.times[i]));
        }
    }
    if let Some(a) = open {
        report.intervals.push((a, primal.t_final()));
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum GradientCheck {
    Compared {
        adjoint_value: f64,
        fd_value: f64,
        rel_gap: f64,
    },
    /// The stencil leaves the smooth regime: the penalty is active, or the
    /// set of nodes with `y ≥ 0, w > 0` differs between the perturbed runs.
    Inconclusive,
}

/// Step of the central difference.
pub const GRADIENT_FD_STEP: f64 = 1e-5;

/// Nodes where the penalty force could act.
fn sign_pattern(traj: &Trajectory) -> Vec<bool> {
    traj.states.iter().map(|s| s.y >= 0.0 && s.w > 0.0).collect()
}

/// `⟨λ(0), d⟩` against the central difference of `⟨d, z(T)⟩` along `d`,
/// where `λ` is the adjoint with `λ(T) = d`.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_gradient_check(
    model: &CanonicalModel,
    gamma: f64,
    control: &BangBangControl,
    init: &SystemState,
    t_final: f64,
    direction: &[f64],
    cfg: &IntegratorConfig,
    fd_steps: usize,
) -> Result<GradientCheck> {
    let d = model.state_dim();
    if direction.len() != d {
        return Err(Error::contract(format!("direction has length {}, expected {d}", direction.len())));
    }
    if direction.iter().all(|c| *c == 0.0) {
        return Ok(GradientCheck::Compared {
            adjoint_value: 0.0,
            fd_value: 0.0,
            rel_gap: 0.0,
        });
    }
    let primal = integrate_penalty(model, gamma, control, t_final, cfg, init)?;
    let terminal = AdjointState::from_flat(model.n(), direction);
    let adj = integrate_adjoint(model, &primal, &terminal, &AdjointConfig::default())?;
    let adjoint_value = dot(&adj.initial().to_flat(), direction);

    let z0 = init.to_flat();
    let shifted = |k: f64| -> Result<Trajectory> {
        let z: Vec<f64> = z0.iter().zip(direction).map(|(a, b)| a + k * GRADIENT_FD_STEP * b).collect();
        integrate_penalty_on_grid(model, gamma, control, t_final, fd_steps, &SystemState::from_flat(model.n(), &z)?)
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    let centre = integrate_penalty_on_grid(model, gamma, control, t_final, fd_steps, init)?;
    let active = [&plus, &minus, &centre].iter().any(|t| t.final_nu() > 0.0) || primal.final_nu() > 0.0;
    if active || sign_pattern(&plus) != sign_pattern(&minus) || sign_pattern(&plus) != sign_pattern(&centre) {
        return Ok(GradientCheck::Inconclusive);
    }
    let fd_value = (dot(direction, &plus.final_state().to_flat()) - dot(direction, &minus.final_state().to_flat()))
        / (2.0 * GRADIENT_FD_STEP);
    Ok(GradientCheck::Compared {
        adjoint_value,
        fd_value,
        rel_gap: (adjoint_value - fd_value).abs() / fd_value.abs().max(1.0),
    })
}

/// Unit covector `λ(T)` whose adjoint makes every switching coefficient vanish
/// at the switch times of `control`; the sign is chosen so that `H ≥ 0`.
///
/// Used for point targets, where transversality leaves `λ(T)` free. The
/// choice is unique when the number of switches is `2n + 1`; otherwise the
/// right singular vector of the smallest singular value is taken.
pub fn switching_covector(
    model: &CanonicalModel,
    primal: &Trajectory,
    control: &BangBangControl,
    cfg: &AdjointConfig,
) -> Result<AdjointState> {
    let n = model.n();
    let d = 2 * n + 2;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut basis = Vec::with_capacity(d);
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        basis.push(integrate_adjoint(model, primal, &AdjointState::from_flat(n, &e), cfg)?);
    }
    for (ch, channel) in control.channels.iter().enumerate() {
        for &ts in &channel.switch_times {
            let i = primal
                .times
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - ts).abs().total_cmp(&(b.1 - ts).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            rows.push(
                basis
                    .iter()
                    .map(|adj| switching_coefficients(model, &primal.states[i], &adj.adjoints[i])[ch])
                    .collect(),
            );
        }
    }
    while rows.len() < d {
        rows.push(vec![0.0; d]);
    }
    let a = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::LinearAlgebra("SVD failed".into()))?;
    let k = svd.singular_values.imin();
    let lam: Vec<f64> = vt.row(k).iter().copied().collect();
    let mut cov = AdjointState::from_flat(n, &lam).normalized()?;
    // λ(t) is linear in λ(T): evaluate H for the candidate directly.
    let last = primal.len() - 1;
    let h: f64 = (0..d)
        .map(|j| {
            let bj = &basis[j];
            let h_j = hamiltonian(model, Dynamics::Limit, &primal.states[last], &bj.adjoints[last], &primal.controls[last]);
            lam[j] * h_j
        })
        .sum();
    if h < 0.0 {
        cov = cov.scaled(-1.0);
    }
    Ok(cov)
}

/// Matrix of the linear system obeyed by `(q, σ, p, r)` on a contact arc of
/// the piston model while `p + r = 0`, with `dμ` eliminated through
/// `q̇ + σ̇ = μ̇`. Its characteristic polynomial is `λ²(λ² − 2cλ + 2a)` when
/// `b = 0`.
pub fn contact_arc_matrix(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 0.0, a, -a, //
            0.0, -b, -a, a + 2.0 * c * b + b * b, //
            -1.0, 0.0, c, -c, //
            0.0, -1.0, -c, c + b,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ConstantControl;
    use crate::integrator::{integrate, integrate_limit};
    use crate::model::{builtin_example1, builtin_example2, PistonParams};

    fn ex1_free(u: f64, t: f64) -> Trajectory {
        integrate_limit(
            &builtin_example1(),
            &ConstantControl::scalar(u),
            t,
            &IntegratorConfig::default(),
            &SystemState::scalar(-10.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn ex1_decoupled_adjoints() {
        let model = builtin_example1();
        let traj = ex1_free(1.0, 2.0);
        let adj = integrate_adjoint(&model, &traj, &AdjointState::new(vec![], 0.0, vec![], 1.0), &AdjointConfig::default())
            .unwrap();
        for a in &adj.adjoints {
            assert!(a.sigma.abs() < 1e-15 && (a.r - 1.0).abs() < 1e-15);
        }
        let adj = integrate_adjoint(&model, &traj, &AdjointState::new(vec![], 1.0, vec![], 0.0), &AdjointConfig::default())
            .unwrap();
        for (t, a) in adj.times.iter().zip(&adj.adjoints) {
            assert!((a.r - (2.0 - t)).abs() < 1e-12, "r({t}) = {}", a.r);
            assert!((a.sigma - 1.0).abs() < 1e-15);
        }
        assert!(adj.mu_cumulative.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn hamiltonian_examples() {
        let m1 = builtin_example1();
        let s = SystemState::scalar(-1.0, 0.0);
        assert_eq!(hamiltonian(&m1, Dynamics::Limit, &s, &AdjointState::zeros(0), &[1.0]), 0.0);
        let a = AdjointState::new(vec![], 0.0, vec![], 1.0);
        assert_eq!(hamiltonian(&m1, Dynamics::Limit, &s, &a, &[1.0]), 1.0);
        let m2 = builtin_example2(PistonParams::default()).unwrap();
        let a = AdjointState::new(vec![0.0], 0.0, vec![1.0], 1.0);
        let h = hamiltonian(&m2, Dynamics::Limit, &SystemState::zeros(1), &a, &[1.0]);
        assert!((h - 2.0).abs() < 1e-15);
        // Penalty form subtracts r·γ·y₊·w₊.
        let s = SystemState::scalar(0.1, 2.0);
        let h = hamiltonian(&m1, Dynamics::Penalty(100.0), &s, &AdjointState::new(vec![], 0.0, vec![], 1.0), &[0.0]);
        assert!((h + 20.0).abs() < 1e-12);
    }

    #[test]
    fn max_condition_flags_wrong_sign() {
        let model = builtin_example1();
        let good = ex1_free(1.0, 1.0);
        let adj = integrate_adjoint(&model, &good, &AdjointState::new(vec![], 0.0, vec![], 0.5), &AdjointConfig::default())
            .unwrap();
        let tr = max_condition_residual(&model, &good, &adj, 1e-12);
        assert_eq!(tr.max_violation, 0.0);
        let bad = ex1_free(-1.0, 1.0);
        let adj = integrate_adjoint(&model, &bad, &AdjointState::new(vec![], 0.0, vec![], 0.5), &AdjointConfig::default())
            .unwrap();
        let tr = max_condition_residual(&model, &bad, &adj, 1e-12);
        assert!((tr.max_violation - 1.0).abs() < 1e-12);
        // Zero coefficient is degenerate, not a violation.
        let adj = integrate_adjoint(&model, &bad, &AdjointState::new(vec![], 0.0, vec![], 0.0), &AdjointConfig::default())
            .unwrap();
        let tr = max_condition_residual(&model, &bad, &adj, 1e-12);
        assert_eq!(tr.max_violation, 0.0);
        assert_eq!(tr.degenerate_count, bad.len());
    }

    fn rest_to_rest() -> (CanonicalModel, Trajectory, BangBangControl) {
        let model = builtin_example1();
        let ctl = BangBangControl::single(1.0, vec![1.0], model.control_box(), 2.0).unwrap();
        let traj = integrate_limit(&model, &ctl, 2.0, &IntegratorConfig::default(), &SystemState::scalar(-2.0, 0.0)).unwrap();
        (model, traj, ctl)
    }

    #[test]
    fn rest_to_rest_passes_and_perturbation_fails() {
        let (model, traj, ctl) = rest_to_rest();
        let cov = switching_covector(&model, &traj, &ctl, &AdjointConfig::default()).unwrap();
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((cov.sigma - s2).abs() < 1e-9 && (cov.r + s2).abs() < 1e-9, "{cov:?}");
        let adj = integrate_adjoint(&model, &traj, &cov, &AdjointConfig::default()).unwrap();
        let rep = verify_theorem2(&model, &traj, &adj, &PmpTolerances::default()).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.h_bar - s2).abs() < 1e-9);

        let mut bad = adj.clone();
        let last = bad.adjoints.len() - 1;
        bad.adjoints[last].r *= 1.01;
        let rep = verify_theorem2(&model, &traj, &bad, &PmpTolerances::default()).unwrap();
        assert!(!rep.pass);
        assert!(rep.failures.contains(&"residual_r".to_string()));
    }

    #[test]
    fn mu_on_free_arc_is_flagged() {
        let (model, traj, ctl) = rest_to_rest();
        let cov = switching_covector(&model, &traj, &ctl, &AdjointConfig::default()).unwrap();
        let mut adj = integrate_adjoint(&model, &traj, &cov, &AdjointConfig::default()).unwrap();
        for (t, m) in adj.times.iter().zip(adj.mu_cumulative.iter_mut()) {
            *m = 0.1 * t.clamp(0.5, 0.7);
        }
        let rep = verify_theorem2(&model, &traj, &adj, &PmpTolerances::default()).unwrap();
        assert!(rep.mu_support_violation > 0.01);
        assert!(rep.failures.contains(&"mu_support_violation".to_string()));
    }

    #[test]
    fn plus_sign_is_inconsistent_with_minus_integration() {
        let (model, traj, ctl) = rest_to_rest();
        let cov = switching_covector(&model, &traj, &ctl, &AdjointConfig::default()).unwrap();
        let mut adj = integrate_adjoint(&model, &traj, &cov, &AdjointConfig::default()).unwrap();
        adj.sigma_sign = SigmaSign::Plus;
        let rep = verify_theorem2(&model, &traj, &adj, &PmpTolerances::default()).unwrap();
        assert!(rep.failures.contains(&"residual_r".to_string()));
    }

    #[test]
    fn contact_arc_matrix_trace_and_kernel() {
        let (a, c) = (1.5, 0.25);
        let m = contact_arc_matrix(a, 0.0, c);
        // λ²(λ² − 2cλ + 2a): trace 2c, second invariant 2a, det 0.
        assert!((m.trace() - 2.0 * c).abs() < 1e-15);
        assert!(m.determinant().abs() < 1e-12);
        let e2: f64 = (&m * &m).trace();
        assert!(((m.trace().powi(2) - e2) / 2.0 - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn example2_gradient_check_is_tight() {
        let model = builtin_example2(PistonParams::default()).unwrap();
        let ctl = BangBangControl::single(1.0, vec![0.7], model.control_box(), 1.5).unwrap();
        let init = SystemState::new(vec![0.0], -3.0, vec![0.0], 0.0);
        let cfg = IntegratorConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            ..IntegratorConfig::default()
        };
        let dir = [0.3, -0.5, 0.2, 0.7];
        match adjoint_gradient_check(&model, 1e4, &ctl, &init, 1.5, &dir, &cfg, 3000).unwrap() {
            GradientCheck::Compared { rel_gap, .. } => assert!(rel_gap < 1e-6, "{rel_gap}"),
            GradientCheck::Inconclusive => panic!("regime should be smooth"),
        }
        let zero = adjoint_gradient_check(&model, 1e4, &ctl, &init, 1.5, &[0.0; 4], &cfg, 100).unwrap();
        assert_eq!(
            zero,
            GradientCheck::Compared {
                adjoint_value: 0.0,
                fd_value: 0.0,
                rel_gap: 0.0
            }
        );
    }

    #[test]
    fn gradient_check_across_impact_is_inconclusive() {
        let model = builtin_example1();
        let ctl = BangBangControl::single(1.0, vec![2.0], model.control_box(), 3.0).unwrap();
        let r = adjoint_gradient_check(
            &model,
            1e4,
            &ctl,
            &SystemState::scalar(-0.5, 1.0),
            3.0,
            &[0.0, 1.0],
            &IntegratorConfig::default(),
            3000,
        )
        .unwrap();
        assert_eq!(r, GradientCheck::Inconclusive);
    }

    #[test]
    fn no_contact_has_empty_e() {
        let model = builtin_example1();
        let traj = integrate(
            &model,
            Dynamics::Penalty(1e4),
            &ConstantControl::scalar(0.0),
            1.0,
            &IntegratorConfig::default(),
            &SystemState::scalar(-1.0, 0.0),
        )
        .unwrap();
        let adj = integrate_adjoint(&model, &traj, &AdjointState::new(vec![], 0.0, vec![], 1.0), &AdjointConfig::default())
            .unwrap();
        let rep = main_assumption_diagnostic(&model, &traj, &adj, 1e-3);
        assert_eq!(rep.measure_e, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn maximizer_is_scale_invariant(k in 0.01..100.0f64, r in -2.0..2.0f64, sig in -2.0..2.0f64) {
                let model = builtin_example1();
                let traj = ex1_free(1.0, 1.0);
                let a = integrate_adjoint(&model, &traj, &AdjointState::new(vec![], sig, vec![], r), &AdjointConfig::default()).unwrap();
                let b = integrate_adjoint(&model, &traj, &AdjointState::new(vec![], k * sig, vec![], k * r), &AdjointConfig::default()).unwrap();
                let ta = max_condition_residual(&model, &traj, &a, 0.0);
                let tb = max_condition_residual(&model, &traj, &b, 0.0);
                prop_assert_eq!(ta.suggested, tb.suggested);
            }

            #[test]
            fn normalized_has_unit_norm(v in proptest::collection::vec(-5.0..5.0f64, 4)) {
                prop_assume!(v.iter().any(|c| c.abs() > 1e-3));
                let a = AdjointState::from_flat(1, &v).normalized().unwrap();
                prop_assert!((a.norm_sq() - 1.0).abs() < 1e-12);
            }
        }
    }
}
