//! Canonical-form controlled systems with one unilateral coordinate.
//!
//! The state is `(x, y, v, w)` with `x, v ∈ Rⁿ`, `y, w ∈ R`, `ẋ = v`, `ẏ = w`
//! and the accelerations
//!
//! ```text
//! v̇ = f1(x,y,v) + f2(x,y,v)·w + f3(x,y,v)·u
//! ẇ = g1(x,y,v) + g2(x,y,v)·w + ⟨g3(x,y,v), u⟩   (minus the wall reaction)
//! ```
//!
//! Components are plain closures. Jacobians for the adjoint come from an
//! optional analytic callable or from central differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type VecComponent = Arc<dyn Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type ScalarComponent = Arc<dyn Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync>;
pub type MatComponent = Arc<dyn Fn(&[f64], f64, &[f64]) -> DMatrix<f64> + Send + Sync>;
/// Jacobian of the stacked accelerations `(f, g)` with respect to `(x, y, v, w)`,
/// an `(n+1) × (2n+2)` matrix, evaluated at a state and control.
pub type JacobianFn = Arc<dyn Fn(&SystemState, &[f64]) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub x: Vec<f64>,
    pub y: f64,
    pub v: Vec<f64>,
    pub w: f64,
}

impl SystemState {
    pub fn new(x: Vec<f64>, y: f64, v: Vec<f64>, w: f64) -> Self {
        SystemState { x, y, v, w }
    }

    /// State with an empty position block, as used by the point-mass model.
    pub fn scalar(y: f64, w: f64) -> Self {
        SystemState {
            x: Vec::new(),
            y,
            v: Vec::new(),
            w,
        }
    }

    pub fn zeros(n: usize) -> Self {
        SystemState::new(vec![0.0; n], 0.0, vec![0.0; n], 0.0)
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Flattened as `(x, y, v, w)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.x.len() + 2);
        z.extend_from_slice(&self.x);
        z.push(self.y);
        z.extend_from_slice(&self.v);
        z.push(self.w);
        z
    }

    pub fn from_flat(n: usize, z: &[f64]) -> Result<Self> {
        if z.len() != 2 * n + 2 {
            return Err(Error::contract(format!(
                "flat state has length {}, expected {}",
                z.len(),
                2 * n + 2
            )));
        }
        Ok(SystemState {
            x: z[..n].to_vec(),
            y: z[n],
            v: z[n + 1..2 * n + 1].to_vec(),
            w: z[2 * n + 1],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.y.is_finite()
            && self.w.is_finite()
            && self.x.iter().all(|a| a.is_finite())
            && self.v.iter().all(|a| a.is_finite())
    }

    /// `|x| + |y| + |v| + |w|` with Euclidean block norms.
    pub fn block_norm_sum(&self) -> f64 {
        norm(&self.x) + self.y.abs() + norm(&self.v) + self.w.abs()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.to_flat())
    }
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// A control value `u ∈ Rᵐ`.
pub type ControlValue = Vec<f64>;

/// Product of closed intervals `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ControlBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::arg("control box needs matching, nonempty bounds"));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::arg(format!("control box channel {i} is unbounded")));
            }
            if l > h {
                return Err(Error::arg(format!("control box channel {i} has lo > hi")));
            }
        }
        Ok(ControlBox { lo, hi })
    }

    pub fn symmetric(m: usize, half_width: f64) -> Self {
        ControlBox {
            lo: vec![-half_width; m],
            hi: vec![half_width; m],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for (v, (l, h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }
}

#[derive(Clone)]
pub struct CanonicalModel {
    name: String,
    n: usize,
    m: usize,
    f1: VecComponent,
    f2: VecComponent,
    f3: MatComponent,
    g1: ScalarComponent,
    g2: ScalarComponent,
    g3: VecComponent,
    control_box: ControlBox,
    growth_constant: f64,
    jacobian: Option<JacobianFn>,
}

impl fmt::Debug for CanonicalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CanonicalModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("control_box", &self.control_box)
            .field("growth_constant", &self.growth_constant)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl CanonicalModel {
    /// A model with all components zero. Use the `with_*` setters to fill it.
    pub fn new(
        name: impl Into<String>,
        n: usize,
        control_box: ControlBox,
        growth_constant: f64,
    ) -> Result<Self> {
        let m = control_box.dim();
        if m == 0 {
            return Err(Error::arg("control dimension must be positive"));
        }
        if !(growth_constant > 0.0) {
            return Err(Error::arg("growth constant must be positive"));
        }
        Ok(CanonicalModel {
            name: name.into(),
            n,
            m,
            f1: Arc::new(move |_, _, _| vec![0.0; n]),
            f2: Arc::new(move |_, _, _| vec![0.0; n]),
            f3: Arc::new(move |_, _, _| DMatrix::zeros(n, m)),
            g1: Arc::new(|_, _, _| 0.0),
            g2: Arc::new(|_, _, _| 0.0),
            g3: Arc::new(move |_, _, _| vec![0.0; m]),
            control_box,
            growth_constant,
            jacobian: None,
        })
    }

    pub fn with_f1(mut self, f: impl Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.f1 = Arc::new(f);
        self.jacobian = None;
        self
    }

    pub fn with_f2(mut self, f: impl Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.f2 = Arc::new(f);
        self.jacobian = None;
        self
    }

    pub fn with_f3(mut self, f: impl Fn(&[f64], f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.f3 = Arc::new(f);
        self.jacobian = None;
        self
    }

    pub fn with_g1(mut self, g: impl Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.g1 = Arc::new(g);
        self.jacobian = None;
        self
    }

    pub fn with_g2(mut self, g: impl Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.g2 = Arc::new(g);
        self.jacobian = None;
        self
    }

    pub fn with_g3(mut self, g: impl Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.g3 = Arc::new(g);
        self.jacobian = None;
        self
    }

    /// Analytic Jacobian of `(f, g)`. Must be set after the components,
    /// since every component setter clears it.
    pub fn with_jacobian(
        mut self,
        j: impl Fn(&SystemState, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(j));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n + 2
    }

    pub fn control_box(&self) -> &ControlBox {
        &self.control_box
    }

    pub fn growth_constant(&self) -> f64 {
        self.growth_constant
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn check_state(&self, s: &SystemState) -> Result<()> {
        if s.x.len() != self.n || s.v.len() != self.n {
            return Err(Error::contract(format!(
                "state blocks have dimensions ({}, {}), model expects {}",
                s.x.len(),
                s.v.len(),
                self.n
            )));
        }
        Ok(())
    }

    pub fn check_control(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.m {
            return Err(Error::contract(format!(
                "control has dimension {}, model expects {}",
                u.len(),
                self.m
            )));
        }
        Ok(())
    }

    /// `f(x, y, v, w, u) = f1 + f2·w + f3·u`.
    pub fn eval_f(&self, s: &SystemState, u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_control(u)?;
        let mut out = vec![0.0; self.n];
        self.f_into(&s.x, s.y, &s.v, s.w, u, &mut out);
        Ok(out)
    }

    /// `g(x, y, v, w, u) = g1 + g2·w + ⟨g3, u⟩`.
    pub fn eval_g(&self, s: &SystemState, u: &[f64]) -> Result<f64> {
        self.check_state(s)?;
        self.check_control(u)?;
        Ok(self.g_raw(&s.x, s.y, &s.v, s.w, u))
    }

    pub(crate) fn f_into(&self, x: &[f64], y: f64, v: &[f64], w: f64, u: &[f64], out: &mut [f64]) {
        if self.n == 0 {
            return;
        }
        let f1 = (self.f1)(x, y, v);
        let f2 = (self.f2)(x, y, v);
        let f3 = (self.f3)(x, y, v);
        for i in 0..self.n {
            let mut acc = f1[i] + f2[i] * w;
            for j in 0..self.m {
                acc += f3[(i, j)] * u[j];
            }
            out[i] = acc;
        }
    }

    pub(crate) fn g_raw(&self, x: &[f64], y: f64, v: &[f64], w: f64, u: &[f64]) -> f64 {
        let g3 = (self.g3)(x, y, v);
        (self.g1)(x, y, v) + (self.g2)(x, y, v) * w + dot(&g3, u)
    }

    /// Control coefficients `(f3, g3)` at a state: the parts of `(f, g)`
    /// multiplying `u`.
    pub fn control_coefficients(&self, s: &SystemState) -> (DMatrix<f64>, Vec<f64>) {
        ((self.f3)(&s.x, s.y, &s.v), (self.g3)(&s.x, s.y, &s.v))
    }

    /// Jacobian of `(f, g)` with respect to the flat state `(x, y, v, w)`.
    pub fn jacobian_fg(&self, s: &SystemState, u: &[f64]) -> DMatrix<f64> {
        if let Some(j) = &self.jacobian {
            return j(s, u);
        }
        let n = self.n;
        let dim = self.state_dim();
        let z = s.to_flat();
        let mut jac = DMatrix::zeros(n + 1, dim);
        let mut zp = z.clone();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for k in 0..dim {
            let h = 1e-6 * (1.0 + z[k].abs());
            zp[k] = z[k] + h;
            let sp = SystemState::from_flat(n, &zp).expect("flat dims");
            self.f_into(&sp.x, sp.y, &sp.v, sp.w, u, &mut fp);
            let gp = self.g_raw(&sp.x, sp.y, &sp.v, sp.w, u);
            zp[k] = z[k] - h;
            let sm = SystemState::from_flat(n, &zp).expect("flat dims");
            self.f_into(&sm.x, sm.y, &sm.v, sm.w, u, &mut fm);
            let gm = self.g_raw(&sm.x, sm.y, &sm.v, sm.w, u);
            zp[k] = z[k];
            for i in 0..n {
                jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
            jac[(n, k)] = (gp - gm) / (2.0 * h);
        }
        jac
    }
}

/// The point mass `ÿ = u − N`, `y ≤ 0`, `u ∈ [−1, 1]`; no `x` block.
pub fn builtin_example1() -> CanonicalModel {
    CanonicalModel::new("ex1", 0, ControlBox::symmetric(1, 1.0), 1.0)
        .expect("valid builtin")
        .with_g3(|_, _, _| vec![1.0])
        .with_jacobian(|_, _| DMatrix::zeros(1, 2))
}

/// Coefficients of the piston-in-cylinder model in canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PistonParams {
    /// Cylinder mass (the piston has unit mass).
    pub mass_m: f64,
    /// Spring stiffness.
    pub k: f64,
    /// Piston/cylinder resistance.
    pub alpha: f64,
    /// Cylinder/ground resistance.
    pub beta: f64,
}

impl Default for PistonParams {
    fn default() -> Self {
        PistonParams {
            mass_m: 1.0,
            k: 2.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl PistonParams {
    /// `(a, b, c) = (k/(M+1), α(M+1)/M, β/(M+1))`.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let mp1 = self.mass_m + 1.0;
        (self.k / mp1, self.alpha * mp1 / self.mass_m, self.beta / mp1)
    }

    /// Physical parameters giving prescribed `(a, b, c)` for unit cylinder mass.
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Self {
        PistonParams {
            mass_m: 1.0,
            k: 2.0 * a,
            alpha: 0.5 * b,
            beta: 2.0 * c,
        }
    }
}

/// Piston inside a spring-mounted cylinder, with `x = M·X + Y`, `y = Y − X`:
///
/// ```text
/// v̇ = −a(x−y) − c(v−w) + u
/// ẇ =  a(x−y) + c(v−w) − b·w + u
/// ```
pub fn builtin_example2(params: PistonParams) -> Result<CanonicalModel> {
    if !(params.mass_m > 0.0) {
        return Err(Error::arg("mass_M must be positive"));
    }
    if !(params.k > 0.0) {
        return Err(Error::arg("k must be positive"));
    }
    if !(params.alpha > 0.0) {
        return Err(Error::arg("alpha must be positive"));
    }
    if !(params.beta >= 0.0) {
        return Err(Error::arg("beta must be non-negative"));
    }
    let (a, b, c) = params.coefficients();
    let growth = 1.0 + 2.0 * a + 2.0 * c + b;
    Ok(
        CanonicalModel::new("ex2", 1, ControlBox::symmetric(1, 1.0), growth)?
            .with_f1(move |x, y, v| vec![-a * (x[0] - y) - c * v[0]])
            .with_f2(move |_, _, _| vec![c])
            .with_f3(|_, _, _| DMatrix::from_element(1, 1, 1.0))
            .with_g1(move |x, y, v| a * (x[0] - y) + c * v[0])
            .with_g2(move |_, _, _| -c - b)
            .with_g3(|_, _, _| vec![1.0])
            .with_jacobian(move |_, _| {
                DMatrix::from_row_slice(2, 4, &[-a, a, -c, c, a, -a, c, -c - b])
            }),
    )
}

/// Model lookup by the identifiers used on the command line.
pub fn builtin(id: &str, params: Option<PistonParams>) -> Result<CanonicalModel> {
    match id {
        "ex1" => Ok(builtin_example1()),
        "ex2" => builtin_example2(params.unwrap_or_default()),
        other => Err(Error::arg(format!("unknown model id '{other}' (expected ex1 or ex2)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthReport {
    pub max_ratio_f: f64,
    pub max_ratio_g: f64,
    pub max_ratio: f64,
    pub pass: bool,
}

/// Sampled check of `|f|, |g| ≤ M(1 + |x| + |y| + |v| + |w|)`.
pub fn check_growth_bound(
    model: &CanonicalModel,
    samples: &[(SystemState, ControlValue)],
    bound: f64,
) -> Result<GrowthReport> {
    if samples.is_empty() {
        return Err(Error::arg("growth check needs at least one sample"));
    }
    if !(bound > 0.0) {
        return Err(Error::arg("growth constant must be positive"));
    }
    let mut rf: f64 = 0.0;
    let mut rg: f64 = 0.0;
    for (s, u) in samples {
        let denom = 1.0 + s.block_norm_sum();
        let f = model.eval_f(s, u)?;
        let g = model.eval_g(s, u)?;
        rf = rf.max(norm(&f) / denom);
        rg = rg.max(g.abs() / denom);
    }
    let max_ratio = rf.max(rg);
    Ok(GrowthReport {
        max_ratio_f: rf,
        max_ratio_g: rg,
        max_ratio,
        pass: rf <= bound && rg <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex2(a_b_c: (f64, f64, f64)) -> CanonicalModel {
        let (a, b, c) = a_b_c;
        builtin_example2(PistonParams::from_coefficients(a, b, c)).unwrap()
    }

    #[test]
    fn example1_f_is_empty_and_g_is_u() {
        let m = builtin_example1();
        let s = SystemState::scalar(-1.0, 0.0);
        assert!(m.eval_f(&s, &[0.3]).unwrap().is_empty());
        assert_eq!(m.eval_g(&s, &[0.7]).unwrap(), 0.7);
        assert_eq!(m.eval_g(&s, &[1.0]).unwrap(), 1.0);
        assert_eq!(m.eval_g(&s, &[-1.0]).unwrap(), -1.0);
    }

    #[test]
    fn example2_evaluations() {
        let m = ex2((1.0, 2.0, 0.5));
        let s = SystemState::new(vec![1.0], 0.0, vec![0.0], 0.0);
        assert_eq!(m.eval_f(&s, &[0.0]).unwrap(), vec![-1.0]);
        assert_eq!(m.eval_g(&s, &[0.0]).unwrap(), 1.0);
        let s = SystemState::new(vec![0.0], 0.0, vec![1.0], 1.0);
        assert_eq!(m.eval_f(&s, &[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn example2_coefficients() {
        let p = PistonParams {
            mass_m: 1.0,
            k: 2.0,
            alpha: 1.0,
            beta: 1.0,
        };
        assert_eq!(p.coefficients(), (1.0, 2.0, 0.5));
        let p = PistonParams {
            mass_m: 1.0,
            k: 1.0,
            alpha: 1.0,
            beta: 0.0,
        };
        assert_eq!(p.coefficients(), (0.5, 2.0, 0.0));
        let (_, b1, _) = PistonParams { alpha: 1e-3, ..p }.coefficients();
        let (_, b2, _) = PistonParams { alpha: 2e-3, ..p }.coefficients();
        assert!((b2 - 2.0 * b1).abs() < 1e-15);
    }

    #[test]
    fn example2_rejects_bad_parameters() {
        let bad = PistonParams {
            mass_m: 0.0,
            ..Default::default()
        };
        assert!(matches!(builtin_example2(bad), Err(Error::InvalidArgument(_))));
        let bad = PistonParams {
            k: -1.0,
            ..Default::default()
        };
        assert!(matches!(builtin_example2(bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dimension_mismatch_is_a_contract_violation() {
        let m = ex2((1.0, 2.0, 0.5));
        let s = SystemState::scalar(0.0, 0.0);
        assert!(matches!(m.eval_f(&s, &[0.0]), Err(Error::ContractViolation(_))));
        let s = SystemState::zeros(1);
        assert!(matches!(m.eval_g(&s, &[0.0, 1.0]), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn g_vanishes_with_zero_drift_control_and_velocity() {
        let m = ex2((1.0, 2.0, 0.5));
        let s = SystemState::new(vec![-0.25], -0.25, vec![0.0], 0.0);
        assert_eq!(m.eval_g(&s, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn analytic_and_finite_difference_jacobians_agree() {
        let analytic = ex2((1.3, 0.7, 0.2));
        let (a, b, c) = (1.3, 0.7, 0.2);
        let fd = CanonicalModel::new("fd", 1, ControlBox::symmetric(1, 1.0), 10.0)
            .unwrap()
            .with_f1(move |x, y, v| vec![-a * (x[0] - y) - c * v[0]])
            .with_f2(move |_, _, _| vec![c])
            .with_f3(|_, _, _| DMatrix::from_element(1, 1, 1.0))
            .with_g1(move |x, y, v| a * (x[0] - y) + c * v[0])
            .with_g2(move |_, _, _| -c - b)
            .with_g3(|_, _, _| vec![1.0]);
        let s = SystemState::new(vec![0.4], -0.3, vec![0.1], 0.9);
        let ja = analytic.jacobian_fg(&s, &[0.5]);
        let jf = fd.jacobian_fg(&s, &[0.5]);
        assert!((ja - jf).abs().max() < 1e-8);
    }

    #[test]
    fn growth_check_example1_passes_with_unit_constant() {
        let m = builtin_example1();
        let samples: Vec<_> = (0..50)
            .map(|i| {
                let t = i as f64 / 49.0;
                (SystemState::scalar(-3.0 * t, 2.0 - 4.0 * t), vec![2.0 * t - 1.0])
            })
            .collect();
        assert!(check_growth_bound(&m, &samples, 1.0).unwrap().pass);
    }

    #[test]
    fn growth_check_example2_on_unit_ball() {
        let m = ex2((1.0, 2.0, 0.5));
        // Brute-force enumeration of the ratio on a grid inside the unit ball.
        let mut samples = Vec::new();
        let pts = [-0.5, 0.0, 0.5];
        for &x in &pts {
            for &y in &pts {
                for &v in &pts {
                    for &w in &pts {
                        for &u in &[-1.0, 1.0] {
                            samples.push((SystemState::new(vec![x], y, vec![v], w), vec![u]));
                        }
                    }
                }
            }
        }
        let mut expected: f64 = 0.0;
        for (s, u) in &samples {
            let (x, y, v, w) = (s.x[0], s.y, s.v[0], s.w);
            let f = -(x - y) - 0.5 * (v - w) + u[0];
            let g = (x - y) + 0.5 * (v - w) - 2.0 * w + u[0];
            let d = 1.0 + x.abs() + y.abs() + v.abs() + w.abs();
            expected = expected.max(f.abs() / d).max(g.abs() / d);
        }
        let rep = check_growth_bound(&m, &samples, 5.0).unwrap();
        assert!(rep.pass);
        assert!((rep.max_ratio - expected).abs() < 1e-14);
    }

    #[test]
    fn growth_check_flags_quadratic_drift() {
        let m = CanonicalModel::new("quad", 1, ControlBox::symmetric(1, 1.0), 1.0)
            .unwrap()
            .with_g1(|x, _, _| x[0] * x[0]);
        let samples = vec![(SystemState::new(vec![10.0], 0.0, vec![0.0], 0.0), vec![0.0])];
        assert!(!check_growth_bound(&m, &samples, 1.0).unwrap().pass);
    }

    #[test]
    fn growth_check_rejects_empty_samples() {
        let m = builtin_example1();
        assert!(matches!(check_growth_bound(&m, &[], 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn flat_round_trip() {
        let s = SystemState::new(vec![1.0, 2.0], -0.5, vec![3.0, 4.0], 0.25);
        let z = s.to_flat();
        assert_eq!(z, vec![1.0, 2.0, -0.5, 3.0, 4.0, 0.25]);
        assert_eq!(SystemState::from_flat(2, &z).unwrap(), s);
        assert!(SystemState::from_flat(1, &z).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dynamics_are_affine_in_w_and_u(
                x in -3.0..3.0f64, y in -3.0..0.0f64, v in -3.0..3.0f64,
                w1 in -3.0..3.0f64, w2 in -3.0..3.0f64,
                u1 in -1.0..1.0f64, u2 in -1.0..1.0f64,
            ) {
                let m = ex2((1.0, 2.0, 0.5));
                let s = |w| SystemState::new(vec![x], y, vec![v], w);
                let fa = m.eval_f(&s(w1), &[u1]).unwrap()[0] + m.eval_f(&s(w2), &[u2]).unwrap()[0];
                let fm = 2.0 * m.eval_f(&s(0.5 * (w1 + w2)), &[0.5 * (u1 + u2)]).unwrap()[0];
                prop_assert!((fa - fm).abs() < 1e-12);
                let ga = m.eval_g(&s(w1), &[u1]).unwrap() + m.eval_g(&s(w2), &[u2]).unwrap();
                let gm = 2.0 * m.eval_g(&s(0.5 * (w1 + w2)), &[0.5 * (u1 + u2)]).unwrap();
                prop_assert!((ga - gm).abs() < 1e-12);
                prop_assert!(fa.is_finite() && ga.is_finite());
            }

            #[test]
            fn piston_coefficient_identities(
                mm in 0.1..10.0f64, k in 0.1..10.0f64, alpha in 0.01..5.0f64, beta in 0.0..5.0f64,
            ) {
                let p = PistonParams { mass_m: mm, k, alpha, beta };
                let (a, b, c) = p.coefficients();
                prop_assert!((a * (mm + 1.0) - k).abs() <= 1e-12 * k.max(1.0));
                prop_assert!((b * mm - alpha * (mm + 1.0)).abs() <= 1e-12 * (alpha * (mm + 1.0)).max(1.0));
                prop_assert!((c * (mm + 1.0) - beta).abs() <= 1e-12 * beta.max(1.0));
            }
        }
    }
}
