//! Stable neighborhood of an equilibrium used as a terminal set.
//!
//! Linearize at the equilibrium, build a stabilizing feedback `u = Cz`, solve
//! `A_clᵀV + V·A_cl = −I` and take the ellipsoid `{⟨z, Vz⟩ ≤ ε}` small enough
//! that `Cz` stays admissible. On its boundary the transversality covector is
//! `−Vz/|Vz|`, and the Hamiltonian of a time-optimal arrival is bounded below
//! by `ρ(ε) = min |z|²/(2|Vz|)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointState;
use crate::error::{Error, Result};
use crate::model::{CanonicalModel, ControlBox, SystemState};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Flat equilibrium `(x, y, v, w)`.
    pub equilibrium: Vec<f64>,
    /// Control at the equilibrium.
    pub u0: Vec<f64>,
}

/// Stacked right-hand side `(v, w, f, g)` of the free system.
fn stacked(model: &CanonicalModel, z: &[f64], u: &[f64]) -> Vec<f64> {
    let n = model.n();
    let (x, y, v, w) = (&z[..n], z[n], &z[n + 1..2 * n + 1], z[2 * n + 1]);
    let mut out = Vec::with_capacity(2 * n + 2);
    out.extend_from_slice(v);
    out.push(w);
    let mut f = vec![0.0; n];
    model.f_into(x, y, v, w, u, &mut f);
    out.extend(f);
    out.push(model.g_raw(x, y, v, w, u));
    out
}

/// Linearization by central differences with step `1e-6·(1 + |z*|)`.
pub fn linearize(model: &CanonicalModel, equilibrium: &SystemState, u0: &[f64]) -> Result<LinearizedSystem> {
    model.check_state(equilibrium)?;
    model.check_control(u0)?;
    let z = equilibrium.to_flat();
    let d = z.len();
    let m = model.m();
    let residual: f64 = stacked(model, &z, u0).iter().map(|v| v.abs()).sum();
    if residual > 1e-8 {
        return Err(Error::NotEquilibrium { residual });
    }
    let h = 1e-6 * (1.0 + equilibrium.norm());
    let mut a = DMatrix::zeros(d, d);
    let mut zp = z.clone();
    for k in 0..d {
        zp[k] = z[k] + h;
        let fp = stacked(model, &zp, u0);
        zp[k] = z[k] - h;
        let fm = stacked(model, &zp, u0);
        zp[k] = z[k];
        for i in 0..d {
            a[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut b = DMatrix::zeros(d, m);
    let mut up = u0.to_vec();
    for k in 0..m {
        up[k] = u0[k] + h;
        let fp = stacked(model, &z, &up);
        up[k] = u0[k] - h;
        let fm = stacked(model, &z, &up);
        up[k] = u0[k];
        for i in 0..d {
            b[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(LinearizedSystem {
        a,
        b,
        equilibrium: z,
        u0: u0.to_vec(),
    })
}

/// Numerical rank of `[B, AB, …, A^(d−1)B]` with threshold `d·σ_max·1e−12`.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let d = a.nrows();
    let m = b.ncols();
    if d == 0 || m == 0 {
        return 0;
    }
    let mut k = DMatrix::zeros(d, d * m);
    let mut blk = b.clone();
    for j in 0..d {
        k.view_mut((0, j * m), (d, m)).copy_from(&blk);
        blk = a * &blk;
    }
    let sv = k.singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    let tol = d as f64 * smax * 1e-12;
    sv.iter().filter(|s| **s > tol).count()
}

/// Largest real part of the eigenvalues.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `aᵀX + X·a + q = 0` through the Kronecker form.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let at = a.transpose();
    // vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X (column-major vec).
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(d * d, q.iter().map(|v| -v));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::LinearAlgebra("Lyapunov operator is singular".into()))?;
    let x = DMatrix::from_column_slice(d, d, sol.as_slice());
    Ok(0.5 * (&x + x.transpose()))
}

/// Margin on the spectral abscissa of the closed loop.
pub const FEEDBACK_MARGIN: f64 = 0.1;

/// Stabilizing solution of `AᵀX + XA − XBBᵀX + Q = 0` from the matrix sign
/// of the Hamiltonian `[[A, −BBᵀ], [−Q, −Aᵀ]]`.
pub fn care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let mut h = DMatrix::<f64>::zeros(2 * d, 2 * d);
    h.view_mut((0, 0), (d, d)).copy_from(a);
    h.view_mut((0, d), (d, d)).copy_from(&(-(b * b.transpose())));
    h.view_mut((d, 0), (d, d)).copy_from(&(-q));
    h.view_mut((d, d), (d, d)).copy_from(&(-a.transpose()));
    let singular = || Error::LinearAlgebra("Hamiltonian has eigenvalues on the imaginary axis".into());
    let mut w = h;
    for _ in 0..200 {
        let lu = w.clone().lu();
        let det = lu.determinant();
        let inv = lu.try_inverse().ok_or_else(singular)?;
        if !(det.abs() > 0.0) || !det.is_finite() {
            return Err(singular());
        }
        let c = det.abs().powf(1.0 / (2 * d) as f64);
        let next = (&w / c + inv * c) * 0.5;
        let change = (&next - &w).norm();
        w = next;
        if change <= 1e-13 * w.norm() {
            break;
        }
    }
    if !w.iter().all(|x| x.is_finite()) {
        return Err(singular());
    }
    // The stable subspace [I; X] is the kernel of sign(H) + I.
    let eye = DMatrix::<f64>::identity(d, d);
    let mut lhs = DMatrix::<f64>::zeros(2 * d, d);
    lhs.view_mut((0, 0), (d, d)).copy_from(&w.view((0, d), (d, d)));
    lhs.view_mut((d, 0), (d, d)).copy_from(&(w.view((d, d), (d, d)) + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * d, d);
    rhs.view_mut((0, 0), (d, d)).copy_from(&(-(w.view((0, 0), (d, d)) + &eye)));
    rhs.view_mut((d, 0), (d, d)).copy_from(&(-w.view((d, 0), (d, d))));
    let x = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::LinearAlgebra(e.to_string()))?;
    Ok((&x + x.transpose()) * 0.5)
}

/// Feedback `C` with `A + BC` Hurwitz, spectral abscissa ≤ −0.1.
///
/// LQR gain (`Q = I`, `R = I`) of the shifted pair `(A + 0.1·I, B)`,
/// polished by Newton–Kleinman steps.
pub fn stabilizing_feedback(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let m = b.ncols();
    if spectral_abscissa(a) <= -FEEDBACK_MARGIN {
        return Ok(DMatrix::zeros(m, d));
    }
    let rank = controllability_rank(a, b);
    if rank < d {
        return Err(Error::Controllability { rank, dim: d });
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let shifted = a + &eye * FEEDBACK_MARGIN;
    let q = DMatrix::<f64>::identity(d, d);
    let mut k = -(b.transpose() * care(&shifted, b, &q)?);
    for _ in 0..100 {
        let acl = &shifted + b * &k;
        let p = solve_lyapunov(&acl, &(&q + k.transpose() * &k))?;
        let k_new = -(b.transpose() * p);
        let delta = (&k_new - &k).norm();
        k = k_new;
        if delta <= 1e-12 * (1.0 + k.norm()) {
            break;
        }
    }
    let abscissa = spectral_abscissa(&(a + b * &k));
    if abscissa > -FEEDBACK_MARGIN + 1e-9 {
        return Err(Error::NotHurwitz { abscissa });
    }
    Ok(k)
}

/// `V` with `A_clᵀV + V·A_cl = −I`.
pub fn lyapunov_v(a_cl: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let abscissa = spectral_abscissa(a_cl);
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz { abscissa });
    }
    let d = a_cl.nrows();
    solve_lyapunov(a_cl, &DMatrix::identity(d, d))
}

/// Upper cap on ε when the feedback is zero.
pub const EPSILON_CAP: f64 = 1.0;

/// Half of the largest ε with `C z + u0` inside the box on the whole
/// ellipsoid; uses `max_{⟨z,Vz⟩≤ε} (Cz)_i = √(ε·(C V⁻¹ Cᵀ)_ii)`.
pub fn pick_epsilon_with_offset(
    v: &DMatrix<f64>,
    c: &DMatrix<f64>,
    control_box: &ControlBox,
    u0: &[f64],
) -> Result<f64> {
    let vinv = v
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::LinearAlgebra("V is singular".into()))?;
    let s = c * vinv * c.transpose();
    let center = control_box.center();
    let half = control_box.half_width();
    let mut eps = f64::INFINITY;
    for i in 0..c.nrows() {
        let margin = half[i] - (u0[i] - center[i]).abs();
        if margin <= 0.0 {
            return Err(Error::arg("equilibrium control is on the boundary of the box"));
        }
        if s[(i, i)] > 0.0 {
            eps = eps.min(margin * margin / s[(i, i)]);
        }
    }
    Ok((0.5 * eps).min(EPSILON_CAP))
}

pub fn pick_epsilon(v: &DMatrix<f64>, c: &DMatrix<f64>, control_box: &ControlBox) -> Result<f64> {
    pick_epsilon_with_offset(v, c, control_box, &control_box.center())
}

/// `−V(z_T − z*)/|V(z_T − z*)|` split into `(q, σ, p, r)`.
pub fn transversality(z_t: &[f64], z_star: &[f64], v: &DMatrix<f64>) -> Result<AdjointState> {
    let dz = DVector::from_iterator(z_t.len(), z_t.iter().zip(z_star).map(|(a, b)| a - b));
    let vz = v * dz;
    let nrm = vz.norm();
    if nrm == 0.0 || !nrm.is_finite() {
        return Err(Error::DegenerateTransversality);
    }
    let flat: Vec<f64> = vz.iter().map(|c| -c / nrm).collect();
    let n = (z_t.len() - 2) / 2;
    Ok(AdjointState::from_flat(n, &flat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoBound {
    /// `(ε/λ_max) / (2·λ_max·√(ε/λ_min))`.
    pub eigen_bound: f64,
    /// Minimum of `|z|²/(2|Vz|)` found on the boundary.
    pub refined: f64,
}

fn rho_objective(v: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    z.norm_squared() / (2.0 * (v * z).norm())
}

/// `ρ(ε) = min_{⟨z,Vz⟩=ε} |z|²/(2|Vz|)`, refined by projected gradient descent
/// on the boundary from the top eigenvector and from seeded random starts.
pub fn rho_bound(v: &DMatrix<f64>, epsilon: f64, seed: u64) -> Result<RhoBound> {
    if !(epsilon > 0.0) {
        return Err(Error::arg("epsilon must be positive"));
    }
    let d = v.nrows();
    let eig = v.clone().symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    let lmax = eig.eigenvalues.max();
    if !(lmin > 0.0) {
        return Err(Error::arg("V must be positive definite"));
    }
    let eigen_bound = (epsilon / lmax) / (2.0 * lmax * (epsilon / lmin).sqrt());
    let project = |z: &DVector<f64>| -> DVector<f64> {
        let q = z.dot(&(v * z));
        z * (epsilon / q).sqrt()
    };
    let mut starts = Vec::new();
    let imax = eig.eigenvalues.imax();
    starts.push(eig.eigenvectors.column(imax).into_owned());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16 {
        starts.push(DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)));
    }
    let mut best = f64::INFINITY;
    for s in starts {
        if s.norm() == 0.0 {
            continue;
        }
        let mut z = project(&s);
        let mut val = rho_objective(v, &z);
        let mut step = 0.1 * z.norm();
        for _ in 0..500 {
            // Gradient of |z|²/(2|Vz|).
            let vz = v * &z;
            let nvz = vz.norm();
            let grad = &z / nvz - (v * &vz) * (z.norm_squared() / (2.0 * nvz.powi(3)));
            // Tangent component with respect to the constraint normal 2Vz.
            let nrm = &vz / nvz;
            let tang = &grad - &nrm * grad.dot(&nrm);
            if tang.norm() < 1e-14 {
                break;
            }
            let cand = project(&(&z - &tang * (step / tang.norm())));
            let cv = rho_objective(v, &cand);
            if cv < val {
                z = cand;
                val = cv;
                step *= 1.2;
            } else {
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
        }
        best = best.min(val);
    }
    Ok(RhoBound {
        eigen_bound,
        refined: best.max(eigen_bound),
    })
}

/// Full construction at an equilibrium.
#[derive(Debug, Clone)]
pub struct StableNeighborhood {
    pub linearized: LinearizedSystem,
    pub c: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub epsilon: f64,
    pub rho: RhoBound,
    pub closed_loop_abscissa: f64,
}

impl StableNeighborhood {
    pub fn center(&self) -> &[f64] {
        &self.linearized.equilibrium
    }

    /// `⟨z − z*, V(z − z*)⟩ − ε`, non-positive inside.
    pub fn level(&self, z: &[f64]) -> f64 {
        let dz = DVector::from_iterator(z.len(), z.iter().zip(self.center()).map(|(a, b)| a - b));
        dz.dot(&(&self.v * &dz)) - self.epsilon
    }
}

pub fn build_neighborhood(
    model: &CanonicalModel,
    equilibrium: &SystemState,
    u0: &[f64],
    seed: u64,
) -> Result<StableNeighborhood> {
    let lin = linearize(model, equilibrium, u0)?;
    let c = stabilizing_feedback(&lin.a, &lin.b)?;
    let a_cl = &lin.a + &lin.b * &c;
    let v = lyapunov_v(&a_cl)?;
    let epsilon = pick_epsilon_with_offset(&v, &c, model.control_box(), u0)?;
    let rho = rho_bound(&v, epsilon, seed)?;
    Ok(StableNeighborhood {
        closed_loop_abscissa: spectral_abscissa(&a_cl),
        linearized: lin,
        c,
        v,
        epsilon,
        rho,
    })
}

/// Largest `⟨Vz, A_cl z⟩ + ½|z|²` over random unit vectors (≤ 0 expected).
pub fn lyapunov_inequality_margin(v: &DMatrix<f64>, a_cl: &DMatrix<f64>, samples: usize, seed: u64) -> f64 {
    let d = v.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let mut z = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let nz = z.norm();
        if nz == 0.0 {
            continue;
        }
        z /= nz;
        let val = (v * &z).dot(&(a_cl * &z)) + 0.5;
        worst = worst.max(val);
    }
    worst
}

/// Largest box violation of `u0 + Cz` over random points on the ellipsoid
/// boundary (≤ 0 means admissible).
pub fn admissibility_violation(
    v: &DMatrix<f64>,
    c: &DMatrix<f64>,
    epsilon: f64,
    control_box: &ControlBox,
    u0: &[f64],
    samples: usize,
    seed: u64,
) -> f64 {
    let d = v.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let z = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let q = z.dot(&(v * &z));
        if q <= 0.0 {
            continue;
        }
        let z = z * (epsilon / q).sqrt();
        let u = c * z;
        for i in 0..u.len() {
            let val = u0[i] + u[i];
            worst = worst.max(val - control_box.hi[i]).max(control_box.lo[i] - val);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example1, builtin_example2, PistonParams};

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn scalar_care_matches_closed_form() {
        // 2ax − x² + 1 = 0 with b = q = 1.
        for a in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let x = care(&m(1, 1, &[a]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap()[(0, 0)];
            let exact: f64 = a + (a * a + 1.0f64).sqrt();
            assert!((x - exact).abs() < 1e-10 * (1.0 + exact), "a={a}: {x} vs {exact}");
        }
    }

    #[test]
    fn care_solution_is_stabilizing() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let x = care(&a, &b, &DMatrix::identity(2, 2)).unwrap();
        let res = a.transpose() * &x + &x * &a - &x * &b * b.transpose() * &x + DMatrix::identity(2, 2);
        assert!(res.abs().max() < 1e-10);
        assert!(spectral_abscissa(&(&a - &b * b.transpose() * &x)) < 0.0);
    }

    #[test]
    fn double_integrator_linearization() {
        let lin = linearize(&builtin_example1(), &SystemState::scalar(-1.0, 0.0), &[0.0]).unwrap();
        assert!((lin.a.clone() - m(2, 2, &[0.0, 1.0, 0.0, 0.0])).abs().max() < 1e-9);
        assert!((lin.b.clone() - m(2, 1, &[0.0, 1.0])).abs().max() < 1e-9);
    }

    #[test]
    fn example2_linearization_is_exact_and_controllable() {
        let (a, b, c) = (1.0, 2.0, 0.5);
        let model = builtin_example2(PistonParams::from_coefficients(a, b, c)).unwrap();
        let y1 = -0.5;
        let lin = linearize(&model, &SystemState::new(vec![y1], y1, vec![0.0], 0.0), &[0.0]).unwrap();
        let expect = m(
            4,
            4,
            &[
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                -a, a, -c, c, //
                a, -a, c, -c - b,
            ],
        );
        assert!((lin.a.clone() - expect).abs().max() < 1e-9);
        assert_eq!(controllability_rank(&lin.a, &lin.b), 4);
    }

    #[test]
    fn off_equilibrium_is_rejected() {
        let e = linearize(&builtin_example1(), &SystemState::scalar(-1.0, 0.5), &[0.0]);
        assert!(matches!(e, Err(Error::NotEquilibrium { .. })));
    }

    #[test]
    fn ranks() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(controllability_rank(&a, &m(2, 1, &[0.0, 1.0])), 2);
        assert_eq!(controllability_rank(&a, &m(2, 1, &[0.0, 0.0])), 0);
        assert_eq!(controllability_rank(&a, &m(2, 1, &[1.0, 0.0])), 1);
    }

    #[test]
    fn feedback_for_double_integrator() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let c = stabilizing_feedback(&a, &b).unwrap();
        assert!(spectral_abscissa(&(&a + &b * &c)) <= -FEEDBACK_MARGIN);
    }

    #[test]
    fn hurwitz_a_gets_zero_feedback() {
        let a = m(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let b = m(2, 1, &[3.0, 1.0]);
        assert_eq!(stabilizing_feedback(&a, &b).unwrap(), DMatrix::zeros(1, 2));
    }

    #[test]
    fn uncontrollable_pair_is_rejected() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = m(2, 1, &[1.0, 0.0]);
        assert!(matches!(stabilizing_feedback(&a, &b), Err(Error::Controllability { rank: 1, dim: 2 })));
    }

    #[test]
    fn lyapunov_examples() {
        let v = lyapunov_v(&(-DMatrix::<f64>::identity(2, 2))).unwrap();
        assert!((v - 0.5 * DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-14);
        let acl = m(2, 2, &[0.0, 1.0, -1.0, -1.0]);
        let v = lyapunov_v(&acl).unwrap();
        assert!((v - m(2, 2, &[1.5, 0.5, 0.5, 1.0])).abs().max() < 1e-12);
        assert!(matches!(lyapunov_v(&m(1, 1, &[1.0])), Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn epsilon_examples() {
        let box1 = ControlBox::symmetric(1, 1.0);
        let eps = pick_epsilon(&m(1, 1, &[1.0]), &m(1, 1, &[2.0]), &box1).unwrap();
        assert!((eps - 0.125).abs() < 1e-15);
        let eps = pick_epsilon(&m(1, 1, &[1.0]), &m(1, 1, &[0.0]), &box1).unwrap();
        assert_eq!(eps, EPSILON_CAP);
    }

    #[test]
    fn transversality_examples() {
        let v = DMatrix::<f64>::identity(4, 4);
        let a = transversality(&[0.0, 0.0, 0.0, 1.0], &[0.0; 4], &v).unwrap();
        assert_eq!(a.to_flat(), vec![0.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            transversality(&[1.0, 2.0], &[1.0, 2.0], &DMatrix::identity(2, 2)),
            Err(Error::DegenerateTransversality)
        ));
    }

    #[test]
    fn rho_isotropic_and_anisotropic() {
        let r = rho_bound(&DMatrix::identity(3, 3), 0.04, 1).unwrap();
        assert!((r.refined - 0.1).abs() < 1e-12);
        // Oracle: dense parameterization of the ellipse z = (cos θ, sin θ / 2).
        let v = m(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let mut oracle = f64::INFINITY;
        for i in 0..200_000 {
            let th = std::f64::consts::TAU * i as f64 / 200_000.0;
            let z = DVector::from_vec(vec![th.cos(), 0.5 * th.sin()]);
            oracle = oracle.min(rho_objective(&v, &z));
        }
        let r = rho_bound(&v, 1.0, 3).unwrap();
        assert!(r.eigen_bound > 0.0 && r.eigen_bound <= r.refined);
        assert!((r.refined - oracle).abs() < 1e-9, "{} vs {oracle}", r.refined);
    }

    #[test]
    fn example2_pipeline_invariants() {
        let model = builtin_example2(PistonParams::default()).unwrap();
        let nb = build_neighborhood(&model, &SystemState::new(vec![-0.5], -0.5, vec![0.0], 0.0), &[0.0], 5).unwrap();
        assert!(nb.closed_loop_abscissa <= -FEEDBACK_MARGIN);
        let a_cl = &nb.linearized.a + &nb.linearized.b * &nb.c;
        let res = a_cl.transpose() * &nb.v + &nb.v * &a_cl + DMatrix::<f64>::identity(4, 4);
        assert!(res.abs().max() < 1e-10);
        assert!(lyapunov_inequality_margin(&nb.v, &a_cl, 1000, 1) <= 1e-9);
        assert!(admissibility_violation(&nb.v, &nb.c, nb.epsilon, model.control_box(), &[0.0], 1000, 2) <= 0.0);
        assert!(nb.v.clone().symmetric_eigen().eigenvalues.min() > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn transversality_has_unit_norm(
                dz in proptest::collection::vec(-10.0..10.0f64, 4),
                diag in proptest::collection::vec(0.1..5.0f64, 4),
            ) {
                prop_assume!(dz.iter().any(|v| v.abs() > 1e-6));
                let v = DMatrix::from_diagonal(&DVector::from_vec(diag));
                let a = transversality(&dz, &[0.0; 4], &v).unwrap();
                let nn: f64 = a.to_flat().iter().map(|c| c * c).sum::<f64>().sqrt();
                prop_assert!((nn - 1.0).abs() < 1e-14);
            }

            #[test]
            fn rho_grows_with_epsilon(e1 in 0.01..1.0f64, k in 1.01..4.0f64) {
                let v = DMatrix::<f64>::identity(2, 2);
                let a = rho_bound(&v, e1, 0).unwrap().refined;
                let b = rho_bound(&v, e1 * k, 0).unwrap().refined;
                prop_assert!(b > a);
            }
        }
    }
}
