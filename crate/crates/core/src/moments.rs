//! First and second moments of the pure diffusion jump process.
//!
//! The mean obeys `x̄' = Q x̄` and the covariance `C' = QC + CQᵀ + F(x̄)`.
//! Both are linear, so for moderate `K` they are solved exactly through the
//! eigendecomposition of the symmetric matrix `γ A^{-1/2} S A^{-1/2}`,
//! which is similar to `Q`:
//! `exp(Qt) = A^{1/2} U e^{Λt} Uᵀ A^{-1/2}`.
//! Larger systems fall back to classical RK4.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::fem::DiffusionOperator;
use crate::sparse::SparseMatrix;

/// Largest `K` handled by the eigendecomposition.
pub const SPECTRAL_LIMIT: usize = 200;

#[derive(Debug, Clone)]
pub struct MomentState {
    pub t: f64,
    pub xbar: Vec<f64>,
    pub c: DMatrix<f64>,
}

/// Eigendecomposition of the symmetrized jump operator.
#[derive(Debug, Clone)]
pub struct SpectralDiffusion {
    sqrt_a: Vec<f64>,
    u: DMatrix<f64>,
    lambda: DVector<f64>,
    q: SparseMatrix,
}

impl SpectralDiffusion {
    pub fn new(op: &DiffusionOperator) -> Self {
        let a = op.lumped_mass();
        let k = a.len();
        let sqrt_a: Vec<f64> = a.iter().map(|v| v.sqrt()).collect();
        let mut m = DMatrix::zeros(k, k);
        for (i, j, v) in op.stiffness().triplets() {
            m[(i, j)] = op.gamma() * v / (sqrt_a[i] * sqrt_a[j]);
        }
        let eig = m.symmetric_eigen();
        SpectralDiffusion { sqrt_a, u: eig.eigenvectors, lambda: eig.eigenvalues, q: op.q().clone() }
    }

    /// Eigenvalues in decreasing order (the first is 0 under Neumann
    /// conditions).
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut l: Vec<f64> = self.lambda.iter().copied().collect();
        l.sort_by(|a, b| b.total_cmp(a));
        l
    }

    fn modal(&self, x: &[f64]) -> DVector<f64> {
        let y = DVector::from_fn(x.len(), |i, _| x[i] / self.sqrt_a[i]);
        self.u.tr_mul(&y)
    }

    /// `exp(Qt) x`.
    pub fn mean(&self, x0: &[f64], t: f64) -> Vec<f64> {
        let mut c = self.modal(x0);
        for (ci, l) in c.iter_mut().zip(self.lambda.iter()) {
            *ci *= (l * t).exp();
        }
        let y = &self.u * c;
        y.iter().zip(&self.sqrt_a).map(|(v, s)| v * s).collect()
    }

    /// Exact covariance at `t` starting from mean `x0` and covariance `c0`.
    pub fn covariance(&self, x0: &[f64], c0: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let k = x0.len();
        // P = A^{-1/2} U, so G = Pᵀ C P and C = A^{1/2} U G Uᵀ A^{1/2}.
        let p = DMatrix::from_fn(k, k, |i, m| self.u[(i, m)] / self.sqrt_a[i]);
        let mut g = p.tr_mul(c0) * &p;
        let lam = &self.lambda;
        for a in 0..k {
            for b in 0..k {
                g[(a, b)] *= ((lam[a] + lam[b]) * t).exp();
            }
        }
        let y0 = self.modal(x0);
        for m in 0..k {
            if y0[m] == 0.0 {
                continue;
            }
            let w: Vec<f64> = (0..k).map(|i| self.sqrt_a[i] * self.u[(i, m)]).collect();
            let f = driving_term(&self.q, &w);
            let h = p.tr_mul(&f) * &p;
            for a in 0..k {
                for b in 0..k {
                    g[(a, b)] += y0[m] * h[(a, b)] * phi(lam[a] + lam[b], lam[m], t);
                }
            }
        }
        let ug = &self.u * g * self.u.transpose();
        let c = DMatrix::from_fn(k, k, |i, j| self.sqrt_a[i] * ug[(i, j)] * self.sqrt_a[j]);
        symmetrize(c)
    }
}

/// `∫₀ᵗ e^{α(t-s)} e^{βs} ds`, stable when `α ≈ β`.
fn phi(alpha: f64, beta: f64, t: f64) -> f64 {
    let z = (beta - alpha) * t;
    if z.abs() < 1e-3 {
        (alpha * t).exp() * t * (1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0)
    } else {
        ((beta * t).exp() - (alpha * t).exp()) / (beta - alpha)
    }
}

fn symmetrize(c: DMatrix<f64>) -> DMatrix<f64> {
    (&c + c.transpose()) * 0.5
}

/// Driving term of the covariance equation:
/// `F_jk = -(Q_jk x̄_k + Q_kj x̄_j)` off the diagonal and
/// `F_jj = Σ_{l≠j} (Q_jl x̄_l + Q_lj x̄_j)`.
pub fn driving_term(q: &SparseMatrix, xbar: &[f64]) -> DMatrix<f64> {
    let k = q.dim();
    assert_eq!(xbar.len(), k, "driving term dimension mismatch");
    let mut f = DMatrix::zeros(k, k);
    for (j, l, v) in q.triplets() {
        if j == l {
            continue;
        }
        // Q_jl x̄_l is the flow from l into j.
        let flow = v * xbar[l];
        f[(j, l)] -= flow;
        f[(l, j)] -= flow;
        f[(j, j)] += flow;
        f[(l, l)] += flow;
    }
    f
}

/// `κ = Σ x̄⁰ / Σ A_jj`.
pub fn kappa(xbar0: &[f64], lumped_mass: &[f64]) -> f64 {
    xbar0.iter().sum::<f64>() / lumped_mass.iter().sum::<f64>()
}

/// Stationary mean `κ A_jj` under Neumann conditions.
pub fn stationary_mean(xbar0: &[f64], lumped_mass: &[f64]) -> Vec<f64> {
    let k = kappa(xbar0, lumped_mass);
    lumped_mass.iter().map(|a| k * a).collect()
}

fn rk4_steps(q: &SparseMatrix, t: f64) -> (usize, f64) {
    let rate = q.max_abs_diagonal().max(f64::MIN_POSITIVE);
    // |λ_max| ≤ 2 max|Q_jj| by Gershgorin. Covariance modes decay at up to
    // twice that, so h|λ_max| ≤ 0.02 keeps them resolved as well.
    let h_max = 0.01 / rate;
    let n = (t / h_max).ceil().max(1.0) as usize;
    (n, t / n as f64)
}

/// Mean by RK4 with step at most `0.02/|λ_max|`.
pub fn mean_rk4(q: &SparseMatrix, x0: &[f64], t: f64) -> Vec<f64> {
    if t == 0.0 {
        return x0.to_vec();
    }
    let (n, h) = rk4_steps(q, t);
    let mut x = x0.to_vec();
    let axpy = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    for _ in 0..n {
        let k1 = q.mul_vec(&x);
        let k2 = q.mul_vec(&axpy(&x, &k1, h / 2.0));
        let k3 = q.mul_vec(&axpy(&x, &k2, h / 2.0));
        let k4 = q.mul_vec(&axpy(&x, &k3, h));
        for j in 0..x.len() {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    x
}

/// Mean and covariance integrated jointly by RK4.
pub fn moments_rk4(q: &SparseMatrix, x0: &[f64], c0: &DMatrix<f64>, t: f64) -> MomentState {
    let mut x = DVector::from_column_slice(x0);
    let mut c = c0.clone();
    if t > 0.0 {
        let (n, h) = rk4_steps(q, t);
        let qd = q.to_dense();
        let rhs = |x: &DVector<f64>, c: &DMatrix<f64>| {
            let qc = &qd * c;
            let dc = &qc + qc.transpose() + driving_term(q, x.as_slice());
            (&qd * x, dc)
        };
        for _ in 0..n {
            let (kx1, kc1) = rhs(&x, &c);
            let (kx2, kc2) = rhs(&(&x + &kx1 * (h / 2.0)), &(&c + &kc1 * (h / 2.0)));
            let (kx3, kc3) = rhs(&(&x + &kx2 * (h / 2.0)), &(&c + &kc2 * (h / 2.0)));
            let (kx4, kc4) = rhs(&(&x + &kx3 * h), &(&c + &kc3 * h));
            x += (kx1 + kx2 * 2.0 + kx3 * 2.0 + kx4) * (h / 6.0);
            c += (kc1 + kc2 * 2.0 + kc3 * 2.0 + kc4) * (h / 6.0);
            c = symmetrize(c);
        }
    }
    MomentState { t, xbar: x.iter().copied().collect(), c }
}

/// Mean at `t`, spectral for `K ≤ SPECTRAL_LIMIT`, RK4 otherwise.
pub fn mean_evolve(op: &DiffusionOperator, xbar0: &[f64], t: f64) -> Vec<f64> {
    if op.num_cells() <= SPECTRAL_LIMIT {
        SpectralDiffusion::new(op).mean(xbar0, t)
    } else {
        mean_rk4(op.q(), xbar0, t)
    }
}

/// Mean and covariance at `t`.
pub fn covariance_evolve(op: &DiffusionOperator, xbar0: &[f64], c0: &DMatrix<f64>, t: f64) -> MomentState {
    if op.num_cells() <= SPECTRAL_LIMIT {
        let sd = SpectralDiffusion::new(op);
        MomentState { t, xbar: sd.mean(xbar0, t), c: sd.covariance(xbar0, c0, t) }
    } else {
        moments_rk4(op.q(), xbar0, c0, t)
    }
}

/// Numerical check of the covariance bound
/// `‖C(t)‖ ≤ c_F · (max A / min A) · ∫₀ᵗ ‖x̄(s)‖ ds` for `C(0) = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceBound {
    pub norm_c: f64,
    /// Largest `‖F(x̄(s))‖₂ / ‖x̄(s)‖₂` over the quadrature nodes.
    pub c_f: f64,
    pub mass_ratio: f64,
    pub integral: f64,
    pub bound: f64,
}

pub fn covariance_bound(op: &DiffusionOperator, xbar0: &[f64], t: f64, nodes: usize) -> CovarianceBound {
    let sd = SpectralDiffusion::new(op);
    let k = xbar0.len();
    let nodes = nodes.max(2);
    let h = t / (nodes - 1) as f64;
    let mut norms = Vec::with_capacity(nodes);
    let mut c_f: f64 = 0.0;
    for s in 0..nodes {
        let x = sd.mean(xbar0, s as f64 * h);
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nf = driving_term(op.q(), &x).symmetric_eigenvalues().amax();
        if nx > 0.0 {
            c_f = c_f.max(nf / nx);
        }
        norms.push(nx);
    }
    // Composite trapezoidal rule.
    let integral = h * (norms.iter().sum::<f64>() - 0.5 * (norms[0] + norms[nodes - 1]));
    let a = op.lumped_mass();
    let mass_ratio = a.iter().fold(0.0f64, |m, &v| m.max(v)) / a.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let c = sd.covariance(xbar0, &DMatrix::zeros(k, k), t);
    let norm_c = c.symmetric_eigenvalues().amax();
    CovarianceBound { norm_c, c_f, mass_ratio, integral, bound: c_f * mass_ratio * integral }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::BoundaryCondition;
    use crate::mesh::{build_1d_mesh, build_structured_unit_square};
    use proptest::prelude::*;

    fn three_node(gamma: f64) -> DiffusionOperator {
        DiffusionOperator::from_mesh(&build_1d_mesh(&[0.0, 0.5, 1.0]).unwrap(), gamma, BoundaryCondition::Neumann).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn mean_examples() {
        let op = three_node(1.0);
        let sd = SpectralDiffusion::new(&op);
        assert!(max_diff(&sd.mean(&[10.0, 0.0, 0.0], 0.0), &[10.0, 0.0, 0.0]) < 1e-12);
        assert!(max_diff(&sd.mean(&[10.0, 0.0, 0.0], 50.0), &[2.5, 5.0, 2.5]) < 1e-10);
        assert!((kappa(&[10.0, 0.0, 0.0], op.lumped_mass()) - 10.0).abs() < 1e-12);
        assert!(max_diff(&stationary_mean(&[10.0, 0.0, 0.0], op.lumped_mass()), &[2.5, 5.0, 2.5]) < 1e-12);
        let x = sd.mean(&[10.0, 0.0, 0.0], 0.1);
        let rk = mean_rk4(op.q(), &[10.0, 0.0, 0.0], 0.1);
        assert!(max_diff(&x, &rk) < 1e-8 * 10.0, "{x:?} {rk:?}");
    }

    #[test]
    fn driving_term_examples() {
        let op = three_node(0.7);
        assert_eq!(driving_term(op.q(), &[0.0; 3]), DMatrix::zeros(3, 3));
        let f = driving_term(op.q(), &[2.5, 5.0, 2.5]);
        let s = op.stiffness().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let expected = -2.0 * 0.7 * 10.0 * s[(i, j)];
                assert!((f[(i, j)] - expected).abs() <= 1e-10 * expected.abs().max(1.0));
            }
        }
        let f = driving_term(op.q(), &[1.0, 7.0, 3.0]);
        assert_eq!(f, f.transpose());
    }

    #[test]
    fn covariance_starts_at_zero_and_matches_rk4() {
        let mesh = build_structured_unit_square(2, [0.0, 0.0]);
        let op = DiffusionOperator::from_mesh(&mesh, 0.05, BoundaryCondition::Neumann).unwrap();
        let x0: Vec<f64> = (0..9).map(|j| if j == 0 { 20.0 } else { 0.0 }).collect();
        let z = DMatrix::zeros(9, 9);
        let at0 = covariance_evolve(&op, &x0, &z, 0.0);
        assert!(at0.c.amax() < 1e-12);
        let exact = covariance_evolve(&op, &x0, &z, 1.5);
        let rk = moments_rk4(op.q(), &x0, &z, 1.5);
        assert!((&exact.c - &rk.c).amax() < 1e-8 * exact.c.amax(), "{} {}", exact.c, rk.c);
        assert!(max_diff(&exact.xbar, &rk.xbar) < 1e-9);
        assert!((&exact.c - exact.c.transpose()).amax() < 1e-12);
        // A single molecule is multinomial: C = diag(p) - p pᵀ.
        let one: Vec<f64> = x0.iter().map(|v| v / 20.0).collect();
        let m = covariance_evolve(&op, &one, &z, 1.5);
        for i in 0..9 {
            for j in 0..9 {
                let expected = if i == j { m.xbar[i] } else { 0.0 } - m.xbar[i] * m.xbar[j];
                assert!((m.c[(i, j)] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn covariance_tends_to_order_kappa() {
        let op = three_node(1.0);
        let x0 = [10.0, 0.0, 0.0];
        let late = covariance_evolve(&op, &x0, &DMatrix::zeros(3, 3), 40.0);
        // Stationary multinomial with n = 10 molecules and p = A/ΣA.
        let p = [0.25, 0.5, 0.25];
        for i in 0..3 {
            for j in 0..3 {
                let expected = 10.0 * (if i == j { p[i] } else { 0.0 } - p[i] * p[j]);
                assert!((late.c[(i, j)] - expected).abs() < 1e-9, "{i} {j}: {} vs {expected}", late.c[(i, j)]);
            }
        }
    }

    #[test]
    fn covariance_bound_holds() {
        let op = three_node(1.0);
        let b = covariance_bound(&op, &[10.0, 0.0, 0.0], 1.0, 401);
        assert!(b.norm_c <= b.bound, "{b:?}");
        assert!(b.c_f > 0.0);
        assert!((b.mass_ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn decay_rate_matches_second_eigenvalue() {
        let mesh = build_structured_unit_square(3, [0.0, 0.0]);
        let op = DiffusionOperator::from_mesh(&mesh, 0.1, BoundaryCondition::Neumann).unwrap();
        let sd = SpectralDiffusion::new(&op);
        let x0: Vec<f64> = (0..16).map(|j| (j * j % 7) as f64).collect();
        let st = stationary_mean(&x0, op.lumped_mass());
        let dist = |t: f64| {
            let x = sd.mean(&x0, t);
            x.iter().zip(&st).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (t1, t2) = (20.0, 30.0);
        let fitted = (dist(t2) / dist(t1)).ln() / (t2 - t1);
        let l2 = sd.eigenvalues()[1];
        assert!(((fitted - l2) / l2).abs() < 0.05, "{fitted} vs {l2}");
    }

    proptest! {
        #[test]
        fn mean_conserves_and_is_a_semigroup(xs in proptest::collection::vec(0.0f64..50.0, 16), t in 0.0f64..100.0, s in 0.0f64..10.0) {
            let op = DiffusionOperator::from_mesh(&build_structured_unit_square(3, [0.0, 0.0]), 0.01, BoundaryCondition::Neumann).unwrap();
            let sd = SpectralDiffusion::new(&op);
            let total: f64 = xs.iter().sum();
            let xt = sd.mean(&xs, t);
            prop_assert!((xt.iter().sum::<f64>() - total).abs() <= 1e-10 * total.max(1.0));
            let two = sd.mean(&xt, s);
            let direct = sd.mean(&xs, t + s);
            prop_assert!(max_diff(&two, &direct) <= 1e-8 * total.max(1.0));
        }
    }
}
