//! Linear finite element assembly and the diffusion operators derived from
//! it.
//!
//! `S` is assembled negative semi-definite (`S_jk = -∫∇φ_j·∇φ_k`), the mass
//! matrix is lumped by row sums into `A`, and
//!
//! * `D = A⁻¹ S` is the macroscopic diffusion matrix for concentrations,
//! * `Q = γ S A⁻¹ = γ Dᵀ` holds the mesoscopic jump rates: `Q[j][k]` is the
//!   rate at which a single molecule in cell `k` jumps to cell `j`.
//!
//! Mean copy numbers obey `x' = Q x`. Boundary conditions are not baked
//! into the matrices; Dirichlet cells are recorded and handled by the
//! samplers and steppers.

use serde::Serialize;

use crate::mesh::{cot_at, Elements, Mesh};
use crate::sparse::SparseMatrix;

#[derive(Debug, thiserror::Error)]
pub enum FemError {
    #[error("dimension mismatch: stiffness is {stiffness}x{stiffness}, mass has {mass} entries")]
    DimensionMismatch { stiffness: usize, mass: usize },
    #[error("diffusion constant must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("lumped mass entry {index} is not positive ({value})")]
    NonPositiveMass { index: usize, value: f64 },
    #[error("Dirichlet cell {cell} out of range (K = {count})")]
    BadFixedCell { cell: usize, count: usize },
}

/// Stiffness matrix of continuous piecewise linear elements.
///
/// In 2D each triangle adds `cot(θ)/2` to the off-diagonal of the edge
/// opposite the angle `θ` and subtracts it from both diagonals, so every row
/// sums to zero.
pub fn assemble_stiffness(mesh: &Mesh) -> SparseMatrix {
    let v = mesh.vertices();
    let mut t = Vec::new();
    match mesh.elements() {
        Elements::Segments(segs) => {
            for s in segs {
                let w = 1.0 / (v[s[1]][0] - v[s[0]][0]).abs();
                t.extend([(s[0], s[1], w), (s[1], s[0], w), (s[0], s[0], -w), (s[1], s[1], -w)]);
            }
        }
        Elements::Triangles(tris) => {
            for tri in tris {
                for c in 0..3 {
                    let (apex, p, q) = (tri[c], tri[(c + 1) % 3], tri[(c + 2) % 3]);
                    let w = 0.5 * cot_at(v[apex], v[p], v[q]);
                    t.extend([(p, q, w), (q, p, w), (p, p, -w), (q, q, -w)]);
                }
            }
        }
    }
    SparseMatrix::from_triplets(mesh.num_vertices(), t)
}

/// Consistent mass matrix `M_jk = ∫φ_j φ_k`.
pub fn assemble_consistent_mass(mesh: &Mesh) -> SparseMatrix {
    let v = mesh.vertices();
    let mut t = Vec::new();
    match mesh.elements() {
        Elements::Segments(segs) => {
            for s in segs {
                let h = (v[s[1]][0] - v[s[0]][0]).abs();
                t.extend([
                    (s[0], s[0], h / 3.0),
                    (s[1], s[1], h / 3.0),
                    (s[0], s[1], h / 6.0),
                    (s[1], s[0], h / 6.0),
                ]);
            }
        }
        Elements::Triangles(tris) => {
            for tri in tris {
                let area = mesh.triangle_area(tri);
                for p in 0..3 {
                    for q in 0..3 {
                        let w = if p == q { area / 6.0 } else { area / 12.0 };
                        t.push((tri[p], tri[q], w));
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(mesh.num_vertices(), t)
}

/// Lumped mass diagonal `A_jj = Σ_k M_jk`.
pub fn assemble_lumped_mass(mesh: &Mesh) -> Vec<f64> {
    assemble_consistent_mass(mesh).row_sums()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BoundaryCondition {
    /// Reflecting boundary; molecule totals are conserved.
    Neumann,
    /// Reservoir cells whose copy numbers stay at their initial values.
    Dirichlet(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum NegativeWeightPolicy {
    /// Leave negative off-diagonals in place and log a warning.
    #[default]
    Keep,
    /// Zero negative off-diagonals and fold them into the diagonal so that
    /// row sums are unchanged.
    Clamp,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffusionOperator {
    s: SparseMatrix,
    a: Vec<f64>,
    gamma: f64,
    d: SparseMatrix,
    q: SparseMatrix,
    bc: BoundaryCondition,
    fixed: Vec<bool>,
    h_min: Option<f64>,
}

/// Builds `D = A⁻¹S` and `Q = γSA⁻¹`.
pub fn build_operator(
    s: SparseMatrix,
    a: Vec<f64>,
    gamma: f64,
    bc: BoundaryCondition,
) -> Result<DiffusionOperator, FemError> {
    let k = s.dim();
    if a.len() != k {
        return Err(FemError::DimensionMismatch { stiffness: k, mass: a.len() });
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(FemError::NonPositiveGamma(gamma));
    }
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(FemError::NonPositiveMass { index, value });
    }
    let mut fixed = vec![false; k];
    if let BoundaryCondition::Dirichlet(cells) = &bc {
        for &c in cells {
            if c >= k {
                return Err(FemError::BadFixedCell { cell: c, count: k });
            }
            fixed[c] = true;
        }
    }
    let d = s.map(|i, _, v| v / a[i]);
    let q = s.map(|_, j, v| gamma * v / a[j]);
    Ok(DiffusionOperator { s, a, gamma, d, q, bc, fixed, h_min: None })
}

impl DiffusionOperator {
    /// Assembles `S` and `A` on `mesh` and builds the operator, recording
    /// `h_min` for time-step bounds.
    pub fn from_mesh(mesh: &Mesh, gamma: f64, bc: BoundaryCondition) -> Result<Self, FemError> {
        let mut op = build_operator(assemble_stiffness(mesh), assemble_lumped_mass(mesh), gamma, bc)?;
        op.h_min = Some(mesh.h_min());
        Ok(op)
    }

    pub fn num_cells(&self) -> usize {
        self.a.len()
    }

    pub fn stiffness(&self) -> &SparseMatrix {
        &self.s
    }

    pub fn lumped_mass(&self) -> &[f64] {
        &self.a
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn d(&self) -> &SparseMatrix {
        &self.d
    }

    pub fn q(&self) -> &SparseMatrix {
        &self.q
    }

    pub fn boundary_condition(&self) -> &BoundaryCondition {
        &self.bc
    }

    pub fn is_fixed(&self, cell: usize) -> bool {
        self.fixed[cell]
    }

    pub fn fixed_cells(&self) -> &[bool] {
        &self.fixed
    }

    pub fn h_min(&self) -> Option<f64> {
        self.h_min
    }

    /// Per-molecule rate of jumping from cell `from` to cell `to`.
    pub fn jump_rate(&self, from: usize, to: usize) -> f64 {
        self.q.get(to, from)
    }

    /// Largest stable-for-positivity trapezoidal step `h_min² / (6γ)`.
    pub fn positivity_step_bound(&self) -> Option<f64> {
        self.h_min.map(|h| h * h / (6.0 * self.gamma))
    }

    /// Applies the negative-weight policy and returns the (possibly
    /// modified) operator together with the report of the original one.
    pub fn with_policy(self, policy: NegativeWeightPolicy) -> (Self, SignReport) {
        let report = sign_report(&self);
        if !report.m_matrix_ok {
            match policy {
                NegativeWeightPolicy::Keep => log::warn!(
                    "{} negative off-diagonal entries in D (worst {:.3e} of |D_jj|); jump rates kept as assembled",
                    report.violations.len(),
                    report.worst_relative
                ),
                NegativeWeightPolicy::Clamp => {
                    let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(self.s.nnz());
                    for (i, j, v) in self.s.triplets() {
                        if i != j && v < 0.0 {
                            t.push((i, i, v));
                        } else {
                            t.push((i, j, v));
                        }
                    }
                    let s = SparseMatrix::from_triplets(self.num_cells(), t);
                    let h_min = self.h_min;
                    let mut op = build_operator(s, self.a, self.gamma, self.bc).expect("inputs already validated");
                    op.h_min = h_min;
                    return (op, report);
                }
            }
        }
        (self, report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignReport {
    /// `(j, k, D_jk)` for every off-diagonal `D_jk < 0`.
    pub violations: Vec<(usize, usize, f64)>,
    /// `max |D_jk| / |D_jj|` over the violations, 0 if there are none.
    pub worst_relative: f64,
    pub m_matrix_ok: bool,
}

pub fn sign_report(op: &DiffusionOperator) -> SignReport {
    let d = op.d();
    let mut violations = Vec::new();
    let mut worst_relative: f64 = 0.0;
    for (j, k, v) in d.triplets() {
        if j != k && v < 0.0 {
            violations.push((j, k, v));
            worst_relative = worst_relative.max(v.abs() / d.get(j, j).abs());
        }
    }
    SignReport { m_matrix_ok: violations.is_empty(), violations, worst_relative }
}
