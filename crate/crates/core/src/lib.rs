//! Stochastic reaction-diffusion on unstructured meshes.
//!
//! Mesoscopic jump rates are taken from a lumped-mass linear finite element
//! discretization of the Laplacian (`Q = γ S A⁻¹`), so the mean of the
//! jump process is exactly the semi-discrete diffusion equation. On top of
//! that operator the crate provides:
//!
//! * [`ssa`]: an exact next-subvolume sampler of the reaction-diffusion
//!   master equation,
//! * [`hybrid`]: Strang splitting with implicit macroscopic diffusion for
//!   high-copy-number species,
//! * [`moments`]: exact first and second moment oracles for pure diffusion,
//! * [`harness`]: experiment drivers, norms and ensemble utilities.
//!
//! Sign convention: the stiffness matrix `S` is assembled negative
//! semi-definite, so `D = A⁻¹S` and `Q` carry nonnegative off-diagonals
//! on good meshes. Reaction stoichiometry follows the convention that firing
//! reaction `r` maps a cell state `x` to `x - n_r`.

pub mod fem;
pub mod harness;
pub mod hybrid;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod moments;
pub mod sparse;
pub mod ssa;

pub use fem::{BoundaryCondition, DiffusionOperator, NegativeWeightPolicy, SignReport};
pub use mesh::{DualGeometry, Mesh, QualityReport};
pub use model::{ReactionModel, SimulationMode, SystemState};
pub use sparse::SparseMatrix;

/// Errors surfaced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] mesh::MeshError),
    #[error(transparent)]
    Fem(#[from] fem::FemError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Ssa(#[from] ssa::SsaError),
    #[error(transparent)]
    Hybrid(#[from] hybrid::HybridError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
