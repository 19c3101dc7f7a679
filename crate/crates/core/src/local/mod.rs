//! Local geometry around a single trained model.

pub mod lanczos;
pub mod surface;

pub use lanczos::{top_eigenvalues, HessianSpectrum, RESIDUAL_TOLERANCE};
pub use surface::{
    loss_surface, random_directions, DirectionNorm, ScalarField2D, SliceTarget, SurfaceConfig,
};
