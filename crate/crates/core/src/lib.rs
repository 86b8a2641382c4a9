//! Illumination-aware occupancy prediction for nighttime driving scenes.
//!
//! The pipeline runs selective Retinex enhancement ([`sllie`]), illumination
//! guided deformable sampling on image features ([`igs2d`]), lifts features
//! into a bird's-eye-view grid ([`bev`]) and re-weights the BEV residual by an
//! illumination field built from camera geometry ([`geometry`]). [`losses`]
//! and [`metrics`] score voxel predictions, and [`harness`] wires everything
//! into runnable scenes and reports.

pub mod bev;
pub mod conv;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod igs2d;
pub mod illumination;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod sllie;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{PixelCoord, Tensor3};
