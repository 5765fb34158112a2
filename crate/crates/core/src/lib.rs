//! Time-conditioned ("4D") Gaussian splatting for deformable monocular
//! scenes.
//!
//! The pipeline: pseudo-depth maps are back-projected into an initial
//! cloud ([`depth_prior`]), a HexPlane deformation field warps the canonical
//! cloud per timestamp ([`deformation`]), a differentiable tiled rasterizer
//! renders color/depth/confidence/normal maps ([`rasterizer`]), and the
//! trainer ([`trainer`]) minimizes the combined objective in [`losses`].

pub mod adam;
pub mod checkpoint;
pub mod dataset;
pub mod deformation;
pub mod densify;
pub mod depth_prior;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod ply;
pub mod rasterizer;
pub mod scene;
pub mod sh;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
