//! Network-free 3D reconstruction from posed multi-view images.
//!
//! The toolkit jointly optimizes an octree-encoded signed-distance field
//! (SDF + spherical-harmonic radiance, [`field::OctreeField`]) and a set of
//! 3D Gaussians ([`splat::Gaussian`]) in four stages:
//!
//! 1. coarse SDF + radiance via differentiable volume rendering,
//! 2. Gaussian splats initialized from the extracted zero level set,
//! 3. SDF refinement guided by the optimized Gaussian centroids,
//! 4. SDF-guided Gaussian consolidation (opacity/scale regularizers + pruning).
//!
//! Everything runs on CPU with hand-derived gradients; no autodiff.

pub mod camera;
pub mod coupling;
pub mod error;
pub mod field;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod reg;
pub mod render;
pub mod scene;
pub mod sh;
pub mod splat;

pub use camera::Camera;
pub use error::{Error, Result};
pub use field::{Aabb, OctreeField};
pub use mesh::TriangleMesh;
pub use splat::Gaussian;
