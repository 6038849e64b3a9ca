//! Multi-view stereo from calibrated images and precomputed monocular priors.
//!
//! The library reconstructs a per-view depth/normal map with PatchMatch plane
//! search, then fuses the maps into a point cloud and scores it against ground
//! truth. Unreliable (textureless) pixels are matched with deformable patches:
//! sub-patches centered on reliable anchor pixels, guided by a region atlas
//! built from monocular depth, monocular normals and an edge map, and by
//! restored per-view visibility.
//!
//! Pipeline stages map onto the modules below:
//!
//! - [`scene`]: scene directory I/O (cameras, images, priors, results)
//! - [`geometry`]: plane-hypothesis homographies, projection, epipolar lines
//! - [`cost`]: bilateral-weighted NCC, multi-view and deformable aggregation
//! - [`atlas`]: edge-driven region labeling, RANSAC planes, erosion/dilation
//! - [`deform`]: sector anchor search and area-maximization selection
//! - [`visibility`]: view-selection weights and reprojection restoration
//! - [`solver`]: the PatchMatch loop (init, propagate, refine, highlights)
//! - [`fusion`] / [`eval`]: consistency fusion and accuracy/completeness/F1
//! - [`synth`]: synthetic scenes with exact ground truth for testing

pub mod atlas;
pub mod camera;
pub mod config;
pub mod cost;
pub mod deform;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod scene;
pub mod solver;
pub mod synth;
pub mod visibility;

mod error;

pub use camera::CameraView;
pub use config::Params;
pub use error::{MvsError, Result};
pub use geometry::PlaneHypothesis;
pub use grid::Grid;
pub use scene::{DepthNormalResult, PriorBundle, SceneView};
