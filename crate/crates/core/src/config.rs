//! Runtime parameters.
//!
//! Every tunable named by the pipeline lives here with its default, so the
//! effective configuration can be dumped, overridden from a flat
//! `key = value` file, or overridden per key from the command line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{MvsError, Result};

macro_rules! params {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ),+ $(,)?) => {
        /// Effective pipeline configuration. See `docs/parameters.md` for the
        /// full ledger.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Params {
            $( $(#[doc = $doc])* pub $name: $ty, )+
        }

        impl Default for Params {
            fn default() -> Self {
                Params { $( $name: $default, )+ }
            }
        }

        impl Params {
            /// All recognized key names.
            pub fn keys() -> &'static [&'static str] {
                &[ $( stringify!($name), )+ ]
            }

            /// Set one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value.trim().parse::<$ty>().map_err(|_| {
                            MvsError::Invalid(format!(
                                "invalid value {value:?} for key {key:?}"
                            ))
                        })?;
                        Ok(())
                    } )+
                    _ => Err(MvsError::Invalid(format!(
                        "unknown config key {key:?}; valid keys: {}",
                        Self::keys().join(", ")
                    ))),
                }
            }

            /// Render the effective configuration as `key = value` lines.
            pub fn dump(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($name), self.$name); )+
                out
            }
        }
    };
}

params! {
    /// Patch side length in samples for both the whole patch and sub-patches.
    patch_size: usize = 11,
    /// Sampling interval of the whole patch.
    patch_step: usize = 5,
    /// Sampling interval of anchor sub-patches.
    subpatch_step: usize = 2,
    /// Weight of the central patch in the deformable cost.
    lambda: f64 = 0.25,
    /// Number of fixed-angle sectors around an unreliable pixel.
    sectors: usize = 8,
    /// Bilateral weight: intensity falloff.
    sigma_color: f64 = 0.1,
    /// Bilateral weight: spatial falloff; 0 derives `size·step/3`.
    sigma_spatial: f64 = 0.0,

    /// Minimum region size (pixels) eligible for planarization.
    eta: usize = 300,
    /// Plane-similarity gate: erosion accepts below, dilation above.
    phi_plane: f64 = 0.5,
    /// Boundary normal-similarity gate.
    phi_normal: f64 = 0.4,
    /// Required inlier-ratio gain for an erosion split.
    gamma: f64 = 1.2,
    /// Minimum inlier ratio for dilation merging and pixel filtering.
    kappa: f64 = 0.7,
    /// Point-to-plane distance bound for pixel filtering.
    delta: f64 = 0.8,
    /// Gradient floor of the edge detector.
    eps_grad: f64 = 0.005,
    /// Search radius (pixels) of the boundary normal-similarity probe.
    normal_search_radius: usize = 3,
    /// RANSAC iterations per region plane fit.
    ransac_iters: usize = 256,
    /// RANSAC inlier threshold relative to the median region depth.
    ransac_rel_threshold: f64 = 0.01,
    /// Maximum erosion passes before a region is left unsplit.
    erosion_max_passes: usize = 5,
    /// Erosion+dilation sweep rounds over the region adjacency graph.
    atlas_rounds: usize = 3,

    /// Candidates collected per sector.
    candidates_per_sector: usize = 4,
    /// Anchor search radius in pixels at base scale.
    anchor_search_radius: usize = 64,

    /// View-selection weight falloff.
    sigma_weight: f64 = 0.3,
    /// Cost below which a view gets the full Gaussian weight.
    tau_good: f64 = 0.8,
    /// Cost at which the view weight decays to zero.
    tau_bad: f64 = 1.2,
    /// Floor weight for views restored with zero selection weight.
    w_min: f64 = 0.1,
    /// Reprojection-error visibility threshold in pixels.
    eps_reproj: f64 = 2.0,
    /// Side length of the lowest-cost depth substitution window.
    reproj_window: usize = 11,

    /// Aggregated-cost threshold separating reliable from unreliable pixels.
    tau_rel: f64 = 0.3,
    /// Outer solver passes (visibility/deformation rebuilds).
    outer_passes: usize = 3,
    /// Red-black checkerboard propagation sweeps per pass.
    checkerboard_sweeps: usize = 2,
    /// Perturbed hypotheses sampled per pixel during refinement.
    refine_samples: usize = 6,
    /// Inner epipolar disturbance distance in pixels.
    alpha: f64 = 1.0,
    /// Additional outer disturbance distance in pixels.
    beta: f64 = 4.0,
    /// Order-statistic rank for aggregating per-view depth intervals.
    mu: usize = 3,
    /// Use the min/max-over-mu-views interval reading instead of order statistics.
    epipolar_minmax_mu: bool = false,
    /// Coarse-to-fine solve at half resolution before full resolution.
    multiscale: bool = true,
    /// Scene depth range lower bound; 0 derives it from the monocular priors.
    depth_min: f64 = 0.0,
    /// Scene depth range upper bound; 0 derives it from the monocular priors.
    depth_max: f64 = 0.0,
    /// RNG seed for initialization, RANSAC and refinement.
    seed: u64 = 0,
    /// Enable prior-guided deformable matching and anchor injection.
    deformation: bool = true,
    /// Enable highlight masks, corrected images and highlight cost rules.
    highlight_rules: bool = true,
    /// Fraction of pixels seeded from the monocular depth prior.
    mono_seed_fraction: f64 = 0.5,

    /// Other views that must agree before a pixel is fused.
    min_consistent: usize = 2,
    /// Fusion reprojection-error bound in pixels.
    fuse_reproj_px: f64 = 2.0,
    /// Fusion relative depth-difference bound.
    fuse_depth_rel: f64 = 0.01,
    /// Fusion normal-angle bound in degrees.
    fuse_normal_deg: f64 = 10.0,

    /// Worker threads; 0 uses all logical cores.
    threads: usize = 0,
}

impl Params {
    /// Effective spatial sigma of the bilateral weight for a patch spec.
    pub fn spatial_sigma(&self, size: usize, step: usize) -> f64 {
        if self.sigma_spatial > 0.0 {
            self.sigma_spatial
        } else {
            (size * step) as f64 / 3.0
        }
    }

    /// Parse a flat `key = value` file, overriding defaults in `self`.
    /// Lines starting with `#` and blank lines are skipped.
    pub fn load_overrides(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| MvsError::io(path, e))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| MvsError::Parse {
                path: path.into(),
                line: idx + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| MvsError::Parse {
                path: path.into(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}
