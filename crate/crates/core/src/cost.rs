//! Photometric matching costs.
//!
//! The unit is `1 − NCC` of a bilateral-weighted patch, clamped to `[0, 2]`.
//! Reliable pixels use a single sparse patch; unreliable pixels add anchor
//! sub-patches that share the central pixel's plane, and highlight pixels
//! drop the central term entirely.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::camera::CameraView;
use crate::config::Params;
use crate::geometry::{self, PlaneHypothesis};
use crate::grid::Grid;

/// Patch geometry: `size` samples per side spaced `step` pixels apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: usize,
    pub step: usize,
}

impl PatchSpec {
    pub fn whole(params: &Params) -> Self {
        PatchSpec {
            size: params.patch_size,
            step: params.patch_step,
        }
    }

    pub fn sub(params: &Params) -> Self {
        PatchSpec {
            size: params.patch_size,
            step: params.subpatch_step,
        }
    }
}

/// Maximum cost: anti-correlation, degeneracy, or invisibility.
pub const COST_MAX: f64 = 2.0;

/// How a pixel's cost is assembled from the central patch and anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    /// Central patch only (reliable pixels).
    Center,
    /// `λ·center + (1−λ)·mean(anchor sub-patches)`; falls back to the center
    /// patch when no anchor survives filtering.
    Deformable,
    /// Anchor sub-patches only (unreliable highlight pixels); maximal cost
    /// when no anchor survives.
    AnchorsOnly,
}

/// Anchors selected for one unreliable pixel, with per-source-view
/// visibility masks (bit `k` of `per_view_mask[j]` keeps `anchors[k]` for
/// source view `j`).
#[derive(Debug, Clone, Default)]
pub struct AnchorSet {
    pub anchors: Vec<(u32, u32)>,
    pub per_view_mask: Vec<u8>,
}

impl AnchorSet {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchors surviving the view filter for source view `j`; all anchors
    /// when no per-view mask was attached.
    pub fn for_view(&self, j: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        let mask = self.per_view_mask.get(j).copied().unwrap_or(u8::MAX);
        self.anchors
            .iter()
            .enumerate()
            .filter(move |(k, _)| mask & (1 << k) != 0)
            .map(|(_, &a)| a)
    }
}

/// Reference-side sparse patch: sample positions, intensities and bilateral
/// weights, plus precomputed reference-only sums (corrected for dropped
/// samples during evaluation). Positions are clamped to the image bounds
/// near borders.
pub struct RefPatch {
    positions: Vec<(f64, f64)>,
    intensities: Vec<f64>,
    weights: Vec<f64>,
    sum_w: f64,
    sum_wx: f64,
    sum_wxx: f64,
}

/// Multi-view aggregation: `Σ w_j·m_j / Σ w_j`, maximal when no view has
/// weight.
pub fn multi_view_cost(costs: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(costs.len(), weights.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, w) in costs.iter().zip(weights) {
        num += c * w;
        den += w;
    }
    if den <= 0.0 {
        COST_MAX
    } else {
        num / den
    }
}

/// Per-source-view constants of the homography family
/// `H = K_j·R_rel·K_i⁻¹ + (K_j·t_rel)·(nᵀ·K_i⁻¹)/dist`: only the rank-one
/// term depends on the plane.
struct PairPrecomp {
    a: Matrix3<f64>,
    b: nalgebra::Vector3<f64>,
}

/// Shared read-only state for cost evaluation against one reference view.
pub struct CostContext<'a> {
    pub reference: &'a CameraView,
    pub sources: Vec<&'a CameraView>,
    pub params: &'a Params,
    pub use_corrected: bool,
    precomp: Vec<PairPrecomp>,
}

impl<'a> CostContext<'a> {
    pub fn new(
        reference: &'a CameraView,
        sources: Vec<&'a CameraView>,
        params: &'a Params,
    ) -> Self {
        let precomp = sources
            .iter()
            .map(|src| {
                let r_rel = src.r * reference.r.transpose();
                let t_rel = src.t - r_rel * reference.t;
                PairPrecomp {
                    a: src.k * r_rel * reference.k_inv(),
                    b: src.k * t_rel,
                }
            })
            .collect();
        CostContext {
            reference,
            sources,
            params,
            use_corrected: params.highlight_rules,
            precomp,
        }
    }

    /// Homography of the plane with reference-camera normal `n` at signed
    /// plane distance `dist = n·X` (any `X` on the plane, camera frame).
    #[inline]
    fn fast_homography(&self, j: usize, n: &Vector3<f64>, dist: f64) -> Option<Matrix3<f64>> {
        if dist.abs() < 1e-12 {
            return None;
        }
        let row = self.reference.k_inv().transpose() * n / dist;
        let pc = &self.precomp[j];
        let hom = pc.a + pc.b * row.transpose();
        let scale = hom.abs().max();
        if !scale.is_finite() || scale <= 0.0 {
            return None;
        }
        if (hom / scale).determinant().abs() < crate::geometry::DEGENERATE_DET {
            return None;
        }
        Some(hom)
    }

    fn ref_image(&self) -> &Grid<f32> {
        self.reference.matching_image(self.use_corrected)
    }

    /// Extract the reference patch around `p` for one patch spec.
    pub fn ref_patch(&self, p: Vector2<f64>, spec: PatchSpec) -> RefPatch {
        let image = self.ref_image();
        let (w, h) = (image.width() as i64, image.height() as i64);
        let half = (spec.size / 2) as i64;
        let step = spec.step as i64;
        let sigma_c = self.params.sigma_color;
        let sigma_s = self.params.spatial_sigma(spec.size, spec.step);
        let center = image.sample_clamped(p.x.round() as i64, p.y.round() as i64) as f64;

        let n = spec.size * spec.size;
        let mut positions = Vec::with_capacity(n);
        let mut intensities = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut sum_w = 0.0;
        let mut sum_wx = 0.0;
        let mut sum_wxx = 0.0;
        for dy in -half..=half {
            for dx in -half..=half {
                let qx = (p.x.round() as i64 + dx * step).clamp(0, w - 1);
                let qy = (p.y.round() as i64 + dy * step).clamp(0, h - 1);
                let intensity = image.sample_clamped(qx, qy) as f64;
                let dist = (((qx as f64 - p.x).powi(2)) + ((qy as f64 - p.y).powi(2))).sqrt();
                let weight = (-(intensity - center).abs() / sigma_c - dist / sigma_s).exp();
                positions.push((qx as f64, qy as f64));
                intensities.push(intensity);
                weights.push(weight);
                sum_w += weight;
                sum_wx += weight * intensity;
                sum_wxx += weight * intensity * intensity;
            }
        }
        RefPatch {
            positions,
            intensities,
            weights,
            sum_w,
            sum_wx,
            sum_wxx,
        }
    }

    /// Weighted NCC cost of a prepared reference patch against source view
    /// `j` under homography `hom`. Samples projecting outside the source are
    /// dropped; losing more than half of them signals invisibility.
    pub fn patch_cost_with_homography(
        &self,
        patch: &RefPatch,
        hom: &Matrix3<f64>,
        j: usize,
    ) -> f64 {
        let image = self.sources[j].matching_image(self.use_corrected);
        let total = patch.positions.len();
        let (h00, h01, h02) = (hom[(0, 0)], hom[(0, 1)], hom[(0, 2)]);
        let (h10, h11, h12) = (hom[(1, 0)], hom[(1, 1)], hom[(1, 2)]);
        let (h20, h21, h22) = (hom[(2, 0)], hom[(2, 1)], hom[(2, 2)]);
        let mut dropped = 0usize;
        // Reference-only sums come precomputed; dropped samples subtract.
        let mut drop_w = 0.0f64;
        let mut drop_wx = 0.0f64;
        let mut drop_wxx = 0.0f64;
        let mut sy = 0.0f64;
        let mut syy = 0.0f64;
        let mut sxy = 0.0f64;
        for ((&(qx, qy), &x), &w) in patch
            .positions
            .iter()
            .zip(&patch.intensities)
            .zip(&patch.weights)
        {
            let hz = h20 * qx + h21 * qy + h22;
            let sample = if hz.abs() < 1e-15 {
                None
            } else {
                let rz = 1.0 / hz;
                let hx = h00 * qx + h01 * qy + h02;
                let hy = h10 * qx + h11 * qy + h12;
                image.sample_bilinear(hx * rz, hy * rz)
            };
            match sample {
                Some(y) => {
                    let y = y as f64;
                    let wy = w * y;
                    sy += wy;
                    syy += wy * y;
                    sxy += wy * x;
                }
                None => {
                    dropped += 1;
                    drop_w += w;
                    drop_wx += w * x;
                    drop_wxx += w * x * x;
                }
            }
        }
        if dropped * 2 > total {
            return COST_MAX;
        }
        let sw = patch.sum_w - drop_w;
        if sw <= 0.0 {
            return COST_MAX;
        }
        let sx = patch.sum_wx - drop_wx;
        let sxx = patch.sum_wxx - drop_wxx;
        let mx = sx / sw;
        let my = sy / sw;
        let var_x = sxx / sw - mx * mx;
        let var_y = syy / sw - my * my;
        let cov = sxy / sw - mx * my;
        if var_x <= 1e-12 || var_y <= 1e-12 {
            return COST_MAX;
        }
        let ncc = (cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0);
        1.0 - ncc
    }

    /// Strided variant of [`Self::patch_cost_with_homography`] used to rank
    /// candidates cheaply; the winner is re-evaluated at full density.
    fn patch_cost_strided(&self, patch: &RefPatch, hom: &Matrix3<f64>, j: usize, stride: usize) -> f64 {
        let image = self.sources[j].matching_image(self.use_corrected);
        let (h00, h01, h02) = (hom[(0, 0)], hom[(0, 1)], hom[(0, 2)]);
        let (h10, h11, h12) = (hom[(1, 0)], hom[(1, 1)], hom[(1, 2)]);
        let (h20, h21, h22) = (hom[(2, 0)], hom[(2, 1)], hom[(2, 2)]);
        let mut total = 0usize;
        let mut kept = 0usize;
        let mut sw = 0.0f64;
        let mut sx = 0.0f64;
        let mut sxx = 0.0f64;
        let mut sy = 0.0f64;
        let mut syy = 0.0f64;
        let mut sxy = 0.0f64;
        let mut i = 0;
        while i < patch.positions.len() {
            let (qx, qy) = patch.positions[i];
            let x = patch.intensities[i];
            let w = patch.weights[i];
            total += 1;
            let hz = h20 * qx + h21 * qy + h22;
            let sample = if hz.abs() < 1e-15 {
                None
            } else {
                let rz = 1.0 / hz;
                let hx = h00 * qx + h01 * qy + h02;
                let hy = h10 * qx + h11 * qy + h12;
                image.sample_bilinear(hx * rz, hy * rz)
            };
            if let Some(y) = sample {
                let y = y as f64;
                kept += 1;
                sw += w;
                sx += w * x;
                sxx += w * x * x;
                let wy = w * y;
                sy += wy;
                syy += wy * y;
                sxy += wy * x;
            }
            i += stride;
        }
        if kept * 2 < total || sw <= 0.0 {
            return COST_MAX;
        }
        let mx = sx / sw;
        let my = sy / sw;
        let var_x = sxx / sw - mx * mx;
        let var_y = syy / sw - my * my;
        let cov = sxy / sw - mx * my;
        if var_x <= 1e-12 || var_y <= 1e-12 {
            return COST_MAX;
        }
        1.0 - (cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0)
    }

    /// Single-view, single-patch cost at pixel `p` under hypothesis `h`.
    pub fn ncc_cost(&self, p: Vector2<f64>, h: &PlaneHypothesis, spec: PatchSpec, j: usize) -> f64 {
        let patch = self.ref_patch(p, spec);
        match geometry::homography(h, p, self.reference, self.sources[j]) {
            Ok(hom) => self.patch_cost_with_homography(&patch, &hom, j),
            Err(_) => COST_MAX,
        }
    }

    /// Hypothesis at anchor `s` sharing the plane of `h` anchored at `p`.
    pub fn anchor_hypothesis(
        &self,
        p: Vector2<f64>,
        h: &PlaneHypothesis,
        s: Vector2<f64>,
    ) -> Option<PlaneHypothesis> {
        let ray_p = self.reference.ray(p.x, p.y);
        let ray_s = self.reference.ray(s.x, s.y);
        let d_s = h.depth_on_ray(&ray_p, &ray_s)?;
        Some(PlaneHypothesis::new(h.n, d_s))
    }

    /// Per-view cost under one of the cost modes, with the anchors already
    /// filtered for view `j`.
    pub fn per_view_cost(
        &self,
        p: Vector2<f64>,
        h: &PlaneHypothesis,
        mode: CostMode,
        anchors: &AnchorSet,
        j: usize,
    ) -> f64 {
        let center = || self.ncc_cost(p, h, PatchSpec::whole(self.params), j);
        match mode {
            CostMode::Center => center(),
            CostMode::Deformable | CostMode::AnchorsOnly => {
                let sub_spec = PatchSpec::sub(self.params);
                let mut sum = 0.0;
                let mut count = 0usize;
                for (ax, ay) in anchors.for_view(j) {
                    let s = Vector2::new(ax as f64, ay as f64);
                    let cost = match self.anchor_hypothesis(p, h, s) {
                        Some(hs) => self.ncc_cost(s, &hs, sub_spec, j),
                        None => COST_MAX,
                    };
                    sum += cost;
                    count += 1;
                }
                match (mode, count) {
                    (CostMode::AnchorsOnly, 0) => COST_MAX,
                    (CostMode::AnchorsOnly, _) => sum / count as f64,
                    (CostMode::Deformable, 0) => center(),
                    (CostMode::Deformable, _) => {
                        let lambda = self.params.lambda;
                        lambda * center() + (1.0 - lambda) * sum / count as f64
                    }
                    (CostMode::Center, _) => unreachable!(),
                }
            }
        }
    }

    /// Aggregated multi-view cost of `h` at `p` under per-view weights.
    pub fn aggregated_cost(
        &self,
        p: Vector2<f64>,
        h: &PlaneHypothesis,
        mode: CostMode,
        anchors: &AnchorSet,
        weights: &[f64],
    ) -> f64 {
        debug_assert_eq!(weights.len(), self.sources.len());
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            num += w * self.per_view_cost(p, h, mode, anchors, j);
            den += w;
        }
        if den <= 0.0 {
            COST_MAX
        } else {
            num / den
        }
    }

    /// Per-view center-patch costs of `h` at `p` (view-selection input).
    pub fn per_view_center_costs(&self, p: Vector2<f64>, h: &PlaneHypothesis) -> Vec<f64> {
        let patch = self.ref_patch(p, PatchSpec::whole(self.params));
        (0..self.sources.len())
            .map(|j| {
                match geometry::homography(h, p, self.reference, self.sources[j]) {
                    Ok(hom) => self.patch_cost_with_homography(&patch, &hom, j),
                    Err(_) => COST_MAX,
                }
            })
            .collect()
    }
}

/// Batched evaluator for many hypotheses at one pixel.
///
/// Reference-side patches (the central patch and every anchor sub-patch)
/// depend only on pixel positions, so they are extracted once; each
/// hypothesis then costs one homography and one weighted-NCC accumulation
/// per source view, shared by the central patch and all anchors since they
/// lie on the same plane.
pub struct PixelCostEvaluator<'c, 'a> {
    ctx: &'c CostContext<'a>,
    ray_p: Vector3<f64>,
    mode: CostMode,
    anchors: &'c AnchorSet,
    weights: &'c [f64],
    center: RefPatch,
    anchor_patches: Vec<(RefPatch, Vector3<f64>)>,
}

impl<'c, 'a> PixelCostEvaluator<'c, 'a> {
    pub fn new(
        ctx: &'c CostContext<'a>,
        p: Vector2<f64>,
        mode: CostMode,
        anchors: &'c AnchorSet,
        weights: &'c [f64],
    ) -> Self {
        let center = ctx.ref_patch(p, PatchSpec::whole(ctx.params));
        let sub_spec = PatchSpec::sub(ctx.params);
        let anchor_patches = match mode {
            CostMode::Center => Vec::new(),
            _ => anchors
                .anchors
                .iter()
                .map(|&(ax, ay)| {
                    let s = Vector2::new(ax as f64, ay as f64);
                    (ctx.ref_patch(s, sub_spec), ctx.reference.ray(s.x, s.y))
                })
                .collect(),
        };
        PixelCostEvaluator {
            ctx,
            ray_p: ctx.reference.ray(p.x, p.y),
            mode,
            anchors,
            weights,
            center,
            anchor_patches,
        }
    }

    /// Cost of `h` in one source view under the pixel's mode.
    fn view_cost(&self, h: &PlaneHypothesis, dist: f64, j: usize) -> f64 {
        let Some(hom) = self.ctx.fast_homography(j, &h.n, dist) else {
            return COST_MAX;
        };
        let center = || self.ctx.patch_cost_with_homography(&self.center, &hom, j);
        match self.mode {
            CostMode::Center => center(),
            CostMode::Deformable | CostMode::AnchorsOnly => {
                let mask = self.anchors.per_view_mask.get(j).copied().unwrap_or(u8::MAX);
                let mut sum = 0.0;
                let mut count = 0usize;
                for (k, (patch, ray_s)) in self.anchor_patches.iter().enumerate() {
                    if mask & (1 << k) == 0 {
                        continue;
                    }
                    // The anchor's depth along its own ray must be positive
                    // for the shared plane to be in front of the camera.
                    let denom = h.n.dot(ray_s);
                    let cost = if denom.abs() < 1e-12 || dist / denom <= 0.0 {
                        COST_MAX
                    } else {
                        self.ctx.patch_cost_with_homography(patch, &hom, j)
                    };
                    sum += cost;
                    count += 1;
                }
                match (self.mode, count) {
                    (CostMode::AnchorsOnly, 0) => COST_MAX,
                    (CostMode::AnchorsOnly, _) => sum / count as f64,
                    (CostMode::Deformable, 0) => center(),
                    (CostMode::Deformable, _) => {
                        let lambda = self.ctx.params.lambda;
                        lambda * center() + (1.0 - lambda) * sum / count as f64
                    }
                    (CostMode::Center, _) => unreachable!(),
                }
            }
        }
    }

    /// Aggregated multi-view cost of `h` at this pixel.
    pub fn aggregated(&self, h: &PlaneHypothesis) -> f64 {
        let dist = h.n.dot(&self.ray_p) * h.d;
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &w) in self.weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            num += w * self.view_cost(h, dist, j);
            den += w;
        }
        if den <= 0.0 {
            COST_MAX
        } else {
            num / den
        }
    }

    /// Cheap candidate-ranking cost: every patch subsampled with the given
    /// stride. Only used to pick which hypothesis deserves a full
    /// [`Self::aggregated`] evaluation; never stored.
    pub fn screened(&self, h: &PlaneHypothesis, stride: usize) -> f64 {
        let dist = h.n.dot(&self.ray_p) * h.d;
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &w) in self.weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let cost = match self.ctx.fast_homography(j, &h.n, dist) {
                None => COST_MAX,
                Some(hom) => {
                    let center =
                        || self.ctx.patch_cost_strided(&self.center, &hom, j, stride);
                    match self.mode {
                        CostMode::Center => center(),
                        CostMode::Deformable | CostMode::AnchorsOnly => {
                            let mask =
                                self.anchors.per_view_mask.get(j).copied().unwrap_or(u8::MAX);
                            let mut sum = 0.0;
                            let mut count = 0usize;
                            for (k, (patch, ray_s)) in self.anchor_patches.iter().enumerate() {
                                if mask & (1 << k) == 0 {
                                    continue;
                                }
                                let denom = h.n.dot(ray_s);
                                let cost = if denom.abs() < 1e-12 || dist / denom <= 0.0 {
                                    COST_MAX
                                } else {
                                    self.ctx.patch_cost_strided(patch, &hom, j, stride)
                                };
                                sum += cost;
                                count += 1;
                            }
                            match (self.mode, count) {
                                (CostMode::AnchorsOnly, 0) => COST_MAX,
                                (CostMode::AnchorsOnly, _) => sum / count as f64,
                                (CostMode::Deformable, 0) => center(),
                                (CostMode::Deformable, _) => {
                                    let lambda = self.ctx.params.lambda;
                                    lambda * center() + (1.0 - lambda) * sum / count as f64
                                }
                                (CostMode::Center, _) => unreachable!(),
                            }
                        }
                    }
                }
            };
            num += w * cost;
            den += w;
        }
        if den <= 0.0 {
            COST_MAX
        } else {
            num / den
        }
    }

    /// Raw per-view central-patch costs of `h` (view-selection input).
    pub fn per_view_center(&self, h: &PlaneHypothesis) -> Vec<f64> {
        let dist = h.n.dot(&self.ray_p) * h.d;
        (0..self.ctx.sources.len())
            .map(|j| match self.ctx.fast_homography(j, &h.n, dist) {
                Some(hom) => self.ctx.patch_cost_with_homography(&self.center, &hom, j),
                None => COST_MAX,
            })
            .collect()
    }
}
