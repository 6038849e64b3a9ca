//! Per-view visibility: selection weights and reprojection restoration.
//!
//! View-selection weights grade each source view by its matching cost.
//! Restoration re-decides visibility geometrically: a pixel is visible in a
//! source view when projecting it there and reprojecting it back with the
//! source depth lands within `eps_reproj` pixels. Textureless areas that the
//! photometric weights wrote off are thereby recovered, and occluded areas
//! that happened to match photometrically are removed.

use nalgebra::Vector2;

use crate::camera::CameraView;
use crate::config::Params;
use crate::geometry;
use crate::grid::Grid;

/// Per-pixel, per-source-view visibility state for one reference view.
#[derive(Debug, Clone)]
pub struct VisibilityField {
    /// Selection weights `w_ij` in `[0, 1]`, one grid per source view.
    pub w: Vec<Grid<f64>>,
    /// Restored visibility flags.
    pub restored: Vec<Grid<bool>>,
    /// Reprojection errors in pixels (`∞` where invisible or unknown).
    pub e: Vec<Grid<f64>>,
}

impl VisibilityField {
    pub fn new(width: usize, height: usize, n_sources: usize) -> Self {
        VisibilityField {
            w: vec![Grid::new(width, height, 0.0); n_sources],
            restored: vec![Grid::new(width, height, false); n_sources],
            e: vec![Grid::new(width, height, f64::INFINITY); n_sources],
        }
    }

    pub fn n_sources(&self) -> usize {
        self.w.len()
    }

    /// Restored weight `w′`: zero when not restored, the selection weight
    /// when positive, and the floor weight for views restored purely
    /// geometrically in textureless areas.
    #[inline]
    pub fn effective_weight(&self, j: usize, x: usize, y: usize, w_min: f64) -> f64 {
        if !self.restored[j].get(x, y) {
            return 0.0;
        }
        let w = *self.w[j].get(x, y);
        if w > 0.0 {
            w
        } else {
            w_min
        }
    }

    /// All effective weights of a pixel, in source order.
    pub fn weights_at(&self, x: usize, y: usize, w_min: f64) -> Vec<f64> {
        (0..self.n_sources())
            .map(|j| self.effective_weight(j, x, y, w_min))
            .collect()
    }
}

/// Selection weight of a view from its matching cost: full Gaussian weight
/// below `tau_good`, linear decay to zero at `tau_bad`.
pub fn view_selection_weight(cost: f64, params: &Params) -> f64 {
    let gauss = |m: f64| (-m * m / (2.0 * params.sigma_weight * params.sigma_weight)).exp();
    if cost < params.tau_good {
        gauss(cost)
    } else if cost < params.tau_bad {
        gauss(params.tau_good) * (params.tau_bad - cost) / (params.tau_bad - params.tau_good)
    } else {
        0.0
    }
}

/// Frozen per-view maps a restoration pass reads from the other views.
#[derive(Debug, Clone)]
pub struct ViewSnapshot {
    pub depth: Grid<f32>,
    pub cost: Grid<f32>,
    pub reliable: Grid<bool>,
    pub highlight: Grid<bool>,
}

/// Cross-view reprojection error of pixel `p` with depth `d_p`.
///
/// `p` projects into the source view; within a window around the landing
/// pixel, the depth of the lowest-cost pixel substitutes the landing depth,
/// and the reprojection back into the reference measures the error.
/// Projections leaving the source image report `∞` (invisible).
pub fn reprojection_error(
    p: Vector2<f64>,
    d_p: f64,
    view_i: &CameraView,
    view_j: &CameraView,
    snapshot_j: &ViewSnapshot,
    window: usize,
) -> f64 {
    if !(d_p.is_finite() && d_p > 0.0) {
        return f64::INFINITY;
    }
    let world = geometry::back_project(p, d_p, view_i);
    let (q, depth_j) = geometry::project(&world, view_j);
    if depth_j <= 0.0 || !view_j.in_bounds(q.x, q.y) {
        return f64::INFINITY;
    }
    let half = (window / 2) as i64;
    let (cx, cy) = (q.x.round() as i64, q.y.round() as i64);
    // Lowest cost wins; ties go to the pixel nearest the landing point.
    let mut best: Option<(f32, i64, f32)> = None;
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (cx + dx, cy + dy);
            if !snapshot_j.cost.contains(x, y) {
                continue;
            }
            let (ux, uy) = (x as usize, y as usize);
            let c = *snapshot_j.cost.get(ux, uy);
            let d = *snapshot_j.depth.get(ux, uy);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let dist2 = dx * dx + dy * dy;
            if best.map_or(true, |(bc, bd2, _)| c < bc || (c == bc && dist2 < bd2)) {
                best = Some((c, dist2, d));
            }
        }
    }
    let Some((_, _, d_sub)) = best else {
        return f64::INFINITY;
    };
    let back = geometry::back_project(q, d_sub as f64, view_j);
    let (p_back, depth_i) = geometry::project(&back, view_i);
    if depth_i <= 0.0 {
        return f64::INFINITY;
    }
    (p_back - p).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::intrinsics;
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn weight_formula_cases() {
        let params = Params::default();
        assert!((view_selection_weight(0.0, &params) - 1.0).abs() < 1e-12);
        assert_eq!(view_selection_weight(params.tau_bad, &params), 0.0);
        assert_eq!(view_selection_weight(1.9, &params), 0.0);
        // Midway between the thresholds: half the tau_good weight.
        let expect = view_selection_weight(params.tau_good - 1e-12, &params) * 0.5;
        let got = view_selection_weight(1.0, &params);
        assert!((got - expect).abs() < 1e-9, "got {got}, expected {expect}");
    }

    fn flat_view(id: u32, tx: f64) -> CameraView {
        CameraView::new(
            id,
            intrinsics(100.0, 100.0, 32.0, 32.0),
            Matrix3::identity(),
            Vector3::new(tx, 0.0, 0.0),
            Grid::new(64, 64, 0.5),
        )
        .unwrap()
    }

    /// Ground-truth depth of a fronto-parallel plane in both views.
    fn plane_snapshot(depth: f32) -> ViewSnapshot {
        ViewSnapshot {
            depth: Grid::new(64, 64, depth),
            cost: Grid::new(64, 64, 0.1),
            reliable: Grid::new(64, 64, true),
            highlight: Grid::new(64, 64, false),
        }
    }

    #[test]
    fn consistent_depths_reproject_exactly() {
        let a = flat_view(0, 0.0);
        let b = flat_view(1, -0.5);
        let snap = plane_snapshot(2.0);
        let e = reprojection_error(Vector2::new(52.0, 30.0), 2.0, &a, &b, &snap, 11);
        assert!(e < 0.5, "e = {e}");
    }

    #[test]
    fn corrupted_center_is_rescued_by_window_substitution() {
        let a = flat_view(0, 0.0);
        let b = flat_view(1, -0.5);
        let mut snap = plane_snapshot(2.0);
        // Corrupt the landing pixel's depth but give it a high cost so the
        // substitution window picks a clean neighbor.
        let p = Vector2::new(52.0, 30.0);
        let world = geometry::back_project(p, 2.0, &a);
        let (q, _) = geometry::project(&world, &b);
        let (qx, qy) = (q.x.round() as usize, q.y.round() as usize);
        snap.depth.set(qx, qy, 9.0);
        snap.cost.set(qx, qy, 1.9);
        let e = reprojection_error(p, 2.0, &a, &b, &snap, 11);
        assert!(e < 0.5, "e = {e}");
    }

    #[test]
    fn projection_outside_source_is_invisible() {
        let a = flat_view(0, 0.0);
        let b = flat_view(1, -50.0);
        let snap = plane_snapshot(2.0);
        let e = reprojection_error(Vector2::new(20.0, 30.0), 2.0, &a, &b, &snap, 11);
        assert!(e.is_infinite());
    }

    #[test]
    fn effective_weight_floors_restored_zero_weight_views() {
        let mut field = VisibilityField::new(4, 4, 1);
        field.restored[0].set(1, 1, true);
        assert_eq!(field.effective_weight(0, 1, 1, 0.1), 0.1);
        field.w[0].set(1, 1, 0.6);
        assert_eq!(field.effective_weight(0, 1, 1, 0.1), 0.6);
        assert_eq!(field.effective_weight(0, 0, 0, 0.1), 0.0);
    }
}
