//! Projective primitives around per-pixel plane hypotheses.
//!
//! Depth `d` always parameterizes the viewing ray of the reference pixel:
//! the 3D point of pixel `p` at depth `d` is `d · K⁻¹ (p, 1)` in camera
//! coordinates. Plane-offset forms are internal conversions.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::camera::CameraView;
use crate::error::{MvsError, Result};

/// Determinant threshold below which a normalized homography is degenerate.
pub const DEGENERATE_DET: f64 = 1e-12;

/// Per-pixel plane hypothesis: unit normal in reference-camera space and the
/// depth of the pixel along its viewing ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHypothesis {
    pub n: Vector3<f64>,
    pub d: f64,
}

impl PlaneHypothesis {
    pub fn new(n: Vector3<f64>, d: f64) -> Self {
        PlaneHypothesis { n, d }
    }

    /// Depth of the same plane along another pixel's viewing ray, or `None`
    /// when the ray is (near) parallel to the plane or the depth is not
    /// positive.
    ///
    /// `ray_src` is the camera-space ray of the pixel the hypothesis is
    /// anchored at, `ray_dst` the ray of the pixel to evaluate.
    #[inline]
    pub fn depth_on_ray(&self, ray_src: &Vector3<f64>, ray_dst: &Vector3<f64>) -> Option<f64> {
        let num = self.n.dot(ray_src) * self.d;
        let den = self.n.dot(ray_dst);
        if den.abs() < 1e-12 {
            return None;
        }
        let d = num / den;
        if d.is_finite() && d > 0.0 {
            Some(d)
        } else {
            None
        }
    }
}

/// Homography induced by the plane hypothesis `h` at pixel `p` of `view_i`,
/// mapping homogeneous pixels of `view_i` into `view_j`.
///
/// Degeneracy (plane through the reference camera center, or a numerically
/// singular result) is reported as an error; callers treat the cost as
/// maximal.
pub fn homography(
    h: &PlaneHypothesis,
    p: Vector2<f64>,
    view_i: &CameraView,
    view_j: &CameraView,
) -> Result<Matrix3<f64>> {
    let ray = view_i.ray(p.x, p.y);
    let point = ray * h.d;
    let dist = h.n.dot(&point);
    if dist.abs() < 1e-12 {
        return Err(MvsError::Degenerate(
            "plane passes through the reference camera center".into(),
        ));
    }
    let r_rel = view_j.r * view_i.r.transpose();
    let t_rel = view_j.t - r_rel * view_i.t;
    let m = r_rel + (t_rel / dist) * h.n.transpose();
    let hom = view_j.k * m * view_i.k_inv();
    // Normalize so the determinant test is scale-free.
    let scale = hom.abs().max();
    if !scale.is_finite() || scale <= 0.0 {
        return Err(MvsError::Degenerate("non-finite homography".into()));
    }
    let hn = hom / scale;
    if hn.determinant().abs() < DEGENERATE_DET {
        return Err(MvsError::Degenerate("homography is rank-deficient".into()));
    }
    Ok(hom)
}

/// Apply a homography to a pixel. `None` when the mapped point is at infinity.
#[inline]
pub fn apply_homography(h: &Matrix3<f64>, p: Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() < 1e-15 {
        return None;
    }
    Some(Vector2::new(q.x / q.z, q.y / q.z))
}

/// Back-project a pixel at the given ray depth into world coordinates.
#[inline]
pub fn back_project(p: Vector2<f64>, depth: f64, view: &CameraView) -> Vector3<f64> {
    let cam = view.ray(p.x, p.y) * depth;
    view.r.transpose() * (cam - view.t)
}

/// Project a world point. Returns the pixel and its ray depth; a nonpositive
/// depth means the point lies behind the camera and the caller discards it.
#[inline]
pub fn project(point: &Vector3<f64>, view: &CameraView) -> (Vector2<f64>, f64) {
    let cam = view.r * point + view.t;
    let px = view.k * cam;
    (Vector2::new(px.x / px.z, px.y / px.z), cam.z)
}

/// Epipolar line in `view_j` of the ray through pixel `p` of `view_i`,
/// returned as a unit direction and a point on the line.
pub fn epipolar_line(
    p: Vector2<f64>,
    view_i: &CameraView,
    view_j: &CameraView,
) -> Result<(Vector2<f64>, Vector2<f64>)> {
    // The ray maps to the pencil e + d·m in homogeneous pixel coordinates of
    // view j; its image is the projective line e × m.
    let e = view_j.k * (view_j.r * view_i.center() + view_j.t);
    let m = view_j.k * (view_j.r * (view_i.r.transpose() * view_i.ray(p.x, p.y)));
    let line = e.cross(&m);
    let norm = (line.x * line.x + line.y * line.y).sqrt();
    if norm < 1e-12 {
        return Err(MvsError::Degenerate(
            "epipolar line undefined (coincident camera centers)".into(),
        ));
    }
    let direction = Vector2::new(-line.y / norm, line.x / norm);
    let point = Vector2::new(
        -line.x * line.z / (norm * norm),
        -line.y * line.z / (norm * norm),
    );
    Ok((direction, point))
}

/// Depth on the ray of `p` (in `view_i`) whose projection lands at pixel `q`
/// on the epipolar line in `view_j`. `None` when `q` sits at the epipole or
/// past the vanishing point (nonpositive or non-finite depth).
pub fn depth_for_epipolar_point(
    p: Vector2<f64>,
    q: Vector2<f64>,
    view_i: &CameraView,
    view_j: &CameraView,
) -> Option<f64> {
    let e = view_j.k * (view_j.r * view_i.center() + view_j.t);
    let m = view_j.k * (view_j.r * (view_i.r.transpose() * view_i.ray(p.x, p.y)));
    // Solve (e + d·m) ∝ (q, 1): pick the better-conditioned coordinate.
    let den_x = m.x - q.x * m.z;
    let den_y = m.y - q.y * m.z;
    let (num, den) = if den_x.abs() >= den_y.abs() {
        (q.x * e.z - e.x, den_x)
    } else {
        (q.y * e.z - e.y, den_y)
    };
    if den.abs() < 1e-15 {
        return None;
    }
    let d = num / den;
    if d.is_finite() && d > 0.0 {
        Some(d)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::intrinsics;
    use crate::grid::Grid;
    use nalgebra::Matrix3;

    fn view(id: u32, k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>) -> CameraView {
        CameraView::new(id, k, r, t, Grid::new(64, 64, 0.5)).unwrap()
    }

    fn identity_view(id: u32) -> CameraView {
        view(
            id,
            intrinsics(400.0, 400.0, 32.0, 32.0),
            Matrix3::identity(),
            Vector3::zeros(),
        )
    }

    #[test]
    fn identical_views_give_identity_homography() {
        let a = identity_view(0);
        let b = identity_view(1);
        let h = PlaneHypothesis::new(Vector3::new(0.0, 0.0, -1.0), 2.0);
        let hom = homography(&h, Vector2::new(20.0, 30.0), &a, &b).unwrap();
        let hn = hom / hom[(2, 2)];
        assert!((hn - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn fronto_parallel_translation_is_disparity_shift() {
        // Pure x-translation of the camera by b: world point maps b·f/d left.
        let a = identity_view(0);
        let b = view(
            1,
            intrinsics(400.0, 400.0, 32.0, 32.0),
            Matrix3::identity(),
            Vector3::new(-0.5, 0.0, 0.0),
        );
        let d = 2.0;
        let h = PlaneHypothesis::new(Vector3::new(0.0, 0.0, -1.0), d);
        let p = Vector2::new(32.0, 32.0);
        let hom = homography(&h, p, &a, &b).unwrap();
        let expected_shift = 400.0 * -0.5 / d;
        for &(x, y) in &[(10.0, 12.0), (32.0, 32.0), (55.0, 40.0)] {
            let q = apply_homography(&hom, Vector2::new(x, y)).unwrap();
            assert!((q.x - (x + expected_shift)).abs() < 1e-9, "x at ({x},{y})");
            assert!((q.y - y).abs() < 1e-9);
        }
    }

    #[test]
    fn principal_point_backprojects_to_optical_axis() {
        let v = identity_view(0);
        let p = back_project(Vector2::new(32.0, 32.0), 1.0, &v);
        assert!((p - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn point_behind_camera_reports_nonpositive_depth() {
        let v = identity_view(0);
        let (_, depth) = project(&Vector3::new(0.0, 0.0, -3.0), &v);
        assert!(depth <= 0.0);
    }

    #[test]
    fn rectified_pair_has_horizontal_epipolar_lines() {
        let a = identity_view(0);
        let b = view(
            1,
            intrinsics(400.0, 400.0, 32.0, 32.0),
            Matrix3::identity(),
            Vector3::new(-0.3, 0.0, 0.0),
        );
        let (dir, _) = epipolar_line(Vector2::new(20.0, 25.0), &a, &b).unwrap();
        assert!(dir.y.abs() < 1e-12);
        assert!((dir.x.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_centers_are_degenerate() {
        let a = identity_view(0);
        let b = identity_view(1);
        assert!(epipolar_line(Vector2::new(20.0, 25.0), &a, &b).is_err());
    }
}
