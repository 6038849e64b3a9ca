//! Consistency fusion of per-view depth/normal maps into a point cloud.
//!
//! A pixel becomes a point when enough other views agree with it
//! geometrically (reprojection, relative depth and normal angle bounds);
//! agreeing estimates are averaged and the consumed pixels are claimed so no
//! surface point is emitted twice. Processing order is fixed, so the output
//! is deterministic.

use nalgebra::Vector3;

use crate::config::Params;
use crate::error::{MvsError, Result};
use crate::geometry;
use crate::grid::Grid;
use crate::io::ply::PlyPoint;
use crate::scene::{DepthNormalResult, SceneView};

/// One fused point with the number of agreeing source views.
#[derive(Debug, Clone, Copy)]
pub struct FusedPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
    pub support: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FusedCloud {
    pub points: Vec<FusedPoint>,
}

impl FusedCloud {
    pub fn to_ply(&self) -> Vec<PlyPoint> {
        self.points
            .iter()
            .map(|p| PlyPoint {
                position: p.position,
                normal: p.normal,
                color: p.color,
            })
            .collect()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// Pixels barred from fusion: invalid depth, or highlight-masked pixels
/// that are not reliable (reliable ones were already excluded by the solver).
fn fusible(view: &SceneView, result: &DepthNormalResult, x: usize, y: usize, params: &Params) -> bool {
    let d = *result.depth.get(x, y);
    if !(d.is_finite() && d > 0.0) {
        return false;
    }
    if params.highlight_rules && *view.priors.highlight_mask.get(x, y) && !*result.reliable.get(x, y)
    {
        return false;
    }
    true
}

/// Fuse all per-view results into one cloud.
pub fn fuse(scene: &[SceneView], results: &[DepthNormalResult], params: &Params) -> Result<FusedCloud> {
    if scene.len() != results.len() {
        return Err(MvsError::Invalid(format!(
            "{} views but {} result maps",
            scene.len(),
            results.len()
        )));
    }
    for (view, result) in scene.iter().zip(results) {
        if result.depth.width() != view.camera.width || result.depth.height() != view.camera.height
        {
            return Err(MvsError::Validation {
                view: view.camera.id,
                message: "result dimensions do not match the view".into(),
            });
        }
    }
    let n = scene.len();
    let cos_bound = params.fuse_normal_deg.to_radians().cos();
    let mut consumed: Vec<Grid<bool>> = scene
        .iter()
        .map(|v| Grid::new(v.camera.width, v.camera.height, false))
        .collect();
    let mut cloud = FusedCloud::default();

    for i in 0..n {
        let view_i = &scene[i];
        let cam_i = &view_i.camera;
        let res_i = &results[i];
        for y in 0..cam_i.height {
            for x in 0..cam_i.width {
                if *consumed[i].get(x, y) || !fusible(view_i, res_i, x, y, params) {
                    continue;
                }
                let d_i = *res_i.depth.get(x, y) as f64;
                let p = nalgebra::Vector2::new(x as f64, y as f64);
                let world = geometry::back_project(p, d_i, cam_i);
                let n_i = res_i.normal.get(x, y);
                let n_world = cam_i.r.transpose()
                    * Vector3::new(n_i[0] as f64, n_i[1] as f64, n_i[2] as f64);

                let mut agreeing: Vec<(usize, usize, usize, Vector3<f64>, Vector3<f64>)> =
                    Vec::new();
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let cam_j = &scene[j].camera;
                    let res_j = &results[j];
                    let (q, d_at_j) = geometry::project(&world, cam_j);
                    if d_at_j <= 0.0 || !cam_j.in_bounds(q.x, q.y) {
                        continue;
                    }
                    let (qx, qy) = (q.x.round() as usize, q.y.round() as usize);
                    if *consumed[j].get(qx, qy) || !fusible(&scene[j], res_j, qx, qy, params) {
                        continue;
                    }
                    let d_j = *res_j.depth.get(qx, qy) as f64;
                    if ((d_at_j - d_j) / d_j).abs() >= params.fuse_depth_rel {
                        continue;
                    }
                    let world_j = geometry::back_project(
                        nalgebra::Vector2::new(qx as f64, qy as f64),
                        d_j,
                        cam_j,
                    );
                    let (p_back, d_back) = geometry::project(&world_j, cam_i);
                    if d_back <= 0.0 || (p_back - p).norm() >= params.fuse_reproj_px {
                        continue;
                    }
                    let n_j = res_j.normal.get(qx, qy);
                    let n_world_j = cam_j.r.transpose()
                        * Vector3::new(n_j[0] as f64, n_j[1] as f64, n_j[2] as f64);
                    if n_world.dot(&n_world_j) < cos_bound {
                        continue;
                    }
                    agreeing.push((j, qx, qy, world_j, n_world_j));
                }
                if agreeing.len() < params.min_consistent {
                    continue;
                }
                let mut position = world;
                let mut normal = n_world;
                for (_, _, _, w, nw) in &agreeing {
                    position += w;
                    normal += nw;
                }
                position /= (agreeing.len() + 1) as f64;
                let norm = normal.norm();
                if norm > 1e-12 {
                    normal /= norm;
                } else {
                    normal = n_world;
                }
                let intensity = (*cam_i.image.get(x, y) * 255.0).round().clamp(0.0, 255.0) as u8;
                consumed[i].set(x, y, true);
                for (j, qx, qy, _, _) in &agreeing {
                    consumed[*j].set(*qx, *qy, true);
                }
                cloud.points.push(FusedPoint {
                    position,
                    normal,
                    color: [intensity; 3],
                    support: agreeing.len(),
                });
            }
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::intrinsics;
    use crate::scene::PriorBundle;
    use nalgebra::Matrix3;

    fn plane_scene(n_views: usize, depth: f32) -> (Vec<SceneView>, Vec<DepthNormalResult>) {
        let (w, h) = (64usize, 48usize);
        let mut views = Vec::new();
        let mut results = Vec::new();
        for i in 0..n_views {
            let camera = crate::camera::CameraView::new(
                i as u32,
                intrinsics(80.0, 80.0, w as f64 / 2.0, h as f64 / 2.0),
                Matrix3::identity(),
                Vector3::new(-0.2 * i as f64, 0.0, 0.0),
                Grid::new(w, h, 0.5),
            )
            .unwrap();
            views.push(SceneView {
                camera,
                priors: PriorBundle {
                    mono_depth: Grid::new(w, h, depth),
                    mono_normal: Grid::new(w, h, [0.0, 0.0, -1.0]),
                    edge_map: Grid::new(w, h, false),
                    highlight_mask: Grid::new(w, h, false),
                },
            });
            results.push(DepthNormalResult {
                depth: Grid::new(w, h, depth),
                normal: Grid::new(w, h, [0.0, 0.0, -1.0]),
                cost: Grid::new(w, h, 0.05),
                reliable: Grid::new(w, h, true),
            });
        }
        (views, results)
    }

    #[test]
    fn single_view_fuses_nothing() {
        let (views, results) = plane_scene(1, 2.0);
        let cloud = fuse(&views, &results, &Params::default()).unwrap();
        assert!(cloud.points.is_empty());
    }

    #[test]
    fn consistent_views_fuse_with_support() {
        let (views, results) = plane_scene(4, 2.0);
        let cloud = fuse(&views, &results, &Params::default()).unwrap();
        assert!(!cloud.points.is_empty());
        for p in &cloud.points {
            assert!(p.support >= Params::default().min_consistent);
            assert!((p.position.z - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fusion_is_deterministic() {
        let (views, results) = plane_scene(3, 2.0);
        let a = fuse(&views, &results, &Params::default()).unwrap();
        let b = fuse(&views, &results, &Params::default()).unwrap();
        assert_eq!(a.points.len(), b.points.len());
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.position, y.position);
        }
    }

    #[test]
    fn corrupted_view_is_filtered() {
        let (views, mut results) = plane_scene(4, 2.0);
        // Corrupt one source view's depths entirely.
        results[2].depth = Grid::new(64, 48, 0.7);
        let cloud = fuse(&views, &results, &Params::default()).unwrap();
        for p in &cloud.points {
            assert!((p.position.z - 2.0).abs() < 1e-6, "corrupt depth leaked");
        }
    }
}
