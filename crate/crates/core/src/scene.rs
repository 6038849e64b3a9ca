//! Scene directory I/O.
//!
//! A scene is a directory with a `cameras.txt` manifest, one image per view
//! and per-view prior maps. All paths inside the manifest are relative to the
//! scene root.
//!
//! ```text
//! scene/
//!   cameras.txt                  one line per view:
//!                                id fx fy cx cy r11..r33 t1 t2 t3 width height image_path
//!   images/view_<id>.png         8-bit image (RGB collapses to intensity)
//!   priors/depth_<id>.pfm        monocular depth (single-channel PFM)
//!   priors/normal_<id>.pfm       monocular normals (three-channel PFM)
//!   priors/edges_<id>.png        edge map (optional; computed when missing)
//!   priors/highlight_<id>.png    highlight mask (optional; zeros when missing)
//!   priors/corrected_<id>.png    highlight-removed image (optional)
//! ```
//!
//! Loading either succeeds for the whole scene or fails; there are no
//! partially-loaded scenes. Loaded scenes are immutable and safely shareable
//! across workers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::atlas::roberts_edges;
use crate::camera::CameraView;
use crate::error::{MvsError, Result};
use crate::grid::Grid;
use crate::io::{pfm, ply, png};

/// Monocular prior maps for one view.
#[derive(Debug, Clone)]
pub struct PriorBundle {
    pub mono_depth: Grid<f32>,
    pub mono_normal: Grid<[f32; 3]>,
    pub edge_map: Grid<bool>,
    pub highlight_mask: Grid<bool>,
}

/// A loaded view: camera plus its priors.
#[derive(Debug, Clone)]
pub struct SceneView {
    pub camera: CameraView,
    pub priors: PriorBundle,
}

/// Per-view solver output.
#[derive(Debug, Clone)]
pub struct DepthNormalResult {
    pub depth: Grid<f32>,
    pub normal: Grid<[f32; 3]>,
    pub cost: Grid<f32>,
    pub reliable: Grid<bool>,
}

impl DepthNormalResult {
    /// Degenerate results (e.g. a fully highlight-masked reference) have no
    /// reliable pixel at all.
    pub fn is_degenerate(&self) -> bool {
        !self.reliable.iter().any(|r| *r)
    }

    fn validate(&self) -> Result<()> {
        for (x, y, r) in self.reliable.enumerate() {
            if *r {
                let d = *self.depth.get(x, y);
                let c = *self.cost.get(x, y);
                if !(d.is_finite() && d > 0.0) {
                    return Err(MvsError::Invalid(format!(
                        "reliable pixel ({x},{y}) has invalid depth {d}"
                    )));
                }
                if !c.is_finite() {
                    return Err(MvsError::Invalid(format!(
                        "reliable pixel ({x},{y}) has non-finite cost"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn prior_path(root: &Path, kind: &str, id: u32, ext: &str) -> PathBuf {
    root.join("priors").join(format!("{kind}_{id}.{ext}"))
}

/// Load a scene directory. Fails if any view is malformed.
pub fn load_scene(root: &Path) -> Result<Vec<SceneView>> {
    let cameras_path = root.join("cameras.txt");
    let text = fs::read_to_string(&cameras_path).map_err(|e| MvsError::io(&cameras_path, e))?;
    let mut views = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let view = parse_camera_line(root, &cameras_path, idx + 1, line)?;
        views.push(view);
    }
    if views.is_empty() {
        return Err(MvsError::format(&cameras_path, "no views declared"));
    }
    Ok(views)
}

fn parse_camera_line(root: &Path, path: &Path, line_no: usize, line: &str) -> Result<SceneView> {
    let parse_err = |message: String| MvsError::Parse {
        path: path.into(),
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 20 {
        return Err(parse_err(format!(
            "expected 20 fields (id fx fy cx cy r11..r33 t1 t2 t3 width height image_path), got {}",
            fields.len()
        )));
    }
    let num = |i: usize, what: &str| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| parse_err(format!("invalid {what}: {:?}", fields[i])))
    };
    let id: u32 = fields[0]
        .parse()
        .map_err(|_| parse_err(format!("invalid id: {:?}", fields[0])))?;
    let fx = num(1, "fx")?;
    let fy = num(2, "fy")?;
    let cx = num(3, "cx")?;
    let cy = num(4, "cy")?;
    let mut r = Matrix3::zeros();
    for i in 0..9 {
        r[(i / 3, i % 3)] = num(5 + i, "rotation entry")?;
    }
    let t = Vector3::new(num(14, "t1")?, num(15, "t2")?, num(16, "t3")?);
    let width: usize = fields[17]
        .parse()
        .map_err(|_| parse_err("invalid width".into()))?;
    let height: usize = fields[18]
        .parse()
        .map_err(|_| parse_err("invalid height".into()))?;
    let image_path = root.join(fields[19]);

    let image = png::read_intensity(&image_path)?;
    if image.width() != width || image.height() != height {
        return Err(MvsError::Validation {
            view: id,
            message: format!(
                "image is {}x{} but camera declares {width}x{height}",
                image.width(),
                image.height()
            ),
        });
    }
    let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
    let mut camera = CameraView::new(id, k, r, t, image)?;

    let corrected_path = prior_path(root, "corrected", id, "png");
    if corrected_path.exists() {
        let corrected = png::read_intensity(&corrected_path)?;
        check_dims(id, "corrected image", corrected.width(), corrected.height(), &camera)?;
        camera.corrected_image = Some(corrected);
    }

    let mono_depth = pfm::read_gray(&prior_path(root, "depth", id, "pfm"))?;
    check_dims(id, "prior depth map", mono_depth.width(), mono_depth.height(), &camera)?;
    if let Some((x, y)) = mono_depth
        .enumerate()
        .find(|(_, _, d)| !d.is_finite() || **d < 0.0)
        .map(|(x, y, _)| (x, y))
    {
        return Err(MvsError::Validation {
            view: id,
            message: format!("prior depth map has negative or non-finite value at ({x},{y})"),
        });
    }

    let mut mono_normal = pfm::read_rgb(&prior_path(root, "normal", id, "pfm"))?;
    check_dims(id, "prior normal map", mono_normal.width(), mono_normal.height(), &camera)?;
    orient_normals(id, &camera, &mut mono_normal)?;

    let edges_path = prior_path(root, "edges", id, "png");
    let edge_map = if edges_path.exists() {
        let m = png::read_mask(&edges_path)?;
        check_dims(id, "edge map", m.width(), m.height(), &camera)?;
        m
    } else {
        roberts_edges(&camera.image, 0.005)
    };

    let highlight_path = prior_path(root, "highlight", id, "png");
    let highlight_mask = if highlight_path.exists() {
        let m = png::read_mask(&highlight_path)?;
        check_dims(id, "highlight mask", m.width(), m.height(), &camera)?;
        m
    } else {
        Grid::new(camera.width, camera.height, false)
    };

    Ok(SceneView {
        camera,
        priors: PriorBundle {
            mono_depth,
            mono_normal,
            edge_map,
            highlight_mask,
        },
    })
}

fn check_dims(id: u32, what: &str, w: usize, h: usize, camera: &CameraView) -> Result<()> {
    if w != camera.width || h != camera.height {
        return Err(MvsError::Validation {
            view: id,
            message: format!(
                "{what} is {w}x{h} but the image is {}x{}",
                camera.width, camera.height
            ),
        });
    }
    Ok(())
}

/// Normalize and orient prior normals toward the camera: any normal with a
/// positive dot against the viewing ray is flipped on load.
fn orient_normals(id: u32, camera: &CameraView, normals: &mut Grid<[f32; 3]>) -> Result<()> {
    let width = normals.width();
    for i in 0..normals.len() {
        let (x, y) = (i % width, i / width);
        let n = normals.data()[i];
        let v = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
        let norm = v.norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(MvsError::Validation {
                view: id,
                message: format!("prior normal at ({x},{y}) has norm {norm:.4}, expected 1"),
            });
        }
        let mut v = v / norm;
        let ray = camera.ray(x as f64, y as f64);
        if v.dot(&ray) > 0.0 {
            v = -v;
        }
        normals.data_mut()[i] = [v.x as f32, v.y as f32, v.z as f32];
    }
    Ok(())
}

/// Write one view's solver output: float maps as PFM, reliability as PNG.
pub fn save_depth_normal(result: &DepthNormalResult, dir: &Path, view_id: u32) -> Result<()> {
    result.validate()?;
    for v in result.depth.iter().chain(result.cost.iter()) {
        if !v.is_finite() {
            return Err(MvsError::Invalid(
                "refusing to save map with non-finite values".into(),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
    pfm::write_gray(&dir.join(format!("depth_{view_id}.pfm")), &result.depth)?;
    pfm::write_rgb(&dir.join(format!("normal_{view_id}.pfm")), &result.normal)?;
    pfm::write_gray(&dir.join(format!("cost_{view_id}.pfm")), &result.cost)?;
    png::write_mask(
        &dir.join(format!("reliable_{view_id}.png")),
        &result.reliable,
    )?;
    Ok(())
}

/// Load one view's solver output written by [`save_depth_normal`].
pub fn load_depth_normal(dir: &Path, view_id: u32) -> Result<DepthNormalResult> {
    Ok(DepthNormalResult {
        depth: pfm::read_gray(&dir.join(format!("depth_{view_id}.pfm")))?,
        normal: pfm::read_rgb(&dir.join(format!("normal_{view_id}.pfm")))?,
        cost: pfm::read_gray(&dir.join(format!("cost_{view_id}.pfm")))?,
        reliable: png::read_mask(&dir.join(format!("reliable_{view_id}.png")))?,
    })
}

/// Write a point cloud as PLY.
pub fn save_point_cloud(points: &[ply::PlyPoint], path: &Path, format: ply::PlyFormat) -> Result<()> {
    ply::write(path, points, format)
}

/// Write a scene directory from in-memory views (used by the synthesizer).
pub fn save_scene(root: &Path, views: &[SceneView]) -> Result<()> {
    fs::create_dir_all(root.join("images")).map_err(|e| MvsError::io(root, e))?;
    fs::create_dir_all(root.join("priors")).map_err(|e| MvsError::io(root, e))?;
    let mut manifest = String::new();
    for view in views {
        let cam = &view.camera;
        let id = cam.id;
        let rel_image = format!("images/view_{id}.png");
        png::write_intensity(&root.join(&rel_image), &cam.image)?;
        if let Some(corrected) = &cam.corrected_image {
            png::write_intensity(&prior_path(root, "corrected", id, "png"), corrected)?;
        }
        pfm::write_gray(&prior_path(root, "depth", id, "pfm"), &view.priors.mono_depth)?;
        pfm::write_rgb(&prior_path(root, "normal", id, "pfm"), &view.priors.mono_normal)?;
        png::write_mask(&prior_path(root, "edges", id, "png"), &view.priors.edge_map)?;
        if view.priors.highlight_mask.iter().any(|m| *m) {
            png::write_mask(
                &prior_path(root, "highlight", id, "png"),
                &view.priors.highlight_mask,
            )?;
        }
        let _ = writeln!(
            manifest,
            "{id} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {rel_image}",
            cam.k[(0, 0)],
            cam.k[(1, 1)],
            cam.k[(0, 2)],
            cam.k[(1, 2)],
            cam.r[(0, 0)],
            cam.r[(0, 1)],
            cam.r[(0, 2)],
            cam.r[(1, 0)],
            cam.r[(1, 1)],
            cam.r[(1, 2)],
            cam.r[(2, 0)],
            cam.r[(2, 1)],
            cam.r[(2, 2)],
            cam.t.x,
            cam.t.y,
            cam.t.z,
            cam.width,
            cam.height
        );
    }
    fs::write(root.join("cameras.txt"), manifest)
        .map_err(|e| MvsError::io(root.join("cameras.txt"), e))?;
    Ok(())
}

/// Ground truth emitted alongside synthetic scenes, for tests and evaluation.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub depth: Grid<f32>,
    pub normal: Grid<[f32; 3]>,
    /// Per source view id: visibility mask of this view's pixels.
    pub visibility: Vec<(u32, Grid<bool>)>,
}

pub fn save_ground_truth(root: &Path, view_id: u32, gt: &GroundTruth) -> Result<()> {
    let dir = root.join("gt");
    fs::create_dir_all(&dir).map_err(|e| MvsError::io(&dir, e))?;
    pfm::write_gray(&dir.join(format!("depth_{view_id}.pfm")), &gt.depth)?;
    pfm::write_rgb(&dir.join(format!("normal_{view_id}.pfm")), &gt.normal)?;
    for (j, mask) in &gt.visibility {
        png::write_mask(&dir.join(format!("vis_{view_id}_{j}.png")), mask)?;
    }
    Ok(())
}

pub fn load_ground_truth(root: &Path, view_id: u32, source_ids: &[u32]) -> Result<GroundTruth> {
    let dir = root.join("gt");
    let depth = pfm::read_gray(&dir.join(format!("depth_{view_id}.pfm")))?;
    let normal = pfm::read_rgb(&dir.join(format!("normal_{view_id}.pfm")))?;
    let mut visibility = Vec::new();
    for &j in source_ids {
        if j == view_id {
            continue;
        }
        let path = dir.join(format!("vis_{view_id}_{j}.png"));
        if path.exists() {
            visibility.push((j, png::read_mask(&path)?));
        }
    }
    Ok(GroundTruth {
        depth,
        normal,
        visibility,
    })
}
