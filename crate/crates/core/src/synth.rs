//! Synthetic multi-view scenes with exact ground truth.
//!
//! Scenes are textured rectangles ray-cast into pinhole cameras. Ground
//! truth depth, normals, per-pair visibility and a reference cloud come from
//! the same analytic geometry, and the monocular priors are the ground truth
//! plus configurable noise. Renders are deterministic under a fixed seed.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{intrinsics, CameraView};
use crate::error::Result;
use crate::grid::Grid;
use crate::io::ply::PlyPoint;
use crate::scene::{GroundTruth, PriorBundle, SceneView};

/// Surface texture of one rectangle.
#[derive(Debug, Clone)]
pub enum Texture {
    Constant(f32),
    Checker {
        period: f64,
        albedo_a: f32,
        albedo_b: f32,
    },
    Noise {
        base: f32,
        amplitude: f32,
        scale: f64,
        seed: u64,
    },
    /// Noise everywhere except a constant-albedo rectangular hole (in local
    /// uv units): a genuinely textureless patch on a textured surface.
    NoiseWithHole {
        base: f32,
        amplitude: f32,
        scale: f64,
        seed: u64,
        hole_center: (f64, f64),
        hole_half: (f64, f64),
        hole_albedo: f32,
    },
}

/// A textured rectangle: center, half-extent vectors; the normal is `u × v`.
#[derive(Debug, Clone)]
pub struct PlaneSpec {
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub texture: Texture,
}

impl PlaneSpec {
    fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v).normalize()
    }

    /// Ray-rectangle intersection returning the ray depth and local (u, v).
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let point = origin + dir * t;
        let rel = point - self.origin;
        let uu = rel.dot(&self.u) / self.u.norm_squared();
        let vv = rel.dot(&self.v) / self.v.norm_squared();
        if uu.abs() <= 1.0 && vv.abs() <= 1.0 {
            Some((t, uu * self.u.norm(), vv * self.v.norm()))
        } else {
            None
        }
    }

    fn albedo(&self, u: f64, v: f64) -> f32 {
        match &self.texture {
            Texture::Constant(a) => *a,
            Texture::Checker {
                period,
                albedo_a,
                albedo_b,
            } => {
                let parity =
                    ((u / period).floor() as i64 + (v / period).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *albedo_a
                } else {
                    *albedo_b
                }
            }
            Texture::Noise {
                base,
                amplitude,
                scale,
                seed,
            } => base + amplitude * (value_noise(u / scale, v / scale, *seed) - 0.5),
            Texture::NoiseWithHole {
                base,
                amplitude,
                scale,
                seed,
                hole_center,
                hole_half,
                hole_albedo,
            } => {
                if (u - hole_center.0).abs() <= hole_half.0
                    && (v - hole_center.1).abs() <= hole_half.1
                {
                    *hole_albedo
                } else {
                    base + amplitude * (value_noise(u / scale, v / scale, *seed) - 0.5)
                }
            }
        }
    }
}

fn hash01(i: i64, j: i64, seed: u64) -> f64 {
    let mut h = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h % (1 << 24)) as f64 / (1 << 24) as f64
}

/// Smooth value noise: bilinear interpolation of hashed lattice values.
/// Attached to surface coordinates, so every view sees the same pattern.
fn value_noise(u: f64, v: f64, seed: u64) -> f32 {
    let (iu, iv) = (u.floor(), v.floor());
    let (fu, fv) = (u - iu, v - iv);
    let (i, j) = (iu as i64, iv as i64);
    let top = hash01(i, j, seed) * (1.0 - fu) + hash01(i + 1, j, seed) * fu;
    let bot = hash01(i, j + 1, seed) * (1.0 - fu) + hash01(i + 1, j + 1, seed) * fu;
    (top * (1.0 - fv) + bot * fv) as f32
}

/// Camera placement for one rendered view.
#[derive(Debug, Clone)]
pub struct CameraPose {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl CameraPose {
    /// Camera at `center` with identity rotation (looking along +z).
    pub fn translated(fx: f64, resolution: (usize, usize), center: Vector3<f64>) -> Self {
        CameraPose {
            k: intrinsics(
                fx,
                fx,
                resolution.0 as f64 / 2.0,
                resolution.1 as f64 / 2.0,
            ),
            r: Matrix3::identity(),
            t: -center,
        }
    }
}

/// A saturated specular blob: a world point that renders as an intensity-1
/// disk of `radius_px` in the listed views.
#[derive(Debug, Clone)]
pub struct SpecularDisk {
    pub center: Vector3<f64>,
    pub radius_px: f64,
    pub views: Vec<u32>,
}

/// Deliberate defects applied to one view's ground-truth edge map, to
/// exercise the erosion (gaps) and dilation (spurious splits) paths.
#[derive(Debug, Clone)]
pub enum EdgeDefect {
    /// Clear all edge pixels inside the rectangle (inclusive bounds).
    RemoveRect {
        view: u32,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    /// Draw a one-pixel edge segment.
    AddSegment {
        view: u32,
        from: (f64, f64),
        to: (f64, f64),
    },
}

/// Full description of a synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub name: String,
    pub planes: Vec<PlaneSpec>,
    pub cameras: Vec<CameraPose>,
    pub resolution: (usize, usize),
    pub specular_disks: Vec<SpecularDisk>,
    pub edge_defects: Vec<EdgeDefect>,
    /// Relative depth noise sigma applied to the monocular depth prior.
    pub prior_depth_sigma_rel: f64,
    /// Normal noise sigma in degrees applied to the monocular normal prior.
    pub prior_normal_sigma_deg: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Scale resolution and intrinsics by `factor` (e.g. 0.5 for half size).
    /// Texture scales grow by `1/factor` so the pattern keeps the same pixel
    /// footprint at the new resolution.
    pub fn scaled(mut self, factor: f64) -> Self {
        assert!(factor > 0.0);
        let scale_dim = |d: usize| ((d as f64 * factor).round() as usize).max(32);
        let (w0, h0) = self.resolution;
        self.resolution = (scale_dim(w0), scale_dim(h0));
        let (sx, sy) = (
            self.resolution.0 as f64 / w0 as f64,
            self.resolution.1 as f64 / h0 as f64,
        );
        for cam in &mut self.cameras {
            cam.k[(0, 0)] *= sx;
            cam.k[(1, 1)] *= sy;
            cam.k[(0, 2)] = (cam.k[(0, 2)] + 0.5) * sx - 0.5;
            cam.k[(1, 2)] = (cam.k[(1, 2)] + 0.5) * sy - 0.5;
        }
        for plane in &mut self.planes {
            match &mut plane.texture {
                Texture::Constant(_) => {}
                Texture::Checker { period, .. } => *period /= sx,
                Texture::Noise { scale, .. } => *scale /= sx,
                Texture::NoiseWithHole { scale, .. } => *scale /= sx,
            }
        }
        for disk in &mut self.specular_disks {
            disk.radius_px *= sx;
        }
        for defect in &mut self.edge_defects {
            match defect {
                EdgeDefect::RemoveRect { x0, y0, x1, y1, .. } => {
                    *x0 = (*x0 as f64 * sx).round() as usize;
                    *x1 = (*x1 as f64 * sx).round() as usize;
                    *y0 = (*y0 as f64 * sy).round() as usize;
                    *y1 = (*y1 as f64 * sy).round() as usize;
                }
                EdgeDefect::AddSegment { from, to, .. } => {
                    from.0 *= sx;
                    from.1 *= sy;
                    to.0 *= sx;
                    to.1 *= sy;
                }
            }
        }
        self
    }
}

/// One rendered view with its ground truth and the per-pixel plane index
/// (`u32::MAX` where no plane is hit).
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub view: SceneView,
    pub gt: GroundTruth,
    pub plane_ids: Grid<u32>,
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub views: Vec<RenderedView>,
    pub gt_cloud: Vec<Vector3<f64>>,
}

impl RenderedScene {
    pub fn scene_views(&self) -> Vec<SceneView> {
        self.views.iter().map(|v| v.view.clone()).collect()
    }

    /// Diameter of the ground-truth cloud bounding box.
    pub fn diameter(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.gt_cloud {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }
}

fn nearest_hit(
    planes: &[PlaneSpec],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(usize, f64, f64, f64)> {
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (idx, plane) in planes.iter().enumerate() {
        if let Some((t, u, v)) = plane.intersect(origin, dir) {
            if best.map_or(true, |(_, bt, _, _)| t < bt) {
                best = Some((idx, t, u, v));
            }
        }
    }
    best
}

/// A world point is visible from a camera when nothing intersects the
/// segment strictly in front of it.
fn occluded(planes: &[PlaneSpec], center: &Vector3<f64>, point: &Vector3<f64>) -> bool {
    let dir = point - center;
    let dist = dir.norm();
    if let Some((_, t, _, _)) = nearest_hit(planes, center, &dir.normalize()) {
        t < dist * (1.0 - 1e-6)
    } else {
        // The point itself should be hit; numerical misses count as occluded.
        true
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Ray-cast the scene into every camera.
pub fn render(spec: &SceneSpec) -> Result<RenderedScene> {
    let (w, h) = spec.resolution;
    let n_views = spec.cameras.len();

    struct Raw {
        camera: CameraView,
        depth: Grid<f32>,
        normal_cam: Grid<[f32; 3]>,
        plane_ids: Grid<u32>,
        clean_image: Grid<f32>,
    }

    let mut raws: Vec<Raw> = Vec::with_capacity(n_views);
    for (vid, pose) in spec.cameras.iter().enumerate() {
        let mut camera = CameraView::new(
            vid as u32,
            pose.k,
            pose.r,
            pose.t,
            Grid::new(w, h, 0.0),
        )?;
        let center = camera.center();
        let mut image = Grid::new(w, h, 0.0f32);
        let mut depth = Grid::new(w, h, 0.0f32);
        let mut normal_cam = Grid::new(w, h, [0.0f32, 0.0, -1.0]);
        let mut plane_ids = Grid::new(w, h, u32::MAX);
        for y in 0..h {
            for x in 0..w {
                let ray_cam = camera.ray(x as f64, y as f64);
                let dir_world = camera.r.transpose() * ray_cam;
                if let Some((idx, t, u, v)) = nearest_hit(&spec.planes, &center, &dir_world) {
                    // t parameterizes the unnormalized ray, so it equals the
                    // camera-frame z depth.
                    depth.set(x, y, t as f32);
                    plane_ids.set(x, y, idx as u32);
                    image.set(x, y, spec.planes[idx].albedo(u, v).clamp(0.0, 1.0));
                    let n_world = spec.planes[idx].normal();
                    let mut n_cam = camera.r * n_world;
                    if n_cam.dot(&ray_cam) > 0.0 {
                        n_cam = -n_cam;
                    }
                    normal_cam.set(x, y, [n_cam.x as f32, n_cam.y as f32, n_cam.z as f32]);
                }
            }
        }
        camera.image = image.clone();
        raws.push(Raw {
            camera,
            depth,
            normal_cam,
            plane_ids,
            clean_image: image,
        });
    }

    // Specular overwrites: saturate a disk around the projected center and
    // keep the clean render as the corrected image.
    for disk in &spec.specular_disks {
        for &vid in &disk.views {
            let raw = &mut raws[vid as usize];
            let (c_px, depth_c) = crate::geometry::project(&disk.center, &raw.camera);
            if depth_c <= 0.0 {
                continue;
            }
            if raw.camera.corrected_image.is_none() {
                raw.camera.corrected_image = Some(raw.clean_image.clone());
            }
            let mut img = raw.camera.image.clone();
            for y in 0..h {
                for x in 0..w {
                    if (Vector2::new(x as f64, y as f64) - c_px).norm() <= disk.radius_px {
                        img.set(x, y, 1.0);
                    }
                }
            }
            raw.camera.image = img;
        }
    }

    // Ground-truth edge maps: plane-identity discontinuities, then defects.
    let mut edge_maps: Vec<Grid<bool>> = raws
        .iter()
        .map(|raw| {
            Grid::from_fn(w, h, |x, y| {
                let id = *raw.plane_ids.get(x, y);
                let right = if x + 1 < w {
                    *raw.plane_ids.get(x + 1, y)
                } else {
                    id
                };
                let down = if y + 1 < h {
                    *raw.plane_ids.get(x, y + 1)
                } else {
                    id
                };
                id != right || id != down
            })
        })
        .collect();
    for defect in &spec.edge_defects {
        match defect {
            EdgeDefect::RemoveRect { view, x0, y0, x1, y1 } => {
                let map = &mut edge_maps[*view as usize];
                for y in *y0..=(*y1).min(h - 1) {
                    for x in *x0..=(*x1).min(w - 1) {
                        map.set(x, y, false);
                    }
                }
            }
            EdgeDefect::AddSegment { view, from, to } => {
                let map = &mut edge_maps[*view as usize];
                let steps = (from.0 - to.0).abs().max((from.1 - to.1).abs()).ceil() as usize + 1;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let x = (from.0 + (to.0 - from.0) * t).round() as i64;
                    let y = (from.1 + (to.1 - from.1) * t).round() as i64;
                    if map.contains(x, y) {
                        map.set(x as usize, y as usize, true);
                    }
                }
            }
        }
    }

    // Cross-view ground-truth visibility.
    let centers: Vec<Vector3<f64>> = raws.iter().map(|r| r.camera.center()).collect();
    let mut visibilities: Vec<Vec<(u32, Grid<bool>)>> = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let mut per_source = Vec::new();
        for (j, raw_j) in raws.iter().enumerate() {
            if j == i {
                continue;
            }
            let raw_i = &raws[i];
            let mask = Grid::from_fn(w, h, |x, y| {
                let d = *raw_i.depth.get(x, y);
                if d <= 0.0 {
                    return false;
                }
                let world = crate::geometry::back_project(
                    Vector2::new(x as f64, y as f64),
                    d as f64,
                    &raw_i.camera,
                );
                let (q, dj) = crate::geometry::project(&world, &raw_j.camera);
                dj > 0.0 && raw_j.camera.in_bounds(q.x, q.y) && !occluded(&spec.planes, &centers[j], &world)
            });
            per_source.push((j as u32, mask));
        }
        visibilities.push(per_source);
    }

    // Priors: ground truth plus configured noise, plus the specular masks.
    let mut views = Vec::with_capacity(n_views);
    for (vid, raw) in raws.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(vid as u64),
        );
        let mono_depth = raw.depth.map(|d| {
            if *d <= 0.0 {
                0.0
            } else {
                let noisy = *d as f64 * (1.0 + spec.prior_depth_sigma_rel * gaussian(&mut rng));
                noisy.max(1e-6) as f32
            }
        });
        let sigma_rad = spec.prior_normal_sigma_deg.to_radians();
        let mut mono_normal = Grid::new(w, h, [0.0f32, 0.0, -1.0]);
        for y in 0..h {
            for x in 0..w {
                let n = raw.normal_cam.get(x, y);
                let mut v = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
                if sigma_rad > 0.0 {
                    let jitter = Vector3::new(
                        gaussian(&mut rng),
                        gaussian(&mut rng),
                        gaussian(&mut rng),
                    ) * sigma_rad;
                    v = (v + jitter).normalize();
                }
                let ray = raw.camera.ray(x as f64, y as f64);
                if v.dot(&ray) > 0.0 {
                    v = -v;
                }
                mono_normal.set(x, y, [v.x as f32, v.y as f32, v.z as f32]);
            }
        }
        let mut highlight_mask = Grid::new(w, h, false);
        for disk in &spec.specular_disks {
            if !disk.views.contains(&(vid as u32)) {
                continue;
            }
            let (c_px, depth_c) = crate::geometry::project(&disk.center, &raw.camera);
            if depth_c <= 0.0 {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    if (Vector2::new(x as f64, y as f64) - c_px).norm() <= disk.radius_px {
                        highlight_mask.set(x, y, true);
                    }
                }
            }
        }
        views.push(RenderedView {
            view: SceneView {
                camera: raw.camera,
                priors: PriorBundle {
                    mono_depth,
                    mono_normal,
                    edge_map: edge_maps[vid].clone(),
                    highlight_mask,
                },
            },
            gt: GroundTruth {
                depth: raw.depth,
                normal: raw.normal_cam,
                visibility: visibilities[vid].clone(),
            },
            plane_ids: raw.plane_ids,
        });
    }

    // Ground-truth cloud: back-projected GT depths, strided.
    let mut gt_cloud = Vec::new();
    for rv in &views {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let d = *rv.gt.depth.get(x, y);
                if d > 0.0 {
                    gt_cloud.push(crate::geometry::back_project(
                        Vector2::new(x as f64, y as f64),
                        d as f64,
                        &rv.view.camera,
                    ));
                }
            }
        }
    }

    Ok(RenderedScene { views, gt_cloud })
}

/// Render and write the scene-io directory layout plus ground truth.
pub fn render_to_dir(spec: &SceneSpec, out: &std::path::Path) -> Result<RenderedScene> {
    let rendered = render(spec)?;
    let scene_views = rendered.scene_views();
    crate::scene::save_scene(out, &scene_views)?;
    for rv in &rendered.views {
        crate::scene::save_ground_truth(out, rv.view.camera.id, &rv.gt)?;
    }
    let gt_points: Vec<PlyPoint> = rendered
        .gt_cloud
        .iter()
        .map(|p| PlyPoint {
            position: *p,
            normal: Vector3::new(0.0, 0.0, -1.0),
            color: [200, 200, 200],
        })
        .collect();
    crate::io::ply::write(
        &out.join("gt").join("cloud.ply"),
        &gt_points,
        crate::io::ply::PlyFormat::BinaryLittleEndian,
    )?;
    Ok(rendered)
}

fn arc_cameras(n: usize, fx: f64, resolution: (usize, usize), spread: f64) -> Vec<CameraPose> {
    (0..n)
        .map(|i| {
            let s = if n == 1 {
                0.0
            } else {
                (i as f64 / (n - 1) as f64 - 0.5) * 2.0
            };
            CameraPose::translated(fx, resolution, Vector3::new(s * spread, 0.02 * i as f64, 0.0))
        })
        .collect()
}

fn backdrop(z: f64, half: f64, seed: u64, scale: f64) -> PlaneSpec {
    PlaneSpec {
        origin: Vector3::new(0.0, 0.0, z),
        u: Vector3::new(half, 0.0, 0.0),
        v: Vector3::new(0.0, half, 0.0),
        texture: Texture::Noise {
            base: 0.5,
            amplitude: 0.3,
            scale,
            seed,
        },
    }
}

/// Named fixture scenes used by the acceptance suite.
pub fn fixture(name: &str) -> Option<SceneSpec> {
    let spec = match name {
        // Three textured planes, five views.
        "planar3" => SceneSpec {
            name: name.into(),
            planes: vec![
                // Left plane, fronto-parallel.
                PlaneSpec {
                    origin: Vector3::new(-1.3, 0.0, 3.0),
                    u: Vector3::new(1.15, 0.0, 0.0),
                    v: Vector3::new(0.0, 2.2, 0.0),
                    texture: Texture::Noise {
                        base: 0.5,
                        amplitude: 0.3,
                        scale: 0.05,
                        seed: 11,
                    },
                },
                // Right plane, slanted in depth.
                PlaneSpec {
                    origin: Vector3::new(1.25, 0.0, 3.4),
                    u: Vector3::new(1.1, 0.0, 0.55),
                    v: Vector3::new(0.0, 2.2, 0.0),
                    texture: Texture::Checker {
                        period: 0.095,
                        albedo_a: 0.25,
                        albedo_b: 0.75,
                    },
                },
                backdrop(4.5, 6.0, 13, 0.08),
            ],
            cameras: arc_cameras(5, 525.0, (640, 480), 0.5),
            resolution: (640, 480),
            specular_disks: vec![],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.02,
            prior_normal_sigma_deg: 3.0,
            seed: 101,
        },
        // A textureless patch on a textured wall.
        "textureless_wall" => SceneSpec {
            name: name.into(),
            planes: vec![
                PlaneSpec {
                    origin: Vector3::new(0.0, 0.0, 3.2),
                    u: Vector3::new(2.6, 0.0, 0.0),
                    v: Vector3::new(0.0, 2.0, 0.0),
                    texture: Texture::NoiseWithHole {
                        base: 0.5,
                        amplitude: 0.3,
                        scale: 0.05,
                        seed: 17,
                        hole_center: (0.0, 0.0),
                        hole_half: (0.64, 0.48),
                        hole_albedo: 0.55,
                    },
                },
                backdrop(4.6, 6.0, 19, 0.08),
            ],
            cameras: arc_cameras(5, 400.0, (480, 360), 0.5),
            resolution: (480, 360),
            specular_disks: vec![],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.02,
            prior_normal_sigma_deg: 3.0,
            seed: 103,
        },
        // A floating occluder in front of a textured backdrop.
        "occluder" => SceneSpec {
            name: name.into(),
            planes: vec![
                PlaneSpec {
                    origin: Vector3::new(0.25, 0.0, 2.1),
                    u: Vector3::new(0.45, 0.0, 0.0),
                    v: Vector3::new(0.0, 0.65, 0.0),
                    texture: Texture::Noise {
                        base: 0.45,
                        amplitude: 0.3,
                        scale: 0.03,
                        seed: 23,
                    },
                },
                backdrop(4.0, 6.0, 29, 0.07),
            ],
            cameras: arc_cameras(4, 400.0, (480, 360), 1.1),
            resolution: (480, 360),
            specular_disks: vec![],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.02,
            prior_normal_sigma_deg: 3.0,
            seed: 107,
        },
        // A saturated disk on a textured wall, visible in two views.
        "specular_disk" => SceneSpec {
            name: name.into(),
            planes: vec![
                PlaneSpec {
                    origin: Vector3::new(0.0, 0.0, 3.2),
                    u: Vector3::new(2.6, 0.0, 0.0),
                    v: Vector3::new(0.0, 2.0, 0.0),
                    texture: Texture::Noise {
                        base: 0.5,
                        amplitude: 0.3,
                        scale: 0.05,
                        seed: 31,
                    },
                },
                backdrop(4.6, 6.0, 37, 0.08),
            ],
            cameras: arc_cameras(4, 400.0, (480, 360), 0.5),
            resolution: (480, 360),
            specular_disks: vec![SpecularDisk {
                center: Vector3::new(0.0, 0.0, 3.2),
                radius_px: 36.0,
                views: vec![0, 1],
            }],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.02,
            prior_normal_sigma_deg: 3.0,
            seed: 109,
        },
        // A distant plane: fixed relative perturbations barely move the
        // epipolar footprint, while large initialization errors span many
        // pixels of disparity.
        "far_depth" => SceneSpec {
            name: name.into(),
            planes: vec![PlaneSpec {
                origin: Vector3::new(0.0, 0.0, 60.0),
                u: Vector3::new(60.0, 0.0, 0.0),
                v: Vector3::new(0.0, 40.0, 0.0),
                texture: Texture::Noise {
                    base: 0.5,
                    amplitude: 0.3,
                    scale: 0.9,
                    seed: 41,
                },
            }],
            cameras: arc_cameras(3, 300.0, (320, 240), 8.0),
            resolution: (320, 240),
            specular_disks: vec![],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.02,
            prior_normal_sigma_deg: 3.0,
            seed: 113,
        },
        // Two planes meeting in a 90° crease, with edge defects: a gap in
        // the crease edge (erosion must split) and a spurious full-height
        // texture edge (dilation must merge).
        "crease" => {
            let fx = 525.0;
            let crease_world_x = 0.55;
            SceneSpec {
                name: name.into(),
                planes: vec![
                    // Frontal plane left of the crease.
                    PlaneSpec {
                        origin: Vector3::new(crease_world_x - 3.0, 0.0, 3.0),
                        u: Vector3::new(3.0, 0.0, 0.0),
                        v: Vector3::new(0.0, 3.0, 0.0),
                        texture: Texture::Noise {
                            base: 0.5,
                            amplitude: 0.3,
                            scale: 0.05,
                            seed: 43,
                        },
                    },
                    // Side wall receding from the crease.
                    PlaneSpec {
                        origin: Vector3::new(crease_world_x, 0.0, 4.5),
                        u: Vector3::new(0.0, 0.0, 1.5),
                        v: Vector3::new(0.0, 3.0, 0.0),
                        texture: Texture::Noise {
                            base: 0.5,
                            amplitude: 0.3,
                            scale: 0.05,
                            seed: 47,
                        },
                    },
                ],
                cameras: arc_cameras(4, fx, (640, 480), 0.4),
                resolution: (640, 480),
                specular_disks: vec![],
                edge_defects: vec![
                    // Gap in the crease edge of view 0. The crease projects
                    // to x = cx + fx·(crease_x − cam_x)/3 ≈ 416 for view 0.
                    EdgeDefect::RemoveRect {
                        view: 0,
                        x0: 404,
                        y0: 237,
                        x1: 428,
                        y1: 243,
                    },
                    // Spurious full-height texture edge on the left plane.
                    EdgeDefect::AddSegment {
                        view: 0,
                        from: (160.0, 0.0),
                        to: (160.0, 479.0),
                    },
                ],
                prior_depth_sigma_rel: 0.01,
                prior_normal_sigma_deg: 2.0,
                seed: 127,
            }
        }
        _ => return None,
    };
    Some(spec)
}

/// All named fixtures.
pub fn standard_fixtures() -> Vec<SceneSpec> {
    ["planar3", "textureless_wall", "occluder", "specular_disk", "far_depth", "crease"]
        .iter()
        .map(|n| fixture(n).unwrap())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_plane_spec() -> SceneSpec {
        SceneSpec {
            name: "test".into(),
            planes: vec![PlaneSpec {
                origin: Vector3::new(0.0, 0.0, 2.0),
                u: Vector3::new(4.0, 0.0, 0.0),
                v: Vector3::new(0.0, 4.0, 0.0),
                texture: Texture::Constant(0.6),
            }],
            cameras: vec![CameraPose::translated(100.0, (64, 64), Vector3::zeros())],
            resolution: (64, 64),
            specular_disks: vec![],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.0,
            prior_normal_sigma_deg: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let rendered = render(&single_plane_spec()).unwrap();
        let gt = &rendered.views[0].gt.depth;
        for d in gt.iter() {
            assert!((d - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn crease_edge_map_matches_analytic_projection() {
        // Two planes meeting at world x = 0: frontal z=2 for x<0, wall
        // receding for x>0. The crease projects to the pixel column of x=0.
        let spec = SceneSpec {
            name: "crease-test".into(),
            planes: vec![
                PlaneSpec {
                    origin: Vector3::new(-3.0, 0.0, 2.0),
                    u: Vector3::new(3.0, 0.0, 0.0),
                    v: Vector3::new(0.0, 3.0, 0.0),
                    texture: Texture::Constant(0.5),
                },
                PlaneSpec {
                    origin: Vector3::new(0.0, 0.0, 3.5),
                    u: Vector3::new(0.0, 0.0, 1.5),
                    v: Vector3::new(0.0, 3.0, 0.0),
                    texture: Texture::Constant(0.7),
                },
            ],
            cameras: vec![CameraPose::translated(100.0, (64, 64), Vector3::zeros())],
            resolution: (64, 64),
            specular_disks: vec![],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.0,
            prior_normal_sigma_deg: 0.0,
            seed: 2,
        };
        let rendered = render(&spec).unwrap();
        let edges = &rendered.views[0].view.priors.edge_map;
        // Crease at world x=0, depth 2 → pixel x = cx + 0 = 32; the edge is
        // marked on the pixel left of the transition.
        for y in 4..60 {
            let hits: Vec<usize> = (28..36).filter(|&x| *edges.get(x, y)).collect();
            assert!(
                !hits.is_empty() && hits.iter().all(|&x| (31..=32).contains(&x)),
                "row {y}: {hits:?}"
            );
        }
    }

    #[test]
    fn occluder_visibility_matches_analytic_shadow() {
        let spec = SceneSpec {
            name: "occ-test".into(),
            planes: vec![
                PlaneSpec {
                    origin: Vector3::new(0.0, 0.0, 1.0),
                    u: Vector3::new(0.3, 0.0, 0.0),
                    v: Vector3::new(0.0, 0.3, 0.0),
                    texture: Texture::Constant(0.3),
                },
                PlaneSpec {
                    origin: Vector3::new(0.0, 0.0, 2.0),
                    u: Vector3::new(6.0, 0.0, 0.0),
                    v: Vector3::new(0.0, 6.0, 0.0),
                    texture: Texture::Constant(0.6),
                },
            ],
            cameras: vec![
                CameraPose::translated(100.0, (64, 64), Vector3::zeros()),
                CameraPose::translated(100.0, (64, 64), Vector3::new(0.5, 0.0, 0.0)),
            ],
            resolution: (64, 64),
            specular_disks: vec![],
            edge_defects: vec![],
            prior_depth_sigma_rel: 0.0,
            prior_normal_sigma_deg: 0.0,
            seed: 3,
        };
        let rendered = render(&spec).unwrap();
        let rv = &rendered.views[0];
        let (_, vis) = &rv.gt.visibility[0];
        for y in 0..64usize {
            for x in 0..64usize {
                if *rv.plane_ids.get(x, y) != 1 {
                    continue;
                }
                // Analytic shadow: the background point at z=2 is hidden from
                // camera 1 iff the segment crosses the occluder square at z=1.
                let world = crate::geometry::back_project(
                    Vector2::new(x as f64, y as f64),
                    *rv.gt.depth.get(x, y) as f64,
                    &rv.view.camera,
                );
                let c1 = Vector3::new(0.5, 0.0, 0.0);
                let dir = world - c1;
                let t = (1.0 - c1.z) / dir.z;
                let hit = c1 + dir * t;
                let expected_occluded = hit.x.abs() <= 0.3 && hit.y.abs() <= 0.3;
                let (q, dj) = crate::geometry::project(&world, &rendered.views[1].view.camera);
                let expected = dj > 0.0
                    && rendered.views[1].view.camera.in_bounds(q.x, q.y)
                    && !expected_occluded;
                assert_eq!(*vis.get(x, y), expected, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = fixture("occluder").unwrap().scaled(0.25);
        let a = render(&spec).unwrap();
        let b = render(&spec).unwrap();
        assert_eq!(
            a.views[0].view.priors.mono_depth.data(),
            b.views[0].view.priors.mono_depth.data()
        );
        assert_eq!(a.views[0].view.camera.image.data(), b.views[0].view.camera.image.data());
    }

    #[test]
    fn every_fixture_renders() {
        for spec in standard_fixtures() {
            let small = spec.scaled(0.15);
            let rendered = render(&small).unwrap();
            assert_eq!(rendered.views.len(), small.cameras.len());
            // Every camera sees at least one plane.
            for rv in &rendered.views {
                assert!(rv.gt.depth.iter().any(|d| *d > 0.0));
            }
        }
    }
}
