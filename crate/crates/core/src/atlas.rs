//! Region atlas aligned from monocular depth, monocular normals and edges.
//!
//! Edge pixels split the image into dispersed regions; each large enough
//! region gets a RANSAC plane fit in monocular-depth space. Regions spanning
//! depth creases are split by intra-regional erosion, coplanar regions
//! separated by texture edges are merged by inter-regional dilation, and
//! remaining boundary pixels are filtered onto adjacent planes. The result
//! constrains patch deformation to homogeneous areas.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraView;
use crate::config::Params;
use crate::error::{MvsError, Result};
use crate::grid::Grid;
use crate::scene::PriorBundle;

/// A plane fitted to back-projected monocular-depth points, `n·X + d = 0`
/// with unit `n` and `d ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub n: Vector3<f64>,
    pub d: f64,
    pub inlier_ratio: f64,
}

/// Per-label region record.
#[derive(Debug, Clone)]
pub struct RegionRecord {
    pub pixels: Vec<(u32, u32)>,
    /// `None` for regions below the planarization size threshold.
    pub plane: Option<PlaneFit>,
}

impl RegionRecord {
    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }
}

/// Homogeneous-region labeling with per-region plane fits. Label 0 marks
/// boundary/heterogeneous pixels.
#[derive(Debug, Clone)]
pub struct RegionAtlas {
    pub labels: Grid<u32>,
    pub regions: BTreeMap<u32, RegionRecord>,
    next_label: u32,
}

impl RegionAtlas {
    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        *self.labels.get(x, y)
    }

    pub fn region(&self, label: u32) -> Option<&RegionRecord> {
        self.regions.get(&label)
    }

    fn fresh_label(&mut self) -> u32 {
        self.next_label += 1;
        self.next_label
    }
}

/// Roberts-cross edge detector: 2×2 diagonal differences, thresholded by
/// Otsu on the gradient magnitudes with `eps_grad` as a floor.
pub fn roberts_edges(image: &Grid<f32>, eps_grad: f64) -> Grid<bool> {
    let (w, h) = (image.width(), image.height());
    let mut mag = Grid::new(w, h, 0.0f32);
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let g1 = image.get(x + 1, y + 1) - image.get(x, y);
            let g2 = image.get(x + 1, y) - image.get(x, y + 1);
            mag.set(x, y, (g1 * g1 + g2 * g2).sqrt());
        }
    }
    let threshold = otsu_threshold(mag.data()).max(eps_grad as f32);
    mag.map(|m| *m > threshold)
}

/// Otsu's threshold over a histogram of 256 bins. Returns a magnitude value;
/// samples strictly above it are foreground.
fn otsu_threshold(values: &[f32]) -> f32 {
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return f32::INFINITY;
    }
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = ((v / max) * (BINS as f32 - 1.0)).round() as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w_bg, mut sum_bg) = (0.0f64, 0.0f64);
    let (mut best_var, mut best_bin) = (0.0f64, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w_bg += c as f64;
        if w_bg == 0.0 {
            continue;
        }
        let w_fg = total - w_bg;
        if w_fg == 0.0 {
            break;
        }
        sum_bg += i as f64 * c as f64;
        let mean_bg = sum_bg / w_bg;
        let mean_fg = (sum_all - sum_bg) / w_fg;
        let var = w_bg * w_fg * (mean_bg - mean_fg).powi(2);
        if var > best_var {
            best_var = var;
            best_bin = i;
        }
    }
    (best_bin as f32 / (BINS as f32 - 1.0)) * max
}

/// 4-connected components of non-edge pixels. Edge pixels get label 0,
/// regions are labeled 1.. in scan order.
pub fn label_regions(edges: &Grid<bool>) -> Grid<u32> {
    let (w, h) = (edges.width(), edges.height());
    let mut labels = Grid::new(w, h, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if *edges.get(sx, sy) || *labels.get(sx, sy) != 0 {
                continue;
            }
            next += 1;
            labels.set(sx, sy, next);
            stack.push((sx, sy));
            while let Some((x, y)) = stack.pop() {
                let mut visit = |nx: usize, ny: usize| {
                    if !*edges.get(nx, ny) && *labels.get(nx, ny) == 0 {
                        labels.set(nx, ny, next);
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
        }
    }
    labels
}

fn back_project_mono(
    x: u32,
    y: u32,
    mono_depth: &Grid<f32>,
    camera: &CameraView,
) -> Vector3<f64> {
    camera.ray(x as f64, y as f64) * (*mono_depth.get(x as usize, y as usize) as f64)
}

/// RANSAC plane fit over a region's back-projected monocular-depth points.
///
/// The inlier threshold is `ransac_rel_threshold` times the median region
/// depth; the winning sample is refit by least squares on its inliers.
pub fn ransac_plane(
    pixels: &[(u32, u32)],
    mono_depth: &Grid<f32>,
    camera: &CameraView,
    params: &Params,
    seed: u64,
) -> Result<PlaneFit> {
    if pixels.len() < 3 {
        return Err(MvsError::Invalid(format!(
            "plane fit needs at least 3 pixels, got {}",
            pixels.len()
        )));
    }
    let points: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|&(x, y)| back_project_mono(x, y, mono_depth, camera))
        .collect();
    let mut depths: Vec<f64> = points.iter().map(|p| p.z).collect();
    depths.sort_by(|a, b| a.total_cmp(b));
    let median_depth = depths[depths.len() / 2].max(1e-9);
    let threshold = params.ransac_rel_threshold * median_depth;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..params.ransac_iters {
        let a = points[rng.gen_range(0..points.len())];
        let b = points[rng.gen_range(0..points.len())];
        let c = points[rng.gen_range(0..points.len())];
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        if norm < 1e-12 {
            continue;
        }
        let n = n / norm;
        let d = -n.dot(&a);
        let inliers = points
            .iter()
            .filter(|p| (n.dot(p) + d).abs() <= threshold)
            .count();
        if best.map_or(true, |(bi, _, _)| inliers > bi) {
            best = Some((inliers, n, d));
        }
    }
    let (_, n0, d0) = best.ok_or_else(|| MvsError::Invalid("degenerate region points".into()))?;

    let inlier_points: Vec<&Vector3<f64>> = points
        .iter()
        .filter(|p| (n0.dot(p) + d0).abs() <= threshold)
        .collect();
    let (n, d) = if inlier_points.len() >= 3 {
        least_squares_plane(&inlier_points).unwrap_or((n0, d0))
    } else {
        (n0, d0)
    };
    let inliers = points
        .iter()
        .filter(|p| (n.dot(p) + d).abs() <= threshold)
        .count();
    let (n, d) = canonicalize(n, d);
    Ok(PlaneFit {
        n,
        d,
        inlier_ratio: inliers as f64 / points.len() as f64,
    })
}

fn canonicalize(n: Vector3<f64>, d: f64) -> (Vector3<f64>, f64) {
    if d < 0.0 {
        (-n, -d)
    } else {
        (n, d)
    }
}

fn least_squares_plane(points: &[&Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
    let k = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().fold(Vector3::zeros(), |acc, p| acc + **p) / k;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for p in points {
        let q = **p - centroid;
        cov += q * q.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut min_i = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let n = eig.eigenvectors.column(min_i).into_owned();
    let norm = n.norm();
    if norm < 1e-12 {
        return None;
    }
    let n = n / norm;
    Some((n, -n.dot(&centroid)))
}

/// Plane similarity `Ψ = n_i·n_j − min(1, |d_i − d_j|)`.
pub fn plane_similarity(a: &PlaneFit, b: &PlaneFit) -> f64 {
    a.n.dot(&b.n) - 1.0f64.min((a.d - b.d).abs())
}

/// Boundary normal similarity `Φ`: minimum dot between the pixel's normal
/// and normals probed up to `radius` pixels along the four axis directions.
pub fn normal_similarity(
    x: usize,
    y: usize,
    mono_normal: &Grid<[f32; 3]>,
    radius: usize,
) -> f64 {
    let n = mono_normal.get(x, y);
    let np = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
    let mut min_dot = 1.0f64;
    let dirs = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
    for (dx, dy) in dirs {
        for step in 1..=radius as i64 {
            let qx = x as i64 + dx * step;
            let qy = y as i64 + dy * step;
            if !mono_normal.contains(qx, qy) {
                break;
            }
            let q = mono_normal.get(qx as usize, qy as usize);
            let nq = Vector3::new(q[0] as f64, q[1] as f64, q[2] as f64);
            min_dot = min_dot.min(np.dot(&nq));
        }
    }
    min_dot
}

struct RegionMask {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    fn new(pixels: &[(u32, u32)]) -> Self {
        let x0 = pixels.iter().map(|p| p.0).min().unwrap() as i64;
        let y0 = pixels.iter().map(|p| p.1).min().unwrap() as i64;
        let x1 = pixels.iter().map(|p| p.0).max().unwrap() as i64;
        let y1 = pixels.iter().map(|p| p.1).max().unwrap() as i64;
        let w = (x1 - x0 + 1) as usize;
        let h = (y1 - y0 + 1) as usize;
        let mut cells = vec![false; w * h];
        for &(x, y) in pixels {
            cells[(y as i64 - y0) as usize * w + (x as i64 - x0) as usize] = true;
        }
        RegionMask { x0, y0, w, h, cells }
    }

    /// One erosion step with a 3×3 cross; outside the bounding box counts as
    /// background.
    fn erode_cells(cells: &[bool], w: usize, h: usize) -> Vec<bool> {
        let at = |x: i64, y: i64| -> bool {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                return false;
            }
            cells[y as usize * w + x as usize]
        };
        let mut out = vec![false; cells.len()];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if at(x, y) && at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1) {
                    out[y as usize * w + x as usize] = true;
                }
            }
        }
        out
    }

    fn components(cells: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
        let mut seen = vec![false; cells.len()];
        let mut comps = Vec::new();
        let mut stack = Vec::new();
        for start in 0..cells.len() {
            if !cells[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                comp.push(i);
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if cells[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            comps.push(comp);
        }
        comps
    }
}

/// Erode a region until it disconnects (or the pass limit is reached), then
/// partition the original pixels between the two largest eroded components
/// by geodesic distance inside the region.
fn erode_partition(
    pixels: &[(u32, u32)],
    max_passes: usize,
) -> Option<(Vec<(u32, u32)>, Vec<(u32, u32)>)> {
    let mask = RegionMask::new(pixels);
    let mut cells = mask.cells.clone();
    let mut split: Option<(Vec<usize>, Vec<usize>)> = None;
    for _ in 0..max_passes {
        cells = RegionMask::erode_cells(&cells, mask.w, mask.h);
        if !cells.iter().any(|c| *c) {
            return None;
        }
        let mut comps = RegionMask::components(&cells, mask.w, mask.h);
        if comps.len() >= 2 {
            comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
            split = Some((comps[0].clone(), comps[1].clone()));
            break;
        }
    }
    let (seed_a, seed_b) = split?;

    // Multi-source BFS over the original region assigns every pixel to the
    // nearer seed component.
    const UNSET: u8 = 0;
    let mut owner = vec![UNSET; mask.cells.len()];
    let mut queue = std::collections::VecDeque::new();
    for &i in &seed_a {
        owner[i] = 1;
        queue.push_back(i);
    }
    for &i in &seed_b {
        owner[i] = 2;
        queue.push_back(i);
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % mask.w, i / mask.w);
        let who = owner[i];
        let mut visit = |j: usize| {
            if mask.cells[j] && owner[j] == UNSET {
                owner[j] = who;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < mask.w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - mask.w);
        }
        if y + 1 < mask.h {
            visit(i + mask.w);
        }
    }
    let mut part_a = Vec::new();
    let mut part_b = Vec::new();
    for &(x, y) in pixels {
        let i = (y as i64 - mask.y0) as usize * mask.w + (x as i64 - mask.x0) as usize;
        match owner[i] {
            2 => part_b.push((x, y)),
            _ => part_a.push((x, y)),
        }
    }
    if part_a.len() < 3 || part_b.len() < 3 {
        return None;
    }
    Some((part_a, part_b))
}

/// Boundary pixels between two disjoint pixel sets: members of either set
/// 4-adjacent to the other.
fn split_boundary(a: &[(u32, u32)], b: &[(u32, u32)], width: usize, height: usize) -> Vec<(u32, u32)> {
    let mut in_a = Grid::new(width, height, false);
    let mut in_b = Grid::new(width, height, false);
    for &(x, y) in a {
        in_a.set(x as usize, y as usize, true);
    }
    for &(x, y) in b {
        in_b.set(x as usize, y as usize, true);
    }
    let adjacent = |g: &Grid<bool>, x: i64, y: i64| {
        [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|(dx, dy)| g.contains(x + dx, y + dy) && *g.get((x + dx) as usize, (y + dy) as usize))
    };
    let mut out = Vec::new();
    for &(x, y) in a.iter().chain(b.iter()) {
        let other = if *in_a.get(x as usize, y as usize) {
            &in_b
        } else {
            &in_a
        };
        if adjacent(other, x as i64, y as i64) {
            out.push((x, y));
        }
    }
    out
}

/// Outcome of one erosion attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitDecision {
    Accepted,
    Unchanged,
}

/// Outcome of one dilation attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeDecision {
    Accepted,
    Unchanged,
}

/// Accepted changes of one erosion+dilation sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub splits: usize,
    pub merges: usize,
}

impl SweepStats {
    pub fn total(&self) -> usize {
        self.splits + self.merges
    }
}

/// Builder holding the inputs shared by every atlas operation.
pub struct AtlasBuilder<'a> {
    pub camera: &'a CameraView,
    pub priors: &'a PriorBundle,
    pub params: &'a Params,
}

impl<'a> AtlasBuilder<'a> {
    pub fn new(camera: &'a CameraView, priors: &'a PriorBundle, params: &'a Params) -> Self {
        AtlasBuilder {
            camera,
            priors,
            params,
        }
    }

    fn fit_seed(&self, label: u32, salt: u64) -> u64 {
        self.params
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(label as u64)
            .wrapping_add(salt << 32)
    }

    fn fit(&self, pixels: &[(u32, u32)], label: u32, salt: u64) -> Result<PlaneFit> {
        ransac_plane(
            pixels,
            &self.priors.mono_depth,
            self.camera,
            self.params,
            self.fit_seed(label, salt),
        )
    }

    fn mean_boundary_phi(&self, boundary: &[(u32, u32)]) -> f64 {
        if boundary.is_empty() {
            return 1.0;
        }
        let sum: f64 = boundary
            .iter()
            .map(|&(x, y)| {
                normal_similarity(
                    x as usize,
                    y as usize,
                    &self.priors.mono_normal,
                    self.params.normal_search_radius,
                )
            })
            .sum();
        sum / boundary.len() as f64
    }

    /// Try to split one region across a depth crease. Erosion pre-divides the
    /// region; the split stands when the sub-planes are dissimilar, the fits
    /// improve enough and the internal boundary shows a normal crease.
    pub fn try_erode_split(&self, atlas: &mut RegionAtlas, label: u32) -> SplitDecision {
        let Some(record) = atlas.regions.get(&label) else {
            return SplitDecision::Unchanged;
        };
        let Some(plane_k) = record.plane else {
            return SplitDecision::Unchanged;
        };
        if record.pixels.len() < 6 {
            return SplitDecision::Unchanged;
        }
        let Some((part_a, part_b)) =
            erode_partition(&record.pixels, self.params.erosion_max_passes)
        else {
            return SplitDecision::Unchanged;
        };
        let Ok(fit_a) = self.fit(&part_a, label, 1) else {
            return SplitDecision::Unchanged;
        };
        let Ok(fit_b) = self.fit(&part_b, label, 2) else {
            return SplitDecision::Unchanged;
        };
        let boundary = split_boundary(
            &part_a,
            &part_b,
            atlas.labels.width(),
            atlas.labels.height(),
        );
        let psi = plane_similarity(&fit_a, &fit_b);
        let ratio_gain = (fit_a.inlier_ratio + fit_b.inlier_ratio)
            / (2.0 * plane_k.inlier_ratio.max(1e-9));
        let phi = self.mean_boundary_phi(&boundary);
        if psi <= self.params.phi_plane
            && ratio_gain >= self.params.gamma
            && phi <= self.params.phi_normal
        {
            let la = atlas.fresh_label();
            let lb = atlas.fresh_label();
            for &(x, y) in &part_a {
                atlas.labels.set(x as usize, y as usize, la);
            }
            for &(x, y) in &part_b {
                atlas.labels.set(x as usize, y as usize, lb);
            }
            atlas.regions.remove(&label);
            atlas.regions.insert(
                la,
                RegionRecord {
                    plane: (part_a.len() >= self.params.eta).then_some(fit_a),
                    pixels: part_a,
                },
            );
            atlas.regions.insert(
                lb,
                RegionRecord {
                    plane: (part_b.len() >= self.params.eta).then_some(fit_b),
                    pixels: part_b,
                },
            );
            SplitDecision::Accepted
        } else {
            SplitDecision::Unchanged
        }
    }

    /// Try to merge two adjacent regions separated by a texture edge. The
    /// merge stands when both fits are confident and similar and the seam
    /// between the regions shows no normal crease.
    pub fn try_dilate_merge(
        &self,
        atlas: &mut RegionAtlas,
        u: u32,
        v: u32,
        seam: &[(u32, u32)],
    ) -> MergeDecision {
        if u == v {
            return MergeDecision::Unchanged;
        }
        let (Some(ru), Some(rv)) = (atlas.regions.get(&u), atlas.regions.get(&v)) else {
            return MergeDecision::Unchanged;
        };
        let (Some(pu), Some(pv)) = (ru.plane, rv.plane) else {
            return MergeDecision::Unchanged;
        };
        if pu.inlier_ratio < self.params.kappa || pv.inlier_ratio < self.params.kappa {
            return MergeDecision::Unchanged;
        }
        if plane_similarity(&pu, &pv) < self.params.phi_plane {
            return MergeDecision::Unchanged;
        }
        if self.mean_boundary_phi(seam) < self.params.phi_normal {
            return MergeDecision::Unchanged;
        }
        let mut pixels = ru.pixels.clone();
        pixels.extend_from_slice(&rv.pixels);
        let merged_label = atlas.fresh_label();
        let Ok(fit) = self.fit(&pixels, merged_label, 3) else {
            return MergeDecision::Unchanged;
        };
        for &(x, y) in &pixels {
            atlas.labels.set(x as usize, y as usize, merged_label);
        }
        atlas.regions.remove(&u);
        atlas.regions.remove(&v);
        atlas.regions.insert(
            merged_label,
            RegionRecord {
                plane: Some(fit),
                pixels,
            },
        );
        MergeDecision::Accepted
    }

    /// Decide whether a boundary pixel belongs to an adjacent region: its
    /// back-projected monocular point must lie on the region plane, the fit
    /// must be confident, and the pixel's normals must be locally smooth.
    pub fn pixel_filter_accepts(&self, x: usize, y: usize, plane: &PlaneFit) -> bool {
        if plane.inlier_ratio < self.params.kappa {
            return false;
        }
        let p = back_project_mono(x as u32, y as u32, &self.priors.mono_depth, self.camera);
        let dist = (plane.n.dot(&p) + plane.d).abs() / plane.n.norm();
        if dist > self.params.delta {
            return false;
        }
        normal_similarity(
            x,
            y,
            &self.priors.mono_normal,
            self.params.normal_search_radius,
        ) >= self.params.phi_normal
    }

    /// Assign boundary pixels to adjacent passing regions, nearest plane
    /// first, iterating until no pixel moves.
    fn run_pixel_filter(&self, atlas: &mut RegionAtlas) {
        let (w, h) = (atlas.labels.width(), atlas.labels.height());
        for _ in 0..8 {
            let mut assignments: Vec<((usize, usize), u32)> = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if atlas.label(x, y) != 0 {
                        continue;
                    }
                    let mut candidates: Vec<u32> = Vec::new();
                    for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if atlas.labels.contains(nx, ny) {
                            let l = atlas.label(nx as usize, ny as usize);
                            if l != 0 && !candidates.contains(&l) {
                                candidates.push(l);
                            }
                        }
                    }
                    let mut best: Option<(f64, u32)> = None;
                    for l in candidates {
                        let Some(plane) = atlas.regions.get(&l).and_then(|r| r.plane) else {
                            continue;
                        };
                        if !self.pixel_filter_accepts(x, y, &plane) {
                            continue;
                        }
                        let p = back_project_mono(
                            x as u32,
                            y as u32,
                            &self.priors.mono_depth,
                            self.camera,
                        );
                        let dist = (plane.n.dot(&p) + plane.d).abs();
                        if best.map_or(true, |(bd, _)| dist < bd) {
                            best = Some((dist, l));
                        }
                    }
                    if let Some((_, l)) = best {
                        assignments.push(((x, y), l));
                    }
                }
            }
            if assignments.is_empty() {
                break;
            }
            for ((x, y), l) in assignments {
                atlas.labels.set(x, y, l);
                if let Some(r) = atlas.regions.get_mut(&l) {
                    r.pixels.push((x as u32, y as u32));
                }
            }
        }
    }

    /// Region adjacency with seam pixels: two labels are adjacent when both
    /// appear within the same 5×5 window; the window centers form the seam.
    fn adjacency(&self, atlas: &RegionAtlas) -> BTreeMap<(u32, u32), Vec<(u32, u32)>> {
        let (w, h) = (atlas.labels.width(), atlas.labels.height());
        let mut pairs: BTreeMap<(u32, u32), Vec<(u32, u32)>> = BTreeMap::new();
        let mut local = Vec::with_capacity(8);
        for y in 0..h {
            for x in 0..w {
                local.clear();
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if atlas.labels.contains(nx, ny) {
                            let l = atlas.label(nx as usize, ny as usize);
                            if l != 0 && !local.contains(&l) {
                                local.push(l);
                            }
                        }
                    }
                }
                if local.len() < 2 {
                    continue;
                }
                local.sort_unstable();
                for i in 0..local.len() {
                    for j in i + 1..local.len() {
                        pairs
                            .entry((local[i], local[j]))
                            .or_default()
                            .push((x as u32, y as u32));
                    }
                }
            }
        }
        pairs
    }

    /// One erosion sweep (largest regions first) followed by one dilation
    /// sweep over the adjacency graph.
    pub fn sweep_once(&self, atlas: &mut RegionAtlas) -> SweepStats {
        let mut stats = SweepStats::default();
        let mut by_size: Vec<(usize, u32)> = atlas
            .regions
            .iter()
            .filter(|(_, r)| r.plane.is_some())
            .map(|(l, r)| (r.pixels.len(), *l))
            .collect();
        by_size.sort_by_key(|&(size, l)| (std::cmp::Reverse(size), l));
        for (_, label) in by_size {
            if self.try_erode_split(atlas, label) == SplitDecision::Accepted {
                stats.splits += 1;
            }
        }

        let adjacency = self.adjacency(atlas);
        let mut alias: BTreeMap<u32, u32> = BTreeMap::new();
        let resolve = |alias: &BTreeMap<u32, u32>, mut l: u32| {
            while let Some(&next) = alias.get(&l) {
                l = next;
            }
            l
        };
        for ((u0, v0), seam) in adjacency {
            let u = resolve(&alias, u0);
            let v = resolve(&alias, v0);
            if u == v {
                continue;
            }
            let before = atlas.next_label;
            if self.try_dilate_merge(atlas, u, v, &seam) == MergeDecision::Accepted {
                let merged = atlas.next_label;
                debug_assert!(merged > before);
                alias.insert(u, merged);
                alias.insert(v, merged);
                stats.merges += 1;
            }
        }
        stats
    }

    /// Label regions and fit planes without any erosion/dilation sweeps or
    /// pixel filtering. Exposed for targeted tests of the individual steps.
    pub fn build_labels_only(&self) -> RegionAtlas {
        self.initial_atlas()
    }

    /// Full pipeline: label regions from the edge map, fit planes, iterate
    /// erosion/dilation sweeps to a fixpoint (bounded rounds), then filter
    /// boundary pixels.
    pub fn build(&self) -> RegionAtlas {
        let mut atlas = self.initial_atlas();
        for _ in 0..self.params.atlas_rounds {
            if self.sweep_once(&mut atlas).total() == 0 {
                break;
            }
        }
        self.run_pixel_filter(&mut atlas);
        atlas
    }

    fn initial_atlas(&self) -> RegionAtlas {
        let labels = label_regions(&self.priors.edge_map);
        let mut max_label = 0u32;
        let mut buckets: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
        for (x, y, &l) in labels.enumerate() {
            if l != 0 {
                max_label = max_label.max(l);
                buckets.entry(l).or_default().push((x as u32, y as u32));
            }
        }
        let mut atlas = RegionAtlas {
            labels,
            regions: BTreeMap::new(),
            next_label: max_label,
        };
        for (label, pixels) in buckets {
            let plane = if pixels.len() >= self.params.eta {
                self.fit(&pixels, label, 0).ok()
            } else {
                None
            };
            atlas.regions.insert(label, RegionRecord { pixels, plane });
        }
        atlas
    }
}

/// Build the depth-normal-edge aligned region atlas for one view.
pub fn build_atlas(camera: &CameraView, priors: &PriorBundle, params: &Params) -> RegionAtlas {
    AtlasBuilder::new(camera, priors, params).build()
}

/// Debug dump: label map as PNG plus per-region JSON.
pub fn dump_atlas(atlas: &RegionAtlas, dir: &std::path::Path, view_id: u32) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
    crate::io::png::write_labels(&dir.join(format!("atlas_{view_id}.png")), &atlas.labels)?;
    let records: Vec<serde_json::Value> = atlas
        .regions
        .iter()
        .map(|(l, r)| {
            serde_json::json!({
                "label": l,
                "pixel_count": r.pixel_count(),
                "plane": r.plane.map(|p| serde_json::json!({
                    "n": [p.n.x, p.n.y, p.n.z],
                    "d": p.d,
                    "inlier_ratio": p.inlier_ratio,
                })),
            })
        })
        .collect();
    let path = dir.join(format!("atlas_{view_id}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&records).unwrap())
        .map_err(|e| MvsError::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::intrinsics;
    use nalgebra::Matrix3;

    const W: usize = 64;
    const H: usize = 64;
    const FX: f64 = 100.0;
    const CX: f64 = 32.0;
    /// Image x of the crease between the frontal plane and the side wall.
    const CREASE_X: f64 = 42.0;

    fn camera() -> CameraView {
        CameraView::new(
            0,
            intrinsics(FX, FX, CX, CX),
            Matrix3::identity(),
            Vector3::zeros(),
            Grid::new(W, H, 0.5),
        )
        .unwrap()
    }

    /// Two-plane scene in monocular space: frontal plane z = 2 left of the
    /// crease, side wall x = 0.2 to the right.
    fn crease_priors(edge_map: Grid<bool>) -> PriorBundle {
        let mono_depth = Grid::from_fn(W, H, |x, _| {
            if (x as f64) < CREASE_X {
                2.0f32
            } else {
                (FX * 0.2 / (x as f64 - CX)) as f32
            }
        });
        let mono_normal = Grid::from_fn(W, H, |x, _| {
            if (x as f64) < CREASE_X {
                [0.0, 0.0, -1.0f32]
            } else {
                [-1.0, 0.0, 0.0]
            }
        });
        PriorBundle {
            mono_depth,
            mono_normal,
            edge_map,
            highlight_mask: Grid::new(W, H, false),
        }
    }

    fn small_params() -> Params {
        Params {
            eta: 64,
            ..Params::default()
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let edges = roberts_edges(&Grid::new(32, 32, 0.7), 0.005);
        assert!(!edges.iter().any(|e| *e));
    }

    #[test]
    fn vertical_step_yields_one_pixel_wide_edge() {
        let img = Grid::from_fn(32, 32, |x, _| if x < 16 { 0.2f32 } else { 0.8 });
        let edges = roberts_edges(&img, 0.005);
        for y in 0..31 {
            for x in 0..31 {
                assert_eq!(*edges.get(x, y), x == 15, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn no_edges_is_a_single_region() {
        let labels = label_regions(&Grid::new(16, 16, false));
        assert!(labels.iter().all(|l| *l == 1));
    }

    #[test]
    fn all_edges_has_zero_labels() {
        let labels = label_regions(&Grid::new(16, 16, true));
        assert!(labels.iter().all(|l| *l == 0));
    }

    #[test]
    fn checkerboard_of_cells_counts_cells() {
        // 4x4 cells of 7x7 pixels separated by one-pixel edge lines.
        let edges = Grid::from_fn(31, 31, |x, y| x % 8 == 7 || y % 8 == 7);
        let labels = label_regions(&edges);
        let max = labels.iter().max().unwrap();
        assert_eq!(*max, 16);
    }

    #[test]
    fn exact_plane_has_full_inlier_ratio() {
        let cam = camera();
        let priors = crease_priors(Grid::new(W, H, false));
        let pixels: Vec<(u32, u32)> = (4..20u32)
            .flat_map(|x| (4..20u32).map(move |y| (x, y)))
            .collect();
        let fit = ransac_plane(&pixels, &priors.mono_depth, &cam, &small_params(), 9).unwrap();
        assert!((fit.inlier_ratio - 1.0).abs() < 1e-12);
        // Frontal plane z = 2 canonicalizes to n = (0,0,-1), d = 2.
        assert!((fit.n.z + 1.0).abs() < 1e-6);
        assert!((fit.d - 2.0).abs() < 1e-6);
    }

    #[test]
    fn two_parallel_planes_split_inlier_ratio() {
        let cam = camera();
        let mono_depth = Grid::from_fn(W, H, |x, _| if x < 32 { 2.0f32 } else { 3.0 });
        let pixels: Vec<(u32, u32)> = (12..52u32)
            .flat_map(|x| (10..30u32).map(move |y| (x, y)))
            .collect();
        let fit = ransac_plane(&pixels, &mono_depth, &cam, &small_params(), 21).unwrap();
        assert!(
            (fit.inlier_ratio - 0.5).abs() <= 0.05,
            "ratio {}",
            fit.inlier_ratio
        );
    }

    #[test]
    fn underdetermined_region_errors() {
        let cam = camera();
        let priors = crease_priors(Grid::new(W, H, false));
        let err = ransac_plane(&[(1, 1), (2, 2)], &priors.mono_depth, &cam, &small_params(), 0);
        assert!(err.is_err());
    }

    #[test]
    fn plane_similarity_arithmetic() {
        let mk = |n: Vector3<f64>, d: f64| PlaneFit {
            n,
            d,
            inlier_ratio: 1.0,
        };
        let a = mk(Vector3::new(0.0, 0.0, 1.0), 2.0);
        assert!((plane_similarity(&a, &a) - 1.0).abs() < 1e-12);
        let b = mk(Vector3::new(1.0, 0.0, 0.0), 3.5);
        assert!((plane_similarity(&a, &b) + 1.0).abs() < 1e-12);
        // n_i·n_j = 0.9, |Δd| = 0.3 → 0.6
        let c = mk(Vector3::new(0.9, (1.0f64 - 0.81).sqrt(), 0.0), 2.3);
        let d = mk(Vector3::new(1.0, 0.0, 0.0), 2.0);
        assert!((plane_similarity(&c, &d) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn normal_similarity_probes_a_radius() {
        let mut normals = Grid::new(16, 16, [0.0f32, 0.0, -1.0]);
        // Crease two pixels right of the probe.
        for y in 0..16 {
            for x in 10..16 {
                normals.set(x, y, [-1.0, 0.0, 0.0]);
            }
        }
        let constant = Grid::new(16, 16, [0.0f32, 0.0, -1.0]);
        assert!((normal_similarity(5, 5, &constant, 3) - 1.0).abs() < 1e-12);
        // Adjacent crease → 0.
        assert!(normal_similarity(9, 5, &normals, 1).abs() < 1e-12);
        // Crease 2 px away: radius 3 sees it, radius 1 misses it.
        assert!(normal_similarity(8, 5, &normals, 3).abs() < 1e-12);
        assert!((normal_similarity(8, 5, &normals, 1) - 1.0).abs() < 1e-12);
    }

    /// Edge map with two blobs joined by a narrow bridge across the crease.
    fn bridged_edges() -> Grid<bool> {
        Grid::from_fn(W, H, |x, y| {
            let left = (6..38).contains(&x) && (12..44).contains(&y);
            let right = (46..62).contains(&x) && (12..44).contains(&y);
            let bridge = (38..46).contains(&x) && (26..30).contains(&y);
            !(left || right || bridge)
        })
    }

    #[test]
    fn erosion_splits_region_spanning_a_crease() {
        let cam = camera();
        let priors = crease_priors(bridged_edges());
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let mut atlas = builder.build_labels_only();
        assert_eq!(atlas.regions.len(), 1);
        let label = *atlas.regions.keys().next().unwrap();
        assert_eq!(builder.try_erode_split(&mut atlas, label), SplitDecision::Accepted);
        assert_eq!(atlas.regions.len(), 2);
        // Each side of the crease carries a consistent label.
        let la = atlas.label(10, 20);
        let lb = atlas.label(55, 20);
        assert_ne!(la, lb);
        assert_ne!(la, 0);
        assert_ne!(lb, 0);
    }

    #[test]
    fn planar_region_is_not_split() {
        let cam = camera();
        // Same bridged shape but fully on the frontal plane.
        let mono_depth = Grid::new(W, H, 2.0f32);
        let priors = PriorBundle {
            mono_depth,
            mono_normal: Grid::new(W, H, [0.0, 0.0, -1.0f32]),
            edge_map: bridged_edges(),
            highlight_mask: Grid::new(W, H, false),
        };
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let mut atlas = builder.build_labels_only();
        let label = *atlas.regions.keys().next().unwrap();
        assert_eq!(
            builder.try_erode_split(&mut atlas, label),
            SplitDecision::Unchanged
        );
    }

    #[test]
    fn noisy_split_with_no_fit_gain_is_rejected() {
        let cam = camera();
        // Random depth noise: sub-fits are no better than the whole fit.
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mono_depth = Grid::from_fn(W, H, |_, _| 2.0 + rng.gen_range(-0.8..0.8f32));
        let priors = PriorBundle {
            mono_depth,
            mono_normal: Grid::new(W, H, [0.0, 0.0, -1.0f32]),
            edge_map: bridged_edges(),
            highlight_mask: Grid::new(W, H, false),
        };
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let mut atlas = builder.build_labels_only();
        let label = *atlas.regions.keys().next().unwrap();
        assert_eq!(
            builder.try_erode_split(&mut atlas, label),
            SplitDecision::Unchanged
        );
    }

    /// Two coplanar blobs separated by a one-pixel texture edge.
    fn texture_split_edges() -> Grid<bool> {
        Grid::from_fn(W, H, |x, y| {
            let blob = (6..58).contains(&x) && (12..44).contains(&y);
            !blob || x == 30
        })
    }

    #[test]
    fn dilation_merges_coplanar_regions() {
        let cam = camera();
        let priors = PriorBundle {
            mono_depth: Grid::new(W, H, 2.0f32),
            mono_normal: Grid::new(W, H, [0.0, 0.0, -1.0f32]),
            edge_map: texture_split_edges(),
            highlight_mask: Grid::new(W, H, false),
        };
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let mut atlas = builder.build_labels_only();
        assert_eq!(atlas.regions.len(), 2);
        assert_eq!(builder.sweep_once(&mut atlas).merges, 1);
        assert_eq!(atlas.regions.len(), 1);
    }

    #[test]
    fn dilation_keeps_regions_on_different_planes() {
        let cam = camera();
        // The texture edge sits on the crease: left and right are different planes.
        let edge_map = Grid::from_fn(W, H, |x, y| {
            let blob = (6..58).contains(&x) && (12..44).contains(&y);
            !blob || x as f64 == CREASE_X
        });
        let priors = crease_priors(edge_map);
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let mut atlas = builder.build_labels_only();
        assert_eq!(atlas.regions.len(), 2);
        assert_eq!(builder.sweep_once(&mut atlas).total(), 0);
        assert_eq!(atlas.regions.len(), 2);
    }

    #[test]
    fn dilation_requires_confident_fits() {
        let cam = camera();
        // Coplanar, but depth noise drops the inlier ratios below kappa.
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let mono_depth = Grid::from_fn(W, H, |_, _| 2.0 + rng.gen_range(-0.9..0.9f32));
        let priors = PriorBundle {
            mono_depth,
            mono_normal: Grid::new(W, H, [0.0, 0.0, -1.0f32]),
            edge_map: texture_split_edges(),
            highlight_mask: Grid::new(W, H, false),
        };
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let mut atlas = builder.build_labels_only();
        let labels: Vec<u32> = atlas.regions.keys().copied().collect();
        let ru = atlas.regions[&labels[0]].plane.unwrap().inlier_ratio;
        assert!(ru < params.kappa, "fixture should be low-confidence, got {ru}");
        let adjacency = builder.adjacency(&atlas);
        let ((u, v), seam) = adjacency.iter().next().map(|(k, v)| (*k, v.clone())).unwrap();
        assert_eq!(
            builder.try_dilate_merge(&mut atlas, u, v, &seam),
            MergeDecision::Unchanged
        );
    }

    #[test]
    fn erosion_and_dilation_gates_are_mutually_exclusive() {
        // The plane-similarity gate cannot accept the same pair both ways.
        let mk = |psi_target: f64| {
            let a = PlaneFit {
                n: Vector3::new(0.0, 0.0, 1.0),
                d: 2.0,
                inlier_ratio: 1.0,
            };
            let b = PlaneFit {
                n: Vector3::new(0.0, 0.0, 1.0),
                d: 2.0 + (1.0 - psi_target),
                inlier_ratio: 1.0,
            };
            (a, b)
        };
        let params = Params::default();
        for psi in [-0.9, 0.0, 0.49, 0.5, 0.51, 0.9] {
            let (a, b) = mk(psi);
            let v = plane_similarity(&a, &b);
            let erosion_side = v <= params.phi_plane;
            let dilation_side = v >= params.phi_plane;
            assert!(!(erosion_side && dilation_side) || v == params.phi_plane);
        }
    }

    #[test]
    fn pixel_filter_assigns_on_plane_smooth_pixels() {
        let cam = camera();
        let priors = PriorBundle {
            mono_depth: Grid::new(W, H, 2.0f32),
            mono_normal: Grid::new(W, H, [0.0, 0.0, -1.0f32]),
            edge_map: Grid::new(W, H, false),
            highlight_mask: Grid::new(W, H, false),
        };
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let plane = PlaneFit {
            n: Vector3::new(0.0, 0.0, -1.0),
            d: 2.0,
            inlier_ratio: 1.0,
        };
        assert!(builder.pixel_filter_accepts(10, 10, &plane));
        // A point 2δ off the plane is left as boundary.
        let off_plane = PlaneFit {
            d: 2.0 + 2.0 * params.delta,
            ..plane
        };
        assert!(!builder.pixel_filter_accepts(10, 10, &off_plane));
    }

    #[test]
    fn pixel_filter_respects_normal_creases() {
        let cam = camera();
        let priors = crease_priors(Grid::new(W, H, false));
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let plane = PlaneFit {
            n: Vector3::new(0.0, 0.0, -1.0),
            d: 2.0,
            inlier_ratio: 1.0,
        };
        // On the plane but next to the normal crease → rejected.
        let crease_px = CREASE_X as usize - 1;
        assert!(!builder.pixel_filter_accepts(crease_px, 20, &plane));
        // Far from the crease → accepted.
        assert!(builder.pixel_filter_accepts(10, 20, &plane));
    }

    #[test]
    fn build_atlas_is_idempotent_on_crease_fixture() {
        let cam = camera();
        let priors = crease_priors(bridged_edges());
        let params = small_params();
        let builder = AtlasBuilder::new(&cam, &priors, &params);
        let mut atlas = builder.build();
        // Labels partition non-boundary pixels and planarized regions are
        // consistent with their pixel lists.
        let mut counted = 0usize;
        for (label, record) in &atlas.regions {
            counted += record.pixels.len();
            for &(x, y) in &record.pixels {
                assert_eq!(atlas.label(x as usize, y as usize), *label);
            }
        }
        let labeled = atlas.labels.iter().filter(|l| **l != 0).count();
        assert_eq!(counted, labeled);
        // A second sweep changes nothing.
        assert_eq!(builder.sweep_once(&mut atlas).total(), 0);
    }
}
