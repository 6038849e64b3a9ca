//! The PatchMatch loop.
//!
//! Each view runs `outer_passes` passes. A pass rebuilds view-selection
//! weights and restored visibility, (re)classifies pixel reliability,
//! collects anchors for unreliable pixels, then runs red-black checkerboard
//! propagation sweeps followed by refinement under the hemisphere normal
//! constraint and epipolar-aggregated depth intervals.
//!
//! Determinism: every random draw is keyed by (seed, view id, pass, phase,
//! pixel), and both checkerboard phases and refinement read frozen copies of
//! the previous state, so results are bit-identical for any thread count.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::atlas::{build_atlas, RegionAtlas};
use crate::camera::CameraView;
use crate::config::Params;
use crate::cost::{AnchorSet, CostContext, CostMode, PixelCostEvaluator, COST_MAX};
use crate::deform::{collect_candidates, select_area_max};
use crate::error::{MvsError, Result};
use crate::geometry::{self, PlaneHypothesis};
use crate::grid::Grid;
use crate::scene::{DepthNormalResult, SceneView};
use crate::visibility::{reprojection_error, view_selection_weight, ViewSnapshot, VisibilityField};

/// Subsampling stride of the candidate-ranking pass; winners are always
/// re-evaluated at full patch density before acceptance.
const SCREEN_STRIDE: usize = 4;

/// Aggregated depth perturbation intervals around the current depth:
/// `left` below it, `right` above it. A side is `None` when no visible view
/// contributes a usable extreme (e.g. at an epipole).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthIntervals {
    pub left: Option<(f64, f64)>,
    pub right: Option<(f64, f64)>,
}

/// Hemisphere constraint: the normal must face the reference camera and
/// every visible source camera (dot with each viewing direction ≤ 0).
pub fn hemisphere_admissible(
    n_cam: &Vector3<f64>,
    p: Vector2<f64>,
    depth: f64,
    view_i: &CameraView,
    visible: &[&CameraView],
) -> bool {
    const TOL: f64 = 1e-9;
    let point = geometry::back_project(p, depth, view_i);
    let n_world = view_i.r.transpose() * n_cam;
    let facing = |center: Vector3<f64>| {
        let dir = point - center;
        let norm = dir.norm();
        norm < 1e-12 || n_world.dot(&dir) / norm <= TOL
    };
    facing(view_i.center()) && visible.iter().all(|v| facing(v.center()))
}

/// Per-view epipolar disturbance extremes mapped back to ray depths, then
/// aggregated across visible views.
///
/// For each visible view, four pixels at `±alpha` and `±(alpha+beta)` along
/// the epipolar line map to four depths bracketing the current one. The
/// default aggregation takes, per bound, the `mu`-th smallest outer extreme
/// and `mu`-th largest inner extreme over all visible views (rank 1 when
/// fewer than `mu` views contribute, i.e. the plain min/max envelope);
/// `epipolar_minmax_mu` instead applies min/max over the first `mu` views.
pub fn epipolar_intervals(
    p: Vector2<f64>,
    d_current: f64,
    view_i: &CameraView,
    visible: &[&CameraView],
    params: &Params,
    depth_range: (f64, f64),
) -> DepthIntervals {
    let mut lefts: Vec<(f64, f64)> = Vec::new(); // (outer d_ll, inner d_lr)
    let mut rights: Vec<(f64, f64)> = Vec::new(); // (inner d_rl, outer d_rr)
    for vj in visible {
        let Ok((dir, _)) = geometry::epipolar_line(p, view_i, vj) else {
            continue;
        };
        let world = geometry::back_project(p, d_current, view_i);
        let (q0, depth_j) = geometry::project(&world, vj);
        if depth_j <= 0.0 {
            continue;
        }
        let offsets = [
            -(params.alpha + params.beta),
            -params.alpha,
            params.alpha,
            params.alpha + params.beta,
        ];
        let mut left: Vec<f64> = Vec::with_capacity(2);
        let mut right: Vec<f64> = Vec::with_capacity(2);
        for s in offsets {
            let q = q0 + dir * s;
            if let Some(d) = geometry::depth_for_epipolar_point(p, q, view_i, vj) {
                if d < d_current {
                    left.push(d);
                } else if d > d_current {
                    right.push(d);
                }
            }
        }
        if !left.is_empty() {
            let lo = left.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = left.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lefts.push((lo, hi));
        }
        if !right.is_empty() {
            let lo = right.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = right.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rights.push((lo, hi));
        }
    }

    let kth_smallest = |mut v: Vec<f64>, k: usize| {
        v.sort_by(|a, b| a.total_cmp(b));
        v[k - 1]
    };
    let kth_largest = |mut v: Vec<f64>, k: usize| {
        v.sort_by(|a, b| b.total_cmp(a));
        v[k - 1]
    };

    let aggregate = |sides: &[(f64, f64)], inner_first: bool| -> Option<(f64, f64)> {
        if sides.is_empty() {
            return None;
        }
        if params.epipolar_minmax_mu {
            let take = sides.len().min(params.mu.max(1));
            let slice = &sides[..take];
            let a = slice.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
            let b = slice.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            return Some(if inner_first {
                // Right side: inner = max over views, outer = min over views.
                let inner = slice.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
                let outer = slice.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
                (inner, outer)
            } else {
                (a, b)
            });
        }
        let rank = if sides.len() < params.mu.max(1) {
            1
        } else {
            params.mu.max(1)
        };
        if inner_first {
            // Right side: (inner d_rl, outer d_rr).
            let inner = kth_largest(sides.iter().map(|s| s.0).collect(), rank);
            let outer = kth_smallest(sides.iter().map(|s| s.1).collect(), rank);
            Some((inner, outer))
        } else {
            // Left side: (outer d_ll, inner d_lr).
            let outer = kth_smallest(sides.iter().map(|s| s.0).collect(), rank);
            let inner = kth_largest(sides.iter().map(|s| s.1).collect(), rank);
            Some((outer, inner))
        }
    };

    let sanitize = |bounds: Option<(f64, f64)>, lo_cap: f64, hi_cap: f64| -> Option<(f64, f64)> {
        let (a, b) = bounds?;
        let lo = a.min(b).max(lo_cap);
        let hi = a.max(b).min(hi_cap);
        (lo < hi).then_some((lo, hi))
    };

    let eps = d_current * 1e-12;
    DepthIntervals {
        left: sanitize(aggregate(&lefts, false), depth_range.0, d_current - eps),
        right: sanitize(aggregate(&rights, true), d_current + eps, depth_range.1),
    }
}

/// Depth search range: explicit from the config when set, otherwise derived
/// from the monocular depth priors.
pub fn scene_depth_range(scene: &[SceneView], params: &Params) -> (f64, f64) {
    if params.depth_min > 0.0 && params.depth_max > params.depth_min {
        return (params.depth_min, params.depth_max);
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for view in scene {
        for d in view.priors.mono_depth.iter() {
            let d = *d as f64;
            if d > 0.0 {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    if !lo.is_finite() || hi <= 0.0 {
        (0.1, 100.0)
    } else {
        (lo * 0.5, hi * 2.0)
    }
}

fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Random unit normal facing the camera along the given pixel ray.
fn random_facing_normal(rng: &mut ChaCha8Rng, ray: &Vector3<f64>) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        );
        let norm = v.norm();
        if norm < 1e-6 || norm > 1.0 {
            continue;
        }
        let mut n = v / norm;
        let dot = n.dot(ray);
        if dot.abs() < 1e-6 {
            continue;
        }
        if dot > 0.0 {
            n = -n;
        }
        return n;
    }
}

/// Mutable per-view solver state.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub hypotheses: Grid<PlaneHypothesis>,
    pub cost: Grid<f64>,
    pub reliable: Grid<bool>,
    pub iteration: usize,
}

/// Counters exposed for invariant checks.
#[derive(Debug, Clone, Default)]
pub struct ViewDiagnostics {
    pub view_id: u32,
    pub mean_cost: f64,
    pub reliable_frac: f64,
    /// Accepted updates that raised a stored cost (excluding normal repairs).
    pub monotonicity_violations: usize,
    /// Refinement steps forced to replace an inadmissible normal.
    pub normal_repairs: usize,
    /// Max |stored − recomputed| over the final audit sample.
    pub audit_max_deviation: f64,
    /// Output normals violating the hemisphere constraint at final state.
    pub hemisphere_violations: usize,
}

pub struct ViewSolver<'a> {
    scene: &'a [SceneView],
    view_idx: usize,
    source_idx: Vec<usize>,
    params: &'a Params,
    depth_range: (f64, f64),
    pub state: SolverState,
    visibility: VisibilityField,
    atlas: Option<RegionAtlas>,
    anchors: Grid<AnchorSet>,
    mode: Grid<CostMode>,
    frozen: Grid<bool>,
    pub diagnostics: ViewDiagnostics,
}

impl<'a> ViewSolver<'a> {
    pub fn new(
        scene: &'a [SceneView],
        view_idx: usize,
        params: &'a Params,
        depth_range: (f64, f64),
        init: Option<Grid<PlaneHypothesis>>,
    ) -> Self {
        let camera = &scene[view_idx].camera;
        let (w, h) = (camera.width, camera.height);
        let source_idx: Vec<usize> = (0..scene.len()).filter(|&i| i != view_idx).collect();
        let hypotheses = match init {
            Some(g) => {
                assert!(g.width() == w && g.height() == h);
                g
            }
            None => initialize_hypotheses(&scene[view_idx], params, depth_range),
        };
        ViewSolver {
            scene,
            view_idx,
            source_idx,
            params,
            depth_range,
            state: SolverState {
                hypotheses,
                cost: Grid::new(w, h, COST_MAX),
                reliable: Grid::new(w, h, false),
                iteration: 0,
            },
            visibility: VisibilityField::new(w, h, scene.len() - 1),
            atlas: None,
            anchors: Grid::new(w, h, AnchorSet::default()),
            mode: Grid::new(w, h, CostMode::Center),
            frozen: Grid::new(w, h, false),
            diagnostics: ViewDiagnostics {
                view_id: camera.id,
                ..ViewDiagnostics::default()
            },
        }
    }

    fn camera(&self) -> &CameraView {
        &self.scene[self.view_idx].camera
    }

    fn sources(&self) -> Vec<&'a CameraView> {
        self.source_idx.iter().map(|&i| &self.scene[i].camera).collect()
    }

    fn cost_context(&self) -> CostContext<'a> {
        let mut ctx = CostContext::new(&self.scene[self.view_idx].camera, self.sources(), self.params);
        ctx.use_corrected = self.params.highlight_rules;
        ctx
    }

    fn highlight_mask(&self) -> &Grid<bool> {
        &self.scene[self.view_idx].priors.highlight_mask
    }

    fn highlight_enabled(&self) -> bool {
        self.params.highlight_rules && self.highlight_mask().iter().any(|m| *m)
    }

    /// Effective per-view weights at a pixel.
    fn weights_at(&self, x: usize, y: usize) -> Vec<f64> {
        self.visibility.weights_at(x, y, self.params.w_min)
    }

    fn visible_sources(&self, x: usize, y: usize) -> Vec<&'a CameraView> {
        self.source_idx
            .iter()
            .enumerate()
            .filter(|(j, _)| self.visibility.effective_weight(*j, x, y, self.params.w_min) > 0.0)
            .map(|(_, &i)| &self.scene[i].camera)
            .collect()
    }

    /// One outer pass. `snapshots` holds the other views' frozen maps from
    /// the previous pass (keyed by view id); absent views fall back to
    /// selection-weight visibility.
    pub fn run_pass(&mut self, pass: usize, snapshots: Option<&BTreeMap<u32, ViewSnapshot>>) {
        let timing = std::env::var_os("DVP_TIMING").is_some();
        let mut stage_start = std::time::Instant::now();
        let mut lap = |label: &str| {
            if timing {
                eprintln!("  [timing] {label}: {:.2}s", stage_start.elapsed().as_secs_f64());
            }
            stage_start = std::time::Instant::now();
        };
        let ctx = self.cost_context();
        let (w, h) = (self.state.cost.width(), self.state.cost.height());

        // View-selection weights from per-view center costs of the current
        // hypotheses.
        let per_view_costs = self.compute_per_view_costs(&ctx);
        for (j, grid) in per_view_costs.iter().enumerate() {
            self.visibility.w[j] = grid.map(|c| view_selection_weight(*c, self.params));
        }
        lap("view selection");

        // Restoration: geometric where a snapshot exists, selection weights
        // otherwise (always the case in pass 1).
        self.restore_visibility(pass, snapshots);
        lap("restoration");

        // Initial aggregated costs (pass 1 has none yet).
        if pass == 1 {
            self.recompute_costs(&ctx, None);
        }

        // Reliability classification drives deformation and highlights.
        let tau = self.params.tau_rel;
        self.state.reliable = self.state.cost.map(|c| *c < tau);

        if pass == 1 && self.params.deformation {
            self.atlas = Some(build_atlas(
                self.camera(),
                &self.scene[self.view_idx].priors,
                self.params,
            ));
        }
        lap("atlas");

        // Cost modes and frozen set under the highlight rules.
        let highlight_on = self.highlight_enabled();
        let mask = self.highlight_mask();
        let mut mode = Grid::new(w, h, CostMode::Center);
        let mut frozen = Grid::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let reliable = *self.state.reliable.get(x, y);
                let masked = highlight_on && *mask.get(x, y);
                if reliable {
                    if masked {
                        frozen.set(x, y, true);
                    }
                } else if masked {
                    mode.set(x, y, CostMode::AnchorsOnly);
                } else if self.params.deformation {
                    mode.set(x, y, CostMode::Deformable);
                }
            }
        }
        self.mode = mode;
        self.frozen = frozen;

        self.collect_anchors();
        lap("anchors");

        // Stored costs must reflect the new weights, modes and anchors.
        self.recompute_costs(&ctx, None);
        lap("recompute");

        for _ in 0..self.params.checkerboard_sweeps {
            self.propagate_sweep(&ctx, pass);
        }
        lap("propagate");
        self.refine(&ctx, pass);
        lap("refine");

        self.state.reliable = self.state.cost.map(|c| *c < tau);
        self.state.iteration = pass;

        let mean_cost = self.state.cost.iter().sum::<f64>() / self.state.cost.len() as f64;
        let reliable_frac = self.state.reliable.iter().filter(|r| **r).count() as f64
            / self.state.reliable.len() as f64;
        self.diagnostics.mean_cost = mean_cost;
        self.diagnostics.reliable_frac = reliable_frac;
        eprintln!(
            "view={} pass={} mean_cost={:.6} reliable_frac={:.4}",
            self.camera().id,
            pass,
            mean_cost,
            reliable_frac
        );
    }

    fn compute_per_view_costs(&self, ctx: &CostContext<'a>) -> Vec<Grid<f64>> {
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        let empty = AnchorSet::default();
        let no_weights: Vec<f64> = Vec::new();
        let rows: Vec<Vec<Vec<f64>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = vec![Vec::with_capacity(w); self.source_idx.len()];
                for x in 0..w {
                    let p = Vector2::new(x as f64, y as f64);
                    let eval =
                        PixelCostEvaluator::new(ctx, p, CostMode::Center, &empty, &no_weights);
                    let costs = eval.per_view_center(self.state.hypotheses.get(x, y));
                    for (j, c) in costs.into_iter().enumerate() {
                        row[j].push(c);
                    }
                }
                row
            })
            .collect();
        (0..self.source_idx.len())
            .map(|j| {
                let mut data = Vec::with_capacity(w * h);
                for row in &rows {
                    data.extend_from_slice(&row[j]);
                }
                Grid::from_vec(w, h, data)
            })
            .collect()
    }

    fn restore_visibility(&mut self, _pass: usize, snapshots: Option<&BTreeMap<u32, ViewSnapshot>>) {
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        let mut updates: Vec<(usize, Grid<f64>, Grid<bool>)> = Vec::new();
        {
            let view_i = self.camera();
            let hyp = &self.state.hypotheses;
            let params = self.params;
            for (j, &src_idx) in self.source_idx.iter().enumerate() {
                let src_view = &self.scene[src_idx].camera;
                let Some(snap) = snapshots.and_then(|m| m.get(&src_view.id)) else {
                    continue;
                };
                let results: Vec<(f64, bool)> = (0..h)
                    .into_par_iter()
                    .flat_map_iter(|y| (0..w).map(move |x| (x, y)))
                    .map(|(x, y)| {
                        let p = Vector2::new(x as f64, y as f64);
                        let d = hyp.get(x, y).d;
                        let e =
                            reprojection_error(p, d, view_i, src_view, snap, params.reproj_window);
                        let mut restored = e <= params.eps_reproj;
                        // A restored, reliable highlight pixel in the source
                        // view is treated as invisible.
                        if restored && params.highlight_rules {
                            let world = geometry::back_project(p, d, view_i);
                            let (q, dj) = geometry::project(&world, src_view);
                            if dj > 0.0 && src_view.in_bounds(q.x, q.y) {
                                let (qx, qy) = (q.x.round() as usize, q.y.round() as usize);
                                if *snap.highlight.get(qx, qy) && *snap.reliable.get(qx, qy) {
                                    restored = false;
                                }
                            }
                        }
                        (e, restored)
                    })
                    .collect();
                let mut e_grid = Grid::new(w, h, f64::INFINITY);
                let mut r_grid = Grid::new(w, h, false);
                for (i, (e, r)) in results.into_iter().enumerate() {
                    e_grid.data_mut()[i] = e;
                    r_grid.data_mut()[i] = r;
                }
                updates.push((j, e_grid, r_grid));
            }
        }
        let updated: Vec<usize> = updates.iter().map(|(j, _, _)| *j).collect();
        for (j, e_grid, r_grid) in updates {
            self.visibility.e[j] = e_grid;
            self.visibility.restored[j] = r_grid;
        }
        // Views without a snapshot fall back to selection-weight visibility.
        for j in 0..self.source_idx.len() {
            if !updated.contains(&j) {
                self.visibility.restored[j] = self.visibility.w[j].map(|w| *w > 0.0);
                self.visibility.e[j] = Grid::new(w, h, f64::INFINITY);
            }
        }
    }

    fn collect_anchors(&mut self) {
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        if !self.params.deformation {
            self.anchors = Grid::new(w, h, AnchorSet::default());
            return;
        }
        let reliable = &self.state.reliable;
        let cost = &self.state.cost;
        let atlas = self.atlas.as_ref();
        let params = self.params;
        let visibility = &self.visibility;
        let n_sources = self.source_idx.len();
        let sets: Vec<AnchorSet> = (0..h)
            .into_par_iter()
            .flat_map_iter(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                if *reliable.get(x, y) {
                    return AnchorSet::default();
                }
                let needs = matches!(
                    self.mode.get(x, y),
                    CostMode::Deformable | CostMode::AnchorsOnly
                );
                if !needs {
                    return AnchorSet::default();
                }
                let candidates =
                    collect_candidates((x as u32, y as u32), reliable, cost, atlas, params);
                let selected = select_area_max(&candidates);
                let anchors: Vec<(u32, u32)> =
                    selected.into_iter().flatten().map(|c| c.pos).collect();
                if anchors.is_empty() {
                    return AnchorSet::default();
                }
                // Per-view mask: keep an anchor for view j when the anchor
                // pixel itself is visible there.
                let per_view_mask: Vec<u8> = (0..n_sources)
                    .map(|j| {
                        let mut mask = 0u8;
                        for (k, &(ax, ay)) in anchors.iter().enumerate() {
                            let w_anchor = visibility.effective_weight(
                                j,
                                ax as usize,
                                ay as usize,
                                params.w_min,
                            );
                            if w_anchor > 0.0 {
                                mask |= 1 << k;
                            }
                        }
                        mask
                    })
                    .collect();
                AnchorSet {
                    anchors,
                    per_view_mask,
                }
            })
            .collect();
        self.anchors = Grid::from_vec(w, h, sets);
    }

    /// Recompute stored aggregated costs of the current hypotheses. With
    /// `only` set, restrict to pixels passing the filter.
    fn recompute_costs(&mut self, ctx: &CostContext<'a>, only: Option<&Grid<bool>>) {
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        let hyp = &self.state.hypotheses;
        let costs: Vec<Option<f64>> = (0..h)
            .into_par_iter()
            .flat_map_iter(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                if let Some(filter) = only {
                    if !filter.get(x, y) {
                        return None;
                    }
                }
                let p = Vector2::new(x as f64, y as f64);
                let weights = self.weights_at(x, y);
                let eval = PixelCostEvaluator::new(
                    ctx,
                    p,
                    *self.mode.get(x, y),
                    self.anchors.get(x, y),
                    &weights,
                );
                Some(eval.aggregated(hyp.get(x, y)))
            })
            .collect();
        for (i, c) in costs.into_iter().enumerate() {
            if let Some(c) = c {
                self.state.cost.data_mut()[i] = c;
            }
        }
    }

    /// One red-black checkerboard propagation sweep. Each phase reads a
    /// frozen copy of the full state and writes only its own color.
    fn propagate_sweep(&mut self, ctx: &CostContext<'a>, pass: usize) {
        for color in 0..2usize {
            let prev_h = self.state.hypotheses.clone();
            let prev_c = self.state.cost.clone();
            let (w, h) = (prev_c.width(), prev_c.height());
            let updates: Vec<(usize, PlaneHypothesis, f64)> = (0..h)
                .into_par_iter()
                .flat_map_iter(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| (x + y) % 2 == color && !*self.frozen.get(x, y))
                .filter_map(|(x, y)| {
                    self.best_propagation_candidate(ctx, &prev_h, &prev_c, x, y)
                        .map(|(hyp, cost)| (y * w + x, hyp, cost))
                })
                .collect();
            for (i, hyp, cost) in updates {
                if cost > self.state.cost.data()[i] + 1e-12 {
                    self.diagnostics.monotonicity_violations += 1;
                }
                self.state.hypotheses.data_mut()[i] = hyp;
                self.state.cost.data_mut()[i] = cost;
            }
        }
        let _ = pass;
    }

    fn best_propagation_candidate(
        &self,
        ctx: &CostContext<'a>,
        prev_h: &Grid<PlaneHypothesis>,
        prev_c: &Grid<f64>,
        x: usize,
        y: usize,
    ) -> Option<(PlaneHypothesis, f64)> {
        let (w, h) = (prev_c.width(), prev_c.height());
        let mut sources: Vec<(usize, usize)> = Vec::with_capacity(16);
        let push = |qx: i64, qy: i64, sources: &mut Vec<(usize, usize)>| {
            if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                sources.push((qx as usize, qy as usize));
            }
        };
        let (xi, yi) = (x as i64, y as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            push(xi + dx, yi + dy, &mut sources);
        }
        // Strip samples: the best stored pixel along each axis direction.
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let mut best: Option<(f64, (usize, usize))> = None;
            for step in [3i64, 5, 7, 9, 11] {
                let (qx, qy) = (xi + dx * step, yi + dy * step);
                if qx < 0 || qy < 0 || qx as usize >= w || qy as usize >= h {
                    break;
                }
                let c = *prev_c.get(qx as usize, qy as usize);
                if best.map_or(true, |(bc, _)| c < bc) {
                    best = Some((c, (qx as usize, qy as usize)));
                }
            }
            if let Some((_, q)) = best {
                sources.push(q);
            }
        }
        // Anchor hypothesis injection.
        let anchors = self.anchors.get(x, y);
        for &(ax, ay) in &anchors.anchors {
            sources.push((ax as usize, ay as usize));
        }

        let p = Vector2::new(x as f64, y as f64);
        let ray_p = self.camera().ray(p.x, p.y);
        let visible = self.visible_sources(x, y);
        let weights = self.weights_at(x, y);
        let current_hyp = prev_h.get(x, y);
        // Converged neighborhoods propose the same plane repeatedly; keep
        // each distinct admissible hypothesis once.
        let mut seen: Vec<PlaneHypothesis> = Vec::with_capacity(sources.len() + 1);
        seen.push(*current_hyp);
        let mut candidates: Vec<PlaneHypothesis> = Vec::with_capacity(sources.len());
        for (qx, qy) in sources {
            let cand = prev_h.get(qx, qy);
            if qx == x && qy == y {
                continue;
            }
            let ray_q = self.camera().ray(qx as f64, qy as f64);
            let Some(d_p) = cand.depth_on_ray(&ray_q, &ray_p) else {
                continue;
            };
            if d_p < self.depth_range.0 || d_p > self.depth_range.1 {
                continue;
            }
            if cand.n.dot(&ray_p) >= -1e-9 {
                continue;
            }
            let hyp = PlaneHypothesis::new(cand.n, d_p);
            let tol = 1e-9 * d_p.abs().max(1e-12);
            if seen
                .iter()
                .any(|s| s.n == hyp.n && (s.d - hyp.d).abs() <= tol)
            {
                continue;
            }
            seen.push(hyp);
            if hemisphere_admissible(&hyp.n, p, d_p, self.camera(), &visible) {
                candidates.push(hyp);
            }
        }
        if candidates.is_empty() {
            return None;
        }
        // The evaluator extracts the reference patches; converged pixels
        // whose candidates all dedupe away never pay for it.
        let eval = PixelCostEvaluator::new(ctx, p, *self.mode.get(x, y), anchors, &weights);
        // Rank candidates on subsampled patches, then evaluate only the
        // winner at full density; acceptance always compares full costs.
        let winner = if candidates.len() == 1 {
            candidates[0]
        } else {
            *candidates
                .iter()
                .map(|hyp| (eval.screened(hyp, SCREEN_STRIDE), hyp))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1
        };
        let cost = eval.aggregated(&winner);
        if cost < *prev_c.get(x, y) {
            Some((winner, cost))
        } else {
            None
        }
    }

    /// Refinement: perturbed hypotheses with depths drawn from the epipolar
    /// intervals and normals rejection-sampled inside the admissible
    /// hemisphere set. Inadmissible current normals are repaired by the best
    /// admissible candidate.
    fn refine(&mut self, ctx: &CostContext<'a>, pass: usize) {
        let prev_h = self.state.hypotheses.clone();
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        let view_id = self.camera().id as u64;
        let updates: Vec<(usize, PlaneHypothesis, f64, bool)> = (0..h)
            .into_par_iter()
            .flat_map_iter(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| !*self.frozen.get(x, y))
            .filter_map(|(x, y)| {
                let p = Vector2::new(x as f64, y as f64);
                let current = *prev_h.get(x, y);
                let current_cost = *self.state.cost.get(x, y);
                let visible = self.visible_sources(x, y);
                let intervals = epipolar_intervals(
                    p,
                    current.d,
                    self.camera(),
                    &visible,
                    self.params,
                    self.depth_range,
                );
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    self.params.seed,
                    &[view_id, pass as u64, 0x5eed, x as u64, y as u64],
                ));
                let ray_p = self.camera().ray(p.x, p.y);
                let admissible = |n: &Vector3<f64>, d: f64| {
                    n.dot(&ray_p) < -1e-9
                        && hemisphere_admissible(n, p, d, self.camera(), &visible)
                };
                let current_ok = admissible(&current.n, current.d);

                let local_perturb = |rng: &mut ChaCha8Rng, side: usize, k: usize| -> f64 {
                    let scale = 0.01 / (1 << (k % 4)) as f64;
                    let sign = if side == 0 { -1.0 } else { 1.0 };
                    (current.d * (1.0 + sign * scale * rng.gen_range(0.0..1.0)))
                        .clamp(self.depth_range.0, self.depth_range.1)
                };
                // The first four samples draw from the aggregated intervals
                // (escaping the flat neighborhood of the current depth); the
                // last two polish locally with exponentially shrinking
                // perturbations, which is also the fallback for
                // epipole-degenerate sides.
                let sample_depth = |rng: &mut ChaCha8Rng, side: usize, k: usize| -> f64 {
                    let interval = if side == 0 { intervals.left } else { intervals.right };
                    if k + 2 >= self.params.refine_samples {
                        return local_perturb(rng, side, k);
                    }
                    match interval {
                        Some((lo, hi)) => rng.gen_range(lo..=hi),
                        None => local_perturb(rng, side, k),
                    }
                };
                let sample_normal = |rng: &mut ChaCha8Rng, d: f64| -> Option<Vector3<f64>> {
                    for _ in 0..32 {
                        let jitter = Vector3::new(
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3f64),
                        );
                        let v = current.n + jitter;
                        let norm = v.norm();
                        if norm < 1e-9 {
                            continue;
                        }
                        let n = v / norm;
                        if admissible(&n, d) {
                            return Some(n);
                        }
                    }
                    None
                };

                let weights = self.weights_at(x, y);
                let anchors = self.anchors.get(x, y);
                let eval =
                    PixelCostEvaluator::new(ctx, p, *self.mode.get(x, y), anchors, &weights);
                let mut sampled: Vec<PlaneHypothesis> =
                    Vec::with_capacity(self.params.refine_samples);
                for k in 0..self.params.refine_samples {
                    let side = k % 2;
                    let d = sample_depth(&mut rng, side, k);
                    let n = if k < 2 && current_ok {
                        current.n
                    } else {
                        match sample_normal(&mut rng, d) {
                            Some(n) => n,
                            None if current_ok => current.n,
                            None => continue,
                        }
                    };
                    if admissible(&n, d) {
                        sampled.push(PlaneHypothesis::new(n, d));
                    }
                }
                // Rank on subsampled patches, full-evaluate the winner.
                let mut best: Option<(PlaneHypothesis, f64)> = None;
                if let Some(winner) = match sampled.len() {
                    0 => None,
                    1 => Some(sampled[0]),
                    _ => sampled
                        .iter()
                        .map(|hyp| (eval.screened(hyp, SCREEN_STRIDE), hyp))
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .map(|(_, hyp)| *hyp),
                } {
                    let cost = eval.aggregated(&winner);
                    let accept = if current_ok {
                        cost < current_cost
                    } else {
                        true
                    };
                    if accept {
                        best = Some((winner, cost));
                    }
                }
                // Repair an inadmissible current normal at unchanged depth.
                if best.is_none() && !current_ok {
                    if let Some(n) = sample_normal(&mut rng, current.d) {
                        let hyp = PlaneHypothesis::new(n, current.d);
                        let cost = eval.aggregated(&hyp);
                        best = Some((hyp, cost));
                    }
                }
                best.map(|(hyp, cost)| (y * w + x, hyp, cost, !current_ok))
            })
            .collect();
        for (i, hyp, cost, repaired) in updates {
            if repaired {
                self.diagnostics.normal_repairs += 1;
            } else if cost > self.state.cost.data()[i] + 1e-12 {
                self.diagnostics.monotonicity_violations += 1;
            }
            self.state.hypotheses.data_mut()[i] = hyp;
            self.state.cost.data_mut()[i] = cost;
        }
    }

    /// Recompute the aggregated cost at sampled pixels and compare with the
    /// stored value; the result lands in the diagnostics.
    pub fn audit_stored_costs(&mut self, samples: usize) {
        let ctx = self.cost_context();
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.params.seed,
            &[self.camera().id as u64, 0xAD17],
        ));
        let mut max_dev = 0.0f64;
        for _ in 0..samples {
            let x = rng.gen_range(0..w);
            let y = rng.gen_range(0..h);
            let p = Vector2::new(x as f64, y as f64);
            let weights = self.weights_at(x, y);
            let eval = PixelCostEvaluator::new(
                &ctx,
                p,
                *self.mode.get(x, y),
                self.anchors.get(x, y),
                &weights,
            );
            let recomputed = eval.aggregated(self.state.hypotheses.get(x, y));
            max_dev = max_dev.max((recomputed - self.state.cost.get(x, y)).abs());
        }
        self.diagnostics.audit_max_deviation = max_dev;
    }

    /// Count output normals violating the hemisphere constraint.
    pub fn audit_hemisphere(&mut self) {
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        let mut violations = 0usize;
        for y in 0..h {
            for x in 0..w {
                let hyp = self.state.hypotheses.get(x, y);
                let visible = self.visible_sources(x, y);
                if !hemisphere_admissible(
                    &hyp.n,
                    Vector2::new(x as f64, y as f64),
                    hyp.d,
                    self.camera(),
                    &visible,
                ) {
                    violations += 1;
                }
            }
        }
        self.diagnostics.hemisphere_violations = violations;
    }

    /// Freeze the per-view maps other views read during restoration.
    pub fn snapshot(&self) -> ViewSnapshot {
        ViewSnapshot {
            depth: self.state.hypotheses.map(|h| h.d as f32),
            cost: self.state.cost.map(|c| *c as f32),
            reliable: self.state.reliable.clone(),
            highlight: self.highlight_mask().clone(),
        }
    }

    /// Stamp the final result. Under the highlight rules, masked reference
    /// pixels are excluded from the reliable set so fusion skips them.
    pub fn finalize(&self) -> DepthNormalResult {
        let tau = self.params.tau_rel;
        let mask = self.highlight_mask();
        let highlight_on = self.params.highlight_rules;
        let (w, h) = (self.state.cost.width(), self.state.cost.height());
        let mut reliable = Grid::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let ok = *self.state.cost.get(x, y) < tau
                    && !(highlight_on && *mask.get(x, y));
                reliable.set(x, y, ok);
            }
        }
        DepthNormalResult {
            depth: self.state.hypotheses.map(|hyp| hyp.d as f32),
            normal: self
                .state
                .hypotheses
                .map(|hyp| [hyp.n.x as f32, hyp.n.y as f32, hyp.n.z as f32]),
            cost: self.state.cost.map(|c| *c as f32),
            reliable,
        }
    }
}

fn initialize_hypotheses(
    view: &SceneView,
    params: &Params,
    depth_range: (f64, f64),
) -> Grid<PlaneHypothesis> {
    let camera = &view.camera;
    let (w, h) = (camera.width, camera.height);
    let mono = &view.priors.mono_depth;
    Grid::from_fn(w, h, |x, y| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            params.seed,
            &[camera.id as u64, 0x1417, x as u64, y as u64],
        ));
        let ray = camera.ray(x as f64, y as f64);
        let mono_d = *mono.get(x, y) as f64;
        let use_mono = mono_d > 0.0 && rng.gen_range(0.0..1.0) < params.mono_seed_fraction;
        let d = if use_mono {
            mono_d.clamp(depth_range.0, depth_range.1)
        } else {
            rng.gen_range(depth_range.0..=depth_range.1)
        };
        let n = random_facing_normal(&mut rng, &ray);
        PlaneHypothesis::new(n, d)
    })
}

/// Solve a subset of views. Views in the subset exchange restored
/// visibility from the second pass on; views outside it fall back to
/// selection-weight visibility.
pub fn solve_views(
    scene: &[SceneView],
    view_indices: &[usize],
    params: &Params,
) -> Result<Vec<(usize, DepthNormalResult, ViewDiagnostics)>> {
    for &i in view_indices {
        if i >= scene.len() {
            return Err(MvsError::Invalid(format!(
                "view index {i} out of range ({} views)",
                scene.len()
            )));
        }
    }
    if scene.len() < 2 {
        return Err(MvsError::Invalid(
            "multi-view stereo needs at least 2 views".into(),
        ));
    }

    let coarse_init = if params.multiscale && scene.iter().all(|v| v.camera.width >= 64 && v.camera.height >= 64)
    {
        let coarse_scene = downsample_scene(scene)?;
        let mut coarse_params = params.clone();
        coarse_params.anchor_search_radius = (params.anchor_search_radius / 2).max(8);
        coarse_params.multiscale = false;
        let coarse = solve_passes(&coarse_scene, view_indices, &coarse_params, None);
        let mut inits: BTreeMap<usize, Grid<PlaneHypothesis>> = BTreeMap::new();
        for (idx, solver) in view_indices.iter().zip(&coarse) {
            let fine_cam = &scene[*idx].camera;
            let coarse_h = &solver.state.hypotheses;
            inits.insert(
                *idx,
                Grid::from_fn(fine_cam.width, fine_cam.height, |x, y| {
                    let cx = (x / 2).min(coarse_h.width() - 1);
                    let cy = (y / 2).min(coarse_h.height() - 1);
                    *coarse_h.get(cx, cy)
                }),
            );
        }
        Some(inits)
    } else {
        None
    };

    let mut solvers = solve_passes(scene, view_indices, params, coarse_init);
    let mut out = Vec::new();
    for solver in &mut solvers {
        solver.audit_stored_costs(1000);
        solver.audit_hemisphere();
    }
    for (idx, solver) in view_indices.iter().zip(solvers) {
        let result = solver.finalize();
        out.push((*idx, result, solver.diagnostics));
    }
    Ok(out)
}

fn solve_passes<'a>(
    scene: &'a [SceneView],
    view_indices: &[usize],
    params: &'a Params,
    init: Option<BTreeMap<usize, Grid<PlaneHypothesis>>>,
) -> Vec<ViewSolver<'a>> {
    let depth_range = scene_depth_range(scene, params);
    let mut init = init.unwrap_or_default();
    let mut solvers: Vec<ViewSolver> = view_indices
        .iter()
        .map(|&i| ViewSolver::new(scene, i, params, depth_range, init.remove(&i)))
        .collect();
    for pass in 1..=params.outer_passes {
        let snapshots: Option<BTreeMap<u32, ViewSnapshot>> = if pass == 1 {
            None
        } else {
            Some(
                solvers
                    .iter()
                    .map(|s| (s.camera().id, s.snapshot()))
                    .collect(),
            )
        };
        for solver in &mut solvers {
            solver.run_pass(pass, snapshots.as_ref());
        }
    }
    solvers
}

/// Solve every view of the scene.
pub fn solve_scene(
    scene: &[SceneView],
    params: &Params,
) -> Result<Vec<(usize, DepthNormalResult, ViewDiagnostics)>> {
    let all: Vec<usize> = (0..scene.len()).collect();
    solve_views(scene, &all, params)
}

/// Solve a single view (other views contribute only as matching sources).
pub fn run_view(
    scene: &[SceneView],
    view_idx: usize,
    params: &Params,
) -> Result<DepthNormalResult> {
    let mut results = solve_views(scene, &[view_idx], params)?;
    Ok(results.remove(0).1)
}

/// Half-resolution copy of the scene for the coarse solve.
pub fn downsample_scene(scene: &[SceneView]) -> Result<Vec<SceneView>> {
    scene
        .iter()
        .map(|view| {
            let cam = &view.camera;
            let (w2, h2) = (cam.width / 2, cam.height / 2);
            let box_mean = |g: &Grid<f32>| {
                Grid::from_fn(w2, h2, |x, y| {
                    let (x2, y2) = (x * 2, y * 2);
                    (g.get(x2, y2)
                        + g.get((x2 + 1).min(g.width() - 1), y2)
                        + g.get(x2, (y2 + 1).min(g.height() - 1))
                        + g.get((x2 + 1).min(g.width() - 1), (y2 + 1).min(g.height() - 1)))
                        / 4.0
                })
            };
            let any = |g: &Grid<bool>| {
                Grid::from_fn(w2, h2, |x, y| {
                    let (x2, y2) = (x * 2, y * 2);
                    *g.get(x2, y2)
                        || *g.get((x2 + 1).min(g.width() - 1), y2)
                        || *g.get(x2, (y2 + 1).min(g.height() - 1))
                        || *g.get((x2 + 1).min(g.width() - 1), (y2 + 1).min(g.height() - 1))
                })
            };
            let mut k = cam.k;
            // Pixel centers sit at half-integer positions after 2x1 binning.
            k[(0, 0)] /= 2.0;
            k[(1, 1)] /= 2.0;
            k[(0, 2)] = (k[(0, 2)] + 0.5) / 2.0 - 0.5;
            k[(1, 2)] = (k[(1, 2)] + 0.5) / 2.0 - 0.5;
            let mut camera = CameraView::new(cam.id, k, cam.r, cam.t, box_mean(&cam.image))?;
            camera.corrected_image = cam.corrected_image.as_ref().map(&box_mean);
            let normals = &view.priors.mono_normal;
            let mono_normal = Grid::from_fn(w2, h2, |x, y| {
                let (x2, y2) = (x * 2, y * 2);
                let mut acc = Vector3::zeros();
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let n = normals.get(
                        (x2 + dx).min(normals.width() - 1),
                        (y2 + dy).min(normals.height() - 1),
                    );
                    acc += Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
                }
                let norm = acc.norm();
                let n = if norm > 1e-9 {
                    acc / norm
                } else {
                    Vector3::new(0.0, 0.0, -1.0)
                };
                [n.x as f32, n.y as f32, n.z as f32]
            });
            Ok(SceneView {
                priors: crate::scene::PriorBundle {
                    mono_depth: box_mean(&view.priors.mono_depth),
                    mono_normal,
                    edge_map: any(&view.priors.edge_map),
                    highlight_mask: any(&view.priors.highlight_mask),
                },
                camera,
            })
        })
        .collect()
}
