//! Sector-based anchor search for unreliable pixels.
//!
//! The area around an unreliable pixel is divided into fixed-angle sectors;
//! reliable candidates are collected along each sector's bisector ray,
//! pre-filtered by the region atlas so anchors never cross a depth edge, and
//! the final anchor per sector maximizes the grown patch area.

use crate::atlas::RegionAtlas;
use crate::config::Params;
use crate::grid::Grid;

/// One reliable candidate pixel with its current matching cost and distance
/// from the origin pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub pos: (u32, u32),
    pub cost: f64,
    pub dist: f64,
}

/// Per-sector candidate lists, ordered nearest-first along the bisector ray.
#[derive(Debug, Clone)]
pub struct SectorCandidates {
    pub origin: (u32, u32),
    pub sectors: Vec<Vec<Candidate>>,
}

impl SectorCandidates {
    pub fn is_empty(&self) -> bool {
        self.sectors.iter().all(|s| s.is_empty())
    }
}

/// Collect up to `candidates_per_sector` reliable pixels along each sector
/// bisector. Candidates outside the origin's atlas region are pre-excluded;
/// an origin on a region boundary (label 0) gets no region constraint.
pub fn collect_candidates(
    p: (u32, u32),
    reliable: &Grid<bool>,
    cost: &Grid<f64>,
    atlas: Option<&RegionAtlas>,
    params: &Params,
) -> SectorCandidates {
    let sectors = params.sectors;
    let origin_label = atlas.map(|a| a.label(p.0 as usize, p.1 as usize));
    let mut out = vec![Vec::new(); sectors];
    for (i, bucket) in out.iter_mut().enumerate() {
        let angle = (i as f64 + 0.5) / sectors as f64 * std::f64::consts::TAU;
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut last = (p.0 as i64, p.1 as i64);
        for t in 1..=params.anchor_search_radius {
            let qx = (p.0 as f64 + dx * t as f64).round() as i64;
            let qy = (p.1 as f64 + dy * t as f64).round() as i64;
            if (qx, qy) == last {
                continue;
            }
            last = (qx, qy);
            if !reliable.contains(qx, qy) {
                break;
            }
            let (ux, uy) = (qx as usize, qy as usize);
            if !reliable.get(ux, uy) {
                continue;
            }
            if let (Some(label), Some(a)) = (origin_label, atlas) {
                if label != 0 && a.label(ux, uy) != label {
                    continue;
                }
            }
            bucket.push(Candidate {
                pos: (ux as u32, uy as u32),
                cost: *cost.get(ux, uy),
                dist: (((qx - p.0 as i64).pow(2) + (qy - p.1 as i64).pow(2)) as f64).sqrt(),
            });
            if bucket.len() >= params.candidates_per_sector {
                break;
            }
        }
    }
    SectorCandidates {
        origin: p,
        sectors: out,
    }
}

/// Signed triangle area ×2 (cross product of the edge vectors).
#[inline]
fn cross2(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Triangle area of `(a, b, origin)`.
#[inline]
pub fn triangle_area(origin: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    cross2(origin, a, b).abs() / 2.0
}

/// Patch-area growth from inserting candidate `c` between the fixed
/// neighbors `prev` and `next` around `origin`.
#[inline]
pub fn delta_area(origin: (f64, f64), prev: (f64, f64), c: (f64, f64), next: (f64, f64)) -> f64 {
    triangle_area(origin, prev, c) + triangle_area(origin, c, next)
        - triangle_area(origin, prev, next)
}

fn to_f(p: (u32, u32)) -> (f64, f64) {
    (p.0 as f64, p.1 as f64)
}

/// Candidate ordering: maximum area growth, ties broken by lower matching
/// cost, then by shorter distance, then by ray order.
fn better(da: f64, c: &Candidate, best_da: f64, best: &Candidate) -> bool {
    if da != best_da {
        return da > best_da;
    }
    if c.cost != best.cost {
        return c.cost < best.cost;
    }
    c.dist < best.dist
}

/// Select the final anchor per sector with the area-maximization sweep.
///
/// Initialization takes the nearest candidate of each sector; one refinement
/// sweep in angular order then replaces each sector's anchor by the
/// candidate maximizing the area growth against the fixed anchors of the
/// two adjacent sectors. A sector whose neighbor is missing falls back to
/// its farthest candidate.
pub fn select_area_max(candidates: &SectorCandidates) -> Vec<Option<Candidate>> {
    let sectors = candidates.sectors.len();
    let origin = to_f(candidates.origin);
    let mut selected: Vec<Option<Candidate>> = candidates
        .sectors
        .iter()
        .map(|list| list.first().copied())
        .collect();
    for i in 0..sectors {
        let list = &candidates.sectors[i];
        if list.is_empty() {
            continue;
        }
        let prev = selected[(i + sectors - 1) % sectors];
        let next = selected[(i + 1) % sectors];
        let choice = match (prev, next) {
            (Some(prev), Some(next)) if sectors > 1 => {
                let (pf, nf) = (to_f(prev.pos), to_f(next.pos));
                let mut best = list[0];
                let mut best_da = delta_area(origin, pf, to_f(best.pos), nf);
                for c in &list[1..] {
                    let da = delta_area(origin, pf, to_f(c.pos), nf);
                    if better(da, c, best_da, &best) {
                        best = *c;
                        best_da = da;
                    }
                }
                best
            }
            // Missing neighbor: the farthest candidate spreads the patch most.
            _ => *list
                .iter()
                .max_by(|a, b| {
                    a.dist
                        .partial_cmp(&b.dist)
                        .unwrap()
                        .then(b.cost.partial_cmp(&a.cost).unwrap())
                })
                .unwrap(),
        };
        selected[i] = Some(choice);
    }
    selected
}
