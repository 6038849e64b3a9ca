//! Scratch diagnostics: matching health and stage timing on a fixture.
//!
//! Usage: cargo run --example diag -p mvs-core -- [fixture] [scale]

use mvs_core::cost::{AnchorSet, CostContext, CostMode, PixelCostEvaluator};
use mvs_core::geometry::PlaneHypothesis;
use mvs_core::{solver, synth, Params};
use nalgebra::{Vector2, Vector3};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("planar3");
    let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let spec = synth::fixture(name).unwrap().scaled(scale);
    let t0 = std::time::Instant::now();
    let rendered = synth::render(&spec).unwrap();
    println!("render: {:.2}s", t0.elapsed().as_secs_f64());
    let views = rendered.scene_views();
    let params = Params::default();

    // Matching health: cost of the ground-truth hypothesis at random pixels.
    let ctx = CostContext::new(
        &views[0].camera,
        views[1..].iter().map(|v| &v.camera).collect(),
        &params,
    );
    let gt = &rendered.views[0].gt;
    let (w, h) = (gt.depth.width(), gt.depth.height());
    let empty = AnchorSet::default();
    let weights = vec![1.0; views.len() - 1];
    let mut costs = Vec::new();
    for y in (8..h - 8).step_by(7) {
        for x in (8..w - 8).step_by(7) {
            let d = *gt.depth.get(x, y) as f64;
            if d <= 0.0 {
                continue;
            }
            let n = gt.normal.get(x, y);
            let hyp = PlaneHypothesis::new(
                Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64),
                d,
            );
            let eval = PixelCostEvaluator::new(
                &ctx,
                Vector2::new(x as f64, y as f64),
                CostMode::Center,
                &empty,
                &weights,
            );
            costs.push(eval.aggregated(&hyp));
        }
    }
    costs.sort_by(|a, b| a.total_cmp(b));
    println!(
        "GT-hypothesis center cost: median {:.4}  p90 {:.4}  frac<tau_rel {:.3}",
        costs[costs.len() / 2],
        costs[costs.len() * 9 / 10],
        costs.iter().filter(|c| **c < params.tau_rel).count() as f64 / costs.len() as f64
    );

    // Full solve of view 0 with timing.
    let t1 = std::time::Instant::now();
    let results = solver::solve_scene(&views, &params).unwrap();
    println!("solve_scene: {:.2}s", t1.elapsed().as_secs_f64());
    for (idx, result, diag) in &results {
        let gt = &rendered.views[*idx].gt;
        let mut rel_errs: Vec<f64> = Vec::new();
        for (x, y, d) in result.depth.enumerate() {
            let g = *gt.depth.get(x, y) as f64;
            if g > 0.0 {
                rel_errs.push(((*d as f64 - g) / g).abs());
            }
        }
        rel_errs.sort_by(|a, b| a.total_cmp(b));
        println!(
            "view {idx}: median rel depth err {:.5}  p90 {:.5}  reliable {:.3}  mean_cost {:.4}  audit {:.2e}  hemi_viol {}  mono_viol {}  repairs {}",
            rel_errs[rel_errs.len() / 2],
            rel_errs[rel_errs.len() * 9 / 10],
            diag.reliable_frac,
            diag.mean_cost,
            diag.audit_max_deviation,
            diag.hemisphere_violations,
            diag.monotonicity_violations,
            diag.normal_repairs,
        );
    }
}
