//! Scene directory round trips and validation failures.

use mvs_core::scene;
use mvs_core::synth;

fn render_to_temp(name: &str, scale: f64) -> (tempfile::TempDir, synth::RenderedScene) {
    let dir = tempfile::tempdir().unwrap();
    let spec = synth::fixture(name).unwrap().scaled(scale);
    let rendered = synth::render_to_dir(&spec, dir.path()).unwrap();
    (dir, rendered)
}

#[test]
fn synthetic_scene_round_trips_bit_identically() {
    let (dir, rendered) = render_to_temp("occluder", 0.2);
    let loaded = scene::load_scene(dir.path()).unwrap();
    assert_eq!(loaded.len(), rendered.views.len());

    // Float maps must round trip bit-exactly through PFM: save the loaded
    // scene again and compare raw bytes.
    let second = tempfile::tempdir().unwrap();
    scene::save_scene(second.path(), &loaded).unwrap();
    let reloaded = scene::load_scene(second.path()).unwrap();
    for (a, b) in loaded.iter().zip(&reloaded) {
        assert_eq!(a.priors.mono_depth.data(), b.priors.mono_depth.data());
        assert_eq!(a.priors.mono_normal.data(), b.priors.mono_normal.data());
        assert_eq!(a.priors.edge_map, b.priors.edge_map);
        assert_eq!(a.camera.image.data(), b.camera.image.data());
        assert_eq!(a.camera.k, b.camera.k);
        assert_eq!(a.camera.r, b.camera.r);
        assert_eq!(a.camera.t, b.camera.t);
    }
}

#[test]
fn loaded_cameras_satisfy_invariants() {
    let (dir, _) = render_to_temp("occluder", 0.2);
    let loaded = scene::load_scene(dir.path()).unwrap();
    for view in &loaded {
        let rtr = view.camera.r.transpose() * view.camera.r;
        assert!((rtr - nalgebra::Matrix3::identity()).abs().max() < 1e-6);
        // Normals were oriented toward the camera on load.
        for (x, y, n) in view.priors.mono_normal.enumerate() {
            let ray = view.camera.ray(x as f64, y as f64);
            let nv = nalgebra::Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            assert!(nv.dot(&ray) <= 1e-9, "normal at ({x},{y}) faces away");
            assert!((nv.norm() - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn dimension_mismatch_names_the_view() {
    let (dir, _) = render_to_temp("occluder", 0.2);
    // Overwrite one prior depth map with a wrong-sized one.
    let bad = mvs_core::Grid::new(100, 100, 1.0f32);
    mvs_core::io::pfm::write_gray(&dir.path().join("priors").join("depth_1.pfm"), &bad).unwrap();
    let err = scene::load_scene(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("view 1"), "unexpected error: {msg}");
    assert!(msg.contains("100x100"), "unexpected error: {msg}");
}

#[test]
fn malformed_camera_line_reports_line_number() {
    let (dir, _) = render_to_temp("occluder", 0.2);
    let path = dir.path().join("cameras.txt");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("7 not-a-number\n");
    std::fs::write(&path, text).unwrap();
    let err = scene::load_scene(dir.path()).unwrap_err();
    match err {
        mvs_core::MvsError::Parse { line, .. } => assert!(line >= 3),
        other => panic!("expected parse error, got {other}"),
    }
}

#[test]
fn missing_highlight_mask_defaults_to_zeros() {
    let (dir, _) = render_to_temp("occluder", 0.2);
    let loaded = scene::load_scene(dir.path()).unwrap();
    for view in &loaded {
        assert!(!view.priors.highlight_mask.iter().any(|m| *m));
        assert!(view.camera.corrected_image.is_none());
    }
}

#[test]
fn specular_scene_loads_mask_and_corrected_image() {
    let (dir, _) = render_to_temp("specular_disk", 0.2);
    let loaded = scene::load_scene(dir.path()).unwrap();
    assert!(loaded[0].priors.highlight_mask.iter().any(|m| *m));
    assert!(loaded[0].camera.corrected_image.is_some());
    // Views without the disk stay clean.
    assert!(!loaded[3].priors.highlight_mask.iter().any(|m| *m));
}

#[test]
fn depth_normal_results_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (40usize, 32usize);
    let result = scene::DepthNormalResult {
        depth: mvs_core::Grid::from_fn(w, h, |x, y| 1.0 + (x + y) as f32 * 0.01),
        normal: mvs_core::Grid::new(w, h, [0.0, 0.0, -1.0f32]),
        cost: mvs_core::Grid::new(w, h, 0.25f32),
        reliable: mvs_core::Grid::from_fn(w, h, |x, _| x % 2 == 0),
    };
    scene::save_depth_normal(&result, dir.path(), 3).unwrap();
    let back = scene::load_depth_normal(dir.path(), 3).unwrap();
    assert_eq!(result.depth.data(), back.depth.data());
    assert_eq!(result.normal.data(), back.normal.data());
    assert_eq!(result.cost.data(), back.cost.data());
    assert_eq!(result.reliable, back.reliable);
}

#[test]
fn non_finite_results_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (40usize, 32usize);
    let mut result = scene::DepthNormalResult {
        depth: mvs_core::Grid::new(w, h, 1.0f32),
        normal: mvs_core::Grid::new(w, h, [0.0, 0.0, -1.0f32]),
        cost: mvs_core::Grid::new(w, h, 0.25f32),
        reliable: mvs_core::Grid::new(w, h, true),
    };
    result.depth.set(3, 3, f32::NAN);
    assert!(scene::save_depth_normal(&result, dir.path(), 0).is_err());
}
