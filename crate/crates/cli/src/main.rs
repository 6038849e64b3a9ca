//! `dvp`: synthesize, solve, fuse and evaluate multi-view stereo scenes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvs_core::io::ply;
use mvs_core::{atlas, eval, fusion, scene, solver, synth, MvsError, Params};

#[derive(Parser)]
#[command(
    name = "dvp",
    about = "Deformable, visibility-aware PatchMatch multi-view stereo",
    version
)]
struct Cli {
    /// Worker threads (0 = all logical cores). DVP_THREADS mirrors this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override single keys, e.g. `--set tau_rel=0.25` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,

    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<Params, MvsError> {
        let mut params = Params::default();
        if let Some(path) = &self.config {
            params.load_overrides(path)?;
        }
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                MvsError::Invalid(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            params.set(key.trim(), value)?;
        }
        if let Some(seed) = self.seed {
            params.seed = seed;
        }
        Ok(params)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a named synthetic fixture into a scene directory.
    Synth {
        /// Fixture name (see `docs/fixtures.md`).
        fixture: String,
        /// Output scene directory.
        out: PathBuf,
        /// Resolution scale factor.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Estimate depth/normal maps for a scene.
    Solve {
        /// Scene directory.
        scene: PathBuf,
        /// Output directory for the per-view maps.
        out: PathBuf,
        /// Solve only this view id.
        #[arg(long)]
        view: Option<u32>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fuse per-view maps into a point cloud.
    Fuse {
        scene: PathBuf,
        /// Directory holding the maps written by `solve`.
        depthmaps: PathBuf,
        /// Output PLY path.
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a cloud against ground truth.
    Evaluate {
        cloud: PathBuf,
        gt: PathBuf,
        /// Distance threshold in world units.
        #[arg(long)]
        tau: f64,
        /// JSON report path (defaults to `<cloud>.eval.json`).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// All stages: synthesize a fixture (or reuse a scene directory),
    /// solve, fuse and evaluate; writes `report.json` into `out`.
    Pipeline {
        /// Fixture name or existing scene directory.
        scene: String,
        out: PathBuf,
        /// Resolution scale when synthesizing a fixture.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Evaluation threshold as a fraction of the scene diameter.
        #[arg(long, default_value_t = 0.005)]
        tau_rel: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Dump a view's region atlas (debug aid).
    Atlas {
        scene: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: u32,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let threads = if cli.threads > 0 {
        cli.threads
    } else {
        std::env::var("DVP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.downcast_ref::<MvsError>() {
                Some(
                    MvsError::Parse { .. }
                    | MvsError::Validation { .. }
                    | MvsError::Invalid(_)
                    | MvsError::Format { .. },
                ) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn handle_dump(config: &ConfigArgs) -> Result<bool, MvsError> {
    if config.dump_config {
        print!("{}", config.build()?.dump());
        return Ok(true);
    }
    Ok(false)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth {
            fixture,
            out,
            scale,
            config,
        } => {
            if handle_dump(&config)? {
                return Ok(());
            }
            let _ = config.build()?;
            let spec = lookup_fixture(&fixture)?;
            let spec = if (scale - 1.0).abs() > 1e-12 {
                spec.scaled(scale)
            } else {
                spec
            };
            synth::render_to_dir(&spec, &out)?;
            eprintln!("wrote scene {:?} ({} views)", out, spec.cameras.len());
            Ok(())
        }
        Command::Solve {
            scene: scene_dir,
            out,
            view,
            config,
        } => {
            if handle_dump(&config)? {
                return Ok(());
            }
            let params = config.build()?;
            let views = scene::load_scene(&scene_dir)?;
            let results = match view {
                Some(id) => {
                    let idx = views
                        .iter()
                        .position(|v| v.camera.id == id)
                        .ok_or_else(|| MvsError::Invalid(format!("no view with id {id}")))?;
                    solver::solve_views(&views, &[idx], &params)?
                }
                None => solver::solve_scene(&views, &params)?,
            };
            for (idx, result, _) in &results {
                scene::save_depth_normal(result, &out, views[*idx].camera.id)?;
            }
            Ok(())
        }
        Command::Fuse {
            scene: scene_dir,
            depthmaps,
            out,
            config,
        } => {
            if handle_dump(&config)? {
                return Ok(());
            }
            let params = config.build()?;
            let views = scene::load_scene(&scene_dir)?;
            let results: Vec<scene::DepthNormalResult> = views
                .iter()
                .map(|v| scene::load_depth_normal(&depthmaps, v.camera.id))
                .collect::<Result<_, _>>()?;
            let cloud = fusion::fuse(&views, &results, &params)?;
            scene::save_point_cloud(&cloud.to_ply(), &out, ply::PlyFormat::BinaryLittleEndian)?;
            eprintln!("fused {} points", cloud.points.len());
            Ok(())
        }
        Command::Evaluate {
            cloud,
            gt,
            tau,
            json,
        } => {
            let report = evaluate_files(&cloud, &gt, tau)?;
            print_report_table(&report);
            let json_path = json.unwrap_or_else(|| cloud.with_extension("eval.json"));
            write_report_json(&json_path, &serde_json::to_value(&report)?)?;
            Ok(())
        }
        Command::Pipeline {
            scene: scene_arg,
            out,
            scale,
            tau_rel,
            config,
        } => {
            if handle_dump(&config)? {
                return Ok(());
            }
            let params = config.build()?;
            run_pipeline(&scene_arg, &out, scale, tau_rel, &params)
        }
        Command::Atlas {
            scene: scene_dir,
            out,
            view,
            config,
        } => {
            if handle_dump(&config)? {
                return Ok(());
            }
            let params = config.build()?;
            let views = scene::load_scene(&scene_dir)?;
            let v = views
                .iter()
                .find(|v| v.camera.id == view)
                .ok_or_else(|| MvsError::Invalid(format!("no view with id {view}")))?;
            let built = atlas::build_atlas(&v.camera, &v.priors, &params);
            atlas::dump_atlas(&built, &out, view)?;
            eprintln!("atlas for view {view}: {} regions", built.regions.len());
            Ok(())
        }
    }
}

fn lookup_fixture(name: &str) -> Result<synth::SceneSpec, MvsError> {
    synth::fixture(name).ok_or_else(|| {
        let names: Vec<String> = synth::standard_fixtures()
            .into_iter()
            .map(|s| s.name)
            .collect();
        MvsError::Invalid(format!(
            "unknown fixture {name:?}; available: {}",
            names.join(", ")
        ))
    })
}

fn evaluate_files(cloud: &Path, gt: &Path, tau: f64) -> anyhow::Result<eval::EvalReport> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(MvsError::Invalid(format!("tau must be positive, got {tau}")).into());
    }
    let cloud_points: Vec<_> = ply::read(cloud)?.iter().map(|p| p.position).collect();
    let gt_points: Vec<_> = ply::read(gt)?.iter().map(|p| p.position).collect();
    Ok(eval::evaluate(&cloud_points, &gt_points, tau))
}

fn print_report_table(report: &eval::EvalReport) {
    println!("{:<12} {:>10} {:>14} {:>10}", "threshold", "accuracy", "completeness", "f1");
    println!(
        "{:<12.6} {:>10.2} {:>14.2} {:>10.2}",
        report.threshold, report.accuracy, report.completeness, report.f1
    );
}

fn write_report_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run_pipeline(
    scene_arg: &str,
    out: &Path,
    scale: f64,
    tau_rel: f64,
    params: &Params,
) -> anyhow::Result<()> {
    let started = std::time::Instant::now();
    let scene_path = Path::new(scene_arg);
    let (scene_dir, fixture_name) = if scene_path.is_dir() {
        (scene_path.to_path_buf(), None)
    } else {
        let spec = lookup_fixture(scene_arg)?;
        let spec = if (scale - 1.0).abs() > 1e-12 {
            spec.scaled(scale)
        } else {
            spec
        };
        let dir = out.join("scene");
        synth::render_to_dir(&spec, &dir)?;
        (dir, Some(scene_arg.to_string()))
    };

    let views = scene::load_scene(&scene_dir)?;
    let results = solver::solve_scene(&views, params)?;
    let maps_dir = out.join("maps");
    for (idx, result, _) in &results {
        scene::save_depth_normal(result, &maps_dir, views[*idx].camera.id)?;
    }

    let result_maps: Vec<scene::DepthNormalResult> =
        results.iter().map(|(_, r, _)| r.clone()).collect();
    let cloud = fusion::fuse(&views, &result_maps, params)?;
    let cloud_path = out.join("fused.ply");
    scene::save_point_cloud(&cloud.to_ply(), &cloud_path, ply::PlyFormat::BinaryLittleEndian)?;

    let gt_path = scene_dir.join("gt").join("cloud.ply");
    let mut report_json = serde_json::json!({
        "schema": 1,
        "fixture": fixture_name,
        "scene": scene_dir.to_string_lossy(),
        "views": views.len(),
        "points": cloud.points.len(),
        "per_view": results
            .iter()
            .map(|(idx, _, diag)| {
                serde_json::json!({
                    "view": views[*idx].camera.id,
                    "mean_cost": diag.mean_cost,
                    "reliable_frac": diag.reliable_frac,
                })
            })
            .collect::<Vec<_>>(),
    });
    if gt_path.exists() {
        let gt_points: Vec<_> = ply::read(&gt_path)?.iter().map(|p| p.position).collect();
        let mut lo = nalgebra::Vector3::repeat(f64::INFINITY);
        let mut hi = nalgebra::Vector3::repeat(f64::NEG_INFINITY);
        for p in &gt_points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let tau = tau_rel * (hi - lo).norm();
        let report = eval::evaluate(&cloud.positions(), &gt_points, tau);
        print_report_table(&report);
        report_json["tau"] = serde_json::json!(tau);
        report_json["accuracy"] = serde_json::json!(report.accuracy);
        report_json["completeness"] = serde_json::json!(report.completeness);
        report_json["f1"] = serde_json::json!(report.f1);
    }
    report_json["elapsed_s"] = serde_json::json!(started.elapsed().as_secs_f64());
    write_report_json(&out.join("report.json"), &report_json)?;
    Ok(())
}
