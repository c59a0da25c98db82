//! Command-line surface for the reconstruction engine: `simulate` renders a
//! synthetic dataset, `map` builds the sonar occupancy grid, `reconstruct`
//! runs the full pipeline to a colored point cloud, `measure` reports object
//! dimensions against ground truth, and `render-depth` / `graph-dump` are
//! debugging aids. All commands are deterministic under a fixed seed.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use optiacoustic::acoustic::OccupancyGrid;
use optiacoustic::config::Config;
use optiacoustic::dataset::{write_dataset, Dataset};
use optiacoustic::extproc::{CachingProvider, ExternalProcessProvider, ReplayProvider};
use optiacoustic::geometry::RigidTransform;
use optiacoustic::measure::{format_report, measure_scene};
use optiacoustic::oracle::{OracleConfig, OracleProvider};
use optiacoustic::pipeline::Pipeline;
use optiacoustic::ply::{read_ply, write_ply};
use optiacoustic::pointmap::PointmapProvider;
use optiacoustic::sim::{
    gen_trajectory, Scene, SceneObject, Shape, TrajectoryKind, TurbidityModel,
};

#[derive(Parser)]
#[command(name = "optiacoustic", version, about = "Metric-scale opti-acoustic 3D reconstruction")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-frame diagnostics on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenePreset {
    /// Sediment floor and four objects (brick, cinder block, pipe, mug).
    Benchmark,
    /// One 0.2 m cube, no floor.
    SingleBox,
    /// Nothing at all.
    Empty,
}

impl ScenePreset {
    fn build(self) -> Scene {
        match self {
            ScenePreset::Benchmark => Scene::benchmark(),
            ScenePreset::SingleBox => Scene {
                objects: vec![SceneObject {
                    name: "cube".into(),
                    shape: Shape::Box { half_extents: [0.1, 0.1, 0.1] },
                    pose: RigidTransform::from_axis_angle(
                        Vector3::z(),
                        0.3,
                        Vector3::new(0.0, 0.0, 0.1),
                    ),
                    color: [204, 174, 98],
                }],
                floor: None,
            },
            ScenePreset::Empty => Scene::empty(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajectoryArg {
    /// Wide mapping arc with an oscillating wrist tilt.
    Sweep,
    /// Close-range approaches to each object.
    ObjectCentric,
}

impl From<TrajectoryArg> for TrajectoryKind {
    fn from(t: TrajectoryArg) -> TrajectoryKind {
        match t {
            TrajectoryArg::Sweep => TrajectoryKind::Sweep,
            TrajectoryArg::ObjectCentric => TrajectoryKind::ObjectCentric,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset: frames, sonar scans, poses, manifest.
    Simulate {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ScenePreset::Benchmark)]
        scene: ScenePreset,
        #[arg(long, value_enum, default_value_t = TrajectoryArg::ObjectCentric)]
        trajectory: TrajectoryArg,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Water turbidity tag (NTU); degrades provider confidence with range.
        #[arg(long, default_value_t = 0.0)]
        ntu: f64,
    },
    /// Integrate a dataset's sonar scans into an occupancy grid file.
    Map {
        #[arg(long)]
        dataset: PathBuf,
        /// Output grid file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reconstruction pipeline over a dataset.
    Reconstruct {
        #[arg(long)]
        dataset: PathBuf,
        /// Occupancy grid from `map`; when omitted the scans are integrated
        /// in-process first.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Output directory for cloud.ply, diagnostics.log, and graph.txt.
        #[arg(long)]
        out: PathBuf,
        /// Re-optimize every graph component on each keyframe insertion,
        /// not just the affected one.
        #[arg(long)]
        full_graph_opt: bool,
        /// Drop frames that fall behind this wall-clock rate instead of
        /// replaying every frame.
        #[arg(long)]
        realtime_fps: Option<f64>,
    },
    /// Report object dimensions measured in a reconstructed cloud.
    Measure {
        /// Point cloud (PLY) from `reconstruct`.
        #[arg(long)]
        cloud: PathBuf,
        /// Dataset whose manifest carries the ground-truth scene.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Render the acoustic depth image for one dataset pose (debug aid).
    RenderDepth {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Pose index within the dataset.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Output raster: "DPTH", u32 width, u32 height, f32 depths (LE).
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct and print the keyframe graph as text.
    GraphDump {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        full_graph_opt: bool,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { out, scene, trajectory, frames, ntu } => {
            cmd_simulate(&cfg, &out, scene, trajectory, frames, ntu)
        }
        Command::Map { dataset, out } => cmd_map(&cfg, &dataset, &out),
        Command::Reconstruct { dataset, grid, out, full_graph_opt, realtime_fps } => {
            cmd_reconstruct(
                &cfg,
                &dataset,
                grid.as_deref(),
                &out,
                full_graph_opt,
                realtime_fps,
                cli.verbose,
            )
        }
        Command::Measure { cloud, dataset } => cmd_measure(&cloud, &dataset),
        Command::RenderDepth { grid, dataset, frame, out } => {
            cmd_render_depth(&grid, &dataset, frame, &out)
        }
        Command::GraphDump { dataset, grid, full_graph_opt } => {
            let ds = open_dataset(&dataset)?;
            let grid = build_grid(&cfg, &ds, grid.as_deref())?;
            let pipeline = run_reconstruction(&cfg, &ds, grid, full_graph_opt, None, cli.verbose)?;
            print!("{}", pipeline.graph().dump());
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("config {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("dataset {}", dir.display()))
}

fn cmd_simulate(
    cfg: &Config,
    out: &Path,
    scene: ScenePreset,
    trajectory: TrajectoryArg,
    frames: usize,
    ntu: f64,
) -> Result<()> {
    if frames == 0 {
        bail!("--frames must be at least 1");
    }
    if !(ntu >= 0.0) {
        bail!("--ntu must be a nonnegative number");
    }
    let cam = cfg.pinhole()?;
    let sonar = cfg.sonar_params();
    let scene = scene.build();
    let poses = gen_trajectory(trajectory.into(), &scene, frames);
    write_dataset(out, &scene, &cam, &sonar, &poses, ntu, cfg.seed)
        .with_context(|| format!("writing dataset {}", out.display()))?;
    println!(
        "dataset {} frames {} ntu {} seed {}",
        out.display(),
        frames,
        ntu,
        cfg.seed
    );
    Ok(())
}

fn cmd_map(cfg: &Config, dataset: &Path, out: &Path) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let grid = integrate_dataset(cfg, &ds)?;
    grid.save(out).with_context(|| format!("writing grid {}", out.display()))?;
    println!(
        "grid {} dims {}x{}x{} occupied {} sweep_coverage {:.4}",
        out.display(),
        grid.dims[0],
        grid.dims[1],
        grid.dims[2],
        grid.occupied_count(),
        grid.sweep_coverage()
    );
    Ok(())
}

fn integrate_dataset(cfg: &Config, ds: &Dataset) -> Result<OccupancyGrid> {
    if ds.is_empty() {
        bail!("dataset has no frames");
    }
    let g = &cfg.grid;
    let mut grid = OccupancyGrid::with_rule(
        Vector3::new(g.origin[0], g.origin[1], g.origin[2]),
        g.resolution,
        cfg.grid_dims(),
        g.k_hit,
        g.r_occ,
    )?;
    for i in 0..ds.len() {
        let scan = ds
            .sonar_scan(i)
            .with_context(|| format!("sonar scan {i} missing or unreadable"))?;
        grid.integrate_scan(&scan, cfg.sonar.hit_threshold)?;
    }
    Ok(grid)
}

fn build_grid(cfg: &Config, ds: &Dataset, path: Option<&Path>) -> Result<OccupancyGrid> {
    match path {
        Some(p) => OccupancyGrid::load(p).with_context(|| format!("grid {}", p.display())),
        None => integrate_dataset(cfg, ds),
    }
}

fn make_provider(cfg: &Config, ds: &Dataset) -> Result<Box<dyn PointmapProvider>> {
    let p = &cfg.provider;
    match p.kind.as_str() {
        "oracle" => {
            let cam = ds.manifest.camera.to_camera()?;
            let oracle_cfg = OracleConfig {
                noise_sigma: p.noise_sigma,
                outlier_fraction: p.outlier_fraction,
                scale_range: (p.scale_min, p.scale_max),
                turbidity: TurbidityModel::new(ds.manifest.ntu),
                seed: cfg.seed,
                ..OracleConfig::default()
            };
            let oracle = OracleProvider::new(ds.manifest.scene.to_scene(), cam, oracle_cfg);
            if p.cache_dir.is_empty() {
                Ok(Box::new(oracle))
            } else {
                Ok(Box::new(CachingProvider::new(oracle, Path::new(&p.cache_dir))?))
            }
        }
        "replay" => {
            if p.cache_dir.is_empty() {
                bail!("provider.kind = \"replay\" needs provider.cache_dir");
            }
            Ok(Box::new(ReplayProvider::new(Path::new(&p.cache_dir))))
        }
        "external" => {
            let mut words = p.command.split_whitespace();
            let Some(program) = words.next() else {
                bail!("provider.kind = \"external\" needs provider.command");
            };
            let args: Vec<String> = words.map(str::to_string).collect();
            Ok(Box::new(ExternalProcessProvider::new(
                program,
                &args,
                &ds.root,
                Duration::from_millis(p.timeout_ms),
            )?))
        }
        other => bail!("unknown provider kind {other:?}"),
    }
}

fn run_reconstruction(
    cfg: &Config,
    ds: &Dataset,
    grid: OccupancyGrid,
    full_graph_opt: bool,
    realtime_fps: Option<f64>,
    verbose: bool,
) -> Result<Pipeline> {
    let cam = ds.manifest.camera.to_camera()?;
    let mut provider = make_provider(cfg, ds)?;
    let mut pipeline = Pipeline::new(cfg, cam, grid);
    pipeline.set_full_graph_opt(full_graph_opt);
    let start = Instant::now();
    for i in 0..ds.len() {
        if let Some(fps) = realtime_fps {
            // A frame is due at i/fps; once the clock is a full period past
            // that, replaying it would only grow the backlog.
            let lateness = start.elapsed().as_secs_f64() - i as f64 / fps;
            if lateness > 1.0 / fps {
                let d = pipeline.skip_frame(i as u64, "dropped_realtime");
                if verbose {
                    eprintln!("{}", d.line());
                }
                continue;
            }
        }
        let d = match ds.frame(i) {
            Ok(frame) => pipeline.process_frame(provider.as_mut(), frame),
            Err(e) => pipeline.skip_frame(i as u64, &format!("frame_unreadable {e}")),
        };
        if verbose {
            eprintln!("{}", d.line());
        }
    }
    Ok(pipeline)
}

fn cmd_reconstruct(
    cfg: &Config,
    dataset: &Path,
    grid: Option<&Path>,
    out: &Path,
    full_graph_opt: bool,
    realtime_fps: Option<f64>,
    verbose: bool,
) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let grid = build_grid(cfg, &ds, grid)?;
    let pipeline = run_reconstruction(cfg, &ds, grid, full_graph_opt, realtime_fps, verbose)?;

    std::fs::create_dir_all(out)?;
    let mut log = String::new();
    for d in pipeline.diagnostics() {
        log.push_str(&d.line());
        log.push('\n');
    }
    std::fs::write(out.join("diagnostics.log"), &log)?;
    std::fs::write(out.join("graph.txt"), pipeline.graph().dump())?;

    if pipeline.graph().nodes.is_empty() {
        let tail: Vec<String> = pipeline
            .diagnostics()
            .iter()
            .rev()
            .take(5)
            .rev()
            .map(|d| d.line())
            .collect();
        for line in &tail {
            eprintln!("{line}");
        }
        bail!("initialization never succeeded; diagnostic tail above");
    }

    let cloud = pipeline.export_cloud();
    let (points, colors) = cloud.as_ply();
    let ply_path = out.join("cloud.ply");
    write_ply(&ply_path, &points, &colors)
        .with_context(|| format!("writing {}", ply_path.display()))?;

    let skipped = pipeline.diagnostics().iter().filter(|d| d.skipped).count();
    println!(
        "cloud {} points {} keyframes {} components {} frames {} skipped {}",
        ply_path.display(),
        cloud.len(),
        pipeline.graph().nodes.len(),
        pipeline.graph().component_count(),
        pipeline.frames_processed(),
        skipped
    );
    Ok(())
}

fn cmd_measure(cloud: &Path, dataset: &Path) -> Result<()> {
    let (points, _) = read_ply(cloud).with_context(|| format!("cloud {}", cloud.display()))?;
    let ds = open_dataset(dataset)?;
    let scene = ds.manifest.scene.to_scene();
    if scene.objects.is_empty() {
        bail!("dataset scene has no objects to measure");
    }
    let report = measure_scene(&points, &scene);
    print!("{}", format_report(&report));
    Ok(())
}

fn cmd_render_depth(grid: &Path, dataset: &Path, frame: usize, out: &Path) -> Result<()> {
    let grid = OccupancyGrid::load(grid).with_context(|| format!("grid {}", grid.display()))?;
    let ds = open_dataset(dataset)?;
    let Some(pose) = ds.poses.get(frame) else {
        bail!("frame {frame} out of range ({} poses)", ds.poses.len());
    };
    let cam = ds.manifest.camera.to_camera()?;
    let depth = grid.render_depth(&cam, pose);

    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    f.write_all(b"DPTH")?;
    f.write_all(&(depth.width as u32).to_le_bytes())?;
    f.write_all(&(depth.height as u32).to_le_bytes())?;
    for &v in &depth.data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;

    let valid: Vec<f32> = depth.data.iter().copied().filter(|v| v.is_finite()).collect();
    let frac = valid.len() as f64 / depth.data.len() as f64;
    let (min, max) = valid
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!(
        "depth {} {}x{} valid {:.3} range [{:.3}, {:.3}]",
        out.display(),
        depth.width,
        depth.height,
        frac,
        min,
        max
    );
    Ok(())
}
