//! Subcommands of the `auto4d` binary.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use auto4d_core::eval::train::flag_static;
use auto4d_core::eval::{
    auto4d_refine, detect_and_track, eval_labels, generate_scene, labelable_gt, report_criteria, run_pipeline,
    train_models, Criterion, EvalTable, Models, PipelineConfig, Report, Split,
};
use auto4d_core::nn::ParamSet;
use auto4d_core::path_branch::PathModel;
use auto4d_core::sim::fragment_tracks;
use auto4d_core::size_branch::{Align, SizeModel};
use auto4d_core::store::{read_scene, read_trajectories, write_scene, write_trajectories, INIT};
use auto4d_core::Trajectory;

use crate::service::{self, RefineModels, ServiceConfig};

pub const SIZE_CKPT: &str = "size.a4dp";
pub const PATH_CKPT: &str = "path.a4dp";

#[derive(Debug, Parser)]
#[command(name = "auto4d", version, about = "Offline 4D auto-labeling: simulate, refine, evaluate, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a pipeline configuration as JSON.
    Config(ConfigArgs),
    /// Simulate benchmark scenes with their initial tracks into a store.
    Simulate(SimulateArgs),
    /// Re-run detection noise and tracking for a stored scene.
    Track(TrackArgs),
    /// Apply the size branch to a scene's trajectories.
    RefineSize(RefineSizeArgs),
    /// Apply the path branch to a scene's trajectories.
    RefinePath(RefinePathArgs),
    /// Train both branches and write their checkpoints.
    Train(TrainArgs),
    /// Run every variant on the test split and write the report.
    Eval(EvalArgs),
    /// Render a JSON report as markdown.
    Report(ReportArgs),
    /// Serve a scene store over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ConfigOpt {
    /// Pipeline configuration (JSON); defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigOpt {
    pub fn load(&self) -> Result<PipelineConfig> {
        let cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// The reduced configuration used for smoke runs.
    #[arg(long)]
    pub small: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigOpt,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Cut the initial tracks as the annotator loop does, leaving fragments to link.
    #[arg(long)]
    pub fragment: bool,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub config: ConfigOpt,
    #[arg(long)]
    pub scene: PathBuf,
    /// Use the reduced-variance offline detector emulation.
    #[arg(long)]
    pub offline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct RefineSizeArgs {
    #[command(flatten)]
    pub config: ConfigOpt,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "corner")]
    pub align: Align,
    #[arg(long, value_enum, default_value = "off")]
    pub world_static: Switch,
    /// Trajectories to refine; the scene's init.json by default.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefinePathArgs {
    #[command(flatten)]
    pub config: ConfigOpt,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
    /// Multiplicative world-coordinate pose update instead of box-frame offsets.
    #[arg(long)]
    pub literal_update: bool,
    /// Trajectories to refine; refined_size.json when present, else init.json.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigOpt,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigOpt,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate these checkpoints instead of training.
    #[arg(long, requires = "path_ckpt")]
    pub size_ckpt: Option<PathBuf>,
    #[arg(long, requires = "size_ckpt")]
    pub path_ckpt: Option<PathBuf>,
    /// Exit nonzero when any report criterion fails.
    #[arg(long)]
    pub gate: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Markdown output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub gate: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigOpt,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
    #[arg(long, requires = "path_ckpt")]
    pub size_ckpt: Option<PathBuf>,
    #[arg(long, requires = "size_ckpt")]
    pub path_ckpt: Option<PathBuf>,
    /// Point decimation when a frame request does not give one.
    #[arg(long, default_value_t = 4)]
    pub decimate: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config(a) => config(a),
        Command::Simulate(a) => simulate(a),
        Command::Track(a) => track(a),
        Command::RefineSize(a) => refine_size(a),
        Command::RefinePath(a) => refine_path(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn config(a: ConfigArgs) -> Result<()> {
    let cfg = if a.small { PipelineConfig::small() } else { PipelineConfig::default() };
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    cfg.bench.validate()?;
    let indices: Vec<usize> = match a.split {
        SplitArg::Train => cfg.bench.indices(Split::Train).collect(),
        SplitArg::Val => cfg.bench.indices(Split::Val).collect(),
        SplitArg::Test => cfg.bench.indices(Split::Test).collect(),
        SplitArg::All => (0..cfg.bench.n_scenes()).collect(),
    };
    let annot = cfg.annotator.clone().unwrap_or_default();
    fs::create_dir_all(&a.store)?;
    for i in indices {
        let scene = generate_scene(&cfg.bench, i)?;
        let init = if a.fragment {
            fragment_tracks(&scene.init, annot.fragment_rate, annot.cuts, scene.seed).trajectories
        } else {
            scene.init
        };
        let id = format!("{i:04}");
        let dir = write_scene(&a.store, &id, &cfg.bench.scene, &scene.log, &init)?;
        log::info!("scene {id}: {} tracks -> {}", init.len(), dir.display());
    }
    Ok(())
}

fn track(a: TrackArgs) -> Result<()> {
    let cfg = a.config.load()?;
    ensure!(
        !a.scene.join(service::JOURNAL).exists(),
        "{} has annotator edits that refer to the current tracks; remove {} first",
        a.scene.display(),
        service::JOURNAL
    );
    let (manifest, log, _) = read_scene(&a.scene)?;
    let gt = labelable_gt(&log, cfg.bench.min_points);
    let noise = if a.offline {
        cfg.bench.noise.with_variance_scale(cfg.bench.offline_variance_scale)
    } else {
        cfg.bench.noise.clone()
    };
    let init = detect_and_track(&log, &gt, &noise, &cfg.bench.tracker, manifest.seed)?;
    write_trajectories(&a.scene.join(INIT), &init)?;
    print_quality("tracks", &eval_labels(&init, &gt));
    Ok(())
}

fn load_size(cfg: &PipelineConfig, ckpt: &Path) -> Result<SizeModel> {
    let params = ParamSet::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(SizeModel::from_params(cfg.size.clone(), params)?)
}

fn load_path(cfg: &PipelineConfig, ckpt: &Path) -> Result<PathModel> {
    let params = ParamSet::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(PathModel::from_params(cfg.path.clone(), params)?)
}

fn print_quality(name: &str, t: &EvalTable) {
    let cells: Vec<String> = t
        .thresholds
        .iter()
        .zip(&t.fractions)
        .map(|(th, f)| format!("≥{th}: {:.1}%", 100.0 * f))
        .collect();
    println!("{name}: {} ({} boxes)", cells.join(", "), t.total);
}

fn read_input(scene: &Path, input: Option<PathBuf>, fallbacks: &[&str]) -> Result<(PathBuf, Vec<Trajectory>)> {
    let path = match input {
        Some(p) => p,
        None => fallbacks
            .iter()
            .map(|f| scene.join(f))
            .find(|p| p.is_file())
            .with_context(|| format!("no input trajectories in {}", scene.display()))?,
    };
    let ts = read_trajectories(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok((path, ts))
}

fn refine_size(a: RefineSizeArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let mut model = load_size(&cfg, &a.ckpt)?;
    model.cfg.world_static = a.world_static == Switch::On;
    let (manifest, log, _) = read_scene(&a.scene)?;
    let (input, trajs) = read_input(&a.scene, a.input, &[INIT])?;
    let out = auto4d_refine(&log, &trajs, &model, None, a.align)?;
    let dest = a.out.unwrap_or_else(|| a.scene.join("refined_size.json"));
    write_trajectories(&dest, &out)?;
    let gt = labelable_gt(&log, cfg.bench.min_points);
    println!("scene {}: {} -> {}", manifest.scene_id, input.display(), dest.display());
    print_quality("input", &eval_labels(&trajs, &gt));
    print_quality("refined", &eval_labels(&out, &gt));
    Ok(())
}

fn refine_path(a: RefinePathArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.path.window = a.window;
    cfg.path.stride = a.stride;
    cfg.path.literal_update = a.literal_update;
    cfg.path.validate()?;
    let model = load_path(&cfg, &a.ckpt)?;
    let (manifest, log, _) = read_scene(&a.scene)?;
    let (input, mut trajs) = read_input(&a.scene, a.input, &["refined_size.json", INIT])?;
    flag_static(&mut trajs, &cfg.path);
    let out = trajs
        .iter()
        .map(|t| model.refine_trajectory(&log, t))
        .collect::<auto4d_core::Result<Vec<_>>>()?;
    let dest = a.out.unwrap_or_else(|| a.scene.join("refined.json"));
    write_trajectories(&dest, &out)?;
    let gt = labelable_gt(&log, cfg.bench.min_points);
    println!("scene {}: {} -> {}", manifest.scene_id, input.display(), dest.display());
    print_quality("input", &eval_labels(&trajs, &gt));
    print_quality("refined", &eval_labels(&out, &gt));
    Ok(())
}

fn save_models(models: &Models, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    models.size.params.save(&out.join(SIZE_CKPT))?;
    models.path.params.save(&out.join(PATH_CKPT))?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(
        &out.join("training.json"),
        &serde_json::json!({
            "config_digest": cfg.digest(),
            "size": models.size_report,
            "path": models.path_report,
        }),
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let models = train_models(&cfg)?;
    save_models(&models, &cfg, &a.out)?;
    for (name, r) in [("size", &models.size_report), ("path", &models.path_report)] {
        if let Some(r) = r {
            println!("{name}: {} samples, {} steps, loss {:.4} -> {:.4}", r.samples, r.steps, r.initial_loss, r.final_loss);
        }
    }
    println!("checkpoints in {}", a.out.display());
    Ok(())
}

fn apply_gate(criteria: &[Criterion], gate: bool) -> Result<()> {
    for c in criteria {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = criteria.iter().filter(|c| !c.pass).count();
    if gate && failed > 0 {
        bail!("acceptance gate failed: {failed} of {} criteria", criteria.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let models = match (&a.size_ckpt, &a.path_ckpt) {
        (Some(s), Some(p)) => Models {
            size: load_size(&cfg, s)?,
            path: load_path(&cfg, p)?,
            size_report: None,
            path_report: None,
        },
        _ => {
            let m = train_models(&cfg)?;
            save_models(&m, &cfg, &a.out)?;
            m
        }
    };
    let report = run_pipeline(&cfg, &models)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.json"), report.to_json())?;
    fs::write(a.out.join("report.md"), report.to_markdown())?;
    println!("{}", report.to_markdown());
    apply_gate(&report_criteria(&report), a.gate)
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report: Report = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let md = report.to_markdown();
    match &a.out {
        Some(p) => fs::write(p, md).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{md}"),
    }
    if a.gate {
        apply_gate(&report_criteria(&report), true)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = a.config.load()?;
    ensure!(a.store.is_dir(), "store {} is not a directory", a.store.display());
    let models = match (&a.size_ckpt, &a.path_ckpt) {
        (Some(s), Some(p)) => Some(RefineModels {
            size: load_size(&cfg, s)?,
            path: load_path(&cfg, p)?,
        }),
        _ => {
            log::warn!("no checkpoints given; refinement requests will be refused");
            None
        }
    };
    let svc = ServiceConfig {
        store: a.store.clone(),
        models,
        min_points: cfg.bench.min_points,
        static_cfg: cfg.path.clone(),
        default_decimate: a.decimate.max(1),
    };
    let scenes = auto4d_core::store::list_scenes(&a.store)?;
    log::info!("{} scene(s) in {}", scenes.len(), a.store.display());
    let addr = SocketAddr::new(a.bind, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(svc, addr))?;
    Ok(())
}
