//! End-to-end comparison of labeling variants on the benchmark test split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::label::Trajectory;
use crate::path_branch::{PathBranchConfig, PathModel};
use crate::sim::{fragment_tracks, SceneLog};
use crate::size_branch::{apply_size, Align, SizeBranchConfig, SizeModel};
use crate::track::{kalman_smooth, size_baseline, SizeStrategy};

use super::bench::{generate_scene, BenchScene, BenchmarkConfig, Split};
use super::link::simulate_annotator_link;
use super::metrics::{breakdown_static_moving, eval_labels, EvalTable};
use super::train::{
    flag_static, path_samples, resize_all, size_samples, train_path_on, train_size_on,
    TrainConfig, TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Tracked detections as they come out of the online detector.
    Init,
    /// Same tracker on the lower-variance emulated offline detector.
    OfflineDetector,
    /// Kalman/RTS smoothing of the initial poses.
    Kalman,
    SizeRandom,
    SizeMean,
    SizeMedian,
    SizeScore,
    /// Learned size, corner-aligned.
    Auto4dSize,
    /// Learned size, center-aligned.
    Auto4dSizeCenter,
    /// Learned size with world-frame aggregation for static objects.
    Auto4dSizeWorld,
    /// Learned size followed by learned path refinement.
    Auto4dSizePath,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Init,
        Variant::OfflineDetector,
        Variant::Kalman,
        Variant::SizeRandom,
        Variant::SizeMean,
        Variant::SizeMedian,
        Variant::SizeScore,
        Variant::Auto4dSize,
        Variant::Auto4dSizeCenter,
        Variant::Auto4dSizeWorld,
        Variant::Auto4dSizePath,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Init => "init (online detector + tracker)",
            Variant::OfflineDetector => "offline detector emulation + tracker",
            Variant::Kalman => "init + Kalman/RTS smoother",
            Variant::SizeRandom => "size: random frame",
            Variant::SizeMean => "size: mean",
            Variant::SizeMedian => "size: median",
            Variant::SizeScore => "size: highest score",
            Variant::Auto4dSize => "Auto4D size (corner)",
            Variant::Auto4dSizeCenter => "Auto4D size (center)",
            Variant::Auto4dSizeWorld => "Auto4D size (corner, world-static)",
            Variant::Auto4dSizePath => "Auto4D size + path",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    /// Test scenes (from the start of the split) that go through the loop.
    pub scenes: usize,
    /// Probability that a trajectory is cut.
    pub fragment_rate: f64,
    pub cuts: usize,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            fragment_rate: 0.5,
            cuts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bench: BenchmarkConfig,
    pub size: SizeBranchConfig,
    pub path: PathBranchConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub annotator: Option<AnnotatorConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bench: BenchmarkConfig::default(),
            size: SizeBranchConfig::default(),
            path: PathBranchConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            annotator: Some(AnnotatorConfig::default()),
        }
    }
}

impl PipelineConfig {
    /// A few short scenes and brief training; for smoke runs, not for numbers.
    pub fn small() -> Self {
        let mut cfg = Self::default();
        cfg.bench.train_scenes = 3;
        cfg.bench.val_scenes = 1;
        cfg.bench.test_scenes = 2;
        cfg.bench.scene.n_frames = 30;
        cfg.train.size_steps = 20;
        cfg.train.path_steps = 20;
        cfg.train.probe_samples = 8;
        if let Some(a) = cfg.annotator.as_mut() {
            a.scenes = 1;
        }
        cfg
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Trained models plus their training curves.
#[derive(Debug, Clone)]
pub struct Models {
    pub size: SizeModel,
    pub path: PathModel,
    /// Absent for models loaded from checkpoints.
    pub size_report: Option<TrainReport>,
    pub path_report: Option<TrainReport>,
}

/// Auto4D on a set of trajectories: static flags, learned size applied with
/// `align`, then (optionally) learned path refinement.
pub fn auto4d_refine(
    log: &SceneLog,
    trajectories: &[Trajectory],
    size: &SizeModel,
    path: Option<&PathModel>,
    align: Align,
) -> Result<Vec<Trajectory>> {
    let path_cfg = path.map(|p| p.cfg.clone()).unwrap_or_default();
    refine_flagged(log, trajectories, size, path, &path_cfg, align)
}

fn refine_flagged(
    log: &SceneLog,
    trajectories: &[Trajectory],
    size: &SizeModel,
    path: Option<&PathModel>,
    static_cfg: &PathBranchConfig,
    align: Align,
) -> Result<Vec<Trajectory>> {
    let mut flagged = trajectories.to_vec();
    flag_static(&mut flagged, static_cfg);
    let egos = log.ego_poses();
    let mut out = Vec::with_capacity(flagged.len());
    for t in &flagged {
        let resized = apply_size(t, size.predict_trajectory(log, t)?, align, &egos)?;
        out.push(match path {
            Some(p) => p.refine_trajectory(log, &resized)?,
            None => resized,
        });
    }
    Ok(out)
}

/// Trains both branches, sequentially, on the training split.
pub fn train_models(cfg: &PipelineConfig) -> Result<Models> {
    cfg.bench.validate()?;
    let probe_size = SizeModel::init(cfg.size.clone(), cfg.train.seed)?;
    let mut size_data = Vec::new();
    for i in cfg.bench.indices(Split::Train) {
        let s = generate_scene(&cfg.bench, i)?;
        size_data.extend(size_samples(&probe_size, &s.log, &s.init, &s.gt, cfg.train.size_frames)?);
    }
    let (size, size_report) = train_size_on(cfg.size.clone(), &size_data, &cfg.train)?;
    drop(size_data);

    let probe_path = PathModel::init(cfg.path.clone(), cfg.train.seed)?;
    let mut path_data = Vec::new();
    for i in cfg.bench.indices(Split::Train) {
        let s = generate_scene(&cfg.bench, i)?;
        let resized = resize_all(&size, &s.log, &s.init)?;
        path_data.extend(path_samples(&probe_path, &s.log, &resized, &s.gt)?);
    }
    let (path, path_report) = train_path_on(cfg.path.clone(), &path_data, &cfg.train)?;
    Ok(Models {
        size,
        path,
        size_report: Some(size_report),
        path_report: Some(path_report),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub label: String,
    pub all: EvalTable,
    pub static_objects: EvalTable,
    pub moving_objects: EvalTable,
    /// Per threshold, fraction minus the init fraction.
    pub delta_vs_init: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub index: usize,
    pub seed: u64,
    /// ≥ 0.9 IoU fraction per variant, in report order.
    pub at_09: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSceneRow {
    pub index: usize,
    pub links: usize,
    pub first_pass: EvalTable,
    pub second_pass: EvalTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorReport {
    pub scenes: Vec<AnnotatorSceneRow>,
    pub first_pass: EvalTable,
    pub second_pass: EvalTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            samples: r.samples,
            steps: r.steps,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub seed: u64,
    pub test_scenes: Vec<usize>,
    pub size_training: Option<TrainSummary>,
    pub path_training: Option<TrainSummary>,
    pub rows: Vec<VariantRow>,
    pub scenes: Vec<SceneRow>,
    pub annotator: Option<AnnotatorReport>,
}

impl Report {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Label quality report\n");
        let _ = writeln!(s, "- config digest: `{}`", self.config_digest);
        let _ = writeln!(s, "- seed: {}", self.seed);
        let _ = writeln!(s, "- test scenes: {}", self.test_scenes.len());
        for (name, t) in [("size", &self.size_training), ("path", &self.path_training)] {
            if let Some(t) = t {
                let _ = writeln!(
                    s,
                    "- {name} training: {} samples, {} steps, loss {:.4} -> {:.4}",
                    t.samples, t.steps, t.initial_loss, t.final_loss
                );
            }
        }
        let _ = writeln!(s, "\n## % of boxes with IoU >= threshold\n");
        let _ = writeln!(s, "| variant | 0.5 | 0.6 | 0.7 | 0.8 | 0.9 | Δ0.9 vs init | boxes |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let f: Vec<String> = r.all.fractions.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {:+.1} | {} |",
                r.label,
                f.join(" | "),
                100.0 * r.delta_vs_init[4],
                r.all.total
            );
        }
        let _ = writeln!(s, "\n## Static / moving at 0.9\n");
        let _ = writeln!(s, "| variant | static | moving |");
        let _ = writeln!(s, "|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.1} ({}) | {:.1} ({}) |",
                r.label,
                100.0 * r.static_objects.at(0.9),
                r.static_objects.total,
                100.0 * r.moving_objects.at(0.9),
                r.moving_objects.total
            );
        }
        if let Some(a) = &self.annotator {
            let _ = writeln!(s, "\n## Annotator loop at 0.9\n");
            let _ = writeln!(s, "| scene | links | first pass | second pass |");
            let _ = writeln!(s, "|---|---|---|---|");
            for r in &a.scenes {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.1} | {:.1} |",
                    r.index,
                    r.links,
                    100.0 * r.first_pass.at(0.9),
                    100.0 * r.second_pass.at(0.9)
                );
            }
            let _ = writeln!(
                s,
                "| all | | {:.1} | {:.1} |",
                100.0 * a.first_pass.at(0.9),
                100.0 * a.second_pass.at(0.9)
            );
        }
        s
    }
}

struct Accum {
    all: EvalTable,
    st: EvalTable,
    mv: EvalTable,
}

fn variant_output(
    v: Variant,
    scene: &BenchScene,
    models: &Models,
    cache: &mut SceneCache,
) -> Result<Vec<Trajectory>> {
    let log = &scene.log;
    let egos = log.ego_poses();
    let baseline = |strategy: SizeStrategy| -> Result<Vec<Trajectory>> {
        scene
            .init
            .iter()
            .map(|t| apply_size(t, size_baseline(t, strategy)?, Align::Corner, &egos))
            .collect()
    };
    Ok(match v {
        Variant::Init => scene.init.clone(),
        Variant::OfflineDetector => scene.offline.clone(),
        Variant::Kalman => scene
            .init
            .iter()
            .map(|t| kalman_smooth(t, &models.path.cfg.kalman))
            .collect(),
        Variant::SizeRandom => baseline(SizeStrategy::Random { seed: scene.seed })?,
        Variant::SizeMean => baseline(SizeStrategy::Mean)?,
        Variant::SizeMedian => baseline(SizeStrategy::Median)?,
        Variant::SizeScore => baseline(SizeStrategy::Score)?,
        Variant::Auto4dSize => cache.size(scene, models)?.clone(),
        Variant::Auto4dSizeCenter => auto4d_refine(log, &scene.init, &models.size, None, Align::Center)?,
        Variant::Auto4dSizeWorld => {
            let mut world = models.size.clone();
            world.cfg.world_static = true;
            auto4d_refine(log, &scene.init, &world, None, Align::Corner)?
        }
        // same as auto4d_refine with the path model, reusing the sized tracks
        Variant::Auto4dSizePath => cache
            .size(scene, models)?
            .iter()
            .map(|t| models.path.refine_trajectory(log, t))
            .collect::<Result<_>>()?,
    })
}

/// Size-refined trajectories shared by the variants that build on them.
#[derive(Default)]
struct SceneCache {
    size: Option<Vec<Trajectory>>,
}

impl SceneCache {
    fn size(&mut self, scene: &BenchScene, models: &Models) -> Result<&Vec<Trajectory>> {
        if self.size.is_none() {
            self.size = Some(refine_flagged(
                &scene.log,
                &scene.init,
                &models.size,
                None,
                &models.path.cfg,
                Align::Corner,
            )?);
        }
        Ok(self.size.as_ref().expect("filled above"))
    }
}

/// Annotator loop on one scene: fragment, refine, link, refine again.
pub fn annotator_pass(
    scene: &BenchScene,
    models: &Models,
    cfg: &AnnotatorConfig,
) -> Result<AnnotatorSceneRow> {
    let frags = fragment_tracks(&scene.init, cfg.fragment_rate, cfg.cuts, scene.seed).trajectories;
    let refine = |ts: &[Trajectory]| {
        auto4d_refine(&scene.log, ts, &models.size, Some(&models.path), Align::Corner)
    };
    let first = refine(&frags)?;
    let linked = simulate_annotator_link(&frags);
    let second = refine(&linked.trajectories)?;
    Ok(AnnotatorSceneRow {
        index: scene.index,
        links: linked.links,
        first_pass: eval_labels(&first, &scene.gt),
        second_pass: eval_labels(&second, &scene.gt),
    })
}

/// Runs every configured variant on the test split with trained models.
pub fn run_pipeline(cfg: &PipelineConfig, models: &Models) -> Result<Report> {
    let variants = &cfg.variants;
    let mut acc: Vec<Accum> = variants
        .iter()
        .map(|_| Accum {
            all: EvalTable::empty(),
            st: EvalTable::empty(),
            mv: EvalTable::empty(),
        })
        .collect();
    let mut scenes = Vec::new();
    let mut annot_rows = Vec::new();
    let test: Vec<usize> = cfg.bench.indices(Split::Test).collect();
    for (k, &i) in test.iter().enumerate() {
        let scene = generate_scene(&cfg.bench, i)?;
        let mut cache = SceneCache::default();
        let mut at_09 = Vec::with_capacity(variants.len());
        for (v, a) in variants.iter().zip(acc.iter_mut()) {
            let out = variant_output(*v, &scene, models, &mut cache)?;
            let t = eval_labels(&out, &scene.gt);
            let (st, mv) = breakdown_static_moving(&out, &scene.gt);
            at_09.push(t.at(0.9));
            a.all = a.all.merge(&t);
            a.st = a.st.merge(&st);
            a.mv = a.mv.merge(&mv);
        }
        scenes.push(SceneRow {
            index: i,
            seed: scene.seed,
            at_09,
        });
        if let Some(an) = &cfg.annotator {
            if k < an.scenes {
                annot_rows.push(annotator_pass(&scene, models, an)?);
            }
        }
    }
    let init_fracs = variants
        .iter()
        .position(|v| *v == Variant::Init)
        .map(|p| acc[p].all.fractions.clone());
    let rows = variants
        .iter()
        .zip(acc)
        .map(|(v, a)| VariantRow {
            variant: *v,
            label: v.label().to_string(),
            delta_vs_init: match &init_fracs {
                Some(f) => a.all.fractions.iter().zip(f).map(|(x, y)| x - y).collect(),
                None => vec![0.0; a.all.fractions.len()],
            },
            all: a.all,
            static_objects: a.st,
            moving_objects: a.mv,
        })
        .collect();
    let annotator = cfg.annotator.as_ref().map(|_| {
        let (f, s) = annot_rows.iter().fold(
            (EvalTable::empty(), EvalTable::empty()),
            |(f, s), r| (f.merge(&r.first_pass), s.merge(&r.second_pass)),
        );
        AnnotatorReport {
            scenes: annot_rows,
            first_pass: f,
            second_pass: s,
        }
    });
    Ok(Report {
        config_digest: cfg.digest(),
        seed: cfg.bench.seed,
        test_scenes: test,
        size_training: models.size_report.as_ref().map(Into::into),
        path_training: models.path_report.as_ref().map(Into::into),
        rows,
        scenes,
        annotator,
    })
}

/// Simulate, train and evaluate in one go.
pub fn run_all(cfg: &PipelineConfig) -> Result<(Models, Report)> {
    let models = train_models(cfg)?;
    let report = run_pipeline(cfg, &models)?;
    Ok((models, report))
}
