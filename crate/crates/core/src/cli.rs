//! Batch commands: `synth` writes a scenario directory, `sift` runs loop
//! sifting on a dataset and writes its artifacts, `eval` recomputes the
//! metrics for a finished sift run.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::consistency::{ConsistencyScore, DepthConsistency};
use crate::error::{Error, Result};
use crate::eval::{
    pr_curve, pr_curve_csv, precision_recall, surface_mean_distance, trajectory_rmse, LoopLabels, MetricsReport,
    SurfaceReference,
};
use crate::ingest::{self, Dataset};
use crate::posegraph::{OptimizerConfig, Trajectory};
use crate::sift::{self, SiftContext, SiftResult};
use crate::surfelmap::{self, build_fragments, fragment_ranges, ply, reference_frame, Fragment, FusionConfig, SurfelMap};
use crate::synth::{self, ScenarioConfig};

#[derive(Debug, Parser)]
#[command(name = "loopsift", version, about = "Loop closure sifting driven by dense-map consistency")]
pub struct Cli {
    /// Worker threads for ranking and scoring (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario directory.
    Synth(SynthArgs),
    /// Rank and sift loop candidates of a dataset.
    Sift(SiftArgs),
    /// Recompute metrics for a sift output directory.
    Eval(SiftArgs),
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    /// Focal length in pixels (fx = fy).
    #[arg(long, default_value_t = 250.0)]
    pub focal: f64,
    #[arg(long, default_value_t = 10)]
    pub true_loops: usize,
    #[arg(long, default_value_t = 5)]
    pub false_loops: usize,
    /// Bound on true-loop translation error, meters.
    #[arg(long, default_value_t = 0.02)]
    pub loop_noise_m: f64,
    /// Bound on true-loop rotation error, degrees.
    #[arg(long, default_value_t = 1.0)]
    pub loop_noise_deg: f64,
    /// Per-step odometry rotation noise, radians.
    #[arg(long, default_value_t = 0.0015)]
    pub odometry_rot: f64,
    /// Per-step odometry translation noise, meters.
    #[arg(long, default_value_t = 0.002)]
    pub odometry_trans: f64,
    /// Gaussian depth noise, meters.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f64,
    /// Loops join frames more than `k` apart.
    #[arg(long, default_value_t = surfelmap::DEFAULT_FRAGMENT_SIZE)]
    pub k: usize,
}

impl SynthArgs {
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            frames: self.frames,
            intrinsics: surfelmap::Intrinsics {
                width: self.width,
                height: self.height,
                fx: self.focal,
                fy: self.focal,
                cx: (self.width as f64 - 1.0) / 2.0,
                cy: (self.height as f64 - 1.0) / 2.0,
            },
            odometry_rotation_sigma: self.odometry_rot,
            odometry_translation_sigma: self.odometry_trans,
            true_loops: self.true_loops,
            false_loops: self.false_loops,
            loop_translation_noise: self.loop_noise_m,
            loop_rotation_noise: self.loop_noise_deg.to_radians(),
            depth_noise: self.depth_noise,
            min_loop_gap: self.k,
            ..ScenarioConfig::default()
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct SiftArgs {
    /// Manifest file or directory containing `manifest.txt`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fragment size in frames.
    #[arg(long, default_value_t = surfelmap::DEFAULT_FRAGMENT_SIZE)]
    pub k: usize,
    /// Pixel stride for fusion and scoring.
    #[arg(long, default_value_t = surfelmap::DEFAULT_STRIDE)]
    pub stride: usize,
    /// Unused by sift itself; accepted so every subcommand shares the seed flag.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rigidly align trajectories before computing RMSE.
    #[arg(long, overrides_with = "no_align", default_value_t = true)]
    pub align: bool,
    #[arg(long = "no-align", overrides_with = "align")]
    pub no_align: bool,
}

impl SiftArgs {
    pub fn new(input: impl Into<PathBuf>, out: impl Into<PathBuf>, k: usize, stride: usize) -> Self {
        Self {
            input: input.into(),
            out: out.into(),
            k,
            stride,
            seed: 0,
            align: true,
            no_align: false,
        }
    }

    fn aligned(&self) -> bool {
        self.align && !self.no_align
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.stride == 0 {
            return Err(Error::InvalidInput("--k and --stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs `f` on a pool with `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Synth(args) => with_threads(threads, || cmd_synth(&args))?.map(|s| println!("{s}")),
        Command::Sift(args) => with_threads(threads, || cmd_sift(&args))?.map(|run| {
            println!("{}", run.result.report());
            println!("{}", run.metrics.to_table());
        }),
        Command::Eval(args) => with_threads(threads, || cmd_eval(&args))?.map(|m| println!("{}", m.to_table())),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // fail early with the directory's path if it is not writable
    let probe = dir.join(".write-test");
    std::fs::write(&probe, b"").map_err(|e| Error::io(dir, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Generates and exports a scenario; returns a one-line summary.
pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let scenario = synth::generate(&args.scenario_config(), args.seed)?;
    create_dir(&args.out)?;
    scenario.export(&args.out)?;
    let true_loops = scenario.candidates.iter().filter(|c| c.label).count();
    Ok(format!(
        "wrote {}: {} frames, {} candidates ({} true, {} false)",
        args.out.display(),
        scenario.frames.len(),
        scenario.candidates.len(),
        true_loops,
        scenario.candidates.len() - true_loops
    ))
}

pub struct SiftRun {
    pub result: SiftResult,
    pub metrics: MetricsReport,
}

struct Pipeline {
    dataset: Dataset,
    fragments: Vec<Fragment>,
    scorer: DepthConsistency,
}

impl Pipeline {
    fn load(args: &SiftArgs) -> Result<Self> {
        args.validate()?;
        let dataset = ingest::load_dataset(&args.input)?;
        let fusion = FusionConfig {
            stride: args.stride,
            ..FusionConfig::default()
        };
        let fragments = build_fragments(&dataset.frames, dataset.graph.initial(), args.k, &fusion)?;
        Ok(Self {
            dataset,
            fragments,
            scorer: DepthConsistency::with_stride(args.stride),
        })
    }

    fn context(&self) -> SiftContext<'_> {
        SiftContext {
            graph: &self.dataset.graph,
            frames: &self.dataset.frames,
            fragments: &self.fragments,
            scorer: &self.scorer,
            optimizer: OptimizerConfig::default(),
        }
    }

    /// Labels from ground truth when available, else from the candidates
    /// file when it labels every candidate.
    fn labels(&self, k: usize) -> Result<Option<LoopLabels>> {
        if let Some(gt) = &self.dataset.ground_truth {
            let ranges = fragment_ranges(self.dataset.frames.len(), k)?;
            let reference = |f: usize| ranges.get(f).map(|&(a, b)| reference_frame(a, b));
            return LoopLabels::derive(&self.dataset.candidates, gt, reference).map(Some);
        }
        let labels = &self.dataset.labels;
        Ok((!self.dataset.candidates.is_empty() && self.dataset.candidates.iter().all(|c| labels.contains_key(&c.id)))
            .then(|| LoopLabels::new(labels.clone())))
    }

    fn metrics(
        &self,
        args: &SiftArgs,
        accepted: &[usize],
        trajectory: &Trajectory,
        model: &SurfelMap,
        score: &ConsistencyScore,
    ) -> Result<MetricsReport> {
        let labels = self.labels(args.k)?;
        let (precision, recall) = match &labels {
            Some(l) => {
                let (p, r) = precision_recall(accepted, l)?;
                (Some(p), Some(r))
            }
            None => (None, None),
        };
        let trajectory_rmse = match &self.dataset.ground_truth {
            Some(gt) => Some(trajectory_rmse(trajectory, gt, args.aligned())?),
            None => None,
        };
        let smd = match (&self.dataset.scene, model.is_empty()) {
            (Some(scene), false) => {
                // the model lives in the estimate's frame; bring it onto the
                // ground truth the same way the trajectory is compared
                let g = match (&self.dataset.ground_truth, args.aligned()) {
                    (Some(gt), true) => {
                        let src: Vec<_> = trajectory.poses().iter().map(|p| p.translation).collect();
                        let dst: Vec<_> = gt.poses().iter().map(|p| p.translation).collect();
                        crate::eval::align_rigid(&src, &dst)?
                    }
                    _ => crate::geometry::Pose::identity(),
                };
                Some(surface_mean_distance(&model.transformed(&g), &SurfaceReference::Scene(scene))?)
            }
            _ => None,
        };
        Ok(MetricsReport {
            precision,
            recall,
            trajectory_rmse,
            smd,
            consistency_score: score.value,
            loops_before: self.dataset.candidates.len(),
            loops_after: accepted.len(),
        })
    }

    fn write_metrics(&self, args: &SiftArgs, metrics: &MetricsReport, ranking: &[usize], accepted: &[usize]) -> Result<()> {
        write(&args.out.join("metrics.txt"), metrics.to_table())?;
        write(&args.out.join("metrics.csv"), metrics.to_csv())?;
        if let (Some(labels), false) = (self.labels(args.k)?, ranking.is_empty()) {
            write(&args.out.join("pr_curve.csv"), pr_curve_csv(&pr_curve(ranking, &labels, accepted)?))?;
        }
        Ok(())
    }
}

/// Runs sifting and writes `trace.csv`, `ranking.csv`, `report.txt`,
/// `accepted.txt`, `model_before.ply`, `model_after.ply`,
/// `trajectory_after.txt`, per-frame score CSVs and the metrics.
pub fn cmd_sift(args: &SiftArgs) -> Result<SiftRun> {
    let pipeline = Pipeline::load(args)?;
    create_dir(&args.out)?;
    let ctx = pipeline.context();
    let result = sift::sift(&ctx, &pipeline.dataset.candidates, args.k)?;
    result.save(&args.out)?;
    let before = ctx.model(&result.baseline.trajectory)?;
    let after = ctx.model(&result.result.trajectory)?;
    ply::save(&args.out.join("model_before.ply"), &before)?;
    ply::save(&args.out.join("model_after.ply"), &after)?;
    ingest::save_tum(&args.out.join("trajectory_after.txt"), &result.result.trajectory)?;
    result.baseline.score.save_csv(&args.out.join("score_before.csv"))?;
    result.result.score.save_csv(&args.out.join("score_after.csv"))?;
    let metrics = pipeline.metrics(args, &result.accepted, &result.result.trajectory, &after, &result.result.score)?;
    let ranking: Vec<usize> = result.ranking.iter().map(|r| r.id).collect();
    pipeline.write_metrics(args, &metrics, &ranking, &result.accepted)?;
    Ok(SiftRun { result, metrics })
}

fn read_ids(path: &Path, column: usize, skip_header: bool) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    text.lines()
        .enumerate()
        .skip(skip_header as usize)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .nth(column)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::parse(&source, i + 1, "expected a loop id"))
        })
        .collect()
}

/// Re-derives the final map from `accepted.txt` in `--out` and reports metrics.
pub fn cmd_eval(args: &SiftArgs) -> Result<MetricsReport> {
    let accepted_path = args.out.join("accepted.txt");
    if !accepted_path.exists() {
        return Err(Error::io(
            &accepted_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing sift output; run `sift` first"),
        ));
    }
    let accepted = read_ids(&accepted_path, 0, false)?;
    let ranking = read_ids(&args.out.join("ranking.csv"), 1, true)?;
    let pipeline = Pipeline::load(args)?;
    let known: HashSet<usize> = pipeline.dataset.candidates.iter().map(|c| c.id).collect();
    if let Some(id) = accepted.iter().find(|id| !known.contains(id)) {
        return Err(Error::InvalidInput(format!("accepted loop {id} is not a candidate")));
    }
    let ctx = pipeline.context();
    let chosen: Vec<_> = accepted
        .iter()
        .filter_map(|id| pipeline.dataset.candidates.iter().find(|c| c.id == *id).cloned())
        .collect();
    let groups = sift::build_groups(&chosen, &pipeline.fragments, pipeline.dataset.graph.node_count(), args.k)?;
    let edges: Vec<_> = groups.into_iter().flat_map(|g| g.edges).collect();
    let evaluation = ctx.evaluate(&edges)?;
    let model = ctx.model(&evaluation.trajectory)?;
    let metrics = pipeline.metrics(args, &accepted, &evaluation.trajectory, &model, &evaluation.score)?;
    pipeline.write_metrics(args, &metrics, &ranking, &accepted)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synth(out: &Path, seed: u64) -> SynthArgs {
        SynthArgs {
            out: out.to_path_buf(),
            seed,
            frames: 40,
            width: 32,
            height: 24,
            focal: 25.0,
            true_loops: 3,
            false_loops: 2,
            loop_noise_m: 0.02,
            loop_noise_deg: 1.0,
            odometry_rot: 0.0015,
            odometry_trans: 0.002,
            depth_noise: 0.0,
            k: 5,
        }
    }

    #[test]
    fn synth_writes_scenario_directory() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s");
        let summary = cmd_synth(&small_synth(&out, 7)).unwrap();
        assert!(summary.contains("40 frames"));
        let depth_files = std::fs::read_dir(out.join("depth")).unwrap().count();
        assert_eq!(depth_files, 40);
        for f in ["groundtruth.txt", "odometry.txt", "candidates.csv", "manifest.txt"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let first = std::fs::read(out.join("candidates.csv")).unwrap();
        cmd_synth(&small_synth(&out, 7)).unwrap();
        assert_eq!(std::fs::read(out.join("candidates.csv")).unwrap(), first);
    }

    #[test]
    fn synth_into_unwritable_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("file");
        std::fs::write(&file, "x").unwrap();
        let err = cmd_synth(&small_synth(&file.join("sub"), 1)).unwrap_err();
        assert_eq!(err.class().exit_code(), 4);
    }

    #[test]
    fn sift_then_eval() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = dir.path().join("s");
        cmd_synth(&small_synth(&scenario, 3)).unwrap();
        let args = SiftArgs::new(&scenario, dir.path().join("out"), 5, 2);
        let run = cmd_sift(&args).unwrap();
        let trace = std::fs::read_to_string(args.out.join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 5);
        let ids: HashSet<usize> = (0..5).collect();
        assert!(run.result.accepted.iter().all(|id| ids.contains(id)));
        for f in ["ranking.csv", "accepted.txt", "model_before.ply", "model_after.ply", "metrics.txt", "pr_curve.csv"] {
            assert!(args.out.join(f).exists(), "{f}");
        }
        let metrics = cmd_eval(&args).unwrap();
        assert_eq!(metrics, run.metrics);
    }

    #[test]
    fn sift_without_candidates_keeps_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = dir.path().join("s");
        let mut s = small_synth(&scenario, 4);
        s.true_loops = 0;
        s.false_loops = 0;
        cmd_synth(&s).unwrap();
        let run = cmd_sift(&SiftArgs::new(&scenario, dir.path().join("out"), 5, 2)).unwrap();
        assert!(run.result.accepted.is_empty());
        assert_eq!(run.result.final_score, run.result.baseline_score);
        assert_eq!(run.metrics.consistency_score, run.result.baseline_score);
        assert_eq!(run.metrics.loops_after, 0);
        assert_eq!((run.metrics.precision, run.metrics.recall), (Some(100.0), Some(100.0)));
        assert_eq!(std::fs::read_to_string(dir.path().join("out/accepted.txt")).unwrap(), "");
    }

    #[test]
    fn eval_without_sift_output_fails() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_eval(&SiftArgs::new(dir.path(), dir.path(), 5, 2)).unwrap_err();
        assert_eq!(err.class().exit_code(), 4);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "loopsift", "--threads", "2", "sift", "--input", "a", "--out", "b", "--k", "7", "--stride", "3", "--no-align",
        ])
        .unwrap();
        assert_eq!(cli.threads, Some(2));
        match cli.command {
            Command::Sift(a) => {
                assert_eq!((a.k, a.stride), (7, 3));
                assert!(!a.aligned());
            }
            other => panic!("{other:?}"),
        }
        let cli = Cli::try_parse_from(["loopsift", "eval", "--input", "a", "--out", "b"]).unwrap();
        match cli.command {
            Command::Eval(a) => assert!(a.aligned() && a.k == 50 && a.stride == 2),
            other => panic!("{other:?}"),
        }
    }
}
