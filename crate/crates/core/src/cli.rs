//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
//! error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{KvConfig, ScenarioConfig};
use crate::correlation::{calibrate_appearance, calibrate_motion, GridPoint, ValidationScenario};
use crate::error::{invalid, io_err, Error, Result};
use crate::evalkit::{self, DEFAULT_IOU};
use crate::loss::{format_trace, train_toy_embedder, DistanceKind, LrSchedule, TrainConfig, WeightScheme};
use crate::model::{self, Detection, EmbeddingSet, Trajectory};
use crate::synth::{self, NoiseSpec, ToySpec, WorldSpec};
use crate::tracker::run_pipeline;

#[derive(Debug, Parser)]
#[command(name = "mtmct", about = "Multi-camera tracking by correlation clustering", version)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. --set t_a=0.8
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a ground-truth world.
    Generate {
        #[arg(long)]
        truth: PathBuf,
    },
    /// Degrade ground truth into detections and embeddings.
    Degrade {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Fit the appearance threshold and search motion parameters.
    Calibrate {
        #[command(flatten)]
        input: TrackInput,
        #[arg(long)]
        truth: PathBuf,
        /// Write the calibrated scenario configuration here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pairs sampled for the appearance threshold.
        #[arg(long, default_value_t = 200_000)]
        max_pairs: usize,
    },
    /// Run the tracker.
    Track {
        #[command(flatten)]
        input: TrackInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score computed trajectories against ground truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        computed: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU)]
        iou: f64,
        /// Comma-separated output.
        #[arg(long)]
        csv: bool,
    },
    /// Re-identification ranking of labeled detections.
    Rank {
        #[command(flatten)]
        input: TrackInput,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Train the toy embedder with each weighting scheme.
    LossDemo {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 800)]
        iterations: usize,
        #[arg(long, default_value = "squared_euclidean")]
        distance: DistanceKind,
    },
    /// Tracking accuracy against feature quality.
    Study {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrackInput {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
}

const SYNOPSIS: &str = "usage: mtmct [--seed N] [--config FILE] [--set KEY=VALUE] [--threads N] <command>
commands: generate, degrade, calibrate, track, evaluate, rank, loss-demo, study
run `mtmct <command> --help` for flags";

/// Loss-demo keys accepted in the config file.
const DEMO_KEYS: &[&str] =
    &["learning_rate", "embed_dim", "toy_sigma", "toy_nuisance_sigma", "toy_outlier_fraction", "toy_train_per_identity"];

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{e}");
            eprintln!("{SYNOPSIS}");
            return 1;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(Error::Config(m)) => {
            eprintln!("error: config: {m}");
            eprintln!("{SYNOPSIS}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_kv(cli: &Cli) -> Result<KvConfig> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    kv.check_known(&[ScenarioConfig::KEYS, WorldSpec::KEYS, NoiseSpec::KEYS, DEMO_KEYS])?;
    Ok(kv)
}

fn world_spec(kv: &KvConfig, seed: u64) -> Result<WorldSpec> {
    let mut w = WorldSpec::from_kv(kv)?;
    if kv.raw("seed").is_none() {
        w.seed = seed;
    }
    Ok(w)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn load_input(input: &TrackInput, cfg: &ScenarioConfig) -> Result<(Vec<Detection>, EmbeddingSet)> {
    let dets = model::parse_detections(&input.detections, cfg.fps)?;
    let emb = model::read_embeddings(&input.embeddings)?;
    Ok((dets, emb))
}

/// Labels detections by overlap with the truth; unmatched ones are dropped.
fn labeled_rows(dets: &[Detection], truth: &[Trajectory]) -> Vec<(usize, u64)> {
    evalkit::label_detections(dets, truth, DEFAULT_IOU).into_iter().zip(dets).filter_map(|(l, d)| Some((d.embedding?, l?))).collect()
}

fn execute(cli: &Cli) -> Result<String> {
    let kv = load_kv(cli)?;
    let mut out = String::new();
    match &cli.command {
        Command::Generate { truth } => {
            let spec = world_spec(&kv, cli.seed)?;
            let t = synth::generate_world(&spec)?;
            model::write_trajectories(&t, truth)?;
            writeln!(out, "identities={}", t.len()).unwrap();
            writeln!(out, "detections={}", t.iter().map(Trajectory::len).sum::<usize>()).unwrap();
        }
        Command::Degrade { truth, detections, embeddings } => {
            let spec = world_spec(&kv, cli.seed)?;
            let noise = NoiseSpec::from_kv(&kv)?;
            let t = model::parse_ground_truth(truth)?;
            let d = synth::degrade(&t, &spec, &noise, cli.seed)?;
            model::write_detections(&d.detections, detections)?;
            model::write_embeddings(&d.embeddings, embeddings)?;
            writeln!(out, "detections={}", d.detections.len()).unwrap();
            writeln!(out, "false_positives={}", d.sources.iter().filter(|s| s.is_none()).count()).unwrap();
        }
        Command::Calibrate { input, truth, out: cfg_out, max_pairs } => {
            let mut cfg = ScenarioConfig::from_kv(&kv)?;
            let (dets, emb) = load_input(input, &cfg)?;
            let t = model::parse_ground_truth(truth)?;
            let rows = labeled_rows(&dets, &t);
            let sub = emb.select(&rows.iter().map(|r| r.0).collect::<Vec<_>>()).with_labels(rows.iter().map(|r| r.1 as u32).collect())?;
            let calib = calibrate_appearance(&sub, *max_pairs, cli.seed)?;
            cfg.t_a = calib.t_a;
            let grid = default_grid();
            let scenario = ValidationScenario { detections: &dets, embeddings: &emb, truth: &t };
            let (params, scores) = calibrate_motion(&grid, &scenario, &cfg, cli.seed)?;
            cfg.t_m = params.t_m;
            cfg.alpha = params.alpha;
            cfg.beta = params.beta;
            writeln!(out, "mu_p={}", calib.mu_p).unwrap();
            writeln!(out, "mu_n={}", calib.mu_n).unwrap();
            writeln!(out, "t_a={}", calib.t_a).unwrap();
            writeln!(out, "t_m={}", cfg.t_m).unwrap();
            writeln!(out, "alpha={}", cfg.alpha).unwrap();
            writeln!(out, "beta={}", cfg.beta).unwrap();
            writeln!(out, "IDF1={:.4}", scores.iter().cloned().fold(0.0, f64::max)).unwrap();
            if let Some(p) = cfg_out {
                write(p, &cfg.to_kv_string())?;
            }
        }
        Command::Track { input, out: path } => {
            let cfg = ScenarioConfig::from_kv(&kv)?;
            let (dets, emb) = load_input(input, &cfg)?;
            let t = run_pipeline(&dets, &emb, &cfg, cli.seed)?;
            model::write_trajectories(&t, path)?;
            writeln!(out, "trajectories={}", t.len()).unwrap();
        }
        Command::Evaluate { truth, computed, iou, csv } => {
            let t = model::parse_ground_truth(truth)?;
            let c = model::parse_ground_truth(computed)?;
            let m = evalkit::id_measures(&t, &c, *iou)?;
            out = if *csv { m.to_csv() } else { m.to_text() };
        }
        Command::Rank { input, truth } => {
            let cfg = ScenarioConfig::from_kv(&kv)?;
            let (dets, emb) = load_input(input, &cfg)?;
            let t = model::parse_ground_truth(truth)?;
            let labels = evalkit::label_detections(&dets, &t, DEFAULT_IOU);
            let labeled: Vec<Trajectory> = group_labeled(&dets, &labels)?;
            let visits = evalkit::single_camera_visits(&labeled, cfg.fps as u64);
            let (q, g) = evalkit::reid_split(&visits);
            let q: Vec<_> = q.into_iter().filter(|q| g.iter().any(|g| g.0 == q.0 && g.1 != q.1)).collect();
            if q.is_empty() {
                return Err(invalid("no query has a positive in another camera"));
            }
            let dist =
                crate::loss::Matrix::from_vec(q.len(), g.len(), q.iter().flat_map(|a| g.iter().map(|b| emb.distance(a.2, b.2))).collect())?;
            let r = evalkit::rank_map(
                &dist,
                &q.iter().map(|x| x.0).collect::<Vec<_>>(),
                &g.iter().map(|x| x.0).collect::<Vec<_>>(),
                &q.iter().map(|x| x.1).collect::<Vec<_>>(),
                &g.iter().map(|x| x.1).collect::<Vec<_>>(),
            )?;
            out = r.to_text();
        }
        Command::LossDemo { out_dir, iterations, distance } => {
            fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
            let toy = toy_spec(&kv)?;
            let (train, test) = synth::toy_reid(&toy, cli.seed)?;
            for scheme in WeightScheme::ALL {
                let tc = demo_train_config(&kv, scheme, *distance, *iterations, cli.seed)?;
                let name = scheme.name();
                match train_toy_embedder(&train, &tc, *iterations) {
                    Ok(o) => {
                        write(&out_dir.join(format!("{name}.txt")), &format_trace(&o.trace))?;
                        let r = evalkit::leave_one_out(&o.embedder.embed(&test)?)?;
                        writeln!(out, "{name}.rank1={:.4}", r.rank(1)).unwrap();
                        writeln!(out, "{name}.mAP={:.4}", r.map).unwrap();
                    }
                    Err(Error::Diverged { iteration }) => {
                        write(&out_dir.join(format!("{name}.txt")), &format!("# diverged at iteration {iteration}\n"))?;
                        writeln!(out, "{name}.rank1=nan").unwrap();
                        writeln!(out, "{name}.mAP=nan").unwrap();
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Command::Study { out: path } => {
            let cfg = ScenarioConfig::from_kv(&kv)?;
            let spec = world_spec(&kv, cli.seed)?;
            let truth = synth::generate_world(&spec)?;
            let dim = kv.get("embedding_dim")?.unwrap_or(128);
            let (tagged, sets) = synth::embedding_checkpoints(&truth, dim, &STUDY_SIGMAS, cli.seed);
            let rows = evalkit::tracking_vs_rank_study(&sets, &tagged, &cfg, cli.seed)?;
            let table = evalkit::format_study(&rows);
            write(path, &table)?;
            out = table;
        }
    }
    Ok(out)
}

/// Noise levels of the study's checkpoints, worst first.
pub const STUDY_SIGMAS: [f64; 6] = [0.35, 0.28, 0.24, 0.21, 0.19, 0.16];

fn group_labeled(dets: &[Detection], labels: &[Option<u64>]) -> Result<Vec<Trajectory>> {
    let mut by_id: std::collections::BTreeMap<u64, Vec<Detection>> = Default::default();
    for (d, l) in dets.iter().zip(labels) {
        if let Some(id) = l {
            by_id.entry(*id).or_default().push(d.clone());
        }
    }
    // several detections may overlap one truth box; keep the first per frame
    by_id
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|d| (d.camera, d.frame, d.embedding));
            v.dedup_by_key(|d| (d.camera, d.frame));
            Trajectory::new(id, v)
        })
        .collect()
}

fn default_grid() -> Vec<GridPoint> {
    let mut g = Vec::new();
    for t_m in [2.0, 4.0, 8.0] {
        for alpha in [0.005, 0.02, 0.05] {
            for beta in [0.05, 0.1, 0.2] {
                g.push(GridPoint { t_m, alpha, beta });
            }
        }
    }
    g
}

fn toy_spec(kv: &KvConfig) -> Result<ToySpec> {
    let mut t = ToySpec::default();
    if let Some(v) = kv.get("toy_sigma")? {
        t.sigma = v;
    }
    if let Some(v) = kv.get("toy_nuisance_sigma")? {
        t.nuisance_sigma = v;
    }
    if let Some(v) = kv.get("toy_outlier_fraction")? {
        t.outlier_fraction = v;
    }
    if let Some(v) = kv.get("toy_train_per_identity")? {
        t.train_per_identity = v;
    }
    Ok(t)
}

/// Training settings shared by the demo and the acceptance suite.
pub fn demo_train_config(kv: &KvConfig, scheme: WeightScheme, kind: DistanceKind, iterations: usize, seed: u64) -> Result<TrainConfig> {
    let scenario = ScenarioConfig::from_kv(kv)?;
    let lr: f64 = kv.get("learning_rate")?.unwrap_or(0.1);
    Ok(TrainConfig {
        scheme,
        kind,
        margin: scenario.margin,
        p: scenario.p,
        k: scenario.k,
        h: None,
        pool_iteration: 0,
        schedule: LrSchedule::scaled(lr, iterations),
        embed_dim: kv.get("embed_dim")?.unwrap_or(16),
        gradient: Default::default(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mtmct", "frobnicate"]), 1);
        assert_eq!(run(["mtmct", "track", "--bogus"]), 1);
        assert_eq!(run(["mtmct"]), 1);
    }

    #[test]
    fn data_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.csv");
        let m = missing.to_str().unwrap();
        assert_eq!(run(["mtmct", "evaluate", "--truth", m, "--computed", m]), 2);
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        fs::write(&cfg, "nonsense = 1\n").unwrap();
        let gt = dir.path().join("gt.csv");
        assert_eq!(run(["mtmct", "--config", cfg.to_str().unwrap(), "generate", "--truth", gt.to_str().unwrap()]), 1);
    }

    #[test]
    fn generate_then_evaluate_identical() {
        let dir = tempfile::tempdir().unwrap();
        let gt = dir.path().join("gt.csv");
        let g = gt.to_str().unwrap();
        assert_eq!(run(["mtmct", "--set", "identity_count=3", "--set", "duration_s=5", "generate", "--truth", g]), 0);
        let t = model::parse_ground_truth(&gt).unwrap();
        let m = evalkit::id_measures(&t, &t, 0.5).unwrap();
        assert_eq!(m.to_text().lines().next(), Some("IDF1=1.0000"));
        assert_eq!(run(["mtmct", "evaluate", "--truth", g, "--computed", g]), 0);
    }
}
