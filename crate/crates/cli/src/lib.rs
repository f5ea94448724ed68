//! The `laminet` command line: phantom generation, training, inference,
//! evaluation, gradient audit, timing and rendering.
//!
//! Exit status is 0 on success, 2 for usage errors and 1 for anything that
//! fails validation or I/O, with a single `error[kind]: message` line on
//! stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use laminet_core::config::ExperimentConfig;
use laminet_core::error::{Error, Result};
use laminet_core::gradcheck::{check_all, GradCheckConfig};
use laminet_core::metrics::{benchmark, signed_errors, BoundaryReport, ErrorSample};
use laminet_core::nets::{build_rnet, build_snet, NetKind, Network};
use laminet_core::phantom::{generate_dataset, generate_item, load_dataset};
use laminet_core::pipeline::{
    dataset_samples, infer_scan, load_boundaries, load_network, save_predictions, scan_probabilities, train_rnet,
    train_snet, truth_boundaries, EpochStats, TrainResult,
};
use laminet_core::render::{overlay, Raster};
use laminet_core::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "laminet", version, about = "Topology-preserving layer segmentation on synthetic OCT phantoms")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment configuration (TOML); flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Leave timings out of primary outputs so repeated runs are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for patch-parallel inference.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a phantom dataset (items plus manifest.json) to --out.
    GenData {
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Train S-Net on a phantom dataset; weights go to --out.
    TrainSnet(TrainArgs),
    /// Train R-Net on the masks of a phantom dataset; weights go to --out.
    TrainRnet(TrainArgs),
    /// Predict boundaries for every B-scan of a dataset into --out.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        snet: PathBuf,
        /// R-Net weights; without them a freshly initialized R-Net is used.
        #[arg(long)]
        rnet: Option<PathBuf>,
    },
    /// Boundary accuracy table (CSV and text) from predictions and truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// A dataset (truth from its masks) or another predictions directory.
        #[arg(long)]
        truth: PathBuf,
        /// Second method for per-scan Wilcoxon comparisons.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Finite-difference audit of every primitive and the reduced networks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Time preprocessing, inference and reconstruction over a volume.
    Bench {
        #[arg(long)]
        snet: Option<PathBuf>,
        #[arg(long)]
        rnet: Option<PathBuf>,
        /// Dataset whose images form the volume; otherwise phantoms are generated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        scans: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Grayscale B-scans, boundary overlays and probability maps as PGM/PPM.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// S-Net weights for per-class probability maps.
        #[arg(long)]
        snet: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset for best-epoch selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = Cli::command().error(ErrorKind::MissingRequiredArgument, msg).print();
            2
        }
        Err(Failure::Core(e)) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            1
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error[check]: {}", one_line(&msg));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn require_out(g: &Global) -> std::result::Result<&Path, Failure> {
    g.out.as_deref().ok_or_else(|| Failure::Usage("this subcommand needs --out".into()))
}

fn effective_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn config_value(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("configuration serializes")
}

fn execute(cli: Cli) -> Outcome {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = effective_config(g)?;
    match &cli.command {
        Command::GenData { count } => gen_data(g, &cfg, *count),
        Command::TrainSnet(args) => train(g, cfg, args, NetKind::SNet),
        Command::TrainRnet(args) => train(g, cfg, args, NetKind::RNet),
        Command::Infer { data, snet, rnet } => infer(g, &cfg, data, snet, rnet.as_deref()),
        Command::Eval { pred, truth, baseline } => eval(g, &cfg, pred, truth, baseline.as_deref()),
        Command::Gradcheck { instances } => gradcheck(g, &cfg, *instances),
        Command::Bench { snet, rnet, data, scans, runs } => {
            bench(g, &cfg, snet.as_deref(), rnet.as_deref(), data.as_deref(), *scans, *runs)
        }
        Command::Render { data, pred, snet, limit } => render(g, &cfg, data, pred.as_deref(), snet.as_deref(), *limit),
    }
}

fn gen_data(g: &Global, cfg: &ExperimentConfig, count: usize) -> Outcome {
    let out = require_out(g)?;
    if count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let manifest = generate_dataset(&cfg.phantom, count, cfg.seed, out)?;
    write_json(&out.join("run.json"), &json!({"command": "gen-data", "seed": cfg.seed, "count": count, "config": config_value(cfg)}))?;
    println!("wrote {} phantoms ({}x{}) to {}", manifest.count, cfg.phantom.height, cfg.phantom.width, out.display());
    Ok(())
}

fn curve_value(curve: &[EpochStats], deterministic: bool) -> Value {
    curve
        .iter()
        .map(|e| {
            let mut v = json!({"epoch": e.epoch, "train_loss": e.train_loss, "validation": e.validation});
            if !deterministic {
                v["seconds"] = json!(e.seconds);
            }
            v
        })
        .collect()
}

fn train(g: &Global, mut cfg: ExperimentConfig, args: &TrainArgs, kind: NetKind) -> Outcome {
    let out = require_out(g)?.to_path_buf();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let section = match kind {
        NetKind::SNet => &mut cfg.snet,
        NetKind::RNet => &mut cfg.rnet,
    };
    if let Some(e) = args.epochs {
        section.schedule.epochs = e;
    }
    cfg.validate()?;
    // the echoed configuration stays free of output paths
    let mut schedule = match kind {
        NetKind::SNet => cfg.snet.schedule.clone(),
        NetKind::RNet => cfg.rnet.schedule.clone(),
    };
    schedule.checkpoint = Some(out.clone());
    let (net, infer) = (&cfg.net, &cfg.infer);
    let load = |dir: &Path| -> Result<_> {
        dataset_samples(&load_dataset(dir)?.items, net.patch_width, infer.patch_count, infer.target_row)
    };
    let train_set = load(&args.data)?;
    let val_set = match &args.val {
        Some(dir) => load(dir)?,
        None => Vec::new(),
    };
    let result: TrainResult = match kind {
        NetKind::SNet => train_snet(&train_set, &val_set, net, &cfg.snet.optimizer, &schedule, cfg.seed)?,
        NetKind::RNet => {
            let masks: Vec<_> = train_set.into_iter().map(|s| s.mask).collect();
            let val: Vec<_> = val_set.into_iter().map(|s| s.mask).collect();
            train_rnet(&masks, &val, net, &cfg.defects, &cfg.rnet.optimizer, &schedule, cfg.seed)?
        }
    };
    result.store.save(&out)?;
    let name = match kind {
        NetKind::SNet => "train-snet",
        NetKind::RNet => "train-rnet",
    };
    write_json(
        &sidecar(&out),
        &json!({
            "command": name,
            "seed": cfg.seed,
            "config_hash": result.store.config_hash(),
            "steps": result.steps,
            "best_epoch": result.best_epoch,
            "curve": curve_value(&result.curve, g.deterministic),
            "config": config_value(&cfg),
        }),
    )?;
    let last = result.curve.iter().find(|e| e.epoch == result.best_epoch);
    println!(
        "{name}: {} steps, best epoch {} (validation {:?}); weights in {}",
        result.steps,
        result.best_epoch,
        last.and_then(|e| e.validation),
        out.display()
    );
    Ok(())
}

fn rnet_or_fresh(path: Option<&Path>, snet: &Network<f32>, seed: u64) -> Result<(Network<f32>, Value)> {
    match path {
        Some(p) => {
            let (net, s, steps) = load_network(p, NetKind::RNet)?;
            Ok((net, json!({"path": p, "seed": s, "steps": steps})))
        }
        None => Ok((build_rnet(snet.config(), seed)?, json!({"initialized_from_seed": seed}))),
    }
}

fn infer(g: &Global, cfg: &ExperimentConfig, data: &Path, snet_path: &Path, rnet_path: Option<&Path>) -> Outcome {
    let out = require_out(g)?;
    let (snet, s_seed, s_steps) = load_network(snet_path, NetKind::SNet)?;
    let (rnet, rnet_meta) = rnet_or_fresh(rnet_path, &snet, cfg.seed)?;
    let dataset = load_dataset(data)?;
    let mut boundaries = Vec::with_capacity(dataset.items.len());
    let mut seconds = laminet_core::pipeline::StageTimes::default();
    for (image, _) in &dataset.items {
        let (pred, t) = infer_scan(image, &snet, &rnet, &cfg.infer)?;
        seconds.preprocess += t.preprocess;
        seconds.inference += t.inference;
        seconds.reconstruction += t.reconstruction;
        boundaries.push(pred.boundaries);
    }
    let mut meta = json!({
        "command": "infer",
        "snet": {"path": snet_path, "seed": s_seed, "steps": s_steps, "config_hash": snet.config().hash()},
        "rnet": rnet_meta,
        "config": config_value(cfg),
    });
    if !g.deterministic {
        meta["seconds"] = serde_json::to_value(seconds).expect("times serialize");
    }
    save_predictions(out, &boundaries, cfg.seed, meta)?;
    println!("wrote {} predictions to {}", boundaries.len(), out.display());
    Ok(())
}

fn errors_against(pred: &[laminet_core::topology::BoundarySet], truth: &[laminet_core::topology::BoundarySet], um: f64) -> std::result::Result<Vec<ErrorSample>, Failure> {
    if pred.len() != truth.len() {
        return Err(Failure::Check(format!("{} predicted scans but {} truth scans", pred.len(), truth.len())));
    }
    let mut out = Vec::new();
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        out.extend(signed_errors(p, t, i, um)?);
    }
    Ok(out)
}

fn eval(g: &Global, cfg: &ExperimentConfig, pred: &Path, truth: &Path, baseline: Option<&Path>) -> Outcome {
    let out = require_out(g)?;
    let truth = load_boundaries(truth)?;
    let samples = errors_against(&load_boundaries(pred)?, &truth, cfg.resolution_um)?;
    let base = match baseline {
        Some(dir) => Some(errors_against(&load_boundaries(dir)?, &truth, cfg.resolution_um)?),
        None => None,
    };
    let layers = truth.first().map_or(0, |b| b.layers());
    let report = BoundaryReport::from_samples(&samples, layers, cfg.resolution_um, base.as_deref())?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    let table = report.to_table();
    write_text(&out.join("report.txt"), &table)?;
    write_json(&out.join("run.json"), &json!({"command": "eval", "seed": cfg.seed, "config": config_value(cfg)}))?;
    print!("{table}");
    Ok(())
}

fn gradcheck(g: &Global, cfg: &ExperimentConfig, instances: usize) -> Outcome {
    if instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let results = check_all(&GradCheckConfig { instances, seed: cfg.seed, ..Default::default() })?;
    println!("{:<24} {:>14} {:>9} {:>8}  result", "subject", "max_rel_error", "checked", "skipped");
    for r in &results {
        println!(
            "{:<24} {:>14.3e} {:>9} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {:.0e})", laminet_core::gradcheck::TOLERANCE);
    if let Some(out) = &g.out {
        write_json(out, &json!({"command": "gradcheck", "seed": cfg.seed, "instances": instances, "results": results}))?;
    }
    match results.iter().find(|r| !r.passed()) {
        Some(r) => Err(Failure::Check(format!("gradient check failed for {} (relative error {:.3e})", r.name, r.max_rel_error))),
        None => Ok(()),
    }
}

fn stack_volume(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let (_, h, w) = images.first().ok_or_else(|| Error::invalid("bench", "empty volume"))?.chw()?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.shape() != [1, h, w] {
            return Err(Error::shape("bench", format!("B-scan {:?} in a {h}x{w} volume", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), h, w], data)
}

fn bench(
    g: &Global,
    cfg: &ExperimentConfig,
    snet_path: Option<&Path>,
    rnet_path: Option<&Path>,
    data: Option<&Path>,
    scans: usize,
    runs: usize,
) -> Outcome {
    if runs == 0 || scans == 0 {
        return Err(Failure::Usage("--runs and --scans must be at least 1".into()));
    }
    let snet = match snet_path {
        Some(p) => load_network(p, NetKind::SNet)?.0,
        None => build_snet(&cfg.net, cfg.seed)?,
    };
    let (rnet, _) = rnet_or_fresh(rnet_path, &snet, cfg.seed)?;
    let images: Vec<Tensor<f32>> = match data {
        Some(dir) => load_dataset(dir)?.items.into_iter().map(|(im, _)| im).collect(),
        None => (0..scans as u64).map(|i| generate_item(&cfg.phantom, cfg.seed, i).map(|p| p.image)).collect::<Result<_>>()?,
    };
    let report = benchmark(&stack_volume(&images)?, &snet, &rnet, &cfg.infer, runs)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &g.out {
        write_text(out, &text)?;
        write_json(&sidecar(out), &json!({"command": "bench", "seed": cfg.seed, "report": report, "config": config_value(cfg)}))?;
    }
    Ok(())
}

fn render(g: &Global, cfg: &ExperimentConfig, data: &Path, pred: Option<&Path>, snet: Option<&Path>, limit: Option<usize>) -> Outcome {
    let out = require_out(g)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = load_dataset(data)?;
    let preds = pred.map(load_boundaries).transpose()?;
    if let Some(p) = &preds {
        if p.len() != dataset.items.len() {
            return Err(Failure::Check(format!("{} predictions for {} B-scans", p.len(), dataset.items.len())));
        }
    }
    let snet = snet.map(|p| load_network(p, NetKind::SNet).map(|n| n.0)).transpose()?;
    let n = limit.unwrap_or(dataset.items.len()).min(dataset.items.len());
    let mut files = 0;
    for (i, (image, mask)) in dataset.items.iter().take(n).enumerate() {
        Raster::gray(image, 0)?.save(out.join(format!("scan_{i:05}.pgm")))?;
        files += 1;
        if let Some(p) = &preds {
            overlay(image, &p[i], Some(&truth_boundaries(mask)?))?.save(out.join(format!("scan_{i:05}_overlay.ppm")))?;
            files += 1;
        }
        if let Some(net) = &snet {
            let probs = scan_probabilities(image, net, &cfg.infer)?;
            for k in 0..probs.shape()[0] {
                Raster::gray(&probs, k)?.save(out.join(format!("scan_{i:05}_prob_{k:02}.pgm")))?;
                files += 1;
            }
        }
    }
    println!("wrote {files} images for {n} B-scans to {}", out.display());
    Ok(())
}
