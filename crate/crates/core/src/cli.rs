//! Command-line front end: data generation, staged training, evaluation and
//! probing. [`run`] returns the process exit code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::model::ModelParams;
use crate::probe::{overlay, patch_label_scores, probe_patches, token_loss_report};
use crate::scene::{emit_dataset, read_dataset, sample_scene, DatasetSpec, DistanceMetric, Image, QaKind, Split};
use crate::train::{
    checkpoint, eval_ntp, eval_qa_accuracy, run_stage_until, samples_from_records, Datasets, RunConfig, StageSink,
    TrainState, DEFAULT_DECODE_CAP,
};
use crate::Error;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "PLAB_OUT";
const DEFAULT_OUT: &str = "plab-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "plab", version, about = "Train and probe a small vision-language model on synthetic grid scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a JSONL question set with PPM images.
    GenData(GenDataArgs),
    /// Run the three training stages from a config file.
    Train(TrainArgs),
    /// Score a checkpoint on a held-out dataset.
    Eval(EvalArgs),
    /// Read visual tokens through the language head.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory [default: $PLAB_OUT or ./plab-out]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4, value_parser = parse_grid)]
    grid_n: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    /// Image side in pixels [default: 8 per cell]
    #[arg(long)]
    image_size: Option<usize>,
    /// Comma-separated question kinds [default: all]
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    kinds: Vec<QaKind>,
    #[arg(long, default_value = "chebyshev", value_parser = parse_metric)]
    metric: DistanceMetric,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Stop after this many optimizer steps in this invocation, saving `latest.ckpt`
    #[arg(long)]
    max_steps: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset from `gen-data`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DECODE_CAP)]
    decode_cap: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM image to probe
    #[arg(long, conflicts_with = "scene")]
    image: Option<PathBuf>,
    /// Seed of a generated scene to probe
    #[arg(long)]
    scene: Option<u64>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Dataset for patch-label accuracy and the token loss report
    #[arg(long)]
    data: Option<PathBuf>,
    /// Further checkpoints to compare per answer token
    #[arg(long, requires = "data")]
    report: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

fn parse_grid(s: &str) -> Result<usize, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        _ => Err("grid size must be 4 or 8".into()),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| "split must be train or held-out".into())
}

fn parse_kind(s: &str) -> Result<QaKind, String> {
    QaKind::ALL
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown question kind {s}"))
}

fn parse_metric(s: &str) -> Result<DistanceMetric, String> {
    match s {
        "chebyshev" => Ok(DistanceMetric::Chebyshev),
        "manhattan" => Ok(DistanceMetric::Manhattan),
        "euclidean" => Ok(DistanceMetric::EuclideanRounded),
        _ => Err(format!("unknown metric {s}")),
    }
}

/// A bad flag or config value, as opposed to bad data on disk.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn out_dir(arg: &OutArg, config: Option<&Path>) -> anyhow::Result<PathBuf> {
    let dir = arg
        .out
        .clone()
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    if a.count == 0 {
        return Err(Usage("--count must be positive".into()).into());
    }
    let image_size = a.image_size.unwrap_or(8 * a.grid_n);
    if image_size == 0 || image_size % a.grid_n != 0 {
        return Err(Usage(format!("--image-size {image_size} is not a multiple of --grid-n {}", a.grid_n)).into());
    }
    let spec = DatasetSpec {
        grid_n: a.grid_n,
        image_size,
        kinds: if a.kinds.is_empty() { QaKind::ALL.to_vec() } else { a.kinds },
        metric: a.metric,
    };
    let dir = out_dir(&a.out, None)?;
    let name = match a.split {
        Split::Train => "train.jsonl",
        Split::HeldOut => "held-out.jsonl",
    };
    let path = dir.join(name);
    let records = emit_dataset(&spec, a.count, a.split, a.seed, &path, a.workers)?;
    let mut per_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *per_kind.entry(r.kind.as_str()).or_default() += 1;
    }
    println!("{} records -> {}", records.len(), path.display());
    for (k, n) in per_kind {
        println!("  {k}: {n}");
    }
    Ok(())
}

fn load_run_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let run: RunConfig = toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    run.model_config().validate().map_err(|e| Usage(e.to_string()))?;
    for s in 1..=3 {
        run.stage_config(s).map_err(|e| Usage(e.to_string()))?;
    }
    Ok(run)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut run = load_run_config(&a.config)?;
    if let Some(w) = a.workers {
        run.workers = w;
    }
    let dir = out_dir(&a.out, run.out_dir.as_deref())?;
    fs::write(dir.join("config.toml"), toml::to_string(&run)?)?;

    let mc = run.model_config();
    let mut state = match &a.resume {
        Some(path) => {
            let (state, seed) = checkpoint::load(path, Some(&mc))?;
            if seed != run.seed {
                anyhow::bail!("checkpoint was trained with seed {seed}, config has seed {}", run.seed);
            }
            log::info!("resuming at stage {} step {}", state.stage, state.stage_step);
            state
        }
        None => TrainState::new(ModelParams::init(&mc)?),
    };
    let data = Datasets::build(&state.params, &run)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut budget = a.max_steps.unwrap_or(u64::MAX);
    for s in 1..=3u8 {
        if s < state.stage {
            continue;
        }
        let cfg = run.stage_config(s)?;
        let start = if state.stage == s { state.stage_step } else { 0 };
        let until = cfg.steps.min(start.saturating_add(budget));
        let mut sink = StageSink {
            eval: Some(&data.held_describe),
            metrics: Some(&mut metrics),
            metrics_path: Some(metrics_path.clone()),
        };
        run_stage_until(&mut state, &data.train, &cfg, until, &mut sink)?;
        budget -= state.stage_step - start;
        if state.stage_step < cfg.steps {
            let path = dir.join("latest.ckpt");
            checkpoint::save(&state, run.seed, &path)?;
            println!("paused at stage {s} step {} -> {}", state.stage_step, path.display());
            return Ok(());
        }
        let path = dir.join(format!("stage{s}.ckpt"));
        checkpoint::save(&state, run.seed, &path)?;
        let ntp = eval_ntp(&state.params, &data.held_describe)?;
        println!("stage {s} done: held-out ntp {ntp:.4} -> {}", path.display());
    }
    metrics.flush()?;
    Ok(())
}

fn load_samples(params: &ModelParams, path: &Path, workers: usize) -> anyhow::Result<Vec<crate::train::MultimodalSample>> {
    let records = read_dataset(path)?;
    if records.is_empty() {
        anyhow::bail!("{} holds no records", path.display());
    }
    if records.iter().any(|r| r.split != Split::HeldOut) {
        log::warn!("{} contains training-split records", path.display());
    }
    Ok(samples_from_records(params, &records, workers)?)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (state, _) = checkpoint::load(&a.checkpoint, None)?;
    let samples = load_samples(&state.params, &a.data, a.workers)?;
    let ntp = eval_ntp(&state.params, &samples)?;
    let qa = eval_qa_accuracy(&state.params, &samples, a.decode_cap)?;
    let accuracy: BTreeMap<&str, f64> = qa.per_kind.iter().map(|(k, s)| (k.as_str(), s.accuracy)).collect();
    let report = serde_json::json!({
        "checkpoint": a.checkpoint,
        "samples": samples.len(),
        "ntp": ntp,
        "accuracy": accuracy,
        "mean_accuracy": qa.mean,
    });
    let dir = out_dir(&a.out, None)?;
    write_json(&dir.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let (state, _) = checkpoint::load(&a.checkpoint, None)?;
    let params = &state.params;
    let c = params.config();
    let (image, scene_id, stem) = match (&a.image, a.scene) {
        (Some(path), _) => (Image::read_ppm(path)?, None, "probe".to_string()),
        (None, Some(seed)) => {
            let scene = sample_scene(c.patch_grid(), seed)?;
            let image = crate::scene::render(&scene, c.image_size)?;
            (image, Some(seed), format!("probe_{seed:016x}"))
        }
        (None, None) => return Err(Usage("probe needs --image or --scene".into()).into()),
    };
    if image.size() != c.image_size {
        return Err(Usage(format!("image is {} pixels, the model expects {}", image.size(), c.image_size)).into());
    }
    let map = probe_patches(params, &image, a.k, scene_id)?;
    let dir = out_dir(&a.out, None)?;
    write_json(&dir.join(format!("{stem}.json")), &map)?;
    overlay(&image, &map)?.write_ppm(&dir.join(format!("{stem}.ppm")))?;
    println!("{} patches -> {}", map.patches.len(), dir.join(format!("{stem}.json")).display());

    let Some(data) = &a.data else { return Ok(()) };
    let records = read_dataset(data)?;
    let scenes: Vec<_> = records.iter().map(|r| r.scene.clone()).collect();
    let scores = patch_label_scores(params, &scenes)?;
    write_json(&dir.join("patch_accuracy.json"), &scores)?;
    println!(
        "patch-label accuracy {:.4} (occupied {:.4}, background {:.4})",
        scores.all, scores.occupied, scores.background
    );
    if a.report.is_empty() {
        return Ok(());
    }
    let samples = samples_from_records(params, &records, 1)?;
    let mut others = Vec::new();
    for path in &a.report {
        others.push((variant_name(path), checkpoint::load(path, None)?.0));
    }
    let mut variants = vec![(variant_name(&a.checkpoint), params)];
    variants.extend(others.iter().map(|(n, s)| (n.clone(), &s.params)));
    let named: Vec<(&str, &ModelParams)> = variants.iter().map(|(n, p)| (n.as_str(), *p)).collect();
    let report = token_loss_report(&named, &samples)?;
    let md = dir.join("token_loss.md");
    fs::write(&md, report.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
    println!("token loss report -> {}", md.display());
    Ok(())
}

fn variant_name(path: &Path) -> String {
    let parent = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str());
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("variant");
    match parent {
        Some(p) => format!("{p}/{stem}"),
        None => stem.to_string(),
    }
}
