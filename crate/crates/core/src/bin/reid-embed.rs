use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reid_embed::checkpoint::Checkpoint;
use reid_embed::config::{ConfigError, Settings};
use reid_embed::data::{self, EmbeddingSet, Split};
use reid_embed::eval::{evaluate, ranked_distances, DEFAULT_RETRIEVE_K};
use reid_embed::train::{self, trace_to_string};
use reid_embed::Error;

/// Metric-learning embeddings for re-identification: synthesize data, train
/// with triplet or contrastive losses, and evaluate retrieval.
#[derive(Parser)]
#[command(name = "reid-embed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic identity-cluster dataset.
    Synth(SynthArgs),
    /// Train an embedding network and write a checkpoint and loss trace.
    Train(TrainArgs),
    /// Embed every sample of a dataset with a checkpoint.
    Embed(EmbedArgs),
    /// Evaluate retrieval (mAP and CMC) and write a report.
    Eval(EvalArgs),
    /// Write the top-k gallery matches of every query.
    Retrieve(RetrieveArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Config file with key = value lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    out: Option<String>,
    /// Training identities [default: 32]
    #[arg(long)]
    identities: Option<String>,
    /// Held-out identities split into query/gallery [default: 32]
    #[arg(long)]
    held_out: Option<String>,
    /// Samples per identity [default: 12]
    #[arg(long)]
    samples: Option<String>,
    /// Feature dimension D [default: 16]
    #[arg(long)]
    dim: Option<String>,
    /// Shared viewpoints [default: 3]
    #[arg(long)]
    viewpoints: Option<String>,
    /// Identity centroid spread [default: 1.0]
    #[arg(long)]
    sigma_id: Option<String>,
    /// Viewpoint offset scale [default: 1.0]
    #[arg(long)]
    sigma_view: Option<String>,
    /// Per-sample noise [default: 0.1]
    #[arg(long)]
    sigma_noise: Option<String>,
    /// Cameras per identity [default: 3]
    #[arg(long)]
    cameras: Option<String>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with key = value lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (train split is used).
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint output [default: model.ckpt]
    #[arg(long)]
    out: Option<String>,
    /// Loss trace output [default: <out>.trace.csv]
    #[arg(long)]
    trace: Option<String>,
    /// triplet | contrastive [default: triplet]
    #[arg(long)]
    loss: Option<String>,
    /// ba | bh | bs | bw [default: bs]
    #[arg(long)]
    sampling: Option<String>,
    /// per_triplet | unified_literal, batch-all only [default: per_triplet]
    #[arg(long)]
    ba_mode: Option<String>,
    /// softplus | hard [default: softplus for triplet, hard for contrastive]
    #[arg(long)]
    margin: Option<String>,
    /// Hard margin value [default: 1.0 contrastive, 0.2 triplet]
    #[arg(long)]
    alpha: Option<String>,
    /// Identities per batch [default: 18]
    #[arg(long)]
    p: Option<String>,
    /// Samples per identity per batch [default: 4]
    #[arg(long)]
    k: Option<String>,
    /// Epochs [default: 100]
    #[arg(long)]
    epochs: Option<String>,
    /// RNG seed (required).
    #[arg(long)]
    seed: Option<String>,
    /// scratch | pretrained [default: scratch = 0.001, pretrained = 0.0003]
    #[arg(long)]
    lr_schedule: Option<String>,
    /// Explicit learning rate, overrides --lr-schedule.
    #[arg(long)]
    lr: Option<String>,
    /// Adam epsilon [default: 1e-3]
    #[arg(long)]
    adam_eps: Option<String>,
    /// Adam beta1 [default: 0.9]
    #[arg(long)]
    adam_beta1: Option<String>,
    /// Adam beta2 [default: 0.999]
    #[arg(long)]
    adam_beta2: Option<String>,
    /// euclidean | squared_euclidean [default: euclidean]
    #[arg(long)]
    metric: Option<String>,
    /// L2-normalize embeddings: true | false [default: false]
    #[arg(long)]
    normalize: Option<String>,
    /// Hidden layer sizes, comma separated [default: 64,64]
    #[arg(long)]
    hidden: Option<String>,
    /// Embedding dimension F [default: 128]
    #[arg(long)]
    embedding_dim: Option<String>,
    /// Gaussian input noise augmentation, 0 = off [default: 0]
    #[arg(long)]
    feature_noise: Option<String>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Embedding output file.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct SourceArgs {
    /// Config file with key = value lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file with query and gallery splits.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint used to embed --data; raw features are used without it.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Precomputed embedding file (instead of --data).
    #[arg(long)]
    embeddings: Option<String>,
    /// euclidean | squared_euclidean [default: euclidean]
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// cross_camera | repeated_gallery [default: cross_camera]
    #[arg(long)]
    protocol: Option<String>,
    /// Repeated-gallery trials [default: 10]
    #[arg(long)]
    trials: Option<String>,
    /// CMC cutoffs, comma separated [default: 1,2,5]
    #[arg(long)]
    cutoffs: Option<String>,
    /// RNG seed for gallery draws [default: 0]
    #[arg(long)]
    seed: Option<String>,
    /// Report output [default: report.txt]
    #[arg(long)]
    report: Option<String>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Matches per query [default: 10]
    #[arg(long)]
    top_k: Option<String>,
    /// Output file [default: retrieval.csv]
    #[arg(long)]
    out: Option<String>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn settings(config: &Option<PathBuf>, flags: &[(&str, &Option<String>)]) -> Result<Settings, Failure> {
    let mut s = match config {
        Some(path) => Settings::load(path).map_err(|e| Failure::Usage(format!("config file {}: {e}", path.display())))?,
        None => Settings::new(),
    };
    let mut over = Settings::new();
    for (k, v) in flags {
        if let Some(v) = v {
            over.set(k, v.as_str());
        }
    }
    s.overlay(&over);
    Ok(s)
}

fn require<'a>(s: &'a Settings, key: &str) -> Result<&'a str, Failure> {
    s.get(key).ok_or_else(|| Failure::Usage(format!("missing required `--{}`", key.replace('_', "-"))))
}

fn run_synth(a: &SynthArgs) -> CmdResult {
    let s = settings(
        &a.config,
        &[
            ("out", &a.out),
            ("identities", &a.identities),
            ("held_out", &a.held_out),
            ("samples", &a.samples),
            ("dim", &a.dim),
            ("viewpoints", &a.viewpoints),
            ("sigma_id", &a.sigma_id),
            ("sigma_view", &a.sigma_view),
            ("sigma_noise", &a.sigma_noise),
            ("cameras", &a.cameras),
            ("seed", &a.seed),
        ],
    )?;
    let out = require(&s, "out")?;
    let spec = s.synth_spec()?;
    let synth = data::synthesize(&spec)?;
    data::write_dataset(&synth.dataset, out)?;
    println!(
        "wrote {} samples ({} identities, D={}) to {out}; min centroid distance {:.4}",
        synth.dataset.len(),
        synth.dataset.identity_count(),
        synth.dataset.dim(),
        synth.min_centroid_distance()
    );
    Ok(())
}

fn run_train(a: &TrainArgs) -> CmdResult {
    let s = settings(
        &a.config,
        &[
            ("data", &a.data),
            ("out", &a.out),
            ("trace", &a.trace),
            ("loss", &a.loss),
            ("sampling", &a.sampling),
            ("ba_mode", &a.ba_mode),
            ("margin", &a.margin),
            ("alpha", &a.alpha),
            ("p", &a.p),
            ("k", &a.k),
            ("epochs", &a.epochs),
            ("seed", &a.seed),
            ("lr_schedule", &a.lr_schedule),
            ("lr", &a.lr),
            ("adam_eps", &a.adam_eps),
            ("adam_beta1", &a.adam_beta1),
            ("adam_beta2", &a.adam_beta2),
            ("metric", &a.metric),
            ("normalize", &a.normalize),
            ("hidden", &a.hidden),
            ("embedding_dim", &a.embedding_dim),
            ("feature_noise", &a.feature_noise),
        ],
    )?;
    let data_path = require(&s, "data")?;
    let config = s.train_config()?;
    let out = s.get("out").unwrap_or("model.ckpt").to_string();
    let trace_path = s.get("trace").map_or_else(|| format!("{out}.trace.csv"), str::to_string);

    let dataset = data::load_dataset(data_path)?;
    let outcome = train::train(&dataset, &config)?;
    for r in outcome.trace.iter().filter(|r| r.skipped > 0) {
        eprintln!("warning: epoch {} skipped {} degenerate batch(es)", r.epoch, r.skipped);
    }
    let mut echo = config.echo();
    echo.push(("data".into(), data_path.to_string()));
    Checkpoint { params: outcome.params, seed: config.seed, config: echo }.write(&out)?;
    fs::write(&trace_path, trace_to_string(&config, &outcome.trace)).map_err(Error::from)?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        println!("epoch 0 mean loss {:.6}; epoch {} mean loss {:.6}", first.mean_loss, last.epoch, last.mean_loss);
    }
    println!("wrote checkpoint {out} and trace {trace_path}");
    Ok(())
}

fn run_embed(a: &EmbedArgs) -> CmdResult {
    let s = settings(&a.config, &[("data", &a.data), ("checkpoint", &a.checkpoint), ("out", &a.out)])?;
    let dataset = data::load_dataset(require(&s, "data")?)?;
    let ckpt = Checkpoint::read(require(&s, "checkpoint")?)?;
    let out = require(&s, "out")?;
    let set = train::embed_all(&ckpt.params, &dataset)?;
    data::write_embeddings(&set, out)?;
    println!("wrote {} embeddings (F={}) to {out}", set.len(), set.dim());
    Ok(())
}

/// Query and gallery embeddings from an embedding file, or from a dataset
/// (embedded with a checkpoint when one is given).
fn load_sources(s: &Settings) -> Result<(EmbeddingSet, EmbeddingSet), Failure> {
    if let Some(path) = s.get("embeddings") {
        let set = data::read_embeddings(path)?;
        return Ok((set.split(Split::Query), set.split(Split::Gallery)));
    }
    let dataset = data::load_dataset(require(s, "data").map_err(|_| {
        Failure::Usage("one of `--data` or `--embeddings` is required".into())
    })?)?;
    match s.get("checkpoint") {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            Ok((
                train::embed(&ckpt.params, &dataset, Split::Query)?,
                train::embed(&ckpt.params, &dataset, Split::Gallery)?,
            ))
        }
        None => Ok((dataset.raw_embeddings(Split::Query), dataset.raw_embeddings(Split::Gallery))),
    }
}

fn source_flags(src: &SourceArgs) -> Vec<(&'static str, &Option<String>)> {
    vec![
        ("data", &src.data),
        ("checkpoint", &src.checkpoint),
        ("embeddings", &src.embeddings),
        ("metric", &src.metric),
    ]
}

fn run_eval(a: &EvalArgs) -> CmdResult {
    let mut flags = source_flags(&a.source);
    flags.extend([
        ("protocol", &a.protocol),
        ("trials", &a.trials),
        ("cutoffs", &a.cutoffs),
        ("seed", &a.seed),
        ("report", &a.report),
    ]);
    let s = settings(&a.source.config, &flags)?;
    let protocol = s.protocol()?;
    let metric = s.metric()?;
    let seed = s.seed_or(0)?;
    let report_path = s.get("report").unwrap_or("report.txt").to_string();
    let (query, gallery) = load_sources(&s)?;
    let mut report = evaluate(&query, &gallery, &protocol, metric, seed)?;
    report.echo = s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    fs::write(&report_path, report.to_text()).map_err(Error::from)?;

    println!("protocol: {} (trials={})", protocol.kind.name(), report.trials);
    println!("mAP: {:.4}", report.map);
    for (k, v) in report.cutoffs.iter().zip(&report.cmc) {
        println!("top-{k}: {v:.4}");
    }
    if report.excluded > 0 {
        println!("excluded queries: {}", report.excluded);
    }
    println!("wrote report {report_path}");
    Ok(())
}

fn run_retrieve(a: &RetrieveArgs) -> CmdResult {
    let mut flags = source_flags(&a.source);
    flags.extend([("top_k", &a.top_k), ("out", &a.out)]);
    let s = settings(&a.source.config, &flags)?;
    let metric = s.metric()?;
    let k: usize = match s.get("top_k") {
        None => DEFAULT_RETRIEVE_K,
        Some(v) => v.parse().map_err(|_| Failure::Usage(format!("invalid value for `top_k`: {v:?}")))?,
    };
    let out = s.get("out").unwrap_or("retrieval.csv").to_string();
    let (query, gallery) = load_sources(&s)?;
    if gallery.is_empty() {
        return Err(Failure::Runtime(Error::Protocol("gallery split is empty".into())));
    }
    if k > gallery.len() {
        eprintln!("warning: k = {k} exceeds the gallery size {}; clipping", gallery.len());
    }
    let k = k.min(gallery.len());

    let mut text = String::from("# reid-embed retrieval v1\n");
    for (key, v) in s.iter() {
        let _ = writeln!(text, "# {key}={v}");
    }
    let _ = writeln!(text, "# resolved top_k={k}");
    text.push_str("query,rank,gallery_index,identity,camera,distance\n");
    for q in 0..query.len() {
        let ranked = ranked_distances(query.embeddings.row(q), &gallery.embeddings, metric)?;
        for (rank, (g, d)) in ranked.into_iter().take(k).enumerate() {
            let _ = writeln!(text, "{q},{},{g},{},{},{d:?}", rank + 1, gallery.identities[g], gallery.cameras[g]);
        }
    }
    fs::write(&out, text).map_err(Error::from)?;
    println!("wrote top-{k} matches for {} queries to {out}", query.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Embed(a) => run_embed(a),
        Command::Eval(a) => run_eval(a),
        Command::Retrieve(a) => run_retrieve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
