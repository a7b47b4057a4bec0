//! `mcx`: simulate data, train the speaker embedder and the extractor,
//! evaluate, and run the conditioning comparison matrix.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mcx::eval::{self, EvalOptions, MatrixCell, MatrixData, MatrixSpec};
use mcx::mixsim::dataset::{Dataset, Split};
use mcx::mixsim::{build_dataset, DatasetSpec};
use mcx::model::{load_checkpoint, Conditioning, ModelConfig};
use mcx::speakers::{
    train_speaker_encoder, EmbeddingCache, EncoderConfig, EncoderTrainConfig, EnrollmentSet,
    SpeakerEncoder,
};
use mcx::training::{self, Checkpoint, LossMode, RunOutputs, TrainConfig};

/// Exit status for a violated evaluation invariant.
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mcx", version, about = "Speaker-conditioned multi-channel separation")]
struct Cli {
    /// JSON run configuration; missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset, embedder and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory holding every artifact.
    #[arg(long, global = true, default_value = "mcx-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/eval/enrollment corpus.
    Simulate,
    /// Train the speaker embedding encoder on training-speaker enrollment audio.
    TrainEmbedder(DataArgs),
    /// Compute one enrollment-averaged embedding per speaker.
    Embed(EmbedArgs),
    /// Train one extractor.
    Train(TrainArgs),
    /// Score a trained extractor on the eval split.
    Evaluate(EvaluateArgs),
    /// Train and score every cell of the comparison matrix.
    Matrix(MatrixArgs),
    /// Render a text summary and charts for a report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory [default: <out>/data].
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Encoder parameters [default: <out>/embedder/encoder.params].
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Write one-hot identity embeddings instead of encoder outputs.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct EmbeddingArgs {
    /// Embedding cache [default: <out>/embeddings.jsonl].
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    emb: EmbeddingArgs,
    #[arg(long, value_parser = parse_conditioning)]
    conditioning: Option<Conditioning>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
    /// Continue from the run directory's checkpoint if present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    emb: EmbeddingArgs,
    /// Extractor parameters saved by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Present each example's embeddings in a random slot order drawn from this seed.
    #[arg(long)]
    shuffle_slots: Option<u64>,
    /// Report path [default: <out>/eval/report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    emb: EmbeddingArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report to render [default: <out>/eval/report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_conditioning(s: &str) -> std::result::Result<Conditioning, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown conditioning '{s}' (none, concat, multiply, split)"))
}

fn parse_loss_mode(s: &str) -> std::result::Result<LossMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown loss mode '{s}' (pit, fixed_order)"))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    dataset: DatasetSpec,
    model: ModelConfig,
    train: TrainConfig,
    encoder: EncoderConfig,
    encoder_train: EncoderTrainConfig,
    enrollment: EnrollmentConfig,
    matrix: MatrixConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EnrollmentConfig {
    /// Utterances averaged per speaker; all of them when absent.
    utterances: Option<usize>,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MatrixConfig {
    seeds: Vec<u64>,
    /// Adds split cells with the spatial encoder removed (S = 0).
    spatial_ablation: bool,
    /// Explicit cells; replaces the standard comparison when present.
    cells: Option<Vec<MatrixCell>>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            spatial_ablation: true,
            cells: None,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.dataset.seed = s;
            cfg.encoder_train.seed = s;
            cfg.train.seed = s;
            cfg.enrollment.seed = s;
        }
        Ok(cfg)
    }

    fn matrix_spec(&self) -> MatrixSpec {
        let mut spec = MatrixSpec::conditioning_comparison(
            self.model.clone(),
            self.train.clone(),
            &self.matrix.seeds,
        );
        if let Some(cells) = &self.matrix.cells {
            spec.cells = cells.clone();
        } else if self.matrix.spatial_ablation {
            for &seed in &self.matrix.seeds {
                spec.cells.push(MatrixCell {
                    conditioning: Conditioning::Split,
                    loss_mode: LossMode::FixedOrder,
                    seed,
                    spatial_dim: Some(0),
                });
            }
        }
        spec
    }
}

struct Workspace {
    out: PathBuf,
}

impl Workspace {
    fn data(&self, a: &DataArgs) -> PathBuf {
        a.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn embeddings(&self, a: &EmbeddingArgs) -> PathBuf {
        a.embeddings
            .clone()
            .unwrap_or_else(|| self.out.join("embeddings.jsonl"))
    }

    fn encoder(&self) -> PathBuf {
        self.out.join("embedder").join("encoder.params")
    }

    fn default_report(&self) -> PathBuf {
        self.out.join("eval").join("report.json")
    }
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir).with_context(|| {
        format!(
            "opening dataset at {} (run `mcx simulate` first)",
            dir.display()
        )
    })
}

fn read_cache(path: &Path, needed: bool) -> Result<Option<EmbeddingCache>> {
    if !needed {
        return Ok(None);
    }
    let cache = EmbeddingCache::read(path).with_context(|| {
        format!(
            "reading embeddings from {} (run `mcx embed` first)",
            path.display()
        )
    })?;
    Ok(Some(cache))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn simulate(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let dir = ws.out.join("data");
    let ds = build_dataset(&cfg.dataset, &dir)?;
    println!(
        "wrote {} train and {} eval mixtures to {}",
        ds.train.len(),
        ds.eval.len(),
        dir.display()
    );
    Ok(())
}

fn train_embedder(cfg: &RunConfig, ws: &Workspace, args: &DataArgs) -> Result<()> {
    let ds = open_dataset(&ws.data(args))?;
    let corpus = ds.load_enrollment(Split::Train)?;
    let (enc, report) = train_speaker_encoder(&corpus, cfg.encoder.clone(), &cfg.encoder_train)?;
    let path = ws.encoder();
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    enc.save(&path)?;
    write_json(&path.with_file_name("report.json"), &report)?;
    println!(
        "encoder: {} speakers, held-out segment accuracy {:.3}",
        corpus.len(),
        report.held_out_accuracy
    );
    Ok(())
}

fn embed(cfg: &RunConfig, ws: &Workspace, args: &EmbedArgs) -> Result<()> {
    let ds = open_dataset(&ws.data(&args.data))?;
    let path = ws.out.join("embeddings.jsonl");
    let cache = if args.oracle {
        let ids = ds.speakers.iter().map(|s| s.speaker.speaker_id);
        EmbeddingCache::oracle(ids, cfg.model.embedding_dim)?
    } else {
        let enc_path = args.encoder.clone().unwrap_or_else(|| ws.encoder());
        let enc = SpeakerEncoder::load(&enc_path).with_context(|| {
            format!(
                "loading encoder {} (run `mcx train-embedder` first)",
                enc_path.display()
            )
        })?;
        let mut embs = Vec::new();
        for split in [Split::Train, Split::Eval] {
            for (id, utts) in ds.load_enrollment(split)? {
                let set = EnrollmentSet::new(id, utts)?;
                embs.push(enc.global_embedding(&set, cfg.enrollment.utterances, cfg.enrollment.seed)?);
            }
        }
        EmbeddingCache::from_embeddings(embs)?
    };
    if cache.dim() != Some(cfg.model.embedding_dim) {
        bail!(
            "embeddings have dimension {:?} but the model expects {}",
            cache.dim(),
            cfg.model.embedding_dim
        );
    }
    cache.write(&path)?;
    println!("wrote {} embeddings to {}", cache.len(), path.display());
    Ok(())
}

fn train(cfg: &RunConfig, ws: &Workspace, args: &TrainArgs) -> Result<()> {
    let mut model = cfg.model.clone();
    if let Some(c) = args.conditioning {
        model.conditioning = c;
    }
    let mut tc = cfg.train.clone();
    if let Some(m) = args.loss_mode {
        tc.loss_mode = m;
    }
    tc.validate(&model)?;
    let ds = open_dataset(&ws.data(&args.data))?;
    let examples = ds.load_split(&ds.train)?;
    let cache = read_cache(&ws.embeddings(&args.emb), model.conditioning.is_conditioned())?;
    let label = MatrixCell {
        conditioning: model.conditioning,
        loss_mode: tc.loss_mode,
        seed: tc.seed,
        spatial_dim: None,
    }
    .label(&model);
    let dir = ws.out.join("train").join(&label);
    std::fs::create_dir_all(&dir)?;
    let outputs = RunOutputs {
        checkpoint: Some(dir.join("checkpoint.ckpt")),
        best: Some(dir.join("best.params")),
        log_csv: Some(dir.join("train_log.csv")),
        dump_dir: Some(dir.clone()),
    };
    let ckpt_path = dir.join("checkpoint.ckpt");
    let start = if args.resume && ckpt_path.exists() {
        let mut ck = Checkpoint::load(&ckpt_path)?;
        // Only the epoch budget may change between invocations.
        ck.train.max_epochs = tc.max_epochs;
        if ck.model != model || ck.train != tc {
            bail!("checkpoint in {} was written with a different configuration", dir.display());
        }
        log::info!("resuming {label} after epoch {}", ck.state.epoch);
        ck
    } else {
        Checkpoint::fresh(&model, &tc)?
    };
    let ck = training::train_from(start, &examples, cache.as_ref(), &outputs)?;
    let last = ck.state.history.last();
    println!(
        "{label}: {} epochs, best validation loss {:.3}, final lr {:.2e}; parameters in {}",
        ck.state.epoch,
        ck.state.best_val_loss,
        last.map_or(tc.lr, |r| r.lr),
        dir.join("best.params").display()
    );
    Ok(())
}

fn evaluate(ws: &Workspace, args: &EvaluateArgs) -> Result<()> {
    let (params, model) = load_checkpoint(&args.model)
        .with_context(|| format!("loading extractor {}", args.model.display()))?;
    let ds = open_dataset(&ws.data(&args.data))?;
    let examples = ds.load_split(&ds.eval)?;
    let cache = read_cache(&ws.embeddings(&args.emb), model.conditioning.is_conditioned())?;
    let opts = EvalOptions {
        shuffle_slots: args.shuffle_slots,
    };
    let report = eval::evaluate(&params, &model, &examples, cache.as_ref(), &opts)?;
    let path = args.report.clone().unwrap_or_else(|| ws.default_report());
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    report.save(&path)?;
    print!("{}", eval::summary_text(&report));
    println!("report: {}", path.display());
    Ok(())
}

fn matrix(cfg: &RunConfig, ws: &Workspace, args: &MatrixArgs) -> Result<()> {
    let spec = cfg.matrix_spec();
    if spec.cells.is_empty() {
        bail!("the matrix has no cells");
    }
    let ds = open_dataset(&ws.data(&args.data))?;
    let train = ds.load_split(&ds.train)?;
    let evals = ds.load_split(&ds.eval)?;
    let any_conditioned = spec.cells.iter().any(|c| c.conditioning.is_conditioned());
    let cache = read_cache(&ws.embeddings(&args.emb), any_conditioned)?;
    let data = MatrixData {
        train: &train,
        eval: &evals,
        train_embeddings: cache.as_ref(),
        eval_embeddings: cache.as_ref(),
    };
    let dir = ws.out.join("matrix");
    write_json(&dir.join("matrix.json"), &spec)?;
    let results = eval::run_experiment_matrix(&spec, &data, &dir)?;
    print!("{}", eval::comparison_csv(&results, &spec.model));
    println!("comparison: {}", dir.join("comparison.csv").display());
    Ok(())
}

fn report(ws: &Workspace, args: &ReportArgs) -> Result<()> {
    let path = args.report.clone().unwrap_or_else(|| ws.default_report());
    let report = eval::EvalReport::load(&path)
        .with_context(|| format!("loading report {}", path.display()))?;
    let dir = ws.out.join("report");
    let text = eval::render_report(&report, &dir)?;
    print!("{text}");
    println!("charts: {}", dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let ws = Workspace {
        out: cli.out.clone(),
    };
    std::fs::create_dir_all(&ws.out)
        .with_context(|| format!("creating {}", ws.out.display()))?;
    match &cli.command {
        Command::Simulate => simulate(&cfg, &ws),
        Command::TrainEmbedder(a) => train_embedder(&cfg, &ws, a),
        Command::Embed(a) => embed(&cfg, &ws, a),
        Command::Train(a) => train(&cfg, &ws, a),
        Command::Evaluate(a) => evaluate(&ws, a),
        Command::Matrix(a) => matrix(&cfg, &ws, a),
        Command::Report(a) => report(&ws, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<mcx::Error>(), Some(mcx::Error::Invariant(_))));
            ExitCode::from(if invariant { EXIT_INVARIANT } else { 1 })
        }
    }
}
