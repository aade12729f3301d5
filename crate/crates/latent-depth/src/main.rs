//! Command-line entry point: corpus generation, training, evaluation,
//! pruning, gradient audits, scaling probes, and history export.
//!
//! Exit codes: 0 success, 2 usage/validation, 3 divergence, 4 gradient-check
//! failure.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

use latent_depth::diagnostics::{
    export_history, grad_check, gradient_scaling_probe, GateAssignment, UtilizationRow,
};
use latent_depth::gate::{derive_rng, GateMode, GumbelConfig, PosteriorTable, PriorSpec};
use latent_depth::loss::{AnnealSchedule, LossConfig};
use latent_depth::model::{
    prune_parameters, GatingMode, ModelParameters, NormMode, StackConfig, StackId,
};
use latent_depth::tasks::{
    self, export_corpus, generate_corpus, import_corpus, pad_batch, preset_specs, Corpus, Split,
    Vocab, PRESET_NAMES,
};
use latent_depth::trainer::{
    metrics_to_csv, validations_to_csv, Checkpoint, TrainConfig, TrainError, Trainer,
};

const MANIFEST_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "latent-depth", version, about = "Transformers with latent layer depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-task cipher corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model; writes manifest, checkpoints, and logs to --out.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint: per-task NLL, token accuracy, effective depth.
    Eval(EvalArgs),
    /// Threshold the posterior into a physically pruned checkpoint.
    Prune(PruneArgs),
    /// Audit analytic gradients against finite differences on a toy model.
    Gradcheck(GradcheckArgs),
    /// Per-layer activation-gradient norms under gate assignments.
    Probe(ProbeArgs),
    /// Convert a saved utilization history to CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Benchmark preset: m2o-diverse4, o2m-diverse4, m2o-related4, o2m-related4.
    #[arg(long)]
    tasks: String,
    #[arg(long, default_value_t = 48)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for the corpus files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Run directory (manifest, checkpoints/, metrics.csv, utilization.csv).
    #[arg(long)]
    out: PathBuf,
    /// Manifest/config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Corpus preset to generate in memory.
    #[arg(long)]
    preset: Option<String>,
    /// Directory of a previously generated corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<usize>,
    /// Decoder gating mode: static, layerdrop[:p], latent.
    #[arg(long)]
    gating: Option<String>,
    /// Encoder gating mode (defaults to static).
    #[arg(long)]
    encoder_gating: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Target depth K for the depth loss.
    #[arg(long = "K", alias = "target-depth")]
    target_depth: Option<f64>,
    /// Prior: uniform, beta:a,b, aggregate.
    #[arg(long)]
    prior: Option<String>,
    /// Linear KL-annealing warmup in weight updates (0 disables).
    #[arg(long)]
    anneal_warmup: Option<u64>,
    #[arg(long)]
    inner_loop: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    /// Normalization: pre or none.
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Initialization scale for sub-layer output projections.
    #[arg(long)]
    branch_init_scale: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning-rate multiplier for posterior-logit updates.
    #[arg(long)]
    alpha_lr_scale: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    validate_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    snapshot_every: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Gate source: soft (probabilities) or hard (argmax).
    #[arg(long, default_value = "soft")]
    gates: String,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long, default_value = "valid")]
    split: String,
    /// Optional CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Prune for one task's sub-network instead of the all-task union.
    #[arg(long)]
    task: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Layers per stack of the audited toy model.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Floating-point precision; only 64 is supported.
    #[arg(long, default_value_t = 64)]
    precision: u32,
    /// Sampled coordinates per parameter group.
    #[arg(long, default_value_t = 48)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value = "pre")]
    norm: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optional CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Assignments: zeros, ones, soft, or all.
    #[arg(long, default_value = "all")]
    gates: String,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value = "pre")]
    norm: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// history.json written by `train`.
    #[arg(long)]
    history: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    Usage(String),
    Diverged(String),
    GradCheckFailed,
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::GradCheckFailed => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{}", m),
            CliError::Diverged(m) => write!(f, "{}", m),
            CliError::GradCheckFailed => write!(f, "gradient check failed"),
            CliError::Io(m) => write!(f, "{}", m),
        }
    }
}

fn io_err<E: fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {}", context, e))
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("latent-depth: error: {}", e);
        std::process::exit(e.code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Train(a) => cmd_train(*a),
        Command::Eval(a) => cmd_eval(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Export(a) => cmd_export(a),
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
enum CorpusSource {
    Preset { name: String, vocab: usize, seed: u64 },
    Dir { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunManifest {
    version: u32,
    model: StackConfig,
    train: TrainConfig,
    loss: LossConfig,
    gumbel: GumbelConfig,
    corpus: CorpusSource,
}

impl RunManifest {
    fn defaults() -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            model: StackConfig {
                encoder_layers: 2,
                decoder_layers: 4,
                model_dim: 64,
                ffn_dim: 128,
                heads: 4,
                vocab: 48,
                norm_mode: NormMode::PreNorm,
                encoder_gating: GatingMode::Static,
                decoder_gating: GatingMode::Latent,
                branch_init_scale: 1.0,
            },
            train: TrainConfig::default(),
            loss: LossConfig::default_latent(),
            gumbel: GumbelConfig::soft(1.0, TrainConfig::default().seed),
            corpus: CorpusSource::Preset {
                name: "m2o-diverse4".into(),
                vocab: 48,
                seed: TrainConfig::default().seed,
            },
        }
    }
}

fn parse_gating(s: &str) -> Result<GatingMode, CliError> {
    if s == "static" {
        return Ok(GatingMode::Static);
    }
    if s == "latent" {
        return Ok(GatingMode::Latent);
    }
    if s == "layerdrop" {
        return Ok(GatingMode::LayerDrop { p_drop: 0.5 });
    }
    if let Some(rest) = s.strip_prefix("layerdrop:") {
        let p: f64 = rest
            .parse()
            .map_err(|_| CliError::Usage(format!("invalid layerdrop probability `{}`", rest)))?;
        if !(0.0..1.0).contains(&p) {
            return Err(CliError::Usage(format!(
                "layerdrop probability {} outside [0,1)",
                p
            )));
        }
        return Ok(GatingMode::LayerDrop { p_drop: p });
    }
    Err(CliError::Usage(format!(
        "unknown gating mode `{}` (expected static, layerdrop[:p], latent)",
        s
    )))
}

fn parse_prior(s: &str) -> Result<PriorSpec, CliError> {
    match s {
        "uniform" => Ok(PriorSpec::Uniform),
        "aggregate" | "aggregated" => Ok(PriorSpec::AggregatedPosterior),
        _ => {
            if let Some(rest) = s.strip_prefix("beta:") {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() == 2 {
                    let a: f64 = parts[0]
                        .parse()
                        .map_err(|_| CliError::Usage(format!("invalid beta parameter `{}`", parts[0])))?;
                    let b: f64 = parts[1]
                        .parse()
                        .map_err(|_| CliError::Usage(format!("invalid beta parameter `{}`", parts[1])))?;
                    if a <= 0.0 || b <= 0.0 {
                        return Err(CliError::Usage(
                            "beta prior parameters must be strictly positive".into(),
                        ));
                    }
                    return Ok(PriorSpec::Beta { a, b });
                }
            }
            Err(CliError::Usage(format!(
                "unknown prior `{}` (expected uniform, beta:a,b, aggregate)",
                s
            )))
        }
    }
}

fn parse_norm(s: &str) -> Result<NormMode, CliError> {
    match s {
        "pre" | "pre-norm" => Ok(NormMode::PreNorm),
        "none" | "no-norm" => Ok(NormMode::NoNorm),
        _ => Err(CliError::Usage(format!(
            "unknown norm mode `{}` (expected pre or none)",
            s
        ))),
    }
}

fn resolve_manifest(args: &TrainArgs) -> Result<RunManifest, CliError> {
    let mut m = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(io_err(&format!("reading config {}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("parsing config {}: {}", path.display(), e)))?
        }
        None => RunManifest::defaults(),
    };

    if let Some(g) = &args.gating {
        m.model.decoder_gating = parse_gating(g)?;
    }
    if let Some(g) = &args.encoder_gating {
        m.model.encoder_gating = parse_gating(g)?;
    }
    if let Some(v) = args.encoder_layers {
        m.model.encoder_layers = v;
    }
    if let Some(v) = args.decoder_layers {
        m.model.decoder_layers = v;
    }
    if let Some(n) = &args.norm {
        m.model.norm_mode = parse_norm(n)?;
    }
    if let Some(v) = args.vocab {
        m.model.vocab = v;
    }
    if let Some(v) = args.dim {
        m.model.model_dim = v;
    }
    if let Some(v) = args.ffn_dim {
        m.model.ffn_dim = v;
    }
    if let Some(v) = args.heads {
        m.model.heads = v;
    }
    if let Some(v) = args.branch_init_scale {
        if v <= 0.0 {
            return Err(CliError::Usage(format!(
                "--branch-init-scale must be positive, got {}",
                v
            )));
        }
        m.model.branch_init_scale = v;
    }
    if let Some(v) = args.beta {
        m.loss.beta = v;
    }
    if let Some(v) = args.lambda {
        m.loss.lambda = v;
    }
    if let Some(v) = args.target_depth {
        m.loss.target_depth = v;
    }
    if let Some(p) = &args.prior {
        m.loss.prior = parse_prior(p)?;
    }
    if let Some(w) = args.anneal_warmup {
        m.loss.anneal = if w == 0 {
            AnnealSchedule::None
        } else {
            AnnealSchedule::Linear { warmup_steps: w }
        };
    }
    if let Some(v) = args.inner_loop {
        m.train.inner_loop = v;
    }
    if let Some(v) = args.steps {
        m.train.outer_steps = v;
    }
    if let Some(v) = args.seed {
        m.train.seed = v;
        m.gumbel.seed = v;
    }
    if let Some(v) = args.lr {
        m.train.lr = v;
    }
    if let Some(v) = args.warmup {
        m.train.warmup_steps = v;
    }
    if let Some(v) = args.batch_size {
        m.train.batch_size = v;
    }
    if let Some(v) = args.alpha_lr_scale {
        if v <= 0.0 {
            return Err(CliError::Usage(format!(
                "--alpha-lr-scale must be positive, got {}",
                v
            )));
        }
        m.train.alpha_lr_scale = v;
    }
    if let Some(v) = args.temperature {
        m.gumbel.temperature = v;
    }
    if let Some(v) = args.validate_every {
        m.train.validate_every = v;
    }
    if let Some(v) = args.checkpoint_every {
        m.train.checkpoint_every = v;
    }
    if let Some(v) = args.snapshot_every {
        m.train.snapshot_every = v;
    }
    // A depth penalty needs a meaningful target: default K to half the
    // depth-target stack when lambda is active and no K was given anywhere.
    if args.target_depth.is_none() && args.config.is_none() && m.loss.lambda > 0.0 {
        let latent_layers = match (m.model.decoder_gating, m.model.encoder_gating) {
            (GatingMode::Latent, _) => Some(m.model.decoder_layers),
            (_, GatingMode::Latent) => Some(m.model.encoder_layers),
            _ => None,
        };
        if let Some(layers) = latent_layers {
            m.loss.target_depth = layers as f64 / 2.0;
        }
    }
    if let Some(p) = &args.corpus {
        m.corpus = CorpusSource::Dir { path: p.clone() };
    } else if let Some(name) = &args.preset {
        m.corpus = CorpusSource::Preset {
            name: name.clone(),
            vocab: args.vocab.unwrap_or(m.model.vocab),
            seed: m.train.seed,
        };
    } else if let CorpusSource::Preset { seed, vocab, .. } = &mut m.corpus {
        // Keep the preset tied to the run seed unless a config pinned it.
        if args.config.is_none() {
            *seed = m.train.seed;
            if let Some(v) = args.vocab {
                *vocab = v;
            }
        }
    }

    validate_manifest(&m)?;
    Ok(m)
}

fn validate_manifest(m: &RunManifest) -> Result<(), CliError> {
    let fail = |msg: String| Err(CliError::Usage(msg));
    if m.loss.beta < 0.0 {
        return fail(format!("--beta must be nonnegative, got {}", m.loss.beta));
    }
    if m.loss.lambda < 0.0 {
        return fail(format!("--lambda must be nonnegative, got {}", m.loss.lambda));
    }
    if m.loss.target_depth < 0.0 {
        return fail(format!("--K must be nonnegative, got {}", m.loss.target_depth));
    }
    if m.gumbel.temperature <= 0.0 {
        return fail(format!(
            "--temperature must be positive, got {}",
            m.gumbel.temperature
        ));
    }
    if m.train.lr <= 0.0 {
        return fail(format!("--lr must be positive, got {}", m.train.lr));
    }
    if m.train.outer_steps < 1 || m.train.inner_loop < 1 {
        return fail("--steps and --inner-loop must be at least 1".into());
    }
    if m.model.model_dim % m.model.heads != 0 {
        return fail(format!(
            "--dim {} must be divisible by --heads {}",
            m.model.model_dim, m.model.heads
        ));
    }
    if let CorpusSource::Preset { name, vocab, .. } = &m.corpus {
        if !PRESET_NAMES.contains(&name.as_str()) {
            return fail(format!(
                "unknown preset `{}` (expected one of {})",
                name,
                PRESET_NAMES.join(", ")
            ));
        }
        if *vocab < 16 {
            return fail(format!("--vocab must be at least 16, got {}", vocab));
        }
        if *vocab != m.model.vocab {
            return fail(format!(
                "corpus vocab {} differs from model vocab {}",
                vocab, m.model.vocab
            ));
        }
    }
    Ok(())
}

fn load_corpus(source: &CorpusSource) -> Result<Corpus, CliError> {
    match source {
        CorpusSource::Preset { name, vocab, seed } => {
            let v = Vocab::new(*vocab, 4);
            let specs = preset_specs(name, &v, *seed)
                .ok_or_else(|| CliError::Usage(format!("unknown preset `{}`", name)))?;
            Ok(generate_corpus(&specs, &v, *seed))
        }
        CorpusSource::Dir { path } => import_corpus(path).map_err(CliError::Io),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    if args.vocab < 16 {
        return Err(CliError::Usage(format!(
            "--vocab must be at least 16, got {}",
            args.vocab
        )));
    }
    let vocab = Vocab::new(args.vocab, 4);
    let specs = preset_specs(&args.tasks, &vocab, args.seed).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown preset `{}` (expected one of {})",
            args.tasks,
            PRESET_NAMES.join(", ")
        ))
    })?;
    let corpus = generate_corpus(&specs, &vocab, args.seed);
    export_corpus(&corpus, &args.out).map_err(io_err("writing corpus"))?;
    println!("corpus `{}` written to {}", args.tasks, args.out.display());
    for (n, data) in corpus.data.iter().enumerate() {
        println!(
            "  task {}: train {} valid {} test {}",
            n,
            data.train.len(),
            data.valid.len(),
            data.test.len()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let manifest = resolve_manifest(&args)?;
    let corpus = load_corpus(&manifest.corpus)?;
    if corpus.vocab.size != manifest.model.vocab {
        return Err(CliError::Usage(format!(
            "corpus vocab {} differs from model vocab {}",
            corpus.vocab.size, manifest.model.vocab
        )));
    }

    std::fs::create_dir_all(&args.out).map_err(io_err("creating run directory"))?;
    let manifest_text =
        toml::to_string_pretty(&manifest).expect("manifest serializes to TOML");
    std::fs::write(args.out.join("manifest.toml"), manifest_text)
        .map_err(io_err("writing manifest"))?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(io_err("loading checkpoint"))?;
            if ckpt.model_cfg != manifest.model {
                return Err(CliError::Usage(
                    "resume: model configuration differs from the checkpoint".into(),
                ));
            }
            if ckpt.train_cfg.seed != manifest.train.seed {
                return Err(CliError::Usage(
                    "resume: seed differs from the checkpoint; continuing would not reproduce the run".into(),
                ));
            }
            let mut t = Trainer::from_checkpoint(ckpt, corpus);
            // The manifest (plus flag overrides) governs the continued run;
            // with identical settings this reproduces the uninterrupted run
            // bitwise.
            t.train_cfg = manifest.train.clone();
            t.loss_cfg = manifest.loss.clone();
            t.gumbel_cfg = manifest.gumbel.clone();
            t
        }
        None => Trainer::new(
            manifest.model.clone(),
            manifest.train.clone(),
            manifest.loss.clone(),
            manifest.gumbel.clone(),
            corpus,
        ),
    };

    let outcome = trainer.train(Some(&args.out));
    // Persist logs even when the run aborts as diverged.
    write_logs(&trainer, &args.out)?;
    match outcome {
        Ok(()) => {
            let rows = trainer.validate_now(true);
            write_logs(&trainer, &args.out)?;
            println!(
                "trained {} outer steps ({} weight updates, {} skipped, {} clip events)",
                trainer.outer_step, trainer.inner_updates, trainer.total_skips, trainer.clip_events
            );
            for r in &rows {
                println!(
                    "  task {}: valid nll {:.4} accuracy {:.4} E_L(dec) {:.2}",
                    r.task, r.nll, r.accuracy, r.effective_depth_dec
                );
            }
            Ok(())
        }
        Err(TrainError::Diverged {
            outer_step,
            last_finite_total,
        }) => Err(CliError::Diverged(format!(
            "training diverged at outer step {} (last finite total: {})",
            outer_step,
            last_finite_total.map_or("none".to_string(), |v| format!("{:.4}", v))
        ))),
        Err(TrainError::Io(e)) => Err(CliError::Io(format!("during training: {}", e))),
    }
}

fn write_logs(trainer: &Trainer, out: &Path) -> Result<(), CliError> {
    std::fs::write(out.join("metrics.csv"), metrics_to_csv(&trainer.metrics))
        .map_err(io_err("writing metrics.csv"))?;
    std::fs::write(
        out.join("validation.csv"),
        validations_to_csv(&trainer.validations),
    )
    .map_err(io_err("writing validation.csv"))?;
    if !trainer.history.is_empty() {
        export_history(&trainer.history, &out.join("utilization.csv"))
            .map_err(io_err("writing utilization.csv"))?;
        std::fs::write(
            out.join("history.json"),
            serde_json::to_vec(&trainer.history).expect("history serializes"),
        )
        .map_err(io_err("writing history.json"))?;
    }
    if !trainer.incidents.is_empty() {
        std::fs::write(out.join("incidents.log"), trainer.incidents.join("\n") + "\n")
            .map_err(io_err("writing incidents.log"))?;
    }
    Ok(())
}

fn eval_corpus_source(args: &EvalArgs, ckpt: &Checkpoint) -> Result<Corpus, CliError> {
    if let Some(dir) = &args.corpus {
        return import_corpus(dir).map_err(CliError::Io);
    }
    let name = args
        .preset
        .clone()
        .ok_or_else(|| CliError::Usage("eval requires --preset or --corpus".into()))?;
    let vocab = Vocab::new(args.vocab.unwrap_or(ckpt.model_cfg.vocab), 4);
    let seed = args.corpus_seed.unwrap_or(ckpt.train_cfg.seed);
    let specs = preset_specs(&name, &vocab, seed)
        .ok_or_else(|| CliError::Usage(format!("unknown preset `{}`", name)))?;
    Ok(generate_corpus(&specs, &vocab, seed))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mode = match args.gates.as_str() {
        "soft" => GateMode::Soft,
        "hard" => GateMode::Hard,
        other => {
            return Err(CliError::Usage(format!(
                "unknown gate mode `{}` (expected soft or hard)",
                other
            )))
        }
    };
    let split = match args.split.as_str() {
        "valid" => Split::Valid,
        "test" => Split::Test,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split `{}` (expected valid or test)",
                other
            )))
        }
    };
    if !args.checkpoint.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(io_err("loading checkpoint"))?;
    let corpus = eval_corpus_source(&args, &ckpt)?;
    let trainer = Trainer::from_checkpoint(ckpt, corpus);

    let mut csv = String::from("task,nll,accuracy,effective_depth_enc,effective_depth_dec\n");
    println!("evaluation ({:?} gates, {:?} split):", mode, split);
    for task in 0..trainer.num_tasks() {
        let (enc, dec) = trainer.eval_gates(task, mode);
        let nll = tasks::eval_nll(
            &trainer.params,
            &trainer.model_cfg,
            &trainer.corpus,
            task,
            split,
            &enc,
            &dec,
        );
        let acc = tasks::token_accuracy(
            &trainer.params,
            &trainer.model_cfg,
            &trainer.corpus,
            task,
            split,
            &enc,
            &dec,
        );
        let el_enc = trainer
            .enc_posterior
            .as_ref()
            .map_or(trainer.model_cfg.encoder_layers as f64, |t| t.effective_depth(task));
        let el_dec = trainer
            .dec_posterior
            .as_ref()
            .map_or(trainer.model_cfg.decoder_layers as f64, |t| t.effective_depth(task));
        println!(
            "  task {}: nll {:.6} accuracy {:.4} E_L enc {:.3} dec {:.3}",
            task, nll, acc, el_enc, el_dec
        );
        csv.push_str(&format!("{},{},{},{},{}\n", task, nll, acc, el_enc, el_dec));
    }
    if let Some(path) = &args.out {
        std::fs::write(path, csv).map_err(io_err("writing eval report"))?;
    }
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::Usage(format!(
            "--threshold must be in [0,1], got {}",
            args.threshold
        )));
    }
    if !args.checkpoint.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(io_err("loading checkpoint"))?;
    let cfg = &ckpt.model_cfg;

    // Per-task keep masks; the global mask keeps a layer that any task keeps
    // (or, with --task, exactly that task's mask).
    let masks_for = |table: &Option<PosteriorTable>, layers: usize| -> (Vec<Vec<bool>>, Vec<bool>) {
        match table {
            None => (vec![], vec![true; layers]),
            Some(t) => {
                let per_task: Vec<Vec<bool>> = (0..t.num_tasks())
                    .map(|n| t.prune(n, args.threshold))
                    .collect();
                let global = match args.task {
                    Some(n) => {
                        assert!(n < t.num_tasks(), "prune: task {} does not exist", n);
                        per_task[n].clone()
                    }
                    None => (0..layers)
                        .map(|l| per_task.iter().any(|m| m[l]))
                        .collect(),
                };
                (per_task, global)
            }
        }
    };
    let (enc_masks, enc_keep) = masks_for(&ckpt.enc_posterior, cfg.encoder_layers);
    let (dec_masks, dec_keep) = masks_for(&ckpt.dec_posterior, cfg.decoder_layers);

    if enc_keep.iter().all(|k| !k) || dec_keep.iter().all(|k| !k) {
        eprintln!("latent-depth: warning: pruning removed every layer of a stack; emitting an identity model");
    }

    let before = ckpt.params.param_count();
    let (new_params, new_cfg) = prune_parameters(&ckpt.params, cfg, &enc_keep, &dec_keep);
    let after = new_params.param_count();

    let remap_table = |table: &Option<PosteriorTable>, keep: &[bool]| -> Option<PosteriorTable> {
        let t = table.as_ref()?;
        let kept: Vec<usize> = (0..t.num_layers()).filter(|&l| keep[l]).collect();
        if kept.is_empty() {
            // Identity model: a single always-skip layer remains.
            let mut nt = PosteriorTable::new(t.num_tasks(), 1);
            for task in 0..t.num_tasks() {
                nt.set_pair(task, 0, (50.0, 0.0));
            }
            return Some(nt);
        }
        let mut nt = PosteriorTable::new(t.num_tasks(), kept.len());
        for task in 0..t.num_tasks() {
            for (new_l, &old_l) in kept.iter().enumerate() {
                nt.set_pair(task, new_l, t.pair(task, old_l));
            }
        }
        Some(nt)
    };

    let new_ckpt = Checkpoint {
        version: ckpt.version,
        model_cfg: new_cfg.clone(),
        train_cfg: ckpt.train_cfg.clone(),
        loss_cfg: ckpt.loss_cfg.clone(),
        gumbel_cfg: ckpt.gumbel_cfg.clone(),
        enc_posterior: remap_table(&ckpt.enc_posterior, &enc_keep),
        dec_posterior: remap_table(&ckpt.dec_posterior, &dec_keep),
        adam_theta: new_params
            .iter()
            .map(|(name, _)| (name.clone(), Default::default()))
            .collect(),
        adam_alpha: Default::default(),
        params: new_params,
        outer_step: ckpt.outer_step,
        inner_updates: ckpt.inner_updates,
        stream_states: ckpt.stream_states.clone(),
        agg_enc: None,
        agg_dec: None,
        consecutive_skips: 0,
        total_skips: ckpt.total_skips,
        clip_events: ckpt.clip_events,
        corpus_seed: ckpt.corpus_seed,
    };

    std::fs::create_dir_all(&args.out).map_err(io_err("creating output directory"))?;
    new_ckpt
        .save(&args.out.join("pruned.json"))
        .map_err(io_err("writing pruned checkpoint"))?;

    let mut report = String::from("stack,task,layer,pi,keep\n");
    let mut describe = |stack: StackId, table: &Option<PosteriorTable>, masks: &[Vec<bool>]| {
        if let Some(t) = table {
            for task in 0..t.num_tasks() {
                for layer in 0..t.num_layers() {
                    report.push_str(&format!(
                        "{},{},{},{},{}\n",
                        stack.prefix(),
                        task,
                        layer,
                        t.selection_probability(task, layer),
                        masks[task][layer]
                    ));
                }
            }
        }
    };
    describe(StackId::Encoder, &ckpt.enc_posterior, &enc_masks);
    describe(StackId::Decoder, &ckpt.dec_posterior, &dec_masks);
    std::fs::write(args.out.join("prune_report.csv"), &report)
        .map_err(io_err("writing prune report"))?;

    println!(
        "pruned: {} -> {} encoder layers, {} -> {} decoder layers",
        cfg.encoder_layers, new_cfg.encoder_layers, cfg.decoder_layers, new_cfg.decoder_layers
    );
    println!("parameters: {} -> {} ({:.1}% kept)", before, after, 100.0 * after as f64 / before as f64);
    println!("pruned checkpoint: {}", args.out.join("pruned.json").display());
    Ok(())
}

/// A deterministic micro-batch for audits: a tiny identity-cipher corpus.
fn audit_batch(vocab: &Vocab, seed: u64) -> latent_depth::model::PaddedBatch {
    let specs = vec![tasks::TaskSpec {
        id: 0,
        direction: tasks::Direction::ToCanonical,
        cipher: tasks::Cipher::identity(vocab),
        volume: 2,
        len_range: (3, 4),
    }];
    let corpus = generate_corpus(&specs, vocab, seed);
    let refs: Vec<&tasks::Example> = corpus.split(0, Split::Train).iter().collect();
    pad_batch(&refs)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if args.precision != 64 {
        return Err(CliError::Usage(format!(
            "--precision {} not supported: gradient audits run at 64-bit only",
            args.precision
        )));
    }
    if args.layers == 0 {
        return Err(CliError::Usage("--layers must be at least 1".into()));
    }
    let norm = parse_norm(&args.norm)?;
    let vocab = Vocab::new(32, 4);
    let cfg = StackConfig {
        encoder_layers: args.layers,
        decoder_layers: args.layers,
        model_dim: 64,
        ffn_dim: 128,
        heads: 4,
        vocab: vocab.size,
        norm_mode: norm,
        encoder_gating: GatingMode::Latent,
        decoder_gating: GatingMode::Latent,
        branch_init_scale: 1.0,
    };
    let params = ModelParameters::init(&cfg, args.seed);
    let batch = audit_batch(&vocab, args.seed);
    // Soft gates from uniform posteriors with frozen noise.
    let mut rng = derive_rng(args.seed, &[0xF0]);
    let enc: Vec<f64> = (0..cfg.encoder_layers)
        .map(|_| latent_depth::gate::sample_soft_rng((0.0, 0.0), 1.0, &mut rng))
        .collect();
    let dec: Vec<f64> = (0..cfg.decoder_layers)
        .map(|_| latent_depth::gate::sample_soft_rng((0.0, 0.0), 1.0, &mut rng))
        .collect();
    let report = grad_check(
        &params,
        &cfg,
        &batch,
        &enc,
        &dec,
        args.tolerance,
        args.samples,
        args.seed,
    );
    print!("{}", report);
    if let Some(path) = &args.out {
        std::fs::write(path, report.to_csv()).map_err(io_err("writing gradcheck report"))?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed)
    }
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    let norm = parse_norm(&args.norm)?;
    let assignments: Vec<GateAssignment> = match args.gates.as_str() {
        "zeros" => vec![GateAssignment::AllZeros],
        "ones" => vec![GateAssignment::AllOnes],
        "soft" => vec![GateAssignment::SampledSoft],
        "all" => vec![
            GateAssignment::AllOnes,
            GateAssignment::AllZeros,
            GateAssignment::SampledSoft,
        ],
        other => {
            return Err(CliError::Usage(format!(
                "unknown gate assignment `{}` (expected zeros, ones, soft, all)",
                other
            )))
        }
    };
    let vocab = Vocab::new(32, 4);
    let cfg = StackConfig {
        encoder_layers: 2,
        decoder_layers: args.layers,
        model_dim: 64,
        ffn_dim: 128,
        heads: 4,
        vocab: vocab.size,
        norm_mode: norm,
        encoder_gating: GatingMode::Static,
        decoder_gating: GatingMode::Latent,
        branch_init_scale: 1.0,
    };
    let params = ModelParameters::init(&cfg, args.seed);
    let batch = audit_batch(&vocab, args.seed);
    let table = gradient_scaling_probe(&params, &cfg, &batch, &assignments, args.seed);
    let csv = table.to_csv();
    print!("{}", csv);
    if let Some(path) = &args.out {
        std::fs::write(path, csv).map_err(io_err("writing probe table"))?;
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.history)
        .map_err(io_err(&format!("reading {}", args.history.display())))?;
    let rows: Vec<UtilizationRow> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("parsing {}: {}", args.history.display(), e)))?;
    export_history(&rows, &args.out).map_err(io_err("writing CSV"))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
