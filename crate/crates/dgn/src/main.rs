//! Pipeline command-line surface: synth, label, train, generate, eval,
//! gradcheck. Exit codes: 0 ok, 2 I/O, 3 invalid config/data, 4 numerical
//! failure.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dgn::config::{ConfigError, RunConfig};
use dgn::corpus::{self, CorpusError, RecipeRecord, SynthConfig, Vocabulary};
use dgn::labeler::{
    assign_pseudo_labels, corpus_phase_points, kmeans_fit, LabelError, VerbEmbeddings, VerbLexicon,
};
use dgn::metrics::{bleu, corpus_stats, rouge_l_corpus, EvalReport, MetricError};
use dgn::training::{
    generate_recipe, load_checkpoint, save_checkpoint, train, AdamState, DgnModel, TrainError,
};

const EXIT_IO: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn io(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: msg.into(),
        }
    }
    fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: msg.into(),
        }
    }
    fn numeric(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: msg.into(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => CliError::io(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::io(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Io(_) => CliError::io(e.to_string()),
            TrainError::Tensor(dgn::tensor::TensorError::NonFinite(_)) => {
                CliError::numeric(e.to_string())
            }
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "dgn", about = "Decomposed recipe generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "phase-types", default_value_t = 3)]
        phase_types: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Cluster phase representations and attach pseudo labels.
    Label {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Labels output (default: <corpus>.labels.jsonl)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, metrics log, and config snapshot.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Labels file (default: <corpus>.labels.jsonl; unused in baseline mode)
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set model.hidden=32
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate recipes for every record of an input corpus.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: perplexity, BLEU, ROUGE-L, corpus stats.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite and print the max error.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        /// Sampled coordinates per parameter for the full-model check.
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
}

/// Worker-thread cap from DGN_THREADS; compute here is sequential, so the
/// cap only validates and logs, keeping the interface stable.
fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("DGN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::data(format!("DGN_THREADS must be a positive integer, got `{v}`"))),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(format!("missing file: {}", path.display())))
    }
}

fn write_config_snapshot(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run-config.txt"), cfg.to_file_string())?;
    Ok(())
}

fn out_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Serialize, Deserialize)]
struct LabelsLine {
    id: String,
    labels: Vec<usize>,
}

#[derive(Serialize)]
struct GeneratedLine {
    id: String,
    structure: Vec<usize>,
    text: String,
}

fn default_labels_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_os_string();
    s.push(".labels.jsonl");
    PathBuf::from(s)
}

fn load_labels(path: &Path, corpus: &mut [RecipeRecord]) -> Result<(), CliError> {
    require_file(path)?;
    let mut by_id: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabelsLine = serde_json::from_str(line)
            .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        by_id.insert(parsed.id, parsed.labels);
    }
    for rec in corpus.iter_mut() {
        let labels = by_id
            .get(&rec.id)
            .ok_or_else(|| CliError::data(format!("no labels for record {}", rec.id)))?;
        if labels.len() != rec.phases.len() {
            return Err(CliError::data(format!(
                "record {}: {} labels for {} phases",
                rec.id,
                labels.len(),
                rec.phases.len()
            )));
        }
        rec.pseudo_labels = Some(labels.clone());
    }
    Ok(())
}

fn cmd_synth(
    out: &Path,
    n: usize,
    seed: u64,
    phase_types: usize,
    noise: f64,
) -> Result<(), CliError> {
    if phase_types == 0 || phase_types > 3 {
        return Err(CliError::data("phase-types must be 1..=3"));
    }
    let corpus = corpus::generate_synthetic(&SynthConfig {
        seed,
        n_recipes: n,
        n_phase_types: phase_types,
        noise,
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    corpus::save_jsonl(out, &corpus)?;
    let manifest = serde_json::json!({
        "seed": seed,
        "n": n,
        "phase_types": phase_types,
        "noise": noise,
        "records": corpus.len(),
    });
    let mut manifest_path = out.as_os_str().to_os_string();
    manifest_path.push(".manifest.json");
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest).unwrap())?;
    write_config_snapshot(&out_dir(out), &RunConfig::default())?;
    info!("wrote {} records to {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_label(corpus_path: &Path, k: usize, seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    require_file(corpus_path)?;
    let mut recipes = corpus::load_jsonl(corpus_path)?;
    let lexicon = VerbLexicon::builtin();
    let embeddings = VerbEmbeddings::train(&recipes, &lexicon);
    let points = corpus_phase_points(&recipes, &lexicon, &embeddings);
    if k == 0 || k > points.len() {
        return Err(CliError::data(format!(
            "k = {k} not in 1..={} (phase population)",
            points.len()
        )));
    }
    let model = kmeans_fit(&points, k, seed)?;
    assign_pseudo_labels(&mut recipes, &lexicon, &embeddings, &model)?;

    let out = out.unwrap_or_else(|| default_labels_path(corpus_path));
    let mut w = std::io::BufWriter::new(fs::File::create(&out)?);
    for rec in &recipes {
        let line = LabelsLine {
            id: rec.id.clone(),
            labels: rec.pseudo_labels.clone().unwrap(),
        };
        writeln!(w, "{}", serde_json::to_string(&line).unwrap())?;
    }
    w.flush()?;

    let mut centroid_path = out.as_os_str().to_os_string();
    centroid_path.push(".centroids.json");
    let centroids = serde_json::json!({
        "k": model.k,
        "centroids": model.centroids,
        "sse_trace": model.sse_trace,
    });
    fs::write(centroid_path, serde_json::to_string_pretty(&centroids).unwrap())?;
    write_config_snapshot(&out_dir(&out), &RunConfig::default())?;
    info!("labeled {} recipes with k = {k}", recipes.len());
    Ok(())
}

fn resolve_config(config: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(path) => {
            require_file(path)?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    for kv in sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::data(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate().map_err(CliError::data)?;
    Ok(cfg)
}

fn cmd_train(
    corpus_path: &Path,
    labels: Option<PathBuf>,
    config: Option<PathBuf>,
    sets: &[String],
    out: &Path,
) -> Result<(), CliError> {
    let cfg = resolve_config(config.as_deref(), sets)?;
    require_file(corpus_path)?;
    let mut recipes = corpus::load_jsonl(corpus_path)?;
    if recipes.is_empty() {
        return Err(CliError::data("corpus is empty"));
    }
    if !cfg.model.baseline {
        let labels_path = labels.unwrap_or_else(|| default_labels_path(corpus_path));
        load_labels(&labels_path, &mut recipes)?;
    }

    fs::create_dir_all(out)?;
    write_config_snapshot(out, &cfg)?;

    let vocab = Vocabulary::build(&recipes, 1);
    let raw_dim = recipes
        .iter()
        .find_map(|r| match &r.image {
            corpus::ImageInput::Feature(f) => Some(f.len()),
            corpus::ImageInput::Grid(_) => None,
        })
        .unwrap_or(corpus::SYNTH_IMAGE_DIM);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model: DgnModel<f64> = DgnModel::new(&mut init_rng, cfg.clone(), vocab, raw_dim);

    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let mut metrics_file = fs::File::create(out.join("metrics.jsonl"))?;
    let history = train(
        &model,
        &recipes,
        &mut adam,
        &mut rng,
        0,
        cfg.train.epochs,
        Some(&mut metrics_file),
    )?;
    save_checkpoint(&out.join("model.ckpt"), &model, &adam, cfg.train.epochs, &rng)?;
    if let Some(last) = history.last() {
        info!(
            "trained {} epochs; final val ppl {:.3}",
            history.len(),
            last.val_ppl
        );
    }
    Ok(())
}

fn generated_lines(
    model: &DgnModel<f64>,
    recipes: &[RecipeRecord],
) -> Result<Vec<(GeneratedLine, Vec<usize>)>, CliError> {
    let mut out = Vec::with_capacity(recipes.len());
    for rec in recipes {
        let gen = generate_recipe(model, &rec.image, &rec.ingredients)?;
        out.push((
            GeneratedLine {
                id: rec.id.clone(),
                structure: gen.structure.labels.clone(),
                text: gen.text,
            },
            gen.token_ids,
        ));
    }
    Ok(out)
}

fn cmd_generate(ckpt: &Path, input: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    require_file(ckpt)?;
    require_file(input)?;
    let (model, _, _, _) = load_checkpoint::<f64>(ckpt)?;
    let recipes = corpus::load_jsonl(input)?;
    let lines = generated_lines(&model, &recipes)?;

    let rendered: String = lines
        .iter()
        .map(|(l, _)| serde_json::to_string(l).unwrap() + "\n")
        .collect();
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, rendered)?;
            write_config_snapshot(&out_dir(&path), &model.config)?;
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    corpus_path: &Path,
    labels: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    require_file(ckpt)?;
    require_file(corpus_path)?;
    let (model, _, _, _) = load_checkpoint::<f64>(ckpt)?;
    let mut recipes = corpus::load_jsonl(corpus_path)?;
    if recipes.is_empty() {
        return Err(CliError::data("corpus is empty"));
    }
    if !model.config.model.baseline {
        let labels_path = labels.unwrap_or_else(|| default_labels_path(corpus_path));
        load_labels(&labels_path, &mut recipes)?;
    }

    let perplexity = model.perplexity(&recipes)?;
    if !perplexity.is_finite() {
        return Err(CliError::numeric(format!("non-finite perplexity {perplexity}")));
    }

    let lines = generated_lines(&model, &recipes)?;
    let hypotheses: Vec<Vec<String>> = lines
        .iter()
        .map(|(_, ids)| model.vocab.decode(ids))
        .collect();
    let references: Vec<Vec<String>> = recipes.iter().map(|r| r.all_tokens()).collect();
    let (avg_length, vocab_size) = corpus_stats(&hypotheses);
    let report = EvalReport {
        perplexity,
        bleu: bleu(&hypotheses, &references)?,
        rouge_l: rouge_l_corpus(&hypotheses, &references)?,
        avg_length,
        vocab_size,
    };
    let rendered = serde_json::to_string_pretty(&report).unwrap();
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, &rendered)?;
            write_config_snapshot(&out_dir(&path), &model.config)?;
        }
        None => println!("{rendered}"),
    }
    Ok(())
}

fn cmd_gradcheck(hidden: usize, coords: usize) -> Result<(), CliError> {
    let mut worst: f64 = 0.0;
    for (name, err) in dgn::gradcheck::op_checks() {
        println!("{name:>18}: {err:.3e}");
        worst = worst.max(err);
    }
    let full = dgn::gradcheck::full_model_check(hidden, coords)?;
    println!("{:>18}: {full:.3e}", "full_model");
    worst = worst.max(full);
    println!("max relative error: {worst:.3e}");
    if worst >= 1e-4 {
        return Err(CliError::numeric(format!(
            "gradient check failed: max relative error {worst:.3e}"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_cap()?;
    info!("worker thread cap: {threads}");
    match cli.command {
        Command::Synth {
            out,
            n,
            seed,
            phase_types,
            noise,
        } => cmd_synth(&out, n, seed, phase_types, noise),
        Command::Label {
            corpus,
            k,
            seed,
            out,
        } => cmd_label(&corpus, k, seed, out),
        Command::Train {
            corpus,
            labels,
            config,
            sets,
            out,
        } => cmd_train(&corpus, labels, config, &sets, &out),
        Command::Generate { ckpt, input, out } => cmd_generate(&ckpt, &input, out),
        Command::Eval {
            ckpt,
            corpus,
            labels,
            out,
        } => cmd_eval(&ckpt, &corpus, labels, out),
        Command::Gradcheck { hidden, coords } => cmd_gradcheck(hidden, coords),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
