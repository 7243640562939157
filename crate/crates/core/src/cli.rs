//! Command-line front end. Every subcommand reads an optional JSON run
//! config, applies flag overrides, writes its outputs into the output
//! directory and echoes the effective config there as `config.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::eval::{self, bleu_text, cosine, mean_ranking};
use crate::flow::{self, Direction, FlowConfig, FlowStack, InnTrainConfig};
use crate::geometry;
use crate::inference::{self, InferenceConfig, InferenceHead};
use crate::metrics::{self, FactorDataset, MetricsConfig};
use crate::nn::seeded_rng;
use crate::text::{self, Corpus, GrammarSpec};
use crate::vae::{self, Bottleneck, VaeConfig, VaeModel};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub step: f64,
    pub radius: f64,
    pub count: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { step: 0.1, radius: 1.0, count: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub slots: Vec<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { slots: vec![4, 3, 2] }
    }
}

/// Parameters for every command. The global seed is copied into each
/// section before a command runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Read from configs but not echoed, so echoes from different
    /// directories compare equal.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub precision: Precision,
    pub corpus: CorpusConfig,
    pub vae: VaeConfig,
    pub flow: FlowConfig,
    pub inn: InnTrainConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
    pub geometry: GeometryConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Usage(format!("malformed config at `{path}`: {}", e.inner()))
        })
    }

    fn propagate_seed(&mut self) {
        self.vae.seed = self.seed;
        self.flow.seed = self.seed;
        self.inn.seed = self.seed;
        self.inference.seed = self.seed;
        self.metrics.seed = self.seed;
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config { .. }) => EXIT_USAGE,
            CliError::Lib(Error::Numeric(_)) => EXIT_NUMERIC,
            CliError::Lib(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "latentlab", version, about = "Sentence VAEs with latent memory, flows and disentanglement metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, short = 'o')]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a sentence VAE on a corpus (one sentence per line).
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Constant β instead of the cyclical schedule.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_parser = parse_bottleneck)]
        bottleneck: Option<Bottleneck>,
    },
    /// Train an invertible flow between word embeddings and a frozen VAE's latents.
    TrainInn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        /// JSON lines of {"word", "embedding", "definition"}.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_parser = parse_direction)]
        direction: Option<Direction>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Train the premise-to-conclusion mapper.
    TrainInference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        /// premise1<TAB>premise2<TAB>conclusion per line.
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Posterior mean and log-variance of each input sentence.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Greedy decoding of latents (JSON lines with a `z` or `mu` field).
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        latents: PathBuf,
    },
    /// Encode and decode each input sentence.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode the straight line between two sentence latents.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Decode random latents within a ball around a sentence latent.
    Traverse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Decode `z(a) − z(b) + z(c)`.
    Arith {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        c: String,
    },
    /// Interpolation smoothness of a sentence path (one sentence per line).
    IsMetric {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        path: PathBuf,
    },
    /// Generate definitions from word embeddings through a trained flow.
    Defmod {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// MIG, modularity, z-min-var error and DCI of a representation file.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// `.tsv` with z*/f* columns or `.jsonl` with `representation` and `factors`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Cross product of a synthetic grammar with factor labels.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        slots: Option<Vec<usize>>,
    },
    /// Reconstruction report on a test corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// sentence1<TAB>sentence2<TAB>score pairs for a Spearman score.
        #[arg(long)]
        similarity: Option<PathBuf>,
        #[arg(long)]
        per_sentence: bool,
    },
}

fn parse_bottleneck(s: &str) -> std::result::Result<Bottleneck, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown bottleneck `{s}` (gaussian or vq)"))
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown direction `{s}` (forward or reverse)"))
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainVae { common, .. }
            | Command::TrainInn { common, .. }
            | Command::TrainInference { common, .. }
            | Command::Encode { common, .. }
            | Command::Decode { common, .. }
            | Command::Reconstruct { common, .. }
            | Command::Interpolate { common, .. }
            | Command::Traverse { common, .. }
            | Command::Arith { common, .. }
            | Command::IsMetric { common, .. }
            | Command::Defmod { common, .. }
            | Command::Metrics { common, .. }
            | Command::GenCorpus { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }

    fn apply_overrides(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        match self {
            Command::TrainVae { epochs, latent_dim, learning_rate, batch_size, beta, bottleneck, .. } => {
                set(&mut cfg.vae.epochs, epochs);
                set(&mut cfg.vae.latent_dim, latent_dim);
                set(&mut cfg.vae.learning_rate, learning_rate);
                set(&mut cfg.vae.batch_size, batch_size);
                set(&mut cfg.vae.bottleneck, bottleneck);
                if beta.is_some() {
                    cfg.vae.fixed_beta = *beta;
                }
            }
            Command::TrainInn { direction, epochs, depth, learning_rate, .. } => {
                set(&mut cfg.inn.direction, direction);
                set(&mut cfg.inn.epochs, epochs);
                set(&mut cfg.flow.depth, depth);
                set(&mut cfg.inn.learning_rate, learning_rate);
            }
            Command::TrainInference { epochs, learning_rate, .. } => {
                set(&mut cfg.inference.epochs, epochs);
                set(&mut cfg.inference.learning_rate, learning_rate);
            }
            Command::Interpolate { step, .. } => set(&mut cfg.geometry.step, step),
            Command::Traverse { radius, count, .. } => {
                set(&mut cfg.geometry.radius, radius);
                set(&mut cfg.geometry.count, count);
            }
            Command::Metrics { bins, trials, .. } => {
                set(&mut cfg.metrics.bins, bins);
                set(&mut cfg.metrics.trials, trials);
            }
            Command::GenCorpus { slots, .. } => set(&mut cfg.corpus.slots, slots),
            _ => {}
        }
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code;
/// messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolve the effective config for a command.
pub fn resolve_config(command: &Command) -> CliResult<RunConfig> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    command.apply_overrides(&mut cfg);
    cfg.propagate_seed();
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn jsonl<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Lib(Error::data(format!("cannot read {}: {e}", path.display()))))
}

fn read_sentences(path: &Path) -> CliResult<Vec<String>> {
    let lines: Vec<String> = read_text(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if lines.is_empty() {
        return Err(Error::data(format!("{} holds no sentences", path.display())).into());
    }
    Ok(lines)
}

fn load_vae(path: &Path) -> CliResult<VaeModel> {
    Ok(VaeModel::load(path)?)
}

/// Run one command; returns the output directory.
pub fn execute(command: &Command) -> CliResult<PathBuf> {
    let cfg = resolve_config(command)?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    match command {
        Command::GenCorpus { .. } => {
            let spec = GrammarSpec::with_sizes(&cfg.corpus.slots)?;
            let corpus = text::generate_synthetic_corpus(&spec, cfg.seed)?;
            write(&dir, "corpus.txt", &(corpus.sentences.join("\n") + "\n"))?;
            write(&dir, "factors.tsv", &text::factor_tsv(&corpus)?)?;
        }
        Command::TrainVae { corpus, .. } => {
            let corpus = Corpus::new(read_sentences(corpus)?, None)?;
            let report = vae::train_vae(&corpus, &cfg.vae)?;
            report.model.save(&dir.join("vae.json"))?;
            write(&dir, "history.jsonl", &jsonl(&report.history)?)?;
        }
        Command::TrainInn { vae, pairs, .. } => {
            let model = load_vae(vae)?;
            let pairs = flow::parse_pairs_jsonl(&read_text(pairs)?)?;
            let targets = flow::defmod_targets(&model, &pairs)?;
            let flow_cfg = FlowConfig { dim: model.latent_dim(), ..cfg.flow.clone() };
            let mut stack = FlowStack::new(flow_cfg)?;
            let inn_cfg: InnTrainConfig = cfg.inn.clone();
            let history = flow::train_inn(&mut stack, &targets, &inn_cfg)?;
            stack.save(&dir.join("flow.json"))?;
            write(&dir, "history.jsonl", &jsonl(&history)?)?;
        }
        Command::TrainInference { vae, triples, .. } => {
            let mut model = load_vae(vae)?;
            let triples = inference::parse_triples_tsv(&read_text(triples)?)?;
            let mut head = InferenceHead::new(model.latent_dim(), cfg.seed)?;
            let inf_cfg: InferenceConfig = cfg.inference.clone();
            let history = inference::train_inference(&mut model, &mut head, &triples, &inf_cfg)?;
            model.save(&dir.join("vae.json"))?;
            head.save(&dir.join("inference.json"))?;
            write(&dir, "history.jsonl", &jsonl(&history)?)?;
            let summary = json!({
                "perplexity": inference::perplexity(&model, &head, &triples)?,
                "latent_mse": inference::latent_mse(&model, &head, &triples)?,
                "count": triples.len(),
            });
            write(&dir, "inference_eval.json", &pretty(&summary)?)?;
        }
        Command::Encode { ckpt, input, .. } => {
            let model = load_vae(ckpt)?;
            let mut rows = Vec::new();
            for s in read_sentences(input)? {
                let post = model.encode_text(&s)?;
                rows.push(json!({ "sentence": s, "mu": post.mu, "log_var": post.log_var }));
            }
            write(&dir, "latents.jsonl", &jsonl(&rows)?)?;
        }
        Command::Decode { ckpt, latents, .. } => {
            let model = load_vae(ckpt)?;
            let mut out = String::new();
            for (i, line) in read_text(latents)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                #[derive(Deserialize)]
                struct Row {
                    z: Option<Vec<f64>>,
                    mu: Option<Vec<f64>>,
                }
                let row: Row = serde_json::from_str(line).map_err(|e| Error::data(format!("latents line {}: {e}", i + 1)))?;
                let z = row.z.or(row.mu).ok_or_else(|| Error::data(format!("latents line {} has neither `z` nor `mu`", i + 1)))?;
                out.push_str(&model.generate_text(&z)?);
                out.push('\n');
            }
            write(&dir, "decoded.txt", &out)?;
        }
        Command::Reconstruct { ckpt, input, .. } => {
            let model = load_vae(ckpt)?;
            let mut out = String::from("original\treconstruction\n");
            for s in read_sentences(input)? {
                out.push_str(&format!("{s}\t{}\n", model.reconstruct(&s)?));
            }
            write(&dir, "reconstructions.tsv", &out)?;
        }
        Command::Interpolate { ckpt, source, target, .. } => {
            let model = load_vae(ckpt)?;
            let report = geometry::interpolation_report(&model, source, target, cfg.geometry.step)?;
            write(&dir, "path.jsonl", &report.to_jsonl()?)?;
        }
        Command::Traverse { ckpt, source, .. } => {
            let model = load_vae(ckpt)?;
            let z = model.latent_of(source)?;
            let mut rng = seeded_rng(cfg.seed);
            let points = geometry::traverse(&z, cfg.geometry.radius, cfg.geometry.count, &mut rng)?;
            let mut rows = Vec::with_capacity(points.len());
            for (index, p) in points.iter().enumerate() {
                let distance = p.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                rows.push(json!({ "index": index, "distance": distance, "sentence": model.generate_text(p)? }));
            }
            write(&dir, "traversal.jsonl", &jsonl(&rows)?)?;
        }
        Command::Arith { ckpt, a, b, c, .. } => {
            let model = load_vae(ckpt)?;
            let z = geometry::latent_arithmetic(&model.latent_of(a)?, &model.latent_of(b)?, &model.latent_of(c)?)?;
            let sentence = model.generate_text(&z)?;
            write(&dir, "arith.json", &pretty(&json!({ "a": a, "b": b, "c": c, "sentence": sentence, "latent": z }))?)?;
        }
        Command::IsMetric { ckpt, path, .. } => {
            let model = load_vae(ckpt)?;
            let sentences = read_sentences(path)?;
            let ids: Vec<Vec<usize>> = sentences.iter().map(|s| model.vocab().encode(s)).collect();
            let value = geometry::interpolation_smoothness(&ids, model.token_embeddings())?;
            write(&dir, "is.json", &pretty(&json!({ "IS": value, "count": sentences.len() }))?)?;
        }
        Command::Defmod { vae, flow: flow_path, pairs, .. } => {
            let model = load_vae(vae)?;
            let stack = FlowStack::load(flow_path)?;
            let pairs = flow::parse_pairs_jsonl(&read_text(pairs)?)?;
            let targets = flow::defmod_targets(&model, &pairs)?;
            let mut rows = Vec::with_capacity(pairs.len());
            let mut predicted = Vec::with_capacity(pairs.len());
            let mut bleu_sum = 0.0;
            for (p, t) in pairs.iter().zip(&targets) {
                let (z, _) = stack.forward(&t.input)?;
                let generated = model.generate_text(&z)?;
                let b = bleu_text(&generated, &p.definition);
                bleu_sum += b;
                rows.push(json!({ "word": p.word, "definition": p.definition, "generated": generated, "bleu": b }));
                predicted.push(z);
            }
            let golds: Vec<Vec<f64>> = targets.iter().map(|t| t.mu.clone()).collect();
            let ranking = if golds.len() >= 2 { Some(mean_ranking(&predicted, &golds)?) } else { None };
            let mut cos = 0.0;
            for (p, g) in predicted.iter().zip(&golds) {
                cos += cosine(p, g).unwrap_or(0.0);
            }
            let n = pairs.len().max(1) as f64;
            write(&dir, "definitions.jsonl", &jsonl(&rows)?)?;
            let summary = json!({
                "count": pairs.len(),
                "bleu": bleu_sum / n,
                "cosine": cos / n,
                "ranking": ranking,
                "forward_loss": flow::defmod_loss(&stack, &targets, Direction::Forward)?,
                "reverse_mse": flow::defmod_loss(&stack, &targets, Direction::Reverse)?,
            });
            write(&dir, "defmod.json", &pretty(&summary)?)?;
        }
        Command::Metrics { input, .. } => {
            let text = read_text(input)?;
            let data = if input.extension().is_some_and(|e| e == "jsonl") {
                FactorDataset::from_jsonl(&text)?
            } else {
                FactorDataset::from_tsv(&text)?
            };
            let metrics_cfg: MetricsConfig = cfg.metrics.clone();
            let report = metrics::evaluate(&data, &metrics_cfg, metrics::threads_from_env()?)?;
            write(&dir, "metrics.json", &pretty(&report)?)?;
        }
        Command::Eval { ckpt, input, similarity, per_sentence, .. } => {
            let model = load_vae(ckpt)?;
            let sentences = read_sentences(input)?;
            let mut report = eval::reconstruction_report(&model, &sentences)?;
            if let Some(path) = similarity {
                let pairs = eval::parse_similarity_tsv(&read_text(path)?)?;
                report.spearman = Some(eval::similarity_spearman(&model, &pairs)?);
            }
            write(&dir, "eval.json", &pretty(&report)?)?;
            if *per_sentence {
                write(&dir, "per_sentence.csv", &report.per_sentence_csv())?;
            }
        }
    }
    write(&dir, "config.json", &pretty(&cfg)?)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_field() {
        let err = RunConfig::from_json(r#"{"vae": {"latent_dim": "big"}}"#).unwrap_err();
        assert!(err.to_string().contains("vae.latent_dim"), "{err}");
        assert_eq!(err.exit_code(), EXIT_USAGE);
        let err = RunConfig::from_json(r#"{"flow": {"width": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(RunConfig::from_json(r#"{"precision": "f32"}"#).is_err());
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = RunConfig { seed: 9, ..RunConfig::default() };
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Lib(Error::numeric("x")).exit_code(), EXIT_NUMERIC);
        assert_eq!(CliError::Lib(Error::data("x")).exit_code(), EXIT_DATA);
        assert_eq!(CliError::Lib(Error::config("f", "x")).exit_code(), EXIT_USAGE);
        assert_eq!(run(["latentlab", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["latentlab", "metrics", "--input", "x.tsv", "--bogus"]), EXIT_USAGE);
    }
}
