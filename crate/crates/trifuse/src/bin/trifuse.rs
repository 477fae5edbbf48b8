//! Command-line front end. Every subcommand prints a single JSON document on
//! stdout; errors go to stderr with exit code 1 (2 for usage errors).

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use trifuse::data::{load_dataset, save_dataset, Dataset, LabelKind, LinearGen, ParityGen, SplitSizes};
use trifuse::error::{Error, Result};
use trifuse::gradcheck::fd_check_model;
use trifuse::model::{
    load_model, save_model, Architecture, ModelBundle, ModelConfig, OutputKind,
};
use trifuse::tensor::Algorithm;
use trifuse::train::{bench_epoch_time, evaluate, train, MetricsReport, TrainConfig};

#[derive(Parser)]
#[command(
    name = "trifuse",
    about = "Trimodal low-rank fusion transformers: data generation, training, evaluation, benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    GenData(GenDataArgs),
    /// Train an architecture on a dataset directory
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset split
    Eval(EvalArgs),
    /// Benchmark seconds/epoch across architectures at matched config
    Bench(BenchArgs),
    /// Count trainable parameters of an architecture
    ParamCount(ParamCountArgs),
    /// Finite-difference check of all parameter gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// parity | linear
    #[arg(long, default_value = "parity")]
    kind: String,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Per-modality feature dims, comma separated (language,audio,visual)
    #[arg(long, default_value = "6,5,4", value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long, default_value_t = 4)]
    len_min: usize,
    #[arg(long, default_value_t = 10)]
    len_max: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Force equal per-modality sequence lengths
    #[arg(long, default_value_t = false)]
    aligned: bool,
    /// sentiment | emotions
    #[arg(long, default_value = "sentiment")]
    label: String,
    #[arg(long, default_value_t = 256)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_valid: usize,
    #[arg(long, default_value_t = 64)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// lmf-mult | fusion-cm-attn | mult-lite | unimodal-lstm-{l,a,v}
    #[arg(long)]
    arch: String,
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
    /// JSON file overriding model hyperparameters
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// JSON file overriding training hyperparameters
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save the trained model here
    #[arg(long)]
    save: Option<PathBuf>,
    /// Split to evaluate after training
    #[arg(long, default_value = "test")]
    eval_split: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated architecture list
    #[arg(long, default_value = "lmf-mult,fusion-cm-attn,mult-lite")]
    archs: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long)]
    model_config: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected exactly three comma-separated dims".to_string())
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn model_config_from(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => read_json_file(p),
        None => Ok(ModelConfig::default()),
    }
}

/// Adapt a model config to a dataset's dims and label kind.
fn adapt_to_dataset(mut config: ModelConfig, data: &Dataset) -> ModelConfig {
    config.input_dims = data.manifest.dims;
    config.output = match data.manifest.label_kind {
        LabelKind::Sentiment => OutputKind::Regression,
        LabelKind::Emotions => OutputKind::Emotions,
    };
    config
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::GenData(a) => {
            let splits = SplitSizes {
                train: a.n_train,
                valid: a.n_valid,
                test: a.n_test,
            };
            let label_kind = match a.label.as_str() {
                "sentiment" => LabelKind::Sentiment,
                "emotions" => LabelKind::Emotions,
                other => return Err(Error::Usage(format!("unknown label kind '{other}'"))),
            };
            let ds = match a.kind.as_str() {
                "parity" => ParityGen {
                    dims: a.dims,
                    len_range: (a.len_min, a.len_max),
                    noise: a.noise,
                    aligned: a.aligned,
                    label_kind,
                    seed: a.seed,
                }
                .dataset(splits)?,
                "linear" => {
                    if label_kind != LabelKind::Sentiment {
                        return Err(Error::Usage(
                            "the linear generator produces sentiment labels only".into(),
                        ));
                    }
                    LinearGen {
                        dims: a.dims,
                        len_range: (a.len_min, a.len_max),
                        noise: a.noise,
                        seed: a.seed,
                    }
                    .dataset(splits)?
                }
                other => return Err(Error::Usage(format!("unknown generator '{other}'"))),
            };
            save_dataset(&ds, &a.out)?;
            Ok(json!({
                "written": a.out,
                "manifest": ds.manifest,
            }))
        }
        Command::Train(a) => {
            let arch = Architecture::from_str(&a.arch)?;
            let data = load_dataset(&a.data)?;
            let config = adapt_to_dataset(model_config_from(&a.model_config)?, &data);
            let mut tc: TrainConfig = match &a.train_config {
                Some(p) => read_json_file(p)?,
                None => TrainConfig::default(),
            };
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            if let Some(b) = a.batch {
                tc.batch_size = b;
            }
            if let Some(lr) = a.lr {
                tc.lr = lr;
            }
            if let Some(opt) = &a.optimizer {
                tc.optimizer = match opt.as_str() {
                    "adam" => Algorithm::Adam,
                    "sgd" => Algorithm::Sgd,
                    other => return Err(Error::Usage(format!("unknown optimizer '{other}'"))),
                };
            }
            if let Some(p) = a.patience {
                tc.patience = p;
            }
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            let mut bundle = ModelBundle::build(arch, &config, tc.seed)?;
            let report = train(&mut bundle, &data, &tc)?;
            let eval = evaluate(&bundle, data.split(&a.eval_split)?)?;
            let metrics = MetricsReport::new(&bundle, eval, Some(&report));
            if let Some(path) = &a.save {
                save_model(&bundle, path)?;
            }
            Ok(json!({
                "arch": arch.to_string(),
                "param_count": bundle.param_count(),
                "transformer_stacks": bundle.transformer_stack_count(),
                "train": report,
                "eval_split": a.eval_split,
                "eval": metrics,
                "saved": a.save,
            }))
        }
        Command::Eval(a) => {
            let bundle = load_model(&a.model)?;
            let data = load_dataset(&a.data)?;
            let eval = evaluate(&bundle, data.split(&a.split)?)?;
            Ok(json!({
                "arch": bundle.arch.to_string(),
                "split": a.split,
                "eval": MetricsReport::new(&bundle, eval, None),
            }))
        }
        Command::Bench(a) => {
            let data = load_dataset(&a.data)?;
            let config = adapt_to_dataset(model_config_from(&a.model_config)?, &data);
            let archs: Vec<Architecture> = a
                .archs
                .split(',')
                .map(|s| Architecture::from_str(s.trim()))
                .collect::<Result<_>>()?;
            let mut tc = TrainConfig::default();
            if let Some(b) = a.batch {
                tc.batch_size = b;
            }
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            let results = bench_epoch_time(&archs, &data, &config, &tc, a.repeats)?;
            Ok(json!({
                "batch_size": tc.batch_size,
                "repeats": a.repeats,
                "train_samples": data.train.len(),
                "results": results,
            }))
        }
        Command::ParamCount(a) => {
            let arch = Architecture::from_str(&a.arch)?;
            let config = model_config_from(&a.model_config)?;
            let bundle = ModelBundle::build(arch, &config, 0)?;
            Ok(json!({
                "arch": arch.to_string(),
                "param_count": bundle.param_count(),
                "transformer_stacks": bundle.transformer_stack_count(),
                "config": config,
            }))
        }
        Command::Gradcheck(a) => {
            let arch = Architecture::from_str(&a.arch)?;
            let config = match &a.model_config {
                Some(p) => read_json_file(p)?,
                None => gradcheck_config(),
            };
            let mut bundle = ModelBundle::build(arch, &config, a.seed)?;
            let sample = gradcheck_sample(&config, a.seed);
            let report = fd_check_model(&mut bundle, &sample, 1e-5)?;
            Ok(json!({
                "arch": arch.to_string(),
                "checked": report.checked,
                "max_rel_err": report.max_rel_err,
                "worst": report.worst,
                "threshold": a.threshold,
                "pass": report.passes(a.threshold),
            }))
        }
    }
}

/// Small dims keep the finite-difference sweep fast while touching every
/// layer kind.
fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        input_dims: [3, 2, 2],
        lstm_hidden: [3, 3, 3],
        model_dim: 4,
        lmf_rank: 2,
        conv_kernels: [3, 3, 3],
        fused_conv_kernel: 1,
        crossmodal_layers: 1,
        self_attn_layers: 1,
        output: OutputKind::Regression,
        attn_dropout: 0.0,
        heads: 1,
        trailing_self_attention: false,
    }
}

fn gradcheck_sample(config: &ModelConfig, seed: u64) -> trifuse::data::MultimodalSample {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let [dl, da, dv] = config.input_dims;
    trifuse::data::MultimodalSample {
        language: trifuse::Tensor::normal(vec![5, dl], 1.0, &mut rng),
        audio: trifuse::Tensor::normal(vec![4, da], 1.0, &mut rng),
        visual: trifuse::Tensor::normal(vec![3, dv], 1.0, &mut rng),
        label: match config.output {
            OutputKind::Regression => trifuse::data::Label::Sentiment(1.0),
            OutputKind::Emotions => trifuse::data::Label::Emotions([1, 0, 1, 0]),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(doc) => {
            println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
