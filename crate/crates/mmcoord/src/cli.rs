//! Command-line entry points binding the library into reproducible runs.
//!
//! Every subcommand resolves its configuration as: built-in defaults, then
//! flags, then the optional `--config FILE` JSON as a final override layer
//! (last writer wins). The resolved config, seed, and tool version are
//! echoed into every output artifact under the `"run"` key. Outputs go to
//! stdout as JSON; some commands also write files.
//!
//! Exit codes: 0 success, 2 validation failure, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{read_mmeb, Dataset};
use crate::encoder::CoordinationSpace;
use crate::error::{Error, Result};
use crate::eval::{
    build_class_embeddings, cross_modal_report, enriched_retrieval, project_dataset, zero_shot_t1,
    PositiveMode, ProjectedTable,
};
use crate::grad::{finite_diff_check, gradcheck_instance};
use crate::losses::{CeReduction, LossConfig, LossFamily, TauMode};
use crate::optim::{DecayMode, OptimConfig};
use crate::synth::{generate, manifest_path, SynthConfig, SynthModality};
use crate::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "mmcoord", version, about = "Coordinated multimodal embedding spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset
    Synth(SynthArgs),
    /// Train projection heads on a dataset
    Train(TrainArgs),
    /// Cross-modal retrieval report for a trained checkpoint
    Eval(EvalArgs),
    /// Zero-shot classification via class embeddings
    Zeroshot(ZeroshotArgs),
    /// Retrieval with fused (enriched) query and/or database vectors
    Enrich(EnrichArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Output directory for manifest + embedding files
    #[arg(long)]
    pub out: PathBuf,
    /// Base entities (records = entities x max views)
    #[arg(long, default_value_t = 1000)]
    pub entities: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    /// Latent spread of entities around their class centroid
    #[arg(long, default_value_t = 1.0)]
    pub class_spread: f64,
    /// Modality spec `name:dim:sigma[:views=N][:missing=R][:class-level]`; repeatable
    #[arg(long = "modality")]
    pub modalities: Vec<String>,
    /// Fraction of record pairs sharing one raw view
    #[arg(long, default_value_t = 0.0)]
    pub duplicate_rate: f64,
    /// Hold out whole classes in the val/test splits
    #[arg(long, default_value_t = false)]
    pub split_by_class: bool,
    /// Exact `train,val,test` record counts (otherwise 70/10/20)
    #[arg(long)]
    pub splits: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Default for SynthArgs {
    fn default() -> Self {
        SynthArgs {
            out: PathBuf::new(),
            entities: 1000,
            classes: 10,
            latent_dim: 16,
            class_spread: 1.0,
            modalities: Vec::new(),
            duplicate_rate: 0.0,
            split_by_class: false,
            splits: None,
            seed: None,
            config: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset manifest path
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long, default_value = "val")]
    pub val_split: String,
    #[arg(long, value_enum, default_value_t = LossFamily::Pcmc)]
    pub loss: LossFamily,
    /// Regression exponent modulator (loss is ||residual||^(2+rho))
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Same-view similarity threshold for the binary target
    #[arg(long, default_value_t = 0.99)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = TauMode::Learned)]
    pub tau_mode: TauMode,
    /// Initial temperature
    #[arg(long, default_value_t = 1.0 / 0.07)]
    pub tau: f64,
    #[arg(long, default_value_t = 100.0)]
    pub tau_max: f64,
    #[arg(long, value_enum, default_value_t = CeReduction::Mean)]
    pub ce_reduction: CeReduction,
    /// Coordination space dimensionality
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Hidden width of the feed-forward block
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 80)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub wd: f64,
    #[arg(long, value_enum, default_value_t = DecayMode::Decoupled)]
    pub decay_mode: DecayMode,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = false)]
    pub no_shuffle: bool,
    /// Ground-truth mode for the validation metric
    #[arg(long, value_enum, default_value_t = PositiveMode::Entity)]
    pub val_positives: PositiveMode,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation scoring (0 = library default)
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Force sequential reductions
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Default for TrainArgs {
    fn default() -> Self {
        TrainArgs {
            data: PathBuf::new(),
            out: PathBuf::new(),
            train_split: "train".into(),
            val_split: "val".into(),
            loss: LossFamily::Pcmc,
            rho: 1.0,
            threshold: 0.99,
            tau_mode: TauMode::Learned,
            tau: 1.0 / 0.07,
            tau_max: 100.0,
            ce_reduction: CeReduction::Mean,
            dim: 256,
            hidden: 256,
            batch: 80,
            lr: 1e-4,
            wd: 0.2,
            decay_mode: DecayMode::Decoupled,
            epochs: 50,
            patience: 5,
            no_shuffle: false,
            val_positives: PositiveMode::Entity,
            seed: None,
            threads: 0,
            deterministic: false,
            config: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated recall cutoffs
    #[arg(long, default_value = "1,5")]
    pub ks: String,
    #[arg(long, value_enum, default_value_t = PositiveMode::Entity)]
    pub positives: PositiveMode,
    /// Also write the report to this path
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        EvalArgs {
            ckpt: PathBuf::new(),
            data: PathBuf::new(),
            split: "test".into(),
            ks: "1,5".into(),
            positives: PositiveMode::Entity,
            report: None,
            seed: None,
            threads: 0,
            deterministic: false,
            config: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated input modalities, fused by normalized averaging
    #[arg(long)]
    pub input_modalities: String,
    /// Modality supplying attribute vectors and the class-embedding encoder
    #[arg(long)]
    pub class_modality: String,
    /// External per-class embedding file (row index = class label) instead
    /// of attribute averaging
    #[arg(long)]
    pub class_embeddings: Option<PathBuf>,
    /// Use class embeddings without projecting them
    #[arg(long, default_value_t = false)]
    pub raw_classes: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Default for ZeroshotArgs {
    fn default() -> Self {
        ZeroshotArgs {
            ckpt: PathBuf::new(),
            data: PathBuf::new(),
            split: "test".into(),
            input_modalities: String::new(),
            class_modality: String::new(),
            class_embeddings: None,
            raw_classes: false,
            report: None,
            seed: None,
            threads: 0,
            deterministic: false,
            config: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated query-side modalities (fused)
    #[arg(long)]
    pub query: String,
    /// Comma-separated database-side modalities (fused)
    #[arg(long)]
    pub db: String,
    #[arg(long, default_value = "1,5")]
    pub ks: String,
    #[arg(long, value_enum, default_value_t = PositiveMode::Class)]
    pub positives: PositiveMode,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Default for EnrichArgs {
    fn default() -> Self {
        EnrichArgs {
            ckpt: PathBuf::new(),
            data: PathBuf::new(),
            split: "test".into(),
            query: String::new(),
            db: String::new(),
            ks: "1,5".into(),
            positives: PositiveMode::Class,
            report: None,
            seed: None,
            threads: 0,
            deterministic: false,
            config: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = LossFamily::Pcmc)]
    pub loss: LossFamily,
    #[arg(long, default_value_t = 3)]
    pub modalities: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Missing-view rate for mask coverage
    #[arg(long, default_value_t = 0.0)]
    pub missing: f64,
    #[arg(long, value_enum, default_value_t = TauMode::Learned)]
    pub tau_mode: TauMode,
    #[arg(long, value_enum, default_value_t = CeReduction::Mean)]
    pub ce_reduction: CeReduction,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Failure threshold on the max relative error
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Check at most this many coordinates (0 = all)
    #[arg(long, default_value_t = 0)]
    pub max_coords: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            loss: LossFamily::Pcmc,
            modalities: 3,
            dim: 8,
            batch: 4,
            rho: 1.0,
            missing: 0.0,
            tau_mode: TauMode::Learned,
            ce_reduction: CeReduction::Mean,
            h: 1e-5,
            tol: 1e-3,
            max_coords: 0,
            seed: None,
            config: None,
        }
    }
}

/// Provenance block echoed into every output artifact.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    seed: u64,
    version: String,
    config: Value,
}

impl RunManifest {
    fn new(subcommand: &str, seed: u64, config: &impl Serialize) -> Result<RunManifest> {
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
        })
    }
}

/// Apply the `--config FILE` override layer on top of parsed flags.
fn merge_config<T: Serialize + DeserializeOwned>(args: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(args);
    };
    let mut base = serde_json::to_value(&args)?;
    let overlay: Value = serde_json::from_str(
        &fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
    )
    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    deep_merge(&mut base, overlay);
    serde_json::from_value(base).map_err(|e| Error::Config(format!("config override: {e}")))
}

fn deep_merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("MMCOORD_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn init_threads(threads: usize, deterministic: bool) {
    let n = if deterministic { 1 } else { threads };
    if n > 0 {
        // Ignore the error if a pool was already installed (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn parse_ks(text: &str) -> Result<Vec<usize>> {
    let ks = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("bad --ks list '{text}'")))?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("--ks needs positive integers".into()));
    }
    Ok(ks)
}

fn parse_name_list(text: &str, what: &str) -> Result<Vec<String>> {
    let names: Vec<String> = text
        .split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::Config(format!("{what} needs at least one modality")));
    }
    Ok(names)
}

/// Parse `name:dim:sigma[:views=N][:missing=R][:class-level]`.
fn parse_modality(text: &str) -> Result<SynthModality> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() < 3 {
        return Err(Error::Config(format!(
            "modality spec '{text}' needs name:dim:sigma"
        )));
    }
    let mut m = SynthModality {
        name: parts[0].to_string(),
        dim: parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad dim in '{text}'")))?,
        noise_sigma: parts[2]
            .parse()
            .map_err(|_| Error::Config(format!("bad sigma in '{text}'")))?,
        ..SynthModality::default()
    };
    for opt in &parts[3..] {
        if let Some(v) = opt.strip_prefix("views=") {
            m.views_per_entity = v
                .parse()
                .map_err(|_| Error::Config(format!("bad views in '{text}'")))?;
        } else if let Some(v) = opt.strip_prefix("missing=") {
            m.missing_rate = v
                .parse()
                .map_err(|_| Error::Config(format!("bad missing rate in '{text}'")))?;
        } else if *opt == "class-level" {
            m.class_level = true;
        } else {
            return Err(Error::Config(format!(
                "unknown modality option '{opt}' in '{text}'"
            )));
        }
    }
    Ok(m)
}

fn emit(value: &Value, also: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(path) = also {
        fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Parse argv, dispatch, and map errors to exit codes.
pub fn main_entry() -> std::process::ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Zeroshot(args) => cmd_zeroshot(args),
        Command::Enrich(args) => cmd_enrich(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

pub fn cmd_synth(args: SynthArgs) -> Result<u8> {
    let mut args = merge_config(args.clone(), args.config.as_deref())?;
    if args.out.as_os_str().is_empty() {
        return Err(Error::Config("--out is required".into()));
    }
    if args.modalities.is_empty() {
        args.modalities = vec![
            "img:32:0.05".to_string(),
            "txt:24:0.05".to_string(),
            "aud:28:0.05".to_string(),
        ];
    }
    let seed = resolve_seed(args.seed);
    let modalities = args
        .modalities
        .iter()
        .map(|t| parse_modality(t))
        .collect::<Result<Vec<_>>>()?;
    let split_counts = match &args.splits {
        Some(text) => {
            let counts: Vec<usize> = text
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad --splits '{text}'")))?;
            if counts.len() != 3 {
                return Err(Error::Config("--splits needs train,val,test".into()));
            }
            Some((counts[0], counts[1], counts[2]))
        }
        None => None,
    };
    let cfg = SynthConfig {
        name: "synth".to_string(),
        n_entities: args.entities,
        n_classes: args.classes,
        latent_dim: args.latent_dim,
        class_spread: args.class_spread,
        modalities,
        duplicate_view_rate: args.duplicate_rate,
        seed,
        split_by_class: args.split_by_class,
        split_counts,
        ..SynthConfig::default()
    };
    let dataset = generate(&cfg, &args.out)?;
    let run = RunManifest::new("synth", seed, &args)?;
    let splits: serde_json::Map<String, Value> = dataset
        .splits
        .iter()
        .map(|(k, v)| (k.clone(), json!(v.len())))
        .collect();
    emit(
        &json!({
            "run": run,
            "manifest": manifest_path(&args.out),
            "records": dataset.entities.len(),
            "modalities": dataset.modalities.iter().map(|m| json!({"name": m.name, "dim": m.dim})).collect::<Vec<_>>(),
            "splits": splits,
        }),
        None,
    )?;
    Ok(0)
}

fn train_config_from(args: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    if args.tau <= 0.0 {
        return Err(Error::Config("--tau must be positive".into()));
    }
    Ok(TrainConfig {
        loss: LossConfig {
            family: args.loss,
            tau_mode: args.tau_mode,
            log_tau: args.tau.ln(),
            tau_max: args.tau_max,
            rho: args.rho,
            target_threshold: args.threshold,
            reduction: args.ce_reduction,
        },
        space: CoordinationSpace {
            dim: args.dim,
            hidden: args.hidden,
        },
        optim: OptimConfig {
            weight_decay: args.wd,
            decay_mode: args.decay_mode,
            ..OptimConfig::default()
        },
        batch_size: args.batch,
        max_epochs: args.epochs,
        patience: args.patience,
        lr_max: args.lr,
        seed,
        shuffle: !args.no_shuffle,
        val_positives: args.val_positives,
        eval_metric: "avg_r1".to_string(),
    })
}

pub fn cmd_train(args: TrainArgs) -> Result<u8> {
    let args = merge_config(args.clone(), args.config.as_deref())?;
    if args.data.as_os_str().is_empty() || args.out.as_os_str().is_empty() {
        return Err(Error::Config("--data and --out are required".into()));
    }
    init_threads(args.threads, args.deterministic);
    let seed = resolve_seed(args.seed);
    let config = train_config_from(&args, seed)?;
    let dataset = Dataset::load(&args.data)?;
    let ckpt = train(&dataset, &args.train_split, &args.val_split, &config)?;
    for h in &ckpt.history {
        eprintln!(
            "epoch {:>3}: train loss {:.6}, val avg r@1 {:.4}",
            h.epoch, h.train_loss, h.val_metric
        );
    }
    save_checkpoint(&ckpt, &args.out)?;
    let run = RunManifest::new("train", seed, &args)?;
    let history_json = json!({
        "run": run,
        "history": ckpt.history,
        "best_epoch": ckpt.epoch,
        "best_val_metric": ckpt.best_val_metric,
    });
    let history_path = args.out.join("history.json");
    fs::write(
        &history_path,
        format!("{}\n", serde_json::to_string_pretty(&history_json)?),
    )
    .map_err(|e| Error::io(&history_path, e))?;
    emit(
        &json!({
            "run": RunManifest::new("train", seed, &args)?,
            "checkpoint": args.out,
            "best_epoch": ckpt.epoch,
            "best_val_metric": ckpt.best_val_metric,
            "epochs_run": ckpt.history.len(),
        }),
        None,
    )?;
    Ok(0)
}

fn load_pair(ckpt_dir: &Path, data: &Path) -> Result<(crate::trainer::Checkpoint, Dataset)> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let dataset = Dataset::load(data)?;
    Ok((ckpt, dataset))
}

fn report_value(run: RunManifest, report: &crate::eval::RetrievalReport) -> Result<Value> {
    let mut value = serde_json::to_value(report)?;
    value
        .as_object_mut()
        .expect("report is an object")
        .insert("run".to_string(), serde_json::to_value(run)?);
    Ok(value)
}

pub fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let args = merge_config(args.clone(), args.config.as_deref())?;
    init_threads(args.threads, args.deterministic);
    let seed = resolve_seed(args.seed);
    let ks = parse_ks(&args.ks)?;
    let (ckpt, dataset) = load_pair(&args.ckpt, &args.data)?;
    let tables = project_dataset(&ckpt.params, &dataset, &args.split)?;
    let report = cross_modal_report(&dataset, &args.split, &tables, &ks, args.positives)?;
    let run = RunManifest::new("eval", seed, &args)?;
    emit(&report_value(run, &report)?, args.report.as_deref())?;
    Ok(0)
}

fn select_tables<'a>(
    tables: &'a [ProjectedTable],
    names: &[String],
) -> Result<Vec<&'a ProjectedTable>> {
    names
        .iter()
        .map(|n| {
            tables
                .iter()
                .find(|t| &t.modality == n)
                .ok_or_else(|| Error::ModalityMismatch(format!("no projected table for '{n}'")))
        })
        .collect()
}

pub fn cmd_zeroshot(args: ZeroshotArgs) -> Result<u8> {
    let args = merge_config(args.clone(), args.config.as_deref())?;
    init_threads(args.threads, args.deterministic);
    let seed = resolve_seed(args.seed);
    let (ckpt, dataset) = load_pair(&args.ckpt, &args.data)?;
    let input_names = parse_name_list(&args.input_modalities, "--input-modalities")?;
    if args.class_modality.is_empty() {
        return Err(Error::Config("--class-modality is required".into()));
    }

    let tables = project_dataset(&ckpt.params, &dataset, &args.split)?;
    let input_tables = select_tables(&tables, &input_names)?;
    let split_indices = dataset.split(&args.split)?;

    // Fused input embeddings for entities present in every input modality
    // and carrying a class label.
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0usize;
    for (p, &ent) in split_indices.iter().enumerate() {
        let present = input_tables.iter().all(|t| t.present[p]);
        let label = dataset.entities[ent].class_label;
        match (present, label) {
            (true, Some(label)) => {
                let views: Vec<_> = input_tables.iter().map(|t| t.rows.row(p)).collect();
                rows.push(crate::eval::combine_embeddings(&views)?);
                labels.push(label);
            }
            _ => skipped += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(
            "no labeled entities with all input modalities present".into(),
        ));
    }
    let dim = rows[0].len();
    let mut inputs = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        inputs.row_mut(i).assign(r);
    }

    let class_head = ckpt
        .params
        .modality(&args.class_modality)
        .ok_or_else(|| Error::ModalityMismatch(format!("no head for '{}'", args.class_modality)))?;
    let (class_labels, raw_classes) = match &args.class_embeddings {
        Some(path) => {
            let table = read_mmeb(path)?;
            let mut wanted: Vec<u32> = labels.clone();
            wanted.sort_unstable();
            wanted.dedup();
            let mut rows = Array2::zeros((wanted.len(), table.ncols()));
            for (i, &label) in wanted.iter().enumerate() {
                if label as usize >= table.nrows() {
                    return Err(Error::Config(format!(
                        "class embedding file has {} rows, label {label} out of range",
                        table.nrows()
                    )));
                }
                rows.row_mut(i).assign(&table.row(label as usize));
            }
            (wanted, rows)
        }
        None => {
            // Attribute averaging over the evaluated split, in raw space.
            let m = dataset
                .modality_index(&args.class_modality)
                .ok_or_else(|| {
                    Error::ModalityMismatch(format!(
                        "dataset lacks modality '{}'",
                        args.class_modality
                    ))
                })?;
            let mut attr_rows = Vec::new();
            let mut attr_labels = Vec::new();
            for &ent in split_indices {
                if let (Some(view), Some(label)) =
                    (dataset.view(ent, m), dataset.entities[ent].class_label)
                {
                    attr_rows.push(view.to_owned());
                    attr_labels.push(label);
                }
            }
            if attr_rows.is_empty() {
                return Err(Error::Config("no labeled attribute vectors in split".into()));
            }
            let mut attrs = Array2::zeros((attr_rows.len(), attr_rows[0].len()));
            for (i, r) in attr_rows.iter().enumerate() {
                attrs.row_mut(i).assign(r);
            }
            build_class_embeddings(&attrs, &attr_labels)?
        }
    };
    let class_embs = if args.raw_classes {
        raw_classes
    } else {
        let present = vec![true; raw_classes.nrows()];
        crate::encoder::encode(class_head, &raw_classes, &present)?
    };

    let t1 = zero_shot_t1(&inputs, &labels, &class_labels, &class_embs)?;
    let run = RunManifest::new("zeroshot", seed, &args)?;
    emit(
        &json!({
            "run": run,
            "t1": t1,
            "n_classes": class_labels.len(),
            "n_samples": labels.len(),
            "skipped_entities": skipped,
        }),
        args.report.as_deref(),
    )?;
    Ok(0)
}

pub fn cmd_enrich(args: EnrichArgs) -> Result<u8> {
    let args = merge_config(args.clone(), args.config.as_deref())?;
    init_threads(args.threads, args.deterministic);
    let seed = resolve_seed(args.seed);
    let ks = parse_ks(&args.ks)?;
    let (ckpt, dataset) = load_pair(&args.ckpt, &args.data)?;
    let query_names = parse_name_list(&args.query, "--query")?;
    let db_names = parse_name_list(&args.db, "--db")?;
    let tables = project_dataset(&ckpt.params, &dataset, &args.split)?;
    let query_tables = select_tables(&tables, &query_names)?;
    let db_tables = select_tables(&tables, &db_names)?;
    let report = enriched_retrieval(
        &dataset,
        &args.split,
        &query_tables,
        &db_tables,
        &ks,
        args.positives,
    )?;
    let run = RunManifest::new("enrich", seed, &args)?;
    emit(&report_value(run, &report)?, args.report.as_deref())?;
    Ok(0)
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8> {
    let args = merge_config(args.clone(), args.config.as_deref())?;
    let seed = resolve_seed(args.seed);
    let cfg = LossConfig {
        family: args.loss,
        tau_mode: args.tau_mode,
        rho: args.rho,
        reduction: args.ce_reduction,
        ..LossConfig::default()
    };
    let (params, batch) = gradcheck_instance(args.modalities, args.dim, args.batch, args.missing, seed)?;
    let max_coords = (args.max_coords > 0).then_some(args.max_coords);
    let max_rel_error = finite_diff_check(&params, &batch, &cfg, args.h, seed, max_coords)?;
    let pass = max_rel_error < args.tol;
    let run = RunManifest::new("gradcheck", seed, &args)?;
    emit(
        &json!({
            "run": run,
            "max_rel_error": max_rel_error,
            "tolerance": args.tol,
            "pass": pass,
        }),
        None,
    )?;
    Ok(if pass { 0 } else { 3 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_spec_parser_handles_options() {
        let m = parse_modality("img:64:0.05").unwrap();
        assert_eq!((m.name.as_str(), m.dim, m.noise_sigma), ("img", 64, 0.05));
        assert_eq!(m.views_per_entity, 1);
        let m = parse_modality("txt:24:0.1:views=3:missing=0.2").unwrap();
        assert_eq!(m.views_per_entity, 3);
        assert_eq!(m.missing_rate, 0.2);
        let m = parse_modality("cls:16:0:class-level").unwrap();
        assert!(m.class_level);
        assert!(parse_modality("bad").is_err());
        assert!(parse_modality("a:b:c").is_err());
        assert!(parse_modality("a:1:0:wat=1").is_err());
    }

    #[test]
    fn config_file_overrides_flags() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("override.json");
        fs::write(&path, r#"{"batch": 32, "rho": 0.0}"#).unwrap();
        let args = TrainArgs {
            batch: 80,
            rho: 1.0,
            ..TrainArgs::default()
        };
        let merged = merge_config(args, Some(path.as_path())).unwrap();
        assert_eq!(merged.batch, 32);
        assert_eq!(merged.rho, 0.0);
        assert_eq!(merged.epochs, 50, "untouched fields keep flag values");
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("override.json");
        fs::write(&path, r#"{"batchsize": 32}"#).unwrap();
        assert!(merge_config(TrainArgs::default(), Some(path.as_path())).is_err());
    }

    #[test]
    fn ks_parser_validates() {
        assert_eq!(parse_ks("1,5").unwrap(), vec![1, 5]);
        assert_eq!(parse_ks(" 10 ").unwrap(), vec![10]);
        assert!(parse_ks("0").is_err());
        assert!(parse_ks("a,b").is_err());
    }
}
