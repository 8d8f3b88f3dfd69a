//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad flags, configuration or input files,
//! 2 when the pipeline fails on valid input (degenerate data, thresholds that
//! leave nothing to train on, unwritable outputs).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active_learning::{self, ActiveLearningError, QuerySet, Strategy};
use crate::cleansing::{self, CleansingError};
use crate::feature_store::{self, FeatureDataset, FeatureError};
use crate::kmeans::{self, KMeansError, KMeansParams};
use crate::lda::{LdaError, LdaModel};
use crate::metrics::{self, EvalReport, MetricsError, DEFAULT_SEEDS};
use crate::representation::fuse_dataset;
use crate::trainer::{self, Delta, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        invalid(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => invalid(e),
            _ => runtime(e),
        }
    }
}

impl From<ActiveLearningError> for CliError {
    fn from(e: ActiveLearningError) -> Self {
        use ActiveLearningError as E;
        match e {
            E::Train(t) => t.into(),
            E::BudgetExceedsClusters { .. } | E::KMeans(_) | E::Cleansing(_) => runtime(e),
            _ => invalid(e),
        }
    }
}

impl From<CleansingError> for CliError {
    fn from(e: CleansingError) -> Self {
        runtime(e)
    }
}

impl From<KMeansError> for CliError {
    fn from(e: KMeansError) -> Self {
        runtime(e)
    }
}

impl From<LdaError> for CliError {
    fn from(e: LdaError) -> Self {
        runtime(e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        invalid(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "celda",
    version,
    about = "Pseudo-label cleansing and LDA training over extracted features"
)]
struct Cli {
    /// JSON file supplying defaults for any flag below; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. Results are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a feature file and list every violation.
    Validate {
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Train and write the model file plus a per-epoch history CSV.
    Train {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// History CSV (default: next to the model).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train once per seed; `--seeds` alone uses 13,27,250,583,915.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Label every record with a trained model.
    Predict {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Labels CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append one posterior column per label.
        #[arg(long)]
        posterior: bool,
    },
    /// Accuracy report against true labels.
    ///
    /// Scores a model, a predictions CSV, or (with neither) the pseudo-labels
    /// stored in the feature file.
    Evaluate {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions")]
        model: Option<PathBuf>,
        /// CSV with `id` and `predicted` columns, as written by `predict`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// JSON id → label map merged over the file's true labels.
        #[arg(long)]
        answers: Option<PathBuf>,
        /// JSON report (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Pick records for a human to label.
    AlSelect {
        #[arg(long)]
        features: Option<PathBuf>,
        /// Query CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Queries per label.
        #[arg(long)]
        n_shot: Option<usize>,
        /// `largest` or `highest-entropy`.
        #[arg(long)]
        strategy: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Propagate answers to their clusters and retrain.
    AlApply {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// History CSV (default: next to the model).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Dump per-cluster cleansing statistics for the first training epoch.
    Cleanse {
        #[arg(long)]
        features: Option<PathBuf>,
        /// Per-cluster CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional `id,cluster` CSV.
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Debug, Args, Default)]
struct TrainArgs {
    /// Cluster count (default: 128 for two labels, else 16 per label).
    #[arg(long)]
    clusters: Option<usize>,
    /// Entropy-weight threshold (default: 1 / (2 × clusters)).
    #[arg(long)]
    tau: Option<f64>,
    /// Stop once fewer than this fraction of labels change; a number or `adaptive`.
    #[arg(long)]
    delta: Option<Delta>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Covariance ridge (default: scaled to the covariance trace).
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    features: Option<PathBuf>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    clusters: Option<usize>,
    tau: Option<f64>,
    delta: Option<Delta>,
    max_epochs: Option<usize>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    eps: Option<f64>,
    kmeans_max_iter: Option<usize>,
    kmeans_tol: Option<f64>,
    threads: Option<usize>,
    n_shot: Option<usize>,
    strategy: Option<String>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
    }

    fn train_config(&self, args: &TrainArgs) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            clusters: args.clusters.or(self.clusters),
            tau: args.tau.or(self.tau),
            delta: args.delta.or(self.delta).unwrap_or(d.delta),
            max_epochs: args.max_epochs.or(self.max_epochs).unwrap_or(d.max_epochs),
            seed: args.seed.or(self.seed).unwrap_or(d.seed),
            eps: args.eps.or(self.eps),
            kmeans_max_iter: self.kmeans_max_iter.unwrap_or(d.kmeans_max_iter),
            kmeans_tol: self.kmeans_tol.unwrap_or(d.kmeans_tol),
        };
        c.validate()?;
        Ok(c)
    }
}

fn required(
    flag: Option<PathBuf>,
    file: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| invalid(format!("missing --{name}")))
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        if threads == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        // a second build in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Validate { features } => cmd_validate(
            &required(features, &file.features, "features")?,
            &mut stdout,
        ),
        Command::Train {
            features,
            model,
            out,
            seeds,
            train,
        } => {
            let features = required(features, &file.features, "features")?;
            let model = required(model, &file.model, "model")?;
            let out = out.or(file.out.clone());
            let config = file.train_config(&train)?;
            let seeds = match seeds.or(file.seeds.clone()) {
                None => None,
                Some(list) if list.is_empty() => Some(DEFAULT_SEEDS.to_vec()),
                Some(list) => Some(list),
            };
            cmd_train(
                &features,
                &model,
                out.as_deref(),
                &config,
                seeds.as_deref(),
                &mut stdout,
            )
        }
        Command::Predict {
            features,
            model,
            out,
            posterior,
        } => {
            let features = required(features, &file.features, "features")?;
            let model = required(model, &file.model, "model")?;
            let out = out.or(file.out.clone());
            cmd_predict(&model, &features, out.as_deref(), posterior)
        }
        Command::Evaluate {
            features,
            model,
            predictions,
            answers,
            out,
            confusion,
        } => {
            let features = required(features, &file.features, "features")?;
            let source = match (model, predictions) {
                (Some(m), _) => Source::Model(m),
                (None, Some(p)) => Source::Predictions(p),
                (None, None) => Source::PseudoLabels,
            };
            let out = out.or(file.out.clone());
            cmd_evaluate(
                &features,
                &source,
                answers.as_deref(),
                out.as_deref(),
                confusion.as_deref(),
                &mut stdout,
            )
        }
        Command::AlSelect {
            features,
            out,
            n_shot,
            strategy,
            train,
        } => {
            let features = required(features, &file.features, "features")?;
            let out = out.or(file.out.clone());
            let config = file.train_config(&train)?;
            let n_shot = n_shot.or(file.n_shot).unwrap_or(8);
            let strategy: Strategy = strategy
                .or(file.strategy.clone())
                .as_deref()
                .unwrap_or("largest")
                .parse()?;
            cmd_al_select(&features, out.as_deref(), &config, n_shot, strategy)
        }
        Command::AlApply {
            features,
            model,
            out,
            queries,
            answers,
            train,
        } => {
            let features = required(features, &file.features, "features")?;
            let model = required(model, &file.model, "model")?;
            let out = out.or(file.out.clone());
            let config = file.train_config(&train)?;
            cmd_al_apply(
                &features,
                &model,
                out.as_deref(),
                &queries,
                &answers,
                &config,
                &mut stdout,
            )
        }
        Command::Cleanse {
            features,
            out,
            assignments,
            train,
        } => {
            let features = required(features, &file.features, "features")?;
            let out = out.or(file.out.clone());
            let config = file.train_config(&train)?;
            cmd_cleanse(&features, out.as_deref(), assignments.as_deref(), &config)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout()),
    })
}

fn load_features(path: &Path) -> Result<FeatureDataset, CliError> {
    feature_store::read_feature_file(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<LdaModel, CliError> {
    LdaModel::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn print(out: &mut impl Write, line: std::fmt::Arguments) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(runtime)
}

pub fn cmd_validate(features: &Path, out: &mut impl Write) -> Result<(), CliError> {
    let raw = feature_store::read_raw_feature_file(features)?;
    let violations = raw.violations();
    if violations.is_empty() {
        return print(
            out,
            format_args!(
                "OK, {} records, {} dims, {} labels",
                raw.records.len(),
                raw.hidden_dim,
                raw.label_names.len()
            ),
        );
    }
    for v in &violations {
        print(out, format_args!("{v}"))?;
    }
    Err(invalid(format!(
        "{} violation(s) in {}",
        violations.len(),
        features.display()
    )))
}

/// `model.clda` + seed 27 → `model-seed27.clda`.
fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn history_path(model: &Path, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| model.with_extension("history.csv"))
}

/// Accuracy of `labels` on the records that carry a true label.
fn score(dataset: &FeatureDataset, labels: &[usize]) -> Option<EvalReport> {
    let (preds, truths): (Vec<usize>, Vec<usize>) = dataset
        .true_labels()
        .iter()
        .zip(labels)
        .filter_map(|(t, &p)| t.map(|t| (p, t)))
        .unzip();
    metrics::evaluate(&preds, &truths, dataset.num_labels()).ok()
}

fn train_once(
    dataset: &FeatureDataset,
    config: &TrainConfig,
    out: &mut impl Write,
) -> Result<TrainOutcome, CliError> {
    let points = fuse_dataset(dataset);
    let mut write_err = None;
    let outcome = trainer::run_on_points(
        &points,
        &dataset.ids(),
        &dataset.pseudo_labels(),
        dataset.num_labels(),
        config,
        None,
        |e, _| {
            if let Err(err) = writeln!(
                out,
                "epoch {}: kept {:.4} ({} records, {} clusters), label change {:.4}",
                e.epoch, e.kept_fraction, e.clean_size, e.selected_clusters, e.label_change_ratio
            ) {
                write_err.get_or_insert(err);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(runtime(e));
    }
    Ok(outcome)
}

fn save_outcome(
    outcome: &TrainOutcome,
    model: &Path,
    history: &Path,
    out: &mut impl Write,
) -> Result<(), CliError> {
    outcome
        .model
        .save(model)
        .map_err(|e| runtime(format!("cannot write {}: {e}", model.display())))?;
    outcome.history.write_csv(create(history)?)?;
    let epochs = outcome.history.len();
    if outcome.converged {
        print(out, format_args!("converged after {epochs} epoch(s)"))?;
    } else {
        print(
            out,
            format_args!("stopped at the epoch limit ({epochs}) before converging"),
        )?;
    }
    print(out, format_args!("model: {}", model.display()))?;
    print(out, format_args!("history: {}", history.display()))
}

pub fn cmd_train(
    features: &Path,
    model: &Path,
    history: Option<&Path>,
    config: &TrainConfig,
    seeds: Option<&[u64]>,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let dataset = load_features(features)?;
    print(
        out,
        format_args!(
            "{} records, {} labels, {} clusters",
            dataset.len(),
            dataset.num_labels(),
            config.cluster_count(dataset.num_labels(), dataset.len())
        ),
    )?;
    let Some(seeds) = seeds else {
        let outcome = train_once(&dataset, config, out)?;
        save_outcome(&outcome, model, &history_path(model, history), out)?;
        if let Some(r) = score(&dataset, &outcome.labels) {
            print(
                out,
                format_args!(
                    "accuracy {:.4} over {} labeled records",
                    r.accuracy, r.count
                ),
            )?;
        }
        return Ok(());
    };
    if seeds.is_empty() {
        return Err(invalid("seed list is empty"));
    }
    let history = history_path(model, history);
    let mut reports = Vec::new();
    for &seed in seeds {
        print(out, format_args!("seed {seed}"))?;
        let config = TrainConfig {
            seed,
            ..config.clone()
        };
        let outcome = train_once(&dataset, &config, out)?;
        save_outcome(
            &outcome,
            &seeded_path(model, seed),
            &seeded_path(&history, seed),
            out,
        )?;
        if let Some(r) = score(&dataset, &outcome.labels) {
            print(out, format_args!("seed {seed}: accuracy {:.4}", r.accuracy))?;
            reports.push(r);
        }
    }
    if reports.len() == seeds.len() {
        let summary = metrics::aggregate_seeds(&reports)?;
        print(out, format_args!("accuracy {summary}"))?;
    } else {
        print(
            out,
            format_args!("no true labels; accuracy summary skipped"),
        )?;
    }
    Ok(())
}

fn check_compatible(model: &LdaModel, dataset: &FeatureDataset) -> Result<(), CliError> {
    let y = dataset.num_labels();
    if model.num_labels() != y {
        return Err(invalid(format!(
            "label count mismatch: model has {}, features have {y}",
            model.num_labels()
        )));
    }
    let model_hidden = model.dim().saturating_sub(model.num_labels());
    if model_hidden != dataset.hidden_dim() {
        return Err(invalid(format!(
            "dimension mismatch: model expects hidden dim {model_hidden}, features have hidden dim {}",
            dataset.hidden_dim()
        )));
    }
    Ok(())
}

pub fn cmd_predict(
    model: &Path,
    features: &Path,
    out: Option<&Path>,
    posterior: bool,
) -> Result<(), CliError> {
    let lda = load_model(model)?;
    let dataset = load_features(features)?;
    check_compatible(&lda, &dataset)?;
    let points = fuse_dataset(&dataset);
    let predicted = lda.predict_batch(&points)?;
    let posteriors = if posterior {
        Some(lda.posterior_batch(&points)?)
    } else {
        None
    };

    let mut w = csv::Writer::from_writer(output(out)?);
    let mut header = vec!["id".to_string(), "predicted".to_string()];
    if posterior {
        header.extend(dataset.label_names().iter().map(|n| format!("p_{n}")));
    }
    w.write_record(&header)?;
    for (i, record) in dataset.records().iter().enumerate() {
        let mut row = vec![record.id.to_string(), predicted[i].to_string()];
        if let Some(p) = &posteriors {
            row.extend(p[i].iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(runtime)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Source {
    Model(PathBuf),
    Predictions(PathBuf),
    PseudoLabels,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    id: u64,
    predicted: usize,
}

fn read_predictions(path: &Path) -> Result<HashMap<u64, usize>, CliError> {
    let file = fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let mut map = HashMap::new();
    for row in r.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        map.insert(row.id, row.predicted);
    }
    Ok(map)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    label_names: &'a [String],
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn cmd_evaluate(
    features: &Path,
    source: &Source,
    answers: Option<&Path>,
    out: Option<&Path>,
    confusion: Option<&Path>,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let mut dataset = load_features(features)?;
    if let Some(path) = answers {
        let map = feature_store::read_label_map(path)?;
        dataset = feature_store::merge_true_labels(&dataset, &map)?;
    }
    let labels: Vec<usize> = match source {
        Source::PseudoLabels => dataset.pseudo_labels(),
        Source::Model(path) => {
            let lda = load_model(path)?;
            check_compatible(&lda, &dataset)?;
            lda.predict_batch(&fuse_dataset(&dataset))?
        }
        Source::Predictions(path) => {
            let map = read_predictions(path)?;
            let mut labels = Vec::with_capacity(dataset.len());
            for r in dataset.records() {
                match map.get(&r.id) {
                    Some(&p) => labels.push(p),
                    None if r.true_label.is_none() => labels.push(0),
                    None => return Err(invalid(format!("no prediction for labeled id {}", r.id))),
                }
            }
            labels
        }
    };
    let (preds, truths): (Vec<usize>, Vec<usize>) = dataset
        .true_labels()
        .iter()
        .zip(&labels)
        .filter_map(|(t, &p)| t.map(|t| (p, t)))
        .unzip();
    if truths.is_empty() {
        return Err(invalid("no records carry a true label"));
    }
    let report = metrics::evaluate(&preds, &truths, dataset.num_labels())?;

    let mut w = output(out)?;
    serde_json::to_writer_pretty(
        &mut w,
        &ReportFile {
            label_names: dataset.label_names(),
            report: &report,
        },
    )?;
    writeln!(w).and_then(|_| w.flush()).map_err(runtime)?;
    if let Some(path) = confusion {
        report.write_confusion_csv(create(path)?)?;
    }
    if out.is_some() {
        print(
            log,
            format_args!(
                "accuracy {:.4} over {} records",
                report.accuracy, report.count
            ),
        )?;
    }
    Ok(())
}

pub fn cmd_al_select(
    features: &Path,
    out: Option<&Path>,
    config: &TrainConfig,
    n_shot: usize,
    strategy: Strategy,
) -> Result<(), CliError> {
    let dataset = load_features(features)?;
    let points = fuse_dataset(&dataset);
    let ids = dataset.ids();
    let y = dataset.num_labels();
    let k = config.cluster_count(y, dataset.len());
    let clusters = active_learning::query_clustering(&points, &ids, k, config)?;
    let queries = active_learning::select_queries(
        &clusters,
        &points,
        &ids,
        &dataset.pseudo_labels(),
        y,
        n_shot,
        strategy,
    )?;
    queries.write_csv(output(out)?)?;
    eprintln!("{} queries from {k} clusters", queries.len());
    Ok(())
}

pub fn cmd_al_apply(
    features: &Path,
    model: &Path,
    history: Option<&Path>,
    queries: &Path,
    answers: &Path,
    config: &TrainConfig,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let dataset = load_features(features)?;
    let file =
        fs::File::open(queries).map_err(|e| invalid(format!("{}: {e}", queries.display())))?;
    let queries = QuerySet::read_csv(file).map_err(|e| invalid(format!("query file: {e}")))?;
    let answers = feature_store::read_label_map(answers)?;
    let points = fuse_dataset(&dataset);
    let k = config.cluster_count(dataset.num_labels(), dataset.len());
    let clusters = active_learning::query_clustering(&points, &dataset.ids(), k, config)?;
    let (outcome, propagated) =
        active_learning::al_retrain(&dataset, config, &clusters, &queries, &answers)?;
    let trusted = propagated.trusted.iter().filter(|&&t| t).count();
    print(
        out,
        format_args!("{} answers propagated to {trusted} records", answers.len()),
    )?;
    for e in &outcome.history.epochs {
        print(
            out,
            format_args!(
                "epoch {}: kept {:.4} ({} records, {} clusters), label change {:.4}",
                e.epoch, e.kept_fraction, e.clean_size, e.selected_clusters, e.label_change_ratio
            ),
        )?;
    }
    save_outcome(&outcome, model, &history_path(model, history), out)?;
    if let Some(r) = score(&dataset, &outcome.labels) {
        print(
            out,
            format_args!(
                "accuracy {:.4} over {} labeled records",
                r.accuracy, r.count
            ),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ClusterRow {
    cluster: usize,
    size: usize,
    norm_ent: f64,
    ew: f64,
    majority: usize,
    kept_count: usize,
}

pub fn cmd_cleanse(
    features: &Path,
    out: Option<&Path>,
    assignments: Option<&Path>,
    config: &TrainConfig,
) -> Result<(), CliError> {
    let dataset = load_features(features)?;
    let points = fuse_dataset(&dataset);
    let ids = dataset.ids();
    let y = dataset.num_labels();
    let k = config.cluster_count(y, dataset.len());
    let tau = config.tau_for(k);
    let params = KMeansParams {
        k,
        seed: config.seed,
        stream: 1,
        max_iter: config.kmeans_max_iter,
        tol: config.kmeans_tol,
    };
    let clusters = kmeans::kmeans_fit(&points, &ids, &params)?;
    let cleansed = cleansing::cleanse_labels(
        &clusters.assignments,
        &dataset.pseudo_labels(),
        k,
        y,
        tau,
        None,
    )?;
    let kept = cleansed.kept_per_cluster(&clusters.assignments);

    let mut w = csv::Writer::from_writer(output(out)?);
    let s = &cleansed.stats;
    for (c, &kept_count) in kept.iter().enumerate() {
        w.serialize(ClusterRow {
            cluster: c,
            size: s.sizes[c],
            norm_ent: s.norm_ent[c],
            ew: s.ew[c],
            majority: s.majority[c],
            kept_count,
        })?;
    }
    w.flush().map_err(runtime)?;

    if let Some(path) = assignments {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["id", "cluster"])?;
        for (id, c) in ids.iter().zip(&clusters.assignments) {
            w.write_record([id.to_string(), c.to_string()])?;
        }
        w.flush().map_err(runtime)?;
    }
    eprintln!(
        "{k} clusters, {} clean at tau {tau}, kept {} of {} records",
        cleansed.clean_clusters.len(),
        cleansed.kept.len(),
        dataset.len()
    );
    Ok(())
}
