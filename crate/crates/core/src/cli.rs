//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, configuration, input or model-file
//! problems, 3 numeric failure during training. Standard output carries only
//! each command's payload; diagnostics go to standard error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::baselines::{confusion, error_rate};
use crate::data::{
    gen_spirals, load_delimited, load_table, split, Dataset, LabelMap, SplitSpec, Standardizer,
};
use crate::error::{invalid, Error, Result};
use crate::modelfile::ModelFile;
use crate::trainer::{
    train_mac, with_threads, Basis, HistoryRecord, InitStrategy, MacConfig, Sigma, TrainedModel,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Header of the training trace file.
pub const TRACE_HEADER: &str =
    "stage,iter,mu,penalty_objective,nested_objective,train_error,val_error";

#[derive(Parser, Debug)]
#[command(
    name = "macsvm",
    version,
    about = "Low-dimensional nonlinear SVMs trained by auxiliary coordinates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a K-class spirals dataset (label column last).
    Spirals(SpiralsArgs),
    /// Train a model and write it to a file.
    Train(TrainArgs),
    /// Predict one label per input row.
    Predict(PredictArgs),
    /// Print the error rate and confusion counts on a labelled file.
    Eval(EvalArgs),
    /// Train every combination of the given grids and keep the best on
    /// validation data.
    Gridsearch(GridArgs),
}

#[derive(Args, Debug)]
struct SpiralsArgs {
    /// Number of classes (>= 2).
    #[arg(long)]
    k: usize,
    /// Points per class.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Standard deviation of the Gaussian jitter.
    #[arg(long, default_value_t = 0.025)]
    noise: f64,
    #[arg(long, default_value_t = 1.5)]
    turns: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Random,
    Simplex,
}

/// Inputs shared by commands that train.
#[derive(Args, Debug)]
struct DataArgs {
    /// Training data, comma- or tab-separated.
    #[arg(long)]
    data: PathBuf,
    /// Label column, 1-based (default: last).
    #[arg(long)]
    label_col: Option<usize>,
    /// Separate validation file (enables early stopping).
    #[arg(long, conflicts_with = "val_fraction")]
    val: Option<PathBuf>,
    /// Hold out this fraction of the training data, stratified, for
    /// validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Use the features as given instead of standardizing them.
    #[arg(long)]
    no_standardize: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, env = "MACSVM_THREADS", default_value_t = 0)]
    threads: usize,
}

/// Hyperparameters and solver controls.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Latent dimension L.
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    /// Number of RBF centers M.
    #[arg(long, default_value_t = 100)]
    centers: usize,
    /// Linear F (Φ(x) = x) instead of RBFs.
    #[arg(long)]
    linear: bool,
    /// RBF width, or "auto" for the median distance between centers.
    #[arg(long, default_value = "auto", value_parser = parse_sigma)]
    sigma: Sigma,
    /// Ridge coefficient on W.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// SVM penalty C.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Per-class penalties, comma-separated, overriding --c.
    #[arg(long, value_delimiter = ',')]
    class_c: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2.0)]
    mu0: f64,
    #[arg(long, default_value_t = 1.5)]
    mu_factor: f64,
    /// Maximum number of penalty stages.
    #[arg(long, default_value_t = 20)]
    mu_stages: usize,
    /// Relative objective change that ends a stage.
    #[arg(long, default_value_t = 1e-4)]
    inner_tol: f64,
    /// Maximum iterations per stage.
    #[arg(long, default_value_t = 50)]
    inner_iters: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Simplex)]
    init: InitArg,
    /// Distance between simplex vertices.
    #[arg(long, default_value_t = 4.0)]
    simplex_scale: f64,
    /// Stages without validation improvement before stopping.
    #[arg(long, default_value_t = 1)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    svm_tol: f64,
    #[arg(long, default_value_t = 2000)]
    svm_epochs: usize,
    #[arg(long, default_value_t = 1e-8)]
    z_tol: f64,
    #[arg(long, default_value_t = 100)]
    kmeans_iters: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    model_out: PathBuf,
    /// Per-iteration objective trace (CSV).
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Inputs, with or without a label column.
    #[arg(long)]
    data: PathBuf,
    /// Label column, 1-based (default: last), if the file has one.
    #[arg(long)]
    label_col: Option<usize>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    label_col: Option<usize>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Widths to try (comma-separated; "auto" allowed).
    #[arg(long = "sigma-grid", value_delimiter = ',', value_parser = parse_sigma)]
    sigma_grid: Option<Vec<Sigma>>,
    #[arg(long = "c-grid", value_delimiter = ',')]
    c_grid: Option<Vec<f64>>,
    #[arg(long = "lambda-grid", value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long = "centers-grid", value_delimiter = ',')]
    centers_grid: Option<Vec<usize>>,
    #[arg(long = "latent-dim-grid", value_delimiter = ',')]
    latent_dim_grid: Option<Vec<usize>>,
    /// Where to write the best model.
    #[arg(long)]
    model_out: PathBuf,
}

fn parse_sigma(s: &str) -> std::result::Result<Sigma, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Sigma::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(Sigma::Fixed(v)),
        _ => Err(format!("expected a positive number or \"auto\", got {s:?}")),
    }
}

impl ConfigArgs {
    fn config(&self) -> MacConfig {
        MacConfig {
            latent_dim: self.latent_dim,
            basis: if self.linear {
                Basis::Linear
            } else {
                Basis::Rbf {
                    centers: self.centers,
                }
            },
            sigma: self.sigma,
            lambda: self.lambda,
            c: self.c,
            class_c: self.class_c.clone(),
            mu0: self.mu0,
            mu_factor: self.mu_factor,
            mu_max_stages: self.mu_stages,
            inner_tol: self.inner_tol,
            inner_max_iters: self.inner_iters,
            init: match self.init {
                InitArg::Random => InitStrategy::Random,
                InitArg::Simplex => InitStrategy::Simplex,
            },
            simplex_scale: self.simplex_scale,
            patience: self.patience,
            seed: self.seed,
            svm_tol: self.svm_tol,
            svm_max_epochs: self.svm_epochs,
            z_tol: self.z_tol,
            kmeans_iters: self.kmeans_iters,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Spirals(a) => cmd_spirals(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gridsearch(a) => cmd_gridsearch(&a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("macsvm: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Runs `body` against the file at `path`, or standard output.
fn with_output(path: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf),
        source,
    };
    match path {
        Some(p) => {
            let mut w = create(p)?;
            body(&mut w).and_then(|_| w.flush()).map_err(io_err)
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w).and_then(|_| w.flush()).map_err(io_err)
        }
    }
}

fn label_col(col: Option<usize>) -> Result<Option<usize>> {
    match col {
        Some(0) => Err(invalid("label-col is 1-based")),
        Some(c) => Ok(Some(c - 1)),
        None => Ok(None),
    }
}

fn cmd_spirals(a: &SpiralsArgs) -> Result<()> {
    if a.k < 2 {
        return Err(invalid(format!("k must be >= 2, got {}", a.k)));
    }
    let ds = gen_spirals(a.k, a.n, a.noise, a.turns, a.seed)?;
    with_output(a.out.as_deref(), |w| write_dataset(w, &ds))
}

fn write_dataset(w: &mut dyn Write, ds: &Dataset) -> io::Result<()> {
    let header: Vec<String> = (1..=ds.dim()).map(|j| format!("x{j}")).collect();
    writeln!(w, "{},label", header.join(","))?;
    for (i, &y) in ds.y.iter().enumerate() {
        for j in 0..ds.dim() {
            write!(w, "{},", ds.x[(i, j)])?;
        }
        writeln!(w, "{y}")?;
    }
    Ok(())
}

/// Training inputs after validation split and standardization.
struct Prepared {
    train: Dataset,
    val: Option<Dataset>,
    labels: LabelMap,
    standardizer: Option<Standardizer>,
}

fn map_labels(names: &[String], labels: &LabelMap) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            labels
                .index_of(n)
                .ok_or_else(|| invalid(format!("label {n:?} does not occur in the training data")))
        })
        .collect()
}

fn prepare(a: &DataArgs, seed: u64, default_val_fraction: Option<f64>) -> Result<Prepared> {
    let col = label_col(a.label_col)?;
    let (full, labels) = load_delimited(&a.data, col)?;
    let (train, val) = if let Some(path) = &a.val {
        let table = load_table(path, full.dim(), col)?;
        let names = table
            .labels
            .ok_or_else(|| invalid("validation file has no label column"))?;
        let y = map_labels(&names, &labels)?;
        let val = Dataset::new(table.x, y, full.k)?;
        (full, Some(val))
    } else if let Some(f) = a.val_fraction.or(default_val_fraction) {
        if !(f > 0.0 && f < 1.0) {
            return Err(invalid(format!("val-fraction must lie in (0, 1), got {f}")));
        }
        let mut parts = split(&full, &SplitSpec::new(vec![1.0 - f, f], seed)?)?;
        let val = parts.pop().expect("two parts");
        let train = parts.pop().expect("two parts");
        if val.is_empty() || train.is_empty() {
            return Err(invalid("val-fraction leaves an empty split"));
        }
        (train, Some(val))
    } else {
        (full, None)
    };
    if a.no_standardize {
        return Ok(Prepared {
            train,
            val,
            labels,
            standardizer: None,
        });
    }
    let s = Standardizer::fit(&train.x);
    let train = Dataset::new(s.apply(&train.x)?, train.y, train.k)?;
    let val = match val {
        Some(v) => Some(Dataset::new(s.apply(&v.x)?, v.y, v.k)?),
        None => None,
    };
    Ok(Prepared {
        train,
        val,
        labels,
        standardizer: Some(s),
    })
}

pub fn write_trace(w: &mut dyn Write, history: &[HistoryRecord]) -> io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for h in history {
        let val = h.val_error.map_or(String::new(), |v| format!("{v:.16e}"));
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            h.stage, h.iteration, h.mu, h.penalty, h.nested, h.train_error, val
        )?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.config();
    cfg.validate()?;
    let prep = prepare(&a.data, cfg.seed, None)?;
    let (model, state) =
        with_threads(a.data.threads, || train_mac(&cfg, &prep.train, prep.val.as_ref()))??;
    let s = &model.summary;
    info!(
        "stopped: {} after {} stage(s), {} iteration(s); using stage {}",
        s.stop_reason.as_str(),
        s.stages,
        s.iterations,
        s.selected_stage
    );
    let file = ModelFile {
        model,
        standardizer: prep.standardizer,
        labels: prep.labels,
    };
    file.save(&a.model_out)?;
    if let Some(path) = &a.trace_out {
        with_output(Some(path), |w| write_trace(w, &state.history))?;
    }
    Ok(())
}

/// Inputs of a predict/eval file after the model's preprocessing.
fn model_inputs(
    model: &ModelFile,
    data: &Path,
    col: Option<usize>,
) -> Result<(nalgebra::DMatrix<f64>, Option<Vec<String>>)> {
    let d = model.model.map.features.input_dim();
    let table = load_table(data, d, label_col(col)?)?;
    Ok((model.prepare(&table.x)?, table.labels))
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let (x, _) = model_inputs(&model, &a.data, a.label_col)?;
    let pred = model.model.predict_collapsed(&x)?;
    let names = &model.labels.names;
    with_output(a.out.as_deref(), |w| {
        for p in &pred {
            writeln!(w, "{}", names[*p])?;
        }
        Ok(())
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let (x, names) = model_inputs(&model, &a.data, a.label_col)?;
    let names = names.ok_or_else(|| invalid("evaluation data has no label column"))?;
    let truth = map_labels(&names, &model.labels)?;
    let pred = model.model.predict_collapsed(&x)?;
    let err = error_rate(&pred, &truth)?;
    let k = model.labels.names.len();
    let counts = confusion(&pred, &truth, k);
    with_output(None, |w| {
        writeln!(w, "error_rate,{err:.6}")?;
        writeln!(w, "true\\predicted,{}", model.labels.names.join(","))?;
        for (name, row) in model.labels.names.iter().zip(&counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    })
}

/// One trained grid point.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub config: MacConfig,
    /// Trainable parameters: `L·M + K·(L + 1)`.
    pub params: usize,
    pub val_error: f64,
    pub train_error: f64,
}

/// Indices of `rows` ordered by validation error, then parameter count,
/// then position.
pub fn grid_order(rows: &[GridRow]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&i, &j| {
        rows[i]
            .val_error
            .total_cmp(&rows[j].val_error)
            .then(rows[i].params.cmp(&rows[j].params))
            .then(i.cmp(&j))
    });
    order
}

fn grid_or<T: Clone>(grid: &Option<Vec<T>>, default: T, name: &str) -> Result<Vec<T>> {
    match grid {
        Some(v) if v.is_empty() => Err(invalid(format!("{name} grid is empty"))),
        Some(v) => Ok(v.clone()),
        None => Ok(vec![default]),
    }
}

fn param_count(model: &TrainedModel) -> usize {
    let l = model.map.latent_dim();
    let m = model.map.features.basis_count();
    l * m + model.svms.class_count() * (l + 1)
}

fn cmd_gridsearch(a: &GridArgs) -> Result<()> {
    let base = a.config.config();
    let sigmas = grid_or(&a.sigma_grid, base.sigma, "sigma")?;
    let cs = grid_or(&a.c_grid, base.c, "c")?;
    let lambdas = grid_or(&a.lambda_grid, base.lambda, "lambda")?;
    let centers = grid_or(&a.centers_grid, a.config.centers, "centers")?;
    let dims = grid_or(&a.latent_dim_grid, base.latent_dim, "latent-dim")?;

    let mut configs = Vec::new();
    for &sigma in &sigmas {
        for &c in &cs {
            for &lambda in &lambdas {
                for &m in &centers {
                    for &l in &dims {
                        let mut cfg = base.clone();
                        cfg.sigma = sigma;
                        cfg.c = c;
                        cfg.lambda = lambda;
                        cfg.latent_dim = l;
                        if !a.config.linear {
                            cfg.basis = Basis::Rbf { centers: m };
                        }
                        cfg.validate()?;
                        configs.push(cfg);
                    }
                }
            }
        }
    }

    let prep = prepare(&a.data, base.seed, Some(0.2))?;
    let val = prep.val.as_ref().expect("gridsearch always validates");
    let mut rows = Vec::with_capacity(configs.len());
    let mut models = Vec::with_capacity(configs.len());
    for cfg in configs {
        let (model, _) = with_threads(a.data.threads, || train_mac(&cfg, &prep.train, Some(val)))??;
        let val_error = error_rate(&model.predict(&val.x)?, &val.y)?;
        let train_error = error_rate(&model.predict(&prep.train.x)?, &prep.train.y)?;
        info!("grid point {}: val error {val_error:.4}", rows.len());
        rows.push(GridRow {
            params: param_count(&model),
            config: cfg,
            val_error,
            train_error,
        });
        models.push(model);
    }
    let order = grid_order(&rows);
    let best = order[0];
    let file = ModelFile {
        model: models.swap_remove(best),
        standardizer: prep.standardizer,
        labels: prep.labels,
    };
    file.save(&a.model_out)?;
    with_output(None, |w| {
        writeln!(w, "rank,sigma,c,lambda,centers,latent_dim,params,val_error,train_error")?;
        for (rank, &i) in order.iter().enumerate() {
            let r = &rows[i];
            let sigma = match r.config.sigma {
                Sigma::Auto => "auto".to_string(),
                Sigma::Fixed(s) => s.to_string(),
            };
            let m = match r.config.basis {
                Basis::Rbf { centers } => centers.to_string(),
                Basis::Linear => "linear".to_string(),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{:.6},{:.6}",
                rank + 1,
                sigma,
                r.config.c,
                r.config.lambda,
                m,
                r.config.latent_dim,
                r.params,
                r.val_error,
                r.train_error
            )?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_parsing() {
        assert_eq!(parse_sigma("auto").unwrap(), Sigma::Auto);
        assert_eq!(parse_sigma("0.5").unwrap(), Sigma::Fixed(0.5));
        assert!(parse_sigma("-1").is_err());
        assert!(parse_sigma("x").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&invalid("x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::ModelFormat("x".into())), EXIT_USAGE);
    }

    #[test]
    fn defaults_match_library() {
        let cli = Cli::try_parse_from(["macsvm", "train", "--data", "d", "--model-out", "m"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.config.config(), MacConfig::default());
    }

    #[test]
    fn ranking_prefers_error_then_size_then_order() {
        let row = |val_error, params| GridRow {
            config: MacConfig::default(),
            params,
            val_error,
            train_error: 0.0,
        };
        let rows = vec![row(0.1, 5), row(0.0, 9), row(0.0, 3), row(0.0, 3)];
        assert_eq!(grid_order(&rows), vec![2, 3, 1, 0]);
    }

    #[test]
    fn trace_format() {
        let h = HistoryRecord {
            stage: 0,
            iteration: 1,
            mu: 2.0,
            penalty: 1.5,
            nested: 2.5,
            train_error: 0.0,
            val_error: None,
        };
        let mut out = Vec::new();
        write_trace(&mut out, &[h]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,1,2.0000000000000000e0,"), "{row}");
        assert!(row.ends_with(','));
    }
}
