use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use survconf::conformal::FirstStage;
use survconf::data::{load_csv, split_dataset, write_csv, CsvSchema, SplitFractions};
use survconf::experiment::{format_summary, read_results, run_experiment, summary_json, write_results, ExperimentConfig};
use survconf::model::{fit_model, FitSettings, FittedModel, Method, PredictorSpec, Query};
use survconf::predictor::{LinearOptions, MlpOptions};
use survconf::synth::{generate, SynthConfig};
use survconf::weights::WeightOptions;
use survconf::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_FAILURES: u8 = 3;

#[derive(Parser)]
#[command(name = "survconf", version, about = "Conformal confidence bands for censored survival times")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a true_time column
    Synth(SynthArgs),
    /// Fit predictor, weight model and calibration folds; write the model as JSON
    Fit(FitArgs),
    /// Compute one band per query row with a fitted model
    Band(BandArgs),
    /// Run a replicated coverage experiment from a TOML config
    Experiment(ExperimentArgs),
    /// Summarize results CSVs per (method, alpha)
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of subjects
    #[arg(long)]
    n: Option<usize>,
    /// Override the seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SchemaArgs {
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "event")]
    event_col: String,
    /// Comma-separated feature columns; defaults to every other column
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    #[arg(long)]
    true_time_col: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorChoice {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FirstStageChoice {
    Split,
    Hull,
}

#[derive(Args)]
struct FitArgs {
    /// Training data CSV
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    /// train,cal1,cal2,test fractions
    #[arg(long, default_value = "0.8,0.05,0.05,0.1", value_parser = parse_fractions)]
    fractions: SplitFractions,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PredictorChoice::Linear)]
    predictor: PredictorChoice,
    /// MLP hidden layer sizes
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = FirstStageChoice::Split)]
    first_stage: FirstStageChoice,
    /// Disable weight clipping
    #[arg(long)]
    no_clip: bool,
    /// Keep covariates on their raw scale
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BandArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value = "tsci", value_parser = parse_method)]
    method: Method,
    /// Query CSV containing the model's feature columns
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// One second-stage threshold for all queries, using the mean query weight
    #[arg(long)]
    shared_eta: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Validate the config and exit
    #[arg(long)]
    dry_run: bool,
    /// Results CSV; overrides the config's output path
    #[arg(long)]
    results: Option<PathBuf>,
    /// Summary JSON; overrides the config's output path
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more results CSVs
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Print the summary as JSON instead of a table
    #[arg(long)]
    json: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fractions(s: &str) -> Result<SplitFractions, String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    let [train, cal1, cal2, test] = parts[..] else {
        return Err(format!("expected 4 comma-separated fractions, got {}", parts.len()));
    };
    let f = SplitFractions::new(train, cal1, cal2, test);
    f.validate().map_err(|e| e.to_string())?;
    Ok(f)
}

fn output(path: Option<&Path>) -> survconf::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn io_error(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> survconf::Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Column names of a CSV header.
fn csv_header(path: &Path) -> survconf::Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

fn synth(args: SynthArgs) -> survconf::Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ds = generate(&cfg)?;
    write_csv(&ds, output(args.out.as_deref())?)?;
    log::info!("wrote {} subjects", ds.len());
    Ok(ExitCode::SUCCESS)
}

fn fit(args: FitArgs) -> survconf::Result<ExitCode> {
    let s = args.schema;
    let features = if s.features.is_empty() {
        let reserved = [Some(&s.time_col), Some(&s.event_col), s.true_time_col.as_ref()];
        csv_header(&args.data)?
            .into_iter()
            .filter(|h| !reserved.contains(&Some(h)))
            .collect()
    } else {
        s.features
    };
    let schema = CsvSchema {
        time_col: s.time_col,
        event_col: s.event_col,
        features,
        true_time_col: s.true_time_col,
    };
    let ds = load_csv(&args.data, &schema)?;
    let split = split_dataset(ds.len(), args.fractions, args.seed)?;
    let predictor = match args.predictor {
        PredictorChoice::Linear => PredictorSpec::Linear(LinearOptions::default()),
        PredictorChoice::Mlp => {
            let d = MlpOptions::default();
            PredictorSpec::Mlp(MlpOptions {
                hidden_sizes: args.hidden.unwrap_or(d.hidden_sizes),
                epochs: args.epochs.unwrap_or(d.epochs),
                seed: args.seed,
                ..d
            })
        }
    };
    let settings = FitSettings {
        predictor,
        weights: WeightOptions {
            clip: if args.no_clip { None } else { WeightOptions::default().clip },
            ..WeightOptions::default()
        },
        first_stage: match args.first_stage {
            FirstStageChoice::Split => FirstStage::Split,
            FirstStageChoice::Hull => FirstStage::Hull,
        },
        standardize: !args.no_standardize,
    };
    let model = fit_model(&ds, &split, &settings, None)?;
    write_text(&args.out, &model.to_json()?)?;
    log::info!(
        "fitted on {} subjects, {} cal1 and {} cal2 events",
        split.train.len(),
        model.cal1.len(),
        model.cal2.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn band(args: BandArgs) -> survconf::Result<ExitCode> {
    let mut text = String::new();
    File::open(&args.model)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_error(&args.model, e))?;
    let model = FittedModel::from_json(&text)?;

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&args.input)?;
    let headers = rdr.headers()?.clone();
    let cols = model
        .feature_names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))
        })
        .collect::<survconf::Result<Vec<_>>>()?;
    let mut queries: Vec<Query> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let x = cols
            .iter()
            .zip(&model.feature_names)
            .map(|(&i, name)| {
                let raw = record.get(i).unwrap_or("");
                raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    row: r + 1,
                    column: name.clone(),
                    message: format!("expected a finite number, got {raw:?}"),
                })
            })
            .collect::<survconf::Result<Vec<_>>>()?;
        queries.push(model.query(&x)?);
    }

    let bands = model.predict(args.method, args.alpha, &queries, args.shared_eta)?;
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["lower", "upper", "truncated", "alpha", "method"])?;
    let alpha = args.alpha.to_string();
    for b in &bands {
        w.write_record([
            b.lower.to_string().as_str(),
            &b.upper.to_string(),
            if b.truncated { "true" } else { "false" },
            &alpha,
            args.method.name(),
        ])?;
    }
    w.flush().map_err(|e| io_error(args.out.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
    Ok(ExitCode::SUCCESS)
}

fn experiment(args: ExperimentArgs) -> survconf::Result<ExitCode> {
    let cfg = ExperimentConfig::load(&args.config)?;
    if args.dry_run {
        println!(
            "config ok: {} methods x {} alphas x {} replications",
            cfg.methods.len(),
            cfg.alphas.len(),
            cfg.replications
        );
        return Ok(ExitCode::SUCCESS);
    }
    let outcome = run_experiment(&cfg)?;
    let results = args.results.or_else(|| cfg.output.results.clone());
    let summary = args.summary.or_else(|| cfg.output.summary.clone());
    if let Some(p) = &results {
        write_results(&outcome.rows, output(Some(p))?)?;
    }
    if let Some(p) = &summary {
        write_text(p, &summary_json(&outcome.rows)?)?;
    }
    print!("{}", format_summary(&outcome.rows));
    if let Some(kind) = outcome.metric_kind {
        println!("coverage metric: {kind:?}");
    }
    if !outcome.failures.is_empty() {
        eprintln!(
            "{} of {} replications failed",
            outcome.failures.len(),
            outcome.replications
        );
    }
    if outcome.excessive_failures() {
        return Ok(ExitCode::from(EXIT_FAILURES));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> survconf::Result<ExitCode> {
    let mut rows = Vec::new();
    for p in &args.inputs {
        rows.extend(read_results(File::open(p).map_err(|e| io_error(p, e))?)?);
    }
    if args.json {
        println!("{}", summary_json(&rows)?);
    } else {
        print!("{}", format_summary(&rows));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Band(a) => band(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
