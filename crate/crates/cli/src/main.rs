use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use saboteur_core::campaign::{self, CampaignConfig};
use saboteur_core::corpus::{self, MineOptions, SynthSpec};
use saboteur_core::error_model::{load_db, ErrorModelDb, SampleOptions};
use saboteur_core::ops::OpKind;
use saboteur_core::report::{read_records, Report};
use saboteur_core::{model, zoo, Inputs, Tensor};

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Error-model mining and fault-injection campaigns for CNN inference graphs.
#[derive(Parser)]
#[command(name = "saboteur", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine an error-model database from a corpus of tensor dumps.
    Analyze {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_MIN_SAMPLES)]
        min_samples: u64,
        /// Analysis report as JSON. Defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Corpus name recorded as provenance. Defaults to the directory name.
        #[arg(long)]
        corpus_id: Option<String>,
    },
    /// Check an error-model database against the schema.
    ValidateDb { db: PathBuf },
    /// Run an error-simulation campaign.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the config's `db`, then to the built-in database.
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        no_cache: bool,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the aggregated report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Aggregate campaign records.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a model once and dump every node output.
    Trace {
        #[arg(long)]
        model: PathBuf,
        /// Raw input tensor, as `PATH` for single-input models or `NAME=PATH`.
        #[arg(long, required = true)]
        input: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a built-in reference model.
    MakeModel {
        #[arg(long, value_enum, default_value_t = Arch::Lenet5)]
        arch: Arch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with the saboteur.
    SynthCorpus {
        #[arg(long)]
        kind: OpKind,
        /// Comma-separated tensor shape, e.g. `64,13,13`.
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the built-in database.
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in error-model database.
    DefaultDb {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Lenet5,
}

/// Failure while executing a graph, as opposed to bad input.
#[derive(Debug)]
struct EngineFailure(anyhow::Error);

impl std::fmt::Display for EngineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for EngineFailure {}

fn engine<T>(r: saboteur_core::Result<T>) -> Result<T> {
    r.map_err(|e| EngineFailure(e.into()).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<EngineFailure>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Analyze { corpus, out, min_samples, report, corpus_id } => {
            analyze(&corpus, &out, min_samples, report, corpus_id)
        }
        Command::ValidateDb { db } => {
            let db = load_db(&db).with_context(|| format!("invalid database {}", db.display()))?;
            say!("ok: {} kinds, default entry {}", db.len(), if db.default_entry().is_some() { "present" } else { "absent" });
            for (kind, m) in db.kinds() {
                say!("  {kind:<12} {:>8} samples from {}", m.provenance.samples, m.provenance.corpus);
            }
            Ok(())
        }
        Command::Simulate { model, db, config, out, workers, no_cache, seed, report } => {
            simulate(&model, db, &config, out, workers, no_cache, seed, report)
        }
        Command::Report { records, format, out } => report_cmd(&records, format, out),
        Command::Trace { model, input, out } => trace(&model, &input, &out),
        Command::MakeModel { arch: Arch::Lenet5, seed, out } => {
            let path = model::save_model(&zoo::lenet5(seed), &out)?;
            say!("{}", path.display());
            Ok(())
        }
        Command::SynthCorpus { kind, shape, pairs, seed, db, batch_size, out } => {
            let db = open_db(db.as_deref())?;
            let spec = SynthSpec { kind, shape, pairs, seed, batch_size };
            let opts = SampleOptions { fallback: true, ..Default::default() };
            let batches = corpus::write_synthetic_corpus(&out, &db, &spec, &opts)?;
            say!("{pairs} pairs in {} batches under {}", batches.len(), out.display());
            Ok(())
        }
        Command::DefaultDb { out } => {
            ErrorModelDb::builtin().save(&out)?;
            Ok(())
        }
    }
}

fn open_db(path: Option<&Path>) -> Result<ErrorModelDb> {
    match path {
        Some(p) => load_db(p).with_context(|| format!("loading database {}", p.display())),
        None => Ok(ErrorModelDb::builtin()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn analyze(
    dir: &Path,
    out: &Path,
    min_samples: u64,
    report_path: Option<PathBuf>,
    corpus_id: Option<String>,
) -> Result<()> {
    let scan = corpus::scan_corpus(dir)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let corpus_id = corpus_id.unwrap_or_else(|| {
        dir.file_name().map_or("corpus".into(), |n| n.to_string_lossy().into_owned())
    });
    let opts = MineOptions { min_samples, corpus_id };
    let (db, mut report) = corpus::build_error_db(&scan.entries, &opts)?;
    report.unreadable += scan.unreadable;
    report.warnings.splice(0..0, scan.warnings);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    db.save(out)?;
    let report_path = report_path.unwrap_or_else(|| sibling(out, ".report.json"));
    fs::write(&report_path, report.to_json())
        .with_context(|| format!("writing {}", report_path.display()))?;
    say!("{}", report.render_text().trim_end());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    model_path: &Path,
    db: Option<PathBuf>,
    config: &Path,
    out: Option<PathBuf>,
    workers: Option<usize>,
    no_cache: bool,
    seed: Option<u64>,
    report_path: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = CampaignConfig::load(config)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if no_cache {
        cfg.cache = false;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = out
        .or_else(|| cfg.out.clone())
        .context("no output path: pass --out or set `out` in the config")?;
    let graph = model::load_model(model_path)?;
    let db = open_db(db.or_else(|| cfg.db.clone()).as_deref())?;
    let inputs = campaign::load_inputs(&cfg, &graph)?;
    campaign::plan_campaign(&cfg, &graph, &db, inputs.len())?;

    let start = Instant::now();
    let report = engine(campaign::run_campaign_to_file(&cfg, &graph, &db, &inputs, &out))?;
    let secs = start.elapsed().as_secs_f64();
    if report.totals.engine_error > 0 {
        log::warn!("{} experiments hit engine errors", report.totals.engine_error);
    }
    if let Some(p) = report_path {
        fs::write(&p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    say!("{} in {secs:.2}s", report.summary_line());
    Ok(())
}

fn report_cmd(records: &Path, format: Format, out: Option<PathBuf>) -> Result<()> {
    let file = fs::File::open(records).with_context(|| format!("opening {}", records.display()))?;
    let recs = read_records(BufReader::new(file))
        .with_context(|| format!("reading {}", records.display()))?;
    let mut report: Report = saboteur_core::report::aggregate(&recs);
    let meta = campaign::meta_path(records);
    if meta.exists() {
        let text = fs::read_to_string(&meta)?;
        report.metadata = serde_json::from_str(&text)
            .with_context(|| format!("reading {}", meta.display()))?;
    }
    let text = match format {
        Format::Text => report.render_text(),
        Format::Json => report.to_json(),
    };
    match out {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => say!("{}", text.trim_end()),
    }
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn trace(model_path: &Path, input_args: &[String], out: &Path) -> Result<()> {
    let graph = model::load_model(model_path)?;
    let spec = graph.input_spec();
    let mut paths: BTreeMap<String, PathBuf> = BTreeMap::new();
    for arg in input_args {
        let (name, path) = match arg.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None if spec.len() == 1 => (spec[0].0.clone(), PathBuf::from(arg)),
            None => bail!("model has {} inputs; pass them as NAME=PATH", spec.len()),
        };
        paths.insert(name, path);
    }
    let mut inputs = Inputs::new();
    for (name, shape) in spec {
        let p = paths
            .remove(name)
            .with_context(|| format!("missing input `{name}`"))?;
        inputs.insert(name.clone(), Tensor::read_raw(&p, shape.clone())?);
    }
    if let Some(extra) = paths.keys().next() {
        bail!("model has no input named `{extra}`");
    }

    let trace = engine(graph.execute(&inputs))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut sites = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        let t = trace.at(i).expect("full trace");
        let file = format!("{i:03}_{}.bin", file_stem(&node.id));
        t.write_raw(&out.join(&file))?;
        sites.push(json!({
            "index": i,
            "id": node.id,
            "kind": node.kind(),
            "shape": t.shape(),
            "file": file,
            "digest": t.digest(),
        }));
    }
    let manifest = json!({ "model_digest": graph.digest(), "sites": sites });
    let path = out.join("sites.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    say!("{} sites written to {}", graph.len(), out.display());
    Ok(())
}
