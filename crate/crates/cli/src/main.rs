//! `gatets` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure (I/O, checkpoint), 2 usage or
//! configuration error, 3 data error, 4 numerical failure (divergence,
//! non-finite values, failed self-check).

mod config;
mod dataset;
mod trace;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use gatets::data::{make_windows, PreparedSeries, Split, WindowSets};
use gatets::error::Error;
use gatets::metrics::IntervalKind;
use gatets::moe::{Arch, Model};
use gatets::selfcheck::{self, SelfCheckOptions};
use gatets::trainer::{evaluate, Checkpoint, Forecaster, NaiveForecaster, TrainEvent, Trainer, EVAL_BATCH};
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{parse_split, RunConfig};
use dataset::DatasetInfo;
use trace::TraceRow;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// A check ran to completion and failed.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Parse { .. } => 3,
                Error::Numeric(_) | Error::Diverged { .. } => 4,
                _ => 1,
            },
            CliError::Failed(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "gatets", version, about = "Sparse mixture-of-experts univariate forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Impute, aggregate, split and standardise a series.
    Prepare {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train a model and write checkpoints plus per-epoch history.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Continue from an epoch-boundary checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save `epoch-NNNN.ckpt` and `last.ckpt` every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Also stream one line per optimizer step.
        #[arg(long)]
        log_steps: bool,
    },
    /// Score a checkpoint (or the naive baseline) on one split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, required_unless_present = "naive")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the last-value baseline instead of a model.
        #[arg(long)]
        naive: bool,
        #[arg(long, requires = "naive")]
        context: Option<usize>,
        #[arg(long, requires = "naive")]
        horizon: Option<usize>,
        #[arg(long, default_value = "test", value_parser = PossibleValuesParser::new(["train", "val", "test"]))]
        eval_split: String,
        #[arg(long, default_value = "ci95", value_parser = PossibleValuesParser::new(["ci95", "stderr"]))]
        interval: String,
    },
    /// Forecast the horizon after a given point of the series.
    Forecast {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Context ends just before this series index (default: series end).
        #[arg(long)]
        end: Option<usize>,
    },
    /// Export the expert sets chosen along a split as CSV and SVG.
    RouteTrace {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = PossibleValuesParser::new(["train", "val", "test"]))]
        eval_split: String,
        /// First window index within the split.
        #[arg(long, default_value_t = 0)]
        from: usize,
        /// One past the last window index (default: all windows).
        #[arg(long)]
        to: Option<usize>,
    },
    /// Gradient checks, gate equivalence, top-k contract, sparse-vs-dense.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds for the gradient suite.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, env = "GATETS_OUT")]
        out: Option<PathBuf>,
        /// Test hook: add this to every analytic gradient.
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_gradients: f64,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// CSV/TSF file, prepared JSON, or synth:<sine|regime|intermittent>[:length].
    #[arg(long)]
    dataset: String,
    /// TOML file with [model], [train] and [data] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "GATETS_OUT", default_value = "gatets-out")]
    out: PathBuf,
    #[arg(long)]
    aggregate: Option<usize>,
    /// Train/val/test shares, e.g. 0.8,0.1,0.1.
    #[arg(long)]
    split: Option<String>,
    /// Override any config key: model.*, train.* or data.*.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_parser = PossibleValuesParser::new(["attention", "hmm", "classic"]))]
    router: Option<String>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    active: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn resolve(common: &CommonArgs, model: Option<&ModelArgs>) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = model {
        if let Some(r) = &m.router {
            cfg.model.router = r.parse()?;
        }
        if let Some(e) = m.experts {
            cfg.model.n_experts = e;
        }
        if let Some(k) = m.active {
            cfg.model.active = k;
        }
        if let Some(t) = m.context {
            cfg.model.context = t;
        }
        if let Some(h) = m.horizon {
            cfg.model.horizon = h;
        }
    }
    if let Some(a) = common.aggregate {
        cfg.data.aggregate = a;
    }
    if let Some(s) = &common.split {
        cfg.data.split = parse_split(s)?;
    }
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    for o in &common.set {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    status: &'a str,
    code_version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    dataset: Option<&'a DatasetInfo>,
    checkpoint: Option<FileDigest>,
    /// Files written next to this manifest.
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

impl FileDigest {
    fn of(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> CliResult {
        self.write(name, ckpt.to_bytes()?)
    }

    fn manifest(&mut self, m: RunManifest<'_>) -> CliResult {
        let name = format!("{}.manifest.json", m.command);
        let mut m = m;
        m.outputs = self.written.clone();
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
        self.write(&name, text + "\n")
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

fn split_arg(s: &str) -> Split {
    s.parse().expect("clap restricts the values")
}

fn load_model(path: &Path) -> CliResult<(Checkpoint, Model)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let model = Model::from_params(ckpt.model_config.clone(), &ckpt.params)?;
    Ok((ckpt, model))
}

fn checkpoint_config(ckpt: &Checkpoint, cfg: &RunConfig) -> RunConfig {
    RunConfig {
        model: ckpt.model_config.clone(),
        train: ckpt.train_config.clone(),
        data: cfg.data.clone(),
    }
}

fn eval_windows(p: &PreparedSeries, context: usize, horizon: usize) -> CliResult<WindowSets> {
    Ok(make_windows(p, context, horizon, 1)?)
}

fn cmd_prepare(common: &CommonArgs, model: &ModelArgs) -> CliResult {
    let cfg = resolve(common, Some(model))?;
    let (raw, info) = dataset::load_raw(&common.dataset, cfg.train.seed)?;
    let min = cfg.model.context + cfg.model.horizon;
    let p = gatets::data::prepare_series(&raw, cfg.data.aggregate, cfg.data.ratios(), min)?;
    let mut out = Output::new(&common.out)?;
    out.write("prepared.json", json(&p))?;
    println!(
        "prepared {}: {} points (raw {}, imputed {}, aggregation {}), train {:?} val {:?} test {:?}",
        p.name, p.values.len(), p.provenance.raw_len, p.provenance.imputed, p.provenance.aggregation,
        p.splits.train, p.splits.val, p.splits.test
    );
    out.manifest(RunManifest {
        command: "prepare",
        status: "ok",
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: &cfg,
        dataset: Some(&info),
        checkpoint: None,
        outputs: Vec::new(),
    })
}

fn cmd_train(common: &CommonArgs, model: &ModelArgs, resume: Option<&Path>, every: Option<usize>, log_steps: bool) -> CliResult {
    let mut cfg = resolve(common, Some(model))?;
    let resumed = match resume {
        Some(p) => {
            let (ckpt, _) = load_model(p)?;
            cfg = checkpoint_config(&ckpt, &cfg);
            Some(ckpt)
        }
        None => None,
    };
    if let Some(n) = every {
        cfg.train.checkpoint_every = n;
    }
    let (prepared, info) =
        dataset::load_prepared(&common.dataset, &cfg.data, cfg.train.seed, cfg.model.context + cfg.model.horizon)?;
    let sets = make_windows(&prepared, cfg.model.context, cfg.model.horizon, cfg.data.stride)?;
    let mut trainer = match resumed {
        Some(ckpt) => Trainer::resume(ckpt, &sets)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), &sets)?,
    };
    let mut out = Output::new(&common.out)?;
    out.write("prepared.json", json(&prepared))?;
    let mut observer = |ev: TrainEvent<'_>| {
        if log_steps || matches!(ev, TrainEvent::Epoch(_)) {
            println!("{}", ev.line());
        }
    };
    let mut failure = None;
    while !trainer.finished() {
        match trainer.run_epoch(&mut observer) {
            Ok(rec) => {
                let n = cfg.train.checkpoint_every;
                if n > 0 && (rec.epoch + 1) % n == 0 {
                    let c = trainer.checkpoint();
                    out.checkpoint(&format!("epoch-{:04}.ckpt", rec.epoch + 1), &c)?;
                    out.checkpoint("last.ckpt", &c)?;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    out.checkpoint("last.ckpt", &trainer.checkpoint())?;
    out.checkpoint("model.ckpt", &trainer.best_checkpoint())?;
    let history: String = trainer
        .history()
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect();
    out.write("history.jsonl", history)?;
    let status = if failure.is_some() { "diverged" } else { "ok" };
    let ckpt_digest = FileDigest::of(&out.path("model.ckpt"))?;
    out.manifest(RunManifest {
        command: "train",
        status,
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: &cfg,
        dataset: Some(&info),
        checkpoint: Some(ckpt_digest),
        outputs: Vec::new(),
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let s = trainer.state();
    println!(
        "done: {} epochs, best val loss {:.6e} at epoch {}{}",
        s.epoch,
        s.best_val.unwrap_or(f64::NAN),
        s.best_epoch.unwrap_or(0),
        if trainer.stopped_early() { " (stopped early)" } else { "" }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    common: &CommonArgs,
    checkpoint: Option<&Path>,
    naive: bool,
    context: Option<usize>,
    horizon: Option<usize>,
    split: &str,
    interval: &str,
) -> CliResult {
    let mut cfg = resolve(common, None)?;
    let loaded = checkpoint.map(load_model).transpose()?;
    if let Some((ckpt, _)) = &loaded {
        cfg = checkpoint_config(ckpt, &cfg);
    }
    let forecaster: Box<dyn Forecaster> = match (naive, loaded) {
        (true, l) => {
            let (t, h) = match (&l, context, horizon) {
                (_, Some(t), Some(h)) => (t, h),
                (Some((c, _)), _, _) => (c.model_config.context, c.model_config.horizon),
                _ => return Err(CliError::Usage("--naive needs --checkpoint or both --context and --horizon".into())),
            };
            cfg.model.context = t;
            cfg.model.horizon = h;
            Box::new(NaiveForecaster { context: t, horizon: h })
        }
        (false, Some((_, m))) => Box::new(m),
        (false, None) => unreachable!("clap requires --checkpoint without --naive"),
    };
    let (t, h) = (forecaster.context(), forecaster.horizon());
    let (prepared, info) = dataset::load_prepared(&common.dataset, &cfg.data, cfg.train.seed, t + h)?;
    let sets = eval_windows(&prepared, t, h)?;
    let kind = if interval == "stderr" { IntervalKind::Stderr } else { IntervalKind::Ci95 };
    let report = evaluate(forecaster.as_ref(), &sets, split_arg(split), kind)?;
    let stem = if naive { "naive-report" } else { "report" };
    let mut out = Output::new(&common.out)?;
    out.write(&format!("{stem}.json"), json(&report.to_json()))?;
    let text = report.to_text();
    out.write(&format!("{stem}.txt"), &text)?;
    print!("{text}");
    out.manifest(RunManifest {
        command: "evaluate",
        status: "ok",
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: &cfg,
        dataset: Some(&info),
        checkpoint: checkpoint.map(FileDigest::of).transpose()?,
        outputs: Vec::new(),
    })
}

fn cmd_forecast(common: &CommonArgs, checkpoint: &Path, end: Option<usize>) -> CliResult {
    let cfg = resolve(common, None)?;
    let (ckpt, model) = load_model(checkpoint)?;
    let cfg = checkpoint_config(&ckpt, &cfg);
    let (t, h) = (cfg.model.context, cfg.model.horizon);
    let (prepared, info) = dataset::load_prepared(&common.dataset, &cfg.data, cfg.train.seed, t + h)?;
    let len = prepared.values.len();
    let end = end.unwrap_or(len);
    if end < t || end > len {
        return Err(CliError::Usage(format!("--end must lie in [{t}, {len}], got {end}")));
    }
    let norm = prepared.normalization;
    let ctx: Vec<f64> = prepared.values[end - t..end].iter().map(|&v| norm.apply(v)).collect();
    let x = gatets::nncore::Tensor::new(&[1, t], ctx)?;
    let (y, routing) = model.predict(&x)?;
    let mut csv = String::from("step,forecast\n");
    for (i, z) in y.data().iter().enumerate() {
        csv.push_str(&format!("{},{}\n", end + i, norm.inverse(*z)));
    }
    let mut out = Output::new(&common.out)?;
    out.write("forecast.csv", &csv)?;
    print!("{csv}");
    if let Some(r) = routing {
        println!("# experts at the last context token: {:?}", r.selected_for(t - 1));
    }
    out.manifest(RunManifest {
        command: "forecast",
        status: "ok",
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: &cfg,
        dataset: Some(&info),
        checkpoint: Some(FileDigest::of(checkpoint)?),
        outputs: Vec::new(),
    })
}

fn cmd_route_trace(common: &CommonArgs, checkpoint: &Path, split: &str, from: usize, to: Option<usize>) -> CliResult {
    let cfg = resolve(common, None)?;
    let (ckpt, model) = load_model(checkpoint)?;
    let cfg = checkpoint_config(&ckpt, &cfg);
    if cfg.model.arch != Arch::Gatets {
        return Err(CliError::Usage("route-trace needs a routed (gatets) checkpoint".into()));
    }
    let (t, h) = (cfg.model.context, cfg.model.horizon);
    let (prepared, info) = dataset::load_prepared(&common.dataset, &cfg.data, cfg.train.seed, t + h)?;
    let sets = eval_windows(&prepared, t, h)?;
    let data = sets.get(split_arg(split));
    let to = to.unwrap_or(data.len());
    if from >= to || to > data.len() {
        return Err(CliError::Usage(format!(
            "window range {from}..{to} is out of bounds for the {split} split ({} windows)",
            data.len()
        )));
    }
    let idx: Vec<usize> = (from..to).collect();
    let mut rows = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let (y, routing) = model.predict(&x)?;
        let r = routing.expect("gatets models route");
        for (b, &i) in chunk.iter().enumerate() {
            let token = b * t + t - 1;
            let experts = r.selected_for(token).to_vec();
            let w = r.weights_for(token);
            rows.push(TraceRow {
                step: data.start(i) + t,
                actual: data.target_natural(i)[0],
                forecast: data.denormalize(y.data()[b * h]),
                weights: experts.iter().map(|&e| w[e]).collect(),
                experts,
            });
        }
    }
    let mut out = Output::new(&common.out)?;
    out.write("trace.csv", trace::to_csv(&rows))?;
    let title = format!("{} {split} windows {from}..{to}, router {}", prepared.name, cfg.model.router);
    out.write("trace.svg", trace::to_svg(&rows, &title))?;
    println!(
        "{} steps, {} distinct expert sets",
        rows.len(),
        trace::set_colors(&rows).len()
    );
    out.manifest(RunManifest {
        command: "route-trace",
        status: "ok",
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: &cfg,
        dataset: Some(&info),
        checkpoint: Some(FileDigest::of(checkpoint)?),
        outputs: Vec::new(),
    })
}

fn cmd_selfcheck(seed: u64, seeds: u64, out: Option<&Path>, perturb: f64) -> CliResult {
    let mut results = Vec::new();
    for s in seed..seed + seeds.max(1) {
        let mut r = selfcheck::gradient_suite(SelfCheckOptions { seed: s, perturb })?;
        for c in &mut r {
            c.name = format!("{} (seed {s})", c.name);
        }
        results.extend(r);
    }
    results.push(selfcheck::gate_equivalence(seed, 100)?);
    results.push(selfcheck::topk_contract(seed, 1000)?);
    results.push(selfcheck::sparse_dense(seed, 10)?);
    for r in &results {
        println!(
            "{} {} value={:.3e} tolerance={:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.tolerance
        );
    }
    if let Some(dir) = out {
        let mut o = Output::new(dir)?;
        o.write("selfcheck.json", json(&results))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("selfcheck: {failed} of {} checks failed", results.len())));
    }
    println!("selfcheck: all {} checks passed", results.len());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Prepare { common, model } => cmd_prepare(&common, &model),
        Command::Train {
            common,
            model,
            resume,
            checkpoint_every,
            log_steps,
        } => cmd_train(&common, &model, resume.as_deref(), checkpoint_every, log_steps),
        Command::Evaluate {
            common,
            checkpoint,
            naive,
            context,
            horizon,
            eval_split,
            interval,
        } => cmd_evaluate(&common, checkpoint.as_deref(), naive, context, horizon, &eval_split, &interval),
        Command::Forecast { common, checkpoint, end } => cmd_forecast(&common, &checkpoint, end),
        Command::RouteTrace {
            common,
            checkpoint,
            eval_split,
            from,
            to,
        } => cmd_route_trace(&common, &checkpoint, &eval_split, from, to),
        Command::Selfcheck {
            seed,
            seeds,
            out,
            perturb_gradients,
        } => cmd_selfcheck(seed, seeds, out.as_deref(), perturb_gradients),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
