use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dense_flow::baselines::FitRange;
use dense_flow::config::{RunConfig, RunProfile};
use dense_flow::evaluation::{
    evaluate_checkpoint, evaluate_predictor, predict_dense, run_ablation_suite, AblationSuite,
    EvalReport, FlowPredictor, MeanPerSitePredictor, OraclePredictor, PreviousFlowPredictor,
};
use dense_flow::location::{load_locations, location_dir, prepare_split, Location, Split};
use dense_flow::model::load_checkpoint;
use dense_flow::raster::read_json;
use dense_flow::sampler::centered_origin;
use dense_flow::synth::{generate_location, SynthParams};
use dense_flow::training::{train, CheckpointMeta};
use dense_flow::{Error, Result};

/// Dense water-flow-intensity prediction.
#[derive(Parser)]
#[command(name = "dense-flow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and a split file.
    Synth(SynthArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline on a split.
    Eval(EvalArgs),
    /// Retrain and score a suite of variants.
    Ablate(AblateArgs),
    /// Export a dense flow map for one window and day.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    locations: usize,
    #[arg(long, default_value_t = 400)]
    days: usize,
    /// History length the dataset must support.
    #[arg(long = "T", default_value_t = 20)]
    history: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    gauges: usize,
    /// Locations assigned to validation (default: a quarter, at least one when possible).
    #[arg(long)]
    val: Option<usize>,
    #[arg(long, default_value_t = 0.35)]
    rain_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// Partial JSON config applied over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `train.lr=1e-4` or `batch_size=16`, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for sampling and initialization.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let profile = match self.profile {
            ProfileArg::Paper => RunProfile::Paper,
            ProfileArg::Desk => RunProfile::Desk,
        };
        let mut cfg = profile.config();
        if let Some(path) = &self.config {
            cfg = cfg.merge_file(path)?;
        }
        cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.model.init_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Split file; defaults to `<data>/split.json`.
    #[arg(long)]
    split: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(Vec<Location>, Vec<Location>)> {
        let path = self
            .split
            .clone()
            .unwrap_or_else(|| self.data.join("split.json"));
        let split = Split::load(&path)?;
        Ok((
            load_locations(&self.data, &split.train)?,
            load_locations(&self.data, &split.val)?,
        ))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Write config.json and stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    MeanPerSite,
    PreviousFlow,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitPart {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(
        long,
        conflicts_with = "baseline",
        required_unless_present = "baseline"
    )]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitPart::Val)]
    on: SplitPart,
    /// Mean-per-site fit days as `start:end`; all days by default.
    #[arg(long)]
    fit_range: Option<String>,
    /// First evaluated day for baselines; defaults to the profile history length.
    #[arg(long)]
    min_day: Option<usize>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long, default_value = "report")]
    stem: String,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON suite: `{"variants": [...], "seeds": [...]}`.
    #[arg(long)]
    suite: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    location: String,
    #[arg(long, default_value_t = 0)]
    gauge: usize,
    /// Window origin as `row,col`; centred on the gauge by default.
    #[arg(long)]
    origin: Option<String>,
    #[arg(long)]
    day: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "flow_map")]
    stem: String,
}

fn parse_pair(s: &str, sep: char, what: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("{what} must look like a{sep}b, got {s:?}"));
    let (a, b) = s.split_once(sep).ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn dir_is_nonempty(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.locations == 0 {
        return Err(Error::InvalidArgument(
            "--locations must be positive".into(),
        ));
    }
    if dir_is_nonempty(&a.out) {
        if !a.force {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        fs::remove_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
    }
    let params: Vec<SynthParams> = (0..a.locations)
        .map(|i| SynthParams {
            name: format!("synth_{i:02}"),
            seed: a.seed.wrapping_mul(1_000).wrapping_add(i as u64),
            height: a.height,
            width: a.width,
            n_days: a.days,
            n_gauges: a.gauges,
            history: a.history,
            rain_prob: a.rain_prob,
            missing_fraction: a.missing_fraction,
            ..SynthParams::default()
        })
        .collect();
    for p in &params {
        p.validate()?;
    }
    let n_val = a.val.unwrap_or(if a.locations > 1 {
        a.locations.div_ceil(4)
    } else {
        0
    });
    if n_val >= a.locations {
        return Err(Error::InvalidArgument(
            "--val must leave at least one training location".into(),
        ));
    }
    let mut names = Vec::new();
    for p in &params {
        let synth = generate_location(p)?;
        synth.location.save(&location_dir(&a.out, &p.name))?;
        names.push(p.name.clone());
    }
    let val = names.split_off(names.len() - n_val);
    let split = Split { train: names, val };
    split.save(&a.out.join("split.json"))?;
    println!(
        "wrote {} locations ({} train, {} val) to {}",
        a.locations,
        split.train.len(),
        split.val.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    if a.dry_run {
        fs::create_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
        let path = a.out.join("config.json");
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
        println!("dry run: config written to {}", a.out.display());
        return Ok(());
    }
    let (train_locs, val_locs) = a.data.load()?;
    let (norm, tr, va) = prepare_split(&train_locs, &val_locs, cfg.data.maxima_scope)?;
    let outcome = train(&tr, &va, &norm, &cfg, Some(&a.out))?;
    let best = outcome
        .best_rmse
        .map_or("none".to_string(), |r| format!("{r:.6}"));
    println!(
        "run {} finished {} steps; best rmse {best} at step {}",
        outcome.run_id, cfg.train.total_batches, outcome.best_step
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (train_locs, val_locs) = a.data.load()?;
    let report: EvalReport = if let Some(path) = &a.checkpoint {
        let ckpt = load_checkpoint(path)?;
        let locs = match a.on {
            SplitPart::Train => &train_locs,
            SplitPart::Val => &val_locs,
        };
        evaluate_checkpoint(&ckpt, locs, "model")?
    } else {
        let profile = match a.profile {
            ProfileArg::Paper => RunProfile::Paper,
            ProfileArg::Desk => RunProfile::Desk,
        };
        let cfg = profile.config();
        let (_, tr, va) = prepare_split(&train_locs, &val_locs, cfg.data.maxima_scope)?;
        let locs = match a.on {
            SplitPart::Train => tr,
            SplitPart::Val => va,
        };
        let min_day = a.min_day.unwrap_or_else(|| cfg.eval_min_day());
        let fit = match &a.fit_range {
            Some(s) => {
                let (start, end) = parse_pair(s, ':', "--fit-range")?;
                FitRange::Days { start, end }
            }
            None => FitRange::AllDays,
        };
        let predictor: Box<dyn FlowPredictor> = match a.baseline.expect("clap enforces one source")
        {
            BaselineArg::MeanPerSite => Box::new(MeanPerSitePredictor::fit(&locs, fit)?),
            BaselineArg::PreviousFlow => Box::new(PreviousFlowPredictor),
            BaselineArg::Oracle => Box::new(OraclePredictor),
        };
        let name = predictor.name().to_string();
        evaluate_predictor(predictor.as_ref(), &locs, min_day, &name)?
    };
    report.save(&a.out, &a.stem)?;
    println!(
        "{}: aggregate rmse {:.6} over {} days",
        report.variant, report.aggregate_rmse, report.n_days
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let suite: AblationSuite = read_json(&a.suite)?;
    suite.validate()?;
    let (train_locs, val_locs) = a.data.load()?;
    let result = run_ablation_suite(&base, &suite, &train_locs, &val_locs, Some(&a.out))?;
    for v in &result.variants {
        println!("{}: median rmse {:.6}", v.variant, v.median_rmse);
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let meta = CheckpointMeta::from_checkpoint(&ckpt)?;
    let loc = Location::load(&location_dir(&a.data, &a.location))?;
    let origin = match &a.origin {
        Some(s) => parse_pair(s, ',', "--origin")?,
        None => {
            let g = loc
                .gauges
                .get(a.gauge)
                .ok_or_else(|| Error::OutOfBounds(format!("gauge {} of {}", a.gauge, loc.name)))?;
            let s = &meta.config.sampler;
            let full = (loc.stack.height(), loc.stack.width());
            if full.0 < s.h || full.1 < s.w {
                return Err(Error::OutOfBounds(format!(
                    "{}x{} window does not fit the grid of {}",
                    s.h, s.w, loc.name
                )));
            }
            centered_origin(g.pixel, s.h, s.w, full)
        }
    };
    let map = predict_dense(&ckpt, &loc, a.gauge, origin, a.day, &a.out, &a.stem)?;
    let (h, w) = map.dim();
    println!(
        "wrote {h}x{w} flow map at origin {},{} for day {} to {}",
        origin.0,
        origin.1,
        a.day,
        a.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
                || matches!(
                    e.kind(),
                    ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
                )
            {
                e.exit();
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
