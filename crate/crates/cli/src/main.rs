use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use biotouch::authsvc::{calibrate_threshold, serve, CalibrationTarget, ServiceConfig};
use biotouch::bank::FeatureBank;
use biotouch::capture::{load_dataset, write_dataset, Dataset, DEV_USERS};
use biotouch::eval::{
    password_table, pin_distribution, run_digit_table, search_passwords, select_all_digits, select_functions,
    selection_histogram, BlstmScorer, DigitSubsets, DtwScorer, EvalData, EvalReport, PasswordPools, Scorer,
    SearchMode, SystemKind, MAX_PASSWORD_LEN,
};
use biotouch::features::{sample_features, FunctionSubset, NUM_FUNCTIONS};
use biotouch::rnn::{build_pairs, train, NetworkParams, TrainConfig};
use biotouch::synth::{generate, SynthConfig};
use clap::{Args, Parser, Subcommand};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Handwritten touchscreen password biometrics.
#[derive(Parser)]
#[command(name = "biotouch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-digit EER table, optionally with the password-length table.
    Evaluate(EvaluateArgs),
    /// Best password multiset of one length.
    Search(SearchArgs),
    /// Floating search for per-digit function subsets on the development split.
    SelectFunctions(SelectArgs),
    /// Train the Siamese BLSTM on the development split.
    Train(TrainArgs),
    /// EER distribution over every password of one length.
    PinDistribution(PinArgs),
    /// Acceptance threshold from an evaluation report.
    Calibrate(CalibrateArgs),
    /// Write a synthetic corpus in the on-disk dataset layout.
    Synth(SynthArgs),
    /// Dump the time-function matrix of one sample file as CSV.
    Features(FeaturesArgs),
    /// Run the authentication service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (one subdirectory per user).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use this many synthetic writers instead of a dataset directory.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Seed for the synthetic corpus.
    #[arg(long, default_value_t = 1)]
    synth_seed: u64,
    /// Users in the development split; the rest form the evaluation split.
    #[arg(long, default_value_t = DEV_USERS)]
    dev_users: usize,
}

impl DataArgs {
    fn dataset(&self) -> Result<Dataset> {
        match (&self.data, self.synthetic) {
            (Some(dir), _) => {
                let report = load_dataset(dir)?;
                for (path, why) in &report.skipped {
                    tracing::warn!("skipped {}: {why}", path.display());
                }
                Ok(report.dataset)
            }
            (None, Some(n)) => Ok(generate(&SynthConfig::new(n, self.synth_seed))),
            (None, None) => Err("either --data or --synthetic is required".into()),
        }
    }

    fn split(&self) -> Result<(EvalData, EvalData)> {
        let ds = self.dataset()?;
        let users = ds.users().len();
        if self.dev_users >= users {
            return Err(format!("--dev-users {} leaves no evaluation users out of {users}", self.dev_users).into());
        }
        let split = ds.split(self.dev_users);
        Ok((EvalData::new(split.development), EvalData::new(split.evaluation)))
    }
}

#[derive(Args)]
struct SystemArgs {
    #[arg(long, default_value = "dtw-baseline")]
    system: SystemKind,
    /// Per-digit subsets from `select-functions`; without it `dtw-adapted`
    /// runs the selection on the development split first.
    #[arg(long)]
    subsets: Option<PathBuf>,
    /// Network checkpoint, required by `blstm`.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Enrolment size used when selecting functions on the fly.
    #[arg(long, default_value_t = 1)]
    select_enrol: usize,
    #[arg(long, default_value_t = NUM_FUNCTIONS)]
    max_size: usize,
}

enum AnyScorer {
    Dtw(DtwScorer, Option<DigitSubsets>),
    Blstm(BlstmScorer),
}

impl AnyScorer {
    fn as_dyn(&self) -> &dyn Scorer {
        match self {
            Self::Dtw(s, _) => s,
            Self::Blstm(s) => s,
        }
    }

    fn subsets(&self) -> Option<Vec<FunctionSubset>> {
        match self {
            Self::Dtw(s, Some(_)) => Some(s.subsets.to_vec()),
            _ => None,
        }
    }
}

impl SystemArgs {
    fn scorer(&self, dev: &EvalData) -> Result<AnyScorer> {
        Ok(match self.system {
            SystemKind::DtwBaseline => AnyScorer::Dtw(DtwScorer::baseline(), None),
            SystemKind::DtwAdapted => {
                let subsets = match &self.subsets {
                    Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                    None => {
                        tracing::info!("selecting functions on {} development users", dev.dataset.users().len());
                        select_all_digits(dev, self.select_enrol, self.max_size)?.0
                    }
                };
                AnyScorer::Dtw(DtwScorer::adapted(&subsets), Some(subsets))
            }
            SystemKind::Blstm => {
                let path = self.network.as_deref().ok_or("--network is required for blstm")?;
                AnyScorer::Blstm(BlstmScorer { params: NetworkParams::load(path)? })
            }
        })
    }
}

#[derive(Clone)]
struct DigitList(Vec<u8>);

fn parse_digits(s: &str) -> std::result::Result<DigitList, String> {
    if s == "all" {
        return Ok(DigitList((0..10).collect()));
    }
    s.split(',')
        .map(|d| match d.trim().parse::<u8>() {
            Ok(v) if v < 10 => Ok(v),
            _ => Err(format!("bad digit {d:?}")),
        })
        .collect::<std::result::Result<_, _>>()
        .map(DigitList)
}

fn parse_band(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    system: SystemArgs,
    /// Enrolment samples per digit (1 to 4).
    #[arg(long, default_value_t = 1)]
    enrol: usize,
    /// `all` or a comma-separated list.
    #[arg(long, default_value = "all", value_parser = parse_digits)]
    digits: DigitList,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also search the best password for lengths 1..=L at enrolment sizes 1..=4.
    #[arg(long)]
    passwords: Option<usize>,
    /// Also store the EER of every multiset of this length (for EER-band policies).
    #[arg(long)]
    multisets: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, default_value_t = 3)]
    enrol: usize,
    #[arg(long)]
    length: usize,
    /// Defaults to exhaustive below six digits and sffs otherwise.
    #[arg(long)]
    mode: Option<SearchMode>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// A single digit, or all of them when omitted.
    #[arg(long)]
    digit: Option<u8>,
    #[arg(long, default_value_t = 1)]
    enrol: usize,
    #[arg(long, default_value_t = NUM_FUNCTIONS)]
    max_size: usize,
    /// Subsets file readable by `--subsets`.
    #[arg(long, default_value = "subsets.json")]
    out: PathBuf,
    /// Full search traces.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "network.json")]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct PinArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, default_value_t = 3)]
    enrol: usize,
    #[arg(long, default_value_t = 4)]
    length: usize,
    /// Count passwords with EER inside `lo,hi` (percent).
    #[arg(long, value_parser = parse_band)]
    band: Option<(f64, f64)>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    report: PathBuf,
    /// `eer` or `far<=x` with x a fraction.
    #[arg(long, default_value = "eer")]
    target: CalibrationTarget,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    writers: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Sample file named `<user>_<digit>_s<session>_r<rep>.txt`.
    sample: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// TOML config; `BTP_*` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured bind address.
    #[arg(long)]
    bind: Option<String>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (dev, eval) = a.data.split()?;
    let scorer = a.system.scorer(&dev)?;
    let mut report = run_digit_table(&eval, a.system.system, scorer.as_dyn(), a.enrol, &a.digits.0)?;
    report.subsets = scorer.subsets();
    if let Some(max_len) = a.passwords {
        if !(1..=MAX_PASSWORD_LEN).contains(&max_len) {
            return Err(format!("--passwords must be in 1..={MAX_PASSWORD_LEN}").into());
        }
        let pools = (1..=4)
            .map(|n| PasswordPools::build(&eval, scorer.as_dyn(), n))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        report.password_results = Some(password_table(&pools, &(1..=max_len).collect::<Vec<_>>())?);
    }
    if let Some(len) = a.multisets {
        let pools = PasswordPools::build(&eval, scorer.as_dyn(), a.enrol)?;
        report.multiset_eers = Some(pin_distribution(&pools, len)?.multisets);
    }
    write_json(&a.out, &report)?;
    report.write_digit_csv(fs::File::create(a.out.with_extension("digits.csv"))?)?;
    if report.password_results.is_some() {
        report.write_password_csv(fs::File::create(a.out.with_extension("passwords.csv"))?)?;
    }
    report.write_digit_csv(io::stdout().lock())?;
    println!("mean EER {:.2}%", report.mean_eer());
    Ok(())
}

fn search(a: &SearchArgs) -> Result<()> {
    let (dev, eval) = a.data.split()?;
    let scorer = a.system.scorer(&dev)?;
    let pools = PasswordPools::build(&eval, scorer.as_dyn(), a.enrol)?;
    let mode = a.mode.unwrap_or(if a.length < biotouch::eval::EXHAUSTIVE_LIMIT {
        SearchMode::Exhaustive
    } else {
        SearchMode::Sffs
    });
    print_json(&search_passwords(&pools, a.length, mode)?)
}

fn select(a: &SelectArgs) -> Result<()> {
    let (dev, _) = a.data.split()?;
    let (subsets, traces) = match a.digit {
        Some(d) => {
            let trace = select_functions(&dev, d, a.enrol, a.max_size)?;
            let mut s = DigitSubsets::default();
            s.0.insert(d, FunctionSubset::new(&trace.best_subset)?);
            (s, vec![trace])
        }
        None => select_all_digits(&dev, a.enrol, a.max_size)?,
    };
    write_json(&a.out, &subsets)?;
    if let Some(p) = &a.traces {
        write_json(p, &traces)?;
    }
    for (d, t) in subsets.0.keys().zip(&traces) {
        println!("digit {d}: functions {:?}, dev EER {:.2}%", t.best_subset, t.best_objective);
    }
    if a.digit.is_none() {
        println!("selection counts per function: {:?}", selection_histogram(&subsets));
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let (dev, _) = a.data.split()?;
    let bank = FeatureBank::build(&dev.dataset);
    let pairs = build_pairs(&dev.dataset, &bank, a.seed)?;
    let mut cfg = TrainConfig { seed: a.seed, ..TrainConfig::default() };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    tracing::info!("training on {} pairs", pairs.pairs.len());
    let (params, report) = train(&NetworkParams::init(a.seed), &pairs, &cfg)?;
    params.save(&a.out)?;
    if let Some(p) = &a.loss_csv {
        report.write_csv(fs::File::create(p)?)?;
    }
    println!(
        "{} epochs, best epoch {:?}, final loss {:.4}",
        report.loss_curve.len(),
        report.best_epoch,
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn pin(a: &PinArgs) -> Result<()> {
    let (dev, eval) = a.data.split()?;
    let scorer = a.system.scorer(&dev)?;
    let pools = PasswordPools::build(&eval, scorer.as_dyn(), a.enrol)?;
    let dist = pin_distribution(&pools, a.length)?;
    if let Some(p) = &a.out {
        write_json(p, &dist)?;
    }
    println!(
        "min {:.2} q1 {:.2} median {:.2} q3 {:.2} max {:.2} whiskers [{:.2}, {:.2}] outliers {}",
        dist.min,
        dist.q1,
        dist.median,
        dist.q3,
        dist.max,
        dist.whisker_low,
        dist.whisker_high,
        dist.outliers.len()
    );
    if let Some((lo, hi)) = a.band {
        let (multisets, passwords) = dist.count_in_band(lo, hi);
        println!("EER in [{lo}, {hi}]: {multisets} multisets, {passwords} passwords");
    }
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&a.report)?)?;
    println!("{}", calibrate_threshold(&report, a.target)?);
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let ds = generate(&SynthConfig::new(a.writers, a.seed));
    write_dataset(&ds, &a.out)?;
    println!("{} samples from {} writers in {}", ds.len(), a.writers, a.out.display());
    Ok(())
}

fn features(a: &FeaturesArgs) -> Result<()> {
    let name = a.sample.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let key = biotouch::capture::SampleKey::from_file_name(name)
        .ok_or("sample file name must look like <user>_<digit>_s<session>_r<rep>.txt")?;
    let sample = biotouch::capture::load_sample(&fs::read(&a.sample)?, key)?;
    let m = sample_features(&sample)?;
    match &a.out {
        Some(p) => m.write_csv(fs::File::create(p)?)?,
        None => m.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::resolve(a.config.as_deref())?;
    if let Some(b) = &a.bind {
        cfg.bind = b.clone();
    }
    let addr = cfg.bind.parse()?;
    let svc = Arc::new(cfg.build_service()?);
    tracing::info!(
        "serving {} templates from {} on {addr}, threshold {}",
        svc.scorer_kind(),
        cfg.data_dir.display(),
        svc.default_threshold()
    );
    tokio::runtime::Runtime::new()?.block_on(serve(svc, addr))?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Search(a) => search(a),
        Command::SelectFunctions(a) => select(a),
        Command::Train(a) => train_cmd(a),
        Command::PinDistribution(a) => pin(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Synth(a) => synth(a),
        Command::Features(a) => features(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
