use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use arbiter_puf::eval::{calibrate_noise_with, measure_ber, substream, CalibrationConfig, ConditionGrid, EvalConfig, EvalReport};
use arbiter_puf::filter::{generate_reliable, loss_to_delta, BatchSidecar};
use arbiter_puf::model::{collect_crps, train, DelayModel, TrainConfig};
use arbiter_puf::synth::{
    build_synthetic_apuf, default_assignment, default_conditions, generate_ro_fixture, parse_ro_dataset, FixtureParams,
    StageAssignment,
};
use arbiter_puf::{random_challenge, ApufInstance, Challenge, Error};

#[derive(Parser, Debug)]
#[command(name = "apuf", version, about = "Arbiter PUF reliable-challenge toolkit")]
struct Cli {
    /// Master seed; required by every subcommand that draws random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with default settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (or directory for `eval`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an instance from RO frequency measurements.
    Synth(SynthArgs),
    /// Collect nominal CRPs, train and normalize a delay model.
    Enroll(EnrollArgs),
    /// Select challenges whose predicted |t_dif| exceeds a threshold.
    Filter(FilterArgs),
    /// Run the reliability evaluation of an instance/model pair.
    Eval(EvalArgs),
    /// Merge evaluation reports into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// RO measurement CSV.
    #[arg(long, conflicts_with = "fixture")]
    ro_csv: Option<PathBuf>,
    /// Use generated RO measurements instead of a CSV.
    #[arg(long)]
    fixture: bool,
    /// Number of stages
    #[arg(long)]
    k: Option<usize>,
    /// Number of ROs in the generated fixture.
    #[arg(long)]
    ro_count: Option<usize>,
    /// JSON list of [t13, t24, t14, t23] RO indices per stage.
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// Recalibrate path noise to this nominal BER.
    #[arg(long)]
    calibrate: Option<f64>,
    /// Accepted distance from the calibration target
    #[arg(long)]
    calibration_tolerance: Option<f64>,
    /// Also write the RO measurements used.
    #[arg(long)]
    save_fixture: Option<PathBuf>,
    /// Also write the stage assignment used.
    #[arg(long)]
    save_assignment: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnrollArgs {
    /// Instance JSON written by `synth`
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Number of training CRPs
    #[arg(long)]
    n_crps: Option<usize>,
    /// Evaluations per CRP; the majority is the training label
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Model JSON written by `enroll`
    #[arg(long)]
    model: Option<PathBuf>,
    /// Threshold on normalized |t_dif|
    #[arg(long, conflicts_with = "target_loss")]
    delta_t: Option<f64>,
    /// Resolve Δt as the quantile of |t_dif| discarding this fraction.
    #[arg(long)]
    target_loss: Option<f64>,
    /// Number of challenges to select
    #[arg(long)]
    count: Option<usize>,
    /// Candidates to draw before giving up
    #[arg(long)]
    max_candidates: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum GridChoice {
    /// ±20 % voltage, 25–65 °C.
    Wide,
    /// ±10 % voltage, 25–65 °C.
    Narrow,
    NominalOnly,
}

impl GridChoice {
    fn grid(self) -> ConditionGrid {
        match self {
            Self::Wide => ConditionGrid::wide(),
            Self::Narrow => ConditionGrid::narrow(),
            Self::NominalOnly => ConditionGrid::nominal_only(),
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Instance JSON written by `synth`
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Model JSON written by `enroll`
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    conditions: Option<GridChoice>,
    /// Comma-separated Δt values in normalized units.
    #[arg(long, value_delimiter = ',', conflicts_with = "target_losses")]
    deltas: Option<Vec<f64>>,
    /// Comma-separated CRP-loss targets, each resolved to a Δt.
    #[arg(long, value_delimiter = ',')]
    target_losses: Option<Vec<f64>>,
    /// Random challenges for the unfiltered BER
    #[arg(long)]
    n_challenges: Option<usize>,
    /// Candidate pool shared by every Δt of the sweep
    #[arg(long)]
    n_candidates: Option<usize>,
    /// Evaluations per challenge and condition
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report JSON files written by `eval`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthSettings {
    k: usize,
    ro_csv: Option<PathBuf>,
    fixture: bool,
    ro_count: usize,
    fixture_params: FixtureParams,
    assignment: Option<PathBuf>,
    calibrate: Option<f64>,
    calibration_tolerance: f64,
    calibration: CalibrationConfig,
    /// Sample used for the printed nominal BER.
    ber_challenges: usize,
    ber_repeats: usize,
    save_fixture: Option<PathBuf>,
    save_assignment: Option<PathBuf>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            k: 64,
            ro_csv: None,
            fixture: false,
            ro_count: 256,
            fixture_params: FixtureParams::default(),
            assignment: None,
            calibrate: None,
            calibration_tolerance: 0.001,
            calibration: CalibrationConfig::default(),
            ber_challenges: 10_000,
            ber_repeats: 11,
            save_fixture: None,
            save_assignment: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EnrollSettings {
    instance: Option<PathBuf>,
    n_crps: usize,
    repeats: usize,
    normalize_samples: usize,
    train: TrainConfig,
}

impl Default for EnrollSettings {
    fn default() -> Self {
        Self {
            instance: None,
            n_crps: 10_000,
            repeats: 11,
            normalize_samples: 100_000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FilterSettings {
    model: Option<PathBuf>,
    delta_t: Option<f64>,
    target_loss: Option<f64>,
    count: usize,
    max_candidates: Option<u64>,
    loss_samples: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            model: None,
            delta_t: None,
            target_loss: None,
            count: 1000,
            max_candidates: None,
            loss_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    instance: Option<PathBuf>,
    model: Option<PathBuf>,
    conditions: GridChoice,
    deltas: Vec<f64>,
    target_losses: Option<Vec<f64>>,
    sampling: EvalConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            instance: None,
            model: None,
            conditions: GridChoice::Wide,
            deltas: (0..=8).map(|i| f64::from(i) * 0.25).collect(),
            target_losses: None,
            sampling: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    threads: Option<usize>,
    synth: SynthSettings,
    enroll: EnrollSettings,
    filter: FilterSettings,
    eval: EvalSettings,
}

/// Effective settings echoed next to every output.
#[derive(Serialize)]
struct RunRecord<'a, S: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: Option<u64>,
    settings: &'a S,
}

#[derive(Serialize)]
struct FilterSidecar<S> {
    batch: BatchSidecar,
    run: S,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for input and schema problems, 3 for exhausted budgets and failed
/// calibration, 4 for internal invariant violations.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::PartialBatch { .. } | Error::Calibration(_)) => 3,
        Some(Error::Invariant(_)) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(Error::from)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ConfigFile::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.seed.or(file.seed);
    let out = cli.out;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, file.synth, seed, out),
        Command::Enroll(args) => cmd_enroll(args, file.enroll, seed, out),
        Command::Filter(args) => cmd_filter(args, file.filter, seed, out),
        Command::Eval(args) => cmd_eval(args, file.eval, seed, out),
        Command::Report(args) => cmd_report(args, out),
    }
}

fn require_seed(seed: Option<u64>, subcommand: &str) -> anyhow::Result<u64> {
    seed.ok_or_else(|| anyhow!(Error::InvalidArgument(format!("`{subcommand}` needs --seed"))))
}

fn require_path(path: Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    path.ok_or_else(|| anyhow!(Error::InvalidArgument(format!("missing --{flag}"))))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

fn write_run_record<S: Serialize>(path: &Path, subcommand: &str, seed: Option<u64>, settings: &S) -> anyhow::Result<()> {
    let record = RunRecord {
        tool: "apuf",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seed,
        settings,
    };
    write_text(path, &(serde_json::to_string_pretty(&record)? + "\n"))
}

fn load_instance(path: &Path) -> anyhow::Result<ApufInstance> {
    ApufInstance::from_json(&read_text(path)?).with_context(|| format!("loading instance {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<DelayModel> {
    DelayModel::from_json(&read_text(path)?).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_synth(args: SynthArgs, mut s: SynthSettings, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(path) = args.ro_csv {
        s.ro_csv = Some(path);
        s.fixture = false;
    }
    if args.fixture {
        s.fixture = true;
        s.ro_csv = None;
    }
    s.k = args.k.unwrap_or(s.k);
    s.ro_count = args.ro_count.unwrap_or(s.ro_count);
    s.assignment = args.assignment.or(s.assignment);
    s.calibrate = args.calibrate.or(s.calibrate);
    s.calibration_tolerance = args.calibration_tolerance.unwrap_or(s.calibration_tolerance);
    s.save_fixture = args.save_fixture.or(s.save_fixture);
    s.save_assignment = args.save_assignment.or(s.save_assignment);
    let seed = require_seed(seed, "synth")?;
    let out = out.unwrap_or_else(|| PathBuf::from("instance.json"));

    let set = match (&s.ro_csv, s.fixture) {
        (Some(path), _) => parse_ro_dataset(path).with_context(|| format!("reading RO dataset {}", path.display()))?,
        (None, true) => generate_ro_fixture(s.ro_count, &default_conditions(), &s.fixture_params, &mut substream(seed, 0))?,
        (None, false) => bail!(Error::InvalidArgument("synth needs --ro-csv or --fixture".into())),
    };
    let assignment = match &s.assignment {
        Some(path) => serde_json::from_str::<StageAssignment>(&read_text(path)?)
            .map_err(Error::from)
            .with_context(|| format!("parsing assignment {}", path.display()))?,
        None => default_assignment(set.ro_count(), s.k, &mut substream(seed, 1))?,
    };
    let mut apuf = build_synthetic_apuf(&set, s.k, &assignment)?;
    if let Some(target) = s.calibrate {
        apuf = calibrate_noise_with(&apuf, target, s.calibration_tolerance, &s.calibration, &mut substream(seed, 2))?;
    }

    let mut rng = substream(seed, 3);
    let challenges: Vec<Challenge> = (0..s.ber_challenges).map(|_| random_challenge(apuf.k(), &mut rng)).collect();
    let nominal = apuf.nominal();
    let ber = measure_ber(&apuf, &challenges, nominal, nominal, s.ber_repeats, &mut rng)?;

    write_text(&out, &apuf.to_json()?)?;
    if let Some(path) = &s.save_fixture {
        ensure_parent(path)?;
        set.save_csv(path).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &s.save_assignment {
        write_text(path, &(serde_json::to_string(&assignment)? + "\n"))?;
    }
    write_run_record(&out.with_extension("run.json"), "synth", Some(seed), &s)?;
    println!("stages: {}", apuf.k());
    println!("noise_sigma: {:.6} ns", apuf.noise_sigma());
    println!(
        "nominal BER: {:.3}% ({} / {} trials)",
        100.0 * ber.rate(),
        ber.errors,
        ber.trials
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_enroll(args: EnrollArgs, mut s: EnrollSettings, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    s.instance = args.instance.or(s.instance);
    s.n_crps = args.n_crps.unwrap_or(s.n_crps);
    s.repeats = args.repeats.unwrap_or(s.repeats);
    s.train.learning_rate = args.learning_rate.unwrap_or(s.train.learning_rate);
    s.train.max_epochs = args.max_epochs.unwrap_or(s.train.max_epochs);
    let seed = require_seed(seed, "enroll")?;
    let instance = require_path(s.instance.clone(), "instance")?;
    let out = out.unwrap_or_else(|| PathBuf::from("model.json"));

    let apuf = load_instance(&instance)?;
    let data = collect_crps(&apuf, s.n_crps, apuf.nominal(), s.repeats, &mut substream(seed, 0))?;
    let started = Instant::now();
    let model = train(&data, &s.train)?;
    let elapsed = started.elapsed().as_secs_f64();
    let model = model.normalize(s.normalize_samples, &mut substream(seed, 1))?;

    write_text(&out, &model.to_json()?)?;
    write_run_record(&out.with_extension("run.json"), "enroll", Some(seed), &s)?;
    let meta = &model.metadata;
    match meta.heldout_accuracy {
        Some(acc) => println!("heldout accuracy: {acc:.4} ({} heldout CRPs)", meta.n_heldout),
        None => println!("training accuracy: {:.4} (no heldout CRPs)", meta.train_accuracy),
    }
    println!("training time: {elapsed:.2} s ({} epochs)", meta.iterations);
    println!("model fingerprint: {}", model.fingerprint());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_filter(args: FilterArgs, mut s: FilterSettings, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    s.model = args.model.or(s.model);
    if args.delta_t.is_some() || args.target_loss.is_some() {
        s.delta_t = args.delta_t;
        s.target_loss = args.target_loss;
    }
    s.count = args.count.unwrap_or(s.count);
    s.max_candidates = args.max_candidates.or(s.max_candidates);
    let seed = require_seed(seed, "filter")?;
    let model_path = require_path(s.model.clone(), "model")?;
    let out = out.unwrap_or_else(|| PathBuf::from("batch.csv"));

    let model = load_model(&model_path)?;
    let delta_t = match (s.delta_t, s.target_loss) {
        (Some(d), None) => d,
        (None, Some(q)) => loss_to_delta(&model, q, s.loss_samples, &mut substream(seed, 0))?,
        _ => bail!(Error::InvalidArgument("give exactly one of --delta-t or --target-loss".into())),
    };
    let result = generate_reliable(&model, delta_t, s.count, &mut substream(seed, 1), s.max_candidates);
    let (batch, shortfall) = match result {
        Ok(batch) => (batch, None),
        Err(Error::PartialBatch { requested, batch }) => (*batch, Some(requested)),
        Err(e) => return Err(e.into()),
    };

    ensure_parent(&out)?;
    let file = File::create(&out).map_err(Error::from).with_context(|| format!("writing {}", out.display()))?;
    batch.write_csv(BufWriter::new(file))?;
    let sidecar = FilterSidecar {
        batch: batch.sidecar(Some(seed)),
        run: RunRecord {
            tool: "apuf",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "filter",
            seed: Some(seed),
            settings: &s,
        },
    };
    write_text(&out.with_extension("json"), &(serde_json::to_string_pretty(&sidecar)? + "\n"))?;
    println!(
        "selected {} challenges at delta_t = {delta_t:.6} ({} candidates examined)",
        batch.len(),
        batch.candidates_examined
    );
    println!("wrote {}", out.display());
    match shortfall {
        Some(requested) => Err(Error::PartialBatch {
            requested,
            batch: Box::new(batch),
        }
        .into()),
        None => Ok(()),
    }
}

fn cmd_eval(args: EvalArgs, mut s: EvalSettings, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    s.instance = args.instance.or(s.instance);
    s.model = args.model.or(s.model);
    s.conditions = args.conditions.unwrap_or(s.conditions);
    if let Some(d) = args.deltas {
        s.deltas = d;
        s.target_losses = None;
    }
    if let Some(q) = args.target_losses {
        s.target_losses = Some(q);
    }
    s.sampling.n_challenges = args.n_challenges.unwrap_or(s.sampling.n_challenges);
    s.sampling.n_candidates = args.n_candidates.unwrap_or(s.sampling.n_candidates);
    s.sampling.repeats = args.repeats.unwrap_or(s.sampling.repeats);
    let seed = require_seed(seed, "eval")?;
    let instance = require_path(s.instance.clone(), "instance")?;
    let model_path = require_path(s.model.clone(), "model")?;
    let out = out.unwrap_or_else(|| PathBuf::from("report"));

    let apuf = load_instance(&instance)?;
    let model = load_model(&model_path)?;
    let deltas = match &s.target_losses {
        Some(qs) => {
            let mut rng = substream(seed, 1 << 32);
            qs.iter()
                .map(|&q| loss_to_delta(&model, q, s.sampling.loss_sample_size, &mut rng))
                .collect::<arbiter_puf::Result<Vec<f64>>>()?
        }
        None => s.deltas.clone(),
    };
    let report = arbiter_puf::full_report(&apuf, &model, &deltas, &s.conditions.grid(), &s.sampling, seed)?;

    let label = instance
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "apuf".into());
    write_text(&out.join("report.json"), &report.to_json()?)?;
    write_text(&out.join("table.csv"), &EvalReport::table_csv(&[(label, &report)])?)?;
    write_text(&out.join("conditions.csv"), &report.conditions_csv())?;
    for (name, body) in report.curves() {
        write_text(&out.join(format!("{name}.dat")), &body)?;
    }
    write_run_record(&out.join("run.json"), "eval", Some(seed), &s)?;

    println!("model accuracy at nominal: {:.4}", report.model_accuracy);
    println!(
        "BER@Default worst case: {:.3}% at {}",
        100.0 * report.ber_default_worst.ber.rate,
        report.ber_default_worst.condition
    );
    println!("{:>8} {:>9} {:>10} {:>12} {:>10} {:>8}", "delta_t", "crp_loss", "selected", "worst_BER_%", "upper95", "ones");
    for ((b, l), r) in report.ber_at_dt.iter().zip(&report.crp_loss).zip(&report.randomness) {
        println!(
            "{:>8.4} {:>9.4} {:>10} {:>12.5} {:>10.2e} {:>8.4}",
            b.delta_t,
            l.loss,
            b.selected,
            100.0 * b.worst.ber.rate,
            b.worst.ber.upper95,
            r.fraction_ones
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs, out: Option<PathBuf>) -> anyhow::Result<()> {
    let out = out.unwrap_or_else(|| PathBuf::from("table.csv"));
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let report = EvalReport::from_json(&read_text(path)?).with_context(|| format!("loading report {}", path.display()))?;
        // `eval` writes `<dir>/report.json`, so the directory names the run.
        let label = match (path.file_stem(), path.parent().and_then(Path::file_name)) {
            (Some(stem), Some(dir)) if stem == "report" => dir.to_string_lossy().into_owned(),
            (Some(stem), _) => stem.to_string_lossy().into_owned(),
            _ => path.display().to_string(),
        };
        reports.push((label, report));
    }
    let refs: Vec<(String, &EvalReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    let table = EvalReport::table_csv(&refs)?;
    write_text(&out, &table)?;
    print!("{table}");
    Ok(())
}
