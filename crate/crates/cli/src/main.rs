//! `qsfm`: prune, evaluate and inspect models in the qsfm model format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use qsfm_core::auxiliary::{detect_unimportant_filters, UNIMPORTANT_THRESHOLD};
use qsfm_core::dataset::{load_cifar_file, load_raw_tensor_dir, sample_probe_set, CifarFormat, LabeledImage};
use qsfm_core::fixtures;
use qsfm_core::inference::evaluate_accuracy;
use qsfm_core::metrics::{count_params, CostConvention};
use qsfm_core::model::{identify_prune_blocks, load_model, save_model, Model};
use qsfm_core::pruner::{run_schedule, PruneSchedule, Selector};
use qsfm_core::similarity::{dump_rows, pairwise_similarity, MeasureKind, SimilarityMeasure};
use qsfm_core::tensor::Tensor3;
use qsfm_core::Error;

#[derive(Parser)]
#[command(name = "qsfm", version, about = "Similarity-guided filter pruning for CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pruning schedule and write the pruned model and reports.
    Prune(PruneArgs),
    /// Print top-1/top-5 accuracy on a labeled dataset.
    Eval(EvalArgs),
    /// Print per-layer channels, costs and unimportant-filter fractions.
    Inspect(InspectArgs),
    /// Write a random-weight reference architecture.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR binary batch file or directory of raw f32 tensors; repeatable.
    #[arg(long = "data")]
    data: Vec<PathBuf>,
    /// Record layout of CIFAR binary files.
    #[arg(long, value_enum, default_value_t = Format::Cifar10)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Cifar10,
    Cifar100,
}

impl From<Format> for CifarFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Cifar10 => CifarFormat::Cifar10,
            Format::Cifar100 => CifarFormat::Cifar100,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Ssim,
    Psnr,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Qsfm,
    #[value(name = "rank_only")]
    RankOnly,
    Random,
    #[value(name = "l1_only")]
    L1Only,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// TOML schedule; the default schedule prunes nothing.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Probe images M (overrides the schedule).
    #[arg(long)]
    probe_m: Option<usize>,
    /// Seed for probe sampling and random selection (overrides the schedule).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    measure: Option<MeasureArg>,
    #[arg(long, value_enum)]
    selector: Option<SelectorArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2), default_value_t = 1)]
    mac_factor: u64,
    /// Labeled CIFAR file for per-step accuracy in the report.
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate only the first N images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2), default_value_t = 1)]
    mac_factor: u64,
    /// Magnitude below which every weight of a filter counts as unimportant.
    #[arg(long, default_value_t = UNIMPORTANT_THRESHOLD)]
    threshold: f32,
    /// Write every layer's similarity matrix as CSV (needs --data).
    #[arg(long)]
    dump: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 64)]
    probe_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = MeasureArg::Ssim)]
    measure: MeasureArg,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(fixtures::ARCHITECTURES))]
    arch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Exit status plus message.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Schedule(_) => 1,
            Error::Io { .. }
            | Error::Manifest(_)
            | Error::Layer { .. }
            | Error::Invalid(_)
            | Error::Dataset(_)
            | Error::Shape(_) => 2,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Fixture(a) => cmd_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qsfm: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn require_path(p: &Path, what: &str) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} {} does not exist", p.display())))
    }
}

/// Labeled images from CIFAR files, or unlabeled tensors from raw dirs.
enum Loaded {
    Labeled(Vec<LabeledImage>),
    Unlabeled(Vec<Tensor3>),
}

impl Loaded {
    fn tensors(self) -> Vec<Tensor3> {
        match self {
            Loaded::Labeled(v) => v.into_iter().map(|d| d.pixels).collect(),
            Loaded::Unlabeled(v) => v,
        }
    }
}

fn load_data(args: &DataArgs, model: &Model) -> CliResult<Loaded> {
    if args.data.is_empty() {
        return Err(Failure::usage("--data is required"));
    }
    let mut labeled = Vec::new();
    let mut raw = Vec::new();
    for p in &args.data {
        require_path(p, "data path")?;
        if p.is_dir() {
            raw.extend(load_raw_tensor_dir(p, model.input)?);
        } else {
            labeled.extend(load_cifar_file(p, args.format.into())?);
        }
    }
    Ok(if raw.is_empty() {
        Loaded::Labeled(labeled)
    } else {
        raw.extend(labeled.into_iter().map(|d| d.pixels));
        Loaded::Unlabeled(raw)
    })
}

fn open_model(path: &Path) -> CliResult<Model> {
    require_path(path, "model directory")?;
    Ok(load_model(path)?)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

/// Everything needed to repeat a prune run.
#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    model: String,
    model_name: &'a str,
    data: Vec<String>,
    data_format: &'static str,
    schedule: Option<String>,
    measure: &'static str,
    selector: &'static str,
    auxiliary: &'static str,
    seed: u64,
    probe_m: usize,
    probe_seed: u64,
    probe_indices: &'a [usize],
    mac_factor: u64,
    eval_data: Option<String>,
    steps: usize,
}

fn cmd_prune(a: PruneArgs) -> CliResult<()> {
    let model = open_model(&a.model)?;
    let mut schedule = match &a.schedule {
        Some(p) => {
            require_path(p, "schedule")?;
            PruneSchedule::from_file(p)?
        }
        None => PruneSchedule::default(),
    };
    if let Some(m) = a.measure {
        schedule.measure = SimilarityMeasure::of_kind(match m {
            MeasureArg::Ssim => MeasureKind::Ssim,
            MeasureArg::Psnr => MeasureKind::NegEuclidean,
        });
    }
    if let Some(s) = a.selector {
        schedule.selector = match s {
            SelectorArg::Qsfm => Selector::Qsfm,
            SelectorArg::RankOnly => Selector::RankOnly,
            SelectorArg::Random => Selector::Random,
            SelectorArg::L1Only => Selector::L1Only,
        };
    }
    if let Some(seed) = a.seed {
        schedule.set_seed(seed);
        schedule.probe_seed = seed;
    }
    if let Some(m) = a.probe_m {
        schedule.probe_m = m;
    }
    let steps = schedule.resolve(&model)?.len();

    let images = load_data(&a.data, &model)?.tensors();
    let m = schedule.probe_m.min(images.len());
    let probe = sample_probe_set(&images, m, schedule.probe_seed, "data")?;
    info!("probe set: {} of {} images, seed {}", probe.len(), images.len(), probe.seed);
    let eval = match &a.eval_data {
        Some(p) => {
            require_path(p, "evaluation data")?;
            Some(load_cifar_file(p, a.data.format.into())?)
        }
        None => None,
    };

    let convention = CostConvention::with_mac_factor(a.mac_factor);
    let outcome = run_schedule(&model, &schedule, &probe, eval.as_deref(), convention)?;

    fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::Io { path: a.out.clone(), source: e }))?;
    save_model(&outcome.model, a.out.join("model"))?;
    write(&a.out.join("report.txt"), &outcome.report.to_text())?;
    write(&a.out.join("report.csv"), &outcome.report.to_csv())?;
    write(&a.out.join("report.json"), &outcome.report.to_json())?;
    let traces = serde_json::to_string_pretty(&outcome.delete_sets).expect("traces serialize") + "\n";
    write(&a.out.join("traces.json"), &traces)?;
    let record = RunRecord {
        tool: "qsfm",
        version: env!("CARGO_PKG_VERSION"),
        model: a.model.display().to_string(),
        model_name: &model.name,
        data: a.data.data.iter().map(|p| p.display().to_string()).collect(),
        data_format: match a.data.format {
            Format::Cifar10 => "cifar10",
            Format::Cifar100 => "cifar100",
        },
        schedule: a.schedule.as_ref().map(|p| p.display().to_string()),
        measure: schedule.measure.kind.as_str(),
        selector: schedule.selector.as_str(),
        auxiliary: schedule.effective_aux().name(),
        seed: schedule.seed,
        probe_m: probe.len(),
        probe_seed: probe.seed,
        probe_indices: &probe.indices,
        mac_factor: a.mac_factor,
        eval_data: a.eval_data.as_ref().map(|p| p.display().to_string()),
        steps,
    };
    let run = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    write(&a.out.join("run.json"), &run)?;
    print!("{}", outcome.report.to_text());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let model = open_model(&a.model)?;
    let mut data = match load_data(&a.data, &model)? {
        Loaded::Labeled(d) => d,
        Loaded::Unlabeled(_) => {
            return Err(Failure::usage("evaluation needs labeled CIFAR files, not raw tensor directories"))
        }
    };
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    let acc = evaluate_accuracy(&model, &data)?;
    println!("images: {}", acc.count);
    println!("top1: {:.4}", acc.top1);
    println!("top5: {:.4}", acc.top5);
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult<()> {
    let model = open_model(&a.model)?;
    let costs = count_params(&model, CostConvention::with_mac_factor(a.mac_factor))?;
    let flagged = detect_unimportant_filters(&model, a.threshold)?;
    let shapes = model.shapes()?;
    let mut out = String::new();
    writeln!(out, "model: {} ({} layers, input {})", model.name, model.layers.len(), model.input).unwrap();
    writeln!(
        out,
        "{:<5} {:<24} {:<17} {:>6} {:>14} {:>10} {:>11}",
        "layer", "name", "kind", "N", "flops", "params", "unimportant"
    )
    .unwrap();
    for (i, layer) in model.layers.iter().enumerate() {
        let c = &costs.layers[i];
        let frac = flagged
            .iter()
            .find(|f| f.layer == i)
            .map_or(String::from("-"), |f| format!("{:.4}", f.fraction()));
        writeln!(
            out,
            "{:<5} {:<24} {:<17} {:>6} {:>14} {:>10} {:>11}",
            i,
            layer.name,
            layer.kind().as_str(),
            shapes[i].channels,
            c.flops,
            c.params,
            frac
        )
        .unwrap();
    }
    writeln!(out, "total ({}): flops {} params {}", costs.convention.id(), costs.flops, costs.params).unwrap();
    print!("{out}");

    if let Some(dump) = &a.dump {
        let images = load_data(&a.data, &model)?.tensors();
        let probe = sample_probe_set(&images, a.probe_m.min(images.len()), a.seed, "data")?;
        let measure = match a.measure {
            MeasureArg::Ssim => SimilarityMeasure::ssim(),
            MeasureArg::Psnr => SimilarityMeasure::neg_euclidean(),
        };
        let matrices = identify_prune_blocks(&model)
            .iter()
            .map(|b| pairwise_similarity(&model, b, &probe, &measure))
            .collect::<Result<Vec<_>, _>>()?;
        write(dump, &dump_rows(&matrices))?;
        info!("wrote {} similarity matrices to {}", matrices.len(), dump.display());
    }
    Ok(())
}

fn cmd_fixture(a: FixtureArgs) -> CliResult<()> {
    let model = fixtures::build(&a.arch, a.seed)
        .ok_or_else(|| Failure::usage(format!("unknown architecture '{}'", a.arch)))?;
    save_model(&model, &a.out)?;
    info!("wrote {} to {}", model.name, a.out.display());
    Ok(())
}
