//! Command-line front end for searches, single trainings, ablations and plot data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fairsearch::evaluator::evaluate_with;
use fairsearch::experiment::{
    emit_plot_data, read_trace, run_ablation, run_search, ExperimentConfig, Mode,
};
use fairsearch::nn::ChildNetwork;
use fairsearch::search_space::RatioCandidate;
use fairsearch::seed::derive_seed;
use fairsearch::trainer::{train_child, LossMode, TrainConfig};
use fairsearch::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "fairsearch",
    version,
    about = "Fairness-aware joint architecture and batch-ratio search"
)]
struct Cli {
    /// TOML experiment config; its keys override command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Named preset to start from (fair, acc, fat, baseline, surrogate, ablation).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Output directory root.
    #[arg(long, global = true, env = "FAIRSEARCH_OUT")]
    out: Option<PathBuf>,

    #[command(flatten)]
    common: CommonFlags,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonFlags {
    /// Comma-separated master seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Controller updates per search.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Episodes per controller update.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Initial child learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Controller learning rate.
    #[arg(long, global = true)]
    policy_lr: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Minimum accuracy for a positive reward.
    #[arg(long, global = true)]
    ac: Option<f64>,
    /// Loss weighting: fair or plain.
    #[arg(long, global = true)]
    loss: Option<String>,
    /// Fixed-point name or block text.
    #[arg(long, global = true)]
    arch: Option<String>,
    /// proportional, equal, minority=<share> or explicit=<w1>,<w2>,...
    #[arg(long, global = true)]
    ratios: Option<String>,
    #[arg(long, global = true)]
    train_on_validation: bool,
    /// Dataset manifest replacing the synthetic generator.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Controller search with trained children.
    Search,
    /// Train one fixed architecture per seed.
    TrainOne,
    /// Evaluate saved child parameters on the validation split.
    Evaluate {
        #[arg(long)]
        params: PathBuf,
    },
    /// Controller search against a tabular benchmark.
    SurrogateSearch {
        /// Prebuilt surrogate table CSV.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Run the ablation arms.
    Ablation,
    /// Write scatter and reward-curve CSVs from a trace.
    EmitPlots {
        #[arg(long)]
        trace: PathBuf,
        /// Defaults to the trace's directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn parse_ratios(text: &str) -> Result<RatioCandidate, Error> {
    let bad = || Error::Config(format!("cannot parse ratios `{text}`"));
    match text {
        "proportional" => Ok(RatioCandidate::Proportional),
        "equal" => Ok(RatioCandidate::Equal),
        _ => {
            if let Some(v) = text.strip_prefix("minority=") {
                v.parse()
                    .map(RatioCandidate::MinorityShare)
                    .map_err(|_| bad())
            } else if let Some(v) = text.strip_prefix("explicit=") {
                v.split(',')
                    .map(|w| w.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map(RatioCandidate::Explicit)
                    .map_err(|_| bad())
            } else {
                Err(bad())
            }
        }
    }
}

fn parse_loss(text: &str) -> Result<LossMode, Error> {
    match text {
        "fair" => Ok(LossMode::Fair),
        "plain" => Ok(LossMode::Plain),
        other => Err(Error::Config(format!("unknown loss `{other}`"))),
    }
}

fn mode_of(cmd: &Command) -> Option<Mode> {
    match cmd {
        Command::Search => Some(Mode::Search),
        Command::TrainOne => Some(Mode::TrainOne),
        Command::Evaluate { .. } => Some(Mode::Evaluate),
        Command::SurrogateSearch { .. } => Some(Mode::SurrogateSearch),
        Command::Ablation => Some(Mode::Ablation),
        Command::EmitPlots { .. } => None,
    }
}

/// Preset, then flags, then the config file.
fn build_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.preset {
        Some(p) => ExperimentConfig::preset(p)?,
        None => ExperimentConfig::default(),
    };
    let f = &cli.common;
    if !f.seeds.is_empty() {
        cfg.seeds = f.seeds.clone();
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(f.iterations, cfg.iterations);
    set!(f.episodes, cfg.reinforce.episodes);
    set!(f.workers, cfg.workers);
    set!(f.epochs, cfg.train.epochs);
    set!(f.batch_size, cfg.train.batch_size);
    set!(f.lr, cfg.train.learning_rate);
    set!(f.policy_lr, cfg.reinforce.learning_rate);
    set!(f.alpha, cfg.reward.alpha);
    set!(f.beta, cfg.reward.beta);
    set!(f.ac, cfg.reward.ac_threshold);
    set!(f.arch, cfg.architecture);
    if let Some(l) = &f.loss {
        cfg.train.loss = parse_loss(l)?;
    }
    if let Some(r) = &f.ratios {
        cfg.ratios = parse_ratios(r)?;
    }
    if f.train_on_validation {
        cfg.data.train_on_validation = true;
    }
    if f.manifest.is_some() {
        cfg.data.manifest = f.manifest.clone();
    }
    if let Command::SurrogateSearch { table, noise } = &cli.command {
        if table.is_some() {
            cfg.surrogate.table = table.clone();
        }
        set!(noise, cfg.surrogate.noise);
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg = cfg.overlay_toml(&text)?;
    }
    if let Some(mode) = mode_of(&cli.command) {
        cfg.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output.join(format!("seed-{seed}"))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn searches(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed);
        write_config(cfg, &dir)?;
        let out = run_search(cfg, seed, &dir)?;
        let b = &out.best;
        println!(
            "seed {seed}: best {} reward={} acc={} unfairness={} (iteration {}, trace {})",
            b.encoding,
            b.reward,
            b.report.overall_acc,
            b.report.unfairness,
            b.iteration,
            dir.join("trace.csv").display()
        );
    }
    Ok(())
}

fn train_one(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let (train, val) = cfg.load_data()?;
    let arch = cfg.fixed_architecture(&train)?;
    let bgm = cfg.ratios.resolve(&train.group_sizes())?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed);
        write_config(cfg, &dir)?;
        let tcfg = TrainConfig {
            seed: derive_seed(seed, &[0]),
            ..cfg.train.clone()
        };
        let mut child = train_child(&arch, &bgm, &train, &tcfg)?;
        let report = evaluate_with(&mut child.net, &val, &cfg.fairness)?;
        child.net.save_params(&dir.join("params.bin"))?;
        let json = serde_json::to_string_pretty(&report)?;
        let path = dir.join("report.json");
        fs::write(&path, format!("{json}\n")).map_err(|e| Error::Io { path, source: e })?;
        println!(
            "seed {seed}: acc={} unfairness={} group_acc={:?}",
            report.overall_acc, report.unfairness, report.group_acc
        );
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, params: &Path) -> anyhow::Result<()> {
    let (train, val) = cfg.load_data()?;
    let arch = cfg.fixed_architecture(&train)?;
    let mut net = ChildNetwork::compile(&arch, val.shape(), 0)?;
    net.load_params(params)?;
    let report = evaluate_with(&mut net, &val, &cfg.fairness)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn ablation(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    write_config(cfg, &cfg.output)?;
    let report = run_ablation(cfg, &cfg.output)?;
    println!("arm         ranking  median_rank  accuracy  unfairness");
    for s in &report.summary {
        println!(
            "{:<11} {:>7}  {:>11}  {:>8.4}  {:>10.4}",
            s.arm, s.ranking, s.median_rank, s.median_accuracy, s.median_unfairness
        );
    }
    Ok(())
}

fn plots(trace: &Path, dir: Option<&Path>) -> anyhow::Result<()> {
    let rows = read_trace(trace)?;
    let dir = dir
        .map(Path::to_path_buf)
        .or_else(|| trace.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let (scatter, curve) = emit_plot_data(&rows, &dir)?;
    println!("{}\n{}", scatter.display(), curve.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Command::EmitPlots { trace, dir } = &cli.command {
        return plots(trace, dir.as_deref());
    }
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Search | Command::SurrogateSearch { .. } => searches(&cfg),
        Command::TrainOne => train_one(&cfg),
        Command::Evaluate { params } => {
            evaluate(&cfg, params).with_context(|| format!("evaluating {}", params.display()))
        }
        Command::Ablation => ablation(&cfg),
        Command::EmitPlots { .. } => unreachable!(),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        Some(e) if e.is_io() => EXIT_IO,
        Some(_) => EXIT_CONFIG,
        None if err
            .chain()
            .any(|e| e.downcast_ref::<std::io::Error>().is_some()) =>
        {
            EXIT_IO
        }
        None => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_flags() {
        assert_eq!(parse_ratios("equal").unwrap(), RatioCandidate::Equal);
        assert_eq!(
            parse_ratios("minority=0.25").unwrap(),
            RatioCandidate::MinorityShare(0.25)
        );
        assert_eq!(
            parse_ratios("explicit=0.7,0.3").unwrap(),
            RatioCandidate::Explicit(vec![0.7, 0.3])
        );
        assert!(parse_ratios("half").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into()).into()), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Numeric("x".into()).into()), EXIT_NUMERIC);
        let io = Error::Io {
            path: "p".into(),
            source: std::io::Error::other("x"),
        };
        assert_eq!(exit_code(&io.into()), EXIT_IO);
    }
}
