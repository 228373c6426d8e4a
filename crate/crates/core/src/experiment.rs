//! Experiment orchestration: layered configuration, named presets, the
//! sample → train → evaluate → update loop, ablation arms and trace files.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{compute_reward, ControllerPolicy, Episode, ReinforceConfig, RewardConfig};
use crate::data::{generate_synthetic, load_dataset, GroupedDataset, Split, SyntheticBiasConfig};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_with, EvalReport, FairnessConfig};
use crate::search_space::{
    fixed_point, point_text, ArchitectureEncoding, BgmSpec, BlockType, RatioCandidate, SearchSpace,
    SearchSpaceConfig,
};
use crate::seed::derive_seed;
use crate::surrogate::{
    build_table_with_cap, surrogate_evaluate_noisy, SurrogateTable, DEFAULT_CAP,
};
use crate::trainer::{train_child, LossMode, LossRow, TrainConfig};

pub const TRACE_FILE: &str = "trace.csv";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const BEST_FILE: &str = "best.json";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const REWARD_CURVE_FILE: &str = "reward_curve.csv";

pub const PRESETS: [&str; 6] = ["fair", "acc", "fat", "baseline", "surrogate", "ablation"];
pub const ARMS: [&str; 5] = ["vanilla", "f-prime", "d-f-prime", "n-only", "full"];

// Seed-path tags.
const TAG_CONTROLLER: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_ARM: u64 = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Search,
    TrainOne,
    Evaluate,
    SurrogateSearch,
    Ablation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticBiasConfig,
    /// Dataset manifest; when set, replaces the synthetic generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Directory that manifest paths are relative to (defaults to the manifest's).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Train children on the validation split as well as evaluating on it.
    pub train_on_validation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateOptions {
    pub noise: f64,
    pub cap: u64,
    /// Prebuilt table; when absent one is built from the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

impl Default for SurrogateOptions {
    fn default() -> Self {
        SurrogateOptions {
            noise: 0.0,
            cap: DEFAULT_CAP,
            table: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub space: SearchSpaceConfig,
    pub reward: RewardConfig,
    pub reinforce: ReinforceConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub fairness: FairnessConfig,
    pub surrogate: SurrogateOptions,
    pub seeds: Vec<u64>,
    /// Controller updates per search.
    pub iterations: usize,
    /// Concurrent child evaluations per update.
    pub workers: usize,
    pub output: PathBuf,
    /// Fixed-point name or block text used by `train-one`, `evaluate` and the
    /// fixed-architecture ablation arms.
    pub architecture: String,
    /// Batch ratios used by `train-one` and `evaluate`.
    pub ratios: RatioCandidate,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Search,
            space: SearchSpaceConfig::default(),
            reward: RewardConfig::default(),
            reinforce: ReinforceConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            fairness: FairnessConfig::default(),
            surrogate: SurrogateOptions::default(),
            seeds: vec![0],
            iterations: 200,
            workers: 1,
            output: PathBuf::from("runs"),
            architecture: "all-CB".into(),
            ratios: RatioCandidate::Proportional,
        }
    }
}

/// Four-block space with two channel and two kernel candidates.
pub fn desk_space() -> SearchSpaceConfig {
    SearchSpaceConfig {
        depth: 4,
        channels: vec![4, 8],
        kernels: vec![1, 3],
        stem_channels: 8,
        ..SearchSpaceConfig::default()
    }
}

/// 160-point space used for surrogate searches.
pub fn surrogate_space() -> SearchSpaceConfig {
    SearchSpaceConfig {
        depth: 2,
        block_types: vec![BlockType::Cb, BlockType::Mb, BlockType::Skip],
        channels: vec![8, 16],
        kernels: vec![3],
        ratio_grid: vec![RatioCandidate::Proportional, RatioCandidate::Equal],
        ..SearchSpaceConfig::default()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Named starting points:
    /// `fair` / `acc` search with α = 0.2, β = 0.8 and α = 0.8, β = 0.2;
    /// `fat` trains the fixed architecture with equal ratios and the weighted loss;
    /// `baseline` trains it with proportional batches and plain cross-entropy;
    /// `surrogate` searches the 160-point space against a tabular benchmark;
    /// `ablation` runs every ablation arm under the accuracy-leaning reward.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = ExperimentConfig {
            space: desk_space(),
            train: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let cfg = match name {
            "fair" => ExperimentConfig {
                reward: RewardConfig::fair(),
                ..desk
            },
            "acc" => ExperimentConfig {
                reward: RewardConfig::acc(),
                ..desk
            },
            "fat" => ExperimentConfig {
                mode: Mode::TrainOne,
                ratios: RatioCandidate::Equal,
                ..desk
            },
            "baseline" => ExperimentConfig {
                mode: Mode::TrainOne,
                ratios: RatioCandidate::Proportional,
                train: TrainConfig {
                    loss: LossMode::Plain,
                    ..desk.train.clone()
                },
                ..desk
            },
            "surrogate" => ExperimentConfig {
                mode: Mode::SurrogateSearch,
                space: surrogate_space(),
                reward: SurrogateTable::reference_reward(),
                reinforce: ReinforceConfig {
                    learning_rate: 2.0,
                    ..ReinforceConfig::default()
                },
                ..ExperimentConfig::default()
            },
            "ablation" => ExperimentConfig {
                mode: Mode::Ablation,
                reward: RewardConfig::acc(),
                ..desk
            },
            other => {
                return Err(Error::Lookup {
                    kind: "preset",
                    name: other.to_string(),
                })
            }
        };
        Ok(cfg)
    }

    /// Overlays a TOML document on `self`; keys present in the document win.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: ExperimentConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = ExperimentConfig::default().overlay_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.reward.validate()?;
        self.reinforce.validate()?;
        self.train.validate()?;
        if self.data.manifest.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.iterations == 0 || self.workers == 0 {
            return Err(Error::Config("iterations and workers must be >= 1".into()));
        }
        if !(self.surrogate.noise >= 0.0) {
            return Err(Error::Config("surrogate noise must be >= 0".into()));
        }
        Ok(())
    }

    /// `(train, validation)` splits; with `train_on_validation` the training
    /// split is the validation data.
    pub fn load_data(&self) -> Result<(GroupedDataset, GroupedDataset)> {
        let (train, val) = match &self.data.manifest {
            Some(manifest) => {
                let root = self
                    .data
                    .root
                    .clone()
                    .or_else(|| manifest.parent().map(Path::to_path_buf))
                    .unwrap_or_default();
                (
                    load_dataset(&root, manifest, Split::Train)?,
                    load_dataset(&root, manifest, Split::Validation)?,
                )
            }
            None => generate_synthetic(&self.data.synthetic)?,
        };
        if self.data.train_on_validation {
            Ok((val.clone(), val))
        } else {
            Ok((train, val))
        }
    }

    /// The search space with group, class and input dimensions taken from `ds`.
    pub fn bind_space(&self, ds: &GroupedDataset) -> Result<SearchSpace> {
        let shape = ds.shape();
        let cfg = SearchSpaceConfig {
            groups: ds.num_groups(),
            num_classes: ds.num_classes(),
            input_channels: shape[0],
            input_size: shape[1],
            ..self.space.clone()
        };
        SearchSpace::new(cfg, &ds.group_sizes())
    }

    /// The configured fixed architecture: a fixed-point name or block text.
    pub fn fixed_architecture(&self, ds: &GroupedDataset) -> Result<ArchitectureEncoding> {
        let space = self.bind_space(ds)?;
        let cfg = space.config();
        if self.architecture.starts_with("blocks=") {
            ArchitectureEncoding::parse_blocks(
                &self.architecture,
                cfg.stem_channels,
                cfg.num_classes,
            )
        } else {
            fixed_point(&self.architecture, cfg)
        }
    }
}

/// One sampled child, as persisted in the trace CSV. List-valued fields are
/// `;`-joined (tokens are space-joined).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub update: u64,
    pub tokens: String,
    pub encoding: String,
    pub ratios: String,
    pub accuracy: f64,
    pub group_acc: String,
    pub unfairness: f64,
    pub di: Option<f64>,
    pub spd: f64,
    pub reward: f64,
    pub baseline: f64,
    pub grad_norm: f64,
    pub group_counts: String,
    pub status: String,
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn split_parse<T: std::str::FromStr>(s: &str, sep: char) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep)
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::Parse(format!("bad list entry `{p}`")))
        })
        .collect()
}

impl TraceRow {
    pub fn token_vec(&self) -> Result<Vec<usize>> {
        split_parse(&self.tokens, ' ')
    }

    pub fn group_accuracies(&self) -> Result<Vec<f64>> {
        split_parse(&self.group_acc, ';')
    }

    pub fn counts(&self) -> Result<Vec<usize>> {
        split_parse(&self.group_counts, ';')
    }

    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            overall_acc: self.accuracy,
            group_acc: self.group_accuracies()?,
            unfairness: self.unfairness,
            di: self.di,
            spd: self.spd,
            group_counts: self.counts()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub iteration: u64,
    pub tokens: Vec<usize>,
    pub encoding: String,
    pub reward: f64,
    pub report: EvalReport,
    pub status: String,
}

impl BestRecord {
    fn from_row(row: &TraceRow) -> Result<Self> {
        Ok(BestRecord {
            iteration: row.iteration,
            tokens: row.token_vec()?,
            encoding: row.encoding.clone(),
            reward: row.reward,
            report: row.report()?,
            status: row.status.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub rows: Vec<TraceRow>,
    pub best: BestRecord,
    pub policy: ControllerPolicy,
    /// Updates already on disk when the run started.
    pub resumed_from: u64,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], append: bool) -> Result<()> {
    let has_content = append && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(!has_content)
        .from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LossTraceRow {
    iteration: u64,
    epoch: usize,
    step: usize,
    loss: f64,
    lr: f64,
}

/// Trains a fresh child and evaluates it on `val`.
pub fn train_and_evaluate(
    arch: &ArchitectureEncoding,
    bgm: &BgmSpec,
    train: &GroupedDataset,
    val: &GroupedDataset,
    cfg: &TrainConfig,
    fairness: &FairnessConfig,
) -> Result<(EvalReport, Vec<LossRow>)> {
    let mut child = train_child(arch, bgm, train, cfg)?;
    let report = evaluate_with(&mut child.net, val, fairness)?;
    Ok((report, child.trace))
}

/// As [`train_and_evaluate`], but a numeric failure during training yields a
/// zero-accuracy report with status `"diverged"` instead of an error.
fn train_or_diverged(
    arch: &ArchitectureEncoding,
    bgm: &BgmSpec,
    train: &GroupedDataset,
    val: &GroupedDataset,
    cfg: &TrainConfig,
    fairness: &FairnessConfig,
) -> Result<(EvalReport, Vec<LossRow>, &'static str)> {
    match train_and_evaluate(arch, bgm, train, val, cfg, fairness) {
        Ok((report, losses)) => Ok((report, losses, "ok")),
        Err(e) if e.is_numeric() => {
            let zeros = vec![0.0; val.num_groups()];
            let report = EvalReport::from_group_accuracies(&zeros, &val.group_sizes(), fairness)?;
            Ok((report, Vec::new(), "diverged"))
        }
        Err(e) => Err(e),
    }
}

enum Backend {
    Train {
        train: GroupedDataset,
        val: GroupedDataset,
    },
    Surrogate(SurrogateTable),
}

struct ChildResult {
    report: EvalReport,
    reward: f64,
    status: &'static str,
    losses: Vec<LossRow>,
}

impl Backend {
    fn evaluate(
        &self,
        cfg: &ExperimentConfig,
        bgm: &BgmSpec,
        arch: &ArchitectureEncoding,
        seed: u64,
        iteration: u64,
    ) -> Result<ChildResult> {
        match self {
            Backend::Surrogate(table) => {
                let report = surrogate_evaluate_noisy(
                    table,
                    bgm,
                    arch,
                    derive_seed(seed, &[TAG_NOISE, iteration]),
                )?;
                Ok(ChildResult {
                    reward: compute_reward(&report, &cfg.reward),
                    report,
                    status: "ok",
                    losses: Vec::new(),
                })
            }
            Backend::Train { train, val } => {
                let tcfg = TrainConfig {
                    seed: derive_seed(seed, &[TAG_TRAIN, iteration]),
                    ..cfg.train.clone()
                };
                let (report, losses, status) =
                    train_or_diverged(arch, bgm, train, val, &tcfg, &cfg.fairness)?;
                let reward = if status == "ok" {
                    compute_reward(&report, &cfg.reward)
                } else {
                    -1.0
                };
                Ok(ChildResult {
                    report,
                    reward,
                    status,
                    losses,
                })
            }
        }
    }
}

fn build_backend(cfg: &ExperimentConfig, seed: u64) -> Result<(Backend, SearchSpace)> {
    if cfg.mode == Mode::SurrogateSearch {
        let sizes = surrogate_group_sizes(cfg);
        let space = SearchSpace::new(
            SearchSpaceConfig {
                groups: sizes.len(),
                ..cfg.space.clone()
            },
            &sizes,
        )?;
        let table = match &cfg.surrogate.table {
            Some(path) => SurrogateTable::load_csv(path)?,
            None => build_table_with_cap(space.config(), &sizes, seed, cfg.surrogate.cap)?,
        }
        .with_noise(cfg.surrogate.noise)?;
        Ok((Backend::Surrogate(table), space))
    } else {
        let (train, val) = cfg.load_data()?;
        let space = cfg.bind_space(&train)?;
        Ok((Backend::Train { train, val }, space))
    }
}

/// Group sizes for surrogate runs: the synthetic validation counts.
fn surrogate_group_sizes(cfg: &ExperimentConfig) -> Vec<usize> {
    cfg.data
        .synthetic
        .groups
        .iter()
        .map(|g| g.val_count)
        .collect()
}

/// Runs (or resumes) one controller search under `seed`, persisting
/// `trace.csv`, `loss_trace.csv`, `timings.csv`, `best.json` and `policy.ckpt`
/// into `dir`. A checkpoint in `dir` resumes from its update count; trace rows
/// written after that checkpoint are dropped before continuing.
pub fn run_search(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SearchOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (backend, space) = build_backend(cfg, seed)?;
    let schema = space.schema();
    let m = cfg.reinforce.episodes as u64;
    let hidden = cfg.reinforce.hidden;

    let trace_path = dir.join(TRACE_FILE);
    let loss_path = dir.join(LOSS_TRACE_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let timings_path = dir.join(TIMINGS_FILE);

    let (mut policy, mut rows) = if ckpt_path.exists() {
        let policy = ControllerPolicy::load(&ckpt_path, schema.clone(), hidden)?;
        let done = policy.updates();
        let rows: Vec<TraceRow> = read_rows::<TraceRow>(&trace_path)?
            .into_iter()
            .filter(|r| r.update < done)
            .collect();
        if rows.len() as u64 != done * m {
            return Err(Error::Checkpoint(format!(
                "checkpoint records {done} updates but the trace holds {} of {} rows",
                rows.len(),
                done * m
            )));
        }
        let losses: Vec<LossTraceRow> = read_rows::<LossTraceRow>(&loss_path)?
            .into_iter()
            .filter(|r| r.iteration < done * m)
            .collect();
        write_rows(&trace_path, &rows, false)?;
        write_rows(&loss_path, &losses, false)?;
        (policy, rows)
    } else {
        let policy = ControllerPolicy::new(schema, hidden, derive_seed(seed, &[TAG_CONTROLLER]))?;
        write_rows::<TraceRow>(&trace_path, &[], false)?;
        write_rows::<LossTraceRow>(&loss_path, &[], false)?;
        let mut t = File::create(&timings_path).map_err(|e| Error::io(&timings_path, e))?;
        writeln!(t, "update,seconds").map_err(|e| Error::io(&timings_path, e))?;
        (policy, Vec::new())
    };
    let resumed_from = policy.updates();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    for update in resumed_from..cfg.iterations as u64 {
        let started = Instant::now();
        let samples: Vec<_> = (0..m)
            .map(|k| policy.sample(derive_seed(seed, &[TAG_SAMPLE, update, k])))
            .collect();
        let decoded = samples
            .iter()
            .map(|s| space.decode(&s.tokens))
            .collect::<Result<Vec<_>>>()?;
        let results: Vec<Result<ChildResult>> = pool.install(|| {
            decoded
                .par_iter()
                .enumerate()
                .map(|(k, (bgm, arch))| {
                    backend.evaluate(cfg, bgm, arch, seed, update * m + k as u64)
                })
                .collect()
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let episodes: Vec<Episode> = samples
            .iter()
            .zip(&results)
            .map(|(s, r)| Episode {
                tokens: s.tokens.clone(),
                log_probs: s.log_probs.clone(),
                reward: r.reward,
            })
            .collect();
        let upd = policy.reinforce_update(&episodes, &cfg.reinforce)?;
        let mut new_rows = Vec::with_capacity(results.len());
        let mut loss_rows = Vec::new();
        for (k, ((s, (bgm, arch)), r)) in samples.iter().zip(&decoded).zip(&results).enumerate() {
            let iteration = update * m + k as u64;
            new_rows.push(TraceRow {
                iteration,
                update,
                tokens: join(&s.tokens, " "),
                encoding: point_text(bgm, arch),
                ratios: join(bgm.ratios(), ";"),
                accuracy: r.report.overall_acc,
                group_acc: join(&r.report.group_acc, ";"),
                unfairness: r.report.unfairness,
                di: r.report.di,
                spd: r.report.spd,
                reward: r.reward,
                baseline: upd.baseline,
                grad_norm: upd.grad_norm,
                group_counts: join(&r.report.group_counts, ";"),
                status: r.status.to_string(),
            });
            loss_rows.extend(r.losses.iter().map(|l| LossTraceRow {
                iteration,
                epoch: l.epoch,
                step: l.step,
                loss: l.loss,
                lr: l.lr,
            }));
        }
        write_rows(&trace_path, &new_rows, true)?;
        write_rows(&loss_path, &loss_rows, true)?;
        rows.extend(new_rows);
        write_json(&dir.join(BEST_FILE), &best_of(&rows)?)?;
        policy.save(&ckpt_path)?;
        let mut t = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&timings_path)
            .map_err(|e| Error::io(&timings_path, e))?;
        writeln!(t, "{update},{:.3}", started.elapsed().as_secs_f64())
            .map_err(|e| Error::io(&timings_path, e))?;
    }
    let best = best_of(&rows)?;
    write_json(&dir.join(BEST_FILE), &best)?;
    Ok(SearchOutcome {
        rows,
        best,
        policy,
        resumed_from,
    })
}

/// Highest-reward row; the earliest on ties.
pub fn best_of(rows: &[TraceRow]) -> Result<BestRecord> {
    let mut best: Option<&TraceRow> = None;
    for r in rows {
        if best.map_or(true, |b| r.reward > b.reward) {
            best = Some(r);
        }
    }
    BestRecord::from_row(best.ok_or_else(|| Error::Config("trace is empty".into()))?)
}

/// Writes `scatter.csv` (accuracy vs unfairness per child) and
/// `reward_curve.csv` (reward, baseline and best-so-far per iteration).
pub fn emit_plot_data(rows: &[TraceRow], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::Config("cannot plot an empty trace".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    #[derive(Serialize)]
    struct Scatter<'a> {
        iteration: u64,
        accuracy: f64,
        unfairness: f64,
        reward: f64,
        encoding: &'a str,
    }
    #[derive(Serialize)]
    struct Curve {
        iteration: u64,
        reward: f64,
        baseline: f64,
        best_reward: f64,
    }
    let scatter_path = dir.join(SCATTER_FILE);
    let curve_path = dir.join(REWARD_CURVE_FILE);
    let scatter: Vec<Scatter> = rows
        .iter()
        .map(|r| Scatter {
            iteration: r.iteration,
            accuracy: r.accuracy,
            unfairness: r.unfairness,
            reward: r.reward,
            encoding: &r.encoding,
        })
        .collect();
    write_rows(&scatter_path, &scatter, false)?;
    let mut best = f64::NEG_INFINITY;
    let curve: Vec<Curve> = rows
        .iter()
        .map(|r| {
            best = best.max(r.reward);
            Curve {
                iteration: r.iteration,
                reward: r.reward,
                baseline: r.baseline,
                best_reward: best,
            }
        })
        .collect();
    write_rows(&curve_path, &curve, false)?;
    Ok((scatter_path, curve_path))
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Score used to order ablation arms: accuracy minus unfairness.
pub fn composite(report: &EvalReport) -> f64 {
    report.overall_acc - report.unfairness
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub encoding: String,
    pub accuracy: f64,
    pub unfairness: f64,
    pub di: Option<f64>,
    pub spd: f64,
    pub composite: f64,
    /// 1-based position among the arms for this seed.
    pub rank: usize,
    /// `ok`, or `diverged` when training produced a non-finite loss.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub median_accuracy: f64,
    pub median_unfairness: f64,
    pub median_di: Option<f64>,
    pub median_spd: f64,
    pub median_composite: f64,
    pub median_rank: f64,
    /// Overall position: by median rank, then median composite.
    pub ranking: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == name)
    }
}

/// Assigns 1-based ranks by descending composite; ties keep arm order.
pub fn rank_arms(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

/// Runs every arm for every seed:
/// `vanilla` (plain loss, proportional batches), `f-prime` (weighted loss,
/// proportional), `d-f-prime` (weighted loss, equal ratios) on the fixed
/// architecture, then `n-only` (search with plain loss and proportional batches)
/// and `full` (joint search with the weighted loss). Search arms write their
/// runs under `dir/<arm>/seed-<s>` and resume from existing checkpoints there.
pub fn run_ablation(cfg: &ExperimentConfig, dir: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train, val) = cfg.load_data()?;
    let arch = cfg.fixed_architecture(&train)?;
    let sizes = train.group_sizes();
    let proportional = BgmSpec::proportional(&sizes)?;
    let equal = BgmSpec::equal(sizes.len())?;
    let search_cfg = ExperimentConfig {
        mode: Mode::Search,
        ..cfg.clone()
    };
    let n_only = ExperimentConfig {
        space: SearchSpaceConfig {
            ratio_grid: vec![RatioCandidate::Proportional],
            ..cfg.space.clone()
        },
        train: TrainConfig {
            loss: LossMode::Plain,
            ..cfg.train.clone()
        },
        ..search_cfg.clone()
    };
    let full = ExperimentConfig {
        train: TrainConfig {
            loss: LossMode::Fair,
            ..cfg.train.clone()
        },
        ..search_cfg
    };
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut results: Vec<(String, EvalReport, String)> = Vec::new();
        for (i, (loss, bgm)) in [
            (LossMode::Plain, &proportional),
            (LossMode::Fair, &proportional),
            (LossMode::Fair, &equal),
        ]
        .into_iter()
        .enumerate()
        {
            let tcfg = TrainConfig {
                loss,
                seed: derive_seed(seed, &[TAG_ARM, i as u64]),
                ..cfg.train.clone()
            };
            let (report, _, status) =
                train_or_diverged(&arch, bgm, &train, &val, &tcfg, &cfg.fairness)?;
            results.push((point_text(bgm, &arch), report, status.to_string()));
        }
        for (name, arm_cfg) in [("n-only", &n_only), ("full", &full)] {
            let out = run_search(arm_cfg, seed, &dir.join(name).join(format!("seed-{seed}")))?;
            results.push((
                out.best.encoding.clone(),
                out.best.report.clone(),
                out.best.status.clone(),
            ));
        }
        let scores: Vec<f64> = results.iter().map(|(_, r, _)| composite(r)).collect();
        let ranks = rank_arms(&scores);
        for (i, (encoding, r, status)) in results.into_iter().enumerate() {
            runs.push(ArmResult {
                arm: ARMS[i].to_string(),
                seed,
                encoding,
                accuracy: r.overall_acc,
                unfairness: r.unfairness,
                di: r.di,
                spd: r.spd,
                composite: scores[i],
                rank: ranks[i],
                status,
            });
        }
    }
    let mut summary: Vec<ArmSummary> = ARMS
        .iter()
        .map(|&arm| {
            let of = |f: &dyn Fn(&ArmResult) -> f64| -> f64 {
                median(
                    &runs
                        .iter()
                        .filter(|r| r.arm == arm)
                        .map(f)
                        .collect::<Vec<_>>(),
                )
            };
            let dis: Vec<f64> = runs
                .iter()
                .filter(|r| r.arm == arm)
                .filter_map(|r| r.di)
                .collect();
            ArmSummary {
                arm: arm.to_string(),
                median_accuracy: of(&|r| r.accuracy),
                median_unfairness: of(&|r| r.unfairness),
                median_di: (!dis.is_empty()).then(|| median(&dis)),
                median_spd: of(&|r| r.spd),
                median_composite: of(&|r| r.composite),
                median_rank: of(&|r| r.rank as f64),
                ranking: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..summary.len()).collect();
    order.sort_by(|&a, &b| {
        summary[a]
            .median_rank
            .total_cmp(&summary[b].median_rank)
            .then(
                summary[b]
                    .median_composite
                    .total_cmp(&summary[a].median_composite),
            )
            .then(a.cmp(&b))
    });
    for (pos, &i) in order.iter().enumerate() {
        summary[i].ranking = pos + 1;
    }
    write_rows(&dir.join("ablation_runs.csv"), &runs, false)?;
    write_rows(&dir.join("ablation.csv"), &summary, false)?;
    let report = AblationReport { runs, summary };
    write_json(&dir.join("ablation.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            ExperimentConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(matches!(
            ExperimentConfig::preset("nope"),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn overlay_keeps_unmentioned_fields() {
        let base = ExperimentConfig::preset("acc").unwrap();
        let cfg = base
            .overlay_toml("iterations = 3\n[reward]\nbeta = 0.5\n")
            .unwrap();
        assert_eq!(cfg.iterations, 3);
        assert_eq!(cfg.reward.beta, 0.5);
        assert_eq!(cfg.reward.alpha, 0.8);
        assert_eq!(cfg.space, base.space);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ExperimentConfig::preset("surrogate").unwrap();
        assert_eq!(
            ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(),
            cfg
        );
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn ranks_and_median() {
        assert_eq!(rank_arms(&[0.5, 0.9, 0.5, 0.1]), vec![2, 1, 3, 4]);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
