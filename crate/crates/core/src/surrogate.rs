//! Tabular stand-in for child training: every point of a small search space maps
//! to stored per-group accuracies, with one planted optimum.
//!
//! Accuracies rise with the fraction of tokens a point shares with the planted
//! optimum, plus seeded jitter, so the landscape is correlated the way real
//! architecture spaces tend to be. Non-optimal points stay at or below 0.8 while
//! the optimum gets 0.95 in every group, which makes it the unique reward
//! maximizer for any reward with `alpha > 0`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::controller::{reward_from, RewardConfig};
use crate::error::{Error, Result};
use crate::evaluator::{EvalReport, FairnessConfig};
use crate::search_space::{
    point_text, ArchitectureEncoding, BgmSpec, SearchSpace, SearchSpaceConfig,
};
use crate::seed::derive_seed;

pub const DEFAULT_CAP: u64 = 10_000;
pub const OPTIMUM_ACCURACY: f64 = 0.95;
const CEILING: f64 = 0.8;
const JITTER: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateTable {
    entries: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
    group_sizes: Vec<usize>,
    seed: u64,
    noise: f64,
}

/// [`build_table_with_cap`] with the default cap of 10,000 points.
pub fn build_table(
    cfg: &SearchSpaceConfig,
    group_sizes: &[usize],
    seed: u64,
) -> Result<SurrogateTable> {
    build_table_with_cap(cfg, group_sizes, seed, DEFAULT_CAP)
}

pub fn build_table_with_cap(
    cfg: &SearchSpaceConfig,
    group_sizes: &[usize],
    seed: u64,
    cap: u64,
) -> Result<SurrogateTable> {
    let space = SearchSpace::new(cfg.clone(), group_sizes)?;
    let count = space.count()?;
    if count > cap {
        return Err(Error::Size(format!(
            "search space has {count} points, surrogate cap is {cap}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let planted = rng.gen_range(0..count);
    let (pb, pa) = space.point(planted)?;
    let target = space.encode(&pb, &pa)?;
    let privileged = FairnessConfig::default().privileged_group(group_sizes);
    let mut entries = Vec::with_capacity(count as usize);
    for (i, (bgm, arch)) in space.iter()?.enumerate() {
        let key = point_text(&bgm, &arch);
        if i as u64 == planted {
            entries.push((key, vec![OPTIMUM_ACCURACY; group_sizes.len()]));
            continue;
        }
        let tokens = space.encode(&bgm, &arch)?;
        let shared = tokens.iter().zip(&target).filter(|(a, b)| a == b).count();
        let s = shared as f64 / tokens.len() as f64;
        let acc = (0..group_sizes.len())
            .map(|g| {
                let (lo, hi) = if g == privileged {
                    (0.55, 0.8)
                } else {
                    (0.3, 0.7)
                };
                let a = lo + (hi - lo) * s + rng.gen_range(-JITTER..JITTER);
                a.clamp(0.0, CEILING)
            })
            .collect();
        entries.push((key, acc));
    }
    SurrogateTable::from_entries(entries, group_sizes.to_vec(), seed)
}

impl SurrogateTable {
    pub fn from_entries(
        entries: Vec<(String, Vec<f64>)>,
        group_sizes: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (key, acc)) in entries.iter().enumerate() {
            if acc.len() != group_sizes.len() || acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Config(format!(
                    "bad surrogate accuracies for {key}: {acc:?}"
                )));
            }
            if index.insert(key.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate surrogate entry {key}")));
            }
        }
        Ok(SurrogateTable {
            entries,
            index,
            group_sizes,
            seed,
            noise: 0.0,
        })
    }

    /// Same table, with Gaussian evaluation noise of standard deviation `scale`.
    pub fn with_noise(mut self, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("noise scale {scale} must be >= 0")));
        }
        self.noise = scale;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn accuracies(&self, key: &str) -> Option<&[f64]> {
        self.index.get(key).map(|&i| self.entries[i].1.as_slice())
    }

    /// Reward configuration under which the planted optimum is strictly best.
    pub fn reference_reward() -> RewardConfig {
        RewardConfig::fair()
    }

    fn report_for(&self, acc: &[f64]) -> Result<EvalReport> {
        EvalReport::from_group_accuracies(acc, &self.group_sizes, &FairnessConfig::default())
    }

    /// Entry with the highest reward under `cfg`; the first one on ties.
    pub fn best_under(&self, cfg: &RewardConfig) -> Result<(&str, f64)> {
        let mut best: Option<(&str, f64)> = None;
        for (key, acc) in &self.entries {
            let r = self.report_for(acc)?;
            let reward = reward_from(r.overall_acc, r.unfairness, cfg);
            if best.map_or(true, |(_, b)| reward > b) {
                best = Some((key, reward));
            }
        }
        best.ok_or_else(|| Error::Lookup {
            kind: "surrogate entry",
            name: "<empty table>".into(),
        })
    }

    /// The planted optimum: the unique entry with every group at 0.95.
    pub fn optimum(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, a)| a.iter().all(|&v| v == OPTIMUM_ACCURACY))
            .map(|(k, _)| k.as_str())
    }

    /// Writes `#seed=` and `#group_sizes=` header lines, then
    /// `encoding,acc_g1..acc_gK` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let sizes: Vec<String> = self.group_sizes.iter().map(usize::to_string).collect();
        let mut out = format!("#seed={}\n#group_sizes={}\n", self.seed, sizes.join(","));
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["encoding".to_string()];
        header.extend((1..=self.group_sizes.len()).map(|g| format!("acc_g{g}")));
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for (key, acc) in &self.entries {
            let mut row = vec![key.clone()];
            row.extend(acc.iter().map(|a| format!("{a:?}")));
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        let body = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        out.push_str(&String::from_utf8(body).map_err(|e| Error::Parse(e.to_string()))?);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seed = None;
        let mut sizes = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some(v) = line.strip_prefix("#seed=") {
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|e| Error::Parse(format!("seed: {e}")))?,
                );
            } else if let Some(v) = line.strip_prefix("#group_sizes=") {
                sizes = Some(
                    v.split(',')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Parse(format!("group sizes: {e}")))?,
                );
            }
        }
        let (seed, sizes) = match (seed, sizes) {
            (Some(s), Some(g)) => (s, g),
            _ => {
                return Err(Error::Parse(format!(
                    "{}: missing surrogate header",
                    path.display()
                )))
            }
        };
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let key = rec.get(0).unwrap_or_default().to_string();
            let acc = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("{key}: {e}")))?;
            entries.push((key, acc));
        }
        SurrogateTable::from_entries(entries, sizes, seed)
    }
}

/// Report for `(bgm, arch)` from stored accuracies.
pub fn surrogate_evaluate(
    table: &SurrogateTable,
    bgm: &BgmSpec,
    arch: &ArchitectureEncoding,
) -> Result<EvalReport> {
    let key = point_text(bgm, arch);
    let acc = table.accuracies(&key).ok_or_else(|| Error::Lookup {
        kind: "surrogate entry",
        name: key.clone(),
    })?;
    table.report_for(acc)
}

/// As [`surrogate_evaluate`], perturbing each group accuracy with the table's
/// noise scale (clamped to [0, 1]). A zero scale returns the stored values.
pub fn surrogate_evaluate_noisy(
    table: &SurrogateTable,
    bgm: &BgmSpec,
    arch: &ArchitectureEncoding,
    seed: u64,
) -> Result<EvalReport> {
    if table.noise == 0.0 {
        return surrogate_evaluate(table, bgm, arch);
    }
    let key = point_text(bgm, arch);
    let acc = table.accuracies(&key).ok_or_else(|| Error::Lookup {
        kind: "surrogate entry",
        name: key.clone(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = acc
        .iter()
        .map(|a| (a + table.noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
        .collect();
    table.report_for(&noisy)
}
