//! Grouped datasets, the synthetic biased generator, and batch composition.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::search_space::BgmSpec;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            _ => None,
        }
    }
}

/// Labeled feature tensors partitioned into sensitive groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    shape: [usize; 3],
    features: Vec<f32>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    num_groups: usize,
    num_classes: usize,
    split: Split,
}

impl GroupedDataset {
    pub fn new(
        shape: [usize; 3],
        features: Vec<f32>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        num_groups: usize,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || features.len() != labels.len() * per || labels.len() != groups.len() {
            return Err(Error::Config(format!(
                "dataset buffers disagree: {} features, {} labels, {} groups, shape {shape:?}",
                features.len(),
                labels.len(),
                groups.len()
            )));
        }
        if let Some(g) = groups.iter().find(|&&g| g >= num_groups) {
            return Err(Error::Config(format!("group index {g} >= {num_groups}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {l} >= {num_classes}")));
        }
        Ok(GroupedDataset {
            shape,
            features,
            labels,
            groups,
            num_groups,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups];
        for &g in &self.groups {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn indices_of_group(&self, group: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.groups[i] == group)
            .collect()
    }

    /// Stacks the given samples into an `[n, C, S, S]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.features(i));
        }
        let [c, h, w] = self.shape;
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sizes agree")
    }

    /// Keeps only the samples of one group, for single-group experiments.
    pub fn restrict_to_group(&self, group: usize) -> Result<Self> {
        let idx = self.indices_of_group(group);
        let mut features = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in &idx {
            features.extend_from_slice(self.features(i));
        }
        GroupedDataset::new(
            self.shape,
            features,
            idx.iter().map(|&i| self.labels[i]).collect(),
            vec![0; idx.len()],
            1,
            self.num_classes,
            self.split,
        )
    }
}

/// Per-group generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupProfile {
    /// Training samples.
    pub count: usize,
    /// Validation samples.
    pub val_count: usize,
    /// Scale of the class-conditional mean.
    pub shift: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Weight in [0, 1] of group-specific class prototypes over the shared ones.
    pub distinct: f64,
}

/// Synthetic biased dataset description. Each class has a shared prototype;
/// each group blends in its own prototype and adds a constant per-channel tone
/// offset. Groups with fewer samples and more distinct prototypes are harder
/// to fit under ordinary batching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBiasConfig {
    pub groups: Vec<GroupProfile>,
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub tone: f64,
    pub seed: u64,
}

impl Default for SyntheticBiasConfig {
    fn default() -> Self {
        SyntheticBiasConfig {
            groups: vec![
                GroupProfile {
                    count: 900,
                    val_count: 600,
                    shift: 0.6,
                    noise: 1.0,
                    distinct: 0.0,
                },
                GroupProfile {
                    count: 100,
                    val_count: 200,
                    shift: 0.6,
                    noise: 1.0,
                    distinct: 0.8,
                },
            ],
            num_classes: 3,
            channels: 3,
            size: 6,
            tone: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticBiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config(
                "synthetic config needs at least one group".into(),
            ));
        }
        if self.num_classes < 2 || self.channels == 0 || self.size == 0 {
            return Err(Error::Config("need >= 2 classes and positive shape".into()));
        }
        for (g, p) in self.groups.iter().enumerate() {
            if p.count < self.num_classes || p.val_count < self.num_classes {
                return Err(Error::Config(format!(
                    "group {g}: counts ({}, {}) smaller than num_classes {}",
                    p.count, p.val_count, self.num_classes
                )));
            }
            if !(p.noise > 0.0) || !(0.0..=1.0).contains(&p.distinct) {
                return Err(Error::Config(format!(
                    "group {g}: noise must be > 0 and distinct in [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }
}

/// Generates `(train, validation)` deterministically from `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticBiasConfig) -> Result<(GroupedDataset, GroupedDataset)> {
    cfg.validate()?;
    let per = cfg.channels * cfg.size * cfg.size;
    let plane = cfg.size * cfg.size;
    let k = cfg.groups.len();
    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let normal_vec = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let shared: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| normal_vec(&mut proto_rng, per))
        .collect();
    let specific: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| {
            (0..cfg.num_classes)
                .map(|_| normal_vec(&mut proto_rng, per))
                .collect()
        })
        .collect();
    let tones: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            normal_vec(&mut proto_rng, cfg.channels)
                .iter()
                .map(|t| t * cfg.tone)
                .collect()
        })
        .collect();

    let make = |split: Split, tag: u64| -> Result<GroupedDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, tag]));
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for (g, p) in cfg.groups.iter().enumerate() {
            let n = match split {
                Split::Train => p.count,
                Split::Validation => p.val_count,
            };
            let (a, b) = (1.0 - p.distinct, p.distinct);
            let norm = (a * a + b * b).sqrt();
            for i in 0..n {
                // Round-robin labels keep every class present in every group.
                let label = i % cfg.num_classes;
                let s = &shared[label];
                let q = &specific[g][label];
                for j in 0..per {
                    let mean = p.shift * (a * s[j] + b * q[j]) / norm + tones[g][j / plane];
                    let noise: f64 = rng.sample(StandardNormal);
                    features.push((mean + p.noise * noise) as f32);
                }
                labels.push(label);
                groups.push(g);
            }
        }
        GroupedDataset::new(
            cfg.shape(),
            features,
            labels,
            groups,
            k,
            cfg.num_classes,
            split,
        )
    };
    Ok((make(Split::Train, 0)?, make(Split::Validation, 1)?))
}

/// Per-group counts per batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub counts: Vec<usize>,
}

impl BatchPlan {
    /// `n_i = round(o_i · BS)` by largest remainder (ties to the lower group
    /// index), then lifted so every group with `o_i > 0` gets at least one slot.
    pub fn new(bgm: &BgmSpec, batch_size: usize) -> Result<Self> {
        let ratios = bgm.ratios();
        let active = ratios.iter().filter(|&&o| o > 0.0).count();
        if batch_size < active {
            return Err(Error::Plan(format!(
                "batch size {batch_size} smaller than {active} active groups"
            )));
        }
        let exact: Vec<f64> = ratios.iter().map(|o| o * batch_size as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..ratios.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
        });
        for &i in order.iter().take(batch_size.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        for i in 0..counts.len() {
            if ratios[i] > 0.0 && counts[i] == 0 {
                let donor = (0..counts.len())
                    .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                    .expect("non-empty");
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        Ok(BatchPlan { batch_size, counts })
    }
}

/// Splits one epoch into batches of sample indices, `counts[i]` from group `i`
/// in every batch. Each group is walked in a seeded random order; a group that
/// runs out before the epoch ends is topped up by sampling with replacement.
/// The epoch is long enough for every group to be visited in full.
pub fn make_batches(
    ds: &GroupedDataset,
    bgm: &BgmSpec,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if bgm.groups() != ds.num_groups() {
        return Err(Error::Plan(format!(
            "{} ratios for {} groups",
            bgm.groups(),
            ds.num_groups()
        )));
    }
    let plan = BatchPlan::new(bgm, batch_size)?;
    let members: Vec<Vec<usize>> = (0..ds.num_groups())
        .map(|g| ds.indices_of_group(g))
        .collect();
    for (g, m) in members.iter().enumerate() {
        if m.is_empty() && plan.counts[g] > 0 {
            return Err(Error::Plan(format!(
                "group {g} has no samples but ratio > 0"
            )));
        }
    }
    let n_batches = members
        .iter()
        .zip(&plan.counts)
        .filter(|(_, &c)| c > 0)
        .map(|(m, &c)| m.len().div_ceil(c))
        .max()
        .unwrap_or(0);
    let mut streams: Vec<(Vec<usize>, ChaCha8Rng)> = members
        .iter()
        .enumerate()
        .map(|(g, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[g as u64]));
            let mut order = m.clone();
            order.shuffle(&mut rng);
            (order, rng)
        })
        .collect();
    let mut cursors = vec![0usize; members.len()];
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for (g, &count) in plan.counts.iter().enumerate() {
            let (order, rng) = &mut streams[g];
            for _ in 0..count {
                if cursors[g] < order.len() {
                    batch.push(order[cursors[g]]);
                    cursors[g] += 1;
                } else {
                    batch.push(order[rng.gen_range(0..order.len())]);
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn ingest(row: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        row,
        reason: reason.into(),
    }
}

struct ManifestHeader {
    shape: [usize; 3],
    groups: Option<usize>,
    classes: Option<usize>,
}

fn parse_header(text: &str) -> Result<(ManifestHeader, String)> {
    let mut shape = None;
    let mut groups = None;
    let mut classes = None;
    let mut body = String::new();
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix('#') {
            let (k, v) = meta
                .split_once('=')
                .ok_or_else(|| ingest(0, format!("bad header `{line}`")))?;
            let nums: Vec<usize> = v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| ingest(0, format!("bad number in `{line}`")))
                })
                .collect::<Result<_>>()?;
            match (k.trim(), nums.as_slice()) {
                ("shape", &[c, h, w]) => shape = Some([c, h, w]),
                ("groups", &[g]) => groups = Some(g),
                ("classes", &[c]) => classes = Some(c),
                _ => return Err(ingest(0, format!("unknown header `{line}`"))),
            }
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let shape = shape.ok_or_else(|| ingest(0, "missing `#shape=C,S,S` header"))?;
    Ok((
        ManifestHeader {
            shape,
            groups,
            classes,
        },
        body,
    ))
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    id: String,
    group: usize,
    label: usize,
    split: String,
    path: String,
}

/// Reads one split from a manifest CSV (`id,group,label,split,path`, preceded by
/// `#shape=C,S,S` and optionally `#groups=K` / `#classes=N`). Tensor paths are
/// resolved against `root`; each file is raw little-endian `f32`.
pub fn load_dataset(root: &Path, manifest: &Path, split: Split) -> Result<GroupedDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let (header, body) = parse_header(&text)?;
    let per: usize = header.shape.iter().product();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| ingest(row, e.to_string()))?;
        let s = Split::parse(&rec.split)
            .ok_or_else(|| ingest(row, format!("unknown split `{}`", rec.split)))?;
        if let Some(k) = header.groups {
            if rec.group >= k {
                return Err(ingest(
                    row,
                    format!("unknown group index {} (K = {k})", rec.group),
                ));
            }
        }
        if let Some(c) = header.classes {
            if rec.label >= c {
                return Err(ingest(
                    row,
                    format!("unknown label index {} ({c} classes)", rec.label),
                ));
            }
        }
        rows.push((row, rec, s));
    }
    if rows.is_empty() {
        return Err(ingest(0, "no samples"));
    }
    let num_groups = header
        .groups
        .unwrap_or_else(|| rows.iter().map(|r| r.1.group + 1).max().unwrap_or(1));
    let num_classes = header
        .classes
        .unwrap_or_else(|| rows.iter().map(|r| r.1.label + 1).max().unwrap_or(2).max(2));
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (row, rec, s) in rows.into_iter().filter(|r| r.2 == split) {
        let path = root.join(&rec.path);
        let bytes = fs::read(&path)
            .map_err(|e| ingest(row, format!("missing file {}: {e}", path.display())))?;
        if bytes.len() != per * 4 {
            return Err(ingest(
                row,
                format!(
                    "shape mismatch for `{}`: {} values, expected {per}",
                    rec.id,
                    bytes.len() / 4
                ),
            ));
        }
        debug_assert_eq!(s, split);
        features.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        labels.push(rec.label);
        groups.push(rec.group);
    }
    if labels.is_empty() {
        return Err(ingest(
            0,
            format!("no samples in split `{}`", split.as_str()),
        ));
    }
    GroupedDataset::new(
        header.shape,
        features,
        labels,
        groups,
        num_groups,
        num_classes,
        split,
    )
}

/// Writes datasets as tensor files plus one manifest readable by [`load_dataset`].
pub fn write_dataset(root: &Path, manifest: &Path, splits: &[&GroupedDataset]) -> Result<()> {
    let first = splits
        .first()
        .ok_or_else(|| Error::Config("nothing to write".into()))?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let [c, h, w] = first.shape();
    let mut out = format!(
        "#shape={c},{h},{w}\n#groups={}\n#classes={}\n",
        first.num_groups(),
        first.num_classes()
    );
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["id", "group", "label", "split", "path"])
        .map_err(|e| Error::csv(manifest, e))?;
    for ds in splits {
        for i in 0..ds.len() {
            let id = format!("{}-{i:06}", ds.split().as_str());
            let file = format!("{id}.f32");
            let bytes: Vec<u8> = ds
                .features(i)
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            let path = root.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            writer
                .write_record([
                    id,
                    ds.groups()[i].to_string(),
                    ds.labels()[i].to_string(),
                    ds.split().as_str().to_string(),
                    file,
                ])
                .map_err(|e| Error::csv(manifest, e))?;
        }
    }
    let body = writer
        .into_inner()
        .map_err(|e| Error::Config(format!("csv flush: {e}")))?;
    out.push_str(&String::from_utf8_lossy(&body));
    fs::write(manifest, out).map_err(|e| Error::io(manifest, e))
}
