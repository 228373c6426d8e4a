//! Joint batch-composition / architecture search space.
//!
//! A point in the space is a pair ([`BgmSpec`], [`ArchitectureEncoding`]). The
//! controller addresses points through a fixed-length token sequence: one slot
//! choosing a batch-ratio candidate, followed by four slots per block
//! (type, CH2, CH3, kernel). A block's input width (CH1) is never searched; it is
//! the output width of the nearest preceding active block, or the stem width.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for the sum-to-one check on batch ratios.
pub const RATIO_SUM_TOL: f64 = 1e-9;

/// Number of token slots per block: type, CH2, CH3, kernel.
pub const SLOTS_PER_BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockType {
    /// Inverted residual: 1x1 expand, depthwise KxK, 1x1 project.
    #[serde(rename = "MB")]
    Mb,
    /// Depthwise-separable: depthwise KxK, 1x1 pointwise.
    #[serde(rename = "DB")]
    Db,
    /// Residual pair of KxK convolutions.
    #[serde(rename = "RB")]
    Rb,
    /// Plain pair of KxK convolutions.
    #[serde(rename = "CB")]
    Cb,
    #[serde(rename = "SKIP")]
    Skip,
}

impl BlockType {
    pub const ALL: [BlockType; 5] = [
        BlockType::Mb,
        BlockType::Db,
        BlockType::Rb,
        BlockType::Cb,
        BlockType::Skip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockType::Mb => "MB",
            BlockType::Db => "DB",
            BlockType::Rb => "RB",
            BlockType::Cb => "CB",
            BlockType::Skip => "SKIP",
        }
    }

    /// Whether the block reads the CH2 slot.
    pub fn uses_ch2(self) -> bool {
        matches!(self, BlockType::Mb | BlockType::Rb | BlockType::Cb)
    }
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown block type `{s}`")))
    }
}

/// One searched block. Ignored hyperparameters are normalized to 0 so that
/// choices differing only in unused slots compare equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockChoice {
    pub block_type: BlockType,
    pub ch2: usize,
    pub ch3: usize,
    pub kernel: usize,
}

impl BlockChoice {
    pub fn new(block_type: BlockType, ch2: usize, ch3: usize, kernel: usize) -> Self {
        BlockChoice {
            block_type,
            ch2,
            ch3,
            kernel,
        }
        .normalized()
    }

    pub fn skip() -> Self {
        BlockChoice {
            block_type: BlockType::Skip,
            ch2: 0,
            ch3: 0,
            kernel: 0,
        }
    }

    pub fn is_skip(&self) -> bool {
        self.block_type == BlockType::Skip
    }

    pub fn normalized(self) -> Self {
        match self.block_type {
            BlockType::Skip => BlockChoice::skip(),
            BlockType::Db => BlockChoice { ch2: 0, ..self },
            _ => self,
        }
    }
}

impl fmt::Display for BlockChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block_type {
            BlockType::Skip => f.write_str("SKIP"),
            BlockType::Db => write!(f, "DB(ch3={},k={})", self.ch3, self.kernel),
            t => write!(
                f,
                "{}(ch2={},ch3={},k={})",
                t, self.ch2, self.ch3, self.kernel
            ),
        }
    }
}

impl FromStr for BlockChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let close = s
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Parse(format!("unterminated block `{s}`")))?;
                (&s[..open], &close[open + 1..])
            }
            None => (s, ""),
        };
        let block_type: BlockType = name.parse()?;
        if block_type == BlockType::Skip {
            return Ok(BlockChoice::skip());
        }
        let (mut ch2, mut ch3, mut kernel) = (0, None, None);
        for kv in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad block argument `{kv}`")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad integer in `{kv}`")))?;
            match k.trim() {
                "ch2" => ch2 = v,
                "ch3" => ch3 = Some(v),
                "k" => kernel = Some(v),
                other => return Err(Error::Parse(format!("unknown block argument `{other}`"))),
            }
        }
        let ch3 = ch3.ok_or_else(|| Error::Parse(format!("missing ch3 in `{s}`")))?;
        let kernel = kernel.ok_or_else(|| Error::Parse(format!("missing k in `{s}`")))?;
        if block_type.uses_ch2() && ch2 == 0 {
            return Err(Error::Parse(format!("missing ch2 in `{s}`")));
        }
        Ok(BlockChoice::new(block_type, ch2, ch3, kernel))
    }
}

/// A child network: a linear array of blocks behind a stem and ahead of a
/// pooled linear head.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchitectureEncoding {
    pub blocks: Vec<BlockChoice>,
    pub stem_channels: usize,
    pub num_classes: usize,
}

impl ArchitectureEncoding {
    pub fn new(blocks: Vec<BlockChoice>, stem_channels: usize, num_classes: usize) -> Result<Self> {
        if stem_channels == 0 || num_classes == 0 {
            return Err(Error::Config(
                "stem_channels and num_classes must be positive".into(),
            ));
        }
        let blocks: Vec<_> = blocks.into_iter().map(BlockChoice::normalized).collect();
        if blocks.iter().all(BlockChoice::is_skip) {
            return Err(Error::Config(
                "architecture needs at least one non-SKIP block".into(),
            ));
        }
        for b in blocks.iter().filter(|b| !b.is_skip()) {
            if b.ch3 == 0 || b.kernel % 2 == 0 || (b.block_type.uses_ch2() && b.ch2 == 0) {
                return Err(Error::Config(format!("invalid block {b}")));
            }
        }
        Ok(ArchitectureEncoding {
            blocks,
            stem_channels,
            num_classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Effective CH1 per block; `None` for SKIP slots.
    pub fn input_channels(&self) -> Vec<Option<usize>> {
        let mut current = self.stem_channels;
        self.blocks
            .iter()
            .map(|b| {
                if b.is_skip() {
                    None
                } else {
                    let ch1 = current;
                    current = b.ch3;
                    Some(ch1)
                }
            })
            .collect()
    }

    /// Width of the feature map fed to the head.
    pub fn output_channels(&self) -> usize {
        self.blocks
            .iter()
            .rev()
            .find(|b| !b.is_skip())
            .map_or(self.stem_channels, |b| b.ch3)
    }

    pub fn active_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| !b.is_skip()).count()
    }

    /// `blocks=[...]` part of the canonical text form.
    pub fn blocks_text(&self) -> String {
        let inner: Vec<String> = self.blocks.iter().map(ToString::to_string).collect();
        format!("blocks=[{}]", inner.join(","))
    }

    /// Parses a `blocks=[...]` string (an optional `;ratios=[...]` suffix is ignored).
    pub fn parse_blocks(text: &str, stem_channels: usize, num_classes: usize) -> Result<Self> {
        let blocks_part = text.split(';').next().unwrap_or_default();
        let list = section(blocks_part, "blocks")?;
        let blocks = split_top_level(list)
            .into_iter()
            .map(str::parse)
            .collect::<Result<Vec<BlockChoice>>>()?;
        ArchitectureEncoding::new(blocks, stem_channels, num_classes)
    }
}

impl fmt::Display for ArchitectureEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.blocks_text())
    }
}

fn section<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    let rest = text
        .trim()
        .strip_prefix(key)
        .and_then(|r| r.trim_start().strip_prefix('='))
        .ok_or_else(|| Error::Parse(format!("expected `{key}=[...]` in `{text}`")))?;
    rest.trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::Parse(format!("expected bracketed list in `{text}`")))
}

fn split_top_level(list: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in list.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(list[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = list[start..].trim();
    if !last.is_empty() {
        out.push(last);
    }
    out
}

/// Per-group batch composition ratios `o_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BgmSpec {
    ratios: Vec<f64>,
}

impl BgmSpec {
    /// Ratios must already sum to one and lie in (0, 1].
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Ratios("no groups".into()));
        }
        if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Ratios(format!("ratio {r} outside (0, 1]")));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > RATIO_SUM_TOL {
            return Err(Error::Ratios(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(BgmSpec { ratios })
    }

    /// Normalizes arbitrary positive weights to sum to one.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Ratios(format!(
                "weights {weights:?} must be positive"
            )));
        }
        let sum: f64 = weights.iter().sum();
        BgmSpec::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn equal(groups: usize) -> Result<Self> {
        BgmSpec::from_weights(&vec![1.0; groups])
    }

    pub fn proportional(group_sizes: &[usize]) -> Result<Self> {
        let w: Vec<f64> = group_sizes.iter().map(|&s| s as f64).collect();
        BgmSpec::from_weights(&w)
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn groups(&self) -> usize {
        self.ratios.len()
    }

    /// Checks the size-ordering rule: a group no larger than another never gets a
    /// larger share of the batch. Equal sizes constrain nothing.
    pub fn check_ordering(&self, group_sizes: &[usize]) -> Result<()> {
        if group_sizes.len() != self.ratios.len() {
            return Err(Error::Ratios(format!(
                "{} ratios for {} groups",
                self.ratios.len(),
                group_sizes.len()
            )));
        }
        for i in 0..self.ratios.len() {
            for j in 0..self.ratios.len() {
                if i != j
                    && group_sizes[i] < group_sizes[j]
                    && self.ratios[i] > self.ratios[j] + RATIO_SUM_TOL
                {
                    return Err(Error::Constraint {
                        smaller: i,
                        larger: j,
                        smaller_size: group_sizes[i],
                        larger_size: group_sizes[j],
                        smaller_ratio: self.ratios[i],
                        larger_ratio: self.ratios[j],
                    });
                }
            }
        }
        Ok(())
    }

    /// Per-group loss weight `max_j o_j / o_i`.
    pub fn loss_weights(&self) -> Vec<f64> {
        let max = self.ratios.iter().copied().fold(f64::MIN, f64::max);
        self.ratios.iter().map(|o| max / o).collect()
    }

    /// `ratios=[...]` part of the canonical text form.
    pub fn ratios_text(&self) -> String {
        let inner: Vec<String> = self.ratios.iter().map(|r| format!("{r}")).collect();
        format!("ratios=[{}]", inner.join(","))
    }

    pub fn parse_ratios(text: &str) -> Result<Self> {
        let part = text
            .split(';')
            .find(|p| p.trim_start().starts_with("ratios"))
            .ok_or_else(|| Error::Parse(format!("no ratios in `{text}`")))?;
        let list = section(part, "ratios")?;
        let ratios = list
            .split(',')
            .map(|r| {
                r.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad ratio `{r}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        BgmSpec::new(ratios)
    }
}

/// Canonical text of a search-space point, e.g.
/// `blocks=[MB(ch2=16,ch3=24,k=3),SKIP];ratios=[0.5,0.5]`.
pub fn point_text(bgm: &BgmSpec, arch: &ArchitectureEncoding) -> String {
    format!("{};{}", arch.blocks_text(), bgm.ratios_text())
}

pub fn parse_point(
    text: &str,
    stem_channels: usize,
    num_classes: usize,
) -> Result<(BgmSpec, ArchitectureEncoding)> {
    Ok((
        BgmSpec::parse_ratios(text)?,
        ArchitectureEncoding::parse_blocks(text, stem_channels, num_classes)?,
    ))
}

/// A candidate ratio assignment on the search grid, resolved against group sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioCandidate {
    /// `o_i ∝ |D_i|`, i.e. ordinary shuffled batching.
    Proportional,
    /// `o_i = 1/K`.
    Equal,
    /// The smallest group gets this share; the rest split the remainder by size.
    MinorityShare(f64),
    /// Weights per group index, normalized to sum to one.
    Explicit(Vec<f64>),
}

impl RatioCandidate {
    pub fn resolve(&self, group_sizes: &[usize]) -> Result<BgmSpec> {
        let k = group_sizes.len();
        match self {
            RatioCandidate::Proportional => BgmSpec::proportional(group_sizes),
            RatioCandidate::Equal => BgmSpec::equal(k),
            RatioCandidate::MinorityShare(share) => {
                if !(*share > 0.0 && *share <= 1.0) {
                    return Err(Error::Ratios(format!(
                        "minority share {share} outside (0, 1]"
                    )));
                }
                if k == 1 {
                    return BgmSpec::new(vec![1.0]);
                }
                let minority = (0..k).min_by_key(|&i| group_sizes[i]).unwrap_or(0);
                let rest: usize = (0..k)
                    .filter(|&i| i != minority)
                    .map(|i| group_sizes[i])
                    .sum();
                let weights: Vec<f64> = (0..k)
                    .map(|i| {
                        if i == minority {
                            *share
                        } else {
                            (1.0 - share) * group_sizes[i] as f64 / rest as f64
                        }
                    })
                    .collect();
                BgmSpec::from_weights(&weights)
            }
            RatioCandidate::Explicit(weights) => {
                if weights.len() != k {
                    return Err(Error::Ratios(format!(
                        "explicit ratios {weights:?} for {k} groups"
                    )));
                }
                BgmSpec::from_weights(weights)
            }
        }
    }
}

/// Declarative description of the search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpaceConfig {
    pub depth: usize,
    pub block_types: Vec<BlockType>,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub ratio_grid: Vec<RatioCandidate>,
    pub groups: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        SearchSpaceConfig {
            depth: 6,
            block_types: BlockType::ALL.to_vec(),
            channels: vec![8, 16],
            kernels: vec![3, 5],
            ratio_grid: vec![
                RatioCandidate::Proportional,
                RatioCandidate::MinorityShare(0.125),
                RatioCandidate::MinorityShare(0.25),
                RatioCandidate::MinorityShare(0.375),
                RatioCandidate::MinorityShare(0.5),
            ],
            groups: 2,
            num_classes: 2,
            stem_channels: 8,
            input_channels: 3,
            input_size: 8,
        }
    }
}

impl SearchSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 {
            return fail("depth must be at least 1");
        }
        if self.block_types.is_empty() || self.channels.is_empty() || self.kernels.is_empty() {
            return fail("candidate lists must be non-empty");
        }
        if self.ratio_grid.is_empty() {
            return fail("ratio grid must be non-empty");
        }
        if self.block_types.iter().all(|t| *t == BlockType::Skip) {
            return fail("block types need at least one non-SKIP type");
        }
        let unique: HashSet<_> = self.block_types.iter().collect();
        if unique.len() != self.block_types.len() {
            return fail("duplicate block type");
        }
        if self.channels.iter().any(|&c| c == 0) {
            return fail("channel candidates must be positive");
        }
        if self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return fail("kernel candidates must be odd");
        }
        if self.groups == 0 || self.num_classes < 2 {
            return fail("need at least one group and two classes");
        }
        if self.stem_channels == 0 || self.input_channels == 0 || self.input_size == 0 {
            return fail("stem, input channels and input size must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SearchSpaceConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Slot count: one ratio slot plus four per block.
    pub fn schema_len(&self) -> usize {
        1 + SLOTS_PER_BLOCK * self.depth
    }

    fn median<T: Copy + Ord>(values: &[T]) -> T {
        let mut v = values.to_vec();
        v.sort_unstable();
        v[v.len() / 2]
    }
}

/// Forces at least one non-SKIP block: the last type slot masks SKIP when every
/// earlier type slot chose it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonEmptyRule {
    pub type_slots: Vec<usize>,
    pub skip_token: usize,
}

/// Candidate counts and masks for the controller's token slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSchema {
    pub slots: Vec<usize>,
    pub static_mask: Vec<Vec<bool>>,
    pub non_empty: Option<NonEmptyRule>,
}

impl TokenSchema {
    pub fn unconstrained(slots: Vec<usize>) -> Self {
        let static_mask = slots.iter().map(|&n| vec![true; n]).collect();
        TokenSchema {
            slots,
            static_mask,
            non_empty: None,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Tokens permitted at `slot` given the tokens already chosen.
    pub fn allowed(&self, slot: usize, prefix: &[usize]) -> Vec<bool> {
        let mut mask = self.static_mask[slot].clone();
        if let Some(rule) = &self.non_empty {
            if rule.type_slots.last() == Some(&slot)
                && rule.type_slots[..rule.type_slots.len() - 1]
                    .iter()
                    .all(|&s| prefix.get(s) == Some(&rule.skip_token))
            {
                mask[rule.skip_token] = false;
            }
        }
        mask
    }

    /// Stable digest of the slot layout, used to tag checkpoints.
    pub fn fingerprint(&self) -> String {
        let masks: Vec<String> = self
            .static_mask
            .iter()
            .map(|m| m.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect();
        let rule = self
            .non_empty
            .as_ref()
            .map(|r| format!("{:?}/{}", r.type_slots, r.skip_token))
            .unwrap_or_default();
        format!(
            "slots={:?};masks={};rule={}",
            self.slots,
            masks.join(","),
            rule
        )
    }
}

/// A search space bound to concrete group sizes.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    cfg: SearchSpaceConfig,
    group_sizes: Vec<usize>,
    resolved: Vec<Option<BgmSpec>>,
    ratio_allowed: Vec<bool>,
    block_options: Vec<BlockChoice>,
}

impl SearchSpace {
    /// Resolves the ratio grid against `group_sizes`. Grid points that break the
    /// ordering rule, or duplicate an earlier point, are masked out of the
    /// controller's candidates.
    pub fn new(cfg: SearchSpaceConfig, group_sizes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if group_sizes.len() != cfg.groups {
            return Err(Error::Config(format!(
                "config declares {} groups, dataset has {}",
                cfg.groups,
                group_sizes.len()
            )));
        }
        if group_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(
                "every group needs at least one sample".into(),
            ));
        }
        let resolved: Vec<Option<BgmSpec>> = cfg
            .ratio_grid
            .iter()
            .map(|c| Self::resolve_candidate(c, group_sizes).ok())
            .collect();
        let mut seen: Vec<&BgmSpec> = Vec::new();
        let mut ratio_allowed = Vec::with_capacity(resolved.len());
        for r in &resolved {
            let ok = match r {
                Some(spec) if !seen.iter().any(|s| s.ratios() == spec.ratios()) => {
                    seen.push(spec);
                    true
                }
                _ => false,
            };
            ratio_allowed.push(ok);
        }
        if !ratio_allowed.iter().any(|&a| a) {
            return Err(Error::Config(
                "ratio grid has no assignment satisfying the ordering constraint".into(),
            ));
        }
        let block_options = Self::block_options(&cfg);
        Ok(SearchSpace {
            cfg,
            group_sizes: group_sizes.to_vec(),
            resolved,
            ratio_allowed,
            block_options,
        })
    }

    fn resolve_candidate(c: &RatioCandidate, group_sizes: &[usize]) -> Result<BgmSpec> {
        let spec = c.resolve(group_sizes)?;
        spec.check_ordering(group_sizes)?;
        Ok(spec)
    }

    fn block_options(cfg: &SearchSpaceConfig) -> Vec<BlockChoice> {
        let mut opts = Vec::new();
        if cfg.block_types.contains(&BlockType::Skip) {
            opts.push(BlockChoice::skip());
        }
        for &t in &cfg.block_types {
            match t {
                BlockType::Skip => {}
                t => {
                    let ch2s: &[usize] = if t.uses_ch2() { &cfg.channels } else { &[0] };
                    for &ch2 in ch2s {
                        for &ch3 in &cfg.channels {
                            for &k in &cfg.kernels {
                                opts.push(BlockChoice::new(t, ch2, ch3, k));
                            }
                        }
                    }
                }
            }
        }
        opts
    }

    pub fn config(&self) -> &SearchSpaceConfig {
        &self.cfg
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// Ratio candidates that the controller may choose.
    pub fn valid_ratios(&self) -> Vec<&BgmSpec> {
        self.resolved
            .iter()
            .zip(&self.ratio_allowed)
            .filter_map(|(r, &ok)| if ok { r.as_ref() } else { None })
            .collect()
    }

    pub fn schema(&self) -> TokenSchema {
        let cfg = &self.cfg;
        let mut slots = vec![cfg.ratio_grid.len()];
        let mut static_mask = vec![self.ratio_allowed.clone()];
        let mut type_slots = Vec::with_capacity(cfg.depth);
        for block in 0..cfg.depth {
            type_slots.push(1 + block * SLOTS_PER_BLOCK);
            for n in [
                cfg.block_types.len(),
                cfg.channels.len(),
                cfg.channels.len(),
                cfg.kernels.len(),
            ] {
                slots.push(n);
                static_mask.push(vec![true; n]);
            }
        }
        let non_empty = cfg
            .block_types
            .iter()
            .position(|&t| t == BlockType::Skip)
            .map(|skip_token| NonEmptyRule {
                type_slots,
                skip_token,
            });
        TokenSchema {
            slots,
            static_mask,
            non_empty,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let expected = self.cfg.schema_len();
        if tokens.len() != expected {
            return Err(Error::SchemaLength {
                expected,
                actual: tokens.len(),
            });
        }
        let cfg = &self.cfg;
        for (slot, &token) in tokens.iter().enumerate() {
            let candidates = if slot == 0 {
                cfg.ratio_grid.len()
            } else {
                match (slot - 1) % SLOTS_PER_BLOCK {
                    0 => cfg.block_types.len(),
                    1 | 2 => cfg.channels.len(),
                    _ => cfg.kernels.len(),
                }
            };
            if token >= candidates {
                return Err(Error::Schema {
                    slot,
                    token,
                    candidates,
                });
            }
        }
        Ok(())
    }

    /// Maps a token sequence to its (BgmSpec, architecture) pair.
    pub fn decode(&self, tokens: &[usize]) -> Result<(BgmSpec, ArchitectureEncoding)> {
        self.check_tokens(tokens)?;
        let cfg = &self.cfg;
        let bgm = match &self.resolved[tokens[0]] {
            Some(spec) => spec.clone(),
            None => Self::resolve_candidate(&cfg.ratio_grid[tokens[0]], &self.group_sizes)?,
        };
        let blocks = tokens[1..]
            .chunks(SLOTS_PER_BLOCK)
            .map(|t| {
                BlockChoice::new(
                    cfg.block_types[t[0]],
                    cfg.channels[t[1]],
                    cfg.channels[t[2]],
                    cfg.kernels[t[3]],
                )
            })
            .collect();
        let arch = ArchitectureEncoding::new(blocks, cfg.stem_channels, cfg.num_classes)?;
        Ok((bgm, arch))
    }

    /// Inverse of [`decode`](Self::decode) on normalized tokens: ignored slots
    /// encode as 0 and the first allowed grid index is used for the ratios.
    pub fn encode(&self, bgm: &BgmSpec, arch: &ArchitectureEncoding) -> Result<Vec<usize>> {
        let cfg = &self.cfg;
        if arch.depth() != cfg.depth {
            return Err(Error::Config(format!(
                "encoding depth {} != configured depth {}",
                arch.depth(),
                cfg.depth
            )));
        }
        let ratio_token = self
            .resolved
            .iter()
            .zip(&self.ratio_allowed)
            .position(|(r, &ok)| ok && r.as_ref().is_some_and(|s| s.ratios() == bgm.ratios()))
            .ok_or_else(|| Error::Lookup {
                kind: "ratio assignment",
                name: bgm.ratios_text(),
            })?;
        let index_of = |list: &[usize], v: usize, what: &'static str| {
            list.iter().position(|&x| x == v).ok_or(Error::Lookup {
                kind: what,
                name: v.to_string(),
            })
        };
        let mut tokens = vec![ratio_token];
        for b in &arch.blocks {
            let t = cfg
                .block_types
                .iter()
                .position(|&x| x == b.block_type)
                .ok_or_else(|| Error::Lookup {
                    kind: "block type",
                    name: b.block_type.to_string(),
                })?;
            tokens.push(t);
            if b.is_skip() {
                tokens.extend([0, 0, 0]);
                continue;
            }
            tokens.push(if b.block_type.uses_ch2() {
                index_of(&cfg.channels, b.ch2, "channel")?
            } else {
                0
            });
            tokens.push(index_of(&cfg.channels, b.ch3, "channel")?);
            tokens.push(index_of(&cfg.kernels, b.kernel, "kernel")?);
        }
        Ok(tokens)
    }

    /// Normalizes a token sequence: decode followed by encode.
    pub fn normalize(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let (bgm, arch) = self.decode(tokens)?;
        self.encode(&bgm, &arch)
    }

    /// Every token sequence that decodes to the same point as `tokens`: the
    /// normalized sequence with ignored slots (SKIP hyperparameters, DB's ch2)
    /// ranging over all their candidates.
    pub fn preimages(&self, tokens: &[usize]) -> Result<Vec<Vec<usize>>> {
        let norm = self.normalize(tokens)?;
        let slots = self.schema().slots;
        let mut free = vec![false; norm.len()];
        for b in 0..self.cfg.depth {
            let base = 1 + b * SLOTS_PER_BLOCK;
            let t = self.cfg.block_types[norm[base]];
            if t == BlockType::Skip {
                free[base + 1..base + SLOTS_PER_BLOCK]
                    .iter_mut()
                    .for_each(|f| *f = true);
            } else if !t.uses_ch2() {
                free[base + 1] = true;
            }
        }
        let mut out = vec![Vec::with_capacity(norm.len())];
        for (i, &tok) in norm.iter().enumerate() {
            let choices: Vec<usize> = if free[i] {
                (0..slots[i]).collect()
            } else {
                vec![tok]
            };
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    choices.iter().map(move |&c| {
                        let mut p = prefix.clone();
                        p.push(c);
                        p
                    })
                })
                .collect();
        }
        Ok(out)
    }

    /// Exact number of distinct valid (BgmSpec, architecture) pairs.
    pub fn count(&self) -> Result<u64> {
        let per_block = self.block_options.len() as u64;
        let has_skip = self.block_options.iter().any(BlockChoice::is_skip);
        let overflow = || Error::Size("search space size overflows u64".into());
        let mut archs: u64 = 1;
        for _ in 0..self.cfg.depth {
            archs = archs.checked_mul(per_block).ok_or_else(overflow)?;
        }
        if has_skip {
            archs -= 1;
        }
        let ratios = self.ratio_allowed.iter().filter(|&&a| a).count() as u64;
        archs.checked_mul(ratios).ok_or_else(overflow)
    }

    /// The `index`-th point in enumeration order, `index < count()`.
    pub fn point(&self, index: u64) -> Result<(BgmSpec, ArchitectureEncoding)> {
        let total = self.count()?;
        if index >= total {
            return Err(Error::Size(format!(
                "point {index} outside space of {total}"
            )));
        }
        let ratios = self.valid_ratios();
        let n_ratio = ratios.len() as u64;
        let bgm = ratios[(index % n_ratio) as usize].clone();
        let mut arch_index = index / n_ratio;
        // Index 0 of the mixed radix is all-SKIP when SKIP exists; shift past it.
        let has_skip = self.block_options.iter().any(BlockChoice::is_skip);
        if has_skip {
            arch_index += 1;
        }
        let per_block = self.block_options.len() as u64;
        let mut blocks = Vec::with_capacity(self.cfg.depth);
        for _ in 0..self.cfg.depth {
            blocks.push(self.block_options[(arch_index % per_block) as usize]);
            arch_index /= per_block;
        }
        let arch = ArchitectureEncoding::new(blocks, self.cfg.stem_channels, self.cfg.num_classes)?;
        Ok((bgm, arch))
    }

    /// All points, in the order used by [`point`](Self::point).
    pub fn iter(&self) -> Result<impl Iterator<Item = (BgmSpec, ArchitectureEncoding)> + '_> {
        let total = self.count()?;
        Ok((0..total).map(move |i| self.point(i).expect("index below count")))
    }
}

/// Free-function form of [`SearchSpace::decode`].
pub fn decode_tokens(
    tokens: &[usize],
    cfg: &SearchSpaceConfig,
    group_sizes: &[usize],
) -> Result<(BgmSpec, ArchitectureEncoding)> {
    SearchSpace::new(cfg.clone(), group_sizes)?.decode(tokens)
}

/// Free-function form of [`SearchSpace::count`].
pub fn enumerate_space(cfg: &SearchSpaceConfig, group_sizes: &[usize]) -> Result<u64> {
    SearchSpace::new(cfg.clone(), group_sizes)?.count()
}

/// Names accepted by [`fixed_point`].
pub const FIXED_POINTS: [&str; 5] = ["all-CB", "all-MB", "all-RB", "all-DB", "alt-RB-CB"];

/// Named preset encodings standing in for hand-designed baselines. Every block
/// uses the median channel and kernel candidates (the upper one for even-length lists).
pub fn fixed_point(name: &str, cfg: &SearchSpaceConfig) -> Result<ArchitectureEncoding> {
    cfg.validate()?;
    let ch = SearchSpaceConfig::median(&cfg.channels);
    let k = SearchSpaceConfig::median(&cfg.kernels);
    let uniform = |t| vec![BlockChoice::new(t, ch, ch, k); cfg.depth];
    let blocks = match name {
        "all-CB" => uniform(BlockType::Cb),
        "all-MB" => uniform(BlockType::Mb),
        "all-RB" => uniform(BlockType::Rb),
        "all-DB" => uniform(BlockType::Db),
        "alt-RB-CB" => (0..cfg.depth)
            .map(|i| {
                let t = if i % 2 == 0 {
                    BlockType::Rb
                } else {
                    BlockType::Cb
                };
                BlockChoice::new(t, ch, ch, k)
            })
            .collect(),
        other => {
            return Err(Error::Lookup {
                kind: "fixed point",
                name: other.to_string(),
            })
        }
    };
    ArchitectureEncoding::new(blocks, cfg.stem_channels, cfg.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(types: Vec<BlockType>, depth: usize) -> SearchSpaceConfig {
        SearchSpaceConfig {
            depth,
            block_types: types,
            channels: vec![8],
            kernels: vec![3],
            ratio_grid: vec![RatioCandidate::Equal],
            ..SearchSpaceConfig::default()
        }
    }

    #[test]
    fn single_active_block_ties_to_stem() {
        let cfg = tiny(vec![BlockType::Cb, BlockType::Skip], 3);
        let space = SearchSpace::new(cfg.clone(), &[10, 10]).unwrap();
        // ratio, then (type, ch2, ch3, k) x 3; type 1 = SKIP
        let tokens = [0, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0];
        let (_, arch) = space.decode(&tokens).unwrap();
        assert_eq!(arch.active_blocks(), 1);
        assert_eq!(
            arch.input_channels(),
            vec![None, Some(cfg.stem_channels), None]
        );
    }

    #[test]
    fn equal_ratios_satisfy_ordering_at_boundary() {
        let cfg = SearchSpaceConfig {
            ratio_grid: vec![RatioCandidate::Explicit(vec![0.5, 0.5])],
            ..tiny(vec![BlockType::Cb], 1)
        };
        let (bgm, _) = decode_tokens(&[0, 0, 0, 0, 0], &cfg, &[900, 100]).unwrap();
        assert_eq!(bgm.ratios(), &[0.5, 0.5]);
    }

    #[test]
    fn ordering_violation_names_the_pair() {
        let cfg = SearchSpaceConfig {
            ratio_grid: vec![
                RatioCandidate::Explicit(vec![0.25, 0.75]),
                RatioCandidate::Explicit(vec![0.75, 0.25]),
            ],
            ..tiny(vec![BlockType::Cb], 1)
        };
        let err = decode_tokens(&[1, 0, 0, 0, 0], &cfg, &[100, 900]).unwrap_err();
        match err {
            Error::Constraint {
                smaller,
                larger,
                smaller_ratio,
                larger_ratio,
                ..
            } => {
                assert_eq!((smaller, larger), (0, 1));
                assert_eq!((smaller_ratio, larger_ratio), (0.75, 0.25));
            }
            other => panic!("unexpected {other:?}"),
        }
        // Masked out of the controller's candidates.
        let space = SearchSpace::new(cfg, &[100, 900]).unwrap();
        assert_eq!(space.schema().static_mask[0], vec![true, false]);
    }

    #[test]
    fn out_of_range_token_is_schema_error() {
        let cfg = tiny(vec![BlockType::Cb], 1);
        let err = decode_tokens(&[0, 0, 0, 0, 1], &cfg, &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::Schema {
                slot: 4,
                token: 1,
                candidates: 1
            }
        ));
        let err = decode_tokens(&[0, 0], &cfg, &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::SchemaLength {
                expected: 5,
                actual: 2
            }
        ));
    }

    #[test]
    fn count_trivial_and_skip_filtered() {
        let one = tiny(vec![BlockType::Cb], 1);
        assert_eq!(enumerate_space(&one, &[5, 5]).unwrap(), 1);
        let two = tiny(vec![BlockType::Cb, BlockType::Skip], 2);
        assert_eq!(enumerate_space(&two, &[5, 5]).unwrap(), 3);
        let texts: HashSet<String> = SearchSpace::new(two, &[5, 5])
            .unwrap()
            .iter()
            .unwrap()
            .map(|(_, a)| a.to_string())
            .collect();
        assert_eq!(texts.len(), 3);
        assert!(!texts.contains("blocks=[SKIP,SKIP]"));
    }

    #[test]
    fn count_overflow_is_size_error() {
        let cfg = SearchSpaceConfig {
            depth: 64,
            ..SearchSpaceConfig::default()
        };
        assert!(matches!(
            enumerate_space(&cfg, &[9, 1]),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn fixed_points() {
        let cfg = SearchSpaceConfig {
            channels: vec![4, 8, 16],
            ..SearchSpaceConfig::default()
        };
        let cb = fixed_point("all-CB", &cfg).unwrap();
        assert_eq!(cb.depth(), cfg.depth);
        assert!(cb
            .blocks
            .iter()
            .all(|b| b.block_type == BlockType::Cb && b.ch3 == 8));
        let mb = fixed_point("all-MB", &cfg).unwrap();
        assert!(mb.blocks.iter().all(|b| b.block_type == BlockType::Mb));
        let alt = fixed_point("alt-RB-CB", &cfg).unwrap();
        assert_eq!(alt.blocks[0].block_type, BlockType::Rb);
        assert_eq!(alt.blocks[1].block_type, BlockType::Cb);
        assert!(matches!(
            fixed_point("resnet", &cfg),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn text_form() {
        let arch = ArchitectureEncoding::new(
            vec![
                BlockChoice::new(BlockType::Mb, 16, 24, 3),
                BlockChoice::skip(),
                BlockChoice::new(BlockType::Db, 99, 8, 5),
            ],
            8,
            2,
        )
        .unwrap();
        let bgm = BgmSpec::new(vec![0.5, 0.5]).unwrap();
        let text = point_text(&bgm, &arch);
        assert_eq!(
            text,
            "blocks=[MB(ch2=16,ch3=24,k=3),SKIP,DB(ch3=8,k=5)];ratios=[0.5,0.5]"
        );
        let (b2, a2) = parse_point(&text, 8, 2).unwrap();
        assert_eq!((b2, a2), (bgm, arch));
    }

    #[test]
    fn minority_share_and_loss_weights() {
        let spec = RatioCandidate::MinorityShare(0.25)
            .resolve(&[900, 100])
            .unwrap();
        assert_eq!(spec.ratios(), &[0.75, 0.25]);
        assert_eq!(spec.loss_weights(), vec![1.0, 3.0]);
        let prop = RatioCandidate::Proportional.resolve(&[900, 100]).unwrap();
        assert!((prop.ratios()[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn config_toml() {
        let cfg = SearchSpaceConfig::from_toml(
            r#"
            depth = 4
            channels = [4, 8]
            kernels = [1, 3]
            block_types = ["CB", "RB", "SKIP"]
            ratio_grid = ["proportional", { minority_share = 0.5 }, { explicit = [3.0, 1.0] }]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.depth, 4);
        assert_eq!(cfg.ratio_grid[1], RatioCandidate::MinorityShare(0.5));
        assert!(SearchSpaceConfig::from_toml("kernels = [2]").is_err());
        assert!(SearchSpaceConfig::from_toml("nonsense = 1").is_err());
    }
}
