//! Recurrent token-sequence policy, reward shaping and the REINFORCE update.
//!
//! The policy is a single-layer tanh recurrence. Step `t` consumes the embedding
//! of the token chosen at step `t − 1` (a learned start vector at `t = 0`) and
//! emits logits through a per-slot linear head. Logits are clamped to ±50 and
//! tokens disallowed by the schema get probability zero.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluator::EvalReport;
use crate::nn::{central_difference, max_relative_error};
use crate::search_space::{SearchSpace, TokenSchema};

pub const LOGIT_CLAMP: f64 = 50.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSCP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub ac_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig::fair()
    }
}

impl RewardConfig {
    /// Fairness-leaning weights: α = 0.2, β = 0.8.
    pub fn fair() -> Self {
        RewardConfig {
            alpha: 0.2,
            beta: 0.8,
            ac_threshold: 0.6,
        }
    }

    /// Accuracy-leaning weights: α = 0.8, β = 0.2.
    pub fn acc() -> Self {
        RewardConfig {
            alpha: 0.8,
            beta: 0.2,
            ac_threshold: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "reward weights alpha={} beta={} must be >= 0 with a positive sum",
                self.alpha, self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.ac_threshold) {
            return Err(Error::Config(format!(
                "accuracy threshold {} outside [0, 1]",
                self.ac_threshold
            )));
        }
        Ok(())
    }
}

/// `α·A − β·U` when `A ≥ AC`, else exactly −1.
pub fn compute_reward(report: &EvalReport, cfg: &RewardConfig) -> f64 {
    reward_from(report.overall_acc, report.unfairness, cfg)
}

pub fn reward_from(accuracy: f64, unfairness: f64, cfg: &RewardConfig) -> f64 {
    if accuracy >= cfg.ac_threshold {
        cfg.alpha * accuracy - cfg.beta * unfairness
    } else {
        -1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    /// Episodes per update (`m`).
    pub episodes: usize,
    pub gamma: f64,
    pub baseline_decay: f64,
    pub learning_rate: f64,
    /// Weight of an entropy bonus on the policy. Off by default.
    pub entropy_weight: f64,
    pub hidden: usize,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            episodes: 5,
            gamma: 1.0,
            baseline_decay: 0.9,
            learning_rate: 0.05,
            entropy_weight: 0.0,
            hidden: 32,
        }
    }
}

impl ReinforceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes per update must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.baseline_decay > 0.0 && self.baseline_decay < 1.0) {
            return Err(Error::Config(format!(
                "baseline decay {} outside (0, 1)",
                self.baseline_decay
            )));
        }
        if !(self.learning_rate > 0.0) || self.entropy_weight < 0.0 || self.hidden == 0 {
            return Err(Error::Config(
                "learning rate and hidden size must be positive, entropy weight >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled token sequence with its per-step log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

/// A sampled sequence and the reward it earned.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub reward: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    pub grad_norm: f64,
    /// Baseline subtracted during this update.
    pub baseline: f64,
    /// Baseline after folding in this batch's mean reward.
    pub next_baseline: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    hidden: usize,
    start: usize,
    /// Offset of the embedding table of slot `t` (used as input at `t + 1`).
    emb: Vec<usize>,
    w_x: usize,
    w_h: usize,
    b_h: usize,
    head_w: Vec<usize>,
    head_b: Vec<usize>,
    len: usize,
}

impl Layout {
    fn new(schema: &TokenSchema, hidden: usize) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let start = take(hidden);
        let t = schema.len();
        let emb = (0..t.saturating_sub(1))
            .map(|s| take(schema.slots[s] * hidden))
            .collect();
        let w_x = take(hidden * hidden);
        let w_h = take(hidden * hidden);
        let b_h = take(hidden);
        let mut head_w = Vec::with_capacity(t);
        let mut head_b = Vec::with_capacity(t);
        for &n in &schema.slots {
            head_w.push(take(n * hidden));
            head_b.push(take(n));
        }
        Layout {
            hidden,
            start,
            emb,
            w_x,
            w_h,
            b_h,
            head_w,
            head_b,
            len: off,
        }
    }
}

struct StepCache {
    input_at: usize,
    h_prev: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
    clamped: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerPolicy {
    schema: TokenSchema,
    layout: Layout,
    theta: Vec<f64>,
    baseline: Option<f64>,
    updates: u64,
}

fn matvec(m: &[f64], v: &[f64], rows: usize, out: &mut [f64]) {
    let cols = v.len();
    for r in 0..rows {
        out[r] += m[r * cols..(r + 1) * cols]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
}

/// Masked softmax of clamped logits.
fn distribution(logits: &[f64], allowed: &[bool]) -> (Vec<f64>, Vec<bool>) {
    let clamped: Vec<bool> = logits.iter().map(|l| l.abs() > LOGIT_CLAMP).collect();
    let l: Vec<f64> = logits
        .iter()
        .map(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        .collect();
    let max = l
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = l
        .iter()
        .zip(allowed)
        .map(|(v, &a)| if a { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    (p, clamped)
}

impl ControllerPolicy {
    /// Recurrent weights and embeddings start uniform in ±0.1; the output heads
    /// start at zero, so the initial policy is uniform over allowed tokens.
    pub fn new(schema: TokenSchema, hidden: usize, seed: u64) -> Result<Self> {
        Self::init(schema, hidden, seed, 0.1, 0.0)
    }

    /// Every parameter uniform in ±`scale`, heads included.
    pub fn random(schema: TokenSchema, hidden: usize, seed: u64, scale: f64) -> Result<Self> {
        Self::init(schema, hidden, seed, scale, scale)
    }

    fn init(
        schema: TokenSchema,
        hidden: usize,
        seed: u64,
        scale: f64,
        head_scale: f64,
    ) -> Result<Self> {
        if schema.is_empty() || schema.slots.iter().any(|&n| n == 0) || hidden == 0 {
            return Err(Error::Config(
                "policy needs non-empty slots and hidden > 0".into(),
            ));
        }
        let layout = Layout::new(&schema, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_start = layout.head_w[0];
        let theta = (0..layout.len)
            .map(|i| {
                let s = if i >= head_start { head_scale } else { scale };
                if s == 0.0 || (i >= layout.b_h && i < layout.b_h + hidden) {
                    0.0
                } else {
                    rng.gen_range(-s..s)
                }
            })
            .collect();
        Ok(ControllerPolicy {
            schema,
            layout,
            theta,
            baseline: None,
            updates: 0,
        })
    }

    pub fn schema(&self) -> &TokenSchema {
        &self.schema
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn steps(&self) -> usize {
        self.schema.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn set_baseline(&mut self, b: Option<f64>) {
        self.baseline = b;
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Offset and length of slot `slot`'s output bias within [`params`](Self::params).
    pub fn head_bias_range(&self, slot: usize) -> std::ops::Range<usize> {
        let o = self.layout.head_b[slot];
        o..o + self.schema.slots[slot]
    }

    /// Runs the recurrence along `tokens` (only the first `steps` positions, which
    /// need not be complete), returning per-step caches.
    fn unroll(&self, tokens: &[usize], steps: usize) -> Vec<StepCache> {
        let h_dim = self.layout.hidden;
        let th = &self.theta;
        let mut h_prev = vec![0.0; h_dim];
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let input_at = if t == 0 {
                self.layout.start
            } else {
                self.layout.emb[t - 1] + tokens[t - 1] * h_dim
            };
            let x = &th[input_at..input_at + h_dim];
            let mut z = th[self.layout.b_h..self.layout.b_h + h_dim].to_vec();
            matvec(
                &th[self.layout.w_x..self.layout.w_x + h_dim * h_dim],
                x,
                h_dim,
                &mut z,
            );
            matvec(
                &th[self.layout.w_h..self.layout.w_h + h_dim * h_dim],
                &h_prev,
                h_dim,
                &mut z,
            );
            let h: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
            let n = self.schema.slots[t];
            let mut logits = th[self.layout.head_b[t]..self.layout.head_b[t] + n].to_vec();
            matvec(
                &th[self.layout.head_w[t]..self.layout.head_w[t] + n * h_dim],
                &h,
                n,
                &mut logits,
            );
            let allowed = self.schema.allowed(t, &tokens[..t]);
            let (probs, clamped) = distribution(&logits, &allowed);
            caches.push(StepCache {
                input_at,
                h_prev: std::mem::replace(&mut h_prev, h.clone()),
                h,
                probs,
                clamped,
            });
        }
        caches
    }

    /// Probability vector at `prefix.len()` given the chosen prefix.
    pub fn next_distribution(&self, prefix: &[usize]) -> Vec<f64> {
        let mut caches = self.unroll(prefix, prefix.len() + 1);
        caches.pop().expect("at least one step").probs
    }

    /// Per-step distributions along a full token sequence.
    pub fn step_distributions(&self, tokens: &[usize]) -> Vec<Vec<f64>> {
        self.unroll(tokens, tokens.len())
            .into_iter()
            .map(|c| c.probs)
            .collect()
    }

    /// `π_θ(tokens)`.
    pub fn sequence_probability(&self, tokens: &[usize]) -> f64 {
        self.unroll(tokens, tokens.len())
            .iter()
            .zip(tokens)
            .map(|(c, &a)| c.probs[a])
            .product()
    }

    /// Draws a full sequence autoregressively. Pure given `(self, seed)`.
    pub fn sample(&self, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = self.steps();
        let mut tokens = Vec::with_capacity(steps);
        let mut log_probs = Vec::with_capacity(steps);
        for _ in 0..steps {
            // Unrolling from scratch each step keeps the code path identical to
            // the one used for gradients; sequences are short.
            let p = self.next_distribution(&tokens);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut choice = None;
            for (i, &pi) in p.iter().enumerate() {
                if pi > 0.0 {
                    acc += pi;
                    choice = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            let a = choice.expect("some token is allowed");
            log_probs.push(p[a].ln());
            tokens.push(a);
        }
        Sample { tokens, log_probs }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.steps() {
            return Err(Error::Batch(format!(
                "episode has {} tokens, schema has {} steps",
                tokens.len(),
                self.steps()
            )));
        }
        for (t, &a) in tokens.iter().enumerate() {
            if a >= self.schema.slots[t] {
                return Err(Error::Schema {
                    slot: t,
                    token: a,
                    candidates: self.schema.slots[t],
                });
            }
        }
        Ok(())
    }

    /// Per-step discount weights `γ^{T−t}` for steps `t = 1..T`.
    pub fn discounts(&self, gamma: f64) -> Vec<f64> {
        let t = self.steps();
        (0..t).map(|s| gamma.powi((t - 1 - s) as i32)).collect()
    }

    /// Value and gradient of `Σ_t w_t log π(a_t | a_<t) + λ Σ_t H_t`.
    pub fn objective_gradient(
        &self,
        tokens: &[usize],
        weights: &[f64],
        entropy: f64,
    ) -> (f64, Vec<f64>) {
        let h_dim = self.layout.hidden;
        let caches = self.unroll(tokens, tokens.len());
        let th = &self.theta;
        let mut grad = vec![0.0; th.len()];
        let mut value = 0.0;
        let mut dh_next = vec![0.0; h_dim];
        for t in (0..tokens.len()).rev() {
            let c = &caches[t];
            let a = tokens[t];
            let n = self.schema.slots[t];
            value += weights[t] * c.probs[a].ln();
            let mut dlogits: Vec<f64> = (0..n)
                .map(|j| weights[t] * (f64::from(u8::from(j == a)) - c.probs[j]))
                .collect();
            if entropy != 0.0 {
                let ent: f64 = -c
                    .probs
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
                value += entropy * ent;
                for j in 0..n {
                    let p = c.probs[j];
                    if p > 0.0 {
                        dlogits[j] -= entropy * p * (p.ln() + ent);
                    }
                }
            }
            for j in 0..n {
                if c.clamped[j] {
                    dlogits[j] = 0.0;
                }
            }
            let hw = self.layout.head_w[t];
            let mut dh = dh_next.clone();
            for j in 0..n {
                let g = dlogits[j];
                if g == 0.0 {
                    continue;
                }
                grad[self.layout.head_b[t] + j] += g;
                for k in 0..h_dim {
                    grad[hw + j * h_dim + k] += g * c.h[k];
                    dh[k] += g * th[hw + j * h_dim + k];
                }
            }
            let dz: Vec<f64> = dh
                .iter()
                .zip(&c.h)
                .map(|(d, h)| d * (1.0 - h * h))
                .collect();
            let x = &th[c.input_at..c.input_at + h_dim];
            dh_next = vec![0.0; h_dim];
            for r in 0..h_dim {
                let g = dz[r];
                if g == 0.0 {
                    continue;
                }
                grad[self.layout.b_h + r] += g;
                for k in 0..h_dim {
                    grad[self.layout.w_x + r * h_dim + k] += g * x[k];
                    grad[self.layout.w_h + r * h_dim + k] += g * c.h_prev[k];
                    grad[c.input_at + k] += g * th[self.layout.w_x + r * h_dim + k];
                    dh_next[k] += g * th[self.layout.w_h + r * h_dim + k];
                }
            }
        }
        (value, grad)
    }

    /// One gradient-ascent step on
    /// `(1/m) Σ_k Σ_t γ^{T−t} ∇ log π(a_t | a_<t) (R_k − b)`.
    /// The baseline starts at the first batch's mean reward and afterwards is an
    /// exponential moving average of batch means, updated after the step.
    pub fn reinforce_update(
        &mut self,
        episodes: &[Episode],
        cfg: &ReinforceConfig,
    ) -> Result<UpdateReport> {
        cfg.validate()?;
        if episodes.len() != cfg.episodes {
            return Err(Error::Batch(format!(
                "expected {} episodes, got {}",
                cfg.episodes,
                episodes.len()
            )));
        }
        for ep in episodes {
            self.check_tokens(&ep.tokens)?;
            if ep.log_probs.len() != ep.tokens.len() {
                return Err(Error::Batch("log_probs and tokens differ in length".into()));
            }
            if !ep.reward.is_finite() {
                return Err(Error::Numeric(format!("non-finite reward {}", ep.reward)));
            }
        }
        let m = episodes.len() as f64;
        let mean_reward = episodes.iter().map(|e| e.reward).sum::<f64>() / m;
        let baseline = *self.baseline.get_or_insert(mean_reward);
        let discounts = self.discounts(cfg.gamma);
        let mut total = vec![0.0; self.theta.len()];
        for ep in episodes {
            let advantage = ep.reward - baseline;
            if advantage == 0.0 && cfg.entropy_weight == 0.0 {
                continue;
            }
            let weights: Vec<f64> = discounts.iter().map(|d| d * advantage).collect();
            let (_, g) = self.objective_gradient(&ep.tokens, &weights, cfg.entropy_weight);
            for (t, gi) in total.iter_mut().zip(g) {
                *t += gi / m;
            }
        }
        let grad_norm = total.iter().map(|g| g * g).sum::<f64>().sqrt();
        for (p, g) in self.theta.iter_mut().zip(&total) {
            *p += cfg.learning_rate * g;
        }
        let next = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * mean_reward;
        self.baseline = Some(next);
        self.updates += 1;
        Ok(UpdateReport {
            grad_norm,
            baseline,
            next_baseline: next,
        })
    }

    fn schema_hash(schema: &TokenSchema, hidden: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(schema.fingerprint().as_bytes());
        h.update(format!(";hidden={hidden}").as_bytes());
        h.finalize().into()
    }

    /// Versioned binary checkpoint carrying a hash of the token schema.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.theta.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&Self::schema_hash(&self.schema, self.layout.hidden));
        buf.extend_from_slice(&(self.layout.hidden as u64).to_le_bytes());
        buf.extend_from_slice(&self.updates.to_le_bytes());
        buf.push(u8::from(self.baseline.is_some()));
        buf.extend_from_slice(&self.baseline.unwrap_or(0.0).to_le_bytes());
        buf.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Restores a checkpoint written for the same schema and hidden size.
    pub fn from_bytes(bytes: &[u8], schema: TokenSchema, hidden: usize) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("not a controller checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        if take(32)? != Self::schema_hash(&schema, hidden) {
            return Err(bad(
                "checkpoint schema hash does not match the search space",
            ));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let stored_hidden = u64_at(take(8)?) as usize;
        let updates = u64_at(take(8)?);
        let has_baseline = take(1)?[0] == 1;
        let baseline = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let len = u64_at(take(8)?) as usize;
        let mut policy = Self::new(schema, stored_hidden, 0)?;
        if len != policy.theta.len() {
            return Err(bad("parameter count does not match the schema"));
        }
        let body = take(len * 8)?;
        for (p, c) in policy.theta.iter_mut().zip(body.chunks_exact(8)) {
            *p = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        policy.baseline = has_baseline.then_some(baseline);
        policy.updates = updates;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, schema: TokenSchema, hidden: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, schema, hidden)
    }
}

/// Probability that `policy` samples the point that `tokens` decodes to, summed
/// over every token sequence mapping to that point.
pub fn point_probability(
    policy: &ControllerPolicy,
    space: &SearchSpace,
    tokens: &[usize],
) -> Result<f64> {
    Ok(space
        .preimages(tokens)?
        .iter()
        .map(|t| policy.sequence_probability(t))
        .sum())
}

/// Max relative error between the analytic gradient of
/// `Σ_t γ^{T−t} log π(a_t | a_<t)` and central differences, over all parameters.
pub fn grad_check_policy(policy: &ControllerPolicy, tokens: &[usize], gamma: f64, eps: f64) -> f64 {
    let all: Vec<usize> = (0..policy.params().len()).collect();
    grad_check_policy_params(policy, tokens, gamma, eps, &all)
}

/// As [`grad_check_policy`], restricted to the listed parameter indices.
pub fn grad_check_policy_params(
    policy: &ControllerPolicy,
    tokens: &[usize],
    gamma: f64,
    eps: f64,
    params: &[usize],
) -> f64 {
    let weights = policy.discounts(gamma);
    let (_, analytic) = policy.objective_gradient(tokens, &weights, 0.0);
    let objective = |p: &ControllerPolicy| -> f64 {
        p.step_distributions(tokens)
            .iter()
            .zip(tokens)
            .zip(&weights)
            .map(|((d, &a), w)| w * d[a].ln())
            .sum()
    };
    let mut probe = policy.clone();
    let subset: Vec<f64> = params.iter().map(|&i| policy.params()[i]).collect();
    let numeric = central_difference(
        |vals| {
            for (&i, &v) in params.iter().zip(vals) {
                probe.theta[i] = v;
            }
            objective(&probe)
        },
        &subset,
        eps,
    );
    let picked: Vec<f64> = params.iter().map(|&i| analytic[i]).collect();
    max_relative_error(&picked, &numeric, 1e-7)
}
