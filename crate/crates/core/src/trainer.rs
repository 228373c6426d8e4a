//! Group-weighted cross-entropy and the child training loop.

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, GroupedDataset};
use crate::error::{Error, Result};
use crate::nn::{ChildNetwork, Real, Tensor};
use crate::search_space::{ArchitectureEncoding, BgmSpec};
use crate::seed::derive_seed;

/// Probability floor inside the log of the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Each sample weighted by `max_j o_j / o_group`.
    #[default]
    Fair,
    /// Unit weights.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Steps between learning-rate decays.
    pub decay_interval: usize,
    pub seed: u64,
    pub loss: LossMode,
    /// Divide the summed batch loss by the batch size.
    pub mean_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            lr_decay: 0.9,
            decay_interval: 20,
            seed: 0,
            loss: LossMode::Fair,
            mean_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_interval == 0 {
            return Err(Error::Config(
                "epochs, batch size and decay interval must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        Ok(())
    }

    /// `lr0 · decay^⌊step / interval⌋`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((step / self.decay_interval) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairLossReport {
    pub loss: f64,
    /// Weighted loss summed within each group.
    pub group_loss: Vec<f64>,
    /// Per-sample weights, in batch order.
    pub weights: Vec<f64>,
}

/// Per-group weights `max_j o_j / o_i`; errors for a group with `o_i = 0`.
fn group_weights(bgm: &BgmSpec, present: &[bool], mode: LossMode) -> Result<Vec<f64>> {
    let ratios = bgm.ratios();
    if mode == LossMode::Plain {
        return Ok(vec![1.0; ratios.len()]);
    }
    let max = ratios.iter().copied().fold(0.0, f64::max);
    ratios
        .iter()
        .enumerate()
        .map(|(g, &o)| {
            if o > 0.0 {
                Ok(max / o)
            } else if present[g] {
                Err(Error::Weighting { group: g })
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

/// Weighted cross-entropy `Σ_s w_s · CE(softmax(z_s), y_s)` with
/// `w_s = max_j o_j / o_{g(s)}`, and its gradient `w_s (softmax(z_s) − onehot(y_s))`.
pub fn fair_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    groups: &[usize],
    bgm: &BgmSpec,
) -> Result<(FairLossReport, Tensor<T>)> {
    weighted_loss(logits, labels, groups, bgm, LossMode::Fair, false)
}

/// [`fair_loss`] with a selectable weighting and optional mean reduction.
pub fn weighted_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    groups: &[usize],
    bgm: &BgmSpec,
    mode: LossMode,
    mean: bool,
) -> Result<(FairLossReport, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.len() != groups.len() {
        return Err(Error::Batch(format!(
            "logits {:?} against {} labels and {} groups",
            shape,
            labels.len(),
            groups.len()
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    let k = bgm.groups();
    let mut present = vec![false; k];
    for (&g, &y) in groups.iter().zip(labels) {
        if g >= k {
            return Err(Error::Batch(format!("group {g} outside {k} groups")));
        }
        if y >= classes {
            return Err(Error::Batch(format!("label {y} outside {classes} classes")));
        }
        present[g] = true;
    }
    let gw = group_weights(bgm, &present, mode)?;
    let scale = if mean && n > 0 { 1.0 / n as f64 } else { 1.0 };
    let mut grad = Vec::with_capacity(n * classes);
    let mut group_loss = vec![0.0; k];
    let mut weights = Vec::with_capacity(n);
    for s in 0..n {
        let row: Vec<f64> = logits
            .row(s)
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let w = gw[groups[s]];
        let p_y = (exps[labels[s]] / z).max(PROB_CLAMP);
        group_loss[groups[s]] += w * -p_y.ln() * scale;
        weights.push(w);
        for (c, e) in exps.iter().enumerate() {
            let target = if c == labels[s] { 1.0 } else { 0.0 };
            grad.push(T::from_f64(w * scale * (e / z - target)).unwrap_or(T::nan()));
        }
    }
    let loss = group_loss.iter().sum();
    Ok((
        FairLossReport {
            loss,
            group_loss,
            weights,
        },
        Tensor::from_vec(&[n, classes], grad)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedChild {
    pub net: ChildNetwork,
    pub trace: Vec<LossRow>,
}

/// Trains a freshly initialized child on `ds` with BGM batches and the
/// configured loss, using plain SGD with the step-decay schedule.
pub fn train_child(
    enc: &ArchitectureEncoding,
    bgm: &BgmSpec,
    ds: &GroupedDataset,
    cfg: &TrainConfig,
) -> Result<TrainedChild> {
    cfg.validate()?;
    if bgm.groups() != ds.num_groups() {
        return Err(Error::Plan(format!(
            "{} ratios for a dataset with {} groups",
            bgm.groups(),
            ds.num_groups()
        )));
    }
    if enc.num_classes != ds.num_classes() {
        return Err(Error::Plan(format!(
            "network has {} classes, dataset {}",
            enc.num_classes,
            ds.num_classes()
        )));
    }
    if cfg.batch_size < ds.num_groups() {
        return Err(Error::Plan(format!(
            "batch size {} below group count {}",
            cfg.batch_size,
            ds.num_groups()
        )));
    }
    if ds.len() < cfg.batch_size {
        return Err(Error::Plan(format!(
            "dataset of {} samples is smaller than one batch of {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    let mut net = ChildNetwork::compile(enc, ds.shape(), derive_seed(cfg.seed, &[0]))?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            ds,
            bgm,
            cfg.batch_size,
            derive_seed(cfg.seed, &[1, epoch as u64]),
        )?;
        let mut total = 0.0;
        let mut lr = cfg.lr_at(step);
        for batch in &batches {
            lr = cfg.lr_at(step);
            let x = ds.gather(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels()[i]).collect();
            let groups: Vec<usize> = batch.iter().map(|&i| ds.groups()[i]).collect();
            let diverged = |loss: f64| Error::Diverged { epoch, step, loss };
            let logits = net.forward(&x).map_err(|e| {
                if e.is_numeric() {
                    diverged(f64::NAN)
                } else {
                    e
                }
            })?;
            let (report, dlogits) =
                weighted_loss(&logits, &labels, &groups, bgm, cfg.loss, cfg.mean_loss)?;
            if !report.loss.is_finite() {
                return Err(diverged(report.loss));
            }
            let grads = net.backward(&dlogits)?;
            net.sgd_step(&grads, lr as f32)?;
            total += report.loss;
            step += 1;
        }
        trace.push(LossRow {
            epoch,
            step,
            loss: total / batches.len() as f64,
            lr,
        });
    }
    Ok(TrainedChild { net, trace })
}
