//! Accuracy and group-fairness metrics.
//!
//! The unfairness score is the L1 distance between each group's accuracy and
//! the overall accuracy. Disparate impact and statistical parity difference
//! compare the favorable-outcome rate of the unprivileged groups against the
//! privileged group; by default the favorable outcome is a correct prediction
//! and the privileged group is the largest one.

use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::nn::ChildNetwork;

/// Which prediction counts as the favorable outcome for DI / SPD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Favorable {
    #[default]
    Correct,
    /// Predicting this class index, regardless of the label.
    PredictedClass(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FairnessConfig {
    pub favorable: Favorable,
    /// Privileged group index; `None` picks the largest group (lowest index on ties).
    pub privileged: Option<usize>,
}

impl FairnessConfig {
    pub fn privileged_group(&self, group_sizes: &[usize]) -> usize {
        self.privileged
            .unwrap_or_else(|| largest_group(group_sizes))
    }
}

fn largest_group(sizes: &[usize]) -> usize {
    let mut best = 0;
    for (i, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_acc: f64,
    pub group_acc: Vec<f64>,
    pub unfairness: f64,
    /// `None` when the privileged favorable rate is zero.
    pub di: Option<f64>,
    pub spd: f64,
    pub group_counts: Vec<usize>,
}

/// `Σ_i |group_acc_i − overall|`.
pub fn unfairness_score(group_acc: &[f64], overall: f64) -> f64 {
    group_acc.iter().map(|a| (a - overall).abs()).sum()
}

/// Favorable rates of (unprivileged pool, privileged group) from per-group counts.
fn favorable_rates(favorable: &[usize], totals: &[usize], privileged: usize) -> Result<(f64, f64)> {
    if privileged >= totals.len() {
        return Err(Error::Config(format!(
            "privileged group {privileged} out of range"
        )));
    }
    if totals[privileged] == 0 {
        return Err(Error::EmptyGroup { group: privileged });
    }
    let (mut fav_u, mut tot_u) = (0usize, 0usize);
    for g in (0..totals.len()).filter(|&g| g != privileged) {
        fav_u += favorable[g];
        tot_u += totals[g];
    }
    if tot_u == 0 {
        return Err(Error::DegenerateMetric("no unprivileged samples".into()));
    }
    Ok((
        fav_u as f64 / tot_u as f64,
        favorable[privileged] as f64 / totals[privileged] as f64,
    ))
}

fn tally(outcomes: &[(usize, bool)]) -> (Vec<usize>, Vec<usize>) {
    let k = outcomes.iter().map(|o| o.0 + 1).max().unwrap_or(0);
    let mut fav = vec![0; k];
    let mut tot = vec![0; k];
    for &(g, f) in outcomes {
        tot[g] += 1;
        fav[g] += usize::from(f);
    }
    (fav, tot)
}

/// DI = P(favorable | unprivileged) / P(favorable | privileged), from per-sample
/// `(group, favorable)` outcomes.
pub fn disparate_impact(outcomes: &[(usize, bool)], cfg: &FairnessConfig) -> Result<f64> {
    let (fav, tot) = tally(outcomes);
    let privileged = cfg.privileged_group(&tot);
    let (unpriv, priv_) = favorable_rates(&fav, &tot, privileged)?;
    if priv_ == 0.0 {
        return Err(Error::DegenerateMetric(
            "privileged group has zero favorable rate".into(),
        ));
    }
    Ok(unpriv / priv_)
}

/// SPD = P(favorable | unprivileged) − P(favorable | privileged).
pub fn statistical_parity_difference(
    outcomes: &[(usize, bool)],
    cfg: &FairnessConfig,
) -> Result<f64> {
    let (fav, tot) = tally(outcomes);
    let privileged = cfg.privileged_group(&tot);
    let (unpriv, priv_) = favorable_rates(&fav, &tot, privileged)?;
    Ok(unpriv - priv_)
}

impl EvalReport {
    /// Builds a report from per-group correct and favorable counts. Accuracies are
    /// ratios of integers converted once; the unfairness terms are formed from
    /// exact integer numerators `|c_i·N − C·n_i|` over `n_i·N`.
    pub fn from_counts(
        correct: &[usize],
        favorable: &[usize],
        totals: &[usize],
        cfg: &FairnessConfig,
    ) -> Result<Self> {
        if correct.len() != totals.len() || favorable.len() != totals.len() || totals.is_empty() {
            return Err(Error::Config(
                "per-group count vectors disagree in length".into(),
            ));
        }
        if let Some(group) = totals.iter().position(|&n| n == 0) {
            return Err(Error::EmptyGroup { group });
        }
        let n: usize = totals.iter().sum();
        let c: usize = correct.iter().sum();
        let group_acc: Vec<f64> = correct
            .iter()
            .zip(totals)
            .map(|(&ci, &ni)| ci as f64 / ni as f64)
            .collect();
        let unfairness = correct
            .iter()
            .zip(totals)
            .map(|(&ci, &ni)| {
                let num = (ci as i128 * n as i128 - c as i128 * ni as i128).abs();
                num as f64 / (ni as i128 * n as i128) as f64
            })
            .sum();
        let (di, spd) = if totals.len() == 1 {
            (Some(1.0), 0.0)
        } else {
            let privileged = cfg.privileged_group(totals);
            let (u, p) = favorable_rates(favorable, totals, privileged)?;
            ((p > 0.0).then(|| u / p), u - p)
        };
        Ok(EvalReport {
            overall_acc: c as f64 / n as f64,
            group_acc,
            unfairness,
            di,
            spd,
            group_counts: totals.to_vec(),
        })
    }

    /// Builds a report from stored group accuracies, weighting by group size.
    /// Favorable is taken to be a correct prediction.
    pub fn from_group_accuracies(
        group_acc: &[f64],
        group_counts: &[usize],
        cfg: &FairnessConfig,
    ) -> Result<Self> {
        if group_acc.len() != group_counts.len() || group_acc.is_empty() {
            return Err(Error::Config("accuracy and count vectors disagree".into()));
        }
        if let Some(group) = group_counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyGroup { group });
        }
        if group_acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config(format!(
                "accuracies {group_acc:?} outside [0, 1]"
            )));
        }
        let n: usize = group_counts.iter().sum();
        let overall_acc = group_acc
            .iter()
            .zip(group_counts)
            .map(|(a, &ni)| a * ni as f64)
            .sum::<f64>()
            / n as f64;
        let (di, spd) = if group_acc.len() == 1 {
            (Some(1.0), 0.0)
        } else {
            let privileged = cfg.privileged_group(group_counts);
            let (mut w, mut tot) = (0.0, 0usize);
            for g in (0..group_acc.len()).filter(|&g| g != privileged) {
                w += group_acc[g] * group_counts[g] as f64;
                tot += group_counts[g];
            }
            let u = w / tot as f64;
            let p = group_acc[privileged];
            ((p > 0.0).then(|| u / p), u - p)
        };
        Ok(EvalReport {
            overall_acc,
            unfairness: unfairness_score(group_acc, overall_acc),
            group_acc: group_acc.to_vec(),
            di,
            spd,
            group_counts: group_counts.to_vec(),
        })
    }

    /// Report for a failed child: nothing measured.
    pub fn failed(groups: usize) -> Self {
        EvalReport {
            overall_acc: 0.0,
            group_acc: vec![0.0; groups],
            unfairness: 0.0,
            di: None,
            spd: 0.0,
            group_counts: vec![0; groups],
        }
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 64;

/// Per-sample predictions of `net` over `ds`.
pub fn predict(net: &mut ChildNetwork, ds: &GroupedDataset) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = ds.gather(chunk);
        let logits = net.forward(&x)?;
        let classes = logits.shape()[1];
        preds.extend(logits.data().chunks(classes).map(argmax));
    }
    net.clear_cache();
    Ok(preds)
}

pub fn evaluate(net: &mut ChildNetwork, ds: &GroupedDataset) -> Result<EvalReport> {
    evaluate_with(net, ds, &FairnessConfig::default())
}

pub fn evaluate_with(
    net: &mut ChildNetwork,
    ds: &GroupedDataset,
    cfg: &FairnessConfig,
) -> Result<EvalReport> {
    let preds = predict(net, ds)?;
    report_from_predictions(&preds, ds.labels(), ds.groups(), ds.num_groups(), cfg)
}

/// Tallies predictions against labels per group and builds the report.
pub fn report_from_predictions(
    preds: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
    cfg: &FairnessConfig,
) -> Result<EvalReport> {
    let mut correct = vec![0; num_groups];
    let mut favorable = vec![0; num_groups];
    let mut totals = vec![0; num_groups];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        totals[g] += 1;
        correct[g] += usize::from(p == y);
        favorable[g] += usize::from(match cfg.favorable {
            Favorable::Correct => p == y,
            Favorable::PredictedClass(c) => p == c,
        });
    }
    EvalReport::from_counts(&correct, &favorable, &totals, cfg)
}
