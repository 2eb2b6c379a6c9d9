//! Group confusion counts, the fairness gap metrics and the metrics CSV.
//!
//! Rules for more than two groups: every gap is the maximum over group pairs.

use std::fs;
use std::path::Path;

use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }

    pub fn predicted_positive_rate(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.tp + self.fp) as f64 / self.total() as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        (self.positives() > 0).then(|| self.tp as f64 / self.positives() as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        (self.negatives() > 0).then(|| self.fp as f64 / self.negatives() as f64)
    }
}

/// Binary confusion counts per group, with "positive" meaning membership in
/// the favourable class set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupConfusion {
    pub groups: Vec<Counts>,
}

pub fn confusion_by_group(
    predictions: &[usize],
    eval_set: &[Sample],
    num_groups: usize,
    favourable: &[usize],
) -> Result<GroupConfusion> {
    if predictions.len() != eval_set.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            predictions.len(),
            eval_set.len()
        )));
    }
    let mut groups = vec![Counts::default(); num_groups];
    for (&pred, sample) in predictions.iter().zip(eval_set) {
        let c = groups
            .get_mut(sample.s)
            .ok_or_else(|| Error::Domain(format!("group {} out of range", sample.s)))?;
        let actual = favourable.contains(&sample.y);
        let predicted = favourable.contains(&pred);
        match (actual, predicted) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(GroupConfusion { groups })
}

/// A gap metric together with the groups it had to leave out.
#[derive(Debug, Clone, PartialEq)]
pub struct GapMetric {
    pub value: f64,
    pub excluded_groups: Vec<usize>,
    /// Set when the value is a cap or fallback rather than a computed gap.
    pub flagged: bool,
}

pub const DI_CAP: f64 = 1.0;

/// `|1 - DI|`, using the higher-rate group of each pair as the denominator.
pub fn di_deviation(confusion: &GroupConfusion) -> GapMetric {
    let mut excluded = Vec::new();
    let rates: Vec<f64> = confusion
        .groups
        .iter()
        .enumerate()
        .filter_map(|(g, c)| {
            let r = c.predicted_positive_rate();
            if r.is_none() {
                excluded.push(g);
            }
            r
        })
        .collect();
    if rates.len() < 2 {
        return GapMetric {
            value: 0.0,
            excluded_groups: excluded,
            flagged: true,
        };
    }
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return GapMetric {
            value: DI_CAP,
            excluded_groups: excluded,
            flagged: true,
        };
    }
    GapMetric {
        value: (1.0 - min / max).abs(),
        excluded_groups: excluded,
        flagged: false,
    }
}

/// Largest pairwise true-positive-rate gap.
pub fn delta_eop(confusion: &GroupConfusion) -> GapMetric {
    let mut excluded = Vec::new();
    let tprs: Vec<f64> = confusion
        .groups
        .iter()
        .enumerate()
        .filter_map(|(g, c)| {
            let r = c.tpr();
            if r.is_none() {
                excluded.push(g);
            }
            r
        })
        .collect();
    let flagged = !excluded.is_empty() || tprs.len() < 2;
    let value = if tprs.len() < 2 {
        0.0
    } else {
        let max = tprs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tprs.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    };
    GapMetric {
        value,
        excluded_groups: excluded,
        flagged,
    }
}

/// Largest pairwise `|dTPR| + |dFPR|`.
pub fn eod(confusion: &GroupConfusion) -> GapMetric {
    let mut excluded = Vec::new();
    let rates: Vec<(f64, f64)> = confusion
        .groups
        .iter()
        .enumerate()
        .filter_map(|(g, c)| match (c.tpr(), c.fpr()) {
            (Some(t), Some(f)) => Some((t, f)),
            _ => {
                excluded.push(g);
                None
            }
        })
        .collect();
    let mut value: f64 = 0.0;
    for (i, a) in rates.iter().enumerate() {
        for b in &rates[i + 1..] {
            value = value.max((a.0 - b.0).abs() + (a.1 - b.1).abs());
        }
    }
    GapMetric {
        value,
        flagged: !excluded.is_empty() || rates.len() < 2,
        excluded_groups: excluded,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub algo: String,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub group_accuracy: Vec<f64>,
    pub di_dev: f64,
    pub delta_eop: f64,
    pub eod: f64,
    pub ufm_mean: f64,
    pub unc_var: f64,
}

pub(crate) fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

pub fn metrics_header(num_groups: usize) -> String {
    let mut cols = vec!["algo".to_string(), "seed".into(), "round".into(), "accuracy".into()];
    cols.extend((1..=num_groups).map(|g| format!("acc_g{g}")));
    cols.extend(["di_dev", "delta_eop", "eod", "ufm_mean", "unc_var"].map(String::from));
    cols.join(",")
}

/// CSV text for `rows`, sorted by `(algo, seed, round)`.
pub fn render_metrics(rows: &[MetricsRow], num_groups: usize) -> Result<String> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.algo.as_str(), a.seed, a.round).cmp(&(b.algo.as_str(), b.seed, b.round))
    });
    let mut out = metrics_header(num_groups);
    out.push('\n');
    for r in sorted {
        if r.group_accuracy.len() != num_groups {
            return Err(Error::Shape(format!(
                "row has {} group accuracies, header has {num_groups}",
                r.group_accuracy.len()
            )));
        }
        let nums = [r.accuracy]
            .into_iter()
            .chain(r.group_accuracy.iter().copied())
            .chain([r.di_dev, r.delta_eop, r.eod, r.ufm_mean, r.unc_var]);
        let mut fields = vec![r.algo.clone(), r.seed.to_string(), r.round.to_string()];
        for v in nums {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("metrics row {} round {}", r.algo, r.round)));
            }
            fields.push(fmt6(v));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(rows: &[MetricsRow], num_groups: usize, path: &Path) -> Result<()> {
    let text = render_metrics(rows, num_groups)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
