//! Calibration (ECE, reliability rows), cross-run stability (σ²), and the
//! same quantities restricted to robustness subsets.

use serde::{Deserialize, Serialize};

use crate::array::{argmax, NumArray};
use crate::attack::RobustnessPartition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// `K` intervals `(k/K, (k+1)/K]` over confidence.
    #[default]
    EqualWidth,
    /// `K` groups of (nearly) equal size after sorting by confidence.
    EqualCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: usize,
    pub buckets: Vec<Bucket>,
    pub ece: f64,
    pub n: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_center: f64,
    pub accuracy: f64,
    pub confidence: f64,
    pub count: usize,
}

impl CalibrationReport {
    /// One row per non-empty bucket, ready for plotting against the diagonal.
    pub fn reliability_rows(&self) -> Vec<ReliabilityRow> {
        self.buckets
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| ReliabilityRow {
                bin_center: 0.5 * (b.lower + b.upper),
                accuracy: b.accuracy,
                confidence: b.confidence,
                count: b.count,
            })
            .collect()
    }
}

/// Predicted class (ties to the lowest index) and its probability, per row.
pub fn predictions(probs: &NumArray) -> Vec<(usize, f64)> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let c = argmax(row);
            (c, row[c])
        })
        .collect()
}

fn check_inputs(probs: &NumArray, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    if !probs.is_matrix() || probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "probabilities {:?} for {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::invalid(format!("label {bad} outside [0, {})", probs.cols())));
    }
    Ok(())
}

/// Equal-width bucket holding `conf`: the `k` with `k/K < conf ≤ (k+1)/K`
/// (bucket 0 also takes `conf = 0`).
pub fn bucket_index(conf: f64, bins: usize) -> usize {
    let k = bins as f64;
    let mut b = ((conf * k).ceil() as usize).saturating_sub(1).min(bins - 1);
    while b > 0 && conf <= b as f64 / k {
        b -= 1;
    }
    while b + 1 < bins && conf > (b + 1) as f64 / k {
        b += 1;
    }
    b
}

/// Expected calibration error with `bins` equal-width buckets.
pub fn ece(probs: &NumArray, labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    ece_with(probs, labels, bins, Binning::EqualWidth)
}

pub fn ece_with(
    probs: &NumArray,
    labels: &[usize],
    bins: usize,
    binning: Binning,
) -> Result<CalibrationReport> {
    check_inputs(probs, labels)?;
    if bins == 0 {
        return Err(Error::invalid("need at least one bucket"));
    }
    let preds = predictions(probs);
    let n = labels.len();

    let assignment: Vec<usize> = match binning {
        Binning::EqualWidth => preds.iter().map(|&(_, c)| bucket_index(c, bins)).collect(),
        Binning::EqualCount => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| preds[a].1.total_cmp(&preds[b].1).then(a.cmp(&b)));
            let mut assign = vec![0; n];
            for (pos, &i) in order.iter().enumerate() {
                assign[i] = pos * bins / n;
            }
            assign
        }
    };

    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut lo = vec![f64::INFINITY; bins];
    let mut hi = vec![f64::NEG_INFINITY; bins];
    let mut total_correct = 0.0;
    let mut total_conf = 0.0;
    for (i, &(pred, conf)) in preds.iter().enumerate() {
        let b = assignment[i];
        let hit = if pred == labels[i] { 1.0 } else { 0.0 };
        count[b] += 1;
        correct[b] += hit;
        conf_sum[b] += conf;
        lo[b] = lo[b].min(conf);
        hi[b] = hi[b].max(conf);
        total_correct += hit;
        total_conf += conf;
    }

    let mut buckets = Vec::with_capacity(bins);
    let mut ece = 0.0;
    for b in 0..bins {
        let (lower, upper) = match binning {
            Binning::EqualWidth => (b as f64 / bins as f64, (b + 1) as f64 / bins as f64),
            Binning::EqualCount if count[b] > 0 => (lo[b], hi[b]),
            Binning::EqualCount => (0.0, 0.0),
        };
        let (accuracy, confidence) = if count[b] > 0 {
            (correct[b] / count[b] as f64, conf_sum[b] / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            ece += (count[b] as f64 / n as f64) * (accuracy - confidence).abs();
        }
        buckets.push(Bucket {
            lower,
            upper,
            count: count[b],
            accuracy,
            confidence,
        });
    }

    Ok(CalibrationReport {
        bins,
        buckets,
        ece,
        n,
        accuracy: total_correct / n as f64,
        confidence: total_conf / n as f64,
    })
}

pub fn reliability_rows(probs: &NumArray, labels: &[usize], bins: usize) -> Result<Vec<ReliabilityRow>> {
    Ok(ece(probs, labels, bins)?.reliability_rows())
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(probs: &NumArray, labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let hits = predictions(probs)
        .iter()
        .zip(labels)
        .filter(|((p, _), y)| p == *y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean probability of the predicted class.
pub fn mean_confidence(probs: &NumArray) -> f64 {
    let preds = predictions(probs);
    preds.iter().map(|&(_, c)| c).sum::<f64>() / preds.len() as f64
}

/// Which class's probability stands for "the model's predicted probability"
/// of an example when measuring spread across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceReference {
    /// The class predicted by the across-model mean probability vector.
    #[default]
    MeanPrediction,
    /// The true label.
    TrueClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub models: usize,
    /// `Σ_m (p̂_{m,i} − p̄_i)²` for each example.
    pub per_example: Vec<f64>,
    pub sigma2: f64,
}

/// `σ² = 1/(M−1) · 1/N · Σ_m Σ_i (p̂_{m,i} − p̄_i)²` across `M ≥ 2` runs.
pub fn variance(per_model: &[NumArray], labels: &[usize]) -> Result<StabilityReport> {
    variance_with(per_model, labels, VarianceReference::MeanPrediction)
}

pub fn variance_with(
    per_model: &[NumArray],
    labels: &[usize],
    reference: VarianceReference,
) -> Result<StabilityReport> {
    let m = per_model.len();
    if m < 2 {
        return Err(Error::invalid(format!("variance needs at least 2 models, got {m}")));
    }
    for p in per_model {
        check_inputs(p, labels)?;
        if p.shape() != per_model[0].shape() {
            return Err(Error::Shape(format!(
                "model outputs {:?} vs {:?}",
                p.shape(),
                per_model[0].shape()
            )));
        }
    }
    let n = labels.len();
    let z = per_model[0].cols();
    let mut per_example = Vec::with_capacity(n);
    let mut mean_row = vec![0.0; z];
    for i in 0..n {
        let class = match reference {
            VarianceReference::TrueClass => labels[i],
            VarianceReference::MeanPrediction => {
                mean_row.iter_mut().for_each(|v| *v = 0.0);
                for p in per_model {
                    for (acc, v) in mean_row.iter_mut().zip(p.row(i)) {
                        *acc += v;
                    }
                }
                argmax(&mean_row)
            }
        };
        let mean = per_model.iter().map(|p| p.get(i, class)).sum::<f64>() / m as f64;
        let spread = per_model
            .iter()
            .map(|p| (p.get(i, class) - mean).powi(2))
            .sum::<f64>();
        per_example.push(spread);
    }
    let sigma2 = per_example.iter().sum::<f64>() / ((m - 1) as f64 * n as f64);
    Ok(StabilityReport {
        models: m,
        per_example,
        sigma2,
    })
}

/// Accuracy, confidence and ECE (plus σ² when member predictions are given)
/// for one robustness subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    /// 1-based, 1 = least robust.
    pub subset: usize,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
    pub ece: f64,
    pub variance: Option<f64>,
}

pub fn per_subset_stats(
    probs: &NumArray,
    labels: &[usize],
    partition: &RobustnessPartition,
    bins: usize,
    members: Option<&[NumArray]>,
) -> Result<Vec<SubsetStats>> {
    check_inputs(probs, labels)?;
    if partition.len() != labels.len() {
        return Err(Error::Shape(format!(
            "partition covers {} examples, dataset has {}",
            partition.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(partition.subsets());
    for (r, idx) in partition.members().into_iter().enumerate() {
        if idx.is_empty() {
            out.push(SubsetStats {
                subset: r + 1,
                count: 0,
                accuracy: 0.0,
                confidence: 0.0,
                ece: 0.0,
                variance: None,
            });
            continue;
        }
        let sub_probs = probs.select_rows(&idx);
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let report = ece(&sub_probs, &sub_labels, bins)?;
        let variance = match members {
            Some(ms) => {
                let subs: Vec<NumArray> = ms.iter().map(|p| p.select_rows(&idx)).collect();
                Some(variance(&subs, &sub_labels)?.sigma2)
            }
            None => None,
        };
        out.push(SubsetStats {
            subset: r + 1,
            count: idx.len(),
            accuracy: report.accuracy,
            confidence: report.confidence,
            ece: report.ece,
            variance,
        });
    }
    Ok(out)
}

/// Five-number summary using linear interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::invalid("quartiles of an empty sample"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in quartile input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        if lo == hi {
            v[lo]
        } else {
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        }
    };
    Ok(Quartiles {
        min: v[0],
        q25: at(0.25),
        median: at(0.5),
        q75: at(0.75),
        max: v[v.len() - 1],
    })
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!("spearman on {} vs {} values", a.len(), b.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (va * vb).sqrt()))
}
