//! Classification metrics, ROC curves and cross-validation aggregation.
//!
//! Reductions follow the usual multi-class conventions applied to the
//! binary task:
//!
//! * macro: unweighted mean over classes
//! * micro: pooled counts (for AUC, the flattened one-hot problem)
//! * weight: class-support weighted mean
//! * sample: per-sample F1 of the one-hot label and prediction, averaged

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serializes `None` as the string `"undefined"`.
mod undefined_marker {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("undefined"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == "undefined" => Ok(None),
            Raw::Text(t) => Err(D::Error::custom(format!("expected a number or \"undefined\", got {t:?}"))),
        }
    }
}

mod undefined_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Slot(#[serde(with = "super::undefined_marker")] Option<f64>);

    pub fn serialize<S: Serializer>(v: &[Option<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| Slot(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<f64>>, D::Error> {
        Ok(Vec::<Slot>::deserialize(d)?.into_iter().map(|s| s.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: f64,
    pub precision: f64,
    #[serde(with = "undefined_marker")]
    pub auc_macro: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub auc_micro: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub auc_weight: Option<f64>,
    pub f1_sample: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub f1_weight: f64,
}

/// Metric keys and table labels in reporting order.
pub const METRIC_ROWS: [(&str, &str); 9] = [
    ("recall", "Recall"),
    ("precision", "Precision"),
    ("auc_macro", "AUC-ROC macro"),
    ("auc_micro", "AUC-ROC micro"),
    ("auc_weight", "AUC-ROC weight"),
    ("f1_sample", "F1 sample"),
    ("f1_macro", "F1 macro"),
    ("f1_micro", "F1 micro"),
    ("f1_weight", "F1 weight"),
];

impl MetricsReport {
    /// Value by key from [`METRIC_ROWS`].
    pub fn get(&self, key: &str) -> Option<Option<f64>> {
        Some(match key {
            "recall" => Some(self.recall),
            "precision" => Some(self.precision),
            "auc_macro" => self.auc_macro,
            "auc_micro" => self.auc_micro,
            "auc_weight" => self.auc_weight,
            "f1_sample" => Some(self.f1_sample),
            "f1_macro" => Some(self.f1_macro),
            "f1_micro" => Some(self.f1_micro),
            "f1_weight" => Some(self.f1_weight),
            _ => return None,
        })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else if p == r {
        p
    } else {
        2.0 * p * r / (p + r)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(probs: &Tensor, labels: &[usize]) -> Result<usize> {
    let [n, c] = probs.shape() else {
        return Err(Error::Input(format!("scores must be (N, classes), got {:?}", probs.shape())));
    };
    if *n == 0 || *n != labels.len() || *c < 2 {
        return Err(Error::Input(format!(
            "need N >= 1 score rows with at least 2 classes matching {} labels, got {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= *c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    Ok(*c)
}

/// Area under the ROC curve by the rank statistic (ties count one half).
/// `None` when either class is absent.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Computes every metric from class scores `(N, classes)` and integer labels.
/// Hard predictions use the arg-max (lowest index on ties).
pub fn compute_metrics(probs: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let c = check_inputs(probs, labels)?;
    let n = labels.len();
    let rows: Vec<&[f32]> = probs.data().chunks(c).collect();
    let preds: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();

    let mut tp = vec![0usize; c];
    let mut predicted = vec![0usize; c];
    let mut support = vec![0usize; c];
    for (&y, &p) in labels.iter().zip(&preds) {
        support[y] += 1;
        predicted[p] += 1;
        if y == p {
            tp[y] += 1;
        }
    }
    let prec: Vec<f64> = (0..c).map(|k| ratio(tp[k], predicted[k])).collect();
    let rec: Vec<f64> = (0..c).map(|k| ratio(tp[k], support[k])).collect();
    let f1: Vec<f64> = (0..c).map(|k| harmonic(prec[k], rec[k])).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let weighted = |v: &[f64]| v.iter().zip(&support).map(|(x, &s)| x * s as f64).sum::<f64>() / n as f64;

    let total_tp: usize = tp.iter().sum();
    let micro_p = ratio(total_tp, predicted.iter().sum());
    let micro_r = ratio(total_tp, support.iter().sum());

    // Per-sample F1 of one-hot label and one-hot prediction sets.
    let f1_sample = labels
        .iter()
        .zip(&preds)
        .map(|(&y, &p)| {
            let (label_size, pred_size) = (1.0, 1.0);
            let overlap = if y == p { 1.0 } else { 0.0 };
            2.0 * overlap / (label_size + pred_size)
        })
        .sum::<f64>()
        / n as f64;

    let per_class_auc: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let scores: Vec<f64> = rows.iter().map(|r| f64::from(r[k])).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            auc_binary(&scores, &pos)
        })
        .collect();
    let all_auc: Option<Vec<f64>> = per_class_auc.iter().copied().collect();
    let flat_scores: Vec<f64> = probs.data().iter().map(|&v| f64::from(v)).collect();
    let flat_pos: Vec<bool> = labels.iter().flat_map(|&y| (0..c).map(move |k| k == y)).collect();

    Ok(MetricsReport {
        recall: mean(&rec),
        precision: mean(&prec),
        auc_macro: all_auc.as_ref().map(|a| mean(a)),
        auc_micro: all_auc.as_ref().and(auc_binary(&flat_scores, &flat_pos)),
        auc_weight: all_auc.as_ref().map(|a| weighted(a)),
        f1_sample,
        f1_macro: mean(&f1),
        f1_micro: harmonic(micro_p, micro_r),
        f1_weight: weighted(&f1),
    })
}

/// Fraction of arg-max predictions equal to the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = check_inputs(probs, labels)?;
    let hits = probs.data().chunks(c).zip(labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// Descending; the first entry is `+inf` so the curve starts at (0, 0).
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0)
            .sum()
    }

    /// CSV with header `fpr,tpr,threshold`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fail = |e: csv::Error| Error::Format(format!("writing ROC csv: {e}"));
        w.write_record(["fpr", "tpr", "threshold"]).map_err(fail)?;
        for i in 0..self.fpr.len() {
            w.write_record([self.fpr[i].to_string(), self.tpr[i].to_string(), self.thresholds[i].to_string()])
                .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Format(format!("writing ROC csv: {e}")))
    }
}

/// One-vs-rest ROC for `class`, sweeping thresholds over the unique scores.
pub fn roc_curve(scores: &[f64], labels: &[usize], class: usize) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&y| y == class).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input(format!("ROC for class {class} needs both positive and negative samples")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve { class, thresholds: vec![f64::INFINITY], fpr: vec![0.0], tpr: vec![0.0] };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == class {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(t);
        curve.tpr.push(tp as f64 / n_pos as f64);
        curve.fpr.push(fp as f64 / n_neg as f64);
    }
    Ok(curve)
}

/// Per-fold values of one metric with their mean and population standard
/// deviation (undefined when any fold value is).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    #[serde(with = "undefined_vec")]
    pub values: Vec<Option<f64>>,
    #[serde(with = "undefined_marker")]
    pub mean: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub std: Option<f64>,
}

impl MetricSeries {
    pub fn from_values(values: Vec<Option<f64>>) -> Self {
        let defined: Option<Vec<f64>> = values.iter().copied().collect();
        let (mean, std) = match defined {
            Some(v) if !v.is_empty() => {
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                (Some(m), Some(var.sqrt()))
            }
            _ => (None, None),
        };
        MetricSeries { values, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub recall: MetricSeries,
    pub precision: MetricSeries,
    pub auc_macro: MetricSeries,
    pub auc_micro: MetricSeries,
    pub auc_weight: MetricSeries,
    pub f1_sample: MetricSeries,
    pub f1_macro: MetricSeries,
    pub f1_micro: MetricSeries,
    pub f1_weight: MetricSeries,
}

impl MetricsSummary {
    pub fn get(&self, key: &str) -> Option<&MetricSeries> {
        Some(match key {
            "recall" => &self.recall,
            "precision" => &self.precision,
            "auc_macro" => &self.auc_macro,
            "auc_micro" => &self.auc_micro,
            "auc_weight" => &self.auc_weight,
            "f1_sample" => &self.f1_sample,
            "f1_macro" => &self.f1_macro,
            "f1_micro" => &self.f1_micro,
            "f1_weight" => &self.f1_weight,
            _ => return None,
        })
    }
}

/// Fold reports plus per-metric summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: Vec<MetricsReport>,
    pub summary: MetricsSummary,
}

pub fn aggregate(folds: &[MetricsReport]) -> AggregateReport {
    let series = |key: &str| MetricSeries::from_values(folds.iter().map(|r| r.get(key).expect("known key")).collect());
    let summary = MetricsSummary {
        recall: series("recall"),
        precision: series("precision"),
        auc_macro: series("auc_macro"),
        auc_micro: series("auc_micro"),
        auc_weight: series("auc_weight"),
        f1_sample: series("f1_sample"),
        f1_macro: series("f1_macro"),
        f1_micro: series("f1_micro"),
        f1_weight: series("f1_weight"),
    };
    AggregateReport { folds: folds.to_vec(), summary }
}

impl AggregateReport {
    pub fn metric(&self, key: &str) -> Option<&MetricSeries> {
        self.summary.get(key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// CSV with one row per metric in table order: label, fold values, mean,
    /// std. Values are fractions in `[0, 1]`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let fail = |e: csv::Error| Error::Format(format!("writing metrics csv: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let folds = self.folds.len();
        let mut header = vec!["metric".to_string()];
        header.extend((0..folds).map(|k| format!("fold_{k}")));
        header.extend(["mean".to_string(), "std".to_string()]);
        w.write_record(&header).map_err(fail)?;
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        for (key, label) in METRIC_ROWS {
            let s = self.metric(key).expect("all rows present");
            let mut row = vec![label.to_string()];
            row.extend(s.values.iter().map(|v| fmt(*v)));
            row.extend([fmt(s.mean), fmt(s.std)]);
            w.write_record(&row).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Format(format!("writing metrics csv: {e}")))
    }

    /// Plain-text summary using the table row labels, values in percent.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<16} {:>16}\n", "Metric (%)", "mean ± std");
        for (key, label) in METRIC_ROWS {
            let m = self.metric(key).expect("all rows present");
            let cell = match (m.mean, m.std) {
                (Some(mean), Some(std)) => format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0),
                _ => "undefined".to_string(),
            };
            s.push_str(&format!("{label:<16} {cell:>16}\n"));
        }
        s
    }
}
