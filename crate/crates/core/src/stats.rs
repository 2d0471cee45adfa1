//! Two-sample tests, multiple-comparison gating, standardization and
//! correlation coefficients.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::metrics::{AggregateReport, METRIC_ROWS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test with a two-sided p-value.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input(format!("t-test needs at least 2 values per sample, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("t-test samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(TTest { t: 0.0, df: na + nb - 2.0, p: 1.0 });
        }
        return Err(Error::Numerical(format!("both samples have zero variance but means differ ({ma} vs {mb})")));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(format!("t distribution with df {df}: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

/// `p < alpha / m` for each p-value.
pub fn bonferroni_gate(p_values: &[f64], alpha: f64, m: usize) -> Result<Vec<bool>> {
    if m == 0 {
        return Err(Error::Parameter("Bonferroni correction needs at least one test".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let threshold = alpha / m as f64;
    Ok(p_values.iter().map(|&p| p < threshold).collect())
}

/// `(x − mean) / sd` with the sample standard deviation.
pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Input(format!("standardization needs at least 2 values, got {}", values.len())));
    }
    let (m, v) = mean_var(values);
    if !(v > 0.0) {
        return Err(Error::Numerical("cannot standardize a constant vector".into()));
    }
    let sd = v.sqrt();
    Ok(values.iter().map(|x| (x - m) / sd).collect())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!("pearson needs two equal-length samples of at least 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numerical("pearson correlation is undefined for a zero-variance sample".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("spearman needs equal-length samples, got {} and {}", a.len(), b.len())));
    }
    pearson(&fractional_ranks(a), &fractional_ranks(b))
}

/// One pairwise comparison in a [`TTestMatrix`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

/// Welch tests between every pair of reports for every metric, gated by a
/// Bonferroni correction over the pairs of each metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestMatrix {
    pub names: Vec<String>,
    pub alpha: f64,
    pub tests_per_metric: usize,
    pub threshold: f64,
    pub tests: Vec<PairTest>,
}

fn fold_values(report: &AggregateReport, key: &str, name: &str) -> Result<Vec<f64>> {
    let series = report.metric(key).ok_or_else(|| Error::Input(format!("report `{name}` lacks metric `{key}`")))?;
    Ok(series.values.iter().flatten().copied().collect())
}

impl TTestMatrix {
    pub fn build(reports: &[(String, AggregateReport)], alpha: f64) -> Result<Self> {
        if reports.len() < 2 {
            return Err(Error::Usage(format!("t-test matrix needs at least 2 reports, got {}", reports.len())));
        }
        for (i, (name, _)) in reports.iter().enumerate() {
            if reports[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Usage(format!("report name `{name}` appears twice")));
            }
        }
        let m = reports.len() * (reports.len() - 1) / 2;
        let mut tests = Vec::new();
        for (key, _) in METRIC_ROWS {
            let mut row = Vec::new();
            for i in 0..reports.len() {
                for j in i + 1..reports.len() {
                    let (na, ra) = &reports[i];
                    let (nb, rb) = &reports[j];
                    let r = welch_ttest(&fold_values(ra, key, na)?, &fold_values(rb, key, nb)?)?;
                    row.push(PairTest {
                        metric: key.to_string(),
                        a: na.clone(),
                        b: nb.clone(),
                        t: r.t,
                        df: r.df,
                        p: r.p,
                        significant: false,
                    });
                }
            }
            let flags = bonferroni_gate(&row.iter().map(|t| t.p).collect::<Vec<_>>(), alpha, m)?;
            row.iter_mut().zip(flags).for_each(|(t, f)| t.significant = f);
            tests.extend(row);
        }
        Ok(TTestMatrix {
            names: reports.iter().map(|(n, _)| n.clone()).collect(),
            alpha,
            tests_per_metric: m,
            threshold: alpha / m as f64,
            tests,
        })
    }

    pub fn p_value(&self, metric: &str, a: &str, b: &str) -> Option<f64> {
        self.tests
            .iter()
            .find(|t| t.metric == metric && ((t.a == a && t.b == b) || (t.a == b && t.b == a)))
            .map(|t| t.p)
    }

    /// One block of rows per metric, `"{name} ({metric label})"` against
    /// every name, `-` on the diagonal.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let fail = |e: csv::Error| Error::Format(format!("writing t-test csv: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["network (metric)".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(fail)?;
        for (key, label) in METRIC_ROWS {
            for a in &self.names {
                let mut rec = vec![format!("{a} ({label})")];
                for b in &self.names {
                    rec.push(if a == b {
                        "-".to_string()
                    } else {
                        format!("{:.6}", self.p_value(key, a, b).expect("every pair is tested"))
                    });
                }
                w.write_record(&rec).map_err(fail)?;
            }
        }
        w.flush().map_err(|e| Error::Format(format!("writing t-test csv: {e}")))
    }
}
