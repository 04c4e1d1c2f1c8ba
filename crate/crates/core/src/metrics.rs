//! Sentiment regression metrics: 7-class and binary accuracy, positive-class
//! F1, mean absolute error and Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How scores are turned into binary sentiment for Acc2 and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// `value ≥ 0` is positive.
    #[default]
    GeqZero,
    /// Samples whose label is exactly 0 are dropped; then `value > 0` is positive.
    ExcludeZero,
}

/// `metrics.*` configuration keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub binarize: Binarize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub acc7: f64,
    /// Percent.
    pub acc2: f64,
    /// Percent.
    pub f1: f64,
    pub mae: f64,
    /// `None` when either vector has zero variance.
    pub corr: Option<f64>,
    pub binarize: Binarize,
}

/// Round half away from zero, then clip to the seven classes −3..=3.
pub fn sentiment_class(v: f64) -> i32 {
    v.round().clamp(-3.0, 3.0) as i32
}

pub fn compute_metrics(preds: &[f64], labels: &[f64], binarize: Binarize) -> Result<MetricsReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::Data("metrics inputs must be finite".into()));
    }
    let n = preds.len() as f64;
    let acc7 = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| sentiment_class(p) == sentiment_class(y))
        .count() as f64
        / n
        * 100.0;
    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;

    let pairs: Vec<(bool, bool)> = preds
        .iter()
        .zip(labels)
        .filter(|(_, &y)| binarize == Binarize::GeqZero || y != 0.0)
        .map(|(&p, &y)| match binarize {
            Binarize::GeqZero => (p >= 0.0, y >= 0.0),
            Binarize::ExcludeZero => (p > 0.0, y > 0.0),
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data("no non-zero labels left for binary metrics".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for &(p, y) in &pairs {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if p == y {
            correct += 1;
        }
    }
    let acc2 = correct as f64 / pairs.len() as f64 * 100.0;
    // no positives predicted or present: the two agree perfectly
    let f1 = if tp + fp + fn_ == 0 {
        100.0
    } else {
        200.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };

    Ok(MetricsReport {
        acc7,
        acc2,
        f1,
        mae,
        corr: pearson(preds, labels).ok(),
        binarize,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("predictions"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("labels"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

impl MetricsReport {
    /// Arithmetic mean of each metric. Correlation is undefined if it is
    /// undefined in any report.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Data("cannot average zero reports".into()))?;
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let corr = reports
            .iter()
            .map(|r| r.corr)
            .collect::<Option<Vec<f64>>>()
            .map(|c| c.iter().sum::<f64>() / n);
        Ok(MetricsReport {
            acc7: avg(|r| r.acc7),
            acc2: avg(|r| r.acc2),
            f1: avg(|r| r.f1),
            mae: avg(|r| r.mae),
            corr,
            binarize: first.binarize,
        })
    }
}
