//! Top-1 accuracy by class and shot group, and confidence calibration.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ShotGroups};
use crate::error::{Error, Result};
use crate::nn::{softmax, Model};

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_acc: f64,
    /// Unweighted mean of the per-class accuracies in each group; `None`
    /// when the group is empty.
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
    pub per_class_acc: Vec<f64>,
    pub mean_max_confidence: f64,
    pub ece: f64,
}

impl MetricsReport {
    pub fn csv_header(num_classes: usize) -> String {
        let mut cols: Vec<String> = ["overall", "many", "medium", "few", "mean_max_conf", "ece"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend((0..num_classes).map(|k| format!("class_{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut cols = vec![
            self.overall_acc.to_string(),
            opt(self.many_acc),
            opt(self.medium_acc),
            opt(self.few_acc),
            self.mean_max_confidence.to_string(),
            self.ece.to_string(),
        ];
        cols.extend(self.per_class_acc.iter().map(|a| a.to_string()));
        cols.join(",")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mean_max_confidence: f64,
    pub ece: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Mean top-1 confidence and expected calibration error over `bins`
/// equal-width confidence bins.
pub fn calibration(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<Calibration> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if bins == 0 {
        return Err(Error::invalid("calibration needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let mut total_conf = 0.0;
    for (i, (row, &label)) in probs.iter().zip(labels).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| p.is_nan() || *p < 0.0) {
            return Err(Error::invalid(format!("row {i} is not a probability vector (sum {sum})")));
        }
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += usize::from(pred == label);
        total_conf += conf;
    }
    let n = probs.len() as f64;
    let ece = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum();
    Ok(Calibration {
        mean_max_confidence: total_conf / n,
        ece,
    })
}

/// Metrics from predicted class probabilities.
pub fn evaluate_probs(
    probs: &[Vec<f64>],
    labels: &[usize],
    groups: &ShotGroups,
    bins: usize,
) -> Result<MetricsReport> {
    let c = groups.num_classes();
    let mut seen = vec![false; c];
    for &k in groups.many.iter().chain(&groups.medium).chain(&groups.few) {
        if k >= c || std::mem::replace(&mut seen[k], true) {
            return Err(Error::invalid("shot groups do not partition the classes"));
        }
    }
    if let Some(row) = probs.iter().find(|r| r.len() != c) {
        return Err(Error::ShapeMismatch {
            expected: format!("{c} class probabilities"),
            actual: format!("{}", row.len()),
        });
    }
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (row, &label) in probs.iter().zip(labels) {
        if label >= c {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        totals[label] += 1;
        hits[label] += usize::from(argmax(row) == label);
    }
    if let Some(k) = totals.iter().position(|&t| t == 0) {
        return Err(Error::invalid(format!("test set has no samples of class {k}")));
    }
    let per_class_acc: Vec<f64> = hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).collect();
    let group_mean = |members: &[usize]| {
        (!members.is_empty())
            .then(|| members.iter().map(|&k| per_class_acc[k]).sum::<f64>() / members.len() as f64)
    };
    let cal = calibration(probs, labels, bins)?;
    Ok(MetricsReport {
        overall_acc: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        many_acc: group_mean(&groups.many),
        medium_acc: group_mean(&groups.medium),
        few_acc: group_mean(&groups.few),
        per_class_acc,
        mean_max_confidence: cal.mean_max_confidence,
        ece: cal.ece,
    })
}

pub fn predict_proba(model: &Model, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let images: Vec<_> = ds.images().iter().map(|i| &i.image).collect();
    Ok(model.forward(&images)?.iter().map(|z| softmax(z)).collect())
}

pub fn evaluate(model: &Model, test: &Dataset, groups: &ShotGroups) -> Result<MetricsReport> {
    evaluate_with_bins(model, test, groups, DEFAULT_ECE_BINS)
}

pub fn evaluate_with_bins(
    model: &Model,
    test: &Dataset,
    groups: &ShotGroups,
    bins: usize,
) -> Result<MetricsReport> {
    let probs = predict_proba(model, test)?;
    let labels: Vec<usize> = test.labels().collect();
    evaluate_probs(&probs, &labels, groups, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn groups(many: &[usize], medium: &[usize], few: &[usize]) -> ShotGroups {
        ShotGroups {
            many: many.to_vec(),
            medium: medium.to_vec(),
            few: few.to_vec(),
        }
    }

    #[test]
    fn constant_predictor() {
        let probs = vec![vec![0.9, 0.1]; 4];
        let labels = [0, 0, 1, 1];
        let r = evaluate_probs(&probs, &labels, &groups(&[0], &[], &[1]), 15).unwrap();
        assert_eq!(r.overall_acc, 0.5);
        assert_eq!(r.per_class_acc, vec![1.0, 0.0]);
        assert_eq!(r.many_acc, Some(1.0));
        assert_eq!(r.medium_acc, None);
        assert_eq!(r.few_acc, Some(0.0));
    }

    #[test]
    fn perfect_predictor() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| (0..3).map(|k| if k == y { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = evaluate_probs(&probs, &labels, &groups(&[0], &[1], &[2]), 15).unwrap();
        assert_eq!(r.overall_acc, 1.0);
        assert_eq!((r.many_acc, r.medium_acc, r.few_acc), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(r.mean_max_confidence, 1.0);
        assert_eq!(r.ece, 0.0);
    }

    #[test]
    fn random_logits_are_at_chance() {
        let mut rng = seeded(3);
        let labels: Vec<usize> = (0..5000).map(|i| i % 10).collect();
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| softmax(&(0..10).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()))
            .collect();
        let all: Vec<usize> = (0..10).collect();
        let r = evaluate_probs(&probs, &labels, &groups(&all, &[], &[]), 15).unwrap();
        // four binomial standard deviations
        let tol = 4.0 * (0.1f64 * 0.9 / 5000.0).sqrt();
        assert!((r.overall_acc - 0.1).abs() < tol, "{}", r.overall_acc);
    }

    #[test]
    fn uniform_rows_calibration() {
        let probs = vec![vec![0.25; 4]; 8];
        let labels = [0, 1, 2, 3, 0, 0, 0, 0];
        let cal = calibration(&probs, &labels, 15).unwrap();
        assert_eq!(cal.mean_max_confidence, 0.25);
        // argmax ties resolve to class 0, so accuracy is 5/8
        assert!((cal.ece - (5.0 / 8.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn perfectly_calibrated_bin() {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            probs.push(vec![0.8, 0.2]);
            labels.push(if i < 8 { 0 } else { 1 });
        }
        let cal = calibration(&probs, &labels, 15).unwrap();
        assert!((cal.mean_max_confidence - 0.8).abs() < 1e-12);
        assert!(cal.ece < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_rows_and_bad_groups() {
        assert!(calibration(&[vec![0.5, 0.6]], &[0], 15).is_err());
        let probs = vec![vec![0.5, 0.5]; 2];
        assert!(evaluate_probs(&probs, &[0, 1], &groups(&[0, 1], &[1], &[]), 15).is_err());
        assert!(evaluate_probs(&probs, &[0, 0], &groups(&[0], &[1], &[]), 15).is_err());
    }

    #[test]
    fn accuracy_identities_and_permutation_invariance() {
        let mut rng = seeded(21);
        let c = 6;
        let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..c)).collect();
        let mut probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| softmax(&(0..c).map(|_| 2.0 * rng.random::<f64>()).collect::<Vec<_>>()))
            .collect();
        let mut classes: Vec<usize> = (0..c).collect();
        classes.shuffle(&mut rng);
        let g = groups(&classes[..2], &classes[2..3], &classes[3..]);
        let r = evaluate_probs(&probs, &labels, &g, 15).unwrap();

        let mut counts = vec![0usize; c];
        for &y in &labels {
            counts[y] += 1;
        }
        let weighted: f64 = (0..c).map(|k| r.per_class_acc[k] * counts[k] as f64).sum::<f64>() / 300.0;
        assert!((weighted - r.overall_acc).abs() < 1e-12);

        let class_mean = r.per_class_acc.iter().sum::<f64>() / c as f64;
        let from_groups = (r.many_acc.unwrap() * 2.0 + r.medium_acc.unwrap() + r.few_acc.unwrap() * 3.0) / c as f64;
        assert!((class_mean - from_groups).abs() < 1e-12);

        let mut order: Vec<usize> = (0..300).collect();
        order.shuffle(&mut rng);
        let labels2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        probs = order.iter().map(|&i| probs[i].clone()).collect();
        let r2 = evaluate_probs(&probs, &labels2, &g, 15).unwrap();
        assert!((r.ece - r2.ece).abs() < 1e-12);
        assert_eq!(r.per_class_acc, r2.per_class_acc);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            overall_acc: 0.5,
            many_acc: Some(0.75),
            medium_acc: None,
            few_acc: Some(0.25),
            per_class_acc: vec![0.75, 0.25],
            mean_max_confidence: 0.9,
            ece: 0.4,
        };
        assert_eq!(MetricsReport::csv_header(2), "overall,many,medium,few,mean_max_conf,ece,class_0,class_1");
        assert_eq!(r.csv_row(), "0.5,0.75,,0.25,0.9,0.4,0.75,0.25");
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
