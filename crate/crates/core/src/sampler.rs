//! Class-level sampling distributions.
//!
//! P is the empirical class distribution; Q weights class `k` in proportion
//! to `1 / n_k^r` (or `1 / E(k)` with the effective number). Instances inside
//! a class are always equally likely, so the weight of instance `i` is
//! `class_probs[y_i] / n_{y_i}`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassHistogram, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightStrategy {
    Power { r: f64 },
    EffectiveNumber,
}

impl Default for WeightStrategy {
    fn default() -> Self {
        WeightStrategy::Power { r: 1.0 }
    }
}

impl WeightStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightStrategy::Power { r } if !(r.is_finite() && r >= 0.0) => {
                Err(Error::invalid(format!("power exponent must be finite and >= 0, got {r}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    class_probs: Vec<f64>,
    class_counts: Vec<usize>,
}

impl SamplingDistribution {
    fn from_unnormalized(raw: Vec<f64>, hist: &ClassHistogram) -> Self {
        let total: f64 = raw.iter().sum();
        Self {
            class_probs: raw.into_iter().map(|w| w / total).collect(),
            class_counts: hist.counts().to_vec(),
        }
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.len()
    }

    /// Probability of drawing one particular instance of `class`.
    pub fn instance_weight(&self, class: usize) -> f64 {
        self.class_probs[class] / self.class_counts[class] as f64
    }

    /// Per-instance draw probabilities over `ds`, in dataset order.
    pub fn instance_weights(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        Ok(ds.labels().map(|k| self.instance_weight(k)).collect())
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.histogram().counts() != self.class_counts.as_slice() {
            return Err(Error::invalid(
                "sampling distribution was built for a different class histogram",
            ));
        }
        Ok(())
    }
}

/// The original data distribution P.
pub fn original_p(hist: &ClassHistogram) -> SamplingDistribution {
    let raw = hist.counts().iter().map(|&n| n as f64).collect();
    SamplingDistribution::from_unnormalized(raw, hist)
}

/// Effective number of samples `(1 - beta^n) / (1 - beta)` with
/// `beta = (N - 1) / N`.
pub fn effective_number(n_k: usize, total: usize) -> f64 {
    debug_assert!(total >= 2 && (1..=total).contains(&n_k));
    let n = total as f64;
    // 1 - beta^n_k evaluated without cancellation; 1 / (1 - beta) is exactly N.
    let one_minus_pow = -(n_k as f64 * (-1.0 / n).ln_1p()).exp_m1();
    n * one_minus_pow
}

/// The minority-weighted distribution Q.
pub fn weighted_q(hist: &ClassHistogram, strategy: WeightStrategy) -> SamplingDistribution {
    let total = hist.total();
    let raw = hist
        .counts()
        .iter()
        .map(|&n| match strategy {
            WeightStrategy::Power { r } => (n as f64).powf(-r),
            WeightStrategy::EffectiveNumber => 1.0 / effective_number(n, total),
        })
        .collect();
    SamplingDistribution::from_unnormalized(raw, hist)
}

/// Draws dataset indices with replacement from a sampling distribution.
#[derive(Debug, Clone)]
pub struct InstanceSampler {
    classes: WeightedIndex<f64>,
    members: Vec<Vec<usize>>,
}

impl InstanceSampler {
    pub fn new(dist: &SamplingDistribution, ds: &Dataset) -> Result<Self> {
        dist.check_dataset(ds)?;
        let classes = WeightedIndex::new(dist.class_probs())
            .map_err(|e| Error::invalid(format!("degenerate class distribution: {e}")))?;
        Ok(Self {
            classes,
            members: ds.class_indices(),
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let members = &self.members[self.classes.sample(rng)];
        members[rng.random_range(0..members.len())]
    }

    pub fn draw_many<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<usize> {
        (0..count).map(|_| self.draw(rng)).collect()
    }
}

pub fn draw_instance<R: Rng + ?Sized>(
    dist: &SamplingDistribution,
    ds: &Dataset,
    rng: &mut R,
) -> Result<usize> {
    Ok(InstanceSampler::new(dist, ds)?.draw(rng))
}

/// Random oversampling: replicate samples of every class, with replacement,
/// until each class matches the largest one.
pub fn ros_expand<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R) -> Result<Dataset> {
    let target = ds.histogram().max();
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    for members in ds.class_indices() {
        for _ in members.len()..target {
            indices.push(members[rng.random_range(0..members.len())]);
        }
    }
    ds.select(&indices)
}

/// Positive per-class loss weights with mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    /// Normalizes positive raw weights to mean 1.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("class weights must be finite and positive"));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Ok(Self {
            weights: raw.into_iter().map(|w| w / mean).collect(),
        })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }
}

/// Deferred re-weighting coefficients `1 / E(k)`, normalized to mean 1.
pub fn drw_class_weights(hist: &ClassHistogram) -> ClassWeights {
    let total = hist.total();
    let raw = hist
        .counts()
        .iter()
        .map(|&n| 1.0 / effective_number(n, total))
        .collect();
    ClassWeights::from_raw(raw).expect("effective numbers are positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Image, ImageShape, LabeledImage};
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn hist(counts: &[usize]) -> ClassHistogram {
        ClassHistogram::new(counts.to_vec()).unwrap()
    }

    fn dataset(counts: &[usize]) -> Dataset {
        let shape = ImageShape::new(1, 1, 1).unwrap();
        let mut images = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for i in 0..n {
                images.push(LabeledImage {
                    image: Image::filled(shape, (i % 256) as f64 / 255.0).unwrap(),
                    label: k,
                });
            }
        }
        Dataset::new(shape, counts.len(), images).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn q_examples() {
        let q = weighted_q(&hist(&[5, 5, 5, 5]), WeightStrategy::Power { r: 1.0 });
        assert_close(q.class_probs(), &[0.25; 4], 1e-12);

        let q = weighted_q(&hist(&[100, 10, 1]), WeightStrategy::Power { r: 0.0 });
        assert_close(q.class_probs(), &[1.0 / 3.0; 3], 1e-12);

        let q = weighted_q(&hist(&[100, 10, 1]), WeightStrategy::Power { r: 1.0 });
        assert_close(q.class_probs(), &[1.0 / 111.0, 10.0 / 111.0, 100.0 / 111.0], 1e-12);
        assert_close(q.class_probs(), &[0.009009, 0.090090, 0.900901], 1e-6);

        let q = weighted_q(&hist(&[100, 10, 1]), WeightStrategy::Power { r: 0.5 });
        let raw = [0.1, 10f64.sqrt().recip(), 1.0];
        let s: f64 = raw.iter().sum();
        assert_close(q.class_probs(), &raw.map(|v| v / s), 1e-12);
    }

    #[test]
    fn effective_number_examples() {
        assert!((effective_number(1, 2) - 1.0).abs() < 1e-12);
        assert!((effective_number(1, 1000) - 1.0).abs() < 1e-12);
        // 111 * (1 - (110/111)^100)
        let oracle = 111.0 * (1.0 - (110.0f64 / 111.0).powi(100));
        assert!((effective_number(100, 111) - oracle).abs() < 1e-9);
        assert!((effective_number(100, 111) - 66.09).abs() < 0.01);
        let e = effective_number(50, 50);
        assert!(e < 50.0);
        assert!((e - 50.0 * (1.0 - (49.0f64 / 50.0).powi(50))).abs() < 1e-9);
    }

    #[test]
    fn original_p_examples() {
        let h = hist(&[100, 10, 1]);
        let p = original_p(&h);
        assert_close(p.class_probs(), &[100.0 / 111.0, 10.0 / 111.0, 1.0 / 111.0], 1e-15);
        let w = p.instance_weights(&dataset(&[100, 10, 1])).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 111.0).abs() < 1e-15));
        assert_close(original_p(&hist(&[7, 7])).class_probs(), &[0.5, 0.5], 0.0);
    }

    #[test]
    fn single_instance_draw() {
        // A two-class dataset whose second class is never drawn under a
        // degenerate strategy still needs both classes; use r large instead.
        let ds = dataset(&[1, 1]);
        let p = original_p(ds.histogram());
        let mut rng = seeded(0);
        for _ in 0..10 {
            assert!(draw_instance(&p, &ds, &mut rng).unwrap() < 2);
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let ds = dataset(&[100, 10, 1]);
        let q = weighted_q(ds.histogram(), WeightStrategy::default());
        let s = InstanceSampler::new(&q, &ds).unwrap();
        assert_eq!(s.draw_many(500, &mut seeded(11)), s.draw_many(500, &mut seeded(11)));
    }

    #[test]
    fn sampler_rejects_foreign_dataset() {
        let q = weighted_q(&hist(&[3, 1]), WeightStrategy::default());
        assert!(InstanceSampler::new(&q, &dataset(&[2, 2])).is_err());
    }

    #[test]
    fn ros_balances() {
        let ds = dataset(&[3, 1]);
        let out = ros_expand(&ds, &mut seeded(2)).unwrap();
        assert_eq!(out.histogram().counts(), &[3, 3]);
        let minority: Vec<_> = ds.images().iter().filter(|i| i.label == 1).collect();
        for img in out.images().iter().filter(|i| i.label == 1) {
            assert!(minority.contains(&img));
        }
        let balanced = dataset(&[4, 4]);
        assert_eq!(ros_expand(&balanced, &mut seeded(2)).unwrap(), balanced);
    }

    #[test]
    fn drw_weights_examples() {
        let w = drw_class_weights(&hist(&[9, 9, 9]));
        assert_close(w.weights(), &[1.0; 3], 1e-12);

        let e: Vec<f64> = [100, 10, 1]
            .iter()
            .map(|&n| 111.0 * (1.0 - (110.0f64 / 111.0).powi(n)))
            .collect();
        assert!((e[1] - 9.6042).abs() < 1e-4);
        let raw: Vec<f64> = e.iter().map(|x| 1.0 / x).collect();
        let mean = raw.iter().sum::<f64>() / 3.0;
        let expected: Vec<f64> = raw.iter().map(|r| r / mean).collect();
        let w = drw_class_weights(&hist(&[100, 10, 1]));
        assert_close(w.weights(), &expected, 1e-9);
        let max = w.weights().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(w.get(2), max);
    }

    #[test]
    fn strategy_validation() {
        assert!(WeightStrategy::Power { r: -1.0 }.validate().is_err());
        assert!(WeightStrategy::Power { r: f64::NAN }.validate().is_err());
        assert!(WeightStrategy::EffectiveNumber.validate().is_ok());
    }

    fn strategies() -> impl Strategy<Value = WeightStrategy> {
        prop_oneof![
            (0.0f64..3.0).prop_map(|r| WeightStrategy::Power { r }),
            Just(WeightStrategy::EffectiveNumber),
        ]
    }

    proptest! {
        #[test]
        fn distributions_normalize_and_are_monotone(counts in prop::collection::vec(1usize..500, 2..30), strategy in strategies()) {
            let h = hist(&counts);
            let q = weighted_q(&h, strategy);
            prop_assert!((q.class_probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let inst: f64 = counts.iter().enumerate().map(|(k, &n)| q.instance_weight(k) * n as f64).sum();
            prop_assert!((inst - 1.0).abs() < 1e-9);
            for j in 0..counts.len() {
                for k in 0..counts.len() {
                    if counts[j] < counts[k] {
                        prop_assert!(q.class_probs()[j] >= q.class_probs()[k]);
                    }
                }
            }
            let p = original_p(&h);
            prop_assert!((p.class_probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn higher_power_favours_rarest(mut counts in prop::collection::btree_set(1usize..1000, 2..20)) {
            let counts: Vec<usize> = std::mem::take(&mut counts).into_iter().collect();
            let h = hist(&counts);
            let rarest = 0; // btree order: smallest count first
            let at = |r: f64| weighted_q(&h, WeightStrategy::Power { r }).class_probs()[rarest];
            prop_assert!(at(2.0) > at(1.0));
            prop_assert!(at(1.0) > at(0.5));
        }

        #[test]
        fn effective_number_bounds(total in 2usize..5000, a in 1usize..5000, b in 1usize..5000) {
            let (a, b) = (a.min(total), b.min(total));
            let (ea, eb) = (effective_number(a, total), effective_number(b, total));
            prop_assert!(ea >= 1.0 - 1e-12);
            if a >= 2 { prop_assert!(ea < a as f64); }
            if a < b { prop_assert!(ea < eb); }
        }

        #[test]
        fn drw_weights_mean_one(counts in prop::collection::vec(1usize..500, 2..30)) {
            let w = drw_class_weights(&hist(&counts));
            let mean = w.weights().iter().sum::<f64>() / counts.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
            prop_assert!(w.weights().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn ros_output_is_balanced(counts in prop::collection::vec(1usize..20, 2..6), seed in any::<u64>()) {
            let out = ros_expand(&dataset(&counts), &mut seeded(seed)).unwrap();
            let max = *counts.iter().max().unwrap();
            prop_assert!(out.histogram().counts().iter().all(|&n| n == max));
        }
    }

    #[test]
    fn empirical_frequencies_converge() {
        let ds = dataset(&[100, 10, 1]);
        let q = weighted_q(ds.histogram(), WeightStrategy::default());
        let s = InstanceSampler::new(&q, &ds).unwrap();
        let m = 100_000;
        let mut freq = [0f64; 3];
        let mut rng = seeded(123);
        for _ in 0..m {
            freq[ds.get(s.draw(&mut rng)).label] += 1.0 / m as f64;
        }
        let bound = 4.0 * (0.900901f64 / m as f64).sqrt();
        for (f, p) in freq.iter().zip(q.class_probs()) {
            assert!((f - p).abs() <= bound, "{freq:?}");
        }
    }
}
