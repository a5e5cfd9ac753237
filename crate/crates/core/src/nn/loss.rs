use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::SoftLabel;
use crate::sampler::ClassWeights;

/// Mixed target `lambda * onehot(y_b) + (1 - lambda) * onehot(y_f)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixTarget {
    pub y_b: usize,
    pub y_f: usize,
    pub lambda: f64,
}

impl MixTarget {
    pub fn hard(label: usize) -> Self {
        Self {
            y_b: label,
            y_f: label,
            lambda: 1.0,
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `lambda * w_b * CE(y_b) + (1 - lambda) * w_f * CE(y_f)` and its gradient
/// with respect to the logits. Without weights this is the cross-entropy
/// against the soft label and the gradient is `softmax - y~`.
pub fn soft_ce(
    logits: &[f64],
    target: MixTarget,
    weights: Option<&ClassWeights>,
) -> Result<(f64, Vec<f64>)> {
    let MixTarget { y_b, y_f, lambda } = target;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let c = logits.len();
    if y_b >= c || y_f >= c {
        return Err(Error::invalid(format!(
            "targets ({y_b}, {y_f}) out of range for {c} logits"
        )));
    }
    let (w_b, w_f) = match weights {
        Some(w) => (w.get(y_b), w.get(y_f)),
        None => (1.0, 1.0),
    };
    let a = lambda * w_b;
    let b = (1.0 - lambda) * w_f;
    let logp = log_softmax(logits);
    let loss = -(a * logp[y_b] + b * logp[y_f]);
    let scale = a + b;
    let mut grad: Vec<f64> = logp.iter().map(|&lp| scale * lp.exp()).collect();
    grad[y_b] -= a;
    grad[y_f] -= b;
    Ok((loss, grad))
}

/// `-sum_k y~_k log softmax(z)_k`.
pub fn soft_ce_target(logits: &[f64], target: &SoftLabel) -> Result<f64> {
    if target.probs().len() != logits.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} classes", logits.len()),
            actual: format!("{} classes", target.probs().len()),
        });
    }
    Ok(-log_softmax(logits)
        .iter()
        .zip(target.probs())
        .map(|(lp, y)| y * lp)
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::mix_labels;
    use crate::rng::seeded;
    use rand::Rng;

    fn ce(logits: &[f64], y: usize) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        -(logits[y] - m - z.ln())
    }

    #[test]
    fn uniform_logits_give_log_c() {
        for (yb, yf, l) in [(0, 0, 1.0), (1, 4, 0.3), (2, 3, 0.0)] {
            let (loss, _) = soft_ce(&[0.7; 5], MixTarget { y_b: yb, y_f: yf, lambda: l }, None).unwrap();
            assert!((loss - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_is_plain_cross_entropy() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let (loss, grad) = soft_ce(&z, MixTarget { y_b: 1, y_f: 3, lambda: 1.0 }, None).unwrap();
        assert!((loss - ce(&z, 1)).abs() < 1e-12);
        let p = softmax(&z);
        for k in 0..4 {
            let expect = p[k] - if k == 1 { 1.0 } else { 0.0 };
            assert!((grad[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn two_term_matches_soft_label_form() {
        let mut rng = seeded(17);
        for _ in 0..200 {
            let c = rng.random_range(2..12);
            let z: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (yb, yf) = (rng.random_range(0..c), rng.random_range(0..c));
            let target = MixTarget { y_b: yb, y_f: yf, lambda: 0.7 };
            let (loss, grad) = soft_ce(&z, target, None).unwrap();
            let two_term = 0.7 * ce(&z, yb) + 0.3 * ce(&z, yf);
            let soft = mix_labels(yb, yf, 0.7, c).unwrap();
            assert!((loss - two_term).abs() < 1e-10);
            assert!((loss - soft_ce_target(&z, &soft).unwrap()).abs() < 1e-10);
            let p = softmax(&z);
            for k in 0..c {
                assert!((grad[k] - (p[k] - soft.probs()[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_form() {
        let z = [0.5, -0.2, 1.1];
        let w = ClassWeights::from_raw(vec![1.0, 2.0, 3.0]).unwrap();
        let t = MixTarget { y_b: 0, y_f: 2, lambda: 0.25 };
        let (loss, grad) = soft_ce(&z, t, Some(&w)).unwrap();
        let expect = 0.25 * w.get(0) * ce(&z, 0) + 0.75 * w.get(2) * ce(&z, 2);
        assert!((loss - expect).abs() < 1e-12);
        let h = 1e-6;
        for k in 0..3 {
            let mut zp = z;
            zp[k] += h;
            let mut zm = z;
            zm[k] -= h;
            let fd = (soft_ce(&zp, t, Some(&w)).unwrap().0 - soft_ce(&zm, t, Some(&w)).unwrap().0) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_lambda_and_targets() {
        assert!(soft_ce(&[0.0, 0.0], MixTarget { y_b: 0, y_f: 1, lambda: 1.2 }, None).is_err());
        assert!(soft_ce(&[0.0, 0.0], MixTarget { y_b: 0, y_f: 2, lambda: 0.5 }, None).is_err());
    }

    #[test]
    fn stable_for_large_logits() {
        let (loss, grad) = soft_ce(&[1000.0, -1000.0], MixTarget::hard(0), None).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}
