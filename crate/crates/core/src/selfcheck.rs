//! Fast invariant suite behind `cmo selfcheck`.

use rand::Rng;

use crate::corpus::{
    build_longtail_profile, decode_dataset, encode_dataset, imbalance_ratio, shot_groups, Dataset, Image,
    ImageShape, LabeledImage, LongTailSpec, Profile, ShotThresholds,
};
use crate::error::{Error, Result};
use crate::eval::{calibration, evaluate_probs};
use crate::experiment::mean_std;
use crate::mixer::{cutmix, draw_lambda, mix_labels, region_at, sample_region, MixVariant};
use crate::nn::{encode_checkpoint, loss_and_grad, lr_at, soft_ce, soft_ce_target, train, Architecture, MixTarget, Model, Sgd, TrainConfig};
use crate::rng::seeded;
use crate::sampler::{effective_number, original_p, weighted_q, ClassWeights, InstanceSampler, WeightStrategy};
use crate::corpus::ClassHistogram;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

/// Relative error `|g - g_fd| / (|g| + |g_fd|)` between the analytic
/// parameter gradient of the weighted mixed loss and central finite
/// differences, on a random 3-image batch.
pub fn gradient_check(arch: Architecture, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let shape = ImageShape::new(6, 6, 2)?;
    let classes = 4;
    let mut model = Model::new(arch, shape, classes, &mut rng)?;
    // Jitter every parameter so no unit starts exactly on a ReLU kink.
    for p in model.params_mut() {
        *p += 0.05 * (rng.random::<f64>() - 0.5);
    }
    let images = (0..3)
        .map(|_| Image::new(shape, (0..shape.len()).map(|_| rng.random()).collect()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let targets: Vec<MixTarget> = (0..3)
        .map(|_| MixTarget {
            y_b: rng.random_range(0..classes),
            y_f: rng.random_range(0..classes),
            lambda: rng.random(),
        })
        .collect();
    let weights = ClassWeights::from_raw((0..classes).map(|_| 0.2 + rng.random::<f64>()).collect())?;

    let (_, analytic) = loss_and_grad(&model, &refs, &targets, Some(&weights))?;
    let h = 1e-5;
    let mut numeric = vec![0.0; model.num_params()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let (up, _) = loss_and_grad(&model, &refs, &targets, Some(&weights))?;
        model.params_mut()[i] = orig - h;
        let (down, _) = loss_and_grad(&model, &refs, &targets, Some(&weights))?;
        model.params_mut()[i] = orig;
        *n = (up - down) / (2.0 * h);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    Ok(norm(&diff) / (norm(&analytic) + norm(&numeric)).max(1e-12))
}

/// Architectures exercised by the gradient check.
pub fn check_architectures() -> Vec<(&'static str, Architecture)> {
    vec![
        ("linear", Architecture::Linear),
        ("mlp", Architecture::Mlp { hidden: vec![7, 5] }),
        ("tinyconv", Architecture::TinyConv { channels: vec![3, 4] }),
    ]
}

fn toy_dataset(counts: &[usize], seed: u64) -> Result<Dataset> {
    let mut rng = seeded(seed);
    let shape = ImageShape::new(6, 6, 3)?;
    let mut images = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let data = (0..shape.len())
                .map(|i| {
                    let base = if (i / 3) % counts.len() == k { 0.7 } else { 0.3 };
                    // 8-bit levels, so the on-disk encoding is lossless
                    let v: f64 = (base + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
                    (v * 255.0).round() / 255.0
                })
                .collect();
            images.push(LabeledImage {
                image: Image::new(shape, data)?,
                label: k,
            });
        }
    }
    Dataset::new(shape, counts.len(), images)
}

fn profile() -> Result<()> {
    let spec = LongTailSpec {
        num_classes: 10,
        n_max: 100,
        rho: 100.0,
        profile: Profile::Exponential,
    };
    let hist = build_longtail_profile(&spec)?;
    ensure(hist.counts()[0] == 100 && hist.counts()[9] == 1, || format!("{:?}", hist.counts()))?;
    ensure(hist.counts().windows(2).all(|w| w[0] >= w[1]), || "profile not monotone".into())?;
    ensure(imbalance_ratio(&hist) == 100.0, || "imbalance ratio".into())?;
    let g = shot_groups(&ClassHistogram::new(vec![500, 50, 5])?, ShotThresholds::FULL_SCALE)?;
    ensure(g.many == [0] && g.medium == [1] && g.few == [2], || format!("{g:?}"))
}

fn sampling() -> Result<()> {
    let hist = ClassHistogram::new(vec![100, 10, 1])?;
    let q = weighted_q(&hist, WeightStrategy::Power { r: 1.0 });
    let z = 0.01 + 0.1 + 1.0;
    for (got, want) in q.class_probs().iter().zip([0.01 / z, 0.1 / z, 1.0 / z]) {
        ensure((got - want).abs() < 1e-12, || format!("q = {:?}", q.class_probs()))?;
    }
    let p = original_p(&hist);
    ensure((p.class_probs().iter().sum::<f64>() - 1.0).abs() < 1e-12, || "P not normalized".into())?;
    for n in [1, 10, 100] {
        let e = effective_number(n, 111);
        ensure((1.0..=n as f64).contains(&e), || format!("E({n}) = {e}"))?;
    }
    let ds = toy_dataset(&[100, 10, 1], 1)?;
    let sampler = InstanceSampler::new(&q, &ds)?;
    let mut rng = seeded(5);
    let draws = 20_000;
    let mut freq = [0.0; 3];
    for i in sampler.draw_many(draws, &mut rng) {
        freq[ds.get(i).label] += 1.0 / draws as f64;
    }
    for (f, want) in freq.iter().zip(q.class_probs()) {
        ensure((f - want).abs() < 0.02, || format!("frequencies {freq:?}"))?;
    }
    Ok(())
}

fn regions() -> Result<()> {
    let mut rng = seeded(7);
    for _ in 0..2_000 {
        let lambda = draw_lambda(1.0, &mut rng)?;
        let r = sample_region(32, 32, lambda, &mut rng)?;
        ensure(r.lambda_adj >= r.lambda_raw, || format!("{r:?}"))?;
    }
    let r = region_at(32, 32, 0.75, 16, 16)?;
    ensure(r.area() == 256 && r.lambda_adj == 0.75, || format!("{r:?}"))?;
    let shape = ImageShape::new(32, 32, 3)?;
    let mixed = cutmix(&Image::filled(shape, 0.0)?, &Image::filled(shape, 1.0)?, &region_at(32, 32, 0.9375, 16, 16)?)?;
    ensure(mixed.data().iter().sum::<f64>() == 64.0 * 3.0, || "cutmix area".into())?;
    let y = mix_labels(0, 2, 0.3, 4)?;
    ensure((y.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12, || format!("{y:?}"))
}

fn losses() -> Result<()> {
    let mut rng = seeded(11);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..5).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
        let (yb, yf) = (rng.random_range(0..5), rng.random_range(0..5));
        let (two_term, _) = soft_ce(&logits, MixTarget { y_b: yb, y_f: yf, lambda: 0.7 }, None)?;
        let soft = soft_ce_target(&logits, &mix_labels(yb, yf, 0.7, 5)?)?;
        ensure((two_term - soft).abs() < 1e-10, || format!("{two_term} vs {soft}"))?;
    }
    let (uniform, _) = soft_ce(&[0.0; 4], MixTarget { y_b: 1, y_f: 3, lambda: 0.4 }, None)?;
    ensure((uniform - 4f64.ln()).abs() < 1e-12, || format!("uniform loss {uniform}"))
}

fn gradients() -> Result<()> {
    for (name, arch) in check_architectures() {
        for seed in 0..3 {
            let err = gradient_check(arch.clone(), seed)?;
            ensure(err < 1e-4, || format!("{name} seed {seed}: relative error {err:e}"))?;
        }
    }
    Ok(())
}

fn optimizer_and_schedule() -> Result<()> {
    let mut params = vec![0.0];
    let mut opt = Sgd::new(1, 0.9, 0.0);
    opt.step(&mut params, &[1.0], 0.1)?;
    opt.step(&mut params, &[1.0], 0.1)?;
    ensure((params[0] + 0.1 * 2.9).abs() < 1e-12, || format!("momentum displacement {}", params[0]))?;
    let cfg = TrainConfig {
        epochs: 200,
        base_lr: 0.1,
        warmup_epochs: 5,
        decay_epochs: vec![160, 180],
        decay_factor: 0.01,
        ..TrainConfig::default()
    };
    ensure((lr_at(170, &cfg) - 1e-3).abs() < 1e-15, || "lr at 170".into())?;
    ensure((lr_at(190, &cfg) - 1e-5).abs() < 1e-17, || "lr at 190".into())?;
    ensure(lr_at(5, &cfg) == 0.1, || "lr after warmup".into())
}

fn metrics() -> Result<()> {
    let cal = calibration(&vec![vec![0.8, 0.2]; 5], &[0, 0, 0, 0, 1], 15)?;
    ensure(cal.ece.abs() < 1e-12, || format!("ece {}", cal.ece))?;
    let g = shot_groups(&ClassHistogram::new(vec![10, 1])?, ShotThresholds { many: 5, few: 2 })?;
    let r = evaluate_probs(&vec![vec![0.9, 0.1]; 4], &[0, 0, 1, 1], &g, 15)?;
    ensure(r.overall_acc == 0.5 && r.per_class_acc == [1.0, 0.0], || format!("{r:?}"))?;
    let (mean, std) = mean_std(&[0.4, 0.5]).expect("non-empty");
    ensure((mean - 0.45).abs() < 1e-15 && (std - 0.005f64.sqrt()).abs() < 1e-15, || "mean/std".into())
}

fn persistence_and_determinism() -> Result<()> {
    let ds = toy_dataset(&[12, 4, 2], 3)?;
    let back = decode_dataset(&encode_dataset(&ds)?)?;
    ensure(back.images() == ds.images(), || "dataset round trip".into())?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 6,
        warmup_epochs: 1,
        decay_epochs: vec![2],
        cmo_off_last: 1,
        variant: Some(MixVariant::Cmo),
        model: Architecture::TinyConv { channels: vec![2] },
        ..TrainConfig::default()
    };
    let (a, ha) = train(&cfg, &ds)?;
    let (b, hb) = train(&TrainConfig { workers: 2, ..cfg }, &ds)?;
    ensure(encode_checkpoint(&a)? == encode_checkpoint(&b)? && ha == hb, || {
        "training differs between runs".into()
    })
}

type Check = (&'static str, fn() -> Result<()>);

const CHECKS: [Check; 8] = [
    ("long-tail profile and shot groups", profile),
    ("sampling distributions", sampling),
    ("mixing regions and labels", regions),
    ("mixed loss identities", losses),
    ("gradient check", gradients),
    ("optimizer and schedule", optimizer_and_schedule),
    ("metrics", metrics),
    ("persistence and determinism", persistence_and_determinism),
];

pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| match check() {
            Ok(()) => CheckOutcome {
                name,
                passed: true,
                detail: String::new(),
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
