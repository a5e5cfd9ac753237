use std::borrow::Cow;
use std::ptr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{soft_ce, MixTarget};
use super::model::{encode_chw, Architecture, Model};
use super::optim::Sgd;
use super::schedule::lr_at;
use crate::corpus::{shot_groups, Dataset, Image, ShotThresholds};
use crate::error::{Error, Result};
use crate::mixer::{
    cutmix, draw_lambda, make_pair_sources, mixup, sample_region, Augmentation, BlurParams,
    Compositor, JitterParams, MixRegion, MixVariant, PairSources,
};
use crate::rng::{stream, tag};
use crate::sampler::{
    drw_class_weights, original_p, ros_expand, weighted_q, ClassWeights, InstanceSampler,
    SamplingDistribution, WeightStrategy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    #[default]
    None,
    /// Random oversampling to class balance before training.
    Ros,
}

/// Full description of one training run. Every field has a desk-scale
/// default; the defaults mirror the reference CIFAR-LT recipe scaled to
/// 40 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Zero-based epochs at which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Beta(alpha, alpha) parameter for the mixing ratio.
    pub alpha: f64,
    /// `None` trains on unmixed batches (plain cross-entropy).
    pub variant: Option<MixVariant>,
    pub q_strategy: WeightStrategy,
    pub resample: Resample,
    /// First epoch of deferred re-weighting; `None` disables it.
    pub drw_epoch: Option<usize>,
    /// Number of final epochs trained without mixing.
    pub cmo_off_last: usize,
    /// Draw a separate lambda and region per image instead of per batch.
    pub per_image_regions: bool,
    pub seed: u64,
    pub shot_thresholds: ShotThresholds,
    pub model: Architecture,
    pub blur: BlurParams,
    pub jitter: JitterParams,
    /// Threads used for batch preparation. Does not affect results.
    pub workers: usize,
    /// Record training-set accuracy every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            base_lr: 0.05,
            warmup_epochs: 2,
            decay_epochs: vec![32, 36],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            alpha: 1.0,
            variant: None,
            q_strategy: WeightStrategy::default(),
            resample: Resample::None,
            drw_epoch: None,
            cmo_off_last: 3,
            per_image_regions: false,
            seed: 0,
            shot_thresholds: ShotThresholds::scaled_for(100),
            model: Architecture::default(),
            blur: BlurParams::default(),
            jitter: JitterParams::default(),
            workers: 1,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    /// Enables deferred re-weighting at 80% of training.
    pub fn with_default_drw(mut self) -> Self {
        self.drw_epoch = Some(self.epochs * 4 / 5);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad(format!("decay_factor must be > 0, got {}", self.decay_factor));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("decay_epochs must be increasing, got {:?}", self.decay_epochs));
        }
        if let Some(&first) = self.decay_epochs.first() {
            if self.warmup_epochs >= first {
                return bad(format!(
                    "warmup_epochs ({}) must end before the first decay epoch ({first})",
                    self.warmup_epochs
                ));
            }
        }
        if self.decay_epochs.last().is_some_and(|&d| d >= self.epochs) {
            return bad(format!(
                "decay epochs {:?} must be below epochs ({})",
                self.decay_epochs, self.epochs
            ));
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return bad(format!("warmup_epochs must be below epochs ({})", self.epochs));
        }
        if self.cmo_off_last > self.epochs {
            return bad(format!(
                "cmo_off_last ({}) exceeds epochs ({})",
                self.cmo_off_last, self.epochs
            ));
        }
        if !((0.0..1.0).contains(&self.momentum)) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.q_strategy.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.shot_thresholds.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn mixing_active(&self, epoch: usize) -> bool {
        self.variant.is_some() && epoch + self.cmo_off_last < self.epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mixing: bool,
    pub reweighted: bool,
    /// Top-1 accuracy on the (unexpanded) training set, when recorded.
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.mean_loss)
    }
}

struct Batch {
    inputs: Vec<Vec<f64>>,
    targets: Vec<MixTarget>,
}

struct Context<'a> {
    config: &'a TrainConfig,
    data: &'a Dataset,
    p: SamplingDistribution,
    q: SamplingDistribution,
    p_sampler: InstanceSampler,
    q_sampler: InstanceSampler,
    minority: Vec<bool>,
}

impl Context<'_> {
    fn sampler_for(&self, dist: &SamplingDistribution) -> &InstanceSampler {
        if ptr::eq(dist, &self.p) {
            &self.p_sampler
        } else {
            &self.q_sampler
        }
    }

    fn encode(&self, image: &Image) -> Vec<f64> {
        encode_chw(image)
    }

    fn plain_batch(&self, chunk: &[usize]) -> Result<Batch> {
        let mut batch = Batch {
            inputs: Vec::with_capacity(chunk.len()),
            targets: Vec::with_capacity(chunk.len()),
        };
        for &i in chunk {
            let item = self.data.get(i);
            batch.inputs.push(self.encode(&item.image));
            batch.targets.push(MixTarget::hard(item.label));
        }
        Ok(batch)
    }

    /// `chunk` is this batch's slice of the epoch's P-ordered permutation.
    fn prepare<R: Rng>(&self, chunk: &[usize], mixing: bool, rng: &mut R) -> Result<Batch> {
        if !mixing {
            return self.plain_batch(chunk);
        }
        let variant = self.config.variant.expect("mixing implies a variant");
        match make_pair_sources(variant, &self.p, &self.q) {
            PairSources::Paired {
                background,
                foreground,
                compositor,
            } => {
                let bg: Vec<usize> = if ptr::eq(background, &self.p) {
                    chunk.to_vec()
                } else {
                    self.sampler_for(background).draw_many(chunk.len(), rng)
                };
                let fg = self.sampler_for(foreground).draw_many(chunk.len(), rng);
                self.mixed_batch(&bg, &fg, compositor, rng)
            }
            PairSources::Unpaired(aug) => {
                let mut batch = self.plain_batch(chunk)?;
                for i in self.q_sampler.draw_many(chunk.len(), rng) {
                    let item = self.data.get(i);
                    let image = if self.minority[item.label] {
                        match aug {
                            Augmentation::Blur => self.config.blur.apply(&item.image, rng)?,
                            Augmentation::Jitter => self.config.jitter.apply(&item.image, rng)?,
                        }
                    } else {
                        item.image.clone()
                    };
                    batch.inputs.push(self.encode(&image));
                    batch.targets.push(MixTarget::hard(item.label));
                }
                Ok(batch)
            }
        }
    }

    fn mixed_batch<R: Rng>(
        &self,
        bg: &[usize],
        fg: &[usize],
        compositor: Compositor,
        rng: &mut R,
    ) -> Result<Batch> {
        let shape = self.data.shape();
        let mut batch = Batch {
            inputs: Vec::with_capacity(bg.len()),
            targets: Vec::with_capacity(bg.len()),
        };
        // One lambda/region per batch unless per-image regions are requested.
        let mut shared: Option<MixRegion> = None;
        for (&b, &f) in bg.iter().zip(fg) {
            let region = match shared {
                Some(r) if !self.config.per_image_regions => r,
                _ => {
                    let lambda = draw_lambda(self.config.alpha, rng)?;
                    let r = match compositor {
                        Compositor::Cutmix => sample_region(shape.width, shape.height, lambda, rng)?,
                        // Mixup blends whole images; only the raw ratio matters.
                        Compositor::Mixup => MixRegion {
                            x1: 0,
                            y1: 0,
                            x2: 0,
                            y2: 0,
                            lambda_raw: lambda,
                            lambda_adj: lambda,
                        },
                    };
                    shared = Some(r);
                    r
                }
            };
            let (xb, xf) = (self.data.get(b), self.data.get(f));
            let image = match compositor {
                Compositor::Cutmix => cutmix(&xb.image, &xf.image, &region)?,
                Compositor::Mixup => mixup(&xb.image, &xf.image, region.lambda_raw)?,
            };
            batch.inputs.push(self.encode(&image));
            batch.targets.push(MixTarget {
                y_b: xb.label,
                y_f: xf.label,
                lambda: region.lambda_adj,
            });
        }
        Ok(batch)
    }
}

/// Mean soft cross-entropy over the batch and its parameter gradient.
fn batch_loss_grad(model: &Model, batch: Batch, weights: Option<&ClassWeights>) -> Result<(f64, Vec<f64>)> {
    let n = batch.inputs.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for (x, t) in batch.inputs.into_iter().zip(batch.targets) {
        let trace = model.forward_encoded(x)?;
        let (l, mut dlogits) = soft_ce(trace.logits(), t, weights)?;
        loss += l;
        for d in &mut dlogits {
            *d /= n;
        }
        model.backward(&trace, &dlogits, &mut grad);
    }
    Ok((loss / n, grad))
}

/// Mean mixed loss of `model` over a batch and its gradient with respect to
/// the model parameters.
pub fn loss_and_grad(
    model: &Model,
    images: &[&Image],
    targets: &[MixTarget],
    weights: Option<&ClassWeights>,
) -> Result<(f64, Vec<f64>)> {
    if images.len() != targets.len() || images.is_empty() {
        return Err(Error::invalid(format!(
            "{} images for {} targets",
            images.len(),
            targets.len()
        )));
    }
    let inputs = images
        .iter()
        .map(|im| model.encode_input(im))
        .collect::<Result<Vec<_>>>()?;
    batch_loss_grad(
        model,
        Batch {
            inputs,
            targets: targets.to_vec(),
        },
        weights,
    )
}

fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for item in ds.images() {
        let trace = model.forward_encoded(model.encode_input(&item.image)?)?;
        let logits = trace.logits();
        let pred = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("at least two classes");
        correct += usize::from(pred == item.label);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains a model on `dataset` with re-weighting coefficients derived from
/// its histogram.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Model, TrainHistory)> {
    train_with_weights(config, dataset, None)
}

/// Like [`train`], with explicit class weights for the deferred re-weighting
/// phase.
pub fn train_with_weights(
    config: &TrainConfig,
    dataset: &Dataset,
    drw_weights: Option<ClassWeights>,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let data: Cow<'_, Dataset> = match config.resample {
        Resample::None => Cow::Borrowed(dataset),
        Resample::Ros => Cow::Owned(ros_expand(dataset, &mut stream(config.seed, &[tag::ROS]))?),
    };
    let hist = data.histogram();
    let drw = match drw_weights {
        Some(w) if w.weights().len() == hist.num_classes() => w,
        Some(w) => {
            return Err(Error::invalid(format!(
                "{} class weights for {} classes",
                w.weights().len(),
                hist.num_classes()
            )))
        }
        None => drw_class_weights(hist),
    };
    let groups = shot_groups(dataset.histogram(), config.shot_thresholds)?;
    let minority: Vec<bool> = (0..hist.num_classes()).map(|k| !groups.is_many(k)).collect();

    let mut model = Model::new(
        config.model.clone(),
        data.shape(),
        data.num_classes(),
        &mut stream(config.seed, &[tag::INIT]),
    )?;
    let mut opt = Sgd::new(model.num_params(), config.momentum, config.weight_decay);
    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let p = original_p(hist);
    let q = weighted_q(hist, config.q_strategy);
    let ctx = Context {
        config,
        data: &data,
        p_sampler: InstanceSampler::new(&p, &data)?,
        q_sampler: InstanceSampler::new(&q, &data)?,
        p,
        q,
        minority,
    };
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mixing = config.mixing_active(epoch);
        let reweighted = config.drw_epoch.is_some_and(|d| epoch >= d);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(config.seed, &[tag::EPOCH_ORDER, epoch as u64]));
        let chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();

        let prepare = |b: usize| {
            let mut rng = stream(config.seed, &[tag::BATCH, epoch as u64, b as u64]);
            ctx.prepare(chunks[b], mixing, &mut rng)
        };
        let batches = match &pool {
            Some(pool) => pool.install(|| {
                (0..chunks.len())
                    .into_par_iter()
                    .map(prepare)
                    .collect::<Result<Vec<_>>>()
            }),
            None => (0..chunks.len()).map(prepare).collect::<Result<Vec<_>>>(),
        }?;

        let weights = reweighted.then_some(&drw);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches.into_iter().enumerate() {
            let size = batch.inputs.len();
            let (loss, grad) = batch_loss_grad(&model, batch, weights)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss is {loss} at epoch {epoch}, batch {b}")));
            }
            opt.step(model.params_mut(), &grad, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += loss * size as f64;
            seen += size;
        }

        let snapshot = config.eval_every > 0
            && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / seen as f64,
            mixing,
            reweighted,
            train_accuracy: if snapshot { Some(accuracy(&model, dataset)?) } else { None },
        });
    }
    Ok((model, history))
}
