//! Class-balanced sampling, RMSprop and the epoch loop.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::segment;
use crate::layers::{cross_entropy_loss, LayerParams, Mode};
use crate::metrics::evaluate;
use crate::network::Model;
use crate::patch::{extract_group, PatchGroup};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{validate_geometry, BrainMask, LabelVolume, Volume};

/// Samples per gradient work unit. Mini-batches are split into units of this
/// size whose gradients are summed in unit order, so results do not depend
/// on the number of threads.
pub const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Samples drawn per class per image per epoch.
    pub samples_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Probability of keeping a branch FC unit.
    pub dropout_keep: f64,
    pub seed: u64,
    /// Worker threads; `1` is the bit-exact reference mode.
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 50_000,
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
            dropout_keep: 0.5,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad("dropout_keep must lie in (0, 1]");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        Ok(())
    }
}

/// Running mean-square of the gradient for every parameter tensor, in the
/// order of [`Model::layers`], weights before biases.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub mean_square: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn for_model(model: &Model<T>) -> Self {
        let mean_square = model
            .layers()
            .iter()
            .flat_map(|l| [Tensor::zeros(l.weights.shape()), Tensor::zeros(l.biases.shape())])
            .collect();
        Self { mean_square }
    }

    pub fn cast<U: Scalar>(&self) -> OptimizerState<U> {
        OptimizerState {
            mean_square: self.mean_square.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl From<&TrainingConfig> for RmsProp {
    fn from(c: &TrainingConfig) -> Self {
        Self {
            rate: c.learning_rate,
            rho: c.rho,
            epsilon: c.epsilon,
        }
    }
}

/// One RMSprop update of a single tensor:
/// `r ← ρ·r + (1−ρ)·g²`, `θ ← θ − rate·g / (√r + ε)`.
pub fn rmsprop_update<T: Scalar>(theta: &mut Tensor<T>, grad: &Tensor<T>, r: &mut Tensor<T>, hp: RmsProp) -> Result<()> {
    if theta.shape() != grad.shape() || theta.shape() != r.shape() {
        return Err(Error::dim("rmsprop tensor length", theta.len(), grad.len().min(r.len())));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at element {i}")));
    }
    let rho = T::from_f64_lossy(hp.rho);
    let one_minus = T::from_f64_lossy(1.0 - hp.rho);
    let rate = T::from_f64_lossy(hp.rate);
    let eps = T::from_f64_lossy(hp.epsilon);
    for ((t, &g), m) in theta.data_mut().iter_mut().zip(grad.data()).zip(r.data_mut()) {
        *m = rho * *m + one_minus * g * g;
        *t -= rate * g / (m.sqrt() + eps);
    }
    Ok(())
}

/// Applies [`rmsprop_update`] to every weight and bias tensor of a layer.
pub fn rmsprop_step<T: Scalar>(params: &mut LayerParams<T>, state: &mut [Tensor<T>], hp: RmsProp) -> Result<()> {
    let [rw, rb] = state else {
        return Err(Error::dim("optimizer tensors per layer", 2, state.len()));
    };
    rmsprop_update(&mut params.weights, &params.weight_grad, rw, hp)?;
    rmsprop_update(&mut params.biases, &params.bias_grad, rb, hp)
}

impl<T: Scalar> Model<T> {
    /// RMSprop step on every layer using the accumulated gradients.
    pub fn apply_rmsprop(&mut self, hp: RmsProp) -> Result<()> {
        let mut state = std::mem::take(&mut self.optimizer.mean_square);
        let result = self
            .layers_mut()
            .into_iter()
            .zip(state.chunks_mut(2))
            .enumerate()
            .try_for_each(|(i, (layer, st))| {
                rmsprop_step(layer, st, hp).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("layer {i}: {m}")),
                    other => other,
                })
            });
        self.optimizer.mean_square = state;
        result
    }

    /// Copy holding the parameters but no optimiser state, with zeroed
    /// gradients; used to compute gradients of one work unit.
    fn gradient_worker(&self) -> Model<T> {
        let mut w = Model {
            config: self.config.clone(),
            branches: self.branches.clone(),
            head: self.head.clone(),
            optimizer: OptimizerState::default(),
        };
        w.zero_grad();
        w
    }
}

/// One labelled training or validation image.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub mask: BrainMask,
}

impl LabeledImage {
    pub fn new(volume: Volume, labels: LabelVolume, mask: BrainMask) -> Result<Self> {
        validate_geometry(&volume, &mask, Some(&labels))?;
        Ok(Self { volume, labels, mask })
    }
}

/// Per class, up to `k` distinct masked coordinates of that class, drawn
/// uniformly without replacement; all of them when the class has at most
/// `k` voxels. Classes absent from the mask get an empty list.
pub fn balanced_sample<R: Rng + ?Sized>(
    labels: &LabelVolume,
    mask: &BrainMask,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<[usize; 3]>>> {
    labels.geometry.check_matches(&mask.geometry, "mask vs labels")?;
    if k == 0 {
        return Err(Error::Config("samples per class must be at least 1".into()));
    }
    if mask.is_empty() {
        return Err(Error::Input("brain mask is empty".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.num_classes()];
    let lab = labels.labels();
    for i in mask.indices() {
        by_class[lab[i] as usize].push(i);
    }
    let g = labels.geometry;
    Ok(by_class
        .into_iter()
        .map(|idx| {
            if idx.len() <= k {
                idx.into_iter().map(|i| g.coord(i)).collect()
            } else {
                index::sample(rng, idx.len(), k).into_iter().map(|j| g.coord(idx[j])).collect()
            }
        })
        .collect())
}

/// A training voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub image: usize,
    pub coord: [usize; 3],
    pub label: u8,
}

/// Samples with their extracted patch groups.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub samples: Vec<Sample>,
    pub groups: Vec<PatchGroup>,
}

impl SampleBatch {
    pub fn assemble(samples: &[Sample], images: &[LabeledImage], sizes: &[usize]) -> Result<Self> {
        let groups = samples
            .iter()
            .map(|s| extract_group(&images[s.image].volume, s.coord, sizes))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples: samples.to_vec(),
            groups,
        })
    }

    pub fn targets(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }
}

/// The balanced, globally shuffled sample list of one epoch.
pub fn draw_epoch(images: &[LabeledImage], k: usize, seed: u64, epoch: usize) -> Result<Vec<Sample>> {
    let mut all = Vec::new();
    for (ii, img) in images.iter().enumerate() {
        let mut r = rng::derive(seed, &[rng::SAMPLE, epoch as u64, ii as u64]);
        for (class, coords) in balanced_sample(&img.labels, &img.mask, k, &mut r)?.into_iter().enumerate() {
            all.extend(coords.into_iter().map(|coord| Sample {
                image: ii,
                coord,
                label: class as u8,
            }));
        }
    }
    all.shuffle(&mut rng::derive(seed, &[rng::SHUFFLE, epoch as u64]));
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples: usize,
    /// Mean Dice per foreground class over the validation images, when
    /// validation images were supplied (`None` for undefined classes).
    pub dice: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Comma-separated table: `epoch,mean_loss,samples[,dice_1,...]`.
    pub fn to_csv(&self) -> String {
        let ndice = self.epochs.iter().filter_map(|e| e.dice.as_ref().map(Vec::len)).max().unwrap_or(0);
        let mut out = String::from("epoch,mean_loss,samples");
        for c in 1..=ndice {
            out.push_str(&format!(",dice_{c}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6},{}", e.epoch, e.mean_loss, e.samples));
            for c in 0..ndice {
                match e.dice.as_ref().and_then(|d| d.get(c).copied().flatten()) {
                    Some(v) => out.push_str(&format!(",{v:.4}")),
                    None => out.push_str(",n/a"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains `model` in place. Each epoch draws a fresh balanced sample set,
/// shuffles it across images and runs mini-batch RMSprop on the mean
/// cross-entropy. Images must already be intensity-scaled.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    images: &[LabeledImage],
    cfg: &TrainingConfig,
    validation: &[LabeledImage],
) -> Result<History> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("no training images".into()));
    }
    let n = model.config.num_classes;
    for (i, img) in images.iter().chain(validation).enumerate() {
        validate_geometry(&img.volume, &img.mask, Some(&img.labels))?;
        if img.labels.num_classes() > n {
            return Err(Error::Config(format!(
                "image {i} has {} classes, model has {n}",
                img.labels.num_classes()
            )));
        }
        if img.mask.is_empty() {
            return Err(Error::Input(format!("image {i} has an empty brain mask")));
        }
        if img.volume.plane != model.config.plane {
            return Err(Error::Config(format!(
                "image {i} is {} but the model expects {} patches",
                img.volume.plane, model.config.plane
            )));
        }
    }
    model.config.dropout_keep = cfg.dropout_keep;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let hp = RmsProp::from(&*cfg);
    let sizes = model.config.patch_sizes();
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let samples = draw_epoch(images, cfg.samples_per_class, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
            let model_ref = &*model;
            let units: Vec<Result<(Model<T>, f64)>> = pool.install(|| {
                batch
                    .par_chunks(GRAD_CHUNK)
                    .enumerate()
                    .map(|(ci, unit)| {
                        let sb = SampleBatch::assemble(unit, images, &sizes)?;
                        let targets = sb.targets();
                        let mut worker = model_ref.gradient_worker();
                        let mut r = rng::derive(cfg.seed, &[rng::DROPOUT, epoch as u64, bi as u64, ci as u64]);
                        let pass = worker.forward(&sb.groups, Mode::Training, &mut r)?;
                        let loss = cross_entropy_loss(&pass.probs, &targets)? * unit.len() as f64;
                        worker.backward(&pass, &targets, scale, false)?;
                        Ok((worker, loss))
                    })
                    .collect()
            });
            model.zero_grad();
            let mut batch_loss = 0.0;
            for unit in units {
                let (worker, loss) = unit?;
                model.add_grads(&worker)?;
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}, batch {bi}")));
            }
            model
                .apply_rmsprop(hp)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {bi}: {e}")))?;
            loss_sum += batch_loss;
        }
        let mean_loss = loss_sum / samples.len().max(1) as f64;
        let dice = if validation.is_empty() {
            None
        } else {
            Some(validation_dice(model, validation, cfg.threads)?)
        };
        log::info!("epoch {} of {}: mean loss {mean_loss:.5} over {} samples", epoch + 1, cfg.epochs, samples.len());
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            samples: samples.len(),
            dice,
        });
    }
    Ok(history)
}

fn validation_dice<T: Scalar>(model: &Model<T>, images: &[LabeledImage], threads: usize) -> Result<Vec<Option<f64>>> {
    let n = model.config.num_classes;
    let mut sums = vec![(0.0, 0usize); n.saturating_sub(1)];
    for img in images {
        let seg = segment(&img.volume, &img.mask, model, 512, threads, false)?;
        let report = evaluate(&seg.labels, &img.labels)?;
        for c in &report.classes {
            if let Some(d) = c.dice {
                let s = &mut sums[c.class - 1];
                s.0 += d;
                s.1 += 1;
            }
        }
    }
    Ok(sums.into_iter().map(|(s, k)| (k > 0).then(|| s / k as f64)).collect())
}
