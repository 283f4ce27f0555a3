//! The multi-branch patch classifier.
//!
//! Each branch owns a stack of convolution blocks over one patch size and a
//! fully connected layer. The ReLU'd (and, in training, dropped-out) outputs
//! of all branch FC layers are concatenated and fed to a single shared dense
//! layer followed by a softmax over the classes.

use std::hash::{DefaultHasher, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{
    self, conv_block_backward_with, cross_entropy_logit_grad, dense_backward, dense_forward, dropout_backward,
    dropout_forward, init_params, relu, relu_backward, softmax, ConvBlockCache, DropoutState, LayerParams,
    LayerShape, Mode,
};
use crate::patch::PatchGroup;
use crate::tensor::{maxpool_2x2, ConvGeom, Scalar, Tensor};
use crate::training::OptimizerState;
use crate::volume::Plane;

/// One convolution block: `channels` kernels of `kernel × kernel`, optionally
/// followed by 2×2 max-pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub channels: usize,
    pub pool: bool,
}

/// One network branch, bound to one patch size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub patch_size: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub fc_width: usize,
}

impl BranchSpec {
    pub fn new(patch_size: usize, kernels: &[usize], channels: &[usize], pools: &[bool], fc_width: usize) -> Result<Self> {
        if kernels.len() != channels.len() || kernels.len() != pools.len() {
            return Err(Error::Config(format!(
                "branch {patch_size}: {} kernel sizes, {} kernel counts, {} pool flags",
                kernels.len(),
                channels.len(),
                pools.len()
            )));
        }
        let layers = kernels
            .iter()
            .zip(channels)
            .zip(pools)
            .map(|((&kernel, &channels), &pool)| ConvLayerSpec { kernel, channels, pool })
            .collect();
        let spec = Self {
            patch_size,
            layers,
            fc_width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(Error::Config(format!("patch size {} must be odd", self.patch_size)));
        }
        if self.fc_width == 0 {
            return Err(Error::Config(format!("branch {}: fully connected width is 0", self.patch_size)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config(format!("branch {}: no convolution layers", self.patch_size)));
        }
        if let Some(i) = self.layers.iter().position(|l| l.channels == 0) {
            return Err(Error::Config(format!("branch {}: layer {} has no kernels", self.patch_size, i + 1)));
        }
        shape_chain(self).map(|_| ())
    }

    /// Spatial extent of the last feature map.
    pub fn final_extent(&self) -> usize {
        *shape_chain(self).expect("validated spec").last().expect("non-empty chain")
    }

    pub fn final_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.channels)
    }

    /// Length of the flattened last feature map.
    pub fn flat_features(&self) -> usize {
        let e = self.final_extent();
        self.final_channels() * e * e
    }
}

/// Square feature-map extents through a branch: the patch size, then the
/// extent after every convolution and after every pooling.
pub fn shape_chain(spec: &BranchSpec) -> Result<Vec<usize>> {
    let mut chain = vec![spec.patch_size];
    let mut e = spec.patch_size;
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer.kernel == 0 || layer.kernel > e {
            return Err(Error::Config(format!(
                "branch {}: layer {} kernel {} does not fit a {e}×{e} map",
                spec.patch_size,
                i + 1,
                layer.kernel
            )));
        }
        e = e - layer.kernel + 1;
        chain.push(e);
        if layer.pool {
            e = e.div_ceil(2);
            chain.push(e);
        }
    }
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub branches: Vec<BranchSpec>,
    pub num_classes: usize,
    /// Probability of keeping a branch FC unit during training.
    pub dropout_keep: f64,
    pub seed: u64,
    /// Patches enter the network as `(x − input_offset) · input_scale`.
    pub input_offset: f32,
    pub input_scale: f32,
    /// Acquisition plane the patches are cut from.
    pub plane: Plane,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > 256 {
            return Err(Error::Config(format!("at most 256 classes supported, got {}", self.num_classes)));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("network needs at least one branch".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout keep {} outside (0, 1]", self.dropout_keep)));
        }
        if !(self.input_scale.is_finite() && self.input_scale != 0.0 && self.input_offset.is_finite()) {
            return Err(Error::Config("input normalisation must be finite with non-zero scale".into()));
        }
        self.branches.iter().try_for_each(BranchSpec::validate)
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.patch_size).collect()
    }

    /// Width of the shared output layer's input.
    pub fn head_inputs(&self) -> usize {
        self.branches.iter().map(|b| b.fc_width).sum()
    }

    /// Keeps only the branches whose patch size is listed.
    pub fn with_branches(&self, patch_sizes: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        out.branches.retain(|b| patch_sizes.contains(&b.patch_size));
        if out.branches.len() != patch_sizes.len() {
            return Err(Error::Config(format!("patch sizes {patch_sizes:?} not all present in the configuration")));
        }
        out.validate()?;
        Ok(out)
    }
}

/// Three branches over 25, 51 and 75 voxel patches with 24/32/48 kernels per
/// layer, 256-wide FC layers and `num_classes` outputs. The smallest branch
/// skips pooling after its third layer.
pub fn default_config(num_classes: usize) -> Result<NetworkConfig> {
    let counts = [24, 32, 48];
    let branch = |patch, kernels: [usize; 3], last_pool| {
        BranchSpec::new(patch, &kernels, &counts, &[true, true, last_pool], 256)
    };
    let cfg = NetworkConfig {
        branches: vec![
            branch(25, [5, 3, 3], false)?,
            branch(51, [7, 5, 3], true)?,
            branch(75, [9, 7, 5], true)?,
        ],
        num_classes,
        dropout_keep: 0.5,
        seed: 0,
        input_offset: 511.5,
        input_scale: 1.0 / 511.5,
        plane: Plane::Axial,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T> {
    pub convs: Vec<LayerParams<T>>,
    pub fc: LayerParams<T>,
}

/// Configuration, trained parameters and optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub branches: Vec<BranchParams<T>>,
    pub head: LayerParams<T>,
    pub optimizer: OptimizerState<T>,
}

/// Network input for one sample: one normalised `[1, s, s]` map per branch.
pub type SampleInput<T> = Vec<Tensor<T>>;

struct BranchPass<T> {
    /// Per sample, the caches of every conv block.
    blocks: Vec<Vec<ConvBlockCache<T>>>,
    flat: Tensor<T>,
    fc_act: Tensor<T>,
    dropout: DropoutState<T>,
}

struct PassCache<T> {
    branches: Vec<BranchPass<T>>,
    concat: Tensor<T>,
}

/// Output of [`Model::forward`], retaining what the gradient pass needs.
pub struct ForwardPass<T> {
    pub probs: Tensor<T>,
    pub mode: Mode,
    cache: Option<PassCache<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn batch_size(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Drops the retained intermediate values.
    pub fn release(&mut self) {
        self.cache = None;
    }

    pub fn is_retained(&self) -> bool {
        self.cache.is_some()
    }

    /// Hash of every ReLU on/off state and pooling route. Two passes with
    /// equal signatures lie in the same linear piece of the network.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        if let Some(cache) = &self.cache {
            for b in &cache.branches {
                for sample in &b.blocks {
                    for block in sample {
                        block.hash_pattern(&mut h);
                    }
                }
                for &v in b.fc_act.data() {
                    h.write_u8((v > T::zero()) as u8);
                }
            }
        }
        h.finish()
    }
}

fn init_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a branch layer; keyed by patch size so that adding or
/// removing a branch leaves the other branches' initial weights unchanged.
fn branch_stream(patch_size: usize, layer: usize) -> u64 {
    ((patch_size as u64) << 16) | layer as u64
}

const HEAD_STREAM: u64 = u64::MAX;

impl<T: Scalar> Model<T> {
    /// Fresh He-initialised model; deterministic in `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut branches = Vec::with_capacity(config.branches.len());
        for spec in &config.branches {
            let mut c_in = 1;
            let mut convs = Vec::with_capacity(spec.layers.len());
            for (i, l) in spec.layers.iter().enumerate() {
                let shape = LayerShape::Conv {
                    c_in,
                    c_out: l.channels,
                    k: l.kernel,
                };
                convs.push(init_params(shape, &mut init_stream(config.seed, branch_stream(spec.patch_size, i))));
                c_in = l.channels;
            }
            let fc_shape = LayerShape::Dense {
                f_in: spec.flat_features(),
                f_out: spec.fc_width,
            };
            let fc = init_params(fc_shape, &mut init_stream(config.seed, branch_stream(spec.patch_size, spec.layers.len())));
            branches.push(BranchParams { convs, fc });
        }
        let head_shape = LayerShape::Dense {
            f_in: config.head_inputs(),
            f_out: config.num_classes,
        };
        let head = init_params(head_shape, &mut init_stream(config.seed, HEAD_STREAM));
        let mut model = Self {
            config,
            branches,
            head,
            optimizer: OptimizerState::default(),
        };
        model.optimizer = OptimizerState::for_model(&model);
        Ok(model)
    }

    /// All parameterised layers in canonical order: per branch its conv
    /// blocks then its FC layer, finally the shared head.
    pub fn layers(&self) -> Vec<&LayerParams<T>> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.extend(b.convs.iter());
            out.push(&b.fc);
        }
        out.push(&self.head);
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            out.extend(b.convs.iter_mut());
            out.push(&mut b.fc);
        }
        out.push(&mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().into_iter().for_each(LayerParams::zero_grad);
    }

    /// Adds another model's accumulated gradients into this one.
    pub fn add_grads(&mut self, other: &Model<T>) -> Result<()> {
        for (mine, theirs) in self.layers_mut().into_iter().zip(other.layers()) {
            mine.weight_grad.axpy(T::one(), &theirs.weight_grad)?;
            mine.bias_grad.axpy(T::one(), &theirs.bias_grad)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite())
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchParams {
                    convs: b.convs.iter().map(LayerParams::cast).collect(),
                    fc: b.fc.cast(),
                })
                .collect(),
            head: self.head.cast(),
            optimizer: self.optimizer.cast(),
        }
    }

    /// Normalises patch groups into network inputs, checking extents.
    pub fn prepare_inputs(&self, groups: &[PatchGroup]) -> Result<Vec<SampleInput<T>>> {
        let (offset, scale) = (self.config.input_offset, self.config.input_scale);
        groups
            .iter()
            .map(|g| {
                if g.patches.len() != self.config.branches.len() {
                    return Err(Error::dim("patches per sample", self.config.branches.len(), g.patches.len()));
                }
                g.patches
                    .iter()
                    .zip(&self.config.branches)
                    .map(|(p, spec)| {
                        let s = spec.patch_size;
                        if p.shape() != [1, s, s] {
                            return Err(Error::dim(format!("patch extent (branch {s})"), s * s, p.len()));
                        }
                        Ok(p.map(|v| (v - offset) * scale).cast())
                    })
                    .collect()
            })
            .collect()
    }

    /// Forward pass over a batch of patch groups, retaining intermediates.
    /// Dropout masks are drawn from `rng` in training mode.
    pub fn forward<R: Rng + ?Sized>(&self, groups: &[PatchGroup], mode: Mode, rng: &mut R) -> Result<ForwardPass<T>> {
        let inputs = self.prepare_inputs(groups)?;
        self.forward_inputs(&inputs, mode, rng)
    }

    /// Inference-mode class probabilities `[B, N]`; nothing is retained.
    pub fn predict(&self, groups: &[PatchGroup]) -> Result<Tensor<T>> {
        let inputs = self.prepare_inputs(groups)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.run(&inputs, Mode::Inference, &mut rng, false)?.probs)
    }

    /// [`Model::forward`] on already normalised inputs.
    pub fn forward_inputs<R: Rng + ?Sized>(
        &self,
        inputs: &[SampleInput<T>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        self.run(inputs, mode, rng, true)
    }

    fn check_inputs(&self, inputs: &[SampleInput<T>]) -> Result<()> {
        for sample in inputs {
            if sample.len() != self.config.branches.len() {
                return Err(Error::dim("patches per sample", self.config.branches.len(), sample.len()));
            }
            for (p, spec) in sample.iter().zip(&self.config.branches) {
                let s = spec.patch_size;
                if p.shape() != [1, s, s] {
                    return Err(Error::dim(format!("patch extent (branch {s})"), s * s, p.len()));
                }
            }
        }
        Ok(())
    }

    fn run<R: Rng + ?Sized>(
        &self,
        inputs: &[SampleInput<T>],
        mode: Mode,
        rng: &mut R,
        retain: bool,
    ) -> Result<ForwardPass<T>> {
        self.check_inputs(inputs)?;
        let batch = inputs.len();
        let mut branch_passes = Vec::with_capacity(self.branches.len());
        let mut concat = Tensor::zeros(&[batch, self.config.head_inputs()]);
        let mut col_offset = 0;
        for (bi, (spec, params)) in self.config.branches.iter().zip(&self.branches).enumerate() {
            let per_sample: Vec<(Vec<T>, Vec<ConvBlockCache<T>>)> = inputs
                .par_iter()
                .map(|sample| run_conv_stack(spec, &params.convs, &sample[bi], retain))
                .collect::<Result<_>>()?;
            let nf = spec.flat_features();
            let mut flat = Vec::with_capacity(batch * nf);
            let mut blocks = Vec::with_capacity(if retain { batch } else { 0 });
            for (f, caches) in per_sample {
                flat.extend_from_slice(&f);
                if retain {
                    blocks.push(caches);
                }
            }
            let flat = Tensor::from_vec(&[batch, nf], flat)?;
            let fc_act = relu(&dense_forward(&flat, &params.fc)?);
            let mut dropout = DropoutState::new(self.config.dropout_keep, mode)?;
            let fc_out = dropout_forward(&fc_act, &mut dropout, rng);
            let width = spec.fc_width;
            let total = concat.shape()[1];
            for (dst, src) in concat.data_mut().chunks_exact_mut(total).zip(fc_out.data().chunks_exact(width)) {
                dst[col_offset..col_offset + width].copy_from_slice(src);
            }
            col_offset += width;
            if retain {
                branch_passes.push(BranchPass {
                    blocks,
                    flat,
                    fc_act,
                    dropout,
                });
            }
        }
        let probs = softmax(&dense_forward(&concat, &self.head)?)?;
        Ok(ForwardPass {
            probs,
            mode,
            cache: retain.then_some(PassCache {
                branches: branch_passes,
                concat,
            }),
        })
    }

    /// Mean cross-entropy gradient pass. Accumulates `scale · ∂L_sum/∂θ`
    /// into every layer's gradient tensors, where `L_sum` is the summed
    /// per-sample loss (`scale = 1/B` gives the mean-loss gradient).
    ///
    /// With `want_input_grad`, also returns `∂/∂input` per sample per branch
    /// (with respect to the normalised inputs).
    pub fn backward(
        &mut self,
        pass: &ForwardPass<T>,
        targets: &[usize],
        scale: T,
        want_input_grad: bool,
    ) -> Result<Option<Vec<SampleInput<T>>>> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called on a forward pass that retained no state".into()))?;
        let batch = pass.batch_size();
        let dlogits = cross_entropy_logit_grad(&pass.probs, targets, scale)?;
        let dconcat = dense_backward(&cache.concat, &mut self.head, &dlogits)?;
        let total = dconcat.shape()[1];
        let mut input_grads: Vec<SampleInput<T>> = if want_input_grad {
            vec![Vec::with_capacity(self.branches.len()); batch]
        } else {
            Vec::new()
        };
        let mut col_offset = 0;
        let mut col = Vec::new();
        for (bi, spec) in self.config.branches.clone().iter().enumerate() {
            let bp = &cache.branches[bi];
            let width = spec.fc_width;
            let mut dout = Vec::with_capacity(batch * width);
            for row in dconcat.data().chunks_exact(total) {
                dout.extend_from_slice(&row[col_offset..col_offset + width]);
            }
            col_offset += width;
            let dout = Tensor::from_vec(&[batch, width], dout)?;
            let dact = dropout_backward(&dout, &bp.dropout)?;
            let dfc = relu_backward(&bp.fc_act, &dact)?;
            let params = &mut self.branches[bi];
            let dflat = dense_backward(&bp.flat, &mut params.fc, &dfc)?;
            let nf = spec.flat_features();
            for (s, grad) in dflat.data().chunks_exact(nf).enumerate() {
                let gin = conv_stack_backward(&bp.blocks[s], &mut params.convs, grad, want_input_grad, &mut col)?;
                if let Some(g) = gin {
                    input_grads[s].push(g);
                }
            }
        }
        Ok(want_input_grad.then_some(input_grads))
    }

    /// Mean loss of a retained pass.
    pub fn loss(pass: &ForwardPass<T>, targets: &[usize]) -> Result<f64> {
        layers::cross_entropy_loss(&pass.probs, targets)
    }
}

fn run_conv_stack<T: Scalar>(
    spec: &BranchSpec,
    convs: &[LayerParams<T>],
    input: &Tensor<T>,
    retain: bool,
) -> Result<(Vec<T>, Vec<ConvBlockCache<T>>)> {
    let mut col = Vec::new();
    let mut caches = Vec::with_capacity(if retain { convs.len() } else { 0 });
    let mut cur = input.clone();
    for (layer, params) in spec.layers.iter().zip(convs) {
        if retain {
            let (out, cache) = layers::conv_block_forward_with(&cur, params, layer.pool, &mut col)?;
            caches.push(cache);
            cur = out;
        } else {
            cur = conv_block_infer(&cur, params, layer.pool, &mut col)?;
        }
    }
    Ok((cur.into_vec(), caches))
}

/// Conv block forward without building a gradient cache.
fn conv_block_infer<T: Scalar>(x: &Tensor<T>, params: &LayerParams<T>, pool: bool, col: &mut Vec<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::check(x, &params.weights, params.biases.len())?;
    let mut conv = Tensor::zeros(&[g.c_out, g.out_h(), g.out_w()]);
    crate::tensor::conv_forward_into(x.data(), params.weights.data(), params.biases.data(), &g, col, conv.data_mut());
    layers::relu_in_place(conv.data_mut());
    if pool {
        Ok(maxpool_2x2(&conv)?.0)
    } else {
        Ok(conv)
    }
}

fn conv_stack_backward<T: Scalar>(
    caches: &[ConvBlockCache<T>],
    convs: &mut [LayerParams<T>],
    grad_flat: &[T],
    want_input_grad: bool,
    col: &mut Vec<T>,
) -> Result<Option<Tensor<T>>> {
    let last = caches.last().ok_or_else(|| Error::Usage("no retained conv blocks".into()))?;
    let mut grad = Tensor::from_vec(&last.output_shape(), grad_flat.to_vec())?;
    for (i, (cache, params)) in caches.iter().zip(convs.iter_mut()).enumerate().rev() {
        let need = i > 0 || want_input_grad;
        match conv_block_backward_with(cache, params, &grad, need, col)? {
            Some(g) => grad = g,
            None => return Ok(None),
        }
    }
    Ok(want_input_grad.then_some(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chains() {
        let cfg = default_config(9).unwrap();
        assert_eq!(shape_chain(&cfg.branches[0]).unwrap(), vec![25, 21, 11, 9, 5, 3]);
        assert_eq!(shape_chain(&cfg.branches[1]).unwrap(), vec![51, 45, 23, 19, 10, 8, 4]);
        assert_eq!(shape_chain(&cfg.branches[2]).unwrap(), vec![75, 67, 34, 28, 14, 10, 5]);
        assert_eq!(cfg.branches[0].flat_features(), 432);
        assert_eq!(cfg.num_classes, 9);
    }

    #[test]
    fn infeasible_chain_names_layer() {
        let err = BranchSpec::new(9, &[5, 5], &[2, 2], &[true, false], 4).unwrap_err();
        assert!(err.to_string().contains("layer 2"), "{err}");
        assert!(BranchSpec::new(10, &[3], &[2], &[false], 4).is_err());
        assert!(BranchSpec::new(9, &[3, 3], &[2], &[false], 4).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = default_config(4).unwrap();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = default_config(4).unwrap();
        cfg.branches.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = default_config(4).unwrap();
        cfg.dropout_keep = 0.0;
        assert!(cfg.validate().is_err());
        assert!(default_config(1).is_err());
    }

    #[test]
    fn backward_without_retained_state_is_usage_error() {
        let cfg = NetworkConfig {
            branches: vec![BranchSpec::new(5, &[3], &[2], &[false], 3).unwrap()],
            num_classes: 2,
            dropout_keep: 1.0,
            seed: 1,
            input_offset: 0.0,
            input_scale: 1.0,
            plane: Plane::Axial,
        };
        let mut m = Model::<f64>::new(cfg).unwrap();
        let x = vec![vec![Tensor::full(&[1, 5, 5], 0.5)]];
        let mut pass = m.forward_inputs(&x, Mode::Inference, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        pass.release();
        match m.backward(&pass, &[0], 1.0, false) {
            Err(Error::Usage(_)) => {}
            other => panic!("expected usage error, got {:?}", other.map(|_| ())),
        }
    }
}
