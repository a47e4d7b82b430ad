//! Plain single-branch CNN: `L` bias-free convolution layers, each followed
//! by ReLU, then global average pooling and a linear classifier.
//!
//! Soft pruning ([`ModelState::apply_mask`]) zeroes filters in place and keeps
//! the model full-shape and trainable; hard pruning ([`ModelState::compact`])
//! physically removes the pruned channels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MfpError, Result};
use crate::filters::{FilterBank, PruneMask};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_output_dim, global_avgpool_backward, global_avgpool_forward, linear_backward,
    linear_forward, relu_backward, relu_forward, sgd_step, softmax_cross_entropy, SgdConfig, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Architecture description: input `[channels, height, width]`, the conv
/// stack, and the number of classes of the linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub classes: usize,
}

impl ArchSpec {
    /// The four-layer network used by the synthetic experiments.
    pub fn desk(input_channels: usize, image_size: usize, classes: usize) -> Self {
        let conv = |i, o, stride| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            pad: 1,
        };
        Self {
            input: [input_channels, image_size, image_size],
            convs: vec![
                conv(input_channels, 8, 1),
                conv(8, 16, 2),
                conv(16, 16, 1),
                conv(16, 16, 1),
            ],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.len() < 2 {
            return Err(MfpError::InvalidArchitecture(format!(
                "need at least 2 conv layers, got {}",
                self.convs.len()
            )));
        }
        if self.classes < 2 {
            return Err(MfpError::InvalidArchitecture("need at least 2 classes".into()));
        }
        if self.input.contains(&0) {
            return Err(MfpError::InvalidArchitecture(format!(
                "bad input shape {:?}",
                self.input
            )));
        }
        let mut channels = self.input[0];
        for (i, c) in self.convs.iter().enumerate() {
            if c.in_channels != channels {
                return Err(MfpError::InvalidArchitecture(format!(
                    "layer {i} expects {} input channels but receives {channels}",
                    c.in_channels
                )));
            }
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(MfpError::InvalidArchitecture(format!("layer {i} has a zero dimension")));
            }
            channels = c.out_channels;
        }
        self.spatial_dims()?;
        Ok(())
    }

    /// Output `(height, width)` of every conv layer.
    pub fn spatial_dims(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut dims = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            h = conv_output_dim(h, c.kernel, c.stride, c.pad)
                .ok_or_else(|| MfpError::InvalidArchitecture(format!("layer {i} kernel exceeds its input")))?;
            w = conv_output_dim(w, c.kernel, c.stride, c.pad)
                .ok_or_else(|| MfpError::InvalidArchitecture(format!("layer {i} kernel exceeds its input")))?;
            dims.push((h, w));
        }
        Ok(dims)
    }

    pub fn total_filters(&self) -> usize {
        self.convs.iter().map(|c| c.out_channels).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub bank: FilterBank,
    pub stride: usize,
    pub pad: usize,
}

/// Gradients for every trainable tensor, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub conv: Vec<Tensor>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct Velocity {
    conv: Vec<Tensor>,
    classifier_w: Tensor,
    classifier_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: ArchSpec,
    layers: Vec<ConvLayer>,
    masks: Vec<PruneMask>,
    classifier_w: Tensor,
    classifier_b: Tensor,
    velocity: Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// True when `label` is among the `k` largest logits of `row`; a logit tied
/// with the true one does not push it down the ranking.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    row.iter().filter(|&&z| z > target).count() < k
}

/// Per-sample activations cached for backprop.
struct Trace {
    /// Input to each conv layer (the image, then post-ReLU maps).
    inputs: Vec<Tensor>,
    /// Pre-ReLU output of each conv layer.
    pre: Vec<Tensor>,
}

impl ModelState {
    /// Weights ~ U[-b, b] with `b = sqrt(6 / (N_in K K))` per conv layer and
    /// `b = sqrt(6 / F)` for the classifier; classifier bias starts at zero.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.convs.len());
        for c in &arch.convs {
            let bound = (6.0 / (c.in_channels * c.kernel * c.kernel) as f64).sqrt();
            let shape = [c.out_channels, c.in_channels, c.kernel, c.kernel];
            let w = Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound));
            layers.push(ConvLayer {
                bank: FilterBank::new(w)?,
                stride: c.stride,
                pad: c.pad,
            });
        }
        let f = arch.feature_dim();
        let bound = (6.0 / f as f64).sqrt();
        let classifier_w = Tensor::from_fn(&[arch.classes, f], |_| rng.random_range(-bound..=bound));
        let classifier_b = Tensor::zeros(&[arch.classes]);
        Ok(Self::assemble(arch.clone(), layers, classifier_w, classifier_b))
    }

    fn assemble(arch: ArchSpec, layers: Vec<ConvLayer>, classifier_w: Tensor, classifier_b: Tensor) -> Self {
        let velocity = Velocity {
            conv: layers.iter().map(|l| Tensor::zeros(l.bank.weights().shape())).collect(),
            classifier_w: Tensor::zeros(classifier_w.shape()),
            classifier_b: Tensor::zeros(classifier_b.shape()),
        };
        let masks = layers
            .iter()
            .map(|l| PruneMask::all_keep(l.bank.out_channels()))
            .collect();
        Self {
            arch,
            layers,
            masks,
            classifier_w,
            classifier_b,
            velocity,
        }
    }

    /// Rebuilds a model from raw parameters (used by checkpoint loading).
    pub fn from_parts(
        arch: ArchSpec,
        banks: Vec<FilterBank>,
        classifier_w: Tensor,
        classifier_b: Tensor,
        masks: Vec<PruneMask>,
    ) -> Result<Self> {
        arch.validate()?;
        if banks.len() != arch.convs.len() {
            return Err(MfpError::InvalidArchitecture(format!(
                "{} filter banks for {} conv layers",
                banks.len(),
                arch.convs.len()
            )));
        }
        let mut layers = Vec::with_capacity(banks.len());
        for (i, (bank, c)) in banks.into_iter().zip(&arch.convs).enumerate() {
            let expected = [c.out_channels, c.in_channels, c.kernel, c.kernel];
            if bank.weights().shape() != expected {
                return Err(MfpError::InvalidArchitecture(format!(
                    "layer {i}: weights {:?} do not match {expected:?}",
                    bank.weights().shape()
                )));
            }
            layers.push(ConvLayer {
                bank,
                stride: c.stride,
                pad: c.pad,
            });
        }
        let head = [arch.classes, arch.feature_dim()];
        if classifier_w.shape() != head || classifier_b.shape() != [arch.classes] {
            return Err(MfpError::shape("classifier", classifier_w.shape(), &head));
        }
        let mut model = Self::assemble(arch, layers, classifier_w, classifier_b);
        model.check_masks(&masks)?;
        model.masks = masks;
        Ok(model)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn bank(&self, i: usize) -> &FilterBank {
        &self.layers[i].bank
    }

    /// Direct write access to a layer's weights. Writing to a pruned filter
    /// does not re-apply its mask.
    pub fn bank_mut(&mut self, i: usize) -> &mut FilterBank {
        &mut self.layers[i].bank
    }

    pub fn masks(&self) -> &[PruneMask] {
        &self.masks
    }

    pub fn classifier(&self) -> (&Tensor, &Tensor) {
        (&self.classifier_w, &self.classifier_b)
    }

    pub fn classifier_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.classifier_w, &mut self.classifier_b)
    }

    /// Filters that hold at least one nonzero weight (the sparsity level κ).
    pub fn nonzero_filters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                (0..l.bank.out_channels())
                    .filter(|&j| !l.bank.is_zero_filter(j))
                    .count()
            })
            .sum()
    }

    /// Whether every weight and bias is finite.
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.bank.weights().is_finite())
            && self.classifier_w.is_finite()
            && self.classifier_b.is_finite()
    }

    pub fn total_filters(&self) -> usize {
        self.layers.iter().map(|l| l.bank.out_channels()).sum()
    }

    /// Mean of every convolution weight, zeros of pruned filters included.
    pub fn mean_conv_weight(&self) -> f64 {
        let (sum, n) = self.layers.iter().fold((0.0, 0usize), |(s, n), l| {
            (s + l.bank.weights().sum(), n + l.bank.weights().len())
        });
        sum / n as f64
    }

    fn check_masks(&self, masks: &[PruneMask]) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(MfpError::InvalidMask(format!(
                "{} masks for {} conv layers",
                masks.len(),
                self.layers.len()
            )));
        }
        for (i, (m, l)) in masks.iter().zip(&self.layers).enumerate() {
            if m.len() != l.bank.out_channels() {
                return Err(MfpError::InvalidMask(format!(
                    "layer {i}: mask length {} but {} filters",
                    m.len(),
                    l.bank.out_channels()
                )));
            }
        }
        Ok(())
    }

    /// Soft prune: zero the weights and momentum of every pruned filter and
    /// record the masks. Later updates may revive the zeroed filters.
    pub fn apply_mask(&mut self, masks: &[PruneMask]) -> Result<()> {
        self.check_masks(masks)?;
        for ((layer, vel), mask) in self.layers.iter_mut().zip(&mut self.velocity.conv).zip(masks) {
            let g = layer.bank.filter_len();
            for j in mask.pruned_indices() {
                layer.bank.filter_mut(j).fill(0.0);
                vel.data_mut()[j * g..(j + 1) * g].fill(0.0);
            }
        }
        self.masks = masks.to_vec();
        Ok(())
    }

    /// Hard prune: a new model with pruned output channels removed from each
    /// layer and the matching input channels removed from its successor
    /// (the classifier, for the last conv layer).
    pub fn compact(&self, masks: &[PruneMask]) -> Result<ModelState> {
        self.check_masks(masks)?;
        if let Some(i) = masks.iter().position(|m| m.kept_count() == 0) {
            return Err(MfpError::InvalidMask(format!(
                "mask would remove every filter of layer {i}"
            )));
        }
        let mut arch = self.arch.clone();
        let mut banks = Vec::with_capacity(self.layers.len());
        let mut conv_vel = Vec::with_capacity(self.layers.len());
        let mut in_keep: Vec<usize> = (0..self.arch.input[0]).collect();
        for (i, (layer, mask)) in self.layers.iter().zip(masks).enumerate() {
            let out_keep = mask.kept_indices();
            let k = layer.bank.kernel();
            let select = |src: &Tensor| -> Result<Tensor> {
                let ci = layer.bank.in_channels();
                let mut data = Vec::with_capacity(out_keep.len() * in_keep.len() * k * k);
                for &o in &out_keep {
                    for &c in &in_keep {
                        let start = (o * ci + c) * k * k;
                        data.extend_from_slice(&src.data()[start..start + k * k]);
                    }
                }
                Tensor::new(vec![out_keep.len(), in_keep.len(), k, k], data)
            };
            banks.push(FilterBank::new(select(layer.bank.weights())?)?);
            conv_vel.push(select(&self.velocity.conv[i])?);
            arch.convs[i].in_channels = in_keep.len();
            arch.convs[i].out_channels = out_keep.len();
            in_keep = out_keep;
        }
        let f = self.arch.feature_dim();
        let select_cols = |src: &Tensor| -> Result<Tensor> {
            let mut data = Vec::with_capacity(self.arch.classes * in_keep.len());
            for row in src.data().chunks_exact(f) {
                data.extend(in_keep.iter().map(|&c| row[c]));
            }
            Tensor::new(vec![self.arch.classes, in_keep.len()], data)
        };
        let classifier_w = select_cols(&self.classifier_w)?;
        let head_vel = select_cols(&self.velocity.classifier_w)?;
        let layers = banks
            .into_iter()
            .zip(&self.layers)
            .map(|(bank, l)| ConvLayer {
                bank,
                stride: l.stride,
                pad: l.pad,
            })
            .collect();
        let mut model = Self::assemble(arch, layers, classifier_w, self.classifier_b.clone());
        model.velocity = Velocity {
            conv: conv_vel,
            classifier_w: head_vel,
            classifier_b: self.velocity.classifier_b.clone(),
        };
        Ok(model)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.arch.input {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.arch.input);
            return Err(MfpError::shape("forward (batch vs architecture input)", s, &expected));
        }
        Ok(s[0])
    }

    fn sample(&self, batch: &Tensor, b: usize) -> Tensor {
        let n: usize = self.arch.input.iter().product();
        Tensor::new(self.arch.input.to_vec(), batch.data()[b * n..(b + 1) * n].to_vec())
            .expect("sample slice matches input shape")
    }

    fn features(&self, x: Tensor, trace: Option<&mut Trace>) -> Result<Tensor> {
        let mut x = x;
        let mut trace = trace;
        for layer in &self.layers {
            let pre = conv2d_forward(&x, &layer.bank, layer.stride, layer.pad)?;
            let act = relu_forward(&pre);
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(x);
                t.pre.push(pre);
            }
            x = act;
        }
        global_avgpool_forward(&x)
    }

    fn pooled(&self, batch: &Tensor, mut traces: Option<&mut Vec<Trace>>) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let f = self.arch.feature_dim();
        let mut feats = Vec::with_capacity(b * f);
        for s in 0..b {
            let x = self.sample(batch, s);
            let pooled = match traces.as_deref_mut() {
                Some(ts) => {
                    let mut t = Trace {
                        inputs: Vec::with_capacity(self.layers.len()),
                        pre: Vec::with_capacity(self.layers.len()),
                    };
                    let p = self.features(x, Some(&mut t))?;
                    ts.push(t);
                    p
                }
                None => self.features(x, None)?,
            };
            feats.extend_from_slice(pooled.data());
        }
        Tensor::new(vec![b, f], feats)
    }

    /// Logits `[B, classes]` for a `[B, C, H, W]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let pooled = self.pooled(batch, None)?;
        linear_forward(&pooled, &self.classifier_w, &self.classifier_b)
    }

    /// Post-ReLU feature maps of conv layer `layer` for one `[C, H, W]` image.
    pub fn feature_maps(&self, image: &Tensor, layer: usize) -> Result<Tensor> {
        if layer >= self.layers.len() {
            return Err(MfpError::InvalidArgument(format!(
                "layer index {layer} out of range for {} conv layers",
                self.layers.len()
            )));
        }
        if image.shape() != self.arch.input {
            return Err(MfpError::shape(
                "feature_maps (image vs architecture input)",
                image.shape(),
                &self.arch.input,
            ));
        }
        let mut x = image.clone();
        for l in &self.layers[..=layer] {
            x = relu_forward(&conv2d_forward(&x, &l.bank, l.stride, l.pad)?);
        }
        Ok(x)
    }

    /// Mean cross-entropy over the batch, number of top-1 hits, and gradients
    /// for every parameter.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, usize, ModelGrads)> {
        let mut traces = Vec::new();
        let pooled = self.pooled(batch, Some(&mut traces))?;
        let logits = linear_forward(&pooled, &self.classifier_w, &self.classifier_b)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let c = self.arch.classes;
        let hits = logits
            .data()
            .chunks_exact(c)
            .zip(labels)
            .filter(|(row, &l)| in_top_k(row, l, 1))
            .count();
        let (grad_pooled, gw, gb) = linear_backward(&pooled, &self.classifier_w, &self.classifier_b, &grad_logits)?;
        let f = self.arch.feature_dim();
        let mut conv_grads: Vec<Tensor> = self
            .layers
            .iter()
            .map(|l| Tensor::zeros(l.bank.weights().shape()))
            .collect();
        for (s, trace) in traces.iter().enumerate() {
            let g = Tensor::new(vec![f], grad_pooled.data()[s * f..(s + 1) * f].to_vec())?;
            let last = trace.pre.last().expect("at least two layers");
            let mut grad = global_avgpool_backward(last.shape(), &g)?;
            for i in (0..self.layers.len()).rev() {
                let layer = &self.layers[i];
                let g_pre = relu_backward(&trace.pre[i], &grad)?;
                let (g_in, g_w) = conv2d_backward(&trace.inputs[i], &layer.bank, &g_pre, layer.stride, layer.pad)?;
                for (acc, v) in conv_grads[i].data_mut().iter_mut().zip(g_w.data()) {
                    *acc += v;
                }
                grad = g_in;
            }
        }
        Ok((
            loss,
            hits,
            ModelGrads {
                conv: conv_grads,
                classifier_w: gw,
                classifier_b: gb,
            },
        ))
    }

    /// One momentum-SGD update of every parameter.
    pub fn apply_grads(&mut self, grads: &ModelGrads, cfg: &SgdConfig) -> Result<()> {
        if grads.conv.len() != self.layers.len() {
            return Err(MfpError::InvalidArgument("gradient layer count mismatch".into()));
        }
        for ((layer, g), v) in self.layers.iter_mut().zip(&grads.conv).zip(&mut self.velocity.conv) {
            sgd_step(layer.bank.weights_mut(), g, v, cfg)?;
        }
        sgd_step(
            &mut self.classifier_w,
            &grads.classifier_w,
            &mut self.velocity.classifier_w,
            cfg,
        )?;
        sgd_step(
            &mut self.classifier_b,
            &grads.classifier_b,
            &mut self.velocity.classifier_b,
            cfg,
        )?;
        Ok(())
    }

    /// Velocity buffer of conv layer `i` (exposed for inspection in tests).
    pub fn conv_velocity(&self, i: usize) -> &Tensor {
        &self.velocity.conv[i]
    }

    /// One seeded-shuffle pass of minibatch SGD over `data`. The reported
    /// loss and accuracy are sample-weighted means over the epoch, measured
    /// on each minibatch before its update.
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        sgd: &SgdConfig,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(MfpError::InvalidArgument("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(MfpError::InvalidArgument("batch size must be >= 1".into()));
        }
        sgd.validate()?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for chunk in order.chunks(batch_size) {
            let (batch, labels) = data.batch(chunk)?;
            let (loss, h, grads) = self.loss_and_grads(&batch, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            hits += h;
            self.apply_grads(&grads, sgd)?;
        }
        Ok(EpochStats {
            loss: loss_sum / data.len() as f64,
            accuracy: hits as f64 / data.len() as f64,
        })
    }

    /// Cross-entropy, top-1 and top-5 accuracy over `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<EvalStats> {
        if data.is_empty() {
            return Err(MfpError::InvalidArgument("evaluation set is empty".into()));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let c = self.arch.classes;
        let (mut loss_sum, mut top1, mut top5) = (0.0, 0usize, 0usize);
        for chunk in idx.chunks(256) {
            let (batch, labels) = data.batch(chunk)?;
            let logits = self.forward(&batch)?;
            let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            for (row, &l) in logits.data().chunks_exact(c).zip(&labels) {
                top1 += usize::from(in_top_k(row, l, 1));
                top5 += usize::from(in_top_k(row, l, 5));
            }
        }
        let n = data.len() as f64;
        Ok(EvalStats {
            loss: loss_sum / n,
            top1: top1 as f64 / n,
            top5: top5 as f64 / n,
        })
    }
}

/// Seeded model construction; see [`ModelState::build`].
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<ModelState> {
    ModelState::build(arch, seed)
}

impl ModelState {
    /// Signs of every ReLU pre-activation over the batch, in a fixed order.
    pub fn relu_pattern(&self, batch: &Tensor) -> Result<Vec<bool>> {
        let mut traces = Vec::new();
        self.pooled(batch, Some(&mut traces))?;
        Ok(traces
            .iter()
            .flat_map(|t| t.pre.iter().flat_map(|p| p.data().iter().map(|&v| v >= 0.0)))
            .collect())
    }
}
