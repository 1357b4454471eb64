//! Reverse-mode gradients of the batch loss with respect to every kernel
//! weight, and a central-difference oracle to check them against.
//!
//! The per-sample standard deviation used by the softmax preprocessing is
//! treated as a constant: backward differentiates through `z / s` with `s`
//! held at its cached value, and [`finite_difference_gradient`] perturbs the
//! weights while reusing the scales measured at the unperturbed point.

use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkModel};
use crate::scalar::Scalar;
use crate::tensor::{
    axpy, batch_loss_with_scales, conv2d, maxpool2_indexed, preprocess_scale, scale_and_shift, softmax,
    softmax_cross_entropy, sum_channels, ConvMode, KernelBank, Logits, Tensor4, PROB_FLOOR,
};

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Conv {
        input: Tensor4<T>,
        /// Channel-summed input planes, `(n, 1, h, w)`; channel-sum mode only.
        summed: Option<Tensor4<T>>,
        /// `pre_activation > 0` per output element; layers with ReLU only.
        relu_mask: Option<Vec<bool>>,
    },
    Pool {
        input_shape: [usize; 4],
        argmax: Vec<usize>,
    },
}

/// Everything backward needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    logits: Logits<T>,
    scales: Vec<T>,
    preprocessed: Logits<T>,
    probs: Vec<T>,
    labels: Vec<usize>,
    loss: T,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn loss(&self) -> T {
        self.loss
    }

    /// Raw network outputs.
    pub fn logits(&self) -> &Logits<T> {
        &self.logits
    }

    /// Per-sample divisors applied before the softmax.
    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn preprocessed(&self) -> &Logits<T> {
        &self.preprocessed
    }

    /// Row-major `(n, classes)` softmax probabilities.
    pub fn probabilities(&self) -> &[T] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Argmax positions recorded by the `i`-th pooling layer, as flat indices
    /// into that layer's input.
    pub fn pool_positions(&self, i: usize) -> Option<&[usize]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerCache::Pool { argmax, .. } => Some(argmax.as_slice()),
                LayerCache::Conv { .. } => None,
            })
            .nth(i)
    }
}

/// One gradient array per kernel bank, congruent with the bank's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    banks: Vec<Vec<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(model: &NetworkModel<T>) -> Self {
        Self { banks: model.banks().iter().map(|b| vec![T::zero(); b.len()]).collect() }
    }

    pub fn banks(&self) -> &[Vec<T>] {
        &self.banks
    }

    pub fn bank(&self, i: usize) -> &[T] {
        &self.banks[i]
    }

    pub fn flat(&self) -> Vec<T> {
        self.banks.concat()
    }

    pub fn is_finite(&self) -> bool {
        self.banks.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.banks.iter().flatten().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.banks.iter_mut().flatten() {
            *v *= factor;
        }
    }

    pub fn matches_shape(&self, model: &NetworkModel<T>) -> bool {
        self.banks.len() == model.banks().len() && self.banks.iter().zip(model.banks()).all(|(g, b)| g.len() == b.len())
    }
}

/// Forward pass that records what backward needs. The returned loss is
/// bitwise equal to `batch_loss(model.forward(batch), labels)`.
pub fn forward_with_cache<T: Scalar>(
    model: &NetworkModel<T>,
    batch: &Tensor4<T>,
    labels: &[usize],
) -> Result<ForwardCache<T>> {
    model.check_batch(batch)?;
    let mut x = batch.clone();
    let mut layers = Vec::with_capacity(model.layers().len());
    let mut banks = model.banks().iter();
    for layer in model.layers() {
        match *layer {
            LayerSpec::Conv { activation, .. } => {
                let bank = banks.next().expect("bank per conv layer");
                let mut y = conv2d(&x, bank)?;
                let relu_mask = activation.then(|| {
                    let mask: Vec<bool> = y.data().iter().map(|&v| v > T::zero()).collect();
                    for (v, &keep) in y.data_mut().iter_mut().zip(&mask) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                    mask
                });
                let summed = (bank.mode() == ConvMode::ChannelSum).then(|| channel_sums(&x));
                layers.push(LayerCache::Conv { input: std::mem::replace(&mut x, y), summed, relu_mask });
            }
            LayerSpec::Pool => {
                let (y, argmax) = maxpool2_indexed(&x)?;
                layers.push(LayerCache::Pool { input_shape: x.shape(), argmax });
                x = y;
            }
        }
    }
    let logits = Logits::new(model.num_classes(), x.into_vec())?;
    let rows = logits.rows();
    let scales: Vec<T> = (0..rows).map(|i| preprocess_scale(logits.row(i))).collect();
    let pre_data: Vec<T> = (0..rows).flat_map(|i| scale_and_shift(logits.row(i), scales[i])).collect();
    let preprocessed = Logits::new(model.num_classes(), pre_data)?;
    let loss = softmax_cross_entropy(&preprocessed, labels)?;
    let probs = (0..rows).flat_map(|i| softmax(preprocessed.row(i))).collect();
    Ok(ForwardCache { layers, logits, scales, preprocessed, probs, labels: labels.to_vec(), loss })
}

fn channel_sums<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros([n, 1, h, w]);
    for s in 0..n {
        sum_channels(out.sample_mut(s), x.sample(s), c);
    }
    out
}

/// Exact gradient of the cached batch loss.
///
/// The cache must come from [`forward_with_cache`] on this same model; a cache
/// taken before the weights changed is not detected.
pub fn backward<T: Scalar>(model: &NetworkModel<T>, cache: &ForwardCache<T>) -> Result<GradientSet<T>> {
    backward_scaled(model, cache, T::one())
}

/// [`backward`] for the loss multiplied by `upstream`.
pub fn backward_scaled<T: Scalar>(
    model: &NetworkModel<T>,
    cache: &ForwardCache<T>,
    upstream: T,
) -> Result<GradientSet<T>> {
    if cache.layers.len() != model.layers().len() {
        return Err(Error::dim("layers", "cache does not belong to this model"));
    }
    let k = model.num_classes();
    let n = cache.labels.len();
    let batch_scale = upstream / T::lit(n as f64);
    let mut grad = vec![T::zero(); n * k];
    for (i, &label) in cache.labels.iter().enumerate() {
        let p = &cache.probs[i * k..(i + 1) * k];
        if p[label] < T::lit(PROB_FLOOR) {
            // the clamp is active; the clamped term is locally constant
            continue;
        }
        let coeff = batch_scale / cache.scales[i];
        for c in 0..k {
            let indicator = if c == label { T::one() } else { T::zero() };
            grad[i * k + c] = (p[c] - indicator) * coeff;
        }
    }
    let mut upstream_grad = Tensor4::from_vec([n, k, 1, 1], grad)?;

    let mut out = GradientSet::zeros_like(model);
    let mut bank_idx = model.banks().len();
    for (pos, layer) in cache.layers.iter().enumerate().rev() {
        let need_input_grad = pos > 0;
        match layer {
            LayerCache::Pool { input_shape, argmax } => {
                let mut dx = Tensor4::zeros(*input_shape);
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(upstream_grad.data()) {
                    d[src] += g;
                }
                upstream_grad = dx;
            }
            LayerCache::Conv { input, summed, relu_mask } => {
                bank_idx -= 1;
                let bank = &model.banks()[bank_idx];
                if let Some(mask) = relu_mask {
                    for (g, &keep) in upstream_grad.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *g = T::zero();
                        }
                    }
                }
                let source = summed.as_ref().unwrap_or(input);
                conv_weight_grad(source, &upstream_grad, bank, &mut out.banks[bank_idx]);
                if need_input_grad {
                    upstream_grad = conv_input_grad(input.shape(), &upstream_grad, bank);
                }
            }
        }
    }
    Ok(out)
}

/// `dW[f, c, ky, kx] += Σ dY[f, oy, ox] · X[c, oy + ky, ox + kx]`, where `X`
/// is the layer input (standard) or its channel sum (channel-sum).
fn conv_weight_grad<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>, bank: &KernelBank<T>, dw: &mut [T]) {
    let [n, c, h, w] = x.shape();
    let [_, filters, oh, ow] = dy.shape();
    let (kh, kw) = (bank.kh(), bank.kw());
    let plane = h * w;
    let out_plane = oh * ow;
    let flen = bank.filter_len();
    for s in 0..n {
        let xs = x.sample(s);
        let gs = dy.sample(s);
        for f in 0..filters {
            let g = &gs[f * out_plane..][..out_plane];
            let dwf = &mut dw[f * flen..][..flen];
            for ch in 0..c {
                let xp = &xs[ch * plane..][..plane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let xr = &xp[(oy + ky) * w + kx..][..ow];
                            let gr = &g[oy * ow..][..ow];
                            for (&a, &b) in xr.iter().zip(gr) {
                                acc += a * b;
                            }
                        }
                        dwf[(ch * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the layer input. In channel-sum mode the gradient
/// of the summed map is broadcast to every input channel.
fn conv_input_grad<T: Scalar>(input_shape: [usize; 4], dy: &Tensor4<T>, bank: &KernelBank<T>) -> Tensor4<T> {
    let [n, c, h, w] = input_shape;
    let [_, filters, oh, ow] = dy.shape();
    let (kh, kw) = (bank.kh(), bank.kw());
    let plane = h * w;
    let out_plane = oh * ow;
    let mut dx = Tensor4::zeros(input_shape);
    let planes = match bank.mode() {
        ConvMode::ChannelSum => 1,
        ConvMode::Standard => c,
    };
    for s in 0..n {
        let gs = dy.sample(s);
        let dxs = dx.sample_mut(s);
        for f in 0..filters {
            let g = &gs[f * out_plane..][..out_plane];
            let kernels = bank.filter(f);
            for ch in 0..planes {
                let dxp = &mut dxs[ch * plane..][..plane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kernels[(ch * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            axpy(&mut dxp[(oy + ky) * w + kx..][..ow], wv, &g[oy * ow..][..ow]);
                        }
                    }
                }
            }
        }
        if bank.mode() == ConvMode::ChannelSum {
            let (first, rest) = dxs.split_at_mut(plane);
            for chunk in rest.chunks_exact_mut(plane) {
                chunk.copy_from_slice(first);
            }
        }
    }
    dx
}

/// Central differences `(L(w + ε) − L(w − ε)) / 2ε`, one weight at a time,
/// with the per-sample preprocessing scales frozen at the unperturbed point.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn finite_difference_gradient<T: Scalar>(
    model: &NetworkModel<T>,
    batch: &Tensor4<T>,
    labels: &[usize],
    epsilon: T,
) -> Result<GradientSet<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    let base = model.forward(batch)?;
    let scales: Vec<T> = (0..base.rows()).map(|i| preprocess_scale(base.row(i))).collect();
    let mut probe = model.clone();
    let mut out = GradientSet::zeros_like(model);
    let two_eps = epsilon + epsilon;
    for b in 0..model.banks().len() {
        for i in 0..model.banks()[b].len() {
            let original = model.banks()[b].weights()[i];
            probe.banks_mut()[b].weights_mut()[i] = original + epsilon;
            let plus = batch_loss_with_scales(&probe.forward(batch)?, labels, &scales)?;
            probe.banks_mut()[b].weights_mut()[i] = original - epsilon;
            let minus = batch_loss_with_scales(&probe.forward(batch)?, labels, &scales)?;
            probe.banks_mut()[b].weights_mut()[i] = original;
            out.banks[b][i] = (plus - minus) / two_eps;
        }
    }
    Ok(out)
}

/// Floor on the denominator of [`relative_error`], so entries that are zero
/// up to finite-difference noise compare as equal.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest [`relative_error`] over corresponding entries.
pub fn max_relative_error<T: Scalar>(a: &GradientSet<T>, b: &GradientSet<T>) -> f64 {
    a.banks
        .iter()
        .flatten()
        .zip(b.banks.iter().flatten())
        .map(|(x, y)| relative_error(x.as_f64(), y.as_f64()))
        .fold(0.0, f64::max)
}
