//! Dense NCHW tensors and the numerical kernels of the network: valid
//! cross-correlation in two channel semantics, 2×2 max-pooling, ReLU, the
//! softmax preprocessing step and the softmax cross-entropy loss.
//!
//! Every kernel is a pure function with a fixed reduction order, so repeated
//! evaluation is bitwise reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Divisor floor for [`softmax_preprocess`]: a sample whose logits have a
/// population standard deviation below this is left unscaled.
pub const STD_FLOOR: f64 = 1e-12;

/// Probabilities are clamped to at least this value before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rank-4 array in row-major `(n, c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim("data", format!("shape {:?} needs {} values, got {}", shape, expected, data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Stacks single samples (each of shape `(1, c, h, w)`) along the batch axis.
    pub fn stack(samples: &[&Tensor4<T>]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyInput("stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        let mut n = 0;
        for s in samples {
            if s.shape[1..] != first.shape[1..] {
                return Err(Error::dim("c/h/w", format!("{:?} vs {:?}", s.shape, first.shape)));
            }
            n += s.shape[0];
            data.extend_from_slice(&s.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// Copies the selected samples into a new batch, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::Index { index: i, bound: self.shape[0] });
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Self { shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]], data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Number of scalars in one sample (`c·h·w`).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// How a convolution combines its input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// Input channels are summed into one map before each 2-D filter is
    /// applied; filters carry no input-channel axis.
    ChannelSum,
    /// Conventional multi-channel convolution: one 2-D kernel per
    /// (filter, input channel) pair, results summed over channels.
    Standard,
}

impl ConvMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvMode::ChannelSum => "channel-sum",
            ConvMode::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channel-sum" => Ok(ConvMode::ChannelSum),
            "standard" => Ok(ConvMode::Standard),
            other => Err(Error::config(format!("unknown conv mode `{other}`"))),
        }
    }
}

/// The filters of one convolution layer, stored contiguously filter by filter.
///
/// `ChannelSum` banks have layout `(filters, kh, kw)`; `Standard` banks have
/// layout `(filters, in_channels, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<T> {
    mode: ConvMode,
    filters: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    data: Vec<T>,
}

impl<T: Scalar> KernelBank<T> {
    /// Zero-filled bank. `in_channels` is ignored for `ChannelSum`.
    pub fn zeros(mode: ConvMode, filters: usize, in_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        let in_channels = match mode {
            ConvMode::ChannelSum => 1,
            ConvMode::Standard => in_channels,
        };
        if filters == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::dim(
                "kernel",
                format!("filters={filters} in_channels={in_channels} kh={kh} kw={kw} must all be >= 1"),
            ));
        }
        Ok(Self { mode, filters, in_channels, kh, kw, data: vec![T::zero(); filters * in_channels * kh * kw] })
    }

    pub fn channel_sum(filters: usize, kh: usize, kw: usize, data: Vec<T>) -> Result<Self> {
        Self::zeros(ConvMode::ChannelSum, filters, 1, kh, kw)?.with_data(data)
    }

    pub fn standard(filters: usize, in_channels: usize, kh: usize, kw: usize, data: Vec<T>) -> Result<Self> {
        Self::zeros(ConvMode::Standard, filters, in_channels, kh, kw)?.with_data(data)
    }

    fn with_data(mut self, data: Vec<T>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::dim("kernel", format!("expected {} weights, got {}", self.data.len(), data.len())));
        }
        self.data = data;
        Ok(self)
    }

    #[inline]
    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    #[inline]
    pub fn filters(&self) -> usize {
        self.filters
    }

    /// Input-channel extent of each filter; `None` for channel-sum banks.
    pub fn in_channels(&self) -> Option<usize> {
        match self.mode {
            ConvMode::ChannelSum => None,
            ConvMode::Standard => Some(self.in_channels),
        }
    }

    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }

    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }

    /// Scalars per filter.
    #[inline]
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    #[inline]
    pub fn filter(&self, f: usize) -> &[T] {
        let len = self.filter_len();
        &self.data[f * len..(f + 1) * len]
    }

    #[inline]
    pub fn filter_mut(&mut self, f: usize) -> &mut [T] {
        let len = self.filter_len();
        &mut self.data[f * len..(f + 1) * len]
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Output shape for an input of the given shape, validating compatibility.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        if h < self.kh {
            return Err(Error::dim("h", format!("input height {h} smaller than kernel height {}", self.kh)));
        }
        if w < self.kw {
            return Err(Error::dim("w", format!("input width {w} smaller than kernel width {}", self.kw)));
        }
        if self.mode == ConvMode::Standard && c != self.in_channels {
            return Err(Error::dim("c", format!("input has {c} channels, standard bank expects {}", self.in_channels)));
        }
        Ok([n, self.filters, h - self.kh + 1, w - self.kw + 1])
    }
}

/// `dst[i] += a * src[i]`
#[inline]
pub(crate) fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Accumulates the valid cross-correlation of one `h×w` plane with one
/// `kh×kw` kernel into `out` (`oh×ow`).
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_plane<T: Scalar>(
    out: &mut [T],
    plane: &[T],
    kernel: &[T],
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let k = kernel[ky * kw + kx];
            for oy in 0..oh {
                let src = &plane[(oy + ky) * w + kx..][..ow];
                axpy(&mut out[oy * ow..][..ow], k, src);
            }
        }
    }
}

/// Writes the elementwise sum of all channels of one sample into `dst`.
pub(crate) fn sum_channels<T: Scalar>(dst: &mut [T], sample: &[T], channels: usize) {
    let plane = dst.len();
    dst.copy_from_slice(&sample[..plane]);
    for c in 1..channels {
        for (d, &s) in dst.iter_mut().zip(&sample[c * plane..(c + 1) * plane]) {
            *d += s;
        }
    }
}

/// Valid, stride-1, bias-free cross-correlation.
///
/// Output shape is `(n, filters, h - kh + 1, w - kw + 1)`.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, bank: &KernelBank<T>) -> Result<Tensor4<T>> {
    let out_shape = bank.output_shape(input.shape())?;
    let [n, c, h, w] = input.shape();
    let [_, filters, oh, ow] = out_shape;
    let (kh, kw) = (bank.kh, bank.kw);
    let plane = h * w;
    let out_plane = oh * ow;
    let mut out = Tensor4::zeros(out_shape);
    let mut summed = vec![T::zero(); plane];
    for s in 0..n {
        let x = input.sample(s);
        let y = out.sample_mut(s);
        match bank.mode {
            ConvMode::ChannelSum => {
                sum_channels(&mut summed, x, c);
                for f in 0..filters {
                    correlate_plane(&mut y[f * out_plane..][..out_plane], &summed, bank.filter(f), w, kh, kw, oh, ow);
                }
            }
            ConvMode::Standard => {
                for f in 0..filters {
                    let kernels = bank.filter(f);
                    let dst = &mut y[f * out_plane..][..out_plane];
                    for ch in 0..c {
                        correlate_plane(
                            dst,
                            &x[ch * plane..][..plane],
                            &kernels[ch * kh * kw..][..kh * kw],
                            w,
                            kh,
                            kw,
                            oh,
                            ow,
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2×2, stride-2 max-pooling that also reports, for every output element, the
/// flat index (into the input tensor) of the window element it was taken from.
/// Ties go to the first maximum in row-major scan order.
pub fn maxpool2_indexed<T: Scalar>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 {
        return Err(Error::dim("h", format!("max-pool needs even height, got {h}")));
    }
    if w % 2 != 0 {
        return Err(Error::dim("w", format!("max-pool needs even width, got {w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// 2×2, stride-2 max-pooling. Channel count is preserved.
pub fn maxpool2<T: Scalar>(input: &Tensor4<T>) -> Result<Tensor4<T>> {
    maxpool2_indexed(input).map(|(out, _)| out)
}

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let mut out = input.clone();
    relu_in_place(out.data_mut());
    out
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub(crate) fn relu_in_place<T: Scalar>(data: &mut [T]) {
    for v in data {
        // NaN maps to zero as well
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Per-sample divisor used by [`softmax_preprocess`]: the population standard
/// deviation of the logits, or 1 when it falls below [`STD_FLOOR`].
pub fn preprocess_scale<T: Scalar>(logits: &[T]) -> T {
    let k = T::lit(logits.len() as f64);
    let mean = logits.iter().copied().sum::<T>() / k;
    let var = logits.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / k;
    let std = var.sqrt();
    if std < T::lit(STD_FLOOR) {
        T::one()
    } else {
        std
    }
}

/// Divides by `scale`, then subtracts the maximum so the result peaks at 0.
pub fn scale_and_shift<T: Scalar>(logits: &[T], scale: T) -> Vec<T> {
    let scaled: Vec<T> = logits.iter().map(|&v| v / scale).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    scaled.into_iter().map(|v| v - max).collect()
}

/// Scales one sample's logits by the inverse of their population standard
/// deviation and shifts them so the maximum is exactly 0.
pub fn softmax_preprocess<T: Scalar>(logits: &[T]) -> Vec<T> {
    scale_and_shift(logits, preprocess_scale(logits))
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-major `(n, classes)` matrix of network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    classes: usize,
    data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn new(classes: usize, data: Vec<T>) -> Result<Self> {
        if classes == 0 || !data.len().is_multiple_of(classes) {
            return Err(Error::dim("classes", format!("{} values do not form rows of {classes}", data.len())));
        }
        Ok(Self { classes, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.classes
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Applies [`softmax_preprocess`] to every row.
    pub fn preprocessed(&self) -> Self {
        let data = (0..self.rows()).flat_map(|i| softmax_preprocess(self.row(i))).collect();
        Self { classes: self.classes, data }
    }

    /// Index of the largest logit per row; the lowest index wins ties.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_labels(rows: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim("n", format!("{} label(s) for {rows} row(s)", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index { index: bad, bound: classes });
    }
    Ok(())
}

#[inline]
pub(crate) fn sample_cross_entropy<T: Scalar>(z: &[T], label: usize) -> T {
    let p = softmax(z)[label];
    -(p.max(T::lit(PROB_FLOOR))).ln()
}

/// Mean cross-entropy of the softmax of already-preprocessed logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Logits<T>, labels: &[usize]) -> Result<T> {
    check_labels(logits.rows(), logits.classes(), labels)?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("softmax_cross_entropy"));
    }
    let total = labels.iter().enumerate().map(|(i, &l)| sample_cross_entropy(logits.row(i), l)).sum::<T>();
    Ok(total / T::lit(labels.len() as f64))
}

/// Full training loss of raw network outputs: per-sample preprocessing
/// followed by softmax cross-entropy.
pub fn batch_loss<T: Scalar>(raw: &Logits<T>, labels: &[usize]) -> Result<T> {
    softmax_cross_entropy(&raw.preprocessed(), labels)
}

/// Like [`batch_loss`] but divides each row by a supplied scale instead of
/// recomputing its standard deviation.
pub fn batch_loss_with_scales<T: Scalar>(raw: &Logits<T>, labels: &[usize], scales: &[T]) -> Result<T> {
    if scales.len() != raw.rows() {
        return Err(Error::dim("n", format!("{} scale(s) for {} row(s)", scales.len(), raw.rows())));
    }
    let data = (0..raw.rows()).flat_map(|i| scale_and_shift(raw.row(i), scales[i])).collect();
    softmax_cross_entropy(&Logits { classes: raw.classes, data }, labels)
}
