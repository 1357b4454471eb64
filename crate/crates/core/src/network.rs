//! The bias-free three-convolution CNN: layer layout, weight storage,
//! initialization, forward pass and test-set accuracy.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::sampling::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{conv2d, maxpool2, relu_in_place, ConvMode, KernelBank, Logits, Tensor4};

/// Filters in the two hidden convolutions unless overridden.
pub const DEFAULT_HIDDEN_FILTERS: [usize; 2] = [16, 16];

/// Per-sample input geometry `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const MNIST: Geometry = Geometry { channels: 1, height: 28, width: 28 };
    pub const CIFAR10: Geometry = Geometry { channels: 3, height: 32, width: 32 };

    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { filters: usize, kh: usize, kw: usize, activation: bool },
    Pool,
}

/// Kernel extents along one spatial axis for conv → pool → conv → pool → conv
/// such that the last convolution sees exactly its own kernel size.
///
/// Prefers the largest first and second kernels (up to 5).
pub fn shape_schedule(extent: usize) -> Option<[usize; 3]> {
    for k1 in (1..=5).rev() {
        let a = match extent.checked_sub(k1 - 1) {
            Some(a) if a >= 2 && a % 2 == 0 => a / 2,
            _ => continue,
        };
        for k2 in (1..=5).rev() {
            match a.checked_sub(k2 - 1) {
                Some(b) if b >= 2 && b % 2 == 0 => return Some([k1, k2, b / 2]),
                _ => continue,
            }
        }
    }
    None
}

/// Layer list plus one kernel bank per convolution. There are no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<T> {
    mode: ConvMode,
    geometry: Geometry,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    banks: Vec<KernelBank<T>>,
}

impl<T: Scalar> NetworkModel<T> {
    /// Zero-weighted network for `layers`, validating that the final
    /// convolution produces `num_classes` maps of spatial size 1×1.
    pub fn new(mode: ConvMode, geometry: Geometry, num_classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
        }
        let (mut c, mut h, mut w) = (geometry.channels, geometry.height, geometry.width);
        let mut banks = Vec::new();
        for layer in &layers {
            match *layer {
                LayerSpec::Conv { filters, kh, kw, .. } => {
                    let bank = KernelBank::zeros(mode, filters, c, kh, kw)?;
                    let [_, oc, oh, ow] = bank.output_shape([1, c, h, w])?;
                    (c, h, w) = (oc, oh, ow);
                    banks.push(bank);
                }
                LayerSpec::Pool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::config(format!("pooling an odd {h}x{w} map")));
                    }
                    (h, w) = (h / 2, w / 2);
                }
            }
        }
        match layers.last() {
            Some(LayerSpec::Conv { .. }) if (c, h, w) == (num_classes, 1, 1) => {}
            _ => {
                return Err(Error::config(format!(
                    "network ends in a {c}x{h}x{w} map, expected a final conv with {num_classes}x1x1"
                )))
            }
        }
        Ok(Self { mode, geometry, num_classes, layers, banks })
    }

    /// conv → pool → conv+ReLU → pool → conv with the given hidden widths and
    /// kernel sizes from [`shape_schedule`].
    pub fn three_layer(mode: ConvMode, geometry: Geometry, num_classes: usize, hidden: [usize; 2]) -> Result<Self> {
        let rows = shape_schedule(geometry.height)
            .ok_or_else(|| Error::config(format!("no shape schedule for height {}", geometry.height)))?;
        let cols = shape_schedule(geometry.width)
            .ok_or_else(|| Error::config(format!("no shape schedule for width {}", geometry.width)))?;
        let layers = vec![
            LayerSpec::Conv { filters: hidden[0], kh: rows[0], kw: cols[0], activation: false },
            LayerSpec::Pool,
            LayerSpec::Conv { filters: hidden[1], kh: rows[1], kw: cols[1], activation: true },
            LayerSpec::Pool,
            LayerSpec::Conv { filters: num_classes, kh: rows[2], kw: cols[2], activation: false },
        ];
        Self::new(mode, geometry, num_classes, layers)
    }

    #[inline]
    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    #[inline]
    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// One bank per convolution, in forward order.
    pub fn banks(&self) -> &[KernelBank<T>] {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut [KernelBank<T>] {
        &mut self.banks
    }

    pub fn num_conv_layers(&self) -> usize {
        self.banks.len()
    }

    pub fn num_params(&self) -> usize {
        self.banks.iter().map(KernelBank::len).sum()
    }

    pub fn num_filters(&self) -> usize {
        self.banks.iter().map(KernelBank::filters).sum()
    }

    /// All weights concatenated bank by bank.
    pub fn flat_weights(&self) -> Vec<T> {
        self.banks.iter().flat_map(|b| b.weights().iter().copied()).collect()
    }

    pub fn set_flat_weights(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("weights", format!("expected {} weights, got {}", self.num_params(), flat.len())));
        }
        let mut offset = 0;
        for bank in &mut self.banks {
            let len = bank.len();
            bank.weights_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for bank in &self.banks {
            for w in bank.weights() {
                for byte in w.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Redraws every weight independently from Uniform(-1, 1).
    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed);
        for bank in &mut self.banks {
            for w in bank.weights_mut() {
                *w = T::lit(rng.uniform(-1.0, 1.0));
            }
        }
    }

    pub fn init_weights(mut self, seed: u64) -> Self {
        self.reinitialize(seed);
        self
    }

    pub(crate) fn check_batch(&self, batch: &Tensor4<T>) -> Result<()> {
        let [_, c, h, w] = batch.shape();
        let g = self.geometry;
        if c != g.channels {
            return Err(Error::dim("c", format!("batch has {c} channels, model expects {}", g.channels)));
        }
        if h != g.height {
            return Err(Error::dim("h", format!("batch height {h}, model expects {}", g.height)));
        }
        if w != g.width {
            return Err(Error::dim("w", format!("batch width {w}, model expects {}", g.width)));
        }
        Ok(())
    }

    /// Raw `(n, num_classes)` outputs; no softmax applied.
    pub fn forward(&self, batch: &Tensor4<T>) -> Result<Logits<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut banks = self.banks.iter();
        for layer in &self.layers {
            x = match *layer {
                LayerSpec::Conv { activation, .. } => {
                    let mut y = conv2d(&x, banks.next().expect("bank per conv layer"))?;
                    if activation {
                        relu_in_place(y.data_mut());
                    }
                    y
                }
                LayerSpec::Pool => maxpool2(&x)?,
            };
        }
        Logits::new(self.num_classes, x.into_vec())
    }

    /// Fraction of examples whose top logit (lowest index on ties) matches the label.
    pub fn evaluate(&self, dataset: &LabeledDataset<T>, batch_size: usize) -> Result<f64> {
        let n = dataset.len();
        if n == 0 {
            return Err(Error::EmptyInput("evaluate"));
        }
        let batch_size = batch_size.max(1);
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (images, labels) = dataset.batch(&idx)?;
            let predicted = self.forward(&images)?.argmax();
            correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }
}

/// The three-convolution CNN with default hidden widths and zero weights.
/// Call [`NetworkModel::init_weights`] to draw the initial weights.
pub fn build_paper_cnn<T: Scalar>(geometry: Geometry, num_classes: usize, mode: ConvMode) -> Result<NetworkModel<T>> {
    NetworkModel::three_layer(mode, geometry, num_classes, DEFAULT_HIDDEN_FILTERS)
}
