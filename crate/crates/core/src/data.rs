//! MNIST IDX and CIFAR-10 binary loaders, [0, 1] normalization, seeded
//! batching and stratified subsetting.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::network::Geometry;
use crate::sampling::{derive_seed, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const NUM_CLASSES: usize = 10;

/// Images scaled to [0, 1] plus one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    images: Tensor4<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(images: Tensor4<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(Error::dim("n", format!("{} images but {} labels", images.n(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index { index: bad, bound: num_classes });
        }
        Ok(Self { images, labels, num_classes })
    }

    /// Builds a dataset from raw 8-bit pixels in `(n, c, h, w)` order.
    pub fn from_bytes(shape: [usize; 4], pixels: &[u8], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let scale = T::lit(255.0);
        let data = pixels.iter().map(|&p| T::lit(p as f64) / scale).collect();
        Self::new(Tensor4::from_vec(shape, data)?, labels, num_classes)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor4<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn geometry(&self) -> Geometry {
        let [_, c, h, w] = self.images.shape();
        Geometry::new(c, h, w)
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4<T>, Vec<usize>)> {
        let images = self.images.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(Self { images, labels, num_classes: self.num_classes })
    }

    /// Pixels mapped back to bytes (`round(v·255)`).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.images.data().iter().map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

/// Parses an IDX3 image file into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            (16 + body.len()) as u64,
            format!("truncated image data: {n} images of {rows}x{cols} need {need} bytes, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            (8 + body.len()) as u64,
            format!("truncated label data: {n} labels, found {} bytes", body.len()),
        ));
    }
    body[..n]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < NUM_CLASSES {
                Ok(l as usize)
            } else {
                Err(Error::format((8 + i) as u64, format!("label {l} out of range")))
            }
        })
        .collect()
}

/// Loads an MNIST-style IDX image/label file pair (optionally gzip-compressed).
pub fn load_mnist_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset<T>> {
    let image_bytes = read_maybe_gzip(images_path.as_ref())?;
    let label_bytes = read_maybe_gzip(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(
            4,
            format!("image file holds {n} images but label file holds {} labels", labels.len()),
        ));
    }
    LabeledDataset::from_bytes([n, 1, rows, cols], pixels, labels, NUM_CLASSES)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_mnist_idx<T: Scalar>(
    dataset: &LabeledDataset<T>,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let [n, c, h, w] = dataset.images().shape();
    if c != 1 {
        return Err(Error::dim("c", format!("IDX images are single-channel, dataset has {c}")));
    }
    fs::write(images_path, encode_idx_images(n, h, w, &dataset.to_bytes()))?;
    fs::write(labels_path, encode_idx_labels(dataset.labels()))?;
    Ok(())
}

fn parse_cifar_records(bytes: &[u8], pixels: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(Error::format(
            whole as u64,
            format!("length {} is not a multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        ));
    }
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::format((i * CIFAR_RECORD_LEN) as u64, format!("label {label} out of range")));
        }
        labels.push(label);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok(())
}

/// Loads and concatenates CIFAR-10 binary batch files, in the given order.
pub fn load_cifar10_bin<T: Scalar, P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset<T>> {
    if paths.is_empty() {
        return Err(Error::config("no CIFAR-10 batch files given"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gzip(path.as_ref())?;
        parse_cifar_records(&bytes, &mut pixels, &mut labels).map_err(|e| match e {
            Error::Format { offset, detail } => {
                Error::Format { offset, detail: format!("{}: {detail}", path.as_ref().display()) }
            }
            other => other,
        })?;
    }
    let n = labels.len();
    LabeledDataset::from_bytes([n, 3, 32, 32], &pixels, labels, NUM_CLASSES)
}

pub fn encode_cifar10_bin<T: Scalar>(dataset: &LabeledDataset<T>) -> Result<Vec<u8>> {
    let [_, c, h, w] = dataset.images().shape();
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::dim("c/h/w", format!("CIFAR-10 records are 3x32x32, dataset is {c}x{h}x{w}")));
    }
    let pixels = dataset.to_bytes();
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD_LEN);
    for (i, &label) in dataset.labels().iter().enumerate() {
        out.push(label as u8);
        out.extend_from_slice(&pixels[i * 3072..(i + 1) * 3072]);
    }
    Ok(out)
}

/// Seeded epoch-by-epoch batch order over `len` examples.
///
/// Each epoch draws a fresh permutation from `derive_seed(seed, [epoch])` and
/// slices it into contiguous batches; the final partial batch is kept.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        RngStream::new(derive_seed(self.seed, &[epoch as u64])).shuffle(&mut order);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Batch index lists for epoch 0 of a [`BatchPlan`].
pub fn batches<T: Scalar>(
    dataset: &LabeledDataset<T>,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    Ok(BatchPlan::new(dataset.len(), batch_size, shuffle_seed)?.epoch(0))
}

/// Seeded stratified sample without replacement.
///
/// Per-class quotas follow the largest-remainder rule (ties to the lower
/// class index), so each class gets its proportional share within one
/// example. Selected examples keep their original relative order.
pub fn subset<T: Scalar>(dataset: &LabeledDataset<T>, count: usize, seed: u64) -> Result<LabeledDataset<T>> {
    let n = dataset.len();
    if count > n {
        return Err(Error::config(format!("subset of {count} requested from {n} examples")));
    }
    let k = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut quotas: Vec<usize> = by_class.iter().map(|c| c.len() * count / n.max(1)).collect();
    let mut remaining = count - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    // remainder numerators: (size * count) mod n
    order.sort_by_key(|&c| std::cmp::Reverse(by_class[c].len() * count % n.max(1)));
    for c in order {
        if remaining == 0 {
            break;
        }
        if quotas[c] < by_class[c].len() {
            quotas[c] += 1;
            remaining -= 1;
        }
    }
    let mut chosen = Vec::with_capacity(count);
    for (c, members) in by_class.iter_mut().enumerate() {
        RngStream::new(derive_seed(seed, &[c as u64])).shuffle(members);
        chosen.extend_from_slice(&members[..quotas[c]]);
    }
    chosen.sort_unstable();
    dataset.select(&chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: Vec<usize>) -> LabeledDataset<f64> {
        let n = labels.len();
        let pixels: Vec<u8> = (0..n * 4).map(|i| (i % 256) as u8).collect();
        LabeledDataset::from_bytes([n, 1, 2, 2], &pixels, labels, 10).unwrap()
    }

    #[test]
    fn idx_fixture_normalizes_bytes() {
        let pixels = [0u8, 255, 128, 64, 1, 2, 3, 4];
        let img = encode_idx_images(2, 2, 2, &pixels);
        let lab = encode_idx_labels(&[3, 9]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        let ds = load_mnist_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(ds.images().shape(), [2, 1, 2, 2]);
        assert_eq!(&ds.images().data()[..4], &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(ds.labels(), &[3, 9]);
    }

    #[test]
    fn idx_errors() {
        let img = encode_idx_images(2, 2, 2, &[0u8; 8]);
        assert!(matches!(parse_idx_images(&img[..20]), Err(Error::Format { offset: 20, .. })));
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&img), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format { offset: 0, .. })));

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, encode_idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_mnist_idx::<f64>(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_records() {
        let mut record = vec![255u8; CIFAR_RECORD_LEN];
        record[0] = 7;
        let mut second = vec![0u8; CIFAR_RECORD_LEN];
        second[0] = 2;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, [record.clone(), second].concat()).unwrap();
        let ds = load_cifar10_bin::<f64, _>(&[&p]).unwrap();
        assert_eq!(ds.images().shape(), [2, 3, 32, 32]);
        assert_eq!(ds.labels(), &[7, 2]);
        assert!(ds.images().sample(0).iter().all(|&v| v == 1.0));
        assert!(ds.images().sample(1).iter().all(|&v| v == 0.0));

        fs::write(&p, &record[..100]).unwrap();
        assert!(matches!(load_cifar10_bin::<f64, _>(&[&p]), Err(Error::Format { offset: 0, .. })));
        let none: [&Path; 0] = [];
        assert!(matches!(load_cifar10_bin::<f64, _>(&none), Err(Error::Config(_))));
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let plan = BatchPlan::new(100, 16, 5).unwrap();
        let b = plan.epoch(0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 16, 16, 16, 16, 4]);
        assert_eq!(b, plan.epoch(0));
        assert_ne!(b, plan.epoch(1));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(BatchPlan::new(10, 64, 0).unwrap().epoch(3).len(), 1);
        assert!(BatchPlan::new(10, 0, 0).is_err());
    }

    #[test]
    fn stratified_subset() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let ds = toy(labels);
        let s = subset(&ds, 10, 1).unwrap();
        let mut seen = s.labels().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s, subset(&ds, 10, 1).unwrap());
        assert_eq!(subset(&ds, 100, 4).unwrap(), ds);
        assert!(subset(&ds, 101, 0).is_err());
    }

    #[test]
    fn subset_is_proportional_for_skewed_classes() {
        let labels: Vec<usize> = (0..97)
            .map(|i| {
                if i < 60 {
                    0
                } else if i < 85 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let ds = toy(labels);
        let s = subset(&ds, 31, 9).unwrap();
        assert_eq!(s.len(), 31);
        for (c, size) in [(0usize, 60.0), (1, 25.0), (2, 12.0)] {
            let got = s.labels().iter().filter(|&&l| l == c).count() as f64;
            assert!((got - size * 31.0 / 97.0).abs() <= 1.0, "class {c}: {got}");
        }
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let raw = encode_idx_labels(&[4, 5]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        let p = dir.path().join("l.gz");
        fs::write(&p, enc.finish().unwrap()).unwrap();
        assert_eq!(read_maybe_gzip(&p).unwrap(), raw);
    }
}
