//! Dataset ingestion (IDX, CIFAR binary, synthetic blobs) and deterministic
//! batching. Loaders are format-exact: pixels land in [0,1] and any
//! normalization is the model's business.

use std::io::Read as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An in-memory image-classification dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image size per sample (C·H·W).
    pub fn sample_numel(&self) -> usize {
        if self.images.shape().is_empty() {
            return 0;
        }
        self.images.shape()[1..].iter().product()
    }

    /// Copy out a batch `[len(idx), C, H, W]` with its labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let k = self.sample_numel();
        let mut data = Vec::with_capacity(idx.len() * k);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        (Tensor::new(shape, data).unwrap(), labels)
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Load an IDX image/label file pair (the MNIST container format).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let magic = read_u32_be(&img_bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!(
            "bad image magic 0x{magic:08x}, expected 0x00000803"
        )));
    }
    let n = read_u32_be(&img_bytes, 4)? as usize;
    let h = read_u32_be(&img_bytes, 8)? as usize;
    let w = read_u32_be(&img_bytes, 12)? as usize;
    let pixels = &img_bytes[16..];
    if pixels.len() != n * h * w {
        return Err(Error::Format(format!(
            "image payload {} bytes, expected {}",
            pixels.len(),
            n * h * w
        )));
    }

    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    let magic = read_u32_be(&lbl_bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!(
            "bad label magic 0x{magic:08x}, expected 0x00000801"
        )));
    }
    let ln = read_u32_be(&lbl_bytes, 4)? as usize;
    if ln != n {
        return Err(Error::Format(format!("{n} images but {ln} labels")));
    }
    let labels_raw = &lbl_bytes[8..];
    if labels_raw.len() != n {
        return Err(Error::Format(format!(
            "label payload {} bytes, expected {n}",
            labels_raw.len()
        )));
    }

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        num_classes,
        name: "idx".into(),
    })
}

/// Load a CIFAR binary batch: per record 1 label byte (plus 1 leading coarse
/// byte for CIFAR-100) then 3072 pixel bytes in CHW order.
pub fn load_cifar_bin(path: &Path, coarse: bool) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let record = if coarse { 3074 } else { 3073 };
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "file size {} is not a multiple of record size {record}",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(record) {
        // for CIFAR-100 the fine label follows the coarse byte
        labels.push(chunk[if coarse { 1 } else { 0 }] as usize);
        let off = record - 3072;
        data.extend(chunk[off..].iter().map(|&b| b as f64 / 255.0));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        num_classes,
        name: if coarse { "cifar100" } else { "cifar10" }.into(),
    })
}

/// Gaussian clusters with unit-separated means, deterministic under seed.
/// Samples are shaped `[n, 1, 1, dim]` so they flow through the same model
/// plumbing as images; values are clipped to [0, 1].
pub fn synthetic_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Dataset {
    assert!(classes >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).unwrap();
    // class means on the {0.2, 0.8}^dim lattice: the binary digits of the
    // class index guarantee distinct, well-separated corners
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| (0..dim).map(|d| ((c >> (d % 63)) & 1) as f64 * 0.6 + 0.2).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for d in 0..dim {
            let v: f64 = means[c][d] + noise.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset {
        images: Tensor::new(vec![n, 1, 1, dim], data).unwrap(),
        labels,
        num_classes: classes,
        name: "blobs".into(),
    }
}

/// Seeded shuffling batcher: the permutation sequence is a pure function of
/// the seed.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    pub epoch: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0);
        BatchIterator { dataset, batch_size, rng: ChaCha8Rng::seed_from_u64(seed), epoch: 0 }
    }

    /// Index batches for the next epoch; every index appears exactly once.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.dataset.len()).collect();
        idx.shuffle(&mut self.rng);
        self.epoch += 1;
        idx.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}
