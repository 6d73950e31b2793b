//! IDX dataset loading, bilinear resizing and seeded minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images `(n, c, h, w)` in `[0, 1]` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    images: Tensor,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim("dataset", format!("images must be (n, c, h, w), got {:?}", images.shape())));
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {bad} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::Validation(format!("{} labels for {} images", l.len(), images.shape()[0])));
            }
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Per-image shape `(c, h, w)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images at `indices`, stacked in that order.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        Tensor::new([indices.len(), c, h, w], data).unwrap()
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Option<Vec<u8>> {
        self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect())
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            name: self.name.clone(),
            images: self.gather(&idx),
            labels: self.gather_labels(&idx),
        }
    }

    /// Every image resized to `target × target`.
    pub fn resized(&self, target: usize) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: resize_bilinear(&self.images, target),
            labels: self.labels.clone(),
        }
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| load_err(path, "truncated header"))
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    let found = read_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(load_err(path, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let shape: Vec<usize> = (0..dims).map(|i| read_u32(&bytes, 4 + 4 * i, path).map(|d| d as usize)).collect::<Result<_>>()?;
    let start = 4 + 4 * dims;
    let len: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(load_err(path, format!("truncated payload: {} of {len} bytes", payload.len())));
    }
    Ok((shape, payload[..len].to_vec()))
}

/// Reads an IDX image file (magic 0x803) and optional label file (0x801).
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let (shape, pixels) = read_idx(images, IMAGE_MAGIC, 3)?;
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let labels = match labels {
        Some(path) => {
            let (lshape, l) = read_idx(path, LABEL_MAGIC, 1)?;
            if lshape[0] != n {
                return Err(load_err(path, format!("{} labels for {n} images", lshape[0])));
            }
            Some(l)
        }
        None => None,
    };
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let name = images.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Tensor::new([n, 1, h, w], data).unwrap(), labels)
}

/// Loads `train-*` or `t10k-*` MNIST-style IDX files from a directory.
pub fn load_split(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() {
        return Err(load_err(&images, "file not found"));
    }
    let labels = labels.exists().then_some(labels);
    load_idx(&images, labels.as_deref())
}

/// Bilinear resampling of square images `(n, c, s, s)` to `target × target`
/// with half-pixel centers (align-corners off).
pub fn resize_bilinear(images: &Tensor, target: usize) -> Tensor {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h == target && w == target {
        return images.clone();
    }
    let axis = |src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / target as f64;
        (0..target)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h), axis(w));
    let mut out = Vec::with_capacity(n * c * target * target);
    for plane in images.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([n, c, target, target], out).unwrap()
}

/// Index lists of one epoch: a seeded permutation cut into batches, the last
/// one possibly short.
pub fn batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
