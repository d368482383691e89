//! IDX parsing, dataset construction, sequential learning tasks and batching.
//!
//! IDX layout (all integers big-endian):
//! ```text
//! bytes 0-3   magic: 0x00000803 (uint8, 3 dims) or 0x00000801 (uint8, 1 dim)
//! bytes 4..   one u32 per dimension
//! payload     prod(dims) bytes, row-major
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GmrError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw decoded IDX container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-item element count (H*W for images, 1 for labels).
    pub fn item_size(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    fn expect_dims(&self, n: usize) -> Result<()> {
        if self.dims.len() != n {
            return Err(GmrError::BadDimCount(self.dims.len()));
        }
        Ok(())
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(GmrError::Truncated { expected: 4, found: bytes.len() });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(GmrError::BadMagic(other)),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(GmrError::Truncated { expected: header, found: bytes.len() });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = dims.iter().product::<usize>();
    let found = bytes.len() - header;
    if found < payload {
        return Err(GmrError::Truncated { expected: payload, found });
    }
    if found > payload {
        return Err(GmrError::Shape(format!(
            "{} trailing bytes after idx payload",
            found - payload
        )));
    }
    Ok(IdxTensor { dims, data: bytes[header..].to_vec() })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    parse_idx(&fs::read(path)?)
}

/// Serializes a tensor back into IDX bytes (used by converters and tests).
pub fn encode_idx(tensor: &IdxTensor) -> Result<Vec<u8>> {
    let magic = match tensor.dims.len() {
        3 => IDX_IMAGES_MAGIC,
        1 => IDX_LABELS_MAGIC,
        n => return Err(GmrError::BadDimCount(n)),
    };
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    Ok(out)
}

/// One image file plus its label file.
#[derive(Debug, Clone)]
pub struct RawSplit {
    pub images: IdxTensor,
    pub labels: IdxTensor,
}

impl RawSplit {
    pub fn new(images: IdxTensor, labels: IdxTensor) -> Result<Self> {
        images.expect_dims(3)?;
        labels.expect_dims(1)?;
        if images.len() != labels.len() {
            return Err(GmrError::CountMismatch { images: images.len(), labels: labels.len() });
        }
        Ok(Self { images, labels })
    }

    /// Loads `<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte` from `dir`.
    pub fn load(dir: impl AsRef<Path>, prefix: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let images = read_idx(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
        let labels = read_idx(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
        Self::new(images, labels)
    }
}

/// Flattened images in [0,1] with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(GmrError::CountMismatch { images: images.nrows(), labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(GmrError::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_count: self.class_count,
        }
    }

    /// Samples whose label is in `classes`, original order preserved.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let rows: Vec<usize> =
            (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        self.select_rows(&rows)
    }

    /// Keeps the first `n` samples (no-op if `n == 0` or `n >= len`).
    pub fn truncated(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let rows: Vec<usize> = (0..n).collect();
        self.select_rows(&rows)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(GmrError::Shape(format!("dim {} vs {}", self.dim(), other.dim())));
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .map_err(|e| GmrError::Shape(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(images, labels, self.class_count.max(other.class_count))
    }
}

fn raw_to_rows(split: &RawSplit) -> (Vec<&[u8]>, Vec<usize>) {
    let size = split.images.item_size();
    let rows = split.images.data.chunks_exact(size.max(1)).take(split.images.len()).collect();
    let labels = split.labels.data.iter().map(|&b| b as usize).collect();
    (rows, labels)
}

/// Merges the provided train and test splits, shuffles under `split_seed` and
/// re-splits 90/10. Pixels are scaled from bytes into [0,1].
pub fn build_continual_dataset(
    train: &RawSplit,
    test: &RawSplit,
    split_seed: u64,
) -> Result<(Dataset, Dataset)> {
    for s in [train, test] {
        if s.images.len() != s.labels.len() {
            return Err(GmrError::CountMismatch { images: s.images.len(), labels: s.labels.len() });
        }
    }
    if train.images.item_size() != test.images.item_size() && !test.images.is_empty() {
        return Err(GmrError::Shape(format!(
            "image size {} vs {}",
            train.images.item_size(),
            test.images.item_size()
        )));
    }
    let (mut rows, mut labels) = raw_to_rows(train);
    let (test_rows, test_labels) = raw_to_rows(test);
    rows.extend(test_rows);
    labels.extend(test_labels);
    let n = rows.len();
    if n == 0 {
        return Err(GmrError::EmptyDataset);
    }
    let d = train.images.item_size();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = n * 9 / 10;

    let build = |idx: &[usize]| -> Result<Dataset> {
        let mut images = Array2::<f64>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            for (dst, &px) in images.row_mut(r).iter_mut().zip(rows[i]) {
                *dst = f64::from(px) / 255.0;
            }
        }
        Dataset::new(images, idx.iter().map(|&i| labels[i]).collect(), class_count)
    };
    Ok((build(&order[..n_train])?, build(&order[n_train..])?))
}

/// Deterministically keeps `count` classes chosen under `seed` and relabels
/// them to `0..count` in ascending order of their original id. Returns the
/// remapped datasets and the original ids.
pub fn select_classes(
    train: &Dataset,
    test: &Dataset,
    count: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Vec<usize>)> {
    let present: Vec<usize> = train.classes().into_iter().collect();
    if count > present.len() {
        return Err(GmrError::InvalidArgument(format!(
            "cannot select {count} of {} classes",
            present.len()
        )));
    }
    let mut chosen: Vec<usize> = present
        .choose_multiple(&mut ChaCha8Rng::seed_from_u64(seed), count)
        .copied()
        .collect();
    chosen.sort_unstable();
    let remap = |ds: &Dataset| -> Result<Dataset> {
        let sub = ds.filter_classes(&chosen);
        let labels = sub
            .labels
            .iter()
            .map(|l| chosen.binary_search(l).expect("filtered label is chosen"))
            .collect();
        Dataset::new(sub.images, labels, count)
    };
    Ok((remap(train)?, remap(test)?, chosen))
}

/// An ordered sequence of class-disjoint sub-tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SltSpec {
    pub name: String,
    pub sub_tasks: Vec<Vec<usize>>,
}

/// The benchmark sequential learning tasks.
pub const SLT_TABLE: &[(&str, &[&[usize]])] = &[
    ("D10", &[&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]]),
    ("D9-1a", &[&[0, 1, 2, 3, 4, 5, 6, 7, 8], &[9]]),
    ("D9-1b", &[&[0, 1, 2, 4, 5, 6, 7, 8, 9], &[3]]),
    ("D5-5a", &[&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9]]),
    ("D5-5b", &[&[0, 1, 2, 6, 7], &[3, 4, 5, 8, 9]]),
    ("D2-2-2-2-2a", &[&[0, 1], &[2, 3], &[4, 5], &[6, 7], &[8, 9]]),
    ("D2-2-2-2-2b", &[&[1, 7], &[0, 2], &[6, 8], &[4, 5], &[3, 9]]),
];

impl SltSpec {
    pub fn new(name: impl Into<String>, sub_tasks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &c in sub_tasks.iter().flatten() {
            if !seen.insert(c) {
                return Err(GmrError::OverlappingClasses(c));
            }
        }
        Ok(Self { name: name.into(), sub_tasks })
    }

    pub fn named(name: &str) -> Result<Self> {
        SLT_TABLE
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(n, tasks)| Self {
                name: (*n).to_string(),
                sub_tasks: tasks.iter().map(|t| t.to_vec()).collect(),
            })
            .ok_or_else(|| GmrError::UnknownSlt(name.to_string()))
    }

    pub fn all() -> Vec<SltSpec> {
        SLT_TABLE.iter().map(|(n, _)| Self::named(n).expect("table entry")).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.sub_tasks.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn is_baseline(&self) -> bool {
        self.sub_tasks.len() == 1
    }
}

#[derive(Debug, Clone)]
pub struct SubTaskData {
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
    pub nu: usize,
}

pub fn build_slt(train: &Dataset, test: &Dataset, spec: &SltSpec) -> Result<Vec<SubTaskData>> {
    let present = train.classes();
    spec.sub_tasks
        .iter()
        .map(|classes| {
            if let Some(&c) = classes.iter().find(|c| !present.contains(c)) {
                return Err(GmrError::MissingClass(c));
            }
            let train = train.filter_classes(classes);
            Ok(SubTaskData {
                classes: classes.clone(),
                nu: train.len(),
                test: test.filter_classes(classes),
                train,
            })
        })
        .collect()
}

pub fn one_hot(labels: &[usize], class_count: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), class_count));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

/// A mini-batch: images `B×d`, one-hot targets `B×C`, and the raw labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array2<f64>,
    pub targets: Array2<f64>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// One epoch of shuffled mini-batches. The final batch may be short.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn iterate_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(GmrError::ZeroBatch);
    }
    if dataset.is_empty() {
        return Err(GmrError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(BatchIter { dataset, order, batch_size, pos: 0 })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let labels: Vec<usize> = indices.iter().map(|&i| self.dataset.labels[i]).collect();
        Some(Batch {
            images: self.dataset.images.select(Axis(0), &indices),
            targets: one_hot(&labels, self.dataset.class_count),
            labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}
