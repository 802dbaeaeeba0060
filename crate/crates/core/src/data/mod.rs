//! Labelled image datasets, synthetic task generation and client partitioning.
//!
//! External datasets can be ingested from the `FTDS` binary format
//! (little-endian):
//!
//! ```text
//! "FTDS" | count: u32 | classes: u32 | height: u32 | width: u32 | channels: u32
//! per sample: f64 * (height·width·channels), row-major (row, column, channel) | label: u32
//! ```

pub mod partition;
pub mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Reader;
use crate::tensor::Tensor;

pub use partition::{
    allocate_test, heterogeneity_metrics, partition, partition_dirichlet, partition_iid_kshot,
    partition_shard_noniid, ClientDataset, HeterogeneityMetrics, PartitionScheme, PartitionSpec,
};
pub use synthetic::{gen_synthetic_task, SyntheticSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"FTDS";

/// Images with labels in `[0, classes)`. Every sample carries a stable id so
/// partitions can be checked for duplication and train/test disjointness.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, ids: Vec<u64>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(Error::Contract(format!(
                "dataset has {} images, {} labels, {} ids",
                images.len(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label { index, label, classes });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::Contract("images differ in shape".into()));
            }
        }
        Ok(Self { images, labels, ids, classes })
    }

    pub fn empty(classes: usize) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes,
        }
    }

    /// Indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    pub fn image_refs(&self) -> Vec<&Tensor> {
        self.images.iter().collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = match self.images.first() {
            Some(im) if im.rank() == 3 => im.shape().to_vec(),
            Some(im) => {
                return Err(Error::Format(format!(
                    "FTDS stores [height, width, channels] images, got {:?}",
                    im.shape()
                )))
            }
            None => vec![0, 0, 0],
        };
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), self.classes, shape[0], shape[1], shape[2]] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (im, &l) in self.images.iter().zip(&self.labels) {
            for x in im.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes an `FTDS` payload; sample ids are assigned `0..count`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("bad magic, expected FTDS".into()));
        }
        let count = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if count > 0 && h * w * c == 0 {
            return Err(Error::Format("zero-sized image dimensions".into()));
        }
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let px = (0..h * w * c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            images.push(Tensor::new(vec![h, w, c], px)?);
            labels.push(r.u32()? as usize);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after FTDS payload".into()));
        }
        Dataset::new(images, labels, (0..count as u64).collect(), classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
