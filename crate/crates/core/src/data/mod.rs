//! Synthetic image data with controllable feature shift, and label-skew
//! partitioners over any labeled pool.

mod colorshift;
mod partition;

pub use colorshift::{class_mask, gen_colorshift, palette_size, ColorShiftConfig};
pub use partition::{
    parse_index_file, partition, partition_dirichlet, partition_k_classes, partition_quantity_skew,
    partition_stats, split_holdout, write_index_file, PartitionConfig, PartitionReport, PartitionScheme,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled image pool `images[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Background palette entry of each sample, when generated synthetically.
    pub backgrounds: Option<Vec<usize>>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, seed: u64) -> Result<Self> {
        let n = images.dims().first().copied().unwrap_or(0);
        if images.dims().len() != 4 || n != labels.len() {
            return Err(Error::shape("dataset", images.dims(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            backgrounds: None,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    /// Stacks the selected samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("gather: empty index list"));
        }
        let per: usize = self.sample_dims().iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.sample_dims());
        Ok((Tensor::from_vec(&dims, data)?, labels))
    }

    pub fn histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// One client's slice of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Sorted, unique sample indices.
    pub indices: Vec<usize>,
    pub histogram: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, mut indices: Vec<usize>, labels: &[usize], num_classes: usize) -> Self {
        indices.sort_unstable();
        indices.dedup();
        let mut histogram = vec![0; num_classes];
        for &i in &indices {
            histogram[labels[i]] += 1;
        }
        ClientShard {
            client_id,
            indices,
            histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Label encoding as f64 class indices, the form the loss consumes.
pub fn labels_tensor(labels: &[usize]) -> Result<Tensor> {
    Tensor::from_vec(&[labels.len()], labels.iter().map(|&l| l as f64).collect())
}
