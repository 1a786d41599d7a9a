//! In-memory image/caption pair collections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One task of the incremental sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    /// Global class ids owned by this task.
    pub classes: Vec<usize>,
}

/// `N` matched pairs: patch sequences `[N, P, patch_dim]` and fixed-length
/// token captions, with a class label per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub vision: Tensor,
    pub captions: Vec<usize>,
    pub caption_len: usize,
    pub labels: Vec<usize>,
}

impl PairSet {
    pub fn new(vision: Tensor, captions: Vec<usize>, caption_len: usize, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        if vision.rank() != 3 || vision.shape()[0] != n || captions.len() != n * caption_len || caption_len == 0 {
            return Err(Error::Data(format!(
                "pair set: vision {:?}, {} caption tokens of length {caption_len}, {n} labels",
                vision.shape(),
                captions.len()
            )));
        }
        Ok(Self {
            vision,
            captions,
            caption_len,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patches(&self) -> usize {
        self.vision.shape()[1]
    }

    pub fn patch_dim(&self) -> usize {
        self.vision.shape()[2]
    }

    pub fn caption(&self, i: usize) -> &[usize] {
        &self.captions[i * self.caption_len..(i + 1) * self.caption_len]
    }

    /// Patch sequences of the selected pairs, `[idx.len(), P, patch_dim]`.
    pub fn vision_batch(&self, idx: &[usize]) -> Tensor {
        let per = self.patches() * self.patch_dim();
        let data = self.vision.data();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend_from_slice(&data[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![idx.len(), self.patches(), self.patch_dim()], out).expect("batch shape")
    }

    pub fn caption_batch(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().flat_map(|&i| self.caption(i).iter().copied()).collect()
    }

    pub fn select(&self, idx: &[usize]) -> PairSet {
        PairSet {
            vision: self.vision_batch(idx),
            captions: self.caption_batch(idx),
            caption_len: self.caption_len,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
