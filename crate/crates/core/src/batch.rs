use candle_core::Tensor;

use crate::error::{shape_err, Result};

/// A `[batch, channels, height, width]` image tensor with values in [−1, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Tensor,
    ids: Option<Vec<String>>,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims.contains(&0) {
            return Err(shape_err(format!("image batch must be 4-axis with positive sizes, got {dims:?}")));
        }
        if !crate::tensor::all_finite(&data)? {
            return Err(shape_err("image batch contains non-finite values"));
        }
        Ok(Self { data, ids: None })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(shape_err(format!("{} ids for {} images", ids.len(), self.len())));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images `indices` stacked into a new batch, ids carried along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.data.device())?;
        let data = self.data.index_select(&idx, 0)?;
        let ids = self.ids.as_ref().map(|ids| indices.iter().map(|&i| ids[i].clone()).collect());
        Ok(Self { data, ids })
    }
}
