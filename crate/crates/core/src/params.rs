//! Flat parameter storage with named blocks in a fixed order.

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl BlockSpec {
    pub fn new(name: &str, rows: usize, cols: usize) -> Self {
        BlockSpec {
            name: name.to_string(),
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    specs: Vec<BlockSpec>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl Params {
    pub fn zeros(specs: Vec<BlockSpec>) -> Self {
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.len();
        }
        Params {
            specs,
            offsets,
            data: vec![0.0; total],
        }
    }

    pub fn from_data(specs: Vec<BlockSpec>, data: Vec<f64>) -> Result<Self> {
        let mut p = Params::zeros(specs);
        if p.data.len() != data.len() {
            return Err(Error::Dimension(format!(
                "parameter layout needs {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            specs: self.specs.clone(),
            offsets: self.offsets.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn index_of(&self, name: &str) -> usize {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter block `{name}`"))
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.specs.iter().any(|s| s.name == name)
    }

    pub fn block_slice(&self, name: &str) -> &[f64] {
        let k = self.index_of(name);
        let o = self.offsets[k];
        &self.data[o..o + self.specs[k].len()]
    }

    pub fn block_slice_mut(&mut self, name: &str) -> &mut [f64] {
        let k = self.index_of(name);
        let o = self.offsets[k];
        let n = self.specs[k].len();
        &mut self.data[o..o + n]
    }

    pub fn block(&self, name: &str) -> ArrayView2<'_, f64> {
        let k = self.index_of(name);
        let (r, c) = (self.specs[k].rows, self.specs[k].cols);
        ArrayView2::from_shape((r, c), self.block_slice(name)).expect("block shape")
    }

    pub fn block_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let k = self.index_of(name);
        let (r, c) = (self.specs[k].rows, self.specs[k].cols);
        ArrayViewMut2::from_shape((r, c), self.block_slice_mut(name)).expect("block shape")
    }

    /// Iterate `(spec, values)` in layout order.
    pub fn blocks(&self) -> impl Iterator<Item = (&BlockSpec, &[f64])> {
        self.specs
            .iter()
            .zip(&self.offsets)
            .map(|(s, &o)| (s, &self.data[o..o + s.len()]))
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.specs == other.specs
    }

    pub fn ensure_same_layout(&self, other: &Params) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Dimension("parameter layouts differ".into()))
        }
    }

    /// Squared L2 distance to `other`, one value per block.
    pub fn block_sq_distances(&self, other: &Params) -> Result<Vec<f64>> {
        self.ensure_same_layout(other)?;
        Ok(self
            .blocks()
            .zip(other.blocks())
            .map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect())
    }

    pub fn add_scaled(&mut self, other: &Params, k: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn l2_distance(&self, other: &Params) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
