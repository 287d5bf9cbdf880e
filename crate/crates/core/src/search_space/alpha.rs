use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::EXTERNAL_SOURCE;
use crate::tensor::Tensor;

pub const ALPHA_NORMAL_SOURCE: usize = EXTERNAL_SOURCE;
pub const ALPHA_REDUCE_SOURCE: usize = EXTERNAL_SOURCE + 1;

/// Architecture logits: one `[edges, ops]` matrix per cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alpha {
    pub normal: Tensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<Tensor>,
}

impl Alpha {
    /// Zeros plus N(0, σ²) noise.
    pub fn init(edges: usize, ops: usize, with_reduce: bool, sigma: f32, rng: &mut impl Rng) -> Self {
        let normal = Tensor::randn(vec![edges, ops], sigma, rng);
        let reduce = with_reduce.then(|| Tensor::randn(vec![edges, ops], sigma, rng));
        Self { normal, reduce }
    }

    pub fn zeros(edges: usize, ops: usize, with_reduce: bool) -> Self {
        Self {
            normal: Tensor::zeros(vec![edges, ops]),
            reduce: with_reduce.then(|| Tensor::zeros(vec![edges, ops])),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.normal.shape()[0]
    }

    pub fn num_ops(&self) -> usize {
        self.normal.shape()[1]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.normal).chain(self.reduce.as_ref()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.normal).chain(self.reduce.as_mut()).collect()
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f32]) -> Result<()> {
        let n: usize = self.tensors().iter().map(|t| t.numel()).sum();
        if flat.len() != n {
            return Err(Error::dim(format!("{} values for {n} architecture parameters", flat.len())));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let len = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Checks the matrices against an expected `[edges, ops]` shape.
    pub fn validate(&self, edges: usize, ops: usize, with_reduce: bool) -> Result<()> {
        for t in self.tensors() {
            if t.shape() != [edges, ops] {
                return Err(Error::dim(format!(
                    "alpha shape {:?}, expected [{edges}, {ops}]",
                    t.shape()
                )));
            }
        }
        if self.reduce.is_some() != with_reduce {
            return Err(Error::dim("alpha reduce matrix presence does not match the space"));
        }
        Ok(())
    }
}

/// Softmax of each row, in `f64`.
pub fn edge_softmax(alpha: &Tensor) -> Vec<Vec<f64>> {
    let k = alpha.shape()[1];
    alpha
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Sum over edges of the population standard deviation of the softmaxed row.
pub fn alpha_std_total(alpha: &Tensor) -> f64 {
    edge_softmax(alpha)
        .iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            (row.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum()
}
