use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::*;

/// What the linear head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean of the patch tokens.
    Gap,
    /// The first special token.
    Cls,
}

#[derive(Debug, Clone)]
pub struct LinearGapParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub pooling: Pooling,
    generation: u64,
}

impl PartialEq for LinearGapParams {
    fn eq(&self, o: &Self) -> bool {
        self.weight == o.weight && self.bias == o.bias && self.pooling == o.pooling
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    generation: u64,
    pooled: Array1<f64>,
    mask: Option<Array1<f64>>,
    n_patches: usize,
    n_specials: usize,
}

impl LinearGapParams {
    /// Zero-initialized classifier.
    pub fn new(dim: usize, pooling: Pooling) -> Self {
        LinearGapParams {
            weight: Array2::zeros((N_CLASSES, dim)),
            bias: Array1::zeros(N_CLASSES),
            pooling,
            generation: next_generation(),
        }
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>, pooling: Pooling) -> Result<Self> {
        check_classifier(&weight, &bias, weight.ncols())?;
        Ok(LinearGapParams {
            weight,
            bias,
            pooling,
            generation: next_generation(),
        })
    }

    fn pool(&self, tokens: &Tokens) -> Result<Array1<f64>> {
        match self.pooling {
            Pooling::Gap => {
                let n = tokens.patches.nrows();
                Ok(weighted_pool(Array1::from_elem(n, 1.0 / n as f64).view(), &tokens.patches))
            }
            Pooling::Cls if tokens.specials.nrows() > 0 => Ok(tokens.specials.row(0).to_owned()),
            Pooling::Cls => Err(Error::EmptyInput),
        }
    }
}

impl Parameters for LinearGapParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice(&self.weight), self.bias.as_slice().unwrap()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = next_generation();
        vec![slice_mut(&mut self.weight), self.bias.as_slice_mut().unwrap()]
    }

    fn generation(&self) -> u64 {
        self.generation
    }
}

impl Head for LinearGapParams {
    type Cache = LinearCache;
    const KIND: HeadKind = HeadKind::Linear;

    fn forward(&self, tokens: &Tokens, dropout: Option<&Array1<f64>>) -> Result<Forward<LinearCache>> {
        check_input(tokens, self.input_dim())?;
        check_dropout(dropout, self.input_dim())?;
        let mut pooled = self.pool(tokens)?;
        if let Some(m) = dropout {
            pooled *= m;
        }
        let logits = self.weight.dot(&pooled) + &self.bias;
        Ok(Forward {
            logits,
            attention: Array2::zeros((0, 0)),
            cache: LinearCache {
                generation: self.generation,
                pooled,
                mask: dropout.cloned(),
                n_patches: tokens.patches.nrows(),
                n_specials: tokens.specials.nrows(),
            },
        })
    }

    fn backward(&self, cache: &LinearCache, dlogits: ArrayView1<f64>) -> Result<Backward<Self>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let mut grads = self.zeros_like();
        grads.weight = outer(dlogits, cache.pooled.view());
        grads.bias = dlogits.to_owned();
        let mut dpooled = self.weight.t().dot(&dlogits);
        if let Some(m) = &cache.mask {
            dpooled *= m;
        }
        let d = self.input_dim();
        let mut dpatches = Array2::zeros((cache.n_patches, d));
        let mut dspecials = Array2::zeros((cache.n_specials, d));
        match self.pooling {
            Pooling::Gap => {
                let share = dpooled / cache.n_patches as f64;
                for mut row in dpatches.rows_mut() {
                    row.assign(&share);
                }
            }
            Pooling::Cls => dspecials.row_mut(0).assign(&dpooled),
        }
        Ok(Backward {
            params: grads,
            patches: dpatches,
            specials: dspecials,
        })
    }

    fn pooled_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn input_dim(&self) -> usize {
        self.weight.ncols()
    }
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}
