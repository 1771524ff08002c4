use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use super::linear::outer;
use super::*;

pub const DEFAULT_ABMILP_HIDDEN: usize = 128;

/// Attention pooling with scores `wᵀ tanh(V h)` followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct AbmilpParams {
    /// `V`, hidden × input.
    pub attn_proj: Array2<f64>,
    /// `w`, one weight per hidden unit.
    pub attn_score: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    generation: u64,
}

impl PartialEq for AbmilpParams {
    fn eq(&self, o: &Self) -> bool {
        self.attn_proj == o.attn_proj && self.attn_score == o.attn_score && self.weight == o.weight && self.bias == o.bias
    }
}

#[derive(Debug, Clone)]
pub struct AbmilpCache {
    generation: u64,
    patches: Array2<f64>,
    hidden: Array2<f64>,
    weights: Array1<f64>,
    pooled: Array1<f64>,
    mask: Option<Array1<f64>>,
    n_specials: usize,
}

impl AbmilpParams {
    /// `V` uniform in ±1/sqrt(dim); `w` and the classifier start at zero, so
    /// the initial pooling is an exact mean.
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        AbmilpParams {
            attn_proj: uniform_matrix(rng, hidden, dim, 1.0 / (dim as f64).sqrt()),
            attn_score: Array1::zeros(hidden),
            weight: Array2::zeros((N_CLASSES, dim)),
            bias: Array1::zeros(N_CLASSES),
            generation: next_generation(),
        }
    }

    pub fn from_parts(
        attn_proj: Array2<f64>,
        attn_score: Array1<f64>,
        weight: Array2<f64>,
        bias: Array1<f64>,
    ) -> Result<Self> {
        check_classifier(&weight, &bias, attn_proj.ncols())?;
        if attn_score.len() != attn_proj.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "attention MLP {:?} with score vector {}",
                attn_proj.shape(),
                attn_score.len()
            )));
        }
        Ok(AbmilpParams {
            attn_proj,
            attn_score,
            weight,
            bias,
            generation: next_generation(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.attn_proj.nrows()
    }
}

impl Parameters for AbmilpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            slice(&self.attn_proj),
            self.attn_score.as_slice().unwrap(),
            slice(&self.weight),
            self.bias.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = next_generation();
        vec![
            slice_mut(&mut self.attn_proj),
            self.attn_score.as_slice_mut().unwrap(),
            slice_mut(&mut self.weight),
            self.bias.as_slice_mut().unwrap(),
        ]
    }

    fn generation(&self) -> u64 {
        self.generation
    }
}

impl Head for AbmilpParams {
    type Cache = AbmilpCache;
    const KIND: HeadKind = HeadKind::Abmilp;

    fn forward(&self, tokens: &Tokens, dropout: Option<&Array1<f64>>) -> Result<Forward<AbmilpCache>> {
        check_input(tokens, self.input_dim())?;
        check_dropout(dropout, self.input_dim())?;
        let x = &tokens.patches;
        let hidden = x.dot(&self.attn_proj.t()).mapv(f64::tanh);
        let scores = hidden.dot(&self.attn_score);
        let weights = softmax(scores.view());
        let mut pooled = weighted_pool(weights.view(), x);
        if let Some(m) = dropout {
            pooled *= m;
        }
        let logits = self.weight.dot(&pooled) + &self.bias;
        Ok(Forward {
            logits,
            attention: weights.clone().insert_axis(Axis(0)),
            cache: AbmilpCache {
                generation: self.generation,
                patches: x.clone(),
                hidden,
                weights,
                pooled,
                mask: dropout.cloned(),
                n_specials: tokens.specials.nrows(),
            },
        })
    }

    fn backward(&self, c: &AbmilpCache, dlogits: ArrayView1<f64>) -> Result<Backward<Self>> {
        if c.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let mut g = self.zeros_like();
        g.weight = outer(dlogits, c.pooled.view());
        g.bias = dlogits.to_owned();
        let mut dz = self.weight.t().dot(&dlogits);
        if let Some(m) = &c.mask {
            dz *= m;
        }
        let x = &c.patches;
        let dweights = x.dot(&dz);
        let dscores = softmax_backward(c.weights.view(), dweights.view());
        g.attn_score = c.hidden.t().dot(&dscores);
        // d pre-activation = ds_i · w ⊙ (1 − tanh²)
        let mut dpre = outer(dscores.view(), self.attn_score.view());
        dpre.zip_mut_with(&c.hidden, |d, &h| *d *= 1.0 - h * h);
        g.attn_proj = dpre.t().dot(x);
        let mut dx = dpre.dot(&self.attn_proj);
        for (mut row, &a) in dx.rows_mut().into_iter().zip(&c.weights) {
            row.scaled_add(a, &dz);
        }
        Ok(Backward {
            params: g,
            patches: dx,
            specials: Array2::zeros((c.n_specials, self.input_dim())),
        })
    }

    fn pooled_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn input_dim(&self) -> usize {
        self.attn_proj.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed, Stream};

    #[test]
    fn saturated_score_selects_token() {
        let mut rng = keyed(0, 0, Stream::Init);
        let mut p = AbmilpParams::init(3, 2, &mut rng);
        p.attn_proj = Array2::from_shape_vec((2, 3), vec![50.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        p.attn_score = Array1::from(vec![100.0, 0.0]);
        let patches = Array2::from_shape_vec((3, 3), vec![0.0, 1.0, 2.0, 1.0, -3.0, 4.0, 0.0, 5.0, 5.0]).unwrap();
        let out = p.forward(&Tokens::new(patches, Array2::zeros((0, 3))), None).unwrap();
        assert!((out.attention[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((out.cache.pooled[1] + 3.0).abs() < 1e-9);
    }
}
