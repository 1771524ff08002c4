use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use super::linear::outer;
use super::*;

pub const N_QUERIES: usize = 4;
/// Output width is the input width divided by this.
pub const OUTPUT_DIM_DIVISOR: usize = 8;

/// Multi-query cross-attention pooling: keys and values are separate
/// projections of the tokens, query outputs are concatenated and classified.
#[derive(Debug, Clone)]
pub struct EfficientProbeParams {
    /// Queries × output width.
    pub queries: Array2<f64>,
    /// Output width × input width.
    pub key_proj: Array2<f64>,
    pub value_proj: Array2<f64>,
    /// Classes × (queries · output width).
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    generation: u64,
}

impl PartialEq for EfficientProbeParams {
    fn eq(&self, o: &Self) -> bool {
        self.queries == o.queries
            && self.key_proj == o.key_proj
            && self.value_proj == o.value_proj
            && self.weight == o.weight
            && self.bias == o.bias
    }
}

#[derive(Debug, Clone)]
pub struct EfficientCache {
    generation: u64,
    patches: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    attention: Array2<f64>,
    pooled: Array1<f64>,
    mask: Option<Array1<f64>>,
    n_specials: usize,
}

fn output_dim(dim: usize) -> Result<usize> {
    if dim == 0 || dim % OUTPUT_DIM_DIVISOR != 0 {
        return Err(Error::ShapeMismatch(format!(
            "input width {dim} not divisible by {OUTPUT_DIM_DIVISOR}"
        )));
    }
    Ok(dim / OUTPUT_DIM_DIVISOR)
}

impl EfficientProbeParams {
    /// Projections uniform in ±1/sqrt(dim), queries in ±1/sqrt(output width),
    /// classifier zero.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let out = output_dim(dim)?;
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(EfficientProbeParams {
            queries: uniform_matrix(rng, N_QUERIES, out, 1.0 / (out as f64).sqrt()),
            key_proj: uniform_matrix(rng, out, dim, bound),
            value_proj: uniform_matrix(rng, out, dim, bound),
            weight: Array2::zeros((N_CLASSES, N_QUERIES * out)),
            bias: Array1::zeros(N_CLASSES),
            generation: next_generation(),
        })
    }

    pub fn from_parts(
        queries: Array2<f64>,
        key_proj: Array2<f64>,
        value_proj: Array2<f64>,
        weight: Array2<f64>,
        bias: Array1<f64>,
    ) -> Result<Self> {
        let dim = key_proj.ncols();
        let out = output_dim(dim)?;
        if queries.ncols() != out || key_proj.nrows() != out || value_proj.shape() != [out, dim] || queries.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "queries {:?}, keys {:?}, values {:?}",
                queries.shape(),
                key_proj.shape(),
                value_proj.shape()
            )));
        }
        check_classifier(&weight, &bias, queries.nrows() * out)?;
        Ok(EfficientProbeParams {
            queries,
            key_proj,
            value_proj,
            weight,
            bias,
            generation: next_generation(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.queries.ncols()
    }
}

impl Parameters for EfficientProbeParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            slice(&self.queries),
            slice(&self.key_proj),
            slice(&self.value_proj),
            slice(&self.weight),
            self.bias.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = next_generation();
        vec![
            slice_mut(&mut self.queries),
            slice_mut(&mut self.key_proj),
            slice_mut(&mut self.value_proj),
            slice_mut(&mut self.weight),
            self.bias.as_slice_mut().unwrap(),
        ]
    }

    fn generation(&self) -> u64 {
        self.generation
    }
}

impl Head for EfficientProbeParams {
    type Cache = EfficientCache;
    const KIND: HeadKind = HeadKind::Efficient;

    fn forward(&self, tokens: &Tokens, dropout: Option<&Array1<f64>>) -> Result<Forward<EfficientCache>> {
        check_input(tokens, self.input_dim())?;
        check_dropout(dropout, self.pooled_dim())?;
        let x = &tokens.patches;
        let scale = 1.0 / (self.output_dim() as f64).sqrt();
        let keys = x.dot(&self.key_proj.t());
        let values = x.dot(&self.value_proj.t());
        let scores = self.queries.dot(&keys.t()) * scale;
        let mut attention = Array2::zeros(scores.raw_dim());
        for (mut a, s) in attention.rows_mut().into_iter().zip(scores.rows()) {
            a.assign(&softmax(s));
        }
        let outputs = attention.dot(&values);
        let mut pooled = Array1::from_iter(outputs.iter().copied());
        if let Some(m) = dropout {
            pooled *= m;
        }
        let logits = self.weight.dot(&pooled) + &self.bias;
        Ok(Forward {
            logits,
            attention: attention.clone(),
            cache: EfficientCache {
                generation: self.generation,
                patches: x.clone(),
                keys,
                values,
                attention,
                pooled,
                mask: dropout.cloned(),
                n_specials: tokens.specials.nrows(),
            },
        })
    }

    fn backward(&self, c: &EfficientCache, dlogits: ArrayView1<f64>) -> Result<Backward<Self>> {
        if c.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let out = self.output_dim();
        let nq = self.queries.nrows();
        let scale = 1.0 / (out as f64).sqrt();
        let mut g = self.zeros_like();
        g.weight = outer(dlogits, c.pooled.view());
        g.bias = dlogits.to_owned();
        let mut dpooled = self.weight.t().dot(&dlogits);
        if let Some(m) = &c.mask {
            dpooled *= m;
        }
        let doutputs = dpooled.into_shape_with_order((nq, out)).expect("pooled is queries × width");
        let dattention = doutputs.dot(&c.values.t());
        let dvalues = c.attention.t().dot(&doutputs);
        let mut dscores = Array2::zeros(dattention.raw_dim());
        for ((mut ds, a), da) in dscores.rows_mut().into_iter().zip(c.attention.rows()).zip(dattention.rows()) {
            ds.assign(&(softmax_backward(a, da) * scale));
        }
        g.queries = dscores.dot(&c.keys);
        let dkeys = dscores.t().dot(&self.queries);
        g.key_proj = dkeys.t().dot(&c.patches);
        g.value_proj = dvalues.t().dot(&c.patches);
        let dx = dkeys.dot(&self.key_proj) + dvalues.dot(&self.value_proj);
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
        self.key_proj.ncols()
    }
}
