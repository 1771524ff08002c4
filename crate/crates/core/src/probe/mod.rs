//! Probing heads with hand-written backward passes (f64).
//!
//! Each head maps a token set to 4 logits. Gradients are exact; every
//! cache remembers the parameter generation it was computed with and
//! `backward` refuses a cache from older parameters.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::FeatureTensor;

mod abmilp;
mod efficient;
mod linear;

pub use abmilp::{AbmilpCache, AbmilpParams, DEFAULT_ABMILP_HIDDEN};
pub use efficient::{EfficientCache, EfficientProbeParams, N_QUERIES, OUTPUT_DIM_DIVISOR};
pub use linear::{LinearCache, LinearGapParams, Pooling};

pub const N_CLASSES: usize = 4;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPPB";
pub const CHECKPOINT_VERSION: u32 = 1;

static GENERATION: AtomicU64 = AtomicU64::new(1);

/// A fresh, process-unique parameter generation.
pub(crate) fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Abmilp,
    Efficient,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Linear, HeadKind::Abmilp, HeadKind::Efficient];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Abmilp => "abmilp",
            HeadKind::Efficient => "efficient",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown head `{s}` (linear, abmilp, efficient)")))
    }
}

/// Patch tokens plus the non-patch tokens of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub patches: Array2<f64>,
    pub specials: Array2<f64>,
}

impl Tokens {
    pub fn new(patches: Array2<f64>, specials: Array2<f64>) -> Self {
        Tokens { patches, specials }
    }

    /// Splits a feature tensor; `patch_offset` is the index of the first patch token.
    pub fn from_features(f: &FeatureTensor, n_patches: usize, patch_offset: usize) -> Result<Self> {
        let (t, d) = (f.n_tokens as usize, f.dim as usize);
        if n_patches + patch_offset > t || n_patches == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{n_patches} patches at offset {patch_offset} in {t} tokens"
            )));
        }
        let all = Array2::from_shape_fn((t, d), |(i, j)| f.values[i * d + j] as f64);
        let patch_rows: Vec<usize> = (patch_offset..patch_offset + n_patches).collect();
        let special_rows: Vec<usize> = (0..t).filter(|i| !patch_rows.contains(i)).collect();
        Ok(Tokens {
            patches: all.select(Axis(0), &patch_rows),
            specials: all.select(Axis(0), &special_rows),
        })
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }
}

/// Access to the trainable tensors of a head as flat slices, in a fixed order.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    /// Mutable access; marks every existing cache stale.
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn generation(&self) -> u64;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Inverted dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(rng: &mut impl Rng, len: usize, p: f64) -> Array1<f64> {
    if p <= 0.0 {
        return Array1::ones(len);
    }
    let keep = 1.0 / (1.0 - p);
    Array1::from_shape_fn(len, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Softmax of a vector, max-shifted.
pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// `Σᵢ wᵢ·xᵢ` over token rows in a fixed order. GAP and attention pooling both
/// go through here, so uniform attention reproduces GAP exactly.
pub(crate) fn weighted_pool(weights: ArrayView1<f64>, x: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(x.ncols());
    for (&w, row) in weights.iter().zip(x.rows()) {
        out.scaled_add(w, &row);
    }
    out
}

/// Backward of softmax: given `p = softmax(s)` and `dL/dp`, returns `dL/ds`.
pub fn softmax_backward(p: ArrayView1<f64>, dp: ArrayView1<f64>) -> Array1<f64> {
    let inner = p.dot(&dp);
    Array1::from_shape_fn(p.len(), |i| p[i] * (dp[i] - inner))
}

/// Cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>) {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.mapv(|v| (v - m).exp()).sum().ln();
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn argmax(logits: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

pub(crate) fn check_dropout(mask: Option<&Array1<f64>>, len: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(Error::ShapeMismatch(format!(
            "dropout mask has {} entries, pooled width is {len}",
            m.len()
        ))),
        _ => Ok(()),
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward<C> {
    pub logits: Array1<f64>,
    /// Pooling weights: one row for AbMILP, one row per query for efficient
    /// probing, empty for linear heads.
    pub attention: Array2<f64>,
    pub cache: C,
}

/// Gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct Backward<P> {
    pub params: P,
    pub patches: Array2<f64>,
    pub specials: Array2<f64>,
}

/// A head with exact forward and backward passes.
pub trait Head: Parameters {
    type Cache;
    const KIND: HeadKind;

    fn forward(&self, tokens: &Tokens, dropout: Option<&Array1<f64>>) -> Result<Forward<Self::Cache>>;
    fn backward(&self, cache: &Self::Cache, dlogits: ArrayView1<f64>) -> Result<Backward<Self>>;
    /// Width of the representation dropout is applied to.
    fn pooled_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn predict(&self, tokens: &Tokens) -> Result<usize> {
        Ok(argmax(self.forward(tokens, None)?.logits.view()))
    }
}

/// Any of the three heads.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeParams {
    Linear(LinearGapParams),
    Abmilp(AbmilpParams),
    Efficient(EfficientProbeParams),
}

impl ProbeParams {
    pub fn kind(&self) -> HeadKind {
        match self {
            ProbeParams::Linear(_) => HeadKind::Linear,
            ProbeParams::Abmilp(_) => HeadKind::Abmilp,
            ProbeParams::Efficient(_) => HeadKind::Efficient,
        }
    }

    pub fn logits(&self, tokens: &Tokens) -> Result<Array1<f64>> {
        Ok(match self {
            ProbeParams::Linear(p) => p.forward(tokens, None)?.logits,
            ProbeParams::Abmilp(p) => p.forward(tokens, None)?.logits,
            ProbeParams::Efficient(p) => p.forward(tokens, None)?.logits,
        })
    }

    pub fn predict(&self, tokens: &Tokens) -> Result<usize> {
        Ok(argmax(self.logits(tokens)?.view()))
    }

    fn kind_id(&self) -> u32 {
        match self {
            ProbeParams::Linear(p) if p.pooling == Pooling::Gap => 0,
            ProbeParams::Linear(_) => 3,
            ProbeParams::Abmilp(_) => 1,
            ProbeParams::Efficient(_) => 2,
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        match self {
            ProbeParams::Linear(p) => vec![p.weight.shape().to_vec(), p.bias.shape().to_vec()],
            ProbeParams::Abmilp(p) => vec![
                p.attn_proj.shape().to_vec(),
                p.attn_score.shape().to_vec(),
                p.weight.shape().to_vec(),
                p.bias.shape().to_vec(),
            ],
            ProbeParams::Efficient(p) => vec![
                p.queries.shape().to_vec(),
                p.key_proj.shape().to_vec(),
                p.value_proj.shape().to_vec(),
                p.weight.shape().to_vec(),
                p.bias.shape().to_vec(),
            ],
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            ProbeParams::Linear(p) => p.tensors(),
            ProbeParams::Abmilp(p) => p.tensors(),
            ProbeParams::Efficient(p) => p.tensors(),
        }
    }

    /// Checkpoint: magic, version, head kind id, tensor count, per-tensor
    /// rank and dims, then all values as little-endian f32.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.kind_id())?;
        let shapes = self.shapes();
        w.write_u32::<LittleEndian>(shapes.len() as u32)?;
        for s in &shapes {
            w.write_u32::<LittleEndian>(s.len() as u32)?;
            for &d in s {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
        }
        for t in self.tensors() {
            for &v in t {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: String| Error::CorruptFile(format!("checkpoint: {m}"));
        let eof = |e: std::io::Error| Error::CorruptFile(format!("checkpoint truncated: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::SchemaMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let kind = r.read_u32::<LittleEndian>().map_err(eof)?;
        let n = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if n > 16 {
            return Err(bad(format!("{n} tensors")));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            if rank > 4 {
                return Err(bad(format!("rank {rank}")));
            }
            let mut s = Vec::with_capacity(rank);
            for _ in 0..rank {
                s.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
            }
            shapes.push(s);
        }
        let mut data = Vec::with_capacity(n);
        for s in &shapes {
            let len: usize = s.iter().product();
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(r.read_f32::<LittleEndian>().map_err(eof)? as f64);
            }
            data.push(v);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(eof)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes".into()));
        }
        let mat = |i: usize| -> Result<Array2<f64>> {
            match shapes[i].as_slice() {
                [a, b] => Ok(Array2::from_shape_vec((*a, *b), data[i].clone()).expect("sized")),
                s => Err(bad(format!("tensor {i} has shape {s:?}, expected a matrix"))),
            }
        };
        let vec = |i: usize| -> Result<Array1<f64>> {
            match shapes[i].as_slice() {
                [_] => Ok(Array1::from(data[i].clone())),
                s => Err(bad(format!("tensor {i} has shape {s:?}, expected a vector"))),
            }
        };
        let expect = |want: usize| {
            if n == want {
                Ok(())
            } else {
                Err(bad(format!("{n} tensors for head kind {kind}")))
            }
        };
        let params = match kind {
            0 | 3 => {
                expect(2)?;
                let pooling = if kind == 0 { Pooling::Gap } else { Pooling::Cls };
                ProbeParams::Linear(LinearGapParams::from_parts(mat(0)?, vec(1)?, pooling)?)
            }
            1 => {
                expect(4)?;
                ProbeParams::Abmilp(AbmilpParams::from_parts(mat(0)?, vec(1)?, mat(2)?, vec(3)?)?)
            }
            2 => {
                expect(5)?;
                ProbeParams::Efficient(EfficientProbeParams::from_parts(mat(0)?, mat(1)?, mat(2)?, mat(3)?, vec(4)?)?)
            }
            k => return Err(bad(format!("unknown head kind {k}"))),
        };
        Ok(params)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub(crate) fn check_classifier(weight: &Array2<f64>, bias: &Array1<f64>, width: usize) -> Result<()> {
    if weight.shape() != [N_CLASSES, width] || bias.len() != N_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "classifier {:?} + bias {} for pooled width {width}",
            weight.shape(),
            bias.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_input(tokens: &Tokens, dim: usize) -> Result<()> {
    if tokens.patches.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if tokens.patches.ncols() != dim || (tokens.specials.nrows() > 0 && tokens.specials.ncols() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "tokens of width {}, head expects {dim}",
            tokens.patches.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_backward_rows_sum_to_zero() {
        let p = softmax(array![0.3, -1.0, 2.0, 0.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-15);
        let g = softmax_backward(p.view(), array![1.0, -2.0, 0.5, 3.0].view());
        assert!(g.sum().abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient() {
        let (loss, g) = cross_entropy(array![0.0, 0.0, 0.0, 0.0].view(), 2);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(g, array![0.25, 0.25, -0.75, 0.25]);
    }
}
