//! Sample records, the checksummed manifest, splits and tensor files.
//!
//! Manifest layout (UTF-8 text):
//!
//! ```text
//! spatial-bench-manifest <version>
//! {json record}
//! ...
//! sha256 <hex digest of every preceding byte>
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{classify_direction, sample_angle, SpatialLabel, TaskVariant, DEFAULT_AMBIGUITY_HALF_WIDTH};
use crate::rng::{keyed, Stream};
use crate::scene::{SceneLayout, TripleSpec};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_TAG: &str = "spatial-bench-manifest";

pub const FEATURE_MAGIC: &[u8; 4] = b"SPRT";
pub const ATTENTION_MAGIC: &[u8; 4] = b"SPAT";
pub const TENSOR_VERSION: u32 = 1;

/// Tolerance on attention row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Paths relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FileRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub environment: String,
    pub triple: TripleSpec,
    pub layout: SceneLayout,
    pub theta_ego: f64,
    pub theta_allo: f64,
    pub label_ego: SpatialLabel,
    pub label_allo: SpatialLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub seed: u64,
    pub scene_index: u64,
    #[serde(default)]
    pub files: FileRefs,
}

impl SampleRecord {
    /// Builds a record from an accepted layout; fails if either label is ambiguous.
    pub fn from_layout(layout: SceneLayout, triple: &TripleSpec, seed: u64) -> Result<Self> {
        let theta_ego = sample_angle(&layout, TaskVariant::Ego)?;
        let theta_allo = sample_angle(&layout, TaskVariant::Allo)?;
        let label = |t| {
            classify_direction(t, DEFAULT_AMBIGUITY_HALF_WIDTH)?
                .ok_or_else(|| Error::invalid("layout label is ambiguous"))
        };
        Ok(SampleRecord {
            sample_id: format!("{}-{}-{:07}", layout.environment, triple.key(), layout.scene_index),
            environment: layout.environment.clone(),
            triple: triple.clone(),
            label_ego: label(theta_ego)?,
            label_allo: label(theta_allo)?,
            theta_ego: theta_ego.degrees(),
            theta_allo: theta_allo.degrees(),
            split: None,
            seed,
            scene_index: layout.scene_index,
            files: FileRefs::default(),
            layout,
        })
    }

    pub fn label(&self, variant: TaskVariant) -> SpatialLabel {
        match variant {
            TaskVariant::Ego => self.label_ego,
            TaskVariant::Allo => self.label_allo,
        }
    }

    /// Recomputes angles and labels from the stored poses.
    pub fn check_consistency(&self) -> Result<()> {
        for (variant, theta, label) in [
            (TaskVariant::Ego, self.theta_ego, self.label_ego),
            (TaskVariant::Allo, self.theta_allo, self.label_allo),
        ] {
            let t = sample_angle(&self.layout, variant)?;
            let l = classify_direction(t, DEFAULT_AMBIGUITY_HALF_WIDTH)?;
            if t.degrees() != theta || l != Some(label) {
                return Err(Error::CorruptFile(format!(
                    "{}: stored {variant} label {label} ({theta}) disagrees with poses ({:?}, {})",
                    self.sample_id,
                    l,
                    t.degrees()
                )));
            }
        }
        Ok(())
    }
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    digest_hex(bytes)
}

pub fn manifest_to_string(records: &[SampleRecord]) -> String {
    let mut body = format!("{MANIFEST_TAG} {MANIFEST_VERSION}\n");
    for r in records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    let sum = digest_hex(body.as_bytes());
    body.push_str("sha256 ");
    body.push_str(&sum);
    body.push('\n');
    body
}

pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>> {
    let corrupt = |m: &str| Error::CorruptFile(format!("manifest: {m}"));
    let header_end = text.find('\n').ok_or_else(|| corrupt("missing header"))?;
    let version = text[..header_end]
        .strip_prefix(MANIFEST_TAG)
        .map(str::trim)
        .ok_or_else(|| corrupt("bad header"))?
        .parse::<u32>()
        .map_err(|_| corrupt("bad version"))?;
    if version != MANIFEST_VERSION {
        return Err(Error::SchemaMismatch {
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let trimmed = text.strip_suffix('\n').ok_or_else(|| corrupt("truncated"))?;
    let footer_start = trimmed.rfind('\n').ok_or_else(|| corrupt("truncated"))? + 1;
    let expected = trimmed[footer_start..]
        .strip_prefix("sha256 ")
        .ok_or_else(|| corrupt("missing checksum"))?;
    let body = &text[..footer_start];
    if digest_hex(body.as_bytes()) != expected {
        return Err(corrupt("checksum mismatch"));
    }
    body[header_end + 1..]
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| corrupt(&e.to_string())))
        .collect()
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    std::fs::write(path, manifest_to_string(records)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Fold sizes `(train, val, test)`: val and test are floored, train takes the rest.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<(usize, usize, usize)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    // the tiny slack keeps products like 10 × 0.1 from flooring to 0
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let (val, test) = (floor(fractions[1]), floor(fractions[2]));
    Ok((n - val - test, val, test))
}

/// Assigns splits by a seeded shuffle. Records keep their order.
pub fn split_dataset(records: &mut [SampleRecord], fractions: [f64; 3], seed: u64) -> Result<()> {
    let (train, val, _) = split_sizes(records.len(), fractions)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut keyed(seed, 0, Stream::Split));
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = Some(if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(())
}

/// Token features of one image at one layer, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub n_tokens: u32,
    pub dim: u32,
    pub layer_id: u32,
    pub values: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(n_tokens: u32, dim: u32, layer_id: u32, values: Vec<f32>) -> Result<Self> {
        let t = FeatureTensor {
            n_tokens,
            dim,
            layer_id,
            values,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.n_tokens as usize * self.dim as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {}×{} features",
                self.values.len(),
                self.n_tokens,
                self.dim
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptFile("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn row(&self, token: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.values[token * d..(token + 1) * d]
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        for v in [TENSOR_VERSION, self.n_tokens, self.dim, self.layer_id] {
            w.write_u32::<LittleEndian>(v)?;
        }
        write_f32s(w, &self.values)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let [n_tokens, dim, layer_id] = read_header(r, FEATURE_MAGIC)?;
        let values = read_f32s(r, n_tokens as usize * dim as usize)?;
        FeatureTensor::new(n_tokens, dim, layer_id, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 4 * self.values.len());
        self.write_to(&mut buf).expect("write to vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Row-stochastic attention per (layer, head), `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub layers: u32,
    pub heads: u32,
    pub n_tokens: u32,
    pub values: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(layers: u32, heads: u32, n_tokens: u32, values: Vec<f32>) -> Result<Self> {
        let t = AttentionTensor {
            layers,
            heads,
            n_tokens,
            values,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.n_tokens as usize;
        let want = self.layers as usize * self.heads as usize * t * t;
        if self.values.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {}×{}×{t}×{t} attention",
                self.values.len(),
                self.layers,
                self.heads
            )));
        }
        if t == 0 {
            return Ok(());
        }
        for (i, row) in self.values.chunks_exact(t).enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::ShapeMismatch(format!("attention row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::ShapeMismatch(format!("attention row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &[f32] {
        let t = self.n_tokens as usize;
        let start = (layer * self.heads as usize + head) * t * t;
        &self.values[start..start + t * t]
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(ATTENTION_MAGIC)?;
        for v in [TENSOR_VERSION, self.layers, self.heads, self.n_tokens] {
            w.write_u32::<LittleEndian>(v)?;
        }
        write_f32s(w, &self.values)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let [layers, heads, n_tokens] = read_header(r, ATTENTION_MAGIC)?;
        let n = (layers as usize)
            .checked_mul(heads as usize)
            .and_then(|x| x.checked_mul(n_tokens as usize))
            .and_then(|x| x.checked_mul(n_tokens as usize))
            .ok_or_else(|| Error::CorruptFile("attention shape overflows".into()))?;
        let values = read_f32s(r, n)?;
        AttentionTensor::new(layers, heads, n_tokens, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 4 * self.values.len());
        self.write_to(&mut buf).expect("write to vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    Error::CorruptFile(format!("truncated tensor: {e}"))
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<[u32; 3]> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::CorruptFile(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != TENSOR_VERSION {
        return Err(Error::SchemaMismatch {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let mut out = [0u32; 3];
    for v in &mut out {
        *v = r.read_u32::<LittleEndian>().map_err(truncated)?;
    }
    Ok(out)
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(truncated)?;
    if bytes.len() != 4 * n {
        return Err(Error::CorruptFile(format!(
            "payload is {} bytes, expected {}",
            bytes.len(),
            4 * n
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Special-token layout written by feature exporters next to their tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSidecar {
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub n_cls: u32,
    pub n_registers: u32,
    /// Where the special tokens sit relative to the patches.
    #[serde(default = "default_special_position")]
    pub specials_position: SpecialPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecialPosition {
    First,
    Last,
}

fn default_special_position() -> SpecialPosition {
    SpecialPosition::Last
}

impl TokenSidecar {
    pub fn n_patches(&self) -> usize {
        (self.grid_rows * self.grid_cols) as usize
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + (self.n_cls + self.n_registers) as usize
    }

    /// Special-token category ids in file order.
    pub fn special_ids(&self) -> Vec<crate::scene::CategoryId> {
        let mut ids = vec![crate::scene::CLS_TOKEN; self.n_cls as usize];
        ids.extend(std::iter::repeat_n(crate::scene::REGISTER_TOKEN, self.n_registers as usize));
        ids
    }

    /// Index of the first patch token in a feature or attention file.
    pub fn patch_offset(&self) -> usize {
        match self.specials_position {
            SpecialPosition::First => (self.n_cls + self.n_registers) as usize,
            SpecialPosition::Last => 0,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("sidecar: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn check_features(&self, f: &FeatureTensor) -> Result<()> {
        if f.n_tokens as usize != self.n_tokens() {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens, sidecar declares {}",
                f.n_tokens,
                self.n_tokens()
            )));
        }
        Ok(())
    }
}
