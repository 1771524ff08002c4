//! Protocol runs, accuracy aggregation, mean ranks, correlation and
//! attention-flow analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, TokenCategoryMap};
use crate::error::{Error, Result};
use crate::geometry::TaskVariant;
use crate::oracle::{encode_scene, OracleSpec};
use crate::probe::{HeadKind, Tokens};
use crate::scene::CategoryId;
use crate::store::{AttentionTensor, FeatureTensor, SampleRecord, Split, TokenSidecar};
use crate::train::{accuracy, sweep, Folds, ProbeConfig, SweepCell};

/// Ranks per model (rows) over columns of scores; rank 1 is the highest
/// score, ties share the average of their positions. Returns the mean rank
/// of each model across columns.
pub fn mean_rank(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = table.len();
    if n < 2 {
        return Err(Error::invalid("mean rank needs at least two models"));
    }
    let cols = table[0].len();
    if cols == 0 || table.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("accuracy table must be rectangular with at least one column"));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("accuracy table has non-finite entries"));
    }
    let mut sums = vec![0.0; n];
    for c in 0..cols {
        for (m, s) in sums.iter_mut().enumerate() {
            let v = table[m][c];
            let better = table.iter().filter(|r| r[c] > v).count();
            let tied = table.iter().filter(|r| r[c] == v).count();
            // positions better+1 ..= better+tied, averaged
            *s += better as f64 + (tied as f64 + 1.0) / 2.0;
        }
    }
    Ok(sums.into_iter().map(|s| s / cols as f64).collect())
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::invalid("correlation needs at least three points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Coefficient of determination of the simple linear fit, `r²`.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson_r(xs, ys).map(|r| r * r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FlowAggregation {
    Mean,
    #[default]
    Sum,
}

impl std::str::FromStr for FlowAggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FlowAggregation::Mean),
            "sum" => Ok(FlowAggregation::Sum),
            _ => Err(Error::invalid(format!("aggregation `{s}` is not mean or sum"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCurve {
    pub source: CategoryId,
    pub destination: CategoryId,
    pub aggregation: FlowAggregation,
    /// One value per layer.
    pub values: Vec<f64>,
}

/// Category of every token in file order: patches, then specials, or the
/// reverse when the sidecar says specials come first.
pub fn token_categories(map: &TokenCategoryMap, specials_first: bool) -> Vec<CategoryId> {
    if specials_first {
        map.specials.iter().chain(&map.cells).copied().collect()
    } else {
        map.tokens().collect()
    }
}

/// Per layer: mean over heads and source-category rows of the attention
/// mass (sum) or mean attention (mean) on destination-category columns.
pub fn attention_flow(
    attn: &AttentionTensor,
    categories: &[CategoryId],
    source: CategoryId,
    destination: CategoryId,
    aggregation: FlowAggregation,
) -> Result<FlowCurve> {
    let t = attn.n_tokens as usize;
    if categories.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "{} token categories for {t} attention tokens",
            categories.len()
        )));
    }
    let rows: Vec<usize> = (0..t).filter(|&i| categories[i] == source).collect();
    let cols: Vec<usize> = (0..t).filter(|&i| categories[i] == destination).collect();
    if rows.is_empty() {
        return Err(Error::EmptyCategory(source));
    }
    if cols.is_empty() && aggregation == FlowAggregation::Mean {
        return Err(Error::EmptyCategory(destination));
    }
    let heads = attn.heads as usize;
    let values = (0..attn.layers as usize)
        .map(|layer| {
            let mut total = 0.0;
            for head in 0..heads {
                let m = attn.matrix(layer, head);
                for &r in &rows {
                    let mass: f64 = cols.iter().map(|&c| m[r * t + c] as f64).sum();
                    total += match aggregation {
                        FlowAggregation::Sum => mass,
                        FlowAggregation::Mean => mass / cols.len() as f64,
                    };
                }
            }
            total / (heads * rows.len()) as f64
        })
        .collect();
    Ok(FlowCurve {
        source,
        destination,
        aggregation,
        values,
    })
}

/// Elementwise `a − b`.
pub fn flow_differential(a: &FlowCurve, b: &FlowCurve) -> Result<Vec<f64>> {
    if a.values.len() != b.values.len() || a.aggregation != b.aggregation {
        return Err(Error::ShapeMismatch(format!(
            "curves of {} ({:?}) and {} ({:?}) layers",
            a.values.len(),
            a.aggregation,
            b.values.len(),
            b.aggregation
        )));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
}

/// Where the protocol gets token features from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    /// Computed on the fly from the stored layouts.
    Oracle {
        spec: OracleSpec,
        intrinsics: CameraIntrinsics,
        seed: u64,
    },
    /// `dir/<sample_id>.sprt`, or `dir/<sample_id>.layer<L>.sprt` with a layer,
    /// plus an optional `dir/tokens.json` sidecar.
    Directory { dir: PathBuf, layer: Option<u32> },
}

pub const SIDECAR_NAME: &str = "tokens.json";

/// Feature file path for a sample.
pub fn feature_path(dir: &Path, sample_id: &str, layer: Option<u32>) -> PathBuf {
    match layer {
        None => dir.join(format!("{sample_id}.sprt")),
        Some(l) => dir.join(format!("{sample_id}.layer{l}.sprt")),
    }
}

impl FeatureSource {
    /// Loads the token set of every record, in record order.
    pub fn load(&self, records: &[SampleRecord]) -> Result<Vec<Tokens>> {
        match self {
            FeatureSource::Oracle { spec, intrinsics, seed } => records
                .par_iter()
                .map(|r| {
                    let f = encode_scene(&r.layout, intrinsics, spec, *seed)?;
                    Tokens::from_features(&f, intrinsics.n_patches(), 0)
                })
                .collect(),
            FeatureSource::Directory { dir, layer } => {
                let sidecar_path = dir.join(SIDECAR_NAME);
                let sidecar = if sidecar_path.exists() {
                    Some(TokenSidecar::read(&sidecar_path)?)
                } else {
                    None
                };
                records
                    .par_iter()
                    .map(|r| {
                        let path = feature_path(dir, &r.sample_id, *layer);
                        if !path.exists() {
                            return Err(Error::MissingFeatures {
                                sample_id: r.sample_id.clone(),
                                path,
                            });
                        }
                        let f = FeatureTensor::read(&path)?;
                        let (n_patches, offset) = match &sidecar {
                            Some(s) => {
                                s.check_features(&f)?;
                                (s.n_patches(), s.patch_offset())
                            }
                            None => (f.n_tokens.saturating_sub(1) as usize, 0),
                        };
                        Tokens::from_features(&f, n_patches, offset)
                    })
                    .collect()
            }
        }
    }
}

/// Splits loaded tokens into folds by the records' split assignment.
pub fn build_folds(records: &[SampleRecord], tokens: Vec<Tokens>, variant: TaskVariant) -> Result<Folds> {
    let mut folds = Folds::default();
    for (r, t) in records.iter().zip(tokens) {
        let label = r.label(variant).index();
        match r.split {
            Some(Split::Train) => folds.train.push(t, label),
            Some(Split::Val) => folds.val.push(t, label),
            Some(Split::Test) => folds.test.push(t, label),
            None => return Err(Error::invalid(format!("{} has no split", r.sample_id))),
        }
    }
    Ok(folds)
}

/// One (model, environment, triple, probe, seed, variant) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub model: String,
    pub environment: String,
    pub triple: String,
    pub probe: HeadKind,
    pub seed: u64,
    pub variant: TaskVariant,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub base_lr: f64,
    pub dropout: f64,
    pub best_epoch: usize,
    pub sweep: Vec<SweepCell>,
}

/// Mean test accuracy over triples and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: String,
    pub environment: String,
    pub probe: HeadKind,
    pub variant: TaskVariant,
    pub mean_accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub model: String,
    pub probe: HeadKind,
    pub mean_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub aggregates: Vec<Aggregate>,
    pub mean_ranks: Vec<RankRow>,
    pub meta: ReportMeta,
}

/// What to run.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub model: String,
    pub heads: Vec<HeadKind>,
    pub seeds: Vec<u64>,
    pub variants: Vec<TaskVariant>,
    pub probe: ProbeConfig,
    pub layer: Option<u32>,
}

/// For every (triple, variant, head, seed): sweep on train/val, score the
/// winner on test. Records may mix triples and environments.
pub fn run_protocol(records: &[SampleRecord], source: &FeatureSource, protocol: &Protocol) -> Result<EvalReport> {
    let groups: BTreeMap<(String, String), Vec<usize>> = records.iter().enumerate().fold(
        BTreeMap::new(),
        |mut m, (i, r)| {
            m.entry((r.environment.clone(), r.triple.key())).or_default().push(i);
            m
        },
    );
    let mut cells = Vec::new();
    for ((env, triple), idx) in groups {
        let group: Vec<SampleRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        let tokens = source.load(&group)?;
        for &variant in &protocol.variants {
            let folds = build_folds(&group, tokens.clone(), variant)?;
            if folds.test.is_empty() {
                return Err(Error::EmptyFold("test"));
            }
            for &head in &protocol.heads {
                for &seed in &protocol.seeds {
                    let s = sweep(&folds, head, &protocol.probe, seed)?;
                    cells.push(EvalCell {
                        model: protocol.model.clone(),
                        environment: env.clone(),
                        triple: triple.clone(),
                        probe: head,
                        seed,
                        variant,
                        test_accuracy: accuracy(s.best.params(), &folds.test)?,
                        val_accuracy: s.best.best_val_accuracy,
                        base_lr: s.best.config.base_lr,
                        dropout: s.best.config.dropout,
                        best_epoch: s.best.best_epoch,
                        sweep: s.cells,
                    });
                }
            }
        }
    }
    Ok(EvalReport::from_cells(
        cells,
        ReportMeta {
            probe: protocol.probe.clone(),
            seeds: protocol.seeds.clone(),
            layer: protocol.layer,
        },
    ))
}

impl EvalReport {
    pub fn from_cells(cells: Vec<EvalCell>, meta: ReportMeta) -> Self {
        let mut report = EvalReport {
            cells,
            aggregates: Vec::new(),
            mean_ranks: Vec::new(),
            meta,
        };
        report.recompute();
        report
    }

    /// Appends another model's cells and recomputes aggregates and ranks.
    pub fn merge(&mut self, other: EvalReport) {
        self.cells.extend(other.cells);
        self.recompute();
    }

    fn recompute(&mut self) {
        let mut acc: BTreeMap<(String, String, HeadKind, TaskVariant), (f64, usize)> = BTreeMap::new();
        for c in &self.cells {
            let e = acc
                .entry((c.model.clone(), c.environment.clone(), c.probe, c.variant))
                .or_default();
            e.0 += c.test_accuracy;
            e.1 += 1;
        }
        self.aggregates = acc
            .iter()
            .map(|((model, environment, probe, variant), (sum, n))| Aggregate {
                model: model.clone(),
                environment: environment.clone(),
                probe: *probe,
                variant: *variant,
                mean_accuracy: sum / *n as f64,
                n: *n,
            })
            .collect();
        let models: BTreeSet<&str> = self.aggregates.iter().map(|a| a.model.as_str()).collect();
        let models: Vec<&str> = models.into_iter().collect();
        self.mean_ranks.clear();
        if models.len() < 2 {
            return;
        }
        let probes: BTreeSet<HeadKind> = self.aggregates.iter().map(|a| a.probe).collect();
        for probe in probes {
            // columns: (environment, variant) present for every model
            let columns: BTreeSet<(&str, TaskVariant)> = self
                .aggregates
                .iter()
                .filter(|a| a.probe == probe)
                .map(|a| (a.environment.as_str(), a.variant))
                .filter(|&(e, v)| {
                    models.iter().all(|m| {
                        self.aggregates
                            .iter()
                            .any(|a| a.model == *m && a.probe == probe && a.environment == e && a.variant == v)
                    })
                })
                .collect();
            if columns.is_empty() {
                continue;
            }
            let table: Vec<Vec<f64>> = models
                .iter()
                .map(|m| {
                    columns
                        .iter()
                        .map(|&(e, v)| {
                            self.aggregates
                                .iter()
                                .find(|a| a.model == *m && a.probe == probe && a.environment == e && a.variant == v)
                                .map(|a| a.mean_accuracy)
                                .expect("column present for every model")
                        })
                        .collect()
                })
                .collect();
            let ranks = mean_rank(&table).expect("at least two models and one column");
            for (m, r) in models.iter().zip(ranks) {
                self.mean_ranks.push(RankRow {
                    model: m.to_string(),
                    probe,
                    mean_rank: r,
                });
            }
        }
    }

    /// Mean test accuracy of a probe on a variant across all cells of a model.
    pub fn mean_accuracy(&self, probe: HeadKind, variant: TaskVariant) -> Option<f64> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.probe == probe && c.variant == variant)
            .map(|c| c.test_accuracy)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::CorruptFile(format!("report: {e}")))
    }

    /// One line per cell.
    pub fn cells_csv(&self) -> String {
        let mut out =
            String::from("model,environment,triple,probe,seed,variant,test_accuracy,val_accuracy,base_lr,dropout,best_epoch\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                c.model,
                c.environment,
                c.triple,
                c.probe,
                c.seed,
                c.variant,
                c.test_accuracy,
                c.val_accuracy,
                c.base_lr,
                c.dropout,
                c.best_epoch
            ));
        }
        out
    }

    pub fn aggregates_csv(&self) -> String {
        let mut out = String::from("model,environment,probe,variant,mean_accuracy,n\n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                a.model, a.environment, a.probe, a.variant, a.mean_accuracy, a.n
            ));
        }
        out
    }
}

/// Score table for correlation: `model → metric → value`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub metrics: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl ScoreTable {
    /// Parses `model,metric1,metric2,...` with a header row.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or(Error::EmptyInput)?;
        let metrics: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_owned()).collect();
        if metrics.is_empty() {
            return Err(Error::invalid("score table needs at least one metric column"));
        }
        let mut rows = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(',').map(str::trim);
            let model = parts.next().unwrap_or_default().to_owned();
            let values = parts
                .map(|v| v.parse::<f64>().map_err(|_| Error::invalid(format!("row {}: `{v}` is not a number", i + 2))))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != metrics.len() {
                return Err(Error::invalid(format!("row {} has {} values, header has {}", i + 2, values.len(), metrics.len())));
            }
            if rows.insert(model.clone(), values).is_some() {
                return Err(Error::invalid(format!("duplicate model `{model}`")));
            }
        }
        Ok(ScoreTable { metrics, rows })
    }

    pub fn column(&self, metric: &str) -> Result<Vec<(String, f64)>> {
        let i = self
            .metrics
            .iter()
            .position(|m| m == metric)
            .ok_or_else(|| Error::invalid(format!("no metric `{metric}`")))?;
        Ok(self.rows.iter().map(|(m, v)| (m.clone(), v[i])).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub x_metric: String,
    pub y_metric: String,
    pub x_inverted: bool,
    pub y_inverted: bool,
    pub n: usize,
    pub r: f64,
    pub r_squared: f64,
}

/// Correlates two metrics over the models present in both; inverted
/// metrics (lower is better) are negated first.
pub fn correlate(
    x: &[(String, f64)],
    y: &[(String, f64)],
    names: (&str, &str),
    inverted: (bool, bool),
) -> Result<Correlation> {
    let ys: BTreeMap<&str, f64> = y.iter().map(|(m, v)| (m.as_str(), *v)).collect();
    let sign = |inv: bool| if inv { -1.0 } else { 1.0 };
    let (mut xv, mut yv) = (Vec::new(), Vec::new());
    for (m, v) in x {
        if let Some(w) = ys.get(m.as_str()) {
            xv.push(sign(inverted.0) * v);
            yv.push(sign(inverted.1) * w);
        }
    }
    let r = pearson_r(&xv, &yv)?;
    Ok(Correlation {
        x_metric: names.0.to_owned(),
        y_metric: names.1.to_owned(),
        x_inverted: inverted.0,
        y_inverted: inverted.1,
        n: xv.len(),
        r,
        r_squared: r * r,
    })
}
