//! Command-line front end. Every command reads its inputs, writes into an
//! output directory and leaves a `run.json` describing the run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::camera::TokenCategoryMap;
use crate::chart;
use crate::config::{BenchConfig, EnvConfig, CONFIG_ENV_VAR};
use crate::error::{Error, Result};
use crate::eval::{self, FeatureSource, FlowAggregation, Protocol, ScoreTable, SIDECAR_NAME};
use crate::geometry::TaskVariant;
use crate::oracle::{encode_with_occupancy, OracleSpec};
use crate::probe::HeadKind;
use crate::scene::{CategoryId, TripleSpec, BACKGROUND, CLS_TOKEN, REGISTER_TOKEN};
use crate::store::{
    read_manifest, split_dataset, write_manifest, AttentionTensor, SampleRecord, SpecialPosition,
    TokenSidecar, DEFAULT_FRACTIONS,
};
use crate::train::{accuracy, sweep, train_probe, ProbeConfig, SweepCell};
use crate::sampler::{generate_dataset, label_histogram, GenerateOptions};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const RUN_MANIFEST_NAME: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "spatial-bench", version, about = "Synthetic spatial-relation probing benchmark")]
pub struct Cli {
    /// TOML config; falls back to the SPATIAL_BENCH_CONFIG variable.
    #[arg(long, global = true, env = CONFIG_ENV_VAR)]
    pub config: Option<PathBuf>,
    /// Maximum worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Sample scenes and write a manifest plus category maps.
    Generate(GenerateArgs),
    /// Assign train/val/test splits.
    Split(SplitArgs),
    /// Write oracle token features for every sample.
    EncodeOracle(EncodeArgs),
    /// Train one probe head on one variant.
    Train(TrainArgs),
    /// Run the full probing protocol and aggregate.
    Eval(EvalArgs),
    /// Mean ranks of models over the columns of an accuracy table.
    Rank(RankArgs),
    /// Pearson r and R² between two metric columns.
    Correlate(CorrelateArgs),
    /// Per-layer attention flow between two token categories.
    Attnflow(AttnflowArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value = "flat")]
    pub env: String,
    /// `source,target,viewpoint`; defaults to the environment's triple.
    #[arg(long)]
    pub triple: Option<TripleSpec>,
    /// Accepted samples; defaults to the variant's dataset size.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "ego")]
    pub variant: TaskVariant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub budget_factor: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = DEFAULT_FRACTIONS)]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Categories rendered as background (names or ids).
    #[arg(long, value_delimiter = ',')]
    pub mask: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where features come from: a directory of `.sprt` files, or oracle
/// features computed on the fly.
#[derive(Debug, Args, Serialize)]
pub struct FeatureArgs {
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Per-layer files `<id>.layer<L>.sprt`.
    #[arg(long)]
    pub layer: Option<u32>,
    /// Seed of on-the-fly oracle features.
    #[arg(long, default_value_t = 0)]
    pub oracle_seed: u64,
}

/// Desk-scale overrides of the `[probe]` config section.
#[derive(Debug, Args, Serialize)]
pub struct ProbeOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub dropout_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub abmilp_hidden: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, default_value = "efficient")]
    pub head: HeadKind,
    #[arg(long, default_value = "ego")]
    pub variant: TaskVariant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train a single cell instead of sweeping (needs `--dropout` too).
    #[arg(long, requires = "dropout")]
    pub lr: Option<f64>,
    #[arg(long, requires = "lr")]
    pub dropout: Option<f64>,
    #[command(flatten)]
    pub probe: ProbeOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Model name recorded in the report.
    #[arg(long, default_value = "oracle")]
    pub model: String,
    #[arg(long, value_delimiter = ',', default_value = "linear,abmilp,efficient")]
    pub heads: Vec<HeadKind>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "ego,allo")]
    pub variants: Vec<TaskVariant>,
    /// Earlier `report.json` files whose cells are merged in (for ranking).
    #[arg(long)]
    pub merge: Vec<PathBuf>,
    #[command(flatten)]
    pub probe: ProbeOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RankArgs {
    /// CSV with header `model,col1,col2,...`.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CorrelateArgs {
    /// CSV with header `model,metric1,metric2,...`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    /// Lower is better for x; negated before the fit.
    #[arg(long)]
    pub invert_x: bool,
    #[arg(long)]
    pub invert_y: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnflowArgs {
    /// `.spat` attention tensor.
    #[arg(long)]
    pub attention: PathBuf,
    /// `.spcm` category map of the same image.
    #[arg(long)]
    pub map: PathBuf,
    /// Special-token layout; overrides the map's specials.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Environment whose category names are accepted.
    #[arg(long, default_value = "flat")]
    pub env: String,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub dest: String,
    #[arg(long, default_value = "sum")]
    pub aggregation: FlowAggregation,
    /// A second destination; its curve and the differential are reported too.
    #[arg(long)]
    pub compare: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Written as `run.json` into every output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool_version: &'static str,
    pub command: &'a Command,
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    /// SHA-256 over the input files, in argument order.
    pub input_hash: String,
    pub output_dir: &'a Path,
}

/// Usage errors exit with 2, everything else with 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownEnvironment { .. }
        | Error::UnknownCategory(_)
        | Error::InvalidParameter(_)
        | Error::Config(_)
        | Error::SchemaMismatch { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::invalid("--jobs must be positive"));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::invalid(e.to_string()))?;
    let config = match &cli.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    pool.install(|| dispatch(cli, &config))
}

fn dispatch(cli: &Cli, cfg: &BenchConfig) -> Result<()> {
    let ctx = Ctx { cli, cfg };
    match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::EncodeOracle(a) => cmd_encode_oracle(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Rank(a) => cmd_rank(&ctx, a),
        Command::Correlate(a) => cmd_correlate(&ctx, a),
        Command::Attnflow(a) => cmd_attnflow(&ctx, a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: &'a BenchConfig,
}

impl Ctx<'_> {
    fn finish(&self, out: &Path, seed: Option<u64>, inputs: &[&Path]) -> Result<()> {
        let mut all: Vec<&Path> = self.cli.config.as_deref().into_iter().collect();
        all.extend_from_slice(inputs);
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: &self.cli.command,
            config: self.cli.config.as_deref(),
            seed,
            input_hash: hash_inputs(&all)?,
            output_dir: out,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("run manifest serializes");
        write_text(&out.join(RUN_MANIFEST_NAME), &(text + "\n"))
    }
}

/// Files hash as-is; directories hash every regular file in name order,
/// except run manifests.
fn hash_inputs(paths: &[&Path]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let mut add = |p: &Path| -> Result<()> {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update(name.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(*p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file() && e.file_name().is_some_and(|n| n != RUN_MANIFEST_NAME))
                .collect();
            entries.sort();
            for e in entries {
                add(&e)?;
            }
        } else {
            add(p)?;
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_dataset(dir: &Path) -> Result<(PathBuf, Vec<SampleRecord>)> {
    let path = dir.join(MANIFEST_NAME);
    let records = read_manifest(&path)?;
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok((path, records))
}

fn env_of(cfg: &BenchConfig, records: &[SampleRecord]) -> Result<EnvConfig> {
    cfg.environment(&records[0].environment)
}

/// Category name, numeric id, or one of `background`, `cls`, `register`.
fn resolve_category(env: &EnvConfig, name: &str) -> Result<CategoryId> {
    match name {
        "background" => return Ok(BACKGROUND),
        "cls" => return Ok(CLS_TOKEN),
        "register" => return Ok(REGISTER_TOKEN),
        _ => {}
    }
    if let Ok(id) = name.parse::<CategoryId>() {
        return Ok(id);
    }
    env.category(name).map(|c| c.id)
}

fn cmd_generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    let env = ctx.cfg.environment(&a.env)?;
    let triple = a.triple.clone().unwrap_or_else(|| env.default_triple.clone());
    let n = a.n.unwrap_or_else(|| a.variant.default_dataset_size());
    let mut opts = GenerateOptions::default();
    if let Some(b) = a.budget_factor {
        opts.budget_factor = b;
    }
    let (mut records, stats) = generate_dataset(&env, &triple, n, a.seed, opts)?;
    let maps = a.out.join("maps");
    create_dir(&maps)?;
    for r in &mut records {
        let occ = crate::camera::token_occupancy(&r.layout.camera, &env.intrinsics, &r.layout);
        let map = occ.map.with_specials(vec![CLS_TOKEN]);
        let rel = format!("maps/{}.spcm", r.sample_id);
        map.write(&a.out.join(&rel))?;
        r.files.category_map = Some(rel.into());
    }
    write_manifest(&a.out.join(MANIFEST_NAME), &records)?;
    write_text(&a.out.join("stats.json"), &to_json(&stats))?;
    eprintln!("{stats}");
    for v in TaskVariant::ALL {
        eprintln!("{v} labels [front, back, left, right]: {:?}", label_histogram(&records, v));
    }
    ctx.finish(&a.out, Some(a.seed), &[])
}

fn cmd_split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let (path, mut records) = load_dataset(&a.data)?;
    let fractions: [f64; 3] = a
        .fractions
        .as_slice()
        .try_into()
        .map_err(|_| Error::invalid("--fractions takes three values"))?;
    split_dataset(&mut records, fractions, a.seed)?;
    create_dir(&a.out)?;
    // category map references stay relative to the generated dataset
    write_manifest(&a.out.join(MANIFEST_NAME), &records)?;
    ctx.finish(&a.out, Some(a.seed), &[&path])
}

fn oracle_spec(cfg: &BenchConfig, noise: Option<f64>) -> Result<OracleSpec> {
    let mut spec = cfg.oracle.clone();
    if let Some(s) = noise {
        spec.noise_sigma = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_encode_oracle(ctx: &Ctx, a: &EncodeArgs) -> Result<()> {
    use rayon::prelude::*;
    let (path, records) = load_dataset(&a.data)?;
    let env = env_of(ctx.cfg, &records)?;
    let mut spec = oracle_spec(ctx.cfg, a.noise_sigma)?;
    for m in &a.mask {
        let id = resolve_category(&env, m)?;
        if !spec.masked_categories.contains(&id) {
            spec.masked_categories.push(id);
        }
    }
    create_dir(&a.out)?;
    records.par_iter().try_for_each(|r| -> Result<()> {
        let (f, _) = encode_with_occupancy(&r.layout, &env.intrinsics, &spec, a.seed)?;
        f.write(&eval::feature_path(&a.out, &r.sample_id, None))
    })?;
    TokenSidecar {
        grid_rows: env.intrinsics.grid_rows,
        grid_cols: env.intrinsics.grid_cols,
        n_cls: 1,
        n_registers: 0,
        specials_position: SpecialPosition::Last,
    }
    .write(&a.out.join(SIDECAR_NAME))?;
    write_text(&a.out.join("oracle.json"), &to_json(&spec))?;
    ctx.finish(&a.out, Some(a.seed), &[&path])
}

fn feature_source(ctx: &Ctx, f: &FeatureArgs, records: &[SampleRecord]) -> Result<FeatureSource> {
    Ok(match &f.features {
        Some(dir) => FeatureSource::Directory {
            dir: dir.clone(),
            layer: f.layer,
        },
        None => {
            if f.layer.is_some() {
                return Err(Error::invalid("--layer needs --features"));
            }
            FeatureSource::Oracle {
                spec: oracle_spec(ctx.cfg, None)?,
                intrinsics: env_of(ctx.cfg, records)?.intrinsics,
                seed: f.oracle_seed,
            }
        }
    })
}

fn probe_config(cfg: &BenchConfig, o: &ProbeOverrides, heads: &[HeadKind]) -> Result<ProbeConfig> {
    let mut p = cfg.probe.clone();
    if let Some(g) = &o.lr_grid {
        p.lr_grid = g.clone();
    }
    if let Some(g) = &o.dropout_grid {
        p.dropout_grid = g.clone();
    }
    if let Some(b) = o.batch_size {
        p.batch_size = b;
    }
    if let Some(h) = o.abmilp_hidden {
        p.abmilp_hidden = h;
    }
    for &h in heads {
        let s = match h {
            HeadKind::Linear => &mut p.linear,
            HeadKind::Abmilp => &mut p.abmilp,
            HeadKind::Efficient => &mut p.efficient,
        };
        if let Some(e) = o.epochs {
            s.epochs = e;
            s.warmup_epochs = o.warmup_epochs.unwrap_or(e / 5);
        } else if let Some(w) = o.warmup_epochs {
            s.warmup_epochs = w;
        }
    }
    p.validate()?;
    Ok(p)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    head: HeadKind,
    variant: TaskVariant,
    result: &'a crate::train::TrainResult,
    test_accuracy: f64,
    sweep: Vec<SweepCell>,
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let (path, records) = load_dataset(&a.data)?;
    let probe = probe_config(ctx.cfg, &a.probe, &[a.head])?;
    let source = feature_source(ctx, &a.features, &records)?;
    let folds = eval::build_folds(&records, source.load(&records)?, a.variant)?;
    let (best, cells) = match (a.lr, a.dropout) {
        (Some(lr), Some(p)) => (train_probe(&folds, &probe.train_config(a.head, lr, p, a.seed))?, Vec::new()),
        _ => {
            let s = sweep(&folds, a.head, &probe, a.seed)?;
            (s.best, s.cells)
        }
    };
    let test_accuracy = accuracy(best.params(), &folds.test)?;
    create_dir(&a.out)?;
    best.params().write(&a.out.join("probe.sppb"))?;
    let summary = TrainSummary {
        head: a.head,
        variant: a.variant,
        result: &best,
        test_accuracy,
        sweep: cells,
    };
    write_text(&a.out.join("train.json"), &to_json(&summary))?;
    eprintln!(
        "{} {}: val {:.4} (epoch {}), test {:.4}",
        a.head, a.variant, best.best_val_accuracy, best.best_epoch, test_accuracy
    );
    let mut inputs: Vec<&Path> = vec![&path];
    inputs.extend(a.features.features.as_deref());
    ctx.finish(&a.out, Some(a.seed), &inputs)
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let (path, records) = load_dataset(&a.data)?;
    let probe = probe_config(ctx.cfg, &a.probe, &a.heads)?;
    let source = feature_source(ctx, &a.features, &records)?;
    let protocol = Protocol {
        model: a.model.clone(),
        heads: a.heads.clone(),
        seeds: a.seeds.clone(),
        variants: a.variants.clone(),
        probe,
        layer: a.features.layer,
    };
    let mut report = eval::run_protocol(&records, &source, &protocol)?;
    for m in &a.merge {
        let text = std::fs::read_to_string(m).map_err(|e| Error::io(m, e))?;
        report.merge(eval::EvalReport::from_json(&text)?);
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("report.json"), &report.to_json())?;
    write_text(&a.out.join("cells.csv"), &report.cells_csv())?;
    write_text(&a.out.join("aggregates.csv"), &report.aggregates_csv())?;
    let bars: Vec<(String, f64)> = report
        .aggregates
        .iter()
        .map(|g| (format!("{}/{}/{}", g.model, g.probe, g.variant), g.mean_accuracy))
        .collect();
    write_text(&a.out.join("accuracy.svg"), &chart::accuracy_bars_svg("test accuracy", &bars)?)?;
    for g in &report.aggregates {
        eprintln!("{} {} {} {}: {:.4} (n={})", g.model, g.environment, g.probe, g.variant, g.mean_accuracy, g.n);
    }
    for r in &report.mean_ranks {
        eprintln!("rank {} {}: {:.3}", r.model, r.probe, r.mean_rank);
    }
    let mut inputs: Vec<&Path> = vec![&path];
    inputs.extend(a.features.features.as_deref());
    inputs.extend(a.merge.iter().map(PathBuf::as_path));
    ctx.finish(&a.out, a.seeds.first().copied(), &inputs)
}

#[derive(Serialize)]
struct RankEntry {
    model: String,
    mean_rank: f64,
}

fn cmd_rank(ctx: &Ctx, a: &RankArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.table).map_err(|e| Error::io(&a.table, e))?;
    let table = ScoreTable::parse_csv(&text)?;
    let models: Vec<&String> = table.rows.keys().collect();
    let rows: Vec<Vec<f64>> = table.rows.values().cloned().collect();
    let ranks = eval::mean_rank(&rows)?;
    let entries: Vec<RankEntry> = models
        .iter()
        .zip(&ranks)
        .map(|(m, &r)| RankEntry {
            model: m.to_string(),
            mean_rank: r,
        })
        .collect();
    create_dir(&a.out)?;
    let mut csv = String::from("model,mean_rank\n");
    for e in &entries {
        csv.push_str(&format!("{},{}\n", e.model, e.mean_rank));
        eprintln!("{}: {:.3}", e.model, e.mean_rank);
    }
    write_text(&a.out.join("ranks.csv"), &csv)?;
    write_text(&a.out.join("ranks.json"), &to_json(&entries))?;
    ctx.finish(&a.out, None, &[&a.table])
}

fn cmd_correlate(ctx: &Ctx, a: &CorrelateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.scores).map_err(|e| Error::io(&a.scores, e))?;
    let table = ScoreTable::parse_csv(&text)?;
    let c = eval::correlate(
        &table.column(&a.x)?,
        &table.column(&a.y)?,
        (&a.x, &a.y),
        (a.invert_x, a.invert_y),
    )?;
    create_dir(&a.out)?;
    write_text(&a.out.join("correlation.json"), &to_json(&c))?;
    eprintln!("r = {:.4}, R² = {:.4} over {} models", c.r, c.r_squared, c.n);
    ctx.finish(&a.out, None, &[&a.scores])
}

#[derive(Serialize)]
struct FlowReport {
    flow: eval::FlowCurve,
    compare: Option<eval::FlowCurve>,
    differential: Option<Vec<f64>>,
}

fn cmd_attnflow(ctx: &Ctx, a: &AttnflowArgs) -> Result<()> {
    let env = ctx.cfg.environment(&a.env)?;
    let attn = AttentionTensor::read(&a.attention)?;
    let mut map = TokenCategoryMap::read(&a.map)?;
    let mut specials_first = false;
    if let Some(p) = &a.sidecar {
        let s = TokenSidecar::read(p)?;
        if s.n_patches() != map.cells.len() {
            return Err(Error::ShapeMismatch(format!(
                "sidecar grid has {} patches, map has {}",
                s.n_patches(),
                map.cells.len()
            )));
        }
        map.specials = s.special_ids();
        specials_first = s.specials_position == SpecialPosition::First;
    }
    let cats = eval::token_categories(&map, specials_first);
    let src = resolve_category(&env, &a.source)?;
    let flow = eval::attention_flow(&attn, &cats, src, resolve_category(&env, &a.dest)?, a.aggregation)?;
    let compare = a
        .compare
        .as_deref()
        .map(|c| eval::attention_flow(&attn, &cats, src, resolve_category(&env, c)?, a.aggregation))
        .transpose()?;
    let differential = compare.as_ref().map(|c| eval::flow_differential(&flow, c)).transpose()?;
    let mut curves = vec![(format!("{} -> {}", a.source, a.dest), flow.values.clone())];
    if let (Some(c), Some(name)) = (&compare, &a.compare) {
        curves.push((format!("{} -> {}", a.source, name), c.values.clone()));
    }
    create_dir(&a.out)?;
    let y = match a.aggregation {
        FlowAggregation::Sum => "attention mass",
        FlowAggregation::Mean => "mean attention",
    };
    write_text(&a.out.join("flow.svg"), &chart::curves_svg("attention flow", y, &curves)?)?;
    write_text(
        &a.out.join("flow.json"),
        &to_json(&FlowReport {
            flow,
            compare,
            differential,
        }),
    )?;
    let mut inputs: Vec<&Path> = vec![&a.attention, &a.map];
    inputs.extend(a.sidecar.as_deref());
    ctx.finish(&a.out, None, &inputs)
}
