//! The `bvae` command line: JSON configs in, CSV/JSON/checkpoint files out.
//!
//! Every subcommand parses and validates its whole config, and checks that
//! its input files exist, before it creates or writes anything. Relative
//! paths inside a config are resolved against the config file's directory.
//! Wall-clock timings go to `timings.log` in the output directory so the
//! primary outputs stay byte-identical across reruns.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use ndarray::Axis;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::embed::{
    export_crossplot, export_projection, extract_embeddings, pca_project, tsne_project, CrossplotRow,
    ProjectionSidecar, TsneConfig, TSNE_MAX_POINTS,
};
use crate::error::{Error, Result};
use crate::field::{
    generate_dataset, read_dataset, write_dataset, EconomicParams, LabeledDataset, Objective, ProxyField,
    Sampler, DECISION_DIM,
};
use crate::model::{train, Model, ModelConfig};
use crate::optimizer::{optimize, OptRunStats, OptimizerConfig, Simulator};
use crate::uncertainty::{evaluate_model, r2_score, EvaluationReport, Metrics, DEFAULT_MC_SAMPLES};

pub const OUTPUT_FORMAT_VERSION: u32 = 1;
pub const OUT_ENV: &str = "BVAE_OUT";

#[derive(Debug, Parser)]
#[command(name = "bvae", version, about = "Beta-VAE regression surrogates for field-development optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON config for the subcommand.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the proxy field and write a labelled dataset.
    Generate(Common),
    /// Train one model, or one per β in a sweep.
    Train(Common),
    /// Point and Monte Carlo metrics plus crossplot data.
    Evaluate(Common),
    /// Latent embeddings projected to 2-D.
    Embed(Common),
    /// Differential evolution with optional surrogate gating.
    Optimize(Common),
    /// Chain generate, train, evaluate, embed and optimize at reduced size.
    Repro(Common),
}

/// Exit status for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFinite(_) | Error::Domain(_) | Error::DegenerateBatch(_) => 4,
        _ => 3,
    }
}

/// Provenance block carried by every JSON output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn provenance<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Provenance> {
    Ok(Provenance {
        format_version: OUTPUT_FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_sha256: sha256_hex(&serde_json::to_vec(config)?),
        seed,
    })
}

fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} {} does not exist", p.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Timings {
    path: PathBuf,
    start: Instant,
}

impl Timings {
    fn new(out: &Path) -> Self {
        Timings {
            path: out.join("timings.log"),
            start: Instant::now(),
        }
    }

    fn record(&self, what: &str) {
        let line = format!("{what}\t{:.3}s\n", self.start.elapsed().as_secs_f64());
        let file = fs::OpenOptions::new().create(true).append(true).open(&self.path);
        if let Ok(mut f) = file {
            let _ = f.write_all(line.as_bytes());
        }
    }
}

/// Where the field comes from: a persisted descriptor or a generator seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSource {
    Seed(u64),
    Path(PathBuf),
}

impl FieldSource {
    fn check(&self, base: &Path) -> Result<()> {
        match self {
            FieldSource::Seed(_) => Ok(()),
            FieldSource::Path(p) => require_file(&resolve(base, p), "field descriptor"),
        }
    }

    fn load(&self, base: &Path) -> Result<ProxyField> {
        let field = match self {
            FieldSource::Seed(s) => ProxyField::generate(*s),
            FieldSource::Path(p) => read_config(&resolve(base, p))?,
        };
        field.validate()?;
        Ok(field)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub field: FieldSource,
    pub samples: usize,
    pub objective: Objective,
    #[serde(default)]
    pub economics: EconomicParams,
    #[serde(default = "default_sampler")]
    pub sampler: Sampler,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dataset_name")]
    pub name: String,
}

fn default_sampler() -> Sampler {
    Sampler::Uniform
}

fn default_dataset_name() -> String {
    "dataset".into()
}

fn default_model_name() -> String {
    "model".into()
}

impl GenerateConfig {
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        self.economics.validate()?;
        self.field.check(base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    /// Train one model per β; each checkpoint records its β.
    #[serde(default)]
    pub beta_sweep: Option<Vec<f64>>,
    #[serde(default = "default_model_name")]
    pub name: String,
}

impl TrainConfig {
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.model.validate()?;
        if self.model.input_dim != DECISION_DIM {
            return Err(Error::Config(format!(
                "model.input_dim must be {DECISION_DIM} for field datasets, got {}",
                self.model.input_dim
            )));
        }
        if let Some(b) = &self.beta_sweep {
            if b.is_empty() || b.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("beta_sweep needs one or more values >= 0".into()));
            }
        }
        require_file(&resolve(base, &self.dataset), "dataset")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    Holdout,
    All,
}

impl SplitChoice {
    fn rows(&self, ds: &LabeledDataset) -> Vec<usize> {
        match self {
            SplitChoice::Train => ds.split.train.clone(),
            SplitChoice::Holdout => ds.split.holdout.clone(),
            SplitChoice::All => (0..ds.len()).collect(),
        }
    }

    fn tag(&self, ds: &LabeledDataset, row: usize) -> &'static str {
        match self {
            SplitChoice::Train => "train",
            SplitChoice::Holdout => "holdout",
            SplitChoice::All if ds.split.holdout.contains(&row) => "holdout",
            SplitChoice::All => "train",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_split")]
    pub split: SplitChoice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_name")]
    pub name: String,
}

fn default_mc() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_split() -> SplitChoice {
    SplitChoice::Holdout
}

fn default_eval_name() -> String {
    "evaluation".into()
}

impl EvaluateConfig {
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be >= 2".into()));
        }
        require_file(&resolve(base, &self.dataset), "dataset")?;
        require_file(&resolve(base, &self.checkpoint), "checkpoint")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionChoice {
    Pca,
    Tsne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub methods: Vec<ProjectionChoice>,
    #[serde(default)]
    pub tsne: TsneConfig,
    /// Keep only the first `subsample` rows of the (seeded) split order.
    /// Required when the split is larger than the t-SNE point limit.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default = "default_split")]
    pub split: SplitChoice,
    #[serde(default = "default_embed_name")]
    pub name: String,
}

fn default_embed_name() -> String {
    "embedding".into()
}

impl EmbedConfig {
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must name pca and/or tsne".into()));
        }
        if let Some(0..=2) = self.subsample {
            return Err(Error::Config("subsample must be >= 3".into()));
        }
        require_file(&resolve(base, &self.dataset), "dataset")?;
        require_file(&resolve(base, &self.checkpoint), "checkpoint")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub field: FieldSource,
    pub objective: Objective,
    #[serde(default)]
    pub economics: EconomicParams,
    /// Surrogate checkpoint; required when `optimizer.gate` is set.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Also run the same seed without a surrogate and report both.
    #[serde(default)]
    pub compare_ungated: bool,
    #[serde(default = "default_opt_name")]
    pub name: String,
}

fn default_opt_name() -> String {
    "optimization".into()
}

impl OptimizeConfig {
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.optimizer.validate()?;
        self.economics.validate()?;
        self.field.check(base)?;
        match (&self.checkpoint, &self.optimizer.gate) {
            (None, Some(_)) => Err(Error::Config("optimizer.gate needs a checkpoint".into())),
            (Some(c), _) => require_file(&resolve(base, c), "checkpoint"),
            (None, None) => Ok(()),
        }
    }
}

/// Reduced-size end-to-end run over a latent-dimension × β grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproConfig {
    pub field_seed: u64,
    pub objective: Objective,
    pub sampler: Sampler,
    pub samples: usize,
    pub latent_dims: Vec<usize>,
    pub betas: Vec<f64>,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub mc_samples: usize,
    pub embed_points: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ReproConfig {
    fn default() -> Self {
        ReproConfig {
            field_seed: 7,
            objective: Objective::Npv,
            sampler: Sampler::OptimizerTrace,
            samples: 4000,
            latent_dims: vec![90, 3],
            betas: vec![1.0],
            epochs: 40,
            lr_decay_every: 15,
            mc_samples: 200,
            embed_points: 300,
            optimizer: OptimizerConfig {
                population_size: 30,
                generations: 15,
                gate: Some(crate::optimizer::GateThreshold::Quantile(0.3)),
                mc_samples: 100,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

impl ReproConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 10 {
            return Err(Error::Config("repro needs samples >= 10".into()));
        }
        if self.latent_dims.is_empty() || self.betas.is_empty() {
            return Err(Error::Config("latent_dims and betas must be non-empty".into()));
        }
        if self.embed_points < 16 {
            return Err(Error::Config("embed_points must be >= 16".into()));
        }
        for &j in &self.latent_dims {
            self.model_config(j, self.betas[0]).validate()?;
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be >= 2".into()));
        }
        self.optimizer.validate()
    }

    fn model_config(&self, latent_dim: usize, beta: f64) -> ModelConfig {
        let mut m = ModelConfig {
            latent_dim,
            beta,
            epochs: self.epochs,
            seed: self.seed,
            ..ModelConfig::default()
        };
        m.lr_schedule.decay_every = self.lr_decay_every;
        m
    }
}

fn override_seed(slot: &mut u64, seed: Option<u64>) {
    if let Some(s) = seed {
        *slot = s;
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<()> {
    let common = match &command {
        Command::Generate(c)
        | Command::Train(c)
        | Command::Evaluate(c)
        | Command::Embed(c)
        | Command::Optimize(c)
        | Command::Repro(c) => c,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // Ignored if a pool already exists (e.g. repeated calls in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let base = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    match &command {
        Command::Generate(c) => {
            let mut cfg: GenerateConfig = read_config(&c.config)?;
            override_seed(&mut cfg.seed, c.seed);
            cfg.validate(&base)?;
            cmd_generate(&cfg, &base, &c.out).map(|_| ())
        }
        Command::Train(c) => {
            let mut cfg: TrainConfig = read_config(&c.config)?;
            override_seed(&mut cfg.model.seed, c.seed);
            cfg.validate(&base)?;
            cmd_train(&cfg, &base, &c.out).map(|_| ())
        }
        Command::Evaluate(c) => {
            let mut cfg: EvaluateConfig = read_config(&c.config)?;
            override_seed(&mut cfg.seed, c.seed);
            cfg.validate(&base)?;
            cmd_evaluate(&cfg, &base, &c.out).map(|_| ())
        }
        Command::Embed(c) => {
            let mut cfg: EmbedConfig = read_config(&c.config)?;
            override_seed(&mut cfg.tsne.seed, c.seed);
            cfg.validate(&base)?;
            cmd_embed(&cfg, &base, &c.out).map(|_| ())
        }
        Command::Optimize(c) => {
            let mut cfg: OptimizeConfig = read_config(&c.config)?;
            override_seed(&mut cfg.optimizer.seed, c.seed);
            cfg.validate(&base)?;
            cmd_optimize(&cfg, &base, &c.out).map(|_| ())
        }
        Command::Repro(c) => {
            let mut cfg: ReproConfig = read_config(&c.config)?;
            override_seed(&mut cfg.seed, c.seed);
            if let Some(s) = c.seed {
                cfg.optimizer.seed = s;
            }
            cfg.validate()?;
            cmd_repro(&cfg, &c.out).map(|_| ())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSummary {
    pub provenance: Provenance,
    pub rows: usize,
    pub objective: Objective,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub dataset: String,
    pub field: String,
}

pub fn cmd_generate(cfg: &GenerateConfig, base: &Path, out: &Path) -> Result<GenerateSummary> {
    let field = cfg.field.load(base)?;
    let t = Timings::new(out);
    let ds = generate_dataset(
        cfg.samples,
        &field,
        cfg.objective,
        &cfg.economics,
        cfg.sampler,
        cfg.noise_std,
        cfg.seed,
    )?;
    prepare_out(out)?;
    let csv = out.join(format!("{}.csv", cfg.name));
    write_dataset(&ds, &csv)?;
    let field_path = out.join(format!("{}_field.json", cfg.name));
    write_json(&field_path, &field)?;

    let mut sorted = ds.y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let summary = GenerateSummary {
        provenance: provenance("generate", cfg, cfg.seed)?,
        rows: n,
        objective: cfg.objective,
        min: sorted[0],
        median,
        max: sorted[n - 1],
        dataset: csv.display().to_string(),
        field: field_path.display().to_string(),
    };
    write_json(&out.join(format!("{}_summary.json", cfg.name)), &summary)?;
    println!(
        "generated {} rows ({:?}): min {:.6e}, median {:.6e}, max {:.6e}",
        n, cfg.objective, summary.min, summary.median, summary.max
    );
    t.record(&format!("generate {}", cfg.name));
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMetrics {
    pub mse: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMetrics {
    pub provenance: Provenance,
    pub beta: f64,
    pub latent_dim: usize,
    pub epochs_run: usize,
    pub train: SplitMetrics,
    pub validation: Option<SplitMetrics>,
    pub checkpoint: String,
    pub history: String,
}

fn split_metrics(model: &mut Model, x: &crate::nn::Tensor2, y: &ndarray::Array1<f64>) -> Result<Option<SplitMetrics>> {
    if y.len() < 2 {
        return Ok(None);
    }
    let p = model.predict(x)?;
    let (y, p) = (y.to_vec(), p.to_vec());
    Ok(Some(SplitMetrics {
        mse: crate::uncertainty::mse(&y, &p)?,
        r2: r2_score(&y, &p)?,
    }))
}

pub fn cmd_train(cfg: &TrainConfig, base: &Path, out: &Path) -> Result<Vec<TrainMetrics>> {
    let ds = read_dataset(&resolve(base, &cfg.dataset))?;
    let split = ds.train_split()?;
    let t = Timings::new(out);
    let runs: Vec<(String, ModelConfig)> = match &cfg.beta_sweep {
        None => vec![(cfg.name.clone(), cfg.model.clone())],
        Some(betas) => betas
            .iter()
            .map(|&b| {
                (
                    format!("{}_beta{b}", cfg.name),
                    ModelConfig {
                        beta: b,
                        ..cfg.model.clone()
                    },
                )
            })
            .collect(),
    };
    prepare_out(out)?;
    let mut all = Vec::new();
    for (name, mcfg) in runs {
        let mut model = Model::from_config(&mcfg)?;
        model.normalization = Some(ds.normalization.clone());
        let history = train(&mut model, &split)?;
        let ckpt = out.join(format!("{name}.ckpt"));
        checkpoint::save(&mut model, &ckpt)?;
        let hist = out.join(format!("{name}_history.csv"));
        write_text(&hist, &history.to_csv())?;
        let train_m = split_metrics(&mut model, &split.x_train, &split.y_train)?
            .ok_or_else(|| Error::Data("training split needs at least 2 rows".into()))?;
        let metrics = TrainMetrics {
            provenance: provenance("train", cfg, mcfg.seed)?,
            beta: mcfg.beta,
            latent_dim: mcfg.latent_dim,
            epochs_run: history.len(),
            train: train_m,
            validation: split_metrics(&mut model, &split.x_val, &split.y_val)?,
            checkpoint: ckpt.display().to_string(),
            history: hist.display().to_string(),
        };
        write_json(&out.join(format!("{name}_metrics.json")), &metrics)?;
        println!(
            "trained {name}: {} epochs, train R² {:.4}{}",
            metrics.epochs_run,
            metrics.train.r2,
            metrics
                .validation
                .as_ref()
                .map(|v| format!(", validation R² {:.4}", v.r2))
                .unwrap_or_default()
        );
        let last = history.epochs.last().map_or(0.0, |e| e.wall_seconds);
        t.record(&format!("train {name} ({last:.3}s in loop)"));
        all.push(metrics);
    }
    Ok(all)
}

fn load_matching(ckpt: &Path, ds: &LabeledDataset) -> Result<Model> {
    let model = checkpoint::load(ckpt)?;
    match &model.normalization {
        Some(n) if *n == ds.normalization => Ok(model),
        Some(_) => Err(Error::Data(format!(
            "{} was trained with different normalization statistics than this dataset",
            ckpt.display()
        ))),
        None => Err(Error::Data(format!(
            "{} carries no normalization statistics",
            ckpt.display()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub provenance: Provenance,
    pub dataset: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub split: SplitChoice,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

pub fn cmd_evaluate(cfg: &EvaluateConfig, base: &Path, out: &Path) -> Result<EvaluationOutput> {
    let ds_path = resolve(base, &cfg.dataset);
    let ck_path = resolve(base, &cfg.checkpoint);
    let ds = read_dataset(&ds_path)?;
    let mut model = load_matching(&ck_path, &ds)?;
    let rows = cfg.split.rows(&ds);
    let (x, y) = ds.normalized_rows(&rows)?;
    let t = Timings::new(out);
    let report = evaluate_model(&mut model, &x, &y, cfg.mc_samples, cfg.seed)?;
    prepare_out(out)?;
    let cross: Vec<CrossplotRow> = report
        .samples
        .iter()
        .zip(&rows)
        .map(|(s, &r)| CrossplotRow {
            truth: s.truth,
            pred_mean: s.mean,
            pred_std: s.std,
            split: cfg.split.tag(&ds, r).to_string(),
        })
        .collect();
    export_crossplot(&cross, &out.join(format!("{}_crossplot.csv", cfg.name)))?;
    let bytes = fs::read(&ck_path).map_err(|e| Error::io(&ck_path, e))?;
    let output = EvaluationOutput {
        provenance: provenance("evaluate", cfg, cfg.seed)?,
        dataset: cfg.dataset.display().to_string(),
        checkpoint: cfg.checkpoint.display().to_string(),
        checkpoint_sha256: sha256_hex(&bytes),
        split: cfg.split,
        report,
    };
    write_json(&out.join(format!("{}.json", cfg.name)), &output)?;
    println!(
        "evaluated {} rows with T={}: point R² {:.4}, MC-mean R² {:.4}, mean std {:.4}",
        rows.len(),
        cfg.mc_samples,
        output.report.point.r2,
        output.report.mc_mean.r2,
        output.report.mean_std
    );
    t.record(&format!("evaluate {}", cfg.name));
    Ok(output)
}

/// Metrics recomputed from a crossplot file, for consistency checks.
pub fn metrics_from_crossplot(rows: &[CrossplotRow]) -> Result<(f64, f64)> {
    let t: Vec<f64> = rows.iter().map(|r| r.truth).collect();
    let p: Vec<f64> = rows.iter().map(|r| r.pred_mean).collect();
    Ok((crate::uncertainty::mse(&t, &p)?, r2_score(&t, &p)?))
}

pub fn cmd_embed(cfg: &EmbedConfig, base: &Path, out: &Path) -> Result<Vec<ProjectionSidecar>> {
    let ds = read_dataset(&resolve(base, &cfg.dataset))?;
    let ck_path = resolve(base, &cfg.checkpoint);
    let mut model = load_matching(&ck_path, &ds)?;
    let mut rows = cfg.split.rows(&ds);
    if let Some(k) = cfg.subsample {
        rows.truncate(k);
    }
    if cfg.methods.contains(&ProjectionChoice::Tsne) && rows.len() > TSNE_MAX_POINTS {
        return Err(Error::Config(format!(
            "{} points exceed the t-SNE limit of {TSNE_MAX_POINTS}; set `subsample`",
            rows.len()
        )));
    }
    let (x, y) = ds.normalized_rows(&rows)?;
    let targets = y.to_vec();
    let emb = extract_embeddings(&mut model, &x, &targets)?;
    let bytes = fs::read(&ck_path).map_err(|e| Error::io(&ck_path, e))?;
    let hash = sha256_hex(&bytes);
    let t = Timings::new(out);
    let mut outputs = Vec::new();
    let mut written = Vec::new();
    for m in &cfg.methods {
        let (proj, tag) = match m {
            ProjectionChoice::Pca => (pca_project(&emb.matrix)?, "pca"),
            ProjectionChoice::Tsne => (tsne_project(&emb.matrix, &cfg.tsne)?, "tsne"),
        };
        let side = ProjectionSidecar {
            format_version: OUTPUT_FORMAT_VERSION,
            method: proj.method.clone(),
            embedding: emb.meta.clone(),
            points: rows.len(),
            checkpoint_sha256: hash.clone(),
        };
        written.push((proj, tag, side));
    }
    prepare_out(out)?;
    let mut latent = String::from("id");
    for j in 0..emb.matrix.ncols() {
        latent.push_str(&format!(",z{j}"));
    }
    latent.push_str(",target_scaled\n");
    for (i, row) in emb.matrix.axis_iter(Axis(0)).enumerate() {
        latent.push_str(&i.to_string());
        for v in row {
            latent.push_str(&format!(",{v}"));
        }
        latent.push_str(&format!(",{}\n", targets[i]));
    }
    write_text(&out.join(format!("{}_latent.csv", cfg.name)), &latent)?;
    for (proj, tag, side) in written {
        export_projection(&proj, &targets, &side, &out.join(format!("{}_{tag}.csv", cfg.name)))?;
        outputs.push(side);
    }
    println!("embedded {} points with {} projection(s)", rows.len(), outputs.len());
    t.record(&format!("embed {}", cfg.name));
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeReport {
    pub provenance: Provenance,
    pub run: OptRunStats,
    pub ungated: Option<OptRunStats>,
}

pub fn cmd_optimize(cfg: &OptimizeConfig, base: &Path, out: &Path) -> Result<OptimizeReport> {
    let field = cfg.field.load(base)?;
    let model = match &cfg.checkpoint {
        Some(c) => {
            let m = checkpoint::load(&resolve(base, c))?;
            if m.normalization.is_none() {
                return Err(Error::Data(format!("{} carries no normalization statistics", c.display())));
            }
            Some(m)
        }
        None => None,
    };
    let sim = Simulator {
        field: &field,
        objective: cfg.objective,
        economics: &cfg.economics,
        noise_std: cfg.optimizer.noise_std,
    };
    let t = Timings::new(out);
    let run = optimize(&sim, model.as_ref(), &cfg.optimizer)?;
    let ungated = if cfg.compare_ungated {
        let plain = OptimizerConfig {
            gate: None,
            ..cfg.optimizer.clone()
        };
        Some(optimize(&sim, None, &plain)?)
    } else {
        None
    };
    prepare_out(out)?;
    write_text(&out.join(format!("{}_trace.csv", cfg.name)), &run.trace_csv())?;
    if let Some(u) = &ungated {
        write_text(&out.join(format!("{}_ungated_trace.csv", cfg.name)), &u.trace_csv())?;
    }
    let report = OptimizeReport {
        provenance: provenance("optimize", cfg, cfg.optimizer.seed)?,
        run,
        ungated,
    };
    write_json(&out.join(format!("{}.json", cfg.name)), &report)?;
    println!(
        "best {:?} {:.6e} with {} simulator calls and {} surrogate accepts",
        cfg.objective, report.run.best_objective, report.run.simulator_calls, report.run.surrogate_accepts
    );
    if let Some(u) = &report.ungated {
        println!("ungated: best {:.6e} with {} simulator calls", u.best_objective, u.simulator_calls);
    }
    t.record(&format!("optimize {}", cfg.name));
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproRow {
    pub latent_dim: usize,
    pub beta: f64,
    pub point: Metrics,
    pub mc_mean: Metrics,
    pub mean_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproSummary {
    pub provenance: Provenance,
    pub models: Vec<ReproRow>,
    pub optimization: OptimizeReport,
}

/// generate → train (grid) → evaluate → embed → optimize, in `out`.
pub fn cmd_repro(cfg: &ReproConfig, out: &Path) -> Result<ReproSummary> {
    // Stage configs hold paths inside `out`; they must not resolve twice.
    let out = &std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    prepare_out(out)?;
    let gen = GenerateConfig {
        field: FieldSource::Seed(cfg.field_seed),
        samples: cfg.samples,
        objective: cfg.objective,
        economics: EconomicParams::default(),
        sampler: cfg.sampler,
        noise_std: 0.0,
        seed: cfg.seed,
        name: "dataset".into(),
    };
    cmd_generate(&gen, out, out)?;
    let abs = |p: &str| out.join(p);

    let mut models = Vec::new();
    let mut first_ckpt = None;
    for &j in &cfg.latent_dims {
        for &b in &cfg.betas {
            let name = format!("model_j{j}_beta{b}");
            let tc = TrainConfig {
                dataset: abs("dataset.csv"),
                model: cfg.model_config(j, b),
                beta_sweep: None,
                name: name.clone(),
            };
            cmd_train(&tc, out, out)?;
            let ec = EvaluateConfig {
                dataset: abs("dataset.csv"),
                checkpoint: abs(&format!("{name}.ckpt")),
                mc_samples: cfg.mc_samples,
                split: SplitChoice::Holdout,
                seed: cfg.seed,
                name: format!("{name}_evaluation"),
            };
            let ev = cmd_evaluate(&ec, out, out)?;
            let embed_cfg = EmbedConfig {
                dataset: abs("dataset.csv"),
                checkpoint: abs(&format!("{name}.ckpt")),
                methods: vec![ProjectionChoice::Pca, ProjectionChoice::Tsne],
                tsne: TsneConfig {
                    perplexity: 30f64.min((cfg.embed_points as f64 - 1.0) / 3.0).max(5.0),
                    seed: cfg.seed,
                    ..TsneConfig::default()
                },
                subsample: Some(cfg.embed_points),
                split: SplitChoice::Holdout,
                name: format!("{name}_embedding"),
            };
            cmd_embed(&embed_cfg, out, out)?;
            if first_ckpt.is_none() {
                first_ckpt = Some(abs(&format!("{name}.ckpt")));
            }
            models.push(ReproRow {
                latent_dim: j,
                beta: b,
                point: ev.report.point,
                mc_mean: ev.report.mc_mean,
                mean_std: ev.report.mean_std,
            });
        }
    }
    let oc = OptimizeConfig {
        field: FieldSource::Path(abs("dataset_field.json")),
        objective: cfg.objective,
        economics: EconomicParams::default(),
        checkpoint: first_ckpt,
        optimizer: cfg.optimizer.clone(),
        compare_ungated: true,
        name: "optimization".into(),
    };
    let optimization = cmd_optimize(&oc, out, out)?;
    let summary = ReproSummary {
        provenance: provenance("repro", cfg, cfg.seed)?,
        models,
        optimization,
    };
    write_json(&out.join("repro_summary.json"), &summary)?;
    Ok(summary)
}
