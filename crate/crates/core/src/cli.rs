//! Batch commands: testbed generation, metric computation, selection,
//! transfer and ranking evaluation. Each command writes its outputs plus
//! the `run_config.json` that produced them into `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{split_demos, DemoSet, EnvMeta, Episode, EvalBundle};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64};
use crate::metrics::{evaluate_checkpoint, rnd_train_with, DivergenceParams, EvalContext, MetricId, MetricRow, RndModel};
use crate::ot::{self, SinkhornParams};
use crate::protocols::{
    self, rank_evaluation, transfer_curve, transfer_matrix, EnvTable, MetricTable, RankingParams, SelectionReport,
    SimulationParams,
};
use crate::testbed::{self, PointMassEnv, SweepParams};

pub const RUN_CONFIG: &str = "run_config.json";
pub const MANIFEST: &str = "manifest.json";
pub const DEMOS_FILE: &str = "demos.jsonl";
pub const META_FILE: &str = "meta.json";
pub const CONFIGS_FILE: &str = "configs.jsonl";
pub const BUNDLES_DIR: &str = "bundles";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTION_REPORT: &str = "selection_report.csv";
pub const SIMULATIONS_LOG: &str = "simulations.csv";
pub const SELECTION_PLOT: &str = "selection_plot.csv";
pub const TRANSFER_MATRIX: &str = "transfer_matrix.csv";
pub const TRANSFER_CURVE: &str = "transfer_curve.csv";
pub const RANKING_SCORES: &str = "ranking_scores.csv";
pub const RANKING_BY_SEED: &str = "ranking_scores_by_seed.csv";

#[derive(Debug, Parser)]
#[command(name = "ilsel", version, about = "Reward-free hyperparameter selection for imitation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic point-mass testbed: demos, meta, bundles, manifest.
    GenTestbed(GenTestbedArgs),
    /// Compute the metric table of a bundle set.
    ComputeMetrics(ComputeMetricsArgs),
    /// Simulate practitioners selecting hyperparameters with each metric.
    Select(SelectArgs),
    /// Transfer hyperparameters across environments.
    Transfer(TransferArgs),
    /// Score metrics on the policy ranking and good/poor tasks.
    RankEval(RankEvalArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// Root seed; every random draw comes from a named substream of it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long)]
    #[serde(skip)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenTestbedArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "pointmass")]
    pub env_id: String,
    #[arg(long, default_value_t = 1.0)]
    pub actuator_gain: f64,
    #[arg(long, default_value_t = testbed::DEFAULT_CONFIGS)]
    pub configs: usize,
    #[arg(long, default_value_t = testbed::DEFAULT_SEEDS)]
    pub seeds: usize,
    #[arg(long, default_value_t = testbed::DEFAULT_CHECKPOINTS)]
    pub checkpoints: usize,
    #[arg(long, default_value_t = testbed::DEFAULT_ROLLOUTS)]
    pub rollouts: usize,
    #[arg(long, default_value_t = testbed::DEFAULT_DEMOS)]
    pub demos: usize,
    #[arg(long, default_value_t = 11)]
    pub n_train: usize,
    #[arg(long, default_value_t = 5)]
    pub n_valid: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ComputeMetricsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub demos: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    /// Bundle JSON Lines file, or a directory whose `*.jsonl` files are read
    /// in name order. Repeatable.
    #[arg(long, required = true)]
    pub bundles: Vec<PathBuf>,
    /// Metrics as `kind` or `kind/split`, comma separated (default: all;
    /// imitation_return is then dropped if bundles carry no imitation rewards).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<MetricId>,
    #[arg(long, default_value_t = 11)]
    pub n_train: usize,
    #[arg(long, default_value_t = 5)]
    pub n_valid: usize,
    /// Rollouts averaged by the return and RND metrics (default: all of each bundle's).
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = ot::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = ot::DEFAULT_SUBSAMPLE_CAP)]
    pub subsample_cap: usize,
    #[arg(long, default_value_t = 10)]
    pub divergence_episodes: usize,
    #[arg(long, default_value_t = crate::metrics::RND_EPOCHS)]
    pub rnd_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EarlyStopping {
    Off,
    On,
    Both,
}

impl EarlyStopping {
    fn modes(self) -> Vec<bool> {
        match self {
            EarlyStopping::Off => vec![false],
            EarlyStopping::On => vec![true],
            EarlyStopping::Both => vec![false, true],
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    /// Metrics to select with (default: every metric in the table).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<MetricId>,
    #[arg(long, value_enum, default_value_t = EarlyStopping::Both)]
    pub early_stopping: EarlyStopping,
    #[arg(long, default_value_t = protocols::DEFAULT_SAMPLE_SIZE)]
    pub sample_size: usize,
    #[arg(long, default_value_t = protocols::DEFAULT_REPEATS)]
    pub repeats: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Metric tables, one per environment. Repeatable.
    #[arg(long, required = true)]
    pub table: Vec<PathBuf>,
    /// Env metadata, in the same order as `--table`.
    #[arg(long, required = true)]
    pub meta: Vec<PathBuf>,
    /// Local metric for early stopping on the test environment, or `none`.
    #[arg(long, default_value = "state_divergence/train")]
    pub early_stop_metric: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankEvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long, default_value_t = protocols::ranking::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = protocols::ranking::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a T,
}

fn write_run_config<T: Serialize>(out: &Path, command: &str, args: &T) -> Result<PathBuf> {
    io::write_json(
        out.join(RUN_CONFIG),
        &RunConfig {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
        },
    )
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Invalid("--workers must be >= 1".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(f)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTestbed(a) => cmd_gen_testbed(&a).map(drop),
        Command::ComputeMetrics(a) => cmd_compute_metrics(&a).map(drop),
        Command::Select(a) => cmd_select(&a).map(drop),
        Command::Transfer(a) => cmd_transfer(&a).map(drop),
        Command::RankEval(a) => cmd_rank_eval(&a).map(drop),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ManifestBundle {
    pub config_id: u32,
    pub seed: u32,
    pub checkpoint: u32,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub env: PointMassEnv,
    pub files: Vec<ManifestFile>,
    pub bundles: Vec<ManifestBundle>,
}

fn shard_name(config_id: u32) -> String {
    format!("{BUNDLES_DIR}/config_{config_id:04}.jsonl")
}

pub fn cmd_gen_testbed(args: &GenTestbedArgs) -> Result<Manifest> {
    let out = &args.common.out;
    let env = PointMassEnv {
        env_id: args.env_id.clone(),
        actuator_gain: args.actuator_gain,
        ..PointMassEnv::default()
    };
    env.validate()?;
    let sweep = SweepParams {
        n_configs: args.configs,
        n_seeds: args.seeds,
        n_checkpoints: args.checkpoints,
        rollouts: args.rollouts,
        n_train: args.n_train,
        n_valid: args.n_valid,
        seed: args.common.seed,
    };
    sweep.validate()?;
    let seed = args.common.seed;
    let demos = testbed::gen_demos(&env, args.demos, seed)?;
    let meta = testbed::env_meta(&env, &demos, seed)?;
    let splits = (0..sweep.n_seeds as u32)
        .map(|s| sweep.demo_split(&demos, s))
        .collect::<Result<Vec<_>>>()?;
    let configs = sweep.configs();

    fs::create_dir_all(out.join(BUNDLES_DIR)).map_err(|e| Error::io(out.join(BUNDLES_DIR), e))?;
    io::write_jsonl(out.join(DEMOS_FILE), &demos)?;
    io::write_json(out.join(META_FILE), &meta)?;
    io::write_jsonl(out.join(CONFIGS_FILE), &configs)?;

    with_pool(args.common.workers, || {
        configs.par_iter().try_for_each(|c| {
            let path = out.join(shard_name(c.config_id));
            io::write_atomic(&path, |w| {
                testbed::gen_config_bundles(&env, c, &splits, &sweep, |b| io::write_jsonl_line(w, &path, &b))
            })
            .map(drop)
        })
    })?;

    let mut names: Vec<String> = vec![DEMOS_FILE.into(), META_FILE.into(), CONFIGS_FILE.into()];
    names.extend(configs.iter().map(|c| shard_name(c.config_id)));
    let files = with_pool(args.common.workers, || {
        names
            .par_iter()
            .map(|n| {
                Ok(ManifestFile {
                    path: n.clone(),
                    sha256: io::sha256_file(out.join(n))?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut bundles = Vec::new();
    for c in &configs {
        for s in 0..sweep.n_seeds as u32 {
            for k in 0..sweep.n_checkpoints as u32 {
                bundles.push(ManifestBundle {
                    config_id: c.config_id,
                    seed: s,
                    checkpoint: k,
                    file: shard_name(c.config_id),
                });
            }
        }
    }
    let manifest = Manifest { env, files, bundles };
    io::write_json(out.join(MANIFEST), &manifest)?;
    write_run_config(out, "gen-testbed", args)?;
    log::info!("wrote {} bundles to {}", manifest.bundles.len(), out.display());
    Ok(manifest)
}

/// Bundle inputs: files as given, directories expanded to their `*.jsonl`
/// files in name order.
fn bundle_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no bundle files found".into()));
    }
    Ok(out)
}

/// Per-training-seed demo split and RND model, built on first use.
struct SeedState {
    demos: DemoSet,
    rnd: Option<RndModel>,
}

/// Built once per training seed; the error is kept as text so it can be shared.
type SeedCell = Arc<OnceLock<std::result::Result<Arc<SeedState>, String>>>;

struct SeedCache<'a> {
    episodes: &'a [Episode],
    args: &'a ComputeMetricsArgs,
    need_rnd: bool,
    cells: Mutex<BTreeMap<u32, SeedCell>>,
}

impl SeedCache<'_> {
    fn get(&self, seed: u32) -> Result<Arc<SeedState>> {
        let cell = self.cells.lock().unwrap().entry(seed).or_default().clone();
        cell.get_or_init(|| {
            let build = || -> Result<SeedState> {
                let demos = split_demos(self.episodes, self.args.n_train, self.args.n_valid, seed as u64)?;
                let rnd = if self.need_rnd {
                    let rseed = crate::rng::subseed(self.args.common.seed, "rnd", &[seed as u64]);
                    Some(rnd_train_with(&demos, rseed, self.args.rnd_epochs)?)
                } else {
                    None
                };
                Ok(SeedState { demos, rnd })
            };
            build().map(Arc::new).map_err(|e| e.to_string())
        })
        .clone()
        .map_err(|e| Error::Invalid(format!("training seed {seed}: {e}")))
    }
}

const CHUNK: usize = 32;

pub fn cmd_compute_metrics(args: &ComputeMetricsArgs) -> Result<MetricTable> {
    let out = &args.common.out;
    let episodes = io::read_episodes(&args.demos)?;
    let meta = io::read_meta(&args.meta)?;
    let explicit = !args.metrics.is_empty();
    let requested = if explicit { args.metrics.clone() } else { MetricId::all() };
    let divergence = DivergenceParams {
        sinkhorn: SinkhornParams {
            epsilon: args.epsilon,
            ..SinkhornParams::default()
        },
        subsample_cap: args.subsample_cap,
        episodes: args.divergence_episodes,
    };
    let cache = SeedCache {
        episodes: &episodes,
        args,
        need_rnd: requested.contains(&MetricId::RND_SCORE),
        cells: Mutex::new(BTreeMap::new()),
    };
    let files = bundle_files(&args.bundles)?;

    let eval = |line: usize, path: &Path, text: &str| -> Result<(MetricRow, bool)> {
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line,
            message,
        };
        let bundle: EvalBundle = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        bundle.validate().map_err(|e| schema(e.to_string()))?;
        let state = cache.get(bundle.seed)?;
        let n = args.episodes.unwrap_or(bundle.rollouts.len());
        let ctx = EvalContext::new(&state.demos, &meta, state.rnd.as_ref(), divergence, n, args.common.seed)?;
        let missing_imitation = bundle.imitation_rewards.is_none();
        let metrics: Vec<MetricId> = requested
            .iter()
            .copied()
            .filter(|m| explicit || !(missing_imitation && *m == MetricId::IMITATION_RETURN))
            .collect();
        let row = evaluate_checkpoint(&bundle, &ctx, &metrics).map_err(|e| Error::Invalid(format!(
            "{}:{line}: bundle (config={}, seed={}, checkpoint={}): {e}",
            path.display(),
            bundle.config_id,
            bundle.seed,
            bundle.checkpoint
        )))?;
        Ok((row, missing_imitation))
    };

    let mut rows: Vec<(MetricRow, bool)> = Vec::new();
    with_pool(args.common.workers, || {
        for path in &files {
            let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut lines = std::io::BufReader::new(f).lines().enumerate();
            loop {
                let mut chunk = Vec::with_capacity(CHUNK);
                for (i, l) in lines.by_ref() {
                    let l = l.map_err(|e| Error::io(path, e))?;
                    if !l.trim().is_empty() {
                        chunk.push((i + 1, l));
                    }
                    if chunk.len() == CHUNK {
                        break;
                    }
                }
                if chunk.is_empty() {
                    break;
                }
                let done = chunk
                    .par_iter()
                    .map(|(line, text)| eval(*line, path, text))
                    .collect::<Result<Vec<_>>>()?;
                rows.extend(done);
            }
        }
        Ok(())
    })?;

    if rows.iter().any(|(_, missing)| *missing) {
        log::warn!("some bundles carry no imitation rewards; imitation_return is unavailable and dropped");
        for (r, _) in &mut rows {
            r.values.remove(&MetricId::IMITATION_RETURN);
        }
    }
    let mut rows: Vec<MetricRow> = rows.into_iter().map(|(r, _)| r).collect();
    rows.sort_by_key(|r| r.key());
    if let Some(w) = rows.windows(2).find(|w| w[0].key() == w[1].key()) {
        let (c, s, k) = w[0].key();
        return Err(Error::Invalid(format!(
            "duplicate bundle (config={c}, seed={s}, checkpoint={k})"
        )));
    }
    let table = MetricTable::from_rows(meta.env_id.clone(), &rows)?;
    let path = out.join(METRICS_FILE);
    io::write_atomic(&path, |w| table.write_csv(w))?;
    write_run_config(out, "compute-metrics", args)?;
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(table)
}

pub fn read_table(path: &Path) -> Result<MetricTable> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    MetricTable::read_csv(std::io::BufReader::new(f), path)
}

pub const SELECTION_HEADER: [&str; 8] = [
    "env_id",
    "metric_kind",
    "split",
    "early_stopping",
    "mean",
    "p25",
    "p75",
    "n_simulations",
];

pub const SIMULATION_HEADER: [&str; 9] = [
    "env_id",
    "metric_kind",
    "split",
    "early_stopping",
    "seed",
    "repeat",
    "config_id",
    "checkpoint",
    "normalized_return",
];

pub const SELECTION_PLOT_HEADER: [&str; 5] = ["label", "early_stopping", "mean", "p25", "p75"];

fn report_record(env_id: &str, r: &SelectionReport) -> Vec<String> {
    vec![
        env_id.to_string(),
        r.metric.kind.as_str().to_string(),
        r.metric.split_str().to_string(),
        r.early_stopping.to_string(),
        fmt_f64(r.mean),
        fmt_f64(r.p25),
        fmt_f64(r.p75),
        r.n_simulations.to_string(),
    ]
}

pub fn cmd_select(args: &SelectArgs) -> Result<Vec<SelectionReport>> {
    let out = &args.common.out;
    let table = read_table(&args.table)?;
    let meta = io::read_meta(&args.meta)?;
    let env = EnvTable::new(table, meta)?;
    let metrics = if args.metrics.is_empty() {
        env.table.metrics().to_vec()
    } else {
        args.metrics.clone()
    };
    for m in &metrics {
        if !env.table.has_metric(*m) {
            return Err(Error::MetricUnavailable(*m));
        }
    }
    let jobs: Vec<(MetricId, bool)> = metrics
        .iter()
        .flat_map(|&m| args.early_stopping.modes().into_iter().map(move |es| (m, es)))
        .collect();
    let results = with_pool(args.common.workers, || {
        jobs.par_iter()
            .map(|&(m, es)| {
                let p = SimulationParams {
                    sample_size: args.sample_size,
                    repeats: args.repeats,
                    early_stopping: es,
                    rng_seed: args.common.seed,
                };
                let sims = protocols::simulate(&env.table, m, &env.meta, &p)?;
                let report = protocols::report_from(m, es, &sims)?;
                Ok((report, sims))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let env_id = env.env_id();
    let mut report_rows = Vec::new();
    let mut sim_rows = Vec::new();
    let mut plot_rows = Vec::new();
    for (r, sims) in &results {
        report_rows.push(report_record(env_id, r));
        plot_rows.push(vec![
            r.metric.to_string(),
            r.early_stopping.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.p25),
            fmt_f64(r.p75),
        ]);
        for s in sims {
            sim_rows.push(vec![
                env_id.to_string(),
                r.metric.kind.as_str().to_string(),
                r.metric.split_str().to_string(),
                r.early_stopping.to_string(),
                s.seed.to_string(),
                s.repeat.to_string(),
                s.config_id.to_string(),
                s.checkpoint.to_string(),
                fmt_f64(s.normalized_return),
            ]);
        }
    }
    io::write_csv(out.join(SELECTION_REPORT), &SELECTION_HEADER, &report_rows)?;
    io::write_csv(out.join(SIMULATIONS_LOG), &SIMULATION_HEADER, &sim_rows)?;
    io::write_csv(out.join(SELECTION_PLOT), &SELECTION_PLOT_HEADER, &plot_rows)?;
    write_run_config(out, "select", args)?;
    Ok(results.into_iter().map(|(r, _)| r).collect())
}

pub const TRANSFER_HEADER: [&str; 5] = ["validation_env", "test_env", "mean", "p25", "p75"];
pub const TRANSFER_CURVE_HEADER: [&str; 5] = ["k", "mean", "p25", "p75", "n_simulations"];

fn parse_early_stop(s: &str) -> Result<Option<MetricId>> {
    match s {
        "none" | "off" => Ok(None),
        s => s.parse().map(Some),
    }
}

pub fn cmd_transfer(args: &TransferArgs) -> Result<Vec<protocols::TransferCell>> {
    let out = &args.common.out;
    if args.table.len() != args.meta.len() {
        return Err(Error::Invalid(format!(
            "{} tables but {} meta files",
            args.table.len(),
            args.meta.len()
        )));
    }
    let early = parse_early_stop(&args.early_stop_metric)?;
    let envs = args
        .table
        .iter()
        .zip(&args.meta)
        .map(|(t, m)| EnvTable::new(read_table(t)?, io::read_meta(m)?))
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<&str> = envs.iter().map(|e| e.env_id()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("duplicate environment ids".into()));
    }
    let cells = transfer_matrix(&envs, early)?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.validation_env.clone(),
                c.test_env.clone(),
                fmt_f64(c.report.mean),
                fmt_f64(c.report.p25),
                fmt_f64(c.report.p75),
            ]
        })
        .collect();
    io::write_csv(out.join(TRANSFER_MATRIX), &TRANSFER_HEADER, &rows)?;
    let curve = transfer_curve(&envs, early, args.common.seed)?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|(k, r)| {
            vec![
                k.to_string(),
                fmt_f64(r.mean),
                fmt_f64(r.p25),
                fmt_f64(r.p75),
                r.n_simulations.to_string(),
            ]
        })
        .collect();
    io::write_csv(out.join(TRANSFER_CURVE), &TRANSFER_CURVE_HEADER, &rows)?;
    write_run_config(out, "transfer", args)?;
    Ok(cells)
}

pub const RANKING_HEADER: [&str; 6] = ["env_id", "metric_kind", "split", "spearman", "roc_auc", "n_policies"];
pub const RANKING_BY_SEED_HEADER: [&str; 7] = [
    "env_id",
    "seed",
    "metric_kind",
    "split",
    "spearman",
    "roc_auc",
    "n_policies",
];

/// Ranking scores of the pooled table and of each training seed's slice.
pub struct RankEvalOutput {
    pub pooled: Vec<protocols::RankingScores>,
    pub by_seed: Vec<(u32, Vec<protocols::RankingScores>)>,
}

pub fn cmd_rank_eval(args: &RankEvalArgs) -> Result<RankEvalOutput> {
    let out = &args.common.out;
    let table = read_table(&args.table)?;
    let meta = io::read_meta(&args.meta)?;
    let env = EnvTable::new(table, meta)?;
    let params = RankingParams {
        threshold: args.threshold,
        bins: args.bins,
        seed: crate::rng::subseed(args.common.seed, "rank-eval", &[]),
    };
    let pooled = rank_evaluation(&env.table, &env.meta, &params)?;
    let by_seed = env
        .table
        .seeds()
        .iter()
        .map(|&s| {
            let slice = env.table.restrict_seeds(&[s])?;
            Ok((s, rank_evaluation(&slice, &env.meta, &params)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let env_id = env.env_id();
    let score = |x: f64| if x.is_nan() { String::new() } else { fmt_f64(x) };
    let rows: Vec<Vec<String>> = pooled
        .iter()
        .map(|s| {
            vec![
                env_id.to_string(),
                s.metric.kind.as_str().to_string(),
                s.metric.split_str().to_string(),
                score(s.spearman),
                score(s.roc_auc),
                s.n_policies.to_string(),
            ]
        })
        .collect();
    io::write_csv(out.join(RANKING_SCORES), &RANKING_HEADER, &rows)?;
    let rows: Vec<Vec<String>> = by_seed
        .iter()
        .flat_map(|(seed, scores)| {
            scores.iter().map(move |s| {
                vec![
                    env_id.to_string(),
                    seed.to_string(),
                    s.metric.kind.as_str().to_string(),
                    s.metric.split_str().to_string(),
                    score(s.spearman),
                    score(s.roc_auc),
                    s.n_policies.to_string(),
                ]
            })
        })
        .collect();
    io::write_csv(out.join(RANKING_BY_SEED), &RANKING_BY_SEED_HEADER, &rows)?;
    write_run_config(out, "rank-eval", args)?;
    Ok(RankEvalOutput { pooled, by_seed })
}

/// Load a `gen-testbed` output directory's demos and meta.
pub fn read_testbed(dir: &Path) -> Result<(Vec<Episode>, EnvMeta)> {
    Ok((io::read_episodes(dir.join(DEMOS_FILE))?, io::read_meta(dir.join(META_FILE))?))
}
