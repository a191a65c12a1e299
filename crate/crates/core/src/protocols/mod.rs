//! Offline selection protocols over metric tables: simulated practitioners
//! picking hyperparameters (optionally with early stopping), transfer of
//! configurations across environments, and ranking evaluation.

pub mod ranking;
pub mod table;

use rand::seq::index;

use crate::data::{normalize_return, EnvMeta};
use crate::error::{Error, Result};
use crate::metrics::MetricId;
use crate::rng;

pub use ranking::{good_poor_labels, rebalance, roc_auc, spearman};
pub use table::MetricTable;

pub const DEFAULT_SAMPLE_SIZE: usize = 25;
pub const DEFAULT_REPEATS: usize = 20;
pub const MAX_TRANSFER_SUBSETS: usize = 64;

/// Mean and quartiles of normalized test returns over simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub metric: MetricId,
    pub early_stopping: bool,
    pub mean: f64,
    pub p25: f64,
    pub p75: f64,
    pub n_simulations: usize,
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// (mean, p25, p75); values are sorted in place first so the result does not
/// depend on simulation order.
pub fn summarize(values: &mut [f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::Invalid("no values to summarize".into()));
    }
    values.sort_by(f64::total_cmp);
    // offset from the minimum so identical values average exactly
    let base = values[0];
    let mean = base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64;
    Ok((mean, percentile(values, 0.25), percentile(values, 0.75)))
}

/// Best (config, checkpoint) for one training seed among `candidates`,
/// direction-aware. Without early stopping only final checkpoints compete.
/// Ties go to the lowest config id, then the lowest checkpoint.
pub fn select_hp(
    table: &MetricTable,
    metric: MetricId,
    candidates: &[u32],
    seed: u32,
    early_stopping: bool,
) -> Result<(u32, u32)> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidate configurations".into()));
    }
    let col = table.column(metric)?;
    let si = table
        .seed_index(seed)
        .ok_or_else(|| Error::Invalid(format!("seed {seed} not in table")))?;
    let dir = metric.direction();
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let last = table.n_checkpoints() - 1;
    let ckpts = if early_stopping { 0..=last } else { last..=last };
    let mut best: Option<(f64, u32, u32)> = None;
    for &c in &sorted {
        let ci = table
            .config_index(c)
            .ok_or_else(|| Error::Invalid(format!("config {c} not in table")))?;
        for k in ckpts.clone() {
            let v = col.at(ci, si, k);
            if best.is_none_or(|(b, _, _)| dir.better(v, b)) {
                best = Some((v, c, k as u32));
            }
        }
    }
    let (_, c, k) = best.unwrap();
    Ok((c, k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationParams {
    pub sample_size: usize,
    pub repeats: usize,
    pub early_stopping: bool,
    pub rng_seed: u64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        SimulationParams {
            sample_size: DEFAULT_SAMPLE_SIZE,
            repeats: DEFAULT_REPEATS,
            early_stopping: false,
            rng_seed: 0,
        }
    }
}

/// One simulated practitioner's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub seed: u32,
    pub repeat: usize,
    pub config_id: u32,
    pub checkpoint: u32,
    pub normalized_return: f64,
}

/// Candidate configurations drawn for (training seed, repeat). The draw
/// depends only on those and the rng seed, so all metrics see the same
/// candidate sets.
pub fn candidate_sample(table: &MetricTable, sample_size: usize, seed: u32, repeat: usize, rng_seed: u64) -> Vec<u32> {
    let configs = table.configs();
    let mut r = rng::substream(rng_seed, "simulation", &[seed as u64, repeat as u64]);
    let mut picked: Vec<u32> = index::sample(&mut r, configs.len(), sample_size)
        .into_iter()
        .map(|i| configs[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Every (training seed, repeat) simulation, in canonical order.
pub fn simulate(table: &MetricTable, metric: MetricId, meta: &EnvMeta, params: &SimulationParams) -> Result<Vec<Simulation>> {
    if params.sample_size == 0 || params.sample_size > table.configs().len() {
        return Err(Error::Invalid(format!(
            "sample size {} must be in 1..={}",
            params.sample_size,
            table.configs().len()
        )));
    }
    if params.repeats == 0 {
        return Err(Error::Invalid("repeats must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(table.seeds().len() * params.repeats);
    for &s in table.seeds() {
        for rep in 0..params.repeats {
            let cands = candidate_sample(table, params.sample_size, s, rep, params.rng_seed);
            let (c, k) = select_hp(table, metric, &cands, s, params.early_stopping)?;
            let ret = table.get(MetricId::ENV_RETURN, c, s, k)?;
            out.push(Simulation {
                seed: s,
                repeat: rep,
                config_id: c,
                checkpoint: k,
                normalized_return: normalize_return(ret, meta),
            });
        }
    }
    Ok(out)
}

pub fn report_from(metric: MetricId, early_stopping: bool, sims: &[Simulation]) -> Result<SelectionReport> {
    let mut vals: Vec<f64> = sims.iter().map(|s| s.normalized_return).collect();
    let (mean, p25, p75) = summarize(&mut vals)?;
    Ok(SelectionReport {
        metric,
        early_stopping,
        mean,
        p25,
        p75,
        n_simulations: sims.len(),
    })
}

/// Simulate `seeds x repeats` practitioners who each sample
/// `sample_size` configurations and keep the best one by `metric`.
pub fn simulate_practitioners(
    table: &MetricTable,
    metric: MetricId,
    meta: &EnvMeta,
    params: &SimulationParams,
) -> Result<SelectionReport> {
    let sims = simulate(table, metric, meta, params)?;
    report_from(metric, params.early_stopping, &sims)
}

/// A metric table with the normalization anchors of its environment.
#[derive(Debug, Clone)]
pub struct EnvTable {
    pub table: MetricTable,
    pub meta: EnvMeta,
}

impl EnvTable {
    pub fn new(table: MetricTable, meta: EnvMeta) -> Result<Self> {
        if table.env_id() != meta.env_id {
            return Err(Error::Invalid(format!(
                "table env {:?} does not match meta env {:?}",
                table.env_id(),
                meta.env_id
            )));
        }
        if !table.has_metric(MetricId::ENV_RETURN) {
            return Err(Error::MetricUnavailable(MetricId::ENV_RETURN));
        }
        Ok(EnvTable { table, meta })
    }

    pub fn env_id(&self) -> &str {
        self.table.env_id()
    }

    fn normalized_final(&self, config: u32, seed: u32) -> Result<f64> {
        let r = self
            .table
            .get(MetricId::ENV_RETURN, config, seed, self.table.final_checkpoint())?;
        Ok(normalize_return(r, &self.meta))
    }
}

fn check_aligned(envs: &[&EnvTable]) -> Result<()> {
    let first = &envs[0].table;
    for e in &envs[1..] {
        if e.table.configs() != first.configs() || e.table.seeds() != first.seeds() {
            return Err(Error::Invalid(format!(
                "config/seed grids of {:?} and {:?} are not aligned",
                first.env_id(),
                e.env_id()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferParams {
    pub k: usize,
    /// Local metric used for early stopping on the test environment; `None`
    /// keeps the final checkpoint.
    pub early_stop_metric: Option<MetricId>,
    pub rng_seed: u64,
}

/// Per (validation subset, training seed) outcome of transfer selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPick {
    pub subset: Vec<String>,
    pub seed: u32,
    pub config_id: u32,
    pub checkpoint: u32,
    pub normalized_return: f64,
}

/// Config with the best mean normalized final return over `validation`,
/// then early-stopped on `test` by a local metric.
fn transfer_picks(
    validation: &[&EnvTable],
    test: &EnvTable,
    early_stop_metric: Option<MetricId>,
) -> Result<Vec<TransferPick>> {
    let names: Vec<String> = validation.iter().map(|e| e.env_id().to_string()).collect();
    let mut out = Vec::new();
    for &s in test.table.seeds() {
        let mut best: Option<(f64, u32)> = None;
        for &c in test.table.configs() {
            let mut total = 0.0;
            for v in validation {
                total += v.normalized_final(c, s)?;
            }
            let score = total / validation.len() as f64;
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, c));
            }
        }
        let (_, c) = best.unwrap();
        let k = match early_stop_metric {
            Some(m) => select_hp(&test.table, m, &[c], s, true)?.1,
            None => test.table.final_checkpoint(),
        };
        let ret = test.table.get(MetricId::ENV_RETURN, c, s, k)?;
        out.push(TransferPick {
            subset: names.clone(),
            seed: s,
            config_id: c,
            checkpoint: k,
            normalized_return: normalize_return(ret, &test.meta),
        });
    }
    Ok(out)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn find_env<'a>(envs: &'a [EnvTable], id: &str) -> Result<&'a EnvTable> {
    envs.iter()
        .find(|e| e.env_id() == id)
        .ok_or_else(|| Error::Invalid(format!("unknown environment {id:?}")))
}

/// Transfer selection from size-`k` subsets of `validation_envs` to
/// `test_env`; all subsets when there are at most 64, otherwise a seeded
/// sample of 64.
pub fn transfer_picks_for(
    envs: &[EnvTable],
    validation_envs: &[String],
    test_env: &str,
    params: &TransferParams,
) -> Result<Vec<TransferPick>> {
    if validation_envs.iter().any(|v| v == test_env) {
        return Err(Error::Invalid(format!("test env {test_env:?} is also a validation env")));
    }
    if params.k == 0 || params.k > validation_envs.len() {
        return Err(Error::Invalid(format!(
            "k = {} must be in 1..={}",
            params.k,
            validation_envs.len()
        )));
    }
    let test = find_env(envs, test_env)?;
    let vals: Vec<&EnvTable> = validation_envs
        .iter()
        .map(|v| find_env(envs, v))
        .collect::<Result<_>>()?;
    let mut all = vals.clone();
    all.push(test);
    check_aligned(&all)?;

    let mut subsets = combinations(vals.len(), params.k);
    if subsets.len() > MAX_TRANSFER_SUBSETS {
        let mut r = rng::substream(params.rng_seed, "transfer-subsets", &[params.k as u64]);
        let mut keep = index::sample(&mut r, subsets.len(), MAX_TRANSFER_SUBSETS).into_vec();
        keep.sort_unstable();
        subsets = keep.into_iter().map(|i| subsets[i].clone()).collect();
    }
    let mut out = Vec::new();
    for sub in subsets {
        let chosen: Vec<&EnvTable> = sub.iter().map(|&i| vals[i]).collect();
        out.extend(transfer_picks(&chosen, test, params.early_stop_metric)?);
    }
    Ok(out)
}

pub fn transfer_select(
    envs: &[EnvTable],
    validation_envs: &[String],
    test_env: &str,
    params: &TransferParams,
) -> Result<SelectionReport> {
    let picks = transfer_picks_for(envs, validation_envs, test_env, params)?;
    transfer_report(&picks, params.early_stop_metric)
}

fn transfer_report(picks: &[TransferPick], early_stop_metric: Option<MetricId>) -> Result<SelectionReport> {
    let mut vals: Vec<f64> = picks.iter().map(|p| p.normalized_return).collect();
    let (mean, p25, p75) = summarize(&mut vals)?;
    Ok(SelectionReport {
        metric: MetricId::ENV_RETURN,
        early_stopping: early_stop_metric.is_some(),
        mean,
        p25,
        p75,
        n_simulations: picks.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferCell {
    pub validation_env: String,
    pub test_env: String,
    pub report: SelectionReport,
}

/// Every (validation, test) pair. The diagonal selects on the test
/// environment's own final returns.
pub fn transfer_matrix(envs: &[EnvTable], early_stop_metric: Option<MetricId>) -> Result<Vec<TransferCell>> {
    if envs.is_empty() {
        return Err(Error::Invalid("no environments".into()));
    }
    let refs: Vec<&EnvTable> = envs.iter().collect();
    check_aligned(&refs)?;
    let mut out = Vec::new();
    for v in envs {
        for t in envs {
            let picks = transfer_picks(&[v], t, early_stop_metric)?;
            out.push(TransferCell {
                validation_env: v.env_id().to_string(),
                test_env: t.env_id().to_string(),
                report: transfer_report(&picks, early_stop_metric)?,
            });
        }
    }
    Ok(out)
}

/// Aggregate over test environments of transfer from `k` of the remaining
/// environments, for `k = 1..n-1`.
pub fn transfer_curve(
    envs: &[EnvTable],
    early_stop_metric: Option<MetricId>,
    rng_seed: u64,
) -> Result<Vec<(usize, SelectionReport)>> {
    let ids: Vec<String> = envs.iter().map(|e| e.env_id().to_string()).collect();
    let mut out = Vec::new();
    for k in 1..ids.len() {
        let mut picks = Vec::new();
        for t in &ids {
            let vals: Vec<String> = ids.iter().filter(|v| *v != t).cloned().collect();
            let params = TransferParams {
                k,
                early_stop_metric,
                rng_seed,
            };
            picks.extend(transfer_picks_for(envs, &vals, t, &params)?);
        }
        out.push((k, transfer_report(&picks, early_stop_metric)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingParams {
    pub threshold: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for RankingParams {
    fn default() -> Self {
        RankingParams {
            threshold: ranking::DEFAULT_THRESHOLD,
            bins: ranking::DEFAULT_BINS,
            seed: 0,
        }
    }
}

/// Ranking-task scores of one metric. Undefined scores (constant values,
/// one-class labels) are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingScores {
    pub metric: MetricId,
    pub spearman: f64,
    pub roc_auc: f64,
    pub threshold: f64,
    pub n_policies: usize,
}

/// Rebalance the pooled (config, seed, checkpoint) policies by normalized
/// return, then score every metric of the table against the oracle.
pub fn rank_evaluation(table: &MetricTable, meta: &EnvMeta, params: &RankingParams) -> Result<Vec<RankingScores>> {
    let env = table.column(MetricId::ENV_RETURN)?;
    let mut pool = Vec::new();
    for ci in 0..table.configs().len() {
        for si in 0..table.seeds().len() {
            for k in 0..table.n_checkpoints() {
                pool.push(((ci, si, k), normalize_return(env.at(ci, si, k), meta)));
            }
        }
    }
    let kept = rebalance(&pool, params.bins, params.seed)?;
    let oracle: Vec<f64> = kept
        .iter()
        .map(|&(ci, si, k)| normalize_return(env.at(ci, si, k), meta))
        .collect();
    let labels = good_poor_labels(&oracle, params.threshold);
    let mut out = Vec::new();
    for &m in table.metrics() {
        let col = table.column(m)?;
        let vals: Vec<f64> = kept.iter().map(|&(ci, si, k)| col.at(ci, si, k)).collect();
        let sp = spearman(&vals, &oracle, m.direction()).unwrap_or_else(|e| {
            log::warn!("{}: {m}: spearman undefined: {e}", table.env_id());
            f64::NAN
        });
        let auc = roc_auc(&vals, &labels, m.direction()).unwrap_or_else(|e| {
            log::warn!("{}: {m}: roc_auc undefined: {e}", table.env_id());
            f64::NAN
        });
        out.push(RankingScores {
            metric: m,
            spearman: sp,
            roc_auc: auc,
            threshold: params.threshold,
            n_policies: kept.len(),
        });
    }
    Ok(out)
}
