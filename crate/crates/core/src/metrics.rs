//! Proxy metrics (and the environment-return oracle) for one evaluation
//! bundle against a demonstration set.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{rescale_action_counting, standardize_state, DemoSet, EnvMeta, EvalBundle, NormStats, Split};
use crate::error::{Error, Result};
use crate::nn::{rows_to_array, train_mse, Mlp, TrainConfig};
use crate::ot::{self, SinkhornParams};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    EnvReturn,
    ImitationReturn,
    ActionMse,
    StateDivergence,
    RndScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::HigherBetter => "higher_better",
            Direction::LowerBetter => "lower_better",
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Direction::HigherBetter => Direction::LowerBetter,
            Direction::LowerBetter => Direction::HigherBetter,
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::HigherBetter => a > b,
            Direction::LowerBetter => a < b,
        }
    }
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::EnvReturn,
        MetricKind::ImitationReturn,
        MetricKind::ActionMse,
        MetricKind::StateDivergence,
        MetricKind::RndScore,
    ];

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::EnvReturn | MetricKind::ImitationReturn | MetricKind::RndScore => Direction::HigherBetter,
            MetricKind::ActionMse | MetricKind::StateDivergence => Direction::LowerBetter,
        }
    }

    pub fn has_split(self) -> bool {
        matches!(self, MetricKind::ActionMse | MetricKind::StateDivergence)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::EnvReturn => "env_return",
            MetricKind::ImitationReturn => "imitation_return",
            MetricKind::ActionMse => "action_mse",
            MetricKind::StateDivergence => "state_divergence",
            MetricKind::RndScore => "rnd_score",
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown metric kind {s:?}")))
    }
}

/// A metric kind plus, for demo-referenced kinds, the demo split it is
/// measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetricId {
    pub kind: MetricKind,
    pub split: Option<Split>,
}

impl MetricId {
    pub const ENV_RETURN: MetricId = MetricId::plain(MetricKind::EnvReturn);
    pub const IMITATION_RETURN: MetricId = MetricId::plain(MetricKind::ImitationReturn);
    pub const RND_SCORE: MetricId = MetricId::plain(MetricKind::RndScore);

    const fn plain(kind: MetricKind) -> Self {
        MetricId { kind, split: None }
    }

    pub fn new(kind: MetricKind, split: Option<Split>) -> Result<Self> {
        if kind.has_split() != split.is_some() {
            return Err(Error::Invalid(format!(
                "{} {} a train/valid split",
                kind.as_str(),
                if kind.has_split() { "requires" } else { "does not take" }
            )));
        }
        Ok(MetricId { kind, split })
    }

    pub const fn action_mse(split: Split) -> Self {
        MetricId {
            kind: MetricKind::ActionMse,
            split: Some(split),
        }
    }

    pub const fn state_divergence(split: Split) -> Self {
        MetricId {
            kind: MetricKind::StateDivergence,
            split: Some(split),
        }
    }

    pub fn direction(self) -> Direction {
        self.kind.direction()
    }

    /// Every metric, in canonical order.
    pub fn all() -> Vec<MetricId> {
        vec![
            MetricId::ENV_RETURN,
            MetricId::IMITATION_RETURN,
            MetricId::action_mse(Split::Train),
            MetricId::action_mse(Split::Valid),
            MetricId::state_divergence(Split::Train),
            MetricId::state_divergence(Split::Valid),
            MetricId::RND_SCORE,
        ]
    }

    /// Every metric other than the environment return.
    pub fn proxies() -> Vec<MetricId> {
        Self::all().into_iter().filter(|m| *m != MetricId::ENV_RETURN).collect()
    }

    pub fn split_str(self) -> &'static str {
        match self.split {
            Some(Split::Train) => "train",
            Some(Split::Valid) => "valid",
            None => "none",
        }
    }

    /// Parse `(kind, split)` as written in table CSVs.
    pub fn parse(kind: &str, split: &str) -> Result<Self> {
        let kind: MetricKind = kind.parse()?;
        let split = match split {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "none" | "" => None,
            s => return Err(Error::Invalid(format!("unknown split {s:?}"))),
        };
        MetricId::new(kind, split)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.split {
            Some(_) => write!(f, "{}/{}", self.kind.as_str(), self.split_str()),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

impl serde::Serialize for MetricId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// `kind` or `kind/split`.
impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((k, sp)) => MetricId::parse(k, sp),
            None => MetricId::parse(s, "none"),
        }
    }
}

/// Metric values of one (config, seed, checkpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub config_id: u32,
    pub seed: u32,
    pub checkpoint: u32,
    pub values: BTreeMap<MetricId, f64>,
}

impl MetricRow {
    pub fn key(&self) -> (u32, u32, u32) {
        (self.config_id, self.seed, self.checkpoint)
    }
}

/// Mean squared difference between rescaled agent and expert actions at the
/// split's demo states, averaged over states and action coordinates.
pub fn action_mse(bundle: &EvalBundle, demos: &DemoSet, split: Split, meta: &EnvMeta) -> Result<f64> {
    let probes = bundle.probe_actions(split);
    let expert = demos.actions(split);
    if probes.len() != expert.len() {
        return Err(Error::Invalid(format!(
            "missing probe actions for {} split: have {}, need {}",
            split_name(split),
            probes.len(),
            expert.len()
        )));
    }
    let mut clamped = 0;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, e) in probes.iter().zip(expert) {
        if p.len() != meta.action_dim || e.len() != meta.action_dim {
            return Err(Error::DimensionMismatch {
                expected: meta.action_dim,
                got: if p.len() != meta.action_dim { p.len() } else { e.len() },
            });
        }
        let (ps, c1) = rescale_action_counting(p, meta);
        let (es, c2) = rescale_action_counting(e, meta);
        clamped += c1 + c2;
        total += ps.iter().zip(&es).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += ps.len();
    }
    if clamped > 0 {
        log::warn!("action_mse: {clamped} action coordinate(s) clamped to bounds");
    }
    Ok(total / count as f64)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
    }
}

/// Mean over rollouts of the per-episode environment reward sum.
pub fn env_return(bundle: &EvalBundle) -> Result<f64> {
    env_return_first(bundle, bundle.rollouts.len())
}

fn env_return_first(bundle: &EvalBundle, n: usize) -> Result<f64> {
    let eps = &bundle.rollouts[..n.min(bundle.rollouts.len())];
    if eps.is_empty() {
        return Err(Error::MetricUnavailable(MetricId::ENV_RETURN));
    }
    let mut total = 0.0;
    for ep in eps {
        total += ep.total_reward().ok_or(Error::MetricUnavailable(MetricId::ENV_RETURN))?;
    }
    Ok(total / eps.len() as f64)
}

/// Mean over rollouts of the logged imitation-reward sums.
pub fn imitation_return(bundle: &EvalBundle) -> Result<f64> {
    imitation_return_first(bundle, bundle.rollouts.len())
}

fn imitation_return_first(bundle: &EvalBundle, n: usize) -> Result<f64> {
    let streams = bundle
        .imitation_rewards
        .as_ref()
        .ok_or(Error::MetricUnavailable(MetricId::IMITATION_RETURN))?;
    let streams = &streams[..n.min(streams.len())];
    if streams.is_empty() {
        return Err(Error::MetricUnavailable(MetricId::IMITATION_RETURN));
    }
    Ok(streams.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>() / streams.len() as f64)
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Standardize, sort into canonical order, then subsample.
fn prepare_pool<'a>(
    states: impl Iterator<Item = &'a [f64]>,
    stats: &NormStats,
    cap: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut pool = states
        .map(|s| standardize_state(s, stats))
        .collect::<Result<Vec<_>>>()?;
    if pool.is_empty() {
        return Err(Error::Invalid("empty state pool".into()));
    }
    pool.sort_by(|a, b| lexicographic(a, b));
    Ok(ot::subsample_states(&pool, cap, seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceParams {
    pub sinkhorn: SinkhornParams,
    pub subsample_cap: usize,
    /// Number of rollout episodes pooled (the first ones in the bundle).
    pub episodes: usize,
}

impl Default for DivergenceParams {
    fn default() -> Self {
        DivergenceParams {
            sinkhorn: SinkhornParams::default(),
            subsample_cap: ot::DEFAULT_SUBSAMPLE_CAP,
            episodes: 10,
        }
    }
}

/// Demo-side pool for the state divergence, prepared once and reused for
/// every bundle.
#[derive(Debug, Clone)]
pub struct DemoPool {
    pub split: Split,
    states: Vec<Vec<f64>>,
}

impl DemoPool {
    pub fn new(demos: &DemoSet, split: Split, cap: usize, seed: u64) -> Result<Self> {
        let states = prepare_pool(
            demos.states(split).into_iter(),
            &demos.norm_stats,
            cap,
            rng::subseed(seed, "divergence-demo", &[split as u64]),
        )?;
        Ok(DemoPool { split, states })
    }
}

/// Entropic transport cost between the pooled, standardized states of the
/// first `params.episodes` rollouts and the split's demo states.
pub fn state_divergence(
    bundle: &EvalBundle,
    demos: &DemoSet,
    split: Split,
    params: &DivergenceParams,
    seed: u64,
) -> Result<f64> {
    let pool = DemoPool::new(demos, split, params.subsample_cap, seed)?;
    state_divergence_with(bundle, &pool, &demos.norm_stats, params, seed)
}

pub fn state_divergence_with(
    bundle: &EvalBundle,
    pool: &DemoPool,
    stats: &NormStats,
    params: &DivergenceParams,
    seed: u64,
) -> Result<f64> {
    if bundle.rollouts.len() < params.episodes {
        return Err(Error::Invalid(format!(
            "state divergence needs {} rollout episodes, bundle has {}",
            params.episodes,
            bundle.rollouts.len()
        )));
    }
    let agent = prepare_pool(
        bundle.rollouts[..params.episodes]
            .iter()
            .flat_map(|e| e.step_states().iter().map(Vec::as_slice)),
        stats,
        params.subsample_cap,
        rng::subseed(seed, "divergence-agent", &[pool.split as u64]),
    )?;
    let cost = ot::build_cost(&agent, &pool.states)?;
    let res = ot::sinkhorn_cost(&cost, params.sinkhorn)?;
    if !res.converged {
        log::debug!(
            "sinkhorn stopped after {} iterations, marginal error {:.3e}",
            res.iterations,
            res.marginal_error
        );
    }
    Ok(res.transport_cost)
}

pub const RND_TARGET_LAYERS: [usize; 4] = [128, 128, 128, 128];
pub const RND_PREDICTOR_LAYERS: [usize; 2] = [128, 128];
pub const RND_EPOCHS: usize = 100;

/// Frozen random target network plus a predictor trained to imitate it on
/// standardized demo training states.
#[derive(Debug, Clone)]
pub struct RndModel {
    pub target: Mlp,
    pub predictor: Mlp,
    pub norm_stats: NormStats,
    pub train_seed: u64,
    pub epochs: usize,
    pub losses: Vec<f64>,
}

pub fn rnd_train(demos: &DemoSet, seed: u64) -> Result<RndModel> {
    rnd_train_with(demos, seed, RND_EPOCHS)
}

pub fn rnd_train_with(demos: &DemoSet, seed: u64, epochs: usize) -> Result<RndModel> {
    let obs_dim = demos.obs_dim();
    let states = demos.states(Split::Train);
    if states.is_empty() {
        return Err(Error::Invalid("no demo training states for RND".into()));
    }
    let sizes = |hidden: &[usize]| {
        let mut v = vec![obs_dim];
        v.extend_from_slice(hidden);
        v
    };
    let target = Mlp::init(&sizes(&RND_TARGET_LAYERS), rng::subseed(seed, "rnd-target", &[]))?;
    let mut predictor = Mlp::init(&sizes(&RND_PREDICTOR_LAYERS), rng::subseed(seed, "rnd-predictor", &[]))?;
    let inputs = standardized_array(states.iter().copied(), &demos.norm_stats)?;
    let targets = target.forward(inputs.view())?;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let losses = train_mse(&mut predictor, inputs.view(), targets.view(), &cfg)?;
    Ok(RndModel {
        target,
        predictor,
        norm_stats: demos.norm_stats.clone(),
        train_seed: seed,
        epochs,
        losses,
    })
}

fn standardized_array<'a>(states: impl Iterator<Item = &'a [f64]>, stats: &NormStats) -> Result<Array2<f64>> {
    let rows = states
        .map(|s| standardize_state(s, stats))
        .collect::<Result<Vec<_>>>()?;
    rows_to_array(&rows, stats.dim())
}

impl RndModel {
    /// Per-state `exp(-||target(s) - predictor(s)||)` on raw (unstandardized)
    /// states.
    pub fn state_scores<'a>(&self, states: impl Iterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
        let x = standardized_array(states, &self.norm_stats)?;
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(ndarray::Axis(0), 1024) {
            let diff = self.target.forward(chunk)? - self.predictor.forward(chunk)?;
            out.extend(
                diff.rows()
                    .into_iter()
                    .map(|r| (-r.iter().map(|d| d * d).sum::<f64>().sqrt()).exp()),
            );
        }
        Ok(out)
    }

    pub fn mean_score<'a>(&self, states: impl Iterator<Item = &'a [f64]>) -> Result<f64> {
        let s = self.state_scores(states)?;
        if s.is_empty() {
            return Err(Error::Invalid("no states to score".into()));
        }
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}

/// Mean RND score over every step state of the bundle's rollouts.
pub fn rnd_score(model: &RndModel, bundle: &EvalBundle) -> Result<f64> {
    rnd_score_first(model, bundle, bundle.rollouts.len())
}

fn rnd_score_first(model: &RndModel, bundle: &EvalBundle, n: usize) -> Result<f64> {
    model.mean_score(
        bundle.rollouts[..n.min(bundle.rollouts.len())]
            .iter()
            .flat_map(|e| e.step_states().iter().map(Vec::as_slice)),
    )
}

/// Everything needed to evaluate bundles of one environment and one demo
/// split seed.
pub struct EvalContext<'a> {
    pub demos: &'a DemoSet,
    pub meta: &'a EnvMeta,
    pub rnd: Option<&'a RndModel>,
    pub divergence: DivergenceParams,
    /// Rollout episodes required for the return and RND metrics.
    pub episodes: usize,
    pub seed: u64,
    pools: Vec<DemoPool>,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        demos: &'a DemoSet,
        meta: &'a EnvMeta,
        rnd: Option<&'a RndModel>,
        divergence: DivergenceParams,
        episodes: usize,
        seed: u64,
    ) -> Result<Self> {
        let pools = [Split::Train, Split::Valid]
            .into_iter()
            .map(|s| DemoPool::new(demos, s, divergence.subsample_cap, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalContext {
            demos,
            meta,
            rnd,
            divergence,
            episodes,
            seed,
            pools,
        })
    }

    fn pool(&self, split: Split) -> &DemoPool {
        &self.pools[split as usize]
    }

    fn require_episodes(&self, bundle: &EvalBundle, n: usize) -> Result<()> {
        if bundle.rollouts.len() < n {
            return Err(Error::Invalid(format!(
                "need {n} rollout episodes, bundle has {}",
                bundle.rollouts.len()
            )));
        }
        Ok(())
    }

    pub fn metric(&self, bundle: &EvalBundle, id: MetricId) -> Result<f64> {
        let value = self.compute(bundle, id).map_err(|e| e.for_metric(id))?;
        if !value.is_finite() {
            return Err(Error::Invalid(format!("non-finite value {value}")).for_metric(id));
        }
        Ok(value)
    }

    fn compute(&self, bundle: &EvalBundle, id: MetricId) -> Result<f64> {
        match (id.kind, id.split) {
            (MetricKind::EnvReturn, _) => {
                self.require_episodes(bundle, self.episodes)?;
                env_return_first(bundle, self.episodes)
            }
            (MetricKind::ImitationReturn, _) => {
                self.require_episodes(bundle, self.episodes)?;
                imitation_return_first(bundle, self.episodes)
            }
            (MetricKind::ActionMse, Some(split)) => action_mse(bundle, self.demos, split, self.meta),
            (MetricKind::StateDivergence, Some(split)) => {
                let (c, s, k) = bundle.key();
                let seed = rng::subseed(self.seed, "divergence", &[c as u64, s as u64, k as u64]);
                state_divergence_with(bundle, self.pool(split), &self.demos.norm_stats, &self.divergence, seed)
            }
            (MetricKind::RndScore, _) => {
                self.require_episodes(bundle, self.episodes)?;
                let model = self
                    .rnd
                    .ok_or_else(|| Error::Invalid("no RND model supplied".into()))?;
                rnd_score_first(model, bundle, self.episodes)
            }
            _ => Err(Error::Invalid(format!("malformed metric id {id}"))),
        }
    }
}

/// Compute every requested metric for one bundle.
pub fn evaluate_checkpoint(bundle: &EvalBundle, ctx: &EvalContext<'_>, requested: &[MetricId]) -> Result<MetricRow> {
    let mut values = BTreeMap::new();
    for &id in requested {
        values.insert(id, ctx.metric(bundle, id)?);
    }
    Ok(MetricRow {
        config_id: bundle.config_id,
        seed: bundle.seed,
        checkpoint: bundle.checkpoint,
        values,
    })
}
