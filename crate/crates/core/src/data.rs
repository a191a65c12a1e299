//! Trajectory data model: episodes, environment metadata, demonstration
//! splits and evaluation bundles.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Coordinates whose demo-set standard deviation falls below this use a
/// divisor of 1.
pub const MIN_STD: f64 = 1e-8;

/// One trajectory. `states[t]` is observed before `actions[t]`; an optional
/// trailing terminal state (`states.len() == actions.len() + 1`) is kept for
/// round-tripping but ignored by every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    #[serde(default)]
    pub episode_id: u64,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(rename = "rewards", default)]
    pub env_rewards: Option<Vec<f64>>,
}

impl Episode {
    pub fn new(
        episode_id: u64,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        env_rewards: Option<Vec<f64>>,
    ) -> Result<Self> {
        let ep = Episode {
            episode_id,
            states,
            actions,
            env_rewards,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        if t == 0 {
            return Err(Error::Invalid(format!(
                "episode {} has no steps",
                self.episode_id
            )));
        }
        if self.states.len() != t && self.states.len() != t + 1 {
            return Err(Error::Invalid(format!(
                "episode {}: {} states for {} actions",
                self.episode_id,
                self.states.len(),
                t
            )));
        }
        uniform_dim(&self.states, "state")?;
        uniform_dim(&self.actions, "action")?;
        if let Some(r) = &self.env_rewards {
            if r.len() != t {
                return Err(Error::Invalid(format!(
                    "episode {}: {} rewards for {} actions",
                    self.episode_id,
                    r.len(),
                    t
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The T states paired with actions (terminal state excluded).
    pub fn step_states(&self) -> &[Vec<f64>] {
        &self.states[..self.actions.len()]
    }

    pub fn obs_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn total_reward(&self) -> Option<f64> {
        self.env_rewards.as_ref().map(|r| r.iter().sum())
    }
}

fn uniform_dim(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::Invalid(format!("empty {what} vector")));
    }
    for r in rows {
        if r.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
    }
    Ok(d)
}

/// Environment description plus the two return-normalization anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub env_id: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub random_return: f64,
    pub demo_return: f64,
}

impl EnvMeta {
    pub fn new(
        env_id: impl Into<String>,
        obs_dim: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        random_return: f64,
        demo_return: f64,
    ) -> Result<Self> {
        let meta = EnvMeta {
            env_id: env_id.into(),
            obs_dim,
            action_dim: action_low.len(),
            action_low,
            action_high,
            random_return,
            demo_return,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.action_dim == 0 {
            return Err(Error::Invalid("dimensions must be positive".into()));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::Invalid(format!(
                "action bounds must have length action_dim = {}",
                self.action_dim
            )));
        }
        if let Some(i) = (0..self.action_dim).find(|&i| {
            !(self.action_low[i] < self.action_high[i])
                || !self.action_low[i].is_finite()
                || !self.action_high[i].is_finite()
        }) {
            return Err(Error::Invalid(format!(
                "action bound {i}: low {} must be < high {}",
                self.action_low[i], self.action_high[i]
            )));
        }
        if !self.random_return.is_finite() || !self.demo_return.is_finite() {
            return Err(Error::Invalid("normalization anchors must be finite".into()));
        }
        if self.demo_return == self.random_return {
            return Err(Error::Invalid(
                "demo_return equals random_return; normalization undefined".into(),
            ));
        }
        Ok(())
    }
}

/// Affine map of `action` onto `[-1, 1]^d`, clamping out-of-range
/// coordinates first. Returns the rescaled action and the number of clamped
/// coordinates.
pub fn rescale_action_counting(action: &[f64], meta: &EnvMeta) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let out = action
        .iter()
        .zip(meta.action_low.iter().zip(&meta.action_high))
        .map(|(&a, (&lo, &hi))| {
            let c = a.clamp(lo, hi);
            if c != a {
                clamped += 1;
            }
            2.0 * (c - lo) / (hi - lo) - 1.0
        })
        .collect();
    (out, clamped)
}

pub fn rescale_action(action: &[f64], meta: &EnvMeta) -> Vec<f64> {
    let (out, clamped) = rescale_action_counting(action, meta);
    if clamped > 0 {
        log::warn!("{clamped} action coordinate(s) clamped to bounds");
    }
    out
}

/// Inverse of [`rescale_action`] on `[-1, 1]^d`.
pub fn unscale_action(scaled: &[f64], meta: &EnvMeta) -> Vec<f64> {
    scaled
        .iter()
        .zip(meta.action_low.iter().zip(&meta.action_high))
        .map(|(&s, (&lo, &hi))| lo + (s + 1.0) * 0.5 * (hi - lo))
        .collect()
}

/// 0 at the random-policy return, 1 at the average demonstration return.
pub fn normalize_return(ret: f64, meta: &EnvMeta) -> f64 {
    (ret - meta.random_return) / (meta.demo_return - meta.random_return)
}

/// Per-coordinate mean and (degeneracy-guarded) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Sample (n - 1) standard deviation; coordinates below [`MIN_STD`] get 1.
    pub fn from_states<'a>(states: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        // Welford
        for s in states {
            if n == 0 {
                mean = vec![0.0; s.len()];
                m2 = vec![0.0; s.len()];
            } else if s.len() != mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: mean.len(),
                    got: s.len(),
                });
            }
            n += 1;
            for (i, &x) in s.iter().enumerate() {
                let d = x - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (x - mean[i]);
            }
        }
        if n == 0 {
            return Err(Error::Invalid("no states to compute statistics".into()));
        }
        let std = m2
            .iter()
            .map(|&v| {
                let s = if n > 1 { (v / (n - 1) as f64).sqrt() } else { 0.0 };
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.std.len()
    }
}

/// Divide each coordinate by the demo-set standard deviation. No centering.
pub fn standardize_states(states: &[Vec<f64>], stats: &NormStats) -> Result<Vec<Vec<f64>>> {
    states
        .iter()
        .map(|s| standardize_state(s, stats))
        .collect()
}

pub fn standardize_state(state: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    if state.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: state.len(),
        });
    }
    Ok(state.iter().zip(&stats.std).map(|(x, s)| x / s).collect())
}

/// Demonstrations split into train and validation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub train: Vec<Episode>,
    pub valid: Vec<Episode>,
    pub split_seed: u64,
    pub norm_stats: NormStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

impl DemoSet {
    pub fn episodes(&self, split: Split) -> &[Episode] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
        }
    }

    /// Concatenated step states of a split, in episode order. Probe actions
    /// are aligned with this ordering.
    pub fn states(&self, split: Split) -> Vec<&[f64]> {
        self.episodes(split)
            .iter()
            .flat_map(|e| e.step_states().iter().map(Vec::as_slice))
            .collect()
    }

    /// Concatenated expert actions of a split, aligned with [`DemoSet::states`].
    pub fn actions(&self, split: Split) -> Vec<&[f64]> {
        self.episodes(split)
            .iter()
            .flat_map(|e| e.actions.iter().map(Vec::as_slice))
            .collect()
    }

    pub fn n_states(&self, split: Split) -> usize {
        self.episodes(split).iter().map(Episode::len).sum()
    }

    pub fn obs_dim(&self) -> usize {
        self.norm_stats.dim()
    }
}

/// Seeded shuffle, first `n_train` episodes to train and the next `n_valid`
/// to validation. Normalization statistics cover both parts.
pub fn split_demos(episodes: &[Episode], n_train: usize, n_valid: usize, seed: u64) -> Result<DemoSet> {
    if n_train == 0 || n_valid == 0 {
        return Err(Error::Invalid("n_train and n_valid must be >= 1".into()));
    }
    if n_train + n_valid > episodes.len() {
        return Err(Error::InsufficientEpisodes {
            required: n_train + n_valid,
            available: episodes.len(),
        });
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut rng::substream(seed, "split", &[]));
    let train: Vec<Episode> = order[..n_train].iter().map(|&i| episodes[i].clone()).collect();
    let valid: Vec<Episode> = order[n_train..n_train + n_valid]
        .iter()
        .map(|&i| episodes[i].clone())
        .collect();
    let norm_stats = NormStats::from_states(
        train
            .iter()
            .chain(&valid)
            .flat_map(|e| e.step_states().iter().map(Vec::as_slice)),
    )?;
    Ok(DemoSet {
        train,
        valid,
        split_seed: seed,
        norm_stats,
    })
}

/// One evaluation of a (config, seed, checkpoint) agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub config_id: u32,
    pub seed: u32,
    pub checkpoint: u32,
    pub rollouts: Vec<Episode>,
    pub probe_actions_train: Vec<Vec<f64>>,
    pub probe_actions_valid: Vec<Vec<f64>>,
    #[serde(default)]
    pub imitation_rewards: Option<Vec<Vec<f64>>>,
}

impl EvalBundle {
    pub fn key(&self) -> (u32, u32, u32) {
        (self.config_id, self.seed, self.checkpoint)
    }

    pub fn probe_actions(&self, split: Split) -> &[Vec<f64>] {
        match split {
            Split::Train => &self.probe_actions_train,
            Split::Valid => &self.probe_actions_valid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for ep in &self.rollouts {
            ep.validate()?;
        }
        if let Some(imit) = &self.imitation_rewards {
            if imit.len() != self.rollouts.len() {
                return Err(Error::Invalid(format!(
                    "{} imitation reward streams for {} rollouts",
                    imit.len(),
                    self.rollouts.len()
                )));
            }
            for (r, ep) in imit.iter().zip(&self.rollouts) {
                if r.len() != ep.len() {
                    return Err(Error::Invalid(format!(
                        "imitation reward stream of length {} for episode of length {}",
                        r.len(),
                        ep.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ep(id: u64, xs: &[f64]) -> Episode {
        Episode::new(
            id,
            xs.iter().map(|&x| vec![x, 2.0 * x]).collect(),
            xs.iter().map(|_| vec![0.0]).collect(),
            Some(xs.iter().map(|_| 1.0).collect()),
        )
        .unwrap()
    }

    fn meta(low: f64, high: f64) -> EnvMeta {
        EnvMeta::new("t", 1, vec![low], vec![high], 10.0, 20.0).unwrap()
    }

    #[test]
    fn episode_validation() {
        assert!(Episode::new(0, vec![], vec![], None).is_err());
        assert!(Episode::new(0, vec![vec![0.0]; 3], vec![vec![0.0]; 1], None).is_err());
        assert!(Episode::new(0, vec![vec![0.0]; 2], vec![vec![0.0]; 1], None).is_ok());
        assert!(Episode::new(0, vec![vec![0.0]; 1], vec![vec![0.0]; 1], Some(vec![])).is_err());
        assert!(Episode::new(0, vec![vec![0.0], vec![0.0, 1.0]], vec![vec![0.0]; 2], None).is_err());
    }

    #[test]
    fn split_eleven_train_five_valid() {
        let eps: Vec<_> = (0..16).map(|i| ep(i, &[i as f64, 1.0])).collect();
        let d = split_demos(&eps, 11, 5, 0).unwrap();
        assert_eq!((d.train.len(), d.valid.len()), (11, 5));
    }

    #[test]
    fn split_two_episodes_partition() {
        let eps = vec![ep(0, &[1.0]), ep(1, &[2.0])];
        for seed in 0..5 {
            let d = split_demos(&eps, 1, 1, seed).unwrap();
            let mut ids = vec![d.train[0].episode_id, d.valid[0].episode_id];
            ids.sort();
            assert_eq!(ids, vec![0, 1]);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let eps: Vec<_> = (0..16).map(|i| ep(i, &[i as f64])).collect();
        assert_eq!(split_demos(&eps, 11, 5, 3).unwrap(), split_demos(&eps, 11, 5, 3).unwrap());
    }

    #[test]
    fn split_insufficient() {
        let eps: Vec<_> = (0..3).map(|i| ep(i, &[i as f64])).collect();
        let err = split_demos(&eps, 2, 2, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientEpisodes {
                required: 4,
                available: 3
            }
        ));
        assert!(err.to_string().contains('4') && err.to_string().contains('3'));
    }

    #[test]
    fn standardize_examples() {
        let stats = NormStats {
            mean: vec![0.0],
            std: vec![2.0],
        };
        assert_eq!(standardize_states(&[vec![4.0]], &stats).unwrap(), vec![vec![2.0]]);
        let stats = NormStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 0.5],
        };
        assert_eq!(standardize_state(&[1.0, 1.0], &stats).unwrap(), vec![1.0, 2.0]);
        assert!(standardize_state(&[1.0], &stats).is_err());
    }

    #[test]
    fn standardized_demo_states_have_unit_std() {
        let eps: Vec<_> = (0..16)
            .map(|i| ep(i, &[i as f64 * 0.3, (i * i) as f64 * 0.01 - 1.0, 5.0]))
            .collect();
        let d = split_demos(&eps, 11, 5, 9).unwrap();
        let all: Vec<Vec<f64>> = d
            .states(Split::Train)
            .into_iter()
            .chain(d.states(Split::Valid))
            .map(<[f64]>::to_vec)
            .collect();
        let z = standardize_states(&all, &d.norm_stats).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = z.iter().map(|s| s[c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((v.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_coordinate_uses_unit_divisor() {
        let s = NormStats::from_states([[3.0, 1.0].as_slice(), [3.0, 2.0].as_slice()]).unwrap();
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_action(&[1.0], &meta(-2.0, 2.0)), vec![0.5]);
        assert_eq!(rescale_action(&[-2.0], &meta(-2.0, 2.0)), vec![-1.0]);
        assert_eq!(rescale_action(&[3.0], &meta(0.0, 4.0)), vec![0.5]);
        let (r, n) = rescale_action_counting(&[7.0], &meta(0.0, 4.0));
        assert_eq!((r, n), (vec![1.0], 1));
    }

    #[test]
    fn normalize_examples() {
        let m = meta(-1.0, 1.0);
        assert_eq!(normalize_return(10.0, &m), 0.0);
        assert_eq!(normalize_return(20.0, &m), 1.0);
        assert_eq!(normalize_return(15.0, &m), 0.5);
    }

    #[test]
    fn meta_rejects_bad_values() {
        assert!(EnvMeta::new("e", 1, vec![0.0], vec![1.0], 5.0, 5.0).is_err());
        assert!(EnvMeta::new("e", 1, vec![1.0], vec![1.0], 0.0, 5.0).is_err());
        assert!(EnvMeta::new("e", 1, vec![0.0, 0.0], vec![1.0], 0.0, 5.0).is_err());
    }

    proptest! {
        #[test]
        fn rescale_roundtrip(lo in -100.0f64..100.0, w in 0.01f64..50.0, t in 0.0f64..=1.0) {
            let m = meta(lo, lo + w);
            let a = lo + t * w;
            let back = unscale_action(&rescale_action(&[a], &m), &m)[0];
            prop_assert!((back - a).abs() < 1e-12);
        }

        #[test]
        fn normalize_strictly_increasing(r in -1e6f64..1e6, d in 1e-3f64..1e3) {
            let m = meta(-1.0, 1.0);
            prop_assert!(normalize_return(r + d, &m) > normalize_return(r, &m));
        }

        #[test]
        fn split_is_a_partition(n in 2usize..30, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let eps: Vec<_> = (0..n as u64).map(|i| ep(i, &[i as f64])).collect();
            let n_train = 1 + ((n - 2) as f64 * frac) as usize;
            let n_valid = n - n_train;
            let d = split_demos(&eps, n_train, n_valid, seed).unwrap();
            let mut ids: Vec<u64> = d.train.iter().chain(&d.valid).map(|e| e.episode_id).collect();
            ids.sort();
            prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        }
    }
}
