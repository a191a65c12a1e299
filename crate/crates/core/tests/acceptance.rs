//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ilsel::cli::{self, CommonArgs, ComputeMetricsArgs, EarlyStopping, GenTestbedArgs, RankEvalArgs, SelectArgs, TransferArgs};
use ilsel::data::{normalize_return, EnvMeta, Split};
use ilsel::metrics::Direction;
use ilsel::metrics::{self, MetricId};
use ilsel::nn::Mlp;
use ilsel::ot::{self, SinkhornParams};
use ilsel::protocols::{self, spearman, roc_auc, EnvTable, SimulationParams};
use ilsel::rng;
use ilsel::testbed::{self, PointMassEnv, SweepParams};
use ndarray::Array2;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: u32, name: &str, f: impl FnOnce() -> Result<Outcome, String>) -> bool {
    let start = Instant::now();
    let o = f();
    let secs = start.elapsed().as_secs_f64();
    report_timed(id, name, secs, o)
}

fn report_timed(id: u32, name: &str, secs: f64, o: Result<Outcome, String>) -> bool {
    let (pass, detail) = match o {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {id} ({name}): {} [{secs:.1}s] {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn random_points(r: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

fn ot_correctness() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut below = 0;
    let mut worst_gap: f64 = 0.0;
    for i in 0..200u64 {
        let mut r = rng::substream(0, "acceptance-ot", &[i]);
        let n = r.gen_range(2..=32);
        let dim = r.gen_range(1..=6);
        let xs = random_points(&mut r, n, dim);
        let ys = random_points(&mut r, n, dim);
        let exact = ot::exact_w1(&xs, &ys).map_err(|e| e.to_string())?;
        let cost = ot::build_cost(&xs, &ys).map_err(|e| e.to_string())?;
        let params = SinkhornParams {
            epsilon: 0.01 * cost.mean(),
            ..SinkhornParams::default()
        };
        let s = ot::sinkhorn_cost(&cost, params).map_err(|e| e.to_string())?.transport_cost;
        if s < exact - 1e-6 {
            below += 1;
        }
        worst_gap = worst_gap.max((s - exact) / exact);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        below == 0 && worst_gap <= 0.05 && secs < 30.0,
        format!("below exact: {below}/200, max relative gap {worst_gap:.4}, {secs:.1}s"),
    ))
}

/// Backprop against central differences of the loss.
fn max_grad_error(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let h = 1e-5;
    let (_, g) = net.mse_grad(x.view(), y.view()).unwrap();
    let loss = |n: &Mlp| n.mse_grad(x.view(), y.view()).unwrap().0;
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-7);
    let mut worst: f64 = 0.0;
    for l in 0..net.weights().len() {
        for idx in 0..net.weights()[l].len() {
            let mut p = net.clone();
            let mut m = net.clone();
            let cols = net.weights()[l].ncols();
            p.weights_mut()[l][[idx / cols, idx % cols]] += h;
            m.weights_mut()[l][[idx / cols, idx % cols]] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            worst = worst.max(rel(fd, g.weights[l][[idx / cols, idx % cols]]));
        }
        for b in 0..net.biases()[l].len() {
            let mut p = net.clone();
            let mut m = net.clone();
            p.biases_mut()[l][b] += h;
            m.biases_mut()[l][b] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            worst = worst.max(rel(fd, g.biases[l][b]));
        }
    }
    worst
}

fn gradient_check() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut r = rng::substream(0, "acceptance-grad", &[i]);
        let depth = r.gen_range(1..=3);
        let mut sizes = vec![r.gen_range(1..=5)];
        sizes.extend((0..depth).map(|_| r.gen_range(1..=8)));
        let mut net = Mlp::init(&sizes, i).map_err(|e| e.to_string())?;
        // nonzero biases keep pre-activations off the ReLU kink
        for b in net.biases_mut() {
            b.mapv_inplace(|_| r.gen_range(-0.5..0.5));
        }
        let rows = r.gen_range(1..=6);
        let x = Array2::from_shape_fn((rows, sizes[0]), |_| r.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((rows, *sizes.last().unwrap()), |_| r.gen_range(-1.0..1.0));
        worst = worst.max(max_grad_error(&net, &x, &y));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} over 20 networks"),
    ))
}

fn rnd_sanity() -> Result<Outcome, String> {
    let start = Instant::now();
    let env = PointMassEnv::default();
    let demos = testbed::gen_demos(&env, testbed::DEFAULT_DEMOS, 0).map_err(|e| e.to_string())?;
    let sweep = SweepParams::default();
    let mut wins = 0;
    for seed in 0..20u32 {
        let split = sweep.demo_split(&demos, seed).map_err(|e| e.to_string())?;
        let model = metrics::rnd_train(&split, seed as u64).map_err(|e| e.to_string())?;
        let held_out = split.states(Split::Valid);
        let std = &split.norm_stats.std;
        let shifted: Vec<Vec<f64>> = held_out
            .iter()
            .map(|s| s.iter().zip(std).map(|(x, sd)| x + 10.0 * sd).collect())
            .collect();
        let inside = model.mean_score(held_out.iter().copied()).map_err(|e| e.to_string())?;
        let outside = model
            .mean_score(shifted.iter().map(Vec::as_slice))
            .map_err(|e| e.to_string())?;
        if inside > outside {
            wins += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        wins >= 19 && secs < 120.0,
        format!("held-out beats shifted in {wins}/20 seeds"),
    ))
}

fn hand_examples() -> Result<(bool, String), String> {
    let sp = spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0], Direction::HigherBetter).map_err(|e| e.to_string())?;
    let auc = roc_auc(&[1.0, 3.0, 2.0, 4.0], &[true, true, false, false], Direction::LowerBetter)
        .map_err(|e| e.to_string())?;
    Ok((
        (sp + 0.5).abs() <= 1e-12 && (auc - 0.75).abs() <= 1e-12,
        format!("spearman {sp}, roc_auc {auc}"),
    ))
}

fn common(out: &Path, workers: Option<usize>) -> CommonArgs {
    CommonArgs {
        seed: 0,
        workers,
        out: out.to_path_buf(),
    }
}

struct Scale {
    configs: usize,
    seeds: usize,
    checkpoints: usize,
    rollouts: usize,
}

const DEFAULT_SCALE: Scale = Scale {
    configs: testbed::DEFAULT_CONFIGS,
    seeds: testbed::DEFAULT_SEEDS,
    checkpoints: testbed::DEFAULT_CHECKPOINTS,
    rollouts: testbed::DEFAULT_ROLLOUTS,
};

struct PipelineRun {
    table: PathBuf,
    meta: PathBuf,
    outputs: Vec<PathBuf>,
    stages: Vec<(&'static str, Duration)>,
}

/// gen-testbed, compute-metrics, select, rank-eval for one environment,
/// then transfer across all of them.
fn pipeline(root: &Path, envs: &[(&str, f64)], scale: &Scale, workers: Option<usize>) -> Result<Vec<PipelineRun>, String> {
    let err = |e: ilsel::error::Error| e.to_string();
    let mut runs = Vec::new();
    for &(env_id, gain) in envs {
        let mut stages = Vec::new();
        let tb = root.join(env_id).join("testbed");
        let t = Instant::now();
        cli::cmd_gen_testbed(&GenTestbedArgs {
            common: common(&tb, workers),
            env_id: env_id.into(),
            actuator_gain: gain,
            configs: scale.configs,
            seeds: scale.seeds,
            checkpoints: scale.checkpoints,
            rollouts: scale.rollouts,
            demos: testbed::DEFAULT_DEMOS,
            n_train: 11,
            n_valid: 5,
        })
        .map_err(err)?;
        stages.push(("gen-testbed", t.elapsed()));

        let mdir = root.join(env_id).join("metrics");
        let t = Instant::now();
        cli::cmd_compute_metrics(&ComputeMetricsArgs {
            common: common(&mdir, workers),
            demos: tb.join(cli::DEMOS_FILE),
            meta: tb.join(cli::META_FILE),
            bundles: vec![tb.join(cli::BUNDLES_DIR)],
            metrics: vec![],
            n_train: 11,
            n_valid: 5,
            episodes: None,
            epsilon: ot::DEFAULT_EPSILON,
            subsample_cap: ot::DEFAULT_SUBSAMPLE_CAP,
            divergence_episodes: 10,
            rnd_epochs: metrics::RND_EPOCHS,
        })
        .map_err(err)?;
        stages.push(("compute-metrics", t.elapsed()));
        let table = mdir.join(cli::METRICS_FILE);
        let meta = tb.join(cli::META_FILE);

        let sdir = root.join(env_id).join("select");
        let t = Instant::now();
        cli::cmd_select(&SelectArgs {
            common: common(&sdir, workers),
            table: table.clone(),
            meta: meta.clone(),
            metrics: vec![],
            early_stopping: EarlyStopping::Both,
            sample_size: protocols::DEFAULT_SAMPLE_SIZE.min(scale.configs),
            repeats: protocols::DEFAULT_REPEATS,
        })
        .map_err(err)?;
        stages.push(("select", t.elapsed()));

        let rdir = root.join(env_id).join("rank");
        let t = Instant::now();
        cli::cmd_rank_eval(&RankEvalArgs {
            common: common(&rdir, workers),
            table: table.clone(),
            meta: meta.clone(),
            threshold: protocols::ranking::DEFAULT_THRESHOLD,
            bins: protocols::ranking::DEFAULT_BINS,
        })
        .map_err(err)?;
        stages.push(("rank-eval", t.elapsed()));

        let outputs = vec![
            tb.join(cli::MANIFEST),
            table.clone(),
            sdir.join(cli::SELECTION_REPORT),
            sdir.join(cli::SIMULATIONS_LOG),
            sdir.join(cli::SELECTION_PLOT),
            rdir.join(cli::RANKING_SCORES),
            rdir.join(cli::RANKING_BY_SEED),
        ];
        runs.push(PipelineRun {
            table,
            meta,
            outputs,
            stages,
        });
    }
    let tdir = root.join("transfer");
    let t = Instant::now();
    cli::cmd_transfer(&TransferArgs {
        common: common(&tdir, workers),
        table: runs.iter().map(|r| r.table.clone()).collect(),
        meta: runs.iter().map(|r| r.meta.clone()).collect(),
        early_stop_metric: "state_divergence/train".into(),
    })
    .map_err(err)?;
    if let Some(last) = runs.last_mut() {
        last.stages.push(("transfer", t.elapsed()));
        last.outputs.push(tdir.join(cli::TRANSFER_MATRIX));
        last.outputs.push(tdir.join(cli::TRANSFER_CURVE));
    }
    Ok(runs)
}

fn load_env(run: &PipelineRun) -> Result<EnvTable, String> {
    let table = cli::read_table(&run.table).map_err(|e| e.to_string())?;
    let meta: EnvMeta = ilsel::io::read_meta(&run.meta).map_err(|e| e.to_string())?;
    EnvTable::new(table, meta).map_err(|e| e.to_string())
}

fn default_params(early_stopping: bool) -> SimulationParams {
    SimulationParams {
        early_stopping,
        ..SimulationParams::default()
    }
}

fn selection_dominance(env: &EnvTable) -> Result<Outcome, String> {
    let mut violations = 0;
    let mut compared = 0;
    for es in [false, true] {
        let p = default_params(es);
        let oracle = protocols::simulate(&env.table, MetricId::ENV_RETURN, &env.meta, &p).map_err(|e| e.to_string())?;
        for m in MetricId::proxies().into_iter().filter(|m| env.table.has_metric(*m)) {
            let sims = protocols::simulate(&env.table, m, &env.meta, &p).map_err(|e| e.to_string())?;
            for (o, s) in oracle.iter().zip(&sims) {
                assert_eq!((o.seed, o.repeat), (s.seed, s.repeat));
                compared += 1;
                if o.normalized_return < s.normalized_return {
                    violations += 1;
                }
            }
        }
    }
    Ok(outcome(
        violations == 0 && compared > 0,
        format!("{violations} violations over {compared} simulation pairs"),
    ))
}

fn early_stopping_monotone(env: &EnvTable) -> Result<Outcome, String> {
    let off = protocols::simulate(&env.table, MetricId::ENV_RETURN, &env.meta, &default_params(false))
        .map_err(|e| e.to_string())?;
    let on = protocols::simulate(&env.table, MetricId::ENV_RETURN, &env.meta, &default_params(true))
        .map_err(|e| e.to_string())?;
    let violations = off
        .iter()
        .zip(&on)
        .filter(|(a, b)| b.normalized_return < a.normalized_return)
        .count();
    Ok(outcome(
        violations == 0 && on.len() == 100,
        format!("{violations} decreases over {} simulations", on.len()),
    ))
}

fn fig7_analogue(run: &PipelineRun, root: &Path) -> Result<Outcome, String> {
    let start = Instant::now();
    let out = cli::cmd_rank_eval(&RankEvalArgs {
        common: common(&root.join("rank-c6"), None),
        table: run.table.clone(),
        meta: run.meta.clone(),
        threshold: 0.75,
        bins: protocols::ranking::DEFAULT_BINS,
    })
    .map_err(|e| e.to_string())?;
    let sd = MetricId::state_divergence(Split::Train);
    let mut holds = 0;
    let mut parts = Vec::new();
    for (seed, scores) in &out.by_seed {
        let get = |m: MetricId| scores.iter().find(|s| s.metric == m);
        let (Some(d), Some(i)) = (get(sd), get(MetricId::IMITATION_RETURN)) else {
            return Err("rank-eval lacks state_divergence or imitation_return".into());
        };
        let ok = d.spearman > i.spearman && d.roc_auc > 0.8;
        holds += ok as usize;
        parts.push(format!(
            "seed {seed}: sd {:.3}/{:.3} vs imitation {:.3} (n {})",
            d.spearman, d.roc_auc, i.spearman, d.n_policies
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        holds >= 4 && out.by_seed.len() == 5 && secs < 300.0,
        format!("holds on {holds}/{} seeds; {}", out.by_seed.len(), parts.join("; ")),
    ))
}

fn protocol_arithmetic(env: &EnvTable) -> Result<Outcome, String> {
    let t = &env.table;
    let mut exact = true;
    for &seed in t.seeds() {
        let slice = t.restrict_seeds(&[seed]).map_err(|e| e.to_string())?;
        for es in [false, true] {
            let p = SimulationParams {
                sample_size: slice.configs().len(),
                early_stopping: es,
                ..SimulationParams::default()
            };
            let r = protocols::simulate_practitioners(&slice, MetricId::ENV_RETURN, &env.meta, &p)
                .map_err(|e| e.to_string())?;
            let ks: Vec<u32> = if es {
                (0..slice.n_checkpoints() as u32).collect()
            } else {
                vec![slice.final_checkpoint()]
            };
            let mut best = f64::NEG_INFINITY;
            for &c in slice.configs() {
                for &k in &ks {
                    let v = slice.get(MetricId::ENV_RETURN, c, seed, k).map_err(|e| e.to_string())?;
                    best = best.max(normalize_return(v, &env.meta));
                }
            }
            exact &= r.mean == best && r.p25 == best && r.p75 == best;
        }
    }
    let (hand, detail) = hand_examples()?;
    Ok(outcome(
        exact && hand,
        format!("full-sample selection exact on every seed slice: {exact}; {detail}"),
    ))
}

/// Return spread and monotone mean training curve of the default sweep.
fn testbed_invariants(env: &EnvTable) -> Result<Outcome, String> {
    let t = &env.table;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut curve = vec![0.0; t.n_checkpoints()];
    for &c in t.configs() {
        for &s in t.seeds() {
            for (k, sum) in curve.iter_mut().enumerate() {
                let v = t.get(MetricId::ENV_RETURN, c, s, k as u32).map_err(|e| e.to_string())?;
                let n = normalize_return(v, &env.meta);
                lo = lo.min(n);
                hi = hi.max(n);
                *sum += n;
            }
        }
    }
    let inversions = curve.windows(2).filter(|w| w[1] < w[0]).count();
    Ok(outcome(
        lo < 0.25 && hi > 0.9 && inversions <= 1,
        format!("normalized returns span [{lo:.3}, {hi:.3}], {inversions} inversions in the mean training curve"),
    ))
}

fn determinism(root: &Path) -> Result<Outcome, String> {
    let scale = Scale {
        configs: 8,
        seeds: 2,
        checkpoints: 4,
        rollouts: 10,
    };
    let envs = [("pointmass", 1.0), ("pointmass-strong", 2.0)];
    let a = pipeline(&root.join("a"), &envs, &scale, Some(1))?;
    let b = pipeline(&root.join("b"), &envs, &scale, None)?;
    let mut files = 0;
    let mut differing = Vec::new();
    for (ra, rb) in a.iter().zip(&b) {
        for (fa, fb) in ra.outputs.iter().zip(&rb.outputs) {
            files += 1;
            let x = fs::read(fa).map_err(|e| format!("{}: {e}", fa.display()))?;
            let y = fs::read(fb).map_err(|e| format!("{}: {e}", fb.display()))?;
            if x != y {
                differing.push(fa.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    Ok(outcome(
        differing.is_empty(),
        format!("{files} output files compared, differing: {differing:?}"),
    ))
}

fn main() -> ExitCode {
    let mut ok = true;

    ok &= report(1, "OT correctness", ot_correctness);
    ok &= report(2, "gradient check", gradient_check);
    ok &= report(3, "RND sanity", rnd_sanity);

    let dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let full = pipeline(&dir.path().join("full"), &[("pointmass", 1.0)], &DEFAULT_SCALE, None);
    let elapsed = t.elapsed();
    let full = full.map(|mut runs| runs.remove(0));
    let c9 = full.as_ref().map_err(Clone::clone).map(|run| {
        let stages: Vec<String> = run
            .stages
            .iter()
            .map(|(s, d)| format!("{s} {:.0}s", d.as_secs_f64()))
            .collect();
        outcome(
            elapsed < Duration::from_secs(30 * 60),
            format!(
                "default pipeline in {:.0}s on {} worker(s): {}",
                elapsed.as_secs_f64(),
                rayon::current_num_threads(),
                stages.join(", ")
            ),
        )
    });
    let env = full.as_ref().map_err(Clone::clone).and_then(load_env);

    ok &= report(4, "selection dominance", || env.as_ref().map_err(Clone::clone).and_then(selection_dominance));
    ok &= report(5, "early-stopping monotonicity", || env.as_ref().map_err(Clone::clone).and_then(early_stopping_monotone));
    ok &= report(6, "ranking on rebalanced policies", || {
        full.as_ref().map_err(Clone::clone).and_then(|r| fig7_analogue(r, dir.path()))
    });
    ok &= report(7, "protocol arithmetic", || env.as_ref().map_err(Clone::clone).and_then(protocol_arithmetic));
    ok &= report(8, "determinism", || determinism(&dir.path().join("determinism")));
    ok &= report_timed(9, "scale", elapsed.as_secs_f64(), c9);
    let start = Instant::now();
    let inv = env.as_ref().map_err(Clone::clone).and_then(testbed_invariants);
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match inv {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("testbed invariants: {} [{secs:.1}s] {detail}", if pass { "PASS" } else { "FAIL" });
    ok &= pass;

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
