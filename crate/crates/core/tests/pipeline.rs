use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ilsel::cli::{self, CommonArgs, ComputeMetricsArgs, EarlyStopping, GenTestbedArgs, RankEvalArgs, SelectArgs, TransferArgs};
use ilsel::data::normalize_return;
use ilsel::error::Error;
use ilsel::metrics::MetricId;

fn common(out: &Path) -> CommonArgs {
    CommonArgs {
        seed: 7,
        workers: Some(1),
        out: out.to_path_buf(),
    }
}

fn gen_args(out: &Path, env_id: &str, gain: f64, configs: usize, seeds: usize, checkpoints: usize) -> GenTestbedArgs {
    GenTestbedArgs {
        common: common(out),
        env_id: env_id.into(),
        actuator_gain: gain,
        configs,
        seeds,
        checkpoints,
        rollouts: 10,
        demos: 16,
        n_train: 11,
        n_valid: 5,
    }
}

fn metrics_args(testbed: &Path, out: &Path, metrics: Vec<MetricId>) -> ComputeMetricsArgs {
    ComputeMetricsArgs {
        common: common(out),
        demos: testbed.join(cli::DEMOS_FILE),
        meta: testbed.join(cli::META_FILE),
        bundles: vec![testbed.join(cli::BUNDLES_DIR)],
        metrics,
        n_train: 11,
        n_valid: 5,
        episodes: None,
        epsilon: 5.0,
        subsample_cap: 2048,
        divergence_episodes: 10,
        rnd_epochs: 100,
    }
}

fn cheap_metrics() -> Vec<MetricId> {
    vec![MetricId::ENV_RETURN, "state_divergence/train".parse().unwrap()]
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn gen_testbed_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let m1 = cli::cmd_gen_testbed(&gen_args(&a, "pointmass", 1.0, 4, 1, 3)).unwrap();
    assert_eq!(m1.bundles.len(), 12);
    let m2 = cli::cmd_gen_testbed(&gen_args(&b, "pointmass", 1.0, 4, 1, 3)).unwrap();
    assert_eq!(m1.files, m2.files);
    assert_eq!(read(a.join(cli::MANIFEST)), read(b.join(cli::MANIFEST)));
    assert!(read(a.join(cli::RUN_CONFIG)).contains("\"gen-testbed\""));
    for f in &m1.files {
        assert_eq!(ilsel::io::sha256_file(a.join(&f.path)).unwrap(), f.sha256);
    }
}

#[test]
fn compute_metrics_full_set_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    cli::cmd_gen_testbed(&gen_args(&tb, "pointmass", 1.0, 3, 1, 2)).unwrap();
    let out1 = dir.path().join("m1");
    let t = cli::cmd_compute_metrics(&metrics_args(&tb, &out1, vec![])).unwrap();
    assert_eq!(t.metrics(), MetricId::all().as_slice());
    let csv = read(out1.join(cli::METRICS_FILE));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 7);
    let out2 = dir.path().join("m2");
    let mut args = metrics_args(&tb, &out2, vec![]);
    args.common.workers = Some(2);
    cli::cmd_compute_metrics(&args).unwrap();
    assert_eq!(csv, read(out2.join(cli::METRICS_FILE)));
}

fn lines_of(p: &Path) -> Vec<String> {
    read(p).lines().map(str::to_string).collect()
}

#[test]
fn missing_bundle_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    cli::cmd_gen_testbed(&gen_args(&tb, "pointmass", 1.0, 2, 1, 3)).unwrap();
    let shard = tb.join("bundles/config_0001.jsonl");
    let mut lines = lines_of(&shard);
    lines.remove(1);
    fs::write(&shard, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("m");
    let err = cli::cmd_compute_metrics(&metrics_args(&tb, &out, cheap_metrics())).unwrap_err();
    assert!(matches!(err, Error::IncompleteGrid(ref keys) if keys == &vec![(1, 0, 1)]), "{err}");
    assert!(err.to_string().contains("config=1 seed=0 checkpoint=1"), "{err}");
}

#[test]
fn schema_errors_fail_loudly_without_clobbering_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    cli::cmd_gen_testbed(&gen_args(&tb, "pointmass", 1.0, 2, 1, 2)).unwrap();
    let out = dir.path().join("m");
    cli::cmd_compute_metrics(&metrics_args(&tb, &out, cheap_metrics())).unwrap();
    let good = read(out.join(cli::METRICS_FILE));

    let shard = tb.join("bundles/config_0000.jsonl");
    let mut lines = lines_of(&shard);
    lines[1] = lines[1].replacen("\"checkpoint\"", "\"checkpoint_\"", 1);
    fs::write(&shard, lines.join("\n") + "\n").unwrap();
    let err = cli::cmd_compute_metrics(&metrics_args(&tb, &out, cheap_metrics())).unwrap_err();
    match &err {
        Error::Schema { path, line, .. } => {
            assert_eq!(path, &shard);
            assert_eq!(*line, 2);
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(read(out.join(cli::METRICS_FILE)), good);

    let status = Command::new(env!("CARGO_BIN_EXE_ilsel"))
        .args(["compute-metrics", "--metrics", "env_return", "--out"])
        .arg(&out)
        .arg("--demos")
        .arg(tb.join(cli::DEMOS_FILE))
        .arg("--meta")
        .arg(tb.join(cli::META_FILE))
        .arg("--bundles")
        .arg(tb.join(cli::BUNDLES_DIR))
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("config_0000.jsonl:2"));
    assert_eq!(read(out.join(cli::METRICS_FILE)), good);
}

#[test]
fn imitation_return_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    cli::cmd_gen_testbed(&gen_args(&tb, "pointmass", 1.0, 2, 1, 2)).unwrap();
    for f in fs::read_dir(tb.join(cli::BUNDLES_DIR)).unwrap() {
        let p = f.unwrap().path();
        let stripped: Vec<String> = lines_of(&p)
            .iter()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("imitation_rewards");
                v.to_string()
            })
            .collect();
        fs::write(&p, stripped.join("\n")).unwrap();
    }
    let mut args = metrics_args(&tb, &dir.path().join("m"), vec![]);
    args.rnd_epochs = 2;
    let t = cli::cmd_compute_metrics(&args).unwrap();
    assert!(!t.has_metric(MetricId::IMITATION_RETURN));
    assert_eq!(t.metrics().len(), 6);
    let explicit = metrics_args(&tb, &dir.path().join("m2"), vec![MetricId::IMITATION_RETURN]);
    let err = cli::cmd_compute_metrics(&explicit).unwrap_err();
    assert!(err.to_string().contains("imitation_return"), "{err}");
}

struct Env {
    testbed: PathBuf,
    table: PathBuf,
}

fn build_env(root: &Path, env_id: &str, gain: f64, configs: usize, seeds: usize, checkpoints: usize) -> Env {
    let tb = root.join(env_id);
    cli::cmd_gen_testbed(&gen_args(&tb, env_id, gain, configs, seeds, checkpoints)).unwrap();
    let out = root.join(format!("{env_id}-metrics"));
    cli::cmd_compute_metrics(&metrics_args(&tb, &out, cheap_metrics())).unwrap();
    Env {
        testbed: tb,
        table: out.join(cli::METRICS_FILE),
    }
}

#[test]
fn select_full_sample_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let e = build_env(dir.path(), "pointmass", 1.0, 6, 2, 4);
    let out = dir.path().join("sel");
    let args = SelectArgs {
        common: common(&out),
        table: e.table.clone(),
        meta: e.testbed.join(cli::META_FILE),
        metrics: vec![],
        early_stopping: EarlyStopping::Both,
        sample_size: 6,
        repeats: 3,
    };
    let reports = cli::cmd_select(&args).unwrap();
    assert_eq!(reports.len(), 4);
    let table = cli::read_table(&e.table).unwrap();
    let meta = ilsel::io::read_meta(e.testbed.join(cli::META_FILE)).unwrap();
    let best_per_seed: Vec<f64> = table
        .seeds()
        .iter()
        .map(|&s| {
            table
                .configs()
                .iter()
                .flat_map(|&c| (0..table.n_checkpoints() as u32).map(move |k| (c, k)))
                .map(|(c, k)| normalize_return(table.get(MetricId::ENV_RETURN, c, s, k).unwrap(), &meta))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let r = reports
        .iter()
        .find(|r| r.metric == MetricId::ENV_RETURN && r.early_stopping)
        .unwrap();
    let mean = best_per_seed.iter().sum::<f64>() / best_per_seed.len() as f64;
    assert!((r.mean - mean).abs() < 1e-12);

    // plot data only repeats report numbers
    let mut report = csv::Reader::from_path(out.join(cli::SELECTION_REPORT)).unwrap();
    let mut plot = csv::Reader::from_path(out.join(cli::SELECTION_PLOT)).unwrap();
    let rep: Vec<csv::StringRecord> = report.records().map(Result::unwrap).collect();
    let plo: Vec<csv::StringRecord> = plot.records().map(Result::unwrap).collect();
    assert_eq!(rep.len(), plo.len());
    for (a, b) in rep.iter().zip(&plo) {
        let label = if &a[2] == "none" { a[1].to_string() } else { format!("{}/{}", &a[1], &a[2]) };
        assert_eq!(&b[0], label);
        assert_eq!(&b[1], &a[3]);
        assert_eq!((&b[2], &b[3], &b[4]), (&a[4], &a[5], &a[6]));
    }
    let sims = read(out.join(cli::SIMULATIONS_LOG));
    assert_eq!(sims.lines().count(), 1 + 4 * 2 * 3);

    let again = dir.path().join("sel2");
    cli::cmd_select(&SelectArgs {
        common: common(&again),
        ..args
    })
    .unwrap();
    assert_eq!(read(out.join(cli::SELECTION_REPORT)), read(again.join(cli::SELECTION_REPORT)));
}

fn matrix(out: &Path) -> Vec<(String, String, f64)> {
    csv::Reader::from_path(out.join(cli::TRANSFER_MATRIX))
        .unwrap()
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string(), r[2].parse().unwrap())
        })
        .collect()
}

fn transfer(envs: &[&Env], out: &Path, early: &str) -> Vec<(String, String, f64)> {
    cli::cmd_transfer(&TransferArgs {
        common: common(out),
        table: envs.iter().map(|e| e.table.clone()).collect(),
        meta: envs.iter().map(|e| e.testbed.join(cli::META_FILE)).collect(),
        early_stop_metric: early.into(),
    })
    .unwrap();
    matrix(out)
}

#[test]
fn transfer_single_twin_and_adversarial() {
    let dir = tempfile::tempdir().unwrap();
    let a = build_env(dir.path(), "twin-a", 1.0, 12, 3, 4);
    let b = build_env(dir.path(), "twin-b", 1.0, 12, 3, 4);
    let hard = build_env(dir.path(), "strong", 4.0, 12, 3, 4);

    let single = transfer(&[&a], &dir.path().join("t1"), "none");
    assert_eq!(single.len(), 1);
    assert_eq!((single[0].0.as_str(), single[0].1.as_str()), ("twin-a", "twin-a"));

    let twin = transfer(&[&a, &b], &dir.path().join("t2"), "none");
    let get = |m: &[(String, String, f64)], v: &str, t: &str| m.iter().find(|x| x.0 == v && x.1 == t).unwrap().2;
    // the off-diagonal entry is within noise of in-env oracle selection
    for (v, t) in [("twin-a", "twin-b"), ("twin-b", "twin-a")] {
        assert!((get(&twin, v, t) - get(&twin, t, t)).abs() < 0.1, "{twin:?}");
    }
    let curve = read(dir.path().join("t2").join(cli::TRANSFER_CURVE));
    assert_eq!(curve.lines().count(), 2);

    let adv = transfer(&[&a, &hard], &dir.path().join("t3"), "none");
    for t in ["twin-a", "strong"] {
        let diag = get(&adv, t, t);
        let off = adv.iter().filter(|x| x.1 == t && x.0 != t).map(|x| x.2).sum::<f64>();
        assert!(diag >= off, "{adv:?}");
    }
}

#[test]
fn rank_eval_self_scores() {
    let dir = tempfile::tempdir().unwrap();
    let e = build_env(dir.path(), "pointmass", 1.0, 10, 2, 5);
    let out = dir.path().join("rank");
    let res = cli::cmd_rank_eval(&RankEvalArgs {
        common: common(&out),
        table: e.table.clone(),
        meta: e.testbed.join(cli::META_FILE),
        threshold: 0.75,
        bins: 10,
    })
    .unwrap();
    let env = res.pooled.iter().find(|s| s.metric == MetricId::ENV_RETURN).unwrap();
    assert!((env.spearman - 1.0).abs() < 1e-12);
    assert_eq!(env.roc_auc, 1.0);
    assert_eq!(res.by_seed.len(), 2);
    let csv = read(out.join(cli::RANKING_SCORES));
    assert_eq!(csv.lines().next().unwrap(), "env_id,metric_kind,split,spearman,roc_auc,n_policies");
    assert_eq!(csv.lines().count(), 3);
}
