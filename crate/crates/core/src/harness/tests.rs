use super::report::{comparison_rows, load_run, moving_average, RunData};
use super::svg::quantile;
use super::*;
use crate::autodiff::{Graph, Noise};
use crate::env::env_reset;
use crate::agents::StepOptions;
use proptest::prelude::*;

fn small_config(hypothesis: Architecture) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(EnvKind::Ghostrun, hypothesis);
    cfg.ghostrun = GhostRunConfig {
        grid_h: 9,
        grid_w: 9,
        n_agents: 2,
        n_ghosts: 1,
        n_trees: 2,
        n_obstacles: 2,
        max_steps: 12,
        ..GhostRunConfig::default()
    };
    cfg.episodes = 4;
    cfg.eval_window = 3;
    cfg.seeds = vec![3, 8];
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn metrics_rows_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(Architecture::H5_4);
    let outcomes = run_experiment(&cfg, tmp.path()).unwrap();
    assert_eq!(outcomes.len(), 2);
    assert!(tmp.path().join(EXPERIMENT_FILE).exists());
    for out in &outcomes {
        let rows = load_metrics(&out.dir.join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), cfg.episodes + 2 * cfg.eval_window);
        for (phase, n) in [(Phase::Train, cfg.episodes), (Phase::IidTest, 3), (Phase::OodTest, 3)] {
            let of_phase: Vec<_> = rows.iter().filter(|r| r.phase == phase).collect();
            assert_eq!(of_phase.len(), n);
            for (i, r) in of_phase.iter().enumerate() {
                assert_eq!(r.episode, i);
                assert_eq!(r.seed, out.seed);
                assert_eq!(r.policy_loss.is_some(), phase == Phase::Train);
                assert_eq!(r.contrastive_loss.is_some(), phase == Phase::Train);
            }
        }
        let ood_ghosts = rows.iter().find(|r| r.phase == Phase::OodTest).unwrap().n_ghosts;
        assert_eq!(ood_ghosts, Some(1 + crate::env::OOD_EXTRA_GHOSTS));
        assert!(out.dir.join(CHECKPOINT_FILE).exists());
        assert!(out.dir.join(RUN_FILE).exists());
        assert_eq!(out.iid.rewards.len(), 3);
    }
}

#[test]
fn runs_are_reproducible_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config(Architecture::H4);
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    for seed in &cfg.seeds {
        for file in [METRICS_FILE, CHECKPOINT_FILE, "checkpoint.bin", RUN_FILE] {
            assert_eq!(
                read(&seed_dir(a.path(), *seed).join(file)),
                read(&seed_dir(b.path(), *seed).join(file)),
                "{file} differs for seed {seed}"
            );
        }
    }
}

#[test]
fn seed_results_do_not_depend_on_other_seeds() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config(Architecture::H1);
    run_experiment(&cfg, a.path()).unwrap();
    let alone = ExperimentConfig {
        seeds: vec![8],
        ..cfg
    };
    run_experiment(&alone, b.path()).unwrap();
    assert_eq!(
        read(&seed_dir(a.path(), 8).join(METRICS_FILE)),
        read(&seed_dir(b.path(), 8).join(METRICS_FILE))
    );
}

#[test]
fn continual_runs_add_a_ghost_every_period() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Architecture::H1);
    cfg.ghostrun.max_steps = 3;
    cfg.episodes = 120;
    cfg.eval_window = 2;
    cfg.seeds = vec![1];
    cfg.continual = true;
    let out = run_experiment(&cfg, tmp.path()).unwrap().remove(0);
    let rows = load_metrics(&out.dir.join(METRICS_FILE)).unwrap();
    for r in rows.iter().filter(|r| r.phase == Phase::Train) {
        assert_eq!(r.n_ghosts, Some(1 + r.episode / crate::env::CONTINUAL_PERIOD), "episode {}", r.episode);
    }
    for r in rows.iter().filter(|r| r.phase == Phase::IidTest) {
        assert_eq!(r.n_ghosts, Some(3));
    }
    for r in rows.iter().filter(|r| r.phase == Phase::OodTest) {
        assert_eq!(r.n_ghosts, Some(3 + crate::env::OOD_EXTRA_GHOSTS));
    }
    let ck = load_checkpoint(&out.dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.env.n_ghosts(), Some(3));
}

#[test]
fn continual_requires_ghostrun() {
    let mut cfg = ExperimentConfig::new(EnvKind::Mazecleaners, Architecture::H1);
    cfg.continual = true;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_reproduces_forward_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let env = small_config(Architecture::H1).base_env();
    for (arch, shared) in [(Architecture::H5_5, true), (Architecture::H2, false), (Architecture::H5_2, true)] {
        let team = Team::new(arch, &NetConfig::default(), env.view_size(), env.n_agents(), shared, 17).unwrap();
        let path = tmp.path().join(format!("{arch}.json"));
        save_checkpoint(&path, &team, &env).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.env, env);
        assert_eq!(ck.team, team);
        let (_, obs) = env_reset(&env, 5).unwrap();
        for agent in 0..env.n_agents() {
            let forward = |t: &Team| {
                let net = t.net_for(agent);
                let mut g = Graph::new(9);
                let b = net.params.bind(&mut g);
                let o = crate::layers::patch_observation(&obs[agent], net.config.patch_h, net.config.patch_w).unwrap();
                let o = g.constant(o);
                let state = net.initial_state().place(&mut g);
                let opts = StepOptions {
                    noise: Noise::Zero,
                    ..StepOptions::default()
                };
                let out = net.step(&mut g, &b, o, state, opts).unwrap();
                (g.value(out.probs).data().to_vec(), g.value(out.value).data().to_vec())
            };
            assert_eq!(forward(&team), forward(&ck.team));
        }
        assert_eq!(
            evaluate_team(&team, &env, 2, 4).unwrap(),
            evaluate_checkpoint(&path, EvalMode::Iid, 2, 4).unwrap()
        );
    }
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let env = small_config(Architecture::H1).base_env();
    let team = Team::new(Architecture::H3, &NetConfig::default(), env.view_size(), 2, true, 1).unwrap();
    let path = tmp.path().join("ck.json");
    save_checkpoint(&path, &team, &env).unwrap();
    let blob = tmp.path().join("ck.bin");
    let bytes = read(&blob);

    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    std::fs::write(&blob, &bytes).unwrap();

    let manifest = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, manifest.replace("control.w_iz", "control.w_q")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    std::fs::write(&path, manifest.replace("\"H3\"", "\"H4\"")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    std::fs::write(&path, "{").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    assert!(matches!(load_checkpoint(&tmp.path().join("missing.json")), Err(Error::Io { .. })));
}

#[test]
fn ghostrun_test_rewards_are_bounded_by_the_horizon() {
    let cfg = small_config(Architecture::H1);
    let env = cfg.base_env();
    let team = Team::new(Architecture::H1, &cfg.net, env.view_size(), 2, true, 0).unwrap();
    for mode in [EvalMode::Iid, EvalMode::Ood] {
        let s = evaluate_team(&team, &eval_env(&env, mode), 5, 11).unwrap();
        assert_eq!(s.rewards.len(), 5);
        assert!(s.rewards.iter().all(|&r| r <= -(env.max_steps() as f64)));
        assert!(s.mean.unwrap() <= -(env.max_steps() as f64));
    }
}

#[test]
fn zero_episodes_yield_absent_statistics() {
    let s = Summary::from_rewards(vec![]);
    assert_eq!((s.mean, s.std), (None, None));
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Architecture::H1);
    cfg.episodes = 0;
    cfg.eval_window = 0;
    cfg.seeds = vec![2];
    let out = run_experiment(&cfg, tmp.path()).unwrap().remove(0);
    assert!(out.iid.mean.is_none() && out.ood.std.is_none());
    assert!(load_metrics(&out.dir.join(METRICS_FILE)).unwrap().is_empty());
    let rows = aggregate_and_emit(&[tmp.path().to_path_buf()], &tmp.path().join("cmp"), Emit { csv: true, svg: true }).unwrap();
    assert!(rows.is_empty());
}

#[test]
fn summary_uses_population_std() {
    let s = Summary::from_rewards(vec![-1.0, -3.0]);
    assert_eq!(s.mean, Some(-2.0));
    assert_eq!(s.std, Some(1.0));
}

#[test]
fn config_validation() {
    let mut cfg = small_config(Architecture::H1);
    cfg.eval_window = cfg.episodes + 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small_config(Architecture::H1);
    cfg.seeds.clear();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small_config(Architecture::H1);
    cfg.seeds = vec![1, 1];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small_config(Architecture::H1);
    cfg.net.patch_w = 4;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small_config(Architecture::H1);
    cfg.ppo.clip_epsilon = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = small_config(Architecture::H5_3);
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let minimal = ExperimentConfig::from_json(r#"{"task": "mazecleaners", "hypothesis": "H5.4"}"#).unwrap();
    assert_eq!(minimal, ExperimentConfig::new(EnvKind::Mazecleaners, Architecture::H5_4));
    assert!(minimal.validate().is_ok());
    for bad in [
        r#"{"task": "ghostrun", "hypothesis": "H9"}"#,
        r#"{"task": "ghostrun", "hypothesis": "H1", "epochs": 3}"#,
        r#"{"task": "chess", "hypothesis": "H1"}"#,
        r#"{"task": "ghostrun"}"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn derived_seeds_separate_streams() {
    let mut seen = std::collections::HashSet::new();
    for base in 0..20 {
        for stream in 1..=6 {
            for index in 0..20 {
                assert!(seen.insert(derive_seed(base, stream, index)));
            }
        }
    }
    assert_eq!(derive_seed(7, 2, 3), derive_seed(7, 2, 3));
}

fn record(seed: u64, hypothesis: Architecture, phase: Phase, episode: usize, reward: f64) -> MetricsRecord {
    MetricsRecord {
        seed,
        hypothesis,
        task: EnvKind::Ghostrun,
        phase,
        episode,
        episode_reward: reward,
        policy_loss: None,
        value_loss: None,
        entropy: None,
        contrastive_loss: None,
        n_ghosts: Some(3),
    }
}

fn fake_run(dir: &Path, task: EnvKind, hypothesis: Architecture, seeds: &[(u64, &[f64], &[f64])]) {
    std::fs::create_dir_all(dir).unwrap();
    let mut cfg = ExperimentConfig::new(task, hypothesis);
    cfg.seeds = seeds.iter().map(|s| s.0).collect();
    std::fs::write(dir.join(EXPERIMENT_FILE), cfg.to_json()).unwrap();
    for &(seed, iid, ood) in seeds {
        let mut rows = vec![record(seed, hypothesis, Phase::Train, 0, -50.0)];
        rows.extend(iid.iter().enumerate().map(|(i, &r)| record(seed, hypothesis, Phase::IidTest, i, r)));
        rows.extend(ood.iter().enumerate().map(|(i, &r)| record(seed, hypothesis, Phase::OodTest, i, r)));
        for r in &mut rows {
            r.task = task;
        }
        let d = seed_dir(dir, seed);
        std::fs::create_dir_all(&d).unwrap();
        save_metrics(&d.join(METRICS_FILE), &rows).unwrap();
    }
}

#[test]
fn comparison_averages_per_seed_means() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fake_run(&a, EnvKind::Ghostrun, Architecture::H1, &[(0, &[-10.0, -20.0], &[-30.0]), (1, &[-20.0], &[-50.0])]);
    fake_run(&b, EnvKind::Ghostrun, Architecture::H5_4, &[(4, &[-5.0], &[])]);
    let out = tmp.path().join("cmp");
    let rows = aggregate_and_emit(&[a, b], &out, Emit { csv: true, svg: true }).unwrap();
    let expected = [
        (Architecture::H1, Phase::IidTest, 2, -17.5, 2.5),
        (Architecture::H1, Phase::OodTest, 2, -40.0, 10.0),
        (Architecture::H5_4, Phase::IidTest, 1, -5.0, 0.0),
    ];
    assert_eq!(rows.len(), expected.len());
    for (row, (h, p, n, mean, std)) in rows.iter().zip(expected) {
        assert_eq!((row.hypothesis, row.phase, row.n_seeds), (h, p, n));
        assert!((row.mean - mean).abs() < 1e-12 && (row.std - std).abs() < 1e-12, "{row:?}");
    }
    let csv = std::fs::read_to_string(out.join(report::COMPARISON_FILE)).unwrap();
    assert!(csv.starts_with("hypothesis,phase,n_seeds,mean,std\nH1,iid_test,2,"));
    assert_eq!(csv.lines().count(), 4);
    for file in [report::TRAIN_CURVE_FILE, report::IID_BOX_FILE, report::OOD_BOX_FILE] {
        let svg = std::fs::read_to_string(out.join(file)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("H5_4"));
    }
}

#[test]
fn comparison_rejects_mixed_tasks_and_duplicate_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    fake_run(&a, EnvKind::Ghostrun, Architecture::H1, &[(0, &[-1.0], &[-1.0])]);
    fake_run(&b, EnvKind::Mazecleaners, Architecture::H2, &[(0, &[1.0], &[1.0])]);
    fake_run(&c, EnvKind::Ghostrun, Architecture::H1, &[(0, &[-2.0], &[-2.0])]);
    let runs: Vec<RunData> = [&a, &b, &c].iter().map(|d| load_run(d).unwrap()).collect();
    assert!(matches!(comparison_rows(&runs[..2]), Err(Error::Config(_))));
    assert!(matches!(comparison_rows(&[runs[0].clone(), runs[2].clone()]), Err(Error::Config(_))));
    assert!(matches!(
        aggregate_and_emit(&[], tmp.path(), Emit::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn moving_average_examples() {
    assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    assert_eq!(moving_average(&[], 3), Vec::<f64>::new());
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
    assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
}

fn arb_record() -> impl Strategy<Value = MetricsRecord> {
    let opt = || proptest::option::of(-1e6..1e6f64);
    (
        any::<u64>(),
        0..Architecture::ALL.len(),
        any::<bool>(),
        0..3usize,
        0..10_000usize,
        -1e6..1e6f64,
        (opt(), opt(), opt(), opt()),
        proptest::option::of(0..100usize),
    )
        .prop_map(|(seed, h, maze, phase, episode, reward, (p, v, e, c), n_ghosts)| MetricsRecord {
            seed,
            hypothesis: Architecture::ALL[h],
            task: if maze { EnvKind::Mazecleaners } else { EnvKind::Ghostrun },
            phase: [Phase::Train, Phase::IidTest, Phase::OodTest][phase],
            episode,
            episode_reward: reward,
            policy_loss: p,
            value_loss: v,
            entropy: e,
            contrastive_loss: c,
            n_ghosts,
        })
}

proptest! {
    #[test]
    fn metrics_round_trip_exactly(rows in proptest::collection::vec(arb_record(), 0..20)) {
        let mut buf = Vec::new();
        metrics::write_metrics(&mut buf, &rows).unwrap();
        prop_assert_eq!(metrics::read_metrics(buf.as_slice()).unwrap(), rows);
    }
}

#[test]
fn metrics_reject_bad_files() {
    let bad_header = "seed,hypothesis\n1,H1\n";
    assert!(matches!(metrics::read_metrics(bad_header.as_bytes()), Err(Error::Format(_))));
    let header = metrics::METRICS_HEADER.join(",");
    for row in [
        "1,H1,ghostrun,train,0,NaN,,,,,",
        "1,H1,ghostrun,warmup,0,-1,,,,,",
        "1,H7,ghostrun,train,0,-1,,,,,",
        "x,H1,ghostrun,train,0,-1,,,,,",
    ] {
        let text = format!("{header}\n{row}\n");
        assert!(matches!(metrics::read_metrics(text.as_bytes()), Err(Error::Format(_))), "{row}");
    }
}
