mod common;

use std::fs;
use std::path::Path;

use common::smoke_config;
use coworld::config::{Ablation, CoWorldConfig};
use coworld::container::Container;
use coworld::datastore::{load_dataset, read_manifest, DatasetManifest};
use coworld::envgrid::{domain_steps_on_thread, EnvSpec};
use coworld::trainer::{
    coworld_train, generate_medium_replay, train_source_iteration, train_target_iteration, AgentBundle, MetricsLog,
    ReplayGenOptions, Role, SourceDomain, CHECKPOINT_DIR, METRICS_FILE, METRIC_COLUMNS,
};
use coworld::{Error, Prng};
use rand::SeedableRng;

fn dataset(cfg: &CoWorldConfig, dir: &Path) -> DatasetManifest {
    let opts = ReplayGenOptions {
        budget_steps: 5 * cfg.target_env.episode_limit,
        eval_every_steps: 1_000_000,
        eval_episodes: 1,
        oracle_episodes: 2,
        seed: 3,
    };
    generate_medium_replay(cfg, &cfg.target_env, dir, &opts).unwrap()
}

#[test]
fn identical_runs_write_identical_metrics() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let a = coworld_train(&cfg, &data, &tmp.path().join("a")).unwrap();
    let b = coworld_train(&cfg, &data, &tmp.path().join("b")).unwrap();
    let read = |d: &str| fs::read(tmp.path().join(d).join(METRICS_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(a.target.fingerprint(), b.target.fingerprint());
    assert_eq!(a.manifest, b.manifest);

    let mut other = cfg.clone();
    other.seed = 1;
    coworld_train(&other, &data, &tmp.path().join("c")).unwrap();
    assert_ne!(read("a"), read("c"));
}

#[test]
fn run_directory_layout_and_manifest() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let run = tmp.path().join("run");
    let out = coworld_train(&cfg, &data, &run).unwrap();
    let m = &out.manifest;
    assert_eq!(m.target_env_steps_in_training, 0);
    assert_eq!(m.isolation_checks, 2 * cfg.outer_iterations);
    assert_eq!(m.evaluations.len(), cfg.outer_iterations);
    assert!(m.source_env_steps > 0);
    let expected_updates = cfg.pretrain_steps + cfg.outer_iterations * (cfg.target_steps + cfg.source_steps);
    assert_eq!(m.total_updates, expected_updates as u64);
    assert_eq!(
        m.checkpoints,
        [
            "source_pretrained.cwck",
            "target_iter000.cwck",
            "source_iter000.cwck",
            "target_iter001.cwck",
            "source_iter001.cwck"
        ]
        .map(|c| format!("{CHECKPOINT_DIR}/{c}"))
    );
    for c in &m.checkpoints {
        assert!(run.join(c).is_file());
    }
    let text = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, METRIC_COLUMNS.join(","));
    assert!(text.lines().any(|l| l.contains(",eval,")));
    for e in &m.evaluations {
        assert!(e.mean_return.is_finite() && e.value.estimated_value.is_finite());
        assert!(e.alignment_kl.unwrap() >= 0.0);
    }
    assert!(out.target.all_finite() && out.source.unwrap().all_finite());
}

#[test]
fn target_domain_is_never_stepped_outside_evaluation() {
    let mut cfg = smoke_config();
    cfg.eval_every = 0;
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let before = domain_steps_on_thread(&cfg.target_env);
    let source_before = domain_steps_on_thread(&cfg.source_env);
    let out = coworld_train(&cfg, &data, &tmp.path().join("run")).unwrap();
    assert_eq!(domain_steps_on_thread(&cfg.target_env), before);
    assert_eq!(
        domain_steps_on_thread(&cfg.source_env) - source_before,
        out.manifest.source_env_steps
    );
}

#[test]
fn shared_domain_source_steps_are_not_counted_as_leaks() {
    let mut cfg = smoke_config();
    cfg.target_env = EnvSpec {
        seed: 99,
        ..cfg.source_env.clone()
    };
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let out = coworld_train(&cfg, &data, &tmp.path().join("run")).unwrap();
    assert_eq!(out.manifest.target_env_steps_in_training, 0);
}

#[test]
fn stage_updates_leave_the_other_agent_untouched() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let (_, offline) = load_dataset(&data).unwrap();
    let mut rng = Prng::seed_from_u64(0);
    let mut source = SourceDomain::new(&cfg, &mut rng).unwrap();
    source.collect_episode(true).unwrap();
    source.collect_episode(true).unwrap();
    let shape = (8, 8, 3);
    let mut target = AgentBundle::new(Role::Target, &cfg, shape, 2, &mut rng);
    let mut log = MetricsLog::in_memory(1);

    let src_print = source.bundle.fingerprint();
    let tgt_print = target.fingerprint();
    train_target_iteration(&cfg, &mut target, Some(&source.bundle), &offline, 0, &mut log, &mut rng).unwrap();
    assert_eq!(source.bundle.fingerprint(), src_print);
    assert_ne!(target.fingerprint(), tgt_print);

    let tgt_print = target.fingerprint();
    train_source_iteration(&cfg, &mut source, Some(&target), &offline, 0, &mut log, &mut rng).unwrap();
    assert_eq!(target.fingerprint(), tgt_print);
    assert_ne!(source.bundle.fingerprint(), src_print);
}

#[test]
fn target_iteration_requires_a_source_when_regularized() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let (_, offline) = load_dataset(&data).unwrap();
    let mut rng = Prng::seed_from_u64(0);
    let mut target = AgentBundle::new(Role::Target, &cfg, (8, 8, 3), 2, &mut rng);
    let err = train_target_iteration(&cfg, &mut target, None, &offline, 0, &mut MetricsLog::in_memory(1), &mut rng);
    assert!(matches!(err, Err(Error::Config { .. })));
}

#[test]
fn ablations_are_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&smoke_config(), &data);
    let cases = [
        (Ablation::None, 1.5, 0.2),
        (Ablation::NoAlign, 0.0, 0.2),
        (Ablation::NoValueReg, 1.5, 0.0),
        (Ablation::OfflineBaseline, 0.0, 0.0),
    ];
    for (ablation, beta2, alpha) in cases {
        let mut cfg = smoke_config();
        cfg.ablation = ablation;
        cfg.outer_iterations = 1;
        let out = coworld_train(&cfg, &data, &tmp.path().join(ablation.name())).unwrap();
        assert_eq!(out.manifest.ablation, ablation);
        assert_eq!(out.manifest.effective_domain_kl_scale, beta2);
        assert_eq!(out.manifest.effective_value_reg_scale, alpha);
        let baseline = ablation == Ablation::OfflineBaseline;
        assert_eq!(out.source.is_none(), baseline);
        assert_eq!(out.manifest.source_env_steps == 0, baseline);
        let text = fs::read_to_string(tmp.path().join(ablation.name()).join(METRICS_FILE)).unwrap();
        assert_eq!(text.contains(",pretrain,"), !baseline);
        assert_eq!(text.contains(",source,"), !baseline);
    }
}

#[test]
fn zero_outer_iterations_only_pretrains() {
    let mut cfg = smoke_config();
    cfg.outer_iterations = 0;
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let out = coworld_train(&cfg, &data, &tmp.path().join("run")).unwrap();
    assert_eq!(out.manifest.checkpoints, [format!("{CHECKPOINT_DIR}/source_pretrained.cwck")]);
    assert!(out.manifest.evaluations.is_empty());
    assert_eq!(out.manifest.total_updates, cfg.pretrain_steps as u64);
}

#[test]
fn checkpoints_restore_agents_and_reject_tampering() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&cfg, &data);
    let run = tmp.path().join("run");
    let out = coworld_train(&cfg, &data, &run).unwrap();
    let last = run.join(out.manifest.checkpoints.iter().rev().find(|c| c.contains("target")).unwrap());
    let (bundle, loaded_cfg) = AgentBundle::load(&last).unwrap();
    assert_eq!(bundle.fingerprint(), out.target.fingerprint());
    assert_eq!(bundle.role(), Role::Target);
    assert_eq!(loaded_cfg, cfg);

    let mut bytes = fs::read(&last).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    let bad = tmp.path().join("bad.cwck");
    fs::write(&bad, &bytes).unwrap();
    assert!(matches!(AgentBundle::load(&bad), Err(Error::Format { .. })));

    fs::write(&bad, &fs::read(&last).unwrap()[..40]).unwrap();
    assert!(matches!(AgentBundle::load(&bad), Err(Error::Format { .. })));

    let mut c = Container::load(&last, coworld::container::CHECKPOINT_MAGIC).unwrap();
    c.meta["config_hash"] = serde_json::json!("0000");
    assert!(matches!(AgentBundle::from_container(&c), Err(Error::Format { .. })));
}

#[test]
fn preflight_rejects_bad_datasets() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let missing = coworld_train(&cfg, &tmp.path().join("nope"), &tmp.path().join("run"));
    assert!(matches!(missing, Err(Error::Config { .. })));

    let mut big = smoke_config();
    big.target_env.image_size = 12;
    big.source_env.image_size = 12;
    let data = tmp.path().join("big");
    dataset(&big, &data);
    assert!(matches!(coworld_train(&cfg, &data, &tmp.path().join("run")), Err(Error::Config { .. })));

    let mut short = smoke_config();
    short.target_env.episode_limit = 4;
    let data = tmp.path().join("short");
    dataset(&short, &data);
    let mut long = smoke_config();
    long.seq_len = 10;
    assert!(matches!(coworld_train(&long, &data, &tmp.path().join("run")), Err(Error::EmptyData(_))));
}

#[test]
fn zero_budget_dataset_is_empty_and_capped() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let opts = ReplayGenOptions {
        budget_steps: 0,
        ..ReplayGenOptions::default()
    };
    let m = generate_medium_replay(&cfg, &cfg.target_env, tmp.path(), &opts).unwrap();
    assert!(m.episodes.is_empty() && m.budget_capped && m.achieved_score.is_none());
    assert_eq!(read_manifest(tmp.path()).unwrap(), m);
}

#[test]
fn replay_generation_is_reproducible_and_keeps_every_episode() {
    let cfg = smoke_config();
    let tmp = tempfile::tempdir().unwrap();
    let a = dataset(&cfg, &tmp.path().join("a"));
    let b = dataset(&cfg, &tmp.path().join("b"));
    assert_eq!(a, b);
    assert_eq!(a.episodes.len(), 5);
    assert_eq!(a.total_steps, 5 * cfg.target_env.episode_limit);
    let (_, buf) = load_dataset(&tmp.path().join("a")).unwrap();
    assert_eq!(buf.num_episodes(), 5);
    assert_eq!(buf.num_steps(), a.total_steps);
}
