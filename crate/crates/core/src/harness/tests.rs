use super::*;
use crate::baselines::TransitionOptions;
use crate::dynamics::{generate_dataset, read_dataset, write_dataset, FamilyConfig, MotionFamily, Split};
use std::path::Path;

fn tiny_train() -> TrainConfig {
    TrainConfig {
        width: 8,
        depth: 1,
        ctx_dim: 2,
        lr: 1e-3,
        batch_size: 8,
        epochs: 3,
        horizon: 4,
        val_horizon: 8,
        windows_per_sequence: 2,
        ..TrainConfig::default()
    }
}

fn uniform_data(n: usize) -> Vec<TrajectoryRecord> {
    generate_dataset(MotionFamily::Uniform, n, 2, 2, 0.1, 41, 7).unwrap()
}

fn row(method: &str, family: &str, q: Option<&str>, seed: u64, metric: &str, v: f64) -> ReportRow {
    ReportRow::new("t", method, "full", family, q, 64, seed).with(metric, v)
}

#[test]
fn variant_flags() {
    let base = experiment_train_config();
    let (m, c) = AblationVariant::IdentityMass.apply(&base);
    assert_eq!((m, c.variant), (Method::Variational, Variant::IdentityMass));
    let (_, c) = AblationVariant::NoDelLoss.apply(&base);
    assert_eq!(c.lambda_del(), 0.0);
    assert_eq!(c.lambda_reg(), base.weights.lambda_reg);
    let (_, c) = AblationVariant::NoMassReg.apply(&base);
    assert_eq!(c.lambda_reg(), 0.0);
    assert!(AblationVariant::NoContext.apply(&base).1.no_context);
    assert_eq!(AblationVariant::NeuralDynamics.apply(&base).0, Method::Neural);
    for v in AblationVariant::ALL {
        assert_eq!(AblationVariant::parse(v.name()).unwrap(), v);
    }
    assert!(AblationVariant::parse("bogus").is_err());
}

#[test]
fn mpis_balanced_and_row_wise() {
    // family a: two quantities (1.0, 0.5); family b: one quantity 0.0
    let rows = vec![
        row("m", "a", Some("x"), 0, "pis", 1.0),
        row("m", "a", Some("y"), 0, "pis", 0.5),
        row("m", "b", Some("x"), 0, "pis", 0.0),
        row("m", "a", None, 0, "rollout_mse", 2.0),
        row("m", "b", None, 0, "rollout_mse", 4.0),
        row("m", "a", Some("x"), 1, "pis", 0.5),
        row("m", "b", Some("x"), 1, "pis", 0.5),
        row("m", "a", None, 1, "rollout_mse", 1.0),
        row("m", "b", None, 1, "rollout_mse", 1.0),
    ];
    let r = ExperimentReport::from_rows(rows);
    let bal = r.find("t", "m", "full", 64, "mpis_motion_balanced").unwrap();
    assert_eq!(bal.per_seed, vec![(0, 0.375), (1, 0.5)]);
    assert!((bal.mean - 0.4375).abs() < 1e-15);
    assert!((bal.std - 0.0625).abs() < 1e-15);
    let rw = r.find("t", "m", "full", 64, "mpis_row_wise").unwrap();
    assert_eq!(rw.per_seed, vec![(0, 0.5), (1, 0.5)]);
    let mse = r.find("t", "m", "full", 64, "rollout_mse").unwrap();
    assert_eq!(mse.per_seed, vec![(0, 3.0), (1, 1.0)]);
    assert_eq!(mse.median, 2.0);
    assert_eq!(r.verify().unwrap(), 0.0);
}

#[test]
fn report_round_trip_and_tamper_check() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<ReportRow> =
        (0..3).flat_map(|s| [row("m", "a", Some("x"), s, "pis", 0.1 * s as f64 + 0.3), row("m", "a", None, s, "r_stat", 1e-9 * (s + 1) as f64)]).collect();
    let r = ExperimentReport::from_rows(rows);
    r.write(dir.path()).unwrap();
    assert!(dir.path().join("report.md").exists());
    let (back, dev) = cmd_report(dir.path()).unwrap();
    assert_eq!(back, r);
    assert!(dev <= 1e-12);
    let mut bad = back.clone();
    bad.aggregates[0].mean += 1.0;
    assert!(bad.verify().unwrap() > 0.5);
    assert!(matches!(cmd_report(&dir.path().join("nope")), Err(Error::Missing(_))));
}

fn assert_same_state(a: &TrainState, b: &TrainState) {
    assert_eq!(a.model.params().values(), b.model.params().values());
    assert_eq!(a.encoder.params().values(), b.encoder.params().values());
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.normalizer, b.normalizer);
    assert_eq!(a.log, b.log);
    assert_eq!(a.epochs_done, b.epochs_done);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = uniform_data(6);
    let st = crate::learn::train(&data, &tiny_train()).unwrap();
    let path = dir.path().join("v.json");
    Checkpoint::from_variational(&st, "full").save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!((ck.d, ck.d_eta, ck.epoch, ck.h), (2, 2, 3, 0.1));
    assert!(ck.slices.iter().all(|s| s.name.starts_with("model/") || s.name.starts_with("encoder/")));
    assert_same_state(&ck.variational_state().unwrap(), &st);
    assert!(ck.neural_state().is_err());

    let nst = crate::baselines::train_neural(&data, &tiny_train(), TransitionOptions::default()).unwrap();
    let path = dir.path().join("n.json");
    Checkpoint::from_neural(&nst, "neural_dynamics", 0.1).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().neural_state().unwrap();
    assert_eq!(back.transition.params().values(), nst.transition.params().values());
    assert_eq!(back.encoder.params().values(), nst.encoder.params().values());
    assert_eq!(back.optimizer, nst.optimizer);
}

#[test]
fn checkpoint_schema_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let st = TrainState::init(&uniform_data(4), &tiny_train()).unwrap();
    let mut ck = Checkpoint::from_variational(&st, "full");
    ck.schema_version = 99;
    let path = dir.path().join("c.json");
    ck.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
}

fn generate_into(dir: &Path) -> Vec<GenerateSummary> {
    let cfg = GenerateConfig { families: MotionFamily::BENCHMARK.to_vec(), n_train: 5, n_val: 2, n_test: 3, seed: 11, ranges: FamilyConfig::default() };
    cmd_generate(&cfg, dir).unwrap()
}

#[test]
fn generate_is_deterministic_and_split_clean() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = generate_into(a.path());
    generate_into(b.path());
    assert_eq!(sa.len(), 12);
    let ranges = FamilyConfig::default();
    for s in &sa {
        assert_eq!((s.train, s.val, s.test), (5, 2, 3));
        let name = s.path.file_name().unwrap();
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y);
        for r in read_dataset(&s.path).unwrap() {
            assert_eq!(r.family, s.family);
            assert_eq!(ranges.in_train_range(&r).unwrap(), r.split != Split::Test);
        }
    }
}

#[test]
fn free_particle_rollout_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = uniform_data(4);
    let cfg = TrainConfig { normalize: false, ..tiny_train() };
    let mut st = TrainState::init(&data, &cfg).unwrap();
    st.model.zero_potential();
    st.model.set_constant_mass_bias(1.0);
    let ck_path = dir.path().join("free.json");
    Checkpoint::from_variational(&st, "free").save(&ck_path).unwrap();
    let ds = dir.path().join("uniform.jsonl");
    write_dataset(&ds, &data).unwrap();
    let job =
        RolloutJob { checkpoint: ck_path, reference: None, dataset: Some(ds), index: 0, simulate: None, horizon: Some(30), solver: SolverConfig::default() };
    let out = dir.path().join("roll");
    let r = cmd_rollout(&job, &out).unwrap();
    assert_eq!(r.series.len(), 30);
    assert!(r.series.iter().all(|s| s.residual_norm < 1e-12));
    let e0 = r.series[0].energy;
    assert!(r.series.iter().all(|s| (s.energy - e0).abs() < 1e-9 * e0.abs().max(1.0)));
    let back = read_dataset(&out.join("predicted.jsonl")).unwrap();
    assert_eq!(back, vec![r.predicted.clone()]);
    assert_eq!(back[0].len(), 32);
    let truth = read_dataset(&out.join("ground_truth.jsonl")).unwrap();
    for (p, t) in back[0].states.iter().zip(&truth[0].states) {
        for (a, b) in p.iter().zip(t) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    let series: Vec<serde_json::Value> = read_jsonl(&out.join("series.jsonl")).unwrap();
    assert_eq!(series.len(), 30);
    assert!(out.join("metrics.json").exists());
}

#[test]
fn rollout_needs_a_source() {
    let dir = tempfile::tempdir().unwrap();
    let st = TrainState::init(&uniform_data(4), &tiny_train()).unwrap();
    let ck_path = dir.path().join("c.json");
    Checkpoint::from_variational(&st, "full").save(&ck_path).unwrap();
    let job = RolloutJob { checkpoint: ck_path, reference: None, dataset: None, index: 0, simulate: None, horizon: None, solver: SolverConfig::default() };
    let e = cmd_rollout(&job, dir.path()).unwrap_err();
    assert!(matches!(e, Error::Missing(_)));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("d.jsonl");
    write_dataset(&ds, &uniform_data(6)).unwrap();
    let job = |resume: Option<std::path::PathBuf>, stop_after: Option<usize>, variant| TrainJob {
        dataset: ds.clone(),
        variant,
        train: tiny_train(),
        transition: TransitionOptions::default(),
        resume,
        stop_after,
    };
    for variant in [AblationVariant::Full, AblationVariant::NeuralDynamics] {
        let full = cmd_train(&job(None, None, variant), &dir.path().join("full")).unwrap();
        let half = cmd_train(&job(None, Some(1), variant), &dir.path().join("half")).unwrap();
        assert_eq!(half.checkpoint.epoch, 1);
        let resumed = cmd_train(&job(Some(half.path), None, variant), &dir.path().join("resumed")).unwrap();
        assert_eq!(resumed.checkpoint.epoch, 3);
        assert_eq!(resumed.checkpoint.slices, full.checkpoint.slices);
        assert_eq!(resumed.checkpoint.log, full.checkpoint.log);
    }
    let log: Vec<crate::learn::EpochLog> = read_jsonl(&dir.path().join("full/train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 4);
}

#[test]
fn no_del_loss_still_reports_the_residual() {
    let data = crate::dynamics::generate_controlled_dataset(&FamilyConfig::default(), 4, 1, 0, 0).unwrap();
    let (_, cfg) = AblationVariant::NoDelLoss.apply(&TrainConfig { solver: SolverConfig { n_iters: 1, ..Default::default() }, ..tiny_train() });
    let st = crate::learn::train(&data, &cfg).unwrap();
    let l = st.log.last().unwrap().loss.unwrap();
    assert!(l.del > 0.0);
    assert!((l.total - l.traj - cfg.lambda_reg() * l.reg).abs() <= 1e-12 * l.total.abs().max(1.0));
}

#[test]
fn audit_reports_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AuditConfig {
        families: vec![MotionFamily::Uniform],
        horizons: vec![8],
        seeds: vec![0],
        n_train: 2,
        n_val: 1,
        n_test: 1,
        checkpoints: Some(dir.path().to_path_buf()),
        ..AuditConfig::default()
    };
    let e = cmd_audit(&cfg, &dir.path().join("out")).unwrap_err();
    assert!(matches!(e, Error::Missing(_)), "{e}");
    let cfg = AuditConfig { checkpoints: Some(dir.path().join("absent")), ..cfg };
    assert!(matches!(cmd_audit(&cfg, dir.path()), Err(Error::Missing(_))));
}

#[test]
fn tiny_audit_has_every_method_and_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AuditConfig {
        families: vec![MotionFamily::Uniform, MotionFamily::DampedOscillation],
        horizons: vec![8, 16],
        seeds: vec![0, 1],
        n_train: 4,
        n_val: 1,
        n_test: 2,
        variational: tiny_train(),
        neural: tiny_train(),
        refinement: crate::baselines::RefinementConfig { gd_iters: 2, ..Default::default() },
        ..AuditConfig::default()
    };
    let out = dir.path().join("audit");
    let r = cmd_audit(&cfg, &out).unwrap();
    for m in ["variational", "neural", "gd_refined"] {
        for h in [8, 16] {
            let a = r.find("audit", m, "full", h, "mpis_motion_balanced").unwrap();
            assert_eq!(a.per_seed.len(), 2);
            assert!(a.mean.is_finite());
            assert!(r.find("audit", m, "full", h, "state_rmse_normalized").is_some());
        }
    }
    assert!(out.join("uniform_seed1_neural.json").exists());
    let (_, dev) = cmd_report(&out).unwrap();
    assert!(dev <= 1e-12);
    // rerun from the stored checkpoints reproduces the rows
    let again = cmd_audit(&AuditConfig { checkpoints: Some(out.clone()), ..cfg }, &dir.path().join("again")).unwrap();
    assert_eq!(again.rows, r.rows);
}

#[test]
fn config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::new(Job::Ablate(AblateConfig::default()), true);
    cfg.save(dir.path()).unwrap();
    assert_eq!(ExperimentConfig::load(&dir.path().join("config.json")).unwrap(), cfg);
    let text = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert!(text.contains("\"command\": \"ablate\""));
}
