use ccf_core::baselines::MostPop;
use ccf_core::dataset::{
    leave_one_out_split, randomized_trial_split, read_logs, read_split, write_split, Interaction, Partition, RatingLog,
    RatingScale, SplitProtocol,
};
use ccf_core::eval::evaluate;
use ccf_core::models::ModelType;
use ccf_core::simulator::{confounding_witness, simulate, write_simulation, SimulateConfig};
use ccf_core::sweep::{run_sweep, Grid, SweepConfig};
use ccf_core::training::{train, RuleSpec, TrainConfig};

fn small_sim() -> SimulateConfig {
    SimulateConfig {
        num_users: 40,
        num_items: 130,
        d_star: 4,
        interactions_per_user: 15,
        test_per_user: 10,
        seed: 3,
        ..Default::default()
    }
}

fn quick(model_type: ModelType, rule: RuleSpec) -> TrainConfig {
    TrainConfig {
        model_type,
        rule,
        dim: 8,
        epochs: 6,
        pretrain_epochs: 3,
        learning_rate: 0.05,
        clone_rounds: 1,
        ..Default::default()
    }
}

#[test]
fn simulated_logs_flow_through_split_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(&small_sim()).unwrap();
    assert!(confounding_witness(&sim.world, &sim.observational).unwrap().holds());
    let files = write_simulation(dir.path(), &sim).unwrap();
    let (logs, _) = read_logs(&[files[0].as_path(), files[1].as_path()], RatingScale::Auto).unwrap();
    let ds = randomized_trial_split(&logs[0], &logs[1], 5, 10).unwrap();
    assert_eq!(ds.protocol(), SplitProtocol::RandomizedTrial);

    let split_dir = dir.path().join("split");
    write_split(&split_dir, &ds, 5).unwrap();
    let (back, meta) = read_split(&split_dir).unwrap();
    assert_eq!(meta.seed, 5);
    for p in [Partition::Train, Partition::Validation, Partition::Test] {
        assert_eq!(back.partition(p), ds.partition(p));
    }

    for rule in ["none", "D1", "C"] {
        let cfg = quick(ModelType::Mf, rule.parse().unwrap());
        let a = train(&back, &cfg).unwrap();
        let b = train(&back, &cfg).unwrap();
        assert_eq!(
            a.model.to_checkpoint().unwrap(),
            b.model.to_checkpoint().unwrap(),
            "{rule}"
        );
        assert_eq!(a.trace.len(), cfg.epochs);
        let report = evaluate(&a.model, &back, Partition::Test, 5).unwrap();
        assert!((0.0..=1.0).contains(&report.ndcg_at_10));
        assert!(report.hit_at_1 <= report.ndcg_at_10);
    }
    let pop = evaluate(&MostPop::from_dataset(&back), &back, Partition::Test, 5).unwrap();
    assert!(pop.num_users_evaluated > 0);
}

#[test]
fn sequential_model_trains_with_every_discrete_rule() {
    let sim = simulate(&small_sim()).unwrap();
    let log = RatingLog::new(sim.observational, 40, 130).unwrap();
    let ds = leave_one_out_split(&log, 10).unwrap();
    for rule in ["K1", "D1", "R1r", "R1n"] {
        let trained = train(&ds, &quick(ModelType::AttnSeq, rule.parse().unwrap())).unwrap();
        let stats = trained.selection.unwrap();
        assert!(
            stats.selected <= stats.passed && stats.passed <= stats.generated,
            "{rule}"
        );
        assert!(trained.model.is_finite());
    }
}

#[test]
fn sweep_over_omega_reports_every_point() {
    let sim = simulate(&small_sim()).unwrap();
    let log = RatingLog::new(sim.observational, 40, 130).unwrap();
    let ds = leave_one_out_split(&log, 10).unwrap();
    let cfg = SweepConfig {
        base: quick(ModelType::Mf, "D1".parse().unwrap()),
        grid: Grid {
            omega: Some(vec![0.001, 0.1, 0.5, 1.0]),
            ..Default::default()
        },
    };
    let out = run_sweep(&ds, &cfg, 0).unwrap();
    assert_eq!(out.rows.len(), 4);
    assert!(out.rows.iter().all(|r| r.test().is_some()));
}

#[test]
fn leave_one_out_holds_out_the_latest_two_positives() {
    let mut v = Vec::new();
    for t in 1..=4 {
        v.push(Interaction::rated(0, t, 5, t as i64).unwrap());
    }
    v.push(Interaction::rated(1, 0, 5, 1).unwrap());
    let ds = leave_one_out_split(&RatingLog::new(v, 2, 5).unwrap(), 10).unwrap();
    assert_eq!(
        ds.test.iter().map(|i| (i.user, i.item)).collect::<Vec<_>>(),
        vec![(0, 4)]
    );
    assert_eq!(
        ds.validation.iter().map(|i| (i.user, i.item)).collect::<Vec<_>>(),
        vec![(0, 3)]
    );
    assert_eq!(ds.train.len(), 3);
}
