use cfmimo::geometry::{ExperimentConfig, Scenario, ShadowSampler};
use cfmimo::metrics::ObjectiveSpec;
use cfmimo::neural::ModelParams;
use cfmimo::rng::{self, tag};
use cfmimo::training::{
    epoch_summaries, realization_step, sampling_stream, shadow_stream, PolicyConfig, TrainConfig, Trainer, CENTRAL_OWNER,
};

fn small() -> (ExperimentConfig, PolicyConfig) {
    let exp = ExperimentConfig {
        num_aps: 9,
        num_ues: 4,
        tau_p: 4,
        ..Default::default()
    };
    let policy = PolicyConfig {
        hidden: 32,
        fc_hidden: vec![32],
        pilot_input: false,
    };
    (exp, policy)
}

fn trainer(exp: &ExperimentConfig, policy: &PolicyConfig, epochs: usize) -> Trainer {
    let cfg = TrainConfig {
        epochs,
        batch_size: 8,
        objective: ObjectiveSpec::sum(),
        lr: 3e-3,
        ..Default::default()
    };
    let init = ModelParams::init(&policy.shape(exp.num_aps, exp.tau_p), &mut rng::stream(exp.seed, &[tag::INIT])).unwrap();
    Trainer::new(exp.clone(), cfg, init).unwrap()
}

#[test]
fn smoke_training_improves_sampled_sum_se() {
    let (exp, policy) = small();
    let sc = Scenario::generate(&exp, 10, 1).unwrap();
    let mut t = trainer(&exp, &policy, 5);
    t.run(&sc, |_, _| Ok(())).unwrap();
    let epochs = epoch_summaries(&t.log);
    assert_eq!(epochs.len(), 5);
    assert!(epochs.iter().all(|e| e.sampled_objective.is_finite()));
    let rising = epochs
        .windows(2)
        .filter(|w| w[1].sampled_objective >= w[0].sampled_objective)
        .count();
    let pairs: Vec<f64> = epochs.iter().map(|e| e.sampled_objective).collect();
    assert!(rising as f64 >= 0.6 * (epochs.len() - 1) as f64, "epoch means {pairs:?}");
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let (exp, policy) = small();
    let sc = Scenario::generate(&exp, 3, 1).unwrap();
    let mut a = trainer(&exp, &policy, 2);
    let mut b = trainer(&exp, &policy, 2);
    a.run(&sc, |_, _| Ok(())).unwrap();
    b.run(&sc, |_, _| Ok(())).unwrap();
    assert_eq!(a.log_csv(), b.log_csv());
    assert_eq!(a.params.data, b.params.data);
}

#[test]
fn master_forcing_keeps_sampled_rows_non_empty() {
    let (exp, policy) = small();
    let sc = Scenario::generate(&exp, 2, 1).unwrap();
    // Strongly negative output bias makes every unforced link improbable.
    let mut params = ModelParams::init(&policy.shape(exp.num_aps, exp.tau_p), &mut rng::stream(5, &[])).unwrap();
    let out = *params.layout().fc.last().unwrap();
    params.data[out.b..out.b + out.outputs].iter_mut().for_each(|b| *b = -30.0);
    let cfg = TrainConfig::default();
    for drop in 0..2 {
        let sampler = ShadowSampler::new(&exp, &sc.train_placement(drop)).unwrap();
        for r in 0..20 {
            let beta = sampler.sample(&mut shadow_stream(1, 0, drop, r));
            let mut srng = sampling_stream(1, 0, drop, r, CENTRAL_OWNER);
            let out = realization_step(&params, &beta, &sc.train[drop], &exp, &cfg, &mut srng).unwrap();
            assert!(!out.sampled.has_empty_row());
            assert_eq!(out.sampled.connections(), exp.num_ues);
        }
    }
}
