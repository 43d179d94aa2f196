use std::sync::{Arc, Mutex};

use flagcns::arch::ArchCode;
use flagcns::federation::{ClientActor, Controller};
use flagcns::fedproto::{DirectLink, FedError, FrameHandler, Hub, Link, Scheme};
use flagcns::feo::QuotaMode;
use flagcns::graph::synthetic::SbmSpec;
use flagcns::run::{
    cmd_ablation, cmd_baseline_random, cmd_search, cmd_train_arch, flacc, local, named_baseline, prepare, Ablation,
    PartitionKind, RunConfig, RunError, SyntheticTask,
};
use flagcns::supernet::{population_grad, ShardData, SuperNetWeights};
use flagcns::tensor::sgd_step;

fn toy(clients: usize) -> RunConfig {
    let spec = SbmSpec::small(3);
    RunConfig {
        synthetic: Some(SyntheticTask {
            clients: vec![spec; clients],
            seed: 11,
        }),
        clients,
        partition: PartitionKind::Given,
        population: 8,
        layers: 3,
        generations: 3,
        weight_steps: 2,
        retrain_epochs: 20,
        baseline_epochs: 5,
        timing_runs: 0,
        seed: 5,
        ..RunConfig::default()
    }
}

#[test]
fn search_smoke_keeps_population_size() {
    let cfg = toy(2);
    let r = cmd_search(&cfg, &mut local()).unwrap();
    assert_eq!(r.generations.len(), 3);
    for g in &r.generations {
        assert_eq!(g.population.len(), cfg.population);
        assert_eq!(g.client_elites.iter().sum::<usize>() + g.controller_elites, cfg.population);
    }
    assert!((0.0..=1.0).contains(&r.flacc));
    let again = flacc(&r.client_accuracies, &r.client_test_sizes).unwrap();
    assert!((again - r.flacc).abs() <= 1e-12);
    assert!(r.candidate_evaluations > 3 && r.candidate_evaluations <= 3 * 2 * 8 + 8);
    assert!(r.final_fll.is_finite());
    assert!(r.traffic.bytes() > 0);
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["best_code", "fll_trajectory", "flacc", "client_accuracies", "param_count", "traffic", "seeds"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let cfg_back: RunConfig = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(cfg_back, cfg);
}

#[test]
fn search_is_deterministic_and_transport_independent() {
    let cfg = toy(3);
    let a = cmd_search(&cfg, &mut local()).unwrap().without_timings();
    let b = cmd_search(&cfg, &mut local()).unwrap().without_timings();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.generations, b.generations);
    let threads = RunConfig {
        transport: flagcns::fedproto::TransportKind::Threads,
        ..cfg.clone()
    };
    let c = cmd_search(&threads, &mut local()).unwrap().without_timings();
    assert_eq!(a.generations, c.generations);
    assert_eq!(a.best_code, c.best_code);
}

#[test]
fn plain_and_mask_ciphers_agree() {
    let cfg = toy(3);
    let code = named_baseline("gcn2", cfg.layers).unwrap();
    let mask = cmd_train_arch(&cfg, &code, &mut local()).unwrap();
    let plain = cmd_train_arch(
        &RunConfig {
            cipher: Scheme::Plain,
            ..cfg.clone()
        },
        &code,
        &mut local(),
    )
    .unwrap();
    assert!((mask.flacc - plain.flacc).abs() < 0.005, "{} vs {}", mask.flacc, plain.flacc);
    assert!((mask.final_fll - plain.final_fll).abs() < 1e-4);
}

#[test]
fn gcn2_learns_the_toy_task() {
    let cfg = RunConfig {
        retrain_epochs: 100,
        ..toy(3)
    };
    let code = named_baseline("gcn2", cfg.layers).unwrap();
    let r = cmd_train_arch(&cfg, &code, &mut local()).unwrap();
    assert_eq!(r.best_code_text, "IS4 | L1:gcn<-0 L2:gcn<-1 L3:None | OS4");
    assert!(r.flacc > 0.6, "flacc {}", r.flacc);
}

#[test]
fn flacc_examples() {
    assert!((flacc(&[0.8, 0.7], &[1000, 1000]).unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(flacc(&[0.42], &[7]).unwrap(), 0.42);
    assert!((flacc(&[0.3, 0.3, 0.3], &[1, 50, 9]).unwrap() - 0.3).abs() < 1e-15);
    assert!(flacc(&[0.3], &[1, 2]).is_err());
}

#[test]
fn random_baseline_budget_one_returns_its_sample() {
    let cfg = toy(2);
    let r = cmd_baseline_random(&cfg, 1, &mut local()).unwrap();
    assert_eq!(r.candidate_evaluations, 1);
    assert_eq!(r.fll_trajectory.len(), 1);
    let r4 = cmd_baseline_random(&cfg, 4, &mut local()).unwrap();
    // same stream: the first candidate is the same code
    assert_eq!(r4.fll_trajectory[0], r.fll_trajectory[0]);
    assert!(r4.fll_trajectory.windows(2).all(|w| w[1] <= w[0]));
    assert!(matches!(cmd_baseline_random(&cfg, 0, &mut local()), Err(RunError::Config(_))));
}

#[test]
fn controller_only_ablation_uses_controller_elites_only() {
    let cfg = toy(2);
    let r = cmd_ablation(&cfg, Ablation::ControllerOnly, &mut local()).unwrap();
    for g in &r.generations {
        assert!(g.client_elites.iter().all(|&q| q == 0));
        assert_eq!(g.controller_elites, cfg.population);
    }
    let r = cmd_ablation(&cfg, Ablation::ClientOnly, &mut local()).unwrap();
    assert!(r.generations.iter().all(|g| g.controller_elites == 0));
    let swapped = Ablation::RandomPartition.apply(&cfg);
    assert_eq!(
        RunConfig {
            partition: cfg.partition,
            ..swapped.clone()
        },
        cfg
    );
    assert_eq!(swapped.partition, PartitionKind::Random);
    assert_eq!(cfg.quota_mode, QuotaMode::Full);
}

#[test]
fn config_errors_map_to_exit_code_two() {
    let mut cfg = toy(2);
    cfg.population = 0;
    let e = cmd_search(&cfg, &mut local()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let e = named_baseline("resnet", 3).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

/// Lets the test read a client's replica after the hub took its link.
struct Shared(Arc<Mutex<ClientActor>>);

impl FrameHandler for Shared {
    fn greet(&mut self) -> Result<Vec<Vec<u8>>, FedError> {
        self.0.lock().unwrap().greet()
    }
    fn handle(&mut self, frame: &[u8]) -> Result<Vec<Vec<u8>>, FedError> {
        self.0.lock().unwrap().handle(frame)
    }
    fn finished(&self) -> bool {
        self.0.lock().unwrap().finished()
    }
}

#[test]
fn federated_training_matches_weighted_centralised_gradient() {
    let cfg = RunConfig {
        cipher: Scheme::Plain,
        ..toy(3)
    };
    let prepared = prepare(&cfg).unwrap();
    let actors: Vec<_> = prepared
        .shards
        .iter()
        .map(|s| Arc::new(Mutex::new(ClientActor::new(s.client_id, "oracle", &s.bundle, 1))))
        .collect();
    let links: Vec<Box<dyn Link>> = actors
        .iter()
        .map(|a| Box::new(DirectLink::new(Shared(a.clone())).unwrap()) as Box<dyn Link>)
        .collect();
    let mut ctl = Controller::connect(&cfg, Hub::new("oracle", links, false)).unwrap();
    let code = named_baseline("gcn2", cfg.layers).unwrap();
    let steps = 10;
    ctl.init_supernet(77, 0.05).unwrap();
    ctl.train(std::slice::from_ref(&code), steps).unwrap();

    let shards: Vec<ShardData> = prepared.shards.iter().map(|s| ShardData::new(&s.bundle)).collect();
    let sizes: Vec<f64> = shards.iter().map(|s| s.splits().train.len() as f64).collect();
    let total: f64 = sizes.iter().sum();
    let mut w = SuperNetWeights::build(
        &cfg.space().unwrap(),
        &cfg.registry().unwrap(),
        shards[0].num_features(),
        shards[0].num_classes(),
        77,
    )
    .unwrap();
    for _ in 0..steps {
        let mut g = vec![0.0; w.len()];
        for (s, n) in shards.iter().zip(&sizes) {
            for (acc, v) in g.iter_mut().zip(population_grad(&w, std::slice::from_ref(&code), s).unwrap()) {
                *acc += n / total * v;
            }
        }
        sgd_step(w.values_mut(), &g, 0.05).unwrap();
    }
    for a in &actors {
        let a = a.lock().unwrap();
        let got = a.weights().unwrap().values();
        let worst = got.iter().zip(w.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "client {} off by {worst}", a.id());
    }
    ctl.shutdown().unwrap();
}

#[test]
fn unknown_code_is_rejected_before_training() {
    let cfg = toy(2);
    let bad = ArchCode {
        input: 9,
        layer_types: vec![0; 3],
        preds: vec![None; 3],
        output: 0,
    };
    assert_eq!(cmd_train_arch(&cfg, &bad, &mut local()).unwrap_err().exit_code(), 2);
}
