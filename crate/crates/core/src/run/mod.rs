//! End-to-end commands: search, fixed-architecture training, FLACC,
//! the random-search baseline and the ablations, plus their reports.

mod config;
mod report;

pub use config::{PartitionKind, RunConfig, SyntheticTask};
pub use report::{flacc, RunReport, Seeds};

use std::collections::BTreeSet;
use std::time::Instant;

use rand::RngCore;
use thiserror::Error;

use crate::arch::ArchCode;
use crate::federation::{ClientActor, Controller, EvalReport, FederationError};
use crate::fedproto::{ChannelLink, DirectLink, FedError, Hub, Link, TransportKind};
use crate::feo::stream_rng;
use crate::graph::synthetic::federated_sbm_task;
use crate::graph::{induce_shards, load_bundle, partition_edgecut, partition_random, GraphBundle, GraphError, GraphShard, Partition};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(#[from] GraphError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<FedError> for RunError {
    fn from(e: FedError) -> Self {
        RunError::Federation(e.into())
    }
}

impl RunError {
    /// 2 config, 3 transport, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) => 2,
            RunError::Federation(FederationError::Config(_)) => 2,
            RunError::Federation(e) if e.is_numeric() => 4,
            RunError::Federation(_) | RunError::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

/// Named fixed architectures for `train`.
pub fn named_baseline(name: &str, layers: usize) -> Result<ArchCode> {
    let depth = match name {
        "gcn1" => 1,
        "gcn2" => 2,
        "gcn3" => 3,
        _ => return Err(RunError::Config(format!("unknown baseline {name:?} (expected gcn1|gcn2|gcn3)"))),
    };
    if depth > layers {
        return Err(RunError::Config(format!("{name} needs {depth} layer slots, the space has {layers}")));
    }
    // identity input/output stages; slot i reads slot i-1.
    let mut preds = vec![None; layers];
    for (i, p) in preds.iter_mut().enumerate().take(depth) {
        *p = Some(i as u8);
    }
    Ok(ArchCode {
        input: 4,
        layer_types: vec![0; layers],
        preds,
        output: 4,
    })
}

/// The full graph, its partition and the resulting shards.
pub struct Prepared {
    pub graph: GraphBundle,
    pub partition: Partition,
    pub shards: Vec<GraphShard>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let part_seed = stream_rng(cfg.seed, 0, 0, "partition").next_u64();
    let (graph, given) = match (&cfg.dataset, &cfg.synthetic) {
        (Some(dir), _) => (load_bundle(dir)?, None),
        (None, Some(task)) => {
            let (g, p) = federated_sbm_task(&task.clients, task.seed);
            (g, Some(p))
        }
        (None, None) => return Err(RunError::Config("no dataset".into())),
    };
    let partition = match cfg.partition {
        PartitionKind::Given => given.ok_or_else(|| RunError::Config("dataset has no given partition".into()))?,
        PartitionKind::Edgecut => partition_edgecut(&graph, cfg.clients, part_seed)?,
        PartitionKind::Random => partition_random(&graph, cfg.clients, part_seed)?,
    };
    let shards = induce_shards(&graph, &partition);
    for s in &shards {
        let sp = s.bundle.splits();
        if sp.train.is_empty() || sp.val.is_empty() {
            return Err(RunError::Config(format!(
                "client {} has an empty train or val split",
                s.client_id
            )));
        }
    }
    Ok(Prepared {
        graph,
        partition,
        shards,
    })
}

/// Connects the controller to one client per shard.
pub trait Launcher {
    fn launch(&mut self, cfg: &RunConfig, run_id: &str, shards: &[GraphShard]) -> Result<Vec<Box<dyn Link>>>;
}

/// In-process clients: the deterministic scheduler or one thread each.
/// `mask_seed` seeds the clients' shared group secret.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalLauncher {
    pub mask_seed: Option<u64>,
}

impl Launcher for LocalLauncher {
    fn launch(&mut self, cfg: &RunConfig, run_id: &str, shards: &[GraphShard]) -> Result<Vec<Box<dyn Link>>> {
        let mask_seed = self
            .mask_seed
            .unwrap_or_else(|| stream_rng(cfg.seed, u64::MAX, 0, "client-group-secret").next_u64());
        let actors = shards
            .iter()
            .map(|s| ClientActor::new(s.client_id, run_id, &s.bundle, mask_seed));
        match cfg.transport {
            TransportKind::Inproc => actors
                .map(|a| Ok(Box::new(DirectLink::new(a)?) as Box<dyn Link>))
                .collect(),
            TransportKind::Threads => Ok(actors
                .map(|a| Box::new(ChannelLink::spawn(a, cfg.timeout())) as Box<dyn Link>)
                .collect()),
            TransportKind::Socket => Err(RunError::Config("socket transport needs external client processes".into())),
        }
    }
}

pub fn run_id(cfg: &RunConfig) -> String {
    format!("flagcns-{:016x}", cfg.seed)
}

/// Seed for the SuperNet of `purpose` number `index`.
fn weight_seed(cfg: &RunConfig, purpose: &str, index: u64) -> u64 {
    stream_rng(cfg.seed, 0, index, purpose).next_u64()
}

struct Session {
    ctl: Controller,
    prepared: Prepared,
    start: Instant,
}

fn open(cfg: &RunConfig, launcher: &mut dyn Launcher) -> Result<Session> {
    cfg.validate()?;
    let start = Instant::now();
    let prepared = prepare(cfg)?;
    if prepared.shards.len() != cfg.clients {
        return Err(RunError::Config("partition and client count disagree".into()));
    }
    let id = run_id(cfg);
    let links = launcher.launch(cfg, &id, &prepared.shards)?;
    let hub = Hub::new(&id, links, cfg.record_transcript);
    let ctl = Controller::connect(cfg, hub)?;
    Ok(Session { ctl, prepared, start })
}

fn argmin(codes: &[ArchCode], losses: &[f64]) -> usize {
    (0..codes.len())
        .min_by(|&a, &b| losses[a].total_cmp(&losses[b]).then_with(|| codes[a].cmp(&codes[b])))
        .expect("nonempty")
}

/// Retrains `code` from fresh weights and scores it on every test split.
fn retrain(s: &mut Session, cfg: &RunConfig, code: &ArchCode, report: &mut RunReport) -> Result<()> {
    let seed = weight_seed(cfg, "retrain", 0);
    report.seeds.retrain = seed;
    s.ctl.init_supernet(seed, cfg.retrain_lr)?;
    let fll = s.ctl.train(std::slice::from_ref(code), cfg.retrain_epochs)?;
    report.final_fll = fll[0];
    let evals: Vec<EvalReport> = s.ctl.final_eval(code, cfg.timing_runs)?;
    report.set_evaluation(&evals);
    report.param_count = s.ctl.layout().param_count(code);
    report.best_code_text = code.display_with(&s.ctl.registry().names());
    report.best_code = code.clone();
    Ok(())
}

fn close(mut s: Session, mut report: RunReport) -> Result<RunReport> {
    s.ctl.shutdown()?;
    report.traffic += s.ctl.stats();
    report.transcript = s.ctl.take_transcript();
    report.edge_cut = s.prepared.partition.edge_cut(&s.prepared.graph);
    report.client_sizes = s.ctl.sizes().to_vec();
    report.wall_secs = s.start.elapsed().as_secs_f64();
    Ok(report)
}

/// End-to-end search: SuperNet training interleaved with FEO rounds,
/// then the best code of the final population is retrained for FLACC.
pub fn cmd_search(cfg: &RunConfig, launcher: &mut dyn Launcher) -> Result<RunReport> {
    let mut s = open(cfg, launcher)?;
    let mut report = RunReport::new("search", cfg);
    let space = *s.ctl.space();
    let mut rng = stream_rng(cfg.seed, 0, 0, "initial-population");
    let mut population: Vec<ArchCode> = (0..cfg.population).map(|_| ArchCode::sample(&space, &mut rng)).collect();
    let seed = weight_seed(cfg, "supernet", 0);
    report.seeds.supernet = seed;
    s.ctl.init_supernet(seed, cfg.lr)?;
    let schedule = cfg.schedule();
    for t in 1..=cfg.generations {
        let fll = s.ctl.train(&population, cfg.weight_steps)?;
        let gamma = cfg.quota_mode.effective_gamma(schedule.at(t));
        let (next, p_fl, record) = s.ctl.feo_round(t, &population, &fll, gamma)?;
        // P and P_FL are scored under the same weights: a repeated code is
        // not a new evaluation
        let distinct: BTreeSet<&ArchCode> = population.iter().chain(&p_fl).collect();
        report.candidate_evaluations += distinct.len();
        log::info!(
            "generation {t}: best FLL {:.4}, mean {:.4}, γ {:.3}",
            record.best_fll,
            record.mean_fll,
            gamma
        );
        report.fll_trajectory.push(record.best_fll);
        report.generations.push(record);
        population = next;
    }
    let fll = s.ctl.evaluate(&population)?;
    report.candidate_evaluations += population.iter().collect::<BTreeSet<_>>().len();
    let i = argmin(&population, &fll);
    report.search_fll = Some(fll[i]);
    let best = population[i].clone();
    retrain(&mut s, cfg, &best, &mut report)?;
    close(s, report)
}

/// Federated training of one fixed code from scratch.
pub fn cmd_train_arch(cfg: &RunConfig, code: &ArchCode, launcher: &mut dyn Launcher) -> Result<RunReport> {
    let mut s = open(cfg, launcher)?;
    code.validate(s.ctl.space()).map_err(|e| RunError::Config(e.to_string()))?;
    let mut report = RunReport::new("train", cfg);
    retrain(&mut s, cfg, code, &mut report)?;
    report.candidate_evaluations = 1;
    close(s, report)
}

/// FL-Random: `budget` uniformly sampled codes, each trained from fresh
/// weights for `baseline_epochs`; the best by FLL is retrained.
pub fn cmd_baseline_random(cfg: &RunConfig, budget: usize, launcher: &mut dyn Launcher) -> Result<RunReport> {
    if budget == 0 {
        return Err(RunError::Config("budget must be at least one candidate".into()));
    }
    let mut s = open(cfg, launcher)?;
    let mut report = RunReport::new("baseline", cfg);
    let space = *s.ctl.space();
    let mut rng = stream_rng(cfg.seed, 0, 0, "random-search");
    let mut best: Option<(ArchCode, f64)> = None;
    for b in 0..budget {
        let code = ArchCode::sample(&space, &mut rng);
        s.ctl.init_supernet(weight_seed(cfg, "candidate", b as u64), cfg.lr)?;
        let fll = match s.ctl.train(std::slice::from_ref(&code), cfg.baseline_epochs) {
            Ok(fll) => fll[0],
            // a candidate that diverges is a bad candidate, not a failed
            // search; the clients stopped, so start a fresh session
            Err(e) if e.is_numeric() => {
                log::warn!("candidate {b} diverged: {e}");
                report.traffic += s.ctl.stats();
                drop(s);
                s = open(cfg, launcher)?;
                f64::INFINITY
            }
            Err(e) => return Err(e.into()),
        };
        report.candidate_evaluations += 1;
        let better = match &best {
            None => true,
            Some((c, l)) => fll.total_cmp(l).then_with(|| code.cmp(c)).is_lt(),
        };
        if better {
            best = Some((code, fll));
        }
        report.fll_trajectory.push(best.as_ref().expect("set").1);
    }
    let (code, fll) = best.expect("budget ≥ 1");
    report.search_fll = Some(fll);
    retrain(&mut s, cfg, &code, &mut report)?;
    close(s, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    ControllerOnly,
    ClientOnly,
    RandomPartition,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "controller-only" => Ok(Ablation::ControllerOnly),
            "client-only" => Ok(Ablation::ClientOnly),
            "random-partition" => Ok(Ablation::RandomPartition),
            _ => Err(format!(
                "unknown ablation {s:?} (expected controller-only|client-only|random-partition)"
            )),
        }
    }
}

impl Ablation {
    /// `cfg` with the variant's single override applied.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::ControllerOnly => c.quota_mode = crate::feo::QuotaMode::ControllerOnly,
            Ablation::ClientOnly => c.quota_mode = crate::feo::QuotaMode::ClientOnly,
            Ablation::RandomPartition => c.partition = PartitionKind::Random,
        }
        c
    }
}

pub fn cmd_ablation(cfg: &RunConfig, variant: Ablation, launcher: &mut dyn Launcher) -> Result<RunReport> {
    let mut report = cmd_search(&variant.apply(cfg), launcher)?;
    report.command = "ablation".into();
    Ok(report)
}

/// Deterministic in-process clients, for tests and the library API.
pub fn local() -> LocalLauncher {
    LocalLauncher::default()
}
