//! `flagcns` command line: partition a dataset, run the federated search,
//! train a fixed architecture, compute FLACC, and run the baselines.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};

use clap::{Args, Parser, Subcommand};

use flagcns::arch::ArchCode;
use flagcns::federation::ClientActor;
use flagcns::fedproto::{accept_clients, serve_client, Link, Scheme, TransportKind};
use flagcns::graph::{load_bundle, write_shards, GraphShard};
use flagcns::run::{
    cmd_ablation, cmd_baseline_random, cmd_search, cmd_train_arch, flacc, named_baseline, prepare, Ablation, Launcher,
    LocalLauncher, PartitionKind, RunConfig, RunError, RunReport, SyntheticTask,
};

#[derive(Parser)]
#[command(name = "flagcns", version, about = "Federated evolutionary GCN architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split a dataset into client shards.
    Partition(RunArgs),
    /// Run the full search and retrain the winner.
    Search(RunArgs),
    /// Federated training of one fixed architecture.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Architecture in text form, e.g. "IS4 | L1:gcn<-0 L2:gcn<-1 L3:None | OS4".
        #[arg(long, conflicts_with = "baseline")]
        arch: Option<String>,
        /// Named architecture: gcn1, gcn2 or gcn3.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test-size-weighted mean of per-client accuracies.
    Flacc {
        #[arg(long, value_delimiter = ',', required = true)]
        acc: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Random-search baseline.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        /// Number of candidate architectures.
        #[arg(long, default_value_t = 100)]
        budget: usize,
    },
    /// The search with one component changed.
    Ablation {
        #[command(flatten)]
        run: RunArgs,
        /// Client quotas forced to zero.
        #[arg(long, group = "variant")]
        controller_only: bool,
        /// Controller quota forced to zero.
        #[arg(long, group = "variant")]
        client_only: bool,
        /// Random instead of edge-cut partitioning.
        #[arg(long, group = "variant")]
        random_partition: bool,
    },
    /// Serve one client over TCP (socket transport).
    Client {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        client_id: usize,
        /// The client's shard bundle directory.
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        run_id: String,
        /// Seed of the clients' shared masking secret.
        #[arg(long)]
        mask_seed: u64,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON RunConfig; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Use the built-in three-client block-model task with this seed.
    #[arg(long, conflicts_with = "dataset")]
    synthetic: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    partition: Option<PartitionKind>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    layer_types: Option<Vec<String>>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    weight_steps: Option<usize>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    gamma_decay: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    cipher: Option<Scheme>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "FLAGCNS_TRANSPORT")]
    transport: Option<TransportKind>,
    /// Controller address for the socket transport.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    #[arg(long)]
    retrain_lr: Option<f64>,
    #[arg(long)]
    baseline_epochs: Option<usize>,
    #[arg(long)]
    timing_runs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Seconds to wait for a client reply.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    record_transcript: bool,
}

macro_rules! set {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
            cfg.synthetic = None;
        }
        if let Some(seed) = self.synthetic {
            cfg.synthetic = Some(SyntheticTask::three_client(seed));
            cfg.dataset = None;
            if self.partition.is_none() {
                cfg.partition = PartitionKind::Given;
            }
        }
        set!(
            cfg,
            self,
            clients,
            partition,
            population,
            layers,
            layer_types,
            generations,
            weight_steps,
            gamma0,
            gamma_decay,
            lr,
            cipher,
            seed,
            transport,
            retrain_epochs,
            retrain_lr,
            baseline_epochs,
            timing_runs
        );
        if let Some(l) = &self.listen {
            cfg.listen = Some(l.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(d) = self.dropout {
            cfg.regularization.dropout = d;
        }
        if let Some(w) = self.weight_decay {
            cfg.regularization.weight_decay = w;
        }
        if let Some(t) = self.timeout {
            cfg.timeout_secs = t;
        }
        cfg.record_transcript |= self.record_transcript;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs each client as a child process of this executable and connects
/// to them over TCP.
struct SocketLauncher {
    children: Vec<Child>,
}

impl Launcher for SocketLauncher {
    fn launch(&mut self, cfg: &RunConfig, run_id: &str, shards: &[GraphShard]) -> Result<Vec<Box<dyn Link>>, RunError> {
        let io = |e: std::io::Error| RunError::Io(e.to_string());
        let dir = cfg
            .out
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join(run_id))
            .join("shards");
        write_shards(shards, &dir)?;
        let listener = TcpListener::bind(cfg.listen.as_deref().unwrap_or("127.0.0.1:0")).map_err(io)?;
        let addr = listener.local_addr().map_err(io)?;
        let exe = std::env::current_exe().map_err(io)?;
        // the masking secret is shared by the clients only
        let mask_seed: u64 = rand_seed();
        for s in shards {
            let child = Command::new(&exe)
                .arg("client")
                .args(["--connect", &addr.to_string()])
                .args(["--client-id", &s.client_id.to_string()])
                .arg("--shard")
                .arg(dir.join(format!("client_{}", s.client_id)))
                .args(["--run-id", run_id])
                .args(["--mask-seed", &mask_seed.to_string()])
                .stdin(Stdio::null())
                .spawn()
                .map_err(io)?;
            self.children.push(child);
        }
        let links = accept_clients(&listener, shards.len(), cfg.timeout())?;
        Ok(links.into_iter().map(|l| Box::new(l) as Box<dyn Link>).collect())
    }
}

impl Drop for SocketLauncher {
    fn drop(&mut self) {
        for c in &mut self.children {
            let _ = c.wait();
        }
    }
}

fn rand_seed() -> u64 {
    use std::hash::{BuildHasher, Hasher};
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos()));
    h.finish()
}

fn with_launcher<T>(
    cfg: &RunConfig,
    f: impl FnOnce(&mut dyn Launcher) -> Result<T, RunError>,
) -> Result<T, RunError> {
    match cfg.transport {
        TransportKind::Socket => f(&mut SocketLauncher { children: Vec::new() }),
        _ => f(&mut LocalLauncher::default()),
    }
}

fn finish(cfg: &RunConfig, report: RunReport) -> Result<(), RunError> {
    if let Some(out) = &cfg.out {
        report.write(out)?;
        log::info!("wrote {}", out.join("run.json").display());
    }
    // a closed stdout (e.g. piped into head) is not an error
    let _ = writeln!(std::io::stdout(), "{}", report.to_json());
    Ok(())
}

fn partition(cfg: &RunConfig) -> Result<(), RunError> {
    let p = prepare(cfg)?;
    let summary = serde_json::json!({
        "clients": p.shards.len(),
        "part_sizes": p.partition.part_sizes(),
        "edge_cut": p.partition.edge_cut(&p.graph),
        "edges": p.graph.edges().len(),
    });
    if let Some(out) = &cfg.out {
        write_shards(&p.shards, out)?;
        std::fs::write(out.join("partition.json"), serde_json::to_vec_pretty(&p.partition).expect("serialises"))
            .map_err(|e| RunError::Io(e.to_string()))?;
    }
    println!("{summary}");
    Ok(())
}

fn client(connect: &str, id: usize, shard: &Path, run_id: &str, mask_seed: u64) -> Result<(), RunError> {
    let bundle = load_bundle(shard)?;
    let mut actor = ClientActor::new(id, run_id, &bundle, mask_seed);
    let mut stream = TcpStream::connect(connect).map_err(|e| RunError::Io(format!("{connect}: {e}")))?;
    stream.set_nodelay(true).map_err(|e| RunError::Io(e.to_string()))?;
    serve_client(&mut actor, &mut stream)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Cmd::Partition(args) => partition(&args.config()?),
        Cmd::Search(args) => {
            let cfg = args.config()?;
            let report = with_launcher(&cfg, |l| cmd_search(&cfg, l))?;
            finish(&cfg, report)
        }
        Cmd::Train {
            run,
            arch,
            baseline,
            epochs,
        } => {
            let mut cfg = run.config()?;
            if let Some(e) = epochs {
                if e == 0 {
                    return Err(RunError::Config("epochs must be at least 1".into()));
                }
                cfg.retrain_epochs = e;
            }
            let code = match (arch, baseline) {
                (Some(text), _) => {
                    let names: Vec<&str> = cfg.layer_types.iter().map(String::as_str).collect();
                    ArchCode::parse_with(&text, &names, cfg.layers).map_err(|e| RunError::Config(e.to_string()))?
                }
                (None, Some(name)) => named_baseline(&name, cfg.layers)?,
                (None, None) => named_baseline("gcn2", cfg.layers)?,
            };
            let report = with_launcher(&cfg, |l| cmd_train_arch(&cfg, &code, l))?;
            finish(&cfg, report)
        }
        Cmd::Flacc { acc, sizes } => {
            println!("{}", flacc(&acc, &sizes)?);
            Ok(())
        }
        Cmd::Baseline { run, budget } => {
            let cfg = run.config()?;
            let report = with_launcher(&cfg, |l| cmd_baseline_random(&cfg, budget, l))?;
            finish(&cfg, report)
        }
        Cmd::Ablation {
            run,
            controller_only,
            client_only,
            random_partition,
        } => {
            let variant = match (controller_only, client_only, random_partition) {
                (true, _, _) => Ablation::ControllerOnly,
                (_, true, _) => Ablation::ClientOnly,
                (_, _, true) => Ablation::RandomPartition,
                _ => {
                    return Err(RunError::Config(
                        "choose --controller-only, --client-only or --random-partition".into(),
                    ))
                }
            };
            let cfg = run.config()?;
            let report = with_launcher(&cfg, |l| cmd_ablation(&cfg, variant, l))?;
            finish(&cfg, report)
        }
        Cmd::Client {
            connect,
            client_id,
            shard,
            run_id,
            mask_seed,
        } => client(&connect, client_id, &shard, &run_id, mask_seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
