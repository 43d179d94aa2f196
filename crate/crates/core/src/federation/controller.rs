use std::time::Instant;

use crate::arch::{ArchCode, SpaceConfig};
use crate::feo::{assemble, evolve, quotas, stream_rng, EvoConfig, GenerationRecord};
use crate::fedproto::cipher::{aggregate_grads, aggregate_losses, encrypt, AggregationWeights, Scheme};
use crate::fedproto::wire::{Body, ClientSetup, Envelope, Phase};
use crate::fedproto::{FedError, Hub, TrafficStats, Transcript};
use crate::supernet::{Layout, LayerRegistry};

use super::{FederationError, Result};
use crate::run::RunConfig;

/// Split sizes a client announced in its `Hello`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClientSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Per-client outcome of a final evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub test_size: usize,
    pub inference_secs: f64,
}

/// Controller side of Algorithms 1–2: drives clients through a [`Hub`]
/// and never sees a shard or a replica.
pub struct Controller {
    hub: Hub,
    cfg: RunConfig,
    space: SpaceConfig,
    registry: LayerRegistry,
    sizes: Vec<ClientSizes>,
    train_w: AggregationWeights,
    val_w: AggregationWeights,
    layout: Layout,
}

fn unexpected(expected: &'static str, got: &Body) -> FederationError {
    FederationError::Fed(FedError::Unexpected {
        expected,
        got: got.tag(),
    })
}

impl Controller {
    /// Collects every client's `Hello` and fixes the aggregation weights.
    pub fn connect(cfg: &RunConfig, mut hub: Hub) -> Result<Self> {
        let registry = LayerRegistry::from_names(&cfg.layer_types).map_err(FederationError::Config)?;
        let space = SpaceConfig::new(cfg.layers, registry.len()).map_err(|e| FederationError::Config(e.to_string()))?;
        let hellos = hub.gather()?;
        let mut sizes = Vec::with_capacity(hellos.len());
        let mut dims = None;
        for (i, env) in hellos.iter().enumerate() {
            match &env.body {
                Body::Hello {
                    client,
                    num_features,
                    num_classes,
                    train,
                    val,
                    test,
                } => {
                    if *client != i {
                        return Err(FederationError::Config(format!("link {i} is client {client}")));
                    }
                    if *dims.get_or_insert((*num_features, *num_classes)) != (*num_features, *num_classes) {
                        return Err(FederationError::Config(format!("client {i} has different feature/class counts")));
                    }
                    sizes.push(ClientSizes {
                        train: *train,
                        val: *val,
                        test: *test,
                    });
                }
                other => return Err(unexpected("Hello", other)),
            }
        }
        let (f, c) = dims.ok_or_else(|| FederationError::Config("no clients".into()))?;
        let train_w = AggregationWeights::from_sizes(&sizes.iter().map(|s| s.train).collect::<Vec<_>>())?;
        let val_w = AggregationWeights::from_sizes(&sizes.iter().map(|s| s.val).collect::<Vec<_>>())?;
        let layout = Layout::new(&space, &registry, f, c).map_err(|e| FederationError::Config(e.to_string()))?;
        hub.set_layout_hash(&layout.hash());
        Ok(Self {
            hub,
            cfg: cfg.clone(),
            space,
            registry,
            sizes,
            train_w,
            val_w,
            layout,
        })
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.space
    }

    pub fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn sizes(&self) -> &[ClientSizes] {
        &self.sizes
    }

    pub fn num_clients(&self) -> usize {
        self.sizes.len()
    }

    pub fn stats(&self) -> TrafficStats {
        self.hub.stats()
    }

    pub fn take_transcript(&mut self) -> Option<Transcript> {
        self.hub.take_transcript()
    }

    fn evo(&self) -> EvoConfig {
        self.cfg.evo
    }

    /// (Re)initialises every replica from `seed`; `lr` is the clients'
    /// step size until the next initialisation.
    pub fn init_supernet(&mut self, seed: u64, lr: f64) -> Result<()> {
        let n = self.num_clients();
        let cfg = &self.cfg;
        let evo = cfg.evo;
        let mutation_rate = evo.mutation_rate_for(&self.space);
        let (train_w, val_w) = (self.train_w.coeffs().to_vec(), self.val_w.coeffs().to_vec());
        let hash = self.layout.hash();
        self.hub.broadcast_each(|i| Body::InitSuperNet {
            seed,
            layout_hash: hash.clone(),
            setup: ClientSetup {
                num_clients: n,
                layers: cfg.layers,
                layer_types: cfg.layer_types.clone(),
                lr,
                scheme: cfg.cipher,
                train_coeff: train_w[i],
                val_coeff: val_w[i],
                population: cfg.population,
                crossover_prob: evo.crossover_prob,
                mutation_rate,
                tournament: evo.tournament,
                regularization: cfg.regularization,
                run_seed: cfg.seed,
            },
        })?;
        Ok(())
    }

    fn fll_from(&self, replies: Vec<Envelope>, codes: &[ArchCode]) -> Result<Vec<f64>> {
        let mut ciphers = Vec::with_capacity(replies.len());
        for env in replies {
            match env.body {
                Body::LossReport { codes: c, cipher } => {
                    if c != codes {
                        return Err(FederationError::Fed(FedError::Mismatch("loss report for a different code list".into())));
                    }
                    ciphers.push(cipher);
                }
                other => return Err(unexpected("LossReport", &other)),
            }
        }
        Ok(aggregate_losses(&ciphers, &self.val_w)?)
    }

    /// `steps` federated SuperNet updates on `population`, then
    /// the federated val loss of every member.
    pub fn train(&mut self, population: &[ArchCode], steps: usize) -> Result<Vec<f64>> {
        self.hub.broadcast(Body::PopulationBroadcast {
            population: population.to_vec(),
            phase: Phase::Train { steps },
        })?;
        for _ in 0..steps {
            let mut ciphers = Vec::with_capacity(self.num_clients());
            for env in self.hub.gather()? {
                match env.body {
                    Body::GradientReport { cipher } => ciphers.push(cipher),
                    other => return Err(unexpected("GradientReport", &other)),
                }
            }
            if let Some(c) = ciphers.iter().find(|c| c.len != self.layout.total) {
                return Err(FederationError::Fed(FedError::Mismatch(format!(
                    "gradient of length {} for a layout of {}",
                    c.len, self.layout.total
                ))));
            }
            let dw = aggregate_grads(&ciphers, &self.train_w, population.len())?;
            if dw.iter().any(|v| !v.is_finite()) {
                return Err(FederationError::Numeric("aggregated gradient is not finite".into()));
            }
            let cipher = encrypt(&dw, 1.0, Scheme::Plain, None, 0)?;
            self.hub.broadcast(Body::GradientBroadcast { cipher })?;
        }
        let replies = self.hub.gather()?;
        self.fll_from(replies, population)
    }

    /// Federated val loss of `population` under the current weights.
    pub fn evaluate(&mut self, population: &[ArchCode]) -> Result<Vec<f64>> {
        self.hub.broadcast(Body::PopulationBroadcast {
            population: population.to_vec(),
            phase: Phase::Evaluate,
        })?;
        let replies = self.hub.gather()?;
        self.fll_from(replies, population)
    }

    /// One FEO round on `population` whose FLL is `fll`.
    /// Returns the next shared population, `P_FL`, and the generation's
    /// record.
    pub fn feo_round(
        &mut self,
        t: usize,
        population: &[ArchCode],
        fll: &[f64],
        gamma: f64,
    ) -> Result<(Vec<ArchCode>, Vec<ArchCode>, GenerationRecord)> {
        let start = Instant::now();
        let mut rng = stream_rng(self.cfg.seed, 0, t as u64, "controller");
        let p_fl = evolve(population, fll, &self.space, &self.evo(), &mut rng)?;
        let val_sizes: Vec<usize> = self.sizes.iter().map(|s| s.val).collect();
        let (client_q, controller_q) = quotas(population.len(), gamma, &val_sizes)?;
        self.hub.broadcast_each(|i| Body::GammaBroadcast {
            generation: t,
            gamma,
            quota: client_q[i],
        })?;
        self.hub.broadcast(Body::PopulationBroadcast {
            population: p_fl.clone(),
            phase: Phase::Evolve,
        })?;
        let mut elites = Vec::with_capacity(self.num_clients());
        let mut ciphers = Vec::with_capacity(self.num_clients());
        let mut best_local = Vec::with_capacity(self.num_clients());
        for (i, env) in self.hub.gather()?.into_iter().enumerate() {
            match env.body {
                Body::ElitesReport {
                    elites: e,
                    codes,
                    cipher,
                    best_local_loss,
                } => {
                    if codes != p_fl {
                        return Err(FederationError::Fed(FedError::Mismatch("elites report for a different P_FL".into())));
                    }
                    if e.len() != client_q[i] {
                        return Err(FederationError::Feo(crate::feo::FeoError::EliteCount {
                            expected: client_q[i],
                            got: e.len(),
                        }));
                    }
                    for c in &e {
                        c.validate(&self.space).map_err(|err| FederationError::Config(format!("client {i}: {err}")))?;
                    }
                    elites.push(e);
                    ciphers.push(cipher);
                    best_local.push(best_local_loss);
                }
                other => return Err(unexpected("ElitesReport", &other)),
            }
        }
        let fll_fl = aggregate_losses(&ciphers, &self.val_w)?;
        let next = assemble(&elites, &p_fl, &fll_fl, controller_q, population.len())?;
        let best = fll_fl
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then_with(|| p_fl[a.0].cmp(&p_fl[b.0])))
            .map(|(i, _)| i)
            .expect("nonempty");
        let record = GenerationRecord {
            generation: t,
            gamma,
            best_fll: fll_fl[best],
            mean_fll: fll_fl.iter().sum::<f64>() / fll_fl.len() as f64,
            best_code: p_fl[best].clone(),
            client_best_local_loss: best_local,
            client_elites: client_q,
            controller_elites: controller_q,
            population: next.clone(),
            wall_secs: start.elapsed().as_secs_f64(),
        };
        Ok((next, p_fl, record))
    }

    /// Test accuracy and inference time of `code` on every client under
    /// the current weights.
    pub fn final_eval(&mut self, code: &ArchCode, timing_runs: usize) -> Result<Vec<EvalReport>> {
        self.hub.broadcast(Body::FinalEvalRequest {
            code: code.clone(),
            timing_runs,
        })?;
        self.hub
            .gather()?
            .into_iter()
            .map(|env| match env.body {
                Body::FinalEvalReport {
                    accuracy,
                    test_size,
                    inference_secs,
                } => Ok(EvalReport {
                    accuracy,
                    test_size,
                    inference_secs,
                }),
                other => Err(unexpected("FinalEvalReport", &other)),
            })
            .collect()
    }

    pub fn shutdown(&mut self) -> Result<()> {
        Ok(self.hub.shutdown()?)
    }
}
