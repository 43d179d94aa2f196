use std::collections::HashMap;
use std::time::Instant;

use crate::arch::{ArchCode, SpaceConfig};
use crate::feo::{stream_rng, ClientEvolver, EvoConfig, StepError};
use crate::fedproto::cipher::{clip, encrypt, group_secret, MaskKey, Scheme, GRAD_CLIP};
use crate::fedproto::wire::{encode, Body, ClientSetup, Envelope, Inbox, Party, Phase};
use crate::fedproto::{decrypt, FedError, FrameHandler};
use crate::graph::GraphBundle;
use crate::supernet::{
    accuracy, forward, local_val_loss, population_grad_with, LayerRegistry, ShardData, Split, SuperNetError,
    SuperNetWeights,
};
use crate::tensor::{sgd_step, TensorError};

/// Replica state created by `InitSuperNet`.
struct Replica {
    setup: ClientSetup,
    cfg: SpaceConfig,
    weights: SuperNetWeights,
    key: Option<MaskKey>,
    population: Vec<ArchCode>,
    remaining_steps: usize,
    steps_taken: u64,
    evolver: Option<ClientEvolver>,
    quota: usize,
    generation: usize,
    /// Val losses under the current weights.
    cache: HashMap<ArchCode, f64>,
}

/// One client: owns its shard and SuperNet replica, and answers
/// controller frames.
pub struct ClientActor {
    id: usize,
    run_id: String,
    bundle_sizes: (usize, usize, usize),
    num_features: usize,
    num_classes: usize,
    shard: ShardData,
    secret: [u8; 32],
    inbox: Inbox,
    round: u64,
    layout_hash: String,
    replica: Option<Replica>,
    finished: bool,
}

#[derive(Debug)]
enum Fault {
    Fed(FedError),
    Net(SuperNetError),
    Protocol(String),
}

impl From<FedError> for Fault {
    fn from(e: FedError) -> Self {
        Fault::Fed(e)
    }
}

impl From<SuperNetError> for Fault {
    fn from(e: SuperNetError) -> Self {
        Fault::Net(e)
    }
}

impl From<TensorError> for Fault {
    fn from(e: TensorError) -> Self {
        Fault::Net(e.into())
    }
}

impl Fault {
    fn numeric(&self) -> bool {
        match self {
            Fault::Fed(e) => e.is_numeric(),
            Fault::Net(SuperNetError::Tensor(TensorError::NonFinite(_))) => true,
            _ => false,
        }
    }
}

impl ClientActor {
    /// `mask_seed` feeds the clients' shared group secret; the controller
    /// never receives it.
    pub fn new(id: usize, run_id: &str, bundle: &GraphBundle, mask_seed: u64) -> Self {
        let s = bundle.splits();
        Self {
            id,
            run_id: run_id.to_string(),
            bundle_sizes: (s.train.len(), s.val.len(), s.test.len()),
            num_features: bundle.num_features(),
            num_classes: bundle.num_classes(),
            shard: ShardData::new(bundle),
            secret: group_secret(mask_seed, run_id),
            inbox: Inbox::new(run_id),
            round: 0,
            layout_hash: String::new(),
            replica: None,
            finished: false,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Current replica weights, if initialised.
    pub fn weights(&self) -> Option<&SuperNetWeights> {
        self.replica.as_ref().map(|r| &r.weights)
    }

    fn frame(&mut self, body: Body) -> Vec<u8> {
        self.round += 1;
        encode(&Envelope {
            run_id: self.run_id.clone(),
            sender: Party::Client(self.id),
            round: self.round,
            layout_hash: self.layout_hash.clone(),
            body,
        })
    }

    fn replica(&mut self) -> Result<&mut Replica, Fault> {
        self.replica
            .as_mut()
            .ok_or_else(|| Fault::Protocol("message before InitSuperNet".into()))
    }

    fn init(&mut self, seed: u64, layout_hash: String, setup: ClientSetup) -> Result<(), Fault> {
        let registry = LayerRegistry::from_names(&setup.layer_types).map_err(Fault::Protocol)?;
        let cfg = SpaceConfig::new(setup.layers, registry.len()).map_err(|e| Fault::Net(e.into()))?;
        let weights = SuperNetWeights::build(&cfg, &registry, self.num_features, self.num_classes, seed)?;
        let mine = weights.layout().hash();
        if mine != layout_hash {
            return Err(Fault::Fed(FedError::LayoutMismatch {
                expected: layout_hash,
                got: mine,
            }));
        }
        self.layout_hash = mine;
        self.inbox.set_layout_hash(&self.layout_hash);
        let key = (setup.scheme == Scheme::Mask).then(|| MaskKey::new(&self.secret, self.id, setup.num_clients));
        self.replica = Some(Replica {
            setup,
            cfg,
            weights,
            key,
            population: Vec::new(),
            remaining_steps: 0,
            steps_taken: 0,
            evolver: None,
            quota: 0,
            generation: 0,
            cache: HashMap::new(),
        });
        Ok(())
    }

    fn val_losses(&mut self, codes: &[ArchCode]) -> Result<Vec<f64>, Fault> {
        let shard = &self.shard;
        let r = self.replica.as_mut().expect("initialised");
        codes
            .iter()
            .map(|c| {
                if let Some(&v) = r.cache.get(c) {
                    return Ok(v);
                }
                let v = local_val_loss(&r.weights, c, shard)?;
                r.cache.insert(c.clone(), v);
                Ok(v)
            })
            .collect()
    }

    fn loss_report(&mut self, nonce: u64) -> Result<Body, Fault> {
        let codes = self.replica()?.population.clone();
        let losses = self.val_losses(&codes)?;
        let r = self.replica()?;
        let cipher = encrypt(&losses, r.setup.val_coeff, r.setup.scheme, r.key.as_ref(), nonce)?;
        Ok(Body::LossReport { codes, cipher })
    }

    fn gradient_report(&mut self, nonce: u64) -> Result<Body, Fault> {
        let id = self.id;
        let shard = &self.shard;
        let r = self.replica.as_mut().expect("initialised");
        let seed = stream_rng(r.setup.run_seed, id as u64 + 1, r.steps_taken, "dropout").next_seed();
        let mut g = population_grad_with(&r.weights, &r.population, shard, r.setup.regularization, seed)?;
        if r.setup.scheme == Scheme::Mask {
            let n = clip(&mut g, GRAD_CLIP);
            if n > 0 {
                log::warn!("client {id}: clipped {n} gradient entries to ±{GRAD_CLIP}");
            }
        }
        let cipher = encrypt(&g, r.setup.train_coeff, r.setup.scheme, r.key.as_ref(), nonce)?;
        Ok(Body::GradientReport { cipher })
    }

    fn evolve(&mut self, p_fl: Vec<ArchCode>, nonce: u64) -> Result<Body, Fault> {
        let id = self.id;
        let shard = &self.shard;
        let r = self.replica.as_mut().expect("initialised");
        let evo = EvoConfig {
            tournament: r.setup.tournament,
            crossover_prob: r.setup.crossover_prob,
            mutation_rate: Some(r.setup.mutation_rate),
        };
        let mut rng = stream_rng(r.setup.run_seed, id as u64 + 1, r.generation as u64, "client");
        let evolver = r.evolver.get_or_insert_with(|| ClientEvolver::new(p_fl.clone()));
        let (weights, cache) = (&r.weights, &mut r.cache);
        let mut loss = |c: &ArchCode| -> Result<f64, SuperNetError> {
            if let Some(&v) = cache.get(c) {
                return Ok(v);
            }
            let v = local_val_loss(weights, c, shard)?;
            cache.insert(c.clone(), v);
            Ok(v)
        };
        let step = evolver
            .step(&p_fl, &mut loss, r.quota, &r.cfg, &evo, &mut rng)
            .map_err(|e| match e {
                StepError::Feo(e) => Fault::Protocol(e.to_string()),
                StepError::Loss(e) => Fault::Net(e),
            })?;
        let cipher = encrypt(&step.fl_losses, r.setup.val_coeff, r.setup.scheme, r.key.as_ref(), nonce)?;
        Ok(Body::ElitesReport {
            elites: step.elites,
            codes: p_fl,
            cipher,
            best_local_loss: step.best_local_loss,
        })
    }

    fn final_eval(&mut self, code: ArchCode, timing_runs: usize) -> Result<Body, Fault> {
        let shard = &self.shard;
        let r = self.replica.as_ref().ok_or_else(|| Fault::Protocol("message before InitSuperNet".into()))?;
        let (acc, n) = accuracy(&r.weights, &code, shard, Split::Test)?;
        let mut times = Vec::with_capacity(timing_runs);
        for _ in 0..timing_runs {
            let start = Instant::now();
            forward(&r.weights, &code, shard)?;
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let inference_secs = times.get(times.len() / 2).copied().unwrap_or(0.0);
        Ok(Body::FinalEvalReport {
            accuracy: acc,
            test_size: n,
            inference_secs,
        })
    }

    fn dispatch(&mut self, env: Envelope) -> Result<Option<Body>, Fault> {
        let nonce = env.round;
        Ok(match env.body {
            Body::InitSuperNet {
                seed,
                layout_hash,
                setup,
            } => {
                self.init(seed, layout_hash, setup)?;
                None
            }
            Body::PopulationBroadcast { population, phase } => {
                let r = self.replica()?;
                r.population = population;
                match phase {
                    Phase::Train { steps } => {
                        if r.evolver.is_none() {
                            r.evolver = Some(ClientEvolver::new(r.population.clone()));
                        }
                        r.remaining_steps = steps;
                        if steps == 0 {
                            Some(self.loss_report(nonce)?)
                        } else {
                            Some(self.gradient_report(nonce)?)
                        }
                    }
                    Phase::Evaluate => Some(self.loss_report(nonce)?),
                    Phase::Evolve => {
                        let p_fl = std::mem::take(&mut r.population);
                        Some(self.evolve(p_fl, nonce)?)
                    }
                }
            }
            Body::GradientBroadcast { cipher } => {
                let r = self.replica()?;
                if r.remaining_steps == 0 {
                    return Err(Fault::Protocol("unexpected GradientBroadcast".into()));
                }
                let dw = decrypt(&cipher);
                sgd_step(r.weights.values_mut(), &dw, r.setup.lr)?;
                r.cache.clear();
                r.remaining_steps -= 1;
                r.steps_taken += 1;
                if r.remaining_steps > 0 {
                    Some(self.gradient_report(nonce)?)
                } else {
                    Some(self.loss_report(nonce)?)
                }
            }
            Body::GammaBroadcast { generation, quota, .. } => {
                let r = self.replica()?;
                r.generation = generation;
                r.quota = quota;
                None
            }
            Body::FinalEvalRequest { code, timing_runs } => Some(self.final_eval(code, timing_runs)?),
            Body::Shutdown => {
                self.finished = true;
                None
            }
            other => return Err(Fault::Protocol(format!("client cannot handle {}", other.tag()))),
        })
    }
}

trait NextSeed {
    fn next_seed(self) -> u64;
}

impl NextSeed for rand_chacha::ChaCha8Rng {
    fn next_seed(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

impl FrameHandler for ClientActor {
    fn greet(&mut self) -> Result<Vec<Vec<u8>>, FedError> {
        let (train, val, test) = self.bundle_sizes;
        let hello = Body::Hello {
            client: self.id,
            num_features: self.num_features,
            num_classes: self.num_classes,
            train,
            val,
            test,
        };
        Ok(vec![self.frame(hello)])
    }

    fn handle(&mut self, frame: &[u8]) -> Result<Vec<Vec<u8>>, FedError> {
        if self.finished {
            return Err(FedError::Transport(format!("client {} has shut down", self.id)));
        }
        let env = self.inbox.accept(frame, Party::Controller)?;
        match self.dispatch(env) {
            Ok(Some(body)) => Ok(vec![self.frame(body)]),
            Ok(None) => Ok(vec![]),
            Err(fault) => {
                let numeric = fault.numeric();
                let reason = match &fault {
                    Fault::Fed(e) => e.to_string(),
                    Fault::Net(e) => e.to_string(),
                    Fault::Protocol(m) => m.clone(),
                };
                log::error!("client {}: {reason}", self.id);
                self.finished = true;
                Ok(vec![self.frame(Body::Failure { numeric, reason })])
            }
        }
    }

    fn finished(&self) -> bool {
        self.finished
    }
}
