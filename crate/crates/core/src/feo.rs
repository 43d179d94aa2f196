//! Federated evolutionary optimisation: the γ schedule, one generational
//! EA step, elite selection, quota arithmetic, and the controller- and
//! client-side halves of a round.
//!
//! Fitness is the negated loss throughout, so "best" means lowest loss.
//! Ties are broken by code order, which keeps every selection
//! deterministic.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{ArchCode, SpaceConfig};

#[derive(Debug, Error)]
pub enum FeoError {
    #[error("empty population")]
    EmptyPopulation,
    #[error("{codes} codes but {losses} losses")]
    LengthMismatch { codes: usize, losses: usize },
    #[error("quota {quota} exceeds population of {available}")]
    QuotaTooLarge { quota: usize, available: usize },
    #[error("non-finite loss {0}")]
    NonFinite(f64),
    #[error("assembled {got} individuals, expected {expected}")]
    EliteCount { expected: usize, got: usize },
    #[error("invalid setting: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FeoError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub gamma0: f64,
    pub decay: f64,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        Self {
            gamma0: 0.5,
            decay: 0.99,
        }
    }
}

impl GammaSchedule {
    /// `γ₀ · decay^t` for generation `t ≥ 1`.
    pub fn at(&self, t: usize) -> f64 {
        self.gamma0 * self.decay.powi(t as i32)
    }
}

/// `0.5 · 0.99^t`.
pub fn gamma(t: usize) -> f64 {
    GammaSchedule::default().at(t)
}

/// Which parties contribute to the next population.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuotaMode {
    /// Clients get the γ share, the controller the rest.
    #[default]
    Full,
    /// Client quotas forced to zero.
    ControllerOnly,
    /// Controller quota forced to zero.
    ClientOnly,
}

impl QuotaMode {
    pub fn effective_gamma(self, gamma: f64) -> f64 {
        match self {
            QuotaMode::Full => gamma,
            QuotaMode::ControllerOnly => 0.0,
            QuotaMode::ClientOnly => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Initial,
    Federated,
    Client(usize),
}

/// A code with the loss it was last scored at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub code: ArchCode,
    pub loss: Option<f64>,
    pub origin: Origin,
}

impl Individual {
    pub fn fitness(&self) -> Option<f64> {
        self.loss.map(|l| -l)
    }
}

/// Operators of one generational step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvoConfig {
    pub tournament: usize,
    pub crossover_prob: f64,
    /// Per-gene mutation probability; `None` means `1/(2L+2)`.
    pub mutation_rate: Option<f64>,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            tournament: 2,
            crossover_prob: 0.9,
            mutation_rate: None,
        }
    }
}

impl EvoConfig {
    pub fn mutation_rate_for(&self, cfg: &SpaceConfig) -> f64 {
        self.mutation_rate.unwrap_or(1.0 / cfg.gene_count() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tournament == 0 {
            return Err(FeoError::Config("tournament size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err(FeoError::Config("crossover probability outside [0,1]".into()));
        }
        if let Some(r) = self.mutation_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(FeoError::Config("mutation rate outside [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Independent RNG stream for `(run seed, party, generation, purpose)`.
pub fn stream_rng(seed: u64, party: u64, generation: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"flagcns/stream");
    h.update(seed.to_le_bytes());
    h.update(party.to_le_bytes());
    h.update(generation.to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn check(codes: &[ArchCode], losses: &[f64]) -> Result<()> {
    if codes.len() != losses.len() {
        return Err(FeoError::LengthMismatch {
            codes: codes.len(),
            losses: losses.len(),
        });
    }
    if let Some(&bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(FeoError::NonFinite(bad));
    }
    Ok(())
}

fn better(codes: &[ArchCode], losses: &[f64], a: usize, b: usize) -> Ordering {
    losses[a]
        .partial_cmp(&losses[b])
        .expect("finite losses")
        .then_with(|| codes[a].cmp(&codes[b]))
        .then(a.cmp(&b))
}

/// Indices of all codes, best first.
pub fn ranking(codes: &[ArchCode], losses: &[f64]) -> Result<Vec<usize>> {
    check(codes, losses)?;
    let mut idx: Vec<usize> = (0..codes.len()).collect();
    idx.sort_by(|&a, &b| better(codes, losses, a, b));
    Ok(idx)
}

/// Indices of the `quota` lowest-loss codes, best first.
pub fn select_elites(codes: &[ArchCode], losses: &[f64], quota: usize) -> Result<Vec<usize>> {
    if quota > codes.len() {
        return Err(FeoError::QuotaTooLarge {
            quota,
            available: codes.len(),
        });
    }
    let mut idx = ranking(codes, losses)?;
    idx.truncate(quota);
    Ok(idx)
}

/// Client elites by local validation loss.
pub fn client_elites(pop: &[ArchCode], local_losses: &[f64], quota: usize) -> Result<Vec<usize>> {
    select_elites(pop, local_losses, quota)
}

/// Controller elites by federated loss.
pub fn controller_elites(pop: &[ArchCode], fll: &[f64], quota: usize) -> Result<Vec<usize>> {
    select_elites(pop, fll, quota)
}

/// Per-client quotas `|P|·γ·w_i` by largest remainder, and the
/// controller's `|P| − Σ quota_i`. The client total is `round(|P|·γ)`.
pub fn quotas(pop_size: usize, gamma: f64, val_sizes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(FeoError::Config(format!("γ = {gamma} outside [0,1]")));
    }
    let total_val: usize = val_sizes.iter().sum();
    if val_sizes.is_empty() || total_val == 0 {
        return Err(FeoError::Config("no validation nodes".into()));
    }
    let share = pop_size as f64 * gamma;
    let client_total = (share.round_ties_even() as usize).min(pop_size);
    let exact: Vec<f64> = val_sizes
        .iter()
        .map(|&v| share * v as f64 / total_val as f64)
        .collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = q.iter().sum();
    let mut order: Vec<usize> = (0..q.len()).collect();
    // largest remainder first; lower client id wins ties
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(client_total.saturating_sub(assigned)) {
        q[i] += 1;
    }
    // floors can exceed a rounded-down total only by float noise
    while q.iter().sum::<usize>() > client_total {
        let i = (0..q.len()).rev().find(|&i| q[i] > 0).unwrap();
        q[i] -= 1;
    }
    let controller = pop_size - q.iter().sum::<usize>();
    Ok((q, controller))
}

fn tournament<R: Rng>(codes: &[ArchCode], losses: &[f64], k: usize, rng: &mut R) -> usize {
    let mut best = rng.gen_range(0..codes.len());
    for _ in 1..k {
        let c = rng.gen_range(0..codes.len());
        if better(codes, losses, c, best) == Ordering::Less {
            best = c;
        }
    }
    best
}

/// One generation: the best individual survives unchanged; every other
/// slot is a tournament-selected, crossed-over, mutated child.
pub fn evolve<R: Rng>(
    codes: &[ArchCode],
    losses: &[f64],
    cfg: &SpaceConfig,
    evo: &EvoConfig,
    rng: &mut R,
) -> Result<Vec<ArchCode>> {
    if codes.is_empty() {
        return Err(FeoError::EmptyPopulation);
    }
    let order = ranking(codes, losses)?;
    let rate = evo.mutation_rate_for(cfg);
    let mut next = Vec::with_capacity(codes.len());
    next.push(codes[order[0]].clone());
    while next.len() < codes.len() {
        let a = tournament(codes, losses, evo.tournament, rng);
        let child = if rng.gen_bool(evo.crossover_prob) {
            let b = tournament(codes, losses, evo.tournament, rng);
            codes[a].crossover(&codes[b], rng).expect("same-length parents")
        } else {
            codes[a].clone()
        };
        next.push(child.mutate(cfg, rate, rng));
    }
    Ok(next)
}

/// Memoises a loss function by code for one generation.
pub struct LossCache<F> {
    f: F,
    memo: HashMap<ArchCode, f64>,
    calls: usize,
}

impl<F, E> LossCache<F>
where
    F: FnMut(&ArchCode) -> std::result::Result<f64, E>,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            memo: HashMap::new(),
            calls: 0,
        }
    }

    pub fn get(&mut self, code: &ArchCode) -> std::result::Result<f64, E> {
        if let Some(&v) = self.memo.get(code) {
            return Ok(v);
        }
        let v = (self.f)(code)?;
        self.calls += 1;
        self.memo.insert(code.clone(), v);
        Ok(v)
    }

    pub fn all(&mut self, codes: &[ArchCode]) -> std::result::Result<Vec<f64>, E> {
        codes.iter().map(|c| self.get(c)).collect()
    }

    /// Number of distinct evaluations performed.
    pub fn evaluations(&self) -> usize {
        self.calls
    }
}

/// Output of one client-side step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStep {
    pub elites: Vec<ArchCode>,
    /// Local losses of the controller's population, in its order.
    pub fl_losses: Vec<f64>,
    pub best_local_loss: f64,
}

/// A client's local optimiser state (`P_Gi`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEvolver {
    pub population: Vec<ArchCode>,
    pub target: usize,
}

impl ClientEvolver {
    pub fn new(initial: Vec<ArchCode>) -> Self {
        let target = initial.len();
        Self {
            population: initial,
            target,
        }
    }

    /// Merges `P_FL` into `P_Gi`, keeps the best `|P|` by local loss,
    /// evolves one generation, and returns the `quota` best children.
    pub fn step<R: Rng, E>(
        &mut self,
        p_fl: &[ArchCode],
        loss: &mut dyn FnMut(&ArchCode) -> std::result::Result<f64, E>,
        quota: usize,
        cfg: &SpaceConfig,
        evo: &EvoConfig,
        rng: &mut R,
    ) -> std::result::Result<ClientStep, StepError<E>> {
        let fl_losses: Vec<f64> = p_fl.iter().map(&mut *loss).collect::<std::result::Result<_, E>>().map_err(StepError::Loss)?;
        let mut merged = self.population.clone();
        merged.extend_from_slice(p_fl);
        let merged_losses: Vec<f64> = merged.iter().map(&mut *loss).collect::<std::result::Result<_, E>>().map_err(StepError::Loss)?;
        let keep = ranking(&merged, &merged_losses)?;
        let kept: Vec<ArchCode> = keep.iter().take(self.target).map(|&i| merged[i].clone()).collect();
        let kept_losses: Vec<f64> = keep.iter().take(self.target).map(|&i| merged_losses[i]).collect();
        let children = evolve(&kept, &kept_losses, cfg, evo, rng)?;
        let child_losses: Vec<f64> = children.iter().map(&mut *loss).collect::<std::result::Result<_, E>>().map_err(StepError::Loss)?;
        let elites = client_elites(&children, &child_losses, quota)?
            .into_iter()
            .map(|i| children[i].clone())
            .collect();
        let best_local_loss = child_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        self.population = children;
        Ok(ClientStep {
            elites,
            fl_losses,
            best_local_loss,
        })
    }
}

#[derive(Debug, Error)]
pub enum StepError<E> {
    #[error(transparent)]
    Feo(#[from] FeoError),
    #[error("loss evaluation failed")]
    Loss(E),
}

/// `P = ∪_i elites_i ∪ top_quota(P_FL by FLL)`, checked to have `|P|`
/// members.
pub fn assemble(
    client_elites: &[Vec<ArchCode>],
    p_fl: &[ArchCode],
    fll_of_p_fl: &[f64],
    controller_quota: usize,
    target: usize,
) -> Result<Vec<ArchCode>> {
    let mut next: Vec<ArchCode> = client_elites.iter().flatten().cloned().collect();
    for i in controller_elites(p_fl, fll_of_p_fl, controller_quota)? {
        next.push(p_fl[i].clone());
    }
    if next.len() != target {
        return Err(FeoError::EliteCount {
            expected: target,
            got: next.len(),
        });
    }
    Ok(next)
}

/// Summary of one generation, one JSON line in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub gamma: f64,
    pub best_fll: f64,
    pub mean_fll: f64,
    pub best_code: ArchCode,
    pub client_best_local_loss: Vec<f64>,
    pub client_elites: Vec<usize>,
    pub controller_elites: usize,
    pub population: Vec<ArchCode>,
    pub wall_secs: f64,
}

/// A whole FEO round with every party in memory: `fll` scores codes
/// federatedly, `local[i]` scores them on client i. Returns the new
/// shared population and `P_FL`.
#[allow(clippy::too_many_arguments)]
pub fn feo_round<E>(
    t: usize,
    population: &[ArchCode],
    fll: &mut dyn FnMut(&ArchCode) -> std::result::Result<f64, E>,
    clients: &mut [ClientEvolver],
    local: &mut [&mut dyn FnMut(&ArchCode) -> std::result::Result<f64, E>],
    val_sizes: &[usize],
    gamma: f64,
    cfg: &SpaceConfig,
    evo: &EvoConfig,
    seed: u64,
) -> std::result::Result<(Vec<ArchCode>, Vec<ArchCode>), StepError<E>> {
    let fll_p: Vec<f64> = population.iter().map(&mut *fll).collect::<std::result::Result<_, E>>().map_err(StepError::Loss)?;
    let mut rng = stream_rng(seed, 0, t as u64, "controller");
    let p_fl = evolve(population, &fll_p, cfg, evo, &mut rng)?;
    let (client_q, controller_q) = quotas(population.len(), gamma, val_sizes)?;
    let mut elites = Vec::with_capacity(clients.len());
    for (i, (c, l)) in clients.iter_mut().zip(local.iter_mut()).enumerate() {
        let mut rng = stream_rng(seed, i as u64 + 1, t as u64, "client");
        elites.push(c.step(&p_fl, &mut **l, client_q[i], cfg, evo, &mut rng)?.elites);
    }
    let fll_fl: Vec<f64> = p_fl.iter().map(&mut *fll).collect::<std::result::Result<_, E>>().map_err(StepError::Loss)?;
    let next = assemble(&elites, &p_fl, &fll_fl, controller_q, population.len())?;
    Ok((next, p_fl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn cfg() -> SpaceConfig {
        SpaceConfig::new(3, 6).unwrap()
    }

    fn sample_pop(n: usize, seed: u64) -> Vec<ArchCode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| ArchCode::sample(&cfg(), &mut rng)).collect()
    }

    #[test]
    fn gamma_schedule() {
        assert!((gamma(1) - 0.495).abs() < 1e-15);
        assert!((gamma(250) - 0.0405).abs() < 1e-4);
        for t in 1..500 {
            assert!(gamma(t + 1) < gamma(t) && gamma(t) > 0.0);
        }
    }

    #[test]
    fn quota_examples() {
        assert_eq!(quotas(60, 0.5, &[7, 7, 7]).unwrap(), (vec![10, 10, 10], 30));
        assert_eq!(quotas(60, 0.0, &[7, 7, 7]).unwrap(), (vec![0, 0, 0], 60));
        assert_eq!(quotas(60, 0.5, &[100, 300, 600]).unwrap(), (vec![3, 9, 18], 30));
        assert_eq!(quotas(60, 1.0, &[1, 1, 1]).unwrap(), (vec![20, 20, 20], 0));
        // γ(1) = 0.495 → 29.7 client slots round to 30
        assert_eq!(quotas(60, gamma(1), &[5, 5, 5]).unwrap(), (vec![10, 10, 10], 30));
        let (q, c) = quotas(60, 0.5, &[1, 1, 1, 1, 1, 1, 1]).unwrap();
        assert_eq!(q.iter().sum::<usize>() + c, 60);
        assert_eq!(q, vec![5, 5, 4, 4, 4, 4, 4]);
        assert!(quotas(60, 1.5, &[1]).is_err());
        assert!(quotas(60, 0.5, &[0, 0]).is_err());
    }

    #[test]
    fn client_quota_totals_shrink_with_gamma() {
        let sizes = [120, 80, 300];
        let mut last = usize::MAX;
        for t in 1..300 {
            let (q, c) = quotas(60, gamma(t), &sizes).unwrap();
            let total: usize = q.iter().sum();
            assert_eq!(total + c, 60);
            assert!(total <= last);
            last = total;
        }
    }

    #[test]
    fn elite_examples() {
        let pop = sample_pop(3, 0);
        assert_eq!(client_elites(&pop, &[0.2, 0.9, 0.1], 2).unwrap(), vec![2, 0]);
        assert!(client_elites(&pop, &[0.2, 0.9, 0.1], 0).unwrap().is_empty());
        assert_eq!(client_elites(&pop, &[0.2, 0.9, 0.1], 3).unwrap(), vec![2, 0, 1]);
        assert!(client_elites(&pop, &[0.2, 0.9, 0.1], 4).is_err());
        assert_eq!(controller_elites(&pop[..2], &[1.0, 0.5], 1).unwrap(), vec![1]);
        let (_, cq) = quotas(60, 0.5, &[1, 1]).unwrap();
        let big = sample_pop(60, 1);
        let losses: Vec<f64> = (0..60).map(|i| i as f64).collect();
        assert_eq!(controller_elites(&big, &losses, cq).unwrap().len(), 30);
    }

    #[test]
    fn ties_break_by_code_order() {
        let mut pop = sample_pop(4, 2);
        pop.sort();
        let idx = select_elites(&[pop[3].clone(), pop[0].clone(), pop[2].clone()], &[1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(idx, vec![1, 2, 0]);
    }

    #[test]
    fn evolve_preserves_size_and_elite() {
        for seed in 0..20 {
            let pop = sample_pop(12, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let losses: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            let best = ranking(&pop, &losses).unwrap()[0];
            let next = evolve(&pop, &losses, &cfg(), &EvoConfig::default(), &mut rng).unwrap();
            assert_eq!(next.len(), 12);
            assert!(next.contains(&pop[best]));
            assert!(next.iter().all(|c| c.is_canonical() && c.validate(&cfg()).is_ok()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(evolve(&[], &[], &cfg(), &EvoConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn evolution_climbs_a_synthetic_fitness() {
        // reward: first layer type is 0 and the first slot is live
        let loss = |c: &ArchCode| if c.valid_slots() > 0 && c.layer_types[0] == 0 { 0.0 } else { 1.0 };
        let mut improved = 0;
        for seed in 0..20 {
            let mut pop = sample_pop(20, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mean = |p: &[ArchCode]| p.iter().map(|c| -loss(c)).sum::<f64>() / p.len() as f64;
            let start = mean(&pop);
            for _ in 0..30 {
                let l: Vec<f64> = pop.iter().map(loss).collect();
                pop = evolve(&pop, &l, &cfg(), &EvoConfig::default(), &mut rng).unwrap();
            }
            if mean(&pop) >= start {
                improved += 1;
            }
        }
        assert!(improved >= 18, "{improved}/20");
    }

    #[test]
    fn loss_cache_memoises() {
        let pop = sample_pop(5, 3);
        let mut calls = 0;
        let mut cache = LossCache::new(|c: &ArchCode| {
            calls += 1;
            Ok::<f64, Infallible>(c.input as f64)
        });
        let twice: Vec<ArchCode> = pop.iter().chain(pop.iter()).cloned().collect();
        let l = cache.all(&twice).unwrap();
        assert_eq!(l.len(), 10);
        let distinct = pop.iter().collect::<std::collections::HashSet<_>>().len();
        assert_eq!(cache.evaluations(), distinct);
        drop(cache);
        assert_eq!(calls, distinct);
    }

    fn local_loss(client: usize) -> impl FnMut(&ArchCode) -> std::result::Result<f64, Infallible> {
        move |c: &ArchCode| Ok(if c.input as usize == client { 0.1 } else { 0.5 + c.output as f64 * 0.01 })
    }

    #[test]
    fn feo_round_keeps_size_and_takes_client_favourites() {
        let mut pop = sample_pop(12, 4);
        pop[0].input = 0;
        pop[1].input = 1;
        let mut clients = vec![ClientEvolver::new(pop.clone()), ClientEvolver::new(pop.clone())];
        let mut l0 = local_loss(0);
        let mut l1 = local_loss(1);
        let mut fll = |c: &ArchCode| Ok::<f64, Infallible>(0.5 * (l0(c).unwrap() + local_loss(1)(c).unwrap()));
        let mut a = local_loss(0);
        let mut locals: Vec<&mut dyn FnMut(&ArchCode) -> std::result::Result<f64, Infallible>> = vec![&mut a, &mut l1];
        let (next, p_fl) = feo_round(1, &pop, &mut fll, &mut clients, &mut locals, &[10, 10], 0.5, &cfg(), &EvoConfig::default(), 7).unwrap();
        assert_eq!(next.len(), 12);
        assert_eq!(p_fl.len(), 12);
        // three elites per client, best first: each client's favourite leads
        assert_eq!(next[0].input, 0, "{next:?}");
        assert_eq!(next[3].input, 1, "{next:?}");
    }

    #[test]
    fn single_client_without_gamma_is_a_controller_ea() {
        let pop = sample_pop(10, 5);
        let mut clients = vec![ClientEvolver::new(pop.clone())];
        let mut fll = |c: &ArchCode| Ok::<f64, Infallible>(c.output as f64);
        let mut l = |c: &ArchCode| Ok::<f64, Infallible>(c.output as f64);
        let mut locals: Vec<&mut dyn FnMut(&ArchCode) -> std::result::Result<f64, Infallible>> = vec![&mut l];
        let (next, p_fl) = feo_round(1, &pop, &mut fll, &mut clients, &mut locals, &[5], 0.0, &cfg(), &EvoConfig::default(), 1).unwrap();
        let fl: Vec<f64> = p_fl.iter().map(|c| c.output as f64).collect();
        let expected: Vec<ArchCode> = ranking(&p_fl, &fl).unwrap().into_iter().map(|i| p_fl[i].clone()).collect();
        assert_eq!(next, expected);
    }

    #[test]
    fn frozen_landscape_elitism() {
        // with a fixed loss, the best FLL retained by the controller never rises
        let mut pop = sample_pop(10, 6);
        let f = |c: &ArchCode| (c.input as f64 - 2.0).abs() + c.output as f64 * 0.1 + c.valid_slots() as f64 * 0.01;
        let mut clients = vec![ClientEvolver::new(pop.clone()), ClientEvolver::new(pop.clone())];
        let mut best = f64::INFINITY;
        for t in 1..20 {
            let mut fll = |c: &ArchCode| Ok::<f64, Infallible>(f(c));
            let mut a = |c: &ArchCode| Ok::<f64, Infallible>(f(c) + c.input as f64);
            let mut b = |c: &ArchCode| Ok::<f64, Infallible>(f(c) - c.input as f64);
            let mut locals: Vec<&mut dyn FnMut(&ArchCode) -> std::result::Result<f64, Infallible>> = vec![&mut a, &mut b];
            let (next, _) = feo_round(t, &pop, &mut fll, &mut clients, &mut locals, &[3, 3], gamma(t), &cfg(), &EvoConfig::default(), 9).unwrap();
            let now = next.iter().map(f).fold(f64::INFINITY, f64::min);
            assert!(now <= best + 1e-15, "generation {t}: {now} > {best}");
            best = now;
            pop = next;
        }
    }
}
