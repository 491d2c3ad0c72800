//! Evolutionary search for per-stage widths under cost budgets.
//!
//! Two levels share one engine. A stage EA searches the widths of one stage
//! for the lowest distillation loss under a stage budget; the manager
//! searches how the global budget is split across stages, scoring a split by
//! the sum of its stage EA results.
//!
//! Offspring that violate a budget are redrawn up to [`MAX_ATTEMPTS`] times,
//! after which the parent is kept. Elites survive from one generation to the
//! next, so populations after the first hold `top_k + mutations + crossovers`
//! genes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::cost::{Budget, CostModel};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::slimnet::{StageFeatureCache, StageGene, Supernet, WidthConfig};

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EaConfig {
    pub population: usize,
    pub top_k: usize,
    pub mutation_prob: f64,
    pub iterations: usize,
    pub mutations: usize,
    pub crossovers: usize,
    pub seed: u64,
}

impl EaConfig {
    /// Population 128 split evenly between mutation and crossover, 10
    /// generations, mutation probability 0.1, top 32 kept.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            population: 128,
            top_k: 32,
            mutation_prob: 0.1,
            iterations: 10,
            mutations: 64,
            crossovers: 64,
            seed,
        }
    }

    /// A smaller configuration with `population` split evenly.
    pub fn small(population: usize, top_k: usize, iterations: usize, seed: u64) -> Self {
        Self {
            population,
            top_k,
            mutation_prob: 0.1,
            iterations,
            mutations: population / 2,
            crossovers: population - population / 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("ea config: {m}")));
        if self.population == 0 || self.iterations == 0 {
            return bad("population and iterations must be positive");
        }
        if self.mutations + self.crossovers != self.population {
            return bad("mutations + crossovers must equal the population");
        }
        if self.top_k == 0 || self.top_k > self.population {
            return bad("top_k must be in 1..=population");
        }
        if !(self.mutation_prob > 0.0 && self.mutation_prob < 1.0) {
            return bad("mutation probability must be in (0, 1)");
        }
        Ok(())
    }
}

/// Replaces each element with probability `p_m` by `draw(index)`. Offspring
/// rejected by `feasible` are redrawn; after [`MAX_ATTEMPTS`] failures the
/// parent is returned.
pub fn mutate<E: Clone>(
    parent: &[E],
    p_m: f64,
    rng: &mut Rng,
    mut draw: impl FnMut(usize, &mut Rng) -> E,
    mut feasible: impl FnMut(&[E]) -> bool,
) -> Vec<E> {
    for _ in 0..MAX_ATTEMPTS {
        let mut child = parent.to_vec();
        for (i, e) in child.iter_mut().enumerate() {
            if rng.gen::<f64>() < p_m {
                *e = draw(i, rng);
            }
        }
        if feasible(&child) {
            return child;
        }
    }
    parent.to_vec()
}

/// Takes each element from `a` or `b` with probability 1/2, with the same
/// rejection rule as [`mutate`] (falling back to `a`).
pub fn crossover<E: Clone>(a: &[E], b: &[E], rng: &mut Rng, mut feasible: impl FnMut(&[E]) -> bool) -> Vec<E> {
    for _ in 0..MAX_ATTEMPTS {
        let child: Vec<E> = a
            .iter()
            .zip(b)
            .map(|(x, y)| if rng.gen::<bool>() { x.clone() } else { y.clone() })
            .collect();
        if feasible(&child) {
            return child;
        }
    }
    a.to_vec()
}

/// A gene space explored by [`evolve`].
pub trait SearchSpace {
    type Elem: Clone + PartialEq;

    /// `count` feasible genes.
    fn initial(&mut self, count: usize, rng: &mut Rng) -> Result<Vec<Vec<Self::Elem>>>;
    fn draw(&self, index: usize, rng: &mut Rng) -> Self::Elem;
    fn feasible(&self, gene: &[Self::Elem]) -> bool;
    /// Losses of `genes`, in order.
    fn evaluate(&mut self, genes: &[Vec<Self::Elem>]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evolved<E> {
    pub best: Vec<E>,
    pub loss: f64,
    /// Best loss seen so far, after each generation.
    pub curve: Vec<f64>,
}

/// Runs `cfg.iterations` generations of evaluate, keep the top k, then breed
/// mutations and crossovers from the kept genes.
pub fn evolve<S: SearchSpace>(space: &mut S, cfg: &EaConfig, rng: &mut Rng) -> Result<Evolved<S::Elem>> {
    cfg.validate()?;
    let mut pop = space.initial(cfg.population, rng)?;
    let mut best: Option<(Vec<S::Elem>, f64)> = None;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let mut unique: Vec<Vec<S::Elem>> = Vec::with_capacity(pop.len());
        for g in pop {
            if !unique.contains(&g) {
                unique.push(g);
            }
        }
        let losses = space.evaluate(&unique)?;
        if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                what: format!("candidate {bad} of the search population"),
            });
        }
        let mut order: Vec<usize> = (0..unique.len()).collect();
        order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
        let top = order[0];
        if best.as_ref().map_or(true, |(_, l)| losses[top] < *l) {
            best = Some((unique[top].clone(), losses[top]));
        }
        curve.push(best.as_ref().map(|b| b.1).unwrap_or(f64::INFINITY));
        if t + 1 == cfg.iterations {
            break;
        }
        let elites: Vec<Vec<S::Elem>> = order.iter().take(cfg.top_k).map(|&i| unique[i].clone()).collect();
        let mut next = elites.clone();
        for _ in 0..cfg.mutations {
            let p = &elites[rng.gen_range(0..elites.len())];
            next.push(mutate(p, cfg.mutation_prob, rng, |i, r| space.draw(i, r), |g| space.feasible(g)));
        }
        for _ in 0..cfg.crossovers {
            let a = &elites[rng.gen_range(0..elites.len())];
            let b = &elites[rng.gen_range(0..elites.len())];
            next.push(crossover(a, b, rng, |g| space.feasible(g)));
        }
        pop = next;
    }
    let (best, loss) = best.expect("at least one generation");
    Ok(Evolved { best, loss, curve })
}

/// Loss memo for one stage, keyed by gene; valid for one feature cache.
pub type StageMemo = BTreeMap<Vec<usize>, f64>;

struct StageSpace<'a, T: Real> {
    net: &'a Supernet<T>,
    cache: &'a StageFeatureCache<T>,
    cost: &'a CostModel,
    stage: usize,
    budget: f64,
    options: Vec<Vec<usize>>,
    memo: &'a mut StageMemo,
}

impl<T: Real> StageSpace<'_, T> {
    fn cost_of(&self, gene: &[usize]) -> Option<f64> {
        self.cost.stage_cost(self.stage, &StageGene::new(gene.to_vec())).ok()
    }
}

impl<T: Real> SearchSpace for StageSpace<'_, T> {
    type Elem = usize;

    fn initial(&mut self, count: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        let min: Vec<usize> = self.options.iter().map(|o| o[0]).collect();
        if !self.feasible(&min) {
            return Err(Error::InfeasibleBudget(format!(
                "stage {} budget {} is below its minimum cost",
                self.stage, self.budget
            )));
        }
        let full: Vec<usize> = self.options.iter().map(|o| o[o.len() - 1]).collect();
        let mut pop = Vec::with_capacity(count);
        // The extremes are always tried; the full gene is the exact optimum
        // whenever it fits.
        if self.feasible(&full) {
            pop.push(full);
        }
        while pop.len() < count {
            pop.push(random_stage_gene(&self.options, rng, |g| self.feasible(g)));
        }
        pop.truncate(count);
        Ok(pop)
    }

    fn draw(&self, index: usize, rng: &mut Rng) -> usize {
        let o = &self.options[index];
        o[rng.gen_range(0..o.len())]
    }

    fn feasible(&self, gene: &[usize]) -> bool {
        self.cost_of(gene).is_some_and(|c| c <= self.budget)
    }

    fn evaluate(&mut self, genes: &[Vec<usize>]) -> Result<Vec<f64>> {
        genes
            .iter()
            .map(|g| {
                if let Some(&l) = self.memo.get(g) {
                    return Ok(l);
                }
                let l = self.net.stage_loss(self.stage, &StageGene::new(g.clone()), self.cache)?;
                self.memo.insert(g.clone(), l);
                Ok(l)
            })
            .collect()
    }
}

/// Uniform draw per layer, rejected while infeasible; after
/// [`MAX_ATTEMPTS`] a random layer above its minimum is stepped down until the
/// gene fits.
fn random_stage_gene(options: &[Vec<usize>], rng: &mut Rng, feasible: impl Fn(&[usize]) -> bool) -> Vec<usize> {
    let mut pos: Vec<usize> = Vec::new();
    for _ in 0..MAX_ATTEMPTS {
        pos = options.iter().map(|o| rng.gen_range(0..o.len())).collect();
        let g: Vec<usize> = pos.iter().zip(options).map(|(&p, o)| o[p]).collect();
        if feasible(&g) {
            return g;
        }
    }
    loop {
        let g: Vec<usize> = pos.iter().zip(options).map(|(&p, o)| o[p]).collect();
        if feasible(&g) || pos.iter().all(|&p| p == 0) {
            return g;
        }
        let movable: Vec<usize> = (0..pos.len()).filter(|&i| pos[i] > 0).collect();
        pos[movable[rng.gen_range(0..movable.len())]] -= 1;
    }
}

/// Outcome of a stage search.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageResult {
    pub gene: StageGene,
    pub loss: f64,
    pub cost: f64,
    pub curve: Vec<f64>,
}

/// Stage EA with a caller-owned memo.
pub fn stage_ea_memo<T: Real>(
    net: &Supernet<T>,
    stage: usize,
    cache: &StageFeatureCache<T>,
    cost: &CostModel,
    budget: f64,
    cfg: &EaConfig,
    memo: &mut StageMemo,
) -> Result<StageResult> {
    let spec = net.spec();
    if stage >= spec.num_stages() {
        return Err(Error::InvalidArgument(format!("stage {stage} out of range")));
    }
    let options = spec.stage_prunable(stage).map(|j| spec.channel_options(j)).collect();
    let mut space = StageSpace {
        net,
        cache,
        cost,
        stage,
        budget,
        options,
        memo,
    };
    let mut rng = rng::rng_from_seed(cfg.seed);
    let ev = evolve(&mut space, cfg, &mut rng)?;
    let gene = StageGene::new(ev.best);
    let c = cost.stage_cost(stage, &gene)?;
    Ok(StageResult {
        gene,
        loss: ev.loss,
        cost: c,
        curve: ev.curve,
    })
}

/// Searches the widths of `stage` for the lowest distillation loss on `cache`
/// with stage cost at most `budget` (in the cost model's unit).
pub fn stage_ea<T: Real>(
    net: &Supernet<T>,
    stage: usize,
    cache: &StageFeatureCache<T>,
    cost: &CostModel,
    budget: f64,
    cfg: &EaConfig,
) -> Result<StageResult> {
    stage_ea_memo(net, stage, cache, cost, budget, cfg, &mut StageMemo::new())
}

/// Sums in index order; every feasibility test on budget genes uses this.
fn ordered_sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, &b| a + b)
}

/// A random split of `total` into per-stage budgets inside `bounds`.
///
/// The slack above the stage minima is divided by flat Dirichlet weights and
/// water-filled against the stage maxima, so the split uses
/// `min(total, Σ max)` whenever it can.
pub fn random_budget_gene(bounds: &[(f64, f64)], total: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let mins: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let min_sum = ordered_sum(&mins);
    if bounds.is_empty() || !(total >= min_sum) {
        return Err(Error::InfeasibleBudget(format!(
            "budget {total} is below the sum of stage minima {min_sum}"
        )));
    }
    let caps: Vec<f64> = bounds.iter().map(|&(lo, hi)| hi - lo).collect();
    let weights: Vec<f64> = bounds.iter().map(|_| -Float::ln(1.0 - rng.gen::<f64>())).collect();
    let mut remaining = (total.min(ordered_sum(&bounds.iter().map(|b| b.1).collect::<Vec<_>>())) - min_sum).max(0.0);
    let mut alloc = vec![0.0; bounds.len()];
    let mut active: Vec<usize> = (0..bounds.len()).filter(|&i| caps[i] > 0.0).collect();
    while remaining > 0.0 && !active.is_empty() {
        let wsum: f64 = active.iter().map(|&i| weights[i]).sum();
        let saturated: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| alloc[i] + remaining * weights[i] / wsum >= caps[i])
            .collect();
        if saturated.is_empty() {
            for &i in &active {
                alloc[i] += remaining * weights[i] / wsum;
            }
            break;
        }
        for &i in &saturated {
            remaining -= caps[i] - alloc[i];
            alloc[i] = caps[i];
        }
        active.retain(|i| !saturated.contains(i));
    }
    let mut gene: Vec<f64> = bounds.iter().zip(&alloc).map(|(b, a)| (b.0 + a).min(b.1)).collect();
    // Rounding can overshoot by a few ulps; trim from the first stages.
    while ordered_sum(&gene) > total {
        let mut excess = ordered_sum(&gene) - total;
        for (g, &lo) in gene.iter_mut().zip(&mins) {
            let cut = excess.min(*g - lo);
            *g -= cut;
            excess -= cut;
        }
        if gene == mins {
            break;
        }
    }
    Ok(gene)
}

/// Stage search settings and manager settings for [`dea_search`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DeaConfig {
    pub stage: EaConfig,
    pub manager: EaConfig,
    /// Evaluate stages on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageReport {
    pub budget: f64,
    pub gene: StageGene,
    pub loss: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SearchReport {
    pub budget: Budget,
    pub config: WidthConfig,
    /// Cost of the assembled configuration.
    pub cost: f64,
    pub total_loss: f64,
    pub stages: Vec<StageReport>,
    /// Best total loss after each manager generation.
    pub curve: Vec<f64>,
}

/// Everything one stage worker owns: its memos and shared read-only inputs.
struct StageWorker {
    stage: usize,
    genes: StageMemo,
    results: BTreeMap<u64, StageResult>,
}

impl StageWorker {
    fn run<T: Real>(
        &mut self,
        net: &Supernet<T>,
        cache: &StageFeatureCache<T>,
        cost: &CostModel,
        cfg: &EaConfig,
        budgets: &[f64],
    ) -> Result<()> {
        for &b in budgets {
            if self.results.contains_key(&b.to_bits()) {
                continue;
            }
            let mut c = *cfg;
            c.seed = rng::derive_seed(cfg.seed, &[rng::tag::SEARCH, self.stage as u64, b.to_bits()]);
            let r = stage_ea_memo(net, self.stage, cache, cost, b, &c, &mut self.genes)?;
            self.results.insert(b.to_bits(), r);
        }
        Ok(())
    }
}

struct ManagerSpace<'a, T: Real> {
    net: &'a Supernet<T>,
    cache: &'a StageFeatureCache<T>,
    cost: &'a CostModel,
    cfg: &'a DeaConfig,
    bounds: Vec<(f64, f64)>,
    total: f64,
    workers: Vec<StageWorker>,
}

impl<T: Real> ManagerSpace<'_, T> {
    fn run_workers(&mut self, genes: &[Vec<f64>]) -> Result<()> {
        let per_stage: Vec<Vec<f64>> = (0..self.workers.len())
            .map(|s| genes.iter().map(|g| g[s]).collect())
            .collect();
        let (net, cache, cost, cfg) = (self.net, self.cache, self.cost, &self.cfg.stage);
        #[cfg(feature = "std")]
        if self.cfg.parallel {
            use rayon::prelude::*;
            return self
                .workers
                .par_iter_mut()
                .zip(per_stage.par_iter())
                .map(|(w, b)| w.run(net, cache, cost, cfg, b))
                .collect::<Result<Vec<()>>>()
                .map(|_| ());
        }
        for (w, b) in self.workers.iter_mut().zip(&per_stage) {
            w.run(net, cache, cost, cfg, b)?;
        }
        Ok(())
    }

    fn stage_result(&self, stage: usize, budget: f64) -> &StageResult {
        &self.workers[stage].results[&budget.to_bits()]
    }
}

impl<T: Real> SearchSpace for ManagerSpace<'_, T> {
    type Elem = f64;

    fn initial(&mut self, count: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        (0..count).map(|_| random_budget_gene(&self.bounds, self.total, rng)).collect()
    }

    fn draw(&self, index: usize, rng: &mut Rng) -> f64 {
        let (lo, hi) = self.bounds[index];
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    }

    fn feasible(&self, gene: &[f64]) -> bool {
        ordered_sum(gene) <= self.total
    }

    fn evaluate(&mut self, genes: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.run_workers(genes)?;
        Ok(genes
            .iter()
            .map(|g| {
                g.iter()
                    .enumerate()
                    .fold(0.0, |acc, (s, &b)| acc + self.stage_result(s, b).loss)
            })
            .collect())
    }
}

/// Splits `budget` across stages and searches each stage's widths, returning
/// the assembled configuration with the lowest total stage loss on `cache`.
///
/// Stage searches for a given stage budget use a seed derived from the stage
/// seed, the stage index and the budget, so results do not depend on the
/// order or thread in which stages run.
pub fn dea_search<T: Real>(
    net: &Supernet<T>,
    cache: &StageFeatureCache<T>,
    cost: &CostModel,
    budget: Budget,
    cfg: &DeaConfig,
) -> Result<SearchReport> {
    cfg.stage.validate()?;
    cfg.manager.validate()?;
    if budget.kind != cost.kind() {
        return Err(Error::InvalidArgument(format!(
            "{:?} budget with a {:?} cost model",
            budget.kind,
            cost.kind()
        )));
    }
    let spec = net.spec();
    if cost.spec() != spec {
        return Err(Error::InvalidArgument("cost model built for a different spec".into()));
    }
    let n = spec.num_stages();
    let bounds = (0..n).map(|s| cost.stage_cost_bounds(s)).collect::<Result<Vec<_>>>()?;
    let total = budget.value - cost.overhead();
    let min_sum = ordered_sum(&bounds.iter().map(|b| b.0).collect::<Vec<_>>());
    if !(total >= min_sum) {
        return Err(Error::InfeasibleBudget(format!(
            "budget {} is below the minimum cost {}",
            budget.value,
            min_sum + cost.overhead()
        )));
    }
    let mut space = ManagerSpace {
        net,
        cache,
        cost,
        cfg,
        bounds,
        total,
        workers: (0..n)
            .map(|stage| StageWorker {
                stage,
                genes: StageMemo::new(),
                results: BTreeMap::new(),
            })
            .collect(),
    };
    let mut rng = rng::rng_from_seed(rng::derive_seed(cfg.manager.seed, &[rng::tag::SEARCH]));
    let ev = evolve(&mut space, &cfg.manager, &mut rng)?;
    let stages: Vec<StageReport> = ev
        .best
        .iter()
        .enumerate()
        .map(|(s, &b)| {
            let r = space.stage_result(s, b);
            StageReport {
                budget: b,
                gene: r.gene.clone(),
                loss: r.loss,
                cost: r.cost,
            }
        })
        .collect();
    let genes: Vec<StageGene> = stages.iter().map(|s| s.gene.clone()).collect();
    let config = WidthConfig::from_stage_genes(&genes);
    let assembled = cost.config_cost(&config)?;
    if assembled > budget.value {
        return Err(Error::InfeasibleBudget(format!(
            "assembled cost {assembled} exceeds budget {}",
            budget.value
        )));
    }
    Ok(SearchReport {
        budget,
        config,
        cost: assembled,
        total_loss: ev.loss,
        stages,
        curve: ev.curve,
    })
}
