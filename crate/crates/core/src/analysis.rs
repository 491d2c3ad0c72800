//! Weight-sharing diagnostics and the ranking-effectiveness experiment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::cost::CostModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::try_par_map;
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::slimnet::{linear_ratio_grid, SupernetSpec, Supernet, WidthConfig};
use crate::train::{
    accuracy, retrain_subnet, sample_width_config, train_one_shot, train_supernet, SampleMode, Teacher, TrainConfig,
};

/// Expected number of times channel `i` (1-based) of an `m`-channel layer is
/// trained in `n` steps of uniform width sampling: `(1 − (i−1)/m)·n`.
pub fn expected_channel_samples(i: usize, m: usize, n: f64) -> Result<f64> {
    if i == 0 || i > m {
        return Err(Error::IndexOutOfRange { index: i, max: m });
    }
    if !(n >= 0.0) {
        return Err(Error::InvalidArgument(format!("step count {n} is negative")));
    }
    Ok((1.0 - (i - 1) as f64 / m as f64) * n)
}

/// `Π_ℓ E(c_ℓ)` for channel indices `c` of layers with `m` channels each.
pub fn expected_config_samples(c: &[usize], m: usize, n: f64) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::InvalidArgument("empty configuration".into()));
    }
    c.iter().try_fold(1.0, |acc, &ci| Ok(acc * expected_channel_samples(ci, m, n)?))
}

/// Probability that one uniform draw keeps channel `c_ℓ` in every layer:
/// `Π_ℓ (1 − (c_ℓ−1)/m)`, i.e. `expected_config_samples(c, m, n) / n^L`.
pub fn config_inclusion_probability(c: &[usize], m: usize) -> Result<f64> {
    expected_config_samples(c, m, 1.0)
}

/// Draws `draws` widths uniformly from `1..=m` and counts how often each
/// channel is included. Entry `i` is channel `i + 1`.
pub fn simulate_channel_inclusion(m: usize, draws: usize, rng: &mut Rng) -> Vec<u64> {
    let mut counts = vec![0u64; m];
    for _ in 0..draws {
        let w = rng.gen_range(1..=m);
        for c in &mut counts[..w] {
            *c += 1;
        }
    }
    counts
}

/// Draws `draws` independent per-layer widths from `1..=m` and counts the
/// draws that keep channel `c_ℓ` in every layer `ℓ`.
pub fn simulate_config_inclusion(c: &[usize], m: usize, draws: usize, rng: &mut Rng) -> u64 {
    let mut hits = 0;
    for _ in 0..draws {
        let mut all = true;
        for &ci in c {
            // every layer draws, so the stream does not depend on early exits
            all &= rng.gen_range(1..=m) >= ci;
        }
        hits += u64::from(all);
    }
    hits
}

/// Result of the exhaustive uniform-maximality check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaximalityReport {
    /// Groups of equal expectation sum that contain a uniform configuration.
    pub groups: usize,
    /// Groups in which the uniform configuration has the strictly largest
    /// product.
    pub uniform_unique_max: usize,
}

impl MaximalityReport {
    pub fn holds(&self) -> bool {
        self.groups > 0 && self.groups == self.uniform_unique_max
    }
}

/// Enumerates every configuration of `layers` layers with `m` channels and
/// checks, per group of equal `Σ E(c_ℓ)`, that the uniform configuration
/// uniquely maximises `Π E(c_ℓ)`. Uses exact integer arithmetic: `E(c)` is
/// proportional to `m − c + 1`.
pub fn uniform_maximality(layers: usize, m: usize) -> Result<MaximalityReport> {
    if layers == 0 || m == 0 || layers > 8 || m > 64 {
        return Err(Error::InvalidArgument("enumeration limited to 1..=8 layers, 1..=64 channels".into()));
    }
    let total = m.pow(layers as u32);
    // best[s] = (largest product, how many configs reach it, uniform product)
    let mut best: Vec<(u128, usize, Option<u128>)> = vec![(0, 0, None); layers * m + 1];
    let mut c = vec![1usize; layers];
    for _ in 0..total {
        let e: Vec<u128> = c.iter().map(|&ci| (m - ci + 1) as u128).collect();
        let s: usize = e.iter().map(|&v| v as usize).sum();
        let p: u128 = e.iter().product();
        let slot = &mut best[s];
        if p > slot.0 {
            *slot = (p, 1, slot.2);
        } else if p == slot.0 {
            slot.1 += 1;
        }
        if c.iter().all(|&ci| ci == c[0]) {
            slot.2 = Some(p);
        }
        for ci in c.iter_mut() {
            if *ci < m {
                *ci += 1;
                break;
            }
            *ci = 1;
        }
    }
    let mut report = MaximalityReport {
        groups: 0,
        uniform_unique_max: 0,
    };
    for &(p, count, uniform) in &best {
        if let Some(u) = uniform {
            report.groups += 1;
            if u == p && count == 1 {
                report.uniform_unique_max += 1;
            }
        }
    }
    Ok(report)
}

/// Mean validation accuracy of `samples` random width configurations with
/// inherited weights.
pub fn supernet_accuracy_expectation<T: Real>(
    net: &Supernet<T>,
    data: &Dataset,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if data.val.is_empty() {
        return Err(Error::InvalidDataset("empty validation split".into()));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut sum = 0.0;
    for _ in 0..samples {
        let config = sample_width_config(net.spec(), SampleMode::Random, rng);
        sum += accuracy(net, &config, data, &data.val)?;
    }
    Ok(sum / samples as f64)
}

/// Settings for [`unfull_training_curve`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnfullConfig {
    /// Candidate widths per layer, one supernet each.
    pub grid_sizes: Vec<usize>,
    /// Smallest width ratio; grids are evenly spaced on `[grid_min, 1]`.
    /// `None` gives the slimmable grid `{1/g, 2/g, ..., 1}`.
    pub grid_min: Option<f64>,
    /// Identical for every grid size, so all supernets get the same steps.
    pub train: TrainConfig,
    /// Random subnets averaged per supernet.
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnfullPoint {
    pub grid_size: usize,
    /// `log10(g^L)`.
    pub log10_candidates: f64,
    pub expectation: f64,
}

/// Trains one single-path weight-sharing supernet per grid size from the
/// same initialization and reports the mean validation accuracy of random
/// subnets with inherited weights.
pub fn unfull_training_curve<T: Real>(spec: &SupernetSpec, data: &Dataset, cfg: &UnfullConfig) -> Result<Vec<UnfullPoint>> {
    if cfg.grid_sizes.is_empty() || cfg.grid_sizes.contains(&0) {
        return Err(Error::InvalidArgument("grid sizes must be positive".into()));
    }
    if let Some(lo) = cfg.grid_min {
        if !(lo > 0.0 && lo <= 1.0) {
            return Err(Error::InvalidArgument(format!("grid minimum {lo} outside (0, 1]")));
        }
    }
    let init = rng::derive_seed(cfg.seed, &[rng::tag::INIT]);
    cfg.grid_sizes
        .iter()
        .map(|&g| {
            let mut s = spec.clone();
            s.ratio_grid = linear_ratio_grid(cfg.grid_min.unwrap_or(1.0 / g as f64), g);
            let mut net = Supernet::<T>::new(s, init)?;
            train_one_shot(&mut net, data, &cfg.train)?;
            let mut r = rng::rng_from_seed(rng::derive_seed(cfg.seed, &[rng::tag::EVAL, g as u64]));
            Ok(UnfullPoint {
                grid_size: g,
                log10_candidates: spec.depth() as f64 * Float::log10(g as f64),
                expectation: supernet_accuracy_expectation(&net, data, cfg.samples, &mut r)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankingRecord {
    pub id: usize,
    pub config: WidthConfig,
    pub macs: u64,
    /// Total stage distillation loss under shared weights (lower is better).
    pub proxy: f64,
    /// Validation accuracy after training from scratch.
    pub actual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Correlation {
    pub spearman: f64,
    pub kendall: f64,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / Float::sqrt(sxx * syy))
}

fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if dx == dy => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let nx = (conc + disc + tx) as f64;
    let ny = (conc + disc + ty) as f64;
    (nx > 0.0 && ny > 0.0).then(|| (conc - disc) as f64 / Float::sqrt(nx * ny))
}

/// Spearman rho and Kendall tau-b between `−proxy` and `actual`, so positive
/// values mean the proxy ranks candidates the way retraining does.
pub fn ranking_correlation(records: &[RankingRecord]) -> Result<Correlation> {
    let proxy: Vec<f64> = records.iter().map(|r| r.proxy).collect();
    let actual: Vec<f64> = records.iter().map(|r| r.actual).collect();
    correlate(&proxy, &actual)
}

/// [`ranking_correlation`] on bare score lists.
pub fn correlate(proxy: &[f64], actual: &[f64]) -> Result<Correlation> {
    if proxy.len() != actual.len() {
        return Err(Error::InvalidArgument("score lists differ in length".into()));
    }
    if proxy.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("{} records, need at least 3", proxy.len())));
    }
    if proxy.iter().chain(actual).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite score".into()));
    }
    let neg: Vec<f64> = proxy.iter().map(|&p| -p).collect();
    let spearman = pearson(&average_ranks(&neg), &average_ranks(actual));
    let kendall = kendall_tau_b(&neg, actual);
    match (spearman, kendall) {
        (Some(spearman), Some(kendall)) => Ok(Correlation { spearman, kendall }),
        _ => Err(Error::UndefinedCorrelation("a score list has no spread".into())),
    }
}

/// `n` distinct configurations spread evenly over `bins` equal-width MAC
/// bins between the tinynet and the fullnet. Each candidate starts from a
/// uniform grid ratio and perturbs every layer by up to two grid steps.
pub fn stratified_candidates(spec: &SupernetSpec, n: usize, bins: usize, rng: &mut Rng) -> Result<Vec<WidthConfig>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let cost = CostModel::macs(spec)?;
    let lo = cost.config_cost(&spec.tiny_config())?;
    let hi = cost.config_cost(&spec.full_config())?;
    let width = (hi - lo) / bins as f64;
    let options = spec.all_channel_options();
    let mut out: Vec<WidthConfig> = Vec::with_capacity(n);
    for i in 0..n {
        let bin = i % bins;
        let (b_lo, b_hi) = (lo + width * bin as f64, lo + width * (bin + 1) as f64);
        let mut found = None;
        for _ in 0..20_000 {
            let base = rng.gen::<f64>();
            let channels: Vec<usize> = options
                .iter()
                .map(|o| {
                    let centre = Float::round(base * (o.len() - 1) as f64) as i64;
                    let k = (centre + rng.gen_range(-2i64..=2)).clamp(0, o.len() as i64 - 1);
                    o[k as usize]
                })
                .collect();
            let config = WidthConfig::new(channels);
            let c = cost.config_cost(&config)?;
            let inside = c >= b_lo && (c < b_hi || (bin + 1 == bins && c <= b_hi));
            if inside && !out.contains(&config) {
                found = Some(config);
                break;
            }
        }
        out.push(found.ok_or_else(|| Error::InvalidArgument(format!("could not fill MAC bin {bin}")))?);
    }
    Ok(out)
}

/// Total stage distillation loss of `config` on the fullnet features of
/// `images`.
pub fn proxy_loss<T: Real>(net: &Supernet<T>, config: &WidthConfig, cache: &crate::slimnet::StageFeatureCache<T>) -> Result<f64> {
    let spec = net.spec();
    (0..spec.num_stages()).try_fold(0.0, |acc, s| Ok(acc + net.stage_loss(s, &config.stage_gene(spec, s), cache)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingConfig {
    pub candidates: usize,
    pub bins: usize,
    pub train: TrainConfig,
    pub retrain: TrainConfig,
    /// Validation examples whose fullnet features score the proxies.
    pub proxy_examples: usize,
    /// Also train a single-stage supernet and score the same candidates.
    pub baseline: bool,
    pub seed: u64,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingOutcome {
    pub records: Vec<RankingRecord>,
    pub correlation: Correlation,
    /// Proxies and correlation of the single-stage baseline supernet.
    pub baseline: Option<(Vec<f64>, Correlation)>,
}

fn trained_supernet<T: Real>(spec: &SupernetSpec, data: &Dataset, cfg: &RankingConfig) -> Result<Supernet<T>> {
    let mut net = Supernet::new(spec.clone(), rng::derive_seed(cfg.seed, &[rng::tag::INIT]))?;
    train_supernet(&mut net, data, &cfg.train, Teacher::Inplace, |_, _| Ok(()))?;
    Ok(net)
}

fn proxies<T: Real>(net: &Supernet<T>, data: &Dataset, configs: &[WidthConfig], examples: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = data.val.iter().copied().take(examples).collect();
    if idx.is_empty() {
        return Err(Error::InvalidDataset("empty validation split".into()));
    }
    let (x, _) = data.batch(&idx);
    let cache = net.stage_features(&x.cast())?;
    configs.iter().map(|c| proxy_loss(net, c, &cache)).collect()
}

/// Trains the supernet once, samples budget-stratified candidates, scores
/// each by its total stage distillation loss and by retrained validation
/// accuracy, and correlates the two.
pub fn run_ranking_experiment<T: Real>(spec: &SupernetSpec, data: &Dataset, cfg: &RankingConfig) -> Result<RankingOutcome> {
    if cfg.candidates < 8 {
        return Err(Error::InvalidArgument(format!("{} candidates, need at least 8", cfg.candidates)));
    }
    let mut rng = rng::rng_from_seed(rng::derive_seed(cfg.seed, &[rng::tag::EVAL]));
    let configs = stratified_candidates(spec, cfg.candidates, cfg.bins, &mut rng)?;

    let net: Supernet<T> = trained_supernet(spec, data, cfg)?;
    let proxy = proxies(&net, data, &configs, cfg.proxy_examples)?;
    let baseline = if cfg.baseline {
        let single: Supernet<T> = trained_supernet(&spec.single_stage(), data, cfg)?;
        Some(proxies(&single, data, &configs, cfg.proxy_examples)?)
    } else {
        None
    };

    let actual = try_par_map(&configs, cfg.parallel, |_, c| {
        Ok(retrain_subnet::<T>(spec, c, data, &cfg.retrain)?.accuracy)
    })?;
    let cost = CostModel::macs(spec)?;
    let records: Vec<RankingRecord> = configs
        .into_iter()
        .enumerate()
        .map(|(id, config)| {
            Ok(RankingRecord {
                id,
                macs: cost.config_cost(&config)? as u64,
                config,
                proxy: proxy[id],
                actual: actual[id],
            })
        })
        .collect::<Result<_>>()?;
    let correlation = ranking_correlation(&records)?;
    let baseline = match baseline {
        Some(p) => {
            let c = correlate(&p, &actual)?;
            Some((p, c))
        }
        None => None,
    };
    Ok(RankingOutcome {
        records,
        correlation,
        baseline,
    })
}
