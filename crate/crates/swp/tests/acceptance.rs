//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng as _;
use serde_json::json;
use swp_core::analysis::{
    config_inclusion_probability, expected_channel_samples, proxy_loss, run_ranking_experiment,
    simulate_channel_inclusion, simulate_config_inclusion, uniform_maximality, unfull_training_curve, RankingConfig,
    UnfullConfig,
};
use swp_core::cost::{flops_of_config, latency_of_config, Budget, CostModel, CostTable, LayerLatency};
use swp_core::data::{split_per_class, synth_dataset, Dataset, Pattern, SynthConfig};
use swp_core::gradcheck::grad_check;
use swp_core::rng::{rng_from_seed, Rng};
use swp_core::search::{dea_search, stage_ea, DeaConfig, EaConfig};
use swp_core::slimnet::{
    count_candidates, count_candidates_for, linear_ratio_grid, LayerSpec, PoolType, StageGene, SupernetSpec, Supernet,
    WidthConfig,
};
use swp_core::tape::Tape;
use swp_core::train::{sample_width_config, train_supernet, SampleMode, Teacher, TrainConfig};
use swp_core::Tensor;

use common::{s, swp, tiny_config, write_config};

type Outcome = (bool, String);

fn conv(out: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv {
        out,
        kernel: [kernel, kernel],
        stride: 1,
        pad: kernel / 2,
    }
}

fn pool(kind: PoolType) -> LayerSpec {
    LayerSpec::Pool {
        kind,
        kernel: [2, 2],
        stride: 2,
        pad: 0,
    }
}

/// A small random network: convolutions with optional pooling, maybe a
/// dense layer, one to three stages.
fn random_spec(rng: &mut Rng) -> SupernetSpec {
    loop {
        let mut layers = Vec::new();
        let convs = rng.gen_range(2..=4);
        let mut pooled = false;
        for i in 0..convs {
            layers.push(conv(rng.gen_range(2..=5), if rng.gen_bool(0.7) { 3 } else { 1 }));
            layers.push(LayerSpec::Relu);
            if !pooled && i + 1 < convs && rng.gen_bool(0.5) {
                layers.push(pool(if rng.gen_bool(0.5) { PoolType::Max } else { PoolType::Avg }));
                pooled = true;
            }
        }
        if rng.gen_bool(0.4) {
            layers.push(LayerSpec::Dense { out: rng.gen_range(3..=6) });
            layers.push(LayerSpec::Relu);
        }
        let n = layers.len();
        let mut bounds = vec![0];
        let cut = rng.gen_range(1..n);
        if rng.gen_bool(0.6) {
            bounds.push(cut);
        }
        bounds.push(n);
        let spec = SupernetSpec {
            input: [rng.gen_range(1..=2), 4, 4],
            layers,
            stage_bounds: bounds,
            ratio_grid: linear_ratio_grid(0.25, 4),
            num_classes: rng.gen_range(2..=4),
            head_pool: rng.gen_bool(0.5),
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

fn random_config(spec: &SupernetSpec, rng: &mut Rng) -> WidthConfig {
    WidthConfig::new(
        spec.all_channel_options()
            .iter()
            .map(|o| o[rng.gen_range(0..o.len())])
            .collect(),
    )
}

fn random_input(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen::<f64>())
}

fn input_shape(spec: &SupernetSpec, batch: usize) -> [usize; 4] {
    [batch, spec.input[0], spec.input[1], spec.input[2]]
}

fn grad_check_nets() -> Outcome {
    let mut rng = rng_from_seed(11);
    let mut worst = 0.0f64;
    let nets = 6;
    for k in 0..nets {
        let spec = random_spec(&mut rng);
        let mut net = Supernet::<f64>::new(spec.clone(), 100 + k).unwrap();
        // zero biases behind a dead ReLU sit exactly on the kink
        for t in net.params_mut().tensors_mut() {
            if t.ndim() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        let config = random_config(&spec, &mut rng);
        let x = random_input(&input_shape(&spec, 2), &mut rng);
        let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..spec.num_classes)).collect();
        let cache = net.stage_features(&x.clone()).unwrap();
        let tiny = spec.tiny_config();
        // task loss of the subnet plus the tinynet's stage losses through the adapters
        let err = grad_check(net.params(), 1e-6, |tape: &mut Tape<'_, f64>| {
            let xv = tape.constant(x.clone());
            let logits = net.subnet_forward(tape, &config, xv)?;
            let mut total = tape.cross_entropy(logits, &labels)?;
            for st in 0..spec.num_stages() {
                let xi = tape.constant(cache.inputs[st].clone());
                let (_, adapted) = net.stage_forward(tape, st, &tiny.stage_gene(&spec, st), xi)?;
                let target = tape.constant(cache.targets[st].clone());
                let l = tape.mse_stage(adapted, target)?;
                let l = tape.scale(l, 0.01);
                total = tape.add(total, l)?;
            }
            Ok(total)
        })
        .unwrap();
        worst = worst.max(err);
    }
    (worst < 1e-4, format!("{nets} random nets, worst relative error {worst:.2e}"))
}

fn subnet_equals_extracted() -> Outcome {
    let mut rng = rng_from_seed(12);
    let specs: Vec<SupernetSpec> = (0..4)
        .map(|_| random_spec(&mut rng))
        .chain([SupernetSpec::six_layer([1, 12, 12], [4, 8, 16], 4, linear_ratio_grid(0.25, 7))])
        .collect();
    let nets: Vec<Supernet<f64>> = specs.iter().enumerate().map(|(i, s)| Supernet::new(s.clone(), i as u64).unwrap()).collect();
    let mut worst = 0.0f64;
    for k in 0..100 {
        let net = &nets[k % nets.len()];
        let config = random_config(net.spec(), &mut rng);
        let x = random_input(&input_shape(net.spec(), 3), &mut rng);
        let shared = net.predict(&config, &x).unwrap();
        let sub = net.extract_subnet(&config).unwrap();
        let alone = sub.predict(&sub.spec().full_config(), &x).unwrap();
        worst = worst.max(shared.max_abs_diff(&alone));
    }
    (worst <= 1e-6, format!("100 configs, max |difference| {worst:.2e}"))
}

fn sampling_expectations() -> Outcome {
    let draws = 100_000;
    let mut rng = rng_from_seed(13);
    let mut worst = 0.0f64;
    let mut checks = 0;
    // every channel of one eight-channel layer
    {
        let m = 8;
        let counts = simulate_channel_inclusion(m, draws, &mut rng);
        for (k, &c) in counts.iter().enumerate() {
            let expected = expected_channel_samples(k + 1, m, draws as f64).unwrap();
            let p = expected / draws as f64;
            let se = (draws as f64 * p * (1.0 - p)).sqrt();
            let z = if se == 0.0 {
                if c as f64 == expected { 0.0 } else { f64::INFINITY }
            } else {
                (c as f64 - expected).abs() / se
            };
            worst = worst.max(z);
            checks += 1;
        }
    }
    for _ in 0..6 {
        let m = rng.gen_range(2..=8);
        let layers = rng.gen_range(2..=3);
        let c: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..=m)).collect();
        let p = config_inclusion_probability(&c, m).unwrap();
        let hits = simulate_config_inclusion(&c, m, draws, &mut rng);
        let se = (draws as f64 * p * (1.0 - p)).sqrt();
        let z = if se == 0.0 { 0.0 } else { (hits as f64 - p * draws as f64).abs() / se };
        worst = worst.max(z);
        checks += 1;
    }
    (worst <= 3.0, format!("{checks} channel and config checks at 1e5 draws, worst |z| {worst:.2}"))
}

fn uniform_is_maximal() -> Outcome {
    let mut ok = true;
    let mut groups = 0;
    for layers in 1..=3 {
        for m in 1..=5 {
            let r = uniform_maximality(layers, m).unwrap();
            ok &= r.holds();
            groups += r.groups;
        }
    }
    let main = uniform_maximality(3, 4).unwrap();
    ok &= main.holds();
    (
        ok,
        format!(
            "L=3, m=4: uniform unique max in {}/{} groups; {groups} groups over L<=3, m<=5",
            main.uniform_unique_max, main.groups
        ),
    )
}

fn candidate_counts() -> Outcome {
    let mut rng = rng_from_seed(15);
    let mut ok = true;
    for _ in 0..50 {
        let g = rng.gen_range(2..=40usize);
        let depths: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(1..=12)).collect();
        let c = count_candidates_for(g, &depths);
        let product = c.per_stage.iter().fold(num_bigint::BigUint::from(1u32), |a, b| a * b);
        let direct = num_bigint::BigUint::from(g).pow(depths.iter().sum::<usize>() as u32);
        ok &= product == c.total && c.total == direct;
    }
    let desk = count_candidates(&SupernetSpec::six_layer([1, 12, 12], [4, 8, 16], 4, linear_ratio_grid(0.25, 7)));
    ok &= desk.total == num_bigint::BigUint::from(7u32).pow(6);
    let big = count_candidates_for(32, &[10]).total;
    ok &= big.to_string() == "1125899906842624";
    (ok, format!("50 random stage splits; 32^10 = {big}"))
}

/// Every gene of `stage` as the cartesian product of its layer options.
fn all_genes(spec: &SupernetSpec, stage: usize) -> Vec<StageGene> {
    let mut genes = vec![Vec::new()];
    for j in spec.stage_prunable(stage) {
        genes = genes
            .into_iter()
            .flat_map(|g| {
                spec.channel_options(j).into_iter().map(move |c| {
                    let mut g = g.clone();
                    g.push(c);
                    g
                })
            })
            .collect();
    }
    genes.into_iter().map(StageGene::new).collect()
}

/// 1-based rank of `loss` among `losses` (ties count in its favour).
fn rank_of(loss: f64, losses: &[f64]) -> usize {
    1 + losses.iter().filter(|&&l| l < loss).count()
}

fn convs_spec(widths: &[usize], grid: usize) -> SupernetSpec {
    let layers = widths.iter().flat_map(|&w| [conv(w, 3), LayerSpec::Relu]).collect::<Vec<_>>();
    SupernetSpec {
        input: [2, 6, 6],
        stage_bounds: vec![0, layers.len()],
        layers,
        ratio_grid: linear_ratio_grid(0.25, grid),
        num_classes: 3,
        head_pool: true,
    }
}

/// Runs the stage EA against exhaustive enumeration for ten seeds and
/// returns how many land within `top` of the feasible ranking.
fn stage_vs_exhaustive(widths: &[usize], grid: usize, top: f64) -> (usize, usize, usize) {
    let spec = convs_spec(widths, grid);
    let net = Supernet::<f64>::new(spec.clone(), 21).unwrap();
    let mut rng = rng_from_seed(16);
    let x = random_input(&input_shape(&spec, 8), &mut rng);
    let cache = net.stage_features(&x).unwrap();
    let cost = CostModel::macs(&spec).unwrap();
    let genes = all_genes(&spec, 0);
    let scored: Vec<(f64, f64)> = genes
        .iter()
        .map(|g| (cost.stage_cost(0, g).unwrap(), net.stage_loss(0, g, &cache).unwrap()))
        .collect();
    let (lo, hi) = cost.stage_cost_bounds(0).unwrap();
    let mut hits = 0;
    let mut worst_rank = 0;
    for seed in 0..10u64 {
        let budget = lo + (hi - lo) * (0.3 + 0.05 * seed as f64);
        let feasible: Vec<f64> = scored.iter().filter(|s| s.0 <= budget).map(|s| s.1).collect();
        let r = stage_ea(&net, 0, &cache, &cost, budget, &EaConfig::with_seed(seed)).unwrap();
        assert!(r.cost <= budget);
        let rank = rank_of(r.loss, &feasible);
        worst_rank = worst_rank.max(rank);
        if rank as f64 <= (top * feasible.len() as f64).ceil().max(1.0) {
            hits += 1;
        }
    }
    (hits, worst_rank, genes.len())
}

fn stage_ea_quality() -> Outcome {
    let (small_hits, _, small_n) = stage_vs_exhaustive(&[8, 8], 4, 0.0);
    let (big_hits, worst, big_n) = stage_vs_exhaustive(&[16, 16, 16], 8, 0.01);
    (
        small_hits == 10 && big_hits >= 9,
        format!(
            "2-layer g=4 ({small_n} genes): minimum in {small_hits}/10; 3-layer g=8 ({big_n} genes): top 1% in {big_hits}/10, worst rank {worst}"
        ),
    )
}

fn two_stage_toy() -> SupernetSpec {
    let layers = vec![
        conv(8, 3),
        LayerSpec::Relu,
        conv(8, 3),
        LayerSpec::Relu,
        pool(PoolType::Max),
        conv(12, 3),
        LayerSpec::Relu,
        conv(12, 3),
        LayerSpec::Relu,
    ];
    SupernetSpec {
        input: [2, 8, 8],
        stage_bounds: vec![0, 5, 9],
        layers,
        ratio_grid: linear_ratio_grid(0.25, 5),
        num_classes: 3,
        head_pool: true,
    }
}

fn dea_quality() -> Outcome {
    let mut rng = rng_from_seed(17);
    // feasibility: random budgets, both cost models, several architectures
    let mut feasible_runs = 0;
    let runs = 50;
    for k in 0..runs {
        let spec = if k % 2 == 0 { random_spec(&mut rng) } else { two_stage_toy() };
        let net = Supernet::<f64>::new(spec.clone(), k as u64).unwrap();
        let x = random_input(&input_shape(&spec, 4), &mut rng);
        let cache = net.stage_features(&x).unwrap();
        let (cost, budget) = if k % 5 == 4 {
            let table = pair_table(&spec, &mut rng);
            let cost = CostModel::latency(&spec, table).unwrap();
            let lo = cost.config_cost(&spec.tiny_config()).unwrap();
            let hi = cost.config_cost(&spec.full_config()).unwrap();
            let b = Budget::latency_ms(lo + (hi - lo) * rng.gen_range(0.2..1.0));
            (cost, b)
        } else {
            let cost = CostModel::macs(&spec).unwrap();
            let hi = cost.config_cost(&spec.full_config()).unwrap();
            let lo = cost.stagewise_cost(&spec.tiny_config()).unwrap();
            (cost, Budget::macs(lo + (hi - lo) * rng.gen_range(0.1..1.0)))
        };
        let cfg = DeaConfig {
            stage: EaConfig::small(32, 8, 5, k as u64),
            manager: EaConfig::small(16, 4, 5, k as u64),
            parallel: k % 3 == 0,
        };
        let r = dea_search(&net, &cache, &cost, budget, &cfg).unwrap();
        let exact = cost.config_cost(&r.config).unwrap();
        if exact <= budget.value && r.config.validate(&spec).is_ok() {
            feasible_runs += 1;
        }
    }

    // quality on an exhaustively searchable two-stage net
    let spec = two_stage_toy();
    let net = Supernet::<f64>::new(spec.clone(), 5).unwrap();
    let x = random_input(&input_shape(&spec, 8), &mut rng);
    let cache = net.stage_features(&x).unwrap();
    let cost = CostModel::macs(&spec).unwrap();
    let stage_losses: Vec<Vec<(StageGene, f64)>> = (0..2)
        .map(|s| {
            all_genes(&spec, s)
                .into_iter()
                .map(|g| {
                    let l = net.stage_loss(s, &g, &cache).unwrap();
                    (g, l)
                })
                .collect()
        })
        .collect();
    let cost_ref = &cost;
    let joint: Vec<(f64, f64)> = stage_losses[0]
        .iter()
        .flat_map(|(a, la)| {
            stage_losses[1].iter().map(move |(b, lb)| {
                let c = WidthConfig::from_stage_genes(&[a.clone(), b.clone()]);
                (cost_ref.config_cost(&c).unwrap(), la + lb)
            })
        })
        .collect();
    let full = cost.config_cost(&spec.full_config()).unwrap();
    let mut hits = 0;
    let mut worst = 0;
    for seed in 0..10u64 {
        let budget = full * (0.35 + 0.04 * seed as f64);
        let feasible: Vec<f64> = joint.iter().filter(|j| j.0 <= budget).map(|j| j.1).collect();
        let cfg = DeaConfig {
            stage: EaConfig::with_seed(seed),
            manager: EaConfig::with_seed(seed),
            parallel: false,
        };
        let r = dea_search(&net, &cache, &cost, Budget::macs(budget), &cfg).unwrap();
        let check = proxy_loss(&net, &r.config, &cache).unwrap();
        assert_eq!(check, r.total_loss);
        let rank = rank_of(r.total_loss, &feasible);
        worst = worst.max(rank);
        if rank as f64 <= (0.01 * feasible.len() as f64).ceil() {
            hits += 1;
        }
    }
    (
        feasible_runs == runs && hits >= 9,
        format!(
            "cost <= budget in {feasible_runs}/{runs} runs; 2-stage toy ({} configs): top 1% in {hits}/10, worst rank {worst}",
            joint.len()
        ),
    )
}

fn mixture_data(n: usize, seed: u64) -> Dataset {
    let mut sc = SynthConfig::new(n, 12, 4, 0.3, 100 + seed);
    sc.jitter = 1;
    sc.pattern = Pattern::Mixture;
    sc.prototypes = 12;
    split_per_class(&synth_dataset(&sc).unwrap(), 50, seed).unwrap()
}

fn desk_spec(w: usize) -> SupernetSpec {
    let mut spec = SupernetSpec::six_layer([1, 12, 12], [w, 2 * w, 4 * w], 4, linear_ratio_grid(0.25, 7));
    spec.head_pool = false;
    spec
}

fn desk_train(epochs: usize, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::new(epochs, 32, seed);
    t.lr = 0.05;
    t.lr_decay = 0.5;
    t.decay_epochs = (epochs / 4).max(1);
    t.distill_weight = 0.1;
    t.clip_norm = Some(1.0);
    t
}

fn distillation_ordering() -> Outcome {
    let data = mixture_data(1600, 0);
    let spec = desk_spec(4);
    let mut net = Supernet::<f32>::new(spec.clone(), 3).unwrap();
    train_supernet(&mut net, &data, &desk_train(5, 0), Teacher::Inplace, |_, _| Ok(())).unwrap();
    let mut rng = rng_from_seed(18);
    let batches: Vec<&[usize]> = data.train.chunks(16).take(60).collect();
    let (mut full_max, mut random, mut tiny) = (0.0f64, 0.0, 0.0);
    for idx in &batches {
        let (x, _) = data.batch(idx);
        let cache = net.stage_features(&x).unwrap();
        let total = |c: &WidthConfig| proxy_loss(&net, c, &cache).unwrap();
        full_max = full_max.max(total(&spec.full_config()));
        random += total(&sample_width_config(&spec, SampleMode::Random, &mut rng));
        tiny += total(&spec.tiny_config());
    }
    let n = batches.len() as f64;
    let (random, tiny) = (random / n, tiny / n);
    (
        full_max == 0.0 && random <= tiny && batches.len() >= 50,
        format!("{} batches: fullnet max {full_max}, random mean {random:.3}, tinynet mean {tiny:.3}", batches.len()),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ranking_effectiveness() -> Outcome {
    let spec = desk_spec(4);
    let mut ours = Vec::new();
    let mut base = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let data = mixture_data(1600, seed);
        let mut retrain = TrainConfig::new(30, 32, seed + 7);
        retrain.lr = 0.05;
        retrain.clip_norm = Some(1.0);
        retrain.lr_decay = 0.5;
        retrain.decay_epochs = 7;
        let cfg = RankingConfig {
            candidates: 16,
            bins: 4,
            train: desk_train(20, seed),
            retrain,
            proxy_examples: 200,
            baseline: true,
            seed,
            parallel: true,
        };
        let out = run_ranking_experiment::<f32>(&spec, &data, &cfg).unwrap();
        let b = out.baseline.unwrap().1.spearman;
        lines.push(format!("{:.3}/{b:.3}", out.correlation.spearman));
        ours.push(out.correlation.spearman);
        base.push(b);
    }
    let (m, mb) = (median(ours), median(base));
    (
        m >= 0.5 && m > mb,
        format!("median spearman {m:.3} vs single-stage {mb:.3} (per seed {})", lines.join(", ")),
    )
}

fn unfull_trend() -> Outcome {
    let spec = desk_spec(8);
    let grids = vec![2, 4, 8, 16];
    let mut per_seed: Vec<Vec<f64>> = Vec::new();
    for seed in 0..3u64 {
        let data = mixture_data(1600, seed);
        let cfg = UnfullConfig {
            grid_sizes: grids.clone(),
            grid_min: None,
            train: desk_train(20, seed),
            samples: 20,
            seed,
        };
        let pts = unfull_training_curve::<f32>(&spec, &data, &cfg).unwrap();
        per_seed.push(pts.iter().map(|p| p.expectation).collect());
    }
    let med: Vec<f64> = (0..grids.len()).map(|i| median(per_seed.iter().map(|s| s[i]).collect())).collect();
    let down = med.windows(2).filter(|w| w[1] <= w[0]).count();
    let shown: Vec<String> = grids.iter().zip(&med).map(|(g, e)| format!("g={g}: {e:.3}")).collect();
    (
        down >= 2 && med[grids.len() - 1] < med[0],
        format!("median expectation {}; {down}/3 pairs non-increasing", shown.join(", ")),
    )
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut cfg = tiny_config(&root.join("unused"));
    cfg["train"]["epochs"] = json!(3);
    let serial = write_config(root, "serial.json", &cfg);
    cfg["search"]["parallel"] = json!(true);
    let parallel = write_config(root, "parallel.json", &cfg);
    let mut codes = Vec::new();
    let mut outs = Vec::new();
    for run in ["train_a", "train_b"] {
        let out = root.join(run);
        codes.push(swp(&["train", "--config", s(&serial), "--out", s(&out)]));
        outs.push(dir_bytes(&out));
    }
    let ckpt = root.join("train_a").join("supernet.json");
    let net = swp::checkpoint::load::<f32>(&ckpt).unwrap();
    let budget = 0.5 * flops_of_config(net.spec(), &net.spec().full_config()).unwrap() as f64;
    let budget = budget.to_string();
    let mut searches = Vec::new();
    for (run, config, threads) in [("s1", &serial, "1"), ("s2", &serial, "1"), ("p1", &parallel, "4"), ("p2", &parallel, "4")] {
        let out = root.join(run);
        codes.push(swp(&[
            "--threads", threads, "search", "--config", s(config), "--out", s(&out), "--checkpoint", s(&ckpt),
            "--budget-macs", &budget,
        ]));
        searches.push(dir_bytes(&out));
    }
    let trains_equal = outs[0] == outs[1];
    let searches_equal = searches.windows(2).all(|w| w[0] == w[1]);
    (
        codes.iter().all(|&c| c == 0) && trains_equal && searches_equal && !outs[0].is_empty(),
        format!(
            "train reruns identical: {trains_equal} ({} files); search serial/parallel reruns identical: {searches_equal}",
            outs[0].len()
        ),
    )
}

/// Reference forward pass written with plain loops. Counts every
/// multiply-accumulate of convolutions, dense layers and the classifier.
fn counted_forward(net: &Supernet<f64>, x: &Tensor<f64>) -> (Vec<f64>, u64) {
    let spec = net.spec();
    let params = net.params();
    let n = x.shape()[0];
    let mut macs = 0u64;
    let mut out = Vec::new();
    for b in 0..n {
        let per = x.numel() / n;
        let mut act: Vec<f64> = x.data()[b * per..(b + 1) * per].to_vec();
        let mut shape: Vec<usize> = spec.input.to_vec();
        let mut j = 0;
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv { out: co, kernel, stride, pad } => {
                    let (wid, bid) = net.prunable_param_ids(j);
                    let (w, bias) = (params.get(wid).data(), params.get(bid).data());
                    let (ci, h, wd) = (shape[0], shape[1], shape[2]);
                    let (kh, kw) = (kernel[0], kernel[1]);
                    let oh = (h + 2 * pad - kh) / stride + 1;
                    let ow = (wd + 2 * pad - kw) / stride + 1;
                    let mut y = vec![0.0; co * oh * ow];
                    for o in 0..co {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let mut acc = bias[o];
                                for c in 0..ci {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            macs += 1;
                                            let iy = (yy * stride + ky) as isize - pad as isize;
                                            let ix = (xx * stride + kx) as isize - pad as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let v = act[(c * h + iy as usize) * wd + ix as usize];
                                            acc += w[((o * ci + c) * kh + ky) * kw + kx] * v;
                                        }
                                    }
                                }
                                y[(o * oh + yy) * ow + xx] = acc;
                            }
                        }
                    }
                    act = y;
                    shape = vec![co, oh, ow];
                    j += 1;
                }
                LayerSpec::Dense { out: co } => {
                    let (wid, bid) = net.prunable_param_ids(j);
                    let (w, bias) = (params.get(wid).data(), params.get(bid).data());
                    act = dense_counted(&act, w, bias, co, &mut macs);
                    shape = vec![co];
                    j += 1;
                }
                LayerSpec::Pool { kind, kernel, stride, .. } => {
                    let (c, h, wd) = (shape[0], shape[1], shape[2]);
                    let oh = (h - kernel[0]) / stride + 1;
                    let ow = (wd - kernel[1]) / stride + 1;
                    let mut y = vec![0.0; c * oh * ow];
                    for ch in 0..c {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let vals = (0..kernel[0]).flat_map(|ky| (0..kernel[1]).map(move |kx| (ky, kx))).map(|(ky, kx)| {
                                    act[(ch * h + yy * stride + ky) * wd + xx * stride + kx]
                                });
                                y[(ch * oh + yy) * ow + xx] = match kind {
                                    PoolType::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                                    PoolType::Avg => vals.sum::<f64>() / (kernel[0] * kernel[1]) as f64,
                                };
                            }
                        }
                    }
                    act = y;
                    shape = vec![c, oh, ow];
                }
                LayerSpec::Relu => act.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        if spec.head_pool && shape.len() == 3 {
            let area = shape[1] * shape[2];
            act = act.chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect();
        }
        let (wid, bid) = net.head_param_ids();
        let (w, bias) = (params.get(wid).data(), params.get(bid).data());
        out.extend(dense_counted(&act, w, bias, spec.num_classes, &mut macs));
    }
    (out, macs / n as u64)
}

fn dense_counted(x: &[f64], w: &[f64], bias: &[f64], out: usize, macs: &mut u64) -> Vec<f64> {
    (0..out)
        .map(|o| {
            let row = &w[o * x.len()..(o + 1) * x.len()];
            row.iter().zip(x).fold(bias[o], |acc, (a, b)| {
                *macs += 1;
                acc + a * b
            })
        })
        .collect()
}

/// A complete `(c_in, c_out)` latency grid per layer with random monotone
/// entries, plus a head row per input width.
fn pair_table(spec: &SupernetSpec, rng: &mut Rng) -> CostTable {
    let opts = spec.all_channel_options();
    let mut layers = Vec::new();
    for j in 0..opts.len() {
        let ins = if j == 0 { vec![spec.input[0]] } else { opts[j - 1].clone() };
        let outs = opts[j].clone();
        let mut ms = Vec::new();
        for &a in &ins {
            for &b in &outs {
                ms.push(0.01 * (a * b) as f64 + 0.001 * (a + b) as f64 + 0.05);
            }
        }
        layers.push(LayerLatency::ByPair { c_in: ins, c_out: outs, ms });
    }
    let last = opts.last().unwrap();
    let head = LayerLatency::ByChannels(last.iter().map(|&c| (c, 0.002 * c as f64 + 0.01)).collect());
    CostTable {
        layers,
        head: Some(head),
        overhead_ms: rng.gen_range(0.1..1.0),
    }
}

fn cost_model() -> Outcome {
    let mut rng = rng_from_seed(19);
    // MACs against the instrumented forward
    let mut mac_ok = 0;
    let mut out_err = 0.0f64;
    for k in 0..10 {
        let spec = if k % 2 == 0 { desk_spec(4) } else { random_spec(&mut rng) };
        let net = Supernet::<f64>::new(spec.clone(), k).unwrap();
        let config = random_config(&spec, &mut rng);
        let sub = net.extract_subnet(&config).unwrap();
        let x = random_input(&input_shape(&spec, 2), &mut rng);
        let (logits, counted) = counted_forward(&sub, &x);
        let reference = net.predict(&config, &x).unwrap();
        out_err = out_err.max(reference.data().iter().zip(&logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        if counted == flops_of_config(&spec, &config).unwrap() {
            mac_ok += 1;
        }
    }

    // latency against a brute-force lookup of every entry
    let mut lat_ok = 0;
    let lat_checks = 200;
    for k in 0..lat_checks {
        let spec = if k % 2 == 0 { desk_spec(4) } else { two_stage_toy() };
        let table = pair_table(&spec, &mut rng);
        let mut dense: HashMap<(usize, usize, usize), f64> = HashMap::new();
        for (j, l) in table.layers.iter().enumerate() {
            if let LayerLatency::ByPair { c_in, c_out, ms } = l {
                for (a, &ci) in c_in.iter().enumerate() {
                    for (b, &co) in c_out.iter().enumerate() {
                        dense.insert((j, ci, co), ms[a * c_out.len() + b]);
                    }
                }
            }
        }
        let head: HashMap<usize, f64> = match &table.head {
            Some(LayerLatency::ByChannels(p)) => p.iter().copied().collect(),
            _ => HashMap::new(),
        };
        let config = random_config(&spec, &mut rng);
        let mut expected = table.overhead_ms;
        let mut c_in = spec.input[0];
        for (j, &c) in config.channels.iter().enumerate() {
            expected += dense[&(j, c_in, c)];
            c_in = c;
        }
        expected += head[&c_in];
        if latency_of_config(&spec, &config, &table).unwrap() == expected {
            lat_ok += 1;
        }
    }

    // monotonicity under single-coordinate increments
    let mut mono_ok = 0;
    let steps = 1000;
    let specs = [desk_spec(4), two_stage_toy()];
    let tables: Vec<CostTable> = specs.iter().map(|s| pair_table(s, &mut rng)).collect();
    for k in 0..steps {
        let spec = &specs[k % 2];
        let opts = spec.all_channel_options();
        let mut config = random_config(spec, &mut rng);
        let growable: Vec<usize> = (0..opts.len()).filter(|&j| config.channels[j] < *opts[j].last().unwrap()).collect();
        if growable.is_empty() {
            config = spec.tiny_config();
            continue;
        }
        let j = growable[rng.gen_range(0..growable.len())];
        let before = config.clone();
        let pos = opts[j].iter().position(|&c| c == config.channels[j]).unwrap();
        config.channels[j] = opts[j][pos + 1];
        let macs_up = flops_of_config(spec, &config).unwrap() > flops_of_config(spec, &before).unwrap();
        let lat_up = latency_of_config(spec, &config, &tables[k % 2]).unwrap()
            >= latency_of_config(spec, &before, &tables[k % 2]).unwrap();
        if macs_up && lat_up {
            mono_ok += 1;
        }
    }
    (
        mac_ok == 10 && lat_ok == lat_checks && mono_ok == steps && out_err < 1e-9,
        format!(
            "instrumented MACs match {mac_ok}/10 (logit error {out_err:.1e}); latency matches {lat_ok}/{lat_checks}; monotone {mono_ok}/{steps}"
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient check on random networks", grad_check_nets),
        ("shared-weight subnet equals extracted network", subnet_equals_extracted),
        ("sampling expectations vs Monte Carlo", sampling_expectations),
        ("uniform configuration maximality", uniform_is_maximal),
        ("candidate counts", candidate_counts),
        ("stage EA vs exhaustive search", stage_ea_quality),
        ("DEA feasibility and quality", dea_quality),
        ("distillation loss ordering", distillation_ordering),
        ("ranking effectiveness", ranking_effectiveness),
        ("unfull-training trend", unfull_trend),
        ("determinism", determinism),
        ("cost model", cost_model),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = check();
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {n:>2} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
