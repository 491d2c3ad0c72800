//! CSV formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! reader here reproduces the written values exactly.

use std::collections::BTreeMap;

use swp_core::analysis::{RankingRecord, UnfullPoint};
use swp_core::cost::{CostTable, LayerLatency};
use swp_core::slimnet::{SupernetSpec, WidthConfig};
use swp_core::train::TrainLog;

use crate::error::{CliError, Result};

fn bad(what: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{what}: {msg}"))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes())
}

fn check_header(what: &str, rdr: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<()> {
    let h = rdr.headers().map_err(|e| bad(what, e))?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(bad(what, format!("header must be `{}`", expected.join(","))));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(what: &str, row: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(what, format!("row {row}: bad {name} `{s}`")))
}

fn opt_field<T: std::str::FromStr>(what: &str, row: usize, name: &str, s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        field(what, row, name, s).map(Some)
    }
}

fn rows(what: &str, text: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = reader(text);
    check_header(what, &mut rdr, header)?;
    rdr.records().map(|r| r.map_err(|e| bad(what, e))).collect()
}

const WIDTH_HEADER: [&str; 3] = ["layer", "channels", "max_channels"];

/// One row per prunable layer.
pub fn write_width_csv(config: &WidthConfig, spec: &SupernetSpec) -> String {
    let mut out = WIDTH_HEADER.join(",") + "\n";
    for (j, (&c, m)) in config.channels.iter().zip(spec.max_widths()).enumerate() {
        out += &format!("{j},{c},{m}\n");
    }
    out
}

/// Parses a width CSV and validates it against `spec`.
pub fn read_width_csv(text: &str, spec: &SupernetSpec) -> Result<WidthConfig> {
    const W: &str = "width config";
    let maxes = spec.max_widths();
    let mut channels = Vec::new();
    for (i, r) in rows(W, text, &WIDTH_HEADER)?.iter().enumerate() {
        let j: usize = field(W, i, "layer", &r[0])?;
        if j != i {
            return Err(bad(W, format!("row {i}: layer {j} out of order")));
        }
        let c: usize = field(W, i, "channels", &r[1])?;
        let m: usize = field(W, i, "max_channels", &r[2])?;
        if maxes.get(j) != Some(&m) {
            return Err(bad(W, format!("row {i}: max_channels {m} does not match the spec")));
        }
        channels.push(c);
    }
    let config = WidthConfig::new(channels);
    config.validate(spec).map_err(|e| bad(W, e))?;
    Ok(config)
}

const COST_HEADER: [&str; 4] = ["layer", "c_in", "c_out", "latency_ms"];

/// Latency table rows: `j,,c_out,ms` for a per-channel entry of prunable
/// layer `j`, `j,c_in,c_out,ms` for a pair grid, `head,c_in,,ms` for the
/// classifier and one `overhead,,,ms` row.
pub fn read_cost_table(text: &str) -> Result<CostTable> {
    const W: &str = "cost table";
    let mut single: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut pairs: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    let mut head: BTreeMap<usize, f64> = BTreeMap::new();
    let mut overhead = None;
    for (i, r) in rows(W, text, &COST_HEADER)?.iter().enumerate() {
        let c_in: Option<usize> = opt_field(W, i, "c_in", &r[1])?;
        let c_out: Option<usize> = opt_field(W, i, "c_out", &r[2])?;
        let ms: f64 = field(W, i, "latency_ms", &r[3])?;
        let dup = || bad(W, format!("row {i}: duplicate entry"));
        match (&r[0], c_in, c_out) {
            ("overhead", None, None) => {
                if overhead.replace(ms).is_some() {
                    return Err(dup());
                }
            }
            ("head", Some(c), None) => {
                if head.insert(c, ms).is_some() {
                    return Err(dup());
                }
            }
            (l, None, Some(c)) => {
                let j = field(W, i, "layer", l)?;
                if single.entry(j).or_default().insert(c, ms).is_some() {
                    return Err(dup());
                }
            }
            (l, Some(a), Some(b)) => {
                let j = field(W, i, "layer", l)?;
                if pairs.entry(j).or_default().insert((a, b), ms).is_some() {
                    return Err(dup());
                }
            }
            _ => return Err(bad(W, format!("row {i}: unrecognised row shape"))),
        }
    }
    let overhead_ms = overhead.ok_or_else(|| bad(W, "missing overhead row"))?;
    let n = single.keys().chain(pairs.keys()).max().map_or(0, |&m| m + 1);
    let mut layers = Vec::with_capacity(n);
    for j in 0..n {
        let entry = match (single.remove(&j), pairs.remove(&j)) {
            (Some(s), None) => LayerLatency::ByChannels(s.into_iter().collect()),
            (None, Some(p)) => {
                let ins: Vec<usize> = p.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
                let outs: Vec<usize> = p.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
                if p.len() != ins.len() * outs.len() {
                    return Err(bad(W, format!("layer {j}: pair entries do not form a complete grid")));
                }
                let ms = ins.iter().flat_map(|&a| outs.iter().map(move |&b| (a, b))).map(|k| p[&k]).collect();
                LayerLatency::ByPair { c_in: ins, c_out: outs, ms }
            }
            (None, None) => return Err(bad(W, format!("layer {j}: no entries"))),
            (Some(_), Some(_)) => return Err(bad(W, format!("layer {j}: mixes per-channel and pair entries"))),
        };
        layers.push(entry);
    }
    let head = (!head.is_empty()).then(|| LayerLatency::ByChannels(head.into_iter().collect()));
    Ok(CostTable { layers, head, overhead_ms })
}

pub fn write_cost_table(table: &CostTable) -> Result<String> {
    let mut out = COST_HEADER.join(",") + "\n";
    for (j, l) in table.layers.iter().enumerate() {
        match l {
            LayerLatency::ByChannels(p) => {
                for &(c, ms) in p {
                    out += &format!("{j},,{c},{ms}\n");
                }
            }
            LayerLatency::ByPair { c_in, c_out, ms } => {
                for (a, &ci) in c_in.iter().enumerate() {
                    for (b, &co) in c_out.iter().enumerate() {
                        out += &format!("{j},{ci},{co},{}\n", ms[a * c_out.len() + b]);
                    }
                }
            }
        }
    }
    match &table.head {
        Some(LayerLatency::ByChannels(p)) => {
            for &(c, ms) in p {
                out += &format!("head,{c},,{ms}\n");
            }
        }
        Some(LayerLatency::ByPair { .. }) => return Err(bad("cost table", "head latency is keyed by input channels only")),
        None => {}
    }
    Ok(out + &format!("overhead,,,{}\n", table.overhead_ms))
}

/// `iteration,epoch,lr,task_loss`, then `sub{r}_stage{s}` per random subnet
/// and stage, then `tiny_stage{s}`.
pub fn write_train_log(log: &TrainLog) -> String {
    let (subs, stages, tiny) = log.entries.first().map_or((0, 0, 0), |e| {
        (e.random.len(), e.random.first().map_or(e.tiny.len(), Vec::len), e.tiny.len())
    });
    let mut header = vec!["iteration".to_string(), "epoch".into(), "lr".into(), "task_loss".into()];
    for r in 0..subs {
        header.extend((0..stages).map(|s| format!("sub{r}_stage{s}")));
    }
    header.extend((0..tiny).map(|s| format!("tiny_stage{s}")));
    let mut out = header.join(",") + "\n";
    for e in &log.entries {
        let mut row = vec![e.iteration.to_string(), e.epoch.to_string(), e.lr.to_string(), e.task_loss.to_string()];
        row.extend(e.random.iter().flatten().map(f64::to_string));
        row.extend(e.tiny.iter().map(f64::to_string));
        out += &(row.join(",") + "\n");
    }
    out
}

const RECORD_HEADER: [&str; 5] = ["candidate", "macs", "proxy_loss", "actual_accuracy", "channels"];

/// Ranking records; `channels` is space-separated.
pub fn write_records(records: &[RankingRecord]) -> String {
    let mut out = RECORD_HEADER.join(",") + "\n";
    for r in records {
        let ch: Vec<String> = r.config.channels.iter().map(usize::to_string).collect();
        out += &format!("{},{},{},{},{}\n", r.id, r.macs, r.proxy, r.actual, ch.join(" "));
    }
    out
}

pub fn read_records(text: &str) -> Result<Vec<RankingRecord>> {
    const W: &str = "records";
    rows(W, text, &RECORD_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let channels = r[4]
                .split_whitespace()
                .map(|c| field(W, i, "channels", c))
                .collect::<Result<Vec<usize>>>()?;
            Ok(RankingRecord {
                id: field(W, i, "candidate", &r[0])?,
                macs: field(W, i, "macs", &r[1])?,
                proxy: field(W, i, "proxy_loss", &r[2])?,
                actual: field(W, i, "actual_accuracy", &r[3])?,
                config: WidthConfig::new(channels),
            })
        })
        .collect()
}

pub fn write_curve(curve: &[f64]) -> String {
    let mut out = String::from("generation,best_loss\n");
    for (g, l) in curve.iter().enumerate() {
        out += &format!("{g},{l}\n");
    }
    out
}

/// Analytic expected inclusion counts with optional simulated counts.
pub fn write_expectations(expected: &[f64], simulated: Option<&[u64]>) -> String {
    let mut out = String::from(if simulated.is_some() { "i,expected,simulated\n" } else { "i,expected\n" });
    for (k, e) in expected.iter().enumerate() {
        match simulated {
            Some(s) => out += &format!("{},{e:?},{}\n", k + 1, s[k]),
            None => out += &format!("{},{e:?}\n", k + 1),
        }
    }
    out
}

pub fn write_unfull(points: &[UnfullPoint]) -> String {
    let mut out = String::from("grid_size,log10_candidates,expectation\n");
    for p in points {
        out += &format!("{},{},{}\n", p.grid_size, p.log10_candidates, p.expectation);
    }
    out
}
