//! Cost accounting for width configurations.
//!
//! Costs are MACs (one multiply-accumulate each) or table-driven latency in
//! milliseconds. The classifier head is included; stage adapters are not.
//!
//! Stage costs are evaluated the way the search sees a stage: the first layer
//! of stage `i` reads the fullnet's stage input at full width. For an
//! assembled configuration, whose stage inputs may be narrower, the true cost
//! is therefore at most the sum of its stage costs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::slimnet::{LayerGeom, LayerSpec, StageGene, SupernetSpec, WidthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BudgetKind {
    Macs,
    LatencyMs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Budget {
    pub kind: BudgetKind,
    pub value: f64,
}

impl Budget {
    pub fn macs(value: f64) -> Self {
        Self { kind: BudgetKind::Macs, value }
    }

    pub fn latency_ms(value: f64) -> Self {
        Self {
            kind: BudgetKind::LatencyMs,
            value,
        }
    }
}

/// Latency of one layer as a function of its channel counts.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerLatency {
    /// Keyed by output channels (input channels for the classifier head).
    ByChannels(Vec<(usize, f64)>),
    /// Full grid over `(c_in, c_out)`, row-major in `c_in`.
    ByPair {
        c_in: Vec<usize>,
        c_out: Vec<usize>,
        ms: Vec<f64>,
    },
}

fn interp(points: &[(usize, f64)], c: usize) -> Option<f64> {
    let pos = points.partition_point(|&(k, _)| k < c);
    let &(hi_c, hi_v) = points.get(pos)?;
    if hi_c == c {
        return Some(hi_v);
    }
    if pos == 0 {
        return None;
    }
    let (lo_c, lo_v) = points[pos - 1];
    let t = (c - lo_c) as f64 / (hi_c - lo_c) as f64;
    Some(lo_v + t * (hi_v - lo_v))
}

impl LayerLatency {
    fn lookup(&self, c_in: usize, c_out: usize) -> Option<f64> {
        match self {
            LayerLatency::ByChannels(points) => interp(points, c_out),
            LayerLatency::ByPair { c_in: ins, c_out: outs, ms } => {
                let row = |i: usize| -> Vec<(usize, f64)> {
                    outs.iter().copied().zip(ms[i * outs.len()..(i + 1) * outs.len()].iter().copied()).collect()
                };
                let column: Vec<(usize, f64)> = ins
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| interp(&row(i), c_out).map(|v| (k, v)))
                    .collect::<Option<_>>()?;
                interp(&column, c_in)
            }
        }
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTable(format!("layer {layer}: {m}")));
        let monotone = |p: &[(usize, f64)]| {
            p.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1) && p.iter().all(|&(_, v)| v > 0.0)
        };
        match self {
            LayerLatency::ByChannels(p) => {
                if p.is_empty() || !monotone(p) {
                    return bad("latencies must be positive and nondecreasing in channels");
                }
            }
            LayerLatency::ByPair { c_in, c_out, ms } => {
                if c_in.is_empty() || c_out.is_empty() || ms.len() != c_in.len() * c_out.len() {
                    return bad("pair table must be a complete c_in × c_out grid");
                }
                for i in 0..c_in.len() {
                    let row: Vec<_> = c_out.iter().copied().zip(ms[i * c_out.len()..].iter().copied()).collect();
                    if !monotone(&row) {
                        return bad("latencies must be positive and nondecreasing in c_out");
                    }
                }
                for o in 0..c_out.len() {
                    let col: Vec<_> = c_in.iter().copied().enumerate().map(|(i, k)| (k, ms[i * c_out.len() + o])).collect();
                    if !monotone(&col) {
                        return bad("latencies must be positive and nondecreasing in c_in");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Measured per-layer latencies plus a fixed overhead.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    /// One entry per prunable layer.
    pub layers: Vec<LayerLatency>,
    /// Classifier head, keyed by its input channels. Missing means zero.
    pub head: Option<LayerLatency>,
    pub overhead_ms: f64,
}

impl CostTable {
    pub fn validate(&self, spec: &SupernetSpec) -> Result<()> {
        if self.layers.len() != spec.depth() {
            return Err(Error::InvalidTable(format!(
                "{} layer entries for {} prunable layers",
                self.layers.len(),
                spec.depth()
            )));
        }
        if !(self.overhead_ms >= 0.0) {
            return Err(Error::InvalidTable("overhead must be nonnegative".into()));
        }
        for (j, l) in self.layers.iter().enumerate() {
            l.validate(j)?;
        }
        if let Some(h) = &self.head {
            h.validate(spec.depth())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Metric {
    Macs,
    Latency(CostTable),
}

/// Cost evaluator bound to one supernet spec.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    spec: SupernetSpec,
    geom: Vec<LayerGeom>,
    prunable: Vec<usize>,
    metric: Metric,
}

impl CostModel {
    pub fn macs(spec: &SupernetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            geom: spec.geometry()?,
            prunable: spec.prunable_layers(),
            spec: spec.clone(),
            metric: Metric::Macs,
        })
    }

    pub fn latency(spec: &SupernetSpec, table: CostTable) -> Result<Self> {
        spec.validate()?;
        table.validate(spec)?;
        Ok(Self {
            geom: spec.geometry()?,
            prunable: spec.prunable_layers(),
            spec: spec.clone(),
            metric: Metric::Latency(table),
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn kind(&self) -> BudgetKind {
        match self.metric {
            Metric::Macs => BudgetKind::Macs,
            Metric::Latency(_) => BudgetKind::LatencyMs,
        }
    }

    pub fn overhead(&self) -> f64 {
        match &self.metric {
            Metric::Macs => 0.0,
            Metric::Latency(t) => t.overhead_ms,
        }
    }

    /// MACs of prunable layer `j` with `c_in` input and `c_out` output channels.
    pub fn layer_macs(&self, j: usize, c_in: usize, c_out: usize) -> u64 {
        let i = self.prunable[j];
        let g = &self.geom[i];
        let (c_in, c_out) = (c_in as u64, c_out as u64);
        match self.spec.layers[i] {
            LayerSpec::Conv { kernel, .. } => {
                c_in * c_out * (kernel[0] * kernel[1]) as u64 * g.out_spatial() as u64
            }
            _ => c_in * g.in_spatial() as u64 * c_out,
        }
    }

    /// MACs of the classifier head fed by `c_in` channels.
    pub fn head_macs(&self, c_in: usize) -> u64 {
        let spatial = if self.spec.head_pool {
            1
        } else {
            self.geom.last().map(LayerGeom::out_spatial).unwrap_or(1)
        };
        (c_in * spatial * self.spec.num_classes) as u64
    }

    pub fn layer_cost(&self, j: usize, c_in: usize, c_out: usize) -> Result<f64> {
        match &self.metric {
            Metric::Macs => Ok(self.layer_macs(j, c_in, c_out) as f64),
            Metric::Latency(t) => t.layers[j]
                .lookup(c_in, c_out)
                .ok_or(Error::OutsideTable { layer: j, channels: c_out }),
        }
    }

    pub fn head_cost(&self, c_in: usize) -> Result<f64> {
        match &self.metric {
            Metric::Macs => Ok(self.head_macs(c_in) as f64),
            Metric::Latency(t) => match &t.head {
                None => Ok(0.0),
                Some(h) => h.lookup(c_in, c_in).ok_or(Error::OutsideTable {
                    layer: self.prunable.len(),
                    channels: c_in,
                }),
            },
        }
    }

    fn input_channels(&self, j: usize, channels: &[usize]) -> usize {
        if j == 0 {
            self.spec.input[0]
        } else {
            channels[j - 1]
        }
    }

    /// Cost of the assembled network with widths `config`, overhead included.
    pub fn config_cost(&self, config: &WidthConfig) -> Result<f64> {
        config.validate(&self.spec)?;
        let c = &config.channels;
        let mut total = self.overhead();
        for j in 0..c.len() {
            total += self.layer_cost(j, self.input_channels(j, c), c[j])?;
        }
        total += self.head_cost(*c.last().unwrap_or(&self.spec.input[0]))?;
        Ok(total)
    }

    /// Cost of stage `stage` with widths `gene`, reading a full-width input.
    /// The last stage also carries the classifier head.
    pub fn stage_cost(&self, stage: usize, gene: &StageGene) -> Result<f64> {
        let range = self.spec.stage_prunable(stage);
        if gene.channels.len() != range.len() {
            return Err(Error::InvalidConfig(format!(
                "stage {stage}: expected {} widths, got {}",
                range.len(),
                gene.channels.len()
            )));
        }
        let mut c_in = self.spec.stage_input_channels(stage);
        let mut total = 0.0;
        for (&c, j) in gene.channels.iter().zip(range) {
            total += self.layer_cost(j, c_in, c)?;
            c_in = c;
        }
        if stage + 1 == self.spec.num_stages() {
            total += self.head_cost(c_in)?;
        }
        Ok(total)
    }

    /// Sum of the stage costs of `config` plus overhead: an upper bound on
    /// [`CostModel::config_cost`], equal to it when every stage boundary is at
    /// full width.
    pub fn stagewise_cost(&self, config: &WidthConfig) -> Result<f64> {
        let mut total = self.overhead();
        for s in 0..self.spec.num_stages() {
            total += self.stage_cost(s, &config.stage_gene(&self.spec, s))?;
        }
        Ok(total)
    }

    /// `(cost at all-minimum widths, cost at all-maximum widths)` of a stage.
    pub fn stage_cost_bounds(&self, stage: usize) -> Result<(f64, f64)> {
        let range = self.spec.stage_prunable(stage);
        let lo = StageGene::new(range.clone().map(|j| self.spec.channel_options(j)[0]).collect());
        let hi = StageGene::new(range.map(|j| self.spec.max_widths()[j]).collect());
        Ok((self.stage_cost(stage, &lo)?, self.stage_cost(stage, &hi)?))
    }
}

/// MACs of the assembled network `config`.
pub fn flops_of_config(spec: &SupernetSpec, config: &WidthConfig) -> Result<u64> {
    let model = CostModel::macs(spec)?;
    config.validate(spec)?;
    let c = &config.channels;
    let mut total = 0u64;
    for j in 0..c.len() {
        total += model.layer_macs(j, model.input_channels(j, c), c[j]);
    }
    total += model.head_macs(*c.last().unwrap_or(&spec.input[0]));
    Ok(total)
}

/// Table latency of `config` in milliseconds, overhead included.
pub fn latency_of_config(spec: &SupernetSpec, config: &WidthConfig, table: &CostTable) -> Result<f64> {
    CostModel::latency(spec, table.clone())?.config_cost(config)
}
