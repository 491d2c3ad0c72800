//! Slimmable supernets.
//!
//! Every prunable layer (convolution or hidden dense) keeps a full-width
//! weight tensor; a subnet of width `c` uses its first `c` filters, and the
//! next layer uses the matching first `c` input channels. Layers are grouped
//! into stages; each stage carries a 1×1 adapter that maps a subnet's stage
//! output back to the fullnet's channel count for the distillation loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use num_bigint::BigUint;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::kernels::{window_extent, PoolKind, Window};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
    },
    Dense {
        out: usize,
    },
    Pool {
        #[cfg_attr(feature = "serde", serde(rename = "pool"))]
        kind: PoolType,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
    },
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PoolType {
    Max,
    Avg,
}

impl From<PoolType> for PoolKind {
    fn from(p: PoolType) -> Self {
        match p {
            PoolType::Max => PoolKind::Max,
            PoolType::Avg => PoolKind::Avg,
        }
    }
}

impl LayerSpec {
    pub fn conv3(out: usize) -> Self {
        LayerSpec::Conv {
            out,
            kernel: [3, 3],
            stride: 1,
            pad: 1,
        }
    }

    pub fn max_pool2() -> Self {
        LayerSpec::Pool {
            kind: PoolType::Max,
            kernel: [2, 2],
            stride: 2,
            pad: 0,
        }
    }

    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn max_out(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { out, .. } | LayerSpec::Dense { out } => Some(out),
            _ => None,
        }
    }
}

/// `count` ratios evenly spaced on `[lo, 1.0]`.
pub fn linear_ratio_grid(lo: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![1.0];
    }
    let step = (1.0 - lo) / (count - 1) as f64;
    (0..count)
        .map(|i| if i + 1 == count { 1.0 } else { lo + step * i as f64 })
        .collect()
}

/// The default width grid: 31 ratios from 0.1 to 1.0.
pub fn default_ratio_grid() -> Vec<f64> {
    linear_ratio_grid(0.1, 31)
}

/// Channel count for ratio `r` of `m`: `max(1, round(r·m))`.
pub fn quantize(r: f64, m: usize) -> usize {
    let c = Float::round(r * m as f64) as usize;
    c.clamp(1, m)
}

/// Search space description: ordered layers, stage partition, width grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SupernetSpec {
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// `N + 1` layer indices; stage `i` spans `stage_bounds[i]..stage_bounds[i+1]`.
    pub stage_bounds: Vec<usize>,
    pub ratio_grid: Vec<f64>,
    pub num_classes: usize,
    /// Global average pooling before the classifier.
    pub head_pool: bool,
}

/// Static geometry of one layer at full width.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeom {
    /// Input activation shape without the batch axis.
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl LayerGeom {
    /// Spatial positions per input channel (`h·w`, or 1 for flat inputs).
    pub fn in_spatial(&self) -> usize {
        self.in_shape[1..].iter().product::<usize>().max(1)
    }

    pub fn out_spatial(&self) -> usize {
        self.out_shape[1..].iter().product::<usize>().max(1)
    }
}

impl SupernetSpec {
    /// Six 3×3 convolutions in three downsampling stages, global pooling and
    /// a linear classifier.
    pub fn six_layer(input: [usize; 3], widths: [usize; 3], num_classes: usize, grid: Vec<f64>) -> Self {
        let mut layers = Vec::new();
        let mut bounds = vec![0];
        for (s, &w) in widths.iter().enumerate() {
            layers.extend([LayerSpec::conv3(w), LayerSpec::Relu, LayerSpec::conv3(w), LayerSpec::Relu]);
            if s + 1 < widths.len() {
                layers.push(LayerSpec::max_pool2());
            }
            bounds.push(layers.len());
        }
        Self {
            input,
            layers,
            stage_bounds: bounds,
            ratio_grid: grid,
            num_classes,
            head_pool: true,
        }
    }

    /// The same layers as a single stage.
    pub fn single_stage(&self) -> Self {
        let mut s = self.clone();
        s.stage_bounds = vec![0, self.layers.len()];
        s
    }

    pub fn num_stages(&self) -> usize {
        self.stage_bounds.len().saturating_sub(1)
    }

    pub fn stage_layers(&self, stage: usize) -> Range<usize> {
        self.stage_bounds[stage]..self.stage_bounds[stage + 1]
    }

    /// Layer indices of the prunable layers, in order.
    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_prunable()).collect()
    }

    /// Depth `L`: number of prunable layers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.is_prunable()).count()
    }

    /// Indices (into the prunable-layer list) of the layers in `stage`.
    pub fn stage_prunable(&self, stage: usize) -> Range<usize> {
        let r = self.stage_layers(stage);
        let before = self.layers[..r.start].iter().filter(|l| l.is_prunable()).count();
        let inside = self.layers[r].iter().filter(|l| l.is_prunable()).count();
        before..before + inside
    }

    pub fn stage_depths(&self) -> Vec<usize> {
        (0..self.num_stages()).map(|s| self.stage_prunable(s).len()).collect()
    }

    /// Maximum channel count `m` of each prunable layer.
    pub fn max_widths(&self) -> Vec<usize> {
        self.layers.iter().filter_map(LayerSpec::max_out).collect()
    }

    /// Distinct legal channel counts of prunable layer `j`, ascending.
    pub fn channel_options(&self, j: usize) -> Vec<usize> {
        let m = self.max_widths()[j];
        let mut opts: Vec<usize> = self.ratio_grid.iter().map(|&r| quantize(r, m)).collect();
        opts.sort_unstable();
        opts.dedup();
        opts
    }

    pub fn all_channel_options(&self) -> Vec<Vec<usize>> {
        (0..self.depth()).map(|j| self.channel_options(j)).collect()
    }

    /// Full-width channel count feeding stage `stage`.
    pub fn stage_input_channels(&self, stage: usize) -> usize {
        let start = self.stage_layers(stage).start;
        self.geometry().expect("validated spec")[start].in_shape[0]
    }

    /// Full-width channel count leaving stage `stage`.
    pub fn stage_output_channels(&self, stage: usize) -> usize {
        let last = self.stage_layers(stage).end - 1;
        self.geometry().expect("validated spec")[last].out_shape[0]
    }

    /// Per-layer input/output shapes at full width.
    pub fn geometry(&self) -> Result<Vec<LayerGeom>> {
        let mut shape: Vec<usize> = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = shape.clone();
            shape = match *layer {
                LayerSpec::Conv { out, kernel, stride, pad } => {
                    if in_shape.len() != 3 {
                        return Err(Error::InvalidSpec(format!("layer {i}: conv after dense")));
                    }
                    let h = window_extent("conv2d", in_shape[1], kernel[0], stride, pad)?;
                    let w = window_extent("conv2d", in_shape[2], kernel[1], stride, pad)?;
                    vec![out, h, w]
                }
                LayerSpec::Pool { kernel, stride, pad, .. } => {
                    if in_shape.len() != 3 {
                        return Err(Error::InvalidSpec(format!("layer {i}: pool after dense")));
                    }
                    if pad >= kernel[0].min(kernel[1]) {
                        return Err(Error::InvalidSpec(format!("layer {i}: pool pad must be below kernel")));
                    }
                    let h = window_extent("pool", in_shape[1], kernel[0], stride, pad)?;
                    let w = window_extent("pool", in_shape[2], kernel[1], stride, pad)?;
                    vec![in_shape[0], h, w]
                }
                LayerSpec::Dense { out } => vec![out],
                LayerSpec::Relu => in_shape.clone(),
            };
            out.push(LayerGeom { in_shape, out_shape: shape.clone() });
        }
        Ok(out)
    }

    /// Shape entering the classifier (after optional global pooling).
    pub fn head_in_shape(&self) -> Result<Vec<usize>> {
        let last = self
            .geometry()?
            .last()
            .map(|g| g.out_shape.clone())
            .unwrap_or_else(|| self.input.to_vec());
        Ok(if self.head_pool && last.len() == 3 {
            vec![last[0], 1, 1]
        } else {
            last
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.input.iter().any(|&d| d == 0) {
            return bad("input extents must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv { out, kernel, stride, .. } => {
                    if out == 0 || stride == 0 || kernel.contains(&0) {
                        return bad(format!("layer {i}: conv needs positive out/kernel/stride"));
                    }
                }
                LayerSpec::Pool { kernel, stride, .. } => {
                    if stride == 0 || kernel.contains(&0) {
                        return bad(format!("layer {i}: pool needs positive kernel/stride"));
                    }
                }
                LayerSpec::Dense { out } if out == 0 => {
                    return bad(format!("layer {i}: dense needs positive out"));
                }
                _ => {}
            }
        }
        let b = &self.stage_bounds;
        if b.len() < 2 || b[0] != 0 || *b.last().unwrap() != self.layers.len() {
            return bad("stage bounds must start at 0 and end at the layer count".into());
        }
        if b.windows(2).any(|w| w[0] >= w[1]) {
            return bad("stage bounds must be strictly increasing".into());
        }
        for s in 0..self.num_stages() {
            if self.stage_prunable(s).is_empty() {
                return bad(format!("stage {s} has no prunable layer"));
            }
        }
        let g = &self.ratio_grid;
        if g.is_empty() || g.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad("ratios must lie in (0, 1]".into());
        }
        if g.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ratio grid must be sorted and distinct".into());
        }
        if *g.last().unwrap() != 1.0 {
            return bad("ratio grid must contain 1.0".into());
        }
        self.geometry()?;
        Ok(())
    }

    /// A copy whose maximum widths are the widths of `config`: the standalone
    /// network a searched subnet is retrained as.
    pub fn with_widths(&self, config: &WidthConfig) -> Result<Self> {
        config.validate_shape(self)?;
        let mut s = self.clone();
        let mut j = 0;
        for l in &mut s.layers {
            match l {
                LayerSpec::Conv { out, .. } | LayerSpec::Dense { out } => {
                    *out = config.channels[j];
                    j += 1;
                }
                _ => {}
            }
        }
        s.ratio_grid = vec![1.0];
        Ok(s)
    }

    pub fn full_config(&self) -> WidthConfig {
        WidthConfig::new(self.max_widths())
    }

    pub fn tiny_config(&self) -> WidthConfig {
        let r = self.ratio_grid[0];
        WidthConfig::new(self.max_widths().iter().map(|&m| quantize(r, m)).collect())
    }
}

/// Per-prunable-layer channel counts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WidthConfig {
    pub channels: Vec<usize>,
}

impl WidthConfig {
    pub fn new(channels: Vec<usize>) -> Self {
        Self { channels }
    }

    fn validate_shape(&self, spec: &SupernetSpec) -> Result<()> {
        let m = spec.max_widths();
        if self.channels.len() != m.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} layers, got {}",
                m.len(),
                self.channels.len()
            )));
        }
        for (j, (&c, &mj)) in self.channels.iter().zip(&m).enumerate() {
            if c == 0 || c > mj {
                return Err(Error::InvalidConfig(format!("layer {j}: {c} channels outside 1..={mj}")));
            }
        }
        Ok(())
    }

    /// Checks that every count is reachable from the ratio grid.
    pub fn validate(&self, spec: &SupernetSpec) -> Result<()> {
        self.validate_shape(spec)?;
        for (j, &c) in self.channels.iter().enumerate() {
            if !spec.channel_options(j).contains(&c) {
                return Err(Error::InvalidConfig(format!("layer {j}: {c} channels not on the ratio grid")));
            }
        }
        Ok(())
    }

    /// The entries belonging to `stage`.
    pub fn stage_gene(&self, spec: &SupernetSpec, stage: usize) -> StageGene {
        StageGene::new(self.channels[spec.stage_prunable(stage)].to_vec())
    }

    /// Concatenates per-stage genes in stage order.
    pub fn from_stage_genes(genes: &[StageGene]) -> Self {
        Self::new(genes.iter().flat_map(|g| g.channels.iter().copied()).collect())
    }
}

/// A [`WidthConfig`] restricted to one stage's prunable layers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageGene {
    pub channels: Vec<usize>,
}

impl StageGene {
    pub fn new(channels: Vec<usize>) -> Self {
        Self { channels }
    }

    pub fn validate(&self, spec: &SupernetSpec, stage: usize) -> Result<()> {
        let range = spec.stage_prunable(stage);
        if self.channels.len() != range.len() {
            return Err(Error::InvalidConfig(format!(
                "stage {stage}: expected {} entries, got {}",
                range.len(),
                self.channels.len()
            )));
        }
        for (&c, j) in self.channels.iter().zip(range) {
            if !spec.channel_options(j).contains(&c) {
                return Err(Error::InvalidConfig(format!("layer {j}: {c} channels not on the ratio grid")));
            }
        }
        Ok(())
    }
}

/// Candidate counts: `g^{L_i}` per stage and `g^L` overall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateCounts {
    pub per_stage: Vec<BigUint>,
    pub total: BigUint,
}

pub fn count_candidates_for(grid_size: usize, stage_depths: &[usize]) -> CandidateCounts {
    let g = BigUint::from(grid_size);
    let per_stage: Vec<BigUint> = stage_depths
        .iter()
        .map(|&d| num_traits::pow::pow(g.clone(), d))
        .collect();
    let total = num_traits::pow::pow(g, stage_depths.iter().sum());
    CandidateCounts { per_stage, total }
}

pub fn count_candidates(spec: &SupernetSpec) -> CandidateCounts {
    count_candidates_for(spec.ratio_grid.len(), &spec.stage_depths())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerParams {
    weight: ParamId,
    bias: ParamId,
}

/// Stage-wise fullnet features for one batch: the input `X̂_{i-1}` and the
/// target `Ŷ_i` of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatureCache<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

/// A slimmable supernet: spec plus full-width parameters and stage adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet<T> {
    spec: SupernetSpec,
    params: ParamStore<T>,
    layer_params: Vec<Option<LayerParams>>,
    head: LayerParams,
    adapters: Vec<LayerParams>,
}

impl<T: Real> Supernet<T> {
    /// He-normal weights, zero biases, identity adapters.
    pub fn new(spec: SupernetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let geom = spec.geometry()?;
        let mut rng = rng::rng_from_seed(seed);
        let mut params = ParamStore::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        for (i, (layer, g)) in spec.layers.iter().zip(&geom).enumerate() {
            let lp = match *layer {
                LayerSpec::Conv { out, kernel, .. } => {
                    let shape = [out, g.in_shape[0], kernel[0], kernel[1]];
                    Some(push_layer(&mut params, &mut rng, &format!("layer{i}.conv"), &shape))
                }
                LayerSpec::Dense { out } => {
                    let fan_in: usize = g.in_shape.iter().product();
                    Some(push_layer(&mut params, &mut rng, &format!("layer{i}.dense"), &[out, fan_in]))
                }
                _ => None,
            };
            layer_params.push(lp);
        }
        let head_in: usize = spec.head_in_shape()?.iter().product();
        let head = push_layer(&mut params, &mut rng, "head", &[spec.num_classes, head_in]);
        let mut adapters = Vec::new();
        for s in 0..spec.num_stages() {
            let last = spec.stage_layers(s).end - 1;
            let out_shape = &geom[last].out_shape;
            let m = out_shape[0];
            let shape: Vec<usize> = if out_shape.len() == 3 {
                vec![m, m, 1, 1]
            } else {
                vec![m, m]
            };
            let w = Tensor::from_fn(&shape, |k| if k / m == k % m { T::one() } else { T::zero() });
            let weight = params.push(format!("adapter{s}.weight"), w);
            let bias = params.push(format!("adapter{s}.bias"), Tensor::zeros(&[m]));
            adapters.push(LayerParams { weight, bias });
        }
        Ok(Self {
            spec,
            params,
            layer_params,
            head,
            adapters,
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces the parameters with a store of identical layout.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::InvalidArgument("parameter layout does not match the supernet".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Weight and bias ids of prunable layer `j` (index into the prunable list).
    pub fn prunable_param_ids(&self, j: usize) -> (ParamId, ParamId) {
        let lp = self.layer_params.iter().flatten().nth(j).expect("prunable index");
        (lp.weight, lp.bias)
    }

    pub fn adapter_param_ids(&self, stage: usize) -> (ParamId, ParamId) {
        (self.adapters[stage].weight, self.adapters[stage].bias)
    }

    pub fn head_param_ids(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    /// Runs layers `range` with the given widths for their prunable layers.
    fn run_layers(
        &self,
        tape: &mut Tape<'_, T>,
        range: Range<usize>,
        widths: &[usize],
        mut x: Var,
    ) -> Result<Var> {
        let mut w_iter = widths.iter();
        for i in range {
            let layer = &self.spec.layers[i];
            x = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let lp = self.layer_params[i].expect("conv params");
                    let c_in = tape.value(x).shape()[1];
                    let c_out = *w_iter.next().expect("width per prunable layer");
                    let w = tape.param_slice(lp.weight, c_out, c_in)?;
                    let b = tape.param_slice(lp.bias, c_out, 1)?;
                    tape.conv2d(x, w, b, stride, pad)?
                }
                LayerSpec::Dense { .. } => {
                    let lp = self.layer_params[i].expect("dense params");
                    let features: usize = tape.value(x).shape()[1..].iter().product();
                    let c_out = *w_iter.next().expect("width per prunable layer");
                    let w = tape.param_slice(lp.weight, c_out, features)?;
                    let b = tape.param_slice(lp.bias, c_out, 1)?;
                    tape.dense(x, w, b)?
                }
                LayerSpec::Pool { kind, kernel, stride, pad } => tape.pool(
                    x,
                    kind.into(),
                    Window {
                        kh: kernel[0],
                        kw: kernel[1],
                        stride,
                        pad,
                    },
                )?,
                LayerSpec::Relu => tape.relu(x),
            };
        }
        Ok(x)
    }

    fn run_head(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if self.spec.head_pool && shape.len() == 4 {
            let win = Window {
                kh: shape[2],
                kw: shape[3],
                stride: 1,
                pad: 0,
            };
            x = tape.pool(x, PoolKind::Avg, win)?;
        }
        let features: usize = tape.value(x).shape()[1..].iter().product();
        let w = tape.param_slice(self.head.weight, self.spec.num_classes, features)?;
        let b = tape.param(self.head.bias);
        tape.dense(x, w, b)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.spec.input);
            return Err(Error::ShapeMismatch {
                op: "network input",
                expected,
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Fullnet forward that also records every stage's input and output.
    pub fn full_forward(
        &self,
        tape: &mut Tape<'_, T>,
        input: Var,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        self.check_input(tape.value(input))?;
        let full = self.spec.max_widths();
        let mut x = input;
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for s in 0..self.spec.num_stages() {
            ins.push(x);
            x = self.run_layers(tape, self.spec.stage_layers(s), &full[self.spec.stage_prunable(s)], x)?;
            outs.push(x);
        }
        let logits = self.run_head(tape, x)?;
        Ok((logits, ins, outs))
    }

    /// Stage features of the fullnet on `input`, detached from any tape.
    pub fn stage_features(&self, input: &Tensor<T>) -> Result<StageFeatureCache<T>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(input.clone());
        let (_, ins, outs) = self.full_forward(&mut tape, x)?;
        Ok(StageFeatureCache {
            inputs: ins.iter().map(|&v| tape.value(v).clone()).collect(),
            targets: outs.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// End-to-end forward of the subnet selected by `config` with inherited
    /// weights. Adapters are not used.
    pub fn subnet_forward(&self, tape: &mut Tape<'_, T>, config: &WidthConfig, input: Var) -> Result<Var> {
        config.validate_shape(&self.spec)?;
        self.check_input(tape.value(input))?;
        let x = self.run_layers(tape, 0..self.spec.layers.len(), &config.channels, input)?;
        self.run_head(tape, x)
    }

    /// Logits of `config` on `input` without keeping a tape.
    pub fn predict(&self, config: &WidthConfig, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(input.clone());
        let y = self.subnet_forward(&mut tape, config, x)?;
        Ok(tape.value(y).clone())
    }

    /// Runs stage `stage` of the subnet `gene` on the fullnet stage input.
    ///
    /// Returns the raw stage output and the adapted output with the fullnet's
    /// channel count. When the gene's last width already equals the fullnet's,
    /// the adapter is bypassed and both are the same value.
    pub fn stage_forward(
        &self,
        tape: &mut Tape<'_, T>,
        stage: usize,
        gene: &StageGene,
        stage_input: Var,
    ) -> Result<(Var, Var)> {
        let expected = self.spec.stage_input_channels(stage);
        let got = tape.value(stage_input).shape().get(1).copied().unwrap_or(0);
        if got != expected {
            return Err(Error::ShapeMismatch {
                op: "stage input channels",
                expected: vec![expected],
                actual: vec![got],
            });
        }
        let range = self.spec.stage_prunable(stage);
        if gene.channels.len() != range.len() {
            return Err(Error::InvalidConfig(format!(
                "stage {stage}: expected {} widths, got {}",
                range.len(),
                gene.channels.len()
            )));
        }
        let m = self.spec.max_widths();
        for (&c, j) in gene.channels.iter().zip(range.clone()) {
            if c == 0 || c > m[j] {
                return Err(Error::InvalidConfig(format!("layer {j}: {c} channels outside 1..={}", m[j])));
            }
        }
        let raw = self.run_layers(tape, self.spec.stage_layers(stage), &gene.channels, stage_input)?;
        let full_out = self.spec.stage_output_channels(stage);
        let c = tape.value(raw).shape()[1];
        if c == full_out {
            return Ok((raw, raw));
        }
        let ad = self.adapters[stage];
        let adapted = if tape.value(raw).ndim() == 4 {
            let w = tape.param_slice(ad.weight, full_out, c)?;
            let b = tape.param(ad.bias);
            tape.conv2d(raw, w, b, 1, 0)?
        } else {
            let w = tape.param_slice(ad.weight, full_out, c)?;
            let b = tape.param(ad.bias);
            tape.dense(raw, w, b)?
        };
        Ok((raw, adapted))
    }

    /// Stage distillation loss of `gene` against cached fullnet features.
    pub fn stage_loss(&self, stage: usize, gene: &StageGene, cache: &StageFeatureCache<T>) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(cache.inputs[stage].clone());
        let (_, adapted) = self.stage_forward(&mut tape, stage, gene, x)?;
        let target = tape.constant(cache.targets[stage].clone());
        let loss = tape.mse_stage(adapted, target)?;
        Ok(tape.value(loss).item().as_f64())
    }

    /// Copies the slices selected by `config` into a standalone network of
    /// exactly those widths. Adapters are dropped; the result has a single
    /// stage.
    pub fn extract_subnet(&self, config: &WidthConfig) -> Result<Supernet<T>> {
        let spec = self.spec.with_widths(config)?;
        let mut sub = Supernet::new(spec, 0)?;
        let geom = sub.spec.geometry()?;
        let mut j = 0;
        for (i, lp) in self.layer_params.iter().enumerate() {
            let (Some(src), Some(dst)) = (lp, sub.layer_params[i]) else { continue };
            let c_out = config.channels[j];
            let c_in = match self.spec.layers[i] {
                LayerSpec::Conv { .. } => geom[i].in_shape[0],
                _ => geom[i].in_shape.iter().product(),
            };
            *sub.params.get_mut(dst.weight) = self.params.get(src.weight).prefix_slice(c_out, c_in)?;
            *sub.params.get_mut(dst.bias) = self.params.get(src.bias).prefix_slice(c_out, 1)?;
            j += 1;
        }
        let head_in: usize = sub.spec.head_in_shape()?.iter().product();
        *sub.params.get_mut(sub.head.weight) =
            self.params.get(self.head.weight).prefix_slice(self.spec.num_classes, head_in)?;
        *sub.params.get_mut(sub.head.bias) = self.params.get(self.head.bias).clone();
        Ok(sub)
    }
}

fn push_layer<T: Real>(params: &mut ParamStore<T>, rng: &mut Rng, name: &str, shape: &[usize]) -> LayerParams {
    let fan_in: usize = shape[1..].iter().product();
    let std = Float::sqrt(2.0 / fan_in as f64);
    let w = Tensor::from_fn(shape, |_| T::from_f64(std * rng::standard_normal(rng)));
    let weight = params.push(format!("{name}.weight"), w);
    let bias = params.push(format!("{name}.bias"), Tensor::zeros(&shape[..1]));
    LayerParams { weight, bias }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SupernetSpec {
        SupernetSpec::six_layer([1, 8, 8], [4, 6, 8], 3, default_ratio_grid())
    }

    #[test]
    fn default_grid_has_31_ratios() {
        let g = default_ratio_grid();
        assert_eq!(g.len(), 31);
        assert!((g[0] - 0.1).abs() < 1e-12);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!((g[1] - 0.13).abs() < 1e-12);
    }

    #[test]
    fn quantize_never_zero_and_full_is_m() {
        assert_eq!(quantize(0.1, 40), 4);
        assert_eq!(quantize(0.01, 4), 1);
        assert_eq!(quantize(1.0, 17), 17);
    }

    #[test]
    fn channel_options_dedup() {
        let spec = toy();
        let opts = spec.channel_options(0);
        assert_eq!(opts, vec![1, 2, 3, 4]);
        for j in 0..spec.depth() {
            let o = spec.channel_options(j);
            assert!(o.len() <= 31);
            assert_eq!(*o.last().unwrap(), spec.max_widths()[j]);
        }
    }

    #[test]
    fn stage_bookkeeping() {
        let spec = toy();
        spec.validate().unwrap();
        assert_eq!(spec.num_stages(), 3);
        assert_eq!(spec.stage_depths(), vec![2, 2, 2]);
        assert_eq!(spec.stage_input_channels(1), 4);
        assert_eq!(spec.stage_output_channels(2), 8);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = toy();
        s.stage_bounds = vec![0, 5, 5, s.layers.len()];
        assert!(s.validate().is_err());
        let mut s = toy();
        s.ratio_grid = vec![0.5, 0.9];
        assert!(s.validate().is_err());
        let mut s = toy();
        s.stage_bounds = vec![1, s.layers.len()];
        assert!(s.validate().is_err());
        let mut s = toy();
        s.input = [1, 7, 7];
        assert!(s.validate().is_err(), "7 is not divisible by pooling");
    }

    #[test]
    fn candidate_counts() {
        let c = count_candidates_for(32, &[10]);
        assert_eq!(c.total, BigUint::from(32u64).pow(10));
        assert_eq!(c.total.to_string(), "1125899906842624");
        let c = count_candidates_for(31, &[3, 7]);
        assert_eq!(c.per_stage[0], BigUint::from(31u32 * 31 * 31));
        assert_eq!(&c.per_stage[0] * &c.per_stage[1], c.total);
        let big = count_candidates_for(31, &[50]).total;
        assert!(big > BigUint::from(30u32).pow(50));
    }

    #[test]
    fn full_gene_bypasses_adapter() {
        let net = Supernet::<f64>::new(toy(), 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 7) as f64 / 7.0);
        let cache = net.stage_features(&x).unwrap();
        for s in 0..3 {
            let gene = net.spec().full_config().stage_gene(net.spec(), s);
            assert_eq!(net.stage_loss(s, &gene, &cache).unwrap(), 0.0);
        }
    }

    #[test]
    fn tiny_gene_adapted_has_full_channels() {
        let net = Supernet::<f64>::new(toy(), 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 5) as f64 / 5.0);
        let cache = net.stage_features(&x).unwrap();
        let tiny = net.spec().tiny_config();
        for s in 0..3 {
            let mut tape = Tape::new(net.params());
            let xi = tape.constant(cache.inputs[s].clone());
            let (raw, adapted) = net.stage_forward(&mut tape, s, &tiny.stage_gene(net.spec(), s), xi).unwrap();
            assert_eq!(tape.value(adapted).shape(), cache.targets[s].shape());
            assert_eq!(tape.value(raw).shape()[1], tiny.channels[2 * s + 1]);
        }
    }

    #[test]
    fn stage_input_mismatch_errors() {
        let net = Supernet::<f64>::new(toy(), 1).unwrap();
        let mut tape = Tape::new(net.params());
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let gene = StageGene::new(vec![6, 6]);
        assert!(matches!(
            net.stage_forward(&mut tape, 1, &gene, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn full_config_matches_fullnet_bitwise() {
        let net = Supernet::<f32>::new(toy(), 9).unwrap();
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 37) % 11) as f32 / 11.0);
        let mut tape = Tape::new(net.params());
        let xv = tape.constant(x.clone());
        let (logits, _, _) = net.full_forward(&mut tape, xv).unwrap();
        let sub = net.predict(&net.spec().full_config(), &x).unwrap();
        assert_eq!(tape.value(logits), &sub);
    }

    #[test]
    fn invalid_config_rejected() {
        let spec = toy();
        assert!(WidthConfig::new(vec![4, 4, 6, 6, 8]).validate(&spec).is_err());
        assert!(WidthConfig::new(vec![5, 4, 6, 6, 8, 8]).validate(&spec).is_err());
        let mut c = spec.full_config();
        c.channels[5] = 9;
        assert!(c.validate(&spec).is_err());
        let coarse = SupernetSpec { ratio_grid: vec![0.5, 1.0], ..spec };
        let mut c = coarse.full_config();
        c.channels[0] = 3;
        assert!(c.validate(&coarse).is_err());
    }
}
