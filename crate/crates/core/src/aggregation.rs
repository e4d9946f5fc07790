//! Conv-pool n-gram summaries, the highway layer and the classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BmgfError, Result};
use crate::layers::{ForwardCtx, Linear};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregationConfig {
    /// Row width of the fused sequence.
    pub d_in: usize,
    /// Number of convolutions `z`; conv `c` has kernel size `c`.
    pub convs: usize,
    /// Filters per convolution `s`.
    pub filters: usize,
}

impl AggregationConfig {
    pub fn summary_dim(&self) -> usize {
        self.convs * self.filters
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ArgumentSummary {
    pub o1: Var,
    pub o2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

/// Convolutions plus highway weights. Shared by both arguments.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregationConfig,
    pub convs: Vec<ConvLayer>,
    /// `zs x zs`
    pub transform: ParamId,
    /// `zs x 1`
    pub gate: ParamId,
}

impl Aggregator {
    pub fn new<R: Rng>(store: &mut ParamStore, config: AggregationConfig, rng: &mut R) -> Result<Self> {
        if config.convs == 0 || config.filters == 0 || config.d_in == 0 {
            return Err(BmgfError::Config("aggregation needs z >= 1, s >= 1 and a positive input width".into()));
        }
        let convs = (1..=config.convs)
            .map(|c| {
                let fan_in = c * config.d_in;
                ConvLayer {
                    kernel: store.add(&format!("aggregation.conv{c}.weight"), &[fan_in, config.filters], Init::FanIn(fan_in), true, rng),
                    bias: store.add(&format!("aggregation.conv{c}.bias"), &[config.filters], Init::FanIn(fan_in), false, rng),
                    width: c,
                }
            })
            .collect();
        let zs = config.summary_dim();
        let transform = store.add("aggregation.highway.transform", &[zs, zs], Init::FanIn(zs), true, rng);
        let gate = store.add("aggregation.highway.gate", &[zs, 1], Init::FanIn(zs), true, rng);
        Ok(Aggregator { config, convs, transform, gate })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.convs.iter().flat_map(|c| [c.kernel, c.bias]).collect();
        out.extend([self.transform, self.gate]);
        out
    }

    /// `u = [max_t ReLU(Conv_1(f))_t, ..., max_t ReLU(Conv_z(f))_t]`, a `1 x zs` row.
    pub fn conv_pool(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let rows = g.rows(f);
        if g.cols(f) != self.config.d_in {
            return Err(BmgfError::dim("conv_pool", format!("row width {} vs {}", g.cols(f), self.config.d_in)));
        }
        if rows < self.config.convs {
            return Err(BmgfError::Input(format!("sequence of {rows} rows is shorter than kernel {}", self.config.convs)));
        }
        let s = self.config.filters;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (k, b) = (g.param(conv.kernel), g.param(conv.bias));
            let y = g.conv1d(f, k, b, conv.width)?;
            let y = g.relu(y);
            let windows = g.rows(y);
            let y = g.reshape(y, &[windows, 1, s])?;
            pooled.push(g.max_axis(y, 0, None)?);
        }
        if pooled.len() == 1 { Ok(pooled[0]) } else { g.concat_cols(&pooled) }
    }

    /// `o = g * ReLU(u W^h) + (1 - g) * u` with the scalar gate `g = sigmoid(u W^g)`.
    pub fn highway(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let (wh, wg) = (g.param(self.transform), g.param(self.gate));
        let t = g.matmul(u, wh)?;
        let t = g.relu(t);
        let pre = g.matmul(u, wg)?;
        let gate = g.sigmoid(pre);
        g.gate_mix(u, t, gate)
    }

    pub fn summarize(&self, g: &mut Graph, f: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let f = ctx.dropout(g, f)?;
        let u = self.conv_pool(g, f)?;
        let u = ctx.dropout(g, u)?;
        self.highway(g, u)
    }

    pub fn summarize_pair(&self, g: &mut Graph, f1: Var, f2: Var, ctx: &mut ForwardCtx) -> Result<ArgumentSummary> {
        Ok(ArgumentSummary { o1: self.summarize(g, f1, ctx)?, o2: self.summarize(g, f2, ctx)? })
    }
}

/// Two affine layers with a ReLU in between over `[o1, o2]`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub output: Linear,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || hidden == 0 || classes < 2 {
            return Err(BmgfError::Config(format!("classifier {input} -> {hidden} -> {classes} is degenerate")));
        }
        Ok(ClassifierHead {
            hidden: Linear::new(store, "classifier.hidden", input, hidden, true, rng),
            output: Linear::new(store, "classifier.output", hidden, classes, true, rng),
            classes,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.output.params());
        p
    }

    /// Unnormalized class scores, `1 x classes`.
    pub fn logits(&self, g: &mut Graph, summary: &ArgumentSummary, ctx: &mut ForwardCtx) -> Result<Var> {
        let x = g.concat_cols(&[summary.o1, summary.o2])?;
        let x = ctx.dropout(g, x)?;
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        let h = ctx.dropout(g, h)?;
        self.output.forward(g, h)
    }

    pub fn predict(&self, g: &mut Graph, summary: &ArgumentSummary, ctx: &mut ForwardCtx) -> Result<Var> {
        let z = self.logits(g, summary, ctx)?;
        g.softmax_rows(z, None)
    }
}

/// How multi-gold instances are turned into a training target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldTarget {
    /// Uniform mixture over the gold labels.
    #[default]
    Uniform,
    /// Only the first listed gold label.
    First,
}

pub fn target_distribution(gold: &[usize], classes: usize, mode: GoldTarget) -> Result<Vec<f64>> {
    if gold.is_empty() {
        return Err(BmgfError::Data { location: "target".into(), message: "empty gold label set".into() });
    }
    if let Some(bad) = gold.iter().find(|&&c| c >= classes) {
        return Err(BmgfError::Data { location: "target".into(), message: format!("label index {bad} >= {classes}") });
    }
    let mut t = vec![0.0; classes];
    match mode {
        GoldTarget::First => t[gold[0]] = 1.0,
        GoldTarget::Uniform => {
            let mut uniq = gold.to_vec();
            uniq.sort_unstable();
            uniq.dedup();
            let w = 1.0 / uniq.len() as f64;
            for c in uniq {
                t[c] = w;
            }
        }
    }
    Ok(t)
}

/// Cross-entropy of a probability vector against the uniform mixture of gold labels.
pub fn loss(probs: &[f64], gold: &[usize]) -> Result<f64> {
    let t = target_distribution(gold, probs.len(), GoldTarget::Uniform)?;
    Ok(t.iter().zip(probs).filter(|(t, _)| **t > 0.0).map(|(t, p)| -t * p.ln()).sum())
}

/// Plain-array conv-pool followed by the highway layer.
pub fn summarize_tensor(agg: &Aggregator, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let fv = g.constant(f);
    let o = agg.summarize(&mut g, fv, &mut ForwardCtx::eval())?;
    Ok(g.tensor(o))
}
