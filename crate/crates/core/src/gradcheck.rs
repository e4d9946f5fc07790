//! Finite-difference verification of every module composite at small sizes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationConfig, Aggregator, ArgumentSummary, ClassifierHead};
use crate::config::ModelConfig;
use crate::data::{DiscourseInstance, LabelSchema, Split};
use crate::encoder::{ContextualizedPair, Encoder, TokenizedPair};
use crate::error::{BmgfError, Result};
use crate::fusion::GatedFusion;
use crate::layers::ForwardCtx;
use crate::matching::{bilateral_match, MatchWeights, PerspectiveVars, Perspectives, Validity};
use crate::model::Model;
use crate::tensor::{
    finite_diff_check_params_with_fault, finite_diff_check_with_fault, Graph, OpKind, ParamStore, Tensor, Var,
};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

pub const MODULES: [&str; 6] = ["encoder", "matching", "fusion", "aggregation", "prediction", "full"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCheck {
    pub module: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub modules: Vec<ModuleCheck>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.modules.iter().all(|m| m.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.modules.iter().map(|m| m.max_relative_error).fold(0.0, f64::max)
    }
}

/// Small configuration used when none is given.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        encoder_layers: 2,
        encoder_heads: 2,
        ff_dim: 16,
        max_len: 16,
        perspectives: 2,
        fusion_heads: 2,
        conv_count: 2,
        conv_filters: 3,
        classifier_hidden: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Keeps the switches of `config` and rejects sizes too large to check.
pub fn check_config(config: &ModelConfig) -> Result<()> {
    config.validate()?;
    if config.d_model > 16 || (config.enable_matching && config.perspectives > 3) {
        return Err(BmgfError::Config(format!(
            "gradient checks need d_model <= 16 and perspectives <= 3, got {} and {}",
            config.d_model, config.perspectives
        )));
    }
    if config.ff_dim > 64 || config.conv_filters > 8 || config.classifier_hidden > 16 || config.conv_count > 3 {
        return Err(BmgfError::Config("gradient checks need ff_dim <= 64, conv_filters <= 8, classifier_hidden <= 16, conv_count <= 3".into()));
    }
    Ok(())
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("positive dims")
}

/// Random linear read-out `sum(x * r)` so every output coordinate matters.
fn readout(g: &mut Graph, x: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r);
    let p = g.mul(x, rv)?;
    Ok(g.sum_all(p))
}

fn random_ids(rng: &mut ChaCha8Rng, vocab: usize, lo: usize, hi: usize) -> Vec<usize> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| rng.gen_range(5..vocab)).collect()
}

struct Runner {
    fault: Option<OpKind>,
    config: ModelConfig,
    rng: ChaCha8Rng,
}

impl Runner {
    fn encoder(&mut self) -> Result<f64> {
        let vocab = 12;
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, self.config.encoder_config(vocab), &mut self.rng)?;
        let a1 = random_ids(&mut self.rng, vocab, 1, 4);
        let a2 = random_ids(&mut self.rng, vocab, 1, 4);
        let pair = TokenizedPair::from_ids(&a1, &a2)?;
        let d = self.config.d_model;
        let (r1, r2) = (random_tensor(&mut self.rng, a1.len() + 2, d), random_tensor(&mut self.rng, a2.len() + 2, d));
        finite_diff_check_params_with_fault(&mut store, STEP, self.fault, |g| {
            let h = enc.encode_pair(g, &pair, &mut ForwardCtx::eval())?;
            let s1 = readout(g, h.h1, &r1)?;
            let s2 = readout(g, h.h2, &r2)?;
            g.add(s1, s2)
        })
    }

    fn matching(&mut self) -> Result<f64> {
        let Some(mc) = self.config.match_config() else { return Ok(0.0) };
        let mut store = ParamStore::new();
        let w = MatchWeights::new(&mut store, mc, &mut self.rng)?;
        let (n1, n2) = (self.rng.gen_range(3..=6), self.rng.gen_range(3..=6));
        let d = mc.d_model;
        let h = random_tensor(&mut self.rng, n1 + n2, d);
        let (r1, r2) = (random_tensor(&mut self.rng, n1, mc.width()), random_tensor(&mut self.rng, n2, mc.width()));
        let build = |g: &mut Graph, hv: Var, w: &dyn Perspectives| -> Result<Var> {
            let pair = ContextualizedPair { h1: g.slice_rows(hv, 0, n1)?, h2: g.slice_rows(hv, n1, n2)? };
            let mv = bilateral_match(g, &pair, w, &Validity::all())?;
            let s1 = readout(g, mv.m1, &r1)?;
            let s2 = readout(g, mv.m2, &r2)?;
            g.add(s1, s2)
        };
        // with respect to the perspective weights, then to the contextual rows
        let wrt_params = finite_diff_check_params_with_fault(&mut store, STEP, self.fault, |g| {
            let hv = g.constant(&h);
            build(g, hv, &w)
        })?;
        let weights: Vec<Tensor> = w.params().iter().map(|&id| store.tensor(id).clone()).collect();
        let wrt_input = finite_diff_check_with_fault(
            |g, hv| {
                let ws: Vec<Var> = weights.iter().map(|t| g.constant(t)).collect();
                let bound = PerspectiveVars {
                    full_first: ws[0],
                    full_last: ws[1],
                    maxpool: ws[2],
                    attentive: ws[3],
                    max_attentive: ws[4],
                };
                build(g, hv, &bound)
            },
            &h,
            STEP,
            self.fault,
        )?;
        Ok(wrt_params.max(wrt_input))
    }

    fn fusion(&mut self) -> Result<f64> {
        let fc = self.config.fusion_config();
        if !fc.enabled {
            return Ok(0.0);
        }
        let mut store = ParamStore::new();
        let fusion = GatedFusion::new(&mut store, fc, &mut self.rng)?;
        let n = self.rng.gen_range(3..=6);
        let q = random_tensor(&mut self.rng, n, fc.d_q);
        let out_rows = if fc.include_front_row { n } else { n - 1 };
        let r = random_tensor(&mut self.rng, out_rows, fc.d_q);
        finite_diff_check_params_with_fault(&mut store, STEP, self.fault, |g| {
            let qv = g.constant(&q);
            let f = fusion.fuse_one(g, qv, None, None, &mut ForwardCtx::eval())?;
            readout(g, f, &r)
        })
    }

    fn aggregation(&mut self) -> Result<f64> {
        let ac: AggregationConfig = self.config.aggregation_config();
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, ac, &mut self.rng)?;
        let n = self.rng.gen_range(ac.convs.max(3)..=6);
        let f = random_tensor(&mut self.rng, n, ac.d_in);
        let r = random_tensor(&mut self.rng, 1, ac.summary_dim());
        finite_diff_check_params_with_fault(&mut store, STEP, self.fault, |g| {
            let fv = g.constant(&f);
            let o = agg.summarize(g, fv, &mut ForwardCtx::eval())?;
            readout(g, o, &r)
        })
    }

    fn prediction(&mut self) -> Result<f64> {
        let zs = self.config.aggregation_config().summary_dim();
        let classes = 4;
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, 2 * zs, self.config.classifier_hidden, classes, &mut self.rng)?;
        let (o1, o2) = (random_tensor(&mut self.rng, 1, zs), random_tensor(&mut self.rng, 1, zs));
        let target = [0.5, 0.0, 0.5, 0.0];
        finite_diff_check_params_with_fault(&mut store, STEP, self.fault, |g| {
            let s = ArgumentSummary { o1: g.constant(&o1), o2: g.constant(&o2) };
            let z = head.logits(g, &s, &mut ForwardCtx::eval())?;
            g.cross_entropy(z, &target)
        })
    }

    /// End-to-end loss of a two-instance batch.
    fn full(&mut self) -> Result<f64> {
        let schema = LabelSchema::pdtb4();
        let words = ["alpha", "beta", "gamma", "delta", "because", "but", "then", "also"];
        let text = |rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..=4);
            (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let data: Vec<DiscourseInstance> = [vec![1], vec![0, 2]]
            .into_iter()
            .map(|labels| {
                let (a, b) = (text(&mut self.rng), text(&mut self.rng));
                DiscourseInstance::new(&a, &b, labels, Split::Train, &schema)
            })
            .collect::<Result<_>>()?;
        let config = ModelConfig { seed: self.rng.gen(), ..self.config.clone() };
        let mut model = Model::from_instances(config, schema, &data)?;
        let prepared = model.prepare(&data)?;
        let mut store = std::mem::take(&mut model.store);
        let result = finite_diff_check_params_with_fault(&mut store, STEP, self.fault, |g| model.batch_loss(g, &prepared));
        model.store = store;
        result
    }
}

/// Runs every composite for one seed.
pub fn run(config: &ModelConfig, seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    check_config(config)?;
    let start = Instant::now();
    let mut runner = Runner { fault, config: ModelConfig { dropout: 0.0, ..config.clone() }, rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut modules = Vec::with_capacity(MODULES.len());
    for name in MODULES {
        let err = match name {
            "encoder" => runner.encoder(),
            "matching" => runner.matching(),
            "fusion" => runner.fusion(),
            "aggregation" => runner.aggregation(),
            "prediction" => runner.prediction(),
            _ => runner.full(),
        }?;
        log::debug!("gradcheck seed {seed} {name}: {err:.3e}");
        modules.push(ModuleCheck { module: name.to_string(), max_relative_error: err, passed: err < TOLERANCE });
    }
    Ok(GradcheckReport { seed, tolerance: TOLERANCE, modules, seconds: start.elapsed().as_secs_f64() })
}
