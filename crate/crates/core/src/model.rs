//! The full pipeline: encoder, bilateral matching, gated fusion, conv-pool
//! and highway summaries, classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{target_distribution, Aggregator, ClassifierHead};
use crate::config::ModelConfig;
use crate::data::{DiscourseInstance, LabelSchema};
use crate::encoder::{tokenize_pair, Encoder, TokenizedPair, Vocabulary};
use crate::error::{BmgfError, Result};
use crate::fusion::GatedFusion;
use crate::layers::ForwardCtx;
use crate::matching::{bilateral_match, MatchWeights, Validity};
use crate::tensor::{Graph, ParamStore, Var};

/// Module structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub matching: Option<MatchWeights>,
    pub fusion: GatedFusion,
    pub aggregator: Aggregator,
    pub head: ClassifierHead,
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub h1: Var,
    pub h2: Var,
    pub m1: Option<Var>,
    pub m2: Option<Var>,
    pub f1: Var,
    pub f2: Var,
    pub o1: Var,
    pub o2: Var,
    pub logits: Var,
}

impl Network {
    /// Registers parameters in a fixed order: encoder, matching, fusion,
    /// aggregation, classifier.
    pub fn new(store: &mut ParamStore, config: &ModelConfig, vocab_size: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, config.encoder_config(vocab_size), rng)?;
        let matching = config.match_config().map(|mc| MatchWeights::new(store, mc, rng)).transpose()?;
        let fusion = GatedFusion::new(store, config.fusion_config(), rng)?;
        let aggregator = Aggregator::new(store, config.aggregation_config(), rng)?;
        let summary = config.aggregation_config().summary_dim();
        let head = ClassifierHead::new(store, 2 * summary, config.classifier_hidden, classes, rng)?;
        Ok(Network { encoder, matching, fusion, aggregator, head })
    }

    pub fn trace(&self, g: &mut Graph, pair: &TokenizedPair, ctx: &mut ForwardCtx) -> Result<ForwardTrace> {
        let h = self.encoder.encode_pair(g, pair, ctx)?;
        let mv = match &self.matching {
            Some(w) => Some(bilateral_match(g, &h, w, &Validity::all())?),
            None => None,
        };
        let fused = self.fusion.fuse(g, &h, mv.as_ref(), ctx)?;
        let summary = self.aggregator.summarize_pair(g, fused.f1, fused.f2, ctx)?;
        let logits = self.head.logits(g, &summary, ctx)?;
        Ok(ForwardTrace {
            h1: h.h1,
            h2: h.h2,
            m1: mv.map(|m| m.m1),
            m2: mv.map(|m| m.m2),
            f1: fused.f1,
            f2: fused.f2,
            o1: summary.o1,
            o2: summary.o2,
            logits,
        })
    }

    pub fn logits(&self, g: &mut Graph, pair: &TokenizedPair, ctx: &mut ForwardCtx) -> Result<Var> {
        self.trace(g, pair, ctx).map(|t| t.logits)
    }
}

/// A trained or freshly initialized classifier with its vocabulary and schema.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: LabelSchema,
    pub vocab: Vocabulary,
    pub network: Network,
    pub store: ParamStore,
}

/// One instance after tokenization, with its training target.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pair: TokenizedPair,
    pub target: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, schema: LabelSchema, vocab: Vocabulary) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let network = Network::new(&mut store, &config, vocab.len(), schema.len(), &mut rng)?;
        Ok(Model { config, schema, vocab, network, store })
    }

    /// Builds the vocabulary from the arguments of `instances`.
    pub fn from_instances(config: ModelConfig, schema: LabelSchema, instances: &[DiscourseInstance]) -> Result<Self> {
        let texts = instances.iter().flat_map(|i| [i.arg1.as_str(), i.arg2.as_str()]);
        let vocab = Vocabulary::build(texts, config.vocab_min_count);
        Self::new(config, schema, vocab)
    }

    pub fn tokenize(&self, arg1: &str, arg2: &str) -> Result<TokenizedPair> {
        tokenize_pair(arg1, arg2, &self.vocab, self.config.max_len)
    }

    pub fn prepare(&self, instances: &[DiscourseInstance]) -> Result<Vec<Prepared>> {
        instances
            .iter()
            .map(|inst| {
                let located = |e: BmgfError| BmgfError::Data { location: inst.source.clone(), message: e.to_string() };
                let pair = self.tokenize(&inst.arg1, &inst.arg2).map_err(located)?;
                let target = target_distribution(&inst.labels, self.schema.len(), self.config.multi_gold_target).map_err(located)?;
                Ok(Prepared { pair, target })
            })
            .collect()
    }

    /// Class distribution for one tokenized pair, dropout off.
    pub fn probabilities(&self, pair: &TokenizedPair) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let logits = self.network.logits(&mut g, pair, &mut ForwardCtx::eval())?;
        let p = g.softmax_rows(logits, None)?;
        Ok(g.value(p).to_vec())
    }

    pub fn predict_pair(&self, arg1: &str, arg2: &str) -> Result<Vec<f64>> {
        self.probabilities(&self.tokenize(arg1, arg2)?)
    }

    /// Distributions for many pairs, evaluated in parallel.
    pub fn probabilities_batch(&self, pairs: &[TokenizedPair]) -> Result<Vec<Vec<f64>>> {
        pairs.par_iter().map(|p| self.probabilities(p)).collect()
    }

    pub fn predict_instances(&self, instances: &[DiscourseInstance]) -> Result<Vec<Vec<f64>>> {
        let pairs = instances
            .iter()
            .map(|i| {
                self.tokenize(&i.arg1, &i.arg2)
                    .map_err(|e| BmgfError::Data { location: i.source.clone(), message: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        self.probabilities_batch(&pairs)
    }

    /// Mean cross-entropy of a batch with its gradients, dropout driven by
    /// `rngs` (one per instance) when given. Instances run in parallel;
    /// gradients are summed in input order so results do not depend on
    /// scheduling.
    pub fn batch_gradients(&self, batch: &[&Prepared], mut rngs: Option<Vec<ChaCha8Rng>>) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let scale = 1.0 / batch.len().max(1) as f64;
        let dropout = self.config.dropout;
        let per: Vec<Result<(f64, Vec<Option<Vec<f64>>>)>> = match rngs.as_mut() {
            Some(rngs) => batch
                .par_iter()
                .zip(rngs.par_iter_mut())
                .map(|(p, rng)| self.instance_gradients(p, scale, &mut ForwardCtx::train(dropout, rng)))
                .collect(),
            None => batch.par_iter().map(|p| self.instance_gradients(p, scale, &mut ForwardCtx::eval())).collect(),
        };
        let mut total = 0.0;
        let mut sum: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        for r in per {
            let (loss, grads) = r?;
            total += loss;
            for (dst, src) in sum.iter_mut().zip(grads) {
                if let Some(src) = src {
                    match dst {
                        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
                        None => *dst = Some(src),
                    }
                }
            }
        }
        Ok((total, sum))
    }

    fn instance_gradients(&self, p: &Prepared, scale: f64, ctx: &mut ForwardCtx) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new(&self.store);
        let logits = self.network.logits(&mut g, &p.pair, ctx)?;
        let ce = g.cross_entropy(logits, &p.target)?;
        let loss = g.scale(ce, scale);
        let grads = g.backward(loss)?;
        let per_param = self.store.ids().map(|id| grads.param(id).map(<[f64]>::to_vec)).collect();
        Ok((g.value(loss)[0], per_param))
    }

    /// Mean loss of a batch in one graph (used by gradient checks).
    pub fn batch_loss(&self, g: &mut Graph, batch: &[Prepared]) -> Result<Var> {
        let mut losses = Vec::with_capacity(batch.len());
        for p in batch {
            let logits = self.network.logits(g, &p.pair, &mut ForwardCtx::eval())?;
            losses.push(g.cross_entropy(logits, &p.target)?);
        }
        let stacked = g.concat_rows(&losses)?;
        Ok(g.mean_all(stacked))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            encoder_heads: 2,
            ff_dim: 16,
            perspectives: 2,
            fusion_heads: 2,
            conv_filters: 4,
            classifier_hidden: 8,
            max_len: 32,
            ..ModelConfig::default()
        }
    }

    fn instances(schema: &LabelSchema) -> Vec<DiscourseInstance> {
        vec![
            DiscourseInstance::new("it rained", "so we stayed", vec![1], Split::Train, schema).unwrap(),
            DiscourseInstance::new("he ran", "but she walked slowly", vec![0, 2], Split::Train, schema).unwrap(),
        ]
    }

    #[test]
    fn probabilities_are_distributions() {
        let schema = LabelSchema::pdtb4();
        let model = Model::from_instances(small(), schema.clone(), &instances(&schema)).unwrap();
        let p = model.predict_pair("it rained", "we stayed").unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p, model.predict_pair("it rained", "we stayed").unwrap());
    }

    #[test]
    fn trace_widths() {
        let schema = LabelSchema::pdtb4();
        let model = Model::from_instances(small(), schema.clone(), &instances(&schema)).unwrap();
        let pair = model.tokenize("a b c", "d e").unwrap();
        let mut g = Graph::new(&model.store);
        let t = model.network.trace(&mut g, &pair, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(g.shape(t.m1.unwrap()), &[5, 10]);
        assert_eq!(g.shape(t.f1), &[4, 18]);
        assert_eq!(g.shape(t.f2), &[3, 18]);
        assert_eq!(g.shape(t.o1), &[1, 8]);
    }

    #[test]
    fn ablations_drop_parameters() {
        let schema = LabelSchema::pdtb4();
        let data = instances(&schema);
        let no_bm = Model::from_instances(ModelConfig { enable_matching: false, ..small() }, schema.clone(), &data).unwrap();
        assert!(no_bm.store.names().all(|n| !n.starts_with("matching.")));
        let no_gf = Model::from_instances(ModelConfig { enable_fusion: false, ..small() }, schema.clone(), &data).unwrap();
        assert!(no_gf.store.names().all(|n| !n.starts_with("fusion.")));
        let no_se = Model::from_instances(ModelConfig { use_segment_embeddings: false, ..small() }, schema.clone(), &data).unwrap();
        assert!(no_se.store.get("encoder.segment_embedding").is_none());
        for m in [no_bm, no_gf, no_se] {
            let p = m.predict_pair("a", "b").unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parallel_batch_matches_single_graph() {
        let schema = LabelSchema::pdtb4();
        let data = instances(&schema);
        let model = Model::from_instances(small(), schema, &data).unwrap();
        let prepared = model.prepare(&data).unwrap();
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let (loss, grads) = model.batch_gradients(&refs, None).unwrap();
        let mut g = Graph::new(&model.store);
        let l = model.batch_loss(&mut g, &prepared).unwrap();
        assert!((g.value(l)[0] - loss).abs() < 1e-12);
        let gr = g.backward(l).unwrap();
        for id in model.store.ids() {
            if let (Some(a), Some(b)) = (gr.param(id), grads[id.index()].as_ref()) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
