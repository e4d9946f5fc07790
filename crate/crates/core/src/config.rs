//! Flat key-value model and training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationConfig, GoldTarget};
use crate::data::LabelSchema;
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::error::{BmgfError, Result};
use crate::fusion::FusionConfig;
use crate::matching::MatchConfig;
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub schema: String,

    // encoder
    pub mode: EncoderMode,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_min_count: usize,
    pub use_segment_embeddings: bool,
    pub freeze_encoder: bool,

    // matching
    pub enable_matching: bool,
    pub perspectives: usize,

    // fusion
    pub enable_fusion: bool,
    pub fusion_heads: usize,
    pub fusion_include_front_row: bool,

    // aggregation and prediction
    pub conv_count: usize,
    pub conv_filters: usize,
    pub classifier_hidden: usize,
    pub multi_gold_target: GoldTarget,

    // training
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            schema: "pdtb4".into(),
            mode: EncoderMode::Joint,
            d_model: 128,
            encoder_layers: 2,
            encoder_heads: 8,
            ff_dim: 256,
            max_len: 128,
            vocab_min_count: 1,
            use_segment_embeddings: true,
            freeze_encoder: false,
            enable_matching: true,
            perspectives: 16,
            enable_fusion: true,
            fusion_heads: 16,
            fusion_include_front_row: false,
            conv_count: 2,
            conv_filters: 64,
            classifier_hidden: 128,
            multi_gold_target: GoldTarget::Uniform,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2: 5e-4,
            batch_size: 32,
            epochs: 50,
            dropout: 0.2,
            clip: 2.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| BmgfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BmgfError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            BmgfError::Config(msg) => BmgfError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Row width entering the fusion layer.
    pub fn d_q(&self) -> usize {
        if self.enable_matching { self.d_model + 5 * self.perspectives } else { self.d_model }
    }

    pub fn label_schema(&self) -> Result<LabelSchema> {
        LabelSchema::parse(&self.schema)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(BmgfError::Config(msg));
        let positive = [
            ("d_model", self.d_model),
            ("encoder_heads", self.encoder_heads),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
            ("conv_count", self.conv_count),
            ("conv_filters", self.conv_filters),
            ("classifier_hidden", self.classifier_hidden),
            ("batch_size", self.batch_size),
            ("vocab_min_count", self.vocab_min_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.encoder_heads != 0 {
            return fail(format!("d_model {} not divisible by encoder_heads {}", self.d_model, self.encoder_heads));
        }
        if self.enable_matching && self.perspectives == 0 {
            return fail("perspectives must be positive when matching is enabled".into());
        }
        if self.enable_fusion && (self.fusion_heads == 0 || self.d_q() % self.fusion_heads != 0) {
            return fail(format!("fusion width d_q = {} not divisible by fusion_heads {}", self.d_q(), self.fusion_heads));
        }
        if self.max_len < 6 {
            return fail("max_len must leave room for four special tokens and two arguments".into());
        }
        if self.conv_count > 2 {
            // a one-token argument yields two fused rows
            log::warn!("conv_count {} may exceed the length of short arguments", self.conv_count);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) || self.l2 < 0.0 {
            return fail("lr and clip must be positive and l2 non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        self.label_schema()?;
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            layers: self.encoder_layers,
            heads: self.encoder_heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            use_segment_embeddings: self.use_segment_embeddings,
            mode: self.mode,
            freeze_encoder: self.freeze_encoder,
        }
    }

    pub fn match_config(&self) -> Option<MatchConfig> {
        self.enable_matching.then_some(MatchConfig { perspectives: self.perspectives, d_model: self.d_model })
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            heads: self.fusion_heads,
            d_q: self.d_q(),
            enabled: self.enable_fusion,
            include_front_row: self.fusion_include_front_row,
        }
    }

    pub fn aggregation_config(&self) -> AggregationConfig {
        AggregationConfig { d_in: self.d_q(), convs: self.conv_count, filters: self.conv_filters }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.l2 }
    }
}
