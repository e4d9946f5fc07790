//! JSON checkpoints: configuration, vocabulary, parameters and optimizer state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::LabelSchema;
use crate::encoder::Vocabulary;
use crate::error::{BmgfError, Result};
use crate::model::Model;
use crate::tensor::{NamedArray, OptimizerState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub schema: LabelSchema,
    pub vocab: Vec<String>,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub best_metric: Option<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&OptimizerState>, epoch: usize, best_metric: Option<f64>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            schema: model.schema.clone(),
            vocab: model.vocab.tokens().to_vec(),
            params: model.store.to_named_arrays(),
            optimizer: optimizer.cloned(),
            epoch,
            best_metric,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let vocab = Vocabulary::from_tokens(self.vocab.clone())?;
        let mut model = Model::new(self.config.clone(), self.schema.clone(), vocab)?;
        model.store.load_named_arrays(&self.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: Option<u32>,
        }
        let v: Version = serde_json::from_str(text).map_err(|e| BmgfError::Format(e.to_string()))?;
        match v.format_version {
            Some(FORMAT_VERSION) => {}
            Some(other) => {
                return Err(BmgfError::Format(format!("format version {other}, this build reads {FORMAT_VERSION}")))
            }
            None => return Err(BmgfError::Format("missing format_version".into())),
        }
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| BmgfError::Format(e.to_string()))?;
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| BmgfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BmgfError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DiscourseInstance, Split};

    fn model() -> Model {
        let config = ModelConfig {
            d_model: 8,
            encoder_heads: 2,
            ff_dim: 8,
            perspectives: 2,
            fusion_heads: 2,
            conv_filters: 3,
            classifier_hidden: 4,
            max_len: 16,
            ..ModelConfig::default()
        };
        let schema = LabelSchema::pdtb4();
        let data = [DiscourseInstance::new("x y", "z", vec![0], Split::Train, &schema).unwrap()];
        Model::from_instances(config, schema, &data).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = model();
        let ck = Checkpoint::from_model(&m, None, 3, Some(0.123456789012345678));
        let json = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), json);
        let m2 = back.to_model().unwrap();
        assert_eq!(m2.store, m.store);
        assert_eq!(m2.predict_pair("x", "y z").unwrap(), m.predict_pair("x", "y z").unwrap());
    }

    #[test]
    fn version_mismatch_is_refused() {
        let ck = Checkpoint::from_model(&model(), None, 0, None);
        let json = ck.to_json().unwrap().replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(Checkpoint::from_json(&json), Err(BmgfError::Format(_))));
        assert!(matches!(Checkpoint::from_json("{}"), Err(BmgfError::Format(_))));
    }

    #[test]
    fn tampered_shapes_are_refused() {
        let mut ck = Checkpoint::from_model(&model(), None, 0, None);
        ck.params[0].shape = vec![1, 1];
        assert!(matches!(ck.to_model(), Err(BmgfError::Format(_))));
    }
}
