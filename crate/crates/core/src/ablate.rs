//! Architecture ablations: every on/off combination of segment embeddings,
//! bilateral matching and gated fusion, plus the siamese encoder.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{DiscourseInstance, LabelSchema};
use crate::encoder::EncoderMode;
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::train::{evaluate, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub segment_embeddings: bool,
    pub matching: bool,
    pub fusion: bool,
    pub siamese: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { segment_embeddings: true, matching: true, fusion: true, siamese: false };

    const fn without(se: bool, bm: bool, gf: bool) -> Variant {
        Variant { segment_embeddings: !se, matching: !bm, fusion: !gf, siamese: false }
    }

    /// Rows in table order: the full model, single removals, pairs, all
    /// three, then the siamese encoder.
    pub const ALL: [Variant; 9] = [
        Variant::FULL,
        Variant::without(true, false, false),
        Variant::without(false, false, true),
        Variant::without(false, true, false),
        Variant::without(true, false, true),
        Variant::without(true, true, false),
        Variant::without(false, true, true),
        Variant::without(true, true, true),
        Variant { siamese: true, ..Variant::FULL },
    ];

    /// The three variants that remove exactly one module.
    pub const SINGLE: [Variant; 3] = [
        Variant::without(true, false, false),
        Variant::without(false, true, false),
        Variant::without(false, false, true),
    ];

    pub fn name(&self) -> String {
        if self.siamese {
            return "siamese".into();
        }
        let removed: Vec<&str> = [(self.segment_embeddings, "SE"), (self.matching, "BM"), (self.fusion, "GF")]
            .iter()
            .filter(|(on, _)| !on)
            .map(|(_, n)| *n)
            .collect();
        if removed.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", removed.join(","))
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_segment_embeddings: self.segment_embeddings,
            enable_matching: self.matching,
            enable_fusion: self.fusion,
            mode: if self.siamese { EncoderMode::Siamese } else { EncoderMode::Joint },
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub switches: Variant,
    pub parameters: usize,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    /// Which split the reports were computed on.
    pub evaluated_on: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.switches == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}, evaluated on {}", self.seed, self.evaluated_on);
        let _ = writeln!(s, "{:<16} {:>10} {:>6} {:>9} {:>9}", "model", "params", "epoch", "macro-F1", "accuracy");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>6} {:>9.4} {:>9.4}",
                r.variant, r.parameters, r.best_epoch, r.report.macro_f1, r.report.accuracy
            );
        }
        s
    }

    /// For each single-module removal present in the table: does the full
    /// model's accuracy stay within `slack` of it (or beat it)?
    pub fn full_not_worse(&self, slack: f64) -> Vec<(String, bool)> {
        let Some(full) = self.row(Variant::FULL) else { return Vec::new() };
        Variant::SINGLE
            .iter()
            .filter_map(|v| self.row(*v))
            .map(|r| (r.variant.clone(), full.report.accuracy >= r.report.accuracy - slack))
            .collect()
    }
}

/// Trains and scores each variant with the same seed, data and batch order.
/// Reports are on `test`, or on `validation` when there is no test data.
pub fn run(
    base: &ModelConfig,
    schema: &LabelSchema,
    variants: &[Variant],
    train_set: &[DiscourseInstance],
    validation: &[DiscourseInstance],
    test: &[DiscourseInstance],
) -> Result<AblationTable> {
    let (held_out, evaluated_on) = if test.is_empty() { (validation, "validation") } else { (test, "test") };
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let config = v.apply(base);
        config.validate()?;
        log::info!("ablation: training {}", v.name());
        let model = Model::from_instances(config, schema.clone(), train_set)?;
        let parameters = model.num_parameters();
        let outcome = train(model, train_set, validation)?;
        let report = evaluate(&outcome.model, held_out)?;
        rows.push(AblationRow { variant: v.name(), switches: *v, parameters, best_epoch: outcome.best.epoch, report });
    }
    Ok(AblationTable { seed: base.seed, evaluated_on: evaluated_on.into(), rows })
}
