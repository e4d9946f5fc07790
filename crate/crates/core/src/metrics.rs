//! Accuracy under the multi-gold rule, per-class and macro F1, and the
//! evaluation report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DiscourseInstance, LabelSchema, SchemaKind};
use crate::error::{BmgfError, Result};

fn check_lengths(predictions: &[usize], instances: &[DiscourseInstance]) -> Result<()> {
    if predictions.len() != instances.len() {
        return Err(BmgfError::Contract(format!(
            "{} predictions for {} instances",
            predictions.len(),
            instances.len()
        )));
    }
    Ok(())
}

/// Fraction of instances whose prediction is one of their gold labels.
pub fn accuracy(predictions: &[usize], instances: &[DiscourseInstance]) -> Result<f64> {
    check_lengths(predictions, instances)?;
    if instances.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(instances).filter(|(p, i)| i.has_gold(**p)).count();
    Ok(hits as f64 / instances.len() as f64)
}

/// Gold-row by predicted-column counts. A multi-gold instance is attributed to
/// the predicted label when it is gold, otherwise to its first gold label.
pub fn confusion_matrix(predictions: &[usize], instances: &[DiscourseInstance], classes: usize) -> Result<Vec<Vec<u64>>> {
    check_lengths(predictions, instances)?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, inst) in predictions.iter().zip(instances) {
        if p >= classes {
            return Err(BmgfError::Contract(format!("prediction {p} outside {classes} classes")));
        }
        let gold = if inst.has_gold(p) { p } else { inst.labels[0] };
        m[gold][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

/// Per-class scores from a confusion matrix; 0/0 is defined as 0.
pub fn class_scores(confusion: &[Vec<u64>], labels: &[String]) -> Vec<ClassScore> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
            let support: u64 = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassScore { label: labels[c].clone(), precision, recall, f1, support }
        })
        .collect()
}

pub fn macro_f1_from_confusion(confusion: &[Vec<u64>]) -> f64 {
    let labels: Vec<String> = (0..confusion.len()).map(|i| i.to_string()).collect();
    let scores = class_scores(confusion, &labels);
    scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64
}

/// Unweighted mean of per-class F1 over every schema class.
pub fn macro_f1(predictions: &[usize], instances: &[DiscourseInstance], schema: &LabelSchema) -> Result<(f64, Vec<ClassScore>)> {
    let confusion = confusion_matrix(predictions, instances, schema.len())?;
    let scores = class_scores(&confusion, &schema.labels);
    let mean = scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub labels: Vec<String>,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    /// Rows are reference (gold) classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// F1 of the positive class for one-vs-rest schemas.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub positive_f1: Option<f64>,
}

impl EvalReport {
    pub fn compute(predictions: &[usize], instances: &[DiscourseInstance], schema: &LabelSchema) -> Result<Self> {
        let accuracy = accuracy(predictions, instances)?;
        let confusion = confusion_matrix(predictions, instances, schema.len())?;
        let per_class = class_scores(&confusion, &schema.labels);
        let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / per_class.len() as f64;
        let positive_f1 = matches!(schema.kind, SchemaKind::Binary { .. }).then(|| per_class[0].f1);
        Ok(EvalReport {
            schema: schema.name(),
            labels: schema.labels.clone(),
            n: instances.len(),
            accuracy,
            macro_f1,
            per_class,
            confusion,
            positive_f1,
        })
    }

    /// The validation metric used for model selection: macro-F1 for the
    /// four-way task, accuracy otherwise.
    pub fn selection_metric(&self, schema: &LabelSchema) -> f64 {
        match schema.kind {
            SchemaKind::Pdtb4 => self.macro_f1,
            _ => self.accuracy,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "schema {}  n = {}", self.schema, self.n);
        let _ = writeln!(s, "accuracy  {:.4}", self.accuracy);
        let _ = writeln!(s, "macro-F1  {:.4}", self.macro_f1);
        if let Some(f) = self.positive_f1 {
            let _ = writeln!(s, "positive-class F1  {f:.4}");
        }
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}", "class", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                c.label, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(s, "confusion (rows gold, columns predicted):");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
        s
    }
}
