//! Label schemas and the tab-separated instance format.
//!
//! Files start with the header `split\tlabels\targ1\targ2`; each further line
//! holds one instance with `|`-separated gold labels. Raw fields are kept so
//! a loaded file can be written back byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BmgfError, Result};

pub const HEADER: &str = "split\tlabels\targ1\targ2";

const PDTB4: [&str; 4] = ["Comparison", "Contingency", "Expansion", "Temporal"];
const PDTB4_ALIASES: [(&str, &str); 4] =
    [("Comp.", "Comparison"), ("Cont.", "Contingency"), ("Exp.", "Expansion"), ("Temp.", "Temporal")];

const PDTB11: [&str; 11] = [
    "Comparison.Concession",
    "Comparison.Contrast",
    "Contingency.Cause",
    "Contingency.Pragmatic cause",
    "Expansion.Alternative",
    "Expansion.Conjunction",
    "Expansion.Instantiation",
    "Expansion.List",
    "Expansion.Restatement",
    "Temporal.Asynchronous",
    "Temporal.Synchrony",
];

const CONLL15: [&str; 15] = [
    "Comparison.Concession",
    "Comparison.Contrast",
    "Contingency.Cause.Reason",
    "Contingency.Cause.Result",
    "Contingency.Condition",
    "EntRel",
    "Expansion.Alternative",
    "Expansion.Alternative.Chosen alternative",
    "Expansion.Conjunction",
    "Expansion.Exception",
    "Expansion.Instantiation",
    "Expansion.Restatement",
    "Temporal.Asynchronous.Precedence",
    "Temporal.Asynchronous.Succession",
    "Temporal.Synchrony",
];

pub const OTHER: &str = "Other";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SchemaKind {
    Pdtb4,
    Pdtb11,
    Conll15,
    /// One-vs-rest over a top-level class: labels `[class, Other]`.
    Binary { positive: String },
    Custom,
}

/// Ordered set of relation labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub kind: SchemaKind,
    pub labels: Vec<String>,
}

impl LabelSchema {
    pub fn pdtb4() -> Self {
        Self::fixed(SchemaKind::Pdtb4, &PDTB4)
    }

    pub fn pdtb11() -> Self {
        Self::fixed(SchemaKind::Pdtb11, &PDTB11)
    }

    pub fn conll15() -> Self {
        Self::fixed(SchemaKind::Conll15, &CONLL15)
    }

    /// `positive` may be a top-level class name or its abbreviation.
    pub fn binary(positive: &str) -> Result<Self> {
        let idx = LabelSchema::pdtb4()
            .resolve(positive)
            .ok_or_else(|| BmgfError::Config(format!("unknown one-vs-rest class {positive:?}")))?;
        let positive = PDTB4[idx].to_string();
        Ok(LabelSchema { kind: SchemaKind::Binary { positive: positive.clone() }, labels: vec![positive, OTHER.into()] })
    }

    pub fn custom(labels: &[&str]) -> Result<Self> {
        let labels: Vec<String> = labels.iter().map(|l| l.trim().to_string()).collect();
        if labels.len() < 2 || labels.iter().any(|l| l.is_empty() || l.contains('|')) {
            return Err(BmgfError::Config("custom schema needs at least two non-empty labels without '|'".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].iter().any(|m| m.eq_ignore_ascii_case(l)) {
                return Err(BmgfError::Config(format!("duplicate label {l:?}")));
            }
        }
        Ok(LabelSchema { kind: SchemaKind::Custom, labels })
    }

    fn fixed(kind: SchemaKind, labels: &[&str]) -> Self {
        LabelSchema { kind, labels: labels.iter().map(|s| s.to_string()).collect() }
    }

    /// Parses `pdtb4`, `pdtb11`, `conll15`, `binary:<class>` or `custom:A,B,...`.
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim();
        match name.to_ascii_lowercase().as_str() {
            "pdtb4" => return Ok(Self::pdtb4()),
            "pdtb11" => return Ok(Self::pdtb11()),
            "conll15" => return Ok(Self::conll15()),
            _ => {}
        }
        if let Some(class) = strip_prefix_ci(name, "binary:") {
            return Self::binary(class);
        }
        if let Some(list) = strip_prefix_ci(name, "custom:") {
            return Self::custom(&list.split(',').collect::<Vec<_>>());
        }
        Err(BmgfError::Config(format!("unknown schema {name:?}")))
    }

    pub fn name(&self) -> String {
        match &self.kind {
            SchemaKind::Pdtb4 => "pdtb4".into(),
            SchemaKind::Pdtb11 => "pdtb11".into(),
            SchemaKind::Conll15 => "conll15".into(),
            SchemaKind::Binary { positive } => format!("binary:{positive}"),
            SchemaKind::Custom => format!("custom:{}", self.labels.join(",")),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.eq_ignore_ascii_case(label))
    }

    /// Top-level class of a label (`None` for `EntRel`, `Other` and custom labels).
    pub fn parent_class(&self, idx: usize) -> Option<&'static str> {
        match self.kind {
            SchemaKind::Custom => None,
            _ => {
                let head = self.labels[idx].split('.').next().unwrap_or_default();
                PDTB4.iter().copied().find(|c| *c == head)
            }
        }
    }

    /// Maps a raw annotation to a label index, accepting abbreviations and
    /// finer-grained senses of a schema label.
    pub fn resolve(&self, raw: &str) -> Option<usize> {
        let raw = raw.trim();
        if let Some(i) = self.index(raw) {
            return Some(i);
        }
        match &self.kind {
            SchemaKind::Custom => None,
            SchemaKind::Pdtb4 => {
                let expanded = expand_alias(raw);
                let top = expanded.split('.').next()?;
                self.index(top)
            }
            SchemaKind::Binary { positive } => {
                let top = LabelSchema::pdtb4().resolve(raw)?;
                Some(if PDTB4[top] == positive { 0 } else { 1 })
            }
            SchemaKind::Pdtb11 | SchemaKind::Conll15 => {
                let expanded = expand_alias(raw);
                let mut cur = expanded.as_str();
                while let Some((head, _)) = cur.rsplit_once('.') {
                    if let Some(i) = self.index(head) {
                        return Some(i);
                    }
                    cur = head;
                }
                self.index(&expanded)
            }
        }
    }
}

impl fmt::Display for LabelSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    (s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix)).then(|| &s[prefix.len()..])
}

fn expand_alias(raw: &str) -> String {
    for (short, long) in PDTB4_ALIASES {
        if let Some(rest) = strip_prefix_ci(raw, short) {
            return if rest.is_empty() { long.to_string() } else { format!("{long}.{}", rest.trim_start_matches('.')) };
        }
    }
    raw.to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Blind,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Blind];

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "validation" | "dev" => Some(Split::Validation),
            "test" => Some(Split::Test),
            "blind" => Some(Split::Blind),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Blind => "blind",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscourseInstance {
    pub arg1: String,
    pub arg2: String,
    /// Gold label indices under the dataset's schema, in annotation order, deduplicated.
    pub labels: Vec<usize>,
    pub split: Split,
    /// `file:line` of the source row.
    pub source: String,
    raw_split: String,
    raw_labels: String,
}

impl DiscourseInstance {
    pub fn new(arg1: &str, arg2: &str, labels: Vec<usize>, split: Split, schema: &LabelSchema) -> Result<Self> {
        if labels.is_empty() || labels.iter().any(|&l| l >= schema.len()) {
            return Err(BmgfError::Data { location: "instance".into(), message: format!("invalid gold labels {labels:?}") });
        }
        if arg1.trim().is_empty() || arg2.trim().is_empty() {
            return Err(BmgfError::Data { location: "instance".into(), message: "empty argument".into() });
        }
        let raw_labels = labels.iter().map(|&l| schema.label(l)).collect::<Vec<_>>().join("|");
        Ok(DiscourseInstance {
            arg1: arg1.to_string(),
            arg2: arg2.to_string(),
            labels,
            split,
            source: String::new(),
            raw_split: split.as_str().to_string(),
            raw_labels,
        })
    }

    pub fn has_gold(&self, label: usize) -> bool {
        self.labels.contains(&label)
    }

    pub fn raw_labels(&self) -> &str {
        &self.raw_labels
    }

    fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.raw_split, self.raw_labels, self.arg1, self.arg2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: LabelSchema,
    pub instances: Vec<DiscourseInstance>,
    trailing_newline: bool,
}

impl Dataset {
    pub fn new(schema: LabelSchema, instances: Vec<DiscourseInstance>) -> Self {
        Dataset { schema, instances, trailing_newline: true }
    }

    pub fn parse(text: &str, schema: &LabelSchema, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| BmgfError::Data { location: format!("{origin}:{line}"), message };
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        if header.trim_end_matches('\r') != HEADER {
            return Err(err(1, format!("expected header {HEADER:?}")));
        }
        let trailing_newline = text.ends_with('\n');
        let body: Vec<&str> = lines.collect();
        let body = if trailing_newline { &body[..body.len() - 1] } else { &body[..] };

        let mut instances = Vec::with_capacity(body.len());
        for (i, line) in body.iter().enumerate() {
            let lineno = i + 2;
            let fields: Vec<&str> = line.split('\t').collect();
            let [split, labels, arg1, arg2] = fields[..] else {
                return Err(err(lineno, format!("expected 4 tab-separated columns, found {}", fields.len())));
            };
            let parsed_split = Split::parse(split).ok_or_else(|| err(lineno, format!("unknown split {split:?}")))?;
            let mut gold = Vec::new();
            for raw in labels.split('|') {
                let idx = schema
                    .resolve(raw)
                    .ok_or_else(|| err(lineno, format!("label {:?} is not valid under schema {}", raw.trim(), schema.name())))?;
                if !gold.contains(&idx) {
                    gold.push(idx);
                }
            }
            if arg1.trim().is_empty() || arg2.trim().is_empty() {
                return Err(err(lineno, "empty argument".into()));
            }
            instances.push(DiscourseInstance {
                arg1: arg1.to_string(),
                arg2: arg2.to_string(),
                labels: gold,
                split: parsed_split,
                source: format!("{origin}:{lineno}"),
                raw_split: split.to_string(),
                raw_labels: labels.to_string(),
            });
        }
        Ok(Dataset { schema: schema.clone(), instances, trailing_newline })
    }

    pub fn load(path: &Path, schema: &LabelSchema) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BmgfError::io(path, e))?;
        let ds = Self::parse(&text, schema, &path.display().to_string())?;
        log::info!("loaded {} instances from {} ({})", ds.len(), path.display(), ds.describe_counts());
        Ok(ds)
    }

    /// Loads a file, or every `*.tsv` file of a directory in name order.
    pub fn load_path(path: &Path, schema: &LabelSchema) -> Result<Self> {
        if !path.is_dir() {
            return Self::load(path, schema);
        }
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| BmgfError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(BmgfError::Data { location: path.display().to_string(), message: "no .tsv files".into() });
        }
        let mut all = Dataset::new(schema.clone(), Vec::new());
        for f in files {
            all.instances.extend(Self::load(&f, schema)?.instances);
        }
        Ok(all)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        for inst in &self.instances {
            out.push('\n');
            out.push_str(&inst.to_line());
        }
        if self.trailing_newline {
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| BmgfError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&DiscourseInstance> {
        self.instances.iter().filter(|i| i.split == split).collect()
    }

    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            instances: self.instances.iter().filter(|i| i.split == split).cloned().collect(),
            trailing_newline: true,
        }
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(inst.split).or_insert(0) += 1;
        }
        counts
    }

    /// Instances per label; multi-gold instances count once for every gold label.
    pub fn label_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.schema.len()];
        for inst in self.instances.iter().filter(|i| split.map_or(true, |s| i.split == s)) {
            for &l in &inst.labels {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn describe_counts(&self) -> String {
        self.split_counts().iter().map(|(s, n)| format!("{}={n}", s.as_str())).collect::<Vec<_>>().join(", ")
    }
}

/// Relabels instances for a one-vs-rest task on `positive`.
pub fn one_vs_rest(instances: &[DiscourseInstance], schema: &LabelSchema, positive: &str) -> Result<(Vec<DiscourseInstance>, LabelSchema)> {
    let pos = schema
        .resolve(positive)
        .ok_or_else(|| BmgfError::Config(format!("class {positive:?} is not in schema {}", schema.name())))?;
    let binary = LabelSchema::binary(schema.parent_class(pos).unwrap_or(schema.label(pos)))?;
    let positive_name = binary.label(0).to_string();
    let out = instances
        .iter()
        .map(|inst| {
            let hit = inst.labels.iter().any(|&l| l == pos || schema.parent_class(l) == Some(positive_name.as_str()));
            let label = if hit { 0 } else { 1 };
            DiscourseInstance {
                labels: vec![label],
                raw_labels: binary.label(label).to_string(),
                ..inst.clone()
            }
        })
        .collect();
    Ok((out, binary))
}
