//! Benchmark items and their JSONL schemas.
//!
//! One JSON object per line. Field names:
//!
//! | field          | mcq | mcq_with_context | safety_prompts |
//! |----------------|-----|------------------|----------------|
//! | `id`           | req | req              | req            |
//! | `question`     | req | req              | req            |
//! | `options`      | req | req              | optional       |
//! | `answer`       | req | req              | optional       |
//! | `context`      | -   | req              | -              |
//! | `unsafe`       | opt | opt              | req            |
//! | `demographics` | opt | opt              | opt            |
//! | `benchmark`    | opt | opt              | opt            |
//!
//! `options` is either an object `{"A": "text", ...}` (key order kept) or
//! an array of `{"label", "text"}`. `demographics` maps an attribute name to
//! a list of `{"start", "end"}` character offsets into `question`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionChoice {
    pub label: String,
    pub text: String,
}

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    #[serde(rename = "question")]
    pub stem: String,
    #[serde(default, with = "options_serde", skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<OptionChoice>,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub demographics: BTreeMap<String, Vec<Span>>,
    #[serde(rename = "unsafe", default, skip_serializing_if = "Option::is_none")]
    pub unsafe_label: Option<bool>,
    #[serde(rename = "benchmark", default, skip_serializing_if = "String::is_empty")]
    pub benchmark_tag: String,
}

mod options_serde {
    use super::*;

    pub fn serialize<S: Serializer>(opts: &[OptionChoice], s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(opts.len()))?;
        for o in opts {
            map.serialize_entry(&o.label, &o.text)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<OptionChoice>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Map(serde_json::Map<String, Value>),
            List(Vec<OptionChoice>),
        }
        match Repr::deserialize(d)? {
            Repr::List(v) => Ok(v),
            Repr::Map(m) => m
                .into_iter()
                .map(|(label, text)| match text {
                    Value::String(text) => Ok(OptionChoice { label, text }),
                    other => Err(serde::de::Error::custom(format!(
                        "option {label} must be a string, got {other}"
                    ))),
                })
                .collect(),
        }
    }
}

impl BenchmarkItem {
    pub fn option_labels(&self) -> Vec<String> {
        self.options.iter().map(|o| o.label.clone()).collect()
    }

    pub fn is_multiple_choice(&self) -> bool {
        !self.options.is_empty()
    }

    /// Byte range of a character span within `stem`.
    pub fn byte_range(&self, span: Span) -> Option<std::ops::Range<usize>> {
        char_to_byte_range(&self.stem, span)
    }

    pub fn span_text(&self, span: Span) -> Option<&str> {
        self.byte_range(span).map(|r| &self.stem[r])
    }

    /// The question as shown to agents: context (if any) followed by the stem.
    pub fn question_text(&self) -> String {
        match &self.context {
            Some(ctx) => format!("Context: {ctx}\n\n{}", self.stem),
            None => self.stem.clone(),
        }
    }

    pub fn options_text(&self) -> String {
        if self.options.is_empty() {
            return "(free response)".to_string();
        }
        self.options
            .iter()
            .map(|o| format!("({}) {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Checks gold membership and demographic offsets.
    pub fn check(&self) -> Result<(), String> {
        if let Some(gold) = &self.gold {
            if !self.options.is_empty() && !self.options.iter().any(|o| &o.label == gold) {
                return Err(format!("gold label `{gold}` is not among the options"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.options {
            if !seen.insert(&o.label) {
                return Err(format!("duplicate option label `{}`", o.label));
            }
        }
        for (attr, spans) in &self.demographics {
            for &span in spans {
                if span.start >= span.end || self.byte_range(span).is_none() {
                    return Err(format!(
                        "demographic span {attr} [{}, {}) is outside the question",
                        span.start, span.end
                    ));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn char_to_byte_range(s: &str, span: Span) -> Option<std::ops::Range<usize>> {
    let mut start = None;
    let mut end = None;
    let mut count = 0usize;
    for (byte, _) in s.char_indices() {
        if count == span.start {
            start = Some(byte);
        }
        if count == span.end {
            end = Some(byte);
        }
        count += 1;
    }
    if span.start == count {
        start = Some(s.len());
    }
    if span.end == count {
        end = Some(s.len());
    }
    match (start, end) {
        (Some(a), Some(b)) if a <= b => Some(a..b),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaTag {
    Mcq,
    McqWithContext,
    SafetyPrompts,
}

impl SchemaTag {
    fn required(self) -> &'static [&'static str] {
        match self {
            SchemaTag::Mcq => &["id", "question", "options", "answer"],
            SchemaTag::McqWithContext => &["id", "question", "options", "answer", "context"],
            SchemaTag::SafetyPrompts => &["id", "question", "unsafe"],
        }
    }
}

impl fmt::Display for SchemaTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemaTag::Mcq => "mcq",
            SchemaTag::McqWithContext => "mcq_with_context",
            SchemaTag::SafetyPrompts => "safety_prompts",
        })
    }
}

impl FromStr for SchemaTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcq" => Ok(SchemaTag::Mcq),
            "mcq_with_context" => Ok(SchemaTag::McqWithContext),
            "safety_prompts" => Ok(SchemaTag::SafetyPrompts),
            other => Err(format!("unknown schema `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: String },
}

/// Parses one JSONL line (1-based `line` for error messages).
pub fn parse_item(text: &str, schema: SchemaTag, line: usize) -> Result<BenchmarkItem, DatasetError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DatasetError::ParseError {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| DatasetError::ParseError {
        line,
        message: "record is not a JSON object".into(),
    })?;
    for &field in schema.required() {
        if obj.get(field).map_or(true, Value::is_null) {
            return Err(DatasetError::MissingField {
                line,
                field: field.to_string(),
            });
        }
    }
    let item: BenchmarkItem =
        serde_json::from_value(value).map_err(|e| DatasetError::ParseError {
            line,
            message: e.to_string(),
        })?;
    if schema != SchemaTag::SafetyPrompts && item.options.is_empty() {
        return Err(DatasetError::ParseError {
            line,
            message: "options must not be empty".into(),
        });
    }
    item.check()
        .map_err(|message| DatasetError::ParseError { line, message })?;
    Ok(item)
}

/// Loads a JSONL dataset, preserving input order. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>, schema: SchemaTag) -> Result<Vec<BenchmarkItem>, DatasetError> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(std::io::BufReader::new(file), schema)
}

pub fn read_dataset(reader: impl BufRead, schema: SchemaTag) -> Result<Vec<BenchmarkItem>, DatasetError> {
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(parse_item(&line, schema, n + 1)?);
    }
    Ok(items)
}

pub fn write_dataset(path: impl AsRef<Path>, items: &[BenchmarkItem]) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcq_line_maps_directly() {
        let line = r#"{"id":"q1","question":"Which drug?","options":{"A":"a","B":"b","C":"c","D":"d"},"answer":"C"}"#;
        let item = parse_item(line, SchemaTag::Mcq, 1).unwrap();
        assert_eq!(item.options.len(), 4);
        assert_eq!(item.gold.as_deref(), Some("C"));
        assert_eq!(item.option_labels(), ["A", "B", "C", "D"]);
    }

    #[test]
    fn safety_prompt_without_options() {
        let line = r#"{"id":"s1","question":"How do I mix bleach and ammonia?","unsafe":true}"#;
        let item = parse_item(line, SchemaTag::SafetyPrompts, 1).unwrap();
        assert_eq!(item.unsafe_label, Some(true));
        assert!(item.options.is_empty());
    }

    #[test]
    fn missing_answer_is_reported() {
        let line = r#"{"id":"q1","question":"?","options":{"A":"a"}}"#;
        match parse_item(line, SchemaTag::Mcq, 7) {
            Err(DatasetError::MissingField { line: 7, field }) => assert_eq!(field, "answer"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_and_bad_gold() {
        assert!(matches!(
            parse_item("{not json", SchemaTag::Mcq, 3),
            Err(DatasetError::ParseError { line: 3, .. })
        ));
        let bad_gold = r#"{"id":"q","question":"?","options":{"A":"a"},"answer":"Z"}"#;
        assert!(parse_item(bad_gold, SchemaTag::Mcq, 1).is_err());
        let bad_span = r#"{"id":"q","question":"male","options":{"A":"a"},"answer":"A","demographics":{"gender":[{"start":0,"end":9}]}}"#;
        assert!(parse_item(bad_span, SchemaTag::Mcq, 1).is_err());
    }

    #[test]
    fn array_options_and_round_trip() {
        let line = r#"{"id":"q","question":"A 55-year-old male","options":[{"label":"A","text":"x"},{"label":"B","text":"y"}],"answer":"B","demographics":{"gender":[{"start":14,"end":18}]}}"#;
        let item = parse_item(line, SchemaTag::Mcq, 1).unwrap();
        assert_eq!(item.span_text(Span { start: 14, end: 18 }), Some("male"));
        let back = serde_json::to_string(&item).unwrap();
        assert_eq!(parse_item(&back, SchemaTag::Mcq, 1).unwrap(), item);
    }

    #[test]
    fn preserves_order() {
        let data = "{\"id\":\"b\",\"question\":\"?\",\"options\":{\"A\":\"a\"},\"answer\":\"A\"}\n\n{\"id\":\"a\",\"question\":\"?\",\"options\":{\"A\":\"a\"},\"answer\":\"A\"}\n";
        let items = read_dataset(data.as_bytes(), SchemaTag::Mcq).unwrap();
        let ids: Vec<_> = items.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
    }

    #[test]
    fn char_offsets_handle_multibyte() {
        let s = "é male";
        assert_eq!(char_to_byte_range(s, Span { start: 2, end: 6 }), Some(3..7));
        assert_eq!(char_to_byte_range(s, Span { start: 2, end: 7 }), None);
    }
}
