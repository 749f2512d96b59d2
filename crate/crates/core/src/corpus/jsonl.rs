use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{segment_text, Granularity, Instance};
use crate::error::{Error, Result};
use crate::oracle::SyntheticModel;

/// Input record. Exactly one of `segments`/`context` and one of
/// `response_tokens`/`response` must be present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    question: Option<String>,
    segments: Option<Vec<String>>,
    context: Option<String>,
    response_tokens: Option<Vec<String>>,
    response: Option<String>,
    prompt_template: Option<String>,
    synthetic: Option<SyntheticModel>,
}

/// Canonical output record; always carries pre-split segments and tokens.
#[derive(Debug, Serialize)]
struct CanonicalRecord<'a> {
    id: &'a str,
    question: &'a str,
    segments: Vec<&'a str>,
    response_tokens: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_template: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<&'a SyntheticModel>,
}

impl Instance {
    /// Serialize to one canonical JSONL line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        let record = CanonicalRecord {
            id: &self.id,
            question: &self.question,
            segments: self.segments.iter().map(|s| s.text.as_str()).collect(),
            response_tokens: &self.response_tokens,
            prompt_template: self.prompt_template.as_deref(),
            synthetic: self.synthetic.as_ref(),
        };
        serde_json::to_string(&record).expect("instance serialization cannot fail")
    }
}

/// Load instances from a JSONL file, splitting raw contexts into sentences.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    load_jsonl_with(path, Granularity::Sentence)
}

pub fn load_jsonl_with(path: impl AsRef<Path>, granularity: Granularity) -> Result<Vec<Instance>> {
    let file = File::open(path.as_ref())?;
    parse_jsonl(BufReader::new(file), granularity)
}

/// Parse JSONL from any reader. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn parse_jsonl<R: BufRead>(reader: R, granularity: Granularity) -> Result<Vec<Instance>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let instance = build(raw, line_no, granularity)?;
        if !seen.insert(instance.id().to_string()) {
            return Err(Error::validation(
                instance.id(),
                format!("duplicate id on line {line_no}"),
            ));
        }
        out.push(instance);
    }
    Ok(out)
}

fn build(raw: RawRecord, line_no: usize, granularity: Granularity) -> Result<Instance> {
    let id = match raw.id {
        Some(id) if !id.trim().is_empty() => id,
        _ => {
            return Err(Error::validation(
                format!("<line {line_no}>"),
                "missing or empty field `id`",
            ))
        }
    };
    let question = raw
        .question
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| Error::validation(&id, "missing or empty field `question`"))?;

    let segments = match (raw.segments, raw.context) {
        (Some(_), Some(_)) => {
            return Err(Error::validation(
                &id,
                "both `segments` and `context` given",
            ))
        }
        (Some(segments), None) => segments,
        (None, Some(context)) => segment_text(&context, granularity)
            .map_err(|_| Error::validation(&id, "field `context` is empty"))?
            .into_iter()
            .map(|s| s.text)
            .collect(),
        (None, None) => return Err(Error::validation(&id, "missing field `segments`")),
    };

    let response_tokens = match (raw.response_tokens, raw.response) {
        (Some(_), Some(_)) => {
            return Err(Error::validation(
                &id,
                "both `response_tokens` and `response` given",
            ))
        }
        (Some(tokens), None) => tokens,
        (None, Some(text)) => text.split_whitespace().map(str::to_string).collect(),
        (None, None) => return Err(Error::validation(&id, "missing field `response_tokens`")),
    };

    let mut instance = Instance::new(id, question, segments, response_tokens)?;
    if let Some(template) = raw.prompt_template {
        instance = instance.with_prompt_template(template);
    }
    if let Some(model) = raw.synthetic {
        instance = instance.with_synthetic(model)?;
    }
    Ok(instance)
}

/// Write instances in canonical form, one per line.
pub fn write_jsonl<W: Write>(mut writer: W, instances: &[Instance]) -> Result<()> {
    for instance in instances {
        writeln!(writer, "{}", instance.to_json_line())?;
    }
    Ok(())
}
