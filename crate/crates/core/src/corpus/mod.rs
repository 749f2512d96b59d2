//! Attribution instances: a question, an ordered list of context segments and
//! a frozen response, plus JSONL ingestion and prompt rendering.

mod jsonl;
mod mask;

pub use jsonl::{load_jsonl, load_jsonl_with, parse_jsonl, write_jsonl};
pub use mask::SubsetMask;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::SyntheticModel;

/// Placeholder replaced by the question in prompt templates.
pub const QUESTION_PLACEHOLDER: &str = "{question}";
/// Placeholder replaced by the rendered context block in prompt templates.
pub const CONTEXT_PLACEHOLDER: &str = "{context}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub text: String,
}

/// How raw context strings are cut into segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Sentence,
    Paragraph,
}

/// One QA attribution task. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    id: String,
    question: String,
    segments: Vec<Segment>,
    response_tokens: Vec<String>,
    prompt_template: Option<String>,
    synthetic: Option<SyntheticModel>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        segments: Vec<String>,
        response_tokens: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        let question = question.into();
        if id.trim().is_empty() {
            return Err(Error::validation(id, "field `id` is empty"));
        }
        if question.trim().is_empty() {
            return Err(Error::validation(id, "field `question` is empty"));
        }
        if segments.is_empty() {
            return Err(Error::validation(id, "field `segments` is empty (N = 0)"));
        }
        if let Some(j) = segments.iter().position(|s| s.trim().is_empty()) {
            return Err(Error::validation(id, format!("segment {j} is empty")));
        }
        if response_tokens.is_empty() {
            return Err(Error::validation(
                id,
                "field `response_tokens` is empty (T = 0)",
            ));
        }
        if let Some(t) = response_tokens.iter().position(|s| s.is_empty()) {
            return Err(Error::validation(
                id,
                format!("response token {t} is empty"),
            ));
        }
        let segments = segments
            .into_iter()
            .enumerate()
            .map(|(index, text)| Segment { index, text })
            .collect();
        Ok(Self {
            id,
            question,
            segments,
            response_tokens,
            prompt_template: None,
            synthetic: None,
        })
    }

    pub fn with_prompt_template(mut self, template: impl Into<String>) -> Self {
        self.prompt_template = Some(template.into());
        self
    }

    /// Attach a synthetic likelihood model; its dimensions must match N and T.
    pub fn with_synthetic(mut self, model: SyntheticModel) -> Result<Self> {
        model
            .check_dims(self.n_segments(), self.n_tokens())
            .map_err(|e| Error::validation(&self.id, e.to_string()))?;
        self.synthetic = Some(model);
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn response_tokens(&self) -> &[String] {
        &self.response_tokens
    }

    pub fn prompt_template(&self) -> Option<&str> {
        self.prompt_template.as_deref()
    }

    pub fn synthetic(&self) -> Option<&SyntheticModel> {
        self.synthetic.as_ref()
    }

    /// N, the number of context segments.
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// T, the number of frozen response tokens.
    pub fn n_tokens(&self) -> usize {
        self.response_tokens.len()
    }

    /// Response tokens joined by single spaces.
    pub fn response_text(&self) -> String {
        self.response_tokens.join(" ")
    }

    pub fn full_mask(&self) -> SubsetMask {
        SubsetMask::full(self.n_segments())
    }

    pub fn empty_mask(&self) -> SubsetMask {
        SubsetMask::empty(self.n_segments())
    }

    pub(crate) fn check_mask(&self, mask: &SubsetMask) -> Result<()> {
        if mask.len() != self.n_segments() {
            return Err(Error::contract(format!(
                "mask width {} does not match instance `{}` with N = {}",
                mask.len(),
                self.id,
                self.n_segments()
            )));
        }
        Ok(())
    }
}

/// Split a raw context string into segments.
///
/// Sentence mode cuts after `.`, `!` or `?` when followed by whitespace.
/// Paragraph mode cuts on blank lines. Fragments are trimmed and empty ones
/// dropped.
pub fn segment_text(context: &str, granularity: Granularity) -> Result<Vec<Segment>> {
    if context.trim().is_empty() {
        return Err(Error::contract("context is empty"));
    }
    let pieces = match granularity {
        Granularity::Sentence => split_sentences(context),
        Granularity::Paragraph => split_paragraphs(context),
    };
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(index, text)| Segment { index, text })
        .collect())
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    push_trimmed(&mut out, &text[start..end]);
                    start = end;
                }
            }
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn split_paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            push_trimmed(&mut out, &current.join("\n"));
            current.clear();
        } else {
            current.push(line);
        }
    }
    push_trimmed(&mut out, &current.join("\n"));
    out
}

fn push_trimmed(out: &mut Vec<String>, fragment: &str) {
    let t = fragment.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// Render the prompt for `instance` keeping only the segments in `mask`.
///
/// Kept segments are joined by `\n` in index order. Without a custom
/// template the prompt is the context block, a blank line, then the question;
/// an empty mask renders the question alone.
pub fn render_prompt(instance: &Instance, mask: &SubsetMask) -> Result<String> {
    instance.check_mask(mask)?;
    let context = mask
        .indices()
        .map(|j| instance.segments[j].text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    Ok(match instance.prompt_template() {
        Some(template) => template
            .replace(CONTEXT_PLACEHOLDER, &context)
            .replace(QUESTION_PLACEHOLDER, instance.question()),
        None if context.is_empty() => instance.question().to_string(),
        None => format!("{context}\n\n{}", instance.question()),
    })
}
