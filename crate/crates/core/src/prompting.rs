//! Prompt templates and token-budget fitting.
//!
//! Two built-in templates ship with the crate: `generic`, which ends on an
//! open quote so the next token is the answer, and `alpaca`, which uses the
//! Instruction/Input/Response scaffold. Model-specific special tokens are not
//! part of templates; backends wrap the rendered prompt themselves.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REVIEW_TITLE: &str = "{review_title}";
pub const CANDIDATE_DOCUMENT: &str = "{candidate_document}";

/// Default prompt budget in tokens.
pub const DEFAULT_BUDGET: usize = 2048;

const CHARS_PER_TOKEN: usize = 4;

const QUESTION: &str =
    "Answer 'yes' or 'no' to Judge if the following retrieved study should be included by the systematic review?";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {id}: placeholder {placeholder} must appear exactly once")]
    Placeholder { id: String, placeholder: &'static str },
    #[error("budget too small: scaffold needs {scaffold_tokens} tokens, budget is {budget}")]
    BudgetTooSmall { scaffold_tokens: usize, budget: usize },
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template registry line {line}: {message}")]
    Registry { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateStyle {
    Alpaca,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    pub style: TemplateStyle,
}

#[derive(Deserialize)]
struct RawTemplate {
    template_id: String,
    body: String,
    style: TemplateStyle,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = PromptError;

    fn try_from(raw: RawTemplate) -> Result<Self, Self::Error> {
        PromptTemplate::new(raw.template_id, raw.body, raw.style)
    }
}

impl PromptTemplate {
    pub fn new(
        template_id: impl Into<String>,
        body: impl Into<String>,
        style: TemplateStyle,
    ) -> Result<Self, PromptError> {
        let template = Self {
            template_id: template_id.into(),
            body: body.into(),
            style,
        };
        for placeholder in [REVIEW_TITLE, CANDIDATE_DOCUMENT] {
            if template.body.matches(placeholder).count() != 1 {
                return Err(PromptError::Placeholder {
                    id: template.template_id,
                    placeholder,
                });
            }
        }
        Ok(template)
    }

    /// Prompt used for every model without an instruction scaffold.
    pub fn generic() -> Self {
        Self::new(
            "generic",
            format!("{QUESTION}\nReview: {REVIEW_TITLE}\nStudy: {CANDIDATE_DOCUMENT}\nThe answer is '"),
            TemplateStyle::Generic,
        )
        .expect("built-in template is valid")
    }

    /// Alpaca instruction-following prompt.
    pub fn alpaca() -> Self {
        Self::new(
            "alpaca",
            format!(
                "Below is an instruction that describes a task, paired with an input that provides further context. \
                 Write a response that appropriately completes the request.\n\
                 ### Instruction:\n{QUESTION}\n\
                 ### Input:\nReview: {REVIEW_TITLE}\nStudy: {CANDIDATE_DOCUMENT}\n\
                 ### Response:"
            ),
            TemplateStyle::Alpaca,
        )
        .expect("built-in template is valid")
    }
}

/// A rendered prompt, remembering where the candidate document sits so that
/// budget fitting only ever touches that span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    text: String,
    document: Range<usize>,
    truncated: bool,
}

impl Prompt {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn document(&self) -> &str {
        &self.text[self.document.clone()]
    }

    pub fn document_span(&self) -> Range<usize> {
        self.document.clone()
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    /// Surrounds the prompt with backend-specific text such as special tokens.
    pub fn wrap(&self, prefix: &str, suffix: &str) -> Prompt {
        if prefix.is_empty() && suffix.is_empty() {
            return self.clone();
        }
        Prompt {
            text: format!("{prefix}{}{suffix}", self.text),
            document: self.document.start + prefix.len()..self.document.end + prefix.len(),
            truncated: self.truncated,
        }
    }
}

/// Renders the candidate document as its title and abstract separated by a
/// single space; an empty abstract leaves just the title.
pub fn candidate_document(title: &str, abstract_text: &str) -> String {
    let abstract_text = abstract_text.trim();
    if abstract_text.is_empty() {
        title.trim().to_string()
    } else {
        format!("{} {abstract_text}", title.trim())
    }
}

pub fn render_prompt(template: &PromptTemplate, review_title: &str, candidate: &crate::corpus::Candidate) -> Prompt {
    render_with_document(
        template,
        review_title,
        &candidate_document(&candidate.title, &candidate.abstract_text),
    )
}

fn render_with_document(template: &PromptTemplate, review_title: &str, document: &str) -> Prompt {
    let body = &template.body;
    let title_at = body.find(REVIEW_TITLE).expect("validated template");
    let doc_at = body.find(CANDIDATE_DOCUMENT).expect("validated template");
    let mut text = String::with_capacity(body.len() + review_title.len() + document.len());
    let mut span = 0..0;
    let mut cursor = 0;
    let mut pieces = [
        (title_at, REVIEW_TITLE, review_title, false),
        (doc_at, CANDIDATE_DOCUMENT, document, true),
    ];
    pieces.sort_by_key(|p| p.0);
    for (at, placeholder, value, is_doc) in pieces {
        text.push_str(&body[cursor..at]);
        if is_doc {
            span = text.len()..text.len() + value.len();
        }
        text.push_str(value);
        cursor = at + placeholder.len();
    }
    text.push_str(&body[cursor..]);
    Prompt {
        text,
        document: span,
        truncated: false,
    }
}

/// Coarse token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub prompt: Prompt,
    pub estimated_tokens: usize,
    pub truncated: bool,
}

impl RenderedPrompt {
    pub fn text(&self) -> &str {
        self.prompt.text()
    }
}

/// Shortens the candidate-document span from its end until the token
/// estimate fits `budget`. Text outside the span is never changed.
pub fn fit_to_budget(prompt: &Prompt, budget: usize) -> Result<RenderedPrompt, PromptError> {
    if budget == 0 {
        return Err(PromptError::ZeroBudget);
    }
    let estimated = estimate_tokens(&prompt.text);
    if estimated <= budget {
        return Ok(RenderedPrompt {
            prompt: prompt.clone(),
            estimated_tokens: estimated,
            truncated: prompt.truncated,
        });
    }
    let doc = prompt.document();
    let scaffold_chars = prompt.text.chars().count() - doc.chars().count();
    let max_chars = budget * CHARS_PER_TOKEN;
    if scaffold_chars > max_chars {
        return Err(PromptError::BudgetTooSmall {
            scaffold_tokens: scaffold_chars.div_ceil(CHARS_PER_TOKEN),
            budget,
        });
    }
    let keep = max_chars - scaffold_chars;
    let cut = doc.char_indices().nth(keep).map_or(doc.len(), |(i, _)| i);
    let start = prompt.document.start;
    let mut text = String::with_capacity(prompt.text.len());
    text.push_str(&prompt.text[..start]);
    text.push_str(&doc[..cut]);
    text.push_str(&prompt.text[prompt.document.end..]);
    let shortened = Prompt {
        text,
        document: start..start + cut,
        truncated: true,
    };
    let estimated_tokens = estimate_tokens(&shortened.text);
    debug_assert!(estimated_tokens <= budget);
    Ok(RenderedPrompt {
        prompt: shortened,
        estimated_tokens,
        truncated: true,
    })
}

/// Named templates: the two built-ins plus any loaded from a registry file.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        for t in [PromptTemplate::generic(), PromptTemplate::alpaca()] {
            templates.insert(t.template_id.clone(), t);
        }
        Self { templates }
    }
}

impl TemplateRegistry {
    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.template_id.clone(), template);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Adds templates from JSONL; later records replace earlier ones with the
    /// same id, including built-ins.
    pub fn extend_from_reader<R: BufRead>(&mut self, reader: R) -> Result<(), PromptError> {
        for (idx, line) in reader.lines().enumerate() {
            let registry_err = |message: String| PromptError::Registry { line: idx + 1, message };
            let line = line.map_err(|e| registry_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: PromptTemplate = serde_json::from_str(&line).map_err(|e| registry_err(e.to_string()))?;
            self.insert(t);
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| PromptError::Registry {
            line: 0,
            message: format!("{}: {e}", path.as_ref().display()),
        })?;
        let mut reg = Self::default();
        reg.extend_from_reader(std::io::BufReader::new(file))?;
        Ok(reg)
    }
}
