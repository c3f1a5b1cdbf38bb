//! Two-stage generation: characterized scene data to narrative text, then
//! narrative text to a music description, over any [`TextBackend`].
//!
//! The previous segment's description is carried into the stage-2 prompt as
//! the melodic anchor; the first segment binds the literal `"none"`.

use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, GenerationRequest, GenerationResult, RetryPolicy, TextBackend,
};
use crate::scene::{CharValue, CharacterizedData};
use crate::template::{render_prompt, PromptTemplate, TemplateError};

/// Anchor binding used for the first segment.
pub const NO_ANCHOR: &str = "none";

/// Default cap on music description length, in whitespace words.
pub const DEFAULT_WORD_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeText {
    pub text: String,
    pub source_window: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicDescription {
    pub text: String,
    pub word_count: usize,
    pub anchor_of: Option<u64>,
}

/// Sampling parameters threaded to the backend for both stages.
#[derive(Debug, Clone)]
pub struct GenParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub retry: RetryPolicy,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            model: "mock".into(),
            temperature: 0.7,
            max_tokens: 256,
            seed: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend returned empty output after {0} attempts")]
    EmptyGeneration(u32),
}

#[derive(Debug, Clone)]
pub struct NarrativeOutcome {
    pub narrative: NarrativeText,
    /// The exact prompt sent to the backend.
    pub prompt: String,
    /// Backend-side latency, summed over retries.
    pub backend_ms: f64,
}

#[derive(Debug, Clone)]
pub struct MusicOutcome {
    pub description: MusicDescription,
    pub prompt: String,
    pub backend_ms: f64,
}

fn fmt_char_value(value: &CharValue) -> String {
    match value {
        CharValue::Text(t) => t.clone(),
        CharValue::Flag(b) => b.to_string(),
        CharValue::Num(n) => format!("{n:.2}"),
        CharValue::Map(m) => {
            let inner: Vec<String> = m
                .iter()
                .map(|(k, v)| format!("{k}={}", fmt_char_value(v)))
                .collect();
            format!("({})", inner.join(", "))
        }
    }
}

/// Deterministic flattening of characterized data into prompt text:
/// `"Key: value"` joined by `"; "`, nested maps as `"Key: (k1=v1, k2=v2)"`.
pub fn to_info_str(data: &CharacterizedData) -> String {
    data.entries
        .iter()
        .map(|(k, v)| format!("{k}: {}", fmt_char_value(v)))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Truncates to `limit` whitespace words, stripping trailing punctuation
/// except a final period. Texts already within the limit pass unchanged.
pub fn enforce_word_limit(text: &str, limit: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= limit {
        return text.to_string();
    }
    let mut truncated = words[..limit].join(" ");
    while truncated
        .chars()
        .last()
        .is_some_and(|c| c.is_ascii_punctuation() && c != '.')
    {
        truncated.pop();
    }
    truncated
}

fn flatten_paragraph(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn complete_nonempty(
    backend: &dyn TextBackend,
    request: &GenerationRequest,
    retry: &RetryPolicy,
) -> Result<(GenerationResult, f64), GenError> {
    let mut backend_ms = 0.0;
    let attempts = retry.attempts.max(1);
    for attempt in 0..attempts {
        match backend.complete(request) {
            Ok(result) => {
                backend_ms += result.latency_ms;
                if !result.text.trim().is_empty() {
                    return Ok((result, backend_ms));
                }
            }
            Err(err) if err.is_transient() && attempt + 1 < attempts => {
                thread::sleep(retry.backoff_for(attempt));
            }
            Err(err) => return Err(err.into()),
        }
    }
    Err(GenError::EmptyGeneration(attempts))
}

fn request_for(prompt: String, params: &GenParams) -> GenerationRequest {
    GenerationRequest {
        prompt,
        model: params.model.clone(),
        temperature: params.temperature,
        max_tokens: params.max_tokens,
        seed: params.seed,
    }
}

/// Stage 1: characterized data to a one-paragraph narrative.
pub fn generate_narrative(
    data: &CharacterizedData,
    source_window: u64,
    template: &PromptTemplate,
    backend: &dyn TextBackend,
    params: &GenParams,
) -> Result<NarrativeOutcome, GenError> {
    let info_str = to_info_str(data);
    let prompt = render_prompt(template, &[("info_str", info_str.as_str())])?;
    let (result, backend_ms) =
        complete_nonempty(backend, &request_for(prompt.clone(), params), &params.retry)?;
    Ok(NarrativeOutcome {
        narrative: NarrativeText {
            text: flatten_paragraph(result.text.trim()),
            source_window,
        },
        prompt,
        backend_ms,
    })
}

/// Stage 2: narrative plus the previous description (melodic anchor) to a
/// word-limited music description.
pub fn generate_music_description(
    narrative: &NarrativeText,
    anchor: Option<(&MusicDescription, u64)>,
    template: &PromptTemplate,
    backend: &dyn TextBackend,
    params: &GenParams,
) -> Result<MusicOutcome, GenError> {
    let anchor_text = anchor.map_or(NO_ANCHOR, |(d, _)| d.text.as_str());
    let prompt = render_prompt(
        template,
        &[("scene", narrative.text.as_str()), ("anchor", anchor_text)],
    )?;
    let (result, backend_ms) =
        complete_nonempty(backend, &request_for(prompt.clone(), params), &params.retry)?;

    let limit = template.max_output_words.unwrap_or(DEFAULT_WORD_LIMIT);
    let text = enforce_word_limit(&flatten_paragraph(result.text.trim()), limit);
    let word_count = text.split_whitespace().count();
    Ok(MusicOutcome {
        description: MusicDescription {
            text,
            word_count,
            anchor_of: anchor.map(|(_, window)| window),
        },
        prompt,
        backend_ms,
    })
}
