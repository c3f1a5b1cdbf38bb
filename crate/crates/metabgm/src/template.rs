//! Prompt templates as data files.
//!
//! Templates carry a role preamble and a body with `{name}` placeholders.
//! The defaults shipped under `assets/templates/` are reconstructions and
//! are expected to be tuned; nothing in the code depends on their wording.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    #[serde(default)]
    pub role_preamble: String,
    pub body: String,
    #[serde(default)]
    pub max_output_words: Option<usize>,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("missing placeholder binding: {0}")]
    MissingPlaceholder(String),
    #[error("failed to load template {path}: {detail}")]
    LoadFailed { path: String, detail: String },
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let raw = std::fs::read_to_string(path).map_err(|e| TemplateError::LoadFailed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&raw).map_err(|e| TemplateError::LoadFailed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Placeholder names referenced by the body.
    pub fn placeholders(&self) -> BTreeSet<String> {
        scan_placeholders(&self.body)
    }
}

fn scan_placeholders(body: &str) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = body[i + 1..].find('}') {
                let name = &body[i + 1..i + 1 + end];
                if !name.is_empty()
                    && name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_')
                {
                    names.insert(name.to_string());
                    i += end + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    names
}

/// Substitutes every `{name}` in the body with its binding and prepends the
/// role preamble. Extra bindings are ignored; a referenced but unbound
/// placeholder is an error.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &[(&str, &str)],
) -> Result<String, TemplateError> {
    let mut body = String::with_capacity(template.body.len());
    let src = &template.body;
    let mut rest = src.as_str();
    while let Some(start) = rest.find('{') {
        body.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end)
                if !after[..end].is_empty()
                    && after[..end]
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_') =>
            {
                let name = &after[..end];
                match bindings.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => body.push_str(v),
                    None => return Err(TemplateError::MissingPlaceholder(name.to_string())),
                }
                rest = &after[end + 1..];
            }
            _ => {
                body.push('{');
                rest = after;
            }
        }
    }
    body.push_str(rest);

    if template.role_preamble.is_empty() {
        Ok(body)
    } else {
        Ok(format!("{}\n\n{}", template.role_preamble, body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpl(body: &str) -> PromptTemplate {
        PromptTemplate {
            id: "t".into(),
            role_preamble: String::new(),
            body: body.into(),
            max_output_words: None,
        }
    }

    #[test]
    fn exact_substitution() {
        let t = tpl("Scene data: {info_str}");
        let out = render_prompt(&t, &[("info_str", "X")]).unwrap();
        assert_eq!(out, "Scene data: X");
    }

    #[test]
    fn unbound_placeholder_errors() {
        let t = tpl("anchor: {anchor}");
        match render_prompt(&t, &[("scene", "s")]) {
            Err(TemplateError::MissingPlaceholder(name)) => assert_eq!(name, "anchor"),
            other => panic!("expected MissingPlaceholder, got {other:?}"),
        }
    }

    #[test]
    fn extra_bindings_ignored() {
        let t = tpl("{a}");
        let out = render_prompt(&t, &[("a", "1"), ("unused", "2")]).unwrap();
        assert_eq!(out, "1");
    }

    #[test]
    fn preamble_prepended() {
        let mut t = tpl("{a}");
        t.role_preamble = "You are X.".into();
        assert_eq!(render_prompt(&t, &[("a", "1")]).unwrap(), "You are X.\n\n1");
    }

    #[test]
    fn non_placeholder_braces_pass_through() {
        let t = tpl("a {not a name} b {x}");
        let out = render_prompt(&t, &[("x", "1")]).unwrap();
        assert_eq!(out, "a {not a name} b 1");
    }

    #[test]
    fn placeholder_scan() {
        let t = tpl("{info_str} and {scene} and {scene}");
        let names: Vec<_> = t.placeholders().into_iter().collect();
        assert_eq!(names, vec!["info_str".to_string(), "scene".to_string()]);
    }
}
