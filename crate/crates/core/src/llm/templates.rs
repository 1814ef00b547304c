//! Prompt templates with `{name}` placeholders.
//!
//! A placeholder is `{` followed by a lowercase identifier and `}`. Anything
//! else in braces (JSON examples in prompts) is literal text. Rendering is a
//! single pass, so bound values are never scanned for placeholders.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    ExtractTriples,
    Decompose,
    Rewrite,
    AnswerFromTriples,
    AnswerFromDocs,
    FinalAnswer,
}

impl TemplateName {
    pub const ALL: [TemplateName; 6] = [
        TemplateName::ExtractTriples,
        TemplateName::Decompose,
        TemplateName::Rewrite,
        TemplateName::AnswerFromTriples,
        TemplateName::AnswerFromDocs,
        TemplateName::FinalAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::ExtractTriples => "extract_triples",
            TemplateName::Decompose => "decompose",
            TemplateName::Rewrite => "rewrite",
            TemplateName::AnswerFromTriples => "answer_from_triples",
            TemplateName::AnswerFromDocs => "answer_from_docs",
            TemplateName::FinalAnswer => "final_answer",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::ExtractTriples => include_str!("../../templates/extract_triples.txt"),
            TemplateName::Decompose => include_str!("../../templates/decompose.txt"),
            TemplateName::Rewrite => include_str!("../../templates/rewrite.txt"),
            TemplateName::AnswerFromTriples => include_str!("../../templates/answer_from_triples.txt"),
            TemplateName::AnswerFromDocs => include_str!("../../templates/answer_from_docs.txt"),
            TemplateName::FinalAnswer => include_str!("../../templates/final_answer.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template} has no binding for placeholder {{{placeholder}}}")]
    Unbound {
        template: TemplateName,
        placeholder: String,
    },
    #[error("missing template file for {0}")]
    MissingTemplate(TemplateName),
    #[error("cannot read template {name}: {source}")]
    Io {
        name: TemplateName,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone)]
pub struct Template {
    name: TemplateName,
    pieces: Vec<Piece>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl Template {
    pub fn parse(name: TemplateName, body: &str) -> Self {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = body;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_ident(&after[..close]) => {
                    text.push_str(&rest[..open]);
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(after[..close].to_string()));
                    rest = &after[close + 1..];
                }
                _ => {
                    text.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        text.push_str(rest);
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Template { name, pieces }
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.as_str()),
                Piece::Text(_) => None,
            })
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Substitute every placeholder. Extra bindings are ignored.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => match vars.get(s) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(TemplateError::Unbound {
                            template: self.name,
                            placeholder: s.clone(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: HashMap<TemplateName, Template>,
}

impl TemplateRegistry {
    /// The default prompts compiled into the crate.
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| (n, Template::parse(n, n.builtin_body())))
            .collect();
        TemplateRegistry { templates }
    }

    /// Load `<name>.txt` for every template name. All six must exist.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = HashMap::new();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", name.as_str()));
            if !path.is_file() {
                return Err(TemplateError::MissingTemplate(name));
            }
            let body = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io { name, source })?;
            templates.insert(name, Template::parse(name, &body));
        }
        Ok(TemplateRegistry { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, name: TemplateName) -> &Template {
        // both constructors populate every name
        &self.templates[&name]
    }

    pub fn render(&self, name: TemplateName, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        self.get(name).render(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn substitutes_placeholders() {
        let t = Template::parse(TemplateName::Rewrite, "Q: {subquestion}?");
        assert_eq!(t.render(&vars(&[("subquestion", "who")])).unwrap(), "Q: who?");
    }

    #[test]
    fn json_braces_are_literal() {
        let t = Template::parse(
            TemplateName::AnswerFromDocs,
            "{\"answer\": \"x\"} and {question} and { spaced } and {Upper}",
        );
        assert_eq!(t.placeholders(), vec!["question"]);
        assert_eq!(
            t.render(&vars(&[("question", "q")])).unwrap(),
            "{\"answer\": \"x\"} and q and { spaced } and {Upper}"
        );
    }

    #[test]
    fn unbound_placeholder_errors() {
        let t = Template::parse(TemplateName::Decompose, "Question: {question}");
        let err = t.render(&BTreeMap::new()).unwrap_err();
        assert!(matches!(err, TemplateError::Unbound { placeholder, .. } if placeholder == "question"));
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = Template::parse(TemplateName::Decompose, "{question}");
        assert_eq!(t.render(&vars(&[("question", "{question}")])).unwrap(), "{question}");
    }

    #[test]
    fn builtin_has_expected_slots() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(reg.len(), 6);
        let slots = |n| reg.get(n).placeholders().into_iter().map(String::from).collect::<Vec<_>>();
        assert_eq!(slots(TemplateName::ExtractTriples), ["text", "title"]);
        assert_eq!(slots(TemplateName::Decompose), ["question"]);
        assert_eq!(slots(TemplateName::Rewrite), ["answers", "question"]);
        assert_eq!(slots(TemplateName::AnswerFromTriples), ["question", "triples"]);
        assert_eq!(slots(TemplateName::AnswerFromDocs), ["documents", "question"]);
        assert_eq!(slots(TemplateName::FinalAnswer), ["memory", "question"]);
    }

    #[test]
    fn load_dir_requires_all_templates() {
        let dir = tempfile::tempdir().unwrap();
        for name in TemplateName::ALL {
            std::fs::write(dir.path().join(format!("{name}.txt")), "{question}").unwrap();
        }
        assert_eq!(TemplateRegistry::load_dir(dir.path()).unwrap().len(), 6);
        std::fs::remove_file(dir.path().join("rewrite.txt")).unwrap();
        assert!(matches!(
            TemplateRegistry::load_dir(dir.path()),
            Err(TemplateError::MissingTemplate(TemplateName::Rewrite))
        ));
    }
}
