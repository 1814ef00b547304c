//! Scripted chat backend for deterministic runs.
//!
//! A script is an ordered list of rules. A request is served by the first rule
//! whose matcher accepts it and which still has a response left; each rule
//! hands out its responses in order. With `repeat` set, the last response is
//! reused forever instead of the rule running dry.
//!
//! ```json
//! {"rules": [
//!   {"template": "decompose", "when": {"question": "Inception"},
//!    "responses": [["Who directed Inception?", "Who is the spouse of #1?"]]}
//! ]}
//! ```
//!
//! Non-string responses are sent back as compact JSON text.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError, TemplateName, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubRule {
    pub template: TemplateName,
    /// Every listed variable must contain the given substring.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub when: BTreeMap<String, String>,
    /// At least one variable must contain this substring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub responses: Vec<Value>,
    #[serde(default)]
    pub repeat: bool,
}

impl StubRule {
    pub fn new(template: TemplateName, responses: impl IntoIterator<Item = Value>) -> Self {
        StubRule {
            template,
            when: BTreeMap::new(),
            contains: None,
            responses: responses.into_iter().collect(),
            repeat: false,
        }
    }

    pub fn when(mut self, var: &str, substring: &str) -> Self {
        self.when.insert(var.to_string(), substring.to_string());
        self
    }

    pub fn containing(mut self, substring: &str) -> Self {
        self.contains = Some(substring.to_string());
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        if self.template != req.template {
            return false;
        }
        let when_ok = self
            .when
            .iter()
            .all(|(var, sub)| req.variables.get(var).is_some_and(|v| v.contains(sub.as_str())));
        let contains_ok = self
            .contains
            .as_ref()
            .is_none_or(|sub| req.variables.values().any(|v| v.contains(sub.as_str())));
        when_ok && contains_ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubScript {
    pub rules: Vec<StubRule>,
}

impl StubScript {
    pub fn new(rules: Vec<StubRule>) -> Self {
        StubScript { rules }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

pub struct StubBackend {
    script: StubScript,
    cursors: Mutex<Vec<usize>>,
}

impl StubBackend {
    pub fn new(script: StubScript) -> Self {
        let cursors = Mutex::new(vec![0; script.rules.len()]);
        StubBackend { script, cursors }
    }

    /// Responses handed out so far, per rule.
    pub fn consumed(&self) -> Vec<usize> {
        self.cursors.lock().expect("stub cursor lock").clone()
    }
}

impl ChatBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn is_scripted(&self) -> bool {
        true
    }

    fn send(&self, request: &ChatRequest, prompt: &str) -> Result<ChatResponse, LlmError> {
        let mut cursors = self.cursors.lock().expect("stub cursor lock");
        for (i, rule) in self.script.rules.iter().enumerate() {
            if rule.responses.is_empty() || !rule.matches(request) {
                continue;
            }
            let cursor = cursors[i];
            let pick = if cursor < rule.responses.len() {
                cursor
            } else if rule.repeat {
                rule.responses.len() - 1
            } else {
                continue;
            };
            cursors[i] += 1;
            let text = match &rule.responses[pick] {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            return Ok(ChatResponse {
                usage: Usage {
                    prompt_tokens: word_count(prompt),
                    completion_tokens: word_count(&text),
                },
                text,
                backend: "stub".to_string(),
                retries: 0,
            });
        }
        Err(LlmError::StubExhausted {
            template: request.template,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn req(template: TemplateName, vars: &[(&str, &str)]) -> ChatRequest {
        let mut r = ChatRequest::new(template);
        for (k, v) in vars {
            r = r.var(k, *v);
        }
        r
    }

    #[test]
    fn plays_back_in_order_then_runs_dry() {
        let stub = StubBackend::new(StubScript::new(vec![StubRule::new(
            TemplateName::Decompose,
            [json!("one"), json!("two")],
        )]));
        let r = req(TemplateName::Decompose, &[("question", "q")]);
        assert_eq!(stub.send(&r, "p").unwrap().text, "one");
        assert_eq!(stub.send(&r, "p").unwrap().text, "two");
        assert!(matches!(stub.send(&r, "p"), Err(LlmError::StubExhausted { .. })));
    }

    #[test]
    fn matchers_select_rules() {
        let stub = StubBackend::new(StubScript::new(vec![
            StubRule::new(TemplateName::AnswerFromTriples, [json!({"answerable": true})])
                .when("triples", "spouse")
                .repeating(),
            StubRule::new(TemplateName::AnswerFromTriples, [json!({"answerable": false})]).repeating(),
        ]));
        let with = req(TemplateName::AnswerFromTriples, &[("triples", "A | spouse | B")]);
        let without = req(TemplateName::AnswerFromTriples, &[("triples", "A | born | B")]);
        assert_eq!(stub.send(&without, "").unwrap().text, "{\"answerable\":false}");
        assert_eq!(stub.send(&with, "").unwrap().text, "{\"answerable\":true}");
        assert_eq!(stub.send(&with, "").unwrap().text, "{\"answerable\":true}");
        assert_eq!(stub.consumed(), vec![2, 1]);
    }

    #[test]
    fn contains_checks_any_variable() {
        let stub = StubBackend::new(StubScript::new(vec![
            StubRule::new(TemplateName::Rewrite, [json!("hit")]).containing("Nolan").repeating(),
        ]));
        assert!(stub
            .send(&req(TemplateName::Rewrite, &[("answers", "#1: Christopher Nolan")]), "")
            .is_ok());
        assert!(stub.send(&req(TemplateName::Rewrite, &[("answers", "x")]), "").is_err());
        assert!(stub.send(&req(TemplateName::FinalAnswer, &[("answers", "Nolan")]), "").is_err());
    }

    #[test]
    fn script_file_format() {
        let script: StubScript = serde_json::from_value(json!({
            "rules": [{"template": "final_answer", "when": {"question": "x"}, "responses": ["A"], "repeat": true}]
        }))
        .unwrap();
        assert_eq!(script.rules[0].template, TemplateName::FinalAnswer);
        assert!(script.rules[0].repeat);
    }
}
