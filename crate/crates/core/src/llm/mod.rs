//! LLM access: prompt templates, backends, and per-question sessions.
//!
//! [`Gateway`] is shared and thread-safe; it renders templates, caps the
//! number of requests in flight and forwards to a [`ChatBackend`]. A
//! [`Session`] wraps a gateway for one unit of work (one question, or one
//! document while indexing). It enforces the call budget, performs the
//! structured-output retry, and keeps the call log and degradation events
//! that end up in traces.

pub mod remote;
pub mod structured;
pub mod stub;
pub mod templates;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use structured::{Field, Shape};
pub use templates::{TemplateError, TemplateName, TemplateRegistry};

/// Appended to the prompt when a structured completion could not be parsed.
pub const JSON_RETRY_SUFFIX: &str =
    "\n\nYour previous reply was not valid JSON of the requested form. Respond with valid JSON only.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template: TemplateName,
    pub variables: BTreeMap<String, String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(template: TemplateName) -> Self {
        ChatRequest {
            template,
            variables: BTreeMap::new(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    pub fn var(mut self, name: &str, value: impl Into<String>) -> Self {
        self.variables.insert(name.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    /// Verbatim backend output.
    pub text: String,
    pub usage: Usage,
    pub backend: String,
    /// Transport-level retries spent on this call.
    pub retries: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend error (status {status:?}): {body}")]
    Backend { status: Option<u16>, body: String },
    #[error("stub script has no response left for {template}")]
    StubExhausted { template: TemplateName },
    #[error("LLM call budget of {budget} exhausted")]
    BudgetExceeded { budget: u32 },
    #[error("could not parse structured output ({reason}): {raw:?}")]
    StructuredParse { raw: String, reason: String },
}

impl LlmError {
    /// Errors that must abort the surrounding unit of work instead of being
    /// absorbed by a degraded fallback.
    pub fn is_fatal(&self) -> bool {
        matches!(self, LlmError::BudgetExceeded { .. } | LlmError::Template(_))
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn send(&self, request: &ChatRequest, prompt: &str) -> Result<ChatResponse, LlmError>;

    /// Scripted backends depend on call order; callers keep them sequential.
    fn is_scripted(&self) -> bool {
        false
    }
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("in-flight lock");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("in-flight lock");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    templates: TemplateRegistry,
    backend: Box<dyn ChatBackend>,
    in_flight: InFlight,
}

impl Gateway {
    pub fn new(templates: TemplateRegistry, backend: Box<dyn ChatBackend>, max_in_flight: usize) -> Self {
        Gateway {
            templates,
            backend,
            in_flight: InFlight {
                limit: max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// How many independent units of work may call this gateway at once.
    pub fn parallelism(&self) -> usize {
        if self.backend.is_scripted() {
            1
        } else {
            self.in_flight.limit
        }
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn render(&self, request: &ChatRequest) -> Result<String, TemplateError> {
        self.templates.render(request.template, &request.variables)
    }

    fn send(&self, request: &ChatRequest, prompt: &str) -> Result<ChatResponse, LlmError> {
        let _permit = self.in_flight.acquire();
        self.backend.send(request, prompt)
    }

    /// One unbudgeted call outside any session.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let prompt = self.render(request)?;
        self.send(request, &prompt)
    }

    pub fn session(&self, budget: Option<u32>) -> Session<'_> {
        Session {
            gateway: self,
            budget,
            calls: RefCell::new(Vec::new()),
            degradations: RefCell::new(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallRecord {
    pub template: TemplateName,
    /// 1 for the first try, 2 for the structured-output retry.
    pub attempt: u32,
    pub transport_retries: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A recoverable failure that was absorbed by a fallback path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub stage: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageSummary {
    pub llm_calls: u32,
    pub transport_retries: u32,
    pub structured_retries: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structured<T> {
    pub value: T,
    pub retried: bool,
}

/// Budgeted, logged access to a gateway for one unit of work.
pub struct Session<'g> {
    gateway: &'g Gateway,
    budget: Option<u32>,
    calls: RefCell<Vec<CallRecord>>,
    degradations: RefCell<Vec<Degradation>>,
}

impl Session<'_> {
    pub fn calls_made(&self) -> u32 {
        self.calls.borrow().len() as u32
    }

    pub fn budget(&self) -> Option<u32> {
        self.budget
    }

    pub fn degrade(&self, stage: &str, detail: impl Into<String>) {
        let detail = detail.into();
        log::warn!("{stage}: {detail}");
        self.degradations.borrow_mut().push(Degradation {
            stage: stage.to_string(),
            detail,
        });
    }

    pub fn degradations(&self) -> Vec<Degradation> {
        self.degradations.borrow().clone()
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.borrow().clone()
    }

    pub fn usage(&self) -> UsageSummary {
        let calls = self.calls.borrow();
        UsageSummary {
            llm_calls: calls.len() as u32,
            transport_retries: calls.iter().map(|c| c.transport_retries).sum(),
            structured_retries: calls.iter().filter(|c| c.attempt > 1).count() as u32,
            prompt_tokens: calls.iter().map(|c| c.prompt_tokens).sum(),
            completion_tokens: calls.iter().map(|c| c.completion_tokens).sum(),
        }
    }

    fn call(&self, request: &ChatRequest, prompt: &str, attempt: u32) -> Result<ChatResponse, LlmError> {
        if let Some(budget) = self.budget {
            if self.calls_made() >= budget {
                return Err(LlmError::BudgetExceeded { budget });
            }
        }
        let result = self.gateway.send(request, prompt);
        let record = match &result {
            Ok(r) => CallRecord {
                template: request.template,
                attempt,
                transport_retries: r.retries,
                prompt_tokens: r.usage.prompt_tokens,
                completion_tokens: r.usage.completion_tokens,
                error: None,
            },
            Err(e) => CallRecord {
                template: request.template,
                attempt,
                transport_retries: 0,
                prompt_tokens: 0,
                completion_tokens: 0,
                error: Some(e.to_string()),
            },
        };
        self.calls.borrow_mut().push(record);
        result
    }

    /// Render and send. Template errors surface before any backend call.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let prompt = self.gateway.render(request)?;
        self.call(request, &prompt, 1)
    }

    /// Complete and parse JSON of the given shape, retrying once with an
    /// explicit "JSON only" instruction when the first reply does not parse.
    pub fn complete_structured<T: DeserializeOwned>(
        &self,
        request: &ChatRequest,
        shape: &Shape,
    ) -> Result<Structured<T>, LlmError> {
        let prompt = self.gateway.render(request)?;
        let first = self.call(request, &prompt, 1)?;
        let reason = match parse_structured(&first.text, shape) {
            Ok(value) => return Ok(Structured { value, retried: false }),
            Err(reason) => reason,
        };
        log::debug!("{} reply did not parse ({reason}); retrying", request.template);
        let retry_prompt = format!("{prompt}{JSON_RETRY_SUFFIX}");
        let second = self.call(request, &retry_prompt, 2)?;
        match parse_structured(&second.text, shape) {
            Ok(value) => Ok(Structured { value, retried: true }),
            Err(reason) => Err(LlmError::StructuredParse {
                raw: second.text,
                reason,
            }),
        }
    }
}

fn parse_structured<T: DeserializeOwned>(text: &str, shape: &Shape) -> Result<T, String> {
    let value = structured::extract_json(text).ok_or_else(|| "no JSON found".to_string())?;
    shape.check(&value)?;
    serde_json::from_value(value).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::stub::{StubBackend, StubRule, StubScript};
    use super::*;
    use serde_json::json;

    fn gateway(rules: Vec<StubRule>) -> Gateway {
        Gateway::new(
            TemplateRegistry::builtin(),
            Box::new(StubBackend::new(StubScript::new(rules))),
            4,
        )
    }

    #[derive(Debug, Deserialize, PartialEq)]
    struct Answer {
        answerable: bool,
        answer: String,
        used_triple_ids: Vec<u64>,
    }

    fn answer_shape() -> Shape {
        Shape::Object(vec![
            Field::required("answerable", Shape::Bool),
            Field::required("answer", Shape::String),
            Field::required("used_triple_ids", Shape::array_of(Shape::Integer)),
        ])
    }

    fn answer_request() -> ChatRequest {
        ChatRequest::new(TemplateName::AnswerFromTriples)
            .var("question", "Who directed Inception?")
            .var("triples", "3. Inception | directed by | Christopher Nolan")
    }

    #[test]
    fn stub_text_is_echoed() {
        let text = "1. Who directed Inception?\n2. Who is the spouse of #1?";
        let gw = gateway(vec![StubRule::new(TemplateName::Decompose, [json!(text)])]);
        let session = gw.session(None);
        let resp = session
            .complete(&ChatRequest::new(TemplateName::Decompose).var("question", "q"))
            .unwrap();
        assert_eq!(resp.text, text);
        assert_eq!(session.calls_made(), 1);
    }

    #[test]
    fn unbound_placeholder_fails_before_backend() {
        let gw = gateway(vec![StubRule::new(TemplateName::Decompose, [json!("x")])]);
        let session = gw.session(None);
        let err = session.complete(&ChatRequest::new(TemplateName::Decompose)).unwrap_err();
        assert!(matches!(err, LlmError::Template(TemplateError::Unbound { .. })));
        assert_eq!(session.calls_made(), 0);
    }

    #[test]
    fn structured_parses_first_try() {
        let gw = gateway(vec![StubRule::new(
            TemplateName::AnswerFromTriples,
            [json!({"answerable": true, "answer": "Christopher Nolan", "used_triple_ids": [3]})],
        )]);
        let s = gw.session(None);
        let out: Structured<Answer> = s.complete_structured(&answer_request(), &answer_shape()).unwrap();
        assert!(!out.retried);
        assert_eq!(
            out.value,
            Answer {
                answerable: true,
                answer: "Christopher Nolan".into(),
                used_triple_ids: vec![3]
            }
        );
    }

    #[test]
    fn structured_retries_once_after_prose() {
        let gw = gateway(vec![StubRule::new(
            TemplateName::AnswerFromTriples,
            [
                json!("I think the answer is Christopher Nolan."),
                json!({"answerable": true, "answer": "Christopher Nolan", "used_triple_ids": [3]}),
            ],
        )]);
        let s = gw.session(None);
        let out: Structured<Answer> = s.complete_structured(&answer_request(), &answer_shape()).unwrap();
        assert!(out.retried);
        assert_eq!(out.value.answer, "Christopher Nolan");
        assert_eq!(s.usage().structured_retries, 1);
        assert_eq!(s.usage().llm_calls, 2);
    }

    #[test]
    fn structured_fails_after_two_bad_replies() {
        let gw = gateway(vec![StubRule::new(
            TemplateName::AnswerFromTriples,
            [json!("prose"), json!("more prose")],
        )]);
        let s = gw.session(None);
        let err = s
            .complete_structured::<Answer>(&answer_request(), &answer_shape())
            .unwrap_err();
        assert!(matches!(err, LlmError::StructuredParse { raw, .. } if raw == "more prose"));
    }

    #[test]
    fn budget_caps_calls() {
        let gw = gateway(vec![StubRule::new(TemplateName::Decompose, [json!("x")]).repeating()]);
        let s = gw.session(Some(2));
        let req = ChatRequest::new(TemplateName::Decompose).var("question", "q");
        s.complete(&req).unwrap();
        s.complete(&req).unwrap();
        assert!(matches!(s.complete(&req), Err(LlmError::BudgetExceeded { budget: 2 })));
        assert_eq!(s.calls_made(), 2);
    }

    #[test]
    fn rendered_builtin_prompts_have_no_leftover_placeholders() {
        let reg = TemplateRegistry::builtin();
        for name in TemplateName::ALL {
            let vars: BTreeMap<String, String> = reg
                .get(name)
                .placeholders()
                .into_iter()
                .map(|p| (p.to_string(), format!("<{p}>")))
                .collect();
            let rendered = reg.render(name, &vars).unwrap();
            for p in vars.keys() {
                assert!(!rendered.contains(&format!("{{{p}}}")), "{name} kept {{{p}}}");
            }
        }
    }
}
