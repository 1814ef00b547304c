//! Question decomposition and dependency-aware rewriting.
//!
//! Sub-questions refer to earlier answers with `#j` (1-based). Rewriting
//! first substitutes those placeholders literally, so the dependency is
//! injected even when the model rewrite fails, and then asks the model to
//! turn the result into a self-contained question.

use serde::{Deserialize, Serialize};

use crate::llm::{ChatRequest, LlmError, Session, Shape, TemplateName};

pub const DEFAULT_MAX_SUBQUESTIONS: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum DecomposeError {
    #[error("sub-question refers to #{0}, which has no answer yet")]
    MissingDependency(usize),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionPlan {
    pub original_question: String,
    pub sub_questions: Vec<String>,
    pub cap: usize,
}

impl DecompositionPlan {
    /// The question itself as the only step.
    pub fn single(question: &str, cap: usize) -> Self {
        DecompositionPlan {
            original_question: question.to_string(),
            sub_questions: vec![question.to_string()],
            cap,
        }
    }

    pub fn len(&self) -> usize {
        self.sub_questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_questions.is_empty()
    }
}

/// Answers to already-resolved sub-questions, by 1-based position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerContext {
    answers: Vec<(usize, String)>,
}

impl AnswerContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record the answer for step `index`. Indices must strictly increase.
    pub fn push(&mut self, index: usize, answer: impl Into<String>) {
        if let Some(&(last, _)) = self.answers.last() {
            assert!(index > last, "answer indices must increase ({index} after {last})");
        }
        self.answers.push((index, answer.into()));
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.answers
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, a)| a.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn entries(&self) -> &[(usize, String)] {
        &self.answers
    }
}

/// `(byte_start, byte_end, j)` for every `#j` token.
fn placeholder_spans(s: &str) -> Vec<(usize, usize, usize)> {
    let bytes = s.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'#' {
            let start = i;
            let mut end = i + 1;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
            if end > start + 1 {
                // absurdly long digit runs are not placeholders
                if let Ok(j) = s[start + 1..end].parse::<usize>() {
                    spans.push((start, end, j));
                }
                i = end;
                continue;
            }
        }
        i += 1;
    }
    spans
}

pub fn placeholders(s: &str) -> Vec<usize> {
    placeholder_spans(s).into_iter().map(|(_, _, j)| j).collect()
}

pub fn has_placeholders(s: &str) -> bool {
    !placeholder_spans(s).is_empty()
}

/// Replace each `#j` with answer `j`.
pub fn substitute(sub_question: &str, context: &AnswerContext) -> Result<String, DecomposeError> {
    let mut out = String::with_capacity(sub_question.len());
    let mut last = 0;
    for (start, end, j) in placeholder_spans(sub_question) {
        let answer = context.get(j).ok_or(DecomposeError::MissingDependency(j))?;
        out.push_str(&sub_question[last..start]);
        out.push_str(answer);
        last = end;
    }
    out.push_str(&sub_question[last..]);
    Ok(out)
}

/// Check that step `i` (1-based) only refers to steps `1..i`.
pub fn validate_plan(sub_questions: &[String]) -> Result<(), String> {
    if sub_questions.is_empty() {
        return Err("plan has no sub-questions".into());
    }
    for (idx, q) in sub_questions.iter().enumerate() {
        let position = idx + 1;
        if q.trim().is_empty() {
            return Err(format!("sub-question {position} is empty"));
        }
        if let Some(j) = placeholders(q).into_iter().find(|&j| j == 0 || j >= position) {
            return Err(format!("sub-question {position} refers to #{j}"));
        }
    }
    Ok(())
}

/// Ask the model for a plan. Unusable output degrades to the single-step plan
/// and is recorded on the session; only fatal gateway errors propagate.
pub fn decompose(question: &str, session: &Session<'_>, cap: usize) -> Result<DecompositionPlan, LlmError> {
    let cap = cap.max(1);
    let req = ChatRequest::new(TemplateName::Decompose).var("question", question);
    let parsed = session.complete_structured::<Vec<String>>(&req, &Shape::array_of(Shape::String));
    let mut steps: Vec<String> = match parsed {
        Ok(s) => s.value.into_iter().map(|q| q.trim().to_string()).collect(),
        Err(e) if e.is_fatal() => return Err(e),
        Err(e) => {
            session.degrade("decompose", format!("{e}; answering the question as a single step"));
            return Ok(DecompositionPlan::single(question, cap));
        }
    };
    if let Err(reason) = validate_plan(&steps) {
        session.degrade("decompose", format!("invalid plan: {reason}; answering the question as a single step"));
        return Ok(DecompositionPlan::single(question, cap));
    }
    if steps.len() > cap {
        session.degrade("decompose", format!("plan has {} steps, truncated to {cap}", steps.len()));
        steps.truncate(cap);
    }
    Ok(DecompositionPlan {
        original_question: question.to_string(),
        sub_questions: steps,
        cap,
    })
}

/// Make `sub_question` self-contained using earlier answers.
///
/// With no placeholders and no prior answers the question is returned as is,
/// without a model call. A failed or unusable model rewrite falls back to
/// the literal substitution.
pub fn rewrite(sub_question: &str, context: &AnswerContext, session: &Session<'_>) -> Result<String, DecomposeError> {
    let literal = substitute(sub_question, context)?;
    if context.is_empty() && !has_placeholders(sub_question) {
        return Ok(literal);
    }
    let answers = context
        .entries()
        .iter()
        .map(|(i, a)| format!("#{i}: {a}"))
        .collect::<Vec<_>>()
        .join("\n");
    let req = ChatRequest::new(TemplateName::Rewrite)
        .var("question", literal.clone())
        .var("answers", answers);
    match session.complete(&req) {
        Ok(resp) => {
            let candidate = resp
                .text
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .unwrap_or("")
                .trim_matches('"')
                .trim()
                .to_string();
            if candidate.is_empty() || has_placeholders(&candidate) {
                session.degrade("rewrite", format!("unusable rewrite {:?}; using literal substitution", resp.text));
                Ok(literal)
            } else {
                Ok(candidate)
            }
        }
        Err(e) if e.is_fatal() => Err(e.into()),
        Err(e) => {
            session.degrade("rewrite", format!("{e}; using literal substitution"));
            Ok(literal)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::stub::{StubBackend, StubRule, StubScript};
    use crate::llm::{Gateway, TemplateRegistry};
    use serde_json::json;

    fn gateway(rules: Vec<StubRule>) -> Gateway {
        Gateway::new(TemplateRegistry::builtin(), Box::new(StubBackend::new(StubScript::new(rules))), 1)
    }

    #[test]
    fn placeholder_scan() {
        assert_eq!(placeholders("spouse of #1 and #12, not C# or #x"), vec![1, 12]);
        assert!(!has_placeholders("Who directed Inception?"));
    }

    #[test]
    fn decomposes_two_hop_question() {
        let gw = gateway(vec![StubRule::new(
            TemplateName::Decompose,
            [json!(["Who directed Inception?", "Who is the spouse of #1?"])],
        )]);
        let s = gw.session(None);
        let plan = decompose("Who is the spouse of the director of Inception?", &s, 6).unwrap();
        assert_eq!(plan.sub_questions, ["Who directed Inception?", "Who is the spouse of #1?"]);
        assert!(s.degradations().is_empty());
    }

    #[test]
    fn forward_reference_degrades() {
        let gw = gateway(vec![StubRule::new(
            TemplateName::Decompose,
            [json!(["Who is the spouse of #2?", "Who directed Inception?"])],
        )]);
        let s = gw.session(None);
        let plan = decompose("Q?", &s, 6).unwrap();
        assert_eq!(plan.sub_questions, ["Q?"]);
        assert_eq!(s.degradations().len(), 1);
    }

    #[test]
    fn self_reference_and_empty_plan_degrade() {
        assert!(validate_plan(&["a #1".to_string()]).is_err());
        assert!(validate_plan(&["a #0".to_string()]).is_err());
        assert!(validate_plan(&[]).is_err());
        assert!(validate_plan(&["a".to_string(), "b #1".to_string(), "c #2 #1".to_string()]).is_ok());
    }

    #[test]
    fn long_plans_are_truncated() {
        let steps: Vec<String> = (1..=8).map(|i| format!("step {i}?")).collect();
        let gw = gateway(vec![StubRule::new(TemplateName::Decompose, [json!(steps)])]);
        let s = gw.session(None);
        let plan = decompose("Q?", &s, 6).unwrap();
        assert_eq!(plan.len(), 6);
        assert_eq!(plan.sub_questions[5], "step 6?");
        assert_eq!(s.degradations().len(), 1);
    }

    #[test]
    fn unparseable_plan_degrades() {
        let gw = gateway(vec![StubRule::new(TemplateName::Decompose, [json!("1. a\n2. b"), json!("sorry")])]);
        let s = gw.session(None);
        let plan = decompose("Q?", &s, 6).unwrap();
        assert_eq!(plan, DecompositionPlan::single("Q?", 6));
        assert_eq!(s.calls_made(), 2);
    }

    #[test]
    fn rewrite_injects_answers() {
        let gw = gateway(vec![StubRule::new(
            TemplateName::Rewrite,
            [json!("Who is the spouse of Christopher Nolan?")],
        )
        .when("question", "Christopher Nolan")]);
        let s = gw.session(None);
        let mut ctx = AnswerContext::new();
        ctx.push(1, "Christopher Nolan");
        assert_eq!(
            rewrite("Who is the spouse of #1?", &ctx, &s).unwrap(),
            "Who is the spouse of Christopher Nolan?"
        );
    }

    #[test]
    fn rewrite_with_empty_context_is_identity() {
        let gw = gateway(vec![]);
        let s = gw.session(None);
        assert_eq!(rewrite("Who directed Inception?", &AnswerContext::new(), &s).unwrap(), "Who directed Inception?");
        assert_eq!(s.calls_made(), 0);
    }

    #[test]
    fn rewrite_missing_dependency() {
        let gw = gateway(vec![]);
        let s = gw.session(None);
        let mut ctx = AnswerContext::new();
        ctx.push(1, "X");
        assert!(matches!(
            rewrite("Who is the spouse of #2?", &ctx, &s),
            Err(DecomposeError::MissingDependency(2))
        ));
    }

    #[test]
    fn rewrite_failure_falls_back_to_literal() {
        let gw = gateway(vec![]);
        let s = gw.session(None);
        let mut ctx = AnswerContext::new();
        ctx.push(1, "Christopher Nolan");
        assert_eq!(
            rewrite("Who is the spouse of #1?", &ctx, &s).unwrap(),
            "Who is the spouse of Christopher Nolan?"
        );
        assert_eq!(s.degradations()[0].stage, "rewrite");
    }
}
