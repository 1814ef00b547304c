//! Pulling JSON out of model completions and checking its shape.

use serde_json::Value;

/// Expected shape of a structured completion.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Any,
    String,
    Bool,
    Integer,
    Array(Box<Shape>),
    Object(Vec<Field>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: &'static str,
    pub shape: Shape,
    pub required: bool,
}

impl Field {
    pub fn required(name: &'static str, shape: Shape) -> Self {
        Field { name, shape, required: true }
    }

    pub fn optional(name: &'static str, shape: Shape) -> Self {
        Field { name, shape, required: false }
    }
}

impl Shape {
    pub fn array_of(inner: Shape) -> Self {
        Shape::Array(Box::new(inner))
    }

    /// Check `value` against this shape, naming the first offending path.
    pub fn check(&self, value: &Value) -> Result<(), String> {
        self.check_at(value, "$")
    }

    fn check_at(&self, value: &Value, path: &str) -> Result<(), String> {
        let ok = match (self, value) {
            (Shape::Any, _) => true,
            (Shape::String, Value::String(_)) => true,
            (Shape::Bool, Value::Bool(_)) => true,
            (Shape::Integer, Value::Number(n)) => n.is_i64() || n.is_u64(),
            (Shape::Array(inner), Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    inner.check_at(item, &format!("{path}[{i}]"))?;
                }
                true
            }
            (Shape::Object(fields), Value::Object(map)) => {
                for f in fields {
                    match map.get(f.name) {
                        Some(v) => f.shape.check_at(v, &format!("{path}.{}", f.name))?,
                        None if f.required => return Err(format!("{path}.{} is missing", f.name)),
                        None => {}
                    }
                }
                true
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{path} does not match {self:?}"))
        }
    }
}

/// Find the JSON value in a completion: the whole text, a fenced block, or
/// the outermost bracketed span.
pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    if let Some(start) = trimmed.find("```") {
        let body = &trimmed[start + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        if let Some(end) = body.find("```") {
            if let Ok(v) = serde_json::from_str(body[..end].trim()) {
                return Some(v);
            }
        }
    }
    for (open, close) in [('{', '}'), ('[', ']')] {
        if let (Some(s), Some(e)) = (trimmed.find(open), trimmed.rfind(close)) {
            if s < e {
                if let Ok(v) = serde_json::from_str(&trimmed[s..=e]) {
                    return Some(v);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn answer_shape() -> Shape {
        Shape::Object(vec![
            Field::required("answerable", Shape::Bool),
            Field::required("answer", Shape::String),
            Field::optional("used_triple_ids", Shape::array_of(Shape::Integer)),
        ])
    }

    #[test]
    fn finds_json_in_prose_and_fences() {
        assert_eq!(extract_json(" [1, 2] "), Some(json!([1, 2])));
        assert_eq!(extract_json("```json\n{\"a\": 1}\n```"), Some(json!({"a": 1})));
        assert_eq!(extract_json("Sure! {\"a\": [1]} hope it helps"), Some(json!({"a": [1]})));
        assert_eq!(extract_json("Here: [[\"a\",\"b\",\"c\"]]."), Some(json!([["a", "b", "c"]])));
        assert_eq!(extract_json("no json here"), None);
    }

    #[test]
    fn checks_object_shape() {
        let s = answer_shape();
        assert!(s.check(&json!({"answerable": true, "answer": "x", "used_triple_ids": [3]})).is_ok());
        assert!(s.check(&json!({"answerable": false, "answer": ""})).is_ok());
        assert!(s.check(&json!({"answer": "x"})).unwrap_err().contains("answerable"));
        assert!(s.check(&json!({"answerable": "yes", "answer": "x"})).is_err());
        assert!(s.check(&json!({"answerable": true, "answer": "x", "used_triple_ids": [1.5]})).is_err());
    }

    #[test]
    fn checks_arrays() {
        let s = Shape::array_of(Shape::String);
        assert!(s.check(&json!(["a", "b"])).is_ok());
        assert!(s.check(&json!(["a", 1])).unwrap_err().contains("$[1]"));
        assert!(s.check(&json!({"a": 1})).is_err());
    }
}
