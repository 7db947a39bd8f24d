//! Placeholder substitution for the prompt text assets.
//!
//! `{name}` is replaced by the bound value, `{{` and `}}` produce literal
//! braces. Unknown or unbound placeholders are errors.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("placeholder `{0}` has no bound value")]
    Unbound(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("stray `}}` at byte {0}")]
    StrayClose(usize),
}

pub const DESCRIBE: &str = include_str!("../templates/describe.txt");
pub const FILTER: &str = include_str!("../templates/filter.txt");
pub const ENTAIL: &str = include_str!("../templates/entail.txt");
pub const EXPLAIN: &str = include_str!("../templates/explain.txt");
pub const JUDGE: &str = include_str!("../templates/judge.txt");
pub const CAPTION: &str = include_str!("../templates/caption.txt");
pub const RUBRIC: &str = include_str!("../templates/rubric.txt");

#[derive(Debug, Default, Clone)]
pub struct Bindings(BTreeMap<&'static str, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, key: &'static str, value: impl Into<String>) -> Self {
        self.0.insert(key, value.into());
        self
    }
}

pub fn render(template: &str, bindings: &Bindings) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let end = template[i + 1..]
                    .find('}')
                    .map(|off| i + 1 + off)
                    .ok_or(TemplateError::Unterminated(i))?;
                let name = &template[i + 1..end];
                let value = bindings
                    .0
                    .get(name)
                    .ok_or_else(|| TemplateError::Unbound(name.to_string()))?;
                out.push_str(value);
                i = end + 1;
            }
            b'}' => return Err(TemplateError::StrayClose(i)),
            _ => {
                let next = template[i..].find(['{', '}']).map(|off| i + off).unwrap_or(bytes.len());
                out.push_str(&template[i..next]);
                i = next;
            }
        }
    }
    Ok(out)
}
