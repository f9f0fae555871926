//! Prompt grids: every template rendered with every concept value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";

/// Templates crossed with concept values, rendered value-major: all templates
/// for `values[0]`, then all templates for `values[1]`, and so on. Text
/// features for the grid must be supplied in this row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
    values: Vec<String>,
    rendered: Vec<String>,
}

pub fn render_prompts<S: AsRef<str>, V: AsRef<str>>(
    templates: &[S],
    values: &[V],
) -> Result<PromptSet> {
    if templates.is_empty() {
        return Err(Error::Prompt("no templates".into()));
    }
    for t in templates {
        let n = t.as_ref().matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Prompt(format!(
                "template {:?} has {n} placeholders, expected exactly one \"{PLACEHOLDER}\"",
                t.as_ref()
            )));
        }
    }
    if values.len() < 2 {
        return Err(Error::Prompt(format!(
            "need at least two concept values, got {}",
            values.len()
        )));
    }
    let rendered = values
        .iter()
        .flat_map(|v| {
            templates
                .iter()
                .map(move |t| t.as_ref().replacen(PLACEHOLDER, v.as_ref(), 1))
        })
        .collect();
    Ok(PromptSet {
        templates: templates.iter().map(|t| t.as_ref().to_owned()).collect(),
        values: values.iter().map(|v| v.as_ref().to_owned()).collect(),
        rendered,
    })
}

impl PromptSet {
    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn rendered(&self) -> &[String] {
        &self.rendered
    }

    pub fn len(&self) -> usize {
        self.rendered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rendered.is_empty()
    }

    /// 64-bit FNV-1a over the rendered prompts joined by `'\n'`, as 16 hex chars.
    pub fn digest(&self) -> String {
        prompt_digest(&self.rendered)
    }
}

pub fn prompt_digest<S: AsRef<str>>(rendered: &[S]) -> String {
    let mut h = Fnv1a::new();
    for (i, p) in rendered.iter().enumerate() {
        if i > 0 {
            h.write(b"\n");
        }
        h.write(p.as_ref().as_bytes());
    }
    h.hex()
}

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub(crate) fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub(crate) fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

/// `{"templates": [...], "values": [...]}`
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub templates: Vec<String>,
    pub values: Vec<String>,
}

impl PromptFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn render(&self) -> Result<PromptSet> {
        render_prompts(&self.templates, &self.values)
    }
}

impl From<&PromptSet> for PromptFile {
    fn from(p: &PromptSet) -> Self {
        PromptFile {
            templates: p.templates.clone(),
            values: p.values.clone(),
        }
    }
}
