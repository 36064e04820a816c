//! Line-oriented tagged-block grammar for structured LLM output.
//!
//! Replies carry zero or more blocks of the form
//!
//! ```text
//! KIND
//! field: value
//! other_field: value that may
//! continue on following lines
//! END
//! ```
//!
//! Parsing is tolerant by design: text outside blocks is ignored, a block
//! missing its END is dropped, and unknown field labels fold into the
//! preceding field value. Malformed blocks are recovered item-wise so one
//! bad proposal never discards a whole reply.

use std::collections::BTreeMap;

/// Allowed kinds and, per kind, the field labels that start a new field.
#[derive(Debug, Clone, Default)]
pub struct BlockSpec {
    kinds: BTreeMap<String, Vec<String>>,
}

impl BlockSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kind(mut self, kind: &str, fields: &[&str]) -> Self {
        self.kinds
            .insert(kind.to_string(), fields.iter().map(|f| f.to_string()).collect());
        self
    }

    fn fields_of(&self, kind: &str) -> Option<&[String]> {
        self.kinds.get(kind).map(Vec::as_slice)
    }
}

/// One parsed block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Block {
    /// First value for a field label, if present.
    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

const END_MARKER: &str = "END";

/// Extracts all well-formed blocks of the accepted kinds, in reply order.
pub fn parse_blocks(text: &str, spec: &BlockSpec) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut current: Option<Block> = None;

    for raw in text.lines() {
        let line = raw.trim_end();
        let trimmed = line.trim();

        match &mut current {
            None => {
                if spec.fields_of(trimmed).is_some() {
                    current = Some(Block {
                        kind: trimmed.to_string(),
                        fields: Vec::new(),
                    });
                }
            }
            Some(block) => {
                if trimmed == END_MARKER {
                    blocks.push(current.take().expect("block present"));
                    continue;
                }
                // A new kind opener while inside a block means the previous
                // block never closed; drop it and start fresh.
                if spec.fields_of(trimmed).is_some() {
                    *block = Block {
                        kind: trimmed.to_string(),
                        fields: Vec::new(),
                    };
                    continue;
                }
                let allowed = spec.fields_of(&block.kind).expect("kind accepted");
                if let Some((name, value)) = split_field(trimmed, allowed) {
                    block.fields.push((name.to_string(), value.to_string()));
                } else if let Some((_, last)) = block.fields.last_mut() {
                    // Continuation of the previous field value.
                    if !trimmed.is_empty() {
                        if !last.is_empty() {
                            last.push('\n');
                        }
                        last.push_str(trimmed);
                    }
                }
                // Text before the first field of a block is ignored.
            }
        }
    }
    // An unterminated trailing block is malformed and dropped.
    blocks
}

fn split_field<'a>(line: &'a str, allowed: &[String]) -> Option<(&'a str, &'a str)> {
    let (name, value) = line.split_once(':')?;
    let name = name.trim();
    if allowed.iter().any(|f| f == name) {
        Some((name, value.trim()))
    } else {
        None
    }
}

/// Renders a block in the same grammar `parse_blocks` accepts.
pub fn render_block(kind: &str, fields: &[(&str, &str)]) -> String {
    let mut out = String::new();
    out.push_str(kind);
    out.push('\n');
    for (name, value) in fields {
        out.push_str(name);
        out.push_str(": ");
        out.push_str(value);
        out.push('\n');
    }
    out.push_str(END_MARKER);
    out.push('\n');
    out
}

/// Finds the first `LABEL: value` line (label matched case-insensitively)
/// anywhere in the reply and returns the trimmed value.
pub fn find_labeled(text: &str, label: &str) -> Option<String> {
    for line in text.lines() {
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case(label) {
                return Some(value.trim().to_string());
            }
        }
    }
    None
}

/// Parses a strict yes/no field such as `SUFFICIENT: YES`.
pub fn find_yes_no(text: &str, label: &str) -> Option<bool> {
    match find_labeled(text, label)?.to_ascii_uppercase().as_str() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    }
}

/// Parses a strict true/false field such as `VERDICT: TRUE`.
pub fn find_true_false(text: &str, label: &str) -> Option<bool> {
    match find_labeled(text, label)?.to_ascii_uppercase().as_str() {
        "TRUE" => Some(true),
        "FALSE" => Some(false),
        _ => None,
    }
}

/// Splits a pipe-separated list field, dropping empty segments.
pub fn split_list(value: &str) -> Vec<String> {
    value
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}
