//! Four-tag structured completions and the binary format reward.
//!
//! A completion must contain `<observe>`, `<scene>`, `<think>` and `<answer>`
//! exactly once each, properly closed and in that order. The `<scene>`
//! payload must be a valid scene JSON document. Text outside the tags is
//! ignored.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scene_graph::{parse_scene_json, SceneGraph, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Observe,
    Scene,
    Think,
    Answer,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Observe, Tag::Scene, Tag::Think, Tag::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Observe => "observe",
            Tag::Scene => "scene",
            Tag::Think => "think",
            Tag::Answer => "answer",
        }
    }

    fn open(self) -> String {
        format!("<{}>", self.name())
    }

    fn close(self) -> String {
        format!("</{}>", self.name())
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "tag")]
pub enum TagViolation {
    MissingTag(Tag),
    DuplicateTag(Tag),
    OutOfOrder(Tag),
    UnclosedTag(Tag),
    StrayCloseTag(Tag),
    NestedTag { inner: Tag, outer: Tag },
}

impl fmt::Display for TagViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagViolation::MissingTag(t) => write!(f, "missing <{t}> section"),
            TagViolation::DuplicateTag(t) => write!(f, "<{t}> appears more than once"),
            TagViolation::OutOfOrder(t) => write!(f, "<{t}> is out of order"),
            TagViolation::UnclosedTag(t) => write!(f, "<{t}> is never closed"),
            TagViolation::StrayCloseTag(t) => write!(f, "</{t}> without a matching opener"),
            TagViolation::NestedTag { inner, outer } => write!(f, "<{inner}> is nested inside <{outer}>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSpan {
    pub tag: Tag,
    /// Byte offset of the opening `<`.
    pub start: usize,
    /// Byte offset just past the closing `>`.
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuredResponse {
    pub observe: String,
    pub scene_raw: String,
    #[serde(skip)]
    pub scene: Option<SceneGraph>,
    pub scene_violations: Vec<Violation>,
    pub think: String,
    pub answer: String,
    pub tag_spans: Vec<TagSpan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Accept tags in any order and tolerate nesting. Analysis only; the
    /// reward path is always strict.
    pub lenient_order: bool,
}

struct Located {
    opens: Vec<usize>,
    closes: Vec<usize>,
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).collect()
}

/// Parses with the strict contract.
pub fn parse_response(raw: &str) -> Result<StructuredResponse, Vec<TagViolation>> {
    parse_response_with(raw, ParseOptions::default())
}

pub fn parse_response_with(raw: &str, opts: ParseOptions) -> Result<StructuredResponse, Vec<TagViolation>> {
    let mut violations = Vec::new();
    let mut spans: Vec<TagSpan> = Vec::new();

    for tag in Tag::ALL {
        let (open, close) = (tag.open(), tag.close());
        let loc = Located { opens: find_all(raw, &open), closes: find_all(raw, &close) };
        let Some(&start) = loc.opens.first() else {
            violations.push(TagViolation::MissingTag(tag));
            if !loc.closes.is_empty() {
                violations.push(TagViolation::StrayCloseTag(tag));
            }
            continue;
        };
        if loc.opens.len() > 1 {
            violations.push(TagViolation::DuplicateTag(tag));
        }
        // First close after the first open.
        match loc.closes.iter().find(|&&c| c >= start + open.len()) {
            Some(&c) => {
                if loc.closes.iter().any(|&x| x < start) || loc.closes.len() > loc.opens.len() {
                    violations.push(TagViolation::StrayCloseTag(tag));
                }
                spans.push(TagSpan { tag, start, end: c + close.len() });
            }
            None => violations.push(TagViolation::UnclosedTag(tag)),
        }
    }

    if !opts.lenient_order {
        violations.extend(order_violations(&spans));
        violations.extend(nesting_violations(&spans));
    }

    if !violations.is_empty() {
        return Err(violations);
    }

    spans.sort_by_key(|s| s.start);
    let payload = |tag: Tag| -> String {
        let s = spans.iter().find(|s| s.tag == tag).expect("all tags located");
        raw[s.start + tag.open().len()..s.end - tag.close().len()].to_string()
    };
    let scene_raw = payload(Tag::Scene);
    let (scene, scene_violations) = match parse_scene_json(&scene_raw) {
        Ok(g) => (Some(g), Vec::new()),
        Err(v) => (None, v),
    };
    Ok(StructuredResponse {
        observe: payload(Tag::Observe),
        scene_raw,
        scene,
        scene_violations,
        think: payload(Tag::Think),
        answer: payload(Tag::Answer),
        tag_spans: spans,
    })
}

/// A tag is out of order when a tag that must follow it starts before it.
fn order_violations(spans: &[TagSpan]) -> Vec<TagViolation> {
    spans
        .iter()
        .filter(|s| spans.iter().any(|o| o.tag > s.tag && o.start < s.start))
        .map(|s| TagViolation::OutOfOrder(s.tag))
        .collect()
}

fn nesting_violations(spans: &[TagSpan]) -> Vec<TagViolation> {
    let mut out = Vec::new();
    for inner in spans {
        for outer in spans {
            if inner.tag != outer.tag && inner.start > outer.start && inner.start < outer.end {
                out.push(TagViolation::NestedTag { inner: inner.tag, outer: outer.tag });
            }
        }
    }
    out
}

/// One reason a completion fails the format check.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FormatViolation {
    Tag(TagViolation),
    Scene(Violation),
}

impl FormatViolation {
    pub fn code(&self) -> &'static str {
        match self {
            FormatViolation::Tag(t) => match t {
                TagViolation::MissingTag(_) => "MissingTag",
                TagViolation::DuplicateTag(_) => "DuplicateTag",
                TagViolation::OutOfOrder(_) => "OutOfOrder",
                TagViolation::UnclosedTag(_) => "UnclosedTag",
                TagViolation::StrayCloseTag(_) => "StrayCloseTag",
                TagViolation::NestedTag { .. } => "NestedTag",
            },
            FormatViolation::Scene(v) => v.code(),
        }
    }

    pub fn detail(&self) -> String {
        match self {
            FormatViolation::Tag(t) => t.to_string(),
            FormatViolation::Scene(v) => v.to_string(),
        }
    }
}

impl Serialize for FormatViolation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("FormatViolation", 2)?;
        st.serialize_field("code", self.code())?;
        st.serialize_field("detail", &self.detail())?;
        st.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormatVerdict {
    pub reward: u8,
    pub violations: Vec<FormatViolation>,
}

impl FormatVerdict {
    pub fn passed(&self) -> bool {
        self.reward == 1
    }
}

/// 1 when the tag structure is intact and the scene payload is a valid graph.
pub fn format_reward(raw: &str) -> FormatVerdict {
    let violations: Vec<FormatViolation> = match parse_response(raw) {
        Ok(resp) => resp.scene_violations.into_iter().map(FormatViolation::Scene).collect(),
        Err(tag_violations) => {
            let mut v: Vec<FormatViolation> = tag_violations.into_iter().map(FormatViolation::Tag).collect();
            // Still report scene problems when the scene section itself is extractable.
            if let Ok(lenient) = parse_response_with(raw, ParseOptions { lenient_order: true }) {
                v.extend(lenient.scene_violations.into_iter().map(FormatViolation::Scene));
            }
            v
        }
    };
    FormatVerdict { reward: u8::from(violations.is_empty()), violations }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    /// Trimmed exact string equality.
    #[default]
    Strict,
    /// Compare only the option letter A-D.
    Letter,
}

impl std::str::FromStr for AnswerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strict" => Ok(AnswerMode::Strict),
            "letter" => Ok(AnswerMode::Letter),
            other => Err(format!("unknown accuracy mode `{other}` (expected strict or letter)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnswerError {
    #[error("answer section is empty")]
    NoAnswerContent,
    #[error("no option letter A-D found in answer {0:?}")]
    NoOptionLetter(String),
}

/// Option letter from `(C) ...`, `C) ...`, `C. ...` or a bare `C`.
pub fn option_letter(text: &str) -> Result<char, AnswerError> {
    let t = text.trim();
    if t.is_empty() {
        return Err(AnswerError::NoAnswerContent);
    }
    let bytes = t.as_bytes();
    let is_key = |b: u8| matches!(b, b'A'..=b'D');
    if bytes.len() >= 3 && bytes[0] == b'(' && is_key(bytes[1]) && bytes[2] == b')' {
        return Ok(bytes[1] as char);
    }
    if is_key(bytes[0]) {
        let rest = &t[1..];
        let rest_ok = rest.is_empty()
            || ((rest.starts_with(')') || rest.starts_with('.'))
                && rest[1..].chars().next().is_none_or(char::is_whitespace));
        if rest_ok {
            return Ok(bytes[0] as char);
        }
    }
    Err(AnswerError::NoOptionLetter(t.to_string()))
}

/// Normalized answer text under `mode`.
pub fn extract_answer_text(answer: &str, mode: AnswerMode) -> Result<String, AnswerError> {
    let t = answer.trim();
    if t.is_empty() {
        return Err(AnswerError::NoAnswerContent);
    }
    match mode {
        AnswerMode::Strict => Ok(t.to_string()),
        AnswerMode::Letter => option_letter(t).map(String::from),
    }
}

pub fn extract_answer(resp: &StructuredResponse, mode: AnswerMode) -> Result<String, AnswerError> {
    extract_answer_text(&resp.answer, mode)
}
