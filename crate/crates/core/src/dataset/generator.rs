//! Question generation behind a pluggable client.
//!
//! [`TemplateGenerator`] derives questions and answers from box geometry, so
//! every reference answer is exact. [`FixtureGenerator`] replays a JSONL file
//! and [`ProcessGenerator`] talks to an external program.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::verifier::run_json_process;
use super::{AnswerKey, Category, CorpusRecord, Options};
use crate::scene_graph::ObjectNode;
use crate::text::plural;

/// A generated item before subgraph extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQa {
    pub question: String,
    pub options: Options,
    pub answer_key: AnswerKey,
    pub category: Category,
    pub rating: u8,
    pub difficulty: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeneratorError {
    #[error("generator unavailable: {0}")]
    Unavailable(String),
    #[error("generator protocol error: {0}")]
    Protocol(String),
}

pub trait GeneratorClient {
    fn generate(&mut self, record: &CorpusRecord) -> Result<Vec<GeneratedQa>, GeneratorError>;
}

const ABSENT_LABELS: &[&str] = &["zebra", "umbrella", "guitar", "kite", "pizza", "surfboard", "elephant", "violin"];

/// Seeded geometric question templates, `per_image` questions per record.
#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    pub per_image: usize,
    rng: ChaCha8Rng,
}

impl TemplateGenerator {
    pub fn new(per_image: usize, seed: u64) -> Self {
        Self { per_image, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

fn opts(a: impl Into<String>, b: impl Into<String>, c: impl Into<String>, d: impl Into<String>) -> Options {
    Options([a.into(), b.into(), c.into(), d.into()])
}

fn dist(a: &ObjectNode, b: &ObjectNode) -> f64 {
    let ((ax, ay), (bx, by)) = (a.bbox.center(), b.bbox.center());
    (ax - bx).hypot(ay - by)
}

pub(crate) struct Draft {
    pub(crate) question: String,
    pub(crate) options: Options,
    pub(crate) answer: usize,
    pub(crate) category: Category,
}

pub(crate) fn relation_q(a: &ObjectNode, b: &ObjectNode) -> Option<Draft> {
    let ((ax, ay), (bx, by)) = (a.bbox.center(), b.bbox.center());
    let (dx, dy) = (ax - bx, ay - by);
    if dx.abs().max(dy.abs()) < 1.0 || (dx.abs() - dy.abs()).abs() < 1.0 {
        return None;
    }
    let answer = if dx.abs() > dy.abs() {
        if dx < 0.0 { 0 } else { 1 }
    } else if dy < 0.0 {
        2
    } else {
        3
    };
    let (la, lb) = (&a.label, &b.label);
    Some(Draft {
        question: format!("Is the {la} to the left of, to the right of, above, or below the {lb}?"),
        options: opts(
            format!("The {la} is left of the {lb}"),
            format!("The {la} is right of the {lb}"),
            format!("The {la} is above the {lb}"),
            format!("The {la} is below the {lb}"),
        ),
        answer,
        category: Category::Relation,
    })
}

pub(crate) fn size_q(a: &ObjectNode, b: &ObjectNode) -> Option<Draft> {
    let (sa, sb) = (a.bbox.area(), b.bbox.area());
    let answer = if (sa - sb).abs() <= 0.1 * sa.max(sb) {
        2
    } else if sa > sb {
        0
    } else {
        1
    };
    let (la, lb) = (&a.label, &b.label);
    Some(Draft {
        question: format!("Which appears larger, the {la} or the {lb}?"),
        options: opts(format!("The {la}"), format!("The {lb}"), "They appear about the same size", "Neither can be compared"),
        answer,
        category: Category::Size,
    })
}

fn location_q(a: &ObjectNode, width: u32, height: u32) -> Option<Draft> {
    let (cx, cy) = a.bbox.center();
    let (fx, fy) = (cx / width as f64, cy / height as f64);
    let answer = if fx < 1.0 / 3.0 {
        0
    } else if fx > 2.0 / 3.0 {
        1
    } else if fy < 0.5 {
        2
    } else {
        3
    };
    Some(Draft {
        question: format!("Where in the image is the {} located?", a.label),
        options: opts("On the left side", "On the right side", "In the upper middle", "In the lower middle"),
        answer,
        category: Category::Location,
    })
}

fn count_q(label: &str, count: usize, shift: usize) -> Draft {
    let start = count - shift.min(count);
    Draft {
        question: format!("How many {} are there?", plural(label)),
        options: opts((start).to_string(), (start + 1).to_string(), (start + 2).to_string(), (start + 3).to_string()),
        answer: count - start,
        category: Category::Count,
    }
}

pub(crate) fn distance_q(a: &ObjectNode, b: &ObjectNode, c: &ObjectNode) -> Option<Draft> {
    let (db, dc) = (dist(a, b), dist(a, c));
    let answer = if (db - dc).abs() <= 0.01 * db.max(dc) {
        2
    } else if db < dc {
        0
    } else {
        1
    };
    Some(Draft {
        question: format!("Which is closer to the {}, the {} or the {}?", a.label, b.label, c.label),
        options: opts(format!("The {}", b.label), format!("The {}", c.label), "They are equally close", "Neither is near it"),
        answer,
        category: Category::Distance,
    })
}

fn existence_q(label: &str, present: bool) -> Draft {
    Draft {
        question: format!("Is there a {label} in the scene?"),
        options: opts("Yes", "No", "Only partially", "Cannot be determined"),
        answer: if present { 0 } else { 1 },
        category: Category::Existence,
    }
}

impl TemplateGenerator {
    fn drafts(&mut self, record: &CorpusRecord) -> Vec<Draft> {
        let objects = &record.scene.objects;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for o in objects {
            *counts.entry(o.label.as_str()).or_default() += 1;
        }
        // Only objects with a unique label can be referred to unambiguously.
        let unique: Vec<&ObjectNode> = objects.iter().filter(|o| counts[o.label.as_str()] == 1).collect();

        let mut drafts = Vec::new();
        for (i, a) in unique.iter().enumerate() {
            drafts.extend(location_q(a, record.width, record.height));
            for (j, b) in unique.iter().enumerate() {
                if i == j {
                    continue;
                }
                if i < j {
                    drafts.extend(relation_q(a, b));
                    drafts.extend(size_q(a, b));
                }
                for c in unique.iter().skip(j + 1) {
                    if !std::ptr::eq(*c, *a) {
                        drafts.extend(distance_q(a, b, c));
                    }
                }
            }
        }
        for (&label, &n) in &counts {
            let shift = self.rng.random_range(0..=3);
            drafts.push(count_q(label, n, shift));
            drafts.push(existence_q(label, true));
        }
        let absent: Vec<&&str> = ABSENT_LABELS.iter().filter(|l| !counts.contains_key(**l)).collect();
        if let Some(l) = absent.choose(&mut self.rng) {
            drafts.push(existence_q(l, false));
        }
        drafts
    }

    fn finish(&mut self, d: Draft) -> GeneratedQa {
        let (lo, hi, difficulty) = match d.category {
            Category::Distance => (6, 10, "hard"),
            Category::Relation | Category::Size => (4, 9, "medium"),
            _ => (1, 7, "easy"),
        };
        GeneratedQa {
            question: d.question,
            options: d.options,
            answer_key: AnswerKey::from_index(d.answer).expect("answer index < 4"),
            category: d.category,
            rating: self.rng.random_range(lo..=hi),
            difficulty: difficulty.to_string(),
        }
    }
}

impl GeneratorClient for TemplateGenerator {
    fn generate(&mut self, record: &CorpusRecord) -> Result<Vec<GeneratedQa>, GeneratorError> {
        let mut drafts = self.drafts(record);
        drafts.shuffle(&mut self.rng);
        drafts.truncate(self.per_image);
        Ok(drafts.into_iter().map(|d| self.finish(d)).collect())
    }
}

#[derive(Deserialize)]
struct FixtureLine {
    image_id: String,
    #[serde(flatten)]
    qa: GeneratedQa,
}

/// Serves pre-generated items keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct FixtureGenerator {
    items: HashMap<String, Vec<GeneratedQa>>,
}

impl FixtureGenerator {
    pub fn from_path(path: &Path) -> Result<Self, GeneratorError> {
        let file = File::open(path).map_err(|e| GeneratorError::Unavailable(format!("{}: {e}", path.display())))?;
        let mut items: HashMap<String, Vec<GeneratedQa>> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GeneratorError::Unavailable(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: FixtureLine =
                serde_json::from_str(&line).map_err(|e| GeneratorError::Protocol(format!("line {}: {e}", i + 1)))?;
            items.entry(l.image_id).or_default().push(l.qa);
        }
        Ok(Self { items })
    }
}

impl GeneratorClient for FixtureGenerator {
    fn generate(&mut self, record: &CorpusRecord) -> Result<Vec<GeneratedQa>, GeneratorError> {
        Ok(self.items.get(&record.image_id).cloned().unwrap_or_default())
    }
}

/// Sends the corpus record as JSON on stdin, expects a JSON array of items.
#[derive(Debug, Clone)]
pub struct ProcessGenerator {
    pub program: String,
    pub args: Vec<String>,
}

impl ProcessGenerator {
    pub fn new(command: &[String]) -> Result<Self, GeneratorError> {
        let (program, args) = command.split_first().ok_or_else(|| GeneratorError::Unavailable("empty command".into()))?;
        Ok(Self { program: program.clone(), args: args.to_vec() })
    }
}

impl GeneratorClient for ProcessGenerator {
    fn generate(&mut self, record: &CorpusRecord) -> Result<Vec<GeneratedQa>, GeneratorError> {
        let req = serde_json::to_vec(record).map_err(|e| GeneratorError::Protocol(e.to_string()))?;
        let raw = run_json_process(&self.program, &self.args, &req).map_err(GeneratorError::Unavailable)?;
        serde_json::from_slice(&raw).map_err(|e| GeneratorError::Protocol(e.to_string()))
    }
}
