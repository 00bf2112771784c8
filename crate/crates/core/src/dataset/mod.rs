//! Scene-graph grounded multiple-choice VQA dataset construction.
//!
//! Stages: corpus ingestion, question generation (pluggable), question-aligned
//! subgraph extraction, two-round consistency filtering against an external
//! verifier, rating-based selection, answer-key balancing and a seeded
//! train/validation split.

pub mod generator;
pub mod pipeline;
pub mod verifier;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::scene_graph::{validate_graph, SceneGraph, Violation};
use crate::text::{content_lemmas, lemma_tokens, question_vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerKey {
    A,
    B,
    C,
    D,
}

impl AnswerKey {
    pub const ALL: [AnswerKey; 4] = [AnswerKey::A, AnswerKey::B, AnswerKey::C, AnswerKey::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'A' => Some(AnswerKey::A),
            'B' => Some(AnswerKey::B),
            'C' => Some(AnswerKey::C),
            'D' => Some(AnswerKey::D),
            _ => None,
        }
    }
}

impl fmt::Display for AnswerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Relation,
    Size,
    Orientation,
    Distance,
    Depth,
    Reach,
    Location,
    Count,
    Existence,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Relation,
        Category::Size,
        Category::Orientation,
        Category::Distance,
        Category::Depth,
        Category::Reach,
        Category::Location,
        Category::Count,
        Category::Existence,
    ];
}

/// Four answer options serialized as `{"A": .., "B": .., "C": .., "D": ..}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Options(pub [String; 4]);

impl Options {
    pub fn get(&self, key: AnswerKey) -> &str {
        &self.0[key.index()]
    }

    pub fn is_distinct(&self) -> bool {
        let mut v: Vec<&String> = self.0.iter().collect();
        v.sort();
        v.dedup();
        v.len() == 4
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct OptionsWire {
    A: String,
    B: String,
    C: String,
    D: String,
}

impl Serialize for Options {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let [a, b, c, d] = self.0.clone();
        OptionsWire { A: a, B: b, C: c, D: d }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Options {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = OptionsWire::deserialize(d)?;
        Ok(Options([w.A, w.B, w.C, w.D]))
    }
}

/// One multiple-choice item with its question-aligned subgraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub question: String,
    pub options: Options,
    pub answer_key: AnswerKey,
    pub category: Category,
    pub rating: u8,
    pub difficulty: String,
    pub subgraph: SceneGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SampleError {
    #[error("options are not distinct")]
    DuplicateOptions,
    #[error("rating {0} outside 1..=10")]
    RatingOutOfRange(u8),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("subgraph invalid: {0}")]
    InvalidSubgraph(String),
}

impl QASample {
    pub fn image_size(&self) -> Option<(u32, u32)> {
        self.width.zip(self.height)
    }

    /// `"(K) option text"`, the strict-mode reference answer.
    pub fn answer_text(&self) -> String {
        format!("({}) {}", self.answer_key, self.options.get(self.answer_key))
    }

    pub fn correct_option(&self) -> &str {
        self.options.get(self.answer_key)
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if self.question.trim().is_empty() {
            return Err(SampleError::EmptyQuestion);
        }
        if !self.options.is_distinct() {
            return Err(SampleError::DuplicateOptions);
        }
        if !(1..=10).contains(&self.rating) {
            return Err(SampleError::RatingOutOfRange(self.rating));
        }
        let v = validate_graph(&self.subgraph, None);
        if let Some(first) = v.first() {
            return Err(SampleError::InvalidSubgraph(first.to_string()));
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> crate::reward::GroundTruth {
        crate::reward::GroundTruth::new(self.answer_text(), self.subgraph.clone())
    }
}

/// One image of the source corpus with its full scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub scene: SceneGraph,
}

#[derive(Serialize, Deserialize)]
struct CorpusWire {
    image_id: String,
    width: u32,
    height: u32,
    scene: serde_json::Value,
}

impl Serialize for CorpusRecord {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CorpusWire {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            scene: serde_json::to_value(&self.scene).map_err(serde::ser::Error::custom)?,
        }
        .serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub image_id: Option<String>,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<CorpusRecord>,
    pub errors: Vec<RecordError>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable { path: String, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    FileUnwritable { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("sample has no image size")]
    MissingImageSize,
}

/// Parses one corpus line; the scene is validated against the image bounds.
pub fn parse_corpus_line(line: &str) -> Result<CorpusRecord, (Option<String>, Vec<String>)> {
    let wire: CorpusWire = serde_json::from_str(line).map_err(|e| {
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("image_id").and_then(|x| x.as_str()).map(String::from));
        (id, vec![e.to_string()])
    })?;
    let id = Some(wire.image_id.clone());
    let scene = crate::scene_graph::scene_from_value(&wire.scene)
        .map_err(|vs| (id.clone(), vs.iter().map(Violation::to_string).collect()))?
        .with_image_size(wire.width, wire.height);
    let violations = validate_graph(&scene, None);
    if !violations.is_empty() {
        return Err((id, violations.iter().map(Violation::to_string).collect()));
    }
    Ok(CorpusRecord { image_id: wire.image_id, width: wire.width, height: wire.height, scene })
}

/// Reads a corpus JSONL file. Malformed records go to the error report.
pub fn ingest_corpus(path: &Path) -> Result<IngestReport, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::FileUnreadable { path: path.display().to_string(), source })?;
    let mut report = IngestReport::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::FileUnreadable { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_corpus_line(&line) {
            Ok(r) => report.records.push(r),
            Err((image_id, problems)) => report.errors.push(RecordError { line: idx + 1, image_id, problems }),
        }
    }
    Ok(report)
}

/// Keeps objects whose label lemmas meet the question vocabulary, and
/// relations between kept objects whose predicate content lemmas all occur
/// in it.
pub fn extract_subgraph(scene: &SceneGraph, question: &str) -> SceneGraph {
    let vocab = question_vocabulary(question);
    let objects: Vec<_> = scene
        .objects
        .iter()
        .filter(|o| lemma_tokens(&o.label).iter().any(|t| vocab.contains(t)))
        .cloned()
        .collect();
    let kept: std::collections::HashSet<&str> = objects.iter().map(|o| o.id.as_str()).collect();
    let relations = scene
        .relations
        .iter()
        .filter(|r| kept.contains(r.subject_id.as_str()) && kept.contains(r.object_id.as_str()))
        .filter(|r| {
            let lemmas = content_lemmas(&r.predicate);
            !lemmas.is_empty() && lemmas.iter().all(|t| vocab.contains(t))
        })
        .cloned()
        .collect();
    SceneGraph { objects, relations, image_size: scene.image_size }
}

fn difficulty_rank(d: &str) -> u8 {
    match d.trim().to_ascii_lowercase().as_str() {
        "hard" => 3,
        "medium" => 2,
        "easy" => 1,
        _ => 0,
    }
}

/// Top `k` by rating, then harder first, then input order.
pub fn select_top(samples: Vec<QASample>, k: usize) -> Vec<QASample> {
    let mut indexed: Vec<(usize, QASample)> = samples.into_iter().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| {
        b.rating
            .cmp(&a.rating)
            .then_with(|| difficulty_rank(&b.difficulty).cmp(&difficulty_rank(&a.difficulty)))
            .then_with(|| ia.cmp(ib))
    });
    indexed.into_iter().take(k).map(|(_, s)| s).collect()
}

pub fn key_histogram(samples: &[QASample]) -> BTreeMap<AnswerKey, usize> {
    let mut h: BTreeMap<AnswerKey, usize> = AnswerKey::ALL.iter().map(|&k| (k, 0)).collect();
    for s in samples {
        *h.entry(s.answer_key).or_default() += 1;
    }
    h
}

/// Moves the correct option of as few samples as possible so that answer
/// keys are spread evenly over A-D (counts differ by at most one). Which
/// surplus samples move is drawn from a seeded shuffle.
pub fn balance_answer_keys(mut samples: Vec<QASample>, seed: u64) -> Vec<QASample> {
    let n = samples.len();
    let counts = key_histogram(&samples);
    let (base, extra) = (n / 4, n % 4);
    // Extra slots go to the currently most frequent keys.
    let mut by_count: Vec<AnswerKey> = AnswerKey::ALL.to_vec();
    by_count.sort_by(|a, b| counts[b].cmp(&counts[a]).then(a.cmp(b)));
    let mut target: BTreeMap<AnswerKey, usize> = AnswerKey::ALL.iter().map(|&k| (k, base)).collect();
    for k in by_count.iter().take(extra) {
        *target.get_mut(k).unwrap() += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut movers: Vec<usize> = Vec::new();
    for key in AnswerKey::ALL {
        let mut holders: Vec<usize> = (0..n).filter(|&i| samples[i].answer_key == key).collect();
        holders.shuffle(&mut rng);
        let surplus = counts[&key].saturating_sub(target[&key]);
        movers.extend(holders.into_iter().take(surplus));
    }
    movers.sort_unstable();
    movers.shuffle(&mut rng);

    let mut slots: Vec<AnswerKey> = Vec::new();
    for key in AnswerKey::ALL {
        slots.extend(std::iter::repeat_n(key, target[&key].saturating_sub(counts[&key])));
    }
    debug_assert_eq!(slots.len(), movers.len());
    for (i, new_key) in movers.into_iter().zip(slots) {
        let s = &mut samples[i];
        s.options.0.swap(s.answer_key.index(), new_key.index());
        s.answer_key = new_key;
    }
    samples
}

/// Number of validation items for `n` samples at `ratio` train share.
pub fn validation_size(n: usize, ratio: f64) -> usize {
    ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize
}

/// Seeded shuffle then split; each side keeps input order.
pub fn split_train_val(samples: Vec<QASample>, ratio: f64, seed: u64) -> (Vec<QASample>, Vec<QASample>) {
    assert!(ratio > 0.0 && ratio < 1.0, "ratio must lie in (0, 1)");
    let n = samples.len();
    let n_val = validation_size(n, ratio);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (i, s) in samples.into_iter().enumerate() {
        if is_val[i] {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

pub const PROMPT_INSTRUCTION: &str = "You FIRST observe the image in <observe> </observe> tags, then visualise the relevant scene graph in <scene> </scene> tags, followed by thinking about the reasoning process as an internal monologue within <think> </think> tags and then provide the final answer. The final answer MUST BE put within <answer> </answer> tags, and only return the final choice including the correct option and answer within the answer tags, e.g., <answer> (C) The red cube is left of the green sphere </answer>.";

/// Instruction, image size line, question and lettered options.
pub fn build_prompt(sample: &QASample) -> Result<String, DatasetError> {
    let (w, h) = sample.image_size().ok_or(DatasetError::MissingImageSize)?;
    let mut out = format!("{PROMPT_INSTRUCTION}\n\nImage size: {w} × {h}\n\n{}\n", sample.question.trim());
    for key in AnswerKey::ALL {
        out.push_str(&format!("({key}) {}\n", sample.options.get(key)));
    }
    Ok(out)
}

pub fn read_samples(path: &Path) -> Result<Vec<QASample>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::FileUnreadable { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::FileUnreadable { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let s: QASample = serde_json::from_str(&line)
            .map_err(|e| DatasetError::BadLine { line: idx + 1, reason: e.to_string() })?;
        s.validate().map_err(|e| DatasetError::BadLine { line: idx + 1, reason: e.to_string() })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let wrap = |source| DatasetError::FileUnwritable { path: path.display().to_string(), source };
    let mut w = std::io::BufWriter::new(File::create(path).map_err(wrap)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| wrap(e.into()))?;
        w.write_all(b"\n").map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}
