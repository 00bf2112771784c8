//! External answer verification and the two-round consistency filter.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerKey, Options, QASample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifierAnswer {
    Key(AnswerKey),
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerifierError {
    #[error("verifier unavailable: {0}")]
    Unavailable(String),
    #[error("verifier protocol error: {0}")]
    Protocol(String),
}

/// Answers a multiple-choice question about an image.
pub trait VerifierClient {
    fn answer(&mut self, question: &str, options: &Options, image_id: &str) -> Result<VerifierAnswer, VerifierError>;
}

type QuestionKey = (String, String);

fn question_key(image_id: &str, question: &str) -> QuestionKey {
    (image_id.to_string(), question.to_string())
}

/// Knows the correct option text of a fixed sample set, so it keeps working
/// after options are reordered.
#[derive(Debug, Clone, Default)]
pub struct AnswerBook(HashMap<QuestionKey, String>);

impl AnswerBook {
    pub fn from_samples(samples: &[QASample]) -> Self {
        Self(
            samples
                .iter()
                .map(|s| (question_key(&s.image_id, &s.question), s.correct_option().to_string()))
                .collect(),
        )
    }

    fn lookup(&self, image_id: &str, question: &str, options: &Options) -> Result<AnswerKey, VerifierError> {
        let text = self
            .0
            .get(&question_key(image_id, question))
            .ok_or_else(|| VerifierError::Unavailable(format!("no reference for {image_id}: {question}")))?;
        AnswerKey::ALL
            .into_iter()
            .find(|&k| options.get(k) == text)
            .ok_or_else(|| VerifierError::Protocol(format!("reference answer missing from options of {image_id}")))
    }
}

fn wrong_key(k: AnswerKey) -> AnswerKey {
    AnswerKey::from_index((k.index() + 1) % 4).unwrap()
}

/// Always agrees with the reference key.
pub struct AlwaysCorrect(pub AnswerBook);

impl VerifierClient for AlwaysCorrect {
    fn answer(&mut self, question: &str, options: &Options, image_id: &str) -> Result<VerifierAnswer, VerifierError> {
        self.0.lookup(image_id, question, options).map(VerifierAnswer::Key)
    }
}

/// Always picks the key after the reference one.
pub struct AlwaysWrong(pub AnswerBook);

impl VerifierClient for AlwaysWrong {
    fn answer(&mut self, question: &str, options: &Options, image_id: &str) -> Result<VerifierAnswer, VerifierError> {
        self.0.lookup(image_id, question, options).map(|k| VerifierAnswer::Key(wrong_key(k)))
    }
}

/// Replays a fixed answer sequence; errors once exhausted.
#[derive(Debug, Clone, Default)]
pub struct Scripted {
    pub script: VecDeque<VerifierAnswer>,
    pub calls: usize,
}

impl Scripted {
    pub fn new(script: impl IntoIterator<Item = VerifierAnswer>) -> Self {
        Self { script: script.into_iter().collect(), calls: 0 }
    }
}

impl VerifierClient for Scripted {
    fn answer(&mut self, _: &str, _: &Options, _: &str) -> Result<VerifierAnswer, VerifierError> {
        self.calls += 1;
        self.script
            .pop_front()
            .ok_or_else(|| VerifierError::Unavailable(format!("script exhausted at call {}", self.calls)))
    }
}

/// Correct with probability `accuracy`, otherwise a uniformly drawn wrong key.
pub struct SeededNoisy {
    book: AnswerBook,
    accuracy: f64,
    rng: ChaCha8Rng,
}

impl SeededNoisy {
    pub fn new(book: AnswerBook, accuracy: f64, seed: u64) -> Self {
        Self { book, accuracy: accuracy.clamp(0.0, 1.0), rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl VerifierClient for SeededNoisy {
    fn answer(&mut self, question: &str, options: &Options, image_id: &str) -> Result<VerifierAnswer, VerifierError> {
        let truth = self.book.lookup(image_id, question, options)?;
        if self.rng.random_bool(self.accuracy) {
            return Ok(VerifierAnswer::Key(truth));
        }
        let offset = self.rng.random_range(1..4);
        Ok(VerifierAnswer::Key(AnswerKey::from_index((truth.index() + offset) % 4).unwrap()))
    }
}

#[derive(Serialize)]
pub struct VerifierRequest<'a> {
    pub image_id: &'a str,
    pub question: &'a str,
    pub options: &'a Options,
}

/// `{"answer": "B"}`; a null or missing answer means abstain.
#[derive(Deserialize)]
pub struct VerifierResponse {
    #[serde(default)]
    pub answer: Option<String>,
}

/// Runs an external program per call: request JSON on stdin, response JSON
/// on stdout.
#[derive(Debug, Clone)]
pub struct ProcessVerifier {
    pub program: String,
    pub args: Vec<String>,
}

impl ProcessVerifier {
    pub fn new(command: &[String]) -> Result<Self, VerifierError> {
        let (program, args) = command.split_first().ok_or_else(|| VerifierError::Unavailable("empty command".into()))?;
        Ok(Self { program: program.clone(), args: args.to_vec() })
    }
}

pub(crate) fn run_json_process(program: &str, args: &[String], request: &[u8]) -> Result<Vec<u8>, String> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| format!("cannot start `{program}`: {e}"))?;
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(request)
        .map_err(|e| format!("cannot write to `{program}`: {e}"))?;
    let out = child.wait_with_output().map_err(|e| format!("`{program}` failed: {e}"))?;
    if !out.status.success() {
        return Err(format!("`{program}` exited with {}", out.status));
    }
    Ok(out.stdout)
}

impl VerifierClient for ProcessVerifier {
    fn answer(&mut self, question: &str, options: &Options, image_id: &str) -> Result<VerifierAnswer, VerifierError> {
        let req = serde_json::to_vec(&VerifierRequest { image_id, question, options })
            .map_err(|e| VerifierError::Protocol(e.to_string()))?;
        let raw = run_json_process(&self.program, &self.args, &req).map_err(VerifierError::Unavailable)?;
        let resp: VerifierResponse =
            serde_json::from_slice(&raw).map_err(|e| VerifierError::Protocol(e.to_string()))?;
        match resp.answer.as_deref().map(str::trim) {
            None | Some("") => Ok(VerifierAnswer::Abstain),
            Some(s) => {
                let mut chars = s.chars();
                match (chars.next().and_then(AnswerKey::from_letter), chars.next()) {
                    (Some(k), None) => Ok(VerifierAnswer::Key(k)),
                    _ => Err(VerifierError::Protocol(format!("answer {s:?} is not one of A-D"))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<QASample>,
    pub discarded: Vec<QASample>,
    /// Verifier calls per processed sample, in input order.
    pub calls: Vec<u32>,
}

impl FilterOutcome {
    pub fn total_calls(&self) -> u64 {
        self.calls.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("verifier failed on sample {index}: {error}")]
pub struct FilterAborted {
    pub index: usize,
    pub error: VerifierError,
    /// Decisions for samples `0..index`.
    pub partial: FilterOutcome,
}

const FIRST_ROUND: u32 = 2;
const SECOND_ROUND: u32 = 2;

/// Outcome for one sample: kept flag and number of calls spent.
pub fn verify_sample(sample: &QASample, verifier: &mut dyn VerifierClient) -> Result<(bool, u32), VerifierError> {
    let mut ask = || verifier.answer(&sample.question, &sample.options, &sample.image_id);
    let mut agreed = false;
    for _ in 0..FIRST_ROUND {
        agreed |= ask()? == VerifierAnswer::Key(sample.answer_key);
    }
    if agreed {
        return Ok((true, FIRST_ROUND));
    }
    for extra in 1..=SECOND_ROUND {
        if ask()? == VerifierAnswer::Key(sample.answer_key) {
            return Ok((true, FIRST_ROUND + extra));
        }
    }
    Ok((false, FIRST_ROUND + SECOND_ROUND))
}

/// Keeps a sample when any of two verifier answers matches its key; failing
/// that, asks up to two more times and keeps it on the first match.
pub fn consistency_filter(samples: Vec<QASample>, verifier: &mut dyn VerifierClient) -> Result<FilterOutcome, FilterAborted> {
    let mut out = FilterOutcome::default();
    for (index, sample) in samples.into_iter().enumerate() {
        match verify_sample(&sample, verifier) {
            Ok((keep, calls)) => {
                out.calls.push(calls);
                if keep {
                    out.kept.push(sample);
                } else {
                    out.discarded.push(sample);
                }
            }
            Err(error) => return Err(FilterAborted { index, error, partial: out }),
        }
    }
    Ok(out)
}
