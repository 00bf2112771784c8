//! End-to-end dataset build: ingest, generate, filter, select, balance, split.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::generator::{FixtureGenerator, GeneratorClient, GeneratorError, ProcessGenerator, TemplateGenerator};
use super::verifier::{
    consistency_filter, AlwaysCorrect, AlwaysWrong, AnswerBook, FilterAborted, FilterOutcome, ProcessVerifier,
    SeededNoisy, VerifierClient, VerifierError,
};
use super::{
    balance_answer_keys, extract_subgraph, key_histogram, select_top, split_train_val, AnswerKey, Category,
    CorpusRecord, IngestReport, QASample, RecordError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    AlwaysCorrect,
    AlwaysWrong,
    Noisy,
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Template,
    Fixture,
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub corpus: Option<PathBuf>,
    pub generator: GeneratorKind,
    pub questions_per_image: usize,
    pub generator_fixture: Option<PathBuf>,
    pub generator_command: Vec<String>,
    pub verifier: VerifierKind,
    pub verifier_accuracy: f64,
    pub verifier_command: Vec<String>,
    pub top_k: usize,
    pub train_ratio: f64,
    /// Split first, then filter each side (selection and balancing precede the split).
    pub split_before_filter: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            generator: GeneratorKind::Template,
            questions_per_image: 4,
            generator_fixture: None,
            generator_command: Vec::new(),
            verifier: VerifierKind::AlwaysCorrect,
            verifier_accuracy: 0.7,
            verifier_command: Vec::new(),
            top_k: 10_000,
            train_ratio: 0.9,
            split_before_filter: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(format!("train_ratio {} must lie in (0, 1)", self.train_ratio));
        }
        if !(0.0..=1.0).contains(&self.verifier_accuracy) {
            return Err(format!("verifier_accuracy {} must lie in [0, 1]", self.verifier_accuracy));
        }
        if self.generator == GeneratorKind::Fixture && self.generator_fixture.is_none() {
            return Err("generator = \"fixture\" needs generator_fixture".into());
        }
        if self.generator == GeneratorKind::Process && self.generator_command.is_empty() {
            return Err("generator = \"process\" needs generator_command".into());
        }
        if self.verifier == VerifierKind::Process && self.verifier_command.is_empty() {
            return Err("verifier = \"process\" needs verifier_command".into());
        }
        Ok(())
    }

    pub fn make_generator(&self, seed: u64) -> Result<Box<dyn GeneratorClient>, GeneratorError> {
        Ok(match self.generator {
            GeneratorKind::Template => Box::new(TemplateGenerator::new(self.questions_per_image, seed)),
            GeneratorKind::Fixture => {
                let path = self.generator_fixture.as_ref().ok_or_else(|| GeneratorError::Unavailable("no fixture path".into()))?;
                Box::new(FixtureGenerator::from_path(path)?)
            }
            GeneratorKind::Process => Box::new(ProcessGenerator::new(&self.generator_command)?),
        })
    }

    /// Stub verifiers look answers up in `samples`.
    pub fn make_verifier(&self, samples: &[QASample], seed: u64) -> Result<Box<dyn VerifierClient>, VerifierError> {
        let book = AnswerBook::from_samples(samples);
        Ok(match self.verifier {
            VerifierKind::AlwaysCorrect => Box::new(AlwaysCorrect(book)),
            VerifierKind::AlwaysWrong => Box::new(AlwaysWrong(book)),
            VerifierKind::Noisy => Box::new(SeededNoisy::new(book, self.verifier_accuracy, seed)),
            VerifierKind::Process => Box::new(ProcessVerifier::new(&self.verifier_command)?),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    pub corpus_records: usize,
    pub corpus_errors: Vec<RecordError>,
    pub generated: usize,
    pub generated_invalid: usize,
    pub kept: usize,
    pub discarded: usize,
    pub discarded_per_category: BTreeMap<Category, usize>,
    pub verifier_calls: u64,
    /// Number of samples that needed 2, 3 or 4 calls.
    pub calls_histogram: BTreeMap<u32, usize>,
    pub selected: usize,
    pub train: usize,
    pub val: usize,
    pub per_category: BTreeMap<Category, usize>,
    pub answer_keys: BTreeMap<AnswerKey, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub train: Vec<QASample>,
    pub val: Vec<QASample>,
    pub report: BuildReport,
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Filter(Box<FilterAborted>),
}

/// Generates samples for every record; invalid items are counted and dropped.
pub fn generate_samples(records: &[CorpusRecord], generator: &mut dyn GeneratorClient) -> Result<(Vec<QASample>, usize), GeneratorError> {
    let mut out = Vec::new();
    let mut invalid = 0;
    for rec in records {
        for qa in generator.generate(rec)? {
            let sample = QASample {
                image_id: rec.image_id.clone(),
                width: Some(rec.width),
                height: Some(rec.height),
                subgraph: extract_subgraph(&rec.scene, &qa.question),
                question: qa.question,
                options: qa.options,
                answer_key: qa.answer_key,
                category: qa.category,
                rating: qa.rating,
                difficulty: qa.difficulty,
            };
            match sample.validate() {
                Ok(()) => out.push(sample),
                Err(e) => {
                    log::warn!("dropping generated item for {}: {e}", rec.image_id);
                    invalid += 1;
                }
            }
        }
    }
    Ok((out, invalid))
}

fn record_filter(report: &mut BuildReport, outcome: &FilterOutcome) {
    report.kept += outcome.kept.len();
    report.discarded += outcome.discarded.len();
    report.verifier_calls += outcome.total_calls();
    for s in &outcome.discarded {
        *report.discarded_per_category.entry(s.category).or_default() += 1;
    }
    for &c in &outcome.calls {
        *report.calls_histogram.entry(c).or_default() += 1;
    }
}

fn run_filter(samples: Vec<QASample>, verifier: &mut dyn VerifierClient, report: &mut BuildReport) -> Result<Vec<QASample>, BuildError> {
    let outcome = consistency_filter(samples, verifier).map_err(|e| BuildError::Filter(Box::new(e)))?;
    record_filter(report, &outcome);
    Ok(outcome.kept)
}

/// Runs every stage after ingestion. Deterministic for fixed seed and
/// deterministic clients.
pub fn build_dataset(
    ingest: IngestReport,
    cfg: &DatasetConfig,
    generator: &mut dyn GeneratorClient,
    verifier: &mut dyn VerifierClient,
    seed: u64,
) -> Result<BuildOutput, BuildError> {
    build_dataset_with(ingest, cfg, generator, |_| Ok(verifier), seed)
}

/// As [`build_dataset`], with the verifier built from the generated samples
/// (stub verifiers look up reference answers there).
pub fn build_dataset_with<'v, F>(
    ingest: IngestReport,
    cfg: &DatasetConfig,
    generator: &mut dyn GeneratorClient,
    make_verifier: F,
    seed: u64,
) -> Result<BuildOutput, BuildError>
where
    F: FnOnce(&[QASample]) -> Result<&'v mut dyn VerifierClient, VerifierError>,
{
    let mut report = BuildReport {
        corpus_records: ingest.records.len(),
        corpus_errors: ingest.errors,
        ..Default::default()
    };
    let (samples, invalid) = generate_samples(&ingest.records, generator)?;
    report.generated = samples.len();
    report.generated_invalid = invalid;
    let verifier = make_verifier(&samples)?;

    let (train, val) = if cfg.split_before_filter {
        let selected = select_top(samples, cfg.top_k);
        report.selected = selected.len();
        let balanced = balance_answer_keys(selected, seed);
        let (train, val) = split_train_val(balanced, cfg.train_ratio, seed);
        (run_filter(train, verifier, &mut report)?, run_filter(val, verifier, &mut report)?)
    } else {
        let kept = run_filter(samples, verifier, &mut report)?;
        let selected = select_top(kept, cfg.top_k);
        report.selected = selected.len();
        let balanced = balance_answer_keys(selected, seed);
        split_train_val(balanced, cfg.train_ratio, seed)
    };

    report.train = train.len();
    report.val = val.len();
    let all: Vec<QASample> = train.iter().chain(&val).cloned().collect();
    for s in &all {
        *report.per_category.entry(s.category).or_default() += 1;
    }
    report.answer_keys = key_histogram(&all);
    Ok(BuildOutput { train, val, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_corpus_line;

    fn corpus() -> IngestReport {
        let lines = [
            r#"{"image_id":"1","width":640,"height":480,"scene":{"objects":[{"id":"a","label":"cup","bbox":[10,10,50,60]},{"id":"b","label":"plate","bbox":[300,200,420,260]},{"id":"c","label":"lamp","bbox":[500,20,600,300]}],"relations":[["a","left of","b"]]}}"#,
            r#"{"image_id":"2","width":800,"height":600,"scene":{"objects":[{"id":"d","label":"dog","bbox":[100,300,300,500]},{"id":"e","label":"ball","bbox":[400,450,440,490]}],"relations":[["e","right of","d"]]}}"#,
        ];
        IngestReport { records: lines.iter().map(|l| parse_corpus_line(l).unwrap()).collect(), errors: vec![] }
    }

    fn run(cfg: &DatasetConfig) -> BuildOutput {
        let mut generator = cfg.make_generator(5).unwrap();
        let mut slot = None;
        build_dataset_with(
            corpus(),
            cfg,
            generator.as_mut(),
            |s| Ok(slot.insert(cfg.make_verifier(s, 5)?).as_mut()),
            5,
        )
        .unwrap()
    }

    #[test]
    fn always_correct_keeps_everything() {
        let out = run(&DatasetConfig::default());
        let r = &out.report;
        assert_eq!(r.discarded, 0);
        assert_eq!(r.kept, r.generated);
        assert_eq!(r.verifier_calls, 2 * r.generated as u64);
        assert_eq!(r.train + r.val, r.generated);
        let counts: Vec<usize> = r.answer_keys.values().copied().collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn always_wrong_discards_everything() {
        let cfg = DatasetConfig { verifier: VerifierKind::AlwaysWrong, ..Default::default() };
        let out = run(&cfg);
        assert_eq!(out.report.kept, 0);
        assert_eq!(out.report.calls_histogram, BTreeMap::from([(4, out.report.generated)]));
        assert!(out.train.is_empty() && out.val.is_empty());
    }

    #[test]
    fn both_orders_supported() {
        let cfg = DatasetConfig { split_before_filter: true, ..Default::default() };
        let out = run(&cfg);
        assert_eq!(out.report.train + out.report.val, out.report.generated);
        assert_eq!(run(&cfg), out);
    }

    #[test]
    fn config_validation() {
        assert!(DatasetConfig::default().validate().is_ok());
        assert!(DatasetConfig { train_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(DatasetConfig { verifier: VerifierKind::Process, ..Default::default() }.validate().is_err());
    }
}
