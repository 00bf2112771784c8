use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use spatial_rl::dataset::pipeline::build_dataset_with;
use spatial_rl::dataset::{extract_subgraph, ingest_corpus, read_samples, write_jsonl, CorpusRecord};
use spatial_rl::grpo::{grpo_loss, read_rollouts, LossReport};
use spatial_rl::harness::policy::run_gradcheck;
use spatial_rl::harness::simulation::{simulate, summarize, write_metrics_csv, EXTRA_SEEDS};
use spatial_rl::harness::{ConfigError, RunConfig};
use spatial_rl::reward::{score_batch, total_reward, GroundTruth};
use spatial_rl::scene_graph::serialize_scene;

#[derive(Parser)]
#[command(name = "spatial-rl", version, about = "Spatial reward scoring, GRPO loss and dataset tooling")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (a directory for build-dataset). Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score responses against ground truths, one breakdown per line.
    Score {
        /// JSONL of `{"response": ...}`; other lines are scored as raw text.
        #[arg(long)]
        responses: PathBuf,
        /// JSONL of `{"answer": ..., "subgraph": ...}`; a single line applies to every response.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Score responses against dataset samples in parallel.
    ScoreBatch {
        #[arg(long)]
        responses: PathBuf,
        /// Dataset JSONL; line i is the reference for response i.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Build train/val JSONL files and a report from a corpus.
    BuildDataset {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Print the question-aligned subgraph of one corpus image.
    ExtractSubgraph {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        question: String,
    },
    /// Compute the GRPO loss of every rollout group.
    GrpoStep {
        #[arg(long)]
        rollouts: PathBuf,
    },
    /// Run the reward-hacking simulation and write per-episode metrics CSV.
    SimulateHacking {
        #[arg(long)]
        episodes: Option<usize>,
        /// Also check the nine additional documented seeds.
        #[arg(long)]
        all_seeds: bool,
    },
    /// Compare the analytic GRPO gradient with finite differences.
    Gradcheck {
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        inject_fault: bool,
    },
}

enum Failure {
    Threshold(String),
    Io(String),
    Config(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Threshold(_) => 1,
            Failure::Io(_) => 2,
            Failure::Config(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Threshold(m) | Failure::Io(m) | Failure::Config(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(path, e))
}

#[derive(Deserialize)]
struct ResponseLine {
    response: String,
}

fn read_responses(path: &Path) -> Result<Vec<String>, Failure> {
    Ok(read_lines(path)?
        .into_iter()
        .map(|line| match serde_json::from_str::<ResponseLine>(&line) {
            Ok(r) => r.response,
            Err(_) => match serde_json::from_str::<String>(&line) {
                Ok(s) => s,
                Err(_) => line,
            },
        })
        .collect())
}

fn write_json_lines<T: Serialize>(out: &mut dyn Write, items: &[T]) -> Result<(), Failure> {
    for item in items {
        serde_json::to_writer(&mut *out, item).map_err(|e| Failure::Io(e.to_string()))?;
        writeln!(out).map_err(|e| Failure::Io(e.to_string()))?;
    }
    out.flush().map_err(|e| Failure::Io(e.to_string()))
}

fn cmd_score(cfg: &RunConfig, out: &Option<PathBuf>, responses: &Path, truth: &Path) -> Result<(), Failure> {
    let responses = read_responses(responses)?;
    let truths: Vec<GroundTruth> = read_lines(truth)?
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::Io(format!("{} line {}: {e}", truth.display(), i + 1))))
        .collect::<Result<_, _>>()?;
    let breakdowns: Vec<_> = match truths.len() {
        1 => responses.iter().map(|r| total_reward(r, &truths[0], &cfg.reward)).collect(),
        _ => score_batch(&responses, &truths, &cfg.reward).map_err(|e| Failure::Io(e.to_string()))?,
    };
    write_json_lines(output(out)?.as_mut(), &breakdowns)
}

fn cmd_score_batch(cfg: &RunConfig, out: &Option<PathBuf>, responses: &Path, dataset: &Path) -> Result<(), Failure> {
    let responses = read_responses(responses)?;
    let samples = read_samples(dataset).map_err(|e| io_err(dataset, e))?;
    let truths: Vec<GroundTruth> = samples.iter().map(|s| s.ground_truth()).collect();
    let breakdowns = score_batch(&responses, &truths, &cfg.reward).map_err(|e| Failure::Io(e.to_string()))?;
    let n = breakdowns.len().max(1) as f64;
    log::info!("mean total reward {:.6}", breakdowns.iter().map(|b| b.total).sum::<f64>() / n);
    write_json_lines(output(out)?.as_mut(), &breakdowns)
}

fn cmd_build_dataset(cfg: &RunConfig, out: &Option<PathBuf>, corpus: Option<PathBuf>) -> Result<(), Failure> {
    let corpus = corpus
        .or_else(|| cfg.dataset.corpus.clone())
        .ok_or_else(|| Failure::Config("no corpus given (--corpus or dataset.corpus)".into()))?;
    let dir = out.clone().or_else(|| cfg.paths.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let ingest = ingest_corpus(&corpus).map_err(|e| Failure::Io(e.to_string()))?;

    let mut generator = cfg.dataset.make_generator(cfg.seed).map_err(|e| Failure::Config(e.to_string()))?;
    let mut slot = None;
    let built = build_dataset_with(
        ingest,
        &cfg.dataset,
        generator.as_mut(),
        |samples| Ok(slot.insert(cfg.dataset.make_verifier(samples, cfg.seed)?).as_mut()),
        cfg.seed,
    )
    .map_err(|e| Failure::Io(e.to_string()))?;
    write_jsonl(&dir.join("train.jsonl"), &built.train).map_err(|e| Failure::Io(e.to_string()))?;
    write_jsonl(&dir.join("val.jsonl"), &built.val).map_err(|e| Failure::Io(e.to_string()))?;
    let report = serde_json::to_string_pretty(&built.report).map_err(|e| Failure::Io(e.to_string()))?;
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, report + "\n").map_err(|e| io_err(&report_path, e))?;
    eprintln!(
        "train {} / val {}; kept {}, discarded {}, verifier calls {}",
        built.report.train, built.report.val, built.report.kept, built.report.discarded, built.report.verifier_calls
    );
    Ok(())
}

fn cmd_extract(out: &Option<PathBuf>, corpus: &Path, image_id: &str, question: &str) -> Result<(), Failure> {
    let ingest = ingest_corpus(corpus).map_err(|e| Failure::Io(e.to_string()))?;
    let record: &CorpusRecord = ingest
        .records
        .iter()
        .find(|r| r.image_id == image_id)
        .ok_or_else(|| Failure::Io(format!("unknown image id `{image_id}`")))?;
    let sub = extract_subgraph(&record.scene, question);
    let json = serialize_scene(&sub).map_err(|e| Failure::Io(e.to_string()))?;
    let mut w = output(out)?;
    writeln!(w, "{json}").and_then(|_| w.flush()).map_err(|e| Failure::Io(e.to_string()))
}

#[derive(Serialize)]
struct GroupReport<'a> {
    group: usize,
    #[serde(flatten)]
    report: &'a LossReport,
}

fn cmd_grpo_step(cfg: &RunConfig, out: &Option<PathBuf>, rollouts: &Path) -> Result<(), Failure> {
    let file = File::open(rollouts).map_err(|e| io_err(rollouts, e))?;
    let groups = read_rollouts(BufReader::new(file)).map_err(|e| io_err(rollouts, e))?;
    let mut reports = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        reports.push(grpo_loss(g, &cfg.grpo).map_err(|e| Failure::Io(format!("group {i}: {e}")))?);
    }
    let lines: Vec<GroupReport> = reports.iter().enumerate().map(|(group, report)| GroupReport { group, report }).collect();
    write_json_lines(output(out)?.as_mut(), &lines)
}

fn cmd_simulate(cfg: &RunConfig, out: &Option<PathBuf>, episodes: Option<usize>, all_seeds: bool) -> Result<(), Failure> {
    let mut sim = cfg.simulation.clone();
    if let Some(e) = episodes {
        sim.episodes = e;
    }
    sim.validate().map_err(Failure::Config)?;
    let rows = simulate(&sim, &cfg.reward, cfg.seed);
    write_metrics_csv(output(out)?, &rows).map_err(|e| Failure::Io(e.to_string()))?;

    let mut summaries = vec![summarize(&rows, cfg.seed)];
    if all_seeds {
        summaries.extend(EXTRA_SEEDS.iter().map(|&s| summarize(&simulate(&sim, &cfg.reward, s), s)));
    }
    for s in &summaries {
        eprintln!("{}", serde_json::to_string(s).map_err(|e| Failure::Io(e.to_string()))?);
    }
    match summaries.iter().find(|s| !s.hacking_mechanism_holds()) {
        Some(s) => Err(Failure::Threshold(format!("hacking ordering fails at seed {}", s.seed))),
        None => Ok(()),
    }
}

fn cmd_gradcheck(cfg: &RunConfig, out: &Option<PathBuf>, threshold: Option<f64>, inject_fault: bool) -> Result<(), Failure> {
    let mut gc = cfg.gradcheck.clone();
    if let Some(t) = threshold {
        gc.threshold = t;
    }
    gc.inject_fault |= inject_fault;
    gc.validate().map_err(Failure::Config)?;
    let report = run_gradcheck(&gc, &cfg.grpo, &cfg.reward, cfg.seed);
    let summary = serde_json::json!({
        "max_rel_error": report.max_rel_error,
        "threshold": gc.threshold,
        "worst_index": report.worst_index,
        "parameters": report.analytic.len(),
        "step": gc.step,
    });
    let mut w = output(out)?;
    writeln!(w, "{summary}").and_then(|_| w.flush()).map_err(|e| Failure::Io(e.to_string()))?;
    if report.max_rel_error < gc.threshold {
        Ok(())
    } else {
        Err(Failure::Threshold(format!("max relative error {:.3e} >= {:.3e}", report.max_rel_error, gc.threshold)))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;
    match cli.command {
        Command::Score { responses, truth } => cmd_score(&cfg, out, &responses, &truth),
        Command::ScoreBatch { responses, dataset } => cmd_score_batch(&cfg, out, &responses, &dataset),
        Command::BuildDataset { corpus } => cmd_build_dataset(&cfg, out, corpus),
        Command::ExtractSubgraph { corpus, image_id, question } => cmd_extract(out, &corpus, &image_id, &question),
        Command::GrpoStep { rollouts } => cmd_grpo_step(&cfg, out, &rollouts),
        Command::SimulateHacking { episodes, all_seeds } => cmd_simulate(&cfg, out, episodes, all_seeds),
        Command::Gradcheck { threshold, inject_fault } => cmd_gradcheck(&cfg, out, threshold, inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
