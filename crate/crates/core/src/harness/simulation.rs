//! Synthetic-scene simulation of reward hacking.
//!
//! Four scripted agents answer one templated spatial question per random
//! scene. Spamming many boxes lets Hungarian matching find lucky overlaps,
//! which lifts the ungated spatial score; the gated total is not fooled.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::generator::{distance_q, relation_q, size_q, Draft};
use crate::dataset::AnswerKey;
use crate::reward::{total_reward, GroundTruth, RewardBreakdown, ScoringConfig};
use crate::scene_graph::{serialize_scene, BBox, ObjectNode, RelationTriplet, SceneGraph};

pub const DEFAULT_SEED: u64 = 42;
/// Additional seeds at which the hacking ordering is checked.
pub const EXTRA_SEEDS: [u64; 9] = [7, 11, 23, 1234, 2024, 31337, 65537, 99991, 271828];

const LABELS: [&str; 12] = [
    "cup", "plate", "lamp", "chair", "book", "bottle", "laptop", "vase", "clock", "phone", "bowl", "plant",
];
const PREDICATES: [&str; 4] = ["left of", "right of", "above", "below"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Jittered ground-truth boxes, correct answer.
    Focused,
    /// Many random boxes with scene labels, random relations, random answer.
    BoxSpam,
    /// The whole scene graph, correct answer.
    ExhaustiveGraph,
    /// As many boxes as the ground truth but placed at random, wrong answer.
    HonestWrong,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Focused, AgentKind::BoxSpam, AgentKind::ExhaustiveGraph, AgentKind::HonestWrong];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Focused => "focused",
            AgentKind::BoxSpam => "box_spam",
            AgentKind::ExhaustiveGraph => "exhaustive_graph",
            AgentKind::HonestWrong => "honest_wrong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub episodes: usize,
    pub canvas: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub spam_boxes: usize,
    /// Box jitter of the focused agent, as a fraction of box size.
    pub jitter: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { episodes: 200, canvas: 1000, min_objects: 2, max_objects: 6, spam_boxes: 20, jitter: 0.05 }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_objects < 2 || self.max_objects < self.min_objects || self.max_objects > LABELS.len() {
            return Err(format!("need 2 <= min_objects <= max_objects <= {}", LABELS.len()));
        }
        if self.canvas < 100 {
            return Err("canvas must be at least 100 pixels".into());
        }
        if self.spam_boxes == 0 || self.episodes == 0 {
            return Err("spam_boxes and episodes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err("jitter must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// One generated scene with its question.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene: SceneGraph,
    pub question: String,
    pub options: [String; 4],
    pub answer: AnswerKey,
    pub truth: GroundTruth,
}

fn random_box(canvas: f64, rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(40.0..300.0);
    let h = rng.random_range(40.0..300.0);
    let x0 = rng.random_range(0.0..canvas - w);
    let y0 = rng.random_range(0.0..canvas - h);
    BBox::new(x0, y0, x0 + w, y0 + h)
}

/// Dominant-axis direction of `a` relative to `b`.
pub fn geometric_predicate(a: &BBox, b: &BBox) -> &'static str {
    let ((ax, ay), (bx, by)) = (a.center(), b.center());
    let (dx, dy) = (ax - bx, ay - by);
    if dx.abs() >= dy.abs() {
        if dx < 0.0 { "left of" } else { "right of" }
    } else if dy < 0.0 {
        "above"
    } else {
        "below"
    }
}

fn pairwise_relations(objects: &[ObjectNode]) -> Vec<RelationTriplet> {
    let mut out = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            out.push(RelationTriplet::new(&a.id, geometric_predicate(&a.bbox, &b.bbox), &b.id));
        }
    }
    out
}

fn answer_text(options: &[String; 4], key: AnswerKey) -> String {
    format!("({key}) {}", options[key.index()])
}

/// Random scene plus one question whose answer follows from the boxes.
pub fn generate_episode(cfg: &SimulationConfig, rng: &mut impl Rng) -> Episode {
    let canvas = cfg.canvas as f64;
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut labels = LABELS.to_vec();
    labels.shuffle(rng);
    let objects: Vec<ObjectNode> = labels[..n]
        .iter()
        .map(|l| ObjectNode::new(format!("{l}.1"), *l, random_box(canvas, rng)))
        .collect();
    let scene = SceneGraph::new(objects.clone(), pairwise_relations(&objects)).with_image_size(cfg.canvas, cfg.canvas);

    let (draft, involved): (Draft, usize) = if n >= 3 {
        (distance_q(&objects[0], &objects[1], &objects[2]).expect("distance template"), 3)
    } else {
        let d = relation_q(&objects[0], &objects[1]).or_else(|| size_q(&objects[0], &objects[1])).expect("size template");
        (d, 2)
    };
    let focus = objects[..involved].to_vec();
    let subgraph = SceneGraph::new(focus.clone(), pairwise_relations(&focus)).with_image_size(cfg.canvas, cfg.canvas);
    let answer = AnswerKey::from_index(draft.answer).expect("answer index");
    let options = draft.options.0;
    let truth = GroundTruth::new(answer_text(&options, answer), subgraph);
    Episode { scene, question: draft.question, options, answer, truth }
}

/// Four-tag response around the given scene and answer.
pub fn render_response(observe: &str, scene: &SceneGraph, think: &str, answer: &str) -> String {
    let json = serialize_scene(scene).expect("agents emit valid graphs");
    format!("<observe> {observe} </observe>\n<scene>{json}</scene>\n<think> {think} </think>\n<answer> {answer} </answer>")
}

fn jittered(b: &BBox, jitter: f64, canvas: f64, rng: &mut impl Rng) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| rng.random_range(-jitter..=jitter) * s;
    let x1 = (b.x1 + d(w)).clamp(0.0, canvas - 1.0);
    let y1 = (b.y1 + d(h)).clamp(0.0, canvas - 1.0);
    let x2 = (b.x2 + d(w)).clamp(x1 + 1.0, canvas);
    let y2 = (b.y2 + d(h)).clamp(y1 + 1.0, canvas);
    BBox::new(x1, y1, x2, y2)
}

fn wrong(key: AnswerKey) -> AnswerKey {
    AnswerKey::from_index((key.index() + 1) % 4).unwrap()
}

/// The response an agent gives for an episode.
pub fn agent_response(kind: AgentKind, ep: &Episode, cfg: &SimulationConfig, rng: &mut impl Rng) -> String {
    let canvas = cfg.canvas as f64;
    let gt = &ep.truth.subgraph;
    let (scene, key, think) = match kind {
        AgentKind::Focused => {
            let objects = gt
                .objects
                .iter()
                .map(|o| ObjectNode::new(&o.id, &o.label, jittered(&o.bbox, cfg.jitter, canvas, rng)))
                .collect();
            (SceneGraph::new(objects, gt.relations.clone()), ep.answer, "Compare the centers of the relevant objects.")
        }
        AgentKind::ExhaustiveGraph => (ep.scene.clone(), ep.answer, "List everything, then compare the relevant objects."),
        AgentKind::HonestWrong => {
            let objects = gt.objects.iter().map(|o| ObjectNode::new(&o.id, &o.label, random_box(canvas, rng))).collect();
            (SceneGraph::new(objects, gt.relations.clone()), wrong(ep.answer), "Compare the centers of the relevant objects.")
        }
        AgentKind::BoxSpam => {
            let labels: Vec<&str> = ep.scene.objects.iter().map(|o| o.label.as_str()).collect();
            let objects: Vec<ObjectNode> = (0..cfg.spam_boxes)
                .map(|k| {
                    let label = labels.choose(rng).expect("scene has objects");
                    ObjectNode::new(format!("{label}.s{k}"), *label, random_box(canvas, rng))
                })
                .collect();
            let relations = (0..cfg.spam_boxes / 2)
                .map(|_| {
                    let i = rng.random_range(0..objects.len());
                    let j = (i + rng.random_range(1..objects.len())) % objects.len();
                    RelationTriplet::new(&objects[i].id, *PREDICATES.choose(rng).unwrap(), &objects[j].id)
                })
                .collect();
            let key = AnswerKey::from_index(rng.random_range(0..4)).unwrap();
            (SceneGraph::new(objects, relations), key, "There are many things here.")
        }
    };
    render_response("A tabletop scene with several objects.", &scene, &think, &answer_text(&ep.options, key))
}

/// One CSV row: per-agent component rewards for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub agent: AgentKind,
    pub n_boxes: usize,
    pub r_format: u8,
    pub r_count: f64,
    pub r_accuracy: u8,
    /// Mean matched CIoU, computed regardless of gating.
    pub r_spatial_ungated: f64,
    /// Gated total reward.
    pub total: f64,
    /// Format and accuracy terms only.
    pub total_format_accuracy: f64,
    /// Format, accuracy and spatial terms with no gate and no count term.
    pub total_spatial_unconstrained: f64,
    pub response_len: usize,
}

fn row(step: usize, agent: AgentKind, response: &str, b: &RewardBreakdown, scoring: &ScoringConfig) -> MetricsRow {
    let w = &scoring.weights;
    let base = w.w_format * f64::from(b.r_format) + w.w_accuracy * f64::from(b.r_accuracy);
    MetricsRow {
        step,
        agent,
        n_boxes: b.diagnostics.n_obj_pred,
        r_format: b.r_format,
        r_count: b.r_count,
        r_accuracy: b.r_accuracy,
        r_spatial_ungated: b.r_spatial,
        total: b.total,
        total_format_accuracy: base,
        total_spatial_unconstrained: base + w.w_spatial * b.r_spatial,
        response_len: response.chars().count(),
    }
}

/// Runs every episode; rows ordered by episode then agent.
pub fn simulate(cfg: &SimulationConfig, scoring: &ScoringConfig, seed: u64) -> Vec<MetricsRow> {
    (0..cfg.episodes)
        .into_par_iter()
        .map(|step| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(step as u64);
            let ep = generate_episode(cfg, &mut rng);
            let agent_seeds: Vec<u64> = AgentKind::ALL.iter().map(|_| rng.random()).collect();
            AgentKind::ALL
                .iter()
                .zip(agent_seeds)
                .map(|(&kind, s)| {
                    let mut agent_rng = ChaCha8Rng::seed_from_u64(s);
                    let response = agent_response(kind, &ep, cfg, &mut agent_rng);
                    let b = total_reward(&response, &ep.truth, scoring);
                    row(step, kind, &response, &b, scoring)
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AgentMeans {
    pub episodes: usize,
    pub r_format: f64,
    pub r_count: f64,
    pub r_accuracy: f64,
    pub r_spatial_ungated: f64,
    pub total: f64,
    pub total_format_accuracy: f64,
    pub total_spatial_unconstrained: f64,
    pub response_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub agents: BTreeMap<AgentKind, AgentMeans>,
    /// box_spam ungated spatial > honest_wrong ungated spatial.
    pub spam_beats_honest_spatial: bool,
    /// box_spam gated total < focused gated total.
    pub spam_below_focused_total: bool,
}

impl SimulationSummary {
    pub fn hacking_mechanism_holds(&self) -> bool {
        self.spam_beats_honest_spatial && self.spam_below_focused_total
    }
}

pub fn summarize(rows: &[MetricsRow], seed: u64) -> SimulationSummary {
    let mut agents: BTreeMap<AgentKind, AgentMeans> = BTreeMap::new();
    for r in rows {
        let m = agents.entry(r.agent).or_default();
        m.episodes += 1;
        m.r_format += f64::from(r.r_format);
        m.r_count += r.r_count;
        m.r_accuracy += f64::from(r.r_accuracy);
        m.r_spatial_ungated += r.r_spatial_ungated;
        m.total += r.total;
        m.total_format_accuracy += r.total_format_accuracy;
        m.total_spatial_unconstrained += r.total_spatial_unconstrained;
        m.response_len += r.response_len as f64;
    }
    for m in agents.values_mut() {
        let n = m.episodes.max(1) as f64;
        for v in [
            &mut m.r_format,
            &mut m.r_count,
            &mut m.r_accuracy,
            &mut m.r_spatial_ungated,
            &mut m.total,
            &mut m.total_format_accuracy,
            &mut m.total_spatial_unconstrained,
            &mut m.response_len,
        ] {
            *v /= n;
        }
    }
    let get = |k: AgentKind| agents.get(&k).cloned().unwrap_or_default();
    let (spam, honest, focused) = (get(AgentKind::BoxSpam), get(AgentKind::HonestWrong), get(AgentKind::Focused));
    SimulationSummary {
        seed,
        spam_beats_honest_spatial: spam.r_spatial_ungated > honest.r_spatial_ungated,
        spam_below_focused_total: spam.total < focused.total,
        agents,
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(seed: u64) -> Episode {
        generate_episode(&SimulationConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn episodes_are_valid() {
        for s in 0..50 {
            let ep = episode(s);
            assert!(crate::scene_graph::validate_graph(&ep.scene, None).is_empty());
            assert!(ep.truth.subgraph.is_subgraph_of(&ep.scene));
            assert!((2..=3).contains(&ep.truth.n_obj()));
        }
    }

    #[test]
    fn every_agent_passes_format() {
        let cfg = SimulationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..20 {
            let ep = episode(s);
            for kind in AgentKind::ALL {
                let b = total_reward(&agent_response(kind, &ep, &cfg, &mut rng), &ep.truth, &ScoringConfig::default());
                assert_eq!(b.r_format, 1, "{kind:?}: {:?}", b.diagnostics.violations);
            }
        }
    }

    #[test]
    fn zero_jitter_focused_agent_is_perfect() {
        let cfg = SimulationConfig { jitter: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..20 {
            let ep = episode(s);
            let b = total_reward(&agent_response(AgentKind::Focused, &ep, &cfg, &mut rng), &ep.truth, &ScoringConfig::default());
            assert!((b.total - 1.0).abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn focused_total_rises_as_jitter_shrinks() {
        let scoring = ScoringConfig::default();
        let mean_total = |jitter: f64| {
            let cfg = SimulationConfig { episodes: 60, jitter, ..Default::default() };
            let rows = simulate(&cfg, &scoring, 3);
            summarize(&rows, 3).agents[&AgentKind::Focused].total
        };
        let (coarse, fine, tiny) = (mean_total(0.3), mean_total(0.05), mean_total(1e-6));
        assert!(coarse < fine && fine < tiny, "{coarse} {fine} {tiny}");
        assert!(1.0 - tiny < 1e-5);
    }

    #[test]
    fn spam_count_reward_vanishes_with_more_boxes() {
        let scoring = ScoringConfig::default();
        let ep = episode(9);
        let mut last = f64::INFINITY;
        for boxes in [3, 6, 12, 40, 200] {
            let cfg = SimulationConfig { spam_boxes: boxes, ..Default::default() };
            let resp = agent_response(AgentKind::BoxSpam, &ep, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
            let b = total_reward(&resp, &ep.truth, &scoring);
            let obj_term = (1.0 - (b.diagnostics.n_obj_pred as f64 - b.diagnostics.n_obj_gt as f64).abs() / b.diagnostics.n_obj_gt as f64).max(0.0);
            assert!(obj_term <= last);
            last = obj_term;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = SimulationConfig { episodes: 30, ..Default::default() };
        let scoring = ScoringConfig::default();
        let a = simulate(&cfg, &scoring, 42);
        assert_eq!(a, simulate(&cfg, &scoring, 42));
        assert_eq!(a.len(), 120);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,agent,n_boxes,r_format,r_count,r_accuracy,r_spatial_ungated,total"));
        assert_eq!(text.lines().count(), 121);
    }
}
