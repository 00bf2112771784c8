//! Multi-objective spatial reward with lexicographic gating.
//!
//! Components (each in `[0, 1]`, unweighted):
//! - format: tag structure and scene schema, binary;
//! - count: linear penalty on relative object/relation count deviation;
//! - accuracy: exact answer match, binary;
//! - spatial: mean (clamped) CIoU over matched object pairs.
//!
//! ```text
//! total = [format = 1] * (w_f * format + w_c * count + w_a * accuracy
//!                         + [accuracy = 1] * w_s * spatial)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::ciou;
use crate::matcher::{match_objects, CostWeights};
use crate::response::{
    extract_answer_text, format_reward, parse_response, parse_response_with, AnswerMode, FormatViolation,
    ParseOptions,
};
use crate::scene_graph::{validate_graph, ObjectNode, PredicateVocabulary, SceneGraph, Violation};

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_format: f64,
    pub w_count: f64,
    pub w_accuracy: f64,
    pub w_spatial: f64,
    pub lambda_obj: f64,
    pub lambda_rel: f64,
    pub lambda_spatial: f64,
    pub lambda_semantic: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_format: 0.1,
            w_count: 0.2,
            w_accuracy: 0.5,
            w_spatial: 0.2,
            lambda_obj: 0.7,
            lambda_rel: 0.3,
            lambda_spatial: 1.0,
            lambda_semantic: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightsError {
    #[error("weight `{0}` is negative or not finite")]
    Negative(&'static str),
    #[error("component weights sum to {0}, expected 1")]
    ComponentSum(f64),
    #[error("lambda_obj + lambda_rel = {0}, expected 1")]
    CountSplit(f64),
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), WeightsError> {
        let named = [
            ("w_format", self.w_format),
            ("w_count", self.w_count),
            ("w_accuracy", self.w_accuracy),
            ("w_spatial", self.w_spatial),
            ("lambda_obj", self.lambda_obj),
            ("lambda_rel", self.lambda_rel),
            ("lambda_spatial", self.lambda_spatial),
            ("lambda_semantic", self.lambda_semantic),
        ];
        if let Some((name, _)) = named.iter().find(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(WeightsError::Negative(name));
        }
        let sum = self.w_format + self.w_count + self.w_accuracy + self.w_spatial;
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(WeightsError::ComponentSum(sum));
        }
        let split = self.lambda_obj + self.lambda_rel;
        if (split - 1.0).abs() > WEIGHT_TOL {
            return Err(WeightsError::CountSplit(split));
        }
        Ok(())
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights { spatial: self.lambda_spatial, semantic: self.lambda_semantic }
    }
}

/// Everything that changes how a trajectory is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub weights: RewardWeights,
    pub accuracy_mode: AnswerMode,
    /// Clamp negative per-pair CIoU to 0 before averaging.
    pub clamp_negative_ciou: bool,
    /// Reject predicates outside `vocabulary` in the predicted scene.
    pub strict_vocab: bool,
    #[serde(skip)]
    pub vocabulary: Option<PredicateVocabulary>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            accuracy_mode: AnswerMode::Strict,
            clamp_negative_ciou: true,
            strict_vocab: false,
            vocabulary: None,
        }
    }
}

/// Reference answer and question-aligned subgraph for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answer: String,
    pub subgraph: SceneGraph,
}

impl GroundTruth {
    pub fn new(answer: impl Into<String>, subgraph: SceneGraph) -> Self {
        Self { answer: answer.into(), subgraph }
    }

    pub fn n_obj(&self) -> usize {
        self.subgraph.num_objects()
    }

    pub fn n_rel(&self) -> usize {
        self.subgraph.num_relations()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardDiagnostics {
    pub pairs: Vec<(usize, usize)>,
    pub pair_ciou: Vec<f64>,
    /// Unclamped mean CIoU over matched pairs.
    pub raw_spatial_mean: f64,
    pub n_obj_pred: usize,
    pub n_rel_pred: usize,
    pub n_obj_gt: usize,
    pub n_rel_gt: usize,
    pub predicted_answer: Option<String>,
    pub violations: Vec<ViolationRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub code: String,
    pub detail: String,
}

impl From<&FormatViolation> for ViolationRecord {
    fn from(v: &FormatViolation) -> Self {
        Self { code: v.code().to_string(), detail: v.detail() }
    }
}

impl From<&Violation> for ViolationRecord {
    fn from(v: &Violation) -> Self {
        Self { code: v.code().to_string(), detail: v.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: u8,
    pub r_count: f64,
    pub r_accuracy: u8,
    pub r_spatial: f64,
    pub gated_spatial_applied: bool,
    pub total: f64,
    pub diagnostics: RewardDiagnostics,
}

fn relative_term(pred: usize, gt: usize) -> f64 {
    let dev = (pred as f64 - gt as f64).abs();
    (1.0 - dev / gt.max(1) as f64).max(0.0)
}

/// Count fidelity in `[0, 1]` (the outer `w_count` is applied in the total).
pub fn count_reward(n_obj_pred: usize, n_rel_pred: usize, n_obj_gt: usize, n_rel_gt: usize, weights: &RewardWeights) -> f64 {
    weights.lambda_obj * relative_term(n_obj_pred, n_obj_gt) + weights.lambda_rel * relative_term(n_rel_pred, n_rel_gt)
}

/// 1 when the answers agree under `mode`.
pub fn accuracy_reward(pred_answer: &str, gt_answer: &str, mode: AnswerMode) -> u8 {
    match (extract_answer_text(pred_answer, mode), extract_answer_text(gt_answer, mode)) {
        (Ok(p), Ok(g)) => u8::from(p == g),
        _ => 0,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpatialScore {
    pub reward: f64,
    pub raw_mean: f64,
    pub pairs: Vec<(usize, usize)>,
    pub pair_ciou: Vec<f64>,
}

/// Mean CIoU over Hungarian-matched pairs; 0 when either side is empty.
pub fn spatial_reward(
    pred: &[ObjectNode],
    gt: &[ObjectNode],
    weights: &RewardWeights,
    clamp_negative: bool,
) -> Result<SpatialScore, crate::matcher::MatchError> {
    let m = match_objects(pred, gt, weights.cost_weights())?;
    if m.pairs.is_empty() {
        return Ok(SpatialScore { pairs: m.pairs, ..SpatialScore::default() });
    }
    let mut pair_ciou = Vec::with_capacity(m.pairs.len());
    for &(p, g) in &m.pairs {
        pair_ciou.push(ciou(&pred[p].bbox, &gt[g].bbox)?.ciou);
    }
    let n = pair_ciou.len() as f64;
    let raw_mean = pair_ciou.iter().sum::<f64>() / n;
    let reward = if clamp_negative { pair_ciou.iter().map(|c| c.max(0.0)).sum::<f64>() / n } else { raw_mean };
    Ok(SpatialScore { reward, raw_mean, pairs: m.pairs, pair_ciou })
}

/// Scores one completion against its ground truth.
pub fn total_reward(raw_response: &str, truth: &GroundTruth, cfg: &ScoringConfig) -> RewardBreakdown {
    let w = &cfg.weights;
    let verdict = format_reward(raw_response);
    let mut r_format = verdict.reward;
    let mut diagnostics = RewardDiagnostics {
        n_obj_gt: truth.n_obj(),
        n_rel_gt: truth.n_rel(),
        violations: verdict.violations.iter().map(ViolationRecord::from).collect(),
        ..RewardDiagnostics::default()
    };

    // Best-effort extraction so components are still reported when format fails.
    let parsed = parse_response(raw_response)
        .or_else(|_| parse_response_with(raw_response, ParseOptions { lenient_order: true }))
        .ok();
    let scene = parsed.as_ref().and_then(|p| p.scene.as_ref());

    if cfg.strict_vocab {
        if let (Some(g), Some(vocab)) = (scene, cfg.vocabulary.as_ref()) {
            let extra: Vec<_> = validate_graph(g, Some(vocab))
                .into_iter()
                .filter(|v| matches!(v, Violation::UnknownPredicate { .. }))
                .collect();
            if !extra.is_empty() {
                r_format = 0;
                diagnostics.violations.extend(extra.iter().map(ViolationRecord::from));
            }
        }
    }

    let (n_obj_pred, n_rel_pred) = scene.map_or((0, 0), |g| (g.num_objects(), g.num_relations()));
    diagnostics.n_obj_pred = n_obj_pred;
    diagnostics.n_rel_pred = n_rel_pred;
    let r_count = count_reward(n_obj_pred, n_rel_pred, truth.n_obj(), truth.n_rel(), w);

    let r_accuracy = match parsed.as_ref() {
        Some(p) => {
            diagnostics.predicted_answer = extract_answer_text(&p.answer, cfg.accuracy_mode).ok();
            accuracy_reward(&p.answer, &truth.answer, cfg.accuracy_mode)
        }
        None => 0,
    };

    let r_spatial = match scene {
        Some(g) => match spatial_reward(&g.objects, &truth.subgraph.objects, w, cfg.clamp_negative_ciou) {
            Ok(s) => {
                diagnostics.pairs = s.pairs;
                diagnostics.pair_ciou = s.pair_ciou;
                diagnostics.raw_spatial_mean = s.raw_mean;
                s.reward
            }
            Err(e) => {
                diagnostics.violations.push(ViolationRecord { code: "SpatialError".into(), detail: e.to_string() });
                0.0
            }
        },
        None => 0.0,
    };

    let gated_spatial_applied = r_format == 1 && r_accuracy == 1;
    let total = if r_format == 1 {
        let spatial = if gated_spatial_applied { w.w_spatial * r_spatial } else { 0.0 };
        w.w_format + w.w_count * r_count + w.w_accuracy * f64::from(r_accuracy) + spatial
    } else {
        0.0
    };

    RewardBreakdown { r_format, r_count, r_accuracy, r_spatial, gated_spatial_applied, total, diagnostics }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{responses} responses but {truths} ground truths")]
pub struct LengthMismatch {
    pub responses: usize,
    pub truths: usize,
}

/// Element-wise [`total_reward`], order preserving.
pub fn score_batch<S: AsRef<str> + Sync>(
    responses: &[S],
    truths: &[GroundTruth],
    cfg: &ScoringConfig,
) -> Result<Vec<RewardBreakdown>, LengthMismatch> {
    if responses.len() != truths.len() {
        return Err(LengthMismatch { responses: responses.len(), truths: truths.len() });
    }
    Ok(responses.par_iter().zip(truths.par_iter()).map(|(r, t)| total_reward(r.as_ref(), t, cfg)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{serialize_scene, BBox, RelationTriplet};

    fn truth() -> GroundTruth {
        let g = SceneGraph::new(
            vec![
                ObjectNode::new("cube.1", "red cube", BBox::new(10.0, 10.0, 50.0, 50.0)),
                ObjectNode::new("sphere.1", "green sphere", BBox::new(80.0, 10.0, 120.0, 50.0)),
            ],
            vec![RelationTriplet::new("cube.1", "left of", "sphere.1")],
        );
        GroundTruth::new("(C) The red cube is left of the green sphere", g)
    }

    fn completion(scene: &SceneGraph, answer: &str) -> String {
        format!(
            "<observe>two shapes</observe><scene>{}</scene><think>compare x</think><answer>{answer}</answer>",
            serialize_scene(scene).unwrap()
        )
    }

    #[test]
    fn default_weights_valid() {
        RewardWeights::default().validate().unwrap();
        let bad = RewardWeights { w_format: 0.3, ..RewardWeights::default() };
        assert!(matches!(bad.validate(), Err(WeightsError::ComponentSum(_))));
        let bad = RewardWeights { lambda_rel: 0.5, ..RewardWeights::default() };
        assert!(matches!(bad.validate(), Err(WeightsError::CountSplit(_))));
        let bad = RewardWeights { lambda_semantic: -1.0, ..RewardWeights::default() };
        assert_eq!(bad.validate(), Err(WeightsError::Negative("lambda_semantic")));
    }

    #[test]
    fn count_reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(count_reward(3, 2, 3, 2, &w), 1.0);
        assert!((count_reward(4, 1, 2, 1, &w) - 0.3).abs() < 1e-12);
        assert_eq!(count_reward(0, 0, 0, 0, &w), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_reward("(C) left of", "(C) left of", AnswerMode::Strict), 1);
        assert_eq!(accuracy_reward("(C) left of", "(B) right of", AnswerMode::Strict), 0);
        assert_eq!(accuracy_reward("(C) left of", "C", AnswerMode::Letter), 1);
        assert_eq!(accuracy_reward("(C) left of", "C", AnswerMode::Strict), 0);
        assert_eq!(accuracy_reward("", "", AnswerMode::Strict), 0);
    }

    #[test]
    fn spatial_examples() {
        let w = RewardWeights::default();
        let gt = truth().subgraph.objects;
        assert_eq!(spatial_reward(&gt, &gt, &w, true).unwrap().reward, 1.0);
        let far = vec![ObjectNode::new("x", "box", BBox::new(0.0, 0.0, 10.0, 10.0))];
        let near = vec![ObjectNode::new("y", "box", BBox::new(20.0, 0.0, 30.0, 10.0))];
        let s = spatial_reward(&far, &near, &w, true).unwrap();
        assert_eq!(s.reward, 0.0);
        assert!((s.raw_mean + 0.4).abs() < 1e-12);
        assert!((spatial_reward(&far, &near, &w, false).unwrap().reward + 0.4).abs() < 1e-12);
        assert_eq!(spatial_reward(&[], &gt, &w, true).unwrap().reward, 0.0);
    }

    #[test]
    fn perfect_response_scores_one() {
        let t = truth();
        let b = total_reward(&completion(&t.subgraph, &t.answer), &t, &ScoringConfig::default());
        assert_eq!((b.r_format, b.r_accuracy), (1, 1));
        assert_eq!(b.r_count, 1.0);
        assert_eq!(b.r_spatial, 1.0);
        assert!(b.gated_spatial_applied);
        assert!((b.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn format_failure_zeroes_total_but_keeps_diagnostics() {
        let t = truth();
        let raw = completion(&t.subgraph, &t.answer).replace("<think>", "<thonk>");
        let b = total_reward(&raw, &t, &ScoringConfig::default());
        assert_eq!(b.r_format, 0);
        assert_eq!(b.total, 0.0);
        assert!(!b.gated_spatial_applied);
        assert!(!b.diagnostics.violations.is_empty());

        // Out-of-order tags still expose the components.
        let swapped = format!(
            "<observe>o</observe><think>t</think><scene>{}</scene><answer>{}</answer>",
            serialize_scene(&t.subgraph).unwrap(),
            t.answer
        );
        let b = total_reward(&swapped, &t, &ScoringConfig::default());
        assert_eq!((b.r_format, b.r_accuracy, b.r_count, b.r_spatial, b.total), (0, 1, 1.0, 1.0, 0.0));
    }

    #[test]
    fn wrong_answer_gates_spatial() {
        let t = truth();
        let b = total_reward(&completion(&t.subgraph, "(B) right of"), &t, &ScoringConfig::default());
        assert_eq!(b.r_accuracy, 0);
        assert_eq!(b.r_spatial, 1.0);
        assert!(!b.gated_spatial_applied);
        assert!((b.total - 0.3).abs() < 1e-12);
    }

    #[test]
    fn strict_vocabulary_can_fail_format() {
        let t = truth();
        let cfg = ScoringConfig {
            strict_vocab: true,
            vocabulary: Some(PredicateVocabulary::new(["on"], ["near"]).unwrap()),
            ..ScoringConfig::default()
        };
        let b = total_reward(&completion(&t.subgraph, &t.answer), &t, &cfg);
        assert_eq!(b.r_format, 0);
        assert_eq!(b.total, 0.0);
        assert!(b.diagnostics.violations.iter().any(|v| v.code == "UnknownPredicate"));
    }

    #[test]
    fn batch_scoring() {
        let t = truth();
        let cfg = ScoringConfig::default();
        let none: Vec<String> = Vec::new();
        assert!(score_batch(&none, &[], &cfg).unwrap().is_empty());
        let responses: Vec<String> = (0..8)
            .map(|i| if i % 2 == 0 { completion(&t.subgraph, &t.answer) } else { format!("junk {i}") })
            .collect();
        let truths = vec![t.clone(); 8];
        let out = score_batch(&responses, &truths, &cfg).unwrap();
        assert_eq!(out.len(), 8);
        for (i, b) in out.iter().enumerate() {
            assert_eq!(b.r_format, u8::from(i % 2 == 0));
        }
        assert_eq!(score_batch(&responses, &truths[..3], &cfg), Err(LengthMismatch { responses: 8, truths: 3 }));
    }

    #[test]
    fn breakdown_serializes_every_field() {
        let t = truth();
        let b = total_reward(&completion(&t.subgraph, &t.answer), &t, &ScoringConfig::default());
        let v: serde_json::Value = serde_json::to_value(&b).unwrap();
        for key in ["r_format", "r_count", "r_accuracy", "r_spatial", "gated_spatial_applied", "total", "diagnostics"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: RewardBreakdown = serde_json::from_value(v).unwrap();
        assert_eq!(back, b);
    }
}
