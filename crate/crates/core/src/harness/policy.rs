//! Bigram softmax policy over a small token vocabulary, and a central
//! finite-difference check of the GRPO gradient through it.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::{grpo_loss_with_grad, GrpoConfig, GrpoError, RolloutGroup};
use crate::reward::{total_reward, GroundTruth, ScoringConfig};
use crate::scene_graph::{BBox, ObjectNode, RelationTriplet, SceneGraph};

pub const EOS: usize = 0;

/// Response fragment emitted by each token.
pub const FRAGMENTS: [&str; 16] = [
    "",
    "<observe> A cup sits beside a plate. </observe>",
    "<scene>",
    r#"{"objects":[{"id":"cup.1","label":"cup","bbox":[100,100,200,200]},{"id":"plate.1","label":"plate","bbox":[300,100,450,220]}],"relations":[["cup.1","left of","plate.1"]]}"#,
    "</scene>",
    "<think> The cup center is left of the plate center. </think>",
    "<answer> (A) The cup is left of the plate </answer>",
    "<answer> (B) The cup is right of the plate </answer>",
    " the",
    " cup",
    " plate",
    " left",
    " right",
    " so",
    " maybe",
    " hmm",
];

/// Logits `theta[ctx][v]`; context `vocab` is the start state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub vocab: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
}

impl Trajectory {
    /// `(context, token)` pairs, the first context being the start state.
    pub fn steps(&self, start: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(start).chain(self.tokens.iter().copied()).zip(self.tokens.iter().copied())
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|&t| FRAGMENTS[t % FRAGMENTS.len()]).collect()
    }
}

impl ToyPolicy {
    pub fn new(vocab: usize, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), (vocab + 1) * vocab, "theta shape");
        Self { vocab, theta }
    }

    pub fn random(vocab: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let theta = (0..(vocab + 1) * vocab).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::new(vocab, theta)
    }

    pub fn start(&self) -> usize {
        self.vocab
    }

    pub fn probs(&self, ctx: usize) -> Vec<f64> {
        let row = &self.theta[ctx * self.vocab..(ctx + 1) * self.vocab];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    pub fn log_prob(&self, ctx: usize, token: usize) -> f64 {
        let row = &self.theta[ctx * self.vocab..(ctx + 1) * self.vocab];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row[token] - lse
    }

    pub fn token_log_probs(&self, traj: &Trajectory) -> Vec<f64> {
        traj.steps(self.start()).map(|(c, t)| self.log_prob(c, t)).collect()
    }

    /// Samples until EOS or `max_len` tokens.
    pub fn sample(&self, max_len: usize, rng: &mut impl Rng) -> Trajectory {
        let mut tokens = Vec::new();
        let mut ctx = self.start();
        while tokens.len() < max_len {
            let dist = WeightedIndex::new(self.probs(ctx)).expect("softmax weights are positive");
            let tok = dist.sample(rng);
            tokens.push(tok);
            if tok == EOS {
                break;
            }
            ctx = tok;
        }
        Trajectory { tokens }
    }

    /// Adds `weight * d logp(token | ctx) / d theta` into `grad`.
    pub fn accumulate_log_prob_grad(&self, ctx: usize, token: usize, weight: f64, grad: &mut [f64]) {
        let p = self.probs(ctx);
        let row = &mut grad[ctx * self.vocab..(ctx + 1) * self.vocab];
        for (v, (g, pv)) in row.iter_mut().zip(p).enumerate() {
            *g += weight * (f64::from(u8::from(v == token)) - pv);
        }
    }
}

/// A scalar function of a parameter vector with an analytic gradient.
pub trait Differentiable {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences at step `h` against the analytic gradient.
pub fn finite_difference_check<D: Differentiable + ?Sized>(f: &D, x: &[f64], h: f64, floor: f64) -> GradCheckReport {
    assert_eq!(x.len(), f.dim());
    let analytic = f.gradient(x);
    let mut xp = x.to_vec();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f.value(&xp);
            xp[i] = orig - h;
            let down = f.value(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport { max_rel_error, worst_index, analytic, numeric }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub vocab: usize,
    pub group_size: usize,
    pub max_len: usize,
    pub step: f64,
    pub threshold: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Scale of the drift of the current policy away from the behavior policy.
    pub drift: f64,
    /// Corrupts the analytic gradient; for testing the checker itself.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            vocab: FRAGMENTS.len(),
            group_size: 6,
            max_len: 12,
            step: 1e-5,
            threshold: 1e-4,
            floor: 1e-7,
            drift: 0.1,
            inject_fault: false,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab < 2 || self.vocab > FRAGMENTS.len() {
            return Err(format!("vocab must lie in 2..={}", FRAGMENTS.len()));
        }
        if self.group_size < 2 || self.max_len == 0 {
            return Err("group_size must be >= 2 and max_len >= 1".into());
        }
        if !(self.step > 0.0 && self.threshold > 0.0 && self.floor > 0.0 && self.drift >= 0.0) {
            return Err("step, threshold and floor must be positive; drift non-negative".into());
        }
        Ok(())
    }
}

/// GRPO loss of a fixed sampled group as a function of the policy logits.
pub struct GrpoObjective {
    pub vocab: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
    pub cfg: GrpoConfig,
    pub inject_fault: bool,
}

impl GrpoObjective {
    fn group(&self, theta: &[f64]) -> RolloutGroup {
        let policy = ToyPolicy::new(self.vocab, theta.to_vec());
        let logp_new = self.trajectories.iter().map(|t| policy.token_log_probs(t)).collect();
        RolloutGroup::new(self.rewards.clone(), logp_new, self.logp_old.clone(), self.logp_ref.clone())
    }

    pub fn loss(&self, theta: &[f64]) -> Result<f64, GrpoError> {
        grpo_loss_with_grad(&self.group(theta), &self.cfg).map(|l| l.report.loss)
    }
}

impl Differentiable for GrpoObjective {
    fn dim(&self) -> usize {
        (self.vocab + 1) * self.vocab
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.loss(x).expect("group built from valid trajectories")
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let policy = ToyPolicy::new(self.vocab, x.to_vec());
        let out = grpo_loss_with_grad(&self.group(x), &self.cfg).expect("group built from valid trajectories");
        let mut grad = vec![0.0; self.dim()];
        for (traj, row) in self.trajectories.iter().zip(&out.grad_logp_new) {
            for ((ctx, tok), &w) in traj.steps(policy.start()).zip(row) {
                policy.accumulate_log_prob_grad(ctx, tok, w, &mut grad);
            }
        }
        if self.inject_fault {
            for g in grad.iter_mut().step_by(3) {
                *g *= 1.5;
            }
        }
        grad
    }
}

fn toy_truth() -> GroundTruth {
    let g = SceneGraph::new(
        vec![
            ObjectNode::new("cup.1", "cup", BBox::new(100.0, 100.0, 200.0, 200.0)),
            ObjectNode::new("plate.1", "plate", BBox::new(300.0, 100.0, 450.0, 220.0)),
        ],
        vec![RelationTriplet::new("cup.1", "left of", "plate.1")],
    );
    GroundTruth::new("(A) The cup is left of the plate", g)
}

/// Samples a group from a behavior policy, scores the decoded responses, and
/// returns the objective together with the drifted current parameters.
pub fn build_objective(cfg: &GradcheckConfig, grpo: &GrpoConfig, scoring: &ScoringConfig, seed: u64) -> (GrpoObjective, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let behavior = ToyPolicy::random(cfg.vocab, 1.0, &mut rng);
    let reference = ToyPolicy::new(
        cfg.vocab,
        behavior.theta.iter().map(|t| t + rng.random_range(-cfg.drift..=cfg.drift)).collect(),
    );
    let truth = toy_truth();
    let mut trajectories: Vec<Trajectory> = (0..cfg.group_size).map(|_| behavior.sample(cfg.max_len, &mut rng)).collect();
    let mut rewards: Vec<f64> = trajectories.iter().map(|t| total_reward(&t.text(), &truth, scoring).total).collect();
    // A group with equal rewards has zero advantages and nothing to check.
    if rewards.iter().all(|&r| r == rewards[0]) {
        trajectories[0] = Trajectory { tokens: vec![1, 2, 3, 4, 5, 6, EOS] };
        rewards[0] = total_reward(&trajectories[0].text(), &truth, scoring).total;
        if rewards.iter().all(|&r| r == rewards[0]) {
            rewards[0] += 1.0;
        }
    }
    let logp_old = trajectories.iter().map(|t| behavior.token_log_probs(t)).collect();
    let logp_ref = trajectories.iter().map(|t| reference.token_log_probs(t)).collect();
    let current: Vec<f64> = behavior.theta.iter().map(|t| t + rng.random_range(-cfg.drift..=cfg.drift)).collect();
    let objective = GrpoObjective {
        vocab: cfg.vocab,
        trajectories,
        rewards,
        logp_old,
        logp_ref,
        cfg: *grpo,
        inject_fault: cfg.inject_fault,
    };
    (objective, current)
}

pub fn run_gradcheck(cfg: &GradcheckConfig, grpo: &GrpoConfig, scoring: &ScoringConfig, seed: u64) -> GradCheckReport {
    let (objective, theta) = build_objective(cfg, grpo, scoring, seed);
    finite_difference_check(&objective, &theta, cfg.step, cfg.floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        a: Vec<f64>,
    }

    impl Differentiable for Quadratic {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            x.iter().zip(&self.a).map(|(x, a)| a * x * x).sum()
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            x.iter().zip(&self.a).map(|(x, a)| 2.0 * a * x).collect()
        }
    }

    #[test]
    fn quadratic_passes() {
        let f = Quadratic { a: vec![1.0, -2.0, 0.5] };
        let r = finite_difference_check(&f, &[0.3, 1.2, -4.0], 1e-5, 1e-7);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ToyPolicy::random(16, 5.0, &mut rng);
        for ctx in 0..=16 {
            let s: f64 = p.probs(ctx).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for v in 0..16 {
                assert!(p.log_prob(ctx, v).is_finite());
                assert!((p.log_prob(ctx, v).exp() - p.probs(ctx)[v]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_stops_at_eos_or_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ToyPolicy::random(16, 1.0, &mut rng);
        for _ in 0..50 {
            let t = p.sample(7, &mut rng);
            assert!(!t.tokens.is_empty() && t.tokens.len() <= 7);
            assert!(t.tokens[..t.tokens.len() - 1].iter().all(|&x| x != EOS));
        }
    }

    #[test]
    fn perfect_token_sequence_scores_one() {
        let t = Trajectory { tokens: vec![1, 2, 3, 4, 5, 6, EOS] };
        let r = total_reward(&t.text(), &toy_truth(), &ScoringConfig::default());
        assert!((r.total - 1.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn grpo_gradient_matches_finite_differences() {
        let cfg = GradcheckConfig::default();
        let r = run_gradcheck(&cfg, &GrpoConfig::default(), &ScoringConfig::default(), 42);
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
        assert!(r.analytic.iter().any(|g| g.abs() > 1e-6));
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = GradcheckConfig { inject_fault: true, ..Default::default() };
        let r = run_gradcheck(&cfg, &GrpoConfig::default(), &ScoringConfig::default(), 42);
        assert!(r.max_rel_error > 1e-2);
    }
}
