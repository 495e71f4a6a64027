//! Pairwise preference objective with analytic gradients, and a small
//! softmax-policy trainer for checking the objective end to end.
//!
//! For an item `(x, y_w, y_l)` the log-ratio margin is
//!
//! ```text
//! h = [log pi(y_w|x) - log ref(y_w|x)] - [log pi(y_l|x) - log ref(y_l|x)]
//! ```
//!
//! and the loss variants, with `s = -log(logistic(.))` (softplus of the
//! negated argument), are
//!
//! ```text
//! sigmoid  s(beta*h)
//! ipo      (h - 1/(2*beta))^2
//! hinge    max(0, 1 - beta*h)
//! robust   [(1-eps)*s(beta*h) - eps*s(-beta*h)] / (1 - 2*eps)
//! ```
//!
//! The trainer uses plain full-batch gradient descent. It exists to verify the
//! objective, not to reproduce any optimizer schedule.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DpoError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("robust epsilon must be in [0, 0.5), got {0}")]
    InvalidEpsilon(f64),
    #[error("policy shapes differ")]
    ShapeMismatch,
    #[error("context {context} / response {response} is out of range")]
    UnknownId { context: usize, response: usize },
    #[error("chosen and rejected are the same response ({0})")]
    SameResponse(usize),
    #[error("context {0} has fewer than two responses")]
    TooFewResponses(usize),
    #[error("learning rate must be non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("at least one step is required")]
    NoSteps,
    #[error("loss became non-finite at step {0}")]
    Divergence(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossType {
    #[default]
    Sigmoid,
    Ipo,
    Hinge,
    Robust,
}

impl LossType {
    pub const ALL: [LossType; 4] = [LossType::Sigmoid, LossType::Ipo, LossType::Hinge, LossType::Robust];

    pub fn as_str(self) -> &'static str {
        match self {
            LossType::Sigmoid => "sigmoid",
            LossType::Ipo => "ipo",
            LossType::Hinge => "hinge",
            LossType::Robust => "robust",
        }
    }
}

impl fmt::Display for LossType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossType::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown loss type {s:?} (expected sigmoid, ipo, hinge or robust)"))
    }
}

/// Objective hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub beta: f64,
    pub loss_type: LossType,
    pub robust_epsilon: f64,
}

impl Objective {
    pub fn new(beta: f64, loss_type: LossType, robust_epsilon: f64) -> Result<Self, DpoError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(DpoError::InvalidBeta(beta));
        }
        if !(0.0..0.5).contains(&robust_epsilon) {
            return Err(DpoError::InvalidEpsilon(robust_epsilon));
        }
        Ok(Objective {
            beta,
            loss_type,
            robust_epsilon,
        })
    }

    pub fn sigmoid(beta: f64) -> Result<Self, DpoError> {
        Self::new(beta, LossType::Sigmoid, 0.0)
    }

    pub fn loss(&self, h: f64) -> f64 {
        let z = self.beta * h;
        match self.loss_type {
            LossType::Sigmoid => softplus(-z),
            LossType::Ipo => {
                let d = h - 1.0 / (2.0 * self.beta);
                d * d
            }
            LossType::Hinge => (1.0 - z).max(0.0),
            LossType::Robust => {
                let e = self.robust_epsilon;
                ((1.0 - e) * softplus(-z) - e * softplus(z)) / (1.0 - 2.0 * e)
            }
        }
    }

    /// d loss / d h. The hinge kink at `beta*h = 1` takes the right-hand
    /// derivative (zero).
    pub fn dloss_dh(&self, h: f64) -> f64 {
        let b = self.beta;
        let z = b * h;
        match self.loss_type {
            LossType::Sigmoid => -b * logistic(-z),
            LossType::Ipo => 2.0 * (h - 1.0 / (2.0 * b)),
            LossType::Hinge => {
                if z < 1.0 {
                    -b
                } else {
                    0.0
                }
            }
            LossType::Robust => {
                let e = self.robust_epsilon;
                ((1.0 - e) * (-b * logistic(-z)) - e * (b * logistic(z))) / (1.0 - 2.0 * e)
            }
        }
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss for a single margin; see the module docs for the formulas.
pub fn dpo_loss(h: f64, beta: f64, loss_type: LossType, robust_epsilon: f64) -> Result<f64, DpoError> {
    Ok(Objective::new(beta, loss_type, robust_epsilon)?.loss(h))
}

/// Softmax policy over a small discrete response set per context.
/// Rows may have different lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    logits: Vec<Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self, DpoError> {
        if let Some(c) = logits.iter().position(|r| r.len() < 2) {
            return Err(DpoError::TooFewResponses(c));
        }
        Ok(ToyPolicy { logits })
    }

    /// Uniform policy (all logits zero).
    pub fn uniform(responses_per_context: &[usize]) -> Result<Self, DpoError> {
        Self::new(responses_per_context.iter().map(|&n| vec![0.0; n]).collect())
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn contexts(&self) -> usize {
        self.logits.len()
    }

    fn same_shape(&self, other: &ToyPolicy) -> bool {
        self.logits.len() == other.logits.len()
            && self
                .logits
                .iter()
                .zip(&other.logits)
                .all(|(a, b)| a.len() == b.len())
    }

    fn check_item(&self, item: &PreferenceItem) -> Result<(), DpoError> {
        let row = self.logits.get(item.context).ok_or(DpoError::UnknownId {
            context: item.context,
            response: item.chosen,
        })?;
        for r in [item.chosen, item.rejected] {
            if r >= row.len() {
                return Err(DpoError::UnknownId {
                    context: item.context,
                    response: r,
                });
            }
        }
        if item.chosen == item.rejected {
            return Err(DpoError::SameResponse(item.chosen));
        }
        Ok(())
    }

    /// Log-probabilities of one context's responses.
    pub fn log_probs(&self, context: usize) -> Vec<f64> {
        let row = &self.logits[context];
        let lse = log_sum_exp(row);
        row.iter().map(|&l| l - lse).collect()
    }

    pub fn probs(&self, context: usize) -> Vec<f64> {
        self.log_probs(context).into_iter().map(f64::exp).collect()
    }

    /// Shifts each row so its logits are normalized log-probabilities.
    fn renormalize(&mut self) {
        for row in &mut self.logits {
            let lse = log_sum_exp(row);
            for l in row.iter_mut() {
                *l -= lse;
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// One preference: in `context`, response `chosen` beats `rejected`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreferenceItem {
    pub context: usize,
    pub chosen: usize,
    pub rejected: usize,
}

/// Log-ratio margin of one item.
pub fn log_ratio_margin(
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    item: &PreferenceItem,
) -> Result<f64, DpoError> {
    if !theta.same_shape(reference) {
        return Err(DpoError::ShapeMismatch);
    }
    theta.check_item(item)?;
    let lt = theta.log_probs(item.context);
    let lr = reference.log_probs(item.context);
    Ok((lt[item.chosen] - lr[item.chosen]) - (lt[item.rejected] - lr[item.rejected]))
}

/// `beta * h`: positive iff the policy prefers the chosen response more than
/// the reference does.
pub fn implicit_reward_margin(
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    item: &PreferenceItem,
    beta: f64,
) -> Result<f64, DpoError> {
    Ok(beta * log_ratio_margin(theta, reference, item)?)
}

#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean loss and mean implicit reward margin over a batch.
pub fn batch_loss(
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferenceItem],
    objective: &Objective,
) -> Result<(f64, f64), DpoError> {
    if batch.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = Kahan::default();
    let mut margin = Kahan::default();
    for item in batch {
        let h = log_ratio_margin(theta, reference, item)?;
        loss.add(objective.loss(h));
        margin.add(objective.beta * h);
    }
    let n = batch.len() as f64;
    Ok((loss.value() / n, margin.value() / n))
}

/// Gradient of the mean batch loss with respect to `theta`'s logits.
/// The reference policy is frozen.
pub fn dpo_grad(
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferenceItem],
    objective: &Objective,
) -> Result<Vec<Vec<f64>>, DpoError> {
    if !theta.same_shape(reference) {
        return Err(DpoError::ShapeMismatch);
    }
    let mut acc: Vec<Vec<Kahan>> = theta
        .logits
        .iter()
        .map(|r| vec![Kahan::default(); r.len()])
        .collect();
    for item in batch {
        let h = log_ratio_margin(theta, reference, item)?;
        let dl = objective.dloss_dh(h);
        let p = theta.probs(item.context);
        // d log pi(y|x) / d logit_j = [j == y] - p_j
        for (j, cell) in acc[item.context].iter_mut().enumerate() {
            let dw = f64::from(u8::from(j == item.chosen)) - p[j];
            let dl_ = f64::from(u8::from(j == item.rejected)) - p[j];
            cell.add(dl * (dw - dl_));
        }
    }
    let n = batch.len().max(1) as f64;
    Ok(acc
        .into_iter()
        .map(|row| row.into_iter().map(|k| k.value() / n).collect())
        .collect())
}

/// Policy with logits drawn uniformly from `[-scale, scale)`.
pub fn random_policy(contexts: usize, responses: usize, scale: f64, rng: &mut Rng) -> ToyPolicy {
    assert!(responses >= 2, "need at least two responses per context");
    let logits = (0..contexts)
        .map(|_| (0..responses).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect();
    ToyPolicy { logits }
}

/// `pairs` preference items consistent with one hidden ranking per context,
/// so a policy can satisfy all of them at once.
pub fn random_preferences(contexts: usize, responses: usize, pairs: usize, rng: &mut Rng) -> Vec<PreferenceItem> {
    assert!(contexts > 0 && responses >= 2, "need a context with two responses");
    let rankings: Vec<Vec<usize>> = (0..contexts)
        .map(|_| {
            let mut r: Vec<usize> = (0..responses).collect();
            r.shuffle(rng);
            r
        })
        .collect();
    (0..pairs)
        .map(|_| {
            let context = rng.gen_range(0..contexts);
            let picks = index::sample(rng, responses, 2);
            let (a, b) = (picks.index(0), picks.index(1));
            // lower rank position is preferred
            let (hi, lo) = if a < b { (a, b) } else { (b, a) };
            PreferenceItem {
                context,
                chosen: rankings[context][hi],
                rejected: rankings[context][lo],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub objective: Objective,
}

/// Loss and margin before the update at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
}

/// Full-batch gradient descent on the logits. After every step each row is
/// shifted back to normalized log-probabilities.
pub fn train_toy(
    theta0: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferenceItem],
    config: &TrainConfig,
) -> Result<(ToyPolicy, Vec<StepRecord>), DpoError> {
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(DpoError::InvalidLearningRate(config.learning_rate));
    }
    if config.steps == 0 {
        return Err(DpoError::NoSteps);
    }
    if !theta0.same_shape(reference) {
        return Err(DpoError::ShapeMismatch);
    }
    let mut theta = theta0.clone();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, mean_margin) = batch_loss(&theta, reference, batch, &config.objective)?;
        if !loss.is_finite() {
            return Err(DpoError::Divergence(step));
        }
        history.push(StepRecord {
            step,
            loss,
            mean_margin,
        });
        if config.learning_rate == 0.0 {
            continue;
        }
        let grad = dpo_grad(&theta, reference, batch, &config.objective)?;
        for (row, g) in theta.logits.iter_mut().zip(&grad) {
            for (l, d) in row.iter_mut().zip(g) {
                *l -= config.learning_rate * d;
            }
        }
        theta.renormalize();
    }
    Ok((theta, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_arm(theta: [f64; 2], reference: [f64; 2]) -> (ToyPolicy, ToyPolicy) {
        (
            ToyPolicy::new(vec![theta.to_vec()]).unwrap(),
            ToyPolicy::new(vec![reference.to_vec()]).unwrap(),
        )
    }

    const ITEM: PreferenceItem = PreferenceItem {
        context: 0,
        chosen: 0,
        rejected: 1,
    };

    #[test]
    fn margin_examples() {
        let (t, r) = two_arm([0.4, -1.3], [0.4, -1.3]);
        assert_eq!(log_ratio_margin(&t, &r, &ITEM).unwrap(), 0.0);

        // h only depends on within-row logit differences, so unnormalized
        // log-probs work as logits here
        let (t, r) = two_arm([-1.0, -2.0], [-1.2, -1.5]);
        let h = log_ratio_margin(&t, &r, &ITEM).unwrap();
        assert!((h - 0.7).abs() < 1e-12);
        let swapped = PreferenceItem {
            chosen: 1,
            rejected: 0,
            ..ITEM
        };
        assert!((log_ratio_margin(&t, &r, &swapped).unwrap() + h).abs() < 1e-12);
    }

    #[test]
    fn margin_errors() {
        let t = ToyPolicy::new(vec![vec![0.0, 0.0]]).unwrap();
        let r = ToyPolicy::new(vec![vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(log_ratio_margin(&t, &r, &ITEM), Err(DpoError::ShapeMismatch));
        let bad = PreferenceItem {
            context: 0,
            chosen: 0,
            rejected: 5,
        };
        assert!(matches!(log_ratio_margin(&t, &t, &bad), Err(DpoError::UnknownId { .. })));
    }

    #[test]
    fn loss_examples() {
        assert!((dpo_loss(0.0, 0.3, LossType::Sigmoid, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // -log logistic(0.07), evaluated at 40 digits: 0.658759555548697...
        assert!((dpo_loss(0.7, 0.1, LossType::Sigmoid, 0.0).unwrap() - 0.658_759_555_548_697).abs() < 1e-14);
        assert!((dpo_loss(0.0, 0.1, LossType::Ipo, 0.0).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(dpo_loss(0.0, 0.1, LossType::Hinge, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn loss_parameter_errors() {
        assert_eq!(dpo_loss(0.0, 0.0, LossType::Sigmoid, 0.0), Err(DpoError::InvalidBeta(0.0)));
        assert_eq!(dpo_loss(0.0, 0.1, LossType::Robust, 0.5), Err(DpoError::InvalidEpsilon(0.5)));
    }

    #[test]
    fn loss_shape_properties() {
        let beta = 0.2;
        let hs: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.1).collect();
        let sig = Objective::sigmoid(beta).unwrap();
        for w in hs.windows(2) {
            assert!(sig.loss(w[1]) < sig.loss(w[0]));
        }
        let ipo = Objective::new(beta, LossType::Ipo, 0.0).unwrap();
        let argmin = 1.0 / (2.0 * beta);
        assert_eq!(ipo.loss(argmin), 0.0);
        assert!(ipo.loss(argmin + 0.01) > 0.0 && ipo.loss(argmin - 0.01) > 0.0);
        let hinge = Objective::new(beta, LossType::Hinge, 0.0).unwrap();
        for &h in &hs {
            if h >= 1.0 / beta {
                assert_eq!(hinge.loss(h), 0.0);
            }
        }
        let robust0 = Objective::new(beta, LossType::Robust, 0.0).unwrap();
        for &h in &hs {
            assert!((robust0.loss(h) - sig.loss(h)).abs() <= 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable_for_large_arguments() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!(Objective::sigmoid(10.0).unwrap().loss(-100.0).is_finite());
    }

    #[test]
    fn implicit_reward_examples() {
        let (t, r) = two_arm([0.0, 0.0], [0.0, 0.0]);
        assert_eq!(implicit_reward_margin(&t, &r, &ITEM, 0.1).unwrap(), 0.0);
        let (t, r) = two_arm([-1.0, -2.0], [-1.2, -1.5]);
        assert!((implicit_reward_margin(&t, &r, &ITEM, 0.1).unwrap() - 0.07).abs() < 1e-12);
        assert!((implicit_reward_margin(&t, &r, &ITEM, 0.15).unwrap() - 0.105).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_has_zero_gradient() {
        let t = ToyPolicy::new(vec![vec![0.3, -0.2, 1.0]]).unwrap();
        let g = dpo_grad(&t, &t, &[], &Objective::sigmoid(0.1).unwrap()).unwrap();
        assert_eq!(g, vec![vec![0.0; 3]]);
    }

    #[test]
    fn gradient_signs_at_reference() {
        let t = ToyPolicy::new(vec![vec![0.1, 0.5, -0.3]]).unwrap();
        let g = dpo_grad(&t, &t, &[ITEM], &Objective::sigmoid(0.1).unwrap()).unwrap();
        // descent direction is -g
        assert!(-g[0][0] > 0.0, "chosen logit should increase");
        assert!(-g[0][1] < 0.0, "rejected logit should decrease");
    }

    #[test]
    fn zero_learning_rate_keeps_theta() {
        let t = ToyPolicy::new(vec![vec![0.1, 0.5]]).unwrap();
        let r = ToyPolicy::new(vec![vec![0.0, 0.0]]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            steps: 1,
            objective: Objective::sigmoid(0.1).unwrap(),
        };
        let (out, hist) = train_toy(&t, &r, &[ITEM], &cfg).unwrap();
        assert_eq!(out, t);
        assert_eq!(hist.len(), 1);
        let (l0, _) = batch_loss(&t, &r, &[ITEM], &cfg.objective).unwrap();
        assert_eq!(hist[0].loss, l0);
    }

    #[test]
    fn two_arm_bandit_learns_the_preference() {
        let t = ToyPolicy::uniform(&[2]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            steps: 500,
            objective: Objective::sigmoid(0.1).unwrap(),
        };
        let (out, hist) = train_toy(&t, &t, &[ITEM], &cfg).unwrap();
        let p = out.probs(0);
        assert!(p[0] > p[1]);
        assert!(log_ratio_margin(&out, &t, &ITEM).unwrap() > 0.0);
        assert_eq!(hist.len(), 500);
    }

    #[test]
    fn small_steps_decrease_loss_monotonically() {
        let t = ToyPolicy::new(vec![vec![0.2, -0.1, 0.4], vec![0.0, 1.0, -1.0]]).unwrap();
        let r = ToyPolicy::new(vec![vec![0.1, 0.1, 0.0], vec![0.3, 0.2, 0.1]]).unwrap();
        let batch = [
            ITEM,
            PreferenceItem {
                context: 1,
                chosen: 2,
                rejected: 0,
            },
        ];
        for loss_type in [LossType::Sigmoid, LossType::Ipo, LossType::Robust] {
            let cfg = TrainConfig {
                learning_rate: 0.01,
                steps: 100,
                objective: Objective::new(0.1, loss_type, 0.1).unwrap(),
            };
            let (_, hist) = train_toy(&t, &r, &batch, &cfg).unwrap();
            for w in hist.windows(2) {
                assert!(w[1].loss <= w[0].loss + 1e-9, "{loss_type}: {:?}", w);
            }
        }
    }

    #[test]
    fn rows_stay_normalized() {
        let t = ToyPolicy::new(vec![vec![3.0, -2.0, 0.5, 0.0]]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1.0,
            steps: 50,
            objective: Objective::new(0.5, LossType::Ipo, 0.0).unwrap(),
        };
        let (out, _) = train_toy(&t, &t, &[ITEM], &cfg).unwrap();
        let sum: f64 = out.logits()[0].iter().map(|l| l.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reference_shift_changes_nothing() {
        let t = ToyPolicy::new(vec![vec![0.2, -0.1, 0.4]]).unwrap();
        let r = ToyPolicy::new(vec![vec![0.1, 0.7, 0.0]]).unwrap();
        let r_shift = ToyPolicy::new(vec![vec![5.1, 5.7, 5.0]]).unwrap();
        let obj = Objective::new(0.1, LossType::Robust, 0.2).unwrap();
        let h1 = log_ratio_margin(&t, &r, &ITEM).unwrap();
        let h2 = log_ratio_margin(&t, &r_shift, &ITEM).unwrap();
        assert!((h1 - h2).abs() < 1e-12);
        let g1 = dpo_grad(&t, &r, &[ITEM], &obj).unwrap();
        let g2 = dpo_grad(&t, &r_shift, &[ITEM], &obj).unwrap();
        for (a, b) in g1[0].iter().zip(&g2[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_preferences_are_consistent() {
        let mut rng = crate::rng::rng_from_seed(3);
        let items = random_preferences(4, 5, 200, &mut rng);
        let set: std::collections::HashSet<(usize, usize, usize)> =
            items.iter().map(|i| (i.context, i.chosen, i.rejected)).collect();
        for i in &items {
            assert_ne!(i.chosen, i.rejected);
            assert!(!set.contains(&(i.context, i.rejected, i.chosen)));
        }
    }

    #[test]
    fn divergence_is_reported() {
        // an IPO loss with a huge learning rate overshoots without bound
        let t = ToyPolicy::uniform(&[2]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e150,
            steps: 20,
            objective: Objective::new(0.1, LossType::Ipo, 0.0).unwrap(),
        };
        assert!(matches!(train_toy(&t, &t, &[ITEM], &cfg), Err(DpoError::Divergence(_))));
    }
}
