//! Thompson-sampling bandit over annotations with value-of-information driven
//! arm creation.
//!
//! Arms are Beta-Bernoulli. Whether to mint a new arm is decided by comparing
//! the expected successes over the remaining horizon with and without the
//! attempt, each estimated by simulating Thompson sampling on `k` sampled
//! ground-truth probability vectors.
//!
//! # Seed protocol
//!
//! Every Monte-Carlo quantity is a pure function of a `u64` seed. For
//! probability set `j` the streams are
//! `derive_seed(seed, &[j, STREAM_TRUTH])` for existing arms' true rates,
//! `derive_seed(seed, &[j, STREAM_NEW_ARM])` for the candidate arm's rate,
//! `derive_seed(seed, &[j, STREAM_DRAWS])` for posterior draws, and
//! `derive_seed(seed, &[j, STREAM_OUTCOMES, i])` for the reward table of arm
//! `i` (the `n`-th pull of arm `i` succeeds iff the `n`-th uniform is below
//! its true rate). Every stream is a fresh `ChaCha8Rng`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::seed::derive_seed;

pub const STREAM_TRUTH: u64 = 0;
pub const STREAM_DRAWS: u64 = 1;
pub const STREAM_OUTCOMES: u64 = 2;
pub const STREAM_NEW_ARM: u64 = 3;

/// Clamp applied to prior-fit samples so their logs stay finite.
pub const SAMPLE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BanditError {
    #[error("no arms")]
    NoArms,
    #[error("goal already reached")]
    GoalReached,
    #[error("arm index {0} out of range")]
    BadIndex(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub annotation_id: String,
    pub n_suc: u64,
    pub n_fail: u64,
}

impl Arm {
    pub fn new(annotation_id: impl Into<String>) -> Self {
        Arm { annotation_id: annotation_id.into(), n_suc: 0, n_fail: 0 }
    }

    /// Posterior `Beta(n_suc + 1, n_fail + 1)` parameters.
    pub fn posterior(&self) -> (f64, f64) {
        (self.n_suc as f64 + 1.0, self.n_fail as f64 + 1.0)
    }

    pub fn posterior_mean(&self) -> f64 {
        let (a, b) = self.posterior();
        a / (a + b)
    }

    pub fn pulls(&self) -> u64 {
        self.n_suc + self.n_fail
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanditState {
    pub arms: Vec<Arm>,
    pub new_arm_attempts: u64,
    pub new_arm_successes: u64,
    #[serde(rename = "goal")]
    pub goal_successes: u64,
    #[serde(rename = "current")]
    pub current_successes: u64,
    pub seed: u64,
}

impl BanditState {
    pub fn new(goal_successes: u64, seed: u64) -> Self {
        BanditState {
            arms: Vec::new(),
            new_arm_attempts: 0,
            new_arm_successes: 0,
            goal_successes,
            current_successes: 0,
            seed,
        }
    }

    /// Updates the pulled arm's tally and the global success counter.
    pub fn record_outcome(&mut self, arm: usize, success: bool) -> Result<(), BanditError> {
        let a = self.arms.get_mut(arm).ok_or(BanditError::BadIndex(arm))?;
        if success {
            a.n_suc += 1;
            self.current_successes += 1;
        } else {
            a.n_fail += 1;
        }
        Ok(())
    }

    /// Books a new-arm attempt. A successful attempt enters the arm with one
    /// success; a failed one discards it. Returns the new arm's index.
    pub fn record_new_arm(&mut self, annotation_id: impl Into<String>, success: bool) -> Option<usize> {
        self.new_arm_attempts += 1;
        if !success {
            return None;
        }
        self.new_arm_successes += 1;
        self.current_successes += 1;
        self.arms.push(Arm { annotation_id: annotation_id.into(), n_suc: 1, n_fail: 0 });
        Some(self.arms.len() - 1)
    }

    pub fn best_posterior_mean(&self) -> Option<f64> {
        self.arms.iter().map(Arm::posterior_mean).reduce(f64::max)
    }
}

/// Functional form of [`BanditState::record_outcome`].
pub fn record_outcome(state: &BanditState, arm: usize, success: bool) -> Result<BanditState, BanditError> {
    let mut next = state.clone();
    next.record_outcome(arm, success)?;
    Ok(next)
}

fn beta(a: f64, b: f64) -> Beta<f64> {
    Beta::new(a, b).expect("positive Beta parameters")
}

/// One posterior draw per arm; returns the argmax (lowest index on ties).
pub fn thompson_select(state: &BanditState, rng: &mut impl Rng) -> Result<usize, BanditError> {
    if state.arms.is_empty() {
        return Err(BanditError::NoArms);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, arm) in state.arms.iter().enumerate() {
        let (a, b) = arm.posterior();
        let draw = beta(a, b).sample(rng);
        if draw > best.1 {
            best = (i, draw);
        }
    }
    Ok(best.0)
}

/// Laplace estimate of the chance that a freshly minted arm succeeds.
pub fn estimate_p_add(state: &BanditState) -> f64 {
    (state.new_arm_successes as f64 + 1.0) / (state.new_arm_attempts as f64 + 2.0)
}

/// Remaining rollouts needed at the best arm's posterior mean, rounded up.
pub fn estimate_horizon(state: &BanditState) -> Result<u64, BanditError> {
    if state.current_successes >= state.goal_successes {
        return Err(BanditError::GoalReached);
    }
    let best = state.best_posterior_mean().ok_or(BanditError::NoArms)?;
    let remaining = (state.goal_successes - state.current_successes) as f64;
    Ok(((remaining / best) - 1e-9).ceil().max(1.0) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorFit {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    /// Samples drawn per arm.
    pub m: usize,
}

impl PriorFit {
    pub fn mean(&self) -> f64 {
        self.alpha_hat / (self.alpha_hat + self.beta_hat)
    }
}

/// Trigamma function.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc + r + 0.5 * r2 + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 / 30.0)))
}

/// Sufficient statistics of a Beta sample: mean `ln x` and mean `ln(1 - x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaStats {
    pub n: usize,
    pub mean_ln_x: f64,
    pub mean_ln_1mx: f64,
    mean: f64,
    var: f64,
}

impl BetaStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        BetaStats {
            n: xs.len(),
            mean_ln_x: xs.iter().map(|x| x.ln()).sum::<f64>() / n,
            mean_ln_1mx: xs.iter().map(|x| (1.0 - x).ln()).sum::<f64>() / n,
            mean,
            var,
        }
    }

    /// Average log-likelihood of `Beta(a, b)` over the sample.
    pub fn mean_log_likelihood(&self, a: f64, b: f64) -> f64 {
        (a - 1.0) * self.mean_ln_x + (b - 1.0) * self.mean_ln_1mx - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b))
    }
}

/// Maximum-likelihood Beta parameters via damped Newton iterations on
/// `(ln a, ln b)`, started from the method of moments.
pub fn beta_mle(stats: &BetaStats) -> (f64, f64) {
    let common = stats.mean * (1.0 - stats.mean) / stats.var.max(1e-300) - 1.0;
    let (mut u, mut v) = if common.is_finite() && common > 0.0 {
        ((stats.mean * common).ln(), ((1.0 - stats.mean) * common).ln())
    } else {
        (0.0, 0.0)
    };
    let ll = |u: f64, v: f64| stats.mean_log_likelihood(u.exp(), v.exp());
    let mut cur = ll(u, v);
    for _ in 0..200 {
        let (a, b) = (u.exp(), v.exp());
        let psi_ab = digamma(a + b);
        let ga = stats.mean_ln_x - digamma(a) + psi_ab;
        let gb = stats.mean_ln_1mx - digamma(b) + psi_ab;
        let (gu, gv) = (a * ga, b * gb);
        if gu.abs().max(gv.abs()) < 1e-12 {
            break;
        }
        let t_ab = trigamma(a + b);
        let huu = gu + a * a * (t_ab - trigamma(a));
        let hvv = gv + b * b * (t_ab - trigamma(b));
        let huv = a * b * t_ab;
        let det = huu * hvv - huv * huv;
        let (mut du, mut dv) =
            if huu < 0.0 && det > 0.0 { ((-hvv * gu + huv * gv) / det, (huv * gu - huu * gv) / det) } else { (gu, gv) };
        let mut accepted = false;
        for _ in 0..60 {
            let next = ll(u + du, v + dv);
            if next.is_finite() && next >= cur {
                u += du;
                v += dv;
                cur = next;
                accepted = true;
                break;
            }
            du *= 0.5;
            dv *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (u.exp(), v.exp())
}

/// Pools `m` posterior draws per arm (clamped away from 0 and 1) and fits a
/// Beta distribution to them by maximum likelihood.
pub fn fit_arm_prior(arms: &[Arm], m: usize, rng: &mut impl Rng) -> Result<PriorFit, BanditError> {
    if arms.is_empty() {
        return Err(BanditError::NoArms);
    }
    let samples = pooled_prior_samples(arms, m, rng);
    let (alpha_hat, beta_hat) = beta_mle(&BetaStats::from_samples(&samples));
    Ok(PriorFit { alpha_hat, beta_hat, m })
}

/// The clamped pooled sample used by [`fit_arm_prior`].
pub fn pooled_prior_samples(arms: &[Arm], m: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut samples = Vec::with_capacity(arms.len() * m);
    for arm in arms {
        let (a, b) = arm.posterior();
        let d = beta(a, b);
        samples.extend((0..m).map(|_| d.sample(rng).clamp(SAMPLE_CLAMP, 1.0 - SAMPLE_CLAMP)));
    }
    samples
}

/// Arm in a simulated bandit run: starting tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualArm {
    pub n_suc: u64,
    pub n_fail: u64,
}

impl From<&Arm> for VirtualArm {
    fn from(a: &Arm) -> Self {
        VirtualArm { n_suc: a.n_suc, n_fail: a.n_fail }
    }
}

fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// `k` ground-truth probability vectors, one entry per arm, drawn from the
/// arms' posteriors.
pub fn sample_probability_sets(arms: &[VirtualArm], k: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..k as u64)
        .map(|j| {
            let mut rng = stream(seed, &[j, STREAM_TRUTH]);
            arms.iter().map(|a| beta(a.n_suc as f64 + 1.0, a.n_fail as f64 + 1.0).sample(&mut rng)).collect()
        })
        .collect()
}

/// Candidate-arm success rate for each probability set, drawn from the prior.
pub fn sample_new_arm_rates(prior: &PriorFit, k: usize, seed: u64) -> Vec<f64> {
    let d = beta(prior.alpha_hat, prior.beta_hat);
    (0..k as u64).map(|j| d.sample(&mut stream(seed, &[j, STREAM_NEW_ARM]))).collect()
}

/// Successes of one simulated Thompson-sampling run of `horizon` pulls.
pub fn simulate_thompson(truth: &[f64], arms: &[VirtualArm], horizon: u64, seed: u64, set: u64) -> u64 {
    debug_assert_eq!(truth.len(), arms.len());
    let mut draws = stream(seed, &[set, STREAM_DRAWS]);
    let mut outcomes: Vec<ChaCha8Rng> =
        (0..arms.len() as u64).map(|i| stream(seed, &[set, STREAM_OUTCOMES, i])).collect();
    let mut tallies: Vec<(f64, f64)> = arms.iter().map(|a| (a.n_suc as f64 + 1.0, a.n_fail as f64 + 1.0)).collect();
    let mut successes = 0;
    for _ in 0..horizon {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &(a, b)) in tallies.iter().enumerate() {
            let draw = beta(a, b).sample(&mut draws);
            if draw > best.1 {
                best = (i, draw);
            }
        }
        let i = best.0;
        let u: f64 = outcomes[i].random();
        if u < truth[i] {
            tallies[i].0 += 1.0;
            successes += 1;
        } else {
            tallies[i].1 += 1.0;
        }
    }
    successes
}

/// Mean successes of Thompson sampling over the given probability sets.
pub fn estimate_rollout_value(sets: &[Vec<f64>], arms: &[VirtualArm], horizon: u64, seed: u64) -> f64 {
    if horizon == 0 || sets.is_empty() || arms.is_empty() {
        return 0.0;
    }
    let total: u64 = sets.iter().enumerate().map(|(j, p)| simulate_thompson(p, arms, horizon, seed, j as u64)).sum();
    total as f64 / sets.len() as f64
}

/// All quantities compared by [`decide_new_arm`], for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewArmEvaluation {
    pub horizon: u64,
    pub p_add: f64,
    pub e_t: f64,
    pub e_t_minus_1: f64,
    pub e_t_minus_1_with_new: f64,
    pub e_add: f64,
    /// Number of probability sets shared by the three estimates.
    pub k: usize,
    /// The shared sets (existing arms' rates followed by the candidate's).
    #[serde(skip)]
    pub sets: Vec<Vec<f64>>,
    pub add: bool,
}

pub fn evaluate_new_arm(state: &BanditState, horizon: u64, prior: &PriorFit, k: usize, seed: u64) -> NewArmEvaluation {
    let p_add = estimate_p_add(state);
    if state.arms.is_empty() {
        return NewArmEvaluation {
            horizon,
            p_add,
            e_t: 0.0,
            e_t_minus_1: 0.0,
            e_t_minus_1_with_new: 0.0,
            e_add: p_add,
            k: 0,
            sets: Vec::new(),
            add: true,
        };
    }
    let arms: Vec<VirtualArm> = state.arms.iter().map(VirtualArm::from).collect();
    let sets = sample_probability_sets(&arms, k, seed);
    let new_rates = sample_new_arm_rates(prior, k, seed);
    let mut with_new_arms = arms.clone();
    with_new_arms.push(VirtualArm { n_suc: 1, n_fail: 0 });
    let with_new_sets: Vec<Vec<f64>> = sets
        .iter()
        .zip(&new_rates)
        .map(|(s, &p)| {
            let mut v = s.clone();
            v.push(p);
            v
        })
        .collect();

    let e_t = estimate_rollout_value(&sets, &arms, horizon, seed);
    let rest = horizon.saturating_sub(1);
    let e_t_minus_1 = estimate_rollout_value(&sets, &arms, rest, seed);
    let e_t_minus_1_with_new = estimate_rollout_value(&with_new_sets, &with_new_arms, rest, seed);
    let e_add = p_add * (1.0 + e_t_minus_1_with_new) + (1.0 - p_add) * e_t_minus_1;
    NewArmEvaluation {
        horizon,
        p_add,
        e_t,
        e_t_minus_1,
        e_t_minus_1_with_new,
        e_add,
        k,
        sets: with_new_sets,
        add: e_add > e_t,
    }
}

/// True when attempting a new arm now is worth more expected successes over
/// the horizon than pulling existing arms.
pub fn decide_new_arm(state: &BanditState, horizon: u64, prior: &PriorFit, k: usize, seed: u64) -> bool {
    evaluate_new_arm(state, horizon, prior, k, seed).add
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arm(s: u64, f: u64) -> Arm {
        Arm { annotation_id: format!("a{s}-{f}"), n_suc: s, n_fail: f }
    }

    fn state_with(arms: Vec<Arm>) -> BanditState {
        BanditState { arms, ..BanditState::new(100, 0) }
    }

    #[test]
    fn posterior_updates() {
        let s = state_with(vec![Arm::new("x")]);
        assert_eq!(record_outcome(&s, 0, true).unwrap().arms[0].posterior(), (2.0, 1.0));
        assert_eq!(record_outcome(&s, 0, false).unwrap().arms[0].posterior(), (1.0, 2.0));
        let s3 = [true, true, false].iter().fold(s.clone(), |s, &o| record_outcome(&s, 0, o).unwrap());
        assert_eq!(s3.arms[0].posterior(), (3.0, 2.0));
        assert_eq!(s3.current_successes, 2);
        assert_eq!(record_outcome(&s, 3, true), Err(BanditError::BadIndex(3)));
    }

    #[test]
    fn thompson_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(thompson_select(&state_with(vec![]), &mut rng), Err(BanditError::NoArms));
        let single = state_with(vec![arm(0, 0)]);
        assert!((0..100).all(|_| thompson_select(&single, &mut rng) == Ok(0)));

        let skewed = state_with(vec![arm(99, 1), arm(1, 99)]);
        let first = (0..10_000).filter(|_| thompson_select(&skewed, &mut rng) == Ok(0)).count();
        assert!(first >= 9_900, "{first}");

        let even = state_with(vec![arm(0, 0), arm(0, 0)]);
        let first = (0..10_000).filter(|_| thompson_select(&even, &mut rng) == Ok(0)).count();
        assert!((4_800..=5_200).contains(&first), "{first}");
    }

    #[test]
    fn p_add_and_horizon() {
        let mut s = state_with(vec![arm(2, 1)]);
        assert_eq!(estimate_p_add(&s), 0.5);
        s.new_arm_attempts = 10;
        s.new_arm_successes = 3;
        assert!((estimate_p_add(&s) - 4.0 / 12.0).abs() < 1e-15);
        s.new_arm_successes = 10;
        assert!((estimate_p_add(&s) - 11.0 / 12.0).abs() < 1e-15);

        s.goal_successes = 100;
        s.current_successes = 40;
        assert_eq!(estimate_horizon(&s), Ok(100));
        let mut s = state_with(vec![arm(8, 0)]);
        s.goal_successes = 10;
        s.current_successes = 9;
        assert_eq!(estimate_horizon(&s), Ok((1.0f64 / 0.9).ceil() as u64));
        // posterior mean 0.01 = 1/100 via Beta(1, 99)
        let mut s = state_with(vec![arm(0, 98)]);
        s.goal_successes = 5;
        assert_eq!(estimate_horizon(&s), Ok(500));
        s.current_successes = 5;
        assert_eq!(estimate_horizon(&s), Err(BanditError::GoalReached));
    }

    #[test]
    fn trigamma_matches_series() {
        // psi1(1) = pi^2/6, psi1(1/2) = pi^2/2
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-12);
        // finite difference of statrs digamma
        for &x in &[0.3, 2.7, 15.0, 120.0] {
            let h = 1e-5 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((trigamma(x) - fd).abs() < 1e-6 * trigamma(x).max(1.0), "{x}");
        }
    }

    /// Grid-search MLE over (ln a, ln b) with local refinement.
    fn grid_mle(stats: &BetaStats) -> (f64, f64, f64) {
        let mut best = (0.0, 0.0, f64::NEG_INFINITY);
        let mut span = 6.0;
        let mut center = (0.0, 0.0);
        for _ in 0..6 {
            let n = 60;
            for i in 0..=n {
                for j in 0..=n {
                    let u = center.0 - span + 2.0 * span * i as f64 / n as f64;
                    let v = center.1 - span + 2.0 * span * j as f64 / n as f64;
                    let l = stats.mean_log_likelihood(u.exp(), v.exp());
                    if l > best.2 {
                        best = (u, v, l);
                    }
                }
            }
            center = (best.0, best.1);
            span /= 8.0;
        }
        (best.0.exp(), best.1.exp(), best.2)
    }

    #[test]
    fn prior_fit_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = pooled_prior_samples(&[arm(0, 0)], 1000, &mut rng);
        let stats = BetaStats::from_samples(&samples);
        let (a, b) = beta_mle(&stats);
        let (ga, gb, gl) = grid_mle(&stats);
        assert!((a - ga).abs() < 1e-3 && (b - gb).abs() < 1e-3, "{a} {b} vs {ga} {gb}");
        assert!(stats.mean_log_likelihood(a, b) >= gl - 1e-12);
        assert!((0.85..=1.15).contains(&a) && (0.85..=1.15).contains(&b), "{a} {b}");
    }

    #[test]
    fn prior_fit_concentrated_and_bimodal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fit = fit_arm_prior(&[arm(49, 49)], 1000, &mut rng).unwrap();
        assert!((0.45..=0.55).contains(&fit.mean()));
        let samples = pooled_prior_samples(&[arm(49, 1), arm(1, 49)], 1000, &mut rng);
        let stats = BetaStats::from_samples(&samples);
        let (a, b) = beta_mle(&stats);
        let (ga, gb, _) = grid_mle(&stats);
        assert!(a < 1.5 && b < 1.5, "{a} {b}");
        assert!((a - ga).abs() < 1e-3 && (b - gb).abs() < 1e-3);
        assert_eq!(fit_arm_prior(&[], 10, &mut rng), Err(BanditError::NoArms));
    }

    #[test]
    fn prior_fit_beats_uniform_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for arms in [vec![arm(3, 7)], vec![arm(0, 0), arm(20, 2)], vec![arm(1, 0), arm(0, 4), arm(9, 9)]] {
            let samples = pooled_prior_samples(&arms, 1000, &mut rng);
            let stats = BetaStats::from_samples(&samples);
            let (a, b) = beta_mle(&stats);
            assert!(a > 0.0 && b > 0.0);
            assert!(stats.mean_log_likelihood(a, b) >= stats.mean_log_likelihood(1.0, 1.0));
        }
    }

    #[test]
    fn rollout_value_examples() {
        let one = [VirtualArm { n_suc: 0, n_fail: 0 }];
        let sure = vec![vec![1.0]; 50];
        assert_eq!(estimate_rollout_value(&sure, &one, 0, 1), 0.0);
        assert_eq!(estimate_rollout_value(&sure, &one, 10, 1), 10.0);
        let half = vec![vec![0.5]; 1000];
        let v = estimate_rollout_value(&half, &one, 100, 2);
        assert!((v - 50.0).abs() <= 1.5, "{v}");
    }

    #[test]
    fn rollout_value_monotone_in_horizon() {
        let arms = [VirtualArm { n_suc: 2, n_fail: 3 }, VirtualArm { n_suc: 5, n_fail: 1 }];
        let sets = sample_probability_sets(&arms, 200, 11);
        let mut prev = 0.0;
        for t in 0..40 {
            let v = estimate_rollout_value(&sets, &arms, t, 11);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn decision_examples() {
        let prior = |mean: f64| PriorFit { alpha_hat: 10.0 * mean, beta_hat: 10.0 * (1.0 - mean), m: 1000 };
        assert!(decide_new_arm(&state_with(vec![]), 10, &prior(0.3), 1000, 0));

        let mut strong = state_with(vec![arm(95, 5)]);
        strong.new_arm_attempts = 8;
        strong.new_arm_successes = 2;
        assert!((estimate_p_add(&strong) - 0.3).abs() < 1e-12);
        assert!(!decide_new_arm(&strong, 50, &prior(0.3), 1000, 7));

        let weak = state_with(vec![arm(1, 19)]);
        assert_eq!(estimate_p_add(&weak), 0.5);
        assert!(decide_new_arm(&weak, 200, &prior(0.5), 1000, 7));
    }

    #[test]
    fn decision_is_deterministic() {
        let s = state_with(vec![arm(3, 4), arm(1, 1)]);
        let prior = PriorFit { alpha_hat: 2.0, beta_hat: 3.0, m: 1000 };
        let a = evaluate_new_arm(&s, 30, &prior, 300, 99);
        let b = evaluate_new_arm(&s, 30, &prior, 300, 99);
        assert_eq!(a, b);
        assert_eq!(a.sets.len(), 300);
        assert!(a.sets.iter().all(|v| v.len() == 3));
    }

    #[test]
    fn regret_sanity() {
        let truth = [0.1, 0.5, 0.9];
        let reps = 40;
        let mut share = 0.0;
        for r in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(r);
            let mut s = state_with(vec![arm(0, 0), arm(0, 0), arm(0, 0)]);
            let mut best = 0;
            for _ in 0..500 {
                let i = thompson_select(&s, &mut rng).unwrap();
                let ok = rng.random::<f64>() < truth[i];
                s.record_outcome(i, ok).unwrap();
                best += (i == 2) as u32;
            }
            share += best as f64 / 500.0;
        }
        assert!(share / reps as f64 >= 0.8);
    }

    #[test]
    fn state_json_shape() {
        let s = state_with(vec![arm(1, 2)]);
        let v = serde_json::to_value(&s).unwrap();
        for key in ["arms", "new_arm_attempts", "new_arm_successes", "goal", "current", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["arms"][0]["annotation_id"], "a1-2");
        assert_eq!(serde_json::from_value::<BanditState>(v).unwrap(), s);
    }
}
