//! Gradient estimators for the expected-reward loss of a factorized output
//! distribution `P(Y) = Π_t p_t(y_t)`.
//!
//! Every estimator returns a [`GradientEstimate`]: the estimated derivative of
//! `L = -E[r(Y)]` with respect to each probability entry `p_t(y)`. The
//! exact oracle (full enumeration, two independent routes) lives in
//! [`oracle`]; the sampling estimators in [`reinforce`] are unbiased for it.
//!
//! Randomness is split into one ChaCha stream per
//! `(position, candidate, sample)` triple derived from a single base draw, so
//! results do not depend on evaluation order or thread count.

mod oracle;
mod reinforce;
mod sampling;
mod stats;

pub use oracle::{
    direct_expected_gradient, enumerate_expected_gradient, exact_reward_at,
    per_position_expected_gradient, ENUMERATION_BOUND, PROOF_IDENTITY_TOL,
};
pub use reinforce::{reinforce_nat_step, reinforce_nat_step_exact_rewards, reinforce_step};
pub(crate) use reinforce::reinforce_nat_step_keyed;
pub use sampling::{estimate_reward_at, StreamKey};
pub use stats::{estimator_stats, EstimatorSpec, EstimatorStats};

use rand::Rng;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result, Token};

/// Default traversing count `k`.
pub const DEFAULT_K: usize = 5;
/// Default Monte Carlo sample count `n` per reward estimate.
pub const DEFAULT_N: usize = 20;
pub const DEFAULT_RESIDUAL_EPSILON: f64 = 1e-6;

const ROW_SUM_TOL: f64 = 1e-9;

/// `T×V` row-stochastic matrix of per-position token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistributions {
    probs: Vec<f64>,
    len: usize,
    vocab: usize,
}

impl PositionDistributions {
    pub fn new(len: usize, vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if len == 0 || vocab == 0 || probs.len() != len * vocab {
            return Err(Error::Dimension(format!(
                "{} probabilities for a {len}×{vocab} distribution",
                probs.len()
            )));
        }
        for (t, row) in probs.chunks(vocab).enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::Contract(format!("row {t} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!("row {t} sums to {s}")));
            }
        }
        Ok(PositionDistributions { probs, len, vocab })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Dimension(format!("expected a T×V matrix, got {:?}", t.shape())));
        }
        Self::new(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let v = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != v) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), v, rows.concat())
    }

    pub fn uniform(len: usize, vocab: usize) -> Self {
        Self::new(len, vocab, vec![1.0 / vocab as f64; len * vocab]).expect("uniform rows")
    }

    /// Point masses on the given tokens.
    pub fn one_hot(tokens: &[Token], vocab: usize) -> Result<Self> {
        let mut probs = vec![0.0; tokens.len() * vocab];
        for (t, &y) in tokens.iter().enumerate() {
            if y as usize >= vocab {
                return Err(Error::Contract(format!("token {y} outside vocabulary {vocab}")));
            }
            probs[t * vocab + y as usize] = 1.0;
        }
        Self::new(tokens.len(), vocab, probs)
    }

    /// Softmax of Gaussian logits with standard deviation `sharpness`.
    pub fn random<R: Rng + ?Sized>(len: usize, vocab: usize, sharpness: f64, rng: &mut R) -> Self {
        let logits = Tensor::randn(&[len, vocab], sharpness, rng);
        let mut probs = Vec::with_capacity(len * vocab);
        for row in logits.data().chunks(vocab) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / s));
        }
        Self::new(len, vocab, probs).expect("softmax rows")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn prob(&self, t: usize, y: Token) -> f64 {
        self.probs[t * self.vocab + y as usize]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Joint probability of a full sequence under the factorization.
    pub fn joint(&self, seq: &[Token]) -> f64 {
        seq.iter().enumerate().map(|(t, &y)| self.prob(t, y)).product()
    }

    /// Most probable token per position.
    pub fn argmax(&self) -> Vec<Token> {
        (0..self.len)
            .map(|t| {
                let row = self.row(t);
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best as Token
            })
            .collect()
    }
}

/// Settings for the top-k traversal estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Traversing count.
    pub k: usize,
    /// Sampling times per reward estimate.
    pub n: usize,
    pub rng_seed: u64,
    /// The residual sample is skipped when `1 - P_k` falls below this.
    pub residual_epsilon: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            k: DEFAULT_K,
            n: DEFAULT_N,
            rng_seed: 0,
            residual_epsilon: DEFAULT_RESIDUAL_EPSILON,
        }
    }
}

impl EstimatorConfig {
    pub fn new(k: usize, n: usize) -> Self {
        EstimatorConfig {
            k,
            n,
            ..Default::default()
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.k > vocab {
            return Err(Error::Contract(format!(
                "traversing count k={} exceeds vocabulary size {vocab}",
                self.k
            )));
        }
        if self.n == 0 {
            return Err(Error::Contract("sampling times n must be at least 1".into()));
        }
        Ok(())
    }
}

/// The `k` most probable tokens at one position and what is left over.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKPartition {
    pub members: Vec<Token>,
    /// `P_k`, the probability mass of `members`.
    pub mass: f64,
    /// Remaining distribution with members zeroed, renormalised; all zeros
    /// when the leftover mass is below the residual epsilon.
    pub residual: Vec<f64>,
}

impl TopKPartition {
    /// Ties are broken towards the lower token id.
    pub fn build(row: &[f64], k: usize, residual_epsilon: f64) -> Self {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let members: Vec<Token> = order[..k.min(row.len())].iter().map(|&i| i as Token).collect();
        // The whole row is a probability distribution, so full traversal has mass one.
        let mass = if members.len() == row.len() {
            1.0
        } else {
            members.iter().map(|&y| row[y as usize]).sum::<f64>().min(1.0)
        };
        let mut residual = masked_weights(row, &members);
        if 1.0 - mass >= residual_epsilon {
            let s: f64 = residual.iter().sum();
            residual.iter_mut().for_each(|p| *p /= s);
        } else {
            residual.iter_mut().for_each(|p| *p = 0.0);
        }
        TopKPartition {
            members,
            mass,
            residual,
        }
    }

    pub fn has_residual(&self, residual_epsilon: f64) -> bool {
        1.0 - self.mass >= residual_epsilon
    }
}

fn masked_weights(row: &[f64], members: &[Token]) -> Vec<f64> {
    let mut w = row.to_vec();
    for &y in members {
        w[y as usize] = 0.0;
    }
    w
}

/// Estimated `dL/dp_t(y)` for every position and token.
///
/// The estimate is stored in two parts so the surrogate can route the
/// sampled term through `log p`: `prob_weights` multiply `p_t(y)` and
/// `log_prob_weights` multiply `log p_t(y)`. `dprobs` is their combined
/// derivative with respect to `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub len: usize,
    pub vocab: usize,
    pub dprobs: Vec<f64>,
    pub prob_weights: Vec<f64>,
    pub log_prob_weights: Vec<f64>,
}

impl GradientEstimate {
    pub(crate) fn zeros(len: usize, vocab: usize) -> Self {
        GradientEstimate {
            len,
            vocab,
            dprobs: vec![0.0; len * vocab],
            prob_weights: vec![0.0; len * vocab],
            log_prob_weights: vec![0.0; len * vocab],
        }
    }

    pub(crate) fn from_dprobs(len: usize, vocab: usize, dprobs: Vec<f64>) -> Self {
        GradientEstimate {
            len,
            vocab,
            prob_weights: dprobs.clone(),
            log_prob_weights: vec![0.0; dprobs.len()],
            dprobs,
        }
    }

    pub(crate) fn finish(&mut self, dist: &PositionDistributions) {
        for (i, d) in self.dprobs.iter_mut().enumerate() {
            let lw = self.log_prob_weights[i];
            *d = self.prob_weights[i] + if lw != 0.0 { lw / dist.as_slice()[i] } else { 0.0 };
        }
    }

    pub fn get(&self, t: usize, y: Token) -> f64 {
        self.dprobs[t * self.vocab + y as usize]
    }

    pub fn max_abs_diff(&self, other: &GradientEstimate) -> f64 {
        self.dprobs
            .iter()
            .zip(&other.dprobs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Scalar whose gradient with respect to the probabilities is this estimate:
    /// `Σ prob_weights ⊙ p + Σ log_prob_weights ⊙ log p`, with all weights
    /// held constant. `log_probs` should be the log-softmax of the same logits.
    pub fn surrogate(&self, g: &mut Graph, probs: Var, log_probs: Var) -> Result<Var> {
        let expect = [self.len, self.vocab];
        for v in [probs, log_probs] {
            if g.shape(v) != expect {
                return Err(Error::Dimension(format!(
                    "surrogate expects {expect:?}, got {:?}",
                    g.shape(v)
                )));
            }
        }
        let a = g.mul_const(probs, self.prob_weights.clone())?;
        let a = g.sum(a);
        if self.log_prob_weights.iter().all(|&w| w == 0.0) {
            return Ok(a);
        }
        let b = g.mul_const(log_probs, self.log_prob_weights.clone())?;
        let b = g.sum(b);
        g.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_must_be_stochastic() {
        assert!(PositionDistributions::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(PositionDistributions::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(PositionDistributions::new(1, 2, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn topk_ties_go_to_lower_id() {
        let p = TopKPartition::build(&[0.25, 0.25, 0.25, 0.25], 2, 1e-6);
        assert_eq!(p.members, vec![0, 1]);
        assert_eq!(p.mass, 0.5);
        assert_eq!(p.residual, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn topk_full_traversal_has_no_residual() {
        let row = [0.1, 0.6, 0.3];
        let p = TopKPartition::build(&row, 3, 1e-6);
        assert_eq!(p.members, vec![1, 2, 0]);
        assert!(!p.has_residual(1e-6));
        assert!(p.residual.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn topk_mass_is_monotone_in_k() {
        let mut rng = rand::rng();
        let dist = PositionDistributions::random(1, 12, 2.0, &mut rng);
        let masses: Vec<f64> = (0..=12)
            .map(|k| TopKPartition::build(dist.row(0), k, 1e-6).mass)
            .collect();
        assert!(masses.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(masses[12], 1.0);
        for k in 0..12 {
            let part = TopKPartition::build(dist.row(0), k, 1e-6);
            let s: f64 = part.residual.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for &m in &part.members {
                assert_eq!(part.residual[m as usize], 0.0);
            }
        }
    }

    #[test]
    fn k_larger_than_vocab_is_rejected() {
        assert!(EstimatorConfig::new(5, 1).validate(4).is_err());
        assert!(EstimatorConfig::new(4, 1).validate(4).is_ok());
    }
}
