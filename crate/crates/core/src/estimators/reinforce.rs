//! Sampling estimators: plain REINFORCE over per-position expected rewards,
//! and the top-k traversal estimator that handles the `k` most probable
//! tokens exactly and the remaining mass with one weighted sample.

use rand::Rng;
use rayon::prelude::*;

use super::sampling::{estimate_with, sample_weighted, RowSamplers, Slot, StreamKey};
use super::{
    exact_reward_at, masked_weights, EstimatorConfig, GradientEstimate, PositionDistributions,
    TopKPartition,
};
use crate::rewards::Reward;
use crate::{Result, Token};

/// How `r(y_t)` is obtained for a candidate.
#[derive(Clone, Copy)]
enum RewardSource<'a> {
    MonteCarlo { samplers: &'a RowSamplers, n: usize },
    Exact,
}

struct PositionTerms {
    prob_weights: Vec<(Token, f64)>,
    log_prob_weight: Option<(Token, f64)>,
}

#[allow(clippy::too_many_arguments)]
fn candidate_reward(
    source: RewardSource<'_>,
    dist: &PositionDistributions,
    t: usize,
    y: Token,
    reward: &dyn Reward,
    reference: &[Token],
    key: StreamKey,
    slot: Slot,
) -> Result<f64> {
    match source {
        RewardSource::MonteCarlo { samplers, n } => Ok(estimate_with(
            samplers,
            dist.len(),
            t,
            y,
            n,
            reward,
            reference,
            key,
            slot,
        )),
        RewardSource::Exact => exact_reward_at(dist, t, y, reward, reference),
    }
}

#[allow(clippy::too_many_arguments)]
fn traverse_position(
    dist: &PositionDistributions,
    t: usize,
    k: usize,
    residual_epsilon: f64,
    source: RewardSource<'_>,
    reward: &dyn Reward,
    reference: &[Token],
    key: StreamKey,
) -> Result<PositionTerms> {
    let row = dist.row(t);
    let part = TopKPartition::build(row, k, residual_epsilon);
    let mut prob_weights = Vec::with_capacity(part.members.len());
    for (j, &y) in part.members.iter().enumerate() {
        let r = candidate_reward(source, dist, t, y, reward, reference, key, Slot::Member(j))?;
        prob_weights.push((y, -r));
    }
    let log_prob_weight = if part.has_residual(residual_epsilon) {
        // Unnormalised masked weights: sampling is invariant to the scale.
        let weights = masked_weights(row, &part.members);
        let y = sample_weighted(&weights, &mut key.stream(t, Slot::Select, 0))?;
        let r = candidate_reward(source, dist, t, y, reward, reference, key, Slot::Residual)?;
        Some((y, -(1.0 - part.mass) * r))
    } else {
        None
    };
    Ok(PositionTerms {
        prob_weights,
        log_prob_weight,
    })
}

fn assemble(dist: &PositionDistributions, terms: Vec<PositionTerms>) -> GradientEstimate {
    let vocab = dist.vocab();
    let mut est = GradientEstimate::zeros(dist.len(), vocab);
    for (t, pt) in terms.into_iter().enumerate() {
        for (y, w) in pt.prob_weights {
            est.prob_weights[t * vocab + y as usize] += w;
        }
        if let Some((y, w)) = pt.log_prob_weight {
            est.log_prob_weights[t * vocab + y as usize] += w;
        }
    }
    est.finish(dist);
    est
}

fn run(
    dist: &PositionDistributions,
    k: usize,
    residual_epsilon: f64,
    source: RewardSource<'_>,
    reward: &dyn Reward,
    reference: &[Token],
    key: StreamKey,
) -> Result<GradientEstimate> {
    let terms = (0..dist.len())
        .into_par_iter()
        .map(|t| traverse_position(dist, t, k, residual_epsilon, source, reward, reference, key))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(dist, terms))
}

/// Top-k traversal estimator.
///
/// At every position the `k` most probable tokens contribute
/// `-r̂(y) ∇p(y)` and, unless the leftover mass is negligible, one token
/// drawn from the renormalised remainder contributes
/// `-(1 - P_k) r̂(ỹ) ∇log p(ỹ)`. Each `r̂` is an independent Monte Carlo
/// estimate with `config.n` samples.
pub fn reinforce_nat_step<R: Rng + ?Sized>(
    dist: &PositionDistributions,
    config: &EstimatorConfig,
    reward: &dyn Reward,
    reference: &[Token],
    rng: &mut R,
) -> Result<GradientEstimate> {
    config.validate(dist.vocab())?;
    let key = StreamKey::draw(rng);
    reinforce_nat_step_keyed(dist, config, reward, reference, key)
}

pub(crate) fn reinforce_nat_step_keyed(
    dist: &PositionDistributions,
    config: &EstimatorConfig,
    reward: &dyn Reward,
    reference: &[Token],
    key: StreamKey,
) -> Result<GradientEstimate> {
    config.validate(dist.vocab())?;
    let samplers = RowSamplers::new(dist);
    let source = RewardSource::MonteCarlo {
        samplers: &samplers,
        n: config.n,
    };
    run(dist, config.k, config.residual_epsilon, source, reward, reference, key)
}

/// The top-k estimator with every `r(y_t)` computed by exact marginalisation.
pub fn reinforce_nat_step_exact_rewards<R: Rng + ?Sized>(
    dist: &PositionDistributions,
    config: &EstimatorConfig,
    reward: &dyn Reward,
    reference: &[Token],
    rng: &mut R,
) -> Result<GradientEstimate> {
    if config.k > dist.vocab() {
        config.validate(dist.vocab())?;
    }
    let key = StreamKey::draw(rng);
    run(dist, config.k, config.residual_epsilon, RewardSource::Exact, reward, reference, key)
}

/// REINFORCE on the per-position form: one sampled token per position,
/// weighted by its Monte Carlo expected reward.
pub fn reinforce_step<R: Rng + ?Sized>(
    dist: &PositionDistributions,
    reward: &dyn Reward,
    reference: &[Token],
    n: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    EstimatorConfig::new(0, n).validate(dist.vocab())?;
    let key = StreamKey::draw(rng);
    let samplers = RowSamplers::new(dist);
    let terms = (0..dist.len())
        .into_par_iter()
        .map(|t| {
            let y = sample_weighted(dist.row(t), &mut key.stream(t, Slot::Select, 0))?;
            let r = estimate_with(&samplers, dist.len(), t, y, n, reward, reference, key, Slot::Residual);
            Ok(PositionTerms {
                prob_weights: Vec::new(),
                log_prob_weight: Some((y, -r)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(dist, terms))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::estimators::enumerate_expected_gradient;

    fn gleu(h: &[Token], r: &[Token]) -> f64 {
        crate::rewards::gleu(h, r)
    }

    #[test]
    fn full_traversal_with_exact_rewards_is_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dist = PositionDistributions::random(3, 4, 1.5, &mut rng);
        let reference = [1, 3, 2];
        let oracle = enumerate_expected_gradient(&dist, &gleu, &reference).unwrap();
        let est = reinforce_nat_step_exact_rewards(
            &dist,
            &EstimatorConfig::new(4, 1),
            &gleu,
            &reference,
            &mut rng,
        )
        .unwrap();
        assert!(est.max_abs_diff(&oracle) <= 1e-10);
        assert!(est.log_prob_weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn k_zero_matches_plain_reinforce_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dist = PositionDistributions::random(4, 6, 1.0, &mut rng);
        let reference = [1, 2, 3, 4];
        let a = reinforce_step(&dist, &gleu, &reference, 7, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = reinforce_nat_step(
            &dist,
            &EstimatorConfig::new(0, 7),
            &gleu,
            &reference,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_reward_gives_zero_gradient() {
        let dist = PositionDistributions::uniform(3, 3);
        let zero = |_: &[Token], _: &[Token]| 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let g = reinforce_step(&dist, &zero, &[], 3, &mut rng).unwrap();
            assert!(g.dprobs.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn one_hot_rows_force_the_sample() {
        let tokens = [2, 0, 1];
        let dist = PositionDistributions::one_hot(&tokens, 3).unwrap();
        let reference = [2, 0, 1];
        let oracle = enumerate_expected_gradient(&dist, &gleu, &reference).unwrap();
        let g = reinforce_step(&dist, &gleu, &reference, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (t, &y) in tokens.iter().enumerate() {
            for v in 0..3 {
                let expected = if v == y { oracle.get(t, v) } else { 0.0 };
                assert_eq!(g.get(t, v), expected);
            }
        }
    }

    #[test]
    fn k_above_vocab_is_an_error() {
        let dist = PositionDistributions::uniform(2, 3);
        let err = reinforce_nat_step(
            &dist,
            &EstimatorConfig::new(4, 1),
            &gleu,
            &[],
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn negligible_residual_is_skipped() {
        let dist = PositionDistributions::from_rows(&[vec![1.0 - 1e-9, 1e-9, 0.0]]).unwrap();
        let g = reinforce_nat_step(
            &dist,
            &EstimatorConfig::new(1, 2),
            &gleu,
            &[0],
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(g.log_prob_weights.iter().all(|&w| w == 0.0));
        assert_eq!(g.get(0, 0), -1.0);
    }
}
