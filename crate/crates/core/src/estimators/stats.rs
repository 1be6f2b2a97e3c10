use rand::Rng;

use super::reinforce::reinforce_nat_step_keyed;
use super::{
    enumerate_expected_gradient, reinforce_nat_step_exact_rewards, reinforce_step,
    EstimatorConfig, GradientEstimate, PositionDistributions, StreamKey,
};
use crate::rewards::Reward;
use crate::{Error, Result, Token};

/// Which estimator to repeat.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorSpec {
    /// The enumeration oracle; deterministic.
    Exact,
    Reinforce { n: usize },
    ReinforceNat(EstimatorConfig),
    /// Top-k traversal with exactly marginalised candidate rewards.
    ReinforceNatExactRewards(EstimatorConfig),
}

impl EstimatorSpec {
    pub fn run<R: Rng + ?Sized>(
        &self,
        dist: &PositionDistributions,
        reward: &dyn Reward,
        reference: &[Token],
        rng: &mut R,
    ) -> Result<GradientEstimate> {
        match self {
            EstimatorSpec::Exact => enumerate_expected_gradient(dist, reward, reference),
            EstimatorSpec::Reinforce { n } => reinforce_step(dist, reward, reference, *n, rng),
            EstimatorSpec::ReinforceNat(cfg) => {
                reinforce_nat_step_keyed(dist, cfg, reward, reference, StreamKey::draw(rng))
            }
            EstimatorSpec::ReinforceNatExactRewards(cfg) => {
                reinforce_nat_step_exact_rewards(dist, cfg, reward, reference, rng)
            }
        }
    }
}

/// Sample mean and unbiased sample variance of `dprobs` over repeated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub repetitions: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub total_variance: f64,
}

impl EstimatorStats {
    /// Standard error of each mean entry.
    pub fn standard_error(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| (v / self.repetitions as f64).sqrt())
            .collect()
    }

    /// Largest `|mean - target| / standard error` over all entries; entries
    /// with zero spread count only if they miss the target.
    pub fn max_standard_scores(&self, target: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(self.standard_error())
            .zip(target)
            .map(|((m, se), t)| {
                let gap = (m - t).abs();
                if se > 0.0 {
                    gap / se
                } else if gap <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

pub fn estimator_stats<R: Rng + ?Sized>(
    dist: &PositionDistributions,
    spec: &EstimatorSpec,
    reward: &dyn Reward,
    reference: &[Token],
    repetitions: usize,
    rng: &mut R,
) -> Result<EstimatorStats> {
    if repetitions < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 repetitions for a variance, got {repetitions}"
        )));
    }
    let size = dist.len() * dist.vocab();
    // Welford's running mean and sum of squared deviations.
    let mut mean = vec![0.0; size];
    let mut m2 = vec![0.0; size];
    for i in 0..repetitions {
        let est = spec.run(dist, reward, reference, rng)?;
        let count = (i + 1) as f64;
        for (j, &x) in est.dprobs.iter().enumerate() {
            let delta = x - mean[j];
            mean[j] += delta / count;
            m2[j] += delta * (x - mean[j]);
        }
    }
    let variance: Vec<f64> = m2.iter().map(|s| s / (repetitions - 1) as f64).collect();
    let total_variance = variance.iter().sum();
    Ok(EstimatorStats {
        repetitions,
        mean,
        variance,
        total_variance,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn equality(h: &[Token], _: &[Token]) -> f64 {
        (h[0] == h[1]) as u8 as f64
    }

    #[test]
    fn oracle_has_zero_variance() {
        let dist = PositionDistributions::uniform(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = estimator_stats(&dist, &EstimatorSpec::Exact, &equality, &[], 5, &mut rng).unwrap();
        assert_eq!(s.total_variance, 0.0);
        assert!(s.mean.iter().all(|&m| m == -0.5));
    }

    #[test]
    fn reinforce_mean_matches_oracle() {
        let dist = PositionDistributions::uniform(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = estimator_stats(
            &dist,
            &EstimatorSpec::Reinforce { n: 1 },
            &equality,
            &[],
            50_000,
            &mut rng,
        )
        .unwrap();
        let oracle = vec![-0.5; 4];
        assert!(s.max_standard_scores(&oracle) <= 3.0, "{:?}", s.mean);
    }

    #[test]
    fn single_repetition_is_rejected() {
        let dist = PositionDistributions::uniform(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(estimator_stats(&dist, &EstimatorSpec::Exact, &equality, &[], 1, &mut rng).is_err());
    }
}
