use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PositionDistributions;
use crate::rewards::Reward;
use crate::{Error, Result, Token};

/// Role of a random stream at one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    /// Reward estimate for the `j`-th traversed candidate.
    Member(usize),
    /// Reward estimate for the sampled residual token.
    Residual,
    /// Drawing the residual token itself.
    Select,
}

impl Slot {
    fn code(self) -> u64 {
        match self {
            Slot::Member(j) => j as u64,
            Slot::Residual => u64::MAX,
            Slot::Select => u64::MAX - 1,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Base key from which independent per-`(position, candidate, sample)`
/// ChaCha streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(base: u64) -> Self {
        StreamKey(base)
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StreamKey(rng.next_u64())
    }

    /// Child key, e.g. one per sentence of a batch.
    pub fn child(self, index: u64) -> Self {
        StreamKey(splitmix(self.0 ^ splitmix(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// A generator seeded from this key alone.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub(crate) fn stream(self, position: usize, slot: Slot, sample: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        let id = splitmix(splitmix(splitmix(position as u64) ^ slot.code()) ^ sample as u64);
        rng.set_stream(id);
        rng
    }
}

/// One categorical sampler per position.
pub(crate) struct RowSamplers {
    rows: Vec<WeightedIndex<f64>>,
}

impl RowSamplers {
    pub(crate) fn new(dist: &PositionDistributions) -> Self {
        let rows = (0..dist.len())
            .map(|t| WeightedIndex::new(dist.row(t)).expect("stochastic row"))
            .collect();
        RowSamplers { rows }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Token {
        self.rows[t].sample(rng) as Token
    }
}

pub(crate) fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Token> {
    let w = WeightedIndex::new(weights)
        .map_err(|e| Error::Contract(format!("cannot sample from weights: {e}")))?;
    Ok(w.sample(rng) as Token)
}

/// Mean reward of `n` sequences with position `t` clamped to `y` and every
/// other position drawn independently from its own row.
pub(crate) fn estimate_with(
    samplers: &RowSamplers,
    len: usize,
    t: usize,
    y: Token,
    n: usize,
    reward: &dyn Reward,
    reference: &[Token],
    key: StreamKey,
    slot: Slot,
) -> f64 {
    let mut seq = vec![0 as Token; len];
    let mut total = 0.0;
    for s in 0..n {
        let mut rng = key.stream(t, slot, s);
        for (i, tok) in seq.iter_mut().enumerate() {
            *tok = if i == t { y } else { samplers.sample(i, &mut rng) };
        }
        total += reward.score(&seq, reference);
    }
    total / n as f64
}

/// Monte Carlo estimate of the expected reward with position `t` fixed to `y`.
pub fn estimate_reward_at<R: Rng + ?Sized>(
    dist: &PositionDistributions,
    t: usize,
    y: Token,
    n: usize,
    reward: &dyn Reward,
    reference: &[Token],
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("sampling times n must be at least 1".into()));
    }
    if t >= dist.len() || y as usize >= dist.vocab() {
        return Err(Error::Contract(format!(
            "position {t} / token {y} outside a {}×{} distribution",
            dist.len(),
            dist.vocab()
        )));
    }
    let samplers = RowSamplers::new(dist);
    let key = StreamKey::draw(rng);
    Ok(estimate_with(
        &samplers,
        dist.len(),
        t,
        y,
        n,
        reward,
        reference,
        key,
        Slot::Member(0),
    ))
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;

    fn equality(h: &[Token], _: &[Token]) -> f64 {
        if h[0] == h[1] {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn one_hot_rows_give_exact_value_with_one_sample() {
        let dist = PositionDistributions::one_hot(&[1, 0, 1], 2).unwrap();
        let reward = |h: &[Token], r: &[Token]| crate::rewards::gleu(h, r);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = estimate_reward_at(&dist, 1, 1, 1, &reward, &[1, 1, 1], &mut rng).unwrap();
        assert_eq!(est, 1.0);
    }

    #[test]
    fn uniform_equality_reward_converges() {
        let dist = PositionDistributions::uniform(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = estimate_reward_at(&dist, 0, 0, 10_000, &equality, &[], &mut rng).unwrap();
        // exact value 0.5, standard error 0.5/√10000
        assert!((est - 0.5).abs() <= 3.0 * 0.5 / 100.0, "{est}");
    }

    #[test]
    fn equal_seeds_give_equal_estimates() {
        let dist = PositionDistributions::uniform(2, 2);
        let a = estimate_reward_at(&dist, 0, 0, 50, &equality, &[], &mut ChaCha8Rng::seed_from_u64(5));
        let b = estimate_reward_at(&dist, 0, 0, 50, &equality, &[], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn streams_differ_across_slots() {
        let key = StreamKey::new(9);
        let a = key.stream(0, Slot::Member(0), 0).next_u64();
        let b = key.stream(0, Slot::Member(1), 0).next_u64();
        let c = key.stream(0, Slot::Member(0), 1).next_u64();
        assert!(a != b && a != c && b != c);
    }
}
