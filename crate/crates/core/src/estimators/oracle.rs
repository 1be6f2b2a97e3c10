//! Exact expected-reward gradients by full enumeration.
//!
//! Two routes compute the same quantity. The direct route walks every
//! sequence once and distributes `∇ Π_t p_t(y_t) · r(Y)` over positions by
//! the product rule. The per-position route fixes `y_t` and enumerates the
//! completions, giving `-r(y_t)` for every entry. Their agreement is the
//! numerical form of the identity that lets the gradient be written per
//! position.

use super::{GradientEstimate, PositionDistributions};
use crate::rewards::Reward;
use crate::{Error, Result, Token};

/// Largest number of sequences any oracle will enumerate.
pub const ENUMERATION_BOUND: u128 = 10_000_000;
/// Agreement required between the two enumeration routes.
pub const PROOF_IDENTITY_TOL: f64 = 1e-10;

fn guard(what: &str, vocab: usize, positions: usize) -> Result<()> {
    let count = (vocab as u128).checked_pow(positions as u32).unwrap_or(u128::MAX);
    if count > ENUMERATION_BOUND {
        return Err(Error::Capacity {
            what: format!("{what}: {vocab}^{positions} sequences"),
            actual: count,
            bound: ENUMERATION_BOUND,
        });
    }
    Ok(())
}

/// Advances `seq` over the positions in `free` like an odometer; false once exhausted.
fn next_sequence(seq: &mut [Token], free: &[usize], vocab: usize) -> bool {
    for &i in free {
        seq[i] += 1;
        if (seq[i] as usize) < vocab {
            return true;
        }
        seq[i] = 0;
    }
    false
}

/// Expected reward with position `t` fixed to `y` and every other position
/// marginalised exactly.
pub fn exact_reward_at(
    dist: &PositionDistributions,
    t: usize,
    y: Token,
    reward: &dyn Reward,
    reference: &[Token],
) -> Result<f64> {
    let (len, vocab) = (dist.len(), dist.vocab());
    if t >= len || y as usize >= vocab {
        return Err(Error::Contract(format!(
            "position {t} / token {y} outside a {len}×{vocab} distribution"
        )));
    }
    guard("exact_reward_at", vocab, len - 1)?;
    let free: Vec<usize> = (0..len).filter(|&i| i != t).collect();
    let mut seq = vec![0 as Token; len];
    seq[t] = y;
    let mut total = 0.0;
    loop {
        let weight: f64 = free.iter().map(|&i| dist.prob(i, seq[i])).product();
        if weight != 0.0 {
            total += weight * reward.score(&seq, reference);
        }
        if !next_sequence(&mut seq, &free, vocab) {
            break;
        }
    }
    Ok(total)
}

/// `dL/dp_t(y) = -r(y_t = y)`, one exact marginalisation per entry.
pub fn per_position_expected_gradient(
    dist: &PositionDistributions,
    reward: &dyn Reward,
    reference: &[Token],
) -> Result<GradientEstimate> {
    let (len, vocab) = (dist.len(), dist.vocab());
    guard("enumerate_expected_gradient", vocab, len)?;
    let mut dprobs = vec![0.0; len * vocab];
    for t in 0..len {
        for y in 0..vocab {
            dprobs[t * vocab + y] = -exact_reward_at(dist, t, y as Token, reward, reference)?;
        }
    }
    Ok(GradientEstimate::from_dprobs(len, vocab, dprobs))
}

/// Gradient of `-Σ_Y Π_t p_t(y_t) r(Y)` by a single pass over all sequences.
pub fn direct_expected_gradient(
    dist: &PositionDistributions,
    reward: &dyn Reward,
    reference: &[Token],
) -> Result<GradientEstimate> {
    let (len, vocab) = (dist.len(), dist.vocab());
    guard("enumerate_expected_gradient", vocab, len)?;
    let all: Vec<usize> = (0..len).collect();
    let mut seq = vec![0 as Token; len];
    let mut dprobs = vec![0.0; len * vocab];
    let mut prefix = vec![1.0; len + 1];
    let mut suffix = vec![1.0; len + 1];
    loop {
        let r = reward.score(&seq, reference);
        for i in 0..len {
            prefix[i + 1] = prefix[i] * dist.prob(i, seq[i]);
        }
        for i in (0..len).rev() {
            suffix[i] = suffix[i + 1] * dist.prob(i, seq[i]);
        }
        for t in 0..len {
            // ∂/∂p_t(y_t) of the joint probability: product over the other positions.
            dprobs[t * vocab + seq[t] as usize] -= prefix[t] * suffix[t + 1] * r;
        }
        if !next_sequence(&mut seq, &all, vocab) {
            break;
        }
    }
    Ok(GradientEstimate::from_dprobs(len, vocab, dprobs))
}

/// Exact gradient, computed by both routes; fails if they disagree by more
/// than [`PROOF_IDENTITY_TOL`].
pub fn enumerate_expected_gradient(
    dist: &PositionDistributions,
    reward: &dyn Reward,
    reference: &[Token],
) -> Result<GradientEstimate> {
    let per_position = per_position_expected_gradient(dist, reward, reference)?;
    let direct = direct_expected_gradient(dist, reward, reference)?;
    let gap = per_position.max_abs_diff(&direct);
    if gap > PROOF_IDENTITY_TOL {
        return Err(Error::Contract(format!(
            "direct and per-position enumeration disagree by {gap:e}"
        )));
    }
    Ok(per_position)
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
    fn uniform_pair_with_equality_reward() {
        let dist = PositionDistributions::uniform(2, 2);
        assert_eq!(exact_reward_at(&dist, 0, 0, &equality, &[]).unwrap(), 0.5);
        let g = enumerate_expected_gradient(&dist, &equality, &[]).unwrap();
        assert!(g.dprobs.iter().all(|&d| d == -0.5));
    }

    #[test]
    fn single_position_is_the_reward_itself() {
        let dist = PositionDistributions::uniform(1, 3);
        let r = |h: &[Token], _: &[Token]| 0.1 * h[0] as f64 + 0.2;
        for y in 0..3 {
            assert_eq!(exact_reward_at(&dist, 0, y, &r, &[]).unwrap(), r(&[y], &[]));
        }
    }

    #[test]
    fn one_hot_context_determines_the_sequence() {
        let dist = PositionDistributions::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![0.3, 0.3, 0.4],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let reference = [1, 0, 2];
        let gleu = |h: &[Token], r: &[Token]| crate::rewards::gleu(h, r);
        for y in 0..3 {
            let expected = gleu(&[1, y, 2], &reference);
            assert_eq!(exact_reward_at(&dist, 1, y, &gleu, &reference).unwrap(), expected);
        }
    }

    #[test]
    fn constant_reward_gives_constant_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dist = PositionDistributions::random(3, 4, 1.0, &mut rng);
        let g = enumerate_expected_gradient(&dist, &|_: &[Token], _: &[Token]| 0.7, &[]).unwrap();
        assert!(g.dprobs.iter().all(|&d| (d + 0.7).abs() < 1e-12));
    }

    #[test]
    fn reward_of_first_position_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dist = PositionDistributions::random(3, 3, 1.0, &mut rng);
        let weights = [0.2, 0.5, 0.9];
        let r = |h: &[Token], _: &[Token]| weights[h[0] as usize];
        let g = enumerate_expected_gradient(&dist, &r, &[]).unwrap();
        let expected: f64 = (0..3).map(|y| dist.prob(0, y) * weights[y as usize]).sum();
        for t in 1..3 {
            for y in 0..3 {
                assert!((g.get(t, y) + expected).abs() < 1e-12);
            }
        }
        for y in 0..3 {
            assert!((g.get(0, y) + weights[y as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_guard_names_the_bound() {
        let dist = PositionDistributions::uniform(9, 10);
        let err = enumerate_expected_gradient(&dist, &equality, &[]).unwrap_err();
        assert!(matches!(err, Error::Capacity { bound: ENUMERATION_BOUND, .. }));
        assert!(err.to_string().contains("10000000"));
    }
}
