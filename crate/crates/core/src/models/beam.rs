use std::cmp::Ordering;

use crate::{Result, Token};

/// A (possibly unfinished) output sequence with its summed log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalised log-probability.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamOutcome {
    pub best: Hypothesis,
    pub finished: Vec<Hypothesis>,
    /// Number of calls made to the step function.
    pub steps: usize,
}

struct Candidate {
    parent: usize,
    token: Token,
    log_prob: f64,
}

/// Beam search over an incremental scorer.
///
/// `step` receives every live prefix and returns one log-probability row per
/// prefix. Hypotheses end at `eos` or after `max_steps` tokens; the winner
/// has the best length-normalised score. With `forced`, that sequence is
/// kept alive through pruning and ends up among the finished hypotheses.
pub fn beam_search<F>(
    mut step: F,
    width: usize,
    max_steps: usize,
    eos: Token,
    forced: Option<&[Token]>,
) -> Result<BeamOutcome>
where
    F: FnMut(&[Vec<Token>]) -> Result<Vec<Vec<f64>>>,
{
    let width = width.max(1);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished = Vec::new();
    let mut steps = 0;
    for s in 0..max_steps {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<Token>> = live.iter().map(|h| h.tokens.clone()).collect();
        let rows = step(&prefixes)?;
        steps += 1;

        let mut cands: Vec<Candidate> = Vec::new();
        for (parent, (h, row)) in live.iter().zip(&rows).enumerate() {
            for (y, &lp) in row.iter().enumerate() {
                cands.push(Candidate {
                    parent,
                    token: y as Token,
                    log_prob: h.log_prob + lp,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(Ordering::Equal)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });

        let forced_next = forced.filter(|f| s < f.len()).map(|f| &f[..=s]);
        let mut next_live = Vec::with_capacity(width);
        let mut forced_seen = false;
        for (rank, c) in cands.iter().enumerate() {
            if next_live.len() == width {
                break;
            }
            let mut tokens = live[c.parent].tokens.clone();
            tokens.push(c.token);
            forced_seen |= forced_next == Some(tokens.as_slice());
            let h = Hypothesis {
                tokens,
                log_prob: c.log_prob,
            };
            if c.token == eos {
                if rank < width {
                    finished.push(h);
                }
            } else {
                next_live.push(h);
            }
        }
        if let (Some(f), false) = (forced_next, forced_seen) {
            let parent = live.iter().position(|h| h.tokens == f[..s]);
            if let Some(parent) = parent {
                let token = f[s];
                let h = Hypothesis {
                    tokens: f.to_vec(),
                    log_prob: live[parent].log_prob + rows[parent][token as usize],
                };
                if token == eos {
                    finished.push(h);
                } else {
                    next_live.push(h);
                }
            }
        }
        live = next_live;
        let forced_pending = forced.is_some_and(|f| s + 1 < f.len());
        if finished.len() >= width && !forced_pending {
            live.clear();
        }
    }
    finished.extend(live);
    let best = finished
        .iter()
        .fold(None::<&Hypothesis>, |best, h| match best {
            Some(b) if b.score() >= h.score() => Some(b),
            _ => Some(h),
        })
        .cloned()
        .unwrap_or(Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        });
    Ok(BeamOutcome {
        best,
        finished,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    /// Token 1 is eos. A greedy first step on token 2 leads to a poor
    /// continuation; token 3 leads to an early, confident stop.
    fn scorer(prefixes: &[Vec<Token>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| match p.as_slice() {
                [] => ln(&[0.01, 0.01, 0.55, 0.43]),
                [2] => ln(&[0.25, 0.25, 0.25, 0.25]),
                [3] => ln(&[0.01, 0.97, 0.01, 0.01]),
                _ => ln(&[0.01, 0.97, 0.01, 0.01]),
            })
            .collect())
    }

    #[test]
    fn width_one_is_greedy() {
        let out = beam_search(scorer, 1, 5, 1, None).unwrap();
        assert_eq!(out.best.tokens[0], 2);
        assert_eq!(out.steps, out.best.tokens.len());
    }

    #[test]
    fn wider_beam_finds_better_hypothesis() {
        let greedy = beam_search(scorer, 1, 5, 1, None).unwrap().best;
        let wide = beam_search(scorer, 2, 5, 1, Some(&greedy.tokens)).unwrap();
        assert_eq!(wide.best.tokens, vec![3, 1]);
        assert!(wide.best.score() >= greedy.score());
        assert!(wide.finished.iter().any(|h| h.tokens == greedy.tokens));
    }

    #[test]
    fn stops_at_max_steps() {
        let never_eos = |p: &[Vec<Token>]| Ok(vec![ln(&[0.5, 0.0, 0.5]); p.len()]);
        let out = beam_search(never_eos, 2, 4, 1, None).unwrap();
        assert_eq!(out.best.tokens.len(), 4);
        assert_eq!(out.steps, 4);
    }
}
