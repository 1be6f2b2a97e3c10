use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::ParallelCorpus;
use crate::models::{Decoded, InvocationCounts, LengthTable, Model, ModelKind};
use crate::rewards::{bleu_sentence, corpus_bleu, gleu};
use crate::special::{BOS, EOS, PAD};
use crate::{Error, Result, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    NatArgmax,
    Greedy,
    Beam,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::NatArgmax => "nat_argmax",
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nat_argmax" => Ok(DecodeMode::NatArgmax),
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            other => Err(Error::Usage(format!(
                "unknown decode mode {other:?} (nat_argmax, greedy, beam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam: usize,
    /// Collapse consecutive repeats in NAT outputs.
    pub dedup: bool,
}

impl DecodeConfig {
    /// Argmax for NAT models, greedy otherwise; no dedup.
    pub fn for_kind(kind: ModelKind) -> Self {
        DecodeConfig {
            mode: if kind == ModelKind::Nat {
                DecodeMode::NatArgmax
            } else {
                DecodeMode::Greedy
            },
            beam: 1,
            dedup: false,
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Contract("beam size must be at least 1".into()));
        }
        let nat = kind == ModelKind::Nat;
        if nat != (self.mode == DecodeMode::NatArgmax) {
            return Err(Error::Contract(format!("decode mode {} does not apply to a {kind} model", self.mode)));
        }
        if self.dedup && !nat {
            return Err(Error::Contract("dedup applies only to NAT outputs".into()));
        }
        Ok(())
    }

    fn beam_width(&self) -> usize {
        match self.mode {
            DecodeMode::Beam => self.beam,
            _ => 1,
        }
    }
}

/// Removes consecutive repeats: `[7,7,9,9,9,4]` → `[7,9,4]`.
pub fn dedup_consecutive(tokens: &[Token]) -> Vec<Token> {
    let mut out = tokens.to_vec();
    out.dedup();
    out
}

/// Drops padding, begin and end markers.
pub fn strip_markers(tokens: &[Token]) -> Vec<Token> {
    tokens.iter().copied().filter(|&t| !matches!(t, PAD | BOS | EOS)).collect()
}

/// Decodes one source. NAT models use the length from `table` and a single
/// forward pass; AR and fused models decode incrementally.
pub fn decode(model: &Model, src: &[Token], dec: &DecodeConfig, table: &LengthTable) -> Result<Decoded> {
    dec.validate(model.kind())?;
    let max_len = model.config().max_len;
    match model.kind() {
        ModelKind::Nat => {
            let len = table.predict(src.len()).min(max_len);
            let dist = model.nat_forward(src, len)?;
            let raw = dist.argmax();
            let score = (0..len).map(|t| dist.prob(t, raw[t]).ln()).sum::<f64>() / len as f64;
            let mut tokens = strip_markers(&raw);
            if dec.dedup {
                tokens = dedup_consecutive(&tokens);
            }
            Ok(Decoded {
                tokens,
                emitted: len,
                score,
            })
        }
        ModelKind::Fs => {
            let len = table.predict(src.len()).min(max_len);
            let mut out = model.fs_decode(src, len, dec.beam_width())?;
            out.tokens = strip_markers(&out.tokens);
            Ok(out)
        }
        ModelKind::Ar => {
            let mut out = model.ar_decode(src, dec.beam_width())?;
            out.tokens = strip_markers(&out.tokens);
            Ok(out)
        }
    }
}

/// Decodes every source, in parallel, in corpus order.
pub fn decode_corpus(
    model: &Model,
    corpus: &ParallelCorpus,
    dec: &DecodeConfig,
    table: &LengthTable,
) -> Result<Vec<Decoded>> {
    corpus
        .pairs
        .par_iter()
        .map(|(s, _)| decode(model, s, dec, table))
        .collect()
}

/// Mean sentence GLEU of the decodes against the corpus targets.
pub fn mean_gleu(model: &Model, corpus: &ParallelCorpus, dec: &DecodeConfig, table: &LengthTable) -> Result<f64> {
    if corpus.is_empty() {
        return Ok(0.0);
    }
    let outs = decode_corpus(model, corpus, dec, table)?;
    let total: f64 = outs.iter().zip(corpus.targets()).map(|(o, r)| gleu(&o.tokens, r)).sum();
    Ok(total / corpus.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub corpus: ParallelCorpus,
    /// Sentences whose decode came back empty and kept the original target.
    pub kept_original: usize,
}

/// Replaces each target with the AR teacher's decode of its source.
pub fn distill_corpus(teacher: &Model, corpus: &ParallelCorpus, dec: &DecodeConfig) -> Result<DistillReport> {
    if teacher.kind() != ModelKind::Ar {
        return Err(Error::Contract(format!("distillation needs an ar teacher, got {}", teacher.kind())));
    }
    let outs = decode_corpus(teacher, corpus, dec, &teacher.length_table)?;
    let mut kept_original = 0;
    let targets = outs
        .into_iter()
        .zip(corpus.targets())
        .map(|(o, t)| {
            if o.tokens.is_empty() {
                kept_original += 1;
                t.to_vec()
            } else {
                o.tokens
            }
        })
        .collect();
    if kept_original > 0 {
        log::info!("distillation kept {kept_original} original targets for empty decodes");
    }
    Ok(DistillReport {
        corpus: corpus.with_targets(targets)?,
        kept_original,
    })
}

pub const BUCKET_WIDTH: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEval {
    pub src_len: usize,
    pub ref_len: usize,
    pub hyp_len: usize,
    /// Tokens the decoder produced, end marker included.
    pub emitted: usize,
    pub gleu: f64,
    pub bleu: f64,
    pub invocations: InvocationCounts,
}

/// Sentences with source length in `lo..=hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub corpus_bleu: f64,
    pub mean_gleu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sentences: Vec<SentenceEval>,
    pub corpus_bleu: f64,
    pub mean_gleu: f64,
    pub mean_bleu: f64,
    pub mean_hyp_len: f64,
    pub mean_ref_len: f64,
    /// Fraction of hypotheses with exactly the reference length.
    pub exact_len_rate: f64,
    pub invocations: InvocationCounts,
    pub buckets: Vec<LengthBucket>,
    pub hypotheses: Vec<Vec<Token>>,
}

impl EvalReport {
    /// Mean decoder passes of any kind per sentence.
    pub fn decoder_invocations_per_sentence(&self) -> f64 {
        if self.sentences.is_empty() {
            return 0.0;
        }
        self.invocations.decoder_total() as f64 / self.sentences.len() as f64
    }
}

/// Decodes the corpus sentence by sentence and aggregates quality, length
/// and decoder-invocation statistics.
pub fn evaluate(model: &Model, corpus: &ParallelCorpus, dec: &DecodeConfig, table: &LengthTable) -> Result<EvalReport> {
    let start = model.counts();
    let mut sentences = Vec::with_capacity(corpus.len());
    let mut hypotheses = Vec::with_capacity(corpus.len());
    for (src, reference) in &corpus.pairs {
        let before = model.counts();
        let out = decode(model, src, dec, table)?;
        let invocations = model.counts().since(&before);
        sentences.push(SentenceEval {
            src_len: src.len(),
            ref_len: reference.len(),
            hyp_len: out.tokens.len(),
            emitted: out.emitted,
            gleu: gleu(&out.tokens, reference),
            bleu: bleu_sentence(&out.tokens, reference),
            invocations,
        });
        hypotheses.push(out.tokens);
    }
    let invocations = model.counts().since(&start);
    let n = sentences.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SentenceEval) -> f64| sentences.iter().map(f).sum::<f64>() / n;

    let mut buckets: Vec<LengthBucket> = Vec::new();
    let max_src = sentences.iter().map(|s| s.src_len).max().unwrap_or(0);
    for b in 0..max_src.div_ceil(BUCKET_WIDTH) {
        let (lo, hi) = (b * BUCKET_WIDTH + 1, (b + 1) * BUCKET_WIDTH);
        let members: Vec<usize> = (0..sentences.len())
            .filter(|&i| (lo..=hi).contains(&sentences[i].src_len))
            .collect();
        if members.is_empty() {
            continue;
        }
        let bleu = corpus_bleu(members.iter().map(|&i| (hypotheses[i].as_slice(), corpus.pairs[i].1.as_slice())));
        let g = members.iter().map(|&i| sentences[i].gleu).sum::<f64>() / members.len() as f64;
        buckets.push(LengthBucket {
            lo,
            hi,
            count: members.len(),
            corpus_bleu: bleu,
            mean_gleu: g,
        });
    }

    Ok(EvalReport {
        corpus_bleu: corpus_bleu(hypotheses.iter().map(Vec::as_slice).zip(corpus.targets())),
        mean_gleu: mean(&|s| s.gleu),
        mean_bleu: mean(&|s| s.bleu),
        mean_hyp_len: mean(&|s| s.hyp_len as f64),
        mean_ref_len: mean(&|s| s.ref_len as f64),
        exact_len_rate: mean(&|s| (s.hyp_len == s.ref_len) as u8 as f64),
        invocations,
        buckets,
        hypotheses,
        sentences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    fn tiny(kind: ModelKind) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_hidden: 16,
            n_layer: 2,
            n_head: 2,
            p_dropout: 0.0,
            vocab_size: 12,
            max_len: 10,
        };
        Model::new(cfg, kind, 3).unwrap()
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup_consecutive(&[7, 7, 9, 9, 9, 4]), vec![7, 9, 4]);
        assert_eq!(dedup_consecutive(&[]), Vec::<Token>::new());
        let once = dedup_consecutive(&[5, 5, 6, 5]);
        assert_eq!(dedup_consecutive(&once), once);
        assert_eq!(once, vec![5, 6, 5]);
    }

    #[test]
    fn mode_must_match_kind() {
        let nat = DecodeConfig::for_kind(ModelKind::Nat);
        assert!(nat.validate(ModelKind::Nat).is_ok());
        assert!(nat.validate(ModelKind::Ar).is_err());
        let mut ar = DecodeConfig::for_kind(ModelKind::Ar);
        ar.dedup = true;
        assert!(ar.validate(ModelKind::Ar).is_err());
    }

    #[test]
    fn structural_invocation_counts() {
        let corpus = ParallelCorpus::new((1..=6).map(|l| (vec![5; l], vec![6; l])).collect()).unwrap();
        let table = LengthTable::new();
        for kind in [ModelKind::Nat, ModelKind::Ar, ModelKind::Fs] {
            let m = tiny(kind);
            let r = evaluate(&m, &corpus, &DecodeConfig::for_kind(kind), &table).unwrap();
            for s in &r.sentences {
                let c = s.invocations;
                match kind {
                    ModelKind::Nat => assert_eq!((c.nat, c.decoder_total()), (1, 1)),
                    ModelKind::Ar => assert_eq!((c.ar, c.decoder_total()), (s.emitted, s.emitted)),
                    ModelKind::Fs => assert_eq!((c.bottom, c.top), (1, s.emitted)),
                }
                assert_eq!(c.encoder, 1);
            }
            let bucketed: usize = r.buckets.iter().map(|b| b.count).sum();
            assert_eq!(bucketed, corpus.len());
        }
    }

    #[test]
    fn distillation_preserves_size() {
        let corpus = ParallelCorpus::new(vec![(vec![5, 6], vec![6]), (vec![7], vec![8, 9])]).unwrap();
        let m = tiny(ModelKind::Ar);
        let r = distill_corpus(&m, &corpus, &DecodeConfig::for_kind(ModelKind::Ar)).unwrap();
        assert_eq!(r.corpus.len(), 2);
        assert_eq!(r.corpus.sources().collect::<Vec<_>>(), corpus.sources().collect::<Vec<_>>());
        assert!(distill_corpus(&tiny(ModelKind::Nat), &corpus, &DecodeConfig::for_kind(ModelKind::Nat)).is_err());
    }
}
