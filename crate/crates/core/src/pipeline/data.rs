use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::models::LengthTable;
use crate::special::{FIRST_REGULAR, UNK};
use crate::{Error, Result, Token};

/// Chance that echo-runs doubles a source token.
pub const ECHO_PROBABILITY: f64 = 0.3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Word ↔ id mapping; ordinary words start at [`FIRST_REGULAR`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, Token>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, Token> = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            index.insert(w.clone(), i as Token);
        }
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("vocabulary entry {w:?} is empty or has whitespace")));
            }
            if index.contains_key(&w) {
                return Err(Error::Format(format!("duplicate vocabulary entry {w:?}")));
            }
            index.insert(w.clone(), all.len() as Token);
            all.push(w);
        }
        Ok(Vocab { words: all, index })
    }

    /// Ordinary words `w4 … w{size-1}` for synthetic tasks.
    pub fn synthetic(size: usize) -> Self {
        Self::from_words((FIRST_REGULAR as usize..size).map(|i| format!("w{i}"))).expect("distinct names")
    }

    /// One word per line; line `i` (from 0) gets id `i + 4`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for w in &self.words[FIRST_REGULAR as usize..] {
            text.push_str(w);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Token {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: Token) -> &str {
        self.words.get(id as usize).map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<Token> {
        line.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }
}

/// Aligned source/target pairs over a shared vocabulary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<Token>, Vec<Token>)>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Vec<Token>, Vec<Token>)>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Contract(format!("pair {i} has an empty side")));
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[Token]> {
        self.pairs.iter().map(|(s, _)| s.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[Token]> {
        self.pairs.iter().map(|(_, t)| t.as_slice())
    }

    /// Checks every id against a vocabulary of `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, (s, t)) in self.pairs.iter().enumerate() {
            if let Some(&bad) = s.iter().chain(t).find(|&&x| x as usize >= vocab_size) {
                return Err(Error::Contract(format!(
                    "pair {i} holds token {bad}, vocabulary size is {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    /// The first `n` pairs and the rest.
    pub fn split_at(&self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let n = n.min(self.len());
        (
            ParallelCorpus { pairs: self.pairs[..n].to_vec() },
            ParallelCorpus { pairs: self.pairs[n..].to_vec() },
        )
    }

    pub fn with_targets(&self, targets: Vec<Vec<Token>>) -> Result<ParallelCorpus> {
        if targets.len() != self.len() {
            return Err(Error::Dimension(format!("{} targets for {} pairs", targets.len(), self.len())));
        }
        ParallelCorpus::new(self.sources().map(<[Token]>::to_vec).zip(targets).collect())
    }

    /// Writes whitespace-tokenised source and target files.
    pub fn save(&self, vocab: &Vocab, src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<()> {
        let write = |path: &Path, side: &mut dyn Iterator<Item = &[Token]>| {
            let mut text = String::new();
            for s in side {
                text.push_str(&vocab.decode(s));
                text.push('\n');
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))
        };
        write(src_path.as_ref(), &mut self.sources())?;
        write(tgt_path.as_ref(), &mut self.targets())
    }
}

/// Reads line-aligned corpus files. Pairs with an empty side or a side
/// longer than `max_len` are dropped and counted in the log.
pub fn load_parallel_corpus(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<ParallelCorpus> {
    let (sp, tp) = (src_path.as_ref(), tgt_path.as_ref());
    let src = fs::read_to_string(sp).map_err(|e| Error::io(sp, e))?;
    let tgt = fs::read_to_string(tp).map_err(|e| Error::io(tp, e))?;
    let (src, tgt): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
    if src.len() != tgt.len() {
        return Err(Error::Format(format!(
            "line counts differ: {} has {}, {} has {}",
            sp.display(),
            src.len(),
            tp.display(),
            tgt.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (s, t) in src.iter().zip(&tgt) {
        let (s, t) = (vocab.encode(s), vocab.encode(t));
        if s.is_empty() || t.is_empty() || s.len() > max_len || t.len() > max_len {
            dropped += 1;
        } else {
            pairs.push((s, t));
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} pairs that were empty or longer than {max_len}");
    }
    ParallelCorpus::new(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    /// Copy where each token is written twice with probability
    /// [`ECHO_PROBABILITY`].
    EchoRuns,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::EchoRuns => "echo-runs",
        }
    }

    /// Target for `src`. Only echo-runs draws from `rng`.
    pub fn apply<R: Rng + ?Sized>(self, src: &[Token], rng: &mut R) -> Vec<Token> {
        match self {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.to_vec();
                t.sort_unstable();
                t
            }
            TaskKind::EchoRuns => {
                let mut t = Vec::with_capacity(2 * src.len());
                for &x in src {
                    t.push(x);
                    if rng.random_bool(ECHO_PROBABILITY) {
                        t.push(x);
                    }
                }
                t
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            "echo-runs" => Ok(TaskKind::EchoRuns),
            other => Err(Error::Usage(format!(
                "unknown task {other:?} (copy, reverse, sort, echo-runs)"
            ))),
        }
    }
}

/// Random sources of length `min_len..=max_len` over the ordinary ids of a
/// `vocab_size` vocabulary, with targets from `kind`.
pub fn gen_synthetic_task<R: Rng + ?Sized>(
    kind: TaskKind,
    vocab_size: usize,
    len_range: (usize, usize),
    count: usize,
    rng: &mut R,
) -> Result<ParallelCorpus> {
    let (lo, hi) = len_range;
    if vocab_size < FIRST_REGULAR as usize + 1 {
        return Err(Error::Contract(format!("vocab_size {vocab_size} has no payload tokens")));
    }
    if lo == 0 || lo > hi {
        return Err(Error::Contract(format!("bad length range {lo}..={hi}")));
    }
    let pairs = (0..count)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let src: Vec<Token> = (0..len)
                .map(|_| rng.random_range(FIRST_REGULAR..vocab_size as Token))
                .collect();
            let tgt = kind.apply(&src, rng);
            (src, tgt)
        })
        .collect();
    ParallelCorpus::new(pairs)
}

/// Mode of the target length for each observed source length; ties go to
/// the shorter target.
pub fn build_length_table(corpus: &ParallelCorpus) -> Result<LengthTable> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot build a length table from an empty corpus".into()));
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (s, t) in &corpus.pairs {
        *counts.entry(s.len()).or_default().entry(t.len()).or_default() += 1;
    }
    Ok(LengthTable::from_entries(counts.into_iter().map(|(src, hist)| {
        let best = hist
            .iter()
            .fold((0, 0), |(bl, bc), (&l, &c)| if c > bc { (l, c) } else { (bl, bc) });
        (src, best.0)
    })))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pairs(lens: &[(usize, usize)]) -> ParallelCorpus {
        ParallelCorpus::new(lens.iter().map(|&(s, t)| (vec![4; s], vec![4; t])).collect()).unwrap()
    }

    #[test]
    fn length_table_takes_the_mode() {
        assert_eq!(build_length_table(&pairs(&[(3, 4), (3, 4), (3, 5)])).unwrap().get(3), Some(4));
        assert_eq!(build_length_table(&pairs(&[(7, 7)])).unwrap().get(7), Some(7));
        assert_eq!(build_length_table(&pairs(&[(2, 4), (2, 3)])).unwrap().get(2), Some(3));
        assert!(build_length_table(&ParallelCorpus::default()).is_err());
    }

    #[test]
    fn task_definitions() {
        let rng = &mut ChaCha8Rng::seed_from_u64(0);
        assert_eq!(TaskKind::Reverse.apply(&[5, 6, 7], rng), vec![7, 6, 5]);
        assert_eq!(TaskKind::Copy.apply(&[5, 6, 7], rng), vec![5, 6, 7]);
        assert_eq!(TaskKind::Sort.apply(&[9, 4, 7], rng), vec![4, 7, 9]);
    }

    #[test]
    fn echo_runs_double_about_three_in_ten() {
        let rng = &mut ChaCha8Rng::seed_from_u64(1);
        let src: Vec<Token> = (0..10_000).map(|i| 4 + (i % 16)).collect();
        let tgt = TaskKind::EchoRuns.apply(&src, rng);
        assert_eq!(dedup_runs(&tgt), src);
        let rate = (tgt.len() - src.len()) as f64 / src.len() as f64;
        assert!((rate - ECHO_PROBABILITY).abs() < 0.015, "{rate}");
    }

    fn dedup_runs(t: &[Token]) -> Vec<Token> {
        let mut out: Vec<Token> = Vec::new();
        let mut i = 0;
        while i < t.len() {
            out.push(t[i]);
            i += if i + 1 < t.len() && t[i + 1] == t[i] { 2 } else { 1 };
        }
        out
    }

    #[test]
    fn synthetic_corpus_is_seeded() {
        let a = gen_synthetic_task(TaskKind::Copy, 20, (4, 12), 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gen_synthetic_task(TaskKind::Copy, 20, (4, 12), 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs.iter().all(|(s, t)| s == t && (4..=12).contains(&s.len())));
        assert!(a.sources().flatten().all(|&x| (4..20).contains(&x)));
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocab::from_words(["a", "b", "c"]).unwrap();
        std::fs::write(dir.path().join("s"), "a b\nc\nb b a\n").unwrap();
        std::fs::write(dir.path().join("t"), "b\nc zz\na\n").unwrap();
        let c = load_parallel_corpus(dir.path().join("s"), dir.path().join("t"), &vocab, 10).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs[1].1, vec![6, UNK]);
        c.save(&vocab, dir.path().join("s2"), dir.path().join("t2")).unwrap();
        let again = load_parallel_corpus(dir.path().join("s2"), dir.path().join("t2"), &vocab, 10).unwrap();
        assert_eq!(again.pairs[0], c.pairs[0]);
    }

    #[test]
    fn mismatched_line_counts_name_both() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocab::synthetic(8);
        std::fs::write(dir.path().join("s"), "w4\n".repeat(10)).unwrap();
        std::fs::write(dir.path().join("t"), "w4\n".repeat(9)).unwrap();
        let err = load_parallel_corpus(dir.path().join("s"), dir.path().join("t"), &vocab, 10).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("10") && msg.contains('9'), "{msg}");
    }

    #[test]
    fn vocab_file_ids_follow_reserved_block() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::synthetic(7);
        v.save(dir.path().join("v")).unwrap();
        let back = Vocab::load(dir.path().join("v")).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("w4"), 4);
        assert_eq!(back.id("nope"), UNK);
    }
}
