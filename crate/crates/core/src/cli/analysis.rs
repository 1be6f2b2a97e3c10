use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::estimators::{
    enumerate_expected_gradient, estimator_stats, EstimatorConfig, EstimatorSpec, PositionDistributions,
    StreamKey, TopKPartition,
};
use crate::models::{Model, ModelKind};
use crate::pipeline::{fmt_sig, read_metrics, training_target, ParallelCorpus, SentenceEval, BUCKET_WIDTH};
use crate::rewards::RewardFn;
use crate::{Error, Result, Token};

pub const HISTOGRAM_BINS: usize = 5;

/// `P_k` for every requested `k` at one target position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMass {
    pub sentence: usize,
    pub position: usize,
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopkStats {
    pub k_list: Vec<usize>,
    /// `E[P_k]` per entry of `k_list`.
    pub means: Vec<f64>,
    /// Counts of `P_k` in `[0, 0.2), [0.2, 0.4), ..., [0.8, 1]`, per `k`.
    pub histograms: Vec<[usize; HISTOGRAM_BINS]>,
    pub positions: Vec<PositionMass>,
}

impl TopkStats {
    pub fn predictions(&self) -> usize {
        self.positions.len()
    }
}

fn bin_of(p: f64) -> usize {
    ((p * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Teacher-forced output distributions at every reference position.
fn reference_distributions(model: &Model, src: &[Token], tgt: &[Token]) -> Result<PositionDistributions> {
    match model.kind() {
        ModelKind::Nat => model.nat_forward(src, tgt.len()),
        ModelKind::Ar => model.ar_forward(src, &training_target(ModelKind::Ar, tgt)),
        ModelKind::Fs => model.fs_forward_train(src, &training_target(ModelKind::Fs, tgt), tgt.len()),
    }
}

/// Top-k probability mass over all target-position predictions of `corpus`.
pub fn topk_stats(model: &Model, corpus: &ParallelCorpus, k_list: &[usize]) -> Result<TopkStats> {
    let vocab = model.config().vocab_size;
    if k_list.is_empty() {
        return Err(Error::Usage("topk-stats needs at least one k".into()));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k > vocab) {
        return Err(Error::Contract(format!("k={k} exceeds vocabulary size {vocab}")));
    }
    let mut positions = Vec::new();
    for (i, (s, t)) in corpus.pairs.iter().enumerate() {
        let dist = reference_distributions(model, s, t)?;
        for p in 0..dist.len() {
            let masses = k_list
                .iter()
                .map(|&k| TopKPartition::build(dist.row(p), k, 0.0).mass)
                .collect();
            positions.push(PositionMass {
                sentence: i,
                position: p,
                masses,
            });
        }
    }
    let mut means = Vec::with_capacity(k_list.len());
    let mut histograms = Vec::with_capacity(k_list.len());
    for j in 0..k_list.len() {
        let mut hist = [0; HISTOGRAM_BINS];
        let mut sum = 0.0;
        for pos in &positions {
            sum += pos.masses[j];
            hist[bin_of(pos.masses[j])] += 1;
        }
        means.push(sum / positions.len().max(1) as f64);
        histograms.push(hist);
    }
    Ok(TopkStats {
        k_list: k_list.to_vec(),
        means,
        histograms,
        positions,
    })
}

/// One row per `k`: `k,mean_p_k,bin_0,...,bin_4`.
pub fn topk_table_csv(stats: &TopkStats) -> String {
    let mut s = String::from("k,mean_p_k");
    for b in 0..HISTOGRAM_BINS {
        s.push_str(&format!(",bin_{b}"));
    }
    s.push('\n');
    for ((k, m), h) in stats.k_list.iter().zip(&stats.means).zip(&stats.histograms) {
        s.push_str(&format!("{k},{}", fmt_sig(*m)));
        for c in h {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    s
}

/// Per-position dump; values use the shortest round-trip representation so
/// the means can be recomputed exactly.
pub fn topk_positions_csv(stats: &TopkStats) -> String {
    let mut s = String::from("sentence,position");
    for k in &stats.k_list {
        s.push_str(&format!(",p_{k}"));
    }
    s.push('\n');
    for p in &stats.positions {
        s.push_str(&format!("{},{}", p.sentence, p.position));
        for m in &p.masses {
            s.push_str(&format!(",{m:?}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub k_list: Vec<usize>,
    pub n: usize,
    pub len: usize,
    pub vocab: usize,
    pub instances: usize,
    pub repetitions: usize,
    pub sharpness: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub n: usize,
    pub repetitions: usize,
    /// Total variance of each instance.
    pub total_variance: Vec<f64>,
    /// Largest standard score of the mean against the enumeration oracle.
    pub max_standard_score: f64,
}

impl BenchRow {
    pub fn mean_total_variance(&self) -> f64 {
        self.total_variance.iter().sum::<f64>() / self.total_variance.len() as f64
    }
}

/// Random instances shared by every row of a bench.
pub fn bench_instances(s: &BenchSettings) -> Vec<(PositionDistributions, Vec<Token>)> {
    let mut rng = StreamKey::new(s.seed).child(0).rng();
    (0..s.instances)
        .map(|_| {
            let dist = PositionDistributions::random(s.len, s.vocab, s.sharpness, &mut rng);
            let reference = (0..s.len).map(|_| rng.random_range(0..s.vocab as Token)).collect();
            (dist, reference)
        })
        .collect()
}

/// Total estimator variance for each `k` on the same random instances.
pub fn estimator_bench(s: &BenchSettings) -> Result<Vec<BenchRow>> {
    if s.instances == 0 {
        return Err(Error::Usage("estimator-bench needs at least one instance".into()));
    }
    let reward = RewardFn::gleu();
    let instances = bench_instances(s);
    let oracles = instances
        .iter()
        .map(|(d, r)| enumerate_expected_gradient(d, &reward, r))
        .collect::<Result<Vec<_>>>()?;
    s.k_list
        .iter()
        .map(|&k| {
            let cfg = EstimatorConfig {
                k,
                n: s.n,
                rng_seed: s.seed,
                ..Default::default()
            };
            cfg.validate(s.vocab)?;
            let spec = EstimatorSpec::ReinforceNat(cfg);
            let mut total_variance = Vec::new();
            let mut max_z: f64 = 0.0;
            for (i, ((dist, reference), oracle)) in instances.iter().zip(&oracles).enumerate() {
                let mut rng = StreamKey::new(s.seed).child(1 + i as u64).child(k as u64).rng();
                let st = estimator_stats(dist, &spec, &reward, reference, s.repetitions, &mut rng)?;
                total_variance.push(st.total_variance);
                max_z = max_z.max(st.max_standard_scores(&oracle.dprobs));
            }
            Ok(BenchRow {
                k,
                n: s.n,
                repetitions: s.repetitions,
                total_variance,
                max_standard_score: max_z,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("k,n,repetitions,mean_total_variance,min_total_variance,max_total_variance,max_standard_score\n");
    for r in rows {
        let min = r.total_variance.iter().copied().fold(f64::INFINITY, f64::min);
        let max = r.total_variance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.k,
            r.n,
            r.repetitions,
            fmt_sig(r.mean_total_variance()),
            fmt_sig(min),
            fmt_sig(max),
            fmt_sig(r.max_standard_score)
        ));
    }
    s
}

pub const SENTENCES_HEADER: &str =
    "sentence,src_len,ref_len,hyp_len,emitted,gleu,bleu,encoder,nat,bottom,top,ar,decoder_invocations";

pub fn sentences_csv(sentences: &[SentenceEval]) -> String {
    let mut s = format!("{SENTENCES_HEADER}\n");
    for (i, e) in sentences.iter().enumerate() {
        let c = &e.invocations;
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            e.src_len,
            e.ref_len,
            e.hyp_len,
            e.emitted,
            fmt_sig(e.gleu),
            fmt_sig(e.bleu),
            c.encoder,
            c.nat,
            c.bottom,
            c.top,
            c.ar,
            c.decoder_total()
        ));
    }
    s
}

/// `(src_len, gleu, bleu, decoder_invocations)` per row of a sentences CSV.
fn read_sentences(path: &Path) -> Result<Vec<(usize, f64, f64, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SENTENCES_HEADER) {
        return Err(Error::Format(format!("{} lacks the sentences header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Format(format!("{}:{}: malformed row {l:?}", path.display(), i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 13 {
                return Err(bad());
            }
            Ok((
                f[1].parse().map_err(|_| bad())?,
                f[5].parse().map_err(|_| bad())?,
                f[6].parse().map_err(|_| bad())?,
                f[12].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SENTENCES_FILE: &str = "sentences.csv";
pub const VARIANCE_FILE: &str = "variance.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const BUCKETS_FILE: &str = "buckets.csv";
pub const SWEEP_FILE: &str = "variance_sweep.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Writes the curve, bucket and variance-sweep CSVs plus a text summary into
/// `dir` and returns the summary.
pub fn emit_report(dir: &Path) -> Result<String> {
    let missing: Vec<&str> = [METRICS_FILE, SENTENCES_FILE]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "missing report inputs in {}: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let rows = read_metrics(dir.join(METRICS_FILE))?;
    let sentences = read_sentences(&dir.join(SENTENCES_FILE))?;
    let write = |name: &str, body: &str| std::fs::write(dir.join(name), body).map_err(|e| Error::io(dir.join(name), e));

    let curve: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.split == "valid" && r.metric == "gleu")
        .map(|r| (r.step, r.value))
        .collect();
    let mut body = String::from("step,valid_gleu\n");
    for (step, v) in &curve {
        body.push_str(&format!("{step},{}\n", fmt_sig(*v)));
    }
    write(CURVE_FILE, &body)?;

    let mut buckets: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for &(len, gleu, bleu, _) in &sentences {
        let b = buckets.entry(len / BUCKET_WIDTH).or_default();
        b.0 += 1;
        b.1 += gleu;
        b.2 += bleu;
    }
    let mut body = String::from("lo,hi,count,mean_gleu,mean_bleu\n");
    for (b, (count, g, bl)) in &buckets {
        let n = *count as f64;
        body.push_str(&format!(
            "{},{},{count},{},{}\n",
            b * BUCKET_WIDTH,
            (b + 1) * BUCKET_WIDTH - 1,
            fmt_sig(g / n),
            fmt_sig(bl / n)
        ));
    }
    write(BUCKETS_FILE, &body)?;

    let variance_path = dir.join(VARIANCE_FILE);
    let sweep = if variance_path.is_file() {
        Some(std::fs::read_to_string(&variance_path).map_err(|e| Error::io(&variance_path, e))?)
    } else {
        None
    };
    write(
        SWEEP_FILE,
        sweep.as_deref().unwrap_or("k,n,repetitions,mean_total_variance,min_total_variance,max_total_variance,max_standard_score\n"),
    )?;

    let n = sentences.len().max(1) as f64;
    let mut summary = String::new();
    summary.push_str(&format!("run directory: {}\n", dir.display()));
    summary.push_str(&format!("metric rows: {}\n", rows.len()));
    summary.push_str(&format!("evaluation points: {}\n", curve.len()));
    if let Some((step, best)) = curve.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))) {
        summary.push_str(&format!("best valid gleu: {} at step {step}\n", fmt_sig(best)));
    }
    if let Some((step, last)) = curve.last() {
        summary.push_str(&format!("last valid gleu: {} at step {step}\n", fmt_sig(*last)));
    }
    summary.push_str(&format!("evaluated sentences: {}\n", sentences.len()));
    summary.push_str(&format!(
        "mean sentence gleu: {}\n",
        fmt_sig(sentences.iter().map(|s| s.1).sum::<f64>() / n)
    ));
    summary.push_str(&format!(
        "decoder invocations per sentence: {}\n",
        fmt_sig(sentences.iter().map(|s| s.3 as f64).sum::<f64>() / n)
    ));
    summary.push_str(&format!("length buckets: {}\n", buckets.len()));
    if sweep.is_none() {
        summary.push_str(&format!("no {VARIANCE_FILE}; {SWEEP_FILE} holds only its header\n"));
    }
    write(SUMMARY_FILE, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::pipeline::{gen_synthetic_task, TaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Model, ParallelCorpus) {
        let cfg = ModelConfig {
            d_model: 8,
            d_hidden: 16,
            vocab_size: 10,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus = gen_synthetic_task(TaskKind::Copy, 10, (2, 5), 6, &mut rng).unwrap();
        (Model::new(cfg, ModelKind::Nat, 2).unwrap(), corpus)
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(bin_of(0.0), 0);
        assert_eq!(bin_of(0.199), 0);
        assert_eq!(bin_of(0.2), 1);
        assert_eq!(bin_of(0.99), 4);
        assert_eq!(bin_of(1.0), 4);
    }

    #[test]
    fn topk_means_are_monotone_and_exact() {
        let (model, corpus) = tiny();
        let stats = topk_stats(&model, &corpus, &[1, 2, 5, 10]).unwrap();
        assert!(stats.means.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*stats.means.last().unwrap(), 1.0);
        let total: usize = corpus.targets().map(|t| t.len()).sum();
        assert_eq!(stats.predictions(), total);
        for h in &stats.histograms {
            assert_eq!(h.iter().sum::<usize>(), total);
        }
        let dump = topk_positions_csv(&stats);
        let mut sums = [0.0; 4];
        for line in dump.lines().skip(1) {
            for (j, v) in line.split(',').skip(2).enumerate() {
                sums[j] += v.parse::<f64>().unwrap();
            }
        }
        for (s, m) in sums.iter().zip(&stats.means) {
            assert!((s / total as f64 - m).abs() <= 1e-12);
        }
    }

    #[test]
    fn k_beyond_vocab_is_rejected() {
        let (model, corpus) = tiny();
        assert!(topk_stats(&model, &corpus, &[11]).is_err());
    }

    #[test]
    fn bench_has_one_row_per_k() {
        let s = BenchSettings {
            k_list: vec![0, 1, 3],
            n: 2,
            len: 2,
            vocab: 3,
            instances: 2,
            repetitions: 20,
            sharpness: 1.0,
            seed: 4,
        };
        let rows = estimator_bench(&s).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![0, 1, 3]);
        assert_eq!(bench_csv(&rows).lines().count(), 4);
        assert_eq!(estimator_bench(&s).unwrap(), rows);
    }

    #[test]
    fn report_lists_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_report(dir.path()).unwrap_err().to_string();
        assert!(err.contains(METRICS_FILE) && err.contains(SENTENCES_FILE));
    }
}
