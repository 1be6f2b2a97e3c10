//! The `nsqt` command-line front end and report writers.
//!
//! ```text
//! nsqt <command> [--config PATH] [--seed N] [--out DIR] [--key value ...]
//! ```
//!
//! Overrides given as flags take precedence over the config file. Every
//! command writes its resolved settings to `<out>/run.cfg` first.

mod analysis;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use analysis::{
    bench_csv, bench_instances, emit_report, estimator_bench, sentences_csv, topk_positions_csv, topk_stats,
    topk_table_csv, BenchRow, BenchSettings, PositionMass, TopkStats, BUCKETS_FILE, CURVE_FILE, HISTOGRAM_BINS,
    METRICS_FILE, SENTENCES_FILE, SENTENCES_HEADER, SUMMARY_FILE, SWEEP_FILE, VARIANCE_FILE,
};
pub use config::{RunConfig, KEYS};

use crate::models::{load_checkpoint, save_checkpoint, Model, ModelKind};
use crate::pipeline::{
    build_length_table, decode, distill_corpus, evaluate, finetune_rl, gen_synthetic_task, load_parallel_corpus,
    train_ce, EvalReport, MetricsLog, ParallelCorpus, Vocab,
};
use crate::{Error, Result};

pub const COMMANDS: &[&str] = &[
    "train-ce",
    "finetune-rl",
    "decode",
    "evaluate",
    "distill",
    "estimator-bench",
    "topk-stats",
    "report",
];

pub const CONFIG_FILE: &str = "run.cfg";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HYPOTHESES_FILE: &str = "hypotheses.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const TOPK_FILE: &str = "topk.csv";
pub const TOPK_POSITIONS_FILE: &str = "topk_positions.csv";

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

pub fn usage() -> String {
    format!(
        "usage: nsqt <command> [--config PATH] [--seed N] [--out DIR] [--key value ...]\n\
         commands: {}\n\
         keys (with defaults):\n{}",
        COMMANDS.join(", "),
        KEYS.iter()
            .map(|(k, v, doc)| format!("  --{k} {v:?}  {doc}\n"))
            .collect::<String>()
    )
}

/// Parsed command line: the command and the resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config: RunConfig,
}

pub fn parse_args(argv: &[String]) -> Result<Invocation> {
    let (command, rest) = argv
        .split_first()
        .ok_or_else(|| Error::Usage("missing command".into()))?;
    if !COMMANDS.contains(&command.as_str()) {
        return Err(Error::Usage(format!("unknown command {command:?}")));
    }
    let mut config_path = None;
    let mut overrides = Vec::new();
    let mut it = rest.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("unexpected argument {arg:?}")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Usage(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            overrides.push((key, value));
        }
    }
    let mut config = RunConfig::default();
    if let Some(p) = config_path {
        config.load_file(&p)?;
    }
    for (k, v) in overrides {
        config.set(&k, &v)?;
    }
    Ok(Invocation {
        command: command.clone(),
        config,
    })
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("NSQT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("NSQT_THREADS must be a count, got {v:?}")))?;
    if n > 0 {
        // A second call in the same process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one command; returns 0 on success, 1 on usage errors and 2 on
/// runtime errors.
pub fn run_command(argv: &[String]) -> i32 {
    if matches!(argv.first().map(String::as_str), Some("-h" | "--help" | "help")) {
        emit(&usage());
        return 0;
    }
    let result = configure_threads().and_then(|_| parse_args(argv)).and_then(|inv| execute(&inv));
    match result {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("nsqt: {e}\n{}", usage());
            1
        }
        Err(e) => {
            eprintln!("nsqt: {e}");
            2
        }
    }
}

/// Runs a parsed invocation.
pub fn execute(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join(CONFIG_FILE), &cfg.serialize())?;
    match inv.command.as_str() {
        "train-ce" => cmd_train_ce(cfg, &out),
        "finetune-rl" => cmd_finetune_rl(cfg, &out),
        "decode" => cmd_decode(cfg, &out),
        "evaluate" => cmd_evaluate(cfg, &out),
        "distill" => cmd_distill(cfg, &out),
        "estimator-bench" => cmd_estimator_bench(cfg, &out),
        "topk-stats" => cmd_topk_stats(cfg, &out),
        "report" => emit_report(&out).map(|s| emit(&s)),
        other => Err(Error::Usage(format!("unknown command {other:?}"))),
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Vocabulary and corpus splits named by the settings.
pub struct Data {
    pub vocab: Vocab,
    pub train: ParallelCorpus,
    pub valid: Option<ParallelCorpus>,
    pub test: Option<ParallelCorpus>,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Data> {
        let vocab_size: usize = cfg.get("vocab_size")?;
        let max_len: usize = cfg.get("max_len")?;
        match (cfg.path("train_src"), cfg.path("train_tgt")) {
            (None, None) => {
                let sizes: [usize; 3] = [cfg.get("train_size")?, cfg.get("valid_size")?, cfg.get("test_size")?];
                let range = (cfg.get("task_min_len")?, cfg.get("task_max_len")?);
                let mut rng = crate::estimators::StreamKey::new(cfg.get("data_seed")?).rng();
                let all = gen_synthetic_task(cfg.task()?, vocab_size, range, sizes.iter().sum(), &mut rng)?;
                let (train, rest) = all.split_at(sizes[0]);
                let (valid, test) = rest.split_at(sizes[1]);
                Ok(Data {
                    vocab: Vocab::synthetic(vocab_size),
                    train,
                    valid: (!valid.is_empty()).then_some(valid),
                    test: (!test.is_empty()).then_some(test),
                })
            }
            (Some(src), Some(tgt)) => {
                let vocab_path = cfg
                    .path("vocab")
                    .ok_or_else(|| Error::Usage("corpus files need --vocab".into()))?;
                let vocab = Vocab::load(vocab_path)?;
                if vocab.size() > vocab_size {
                    return Err(Error::Usage(format!(
                        "vocabulary has {} entries but vocab_size is {vocab_size}",
                        vocab.size()
                    )));
                }
                let train = load_parallel_corpus(src, tgt, &vocab, max_len)?;
                let valid = match (cfg.path("valid_src"), cfg.path("valid_tgt")) {
                    (Some(s), Some(t)) => Some(load_parallel_corpus(s, t, &vocab, max_len)?),
                    (None, None) => None,
                    _ => return Err(Error::Usage("valid_src and valid_tgt go together".into())),
                };
                Ok(Data {
                    vocab,
                    train,
                    valid,
                    test: None,
                })
            }
            _ => Err(Error::Usage("train_src and train_tgt go together".into())),
        }
    }

    /// The split named by `eval_split`.
    pub fn eval_split(&self, cfg: &RunConfig) -> Result<&ParallelCorpus> {
        let name = cfg.raw("eval_split");
        match name {
            "train" => Some(&self.train),
            "valid" => self.valid.as_ref(),
            "test" => self.test.as_ref(),
            other => return Err(Error::Usage(format!("unknown split {other:?}"))),
        }
        .ok_or_else(|| Error::Usage(format!("no {name} split is configured")))
    }
}

fn load_model(cfg: &RunConfig, key: &str) -> Result<Model> {
    let path = cfg
        .path(key)
        .ok_or_else(|| Error::Usage(format!("--{key} is required")))?;
    load_checkpoint(path)
}

/// Evaluates `model` on `corpus` and writes the per-sentence CSV, the
/// hypotheses and a text summary.
fn write_evaluation(cfg: &RunConfig, model: &Model, data: &Data, corpus: &ParallelCorpus, out: &Path) -> Result<EvalReport> {
    let dec = cfg.decode_config(model.kind())?;
    let table = if model.length_table.is_empty() {
        build_length_table(&data.train)?
    } else {
        model.length_table.clone()
    };
    let report = evaluate(model, corpus, &dec, &table)?;
    write_file(&out.join(SENTENCES_FILE), &sentences_csv(&report.sentences))?;
    let hyps: String = report
        .hypotheses
        .iter()
        .map(|h| format!("{}\n", data.vocab.decode(h)))
        .collect();
    write_file(&out.join(HYPOTHESES_FILE), &hyps)?;
    let mut text = format!(
        "sentences: {}\nmean gleu: {}\nmean bleu: {}\ncorpus bleu: {}\nmean hypothesis length: {}\nmean reference length: {}\nexact length rate: {}\ndecoder invocations per sentence: {}\n",
        report.sentences.len(),
        crate::pipeline::fmt_sig(report.mean_gleu),
        crate::pipeline::fmt_sig(report.mean_bleu),
        crate::pipeline::fmt_sig(report.corpus_bleu),
        crate::pipeline::fmt_sig(report.mean_hyp_len),
        crate::pipeline::fmt_sig(report.mean_ref_len),
        crate::pipeline::fmt_sig(report.exact_len_rate),
        crate::pipeline::fmt_sig(report.decoder_invocations_per_sentence()),
    );
    text.push_str("buckets (source length: count, corpus bleu, mean gleu):\n");
    for b in &report.buckets {
        text.push_str(&format!(
            "  {}-{}: {}, {}, {}\n",
            b.lo,
            b.hi,
            b.count,
            crate::pipeline::fmt_sig(b.corpus_bleu),
            crate::pipeline::fmt_sig(b.mean_gleu)
        ));
    }
    write_file(&out.join(EVAL_FILE), &text)?;
    emit(&text);
    Ok(report)
}

fn cmd_train_ce(cfg: &RunConfig, out: &Path) -> Result<()> {
    let kind = cfg.model_kind()?;
    let data = Data::load(cfg)?;
    let mut model = Model::new(cfg.model_config()?, kind, cfg.seed()?)?;
    let mut log = MetricsLog::create(out.join(METRICS_FILE))?;
    let summary = train_ce(&mut model, &data.train, data.valid.as_ref(), &cfg.train_config(kind)?, &mut log)?;
    log::info!("{summary:?}");
    save_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    let corpus = data.valid.as_ref().unwrap_or(&data.train);
    write_evaluation(cfg, &model, &data, corpus, out)?;
    Ok(())
}

fn cmd_finetune_rl(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut model = load_model(cfg, "checkpoint")?;
    let data = Data::load(cfg)?;
    let train_cfg = cfg.train_config(model.kind())?;
    let mut log = MetricsLog::create(out.join(METRICS_FILE))?;
    let summary = finetune_rl(
        &mut model,
        &data.train,
        data.valid.as_ref(),
        &cfg.estimator_config()?,
        cfg.reward()?,
        &train_cfg,
        &mut log,
    )?;
    log::info!("{summary:?}");
    save_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    let corpus = data.valid.as_ref().unwrap_or(&data.train);
    write_evaluation(cfg, &model, &data, corpus, out)?;
    Ok(())
}

fn cmd_decode(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = load_model(cfg, "checkpoint")?;
    let data = Data::load(cfg)?;
    let sources: Vec<Vec<u32>> = match cfg.path("input") {
        Some(p) => std::fs::read_to_string(&p)
            .map_err(|e| Error::io(&p, e))?
            .lines()
            .map(|l| data.vocab.encode(l))
            .collect(),
        None => data.eval_split(cfg)?.sources().map(<[u32]>::to_vec).collect(),
    };
    let dec = cfg.decode_config(model.kind())?;
    let table = if model.length_table.is_empty() {
        build_length_table(&data.train)?
    } else {
        model.length_table.clone()
    };
    let mut body = String::new();
    for s in &sources {
        let d = decode(&model, s, &dec, &table)?;
        body.push_str(&data.vocab.decode(&d.tokens));
        body.push('\n');
    }
    write_file(&out.join(HYPOTHESES_FILE), &body)
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = load_model(cfg, "checkpoint")?;
    let data = Data::load(cfg)?;
    write_evaluation(cfg, &model, &data, data.eval_split(cfg)?, out)?;
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, out: &Path) -> Result<()> {
    let teacher = load_model(cfg, "teacher")?;
    if teacher.kind() != ModelKind::Ar {
        return Err(Error::Usage(format!("the teacher must be an ar model, got {}", teacher.kind())));
    }
    let data = Data::load(cfg)?;
    let report = distill_corpus(&teacher, &data.train, &cfg.decode_config(ModelKind::Ar)?)?;
    report
        .corpus
        .save(&data.vocab, out.join("distill.src"), out.join("distill.tgt"))?;
    data.vocab.save(out.join("vocab.txt"))?;
    emit(&format!(
        "distilled {} pairs, {} kept their original target\n",
        report.corpus.len(),
        report.kept_original
    ));
    Ok(())
}

fn cmd_estimator_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let settings = BenchSettings {
        k_list: cfg.list("k")?,
        n: cfg.get("n")?,
        len: cfg.get("bench_len")?,
        vocab: cfg.get("bench_vocab")?,
        instances: cfg.get("bench_instances")?,
        repetitions: cfg.get("repetitions")?,
        sharpness: cfg.get("bench_sharpness")?,
        seed: cfg.seed()?,
    };
    let rows = estimator_bench(&settings)?;
    let csv = bench_csv(&rows);
    write_file(&out.join(VARIANCE_FILE), &csv)?;
    emit(&csv);
    Ok(())
}

fn cmd_topk_stats(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = load_model(cfg, "checkpoint")?;
    let data = Data::load(cfg)?;
    let stats = topk_stats(&model, data.eval_split(cfg)?, &cfg.list("k")?)?;
    let table = topk_table_csv(&stats);
    write_file(&out.join(TOPK_FILE), &table)?;
    write_file(&out.join(TOPK_POSITIONS_FILE), &topk_positions_csv(&stats))?;
    emit(&table);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "lr = 0.5\nbeam = 3\n").unwrap();
        let inv = parse_args(&args(&format!("decode --beam 4 --config {} --seed=9", path.display()))).unwrap();
        assert_eq!(inv.config.raw("lr"), "0.5");
        assert_eq!(inv.config.raw("beam"), "4");
        assert_eq!(inv.config.seed().unwrap(), 9);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_command(&args("frobnicate")), 1);
        assert_eq!(run_command(&[]), 1);
        assert_eq!(run_command(&args("decode --no-such-key 1")), 1);
        assert_eq!(run_command(&args("decode --config /nonexistent/c.cfg")), 1);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().display().to_string();
        assert_eq!(run_command(&args(&format!("report --out {out}"))), 2);
        assert!(dir.path().join(CONFIG_FILE).is_file());
    }

    #[test]
    fn missing_config_file_names_the_path() {
        let err = parse_args(&args("decode --config /nonexistent/c.cfg")).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("/nonexistent/c.cfg"));
    }

    #[test]
    fn synthetic_splits() {
        let mut cfg = RunConfig::default();
        cfg.set("train_size", "10").unwrap();
        cfg.set("valid_size", "3").unwrap();
        cfg.set("test_size", "0").unwrap();
        let data = Data::load(&cfg).unwrap();
        assert_eq!(data.train.len(), 10);
        assert_eq!(data.valid.as_ref().unwrap().len(), 3);
        assert!(data.test.is_none());
        assert!(data.eval_split(&cfg).is_ok());
        cfg.set("eval_split", "test").unwrap();
        assert!(data.eval_split(&cfg).is_err());
    }
}
