use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::estimators::EstimatorConfig;
use crate::models::{ModelConfig, ModelKind};
use crate::pipeline::{DecodeConfig, DecodeMode, TaskKind, TrainConfig};
use crate::rewards::{RewardFn, RewardKind};
use crate::{Error, Result};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model", "nat", "model kind: nat, ar or fs"),
    ("d_model", "32", "model width"),
    ("d_hidden", "64", "feed-forward width"),
    ("n_layer", "2", "encoder layers and decoder layers"),
    ("n_head", "2", "attention heads"),
    ("p_dropout", "0.1", "dropout probability during training"),
    ("vocab_size", "20", "shared vocabulary size, reserved ids included"),
    ("max_len", "32", "longest source or target sequence"),
    ("batch_size", "32", "sentences per step"),
    ("max_steps", "3000", "optimizer steps"),
    ("lr", "0.001", "peak learning rate"),
    ("warmup", "200", "warmup steps of the inverse square root schedule"),
    ("beta1", "0.9", "Adam beta1"),
    ("beta2", "0.98", "Adam beta2"),
    ("adam_eps", "1e-9", "Adam epsilon"),
    ("patience", "5", "evaluations without improvement before stopping"),
    ("eval_every", "200", "steps between validation evaluations, 0 disables"),
    ("k", "5", "traversing count; a comma list for estimator-bench and topk-stats"),
    ("n", "20", "sampling times per reward estimate"),
    ("residual_epsilon", "1e-6", "leftover mass below which no residual sample is drawn"),
    ("reward", "gleu", "sequence reward: gleu or bleu"),
    ("decode_mode", "auto", "nat_argmax, greedy, beam or auto (by model kind)"),
    ("beam", "1", "beam width for beam mode"),
    ("dedup", "false", "collapse consecutive repeats in NAT outputs"),
    ("task", "echo-runs", "synthetic task: copy, reverse, sort or echo-runs"),
    ("task_min_len", "4", "shortest synthetic source"),
    ("task_max_len", "12", "longest synthetic source"),
    ("train_size", "2000", "synthetic training pairs"),
    ("valid_size", "200", "synthetic validation pairs"),
    ("test_size", "200", "synthetic test pairs"),
    ("data_seed", "7", "seed of the synthetic data"),
    ("vocab", "", "vocabulary file; required with corpus files"),
    ("train_src", "", "training source file; empty uses the synthetic task"),
    ("train_tgt", "", "training target file"),
    ("valid_src", "", "validation source file"),
    ("valid_tgt", "", "validation target file"),
    ("eval_split", "valid", "split read by evaluate, decode and topk-stats: train, valid or test"),
    ("checkpoint", "", "model checkpoint to load"),
    ("teacher", "", "AR teacher checkpoint for distill"),
    ("input", "", "source file for decode; empty decodes the eval split"),
    ("bench_len", "3", "positions of estimator-bench instances"),
    ("bench_vocab", "10", "vocabulary of estimator-bench instances"),
    ("bench_instances", "5", "random instances per estimator-bench row"),
    ("repetitions", "1000", "estimator-bench repetitions per instance"),
    ("bench_sharpness", "2.0", "spread of estimator-bench logits"),
    ("seed", "1", "seed of model initialisation, batching and estimators"),
    ("out", "run", "output directory"),
];

/// Flat `key = value` settings; every key has a default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|(k, _, _)| *k)
        .ok_or_else(|| Error::Usage(format!("unknown key {key:?}")))
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("{origin}:{}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = known(key)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| Error::Usage(format!("bad value {v:?} for {key}: {e}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Usage(format!("bad list entry {s:?} for {key}: {e}")))
            })
            .collect()
    }

    /// `None` for an empty path setting.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        self.get("model")
    }

    pub fn task(&self) -> Result<TaskKind> {
        self.get("task")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            d_model: self.get("d_model")?,
            d_hidden: self.get("d_hidden")?,
            n_layer: self.get("n_layer")?,
            n_head: self.get("n_head")?,
            p_dropout: self.get("p_dropout")?,
            vocab_size: self.get("vocab_size")?,
            max_len: self.get("max_len")?,
        };
        c.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn train_config(&self, kind: ModelKind) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.get("batch_size")?,
            max_steps: self.get("max_steps")?,
            lr: self.get("lr")?,
            warmup: self.get("warmup")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("adam_eps")?,
            patience: self.get("patience")?,
            rng_seed: self.seed()?,
            eval_every: self.get("eval_every")?,
            valid_decode: Some(self.decode_config(kind)?),
        })
    }

    /// The estimator settings; `k` must be a single value here.
    pub fn estimator_config(&self) -> Result<EstimatorConfig> {
        Ok(EstimatorConfig {
            k: self.get("k")?,
            n: self.get("n")?,
            rng_seed: self.seed()?,
            residual_epsilon: self.get("residual_epsilon")?,
        })
    }

    pub fn reward(&self) -> Result<RewardFn> {
        let kind: RewardKind = self.raw("reward").parse().map_err(Error::Usage)?;
        Ok(match kind {
            RewardKind::Gleu => RewardFn::gleu(),
            RewardKind::Bleu => RewardFn::bleu(),
        })
    }

    pub fn decode_config(&self, kind: ModelKind) -> Result<DecodeConfig> {
        let mut dec = DecodeConfig::for_kind(kind);
        if self.raw("decode_mode") != "auto" {
            dec.mode = self.get::<DecodeMode>("decode_mode")?;
        }
        dec.beam = self.get("beam")?;
        dec.dedup = self.get("dedup")?;
        dec.validate(kind).map_err(|e| Error::Usage(e.to_string()))?;
        Ok(dec)
    }

    /// Every key in declaration order, each preceded by its description.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for &(k, _, doc) in KEYS {
            s.push_str(&format!("# {doc}\n{k} = {}\n", self.raw(k)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nonsense", "1"), Err(Error::Usage(_))));
        assert!(c.apply_text("lr = 0.5\nbogus = 2\n", "t.cfg").is_err());
    }

    #[test]
    fn comments_and_whitespace() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n  lr=0.5   # trailing\n\nk = 0,1,5\n", "t.cfg").unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), 0.5);
        assert_eq!(c.list::<usize>("k").unwrap(), vec![0, 1, 5]);
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = RunConfig::default();
        c.set("beam", "4").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.serialize(), "saved").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_build_every_config() {
        let c = RunConfig::default();
        c.model_config().unwrap();
        c.train_config(ModelKind::Nat).unwrap();
        let e = c.estimator_config().unwrap();
        assert_eq!((e.k, e.n), (5, 20));
        assert_eq!(c.reward().unwrap(), RewardFn::gleu());
    }
}
