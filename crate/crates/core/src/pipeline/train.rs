use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{mean_gleu, DecodeConfig, MetricsLog, ParallelCorpus};
use crate::estimators::{reinforce_nat_step_keyed, EstimatorConfig, StreamKey, TopKPartition};
use crate::models::{token_nll, Dropout, Model, ModelKind};
use crate::rewards::{Reward, RewardFn};
use crate::special::EOS;
use crate::tensor::{Graph, ParamId, ParamStore, Parameterized, Tensor, Var};
use crate::{Error, Result, Token};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub rng_seed: u64,
    /// Steps between validation evaluations; 0 disables them.
    pub eval_every: usize,
    /// Decoding used for validation GLEU; `None` picks the model's default.
    pub valid_decode: Option<DecodeConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 3000,
            lr: 1e-3,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            patience: 5,
            rng_seed: 1,
            eval_every: 200,
            valid_decode: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Contract("patience must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// `lr · min(step / w, √(w / step))` with `w = max(warmup, 1)`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let w = self.warmup.max(1) as f64;
        let s = step.max(1) as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update from the gradients stored on the parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Outcome of a training loop; the rows are also in the caller's log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub stopped_early: bool,
    /// Best validation GLEU seen; its parameters are the ones kept.
    pub best_valid_gleu: Option<f64>,
    pub best_step: usize,
    pub final_train_metric: f64,
}

/// Batches of indices with equal target length, reshuffled every epoch.
struct Batcher {
    by_len: BTreeMap<usize, Vec<usize>>,
    batch_size: usize,
    queue: Vec<Vec<usize>>,
}

impl Batcher {
    fn new(corpus: &ParallelCorpus, batch_size: usize) -> Self {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (_, t)) in corpus.pairs.iter().enumerate() {
            by_len.entry(t.len()).or_default().push(i);
        }
        Batcher {
            by_len,
            batch_size,
            queue: Vec::new(),
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.queue.is_empty() {
            for ids in self.by_len.values() {
                let mut ids = ids.clone();
                ids.shuffle(rng);
                self.queue.extend(ids.chunks(self.batch_size).map(<[usize]>::to_vec));
            }
            self.queue.shuffle(rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("non-empty corpus")
    }
}

type Grads = Vec<(ParamId, Vec<f64>)>;

fn collect_grads(g: &Graph) -> Grads {
    let mut out: Grads = g
        .bound_params()
        .filter_map(|(p, v)| g.grad(v).map(|gr| (p, gr.to_vec())))
        .collect();
    out.sort_by_key(|(p, _)| *p);
    out
}

/// Sums per-sentence gradients in sentence order.
fn install_grads(store: &mut ParamStore, per_sentence: Vec<Grads>) {
    store.zero_grad();
    for grads in per_sentence {
        for (p, gr) in grads {
            store.add_grad(p, &gr);
        }
    }
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, _, t)| t.clone()).collect()
}

fn restore(store: &mut ParamStore, saved: Vec<Tensor>) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, t) in ids.into_iter().zip(saved) {
        *store.get_mut(id) = t;
    }
}

struct Validation<'a> {
    valid: Option<&'a ParallelCorpus>,
    dec: DecodeConfig,
    eval_every: usize,
    patience: usize,
    best: Option<(f64, usize, Vec<Tensor>)>,
    bad_evals: usize,
}

impl<'a> Validation<'a> {
    fn new(model: &Model, valid: Option<&'a ParallelCorpus>, cfg: &TrainConfig) -> Result<Self> {
        let dec = cfg
            .valid_decode
            .clone()
            .unwrap_or_else(|| DecodeConfig::for_kind(model.kind()));
        dec.validate(model.kind())?;
        Ok(Validation {
            valid: valid.filter(|v| !v.is_empty()),
            dec,
            eval_every: cfg.eval_every,
            patience: cfg.patience,
            best: None,
            bad_evals: 0,
        })
    }

    fn active(&self) -> bool {
        self.valid.is_some() && self.eval_every > 0
    }

    /// Evaluates and logs; returns true when patience is exhausted.
    fn eval(&mut self, model: &Model, step: usize, log: &mut MetricsLog) -> Result<bool> {
        let Some(valid) = self.valid else {
            return Ok(false);
        };
        let score = mean_gleu(model, valid, &self.dec, &model.length_table)?;
        log.push(step, "valid", "gleu", score);
        log.flush()?;
        log::info!("step {step}: validation gleu {score:.4}");
        match &self.best {
            Some((b, _, _)) if score <= *b => {
                self.bad_evals += 1;
            }
            _ => {
                self.best = Some((score, step, snapshot(model.params())));
                self.bad_evals = 0;
            }
        }
        Ok(self.bad_evals >= self.patience)
    }

    fn finish(self, model: &mut Model) -> (Option<f64>, usize) {
        match self.best {
            Some((score, step, params)) => {
                restore(model.params_mut(), params);
                (Some(score), step)
            }
            None => (None, 0),
        }
    }
}

/// Target tokens a model is trained to emit: AR and fused decoders also
/// learn the end marker.
pub fn training_target(kind: ModelKind, tgt: &[Token]) -> Vec<Token> {
    match kind {
        ModelKind::Nat => tgt.to_vec(),
        ModelKind::Ar | ModelKind::Fs => tgt.iter().copied().chain([EOS]).collect(),
    }
}

/// Summed token NLL of the teacher-forced pass; AR and FS also predict EOS.
pub fn ce_loss(model: &Model, g: &mut Graph, src: &[Token], tgt: &[Token], drop: &mut Dropout<'_>) -> Result<Var> {
    let full = training_target(model.kind(), tgt);
    let out = match model.kind() {
        ModelKind::Nat => model.nat_forward_graph(g, src, tgt.len(), drop)?,
        ModelKind::Ar => model.ar_forward_graph(g, src, &full, drop)?,
        ModelKind::Fs => model.fs_forward_train_graph(g, src, &full, tgt.len(), drop)?,
    };
    token_nll(g, out.log_probs, &full)
}

/// Per-token negative log-likelihood of a corpus without dropout.
pub fn corpus_nll(model: &Model, corpus: &ParallelCorpus) -> Result<f64> {
    let parts = corpus
        .pairs
        .par_iter()
        .map(|(s, t)| {
            let mut g = Graph::new();
            let loss = ce_loss(model, &mut g, s, t, &mut Dropout::off())?;
            Ok((g.value(loss).item(), training_target(model.kind(), t).len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(a, b), (l, c)| (a + l, b + c));
    Ok(sum / n.max(1) as f64)
}

/// Cross-entropy training with Adam and inverse-square-root warmup.
///
/// Targets use their true length. With a validation corpus, mean sentence
/// GLEU is computed every `eval_every` steps, training stops after
/// `patience` evaluations without improvement, and the best parameters are
/// kept. An empty length table is first filled from `train`.
pub fn train_ce(
    model: &mut Model,
    train: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    train.validate(model.config().vocab_size)?;
    if model.length_table.is_empty() {
        model.length_table = super::build_length_table(train)?;
    }
    let mut val = Validation::new(model, valid, cfg)?;
    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let key = StreamKey::new(cfg.rng_seed).child(0xCE);
    let mut batcher = Batcher::new(train, cfg.batch_size);
    let p_drop = model.config().p_dropout;
    let mut last_loss = f64::NAN;
    let mut stopped_early = false;
    let mut steps = 0;

    for step in 1..=cfg.max_steps {
        let batch = batcher.next(&mut rng);
        let tokens: usize = batch
            .iter()
            .map(|&i| training_target(model.kind(), &train.pairs[i].1).len())
            .sum();
        let scale = 1.0 / tokens as f64;
        let step_key = key.child(step as u64);
        let m: &Model = model;
        let results = batch
            .par_iter()
            .map(|&i| {
                let (s, t) = &train.pairs[i];
                let mut drng = step_key.child(i as u64).rng();
                let mut drop = Dropout::train(p_drop, &mut drng);
                let mut g = Graph::new();
                let nll = ce_loss(m, &mut g, s, t, &mut drop)?;
                let value = g.value(nll).item();
                let loss = g.scale(nll, scale);
                g.backward(loss)?;
                Ok((value, collect_grads(&g)))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = results.iter().map(|(v, _)| v).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss {loss} at step {step}")));
        }
        install_grads(model.params_mut(), results.into_iter().map(|(_, g)| g).collect());
        let lr = cfg.learning_rate(step);
        adam.step(model.params_mut(), lr);
        log.push(step, "train", "loss", loss);
        last_loss = loss;
        steps = step;
        if val.active() && step % cfg.eval_every == 0 && val.eval(model, step, log)? {
            stopped_early = true;
            break;
        }
    }
    if val.active() && steps % cfg.eval_every != 0 && !stopped_early {
        val.eval(model, steps, log)?;
    }
    log.flush()?;
    let (best_valid_gleu, best_step) = val.finish(model);
    Ok(TrainSummary {
        steps,
        stopped_early,
        best_valid_gleu,
        best_step,
        final_train_metric: last_loss,
    })
}

/// Scores hypotheses with markers removed.
struct Stripped(RewardFn);

impl Reward for Stripped {
    fn score(&self, hyp: &[Token], reference: &[Token]) -> f64 {
        if hyp.iter().any(|&t| matches!(t, crate::special::PAD | crate::special::BOS | EOS)) {
            self.0.score(&super::strip_markers(hyp), reference)
        } else {
            self.0.score(hyp, reference)
        }
    }
}

/// Sequence-level fine-tuning of a NAT model with the top-k traversal
/// estimator.
///
/// Each sentence is decoded at its true target length; the estimate of
/// `dL/dp` is pushed through the surrogate and averaged over the batch.
/// Logged per step: the mean GLEU of the argmax outputs (`train,gleu`),
/// the mean squared norm of the estimates (`train,est_sq_norm`) and the
/// mean top-k mass (`train,p_k`).
pub fn finetune_rl(
    model: &mut Model,
    train: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    est: &EstimatorConfig,
    reward: RewardFn,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainSummary> {
    if model.kind() != ModelKind::Nat {
        return Err(Error::Contract(format!(
            "sequence-level fine-tuning needs a nat model, got {}",
            model.kind()
        )));
    }
    cfg.validate()?;
    est.validate(model.config().vocab_size)?;
    if train.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    train.validate(model.config().vocab_size)?;
    if model.length_table.is_empty() {
        model.length_table = super::build_length_table(train)?;
    }
    let mut val = Validation::new(model, valid, cfg)?;
    if val.active() && val.eval(model, 0, log)? {
        return Err(Error::Contract("patience exhausted before training".into()));
    }
    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let key = StreamKey::new(cfg.rng_seed).child(0x51);
    let mut batcher = Batcher::new(train, cfg.batch_size);
    let reward = Stripped(reward);
    let p_drop = model.config().p_dropout;
    let mut last = f64::NAN;
    let mut stopped_early = false;
    let mut steps = 0;

    for step in 1..=cfg.max_steps {
        let batch = batcher.next(&mut rng);
        let scale = 1.0 / batch.len() as f64;
        let step_key = key.child(step as u64);
        let m: &Model = model;
        let reward = &reward;
        let results = batch
            .par_iter()
            .map(|&i| {
                let (s, t) = &train.pairs[i];
                let sentence_key = step_key.child(i as u64);
                let mut drng = sentence_key.child(0).rng();
                let mut drop = Dropout::train(p_drop, &mut drng);
                let mut g = Graph::new();
                let out = m.nat_forward_graph(&mut g, s, t.len(), &mut drop)?;
                let dist = out.distributions(&g)?;
                let grad = reinforce_nat_step_keyed(&dist, est, reward, t, sentence_key.child(1))?;
                let sur = grad.surrogate(&mut g, out.probs, out.log_probs)?;
                let sur = g.scale(sur, scale);
                g.backward(sur)?;
                let argmax_gleu = reward.score(&dist.argmax(), t);
                let sq: f64 = grad.dprobs.iter().map(|d| d * d).sum();
                let pk: f64 = (0..dist.len())
                    .map(|r| TopKPartition::build(dist.row(r), est.k, est.residual_epsilon).mass)
                    .sum::<f64>()
                    / dist.len() as f64;
                Ok(([argmax_gleu, sq, pk], collect_grads(&g)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stats = [0.0; 3];
        for (s, _) in &results {
            for (a, b) in stats.iter_mut().zip(s) {
                *a += b * scale;
            }
        }
        if !stats.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence(format!("non-finite estimate at step {step}")));
        }
        install_grads(model.params_mut(), results.into_iter().map(|(_, g)| g).collect());
        if model.params().grads_flat().iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient at step {step}")));
        }
        adam.step(model.params_mut(), cfg.learning_rate(step));
        log.push(step, "train", "gleu", stats[0]);
        log.push(step, "train", "est_sq_norm", stats[1]);
        log.push(step, "train", "p_k", stats[2]);
        last = stats[0];
        steps = step;
        if val.active() && step % cfg.eval_every == 0 && val.eval(model, step, log)? {
            stopped_early = true;
            break;
        }
    }
    if val.active() && steps % cfg.eval_every != 0 && !stopped_early {
        val.eval(model, steps, log)?;
    }
    log.flush()?;
    let (best_valid_gleu, best_step) = val.finish(model);
    Ok(TrainSummary {
        steps,
        stopped_early,
        best_valid_gleu,
        best_step,
        final_train_metric: last,
    })
}
