//! A small Transformer encoder with three decoders.
//!
//! - [`ModelKind::Ar`]: causal decoder layers over shifted-right targets.
//! - [`ModelKind::Nat`]: all positions in one pass over uniformly copied
//!   source embeddings; the output factorises per position.
//! - [`ModelKind::Fs`]: `n_layer - 1` non-autoregressive bottom layers, a
//!   ReLU fusion of their states with target embeddings and one causal top
//!   layer.
//!
//! Graph-level methods (`*_graph`) record onto a caller's [`Graph`] for
//! training; the plain methods build their own graph and return values.

mod beam;
mod checkpoint;
mod layers;
mod length;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use beam::{beam_search, BeamOutcome, Hypothesis};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION, MAGIC};
pub use layers::{positional_encoding, Dropout};
pub use length::{predict_length, LengthTable};

use layers::{ArLayer, Builder, EncoderLayer, Linear, NatLayer};

use crate::estimators::PositionDistributions;
use crate::special::{BOS, EOS};
use crate::tensor::{Graph, ParamId, ParamStore, Parameterized, Tensor, Var};
use crate::{Error, Result, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Ar,
    Nat,
    Fs,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ar => "ar",
            ModelKind::Nat => "nat",
            ModelKind::Fs => "fs",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(ModelKind::Ar),
            "nat" => Ok(ModelKind::Nat),
            "fs" => Ok(ModelKind::Fs),
            other => Err(Error::Usage(format!("unknown model kind {other:?} (ar, nat, fs)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub p_dropout: f64,
    pub vocab_size: usize,
    /// Longest source or target sequence, end marker excluded.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            d_hidden: 64,
            n_layer: 2,
            n_head: 2,
            p_dropout: 0.1,
            vocab_size: 20,
            max_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.d_model == 0 || self.n_head == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.n_layer < 2 {
            return bad(format!("n_layer must be at least 2, got {}", self.n_layer));
        }
        if self.d_hidden == 0 || self.max_len == 0 {
            return bad("d_hidden and max_len must be positive".into());
        }
        if self.vocab_size <= crate::special::FIRST_REGULAR as usize {
            return bad(format!("vocab_size {} leaves no regular tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.p_dropout) {
            return bad(format!("p_dropout {} outside [0, 1)", self.p_dropout));
        }
        Ok(())
    }
}

/// Snapshot of the invocation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InvocationCounts {
    pub encoder: usize,
    /// Full non-autoregressive decoder passes.
    pub nat: usize,
    /// Fused decoder bottom-stack passes.
    pub bottom: usize,
    /// Fused decoder top-layer passes.
    pub top: usize,
    /// Autoregressive decoder passes.
    pub ar: usize,
}

impl InvocationCounts {
    /// Decoder passes of any kind.
    pub fn decoder_total(&self) -> usize {
        self.nat + self.bottom + self.top + self.ar
    }

    pub fn since(&self, earlier: &InvocationCounts) -> InvocationCounts {
        InvocationCounts {
            encoder: self.encoder - earlier.encoder,
            nat: self.nat - earlier.nat,
            bottom: self.bottom - earlier.bottom,
            top: self.top - earlier.top,
            ar: self.ar - earlier.ar,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    encoder: AtomicUsize,
    nat: AtomicUsize,
    bottom: AtomicUsize,
    top: AtomicUsize,
    ar: AtomicUsize,
}

impl Counters {
    fn bump(c: &AtomicUsize) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self) -> InvocationCounts {
        InvocationCounts {
            encoder: self.encoder.load(Ordering::Relaxed),
            nat: self.nat.load(Ordering::Relaxed),
            bottom: self.bottom.load(Ordering::Relaxed),
            top: self.top.load(Ordering::Relaxed),
            ar: self.ar.load(Ordering::Relaxed),
        }
    }
}

/// Encoder states plus the embedded input the uniform copy reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub embedded: Tensor,
    pub source_len: usize,
}

/// Graph-level [`EncoderOutput`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub states: Var,
    pub embedded: Var,
    pub source_len: usize,
}

/// Fused-decoder bottom-stack output `H′`.
#[derive(Debug, Clone, PartialEq)]
pub struct BottomStates {
    pub states: Tensor,
    pub predicted_len: usize,
}

/// Output head of a decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

impl DecoderOutput {
    pub fn distributions(&self, g: &Graph) -> Result<PositionDistributions> {
        PositionDistributions::from_tensor(g.value(self.probs))
    }
}

/// A finished decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Output tokens, end marker stripped.
    pub tokens: Vec<Token>,
    /// Tokens produced including the end marker, if one was produced.
    pub emitted: usize,
    /// Length-normalised log-probability under the model.
    pub score: f64,
}

#[derive(Debug, Clone)]
struct Fusion {
    w: ParamId,
    u: ParamId,
}

#[derive(Debug, Clone)]
struct Arch {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    /// NAT decoder layers, or the fused decoder's bottom stack.
    nat: Vec<NatLayer>,
    /// AR decoder layers, or the fused decoder's single top layer.
    ar: Vec<ArLayer>,
    fusion: Option<Fusion>,
    out: Linear,
}

/// 1-based source positions copied to each of `target_len` decoder positions:
/// `clamp(round_half_up(t·Ts/T′), 1, Ts)`.
pub fn uniform_copy_positions(source_len: usize, target_len: usize) -> Vec<usize> {
    (1..=target_len)
        .map(|t| ((2 * t * source_len + target_len) / (2 * target_len)).clamp(1, source_len))
        .collect()
}

/// Decoder inputs for `target_len` positions, copied from the embedded source.
pub fn uniform_copy(enc: &EncoderOutput, target_len: usize) -> Result<Tensor> {
    if target_len == 0 {
        return Err(Error::Contract("uniform copy needs a target length ≥ 1".into()));
    }
    let d = enc.embedded.cols();
    let mut data = Vec::with_capacity(target_len * d);
    for p in uniform_copy_positions(enc.source_len, target_len) {
        data.extend_from_slice(enc.embedded.row(p - 1));
    }
    Tensor::matrix(target_len, d, data)
}

/// `-Σ_t log p_t(y_t)` for a `T×V` log-probability node.
pub fn token_nll(g: &mut Graph, log_probs: Var, targets: &[Token]) -> Result<Var> {
    let v = g.value(log_probs).cols();
    if g.value(log_probs).rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} target tokens for {} output rows",
            targets.len(),
            g.value(log_probs).rows()
        )));
    }
    let mut pick = vec![0.0; targets.len() * v];
    for (t, &y) in targets.iter().enumerate() {
        pick[t * v + y as usize] = -1.0;
    }
    let picked = g.mul_const(log_probs, pick)?;
    Ok(g.sum(picked))
}

pub struct Model {
    config: ModelConfig,
    kind: ModelKind,
    params: ParamStore,
    arch: Arch,
    pub length_table: LengthTable,
    counters: Counters,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.kind)
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            kind: self.kind,
            params: self.params.clone(),
            arch: self.arch.clone(),
            length_table: self.length_table.clone(),
            counters: Counters::default(),
        }
    }
}

/// Equal kind, configuration, length table and bit-identical parameters.
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.config == other.config
            && self.length_table == other.length_table
            && self.params.len() == other.params.len()
            && self.params.iter().zip(other.params.iter()).all(|((_, na, a), (_, nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl Parameterized for Model {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Model {
    /// Fresh model with parameters drawn from `seed`. The encoder is
    /// initialised first, so equal seeds give equal encoders for every kind.
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h, heads, v) = (config.d_model, config.d_hidden, config.n_head, config.vocab_size);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let embed = b.embedding("embed", v, d)?;
        let encoder = (0..config.n_layer)
            .map(|i| b.encoder_layer(&format!("enc.{i}"), d, h, heads))
            .collect::<Result<Vec<_>>>()?;
        let (n_nat, n_ar) = match kind {
            ModelKind::Ar => (0, config.n_layer),
            ModelKind::Nat => (config.n_layer, 0),
            ModelKind::Fs => (config.n_layer - 1, 1),
        };
        let nat = (0..n_nat)
            .map(|i| b.nat_layer(&format!("nat.{i}"), d, h, heads))
            .collect::<Result<Vec<_>>>()?;
        let ar = (0..n_ar)
            .map(|i| b.ar_layer(&format!("ar.{i}"), d, h, heads))
            .collect::<Result<Vec<_>>>()?;
        let fusion = match kind {
            ModelKind::Fs => Some(Fusion {
                w: b.matrix("fusion.w", d, d)?,
                u: b.matrix("fusion.u", d, d)?,
            }),
            _ => None,
        };
        let out = b.linear("out", d, v)?;
        Ok(Model {
            config,
            kind,
            params,
            arch: Arch {
                embed,
                encoder,
                nat,
                ar,
                fusion,
                out,
            },
            length_table: LengthTable::new(),
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn counts(&self) -> InvocationCounts {
        self.counters.snapshot()
    }

    pub fn reset_counts(&self) {
        for c in [
            &self.counters.encoder,
            &self.counters.nat,
            &self.counters.bottom,
            &self.counters.top,
            &self.counters.ar,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// Fusion matrices `(W, U)`; present only on fused decoders.
    pub fn fusion_params(&self) -> Option<(ParamId, ParamId)> {
        self.arch.fusion.as_ref().map(|f| (f.w, f.u))
    }

    pub fn embedding_param(&self) -> ParamId {
        self.arch.embed
    }

    /// Predicted target length for a source of `src_len` tokens.
    pub fn predict_length(&self, src_len: usize) -> usize {
        self.length_table.predict(src_len).min(self.config.max_len)
    }

    fn expect_kind(&self, kind: ModelKind, op: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Contract(format!("{op} needs a {kind} model, this one is {}", self.kind)));
        }
        Ok(())
    }

    fn check_tokens(&self, what: &str, tokens: &[Token], max: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract(format!("{what} is empty")));
        }
        if tokens.len() > max {
            return Err(Error::Capacity {
                what: format!("{what} length"),
                actual: tokens.len() as u128,
                bound: max as u128,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "{what} token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn positions(&self, g: &mut Graph, len: usize) -> Var {
        g.constant(positional_encoding(len, self.config.d_model))
    }

    /// Scaled token embeddings plus position encodings.
    fn embed(&self, g: &mut Graph, tokens: &[Token]) -> Result<Var> {
        let table = g.param(&self.params, self.arch.embed);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = g.gather_rows(table, &idx)?;
        let e = g.scale(e, (self.config.d_model as f64).sqrt());
        let pe = self.positions(g, tokens.len());
        g.add(e, pe)
    }

    /// Embeddings of `tgt` shifted right behind a begin marker.
    fn shifted_target(&self, g: &mut Graph, tgt: &[Token]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(tgt.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&tgt[..tgt.len() - 1]);
        self.embed(g, &inputs)
    }

    fn head(&self, g: &mut Graph, h: Var) -> Result<DecoderOutput> {
        let logits = self.arch.out.forward(g, &self.params, h)?;
        Ok(DecoderOutput {
            logits,
            probs: g.softmax_rows(logits)?,
            log_probs: g.log_softmax_rows(logits)?,
        })
    }

    pub fn encode_graph(&self, g: &mut Graph, src: &[Token], drop: &mut Dropout<'_>) -> Result<EncoderVars> {
        self.check_tokens("source", src, self.config.max_len)?;
        Counters::bump(&self.counters.encoder);
        let embedded = self.embed(g, src)?;
        let mut x = drop.apply(g, embedded)?;
        for layer in &self.arch.encoder {
            x = layer.forward(g, &self.params, x, drop)?;
        }
        Ok(EncoderVars {
            states: x,
            embedded,
            source_len: src.len(),
        })
    }

    pub fn encode(&self, src: &[Token]) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, src, &mut Dropout::off())?;
        Ok(EncoderOutput {
            states: g.value(enc.states).clone(),
            embedded: g.value(enc.embedded).clone(),
            source_len: enc.source_len,
        })
    }

    /// Runs the non-autoregressive layers over `target_len` uniformly copied inputs.
    fn nat_stack(&self, g: &mut Graph, enc: &EncoderVars, target_len: usize, drop: &mut Dropout<'_>) -> Result<Var> {
        if target_len == 0 || target_len > self.config.max_len {
            return Err(Error::Capacity {
                what: "predicted target length".into(),
                actual: target_len as u128,
                bound: self.config.max_len as u128,
            });
        }
        let idx: Vec<usize> = uniform_copy_positions(enc.source_len, target_len)
            .into_iter()
            .map(|p| p - 1)
            .collect();
        let copied = g.gather_rows(enc.embedded, &idx)?;
        let positions = self.positions(g, target_len);
        let x = g.add(copied, positions)?;
        let mut x = drop.apply(g, x)?;
        for layer in &self.arch.nat {
            x = layer.forward(g, &self.params, x, positions, enc.states, drop)?;
        }
        Ok(x)
    }

    pub fn nat_forward_graph(
        &self,
        g: &mut Graph,
        src: &[Token],
        target_len: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<DecoderOutput> {
        self.expect_kind(ModelKind::Nat, "nat_forward")?;
        let enc = self.encode_graph(g, src, drop)?;
        Counters::bump(&self.counters.nat);
        let h = self.nat_stack(g, &enc, target_len, drop)?;
        self.head(g, h)
    }

    /// Per-position output distributions for `target_len` positions, from a
    /// single decoder pass.
    pub fn nat_forward(&self, src: &[Token], target_len: usize) -> Result<PositionDistributions> {
        let mut g = Graph::new();
        let out = self.nat_forward_graph(&mut g, src, target_len, &mut Dropout::off())?;
        out.distributions(&g)
    }

    fn ar_stack(&self, g: &mut Graph, memory: Var, mut x: Var, drop: &mut Dropout<'_>) -> Result<Var> {
        for layer in &self.arch.ar {
            x = layer.forward(g, &self.params, x, memory, drop)?;
        }
        Ok(x)
    }

    /// Teacher-forced pass: row `t` predicts `tgt[t]` from `tgt[..t]`.
    pub fn ar_forward_graph(
        &self,
        g: &mut Graph,
        src: &[Token],
        tgt: &[Token],
        drop: &mut Dropout<'_>,
    ) -> Result<DecoderOutput> {
        self.expect_kind(ModelKind::Ar, "ar_forward")?;
        let enc = self.encode_graph(g, src, drop)?;
        self.ar_from_memory(g, enc.states, tgt, drop)
    }

    fn ar_from_memory(&self, g: &mut Graph, memory: Var, tgt: &[Token], drop: &mut Dropout<'_>) -> Result<DecoderOutput> {
        self.check_tokens("target", tgt, self.config.max_len + 1)?;
        Counters::bump(&self.counters.ar);
        let y = self.shifted_target(g, tgt)?;
        let y = drop.apply(g, y)?;
        let h = self.ar_stack(g, memory, y, drop)?;
        self.head(g, h)
    }

    pub fn ar_forward(&self, src: &[Token], tgt: &[Token]) -> Result<PositionDistributions> {
        let mut g = Graph::new();
        let out = self.ar_forward_graph(&mut g, src, tgt, &mut Dropout::off())?;
        out.distributions(&g)
    }

    fn bottom_graph(&self, g: &mut Graph, enc: &EncoderVars, target_len: usize, drop: &mut Dropout<'_>) -> Result<Var> {
        Counters::bump(&self.counters.bottom);
        self.nat_stack(g, enc, target_len, drop)
    }

    /// The fused decoder's `H′` for `target_len` positions.
    pub fn bottom_states(&self, src: &[Token], target_len: usize) -> Result<BottomStates> {
        self.expect_kind(ModelKind::Fs, "bottom_states")?;
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, src, &mut Dropout::off())?;
        let h = self.bottom_graph(&mut g, &enc, target_len, &mut Dropout::off())?;
        Ok(BottomStates {
            states: g.value(h).clone(),
            predicted_len: target_len,
        })
    }

    /// Fusion, top layer and head over `bottom` (any number of rows) and the
    /// shifted-right embeddings of `tgt`.
    fn fs_top(
        &self,
        g: &mut Graph,
        memory: Var,
        bottom: Var,
        tgt: &[Token],
        drop: &mut Dropout<'_>,
    ) -> Result<DecoderOutput> {
        self.check_tokens("target", tgt, self.config.max_len + 1)?;
        let fusion = self.arch.fusion.as_ref().expect("fused decoder");
        Counters::bump(&self.counters.top);
        let t = tgt.len();
        let rows = g.value(bottom).rows();
        let d = self.config.d_model;
        let h_prime = match rows.cmp(&t) {
            std::cmp::Ordering::Equal => bottom,
            std::cmp::Ordering::Greater => g.slice_rows(bottom, 0, t)?,
            std::cmp::Ordering::Less => {
                let pad = g.constant(Tensor::zeros(&[t - rows, d]));
                g.concat_rows(&[bottom, pad])?
            }
        };
        let y = self.shifted_target(g, tgt)?;
        let w = g.param(&self.params, fusion.w);
        let u = g.param(&self.params, fusion.u);
        let hw = g.matmul(h_prime, w)?;
        let yu = g.matmul(y, u)?;
        let fused = g.add(hw, yu)?;
        let fused = g.relu(fused);
        let fused = drop.apply(g, fused)?;
        let h = self.ar_stack(g, memory, fused, drop)?;
        self.head(g, h)
    }

    /// Teacher-forced fused-decoder pass with `target_len` bottom positions;
    /// `H′` is zero-padded or truncated to `tgt.len()`.
    pub fn fs_forward_train_graph(
        &self,
        g: &mut Graph,
        src: &[Token],
        tgt: &[Token],
        target_len: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<DecoderOutput> {
        self.expect_kind(ModelKind::Fs, "fs_forward_train")?;
        let enc = self.encode_graph(g, src, drop)?;
        let bottom = self.bottom_graph(g, &enc, target_len, drop)?;
        self.fs_top(g, enc.states, bottom, tgt, drop)
    }

    pub fn fs_forward_train(&self, src: &[Token], tgt: &[Token], target_len: usize) -> Result<PositionDistributions> {
        let mut g = Graph::new();
        let out = self.fs_forward_train_graph(&mut g, src, tgt, target_len, &mut Dropout::off())?;
        out.distributions(&g)
    }

    /// Teacher-forced output for any kind: NAT uses `tgt.len()` positions.
    pub fn forward_train_graph(
        &self,
        g: &mut Graph,
        src: &[Token],
        tgt: &[Token],
        drop: &mut Dropout<'_>,
    ) -> Result<DecoderOutput> {
        match self.kind {
            ModelKind::Nat => self.nat_forward_graph(g, src, tgt.len(), drop),
            ModelKind::Ar => self.ar_forward_graph(g, src, tgt, drop),
            ModelKind::Fs => self.fs_forward_train_graph(g, src, tgt, tgt.len(), drop),
        }
    }

    /// Log-probability rows for the next token after each prefix.
    fn next_token_log_probs<F>(&self, prefixes: &[Vec<Token>], mut run: F) -> Result<Vec<Vec<f64>>>
    where
        F: FnMut(&mut Graph, &[Token]) -> Result<DecoderOutput>,
    {
        prefixes
            .iter()
            .map(|p| {
                let mut inputs = p.clone();
                // Placeholder for the position being predicted; never read.
                inputs.push(EOS);
                let mut g = Graph::new();
                let out = run(&mut g, &inputs)?;
                Ok(g.value(out.log_probs).row(p.len()).to_vec())
            })
            .collect()
    }

    fn finish(outcome: BeamOutcome) -> Decoded {
        let score = outcome.best.score();
        let mut tokens = outcome.best.tokens;
        let emitted = tokens.len();
        if tokens.last() == Some(&EOS) {
            tokens.pop();
        }
        Decoded { tokens, emitted, score }
    }

    /// Fused decoding: the bottom stack runs once, then fusion and the top
    /// layer run once per step for up to `target_len` steps.
    pub fn fs_decode(&self, src: &[Token], target_len: usize, beam: usize) -> Result<Decoded> {
        self.fs_decode_forced(src, target_len, beam, None)
    }

    /// [`fs_decode`](Self::fs_decode) keeping `forced` (end marker included)
    /// alive through pruning.
    pub fn fs_decode_forced(
        &self,
        src: &[Token],
        target_len: usize,
        beam: usize,
        forced: Option<&[Token]>,
    ) -> Result<Decoded> {
        self.expect_kind(ModelKind::Fs, "fs_decode")?;
        if beam == 0 {
            return Err(Error::Contract("beam size must be at least 1".into()));
        }
        let mut g = Graph::new();
        let off = &mut Dropout::off();
        let enc = self.encode_graph(&mut g, src, off)?;
        let bottom = self.bottom_graph(&mut g, &enc, target_len, off)?;
        let memory = g.value(enc.states).clone();
        let bottom = g.value(bottom).clone();
        let step = |prefixes: &[Vec<Token>]| {
            self.next_token_log_probs(prefixes, |g, inputs| {
                let m = g.constant(memory.clone());
                let b = g.constant(bottom.clone());
                self.fs_top(g, m, b, inputs, &mut Dropout::off())
            })
        };
        let outcome = beam_search(step, beam, target_len, EOS, forced)?;
        Ok(Self::finish(outcome))
    }

    /// Autoregressive decoding for up to `max_len + 1` steps.
    pub fn ar_decode(&self, src: &[Token], beam: usize) -> Result<Decoded> {
        self.ar_decode_forced(src, beam, None)
    }

    pub fn ar_decode_forced(&self, src: &[Token], beam: usize, forced: Option<&[Token]>) -> Result<Decoded> {
        self.expect_kind(ModelKind::Ar, "ar_decode")?;
        if beam == 0 {
            return Err(Error::Contract("beam size must be at least 1".into()));
        }
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, src, &mut Dropout::off())?;
        let memory = g.value(enc.states).clone();
        let step = |prefixes: &[Vec<Token>]| {
            self.next_token_log_probs(prefixes, |g, inputs| {
                let m = g.constant(memory.clone());
                self.ar_from_memory(g, m, inputs, &mut Dropout::off())
            })
        };
        let outcome = beam_search(step, beam, self.config.max_len + 1, EOS, forced)?;
        Ok(Self::finish(outcome))
    }

    /// Copies every parameter value from `other`, which must share names and shapes.
    pub fn load_params_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = other
                .id(&name)
                .map(|i| other.get(i))
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            let dst = self.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
