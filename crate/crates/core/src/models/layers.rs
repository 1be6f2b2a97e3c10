//! Transformer building blocks over the recorded graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Result;

const MASKED: f64 = -1e9;

/// Dropout state for one forward pass; inactive without an RNG.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, rng),
            _ => Ok(x),
        }
    }
}

pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let t = Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), self.rng);
        self.store.add(name, t)
    }

    fn filled(&mut self, name: String, cols: usize, value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::new(vec![1, cols], vec![value; cols])?)
    }

    pub fn embedding(&mut self, name: &str, vocab: usize, d: usize) -> Result<ParamId> {
        let t = Tensor::randn(&[vocab, d], 1.0 / (d as f64).sqrt(), self.rng);
        self.store.add(name, t)
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.weight(name.to_string(), rows, cols)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(format!("{name}.w"), d_in, d_out)?,
            b: self.filled(format!("{name}.b"), d_out, 0.0)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.filled(format!("{name}.gain"), d, 1.0)?,
            bias: self.filled(format!("{name}.bias"), d, 0.0)?,
        })
    }

    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
            heads,
        })
    }

    pub fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, hidden)?,
            outer: self.linear(&format!("{name}.outer"), hidden, d)?,
        })
    }

    /// A residual sub-layer's trailing norm.
    fn sublayer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        self.layer_norm(name, d)
    }

    pub fn encoder_layer(&mut self, name: &str, d: usize, hidden: usize, heads: usize) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            self_attn: self.attention(&format!("{name}.self_attn"), d, heads)?,
            norm1: self.sublayer_norm(&format!("{name}.norm1"), d)?,
            ffn: self.feed_forward(&format!("{name}.ffn"), d, hidden)?,
            norm2: self.sublayer_norm(&format!("{name}.norm2"), d)?,
        })
    }

    pub fn nat_layer(&mut self, name: &str, d: usize, hidden: usize, heads: usize) -> Result<NatLayer> {
        Ok(NatLayer {
            self_attn: self.attention(&format!("{name}.self_attn"), d, heads)?,
            norm1: self.sublayer_norm(&format!("{name}.norm1"), d)?,
            pos_attn: self.attention(&format!("{name}.pos_attn"), d, heads)?,
            norm2: self.sublayer_norm(&format!("{name}.norm2"), d)?,
            src_attn: self.attention(&format!("{name}.src_attn"), d, heads)?,
            norm3: self.sublayer_norm(&format!("{name}.norm3"), d)?,
            ffn: self.feed_forward(&format!("{name}.ffn"), d, hidden)?,
            norm4: self.sublayer_norm(&format!("{name}.norm4"), d)?,
        })
    }

    pub fn ar_layer(&mut self, name: &str, d: usize, hidden: usize, heads: usize) -> Result<ArLayer> {
        Ok(ArLayer {
            self_attn: self.attention(&format!("{name}.self_attn"), d, heads)?,
            norm1: self.sublayer_norm(&format!("{name}.norm1"), d)?,
            src_attn: self.attention(&format!("{name}.src_attn"), d, heads)?,
            norm2: self.sublayer_norm(&format!("{name}.norm2"), d)?,
            ffn: self.feed_forward(&format!("{name}.ffn"), d, hidden)?,
            norm3: self.sublayer_norm(&format!("{name}.norm3"), d)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// `causal` hides keys after each query position.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, key)?;
        let v = self.v.forward(g, p, value)?;
        let d = g.value(q).cols();
        let dh = d / self.heads;
        let (tq, tk) = (g.value(q).rows(), g.value(k).rows());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if causal {
                let mask = (0..tq * tk).map(|i| i % tk > i / tk).collect();
                scores = g.masked_fill(scores, mask, MASKED)?;
            }
            let weights = g.softmax_rows(scores)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, p, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, p, x)?;
        let h = g.relu(h);
        self.outer.forward(g, p, h)
    }
}

/// `norm(x + dropout(sub))`
fn residual(
    g: &mut Graph,
    p: &ParamStore,
    norm: &LayerNorm,
    x: Var,
    sub: Var,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let sub = drop.apply(g, sub)?;
    let s = g.add(x, sub)?;
    norm.forward(g, p, s)
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, drop: &mut Dropout<'_>) -> Result<Var> {
        let a = self.self_attn.forward(g, p, x, x, x, false)?;
        let x = residual(g, p, &self.norm1, x, a, drop)?;
        let f = self.ffn.forward(g, p, x)?;
        residual(g, p, &self.norm2, x, f, drop)
    }
}

/// Non-autoregressive decoder layer: unmasked self-attention, positional
/// attention, source attention and feed-forward.
#[derive(Debug, Clone)]
pub struct NatLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub pos_attn: Attention,
    pub norm2: LayerNorm,
    pub src_attn: Attention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
    pub norm4: LayerNorm,
}

impl NatLayer {
    /// `positions` holds the positional encodings used as queries and keys
    /// of the positional attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        positions: Var,
        memory: Var,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, p, x, x, x, false)?;
        let x = residual(g, p, &self.norm1, x, a, drop)?;
        let a = self.pos_attn.forward(g, p, positions, positions, x, false)?;
        let x = residual(g, p, &self.norm2, x, a, drop)?;
        let a = self.src_attn.forward(g, p, x, memory, memory, false)?;
        let x = residual(g, p, &self.norm3, x, a, drop)?;
        let f = self.ffn.forward(g, p, x)?;
        residual(g, p, &self.norm4, x, f, drop)
    }
}

/// Autoregressive decoder layer: causal self-attention, source attention,
/// feed-forward.
#[derive(Debug, Clone)]
pub struct ArLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub src_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl ArLayer {
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        memory: Var,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, p, x, x, x, true)?;
        let x = residual(g, p, &self.norm1, x, a, drop)?;
        let a = self.src_attn.forward(g, p, x, memory, memory, false)?;
        let x = residual(g, p, &self.norm2, x, a, drop)?;
        let f = self.ffn.forward(g, p, x)?;
        residual(g, p, &self.norm3, x, f, drop)
    }
}

/// Sinusoidal position encodings for positions `0..len`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10_000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(len, d, data).expect("len, d > 0")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn causal_attention_ignores_later_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let attn = Builder { store: &mut store, rng: &mut rng }.attention("a", 4, 2).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut y = x.clone();
        y.data_mut()[8] += 1.0; // row 2

        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let out = attn.forward(&mut g, &store, v, v, v, true).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(2, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    }
}
