//! Parameterized building blocks shared by the encoders and the fusion head.

use rand::Rng;

use crate::autodiff::{init_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `x · W + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), init_uniform(rng, vec![din, dout], din));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![dout])));
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Scaled dot-product self-attention with `heads` heads over `[B, L, d]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Attention output plus the per-head `[B, L, L]` probability tensors.
pub struct AttentionOutput {
    pub output: Var,
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.q"), d, d, true),
            key: Linear::new(store, rng, &format!("{name}.k"), d, d, true),
            value: Linear::new(store, rng, &format!("{name}.v"), d, d, true),
            output: Linear::new(store, rng, &format!("{name}.o"), d, d, true),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<AttentionOutput> {
        if tape.shape(x).len() != 3 {
            return Err(Error::Shape(format!(
                "attention expects [B, L, d], got {:?}",
                tape.shape(x)
            )));
        }
        let d = self.query.din;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, scale);
            let p = tape.softmax(scores);
            probs.push(p);
            outs.push(tape.batch_matmul(p, vh, false)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
        let output = self.output.forward(tape, store, merged)?;
        Ok(AttentionOutput { output, probs })
    }
}

/// Post-norm encoder layer: `LN(x + MHA(x))` then `LN(h + FFN(h))`, with a
/// `d → 4d → d` ReLU feed-forward block.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, 4 * d, true),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 4 * d, d, true),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            dropout,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, store, x)?.output;
        let a = tape.dropout(a, self.dropout, train, rng)?;
        let h = tape.add(x, a)?;
        let h = self.norm1.forward(tape, store, h)?;
        let f = self.ff1.forward(tape, store, h)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f)?;
        let f = tape.dropout(f, self.dropout, train, rng)?;
        let out = tape.add(h, f)?;
        self.norm2.forward(tape, store, out)
    }
}
