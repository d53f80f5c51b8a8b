//! Combining semantic and topological embeddings, and the classifier head.

use rand::Rng;

use super::nn::{Linear, MultiHeadAttention};
use super::Scheme;
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Parameters of the active fusion scheme.
#[derive(Debug, Clone)]
pub enum Fusion {
    /// Self-attention over the `2R` stack `[gcn_1..gcn_R, sem_1..sem_R]`, then a
    /// `2R·d → R·d` map, optionally added back onto the semantic side.
    Attention {
        attention: MultiHeadAttention,
        output: Linear,
        residual: bool,
    },
    Concat,
    Add,
    /// `γ = sigmoid(X_sem · W + b)`, output `γ ⊙ X_sem + (1 − γ) ⊙ X_gcn`.
    Gated {
        gate: Linear,
    },
}

pub struct FusionOutput {
    /// `[B, width]`.
    pub fused: Var,
    /// Per-head attention probabilities, attention schemes only.
    pub attention: Vec<Var>,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        scheme: Scheme,
        num_relations: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let attention = |store: &mut ParamStore, rng: &mut R, residual| -> Result<Fusion> {
            Ok(Fusion::Attention {
                attention: MultiHeadAttention::new(store, rng, "fusion.attn", d, heads)?,
                output: Linear::new(store, rng, "fusion.out", 2 * num_relations * d, num_relations * d, true),
                residual,
            })
        };
        match scheme {
            Scheme::AttentionRes => attention(store, rng, true),
            Scheme::AttentionNoRes => attention(store, rng, false),
            Scheme::Concat => Ok(Fusion::Concat),
            Scheme::Add => Ok(Fusion::Add),
            Scheme::Gated => Ok(Fusion::Gated {
                gate: Linear::new(store, rng, "fusion.gate", d, d, true),
            }),
            Scheme::SemanticOnly | Scheme::TopologyOnly => {
                Err(Error::InvalidArgument(format!("{} has no fusion stage", scheme.name())))
            }
        }
    }

    /// Classifier input width for `R` relations of width `d`.
    pub fn output_width(&self, num_relations: usize, d: usize) -> usize {
        match self {
            Fusion::Concat => 2 * num_relations * d,
            _ => num_relations * d,
        }
    }

    /// `x_sem` and `x_gcn` are `[B, R, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_sem: Var, x_gcn: Var) -> Result<FusionOutput> {
        let shape = tape.shape(x_sem).to_vec();
        if shape.len() != 3 || tape.shape(x_gcn) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "fusion inputs {:?} and {:?}",
                shape,
                tape.shape(x_gcn)
            )));
        }
        let (b, r, d) = (shape[0], shape[1], shape[2]);
        let sem_flat = tape.reshape(x_sem, vec![b, r * d])?;
        let gcn_flat = tape.reshape(x_gcn, vec![b, r * d])?;
        let mut attention_probs = Vec::new();
        let fused = match self {
            Fusion::Attention {
                attention,
                output,
                residual,
            } => {
                let stacked = tape.concat(&[gcn_flat, sem_flat])?;
                let seq = tape.reshape(stacked, vec![b, 2 * r, d])?;
                let att = attention.forward(tape, store, seq)?;
                attention_probs = att.probs;
                let flat = tape.reshape(att.output, vec![b, 2 * r * d])?;
                let out = output.forward(tape, store, flat)?;
                if *residual {
                    tape.add(sem_flat, out)?
                } else {
                    out
                }
            }
            Fusion::Concat => {
                let sem = tape.reshape(x_sem, vec![b * r, d])?;
                let gcn = tape.reshape(x_gcn, vec![b * r, d])?;
                let cat = tape.concat(&[sem, gcn])?;
                tape.reshape(cat, vec![b, 2 * r * d])?
            }
            Fusion::Add => tape.add(sem_flat, gcn_flat)?,
            Fusion::Gated { gate } => {
                let g = gate.forward(tape, store, x_sem)?;
                let g = tape.sigmoid(g);
                let g = tape.reshape(g, vec![b, r * d])?;
                let diff = tape.sub(sem_flat, gcn_flat)?;
                let gated = tape.mul(g, diff)?;
                tape.add(gcn_flat, gated)?
            }
        };
        Ok(FusionOutput {
            fused,
            attention: attention_probs,
        })
    }
}

/// `width → d → 1` ReLU MLP producing one logit per node.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden: Linear,
    pub output: Linear,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, width: usize, d: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, "classifier.hidden", width, d, true),
            output: Linear::new(store, rng, "classifier.out", d, 1, true),
        }
    }

    pub fn input_width(&self) -> usize {
        self.hidden.din
    }

    /// Logits, shape `[B]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let width = *tape.shape(x).last().unwrap_or(&0);
        if width != self.input_width() {
            return Err(Error::Mismatch(format!(
                "width mismatch: classifier expects {}, got {width}",
                self.input_width()
            )));
        }
        let b = tape.value(x).rows();
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        let z = self.output.forward(tape, store, h)?;
        tape.reshape(z, vec![b])
    }
}
