use crate::error::{Error, Result};
use crate::numerics::nn::{BatchNorm, Builder, Init, Linear};
use crate::numerics::{ParamId, Real, Tape, Var};

pub const EMBED_STD: f64 = 0.02;

/// Learnable projection of raw tokens to `d_model`, additive positional
/// embedding, then batch normalisation of every feature over all tokens of
/// the batch.
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    pub proj: Linear,
    pub embedding: ParamId,
    pub norm: BatchNorm,
    pub tokens: usize,
    pub d_model: usize,
}

impl TokenEmbedding {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, tokens: usize, raw_width: usize, d_model: usize) -> Self {
        // no bias: the normalisation that follows removes any constant shift
        let proj = Linear::new(&mut b.sub("proj"), raw_width, d_model, false, Init::FanInUniform);
        let e = b.randn(&[tokens, d_model], EMBED_STD);
        let embedding = b.param("embedding", e);
        let norm = BatchNorm::new(&mut b.sub("norm"), d_model, 2);
        TokenEmbedding {
            proj,
            embedding,
            norm,
            tokens,
            d_model,
        }
    }

    /// Projection plus embedding, before normalisation. `raw` is `[B, n, w]`.
    pub fn project<T: Real>(&self, tape: &mut Tape<'_, T>, raw: Var) -> Result<Var> {
        let shape = tape.shape(raw).to_vec();
        if shape.len() != 3 || shape[1] != self.tokens || shape[2] != self.proj.d_in {
            return Err(Error::shape(
                "token_embedding",
                &shape,
                &[shape.first().copied().unwrap_or(0), self.tokens, self.proj.d_in],
            ));
        }
        let x = self.proj.forward(tape, raw)?;
        let e = tape.param(self.embedding);
        let n = self.tokens * self.d_model;
        tape.broadcast_add(x, e, [shape[0], n, 1], [1, n, 1])
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, raw: Var) -> Result<Var> {
        let x = self.project(tape, raw)?;
        self.norm.forward(tape, x)
    }
}
