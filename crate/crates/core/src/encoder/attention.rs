use crate::error::{Error, Result};
use crate::numerics::nn::{Builder, Init, Linear};
use crate::numerics::{lit, Real, Tape, Var};

pub const ATTN_INIT_STD: f64 = 0.02;

/// Multi-head self-attention whose head outputs are averaged, not
/// concatenated. Queries and keys are `d_k = d_model / H` wide; every value
/// projection is `d_model` wide so the mean lands back on the model width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Vec<Linear>,
    pub key: Vec<Linear>,
    pub value: Vec<Linear>,
    pub d_model: usize,
    pub d_k: usize,
}

/// Output of one attention evaluation.
pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `[B, n, n]` attention probabilities.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let init = Init::Normal(ATTN_INIT_STD);
        let mut mk = |name: &str, width: usize| -> Vec<Linear> {
            (0..heads)
                .map(|h| Linear::new(&mut b.sub(&format!("{name}{h}")), d_model, width, false, init))
                .collect()
        };
        let query = mk("q", d_k);
        let key = mk("k", d_k);
        let value = mk("v", d_model);
        Ok(MultiHeadAttention {
            query,
            key,
            value,
            d_model,
            d_k,
        })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    /// `x` is `[B, n, d_model]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<AttentionOutput> {
        let scale: T = lit(1.0 / (self.d_k as f64).sqrt());
        let mut acc: Option<Var> = None;
        let mut weights = Vec::with_capacity(self.heads());
        for h in 0..self.heads() {
            let q = self.query[h].forward(tape, x)?;
            let k = self.key[h].forward(tape, x)?;
            let logits = tape.bmm(q, k, true)?;
            let logits = tape.scale(logits, scale)?;
            let a = tape.softmax(logits, 2)?;
            let v = self.value[h].forward(tape, x)?;
            let head = tape.bmm(a, v, false)?;
            weights.push(a);
            acc = Some(match acc {
                None => head,
                Some(s) => tape.add(s, head)?,
            });
        }
        let out = tape.scale(acc.expect("at least one head"), lit(1.0 / self.heads() as f64))?;
        Ok(AttentionOutput { out, weights })
    }
}
