//! Dual-branch self-attention encoder producing the feature map Φ₀.

mod attention;

pub use attention::{AttentionOutput, MultiHeadAttention, ATTN_INIT_STD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::TokenEmbedding;
use crate::numerics::nn::{BatchNorm, Builder, Conv2d, Init, LayerNorm, Linear};
use crate::numerics::{Real, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Reconstruction side; `d_model = side²`.
    pub side: usize,
    /// Channels of Φ₀; each branch reconstructs to half of them.
    pub channels: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side * self.side != self.d_model {
            return Err(Error::config(format!(
                "d_model {} is not the square of side {}",
                self.d_model, self.side
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("encoder needs at least one layer and a non-empty FFN"));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return Err(Error::config(format!(
                "fused channel count {} must be even",
                self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn branch_channels(&self) -> usize {
        self.channels / 2
    }
}

/// `LN(a + FFN(a))` with `a = msa(x)`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let init = Init::Normal(ATTN_INIT_STD);
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(&mut b.sub("attn"), cfg.d_model, cfg.heads)?,
            ffn_in: Linear::new(&mut b.sub("ffn_in"), cfg.d_model, cfg.ffn_hidden, true, init),
            ffn_out: Linear::new(&mut b.sub("ffn_out"), cfg.ffn_hidden, cfg.d_model, true, init),
            norm: LayerNorm::new(&mut b.sub("norm"), cfg.d_model),
            dropout: cfg.dropout,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<AttentionOutput> {
        let AttentionOutput { out: a, weights } = self.attn.forward(tape, x)?;
        let h = self.ffn_in.forward(tape, a)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.dropout)?;
        let h = self.ffn_out.forward(tape, h)?;
        let r = tape.add(a, h)?;
        let out = self.norm.forward(tape, r)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Token plane stack `[B, n, S, S]` → 3×3 conv → BN → ReLU.
#[derive(Debug, Clone)]
pub struct Reconstruct {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub side: usize,
}

impl Reconstruct {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, tokens: usize, side: usize, c_out: usize) -> Self {
        Reconstruct {
            conv: Conv2d::new(&mut b.sub("conv"), tokens, c_out, 3, 1, 1, false, Init::HeUniform),
            norm: BatchNorm::new(&mut b.sub("norm"), c_out, 1),
            side,
        }
    }

    /// `x` is `[B, n, S²]`; each token vector is reshaped row-major.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.side * self.side {
            return Err(Error::config(format!(
                "cannot reshape token width {:?} into {}x{} planes",
                s.last(),
                self.side,
                self.side
            )));
        }
        let planes = tape.reshape(x, &[s[0], s[1], self.side, self.side])?;
        let y = self.conv.forward(tape, planes)?;
        let y = self.norm.forward(tape, y)?;
        tape.relu(y)
    }
}

/// Embedding, `L` attention blocks and reconstruction for one token branch.
#[derive(Debug, Clone)]
pub struct BranchEncoder {
    pub embed: TokenEmbedding,
    pub blocks: Vec<EncoderBlock>,
    pub reconstruct: Reconstruct,
}

pub struct BranchOutput {
    /// `[B, n, d_model]` after the last block.
    pub tokens: Var,
    /// `[B, C/2, S, S]`.
    pub map: Var,
    /// `attention[layer][head]`, each `[B, n, n]`.
    pub attention: Vec<Vec<Var>>,
}

impl BranchEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &EncoderConfig, tokens: usize, raw_width: usize) -> Result<Self> {
        let embed = TokenEmbedding::new(&mut b.sub("embed"), tokens, raw_width, cfg.d_model);
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::new(&mut b.sub(&format!("block{l}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let reconstruct = Reconstruct::new(&mut b.sub("reconstruct"), tokens, cfg.side, cfg.branch_channels());
        Ok(BranchEncoder {
            embed,
            blocks,
            reconstruct,
        })
    }

    /// `raw` is `[B, n, raw_width]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, raw: Var) -> Result<BranchOutput> {
        let mut x = self.embed.forward(tape, raw)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let o = block.forward(tape, x)?;
            x = o.out;
            attention.push(o.weights);
        }
        let map = self.reconstruct.forward(tape, x)?;
        Ok(BranchOutput {
            tokens: x,
            map,
            attention,
        })
    }
}

/// Channel concat → 1×1 conv → BN → ReLU.
#[derive(Debug, Clone)]
pub struct Fuse {
    pub conv: Conv2d,
    pub norm: BatchNorm,
}

impl Fuse {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, branch_channels: usize, channels: usize) -> Self {
        Fuse {
            conv: Conv2d::new(
                &mut b.sub("conv"),
                2 * branch_channels,
                channels,
                1,
                1,
                0,
                false,
                Init::HeUniform,
            ),
            norm: BatchNorm::new(&mut b.sub("norm"), channels, 1),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, freq: Var, time: Var) -> Result<Var> {
        let (a, b) = (tape.shape(freq).to_vec(), tape.shape(time).to_vec());
        if a.len() != 4 || a != b {
            return Err(Error::shape("fuse_branches", &a, &b));
        }
        let x = tape.concat(&[freq, time], 1)?;
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward(tape, y)?;
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub freq: BranchEncoder,
    pub time: BranchEncoder,
    pub fuse: Fuse,
}

pub struct EncoderOutput {
    /// Φ₀, `[B, C, S, S]`.
    pub phi: Var,
    pub freq: BranchOutput,
    pub time: BranchOutput,
}

/// Token counts and raw widths of the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenShape {
    pub freq_tokens: usize,
    pub freq_width: usize,
    pub time_tokens: usize,
    pub time_width: usize,
}

impl Encoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &EncoderConfig, shape: TokenShape) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder {
            config: cfg.clone(),
            freq: BranchEncoder::new(&mut b.sub("freq"), cfg, shape.freq_tokens, shape.freq_width)?,
            time: BranchEncoder::new(&mut b.sub("time"), cfg, shape.time_tokens, shape.time_width)?,
            fuse: Fuse::new(&mut b.sub("fuse"), cfg.branch_channels(), cfg.channels),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, freq_raw: Var, time_raw: Var) -> Result<EncoderOutput> {
        let freq = self.freq.forward(tape, freq_raw)?;
        let time = self.time.forward(tape, time_raw)?;
        let phi = self.fuse.forward(tape, freq.map, time.map)?;
        Ok(EncoderOutput { phi, freq, time })
    }
}

/// Attention matrix of one sample plus the per-key mean over queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub tokens: usize,
    /// Row-major `n × n`, rows are queries.
    pub matrix: Vec<f64>,
    pub salience: Vec<f64>,
}

/// Extracts `attention[layer][head]` for batch item `sample`.
pub fn export_attention<T: Real>(
    tape: &Tape<'_, T>,
    attention: &[Vec<Var>],
    layer: usize,
    head: usize,
    sample: usize,
) -> Result<AttentionExport> {
    let heads = attention
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} of {}", attention.len())))?;
    let v = *heads
        .get(head)
        .ok_or_else(|| Error::Index(format!("head {head} of {}", heads.len())))?;
    let shape = tape.shape(v);
    let n = shape[1];
    if sample >= shape[0] {
        return Err(Error::Index(format!("sample {sample} of {}", shape[0])));
    }
    let matrix: Vec<f64> = tape.value(v).data()[sample * n * n..(sample + 1) * n * n]
        .iter()
        .map(|x| x.as_f64())
        .collect();
    let salience = (0..n)
        .map(|k| (0..n).map(|q| matrix[q * n + k]).sum::<f64>() / n as f64)
        .collect();
    Ok(AttentionExport {
        tokens: n,
        matrix,
        salience,
    })
}
