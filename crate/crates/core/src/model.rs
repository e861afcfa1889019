//! Full network: tokeniser, dual-branch encoder and multi-stage decoder,
//! plus the named size presets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderOutput, TokenShape};
use crate::error::{Error, Result};
use crate::frontend::{Branch, CsiWindow, RawTokens, Tfddt};
use crate::msfn::{AttentionMode, DecoderSpec, Msfn, MsfnOutput};
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::nn::Builder;
use crate::numerics::{BufferStore, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "MultiFormer")]
    MultiFormer,
    #[serde(rename = "MultiFormer-24")]
    MultiFormer24,
    #[serde(rename = "MultiFormer-18")]
    MultiFormer18,
    #[serde(rename = "desk")]
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::MultiFormer,
        Preset::MultiFormer24,
        Preset::MultiFormer18,
        Preset::Desk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MultiFormer => "MultiFormer",
            Preset::MultiFormer24 => "MultiFormer-24",
            Preset::MultiFormer18 => "MultiFormer-18",
            Preset::Desk => "desk",
        }
    }

    fn code(self) -> f64 {
        match self {
            Preset::MultiFormer => 0.0,
            Preset::MultiFormer24 => 1.0,
            Preset::MultiFormer18 => 2.0,
            Preset::Desk => 3.0,
        }
    }

    pub fn config(self) -> ModelConfig {
        // capture geometry shared by every preset: 10 packets, 1×3 antennas, 30 subcarriers
        let base = |tokens: usize,
                    d_model: usize,
                    side: usize,
                    heads: usize,
                    layers: usize,
                    ffn: usize,
                    channels: usize,
                    decoder: DecoderSpec| ModelConfig {
            preset: self,
            packets: 10,
            n_tx: 1,
            n_rx: 3,
            raw_subcarriers: 30,
            time_tokens: tokens,
            freq_tokens: tokens,
            encoder: EncoderConfig {
                d_model,
                heads,
                layers,
                ffn_hidden: ffn,
                dropout: 0.1,
                side,
                channels,
            },
            stages: 3,
            decoder,
        };
        match self {
            Preset::MultiFormer => base(64, 1296, 36, 2, 8, 648, 256, vec![(128, 3), (128, 3), (512, 1)]),
            Preset::MultiFormer24 => base(64, 576, 24, 2, 8, 288, 128, vec![(64, 3), (64, 3), (256, 1)]),
            Preset::MultiFormer18 => base(64, 324, 18, 2, 6, 162, 64, vec![(64, 3), (32, 1)]),
            Preset::Desk => base(16, 144, 12, 4, 2, 288, 32, vec![(32, 3), (32, 3), (64, 1)]),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::config(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub packets: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub raw_subcarriers: usize,
    /// Upsampled packet count `M` (temporal tokens).
    pub time_tokens: usize,
    /// Upsampled subcarrier count `N_S` (frequency tokens).
    pub freq_tokens: usize,
    pub encoder: EncoderConfig,
    pub stages: usize,
    pub decoder: DecoderSpec,
}

const CONFIG_LAYOUT_VERSION: f64 = 1.0;

impl ModelConfig {
    pub fn links(&self) -> usize {
        self.n_tx * self.n_rx
    }

    pub fn side(&self) -> usize {
        self.encoder.side
    }

    pub fn token_shape(&self) -> TokenShape {
        TokenShape {
            freq_tokens: self.freq_tokens,
            freq_width: self.time_tokens * self.links(),
            time_tokens: self.time_tokens,
            time_width: self.freq_tokens * self.links(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.stages == 0 {
            return Err(Error::config("at least one refinement stage is required"));
        }
        if self.packets < 2 || self.raw_subcarriers < 2 || self.links() == 0 {
            return Err(Error::config("capture needs ≥ 2 packets, ≥ 2 subcarriers and ≥ 1 link"));
        }
        if self.time_tokens == 0 || self.freq_tokens == 0 {
            return Err(Error::config("token counts must be positive"));
        }
        Ok(())
    }

    /// Flat numeric encoding stored in checkpoints.
    pub fn to_vector(&self) -> Vec<f64> {
        let e = &self.encoder;
        let mut v = vec![
            CONFIG_LAYOUT_VERSION,
            self.preset.code(),
            self.packets as f64,
            self.n_tx as f64,
            self.n_rx as f64,
            self.raw_subcarriers as f64,
            self.time_tokens as f64,
            self.freq_tokens as f64,
            e.d_model as f64,
            e.heads as f64,
            e.layers as f64,
            e.ffn_hidden as f64,
            e.dropout,
            e.side as f64,
            e.channels as f64,
            self.stages as f64,
            self.decoder.len() as f64,
        ];
        for &(w, k) in &self.decoder {
            v.push(w as f64);
            v.push(k as f64);
        }
        v
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        let bad = || Error::config("malformed model configuration record");
        if v.len() < 17 || v[0] != CONFIG_LAYOUT_VERSION {
            return Err(bad());
        }
        let u = |i: usize| -> Result<usize> {
            let x = v[i];
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(bad())
            }
        };
        let preset = *Preset::ALL.iter().find(|p| p.code() == v[1]).ok_or_else(bad)?;
        let n_dec = u(16)?;
        if v.len() != 17 + 2 * n_dec {
            return Err(bad());
        }
        let decoder = (0..n_dec)
            .map(|j| Ok((u(17 + 2 * j)?, u(18 + 2 * j)?)))
            .collect::<Result<Vec<_>>>()?;
        let cfg = ModelConfig {
            preset,
            packets: u(2)?,
            n_tx: u(3)?,
            n_rx: u(4)?,
            raw_subcarriers: u(5)?,
            time_tokens: u(6)?,
            freq_tokens: u(7)?,
            encoder: EncoderConfig {
                d_model: u(8)?,
                heads: u(9)?,
                layers: u(10)?,
                ffn_hidden: u(11)?,
                dropout: v[12],
                side: u(13)?,
                channels: u(14)?,
            },
            stages: u(15)?,
            decoder,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Batched raw tokens, `[B, n, width]` per branch.
#[derive(Debug, Clone)]
pub struct TokenBatch<T> {
    pub freq: Tensor<T>,
    pub time: Tensor<T>,
}

pub struct ModelOutput {
    pub encoder: EncoderOutput,
    pub msfn: MsfnOutput,
}

#[derive(Debug, Clone)]
pub struct MultiFormer<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
    pub tfddt: Tfddt,
    pub encoder: Encoder,
    pub msfn: Msfn,
}

pub const CONFIG_RECORD: &str = "meta.model_config";

impl<T: Real> MultiFormer<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut buffers, &mut rng);
        let encoder = Encoder::new(&mut b.sub("encoder"), &config.encoder, config.token_shape())?;
        let msfn = Msfn::new(
            &mut b.sub("msfn"),
            config.encoder.channels,
            config.stages,
            &config.decoder,
        )?;
        let tfddt = Tfddt::new(
            config.packets,
            config.links(),
            config.raw_subcarriers,
            config.time_tokens,
            config.freq_tokens,
        )?;
        Ok(MultiFormer {
            config: config.clone(),
            params,
            buffers,
            tfddt,
            encoder,
            msfn,
        })
    }

    pub fn raw_tokens(&self, w: &CsiWindow) -> Result<[RawTokens; 2]> {
        self.tfddt.tokens(w)
    }

    /// Tokenises and stacks a batch of windows.
    pub fn token_batch(&self, windows: &[&CsiWindow]) -> Result<TokenBatch<T>> {
        if windows.is_empty() {
            return Err(Error::Empty("token batch".into()));
        }
        let shape = self.config.token_shape();
        let b = windows.len();
        let mut freq = Vec::with_capacity(b * shape.freq_tokens * shape.freq_width);
        let mut time = Vec::with_capacity(b * shape.time_tokens * shape.time_width);
        for w in windows {
            let [f, t] = self.raw_tokens(w)?;
            debug_assert_eq!((f.branch, t.branch), (Branch::Frequency, Branch::Temporal));
            freq.extend(f.data.iter().map(|&x| T::from_f64_lossy(x)));
            time.extend(t.data.iter().map(|&x| T::from_f64_lossy(x)));
        }
        Ok(TokenBatch {
            freq: Tensor::new(&[b, shape.freq_tokens, shape.freq_width], freq)?,
            time: Tensor::new(&[b, shape.time_tokens, shape.time_width], time)?,
        })
    }

    /// A tape over this model's parameters and running statistics.
    pub fn tape(&self, mode: crate::numerics::Mode) -> Tape<'_, T> {
        Tape::new(&self.params, mode).with_buffers(&self.buffers)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        freq: Var,
        time: Var,
        n_stages: usize,
        mode: AttentionMode,
    ) -> Result<ModelOutput> {
        let encoder = self.encoder.forward(tape, freq, time)?;
        let msfn = self.msfn.run_stages(tape, encoder.phi, n_stages, mode)?;
        Ok(ModelOutput { encoder, msfn })
    }

    /// Convenience: tokens onto the tape, full forward with all stages.
    pub fn forward_batch(&self, tape: &mut Tape<'_, T>, batch: &TokenBatch<T>) -> Result<ModelOutput> {
        let f = tape.constant(batch.freq.clone());
        let t = tape.constant(batch.time.clone());
        self.forward(tape, f, t, self.config.stages, AttentionMode::Papm)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Parameter counts per top-level module (`encoder.freq`, `msfn.stage2`, …).
    pub fn parameter_breakdown(&self) -> BTreeMap<String, usize> {
        self.params.count_by_prefix(2)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put(CONFIG_RECORD, &Tensor::<f64>::from_vec(self.config.to_vector()));
        for (_, p) in self.params.iter() {
            ck.put(format!("param.{}", p.name), &p.value);
        }
        for (name, t) in self.buffers.iter() {
            ck.put(format!("buffer.{name}"), t);
        }
        ck
    }

    pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ModelConfig> {
        let v: Tensor<f64> = ck.get(CONFIG_RECORD)?;
        ModelConfig::from_vector(v.data())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = Self::config_from_checkpoint(ck)?;
        let mut model = Self::new(&config, 0)?;
        model.load_checkpoint(ck)?;
        Ok(model)
    }

    /// Overwrites every parameter and buffer from `ck`.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for p in self.params.iter_mut() {
            let t: Tensor<T> = ck.get(&format!("param.{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_checkpoint", p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        let names: Vec<String> = self.buffers.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let id = self.buffers.find(&name).expect("name taken from store");
            let t: Tensor<T> = ck.get(&format!("buffer.{name}"))?;
            if t.shape() != self.buffers.get(id).shape() {
                return Err(Error::shape("load_checkpoint", self.buffers.get(id).shape(), t.shape()));
            }
            *self.buffers.get_mut(id) = t;
        }
        Ok(())
    }
}
