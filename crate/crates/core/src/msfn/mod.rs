//! Multi-stage heatmap refinement: pose-attentive reweighting of Φ and
//! per-stage PCM/PAF decoding.

mod heatmaps;

pub use heatmaps::{dump_heatmaps, PoseHeatmaps};

use crate::error::{Error, Result};
use crate::numerics::nn::{Builder, Conv2d, Init, Linear};
use crate::numerics::{Real, ReduceKind, Tape, Tensor, Var};
use crate::skeleton::{HEATMAP_CHANNELS, PAF_CHANNELS, PCM_CHANNELS};

pub const PAPM_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

/// Hidden conv layers of a decoder head as `(out_channels, kernel)`; a 1×1
/// output layer to 19 or 38 channels follows.
pub type DecoderSpec = Vec<(usize, usize)>;

/// Channel attention: shared MLP over the global max and mean of the 57
/// previous-stage heatmap channels.
#[derive(Debug, Clone)]
pub struct PapmChannel {
    pub hidden: Linear,
    pub out: Linear,
}

impl PapmChannel {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        let mid = (HEATMAP_CHANNELS / PAPM_REDUCTION).max(1);
        PapmChannel {
            hidden: Linear::new(&mut b.sub("fc1"), HEATMAP_CHANNELS, mid, true, Init::FanInUniform),
            out: Linear::new(&mut b.sub("fc2"), mid, channels, true, Init::FanInUniform),
        }
    }

    fn mlp<T: Real>(&self, tape: &mut Tape<'_, T>, v: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, v)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, h)
    }

    /// `[B, C]` weights in (0, 1).
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: &PoseHeatmaps) -> Result<Var> {
        let x = h.stacked(tape)?;
        let mx = tape.global_pool(x, ReduceKind::Max)?;
        let av = tape.global_pool(x, ReduceKind::Mean)?;
        let a = self.mlp(tape, mx)?;
        let b = self.mlp(tape, av)?;
        let s = tape.add(a, b)?;
        tape.sigmoid(s)
    }
}

/// Spatial attention: 7×7 conv over the channelwise max and mean.
#[derive(Debug, Clone)]
pub struct PapmSpatial {
    pub conv: Conv2d,
}

impl PapmSpatial {
    pub fn new<T: Real>(b: &mut Builder<'_, T>) -> Self {
        let pad = SPATIAL_KERNEL / 2;
        PapmSpatial {
            conv: Conv2d::new(
                &mut b.sub("conv"),
                2,
                1,
                SPATIAL_KERNEL,
                1,
                pad,
                true,
                Init::FanInUniform,
            ),
        }
    }

    /// `[B, 1, S, S]` weights in (0, 1).
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: &PoseHeatmaps) -> Result<Var> {
        let x = h.stacked(tape)?;
        let s = tape.shape(x).to_vec();
        let mx = tape.reduce(x, ReduceKind::Max, 1)?;
        let av = tape.reduce(x, ReduceKind::Mean, 1)?;
        let plane = [s[0], 1, s[2], s[3]];
        let mx = tape.reshape(mx, &plane)?;
        let av = tape.reshape(av, &plane)?;
        let both = tape.concat(&[mx, av], 1)?;
        let y = self.conv.forward(tape, both)?;
        tape.sigmoid(y)
    }
}

/// `Φ_i[b,c,u,v] = Φ_{i−1}[b,c,u,v] · wc[b,c] · ws[b,u,v]`.
pub fn feature_update<T: Real>(tape: &mut Tape<'_, T>, prev: Var, wc: Var, ws: Var) -> Result<Var> {
    let s = tape.shape(prev).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("feature_update", &s, tape.shape(wc)));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if tape.value(wc).numel() != b * c {
        return Err(Error::shape("feature_update", &s, tape.shape(wc)));
    }
    if tape.value(ws).numel() != b * hw {
        return Err(Error::shape("feature_update", &s, tape.shape(ws)));
    }
    let x = tape.broadcast_mul(prev, wc, [b, c, hw], [b, c, 1])?;
    tape.broadcast_mul(x, ws, [b, c, hw], [b, 1, hw])
}

/// Conv stack with ReLU between layers and none after the last.
#[derive(Debug, Clone)]
pub struct DecoderHead {
    pub layers: Vec<Conv2d>,
}

impl DecoderHead {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c_in: usize, spec: &[(usize, usize)], c_out: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len() + 1);
        let mut c = c_in;
        for (i, &(width, k)) in spec.iter().enumerate() {
            if k % 2 == 0 {
                return Err(Error::config(format!(
                    "decoder kernel {k} must be odd to preserve the grid"
                )));
            }
            layers.push(Conv2d::new(
                &mut b.sub(&format!("conv{i}")),
                c,
                width,
                k,
                1,
                k / 2,
                true,
                Init::HeUniform,
            ));
            c = width;
        }
        let last = format!("conv{}", spec.len());
        layers.push(Conv2d::new(
            &mut b.sub(&last),
            c,
            c_out,
            1,
            1,
            0,
            true,
            Init::FanInUniform,
        ));
        Ok(DecoderHead { layers })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for (i, conv) in self.layers.iter().enumerate() {
            y = conv.forward(tape, y)?;
            if i + 1 < self.layers.len() {
                y = tape.relu(y)?;
            }
        }
        Ok(y)
    }
}

/// Parallel PCM and PAF heads for one stage.
#[derive(Debug, Clone)]
pub struct HeatmapDecoder {
    pub pcm: DecoderHead,
    pub paf: DecoderHead,
}

impl HeatmapDecoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, spec: &[(usize, usize)]) -> Result<Self> {
        Ok(HeatmapDecoder {
            pcm: DecoderHead::new(&mut b.sub("pcm"), channels, spec, PCM_CHANNELS)?,
            paf: DecoderHead::new(&mut b.sub("paf"), channels, spec, PAF_CHANNELS)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, phi: Var, stage: usize) -> Result<PoseHeatmaps> {
        Ok(PoseHeatmaps {
            pcm: self.pcm.forward(tape, phi)?,
            paf: self.paf.forward(tape, phi)?,
            stage,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Weights computed from the previous stage's heatmaps.
    #[default]
    Papm,
    /// Every weight fixed to 1 at every stage.
    Unit,
}

/// Per-stage PAPM modules (stages 2..n) and decoders (stages 1..n), each with
/// independent parameters.
#[derive(Debug, Clone)]
pub struct Msfn {
    pub decoders: Vec<HeatmapDecoder>,
    pub channel_attn: Vec<PapmChannel>,
    pub spatial_attn: Vec<PapmSpatial>,
    pub channels: usize,
}

/// What one stage consumed and produced.
pub struct StageTrace {
    pub phi: Var,
    /// `None` at stage 1, which uses unit weights by convention.
    pub channel_weights: Option<Var>,
    pub spatial_weights: Option<Var>,
    pub heatmaps: PoseHeatmaps,
}

pub struct MsfnOutput {
    pub stages: Vec<StageTrace>,
    pub papm_evaluations: usize,
    pub decoder_evaluations: usize,
}

impl MsfnOutput {
    pub fn heatmaps(&self) -> impl Iterator<Item = &PoseHeatmaps> {
        self.stages.iter().map(|s| &s.heatmaps)
    }

    pub fn last(&self) -> &PoseHeatmaps {
        &self.stages.last().expect("at least one stage").heatmaps
    }
}

impl Msfn {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        channels: usize,
        stages: usize,
        spec: &[(usize, usize)],
    ) -> Result<Self> {
        if stages == 0 {
            return Err(Error::config("at least one refinement stage is required"));
        }
        let mut decoders = Vec::with_capacity(stages);
        let mut channel_attn = Vec::new();
        let mut spatial_attn = Vec::new();
        for i in 1..=stages {
            let mut sb = b.sub(&format!("stage{i}"));
            if i > 1 {
                channel_attn.push(PapmChannel::new(&mut sb.sub("papm_channel"), channels));
                spatial_attn.push(PapmSpatial::new(&mut sb.sub("papm_spatial")));
            }
            decoders.push(HeatmapDecoder::new(&mut sb.sub("decoder"), channels, spec)?);
        }
        Ok(Msfn {
            decoders,
            channel_attn,
            spatial_attn,
            channels,
        })
    }

    pub fn stages(&self) -> usize {
        self.decoders.len()
    }

    /// Runs the first `n_stages` stages from Φ₀ (`[B, C, S, S]`).
    pub fn run_stages<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        phi0: Var,
        n_stages: usize,
        mode: AttentionMode,
    ) -> Result<MsfnOutput> {
        if n_stages == 0 || n_stages > self.stages() {
            return Err(Error::config(format!(
                "requested {n_stages} stages, model has {}",
                self.stages()
            )));
        }
        let s = tape.shape(phi0).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(
                "run_stages",
                &s,
                &[s.first().copied().unwrap_or(0), self.channels],
            ));
        }
        let (b, hw) = (s[0], s[2] * s[3]);
        let mut out = MsfnOutput {
            stages: Vec::with_capacity(n_stages),
            papm_evaluations: 0,
            decoder_evaluations: 0,
        };
        let mut phi = phi0;
        for i in 0..n_stages {
            let (wc, ws) = if i == 0 {
                (None, None)
            } else {
                let prev = &out.stages[i - 1].heatmaps;
                let (wc, ws) = match mode {
                    AttentionMode::Papm => {
                        out.papm_evaluations += 1;
                        let wc = self.channel_attn[i - 1].forward(tape, prev)?;
                        let ws = self.spatial_attn[i - 1].forward(tape, prev)?;
                        (wc, ws)
                    }
                    AttentionMode::Unit => (
                        tape.constant(Tensor::ones(&[b, self.channels])),
                        tape.constant(Tensor::ones(&[b, 1, s[2], s[3]])),
                    ),
                };
                debug_assert_eq!(tape.value(ws).numel(), b * hw);
                phi = feature_update(tape, phi, wc, ws)?;
                (Some(wc), Some(ws))
            };
            let heatmaps = self.decoders[i].forward(tape, phi, i + 1)?;
            out.decoder_evaluations += 1;
            out.stages.push(StageTrace {
                phi,
                channel_weights: wc,
                spatial_weights: ws,
                heatmaps,
            });
        }
        Ok(out)
    }
}
