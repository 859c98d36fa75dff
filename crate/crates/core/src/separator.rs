//! Time-domain separator: learned waveform encoder, dual-path recurrent
//! blocks, mask-estimating post-net and transposed-convolution decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ParamId, Var};
use crate::nn::{BiLstm, Builder, Conv1d, Fwd, LayerNorm, Linear, Prelu};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    pub enc_dim: usize,
    pub win: usize,
    pub stride: usize,
    pub n_blocks: usize,
    pub chunk_size: usize,
    pub hidden: usize,
    pub n_sources: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self { enc_dim: 64, win: 16, stride: 8, n_blocks: 4, chunk_size: 50, hidden: 64, n_sources: 2 }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.enc_dim == 0 || self.hidden == 0 || self.chunk_size == 0 || self.win == 0 {
            return bad("enc_dim, hidden, chunk_size and win must be positive".into());
        }
        if self.stride == 0 || self.stride > self.win {
            return bad(format!("stride must be in 1..=win, got stride {} win {}", self.stride, self.win));
        }
        if self.n_sources < 2 {
            return bad(format!("n_sources must be at least 2, got {}", self.n_sources));
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        Ok(())
    }

    pub fn frames(&self, time: usize) -> usize {
        (time - self.win) / self.stride + 1
    }

    /// Length after right-padding so that the encoder tiles the signal
    /// exactly and yields at least `chunk_size` frames.
    pub fn padded_len(&self, time: usize) -> usize {
        let min = self.win + (self.chunk_size - 1) * self.stride;
        let t = time.max(min);
        let rem = (t - self.win) % self.stride;
        if rem == 0 {
            t
        } else {
            t + self.stride - rem
        }
    }
}

#[derive(Debug, Clone)]
struct Path {
    rnn: BiLstm,
    fc: Linear,
    norm: LayerNorm,
}

impl Path {
    fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize, h: usize) -> Result<Self> {
        Ok(Self {
            rnn: b.scope("rnn", |b| BiLstm::new(b, c, h))?,
            fc: b.scope("fc", |b| Linear::new(b, 2 * h, c, true))?,
            norm: b.scope("norm", |b| LayerNorm::new(b, c))?,
        })
    }

    /// `x: [rows, frames, c]` to the same shape.
    fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let y = self.rnn.forward(f, x)?;
        let y = self.fc.forward(f, y)?;
        self.norm.forward(f, y)
    }
}

#[derive(Debug, Clone)]
struct DualPathBlock {
    intra: Path,
    inter: Path,
}

impl DualPathBlock {
    /// `x: [B, C, K, S]` to the same shape.
    fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let [b, c, k, s] = <[usize; 4]>::try_from(f.g.shape(x)).expect("segmented rank 4");
        // Within each chunk: sequence over K.
        let t = f.g.permute(x, &[0, 3, 2, 1])?;
        let t = f.g.reshape(t, &[b * s, k, c])?;
        let t = self.intra.forward(f, t)?;
        let t = f.g.reshape(t, &[b, s, k, c])?;
        let t = f.g.permute(t, &[0, 3, 2, 1])?;
        let x = f.g.add(x, t)?;
        // Across chunks: sequence over S.
        let t = f.g.permute(x, &[0, 2, 3, 1])?;
        let t = f.g.reshape(t, &[b * k, s, c])?;
        let t = self.inter.forward(f, t)?;
        let t = f.g.reshape(t, &[b, k, s, c])?;
        let t = f.g.permute(t, &[0, 3, 1, 2])?;
        f.g.add(x, t)
    }
}

#[derive(Debug, Clone)]
struct PostNet {
    act: Prelu,
    out: Conv1d,
    gate: Conv1d,
}

#[derive(Debug, Clone)]
pub struct Separator {
    pub cfg: SeparatorConfig,
    encoder: Conv1d,
    blocks: Vec<DualPathBlock>,
    postnet: PostNet,
    decoder: ParamId,
}

/// Encoder output kept for masking plus the separator's feature stream.
pub struct Front {
    pub encoded: Var,
    pub features: Var,
    pub time: usize,
}

impl Separator {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &SeparatorConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, n) = (cfg.enc_dim, cfg.n_sources);
        let encoder = b.scope("encoder", |b| Conv1d::new(b, 1, c, cfg.win, cfg.stride, 0, false))?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                b.scope(&format!("block{i}"), |b| {
                    Ok(DualPathBlock {
                        intra: b.scope("intra", |b| Path::new(b, c, cfg.hidden))?,
                        inter: b.scope("inter", |b| Path::new(b, c, cfg.hidden))?,
                    })
                })
            })
            .collect::<Result<_>>()?;
        let postnet = b.scope("postnet", |b| {
            Ok(PostNet {
                act: b.scope("act", |b| Prelu::new(b, c))?,
                out: b.scope("out", |b| Conv1d::new(b, c, n * c, 1, 1, 0, true))?,
                gate: b.scope("gate", |b| Conv1d::new(b, c, n * c, 1, 1, 0, true))?,
            })
        })?;
        let decoder = b.scope("decoder", |b| b.uniform("w", &[c, 1, cfg.win], 1.0 / (c as f64).sqrt()))?;
        Ok(Self { cfg: cfg.clone(), encoder, blocks, postnet, decoder })
    }

    /// `x: [B, T]` to non-negative features `[B, enc_dim, frames]`.
    pub fn encode(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let s = f.g.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("encode", format!("expected [batch, time], got {s:?}")));
        }
        if s[1] < self.cfg.win {
            return Err(Error::invalid(format!(
                "input of {} samples is shorter than the encoder window; need at least {}",
                s[1], self.cfg.win
            )));
        }
        let x = f.g.reshape(x, &[s[0], 1, s[1]])?;
        let y = self.encoder.forward(f, x)?;
        Ok(f.g.relu(y))
    }

    /// Dual-path processing with `n_blocks` blocks (or `override_blocks`).
    pub fn dprnn_stack(&self, f: &mut Fwd<'_>, s: Var) -> Result<Var> {
        self.dprnn_blocks(f, s, self.blocks.len())
    }

    pub(crate) fn dprnn_blocks(&self, f: &mut Fwd<'_>, s: Var, n: usize) -> Result<Var> {
        let frames = f.g.shape(s)[2];
        if frames < self.cfg.chunk_size {
            return Err(Error::invalid(format!(
                "{frames} frames is fewer than chunk size {}",
                self.cfg.chunk_size
            )));
        }
        let (mut x, geom) = f.g.segment(s, self.cfg.chunk_size)?;
        for blk in &self.blocks[..n] {
            x = blk.forward(f, x)?;
        }
        f.g.overlap_add(x, &geom)
    }

    /// Masks in `[0, 1]`, shape `[B, n_sources, enc_dim, frames]`.
    pub fn postnet_masks(&self, f: &mut Fwd<'_>, s: Var) -> Result<Var> {
        let [b, c, t] = <[usize; 3]>::try_from(f.g.shape(s)).map_err(|_| Error::shape("postnet", "rank 3 expected"))?;
        let n = self.cfg.n_sources;
        let h = self.postnet.act.forward(f, s)?;
        let out = self.postnet.out.forward(f, h)?;
        let gate = self.postnet.gate.forward(f, h)?;
        let out = f.g.tanh(out);
        let out = f.g.affine(out, 0.5, 0.5);
        let gate = f.g.sigmoid(gate);
        let m = f.g.mul(out, gate)?;
        f.g.reshape(m, &[b, n, c, t])
    }

    /// Transposed convolution of each masked source, cut to `time` samples.
    pub fn decode(&self, f: &mut Fwd<'_>, masked: Var, time: usize) -> Result<Var> {
        let s = f.g.shape(masked).to_vec();
        let (b, n) = (s[0], s[1]);
        let x = f.g.reshape(masked, &[b * n, s[2], s[3]])?;
        let w = f.p(self.decoder);
        let y = f.g.conv_transpose1d(x, w, self.cfg.stride)?;
        let len = f.g.shape(y)[2];
        let y = f.g.reshape(y, &[b, n, len])?;
        f.g.fit_last(y, time)
    }

    /// Pads, encodes and runs the dual-path stack.
    pub fn front(&self, f: &mut Fwd<'_>, x: Var) -> Result<Front> {
        let time = *f.g.shape(x).last().unwrap();
        if time < self.cfg.win {
            return Err(Error::invalid(format!(
                "mixture of {time} samples is shorter than the encoder window; need at least {}",
                self.cfg.win
            )));
        }
        let padded = f.g.fit_last(x, self.cfg.padded_len(time))?;
        let encoded = self.encode(f, padded)?;
        let features = self.dprnn_stack(f, encoded)?;
        Ok(Front { encoded, features, time })
    }

    /// Post-net, masking and decoding; returns `[B, n_sources, time]`.
    pub fn back(&self, f: &mut Fwd<'_>, encoded: Var, features: Var, time: usize) -> Result<Var> {
        let masks = self.postnet_masks(f, features)?;
        let masked = f.g.mask_apply(masks, encoded)?;
        self.decode(f, masked, time)
    }

    /// Plain separator forward: `x: [B, T]` to `[B, n_sources, T]`.
    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let fr = self.front(f, x)?;
        self.back(f, fr.encoded, fr.features, fr.time)
    }
}
