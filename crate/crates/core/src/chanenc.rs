//! Channel encoder: conv block, squeeze-and-excitation residual blocks,
//! attentive time pooling and a projection to the channel embedding, plus
//! the linear channel classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Tensor, Var};
use crate::nn::{BatchNorm, Builder, Conv1d, Fwd, Linear};
use crate::separator::Separator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelEncoderConfig {
    /// Number of SE-ResBlocks.
    pub n_blocks: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub n_channel_classes: usize,
    /// Bottleneck ratio of the excitation MLP.
    pub se_reduction: usize,
}

impl Default for ChannelEncoderConfig {
    fn default() -> Self {
        Self { n_blocks: 4, width: 64, embed_dim: 128, n_channel_classes: 4, se_reduction: 4 }
    }
}

impl ChannelEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.width == 0 || self.embed_dim == 0 || self.se_reduction == 0 {
            return Err(Error::Config("channel encoder sizes must be positive".into()));
        }
        if self.n_channel_classes < 2 {
            return Err(Error::Config(format!(
                "channel classifier needs at least 2 classes, got {}",
                self.n_channel_classes
            )));
        }
        Ok(())
    }
}

/// Where the channel embedding used for conditioning comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    /// Encoded from the mixture being separated.
    SameMixture,
    /// Encoded from another mixture recorded on the same channel.
    OtherMixtureSameChannel,
    /// Encoded from a mixture recorded on a different channel.
    OtherChannel,
    AllOnes,
    GaussianNoise,
    /// No conditioning at all: the modulation layer is skipped.
    Bypass,
}

impl EmbeddingSource {
    pub const ALL: [EmbeddingSource; 6] = [
        Self::SameMixture,
        Self::OtherMixtureSameChannel,
        Self::OtherChannel,
        Self::AllOnes,
        Self::GaussianNoise,
        Self::Bypass,
    ];

    pub fn needs_aux(self) -> bool {
        matches!(self, Self::SameMixture | Self::OtherMixtureSameChannel | Self::OtherChannel)
    }

    /// Short name used on the command line and in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::SameMixture => "same",
            Self::OtherMixtureSameChannel => "other-same-channel",
            Self::OtherChannel => "other-channel",
            Self::AllOnes => "all-ones",
            Self::GaussianNoise => "gaussian",
            Self::Bypass => "no-film",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s).ok_or_else(|| {
            let all: Vec<_> = Self::ALL.iter().map(|v| v.label()).collect();
            Error::invalid(format!("unknown embedding source {s:?}; expected one of {}", all.join(", ")))
        })
    }
}

/// Embedding values detached from any graph, with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEmbedding {
    pub vector: Tensor,
    pub source: EmbeddingSource,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn new<R: Rng>(b: &mut Builder<'_, R>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: b.scope("conv", |b| Conv1d::new(b, cin, cout, 3, 1, 1, true))?,
            bn: b.scope("bn", |b| BatchNorm::new(b, cout))?,
        })
    }

    /// `BatchNorm(ReLU(Conv1D(x)))`, time length preserved.
    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = f.g.relu(y);
        self.bn.forward(f, y)
    }
}

#[derive(Debug, Clone)]
pub struct SeResBlock {
    conv1: ConvBlock,
    conv2: ConvBlock,
    fc1: Linear,
    fc2: Linear,
}

impl SeResBlock {
    fn new<R: Rng>(b: &mut Builder<'_, R>, ch: usize, reduction: usize) -> Result<Self> {
        let mid = (ch / reduction).max(1);
        Ok(Self {
            conv1: b.scope("conv1", |b| ConvBlock::new(b, ch, ch))?,
            conv2: b.scope("conv2", |b| ConvBlock::new(b, ch, ch))?,
            fc1: b.scope("fc1", |b| Linear::new(b, ch, mid, true))?,
            fc2: b.scope("fc2", |b| Linear::new(b, mid, ch, true))?,
        })
    }

    /// Excitation gate in `(0, 1)`, one value per feature map: `[M, ch]`.
    pub fn gate(&self, f: &mut Fwd<'_>, y: Var) -> Result<Var> {
        let s = f.g.avg_pool_time(y)?;
        let h = self.fc1.forward(f, s)?;
        let h = f.g.relu(h);
        let z = self.fc2.forward(f, h)?;
        Ok(f.g.sigmoid(z))
    }

    /// Two conv blocks, re-weighted by the gate, plus the block input.
    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(f, x)?;
        let y = self.conv2.forward(f, y)?;
        let gate = self.gate(f, y)?;
        let r = f.g.scale_shift_time(y, gate, None)?;
        f.g.add(r, x)
    }
}

#[derive(Debug, Clone)]
pub struct AttentivePool {
    score: Linear,
}

impl AttentivePool {
    /// Returns the pooled `[M, ch]` and the attention weights `[M, T]`.
    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<(Var, Var)> {
        let [m, _, t] = <[usize; 3]>::try_from(f.g.shape(x)).map_err(|_| Error::shape("attentive_pool", "rank 3"))?;
        let xt = f.g.permute(x, &[0, 2, 1])?;
        let logits = self.score.forward(f, xt)?;
        let logits = f.g.reshape(logits, &[m, t])?;
        let a = f.g.sigmoid(logits);
        let a = f.g.normalize_rows(a)?;
        let z = f.g.weighted_pool_time(x, a)?;
        Ok((z, a))
    }
}

#[derive(Debug, Clone)]
pub struct ChannelEncoder {
    pub cfg: ChannelEncoderConfig,
    pub(crate) conv: ConvBlock,
    pub(crate) blocks: Vec<SeResBlock>,
    pub(crate) pool: AttentivePool,
    pub(crate) project: Linear,
    pub(crate) classifier: Linear,
}

impl ChannelEncoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &ChannelEncoderConfig, in_ch: usize) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        Ok(Self {
            cfg: cfg.clone(),
            conv: b.scope("conv", |b| ConvBlock::new(b, in_ch, w))?,
            blocks: (0..cfg.n_blocks)
                .map(|i| b.scope(&format!("se{i}"), |b| SeResBlock::new(b, w, cfg.se_reduction)))
                .collect::<Result<_>>()?,
            pool: b.scope("pool", |b| Ok(AttentivePool { score: Linear::new(b, w, 1, true)? }))?,
            project: b.scope("project", |b| Linear::new(b, w, cfg.embed_dim, true))?,
            classifier: b.scope("classifier", |b| Linear::new(b, cfg.embed_dim, cfg.n_channel_classes, true))?,
        })
    }

    pub fn conv_block(&self, f: &mut Fwd<'_>, x0: Var) -> Result<Var> {
        self.conv.forward(f, x0)
    }

    pub fn se_blocks(&self) -> &[SeResBlock] {
        &self.blocks
    }

    pub fn attentive_pool(&self, f: &mut Fwd<'_>, xb: Var) -> Result<(Var, Var)> {
        self.pool.forward(f, xb)
    }

    pub fn project_embedding(&self, f: &mut Fwd<'_>, z: Var) -> Result<Var> {
        self.project.forward(f, z)
    }

    /// Embedding from encoder features `x0: [M, enc_dim, T]` to `[M, D]`.
    pub fn embed_features(&self, f: &mut Fwd<'_>, x0: Var) -> Result<Var> {
        let mut x = self.conv_block(f, x0)?;
        for blk in &self.blocks {
            x = blk.forward(f, x)?;
        }
        let (z, _) = self.attentive_pool(f, x)?;
        self.project_embedding(f, z)
    }

    /// Waveform batch `aux: [M, T]` through the shared waveform encoder and
    /// the channel encoder.
    pub fn encode_channel(&self, sep: &Separator, f: &mut Fwd<'_>, aux: Var) -> Result<Var> {
        let x0 = sep.encode(f, aux)?;
        self.embed_features(f, x0)
    }

    /// Logits `[M, n_channel_classes]`.
    pub fn classify_channel(&self, f: &mut Fwd<'_>, c: Var) -> Result<Var> {
        self.classifier.forward(f, c)
    }
}
