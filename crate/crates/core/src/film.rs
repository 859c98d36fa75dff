//! Feature-wise linear modulation of the separator features by the channel
//! embedding, and the assembled model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chanenc::{ChannelEncoder, ChannelEncoderConfig, EmbeddingSource};
use crate::error::{Error, Result};
use crate::gradcore::{Checkpoint, ParamStore, Tensor, Var};
use crate::nn::{Builder, Fwd, Linear, Prelu, NORM_EPS};
use crate::separator::{Separator, SeparatorConfig};

#[derive(Debug, Clone)]
pub struct Film {
    scale: Linear,
    shift: Linear,
    act: Prelu,
}

/// Per-utterance modulation `W, b: [M, enc_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct FilmParams {
    pub w: Var,
    pub b: Var,
}

impl Film {
    /// Scale bias starts at 1 and shift bias at 0, so a zero embedding
    /// leaves the normalised features unmodulated.
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, embed_dim: usize, enc_dim: usize) -> Result<Self> {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let scale = b.scope("scale", |b| {
            Ok(Linear { w: b.uniform("w", &[enc_dim, embed_dim], bound)?, b: Some(b.param("b", Tensor::full(&[enc_dim], 1.0))?) })
        })?;
        let shift = b.scope("shift", |b| {
            Ok(Linear { w: b.uniform("w", &[enc_dim, embed_dim], bound)?, b: Some(b.param("b", Tensor::zeros(&[enc_dim]))?) })
        })?;
        let act = b.scope("act", |b| Prelu::new(b, enc_dim))?;
        Ok(Self { scale, shift, act })
    }

    pub fn film_params(&self, f: &mut Fwd<'_>, c: Var) -> Result<FilmParams> {
        Ok(FilmParams { w: self.scale.forward(f, c)?, b: self.shift.forward(f, c)? })
    }

    /// `PReLU(W * InstanceNorm(S) + b)`, with `W, b` broadcast over time.
    pub fn film_apply(&self, f: &mut Fwd<'_>, s: Var, p: FilmParams) -> Result<Var> {
        let n = f.g.instance_norm(s, NORM_EPS)?;
        let m = f.g.scale_shift_time(n, p.w, Some(p.b))?;
        self.act.forward(f, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub separator: SeparatorConfig,
    /// `None` builds the plain separator without channel conditioning.
    pub channel_encoder: Option<ChannelEncoderConfig>,
}

impl ModelConfig {
    pub fn casnet(separator: SeparatorConfig, channel_encoder: ChannelEncoderConfig) -> Self {
        Self { separator, channel_encoder: Some(channel_encoder) }
    }

    pub fn baseline(separator: SeparatorConfig) -> Self {
        Self { separator, channel_encoder: None }
    }

    pub fn is_baseline(&self) -> bool {
        self.channel_encoder.is_none()
    }
}

#[derive(Debug, Clone)]
struct Conditioning {
    encoder: ChannelEncoder,
    film: Film,
}

/// Separator plus, for the channel-aware variant, the channel encoder and
/// the modulation layer. Parameter names of the separator are identical in
/// both variants, so weights can be shared between them.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub sep: Separator,
    cond: Option<Conditioning>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `[B, n_sources, T]`.
    pub estimates: Var,
    /// `[B, D]` embedding actually used, when the modulation layer ran.
    pub embedding: Option<Var>,
    /// Classifier logits, present only when the embedding was encoded.
    pub logits: Option<Var>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let sep = b.scope("sep", |b| Separator::new(b, &cfg.separator))?;
        let cond = match &cfg.channel_encoder {
            None => None,
            Some(ce) => Some(Conditioning {
                encoder: b.scope("chan", |b| ChannelEncoder::new(b, ce, cfg.separator.enc_dim))?,
                film: b.scope("film", |b| Film::new(b, ce.embed_dim, cfg.separator.enc_dim))?,
            }),
        };
        Ok((Self { cfg: cfg.clone(), sep, cond }, store))
    }

    pub fn channel_encoder(&self) -> Option<&ChannelEncoder> {
        self.cond.as_ref().map(|c| &c.encoder)
    }

    pub fn film(&self) -> Option<&Film> {
        self.cond.as_ref().map(|c| &c.film)
    }

    /// Mixture `x: [B, T]` to separated sources, conditioned on the
    /// requested embedding source. `aux: [B, T']` is required exactly for
    /// the sources that encode a waveform.
    pub fn casnet_forward(
        &self,
        f: &mut Fwd<'_>,
        x: Var,
        source: EmbeddingSource,
        aux: Option<Var>,
        rng: &mut impl Rng,
    ) -> Result<ForwardOut> {
        if source.needs_aux() != aux.is_some() {
            return Err(Error::invalid(format!(
                "embedding source {} {} an auxiliary mixture",
                source.label(),
                if source.needs_aux() { "requires" } else { "does not take" }
            )));
        }
        let batch = f.g.shape(x)[0];
        let fr = self.sep.front(f, x)?;
        let Some(cond) = &self.cond else {
            if source != EmbeddingSource::Bypass {
                return Err(Error::invalid(format!(
                    "the baseline model has no channel encoder; embedding source {} is unavailable",
                    source.label()
                )));
            }
            let estimates = self.sep.back(f, fr.encoded, fr.features, fr.time)?;
            return Ok(ForwardOut { estimates, embedding: None, logits: None });
        };
        let d = cond.encoder.cfg.embed_dim;
        let (embedding, logits) = match source {
            EmbeddingSource::Bypass => {
                let estimates = self.sep.back(f, fr.encoded, fr.features, fr.time)?;
                return Ok(ForwardOut { estimates, embedding: None, logits: None });
            }
            EmbeddingSource::AllOnes => (f.g.constant(Tensor::full(&[batch, d], 1.0)), None),
            EmbeddingSource::GaussianNoise => {
                let t = Tensor::from_fn(&[batch, d], |_| rng.sample(StandardNormal));
                (f.g.constant(t), None)
            }
            _ => {
                let aux = aux.expect("checked above");
                if f.g.shape(aux)[0] != batch {
                    return Err(Error::shape(
                        "casnet_forward",
                        format!("mixture batch {batch} vs auxiliary batch {}", f.g.shape(aux)[0]),
                    ));
                }
                let c = cond.encoder.encode_channel(&self.sep, f, aux)?;
                let logits = cond.encoder.classify_channel(f, c)?;
                (c, Some(logits))
            }
        };
        let p = cond.film.film_params(f, embedding)?;
        let s = cond.film.film_apply(f, fr.features, p)?;
        let estimates = self.sep.back(f, fr.encoded, s, fr.time)?;
        Ok(ForwardOut { estimates, embedding: Some(embedding), logits })
    }

    pub fn to_checkpoint(&self, store: &ParamStore) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(serde_json::to_value(&self.cfg)?, store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamStore)> {
        let cfg: ModelConfig = serde_json::from_value(ck.header.model.clone())
            .map_err(|e| Error::Checkpoint(format!("model header: {e}")))?;
        let (model, mut store) = Self::new(&cfg, 0)?;
        ck.restore_into(&mut store)?;
        Ok((model, store))
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
