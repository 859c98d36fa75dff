use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chanenc::EmbeddingSource;
use crate::corpus::MixtureRecord;
use crate::error::{Error, Result};

/// Which auxiliary mixture feeds the channel encoder during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// The mixture itself.
    GuideSame,
    /// Different content, same channel.
    GuideDiff,
    /// Different content, different channel.
    Perturb,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::GuideSame => "guide-same",
            Strategy::GuideDiff => "guide-diff",
            Strategy::Perturb => "perturb",
        }
    }

    pub fn embedding_source(self) -> EmbeddingSource {
        match self {
            Strategy::GuideSame => EmbeddingSource::SameMixture,
            Strategy::GuideDiff => EmbeddingSource::OtherMixtureSameChannel,
            Strategy::Perturb => EmbeddingSource::OtherChannel,
        }
    }
}

/// Indices into the record list plus the classifier target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingItem {
    pub mixture: usize,
    pub aux: usize,
    /// Channel of the auxiliary mixture.
    pub channel_label: u32,
}

/// Precomputed candidate lists so every draw is uniform over the valid
/// auxiliary choices.
#[derive(Debug, Clone)]
pub struct Sampler {
    strategy: Strategy,
    candidates: Vec<Vec<usize>>,
    channels: Vec<u32>,
}

impl Sampler {
    /// Fails when some record has no valid auxiliary partner.
    pub fn new(strategy: Strategy, records: &[MixtureRecord]) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Config(format!("training needs at least 2 mixtures, got {}", records.len())));
        }
        let candidates: Vec<Vec<usize>> = records
            .iter()
            .enumerate()
            .map(|(i, r)| match strategy {
                Strategy::GuideSame => vec![i],
                Strategy::GuideDiff => (0..records.len())
                    .filter(|&j| records[j].channel_id == r.channel_id && records[j].content_id != r.content_id)
                    .collect(),
                Strategy::Perturb => (0..records.len())
                    .filter(|&j| records[j].channel_id != r.channel_id && records[j].content_id != r.content_id)
                    .collect(),
            })
            .collect();
        if let Some(i) = candidates.iter().position(Vec::is_empty) {
            let need = match strategy {
                Strategy::Perturb => "at least 2 channels and 2 distinct contents",
                _ => "at least 2 distinct contents per channel",
            };
            return Err(Error::Config(format!(
                "strategy {} cannot pair mixture {}: the training set needs {need}",
                strategy.label(),
                records[i].mixture_id
            )));
        }
        Ok(Self { strategy, candidates, channels: records.iter().map(|r| r.channel_id).collect() })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TrainingItem {
        let mixture = rng.gen_range(0..self.candidates.len());
        let aux = *self.candidates[mixture].choose(rng).expect("non-empty by construction");
        TrainingItem { mixture, aux, channel_label: self.channels[aux] }
    }
}
