//! Renders a parallel-channel corpus: every two-speaker mixture is recorded
//! through every channel profile of its split.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::channel::{apply_channel, default_profiles, ChannelProfile};
use super::manifest::{CorpusMeta, Manifest, MixtureRecord, SourceRef, Split, MANIFEST_VERSION, META_FILE};
use super::mix::{mix_pair, MIX_PEAK};
use super::seed::derive_seed;
use super::source::{generate_source, SpeakerParams};
use super::wav::save_wav;
use super::waveform::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerPools {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

impl Default for SpeakerPools {
    fn default() -> Self {
        Self { train: (0..16).collect(), valid: (16..20).collect(), test: (20..24).collect() }
    }
}

impl SpeakerPools {
    pub fn get(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Generator configuration, read from JSON. Missing fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub segment_s: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_channels: usize,
    /// Channel excluded from train and valid.
    pub holdout_channel: Option<u32>,
    /// s2 level relative to s1 is drawn uniformly from `[-r, r]` dB.
    pub rel_level_db: f64,
    pub speakers: SpeakerPools,
    /// Overrides the built-in profile table when present.
    pub profiles: Option<Vec<ChannelProfile>>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            segment_s: 3.0,
            n_train: 200,
            n_valid: 40,
            n_test: 40,
            n_channels: 4,
            holdout_channel: Some(3),
            rel_level_db: 2.5,
            speakers: SpeakerPools::default(),
            profiles: None,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }

    pub fn profile_table(&self) -> Result<Vec<ChannelProfile>> {
        match &self.profiles {
            Some(p) => {
                if p.len() != self.n_channels {
                    return Err(Error::Config(format!(
                        "n_channels is {} but {} profiles were given",
                        self.n_channels,
                        p.len()
                    )));
                }
                Ok(p.clone())
            }
            None => default_profiles(self.n_channels, self.sample_rate),
        }
    }

    /// Channel ids rendered for a split.
    pub fn split_channels(&self, split: Split) -> Result<Vec<u32>> {
        let all: Vec<u32> = self.profile_table()?.iter().map(|p| p.channel_id).collect();
        Ok(match (split, self.holdout_channel) {
            (Split::Test, _) | (_, None) => all,
            (_, Some(h)) => all.into_iter().filter(|&c| c != h).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.segment_s > 0.0) {
            return Err(Error::Config("sample_rate and segment_s must be positive".into()));
        }
        if !(self.rel_level_db >= 0.0) {
            return Err(Error::Config(format!("rel_level_db must be >= 0, got {}", self.rel_level_db)));
        }
        let profiles = self.profile_table()?;
        let mut ids = HashSet::new();
        for p in &profiles {
            p.validate()?;
            if !ids.insert(p.channel_id) {
                return Err(Error::Config(format!("duplicate channel id {}", p.channel_id)));
            }
        }
        if let Some(h) = self.holdout_channel {
            if self.n_channels < 3 {
                return Err(Error::Config(format!(
                    "holding out a channel needs n_channels >= 3, got {}",
                    self.n_channels
                )));
            }
            if !ids.contains(&h) {
                return Err(Error::Config(format!("holdout channel {h} is not in the profile table")));
            }
        }
        let mut seen: HashSet<u32> = HashSet::new();
        for split in Split::ALL {
            let pool = self.speakers.get(split);
            if self.count(split) > 0 && pool.len() < 2 {
                return Err(Error::Config(format!("{} split needs at least 2 speakers", split.name())));
            }
            for s in pool {
                if !seen.insert(*s) {
                    return Err(Error::Config(format!("speaker {s} appears in more than one split (or twice)")));
                }
            }
        }
        Ok(())
    }
}

/// Renders every split into `out` and writes the manifests.
pub fn build_corpus(cfg: &CorpusConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let profiles = cfg.profile_table()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for split in Split::ALL {
        let records = render_split(cfg, &profiles, split, out)?;
        Manifest::write_records(&out.join(format!("{}.jsonl", split.name())), &records)?;
    }
    let meta = CorpusMeta { version: MANIFEST_VERSION, config: cfg.clone(), profiles };
    let meta_path = out.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

fn render_split(cfg: &CorpusConfig, profiles: &[ChannelProfile], split: Split, out: &Path) -> Result<Vec<MixtureRecord>> {
    let channels = cfg.split_channels(split)?;
    let pool = cfg.speakers.get(split);
    let n = (cfg.segment_s * cfg.sample_rate as f64).round() as usize;
    let mut records = Vec::new();
    for ch in &channels {
        for sub in ["", "s1", "s2"] {
            let d = out.join(split.name()).join(ch.to_string()).join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    for i in 0..cfg.count(split) {
        let content_seed = derive_seed(cfg.seed, &[split.tag(), i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
        let spk: Vec<u32> = pool.choose_multiple(&mut rng, 2).copied().collect();
        let rel = if cfg.rel_level_db > 0.0 { rng.gen_range(-cfg.rel_level_db..=cfg.rel_level_db) } else { 0.0 };
        let sources = [0usize, 1].map(|k| SourceRef { speaker_id: spk[k], seed: derive_seed(content_seed, &[0x50, k as u64]) });
        let clean = sources.map(|s| generate_source(s.seed, cfg.segment_s, cfg.sample_rate, &SpeakerParams::for_speaker(s.speaker_id)));
        let mixed = mix_pair(&clean[0], &clean[1], rel)?;
        let content_id = format!("{}-{i:05}", split.name());

        for &ch in &channels {
            let profile = profiles.iter().find(|p| p.channel_id == ch).expect("split channel from profile table");
            let (mixture, targets) = render_channel(&mixed.targets, profile, content_seed);
            let mixture_id = format!("{content_id}-c{ch}");
            let rel_dir = format!("{}/{ch}", split.name());
            let mixture_path = format!("{rel_dir}/{mixture_id}.wav");
            let target_paths = [format!("{rel_dir}/s1/{mixture_id}.wav"), format!("{rel_dir}/s2/{mixture_id}.wav")];
            save_wav(&out.join(&mixture_path), &mixture)?;
            save_wav(&out.join(&target_paths[0]), &targets[0])?;
            save_wav(&out.join(&target_paths[1]), &targets[1])?;
            debug_assert_eq!(mixture.len(), n);
            records.push(MixtureRecord {
                version: MANIFEST_VERSION,
                mixture_id,
                content_id: content_id.clone(),
                split,
                channel_id: ch,
                sources,
                gain_db: mixed.gains_db,
                offsets: [0, 0],
                num_samples: mixture.len(),
                mixture_path,
                target_paths,
            });
        }
    }
    Ok(records)
}

/// Passes each scaled target through the channel on its own noise stream;
/// the mixture is their sum, so it equals the stored targets exactly before
/// quantisation. One joint gain keeps the mixture peak at or below
/// [`MIX_PEAK`].
pub fn render_channel(targets: &[Waveform; 2], profile: &ChannelProfile, content_seed: u64) -> (Waveform, [Waveform; 2]) {
    let rendered = [0usize, 1].map(|k| {
        let seed = derive_seed(content_seed, &[0xc4, profile.channel_id as u64, profile.seed, k as u64]);
        apply_channel(&targets[k], &profile.with_seed(seed))
    });
    let sum: Vec<f64> = rendered[0].samples.iter().zip(&rendered[1].samples).map(|(a, b)| a + b).collect();
    let peak = sum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > MIX_PEAK { MIX_PEAK / peak } else { 1.0 };
    let sr = targets[0].sample_rate;
    (Waveform::new(sum.iter().map(|v| v * g).collect(), sr), rendered.map(|w| w.scaled(g)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusConfig {
        CorpusConfig { segment_s: 0.25, n_train: 3, n_valid: 2, n_test: 2, ..Default::default() }
    }

    #[test]
    fn holdout_only_in_test() {
        let cfg = tiny();
        assert_eq!(cfg.split_channels(Split::Train).unwrap(), vec![0, 1, 2]);
        assert_eq!(cfg.split_channels(Split::Valid).unwrap(), vec![0, 1, 2]);
        assert_eq!(cfg.split_channels(Split::Test).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_shared_speakers() {
        let mut cfg = tiny();
        cfg.speakers.valid.push(3);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("speaker 3"), "{err}");
    }

    #[test]
    fn holdout_needs_three_channels() {
        let cfg = CorpusConfig { n_channels: 2, holdout_channel: Some(1), ..tiny() };
        assert!(cfg.validate().is_err());
        let cfg = CorpusConfig { n_channels: 2, holdout_channel: None, ..tiny() };
        cfg.validate().unwrap();
    }

    #[test]
    fn channel_render_sums_exactly() {
        let p = default_profiles(4, 8000).unwrap();
        let s = [0u64, 1].map(|k| generate_source(k, 0.2, 8000, &SpeakerParams::for_speaker(k as u32)));
        let m = mix_pair(&s[0], &s[1], 1.0).unwrap();
        for prof in &p {
            let (mix, t) = render_channel(&m.targets, prof, 7);
            assert!(mix.peak() <= MIX_PEAK + 1e-12);
            for i in 0..mix.len() {
                assert!((mix.samples[i] - t[0].samples[i] - t[1].samples[i]).abs() < 1e-12);
            }
        }
        let (a, _) = render_channel(&m.targets, &p[1], 7);
        let (b, _) = render_channel(&m.targets, &p[2], 7);
        assert_ne!(a, b);
    }
}
