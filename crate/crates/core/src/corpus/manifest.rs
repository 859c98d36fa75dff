//! Manifest schema: one JSON object per line in `<root>/<split>.jsonl`,
//! plus corpus-wide metadata in `<root>/corpus.json`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::build::CorpusConfig;
use super::channel::ChannelProfile;
use super::wav::load_wav;
use super::waveform::Waveform;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const META_FILE: &str = "corpus.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?} (expected train, valid or test)")))
    }
}

/// Synthetic source: a speaker identity and the seed its waveform was drawn with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub speaker_id: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub version: u32,
    pub mixture_id: String,
    /// Shared by every channel rendering of the same two utterances.
    pub content_id: String,
    pub split: Split,
    pub channel_id: u32,
    pub sources: [SourceRef; 2],
    pub gain_db: [f64; 2],
    pub offsets: [usize; 2],
    pub num_samples: usize,
    /// Paths relative to the corpus root.
    pub mixture_path: String,
    pub target_paths: [String; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub version: u32,
    pub config: CorpusConfig,
    pub profiles: Vec<ChannelProfile>,
}

/// A loaded audio example: mixture and its two targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mixture: Waveform,
    pub targets: [Waveform; 2],
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: Split,
    pub meta: CorpusMeta,
    pub records: Vec<MixtureRecord>,
}

impl Manifest {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let meta_path = root.join(META_FILE);
        let meta: CorpusMeta =
            serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        if meta.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("{}: unsupported manifest version {}", meta_path.display(), meta.version)));
        }
        let path = root.join(format!("{}.jsonl", split.name()));
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: MixtureRecord = serde_json::from_str(&line)?;
            if r.version != MANIFEST_VERSION {
                return Err(Error::Config(format!("{}: record version {}", path.display(), r.version)));
            }
            records.push(r);
        }
        let m = Self { root: root.to_path_buf(), split, meta, records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let known: HashSet<u32> = self.meta.profiles.iter().map(|p| p.channel_id).collect();
        for r in &self.records {
            if !ids.insert(&r.mixture_id) {
                return Err(Error::Config(format!("duplicate mixture id {}", r.mixture_id)));
            }
            if !known.contains(&r.channel_id) {
                return Err(Error::Config(format!("{}: channel {} not in profile table", r.mixture_id, r.channel_id)));
            }
        }
        Ok(())
    }

    pub(crate) fn write_records(path: &Path, records: &[MixtureRecord]) -> Result<()> {
        let mut out = Vec::new();
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Distinct channel ids present in this split, ascending.
    pub fn channels(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.records.iter().map(|r| r.channel_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn speakers(&self) -> HashSet<u32> {
        self.records.iter().flat_map(|r| r.sources.iter().map(|s| s.speaker_id)).collect()
    }

    pub fn sample_rate(&self) -> u32 {
        self.meta.config.sample_rate
    }

    pub fn load_example(&self, r: &MixtureRecord) -> Result<Example> {
        let mixture = load_wav(&self.root.join(&r.mixture_path))?;
        let t0 = load_wav(&self.root.join(&r.target_paths[0]))?;
        let t1 = load_wav(&self.root.join(&r.target_paths[1]))?;
        Ok(Example { mixture, targets: [t0, t1] })
    }

    /// Loads every record's audio, in manifest order.
    pub fn load_all(&self) -> Result<Vec<Example>> {
        self.records.iter().map(|r| self.load_example(r)).collect()
    }

    /// Keeps only records whose channel is in `channels`.
    pub fn filter_channels(&self, channels: &[u32]) -> Self {
        Self { records: self.records.iter().filter(|r| channels.contains(&r.channel_id)).cloned().collect(), ..self.clone() }
    }
}
