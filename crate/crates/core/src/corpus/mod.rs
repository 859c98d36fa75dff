//! Synthetic multi-channel two-speaker corpus.

pub mod build;
pub mod channel;
pub mod manifest;
pub mod mix;
pub mod seed;
pub mod source;
pub mod wav;
pub mod waveform;

pub use build::{build_corpus, render_channel, CorpusConfig, SpeakerPools};
pub use channel::{apply_channel, default_profiles, ChannelProfile};
pub use manifest::{CorpusMeta, Example, Manifest, MixtureRecord, SourceRef, Split};
pub use mix::{mix_pair, Mixed};
pub use source::{generate_source, SpeakerParams};
pub use wav::{load_wav, save_wav};
pub use waveform::Waveform;
