//! Speech-like source synthesis: a harmonic stack driven by a drifting
//! pitch contour, shaped by moving formant resonances and gated into
//! syllables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::seed::derive_seed;
use super::waveform::{db_to_gain, Waveform};

pub const SOURCE_RMS_DBFS: f64 = -20.0;

/// Voice characteristics of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub f0_low_hz: f64,
    pub f0_high_hz: f64,
    /// Multiplier on the nominal formant centres (vocal-tract length).
    pub formant_scale: f64,
    /// Harmonic amplitude roll-off exponent.
    pub tilt: f64,
    /// Syllables per second.
    pub syllable_rate: f64,
}

impl SpeakerParams {
    /// Deterministic voice for a speaker identity.
    pub fn for_speaker(speaker_id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5eed_5eed, &[speaker_id as u64]));
        let high = speaker_id % 2 == 1;
        let base = if high { rng.gen_range(165.0..235.0) } else { rng.gen_range(90.0..140.0) };
        let span = rng.gen_range(1.25..1.6);
        Self {
            f0_low_hz: base,
            f0_high_hz: base * span,
            formant_scale: if high { rng.gen_range(1.05..1.25) } else { rng.gen_range(0.82..1.0) },
            tilt: rng.gen_range(0.7..1.4),
            syllable_rate: rng.gen_range(3.0..5.5),
        }
    }
}

const FORMANTS_HZ: [(f64, f64); 3] = [(500.0, 110.0), (1500.0, 160.0), (2500.0, 220.0)];
const MAX_HARMONICS: usize = 48;
/// Samples between recomputations of the slowly varying quantities.
const CONTROL_BLOCK: usize = 40;

pub fn generate_source(seed: u64, duration_s: f64, sample_rate: u32, speaker: &SpeakerParams) -> Waveform {
    assert!(duration_s > 0.0, "duration must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round().max(1.0) as usize;

    // Pitch contour: centre of the range plus two slow sinusoidal drifts.
    let f0_mid = 0.5 * (speaker.f0_low_hz + speaker.f0_high_hz);
    let f0_dev = 0.5 * (speaker.f0_high_hz - speaker.f0_low_hz);
    let drift: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| (rng.gen_range(0.3..1.5), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..0.6)))
        .collect();
    // Formant wander, one slow oscillation per formant.
    let wander: Vec<(f64, f64)> =
        (0..3).map(|_| (rng.gen_range(1.0..4.0), rng.gen_range(0.0..std::f64::consts::TAU))).collect();

    let envelope = syllable_envelope(&mut rng, n, sr, speaker.syllable_rate);

    let mut phases = vec![0.0f64; MAX_HARMONICS];
    for p in phases.iter_mut() {
        *p = rng.gen_range(0.0..std::f64::consts::TAU);
    }
    let mut amps = vec![0.0f64; MAX_HARMONICS];
    let mut out = vec![0.0; n];
    let mut f0 = f0_mid;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        if i % CONTROL_BLOCK == 0 {
            let d: f64 = drift.iter().map(|(rate, ph, w)| w * (std::f64::consts::TAU * rate * t + ph).sin()).sum();
            f0 = (f0_mid + f0_dev * d.clamp(-1.0, 1.0)).clamp(speaker.f0_low_hz, speaker.f0_high_hz);
            for (k, a) in amps.iter_mut().enumerate() {
                let fk = f0 * (k + 1) as f64;
                if fk >= 0.45 * sr {
                    *a = 0.0;
                    continue;
                }
                let env: f64 = FORMANTS_HZ
                    .iter()
                    .zip(&wander)
                    .map(|(&(fc, bw), &(rate, ph))| {
                        let centre = fc * speaker.formant_scale * (1.0 + 0.12 * (std::f64::consts::TAU * rate * t + ph).sin());
                        let z = (fk - centre) / bw;
                        (-0.5 * z * z).exp()
                    })
                    .sum();
                *a = (0.15 + env) / ((k + 1) as f64).powf(speaker.tilt);
            }
        }
        let mut s = 0.0;
        for (k, (ph, a)) in phases.iter_mut().zip(&amps).enumerate() {
            *ph += std::f64::consts::TAU * f0 * (k + 1) as f64 / sr;
            if *a != 0.0 {
                s += a * ph.sin();
            }
        }
        *o = s * envelope[i];
    }

    let w = Waveform::new(out, sample_rate);
    let rms = w.rms();
    let target = db_to_gain(SOURCE_RMS_DBFS);
    if rms > 0.0 {
        w.scaled(target / rms)
    } else {
        w
    }
}

/// Raised-sine syllables separated by short pauses.
fn syllable_envelope(rng: &mut ChaCha8Rng, n: usize, sr: f64, rate: f64) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let mean_len = 0.75 / rate;
    let mut pos = (rng.gen_range(0.0..0.05) * sr) as usize;
    while pos < n {
        let len = ((mean_len * rng.gen_range(0.7..1.3)) * sr) as usize;
        let gain = rng.gen_range(0.6..1.0);
        for j in 0..len.min(n - pos) {
            let x = std::f64::consts::PI * j as f64 / len as f64;
            env[pos + j] = gain * x.sin().powf(0.6);
        }
        let gap = ((0.25 / rate) * rng.gen_range(0.4..1.6) * sr) as usize;
        pos += len + gap.max(1);
    }
    env
}
