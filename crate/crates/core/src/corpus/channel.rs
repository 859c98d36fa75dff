//! Parametric recording-channel simulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::waveform::{db_to_gain, Waveform};
use crate::error::{Error, Result};

pub const MAX_TAPS: usize = 64;

/// FIR colouring, gain, additive white noise and hard clipping.
///
/// `noise_floor_db` is relative to the RMS of the filtered, gained signal;
/// `None` disables the noise entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub channel_id: u32,
    pub name: String,
    pub fir_taps: Vec<f64>,
    pub gain_db: f64,
    pub noise_floor_db: Option<f64>,
    pub clip_threshold: f64,
    pub seed: u64,
}

impl ChannelProfile {
    pub fn identity(channel_id: u32) -> Self {
        Self {
            channel_id,
            name: "clean".into(),
            fir_taps: vec![1.0],
            gain_db: 0.0,
            noise_floor_db: None,
            clip_threshold: 1.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fir_taps.is_empty() || self.fir_taps.len() > MAX_TAPS {
            return Err(Error::Config(format!(
                "channel {}: needs 1..={MAX_TAPS} FIR taps, got {}",
                self.channel_id,
                self.fir_taps.len()
            )));
        }
        if !(self.clip_threshold > 0.0 && self.clip_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "channel {}: clip threshold {} outside (0, 1]",
                self.channel_id, self.clip_threshold
            )));
        }
        Ok(())
    }
}

/// Causal convolution truncated to the input length, then gain, noise and
/// clipping. The output always has the input's length.
pub fn apply_channel(w: &Waveform, p: &ChannelProfile) -> Waveform {
    let x = &w.samples;
    let gain = db_to_gain(p.gain_db);
    let mut y: Vec<f64> = (0..x.len())
        .map(|n| {
            let acc: f64 = p.fir_taps.iter().enumerate().take(n + 1).map(|(k, h)| h * x[n - k]).sum();
            acc * gain
        })
        .collect();
    if let Some(db) = p.noise_floor_db {
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64).sqrt();
        let sigma = rms * db_to_gain(db);
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        for v in &mut y {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    let clip = p.clip_threshold.min(1.0);
    y.iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
    Waveform::new(y, w.sample_rate)
}

/// Hamming-windowed sinc low-pass with unit DC gain.
pub fn lowpass_taps(cutoff_hz: f64, sample_rate: u32, n: usize) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate as f64;
    let m = (n - 1) as f64;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - m / 2.0;
            let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * x) };
            let win = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / m).cos();
            sinc * win
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Band-pass as the difference of two low-passes.
pub fn bandpass_taps(low_hz: f64, high_hz: f64, sample_rate: u32, n: usize) -> Vec<f64> {
    let hi = lowpass_taps(high_hz, sample_rate, n);
    let lo = lowpass_taps(low_hz, sample_rate, n);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

/// Built-in table of up to six channels: one clean, the others coloured,
/// noisy and/or clipped in different ways.
pub fn default_profiles(n_channels: usize, sample_rate: u32) -> Result<Vec<ChannelProfile>> {
    if !(1..=6).contains(&n_channels) {
        return Err(Error::Config(format!("built-in profile table has 1..=6 channels, asked for {n_channels}")));
    }
    let mut table = vec![
        ChannelProfile::identity(0),
        ChannelProfile {
            channel_id: 1,
            name: "phone-band".into(),
            fir_taps: bandpass_taps(300.0, 3400.0f64.min(0.45 * sample_rate as f64), sample_rate, 31),
            gain_db: 2.0,
            noise_floor_db: Some(-30.0),
            clip_threshold: 0.5,
            seed: 101,
        },
        ChannelProfile {
            channel_id: 2,
            name: "muffled-lavalier".into(),
            fir_taps: lowpass_taps(1200.0, sample_rate, 25),
            gain_db: -3.0,
            noise_floor_db: Some(-35.0),
            clip_threshold: 1.0,
            seed: 202,
        },
        ChannelProfile {
            channel_id: 3,
            name: "distant-tinny".into(),
            fir_taps: {
                let mut t = vec![0.0; 40];
                t[0] = 1.0;
                t[1] = -0.85;
                t[17] = 0.45;
                t[39] = -0.25;
                t
            },
            gain_db: -4.0,
            noise_floor_db: Some(-22.0),
            clip_threshold: 0.25,
            seed: 303,
        },
        ChannelProfile {
            channel_id: 4,
            name: "hot-clipping".into(),
            fir_taps: lowpass_taps(2800.0, sample_rate, 15),
            gain_db: 8.0,
            noise_floor_db: Some(-40.0),
            clip_threshold: 0.15,
            seed: 404,
        },
        ChannelProfile {
            channel_id: 5,
            name: "noisy-midrange".into(),
            fir_taps: bandpass_taps(600.0, 2400.0, sample_rate, 33),
            gain_db: 0.0,
            noise_floor_db: Some(-18.0),
            clip_threshold: 0.8,
            seed: 505,
        },
    ];
    table.truncate(n_channels);
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize, amp: f64) -> Waveform {
        Waveform::new((0..n).map(|i| amp * (i as f64 * 0.1).sin()).collect(), 8000)
    }

    #[test]
    fn identity_is_bit_exact() {
        let w = sine(300, 0.7);
        assert_eq!(apply_channel(&w, &ChannelProfile::identity(0)), w);
    }

    #[test]
    fn minus_six_db_halves_amplitude() {
        let w = sine(2000, 0.8);
        let p = ChannelProfile { gain_db: -6.0, ..ChannelProfile::identity(0) };
        let y = apply_channel(&w, &p);
        let ratio = y.peak() / w.peak();
        assert!((ratio - db_to_gain(-6.0)).abs() < 1e-12);
        // -6 dB is 0.50119, so "half" holds only to about 1.2e-3.
        assert!((ratio - 0.5).abs() < 1.5e-3);
    }

    #[test]
    fn delay_tap() {
        let w = sine(50, 0.5);
        let p = ChannelProfile { fir_taps: vec![0.0, 1.0], ..ChannelProfile::identity(0) };
        let y = apply_channel(&w, &p);
        assert_eq!(y.len(), w.len());
        assert_eq!(y.samples[0], 0.0);
        assert_eq!(&y.samples[1..], &w.samples[..49]);
    }

    #[test]
    fn noise_is_seeded_and_clip_bounds() {
        let w = sine(1000, 0.9);
        let p = default_profiles(4, 8000).unwrap()[3].clone();
        let a = apply_channel(&w, &p);
        assert_eq!(a, apply_channel(&w, &p));
        assert_ne!(a, apply_channel(&w, &p.with_seed(99)));
        assert!(a.peak() <= p.clip_threshold);
    }

    #[test]
    fn lowpass_has_unit_dc_gain() {
        let h = lowpass_taps(1000.0, 8000, 21);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for p in default_profiles(6, 8000).unwrap() {
            p.validate().unwrap();
        }
    }
}
