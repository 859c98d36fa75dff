use super::waveform::{db_to_gain, Waveform};
use crate::error::{Error, Result};

pub const MIX_PEAK: f64 = 0.9;

/// A two-speaker mixture and the scaled targets that sum to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub mixture: Waveform,
    pub targets: [Waveform; 2],
    /// Gains applied to `s1` and `s2`, in dB, including the joint
    /// normalisation.
    pub gains_db: [f64; 2],
}

/// Sets `s2` to `rel_level_db` relative to `s1` (by energy), sums, and
/// rescales everything jointly so the mixture peak stays at or below
/// [`MIX_PEAK`].
pub fn mix_pair(s1: &Waveform, s2: &Waveform, rel_level_db: f64) -> Result<Mixed> {
    if s1.len() != s2.len() || s1.sample_rate != s2.sample_rate {
        return Err(Error::invalid(format!(
            "mix_pair needs equal length and rate, got {}@{} and {}@{}",
            s1.len(),
            s1.sample_rate,
            s2.len(),
            s2.sample_rate
        )));
    }
    let (e1, e2) = (s1.energy(), s2.energy());
    if e1 <= 0.0 || e2 <= 0.0 {
        return Err(Error::invalid("mix_pair: zero-energy source"));
    }
    let g2 = (e1 / e2).sqrt() * db_to_gain(rel_level_db);
    let raw: Vec<f64> = s1.samples.iter().zip(&s2.samples).map(|(a, b)| a + g2 * b).collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if peak > MIX_PEAK { MIX_PEAK / peak } else { 1.0 };
    let sr = s1.sample_rate;
    Ok(Mixed {
        mixture: Waveform::new(raw.iter().map(|v| v * norm).collect(), sr),
        targets: [s1.scaled(norm), s2.scaled(g2 * norm)],
        gains_db: [20.0 * norm.log10(), 20.0 * (g2 * norm).log10()],
    })
}
