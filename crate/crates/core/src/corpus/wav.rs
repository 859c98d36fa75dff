//! 16-bit PCM mono WAV I/O.

use std::path::Path;

use super::waveform::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::WavFormat { path: path.to_path_buf(), reason: reason.into() }
}

pub fn load_wav(path: &Path) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| format_err(path, format!("malformed RIFF/WAVE data ({e})")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_err(path, format!("channel count is {}, expected 1 (mono)", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(format_err(path, "sample format is float, expected integer PCM"));
    }
    if spec.bits_per_sample != 16 {
        return Err(format_err(path, format!("bits per sample is {}, expected 16", spec.bits_per_sample)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, format!("truncated sample data ({e})")))?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes `w` clamped to `[-1, 1]` and quantised to 16 bits.
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * FULL_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new((0..500).map(|i| ((i as f64) * 0.05).sin() * 0.999 + if i == 7 { 1.0 } else { 0.0 }).collect(), 8000);
        save_wav(&p, &w).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.len(), w.len());
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a.clamp(-1.0, 1.0) - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let msg = load_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("channel count"), "{msg}");
    }

    #[test]
    fn truncated_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        save_wav(&p, &Waveform::new(vec![0.1; 64], 8000)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::WavFormat { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
