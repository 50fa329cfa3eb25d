//! WAV I/O restricted to the corpus format: mono, 16-bit PCM, 16 kHz.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// The only sample rate the toolkit accepts.
pub const SAMPLE_RATE: u32 = 16_000;

fn format_error(path: &Path, reason: String) -> Error {
    Error::malformed(path.display().to_string(), reason)
}

/// Reads a clip, mapping 16-bit samples to `[-1, 1)` via division by 32768.
pub fn read_wav<T: Real>(path: &Path) -> Result<Waveform<T>> {
    let reader = WavReader::open(path)
        .map_err(|e| format_error(path, format!("not a readable WAV file: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_error(
            path,
            format!("expected mono audio, got {} channels", spec.channels),
        ));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_error(
            path,
            format!(
                "expected 16-bit PCM, got {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format_error(
            path,
            format!("expected {SAMPLE_RATE} Hz, got {} Hz", spec.sample_rate),
        ));
    }
    let scale = T::of(1.0 / 32768.0);
    let samples: Vec<T> = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| T::of(v as f64) * scale)
                .map_err(|e| format_error(path, format!("truncated sample data: {e}")))
        })
        .collect::<Result<_>>()?;
    Waveform::new(samples, SAMPLE_RATE)
}

/// Writes samples in `[-1, 1]` as 16-bit PCM, clamping out-of-range values.
pub fn write_wav<T: Real>(path: &Path, samples: &[T]) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)
        .map_err(|e| format_error(path, format!("cannot create WAV: {e}")))?;
    for &s in samples {
        let v = (s.to64() * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| format_error(path, format!("write failed: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| format_error(path, format!("finalize failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        let samples: Vec<f64> = (0..1600).map(|n| (n as f64 / 100.0).sin() * 0.8).collect();
        write_wav(&path, &samples).unwrap();
        let back: Waveform<f64> = read_wav(&path).unwrap();
        assert_eq!(back.samples.len(), samples.len());
        assert_eq!(back.sample_rate, SAMPLE_RATE);
        // Half a quantization step plus the 32767-vs-32768 scale skew.
        for (&orig, &read) in samples.iter().zip(&back.samples) {
            assert!((orig - read).abs() < 2.0 / 32_768.0);
        }
    }

    #[test]
    fn wrong_rate_is_rejected_with_the_rate_in_the_message() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip44k.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("44100"), "{err}");
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("mono"), "{err}");
    }

    #[test]
    fn clamping_handles_overrange_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loud.wav");
        write_wav(&path, &[2.0f32, -2.0, 0.0]).unwrap();
        let back: Waveform<f32> = read_wav(&path).unwrap();
        assert!(back.samples[0] > 0.99);
        assert!(back.samples[1] <= -0.99);
        assert_eq!(back.samples[2], 0.0);
    }
}
