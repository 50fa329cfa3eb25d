//! On-disk spectrogram cache: a 16-byte header (magic, frame count, bin
//! count) followed by row-major single-precision values, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: &[u8; 8] = b"LNSPEC01";

/// Writes the spectrogram, narrowing values to `f32`.
pub fn write_cache<T: Real>(path: &Path, s: &Spectrogram<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(s.n_frames() as u32).to_le_bytes())?;
    w.write_all(&(s.n_bins() as u32).to_le_bytes())?;
    for &v in s.frames.iter() {
        w.write_all(&(v.to64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cached spectrogram. Frame timing is not stored in the file, so the
/// caller supplies the hop and window durations it was extracted with.
pub fn read_cache<T: Real>(path: &Path, hop_seconds: f64, window_seconds: f64) -> Result<Spectrogram<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::malformed(path.display().to_string(), "truncated header"))?;
    if &magic != MAGIC {
        return Err(Error::malformed(
            path.display().to_string(),
            format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        ));
    }
    let mut dim = [0u8; 4];
    r.read_exact(&mut dim)?;
    let n_frames = u32::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim)?;
    let n_bins = u32::from_le_bytes(dim) as usize;
    if n_frames == 0 || n_bins == 0 {
        return Err(Error::malformed(path.display().to_string(), "zero dimension"));
    }
    let mut payload = vec![0u8; n_frames * n_bins * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::malformed(path.display().to_string(), "truncated payload"))?;
    let values: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let frames = Array2::from_shape_vec((n_frames, n_bins), values)
        .expect("length checked above");
    Ok(Spectrogram { frames, hop_seconds, window_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.lnspec");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames = Array2::from_shape_fn((37, 16), |_| rng.gen_range(-20.0f32..5.0));
        let s = Spectrogram { frames, hop_seconds: 0.01, window_seconds: 0.025 };
        write_cache(&path, &s).unwrap();
        let back: Spectrogram<f32> = read_cache(&path, 0.01, 0.025).unwrap();
        assert_eq!(back.frames.shape(), s.frames.shape());
        for (a, b) in s.frames.iter().zip(back.frames.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.lnspec");
        let s = Spectrogram::<f32> {
            frames: Array2::zeros((3, 5)),
            hop_seconds: 0.01,
            window_seconds: 0.025,
        };
        write_cache(&path, &s).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * 5 * 4);
        assert_eq!(&bytes[..8], b"LNSPEC01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
    }

    #[test]
    fn bad_magic_and_truncation_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.lnspec");
        std::fs::write(&bad, b"WRONGMAG\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_cache::<f32>(&bad, 0.01, 0.025), Err(Error::Malformed { .. })));

        let cut = dir.path().join("cut.lnspec");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LNSPEC01");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 7]);
        std::fs::write(&cut, &bytes).unwrap();
        assert!(matches!(read_cache::<f32>(&cut, 0.01, 0.025), Err(Error::Malformed { .. })));
    }
}
