//! Binary sequence files.
//!
//! Layout (little-endian): `FSEQ1`, `u32` T, `u32` D, `T·D` `f32` features in
//! row-major order, `PHSE1`, `T` `u8` labels.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::PhaseDatasetEntry;
use crate::error::{Result, TunesError};

pub const FEATURE_MAGIC: &[u8; 5] = b"FSEQ1";
pub const LABEL_MAGIC: &[u8; 5] = b"PHSE1";
pub const FILE_EXTENSION: &str = "fseq";

/// Serialises features and labels.
pub fn encode(entry: &PhaseDatasetEntry) -> Vec<u8> {
    let (t, d) = entry.features.dim();
    let mut out = Vec::with_capacity(5 + 8 + t * d * 4 + 5 + t);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in entry.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&entry.labels);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(TunesError::parse(
                self.pos,
                format!("truncated {what}: {} bytes missing", n - available),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 5]) -> Result<()> {
        let at = self.pos;
        let found = self.take(5, "magic")?;
        if found != magic {
            return Err(TunesError::parse(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a sequence file. Labels must lie in `1..=num_classes`.
pub fn decode(bytes: &[u8], num_classes: usize, video_id: &str) -> Result<PhaseDatasetEntry> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(FEATURE_MAGIC)?;
    let len_at = r.pos;
    let t = r.u32("length")? as usize;
    let d = r.u32("feature dimension")? as usize;
    if t == 0 {
        return Err(TunesError::parse(len_at, "sequence length must be at least 1"));
    }
    if d == 0 {
        return Err(TunesError::parse(len_at + 4, "feature dimension must be at least 1"));
    }
    let payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TunesError::parse(len_at, format!("{t}x{d} features overflow")))?;
    let data_at = r.pos;
    let raw = r.take(payload, "feature payload")?;
    let mut values = Vec::with_capacity(t * d);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(TunesError::parse(data_at + 4 * i, format!("non-finite feature {v}")));
        }
        values.push(v);
    }
    r.magic(LABEL_MAGIC)?;
    let labels_at = r.pos;
    let labels = r.take(t, "labels")?.to_vec();
    if let Some(i) = labels
        .iter()
        .position(|&l| l == 0 || usize::from(l) > num_classes)
    {
        return Err(TunesError::parse(
            labels_at + i,
            format!("label {} outside 1..={num_classes}", labels[i]),
        ));
    }
    if r.pos != bytes.len() {
        return Err(TunesError::parse(
            r.pos,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    let features = Array2::from_shape_vec((t, d), values)
        .map_err(|e| TunesError::parse(data_at, e.to_string()))?;
    PhaseDatasetEntry::new(video_id, features, labels)
}

/// Writes `entry` to `path`.
pub fn write_sequence(entry: &PhaseDatasetEntry, path: &Path) -> Result<()> {
    fs::write(path, encode(entry))?;
    Ok(())
}

/// Reads a sequence file; the video id is the file stem.
pub fn read_sequence(path: &Path, num_classes: usize) -> Result<PhaseDatasetEntry> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&bytes, num_classes, &id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(t: usize, d: usize, seed: u64) -> PhaseDatasetEntry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Array2::from_shape_simple_fn((t, d), || rng.gen_range(-3.0..3.0));
        let labels = (0..t).map(|_| rng.gen_range(1..=7)).collect();
        PhaseDatasetEntry::new("x", features, labels).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let e = sample(13, 5, 1);
        let bytes = encode(&e);
        assert_eq!(bytes.len(), 5 + 8 + 13 * 5 * 4 + 5 + 13);
        let back = decode(&bytes, 7, "x").unwrap();
        assert_eq!(back, e);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("video01.fseq");
        let e = sample(4, 3, 2);
        write_sequence(&e, &path).unwrap();
        let back = read_sequence(&path, 7).unwrap();
        assert_eq!(back.video_id, "video01");
        assert_eq!(back.features, e.features);
    }

    #[test]
    fn truncation_names_missing_bytes() {
        let bytes = encode(&sample(4, 3, 3));
        let cut = &bytes[..20];
        match decode(cut, 7, "x") {
            Err(TunesError::Parse { offset, message }) => {
                assert_eq!(offset, 13);
                assert!(message.contains(&format!("{} bytes missing", 48 - 7)), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_headers() {
        let mut bytes = encode(&sample(2, 2, 4));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, 7, "x"), Err(TunesError::Parse { offset: 0, .. })));

        let mut empty = FEATURE_MAGIC.to_vec();
        empty.extend_from_slice(&0u32.to_le_bytes());
        empty.extend_from_slice(&4u32.to_le_bytes());
        empty.extend_from_slice(LABEL_MAGIC);
        assert!(matches!(decode(&empty, 7, "x"), Err(TunesError::Parse { offset: 5, .. })));
    }

    #[test]
    fn label_errors_carry_offsets() {
        let e = sample(3, 1, 5);
        let mut bytes = encode(&e);
        let n = bytes.len();
        bytes[n - 2] = 9;
        assert!(matches!(decode(&bytes, 7, "x"), Err(TunesError::Parse { offset, .. }) if offset == n - 2));
        bytes[n - 2] = 0;
        assert!(decode(&bytes, 7, "x").is_err());
        let mut trailing = encode(&e);
        trailing.push(0);
        assert!(matches!(decode(&trailing, 7, "x"), Err(TunesError::Parse { offset, .. }) if offset == n));
    }

    #[test]
    fn huge_headers_do_not_allocate() {
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bytes, 7, "x").is_err());
    }
}
