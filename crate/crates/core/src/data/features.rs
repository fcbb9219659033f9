//! Binary feature files.
//!
//! ```text
//! "AUF1"      4-byte magic
//! l           u32 little-endian, number of segments
//! D           u32 little-endian, feature dimension
//! payload     l·D little-endian f64, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"AUF1";
const HEADER_LEN: usize = 12;

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::NonFinite {
            tensor: "feature matrix".into(),
        });
    }
    let (rows, cols) = m.shape();
    let rows = u32::try_from(rows).map_err(|_| Error::invalid("feature matrix", "too many rows"))?;
    let cols = u32::try_from(cols).map_err(|_| Error::invalid("feature matrix", "too many columns"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.data().len());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parses a feature file image; `path` only labels errors.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let overflow = || Error::DimensionOverflow {
        path: path.to_path_buf(),
        rows,
        cols,
    };
    let payload = (rows as u64)
        .checked_mul(cols as u64)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(overflow)?;
    let expected = usize::try_from(payload).map_err(|_| overflow())?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: payload,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::invalid(
            "feature file",
            format!("{}: {} trailing bytes", path.display(), bytes.len() - expected),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode_features(m)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::from_fn(7, 5, |_, _| rng.random_range(-1e3..1e3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.auf");
        write_features(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.shape(), (7, 5));
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"AUF1");
        assert_eq!(&bytes[4..12], &[7, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 7 * 5 * 8);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let p = Path::new("f.auf");
        let mut bad = encode_features(&Matrix::zeros(2, 2)).unwrap();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_features(&bad, p), Err(Error::BadMagic { .. })));

        let mut short = encode_features(&Matrix::zeros(2, 2)).unwrap();
        short[4] = 9;
        assert!(matches!(decode_features(&short, p), Err(Error::Truncated { .. })));
        assert!(matches!(decode_features(b"AUF", p), Err(Error::Truncated { .. })));

        let mut huge = Vec::from(*b"AUF1");
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_features(&huge, p), Err(Error::DimensionOverflow { .. })));
    }
}
