//! Binary PGM (P5) reading and writing, maxval 255.
//!
//! The on-disk format for slices and masks. Writes are byte-deterministic:
//! the header is always `P5\n{width} {height}\n255\n` followed by the raw
//! row-major pixel bytes, so identical pixel data produces identical files.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a binary PGM (expected magic P5)")]
    BadMagic { path: String },
    #[error("{path}: malformed PGM header")]
    BadHeader { path: String },
    #[error("{path}: unsupported maxval {maxval} (only 255 is supported)")]
    UnsupportedMaxval { path: String, maxval: u32 },
    #[error("{path}: pixel payload has {got} bytes, expected {expected}")]
    BadPayload {
        path: String,
        got: usize,
        expected: usize,
    },
}

/// Reads a binary PGM file. Returns `(width, height, row-major pixels)`.
///
/// Header whitespace and `#` comments are accepted; the maxval must be 255
/// and the payload must contain exactly `width * height` bytes.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), PgmError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| PgmError::Io {
        path: display.clone(),
        source,
    })?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PgmError::BadMagic { path: display });
    }

    let mut pos = 2;
    let mut fields = [0u32; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        pos = skip_whitespace_and_comments(&bytes, pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(PgmError::BadHeader { path: display });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text.parse().map_err(|_| PgmError::BadHeader {
            path: display.clone(),
        })?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PgmError::BadHeader { path: display });
    }
    pos += 1;

    let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if maxval != 255 {
        return Err(PgmError::UnsupportedMaxval {
            path: display,
            maxval,
        });
    }
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(PgmError::BadPayload {
            path: display,
            got: payload.len(),
            expected,
        });
    }
    Ok((width, height, payload.to_vec()))
}

/// Writes a binary PGM file with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), PgmError> {
    assert_eq!(
        pixels.len(),
        width * height,
        "pixel buffer does not match dimensions"
    );
    let mut out = Vec::with_capacity(32 + pixels.len());
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|source| PgmError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let pixels: Vec<u8> = (0..12 * 5).map(|i| (i * 7 % 256) as u8).collect();
        write_pgm(&path, 12, 5, &pixels).unwrap();
        let (w, h, data) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (12, 5));
        assert_eq!(data, pixels);

        // A second write of the loaded data produces identical bytes.
        let path2 = dir.path().join("img2.pgm");
        write_pgm(&path2, w, h, &data).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n3 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        std::fs::write(&path, bytes).unwrap();
        let (w, h, data) = read_pgm(&path).unwrap();
        assert_eq!((w, h, data), (3, 2, vec![1, 2, 3, 4, 5, 6]));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nabc").unwrap();
        assert!(matches!(
            read_pgm(&path),
            Err(PgmError::BadPayload {
                expected: 16,
                got: 3,
                ..
            })
        ));
    }

    #[test]
    fn non_255_maxval_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, b"P5\n1 1\n65535\n\0\0").unwrap();
        assert!(matches!(
            read_pgm(&path),
            Err(PgmError::UnsupportedMaxval { maxval: 65535, .. })
        ));
    }
}
