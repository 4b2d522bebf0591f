//! PGM image files: binary P5 and ascii P2, maxval up to 65535.
//! P5 payloads with maxval above 255 use 16-bit big-endian samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::GrayImage;

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Reads a P2 or P5 PGM file, scaling intensities into `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 2 {
        return Err(corrupt(path, "too short for a PGM header"));
    }
    let magic = &bytes[0..2];
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(corrupt(path, "unsupported magic (want P2 or P5)")),
    };

    // Header tokens: width, height, maxval. Whitespace-separated with
    // '#' comments through end of line.
    let mut pos = 2usize;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| corrupt(path, "non-ascii header"))?;
        let value: usize = tok
            .parse()
            .map_err(|_| corrupt(path, format!("bad header token {tok:?}")))?;
        tokens.push(value);
    }
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if width == 0 || height == 0 {
        return Err(corrupt(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt(path, format!("maxval {maxval} out of range")));
    }
    let count = width * height;
    let scale = maxval as f64;

    let pixels: Vec<f64> = if binary {
        // Exactly one whitespace byte separates the header from the payload.
        if pos >= bytes.len() {
            return Err(corrupt(path, "missing payload"));
        }
        pos += 1;
        let payload = &bytes[pos..];
        if maxval <= 255 {
            if payload.len() < count {
                return Err(corrupt(path, "truncated P5 payload"));
            }
            payload[..count].iter().map(|&b| b as f64 / scale).collect()
        } else {
            if payload.len() < 2 * count {
                return Err(corrupt(path, "truncated 16-bit P5 payload"));
            }
            payload[..2 * count]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[pos..])
            .map_err(|_| corrupt(path, "non-ascii P2 payload"))?;
        let values: Vec<usize> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| corrupt(path, format!("bad sample {t:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() < count {
            return Err(corrupt(path, "truncated P2 payload"));
        }
        values[..count].iter().map(|&v| v as f64 / scale).collect()
    };
    if pixels.iter().any(|&p| p > 1.0) {
        return Err(corrupt(path, "sample exceeds maxval"));
    }
    GrayImage::new(width, height, pixels)
}

/// Writes a PGM file. Binary P5 when `binary`, ascii P2 otherwise.
pub fn write_pgm(image: &GrayImage, path: impl AsRef<Path>, maxval: u16, binary: bool) -> Result<()> {
    if maxval == 0 {
        return Err(Error::InvalidInput("pgm maxval must be positive".to_string()));
    }
    let scale = maxval as f64;
    let quantized: Vec<u16> = image
        .pixels()
        .iter()
        .map(|&p| (p * scale).round().clamp(0.0, scale) as u16)
        .collect();
    let header = format!(
        "{}\n{} {}\n{}\n",
        if binary { "P5" } else { "P2" },
        image.width(),
        image.height(),
        maxval
    );
    let mut bytes = header.into_bytes();
    if binary {
        if maxval <= 255 {
            bytes.extend(quantized.iter().map(|&v| v as u8));
        } else {
            for v in &quantized {
                bytes.extend_from_slice(&v.to_be_bytes());
            }
        }
    } else {
        for (i, v) in quantized.iter().enumerate() {
            bytes.extend_from_slice(v.to_string().as_bytes());
            bytes.push(if (i + 1) % image.width() == 0 { b'\n' } else { b' ' });
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}
