//! Landmark text files: one `u v visible(0|1)` line per landmark.

use std::fs;
use std::path::Path;

use nalgebra::Matrix2xX;

use crate::camera::LandmarkSet2D;
use crate::error::{Error, Result};

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet2D> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut coords = Vec::new();
    let mut visible = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 'u v visible', found {} tokens", tokens.len()),
            });
        }
        let parse_f = |t: &str| -> Result<f64> {
            t.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad number {t:?}"),
            })
        };
        coords.push(parse_f(tokens[0])?);
        coords.push(parse_f(tokens[1])?);
        visible.push(match tokens[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("visibility must be 0 or 1, found {other:?}"),
                })
            }
        });
    }
    if visible.is_empty() {
        return Err(Error::Corrupt {
            path: path.display().to_string(),
            msg: "no landmarks".into(),
        });
    }
    LandmarkSet2D::new(Matrix2xX::from_column_slice(&coords), visible)
}

/// Reads landmarks and enforces the expected count.
pub fn read_landmarks_checked(path: impl AsRef<Path>, expected_l: usize) -> Result<LandmarkSet2D> {
    let lms = read_landmarks(path.as_ref())?;
    if lms.len() != expected_l {
        return Err(Error::CountMismatch {
            path: path.as_ref().display().to_string(),
            expected: expected_l,
            found: lms.len(),
        });
    }
    Ok(lms)
}

pub fn write_landmarks(landmarks: &LandmarkSet2D, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for k in 0..landmarks.len() {
        let p = landmarks.point(k);
        out.push_str(&format!(
            "{} {} {}\n",
            p[0],
            p[1],
            if landmarks.visible[k] { 1 } else { 0 }
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
