//! Dataset manifests: one sample per line, tab-separated.
//!
//! Columns: image path, bbox x, y, w, h, landmark file, neutral-shape file,
//! expression-shape file, yaw degrees, subject id, fold id. Paths are stored
//! relative to the manifest location. Lines starting with `#` carry dataset
//! metadata and are ignored by the loader.

use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::Bbox;
use crate::cascade::TrainSample;
use crate::error::{Error, Result};
use crate::io::landmarks::{read_landmarks_checked, write_landmarks};
use crate::io::mesh::{read_mesh, write_mesh};
use crate::io::pgm::{read_pgm, write_pgm};
use crate::shape::{ShapePrior, ShapeState};
use crate::synth::{pose_sweep, sweep_prior, SweepConfig, SyntheticFace};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub bbox: Bbox,
    pub landmarks: PathBuf,
    /// The subject's neutral (pose-and-expression-normalized) shape.
    pub pen_shape: PathBuf,
    /// The expression shape (mean face deformed by the sample's expression).
    pub expression_shape: PathBuf,
    pub yaw_deg: f64,
    pub subject: String,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory every entry path is relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Key-value pairs from `# key = value` header lines.
    pub metadata: std::collections::BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn metadata_parsed<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.metadata.get(key).and_then(|v| v.parse().ok())
    }
}

pub fn write_manifest(
    path: impl AsRef<Path>,
    entries: &[ManifestEntry],
    metadata: &[(String, String)],
) -> Result<()> {
    let mut out = String::new();
    for (k, v) in metadata {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.image.display(),
            e.bbox.x,
            e.bbox.y,
            e.bbox.w,
            e.bbox.h,
            e.landmarks.display(),
            e.pen_shape.display(),
            e.expression_shape.display(),
            e.yaw_deg,
            e.subject,
            e.fold
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a manifest and verifies that every referenced file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    let mut metadata = std::collections::BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                metadata.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 11 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 11 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad number {:?}", fields[i]),
            })
        };
        let entry = ManifestEntry {
            image: PathBuf::from(fields[0]),
            bbox: Bbox::new(num(1)?, num(2)?, num(3)?, num(4)?)?,
            landmarks: PathBuf::from(fields[5]),
            pen_shape: PathBuf::from(fields[6]),
            expression_shape: PathBuf::from(fields[7]),
            yaw_deg: num(8)?,
            subject: fields[9].to_string(),
            fold: fields[10].parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad fold id {:?}", fields[10]),
            })?,
        };
        for p in [&entry.image, &entry.landmarks, &entry.pen_shape, &entry.expression_shape] {
            if !root.join(p).exists() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("referenced file {} does not exist", p.display()),
                });
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Corrupt {
            path: path.display().to_string(),
            msg: "manifest has no samples".into(),
        });
    }
    Ok(DatasetManifest {
        root,
        entries,
        metadata,
    })
}

/// A fully loaded sample plus its metadata.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: TrainSample,
    pub yaw_deg: f64,
    pub subject: String,
    pub fold: usize,
}

/// Loads every sample of a manifest against a prior, enforcing consistent
/// landmark and vertex counts.
pub fn load_training_samples(
    manifest: &DatasetManifest,
    prior: &ShapePrior,
) -> Result<Vec<LoadedSample>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = read_pgm(manifest.root.join(&e.image))?;
        let target_landmarks = read_landmarks_checked(manifest.root.join(&e.landmarks), prior.l())?;
        let pen = read_mesh(manifest.root.join(&e.pen_shape))?;
        let expr = read_mesh(manifest.root.join(&e.expression_shape))?;
        for (what, n) in [("neutral shape", pen.shape.n()), ("expression shape", expr.shape.n())] {
            if n != prior.n() {
                return Err(Error::CountMismatch {
                    path: format!("{} ({what})", e.pen_shape.display()),
                    expected: prior.n(),
                    found: n,
                });
            }
        }
        let expression_offset = expr.shape.flat() - prior.mean_pen_shape();
        out.push(LoadedSample {
            sample: TrainSample {
                image,
                bbox: e.bbox,
                target_landmarks,
                target_state: ShapeState::new(pen.shape.flat(), expression_offset)?,
            },
            yaw_deg: e.yaw_deg,
            subject: e.subject.clone(),
            fold: e.fold,
        });
    }
    Ok(out)
}

/// Renders a pose sweep to disk: images, landmark files, shape meshes, the
/// prior inputs (landmark indices) and the manifest itself. Returns the
/// manifest and the prior used.
pub fn write_sweep_dataset(
    dir: impl AsRef<Path>,
    subjects: &[SyntheticFace],
    landmark_indices: Vec<usize>,
    mesh_faces: Vec<[usize; 3]>,
    cfg: &SweepConfig,
) -> Result<(DatasetManifest, ShapePrior)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let prior = sweep_prior(subjects, landmark_indices.clone(), mesh_faces.clone(), cfg)?;
    let sweep = pose_sweep(subjects, &prior, &mesh_faces, cfg)?;

    // Landmark indices file, one index per line.
    let idx_text: String = landmark_indices
        .iter()
        .map(|i| format!("{i}\n"))
        .collect();
    fs::write(dir.join("landmark_indices.txt"), idx_text)?;

    let mut entries = Vec::with_capacity(sweep.len());
    let mut written_shapes: Vec<String> = Vec::new();
    for s in &sweep {
        let stem = format!("{}_e{}_y{:+04}", s.subject, s.expression, s.yaw_deg as i64);
        let image_name = format!("{stem}.pgm");
        let lm_name = format!("{stem}_landmarks.txt");
        write_pgm(&s.sample.image, dir.join(&image_name), 255, true)?;
        write_landmarks(&s.sample.target_landmarks, dir.join(&lm_name))?;

        let pen_name = format!("{}_pen.obj", s.subject);
        if !written_shapes.contains(&pen_name) {
            let pen = crate::shape::Shape3D::from_flat(&s.sample.target_state.identity)?;
            write_mesh(&pen, &mesh_faces, dir.join(&pen_name))?;
            written_shapes.push(pen_name.clone());
        }
        let expr_name = format!("{}_e{}_expr.obj", s.subject, s.expression);
        if !written_shapes.contains(&expr_name) {
            let expr = crate::shape::Shape3D::from_flat(
                &(prior.mean_pen_shape() + &s.sample.target_state.expression_offset),
            )?;
            write_mesh(&expr, &mesh_faces, dir.join(&expr_name))?;
            written_shapes.push(expr_name.clone());
        }

        entries.push(ManifestEntry {
            image: PathBuf::from(image_name),
            bbox: s.sample.bbox,
            landmarks: PathBuf::from(lm_name),
            pen_shape: PathBuf::from(pen_name),
            expression_shape: PathBuf::from(expr_name),
            yaw_deg: s.yaw_deg,
            subject: s.subject.clone(),
            fold: 0,
        });
    }
    let metadata = vec![
        ("image_size".to_string(), cfg.image_size.to_string()),
        ("fill_fraction".to_string(), cfg.fill_fraction.to_string()),
        ("landmark_noise_px".to_string(), cfg.landmark_noise_px.to_string()),
        ("shape_noise_mm".to_string(), cfg.shape_noise_mm.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ];
    write_manifest(dir.join("manifest.tsv"), &entries, &metadata)?;
    read_manifest(dir.join("manifest.tsv")).map(|m| (m, prior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{face_landmark_indices, face_mesh_topology, synth_faces, FaceGenConfig};

    #[test]
    fn sweep_dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let gen = FaceGenConfig {
            grid_cols: 13,
            grid_rows: 15,
            expressions: 1,
            ..FaceGenConfig::default()
        };
        let subjects = synth_faces(2, &gen);
        let cfg = SweepConfig {
            yaw_degrees: vec![-30.0, 0.0, 30.0],
            image_size: 64,
            seed: 9,
            ..SweepConfig::default()
        };
        let (manifest, prior) = write_sweep_dataset(
            dir.path(),
            &subjects,
            face_landmark_indices(&gen),
            face_mesh_topology(&gen),
            &cfg,
        )
        .unwrap();
        // 2 subjects x 2 expressions (neutral + 1) x 3 yaws.
        assert_eq!(manifest.entries.len(), 12);
        let loaded = load_training_samples(&manifest, &prior).unwrap();
        assert_eq!(loaded.len(), 12);
        // Shape targets survive the mesh round trip to within write precision.
        let direct = pose_sweep(&subjects, &prior, &face_mesh_topology(&gen), &cfg).unwrap();
        for (a, b) in loaded.iter().zip(direct.iter()) {
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.yaw_deg, b.yaw_deg);
            let d = (&a.sample.target_state.identity - &b.sample.target_state.identity).amax();
            assert!(d < 1e-6, "identity delta {d}");
            // Landmarks and image round trip with quantization error only.
            let lm = (a.sample.target_landmarks.flat() - b.sample.target_landmarks.flat()).amax();
            assert!(lm < 1e-9, "landmark delta {lm}");
        }
    }

    #[test]
    fn manifest_rejects_missing_files_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        std::fs::write(
            &path,
            "missing.pgm\t0\t0\t10\t10\tlm.txt\tpen.obj\texpr.obj\t0\ts0\t0\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, "too\tfew\tfields\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, "# only metadata\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Corrupt { .. })));
    }
}
