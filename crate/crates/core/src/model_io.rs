//! Binary model file format.
//!
//! Self-describing little-endian container:
//! header (magic, format version, K, n, l, descriptor dim, ridge scalar,
//! feature config), then the shape prior (mean shape, landmark template,
//! landmark indices, adjacency, faces), then the K stage matrix pairs as
//! row-major f64. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::cascade::{CascadeModel, LandmarkStage, ShapeStage, MODEL_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, PatchMode};
use crate::shape::ShapePrior;

const MAGIC: [u8; 8] = *b"FFITMODL";

struct Reader<R: Read> {
    inner: R,
    path: String,
}

impl<R: Read> Reader<R> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.corrupt("unexpected end of file"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupt(format!("count {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f64_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.corrupt("unexpected end of file"))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_matrix_row_major(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            write_f64(w, m[(r, c)])?;
        }
    }
    Ok(())
}

/// Writes a model to disk.
pub fn save_model(model: &CascadeModel, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, model.format_version)?;
    write_u32(&mut w, model.k() as u32)?;
    let prior = &model.prior;
    write_u64(&mut w, prior.n() as u64)?;
    write_u32(&mut w, prior.l() as u32)?;
    let fc = &model.feature_config;
    write_u32(&mut w, fc.descriptor_dim() as u32)?;
    write_f64(&mut w, model.ridge)?;
    write_u32(&mut w, fc.patch_size as u32)?;
    write_u32(&mut w, fc.cells as u32)?;
    write_u32(&mut w, fc.orientation_bins as u32)?;
    write_f64(&mut w, fc.clamp)?;
    match fc.patch_mode {
        PatchMode::Fixed => {
            write_u32(&mut w, 0)?;
            write_f64(&mut w, 0.0)?;
        }
        PatchMode::BboxFraction(d) => {
            write_u32(&mut w, 1)?;
            write_f64(&mut w, d)?;
        }
    }

    for &v in prior.mean_pen_shape().iter() {
        write_f64(&mut w, v)?;
    }
    for &v in prior.mean_landmarks_2d().iter() {
        write_f64(&mut w, v)?;
    }
    for &idx in prior.landmark_indices() {
        write_u64(&mut w, idx as u64)?;
    }
    for nbrs in prior.adjacency() {
        write_u32(&mut w, nbrs.len() as u32)?;
        for &v in nbrs {
            write_u64(&mut w, v as u64)?;
        }
    }
    write_u64(&mut w, prior.faces().len() as u64)?;
    for f in prior.faces() {
        for &v in f {
            write_u64(&mut w, v as u64)?;
        }
    }

    for (landmark, shape) in &model.stages {
        write_matrix_row_major(&mut w, &landmark.weights)?;
        write_matrix_row_major(&mut w, &shape.weights)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a model back; rejects wrong magic, foreign versions and truncated
/// or oversized payloads.
pub fn load_model(path: impl AsRef<Path>) -> Result<CascadeModel> {
    let path_str = path.as_ref().display().to_string();
    let file = File::open(path.as_ref())?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: path_str,
    };

    let magic: [u8; 8] = r.bytes()?;
    if magic != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let k = r.u32()? as usize;
    let n = r.usize64()?;
    let l = r.u32()? as usize;
    let descriptor_dim = r.u32()? as usize;
    let ridge = r.f64()?;
    let patch_size = r.u32()? as usize;
    let cells = r.u32()? as usize;
    let orientation_bins = r.u32()? as usize;
    let clamp = r.f64()?;
    let patch_mode_tag = r.u32()?;
    let patch_divisor = r.f64()?;
    let patch_mode = match patch_mode_tag {
        0 => PatchMode::Fixed,
        1 => PatchMode::BboxFraction(patch_divisor),
        other => return Err(r.corrupt(format!("unknown patch mode {other}"))),
    };
    let feature_config = FeatureConfig {
        patch_size,
        cells,
        orientation_bins,
        clamp,
        patch_mode,
    };
    if feature_config.descriptor_dim() != descriptor_dim {
        return Err(r.corrupt(format!(
            "descriptor dim {} does not match feature config ({})",
            descriptor_dim,
            feature_config.descriptor_dim()
        )));
    }
    if k == 0 || n == 0 || l == 0 {
        return Err(r.corrupt("empty model"));
    }

    let mean_pen_shape = DVector::from_vec(r.f64_vec(3 * n)?);
    let mean_landmarks_2d = DVector::from_vec(r.f64_vec(2 * l)?);
    let mut landmark_indices = Vec::with_capacity(l);
    for _ in 0..l {
        landmark_indices.push(r.usize64()?);
    }
    let mut adjacency = Vec::with_capacity(n);
    for _ in 0..n {
        let count = r.u32()? as usize;
        if count > n {
            return Err(r.corrupt("adjacency list longer than vertex count"));
        }
        let mut nbrs = Vec::with_capacity(count);
        for _ in 0..count {
            nbrs.push(r.usize64()?);
        }
        adjacency.push(nbrs);
    }
    let face_count = r.usize64()?;
    if face_count > 20 * n {
        return Err(r.corrupt("implausible face count"));
    }
    let mut faces = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        faces.push([r.usize64()?, r.usize64()?, r.usize64()?]);
    }
    let prior = ShapePrior::new(
        mean_pen_shape,
        mean_landmarks_2d,
        landmark_indices,
        adjacency,
        faces,
    )
    .map_err(|e| r.corrupt(format!("invalid prior: {e}")))?;

    let mut stages = Vec::with_capacity(k);
    for _ in 0..k {
        let lm = read_matrix_row_major(&mut r, 2 * l, descriptor_dim * l)?;
        let sh = read_matrix_row_major(&mut r, 6 * n, 2 * l)?;
        stages.push((LandmarkStage::new(lm)?, ShapeStage::new(sh)?));
    }

    // Anything left over means the file does not match its own header.
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(r.corrupt("trailing bytes after stage matrices")),
        Err(e) => return Err(Error::Io(e)),
    }

    CascadeModel::new(stages, prior, feature_config, ridge)
}

fn read_matrix_row_major<R: Read>(
    r: &mut Reader<R>,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>> {
    let data = r.f64_vec(rows * cols)?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}
