//! Reconstruction and alignment error metrics with pose-bucketed reporting.

use nalgebra::DVector;

use crate::camera::{procrustes_align, Bbox, LandmarkSet2D};
use crate::error::{Error, Result};
use crate::shape::Shape3D;

/// Alignment applied to the estimate before measuring 3D error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    /// Rotation and translation only; keeps errors in true millimeters.
    Rigid,
    /// Rotation, translation and uniform scale.
    Similarity,
}

/// How the per-sample shape discrepancy is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaeNorm {
    /// Mean per-vertex Euclidean distance (the convention behind reported
    /// millimeter tables).
    PerVertexMean,
    /// Euclidean norm of the full coordinate vector divided by n.
    VectorOverN,
}

/// Everything needed to score one test sample.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: String,
    pub gt_shape: Shape3D,
    pub est_shape: Shape3D,
    pub gt_landmarks: LandmarkSet2D,
    pub est_landmarks: LandmarkSet2D,
    pub bbox: Bbox,
    /// Yaw in degrees.
    pub pose_label: f64,
}

fn sample_shape_error(
    gt: &Shape3D,
    est: &Shape3D,
    align: Alignment,
    norm: MaeNorm,
) -> Result<f64> {
    if gt.n() != est.n() {
        return Err(Error::DimensionMismatch {
            context: "shape error",
            expected: gt.n(),
            actual: est.n(),
        });
    }
    let aligned = match align {
        Alignment::None => est.clone(),
        Alignment::Rigid => procrustes_align(est, gt, false)?.1,
        Alignment::Similarity => procrustes_align(est, gt, true)?.1,
    };
    let n = gt.n();
    Ok(match norm {
        MaeNorm::PerVertexMean => {
            (0..n)
                .map(|i| (aligned.vertex(i) - gt.vertex(i)).norm())
                .sum::<f64>()
                / n as f64
        }
        MaeNorm::VectorOverN => (aligned.flat() - gt.flat()).norm() / n as f64,
    })
}

/// Mean absolute 3D reconstruction error in millimeters: the average over
/// samples of the per-sample shape discrepancy after alignment.
pub fn mae(records: &[EvalRecord], align: Alignment) -> Result<f64> {
    mae_with_norm(records, align, MaeNorm::PerVertexMean)
}

pub fn mae_with_norm(records: &[EvalRecord], align: Alignment, norm: MaeNorm) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("evaluation records"));
    }
    let mut acc = 0.0;
    for r in records {
        acc += sample_shape_error(&r.gt_shape, &r.est_shape, align, norm)?;
    }
    Ok(acc / records.len() as f64)
}

/// Per-vertex depth error normalized by the ground-truth depth range.
pub fn npde_map(gt: &Shape3D, est: &Shape3D) -> Result<DVector<f64>> {
    if gt.n() != est.n() {
        return Err(Error::DimensionMismatch {
            context: "npde",
            expected: gt.n(),
            actual: est.n(),
        });
    }
    let n = gt.n();
    let mut zmin = f64::MAX;
    let mut zmax = f64::MIN;
    for i in 0..n {
        let z = gt.vertex(i)[2];
        zmin = zmin.min(z);
        zmax = zmax.max(z);
    }
    if zmax <= zmin {
        return Err(Error::DegenerateGeometry(
            "flat ground-truth depth range in npde",
        ));
    }
    let range = zmax - zmin;
    Ok(DVector::from_fn(n, |i, _| {
        (gt.vertex(i)[2] - est.vertex(i)[2]).abs() / range
    }))
}

/// Mean and sample standard deviation of an error map, in percent.
pub fn npde_summary(map: &DVector<f64>) -> (f64, f64) {
    let n = map.len();
    let mean = map.mean();
    let std = if n > 1 {
        (map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean * 100.0, std * 100.0)
}

/// Normalized mean landmark error: per sample, the mean pixel error over
/// ground-truth-visible landmarks divided by the square root of the box
/// area; averaged over samples.
pub fn nme(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("evaluation records"));
    }
    let mut acc = 0.0;
    for r in records {
        acc += sample_nme(r)?;
    }
    Ok(acc / records.len() as f64)
}

fn sample_nme(r: &EvalRecord) -> Result<f64> {
    let l = r.gt_landmarks.len();
    if r.est_landmarks.len() != l {
        return Err(Error::DimensionMismatch {
            context: "nme landmark count",
            expected: l,
            actual: r.est_landmarks.len(),
        });
    }
    let mut err = 0.0;
    let mut visible = 0usize;
    for j in 0..l {
        if !r.gt_landmarks.visible[j] {
            continue;
        }
        err += (r.est_landmarks.point(j) - r.gt_landmarks.point(j)).norm();
        visible += 1;
    }
    if visible == 0 {
        return Err(Error::InvalidInput(format!(
            "record {} has no visible ground-truth landmarks",
            r.id
        )));
    }
    Ok(err / (visible as f64 * r.bbox.side()))
}

/// Absolute-yaw bucket boundaries: [0, 30), [30, 60), [60, 90].
pub const POSE_BUCKETS: [(f64, f64); 3] = [(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)];

#[derive(Debug, Clone)]
pub struct BucketStats {
    pub label: String,
    pub count: usize,
    pub nme: Option<f64>,
    pub mae: Option<f64>,
}

/// Per-pose-bucket metric table plus across-bucket mean and sample std.
#[derive(Debug, Clone)]
pub struct PoseBucketReport {
    pub buckets: Vec<BucketStats>,
    pub nme_mean: Option<f64>,
    pub nme_std: Option<f64>,
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
}

fn mean_and_sample_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() > 1 {
        Some(
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
                .sqrt(),
        )
    } else {
        Some(0.0)
    };
    (Some(mean), std)
}

/// Buckets records by absolute yaw and aggregates NME and MAE per bucket.
/// Empty buckets stay absent rather than reporting zeros.
pub fn pose_bucket_report(records: &[EvalRecord], align: Alignment) -> Result<PoseBucketReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("evaluation records"));
    }
    let mut buckets = Vec::with_capacity(POSE_BUCKETS.len());
    let mut nme_values = Vec::new();
    let mut mae_values = Vec::new();
    for (b, &(lo, hi)) in POSE_BUCKETS.iter().enumerate() {
        let last = b + 1 == POSE_BUCKETS.len();
        let members: Vec<&EvalRecord> = records
            .iter()
            .filter(|r| {
                let a = r.pose_label.abs();
                a >= lo && (a < hi || (last && a <= hi))
            })
            .collect();
        let label = if last {
            format!("[{lo:.0},{hi:.0}]")
        } else {
            format!("[{lo:.0},{hi:.0})")
        };
        if members.is_empty() {
            buckets.push(BucketStats {
                label,
                count: 0,
                nme: None,
                mae: None,
            });
            continue;
        }
        let owned: Vec<EvalRecord> = members.iter().map(|r| (*r).clone()).collect();
        let bucket_nme = nme(&owned)?;
        let bucket_mae = mae(&owned, align)?;
        nme_values.push(bucket_nme);
        mae_values.push(bucket_mae);
        buckets.push(BucketStats {
            label,
            count: owned.len(),
            nme: Some(bucket_nme),
            mae: Some(bucket_mae),
        });
    }
    let (nme_mean, nme_std) = mean_and_sample_std(&nme_values);
    let (mae_mean, mae_std) = mean_and_sample_std(&mae_values);
    Ok(PoseBucketReport {
        buckets,
        nme_mean,
        nme_std,
        mae_mean,
        mae_std,
    })
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    match v {
        Some(x) => format!("{:.4}", x * scale),
        None => "-".to_string(),
    }
}

impl PoseBucketReport {
    /// Aligned plain-text table, one metric per row, buckets as columns plus
    /// across-bucket mean and std. NME is reported in percent.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Metric".to_string()];
        for b in &self.buckets {
            header.push(b.label.clone());
        }
        header.push("Mean".into());
        header.push("Std".into());

        let mut nme_row = vec!["NME (%)".to_string()];
        let mut mae_row = vec!["MAE (mm)".to_string()];
        let mut count_row = vec!["Samples".to_string()];
        for b in &self.buckets {
            nme_row.push(fmt_opt(b.nme, 100.0));
            mae_row.push(fmt_opt(b.mae, 1.0));
            count_row.push(b.count.to_string());
        }
        nme_row.push(fmt_opt(self.nme_mean, 100.0));
        nme_row.push(fmt_opt(self.nme_std, 100.0));
        mae_row.push(fmt_opt(self.mae_mean, 1.0));
        mae_row.push(fmt_opt(self.mae_std, 1.0));
        count_row.push("-".into());
        count_row.push("-".into());

        let rows = [header, count_row, nme_row, mae_row];
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| format!("{:>width$}", cell, width = widths[c]))
                .collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        out
    }

    /// CSV with one row per bucket, then mean and std rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,count,nme,mae\n");
        for b in &self.buckets {
            out.push_str(&format!(
                "{},{},{},{}\n",
                b.label,
                b.count,
                b.nme.map(|v| v.to_string()).unwrap_or_default(),
                b.mae.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        out.push_str(&format!(
            "mean,,{},{}\n",
            self.nme_mean.map(|v| v.to_string()).unwrap_or_default(),
            self.mae_mean.map(|v| v.to_string()).unwrap_or_default()
        ));
        out.push_str(&format!(
            "std,,{},{}\n",
            self.nme_std.map(|v| v.to_string()).unwrap_or_default(),
            self.mae_std.map(|v| v.to_string()).unwrap_or_default()
        ));
        out
    }
}
