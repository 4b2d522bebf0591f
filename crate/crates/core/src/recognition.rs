//! 3D shape matching, similarity conversion, score fusion and the
//! identification/verification metrics.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::camera::{procrustes_align, rigid_icp, IcpParams};
use crate::error::{Error, Result};
use crate::shape::Shape3D;

/// Probe-by-gallery score matrix with identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub probe_labels: Vec<String>,
    pub gallery_labels: Vec<String>,
    pub scores: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn new(
        probe_labels: Vec<String>,
        gallery_labels: Vec<String>,
        scores: DMatrix<f64>,
    ) -> Result<Self> {
        if scores.nrows() != probe_labels.len() || scores.ncols() != gallery_labels.len() {
            return Err(Error::DimensionMismatch {
                context: "score matrix labels",
                expected: scores.nrows() * scores.ncols(),
                actual: probe_labels.len() * gallery_labels.len(),
            });
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix"));
        }
        Ok(Self {
            probe_labels,
            gallery_labels,
            scores,
        })
    }
}

/// How two reconstructed shapes are aligned before their distance is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Index correspondence assumed; closed-form rigid alignment.
    Corresponded,
    /// No correspondence assumed; rigid iterative closest point.
    Icp,
}

/// Mean per-vertex distance in millimeters after rigid alignment.
pub fn shape_distance(probe: &Shape3D, gallery: &Shape3D, mode: MatchMode) -> Result<f64> {
    match mode {
        MatchMode::Corresponded => {
            let (_, _, dist) = procrustes_align(probe, gallery, false)?;
            Ok(dist)
        }
        MatchMode::Icp => Ok(rigid_icp(probe, gallery, &IcpParams::default())?.mean_distance),
    }
}

/// Scope of the min-max normalization when converting distances to
/// similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationScope {
    /// One min-max over the whole matrix; preserves cross-probe comparability.
    Global,
    /// Min-max per probe row.
    PerRow,
}

/// Converts a distance matrix to similarity scores in `[0, 1]`: subtract
/// every distance from the maximum, then min-max normalize. A constant
/// matrix maps to all zeros.
pub fn distances_to_similarity(distances: &ScoreMatrix, scope: NormalizationScope) -> ScoreMatrix {
    let mut out = distances.clone();
    match scope {
        NormalizationScope::Global => {
            normalize_slice(out.scores.as_mut_slice());
        }
        NormalizationScope::PerRow => {
            let (rows, cols) = (out.scores.nrows(), out.scores.ncols());
            for r in 0..rows {
                let mut row: Vec<f64> = (0..cols).map(|c| out.scores[(r, c)]).collect();
                normalize_slice(&mut row);
                for (c, v) in row.into_iter().enumerate() {
                    out.scores[(r, c)] = v;
                }
            }
        }
    }
    out
}

fn normalize_slice(values: &mut [f64]) {
    let max_d = values.iter().cloned().fold(f64::MIN, f64::max);
    for v in values.iter_mut() {
        *v = max_d - *v;
    }
    let max_s = values.iter().cloned().fold(f64::MIN, f64::max);
    let min_s = values.iter().cloned().fold(f64::MAX, f64::min);
    let range = max_s - min_s;
    if range <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = (*v - min_s) / range;
    }
}

/// Weighted sum-rule fusion: `w * s2d + (1 - w) * s3d`. Labels must match
/// in order.
pub fn fuse_scores(s2d: &ScoreMatrix, s3d: &ScoreMatrix, w: f64) -> Result<ScoreMatrix> {
    if s2d.probe_labels != s3d.probe_labels || s2d.gallery_labels != s3d.gallery_labels {
        return Err(Error::LabelMismatch(
            "fusion inputs disagree on probe or gallery labels".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidInput(format!("fusion weight {w} outside [0, 1]")));
    }
    let scores = &s2d.scores * w + &s3d.scores * (1.0 - w);
    ScoreMatrix::new(s2d.probe_labels.clone(), s2d.gallery_labels.clone(), scores)
}

/// Identification outcome.
#[derive(Debug, Clone)]
pub struct IdentificationResult {
    /// Predicted gallery label per probe.
    pub predictions: Vec<String>,
    /// Fraction of probes whose prediction matches their own label, percent.
    pub rank1_accuracy_pct: f64,
}

/// Picks the highest-scoring gallery entry per probe; ties resolve to the
/// lowest gallery index. Accuracy compares predicted labels to probe labels.
pub fn rank1_identify(scores: &ScoreMatrix) -> Result<IdentificationResult> {
    if scores.gallery_labels.is_empty() {
        return Err(Error::EmptyInput("gallery"));
    }
    let mut predictions = Vec::with_capacity(scores.probe_labels.len());
    let mut hits = 0usize;
    for (r, probe) in scores.probe_labels.iter().enumerate() {
        let mut best = 0usize;
        for c in 1..scores.gallery_labels.len() {
            if scores.scores[(r, c)] > scores.scores[(r, best)] {
                best = c;
            }
        }
        let label = scores.gallery_labels[best].clone();
        if &label == probe {
            hits += 1;
        }
        predictions.push(label);
    }
    Ok(IdentificationResult {
        predictions,
        rank1_accuracy_pct: 100.0 * hits as f64 / scores.probe_labels.len().max(1) as f64,
    })
}

/// Verification quality at a glance; all values in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub accuracy_pct: f64,
    pub eer_pct: f64,
    pub auc_pct: f64,
    /// Threshold that maximizes accuracy.
    pub threshold: f64,
    /// Threshold where false accepts balance false rejects.
    pub eer_threshold: f64,
}

/// ROC-based verification metrics over genuine and imposter score lists
/// (higher score = more similar).
///
/// The ROC is swept over all distinct scores; the equal error rate is
/// linearly interpolated between the bracketing thresholds; AUC uses the
/// trapezoid rule; accuracy is taken at the threshold maximizing correct
/// decisions.
pub fn verify_metrics(genuine: &[f64], imposter: &[f64]) -> Result<VerificationReport> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(Error::EmptyInput("verification scores"));
    }
    if genuine.iter().chain(imposter.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("verification scores"));
    }
    let mut thresholds: Vec<f64> = genuine.iter().chain(imposter.iter()).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    // Accept when score >= threshold. far = accepted imposters,
    // frr = rejected genuines.
    let rates = |t: f64| -> (f64, f64) {
        let far = imposter.iter().filter(|&&s| s >= t).count() as f64 / imposter.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
        (far, frr)
    };

    // Accuracy sweep includes a threshold above every score (reject all).
    let mut best_acc = 0.0;
    let mut best_threshold = thresholds[0];
    let mut candidates = thresholds.clone();
    candidates.push(thresholds.last().unwrap() + 1.0);
    for &t in &candidates {
        let tp = genuine.iter().filter(|&&s| s >= t).count();
        let tn = imposter.iter().filter(|&&s| s < t).count();
        let acc = (tp + tn) as f64 / (genuine.len() + imposter.len()) as f64;
        if acc > best_acc {
            best_acc = acc;
            best_threshold = t;
        }
    }

    // EER: far - frr changes sign along increasing thresholds.
    let mut eer = f64::NAN;
    let mut eer_threshold = f64::NAN;
    let mut prev: Option<(f64, f64, f64)> = None; // (t, far, frr)
    for &t in &candidates {
        let (far, frr) = rates(t);
        if (far - frr).abs() < 1e-15 {
            eer = far;
            eer_threshold = t;
            break;
        }
        if let Some((pt, pfar, pfrr)) = prev {
            let prev_diff = pfar - pfrr;
            let diff = far - frr;
            if prev_diff > 0.0 && diff < 0.0 {
                // Linear interpolation between the bracketing thresholds.
                let alpha = prev_diff / (prev_diff - diff);
                eer = pfar + alpha * (far - pfar);
                let frr_at = pfrr + alpha * (frr - pfrr);
                eer = (eer + frr_at) / 2.0;
                eer_threshold = pt + alpha * (t - pt);
                break;
            }
        }
        prev = Some((t, far, frr));
    }
    if eer.is_nan() {
        // Monotone without a crossing: take the point of smallest gap.
        let (t, far, frr) = candidates
            .iter()
            .map(|&t| {
                let (far, frr) = rates(t);
                (t, far, frr)
            })
            .min_by(|a, b| {
                ((a.1 - a.2).abs())
                    .partial_cmp(&(b.1 - b.2).abs())
                    .unwrap()
            })
            .unwrap();
        eer = (far + frr) / 2.0;
        eer_threshold = t;
    }

    // ROC: FPR/TPR pairs from high to low thresholds; trapezoid AUC.
    let mut points: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &t in thresholds.iter().rev() {
        let tpr = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
        let fpr = imposter.iter().filter(|&&s| s >= t).count() as f64 / imposter.len() as f64;
        points.push((fpr, tpr));
    }
    points.push((1.0, 1.0));
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
    }

    Ok(VerificationReport {
        accuracy_pct: best_acc * 100.0,
        eer_pct: eer * 100.0,
        auc_pct: auc * 100.0,
        threshold: best_threshold,
        eer_threshold,
    })
}

/* ---------------------------------------------------------------- */
/* Score matrix CSV: header row of gallery labels, first column the  */
/* probe labels.                                                     */

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains(',') || label.contains('\n') {
        return Err(Error::InvalidInput(format!(
            "label {label:?} must be nonempty and free of commas and newlines"
        )));
    }
    Ok(())
}

pub fn write_scores_csv(matrix: &ScoreMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for l in matrix
        .probe_labels
        .iter()
        .chain(matrix.gallery_labels.iter())
    {
        check_label(l)?;
    }
    out.push_str("probe");
    for g in &matrix.gallery_labels {
        out.push(',');
        out.push_str(g);
    }
    out.push('\n');
    for (r, p) in matrix.probe_labels.iter().enumerate() {
        out.push_str(p);
        for c in 0..matrix.gallery_labels.len() {
            out.push(',');
            out.push_str(&format!("{}", matrix.scores[(r, c)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<ScoreMatrix> {
    let path_str = path.as_ref().display().to_string();
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Corrupt {
        path: path_str.clone(),
        msg: "empty score file".into(),
    })?;
    let gallery_labels: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
    if gallery_labels.is_empty() {
        return Err(Error::Corrupt {
            path: path_str,
            msg: "header has no gallery labels".into(),
        });
    }
    let mut probe_labels = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let probe = fields.next().unwrap_or_default().to_string();
        let values: Vec<&str> = fields.collect();
        if values.len() != gallery_labels.len() {
            return Err(Error::Parse {
                path: path_str,
                line: lineno + 1,
                msg: format!(
                    "expected {} scores, found {}",
                    gallery_labels.len(),
                    values.len()
                ),
            });
        }
        for v in &values {
            let parsed: f64 = v.trim().parse().map_err(|_| Error::Parse {
                path: path_str.clone(),
                line: lineno + 1,
                msg: format!("bad score {v:?}"),
            })?;
            rows.push(parsed);
        }
        probe_labels.push(probe);
    }
    if probe_labels.is_empty() {
        return Err(Error::Corrupt {
            path: path_str,
            msg: "no probe rows".into(),
        });
    }
    let scores = DMatrix::from_row_slice(probe_labels.len(), gallery_labels.len(), &rows);
    ScoreMatrix::new(probe_labels, gallery_labels, scores)
}

/// One verification pair: two sample paths and the same-person flag.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationPair {
    pub path_a: String,
    pub path_b: String,
    pub same: bool,
}

/// Pairs CSV: `path_a,path_b,same(0|1)` per line, optional header.
pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<VerificationPair>> {
    let path_str = path.as_ref().display().to_string();
    let text = fs::read_to_string(path.as_ref())?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with("path_a")) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path_str,
                line: lineno + 1,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let same = match fields[2].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    path: path_str,
                    line: lineno + 1,
                    msg: format!("same flag must be 0 or 1, found {other:?}"),
                })
            }
        };
        out.push(VerificationPair {
            path_a: fields[0].trim().to_string(),
            path_b: fields[1].trim().to_string(),
            same,
        });
    }
    if out.is_empty() {
        return Err(Error::Corrupt {
            path: path_str,
            msg: "no pairs".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3xX;
    use proptest::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_shape(rng: &mut impl Rng, n: usize) -> Shape3D {
        Shape3D::new(Matrix3xX::from_fn(n, |_, _| rng.gen_range(-50.0..50.0))).unwrap()
    }

    #[test]
    fn identical_shapes_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let s = random_shape(&mut rng, 30);
        assert!(shape_distance(&s, &s, MatchMode::Corresponded).unwrap() < 1e-12);
        assert!(shape_distance(&s, &s, MatchMode::Icp).unwrap() < 1e-12);
    }

    #[test]
    fn rigid_copies_match_and_distinct_identities_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let a = random_shape(&mut rng, 40);
        let rot = nalgebra::Rotation3::from_euler_angles(0.2, 0.4, -0.3);
        let t = crate::camera::RigidTransform {
            rotation: *rot.matrix(),
            translation: nalgebra::Vector3::new(5.0, -3.0, 8.0),
            scale: 1.0,
        };
        let moved = t.apply(&a);
        assert!(shape_distance(&a, &moved, MatchMode::Corresponded).unwrap() < 1e-6);

        let b = random_shape(&mut rng, 40);
        let dab = shape_distance(&a, &b, MatchMode::Corresponded).unwrap();
        let dba = shape_distance(&b, &a, MatchMode::Corresponded).unwrap();
        assert!(dab > 0.0);
        assert_relative_eq!(dab, dba, epsilon = 1e-9);
    }

    fn matrix_of(rows: usize, cols: usize, values: &[f64]) -> ScoreMatrix {
        ScoreMatrix::new(
            (0..rows).map(|i| format!("p{i}")).collect(),
            (0..cols).map(|i| format!("p{i}")).collect(),
            DMatrix::from_row_slice(rows, cols, values),
        )
        .unwrap()
    }

    #[test]
    fn similarity_conversion_hand_case() {
        let d = matrix_of(1, 3, &[2.0, 5.0, 10.0]);
        let s = distances_to_similarity(&d, NormalizationScope::Global);
        assert_relative_eq!(s.scores[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.scores[(0, 1)], 0.625, epsilon = 1e-12);
        assert_relative_eq!(s.scores[(0, 2)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_distances_map_to_zero() {
        let d = matrix_of(2, 2, &[3.0, 3.0, 3.0, 3.0]);
        let s = distances_to_similarity(&d, NormalizationScope::Global);
        assert!(s.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_reverses_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..50 {
            let values: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..100.0)).collect();
            let d = matrix_of(3, 4, &values);
            let s = distances_to_similarity(&d, NormalizationScope::Global);
            for r in 0..3 {
                for c1 in 0..4 {
                    for c2 in 0..4 {
                        if d.scores[(r, c1)] < d.scores[(r, c2)] {
                            assert!(s.scores[(r, c1)] >= s.scores[(r, c2)]);
                        }
                    }
                }
            }
            // Global argmin distance is the global argmax similarity.
            let (mut amin, mut amax) = ((0, 0), (0, 0));
            for r in 0..3 {
                for c in 0..4 {
                    if d.scores[(r, c)] < d.scores[amin] {
                        amin = (r, c);
                    }
                    if s.scores[(r, c)] > s.scores[amax] {
                        amax = (r, c);
                    }
                }
            }
            assert_eq!(d.scores[amin], d.scores[(amax.0, amax.1)]);
        }
    }

    #[test]
    fn per_row_scope_normalizes_each_row() {
        let d = matrix_of(2, 2, &[0.0, 10.0, 100.0, 200.0]);
        let s = distances_to_similarity(&d, NormalizationScope::PerRow);
        assert_eq!(s.scores[(0, 0)], 1.0);
        assert_eq!(s.scores[(0, 1)], 0.0);
        assert_eq!(s.scores[(1, 0)], 1.0);
        assert_eq!(s.scores[(1, 1)], 0.0);
    }

    #[test]
    fn fusion_cases() {
        let a = matrix_of(2, 2, &[1.0, 0.0, 0.2, 0.8]);
        let b = matrix_of(2, 2, &[0.0, 1.0, 0.6, 0.4]);
        let half = fuse_scores(&a, &b, 0.5).unwrap();
        assert_relative_eq!(half.scores[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(half.scores[(1, 0)], 0.4, epsilon = 1e-12);

        let full = fuse_scores(&a, &b, 1.0).unwrap();
        assert_eq!(full.scores, a.scores);

        let w = fuse_scores(&a, &b, 0.7).unwrap();
        assert_relative_eq!(w.scores[(0, 1)], 0.3, epsilon = 1e-12);
        assert_relative_eq!(w.scores[(1, 1)], 0.7 * 0.8 + 0.3 * 0.4, epsilon = 1e-12);

        let mut c = b.clone();
        c.gallery_labels[0] = "other".into();
        assert!(matches!(
            fuse_scores(&a, &c, 0.5),
            Err(Error::LabelMismatch(_))
        ));
    }

    #[test]
    fn fusion_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        for _ in 0..20 {
            let av: Vec<f64> = (0..9).map(|_| rng.gen()).collect();
            let bv: Vec<f64> = (0..9).map(|_| rng.gen()).collect();
            let f = fuse_scores(&matrix_of(3, 3, &av), &matrix_of(3, 3, &bv), rng.gen()).unwrap();
            assert!(f.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rank1_cases() {
        let eye = matrix_of(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let r = rank1_identify(&eye).unwrap();
        assert_eq!(r.rank1_accuracy_pct, 100.0);

        // True column always second best.
        let wrong = matrix_of(2, 2, &[0.4, 0.9, 0.9, 0.4]);
        let r = rank1_identify(&wrong).unwrap();
        assert_eq!(r.rank1_accuracy_pct, 0.0);

        // Ties resolve to the lowest gallery index.
        let tie = matrix_of(1, 3, &[0.5, 0.5, 0.5]);
        let r = rank1_identify(&tie).unwrap();
        assert_eq!(r.predictions[0], "p0");
    }

    #[test]
    fn rank1_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        for _ in 0..20 {
            let values: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
            let m = matrix_of(5, 6, &values);
            let got = rank1_identify(&m).unwrap();
            for r in 0..5 {
                let best = (0..6)
                    .max_by(|&a, &b| {
                        m.scores[(r, a)]
                            .partial_cmp(&m.scores[(r, b)])
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                assert_eq!(got.predictions[r], m.gallery_labels[best]);
            }
        }
    }

    #[test]
    fn rank1_of_endpoint_fusion_survives_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let tf = |v: f64| (v * 2.0).tanh() * 0.5 + 0.25;
        for _ in 0..20 {
            let av: Vec<f64> = (0..12).map(|_| rng.gen()).collect();
            let bv: Vec<f64> = (0..12).map(|_| rng.gen()).collect();
            let a = matrix_of(3, 4, &av);
            let b = matrix_of(3, 4, &bv);
            let ta = matrix_of(3, 4, &av.iter().map(|&v| tf(v)).collect::<Vec<_>>());
            let tb = matrix_of(3, 4, &bv.iter().map(|&v| tf(v)).collect::<Vec<_>>());
            for w in [0.0, 1.0] {
                let plain = rank1_identify(&fuse_scores(&a, &b, w).unwrap()).unwrap();
                let moved = rank1_identify(&fuse_scores(&ta, &tb, w).unwrap()).unwrap();
                assert_eq!(plain.predictions, moved.predictions, "w = {w}");
            }
        }
    }

    #[test]
    fn verification_separated_and_overlapping() {
        let genuine = vec![0.9, 0.8, 0.95, 0.85];
        let imposter = vec![0.1, 0.2, 0.15, 0.05];
        let rep = verify_metrics(&genuine, &imposter).unwrap();
        assert_eq!(rep.eer_pct, 0.0);
        assert_relative_eq!(rep.auc_pct, 100.0, epsilon = 1e-9);
        assert_eq!(rep.accuracy_pct, 100.0);
        assert!(rep.threshold > 0.2 && rep.threshold <= 0.8);

        // Identical distributions hover at chance level.
        let same: Vec<f64> = (0..200).map(|i| (i % 10) as f64 / 10.0).collect();
        let rep = verify_metrics(&same, &same).unwrap();
        assert!((rep.auc_pct - 50.0).abs() < 6.0, "auc {}", rep.auc_pct);
    }

    #[test]
    fn verification_two_by_two_hand_case() {
        let rep = verify_metrics(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(rep.accuracy_pct, 100.0);
        assert!(rep.threshold > 0.2 && rep.threshold <= 0.8);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let m = matrix_of(2, 3, &[0.25, 0.5, 0.125, 1.0, 0.0, 0.75]);
        write_scores_csv(&m, &path).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(m, back);

        std::fs::write(&path, "probe,g0\np0,notanumber\n").unwrap();
        assert!(matches!(read_scores_csv(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, "probe,g0,g1\np0,0.5\n").unwrap();
        assert!(matches!(read_scores_csv(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn pairs_csv_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        std::fs::write(&path, "path_a,path_b,same\na.obj,b.obj,1\na.obj,c.obj,0\n").unwrap();
        let pairs = read_pairs_csv(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs[0].same);
        assert!(!pairs[1].same);
        std::fs::write(&path, "a.obj,b.obj,2\n").unwrap();
        assert!(read_pairs_csv(&path).is_err());
    }

    proptest! {
        #[test]
        fn eer_and_auc_invariant_to_monotone_transforms(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let genuine: Vec<f64> = (0..30).map(|_| rng.gen_range(0.3..1.0)).collect();
            let imposter: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..0.7)).collect();
            let base = verify_metrics(&genuine, &imposter).unwrap();
            // Strictly increasing transform.
            let tf = |v: f64| (3.0 * v).exp() / 25.0 + 0.5 * v;
            let g2: Vec<f64> = genuine.iter().map(|&v| tf(v)).collect();
            let i2: Vec<f64> = imposter.iter().map(|&v| tf(v)).collect();
            let moved = verify_metrics(&g2, &i2).unwrap();
            prop_assert!((base.auc_pct - moved.auc_pct).abs() < 1e-9);
            prop_assert!((base.eer_pct - moved.eer_pct).abs() < 1e-9);
        }
    }
}
