//! Camera geometry: weak-perspective projection, mapping estimation, landmark
//! visibility, landmark initialization and rigid registration.
//!
//! The camera model is a single `2 x 4` matrix `M` applied to homogeneous 3D
//! points. It absorbs rotation, uniform scale and image translation, so pose
//! never appears explicitly anywhere in the pipeline; every pose-dependent
//! quantity (landmark positions, visibility) is derived from `M`.

use nalgebra::{DMatrix, DVector, Matrix2x4, Matrix3, Matrix3xX, Matrix2xX, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::shape::{landmark_normals, Shape3D, ShapePrior};
use crate::spatial::KdTree;

/// Weak-perspective 3D-to-2D map. Units: pixels per millimeter in the left
/// `2 x 3` block, pixels in the translation column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingMatrix {
    entries: Matrix2x4<f64>,
}

impl MappingMatrix {
    pub fn new(entries: Matrix2x4<f64>) -> Result<Self> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mapping matrix"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Matrix2x4<f64> {
        &self.entries
    }

    /// First three elements of row 1.
    pub fn row1(&self) -> Vector3<f64> {
        Vector3::new(self.entries[(0, 0)], self.entries[(0, 1)], self.entries[(0, 2)])
    }

    /// First three elements of row 2.
    pub fn row2(&self) -> Vector3<f64> {
        Vector3::new(self.entries[(1, 0)], self.entries[(1, 1)], self.entries[(1, 2)])
    }

    /// Unit direction the camera looks along, i.e. the normalized cross
    /// product of the normalized rows. Errors if either row is zero.
    pub fn view_direction(&self) -> Result<Vector3<f64>> {
        let r1 = self.row1();
        let r2 = self.row2();
        if r1.norm() <= f64::MIN_POSITIVE || r2.norm() <= f64::MIN_POSITIVE {
            return Err(Error::InvalidMapping("zero row in the 2x3 block"));
        }
        Ok(r1.normalize().cross(&r2.normalize()))
    }
}

/// 2D landmark set with per-landmark visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet2D {
    pub points: Matrix2xX<f64>,
    pub visible: Vec<bool>,
}

impl LandmarkSet2D {
    pub fn new(points: Matrix2xX<f64>, visible: Vec<bool>) -> Result<Self> {
        if points.ncols() != visible.len() {
            return Err(Error::DimensionMismatch {
                context: "landmark visibility flags",
                expected: points.ncols(),
                actual: visible.len(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark coordinates"));
        }
        Ok(Self { points, visible })
    }

    pub fn all_visible(points: Matrix2xX<f64>) -> Result<Self> {
        let l = points.ncols();
        Self::new(points, vec![true; l])
    }

    pub fn from_flat(flat: &DVector<f64>, visible: Vec<bool>) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::DimensionMismatch {
                context: "flat landmark vector",
                expected: flat.len() + 1,
                actual: flat.len(),
            });
        }
        Self::new(Matrix2xX::from_column_slice(flat.as_slice()), visible)
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn point(&self, i: usize) -> Vector2<f64> {
        self.points.column(i).into()
    }

    /// Interleaved `(u1, v1, u2, v2, ...)` vector.
    pub fn flat(&self) -> DVector<f64> {
        DVector::from_column_slice(self.points.as_slice())
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }
}

/// Similarity transform `x -> scale * R * x + t` with `det(R) = +1`.
/// `scale` is fixed at 1 in rigid mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }

    pub fn apply(&self, shape: &Shape3D) -> Shape3D {
        let mut out = shape.vertices().clone();
        for mut col in out.column_iter_mut() {
            let p = self.scale * self.rotation * Vector3::new(col[0], col[1], col[2]) + self.translation;
            col.copy_from(&p);
        }
        Shape3D::new(out).expect("finite transform of finite shape")
    }
}

/// Axis-aligned face box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !(x.is_finite() && y.is_finite()) {
            return Err(Error::DegenerateBbox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Square root of the area, the landmark-error normalizer.
    pub fn side(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Tight box around a set of 2D points.
    pub fn around_points(points: &Matrix2xX<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::EmptyInput("points"));
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for c in points.column_iter() {
            x0 = x0.min(c[0]);
            y0 = y0.min(c[1]);
            x1 = x1.max(c[0]);
            y1 = y1.max(c[1]);
        }
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Projects `3 x l` points through `M` (homogeneous coordinate appended).
pub fn project(mapping: &MappingMatrix, points3d: &Matrix3xX<f64>) -> Matrix2xX<f64> {
    let m = mapping.entries();
    let mut out = Matrix2xX::zeros(points3d.ncols());
    for (k, p) in points3d.column_iter().enumerate() {
        let u = m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)];
        let v = m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)];
        out[(0, k)] = u;
        out[(1, k)] = v;
    }
    out
}

/// Least-squares fit of the `2 x 4` mapping from 2D landmarks and their 3D
/// points.
///
/// Solved through an SVD of the homogeneous design matrix rather than normal
/// equations. Errors when the augmented 3D points do not span rank 4.
pub fn fit_mapping(landmarks: &Matrix2xX<f64>, points3d: &Matrix3xX<f64>) -> Result<MappingMatrix> {
    let l = points3d.ncols();
    if landmarks.ncols() != l {
        return Err(Error::DimensionMismatch {
            context: "fit_mapping",
            expected: l,
            actual: landmarks.ncols(),
        });
    }
    if l < 4 {
        return Err(Error::SingularMappingFit { rank: l.min(3) });
    }
    if landmarks.iter().chain(points3d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit_mapping input"));
    }
    // Design matrix: one row [x y z 1] per landmark.
    let mut design = DMatrix::zeros(l, 4);
    let mut rhs = DMatrix::zeros(l, 2);
    for k in 0..l {
        design[(k, 0)] = points3d[(0, k)];
        design[(k, 1)] = points3d[(1, k)];
        design[(k, 2)] = points3d[(2, k)];
        design[(k, 3)] = 1.0;
        rhs[(k, 0)] = landmarks[(0, k)];
        rhs[(k, 1)] = landmarks[(1, k)];
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-10 && s > 0.0)
        .count();
    if rank < 4 {
        return Err(Error::SingularMappingFit { rank });
    }
    let sol = svd
        .solve(&rhs, smax * 1e-12)
        .map_err(|_| Error::SingularMappingFit { rank })?;
    let mut m = Matrix2x4::zeros();
    for c in 0..4 {
        m[(0, c)] = sol[(c, 0)];
        m[(1, c)] = sol[(c, 1)];
    }
    MappingMatrix::new(m)
}

/// Visibility of a landmark whose averaged surface normal is `normal`:
/// `1/2 (1 + sgn(n . (M1/|M1| x M2/|M2|)))`, yielding 1 (facing the camera),
/// 0 (facing away) or 0.5 (grazing).
pub fn landmark_visibility(mapping: &MappingMatrix, normal: &Vector3<f64>) -> Result<f64> {
    if (normal.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "landmark_visibility needs a unit normal, got norm {}",
            normal.norm()
        )));
    }
    let view = mapping.view_direction()?;
    let dot = normal.dot(&view);
    let sgn = if dot > 0.0 {
        1.0
    } else if dot < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(0.5 * (1.0 + sgn))
}

/// Per-landmark boolean visibility of a shape under a mapping. A landmark is
/// visible iff its visibility value exceeds 0.5, so grazing landmarks count
/// as invisible.
pub fn visibility_mask(
    mapping: &MappingMatrix,
    shape: &Shape3D,
    prior: &ShapePrior,
) -> Result<Vec<bool>> {
    let view = mapping.view_direction()?;
    let normals = landmark_normals(shape, prior)?;
    Ok(normals
        .column_iter()
        .map(|n| Vector3::from(n).dot(&view) > 0.0)
        .collect())
}

/// Places the frontal landmark template into a detector box: uniform scale by
/// the square root of the area ratio, translation aligning box centers, no
/// rotation. Every landmark starts visible.
pub fn init_landmarks(prior: &ShapePrior, bbox: &Bbox) -> Result<LandmarkSet2D> {
    let template = Matrix2xX::from_column_slice(prior.mean_landmarks_2d().as_slice());
    let tbox = Bbox::around_points(&template).map_err(|_| {
        Error::InvalidPrior("landmark template has no spatial extent".to_string())
    })?;
    let scale = (bbox.area() / tbox.area()).sqrt();
    let tc = tbox.center();
    let bc = bbox.center();
    let mut points = Matrix2xX::zeros(template.ncols());
    for (k, p) in template.column_iter().enumerate() {
        let q = (Vector2::from(p) - tc) * scale + bc;
        points.set_column(k, &q);
    }
    LandmarkSet2D::all_visible(points)
}

/// Closed-form similarity/rigid alignment of corresponded point sets,
/// minimizing `sum ||s R a_i + t - b_i||^2`.
pub fn procrustes_align(
    a: &Shape3D,
    b: &Shape3D,
    with_scale: bool,
) -> Result<(RigidTransform, Shape3D, f64)> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch {
            context: "procrustes_align",
            expected: a.n(),
            actual: b.n(),
        });
    }
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = (0..a.n())
        .map(|i| (a.vertex(i), b.vertex(i)))
        .collect();
    let transform = fit_similarity(&pairs, with_scale)?;
    let aligned = transform.apply(a);
    let mean_dist = mean_vertex_distance(&aligned, b);
    Ok((transform, aligned, mean_dist))
}

/// Mean per-vertex Euclidean distance between corresponded shapes.
pub fn mean_vertex_distance(a: &Shape3D, b: &Shape3D) -> f64 {
    let n = a.n();
    (0..n)
        .map(|i| (a.vertex(i) - b.vertex(i)).norm())
        .sum::<f64>()
        / n as f64
}

/// Kabsch/Umeyama fit over explicit point pairs `(source, target)`.
fn fit_similarity(pairs: &[(Vector3<f64>, Vector3<f64>)], with_scale: bool) -> Result<RigidTransform> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(
            "similarity fit needs at least 3 point pairs",
        ));
    }
    let inv = 1.0 / n as f64;
    let ca: Vector3<f64> = pairs.iter().map(|(a, _)| a).sum::<Vector3<f64>>() * inv;
    let cb: Vector3<f64> = pairs.iter().map(|(_, b)| b).sum::<Vector3<f64>>() * inv;
    let mut cov = Matrix3::zeros();
    let mut var_a = 0.0;
    for (a, b) in pairs {
        let da = a - ca;
        let db = b - cb;
        cov += da * db.transpose();
        var_a += da.norm_squared();
    }
    if var_a <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateGeometry(
            "similarity fit source points are coincident",
        ));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(Error::DegenerateGeometry("svd failed"))?;
    let vt = svd.v_t.ok_or(Error::DegenerateGeometry("svd failed"))?;
    // Collinear sources leave the rotation underdetermined.
    if svd.singular_values[1] <= svd.singular_values[0] * 1e-12 {
        return Err(Error::DegenerateGeometry(
            "similarity fit needs 3 non-collinear points",
        ));
    }
    let v = vt.transpose();
    let sign = if (v * u.transpose()).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let reflect_fix = Vector3::new(1.0, 1.0, sign);
    let rotation = v * Matrix3::from_diagonal(&reflect_fix) * u.transpose();
    let scale = if with_scale {
        let s = &svd.singular_values;
        (s[0] + s[1] + sign * s[2]) / var_a
    } else {
        1.0
    };
    let translation = cb - scale * rotation * ca;
    Ok(RigidTransform {
        rotation,
        translation,
        scale,
    })
}

/// Parameters for iterative closest point alignment.
#[derive(Debug, Clone, Copy)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Stop when the relative change of the mean distance drops below this.
    pub rel_tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-6,
        }
    }
}

/// Outcome of an ICP run. `trace` holds the mean closest-point distance after
/// each refit, a non-increasing sequence.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub mean_distance: f64,
    pub trace: Vec<f64>,
}

/// Rigid point-to-point ICP without trimming: alternate nearest-neighbor
/// correspondence against a kd-tree of `b` and a closed-form rigid refit.
pub fn rigid_icp(a: &Shape3D, b: &Shape3D, params: &IcpParams) -> Result<IcpResult> {
    if a.n() == 0 || b.n() == 0 {
        return Err(Error::EmptyInput("icp shape"));
    }
    let targets: Vec<Vector3<f64>> = (0..b.n()).map(|i| b.vertex(i)).collect();
    let tree = KdTree::build(&targets);
    let sources: Vec<Vector3<f64>> = (0..a.n()).map(|i| a.vertex(i)).collect();

    let mut transform = RigidTransform::identity();
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..params.max_iters.max(1) {
        // Correspondences under the current transform.
        let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = sources
            .iter()
            .map(|s| {
                let moved = transform.apply_point(s);
                let (idx, _) = tree.nearest(&moved);
                (*s, targets[idx])
            })
            .collect();
        transform = fit_similarity(&pairs, false)?;
        let mean = sources
            .iter()
            .map(|s| {
                let moved = transform.apply_point(s);
                tree.nearest(&moved).1.sqrt()
            })
            .sum::<f64>()
            / sources.len() as f64;
        trace.push(mean);
        if prev.is_finite() {
            let denom = prev.max(f64::MIN_POSITIVE);
            if (prev - mean).abs() / denom < params.rel_tol || mean == 0.0 {
                break;
            }
        } else if mean == 0.0 {
            break;
        }
        prev = mean;
    }
    Ok(IcpResult {
        transform,
        mean_distance: *trace.last().expect("at least one iteration"),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_points3(rng: &mut impl Rng, l: usize, span: f64) -> Matrix3xX<f64> {
        Matrix3xX::from_fn(l, |_, _| rng.gen_range(-span..span))
    }

    fn random_mapping(rng: &mut impl Rng) -> MappingMatrix {
        MappingMatrix::new(Matrix2x4::from_fn(|_, _| rng.gen_range(-2.0..2.0))).unwrap()
    }

    #[test]
    fn orthographic_projection_drops_z() {
        let m = MappingMatrix::new(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        let pts = Matrix3xX::from_column_slice(&[3.0, -2.0, 7.0]);
        let out = project(&m, &pts);
        assert_eq!(out[(0, 0)], 3.0);
        assert_eq!(out[(1, 0)], -2.0);
    }

    #[test]
    fn translation_only_mapping_maps_origin_to_offset() {
        let m = MappingMatrix::new(Matrix2x4::new(1.0, 0.0, 0.0, 10.0, 0.0, 1.0, 0.0, -4.0)).unwrap();
        let pts = Matrix3xX::zeros(3);
        let out = project(&m, &pts);
        for c in out.column_iter() {
            assert_eq!(c[0], 10.0);
            assert_eq!(c[1], -4.0);
        }
    }

    #[test]
    fn projection_matches_per_column_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_mapping(&mut rng);
        let pts = random_points3(&mut rng, 17, 50.0);
        let out = project(&m, &pts);
        for k in 0..pts.ncols() {
            let hom = nalgebra::Vector4::new(pts[(0, k)], pts[(1, k)], pts[(2, k)], 1.0);
            let expect = m.entries() * hom;
            assert!((out[(0, k)] - expect[0]).abs() < 1e-12);
            assert!((out[(1, k)] - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_mapping_recovers_generator_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..25 {
            let truth = random_mapping(&mut rng);
            let pts = random_points3(&mut rng, 68, 80.0);
            let projected = project(&truth, &pts);
            let fitted = fit_mapping(&projected, &pts).unwrap();
            let err = (fitted.entries() - truth.entries()).amax();
            assert!(err < 1e-8, "entry error {err}");
        }
    }

    #[test]
    fn fit_mapping_rejects_rank_deficient_points() {
        let pts = Matrix3xX::from_fn(10, |r, _| if r == 0 { 1.0 } else { 2.0 });
        let lms = Matrix2xX::zeros(10);
        match fit_mapping(&lms, &pts) {
            Err(Error::SingularMappingFit { rank }) => assert!(rank < 4, "rank {rank}"),
            other => panic!("expected singular fit, got {other:?}"),
        }
        // Coplanar points (z = 0) are rank 3 once augmented.
        let mut coplanar = random_points3(&mut ChaCha8Rng::seed_from_u64(5), 12, 10.0);
        for k in 0..coplanar.ncols() {
            coplanar[(2, k)] = 0.0;
        }
        match fit_mapping(&Matrix2xX::zeros(12), &coplanar) {
            Err(Error::SingularMappingFit { rank }) => assert_eq!(rank, 3),
            other => panic!("expected singular fit, got {other:?}"),
        }
    }

    #[test]
    fn fit_mapping_frontal_orthographic_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts = random_points3(&mut rng, 30, 60.0);
        let truth =
            MappingMatrix::new(Matrix2x4::new(1.0, 0.0, 0.0, 5.0, 0.0, 1.0, 0.0, 9.0)).unwrap();
        let projected = project(&truth, &pts);
        let fitted = fit_mapping(&projected, &pts).unwrap();
        assert_relative_eq!(fitted.entries()[(0, 0)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(fitted.entries()[(0, 1)], 0.0, epsilon = 1e-9);
        assert_relative_eq!(fitted.entries()[(0, 2)], 0.0, epsilon = 1e-9);
        assert_relative_eq!(fitted.entries()[(1, 0)], 0.0, epsilon = 1e-9);
        assert_relative_eq!(fitted.entries()[(1, 1)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(fitted.entries()[(1, 2)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn fit_mapping_agrees_with_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..10 {
            let pts = random_points3(&mut rng, 25, 60.0);
            let mut lms = project(&random_mapping(&mut rng), &pts);
            for v in lms.iter_mut() {
                *v += rng.gen_range(-2.0..2.0);
            }
            let fitted = fit_mapping(&lms, &pts).unwrap();
            // Oracle: explicit normal equations per row.
            let mut design = nalgebra::DMatrix::zeros(25, 4);
            let mut rhs = nalgebra::DMatrix::zeros(25, 2);
            for k in 0..25 {
                for r in 0..3 {
                    design[(k, r)] = pts[(r, k)];
                }
                design[(k, 3)] = 1.0;
                rhs[(k, 0)] = lms[(0, k)];
                rhs[(k, 1)] = lms[(1, k)];
            }
            let gram = design.transpose() * &design;
            let oracle = gram.try_inverse().unwrap() * design.transpose() * rhs;
            for r in 0..2 {
                for c in 0..4 {
                    let rel = (fitted.entries()[(r, c)] - oracle[(c, r)]).abs()
                        / oracle[(c, r)].abs().max(1.0);
                    assert!(rel < 1e-8, "entry ({r},{c}) off by {rel}");
                }
            }
        }
    }

    #[test]
    fn fit_mapping_residual_is_locally_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let pts = random_points3(&mut rng, 20, 40.0);
        // Noisy targets so the residual is strictly positive.
        let mut lms = project(&random_mapping(&mut rng), &pts);
        for v in lms.iter_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
        let fitted = fit_mapping(&lms, &pts).unwrap();
        let residual = |m: &Matrix2x4<f64>| -> f64 {
            let proj = project(&MappingMatrix::new(*m).unwrap(), &pts);
            (proj - &lms).norm_squared()
        };
        let base = residual(fitted.entries());
        for _ in 0..50 {
            let noise = Matrix2x4::from_fn(|_, _| rng.gen_range(-1e-3..1e-3));
            assert!(residual(&(fitted.entries() + noise)) >= base - 1e-9);
        }
    }

    #[test]
    fn visibility_sign_cases() {
        let m = MappingMatrix::new(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        let v = landmark_visibility(&m, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(v, 1.0);
        let v = landmark_visibility(&m, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(v, 0.0);
        let v = landmark_visibility(&m, &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn visibility_rejects_zero_rows_and_non_unit_normals() {
        let m = MappingMatrix::new(Matrix2x4::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        assert!(matches!(
            landmark_visibility(&m, &Vector3::new(0.0, 0.0, 1.0)),
            Err(Error::InvalidMapping(_))
        ));
        let ok = MappingMatrix::new(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        assert!(landmark_visibility(&ok, &Vector3::new(0.0, 0.0, 2.0)).is_err());
    }

    #[test]
    fn visibility_invariant_to_positive_row_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..50 {
            let m = random_mapping(&mut rng);
            let normal = Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>()).normalize();
            let mut scaled = *m.entries();
            let (s1, s2): (f64, f64) = (rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0));
            for c in 0..4 {
                scaled[(0, c)] *= s1;
                scaled[(1, c)] *= s2;
            }
            let a = landmark_visibility(&m, &normal).unwrap();
            let b = landmark_visibility(&MappingMatrix::new(scaled).unwrap(), &normal).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sphere_visibility_is_the_positive_z_hemisphere() {
        let (sphere, prior) = crate::synth::unit_sphere_mesh(10, 12);
        let m = MappingMatrix::new(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        let normals = crate::shape::vertex_normals(&sphere, &prior).unwrap();
        // All vertices act as landmarks here.
        for i in 0..sphere.n() {
            let n = Vector3::from(normals.directions.column(i));
            let v = landmark_visibility(&m, &n).unwrap();
            assert_eq!(v > 0.5, n[2] > 0.0);
        }
    }

    #[test]
    fn half_turn_camera_mirrors_the_visible_set() {
        let (sphere, prior) = crate::synth::unit_sphere_mesh(10, 12);
        let frontal =
            MappingMatrix::new(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        // Yaw by pi about the vertical axis.
        let behind =
            MappingMatrix::new(Matrix2x4::new(-1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        let front_mask = visibility_mask(&frontal, &sphere, &prior).unwrap();
        let back_mask = visibility_mask(&behind, &sphere, &prior).unwrap();
        let normals = crate::shape::vertex_normals(&sphere, &prior).unwrap();
        for i in 0..sphere.n() {
            if normals.directions[(2, i)] != 0.0 {
                assert_ne!(front_mask[i], back_mask[i], "vertex {i}");
            }
        }
    }

    #[test]
    fn opposite_normals_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..50 {
            let m = random_mapping(&mut rng);
            let n = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                .normalize();
            let a = landmark_visibility(&m, &n).unwrap();
            let b = landmark_visibility(&m, &(-n)).unwrap();
            assert_eq!(a + b, 1.0);
        }
    }

    fn square_template_prior() -> ShapePrior {
        // Four landmarks on a 100x50 template box.
        let template = DVector::from_vec(vec![0.0, 0.0, 100.0, 0.0, 100.0, 50.0, 0.0, 50.0]);
        let mean = DVector::zeros(4 * 3);
        let adjacency = vec![vec![1, 3], vec![0, 2], vec![1, 3], vec![2, 0]];
        ShapePrior::new(mean, template, vec![0, 1, 2, 3], adjacency, vec![]).unwrap()
    }

    #[test]
    fn init_landmarks_identity_when_bbox_matches_template() {
        let prior = square_template_prior();
        let bbox = Bbox::new(0.0, 0.0, 100.0, 50.0).unwrap();
        let init = init_landmarks(&prior, &bbox).unwrap();
        assert_relative_eq!(
            init.flat(),
            DVector::from_vec(vec![0.0, 0.0, 100.0, 0.0, 100.0, 50.0, 0.0, 50.0]),
            epsilon = 1e-12
        );
        assert!(init.visible.iter().all(|&v| v));
    }

    #[test]
    fn init_landmarks_doubles_offsets_for_doubled_box() {
        let prior = square_template_prior();
        // Same center (50, 25), doubled sides.
        let bbox = Bbox::new(-50.0, -25.0, 200.0, 100.0).unwrap();
        let init = init_landmarks(&prior, &bbox).unwrap();
        let expect = [(-50.0, -25.0), (150.0, -25.0), (150.0, 75.0), (-50.0, 75.0)];
        for (k, (u, v)) in expect.iter().enumerate() {
            assert_relative_eq!(init.point(k)[0], *u, epsilon = 1e-9);
            assert_relative_eq!(init.point(k)[1], *v, epsilon = 1e-9);
        }
    }

    #[test]
    fn init_landmarks_preserves_bbox_area() {
        let prior = square_template_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..20 {
            let bbox = Bbox::new(
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(10.0..500.0),
                rng.gen_range(10.0..500.0),
            )
            .unwrap();
            let init = init_landmarks(&prior, &bbox).unwrap();
            let out_box = Bbox::around_points(&init.points).unwrap();
            assert_relative_eq!(out_box.area(), bbox.area(), max_relative = 1e-6);
        }
        assert!(Bbox::new(0.0, 0.0, 0.0, 10.0).is_err());
    }

    fn random_shape(rng: &mut impl Rng, n: usize) -> Shape3D {
        Shape3D::new(random_points3(rng, n, 100.0)).unwrap()
    }

    fn random_rigid(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            .normalize();
        let angle = rng.gen_range(-3.0..3.0);
        RigidTransform {
            rotation: *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                .matrix(),
            translation: Vector3::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
            ),
            scale: 1.0,
        }
    }

    #[test]
    fn procrustes_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let a = random_shape(&mut rng, 30);
        let (t, _, dist) = procrustes_align(&a, &a, false).unwrap();
        assert!(dist < 1e-12);
        assert_relative_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-9);
        assert!(t.translation.norm() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_random_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let a = random_shape(&mut rng, 25);
            let truth = random_rigid(&mut rng);
            let b = truth.apply(&a);
            let (t, aligned, dist) = procrustes_align(&a, &b, false).unwrap();
            assert!(dist < 1e-9, "residual {dist}");
            assert_relative_eq!(t.rotation, truth.rotation, epsilon = 1e-8);
            assert!((t.translation - truth.translation).norm() < 1e-7);
            assert!(mean_vertex_distance(&aligned, &b) < 1e-9);
            // Rotation stays orthogonal with unit determinant.
            assert_relative_eq!(
                t.rotation.transpose() * t.rotation,
                Matrix3::identity(),
                epsilon = 1e-9
            );
            assert_relative_eq!(t.rotation.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn procrustes_pure_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let a = random_shape(&mut rng, 20);
        let b = Shape3D::new(a.vertices() * 2.0).unwrap();
        let (t, _, dist) = procrustes_align(&a, &b, true).unwrap();
        assert_relative_eq!(t.scale, 2.0, epsilon = 1e-9);
        assert!(dist < 1e-9);
    }

    #[test]
    fn procrustes_rejects_collinear_input() {
        let verts = Matrix3xX::from_fn(5, |r, c| if r == 0 { c as f64 } else { 0.0 });
        let a = Shape3D::new(verts.clone()).unwrap();
        let b = Shape3D::new(verts).unwrap();
        assert!(matches!(
            procrustes_align(&a, &b, false),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn icp_identical_shapes_converge_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_shape(&mut rng, 50);
        let result = rigid_icp(&a, &a, &IcpParams::default()).unwrap();
        assert!(result.mean_distance < 1e-12);
        assert!(result.trace.len() <= 2);
    }

    #[test]
    fn icp_recovers_small_perturbation() {
        let (sphere, _) = crate::synth::unit_sphere_mesh(12, 16);
        // Millimeter-ish scale.
        let a = Shape3D::new(sphere.vertices() * 60.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..5 {
            let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                .normalize();
            let angle = rng.gen_range(-1.0..1.0) * 5.0_f64.to_radians();
            let t = RigidTransform {
                rotation: *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                    .matrix(),
                translation: Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
                scale: 1.0,
            };
            let b = t.apply(&a);
            let result = rigid_icp(&a, &b, &IcpParams::default()).unwrap();
            assert!(result.mean_distance < 1e-3, "dist {}", result.mean_distance);
            for w in result.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "trace not monotone: {:?}", result.trace);
            }
        }
    }

    #[test]
    fn icp_handles_subsampled_target() {
        let (sphere, _) = crate::synth::unit_sphere_mesh(14, 20);
        let a = Shape3D::new(sphere.vertices() * 50.0).unwrap();
        let keep: Vec<usize> = (0..a.n()).step_by(2).collect();
        let sub = crate::shape::landmark_columns(&a, &keep).unwrap();
        let b = Shape3D::new(sub).unwrap();
        let result = rigid_icp(&b, &a, &IcpParams::default()).unwrap();
        // Every subsampled vertex exists in the full set.
        assert!(result.mean_distance < 1e-9);
    }

    proptest! {
        #[test]
        fn refitting_own_projection_is_idempotent(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mapping(&mut rng);
            let pts = random_points3(&mut rng, 16, 30.0);
            let proj = project(&m, &pts);
            if let Ok(fit1) = fit_mapping(&proj, &pts) {
                let refit = fit_mapping(&project(&fit1, &pts), &pts).unwrap();
                prop_assert!((refit.entries() - fit1.entries()).amax() < 1e-8);
            }
        }
    }
}
