//! Synthetic data generation: test meshes, rendered pose sweeps and the
//! linear-world dataset whose generating maps are known exactly.

use nalgebra::{DMatrix, DVector, Matrix2x4, Matrix3, Matrix3xX, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::camera::{init_landmarks, project, Bbox, LandmarkSet2D, MappingMatrix};
use crate::cascade::TrainSample;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, GrayImage};
use crate::shape::{
    landmark_columns, landmark_normals, landmark_subshape, mean_shape, Shape3D, ShapePrior,
    ShapeState,
};

/* ---------------------------------------------------------------- */
/* Sphere mesh                                                      */

/// Latitude/longitude sphere without pole vertices: `rings * cols` unit
/// vertices with outward-oriented triangle faces. The returned prior treats
/// every vertex as a landmark.
pub fn unit_sphere_mesh(rings: usize, cols: usize) -> (Shape3D, ShapePrior) {
    assert!(rings >= 2 && cols >= 3);
    let n = rings * cols;
    let mut vertices = Matrix3xX::zeros(n);
    for r in 0..rings {
        let lat = std::f64::consts::PI * (r as f64 + 1.0) / (rings as f64 + 1.0);
        for c in 0..cols {
            let lon = std::f64::consts::TAU * c as f64 / cols as f64;
            let idx = r * cols + c;
            vertices[(0, idx)] = lat.sin() * lon.cos();
            vertices[(1, idx)] = lat.sin() * lon.sin();
            vertices[(2, idx)] = lat.cos();
        }
    }
    let mut faces = Vec::with_capacity((rings - 1) * cols * 2);
    for r in 0..rings - 1 {
        for c in 0..cols {
            let c1 = (c + 1) % cols;
            let (a, b) = (r * cols + c, r * cols + c1);
            let (d, e) = ((r + 1) * cols + c, (r + 1) * cols + c1);
            faces.push([a, b, e]);
            faces.push([a, e, d]);
        }
    }
    // Orient every face outward.
    for f in faces.iter_mut() {
        let p0 = Vector3::from(vertices.column(f[0]));
        let p1 = Vector3::from(vertices.column(f[1]));
        let p2 = Vector3::from(vertices.column(f[2]));
        let outward = p0 + p1 + p2;
        if (p1 - p0).cross(&(p2 - p0)).dot(&outward) < 0.0 {
            f.swap(1, 2);
        }
    }
    let shape = Shape3D::new(vertices.clone()).unwrap();
    // Template: x/y coordinates rescaled into a 100 px box.
    let mut template = DVector::zeros(2 * n);
    let (mut minx, mut maxx, mut miny, mut maxy) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in vertices.column_iter() {
        minx = minx.min(c[0]);
        maxx = maxx.max(c[0]);
        miny = miny.min(c[1]);
        maxy = maxy.max(c[1]);
    }
    for i in 0..n {
        template[2 * i] = (vertices[(0, i)] - minx) / (maxx - minx) * 100.0;
        template[2 * i + 1] = (vertices[(1, i)] - miny) / (maxy - miny) * 100.0;
    }
    let prior = ShapePrior::from_faces(shape.flat(), template, (0..n).collect(), faces).unwrap();
    (shape, prior)
}

/* ---------------------------------------------------------------- */
/* Synthetic faces                                                  */

/// Mirror-symmetric parametric face shell with identity and expression
/// variation, in millimeters.
#[derive(Debug, Clone)]
pub struct SyntheticFace {
    pub subject: String,
    pub pen: Shape3D,
    /// Expression offsets, one `3n` vector per non-neutral expression.
    pub expression_offsets: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct FaceGenConfig {
    pub grid_cols: usize,
    pub grid_rows: usize,
    /// Identity bump amplitude, mm.
    pub identity_amp: f64,
    /// Expression bump amplitude, mm.
    pub expression_amp: f64,
    /// Non-neutral expressions per subject.
    pub expressions: usize,
    pub seed: u64,
}

impl Default for FaceGenConfig {
    fn default() -> Self {
        Self {
            grid_cols: 21,
            grid_rows: 25,
            identity_amp: 4.0,
            expression_amp: 5.0,
            expressions: 1,
            seed: 0,
        }
    }
}

/// The grid topology shared by all generated faces.
pub fn face_mesh_topology(cfg: &FaceGenConfig) -> Vec<[usize; 3]> {
    let (gu, gv) = (cfg.grid_cols, cfg.grid_rows);
    let mut faces = Vec::with_capacity((gu - 1) * (gv - 1) * 2);
    for r in 0..gv - 1 {
        for c in 0..gu - 1 {
            let v = |rr: usize, cc: usize| rr * gu + cc;
            faces.push([v(r, c), v(r, c + 1), v(r + 1, c + 1)]);
            faces.push([v(r, c), v(r + 1, c + 1), v(r + 1, c)]);
        }
    }
    faces
}

/// Landmark vertex indices for the generated topology: brow, eye, jaw and
/// mouth-corner pairs plus four midline points (12 landmarks).
pub fn face_landmark_indices(cfg: &FaceGenConfig) -> Vec<usize> {
    let spots: [(f64, f64); 12] = [
        (-0.45, -0.55),
        (0.45, -0.55),
        (-0.3, -0.3),
        (0.3, -0.3),
        (0.0, 0.05),
        (0.0, 0.25),
        (-0.28, 0.5),
        (0.28, 0.5),
        (-0.8, 0.3),
        (0.8, 0.3),
        (0.0, 0.62),
        (0.0, 0.85),
    ];
    let (gu, gv) = (cfg.grid_cols, cfg.grid_rows);
    spots
        .iter()
        .map(|&(s, t)| {
            let c = (((s + 1.0) / 2.0) * (gu - 1) as f64).round() as usize;
            let r = (((t + 1.0) / 2.0) * (gv - 1) as f64).round() as usize;
            r * gu + c
        })
        .collect()
}

fn grid_param(idx: usize, count: usize) -> f64 {
    (2.0 * idx as f64 - (count - 1) as f64) / (count - 1) as f64
}

/// Symmetric bump field: every bump is added at (s, t) and its mirror.
fn bump_field(rng: &mut ChaCha8Rng, bumps: usize, amp: f64) -> Vec<(f64, f64, f64, f64)> {
    (0..bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..0.85),
                rng.gen_range(-0.8..0.9),
                rng.gen_range(-1.0..1.0) * amp,
                rng.gen_range(0.12..0.3),
            )
        })
        .collect()
}

fn eval_bumps(bumps: &[(f64, f64, f64, f64)], s: f64, t: f64) -> f64 {
    let mut z = 0.0;
    for &(sc, tc, a, w) in bumps {
        let d1 = (s - sc) * (s - sc) + (t - tc) * (t - tc);
        let d2 = (s + sc) * (s + sc) + (t - tc) * (t - tc);
        z += a * ((-d1 / (w * w)).exp() + (-d2 / (w * w)).exp());
    }
    z
}

/// Generates `count` subjects with dense correspondence on the shared grid.
pub fn synth_faces(count: usize, cfg: &FaceGenConfig) -> Vec<SyntheticFace> {
    let (gu, gv) = (cfg.grid_cols, cfg.grid_rows);
    let n = gu * gv;
    let mut out = Vec::with_capacity(count);
    for subject in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (subject as u64).wrapping_mul(0x9E37));
        let id_bumps = bump_field(&mut rng, 4, cfg.identity_amp);
        let breadth = rng.gen_range(0.9..1.1);
        let mut vertices = Matrix3xX::zeros(n);
        for r in 0..gv {
            let t = grid_param(r, gv);
            for c in 0..gu {
                let s = grid_param(c, gu);
                let idx = r * gu + c;
                let dome = 42.0 * (1.0 - 0.6 * s * s - 0.75 * t * t);
                let nose = 16.0 * (-(s * s + (t - 0.05) * (t - 0.05)) / 0.018).exp();
                vertices[(0, idx)] = 55.0 * breadth * s;
                vertices[(1, idx)] = 75.0 * t;
                vertices[(2, idx)] = dome + nose + eval_bumps(&id_bumps, s, t);
            }
        }
        let pen = Shape3D::new(vertices).unwrap();
        let mut expression_offsets = Vec::with_capacity(cfg.expressions);
        for e in 0..cfg.expressions {
            let mut erng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE0_0000 ^ ((subject * 31 + e + 1) as u64));
            let ex_bumps = bump_field(&mut erng, 3, cfg.expression_amp);
            let mut offset = DVector::zeros(3 * n);
            for r in 0..gv {
                let t = grid_param(r, gv);
                for c in 0..gu {
                    let s = grid_param(c, gu);
                    let idx = r * gu + c;
                    offset[3 * idx + 2] = eval_bumps(&ex_bumps, s, t);
                }
            }
            expression_offsets.push(offset);
        }
        out.push(SyntheticFace {
            subject: format!("s{subject:02}"),
            pen,
            expression_offsets,
        });
    }
    out
}

/* ---------------------------------------------------------------- */
/* Pose sweep                                                       */

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub yaw_degrees: Vec<f64>,
    pub image_size: usize,
    /// Gaussian noise added to target landmark positions, px.
    pub landmark_noise_px: f64,
    /// Gaussian noise added to target shape coordinates, mm.
    pub shape_noise_mm: f64,
    /// Fraction of the image side the projected face spans.
    pub fill_fraction: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            yaw_degrees: default_yaw_sweep(),
            image_size: 160,
            landmark_noise_px: 0.0,
            shape_noise_mm: 0.0,
            fill_fraction: 0.7,
            seed: 0,
        }
    }
}

/// The default yaw sweep: -90 to 90 degrees in 10 degree steps (19 poses).
pub fn default_yaw_sweep() -> Vec<f64> {
    (-9..=9).map(|k| k as f64 * 10.0).collect()
}

/// One rendered sample of a sweep.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub sample: TrainSample,
    pub subject: String,
    /// 0 is neutral; higher values index the subject's expression offsets.
    pub expression: usize,
    pub yaw_deg: f64,
    /// The generating camera.
    pub mapping: MappingMatrix,
}

fn yaw_rotation(yaw_rad: f64) -> Matrix3<f64> {
    let (s, c) = yaw_rad.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Weak-perspective camera for a rotated shape: uniform scale filling
/// `fill_fraction` of the image, centered.
fn sweep_camera(shape: &Shape3D, rotation: &Matrix3<f64>, image_size: usize, fill: f64) -> MappingMatrix {
    let n = shape.n();
    let mut centroid = Vector3::zeros();
    for i in 0..n {
        centroid += shape.vertex(i);
    }
    centroid /= n as f64;
    let (mut minx, mut maxx, mut miny, mut maxy) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for i in 0..n {
        let q = rotation * (shape.vertex(i) - centroid);
        minx = minx.min(q[0]);
        maxx = maxx.max(q[0]);
        miny = miny.min(q[1]);
        maxy = maxy.max(q[1]);
    }
    let extent = (maxx - minx).max(maxy - miny).max(1e-9);
    let scale = fill * image_size as f64 / extent;
    let cx = (minx + maxx) / 2.0;
    let cy = (miny + maxy) / 2.0;
    let half = image_size as f64 / 2.0;
    // M p = scale * (R (p - centroid))_{xy} - scale * (cx, cy) + half
    let rc = rotation * centroid;
    let mut m = Matrix2x4::zeros();
    for c in 0..3 {
        m[(0, c)] = scale * rotation[(0, c)];
        m[(1, c)] = scale * rotation[(1, c)];
    }
    m[(0, 3)] = -scale * (rc[0] + cx) + half;
    m[(1, 3)] = -scale * (rc[1] + cy) + half;
    MappingMatrix::new(m).expect("finite camera")
}

/// Flat-shaded depth render of the mesh under a yaw rotation; intensity
/// comes from the rotated face normal against the view axis, hidden surfaces
/// resolved by z-buffer.
fn render_shaded(
    shape: &Shape3D,
    faces: &[[usize; 3]],
    rotation: &Matrix3<f64>,
    mapping: &MappingMatrix,
    image_size: usize,
) -> GrayImage {
    let n = shape.n();
    let mut px = vec![0.0f64; n];
    let mut py = vec![0.0f64; n];
    let mut depth = vec![0.0f64; n];
    let projected = project(mapping, shape.vertices());
    for i in 0..n {
        px[i] = projected[(0, i)];
        py[i] = projected[(1, i)];
        let q = rotation * shape.vertex(i);
        depth[i] = q[2];
    }
    let mut img = vec![0.0f64; image_size * image_size];
    let mut zbuf = vec![f64::NEG_INFINITY; image_size * image_size];
    for f in faces {
        let (a, b, c) = (f[0], f[1], f[2]);
        let qa = rotation * shape.vertex(a);
        let qb = rotation * shape.vertex(b);
        let qc = rotation * shape.vertex(c);
        let normal = (qb - qa).cross(&(qc - qa));
        let nn = normal.norm();
        if nn <= 0.0 {
            continue;
        }
        let shade = 0.25 + 0.7 * (normal[2] / nn).max(0.0);
        let (x0, x1) = (
            px[a].min(px[b]).min(px[c]).floor().max(0.0) as usize,
            (px[a].max(px[b]).max(px[c]).ceil() as i64).clamp(0, image_size as i64 - 1) as usize,
        );
        let (y0, y1) = (
            py[a].min(py[b]).min(py[c]).floor().max(0.0) as usize,
            (py[a].max(py[b]).max(py[c]).ceil() as i64).clamp(0, image_size as i64 - 1) as usize,
        );
        if px[a].max(px[b]).max(px[c]) < 0.0 || py[a].max(py[b]).max(py[c]) < 0.0 {
            continue;
        }
        let det = (px[b] - px[a]) * (py[c] - py[a]) - (px[c] - px[a]) * (py[b] - py[a]);
        if det.abs() <= 1e-12 {
            continue;
        }
        for y in y0..=y1.min(image_size - 1) {
            for x in x0..=x1.min(image_size - 1) {
                let (fx, fy) = (x as f64, y as f64);
                let w1 = ((fx - px[a]) * (py[c] - py[a]) - (px[c] - px[a]) * (fy - py[a])) / det;
                let w2 = ((px[b] - px[a]) * (fy - py[a]) - (fx - px[a]) * (py[b] - py[a])) / det;
                let w0 = 1.0 - w1 - w2;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * depth[a] + w1 * depth[b] + w2 * depth[c];
                let slot = y * image_size + x;
                if z > zbuf[slot] {
                    zbuf[slot] = z;
                    img[slot] = shade;
                }
            }
        }
    }
    GrayImage::new(image_size, image_size, img).expect("shades within [0,1]")
}

/// Frontal landmark template of a mean shape: the yaw-zero sweep-camera
/// projection of its landmark vertices, interleaved `(u, v, ...)` pixels.
pub fn frontal_template(
    mean: &Shape3D,
    landmark_indices: &[usize],
    image_size: usize,
    fill_fraction: f64,
) -> Result<DVector<f64>> {
    let camera = sweep_camera(mean, &yaw_rotation(0.0), image_size, fill_fraction);
    let landmark_pts = landmark_columns(mean, landmark_indices)?;
    let template = project(&camera, &landmark_pts);
    Ok(DVector::from_column_slice(template.as_slice()))
}

/// Builds a prior for a sweep dataset: mean of the subjects' neutral shapes,
/// with the landmark template projected at yaw zero by the sweep camera.
pub fn sweep_prior(
    faces_meshes: &[SyntheticFace],
    landmark_indices: Vec<usize>,
    faces: Vec<[usize; 3]>,
    cfg: &SweepConfig,
) -> Result<ShapePrior> {
    if faces_meshes.is_empty() {
        return Err(Error::EmptyInput("subjects"));
    }
    let pens: Vec<Shape3D> = faces_meshes.iter().map(|f| f.pen.clone()).collect();
    let mean = mean_shape(&pens)?;
    let template = frontal_template(&mean, &landmark_indices, cfg.image_size, cfg.fill_fraction)?;
    ShapePrior::from_faces(mean.flat(), template, landmark_indices, faces)
}

/// Renders every subject and expression across the yaw sweep.
///
/// Landmark targets are the projections of the expressive shape's landmark
/// vertices (optionally noised); visibility targets follow the surface
/// normal test under the generating camera. Shape targets stay in the
/// canonical frontal frame.
pub fn pose_sweep(
    subjects: &[SyntheticFace],
    prior: &ShapePrior,
    mesh_faces: &[[usize; 3]],
    cfg: &SweepConfig,
) -> Result<Vec<SweepSample>> {
    if subjects.is_empty() {
        return Err(Error::EmptyInput("subjects"));
    }
    let n = prior.n();
    let mut out = Vec::new();
    for (si, subject) in subjects.iter().enumerate() {
        if subject.pen.n() != n {
            return Err(Error::DimensionMismatch {
                context: "sweep subject vertex count",
                expected: n,
                actual: subject.pen.n(),
            });
        }
        let zero = DVector::zeros(3 * n);
        for exp_idx in 0..=subject.expression_offsets.len() {
            let offset = if exp_idx == 0 {
                &zero
            } else {
                &subject.expression_offsets[exp_idx - 1]
            };
            let expressive = Shape3D::from_flat(&(subject.pen.flat() + offset))?;
            for (yi, &yaw_deg) in cfg.yaw_degrees.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ ((si as u64) << 40) ^ ((exp_idx as u64) << 24) ^ (yi as u64),
                );
                let rotation = yaw_rotation(yaw_deg.to_radians());
                let camera = sweep_camera(&expressive, &rotation, cfg.image_size, cfg.fill_fraction);
                let image = render_shaded(&expressive, mesh_faces, &rotation, &camera, cfg.image_size);

                let landmark_pts = landmark_subshape(&expressive, prior)?;
                let mut points = project(&camera, &landmark_pts);
                // Detector-style box: the extent of the clean projected
                // landmarks, taken before annotation noise.
                let bbox = Bbox::around_points(&points)?;
                if cfg.landmark_noise_px > 0.0 {
                    for v in points.iter_mut() {
                        *v += gaussian(&mut rng) * cfg.landmark_noise_px;
                    }
                }
                let normals = landmark_normals(&expressive, prior)?;
                let view = camera.view_direction()?;
                let visible: Vec<bool> = normals
                    .column_iter()
                    .map(|c| Vector3::from(c).dot(&view) > 0.0)
                    .collect();

                let mut identity = subject.pen.flat();
                let mut expression = offset.clone();
                if cfg.shape_noise_mm > 0.0 {
                    for v in identity.iter_mut() {
                        *v += gaussian(&mut rng) * cfg.shape_noise_mm;
                    }
                    for v in expression.iter_mut() {
                        *v += gaussian(&mut rng) * cfg.shape_noise_mm;
                    }
                }

                out.push(SweepSample {
                    sample: TrainSample {
                        image,
                        bbox,
                        target_landmarks: LandmarkSet2D::new(points, visible)?,
                        target_state: ShapeState::new(identity, expression)?,
                    },
                    subject: subject.subject.clone(),
                    expression: exp_idx,
                    yaw_deg,
                    mapping: camera,
                });
            }
        }
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/* ---------------------------------------------------------------- */
/* Linear world                                                     */

/// Feature extractor of the linear world: the landmark residual against the
/// target encoded in the image, mapped through a fixed linear encoder.
#[derive(Debug, Clone)]
pub struct LinearWorldExtractor {
    /// `128 l x 2l` encoder with full column rank.
    pub encoder: DMatrix<f64>,
}

const ENCODE_SPAN: f64 = 1024.0;

fn encode_coord(u: f64) -> f64 {
    (u + ENCODE_SPAN / 2.0) / ENCODE_SPAN
}

fn decode_coord(p: f64) -> f64 {
    p * ENCODE_SPAN - ENCODE_SPAN / 2.0
}

impl FeatureExtractor for LinearWorldExtractor {
    fn descriptor_dim(&self) -> usize {
        128
    }

    fn extract(&self, image: &GrayImage, landmarks: &LandmarkSet2D, _bbox: &Bbox) -> DVector<f64> {
        let two_l = 2 * landmarks.len();
        debug_assert_eq!(image.width(), two_l);
        let mut residual = DVector::zeros(two_l);
        let current = landmarks.flat();
        for j in 0..two_l {
            residual[j] = decode_coord(image.get(j, 0)) - current[j];
        }
        &self.encoder * residual
    }
}

pub struct LinearWorldDims {
    pub n: usize,
    pub l: usize,
    pub samples: usize,
}

/// A dataset where every closed-form solve of the cascade recovers its
/// generating map exactly.
pub struct LinearWorld {
    pub samples: Vec<TrainSample>,
    pub prior: ShapePrior,
    pub extractor: LinearWorldExtractor,
    /// The generating feature encoder.
    pub encoder: DMatrix<f64>,
    /// The generating landmark-to-shape map (`6n x 2l`).
    pub shape_map: DMatrix<f64>,
    pub mappings: Vec<MappingMatrix>,
}

/// Constructs the linear world.
///
/// Per sample, a camera and a box are drawn, and the landmark residual `r`
/// is solved from the self-consistency condition that the target landmarks
/// are simultaneously `init + r` and the exact projection of the target
/// shape, whose offset from the mean is itself linear in `r`. Features are a
/// fixed linear encoding of `r`, so the landmark regression, the shape
/// regression and the mapping refit all have exact solutions.
pub fn synth_linear_world(dims: &LinearWorldDims, seed: u64) -> Result<LinearWorld> {
    let (n, l, count) = (dims.n, dims.l, dims.samples);
    if l < 4 || n < l || count == 0 {
        return Err(Error::InvalidInput(format!(
            "linear world needs l >= 4, n >= l, samples >= 1 (got n={n}, l={l}, samples={count})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_l = 2 * l;
    let len3n = 3 * n;

    // Mean shape: random blob, +-50 mm.
    let mean = DVector::from_fn(len3n, |_, _| rng.gen_range(-50.0..50.0));
    let landmark_indices: Vec<usize> = (0..l).map(|k| k * n / l).collect();
    let adjacency: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + n - 1) % n, (i + 1) % n]).collect();
    let mean_shape3d = Shape3D::from_flat(&mean)?;
    let landmark_pts = landmark_columns(&mean_shape3d, &landmark_indices)?;
    // Template: x/y of landmark vertices rescaled into a 100 px box.
    let mut template = DVector::zeros(two_l);
    let (mut minx, mut maxx, mut miny, mut maxy) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in landmark_pts.column_iter() {
        minx = minx.min(c[0]);
        maxx = maxx.max(c[0]);
        miny = miny.min(c[1]);
        maxy = maxy.max(c[1]);
    }
    for k in 0..l {
        template[2 * k] = (landmark_pts[(0, k)] - minx) / (maxx - minx) * 100.0;
        template[2 * k + 1] = (landmark_pts[(1, k)] - miny) / (maxy - miny) * 100.0;
    }
    let prior = ShapePrior::new(mean.clone(), template, landmark_indices.clone(), adjacency, vec![])?;

    // Generating maps.
    let encoder = DMatrix::from_fn(128 * l, two_l, |_, _| rng.gen_range(-1.0..1.0));
    let basis = DMatrix::from_fn(2 * len3n, two_l, |_, _| rng.gen_range(-0.05..0.05));
    // Landmark rows of the expressive part of the basis (top + bottom).
    let mut basis_lm = DMatrix::zeros(3 * l, two_l);
    for (k, &idx) in landmark_indices.iter().enumerate() {
        for r in 0..3 {
            for c in 0..two_l {
                basis_lm[(3 * k + r, c)] =
                    basis[(3 * idx + r, c)] + basis[(len3n + 3 * idx + r, c)];
            }
        }
    }

    // Cameras and boxes first; the coupling matrix is rescaled so the
    // per-sample solve is well conditioned.
    let extent = (maxx - minx).max(maxy - miny);
    let mut cameras = Vec::with_capacity(count);
    let mut bboxes = Vec::with_capacity(count);
    let mut couplings = Vec::with_capacity(count);
    for _ in 0..count {
        let bbox = Bbox::new(
            rng.gen_range(10.0..60.0),
            rng.gen_range(10.0..60.0),
            rng.gen_range(120.0..260.0),
            rng.gen_range(120.0..260.0),
        )?;
        let axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        )
        .normalize();
        let angle = rng.gen_range(-1.2..1.2);
        let rot = *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .matrix();
        let scale = 0.8 * bbox.side() / extent.max(1.0);
        let center = bbox.center();
        let mut centroid3 = Vector3::zeros();
        for c in landmark_pts.column_iter() {
            centroid3 += Vector3::from(c);
        }
        centroid3 /= l as f64;
        let rc = rot * centroid3;
        let mut m = Matrix2x4::zeros();
        for c in 0..3 {
            m[(0, c)] = scale * rot[(0, c)] + rng.gen_range(-0.05..0.05) * scale;
            m[(1, c)] = scale * rot[(1, c)] + rng.gen_range(-0.05..0.05) * scale;
        }
        m[(0, 3)] = center[0] - scale * rc[0] + rng.gen_range(-10.0..10.0);
        m[(1, 3)] = center[1] - scale * rc[1] + rng.gen_range(-10.0..10.0);
        let camera = MappingMatrix::new(m)?;

        // Coupling of the residual into projected landmark motion.
        let mut b = DMatrix::zeros(two_l, two_l);
        for k in 0..l {
            for c in 0..two_l {
                for r in 0..2 {
                    let mut acc = 0.0;
                    for d in 0..3 {
                        acc += m[(r, d)] * basis_lm[(3 * k + d, c)];
                    }
                    b[(2 * k + r, c)] = acc;
                }
            }
        }
        cameras.push(camera);
        bboxes.push(bbox);
        couplings.push(b);
    }

    let mix_raw = DMatrix::from_fn(two_l, two_l, |_, _| rng.gen_range(-1.0..1.0));
    let worst = couplings
        .iter()
        .map(|b| (b * &mix_raw).norm())
        .fold(0.0f64, f64::max);
    let mix = if worst > 0.0 { &mix_raw * (0.5 / worst) } else { mix_raw };
    let shape_map = &basis * &mix;

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let init = init_landmarks(&prior, &bboxes[i])?.flat();
        let base_proj = project(&cameras[i], &landmark_pts);
        let base_flat = DVector::from_column_slice(base_proj.as_slice());
        let a = &base_flat - &init;
        let system = DMatrix::identity(two_l, two_l) - &couplings[i] * &mix;
        let r = system
            .lu()
            .solve(&a)
            .ok_or_else(|| Error::InvalidInput("linear world solve failed".to_string()))?;
        let z = &mix * &r;
        let delta = &basis * &z; // 6n offsets
        let identity = &mean + delta.rows(0, len3n);
        let expression = delta.rows(len3n, len3n).clone_owned();
        let target_flat = &init + &r;

        // Self-consistency: the targets are exactly the projection of the
        // expressive target shape.
        let expressive = Shape3D::from_flat(&(&identity + &expression))?;
        let check = project(&cameras[i], &landmark_columns(&expressive, &landmark_indices)?);
        let err = (DVector::from_column_slice(check.as_slice()) - &target_flat).amax();
        if err > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "linear world inconsistent by {err}"
            )));
        }
        if target_flat.amax() >= ENCODE_SPAN / 2.0 - 10.0 {
            return Err(Error::InvalidInput(
                "linear world landmarks exceed the encodable range".to_string(),
            ));
        }

        let pixels: Vec<f64> = target_flat.iter().map(|&u| encode_coord(u)).collect();
        let image = GrayImage::new(two_l, 1, pixels)?;
        samples.push(TrainSample {
            image,
            bbox: bboxes[i],
            target_landmarks: LandmarkSet2D::from_flat(&target_flat, vec![true; l])?,
            target_state: ShapeState::new(identity, expression)?,
        });
    }

    Ok(LinearWorld {
        samples,
        prior,
        extractor: LinearWorldExtractor {
            encoder: encoder.clone(),
        },
        encoder,
        shape_map,
        mappings: cameras,
    })
}

/* ---------------------------------------------------------------- */
/* K-fold splitting                                                 */

/// Assigns a fold id to every sample so that folds are subject-disjoint and
/// subject counts differ by at most one. Deterministic for a fixed seed.
pub fn kfold_split(subjects: &[String], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".to_string()));
    }
    let mut distinct: Vec<String> = Vec::new();
    for s in subjects {
        if !distinct.contains(s) {
            distinct.push(s.clone());
        }
    }
    if distinct.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} subjects cannot fill {} folds",
            distinct.len(),
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..distinct.len()).collect();
    order.shuffle(&mut rng);
    let mut fold_of_subject = vec![0usize; distinct.len()];
    for (pos, &subj) in order.iter().enumerate() {
        fold_of_subject[subj] = pos % k;
    }
    Ok(subjects
        .iter()
        .map(|s| fold_of_subject[distinct.iter().position(|d| d == s).unwrap()])
        .collect())
}
