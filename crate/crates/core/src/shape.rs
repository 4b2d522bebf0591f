//! 3D face shape model.
//!
//! A face shape is an `n`-vertex point set in dense correspondence with every
//! other shape of the same model (same vertex count, same per-index
//! semantics). A shape decomposes into a mean, an identity offset and an
//! expression offset; all shape arithmetic in this crate is elementwise over
//! that decomposition.
//!
//! Flattened shapes use the interleaved layout `(x1, y1, z1, x2, y2, z2, ...)`
//! and flattened landmark sets use `(u1, v1, u2, v2, ...)`. Since shapes are
//! stored as column-major `3 x n` matrices, the raw data slice already has
//! this layout.

use nalgebra::{DVector, Matrix3xX, Vector3};

use crate::error::{Error, Result};

/// An n-vertex 3D face shape, coordinates in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D {
    vertices: Matrix3xX<f64>,
}

impl Shape3D {
    /// Builds a shape from a `3 x n` vertex matrix (one column per vertex).
    pub fn new(vertices: Matrix3xX<f64>) -> Result<Self> {
        if vertices.ncols() == 0 {
            return Err(Error::EmptyInput("shape vertices"));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shape vertices"));
        }
        Ok(Self { vertices })
    }

    /// Builds a shape from an interleaved `3n` coordinate vector.
    pub fn from_flat(flat: &DVector<f64>) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::DimensionMismatch {
                context: "flat shape vector",
                expected: 3 * (flat.len() / 3 + 1),
                actual: flat.len(),
            });
        }
        Self::new(Matrix3xX::from_column_slice(flat.as_slice()))
    }

    pub fn n(&self) -> usize {
        self.vertices.ncols()
    }

    pub fn vertices(&self) -> &Matrix3xX<f64> {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        self.vertices.column(i).into()
    }

    /// Interleaved `3n` coordinate vector.
    pub fn flat(&self) -> DVector<f64> {
        DVector::from_column_slice(self.vertices.as_slice())
    }
}

/// Decomposed shape: identity part plus expression offset.
///
/// The expressive shape is `identity + expression_offset` elementwise; both
/// are interleaved `3n` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeState {
    pub identity: DVector<f64>,
    pub expression_offset: DVector<f64>,
}

impl ShapeState {
    pub fn new(identity: DVector<f64>, expression_offset: DVector<f64>) -> Result<Self> {
        if identity.len() != expression_offset.len() {
            return Err(Error::DimensionMismatch {
                context: "shape state",
                expected: identity.len(),
                actual: expression_offset.len(),
            });
        }
        Ok(Self {
            identity,
            expression_offset,
        })
    }

    /// A neutral state at the given identity shape (zero expression offset).
    pub fn neutral(identity: DVector<f64>) -> Self {
        let zeros = DVector::zeros(identity.len());
        Self {
            identity,
            expression_offset: zeros,
        }
    }
}

/// Static data shared by every shape of one model: the mean neutral frontal
/// shape, the frontal 2D landmark template, the landmark-vertex map and the
/// mesh connectivity used for normals.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    mean_pen_shape: DVector<f64>,
    mean_landmarks_2d: DVector<f64>,
    landmark_indices: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
    faces: Vec<[usize; 3]>,
}

impl ShapePrior {
    /// Validates and builds a prior.
    ///
    /// `faces` may be empty; normals then fall back to the neighbor-fan rule
    /// over the adjacency lists (whose per-vertex order defines orientation).
    pub fn new(
        mean_pen_shape: DVector<f64>,
        mean_landmarks_2d: DVector<f64>,
        landmark_indices: Vec<usize>,
        adjacency: Vec<Vec<usize>>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self> {
        if !mean_pen_shape.len().is_multiple_of(3) || mean_pen_shape.is_empty() {
            return Err(Error::InvalidPrior(format!(
                "mean shape length {} is not a positive multiple of 3",
                mean_pen_shape.len()
            )));
        }
        let n = mean_pen_shape.len() / 3;
        if !mean_landmarks_2d.len().is_multiple_of(2) || mean_landmarks_2d.is_empty() {
            return Err(Error::InvalidPrior(format!(
                "mean landmark template length {} is not a positive multiple of 2",
                mean_landmarks_2d.len()
            )));
        }
        let l = mean_landmarks_2d.len() / 2;
        if landmark_indices.len() != l {
            return Err(Error::InvalidPrior(format!(
                "{} landmark indices but a template for {} landmarks",
                landmark_indices.len(),
                l
            )));
        }
        let mut seen = vec![false; n];
        for &idx in &landmark_indices {
            if idx >= n {
                return Err(Error::InvalidPrior(format!(
                    "landmark vertex index {idx} out of range (n = {n})"
                )));
            }
            if seen[idx] {
                return Err(Error::InvalidPrior(format!(
                    "duplicate landmark vertex index {idx}"
                )));
            }
            seen[idx] = true;
        }
        if adjacency.len() != n {
            return Err(Error::InvalidPrior(format!(
                "adjacency has {} entries for {} vertices",
                adjacency.len(),
                n
            )));
        }
        for (v, nbrs) in adjacency.iter().enumerate() {
            for &u in nbrs {
                if u >= n {
                    return Err(Error::InvalidPrior(format!(
                        "adjacency of vertex {v} references vertex {u} (n = {n})"
                    )));
                }
                if !adjacency[u].contains(&v) {
                    return Err(Error::InvalidPrior(format!(
                        "adjacency not symmetric: {v} -> {u} but not {u} -> {v}"
                    )));
                }
            }
        }
        for &idx in &landmark_indices {
            if adjacency[idx].len() < 2 {
                return Err(Error::InvalidPrior(format!(
                    "landmark vertex {idx} has fewer than 2 neighbors"
                )));
            }
        }
        for f in &faces {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidPrior(format!(
                    "face {f:?} references a vertex out of range (n = {n})"
                )));
            }
        }
        Ok(Self {
            mean_pen_shape,
            mean_landmarks_2d,
            landmark_indices,
            adjacency,
            faces,
        })
    }

    /// Derives the adjacency lists from triangle faces and builds the prior.
    pub fn from_faces(
        mean_pen_shape: DVector<f64>,
        mean_landmarks_2d: DVector<f64>,
        landmark_indices: Vec<usize>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self> {
        let n = mean_pen_shape.len() / 3;
        Self::new(
            mean_pen_shape,
            mean_landmarks_2d,
            landmark_indices,
            adjacency_from_faces(n, &faces),
            faces,
        )
    }

    pub fn n(&self) -> usize {
        self.mean_pen_shape.len() / 3
    }

    pub fn l(&self) -> usize {
        self.landmark_indices.len()
    }

    pub fn mean_pen_shape(&self) -> &DVector<f64> {
        &self.mean_pen_shape
    }

    pub fn mean_shape3d(&self) -> Shape3D {
        Shape3D::from_flat(&self.mean_pen_shape).expect("validated at construction")
    }

    /// Frontal neutral landmark template, interleaved `(u, v, ...)` pixels.
    pub fn mean_landmarks_2d(&self) -> &DVector<f64> {
        &self.mean_landmarks_2d
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }
}

/// Builds symmetric neighbor lists from triangle faces. Neighbor order
/// follows first appearance while walking the face list.
pub fn adjacency_from_faces(n: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut adjacency = vec![Vec::new(); n];
    let push = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| {
        if a < n && b < n && !adj[a].contains(&b) {
            adj[a].push(b);
        }
    };
    for f in faces {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            push(a, b, &mut adjacency);
            push(b, a, &mut adjacency);
        }
    }
    adjacency
}

/// Sums identity and expression offset into the expressive shape.
pub fn compose_shape(state: &ShapeState) -> Result<Shape3D> {
    if state.identity.len() != state.expression_offset.len() {
        return Err(Error::DimensionMismatch {
            context: "compose_shape",
            expected: state.identity.len(),
            actual: state.expression_offset.len(),
        });
    }
    Shape3D::from_flat(&(&state.identity + &state.expression_offset))
}

/// Extracts the expression component of a scan as a standalone shape.
///
/// Returns `full - pen + mean`: the mean face deformed by the scan's
/// expression, the form expression targets are trained in.
pub fn decompose_expression(full: &Shape3D, pen: &Shape3D, mean: &Shape3D) -> Result<Shape3D> {
    if full.n() != pen.n() || full.n() != mean.n() {
        return Err(Error::DimensionMismatch {
            context: "decompose_expression",
            expected: full.n(),
            actual: pen.n().max(mean.n()).min(pen.n().min(mean.n())),
        });
    }
    Shape3D::new(full.vertices() - pen.vertices() + mean.vertices())
}

/// Selects the landmark columns of a shape, in landmark-index order.
pub fn landmark_subshape(shape: &Shape3D, prior: &ShapePrior) -> Result<Matrix3xX<f64>> {
    landmark_columns(shape, prior.landmark_indices())
}

/// Selects arbitrary columns of a shape, in the given order.
pub fn landmark_columns(shape: &Shape3D, indices: &[usize]) -> Result<Matrix3xX<f64>> {
    let n = shape.n();
    let mut out = Matrix3xX::zeros(indices.len());
    for (k, &idx) in indices.iter().enumerate() {
        if idx >= n {
            return Err(Error::InvalidPrior(format!(
                "landmark vertex index {idx} out of range (n = {n})"
            )));
        }
        out.set_column(k, &shape.vertices().column(idx));
    }
    Ok(out)
}

/// Per-vertex unit normals plus the list of vertices whose neighborhood was
/// degenerate (those get the `+z` fallback).
#[derive(Debug, Clone)]
pub struct VertexNormals {
    pub directions: Matrix3xX<f64>,
    pub degenerate: Vec<usize>,
}

/// Computes unit vertex normals.
///
/// With triangle faces available, each vertex normal is the normalized sum of
/// incident face cross products (area weighting falls out of the unnormalized
/// cross product). Without faces, consecutive pairs in the vertex's adjacency
/// list are treated as a fan; list order defines orientation.
pub fn vertex_normals(shape: &Shape3D, prior: &ShapePrior) -> Result<VertexNormals> {
    if shape.n() != prior.n() {
        return Err(Error::DimensionMismatch {
            context: "vertex_normals",
            expected: prior.n(),
            actual: shape.n(),
        });
    }
    let n = shape.n();
    let mut sums = vec![Vector3::zeros(); n];
    accumulate_normal_sums(shape, prior, (0..n).collect::<Vec<_>>().as_slice(), &mut sums);
    let mut directions = Matrix3xX::zeros(n);
    let mut degenerate = Vec::new();
    for (i, s) in sums.iter().enumerate() {
        directions.set_column(i, &finish_normal(s, i, &mut degenerate));
    }
    Ok(VertexNormals {
        directions,
        degenerate,
    })
}

/// Normals at the landmark vertices only. Face-based accumulation still walks
/// every face once; the fan fallback touches only the landmark one-rings.
pub(crate) fn landmark_normals(shape: &Shape3D, prior: &ShapePrior) -> Result<Matrix3xX<f64>> {
    if shape.n() != prior.n() {
        return Err(Error::DimensionMismatch {
            context: "landmark_normals",
            expected: prior.n(),
            actual: shape.n(),
        });
    }
    let mut sums = vec![Vector3::zeros(); shape.n()];
    accumulate_normal_sums(shape, prior, prior.landmark_indices(), &mut sums);
    let mut out = Matrix3xX::zeros(prior.l());
    let mut degenerate = Vec::new();
    for (k, &idx) in prior.landmark_indices().iter().enumerate() {
        out.set_column(k, &finish_normal(&sums[idx], idx, &mut degenerate));
    }
    Ok(out)
}

fn accumulate_normal_sums(
    shape: &Shape3D,
    prior: &ShapePrior,
    wanted: &[usize],
    sums: &mut [Vector3<f64>],
) {
    if !prior.faces().is_empty() {
        for f in prior.faces() {
            let a = shape.vertex(f[0]);
            let b = shape.vertex(f[1]);
            let c = shape.vertex(f[2]);
            let cross = (b - a).cross(&(c - a));
            sums[f[0]] += cross;
            sums[f[1]] += cross;
            sums[f[2]] += cross;
        }
        return;
    }
    for &v in wanted {
        let nbrs = &prior.adjacency()[v];
        if nbrs.is_empty() {
            continue;
        }
        let center = shape.vertex(v);
        let pairs = if nbrs.len() >= 3 { nbrs.len() } else { nbrs.len() - 1 };
        for k in 0..pairs {
            let a = shape.vertex(nbrs[k]) - center;
            let b = shape.vertex(nbrs[(k + 1) % nbrs.len()]) - center;
            sums[v] += a.cross(&b);
        }
    }
}

fn finish_normal(sum: &Vector3<f64>, vertex: usize, degenerate: &mut Vec<usize>) -> Vector3<f64> {
    let norm = sum.norm();
    if norm <= 1e-12 {
        degenerate.push(vertex);
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        sum / norm
    }
}

/// Elementwise arithmetic mean of a nonempty list of shapes.
pub fn mean_shape(shapes: &[Shape3D]) -> Result<Shape3D> {
    let first = shapes.first().ok_or(Error::EmptyInput("shape list"))?;
    let n = first.n();
    let mut acc = Matrix3xX::zeros(n);
    for s in shapes {
        if s.n() != n {
            return Err(Error::DimensionMismatch {
                context: "mean_shape",
                expected: n,
                actual: s.n(),
            });
        }
        acc += s.vertices();
    }
    Shape3D::new(acc / shapes.len() as f64)
}
