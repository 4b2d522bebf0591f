//! Cascaded coupled regressors: training and inference.
//!
//! One cascade stage is a triple of actions. A landmark regressor moves the
//! current 2D landmarks from texture evidence, a shape regressor converts
//! that landmark adjustment into a 3D shape adjustment (identity and
//! expression parts jointly), and a freshly fitted 3D-to-2D mapping
//! reprojects the updated shape to refine the landmarks and their
//! visibility. Training estimates both regressors stage by stage against the
//! residuals the previous stages left behind, mirroring the exact sequence
//! inference will run.
//!
//! Internally the 3D state of a sample is the stacked `6n` vector
//! `[identity shape; expression shape]` where the expression shape is the
//! mean face plus the expression offset. The expressive face shown in the
//! image is `identity + expression shape - mean`.

use nalgebra::{DMatrix, DVector, Matrix2xX};
use rayon::prelude::*;

use crate::camera::{
    fit_mapping, init_landmarks, project, visibility_mask, Bbox, LandmarkSet2D, MappingMatrix,
};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, GrayImage, Heatmap, SiftExtractor};
use crate::lstsq::{lstsq_min_norm, resolve_lambda, Ridge};
use crate::shape::{landmark_subshape, Shape3D, ShapePrior, ShapeState};

/// Linear landmark regressor weights, `2l x (descriptor_dim * l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkStage {
    pub weights: DMatrix<f64>,
}

impl LandmarkStage {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark stage weights"));
        }
        Ok(Self { weights })
    }
}

/// Linear shape regressor weights, `6n x 2l`. The top `3n` rows adjust the
/// identity shape, the bottom `3n` rows the expression shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeStage {
    pub weights: DMatrix<f64>,
}

impl ShapeStage {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shape stage weights"));
        }
        Ok(Self { weights })
    }
}

/// Solves the landmark regression `argmin_W sum ||dU*_i - W h_i||^2 +
/// lambda ||W||_F^2` for features `h` of size `d x N` and targets `2l x N`.
///
/// Without a ridge the minimum-norm minimizer is returned, so rank-deficient
/// feature ensembles are fine.
pub fn train_landmark_stage(
    features: &DMatrix<f64>,
    target_deltas: &DMatrix<f64>,
    ridge: Ridge,
) -> Result<LandmarkStage> {
    let n = features.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("training features"));
    }
    if target_deltas.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "landmark regression samples",
            expected: n,
            actual: target_deltas.ncols(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features"));
    }
    if target_deltas.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("landmark regression targets"));
    }
    let d = features.nrows();

    let lambda = match ridge {
        Ridge::Exact | Ridge::Lambda(0.0) => 0.0,
        Ridge::Lambda(v) => v,
        Ridge::TraceScaled(f) => {
            // trace(H H^T) is the squared Frobenius norm; no need for the Gram yet.
            let trace: f64 = features.iter().map(|v| v * v).sum();
            resolve_lambda(Ridge::TraceScaled(f), trace, d)
        }
    };
    if lambda == 0.0 {
        let (x, _rank) = lstsq_min_norm(&features.transpose(), &target_deltas.transpose(), 1e-12);
        return LandmarkStage::new(x.transpose());
    }

    let mut gram = features * features.transpose();
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let cross = features * target_deltas.transpose(); // d x 2l
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularGram("ridge landmark gram not positive definite".into()))?;
    LandmarkStage::new(chol.solve(&cross).transpose())
}

/// Solves the shape regression `W = dS dU^T (dU dU^T + lambda I)^{-1}` for
/// landmark adjustments `2l x N` and shape adjustments `6n x N`.
///
/// With no ridge this is the verbatim closed form, which requires `N > 2l`
/// and a full-rank adjustment ensemble; violations are reported as errors.
pub fn train_shape_stage(
    delta_u: &DMatrix<f64>,
    delta_s: &DMatrix<f64>,
    ridge: Ridge,
) -> Result<ShapeStage> {
    let n = delta_u.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("landmark adjustments"));
    }
    if delta_s.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "shape regression samples",
            expected: n,
            actual: delta_s.ncols(),
        });
    }
    if delta_u.iter().any(|v| !v.is_finite()) || delta_s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("shape regression input"));
    }
    let two_l = delta_u.nrows();
    let mut gram = delta_u * delta_u.transpose();
    let lambda = resolve_lambda(ridge, gram.trace(), two_l);
    let cross = delta_s * delta_u.transpose(); // 6n x 2l

    if lambda == 0.0 {
        if n <= two_l {
            return Err(Error::TooFewSamples { n, two_l });
        }
        let svd = gram.svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > smax * 1e-12 && s > 0.0)
            .count();
        if rank < two_l {
            return Err(Error::SingularGram(format!(
                "adjustment gram has rank {rank} < 2l = {two_l}"
            )));
        }
        let y = svd
            .solve(&cross.transpose(), 0.0)
            .map_err(|e| Error::SingularGram(e.to_string()))?;
        return ShapeStage::new(y.transpose());
    }

    for i in 0..two_l {
        gram[(i, i)] += lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularGram("ridge shape gram not positive definite".into()))?;
    ShapeStage::new(chol.solve(&cross.transpose()).transpose())
}

/* ---------------------------------------------------------------- */

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained cascade: K stage pairs plus everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub stages: Vec<(LandmarkStage, ShapeStage)>,
    pub prior: ShapePrior,
    pub feature_config: FeatureConfig,
    /// Ridge policy scalar as stored on disk (0 = exact, else trace-scaled).
    pub ridge: f64,
    pub format_version: u32,
}

impl CascadeModel {
    pub fn new(
        stages: Vec<(LandmarkStage, ShapeStage)>,
        prior: ShapePrior,
        feature_config: FeatureConfig,
        ridge: f64,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::EmptyInput("cascade stages"));
        }
        feature_config.validate()?;
        let l = prior.l();
        let n = prior.n();
        let d = feature_config.descriptor_dim();
        for (i, (lm, sh)) in stages.iter().enumerate() {
            if lm.weights.nrows() != 2 * l || lm.weights.ncols() != d * l {
                return Err(Error::DimensionMismatch {
                    context: "landmark stage weights",
                    expected: 2 * l * d * l,
                    actual: lm.weights.nrows() * lm.weights.ncols(),
                }
                .at_stage(i + 1));
            }
            if sh.weights.nrows() != 6 * n || sh.weights.ncols() != 2 * l {
                return Err(Error::DimensionMismatch {
                    context: "shape stage weights",
                    expected: 6 * n * 2 * l,
                    actual: sh.weights.nrows() * sh.weights.ncols(),
                }
                .at_stage(i + 1));
            }
        }
        Ok(Self {
            stages,
            prior,
            feature_config,
            ridge,
            format_version: MODEL_FORMAT_VERSION,
        })
    }

    pub fn k(&self) -> usize {
        self.stages.len()
    }

    /// Runs the cascade on one face. Deterministic: identical inputs produce
    /// bit-identical results.
    pub fn fit(&self, image: &GrayImage, bbox: &Bbox) -> Result<FitResult> {
        let extractor = SiftExtractor::new(self.feature_config)?;
        self.fit_with_extractor(image, bbox, &extractor)
    }

    /// Same as [`fit`](Self::fit) with a caller-supplied feature extractor.
    pub fn fit_with_extractor(
        &self,
        image: &GrayImage,
        bbox: &Bbox,
        extractor: &dyn FeatureExtractor,
    ) -> Result<FitResult> {
        let steps: Vec<(LinearLandmarkRegressor, &ShapeStage)> = self
            .stages
            .iter()
            .map(|(lm, sh)| (LinearLandmarkRegressor { stage: lm, extractor }, sh))
            .collect();
        let dyn_steps: Vec<(&dyn LandmarkRegressor, &dyn ShapeRegressor)> = steps
            .iter()
            .map(|(lm, sh)| (lm as &dyn LandmarkRegressor, *sh as &dyn ShapeRegressor))
            .collect();
        run_cascade(image, bbox, &self.prior, &dyn_steps)
    }
}

/// Per-iteration scalars recorded during a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub landmark_update_norm: f64,
    pub shape_update_norm: f64,
    pub expression_offset_norm: f64,
}

/// Output of a cascade run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub landmarks: LandmarkSet2D,
    pub pen_shape: Shape3D,
    pub expressive_shape: Shape3D,
    pub mapping: MappingMatrix,
    pub per_iteration_trace: Vec<IterationTrace>,
    /// Set when a mid-cascade mapping fit failed and a previous mapping was
    /// reused.
    pub degraded: bool,
}

impl FitResult {
    pub fn expression_offset(&self) -> DVector<f64> {
        self.expressive_shape.flat() - self.pen_shape.flat()
    }

    /// The reconstructed state in decomposed form.
    pub fn state(&self) -> ShapeState {
        ShapeState {
            identity: self.pen_shape.flat(),
            expression_offset: self.expression_offset(),
        }
    }
}

/// Landmark regressor interface: predicts a flattened `2l` landmark
/// adjustment from the image and the current landmark estimate.
///
/// The heatmap is only built for regressors that ask for it, and never on the
/// initial iteration.
pub trait LandmarkRegressor {
    fn wants_heatmap(&self) -> bool {
        false
    }

    fn predict_adjustment(
        &self,
        image: &GrayImage,
        landmarks: &LandmarkSet2D,
        bbox: &Bbox,
        heatmap: Option<&Heatmap>,
    ) -> Result<DVector<f64>>;
}

/// Shape regressor interface: converts a `2l` landmark adjustment into a
/// stacked `6n` shape adjustment.
pub trait ShapeRegressor {
    fn predict_adjustment(&self, landmark_adjustment: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Linear landmark stage bound to a feature extractor.
pub struct LinearLandmarkRegressor<'a> {
    pub stage: &'a LandmarkStage,
    pub extractor: &'a dyn FeatureExtractor,
}

impl LandmarkRegressor for LinearLandmarkRegressor<'_> {
    fn predict_adjustment(
        &self,
        image: &GrayImage,
        landmarks: &LandmarkSet2D,
        bbox: &Bbox,
        _heatmap: Option<&Heatmap>,
    ) -> Result<DVector<f64>> {
        let h = self.extractor.extract(image, landmarks, bbox);
        if h.len() != self.stage.weights.ncols() {
            return Err(Error::DimensionMismatch {
                context: "landmark regressor features",
                expected: self.stage.weights.ncols(),
                actual: h.len(),
            });
        }
        Ok(&self.stage.weights * h)
    }
}

impl ShapeRegressor for ShapeStage {
    fn predict_adjustment(&self, landmark_adjustment: &DVector<f64>) -> Result<DVector<f64>> {
        if landmark_adjustment.len() != self.weights.ncols() {
            return Err(Error::DimensionMismatch {
                context: "shape regressor input",
                expected: self.weights.ncols(),
                actual: landmark_adjustment.len(),
            });
        }
        Ok(&self.weights * landmark_adjustment)
    }
}

/// Stacked `[identity; expression]` initial state.
fn initial_state(prior: &ShapePrior) -> DVector<f64> {
    let mean = prior.mean_pen_shape();
    let mut s = DVector::zeros(2 * mean.len());
    s.rows_mut(0, mean.len()).copy_from(mean);
    s.rows_mut(mean.len(), mean.len()).copy_from(mean);
    s
}

fn expressive_from_state(state: &DVector<f64>, prior: &ShapePrior) -> Result<Shape3D> {
    let len3n = prior.mean_pen_shape().len();
    let expressive =
        state.rows(0, len3n) + state.rows(len3n, len3n) - prior.mean_pen_shape();
    Shape3D::from_flat(&expressive.clone_owned())
}

fn pen_from_state(state: &DVector<f64>, prior: &ShapePrior) -> Result<Shape3D> {
    let len3n = prior.mean_pen_shape().len();
    Shape3D::from_flat(&state.rows(0, len3n).clone_owned())
}

fn landmarks_from_flat(flat: &DVector<f64>, visible: &[bool]) -> Result<LandmarkSet2D> {
    LandmarkSet2D::from_flat(flat, visible.to_vec())
}

/// Generic cascade runner over regressor interfaces. This is the pluggable
/// surface for non-linear regressor implementations.
pub fn run_cascade(
    image: &GrayImage,
    bbox: &Bbox,
    prior: &ShapePrior,
    steps: &[(&dyn LandmarkRegressor, &dyn ShapeRegressor)],
) -> Result<FitResult> {
    if steps.is_empty() {
        return Err(Error::EmptyInput("cascade stages"));
    }
    let l = prior.l();
    let len3n = prior.mean_pen_shape().len();

    let mut u = init_landmarks(prior, bbox)?.flat();
    let mut visible = vec![true; l];
    let mut state = initial_state(prior);
    let mut mapping: Option<MappingMatrix> = None;
    let mut degraded = false;
    let mut trace = Vec::with_capacity(steps.len());

    for (k, (landmark_reg, shape_reg)) in steps.iter().enumerate() {
        let current = landmarks_from_flat(&u, &visible)?;
        let heat = if landmark_reg.wants_heatmap() && k > 0 {
            Some(crate::features::heatmap(&current, image.width(), image.height())?)
        } else {
            None
        };
        let du = landmark_reg
            .predict_adjustment(image, &current, bbox, heat.as_ref())
            .map_err(|e| e.at_stage(k + 1))?;
        if du.len() != 2 * l {
            return Err(Error::DimensionMismatch {
                context: "landmark adjustment",
                expected: 2 * l,
                actual: du.len(),
            }
            .at_stage(k + 1));
        }
        let u_hat = &u + &du;

        let ds = shape_reg
            .predict_adjustment(&du)
            .map_err(|e| e.at_stage(k + 1))?;
        if ds.len() != 2 * len3n {
            return Err(Error::DimensionMismatch {
                context: "shape adjustment",
                expected: 2 * len3n,
                actual: ds.len(),
            }
            .at_stage(k + 1));
        }
        state += &ds;

        let expressive = expressive_from_state(&state, prior)?;
        let subshape = landmark_subshape(&expressive, prior)?;
        let refit = fit_mapping(&Matrix2xX::from_column_slice(u_hat.as_slice()), &subshape)
            .and_then(|m| visibility_mask(&m, &expressive, prior).map(|vis| (m, vis)));
        match refit {
            Ok((m, vis)) => {
                u = DVector::from_column_slice(project(&m, &subshape).as_slice());
                visible = vis;
                mapping = Some(m);
            }
            Err(Error::SingularMappingFit { .. }) | Err(Error::InvalidMapping(_)) => {
                match &mapping {
                    Some(m) => {
                        // Keep the previous mapping; reproject the new shape.
                        degraded = true;
                        u = DVector::from_column_slice(project(m, &subshape).as_slice());
                        visible = visibility_mask(m, &expressive, prior)?;
                    }
                    None => {
                        return Err(Error::SingularMappingFit { rank: 0 }.at_stage(k + 1));
                    }
                }
            }
            Err(e) => return Err(e.at_stage(k + 1)),
        }

        let offset_norm = (state.rows(len3n, len3n) - prior.mean_pen_shape()).norm();
        trace.push(IterationTrace {
            landmark_update_norm: du.norm(),
            shape_update_norm: ds.norm(),
            expression_offset_norm: offset_norm,
        });
    }

    let mapping = mapping.expect("set on every non-error path");
    Ok(FitResult {
        landmarks: landmarks_from_flat(&u, &visible)?,
        pen_shape: pen_from_state(&state, prior)?,
        expressive_shape: expressive_from_state(&state, prior)?,
        mapping,
        per_iteration_trace: trace,
        degraded,
    })
}

/* ---------------------------------------------------------------- */

/// One training sample: an image, its face box and ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: GrayImage,
    pub bbox: Bbox,
    /// All landmarks annotated, invisible ones at anatomically correct
    /// positions, flagged by `visible`.
    pub target_landmarks: LandmarkSet2D,
    pub target_state: ShapeState,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Number of cascade stages.
    pub stages: usize,
    pub ridge: Ridge,
    pub feature_config: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            ridge: Ridge::TraceScaled(1e-3),
            feature_config: FeatureConfig::default(),
        }
    }
}

/// Training-set errors after one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageStats {
    /// Mean normalized landmark error over the set (visible ground-truth
    /// landmarks, normalized by the bbox side).
    pub nme: f64,
    /// Mean per-vertex distance of the stacked shape state to its target, mm.
    pub shape_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub initial: StageStats,
    pub per_stage: Vec<StageStats>,
}

/// Trains a cascade with the default SIFT features.
pub fn train_cascade(
    samples: &[TrainSample],
    prior: &ShapePrior,
    config: &TrainConfig,
) -> Result<(CascadeModel, TrainTrace)> {
    let extractor = SiftExtractor::new(config.feature_config)?;
    train_cascade_with_extractor(samples, prior, &extractor, config)
}

/// Trains a cascade with a caller-supplied feature extractor.
///
/// Feature extraction is data-parallel with per-sample output slots, so the
/// result is bit-identical for any worker count.
pub fn train_cascade_with_extractor(
    samples: &[TrainSample],
    prior: &ShapePrior,
    extractor: &dyn FeatureExtractor,
    config: &TrainConfig,
) -> Result<(CascadeModel, TrainTrace)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if config.stages == 0 {
        return Err(Error::EmptyInput("cascade stages"));
    }
    let l = prior.l();
    let n = prior.n();
    let len3n = 3 * n;
    let d = extractor.descriptor_dim() * l;
    let count = samples.len();

    // Flattened targets.
    let mut target_u = Vec::with_capacity(count);
    let mut target_s = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        if s.target_landmarks.len() != l {
            return Err(Error::DimensionMismatch {
                context: "sample landmark count",
                expected: l,
                actual: s.target_landmarks.len(),
            }
            .at_stage(i + 1));
        }
        if s.target_state.identity.len() != len3n {
            return Err(Error::DimensionMismatch {
                context: "sample shape size",
                expected: len3n,
                actual: s.target_state.identity.len(),
            });
        }
        target_u.push(s.target_landmarks.flat());
        let mut stacked = DVector::zeros(2 * len3n);
        stacked.rows_mut(0, len3n).copy_from(&s.target_state.identity);
        stacked
            .rows_mut(len3n, len3n)
            .copy_from(&(prior.mean_pen_shape() + &s.target_state.expression_offset));
        target_s.push(stacked);
    }

    // Mutable per-sample state.
    let mut u_cur: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| init_landmarks(prior, &s.bbox).map(|lm| lm.flat()))
        .collect::<Result<_>>()?;
    let mut vis_cur: Vec<Vec<bool>> = vec![vec![true; l]; count];
    let mut s_cur: Vec<DVector<f64>> = vec![initial_state(prior); count];
    let mut m_cur: Vec<Option<MappingMatrix>> = vec![None; count];

    let stats = |u_cur: &[DVector<f64>], s_cur: &[DVector<f64>]| -> StageStats {
        let mut nme_sum = 0.0;
        let mut mae_sum = 0.0;
        for i in 0..count {
            let side = samples[i].bbox.side();
            let visible = &samples[i].target_landmarks.visible;
            let mut err = 0.0;
            let mut nv = 0usize;
            for j in 0..l {
                if !visible[j] {
                    continue;
                }
                let du = u_cur[i][2 * j] - target_u[i][2 * j];
                let dv = u_cur[i][2 * j + 1] - target_u[i][2 * j + 1];
                err += (du * du + dv * dv).sqrt();
                nv += 1;
            }
            if nv > 0 {
                nme_sum += err / (nv as f64 * side);
            }
            let mut dist = 0.0;
            for v in 0..2 * n {
                let dx = s_cur[i][3 * v] - target_s[i][3 * v];
                let dy = s_cur[i][3 * v + 1] - target_s[i][3 * v + 1];
                let dz = s_cur[i][3 * v + 2] - target_s[i][3 * v + 2];
                dist += (dx * dx + dy * dy + dz * dz).sqrt();
            }
            mae_sum += dist / (2 * n) as f64;
        }
        StageStats {
            nme: nme_sum / count as f64,
            shape_mae: mae_sum / count as f64,
        }
    };

    let initial = stats(&u_cur, &s_cur);
    let mut per_stage = Vec::with_capacity(config.stages);
    let mut stages = Vec::with_capacity(config.stages);

    for k in 1..=config.stages {
        // Features at the current landmark estimates, one column per sample.
        let mut features = DMatrix::<f64>::zeros(d, count);
        {
            let u_ref = &u_cur;
            let vis_ref = &vis_cur;
            features
                .as_mut_slice()
                .par_chunks_mut(d)
                .enumerate()
                .for_each(|(i, col)| {
                    let lms = landmarks_from_flat(&u_ref[i], &vis_ref[i])
                        .expect("state landmarks stay finite");
                    let h = extractor.extract(&samples[i].image, &lms, &samples[i].bbox);
                    col.copy_from_slice(h.as_slice());
                });
        }

        let mut residual_u = DMatrix::<f64>::zeros(2 * l, count);
        for i in 0..count {
            residual_u.column_mut(i).copy_from(&(&target_u[i] - &u_cur[i]));
        }
        let landmark_stage = train_landmark_stage(&features, &residual_u, config.ridge)
            .map_err(|e| e.at_stage(k))?;

        // Predicted adjustments drive both the update and the shape stage.
        let predicted_du = &landmark_stage.weights * &features; // 2l x N
        let mut residual_s = DMatrix::<f64>::zeros(2 * len3n, count);
        for i in 0..count {
            residual_s.column_mut(i).copy_from(&(&target_s[i] - &s_cur[i]));
        }
        let shape_stage =
            train_shape_stage(&predicted_du, &residual_s, config.ridge).map_err(|e| e.at_stage(k))?;
        let predicted_ds = &shape_stage.weights * &predicted_du; // 6n x N

        for i in 0..count {
            let u_hat = &u_cur[i] + predicted_du.column(i);
            s_cur[i] += predicted_ds.column(i);
            let expressive = expressive_from_state(&s_cur[i], prior)?;
            let subshape = landmark_subshape(&expressive, prior)?;
            let refit = fit_mapping(
                &Matrix2xX::from_column_slice(u_hat.as_slice()),
                &subshape,
            )
            .and_then(|m| visibility_mask(&m, &expressive, prior).map(|vis| (m, vis)));
            match refit {
                Ok((m, vis)) => {
                    u_cur[i] = DVector::from_column_slice(project(&m, &subshape).as_slice());
                    vis_cur[i] = vis;
                    m_cur[i] = Some(m);
                }
                Err(Error::SingularMappingFit { .. }) | Err(Error::InvalidMapping(_)) => {
                    if let Some(m) = &m_cur[i] {
                        u_cur[i] = DVector::from_column_slice(project(m, &subshape).as_slice());
                        vis_cur[i] = visibility_mask(m, &expressive, prior)?;
                    } else {
                        u_cur[i] = u_hat;
                    }
                }
                Err(e) => return Err(e.at_stage(k)),
            }
        }

        per_stage.push(stats(&u_cur, &s_cur));
        stages.push((landmark_stage, shape_stage));
    }

    let model = CascadeModel::new(
        stages,
        prior.clone(),
        config.feature_config,
        config.ridge.model_scalar(),
    )?;
    Ok((model, TrainTrace { initial, per_stage }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn landmark_stage_recovers_generating_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (two_l, d, n) = (8, 128, 300);
        let truth = random_matrix(&mut rng, two_l, d);
        let h = random_matrix(&mut rng, d, n);
        let targets = &truth * &h;
        let stage = train_landmark_stage(&h, &targets, Ridge::Exact).unwrap();
        assert!((stage.weights - truth).amax() < 1e-6);
    }

    #[test]
    fn landmark_stage_zero_targets_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let h = random_matrix(&mut rng, 32, 20);
        let targets = DMatrix::zeros(4, 20);
        let stage = train_landmark_stage(&h, &targets, Ridge::Lambda(0.5)).unwrap();
        assert!(stage.weights.amax() < 1e-14);
    }

    #[test]
    fn landmark_stage_single_sample_matches_rank_one_ridge_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let h = random_matrix(&mut rng, 16, 1);
        let t = random_matrix(&mut rng, 4, 1);
        let lambda = 0.7;
        let stage = train_landmark_stage(&h, &t, Ridge::Lambda(lambda)).unwrap();
        // Analytic solution: W = t h^T / (h^T h + lambda).
        let oracle = &t * h.transpose() / (h.norm_squared() + lambda);
        assert!((stage.weights - oracle).amax() < 1e-12);
    }

    #[test]
    fn landmark_stage_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for _ in 0..5 {
            let (two_l, d, n) = (6, 24, 80);
            let h = random_matrix(&mut rng, d, n);
            let t = random_matrix(&mut rng, two_l, n);
            let stage = train_landmark_stage(&h, &t, Ridge::Exact).unwrap();
            // Independent oracle: explicit normal equations.
            let gram = &h * h.transpose();
            let oracle = &t * h.transpose() * gram.try_inverse().unwrap();
            let rel = (&stage.weights - &oracle).norm() / oracle.norm();
            assert!(rel < 1e-8, "relative error {rel}");
        }
    }

    #[test]
    fn shape_stage_recovers_generating_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (two_l, six_n) = (10, 30);
        let n = 2 * two_l;
        let truth = random_matrix(&mut rng, six_n, two_l);
        let du = random_matrix(&mut rng, two_l, n);
        let ds = &truth * &du;
        let stage = train_shape_stage(&du, &ds, Ridge::Exact).unwrap();
        assert!((stage.weights - truth).amax() < 1e-6);
    }

    #[test]
    fn shape_stage_orthonormal_rows_reduce_to_cross_product() {
        let (two_l, n) = (5, 12);
        let mut du = DMatrix::zeros(two_l, n);
        for i in 0..two_l {
            du[(i, i)] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let ds = random_matrix(&mut rng, 18, n);
        let stage = train_shape_stage(&du, &ds, Ridge::Exact).unwrap();
        let expect = &ds * du.transpose();
        assert!((stage.weights - expect).amax() < 1e-10);
    }

    #[test]
    fn shape_stage_errors_on_too_few_or_degenerate_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let two_l = 6;
        // N == 2l violates the sample-count precondition.
        let du = random_matrix(&mut rng, two_l, two_l);
        let ds = random_matrix(&mut rng, 12, two_l);
        assert!(matches!(
            train_shape_stage(&du, &ds, Ridge::Exact),
            Err(Error::TooFewSamples { .. })
        ));
        // Enough samples but a rank-deficient ensemble.
        let rank1 = random_matrix(&mut rng, two_l, 1) * random_matrix(&mut rng, 1, 20);
        let ds = random_matrix(&mut rng, 12, 20);
        assert!(matches!(
            train_shape_stage(&rank1, &ds, Ridge::Exact),
            Err(Error::SingularGram(_))
        ));
        // A ridge makes the same ensemble usable.
        assert!(train_shape_stage(&rank1, &ds, Ridge::TraceScaled(1e-3)).is_ok());
    }

    #[test]
    fn shape_stage_matches_verbatim_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        for _ in 0..20 {
            let two_l = rng.gen_range(4..12);
            let n = two_l * 2 + rng.gen_range(1..10);
            let du = random_matrix(&mut rng, two_l, n);
            let ds = random_matrix(&mut rng, 21, n);
            let stage = train_shape_stage(&du, &ds, Ridge::Exact).unwrap();
            // Verbatim formula with an explicit inverse.
            let oracle = &ds * du.transpose() * (&du * du.transpose()).try_inverse().unwrap();
            let rel = (&stage.weights - &oracle).norm() / oracle.norm();
            assert!(rel < 1e-8, "relative error {rel}");
        }
    }

    #[test]
    fn stage_prediction_is_linear_in_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let stage = LandmarkStage::new(random_matrix(&mut rng, 6, 40)).unwrap();
        let h = DVector::from_fn(40, |_, _| rng.gen_range(-1.0..1.0));
        let once = &stage.weights * &h;
        let twice = &stage.weights * (2.0 * &h);
        assert_relative_eq!(twice, 2.0 * once, max_relative = 1e-12);
    }

    #[test]
    fn linear_world_training_reaches_machine_precision() {
        let world = crate::synth::synth_linear_world(
            &crate::synth::LinearWorldDims { n: 20, l: 4, samples: 80 },
            4242,
        )
        .unwrap();
        let config = TrainConfig {
            stages: 3,
            ridge: Ridge::Exact,
            feature_config: FeatureConfig::default(),
        };
        let (model, trace) = train_cascade_with_extractor(
            &world.samples,
            &world.prior,
            &world.extractor,
            &config,
        )
        .unwrap();
        let side = world.samples[0].bbox.side();
        let last = trace.per_stage.last().unwrap();
        assert!(last.nme < 1e-6 * side, "nme {}", last.nme);
        assert!(last.shape_mae < 1e-6, "mae {}", last.shape_mae);

        // Fitting a training sample recovers its ground truth.
        let result = model
            .fit_with_extractor(
                &world.samples[0].image,
                &world.samples[0].bbox,
                &world.extractor,
            )
            .unwrap();
        let err = (result.landmarks.flat() - world.samples[0].target_landmarks.flat()).amax();
        assert!(err < 1e-6, "landmark error {err}");
        let serr = (result.pen_shape.flat() - &world.samples[0].target_state.identity).amax();
        assert!(serr < 1e-6, "shape error {serr}");
    }

    #[test]
    fn duplicated_sample_is_memorized_after_one_stage() {
        let world =
            crate::synth::synth_linear_world(&crate::synth::LinearWorldDims { n: 16, l: 4, samples: 1 }, 7)
                .unwrap();
        let samples: Vec<TrainSample> = (0..40).map(|_| world.samples[0].clone()).collect();
        let config = TrainConfig {
            stages: 1,
            ridge: Ridge::TraceScaled(1e-6),
            feature_config: FeatureConfig::default(),
        };
        let (_, trace) =
            train_cascade_with_extractor(&samples, &world.prior, &world.extractor, &config).unwrap();
        assert!(trace.per_stage[0].nme < 0.01 * trace.initial.nme);
    }

    #[test]
    fn training_is_deterministic_across_worker_counts() {
        let world = crate::synth::synth_linear_world(
            &crate::synth::LinearWorldDims { n: 12, l: 4, samples: 50 },
            99,
        )
        .unwrap();
        let config = TrainConfig {
            stages: 2,
            ridge: Ridge::Exact,
            feature_config: FeatureConfig::default(),
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                train_cascade_with_extractor(&world.samples, &world.prior, &world.extractor, &config)
                    .unwrap()
                    .0
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.stages.len(), b.stages.len());
        for ((la, sa), (lb, sb)) in a.stages.iter().zip(b.stages.iter()) {
            assert_eq!(la.weights, lb.weights);
            assert_eq!(sa.weights, sb.weights);
        }
    }

    #[test]
    fn shape_update_splits_between_identity_and_expression() {
        let world = crate::synth::synth_linear_world(
            &crate::synth::LinearWorldDims { n: 10, l: 4, samples: 60 },
            13,
        )
        .unwrap();
        let config = TrainConfig {
            stages: 1,
            ridge: Ridge::Exact,
            feature_config: FeatureConfig::default(),
        };
        let (model, _) =
            train_cascade_with_extractor(&world.samples, &world.prior, &world.extractor, &config)
                .unwrap();
        let sample = &world.samples[0];
        let result = model
            .fit_with_extractor(&sample.image, &sample.bbox, &world.extractor)
            .unwrap();
        // Replay stage 1 by hand and compare the identity update.
        let init = init_landmarks(&world.prior, &sample.bbox).unwrap();
        let h = world.extractor.extract(&sample.image, &init, &sample.bbox);
        let du = &model.stages[0].0.weights * h;
        let ds = &model.stages[0].1.weights * du;
        let len3n = 3 * world.prior.n();
        let id_update = result.pen_shape.flat() - world.prior.mean_pen_shape();
        assert!((id_update - ds.rows(0, len3n)).amax() < 1e-9);
    }

    #[test]
    fn heatmap_reaches_regressors_only_after_the_initial_stage() {
        struct Probe {
            two_l: usize,
            seen: std::cell::RefCell<Vec<bool>>,
        }
        impl LandmarkRegressor for Probe {
            fn wants_heatmap(&self) -> bool {
                true
            }
            fn predict_adjustment(
                &self,
                _image: &GrayImage,
                _landmarks: &LandmarkSet2D,
                _bbox: &Bbox,
                heatmap: Option<&crate::features::Heatmap>,
            ) -> crate::error::Result<DVector<f64>> {
                self.seen.borrow_mut().push(heatmap.is_some());
                Ok(DVector::zeros(self.two_l))
            }
        }
        struct ZeroShape {
            six_n: usize,
        }
        impl ShapeRegressor for ZeroShape {
            fn predict_adjustment(&self, _du: &DVector<f64>) -> crate::error::Result<DVector<f64>> {
                Ok(DVector::zeros(self.six_n))
            }
        }

        let world = crate::synth::synth_linear_world(
            &crate::synth::LinearWorldDims { n: 10, l: 4, samples: 1 },
            3,
        )
        .unwrap();
        let probe = Probe {
            two_l: 2 * world.prior.l(),
            seen: std::cell::RefCell::new(Vec::new()),
        };
        let zero = ZeroShape {
            six_n: 6 * world.prior.n(),
        };
        let image = GrayImage::from_fn(32, 32, |x, y| ((x + y) % 7) as f64 / 6.0).unwrap();
        let bbox = Bbox::new(0.0, 0.0, 30.0, 30.0).unwrap();
        let steps: Vec<(&dyn LandmarkRegressor, &dyn ShapeRegressor)> =
            vec![(&probe, &zero), (&probe, &zero), (&probe, &zero)];
        run_cascade(&image, &bbox, &world.prior, &steps).unwrap();
        assert_eq!(*probe.seen.borrow(), vec![false, true, true]);
    }

    #[test]
    fn refinement_projects_the_expressive_shape_exactly() {
        let world = crate::synth::synth_linear_world(
            &crate::synth::LinearWorldDims { n: 10, l: 5, samples: 60 },
            17,
        )
        .unwrap();
        let config = TrainConfig {
            stages: 2,
            ridge: Ridge::Exact,
            feature_config: FeatureConfig::default(),
        };
        let (model, _) =
            train_cascade_with_extractor(&world.samples, &world.prior, &world.extractor, &config)
                .unwrap();
        let sample = &world.samples[2];
        let result = model
            .fit_with_extractor(&sample.image, &sample.bbox, &world.extractor)
            .unwrap();
        let sub = landmark_subshape(&result.expressive_shape, &world.prior).unwrap();
        let reproj = project(&result.mapping, &sub);
        assert_eq!(
            reproj.as_slice(),
            result.landmarks.points.as_slice(),
            "refined landmarks are the projection by construction"
        );
        // Trace invariant: the recorded expression offset matches the output.
        let last = result.per_iteration_trace.last().unwrap();
        assert_relative_eq!(
            last.expression_offset_norm,
            result.expression_offset().norm(),
            max_relative = 1e-12
        );
    }
}
