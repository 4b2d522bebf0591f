//! Joint 2D face alignment and 3D face reconstruction from a single image,
//! plus 3D-enhanced recognition scoring.
//!
//! The estimator couples two cascades of linear regressors: one moves 2D
//! landmarks from local texture features, the other converts landmark motion
//! into 3D shape motion over a summation shape model (mean + identity +
//! expression). A weak-perspective mapping refit closes the loop each
//! iteration by reprojecting the shape to refine landmark positions and
//! visibility. The reconstructed pose-and-expression-normalized shapes feed
//! a score-level fusion with external 2D matchers.

pub mod camera;
pub mod cascade;
pub mod error;
pub mod features;
pub mod io;
pub mod lstsq;
pub mod metrics;
pub mod model_io;
pub mod recognition;
pub mod shape;
mod spatial;
pub mod synth;

pub use camera::{
    fit_mapping, init_landmarks, landmark_visibility, procrustes_align, project, rigid_icp,
    visibility_mask, Bbox, IcpParams, IcpResult, LandmarkSet2D, MappingMatrix, RigidTransform,
};
pub use cascade::{
    train_cascade, train_cascade_with_extractor, train_landmark_stage, train_shape_stage,
    CascadeModel, FitResult, LandmarkStage, ShapeStage, TrainConfig, TrainSample, TrainTrace,
};
pub use error::{Error, Result};
pub use features::{
    assemble_features, heatmap, sift_descriptor, FeatureConfig, FeatureExtractor, GrayImage,
    Heatmap, PatchMode, SiftExtractor,
};
pub use lstsq::Ridge;
pub use model_io::{load_model, save_model};
pub use shape::{
    compose_shape, decompose_expression, landmark_subshape, mean_shape, vertex_normals, Shape3D,
    ShapePrior, ShapeState, VertexNormals,
};
