//! Tooling around grounded multimodal named entity recognition (GMNER):
//! box geometry, IoU-guarded Gaussian box perturbation (GRBP), the
//! `span | type | [x1, y1, x2, y2]` record format and its parser,
//! MNER/EEG/GMNER scoring, and instruction-tuning set construction.
//!
//! Geometry, perturbation, parsing and scoring are generic over the
//! coordinate [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! common choice. Dataset files are always read as `f64`.

pub mod databuilder;
pub mod geometry;
pub mod grbp;
pub mod rng;
pub mod scalar;
pub mod schema;
pub mod scoring;

pub use geometry::{iou, BBox, CenterSize, GeometryError, ImageDims};
pub use grbp::{
    characterize, perturb, perturb_dataset, perturb_dataset_with, BoxSampler, GrbpConfig,
    PerturbOutcome, SweepRow,
};
pub use scalar::Scalar;
pub use schema::{
    load_dataset, parse_generation, serialize_record, write_dataset, EntityRecord, Example,
    Generation, ParsedPrediction,
};
pub use scoring::{match_records, oracle_score, score, ScoreReport};

pub type Box64 = BBox<f64>;
pub type Box32 = BBox<f32>;
pub type CenterSize64 = CenterSize<f64>;
pub type Record64 = EntityRecord<f64>;
pub type Record32 = EntityRecord<f32>;
pub type PerturbOutcome64 = PerturbOutcome<f64>;
pub type Prediction64 = ParsedPrediction<f64>;
