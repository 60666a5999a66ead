//! Two-alternative forced-choice rating study: pair scheduling with blinded
//! left/right placement, vote collection over HTTP, an append-only event
//! log, and preference statistics.

pub mod definition;
pub mod error;
pub mod http;
pub mod log;
pub mod render;
pub mod report;
pub mod service;
pub mod simulate;
pub mod stats;

pub use definition::{design_study, sample_view, ModelPair, Plane, RealPair, StudyDefinition, SyntheticImage, View};
pub use error::StudyError;
pub use render::ImageLibrary;
pub use report::StudyReport;
pub use service::{
    Clock, ManualClock, NextPair, PairPayload, ServiceConfig, SessionCreated, SessionState, Side, Source, StudyCreated,
    StudyService, SystemClock, VoteAck, VoteRequest,
};
pub use simulate::{run_simulated_raters, SimulatedRater};
pub use stats::{chi2_sf, chi_square_preference, ChiSquare};
