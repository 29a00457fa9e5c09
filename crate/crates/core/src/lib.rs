//! Digital twin of a reconfigurable vibrotactile feedback system.
//!
//! A simulated 25-sensor tactile glove is scanned row by row, its frames are
//! compressed onto a configurable number of vibration motors, and the
//! resulting commands are framed and sent over a simulated lossy link. On top
//! of that pipeline sit the psychophysics protocols (intensity, single and
//! paired location discrimination, object pickup), simulated responders and
//! the analysis used to score them.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod glove;
pub mod model;
pub mod pipeline;
pub mod responder;
pub mod transport;

pub use analysis::{
    aggregate_site_score, confusion, friedman, normalize_times, object_task_summary, summarize,
    ConfusionMatrix, FriedmanResult, SessionSummary,
};
pub use error::{Error, Result};
pub use experiment::{
    gen_plan, run_session, LiveSession, Protocol, SessionConfig, SessionLog, Stimulus, TrialPlan,
    TrialRecord,
};
pub use feedback::{
    builtin_mode, builtin_modes, compress, encode, Assignment, CompressionMode, EncoderConfig,
    EncoderKind, FeedbackEngine, Focus, ModeId, RegionMap,
};
pub use glove::{
    normalize, piezo_readout, synth_pressure, tdma_scan, Calibrated, GloveSample, GloveSim,
    GraspObject, GraspScenario, PiezoModel, PressureTemplate, ScanConfig,
};
pub use model::{
    default_layout, frame_index, Activation, Arrangement, BodySite, MotorCommand, PressureFrame,
    RawFrame, Region, SensorGrid, SensorLayout, SiteName, DEFAULT_STIMULUS_MS,
};
pub use pipeline::{Pipeline, PipelineConfig, PipelineEvent, PipelineReport};
pub use responder::{respond, Responder, ResponderKind, ResponderModel};
pub use transport::{decode_packet, encode_packet, Channel, ChannelConfig, Packet, PacketType};
