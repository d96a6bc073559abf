//! Look & Mark harness core.
//!
//! Fuses bounding boxes, eye fixations and dictated reports per chest X-ray
//! study, grounds fixations onto abnormality boxes, assembles the prompting
//! variants, drives chat-completion endpoints and scores the generated
//! reports.
//!
//! Interchangeable pieces (endpoint adapters, metric scorers, agreement
//! distance functions) sit behind traits and are looked up by name in a
//! [`registry::Registry`], so the CLI selects them from configuration.

pub mod clock;
pub mod corpus;
pub mod digest;
pub mod experteval;
pub mod genclient;
pub mod grounding;
pub mod metrics;
pub mod promptkit;
pub mod registry;

pub use corpus::{BoundingBox, DictatedReport, Fixation, StudyRecord};
pub use grounding::{aggregate_fixation_times, map_fixation, GroundedFixationSummary, RenderSpec};
pub use promptkit::{MethodFlags, PromptBundle};
