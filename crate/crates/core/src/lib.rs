//! Training-free evaluation harness for few-shot classification and
//! segmentation posed as multi-choice visual question answering.
//!
//! The pipeline runs one episode end to end: an object detector proposes
//! boxes on the query image, a vision-language model assigns each box to one
//! of the episode's support classes through a structured multi-choice
//! prompt, a segmenter turns each assigned box into a pixel mask, and
//! per-class masks are aggregated by union. Exact-match ratio and mean IoU
//! are accumulated per fold and rendered in the standard table layout.
//!
//! All three external tools sit behind backend traits with three
//! interchangeable families: exact oracles (answer from ground truth),
//! parameterized noise models, and remote HTTP clients speaking a small
//! JSON wire protocol. A stub server over the simulated backends ships for
//! contract tests.

pub mod backends;
pub mod dataset;
pub mod maskcore;
pub mod metrics;
pub mod pipeline;
pub mod runner;
pub mod seeding;
pub mod vqa;

pub use maskcore::{BinaryMask, BoundingBox, MaskError, RleMask};
