//! Document semantic structure extraction.
//!
//! A multimodal fully convolutional network labels every pixel of a page
//! image as background, figure, table, section heading, caption, list or
//! paragraph. Text enters through a per-pixel map of skip-gram sentence
//! embeddings merged into the encoder output. Training mixes labelled
//! synthetic pages with unlabelled pages that only carry boxes, using a
//! reconstruction task and an intra-box consistency task.

mod error;
pub mod embedding;
pub mod losses;
pub mod model;
pub mod page;
pub mod pipeline;
pub mod postprocess;
pub mod segeval;
pub mod synth;

pub use error::{Error, Result};
pub use page::{DocClass, DocumentPage, PixelBox, Sidecar, IGNORE_LABEL};
