//! On-disk formats: weight container, graph documents, PPM/PGM images.

mod container;
mod graph_doc;
mod image;

pub use container::{load_weights, save_weights, StoredTensor, TensorData, WeightContainer, FORMAT_VERSION, MAGIC};
pub use graph_doc::{config_from_json, config_to_json, graph_from_json, graph_to_json, load_graph, save_graph};
pub use image::{load_pnm, parse_pnm, render_overlay, save_overlay, save_pgm, save_ppm, ImageBuffer};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes (expected \"RNRT\")")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: needed {needed} bytes for {what} at offset {offset}")]
    Truncated { what: &'static str, offset: usize, needed: usize },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor name at offset {0} is not valid UTF-8")]
    InvalidName(usize),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("tensor `{0}` dims overflow the addressable size")]
    DimsOverflow(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor `{name}` has {actual} elements but dims need {expected}")]
    PayloadMismatch { name: String, expected: usize, actual: usize },
    #[error("tensor `{0}` does not fit the format limits")]
    TooLarge(String),

    #[error("malformed image header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    BadMaxval(u32),
    #[error("image payload truncated: expected {expected} bytes, found {actual}")]
    ImageTruncated { expected: usize, actual: usize },

    #[error("node `{node}` has unknown layer kind `{kind}`")]
    UnknownKind { node: String, kind: String },
    #[error("node `{node}` references undefined input `{input}`")]
    DanglingInput { node: String, input: String },
    #[error("graph document: {0}")]
    Document(String),
}
