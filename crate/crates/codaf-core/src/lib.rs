//! Weakly aligned RGB/infrared detection: offset-guided feature alignment,
//! gated cross-modality fusion, the alignment losses that supervise them,
//! a compact two-stream detector, a synthetic scene generator, and the
//! train/eval/ablate harness around it all.

pub mod dafm;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod osa;
pub mod params;
pub mod primitives;
pub mod synthgen;
pub mod tape;
pub mod tensor;

pub use error::{CodafError, Result};
