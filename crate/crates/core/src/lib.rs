//! Slice-wise stroke lesion segmentation on head CT.
//!
//! The crate covers the whole pipeline: volume I/O and intensity handling,
//! synthetic phantoms, the DPN-style encoder/decoder, training, three-view
//! fusion with morphological closing, case classification, and statistics.

// Range checks are written as negated comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod phantom;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};
use volume::Label;

/// Case-level diagnosis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseClass {
    Healthy,
    Ischemic,
    Hemorrhagic,
}

impl CaseClass {
    pub const ALL: [CaseClass; 3] = [CaseClass::Healthy, CaseClass::Ischemic, CaseClass::Hemorrhagic];

    /// Voxel label carried by lesions of this class (`Background` for healthy).
    pub fn label(self) -> Label {
        match self {
            CaseClass::Healthy => Label::Background,
            CaseClass::Ischemic => Label::Ischemic,
            CaseClass::Hemorrhagic => Label::Hemorrhagic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CaseClass::Healthy => "healthy",
            CaseClass::Ischemic => "ischemic",
            CaseClass::Hemorrhagic => "hemorrhagic",
        }
    }
}

impl std::fmt::Display for CaseClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for CaseClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| error::invalid("case class", format!("unknown class {s:?}")))
    }
}
