use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::region::RegionKind;

/// The four data modalities, each with its own adapter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityId {
    ImgText,
    ImgRegion,
    PcText,
    PcRegion,
}

impl ModalityId {
    pub const ALL: [ModalityId; 4] = [ModalityId::ImgText, ModalityId::ImgRegion, ModalityId::PcText, ModalityId::PcRegion];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityId::ImgText => "img_text",
            ModalityId::ImgRegion => "img_region",
            ModalityId::PcText => "pc_text",
            ModalityId::PcRegion => "pc_region",
        }
    }

    pub fn is_region(self) -> bool {
        matches!(self, ModalityId::ImgRegion | ModalityId::PcRegion)
    }

    pub fn is_point(self) -> bool {
        matches!(self, ModalityId::PcText | ModalityId::PcRegion)
    }

    /// Box layout used by region modalities.
    pub fn region_kind(self) -> Option<RegionKind> {
        match self {
            ModalityId::ImgRegion => Some(RegionKind::Box2d),
            ModalityId::PcRegion => Some(RegionKind::Box3d),
            _ => None,
        }
    }

    /// Fixed text prefix for prefix language modeling.
    pub fn prefix(self) -> &'static str {
        if self.is_point() {
            "a point cloud of"
        } else {
            "a photo of"
        }
    }

    /// Checkpoint namespace of this modality's adapter set.
    pub fn namespace(self) -> String {
        format!("adapters.{}", self.as_str())
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ModalityId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Modality(format!("unknown modality `{s}`")))
    }
}
