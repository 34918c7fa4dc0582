//! Normalized region boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// `(x1, y1, x2, y2)` normalized by the image extent.
    Box2d,
    /// `(cx, cy, cz, dx, dy, dz)` normalized by the scene extent.
    Box3d,
}

impl RegionKind {
    pub fn dim(self) -> usize {
        match self {
            RegionKind::Box2d => 4,
            RegionKind::Box3d => 6,
        }
    }
}

/// A region of interest: the target `p*` of box regression and the input
/// of the position embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub kind: RegionKind,
    pub coords: Vec<f64>,
}

impl RegionSpec {
    pub fn box2d(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(RegionKind::Box2d, vec![x1, y1, x2, y2])
    }

    pub fn box3d(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        Self::new(RegionKind::Box3d, center.into_iter().chain(size).collect())
    }

    pub fn new(kind: RegionKind, coords: Vec<f64>) -> Result<Self> {
        let r = Self { kind, coords };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.kind.dim() {
            return Err(Error::Region(format!("{:?} needs {} coordinates, got {}", self.kind, self.kind.dim(), self.coords.len())));
        }
        if let Some(c) = self.coords.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Region(format!("coordinate {c} outside [0, 1]")));
        }
        let ok = match self.kind {
            RegionKind::Box2d => self.coords[0] < self.coords[2] && self.coords[1] < self.coords[3],
            RegionKind::Box3d => self.coords[3..].iter().all(|&d| d > 0.0),
        };
        if !ok {
            return Err(Error::Region(format!("degenerate {:?} {:?}", self.kind, self.coords)));
        }
        Ok(())
    }

    /// Shared 6-wide position-embedding input; 2-D boxes are laid out as
    /// `(x1, y1, 0, x2, y2, 0)`.
    pub fn pafe_input(&self) -> [f64; 6] {
        let c = &self.coords;
        match self.kind {
            RegionKind::Box2d => [c[0], c[1], 0.0, c[2], c[3], 0.0],
            RegionKind::Box3d => [c[0], c[1], c[2], c[3], c[4], c[5]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(RegionSpec::box2d(0.1, 0.2, 0.5, 0.6).is_ok());
        assert!(RegionSpec::box2d(0.5, 0.2, 0.5, 0.6).is_err());
        assert!(RegionSpec::box2d(0.1, 0.2, 1.5, 0.6).is_err());
        assert!(RegionSpec::box3d([0.5; 3], [0.1, 0.0, 0.1]).is_err());
        assert!(RegionSpec::new(RegionKind::Box2d, vec![0.1; 6]).is_err());
    }

    #[test]
    fn box2d_padding_layout() {
        let r = RegionSpec::box2d(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(r.pafe_input(), [0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }
}
