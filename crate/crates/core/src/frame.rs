//! Everything both sides derive from positions alone: fp16 positions, the
//! transmitted PCA frame and bounds, and each anchor's plane coordinates.

use half::f16;

use crate::attributes::anchor_coords;
use crate::error::{CodecError, Result};
use crate::pca::{fit_pca, PcaBasis, SceneBounds};
use crate::scene::{AnchorSet, NormStats, ATTR_DIM};

/// Rounds a coordinate to IEEE half precision (nearest, ties to even).
pub fn to_fp16(v: f64) -> Result<f16> {
    let h = f16::from_f64(v);
    if !h.is_finite() {
        return Err(CodecError::Range(format!(
            "position coordinate {v} exceeds the fp16 range"
        )));
    }
    Ok(h)
}

pub fn round_position(p: &[f64; 3]) -> Result<[f64; 3]> {
    Ok([
        to_fp16(p[0])?.to_f64(),
        to_fp16(p[1])?.to_f64(),
        to_fp16(p[2])?.to_f64(),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    /// Positions after fp16 rounding.
    pub positions: Vec<[f64; 3]>,
    pub basis: PcaBasis,
    pub bounds: SceneBounds,
    pub stats: NormStats,
    /// `(u, v, w)` per anchor.
    pub coords: Vec<[f64; 3]>,
}

impl SceneFrame {
    /// Encoder side: fits the frame on fp16 positions and rounds every
    /// transmitted quantity to its stored precision.
    pub fn fit(set: &AnchorSet) -> Result<Self> {
        let positions = set
            .anchors()
            .iter()
            .map(|a| round_position(&a.position_f64()))
            .collect::<Result<Vec<_>>>()?;
        let basis = fit_pca(&positions)?.transmitted();
        let bounds = SceneBounds::of(&basis, &positions).transmitted();
        let stats = NormStats::fit(set).to_f32_precision();
        Ok(Self::from_parts(positions, basis, bounds, stats))
    }

    /// Decoder side: rebuilds the frame from transmitted values.
    pub fn from_parts(positions: Vec<[f64; 3]>, basis: PcaBasis, bounds: SceneBounds, stats: NormStats) -> Self {
        let coords = anchor_coords(&basis, &bounds, &positions);
        SceneFrame {
            positions,
            basis,
            bounds,
            stats,
            coords,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Normalized attributes of every anchor.
    pub fn normalized(&self, set: &AnchorSet) -> Vec<[f64; ATTR_DIM]> {
        set.anchors()
            .iter()
            .map(|a| self.stats.normalize(&a.attributes()))
            .collect()
    }
}
