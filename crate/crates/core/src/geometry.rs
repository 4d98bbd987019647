//! Axis-aligned boxes: `Cen - Off ⪯ v ⪯ Cen + Off` with `Off ⪰ 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default weight of the inside-distance term.
pub const DEFAULT_ALPHA: f64 = 0.02;

/// A closed axis-aligned hyper-rectangle given by center and half-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxEmbedding {
    center: Vec<f64>,
    offset: Vec<f64>,
}

impl BoxEmbedding {
    /// Builds a box from raw parameters, clamping negative offsets to zero.
    pub fn materialize(raw_center: &[f64], raw_offset: &[f64]) -> Result<Self> {
        if raw_center.len() != raw_offset.len() {
            return Err(Error::shape(
                "materialize",
                format!(
                    "center dim {} vs offset dim {}",
                    raw_center.len(),
                    raw_offset.len()
                ),
            ));
        }
        Ok(BoxEmbedding {
            center: raw_center.to_vec(),
            offset: raw_offset.iter().map(|&o| o.max(0.0)).collect(),
        })
    }

    /// Splits a `2d` raw vector into `(center, offset)` halves.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if !raw.len().is_multiple_of(2) {
            return Err(Error::shape("materialize", "odd raw vector length"));
        }
        let d = raw.len() / 2;
        Self::materialize(&raw[..d], &raw[d..])
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn min_corner(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.offset)
            .map(|(c, o)| c - o)
            .collect()
    }

    pub fn max_corner(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.offset)
            .map(|(c, o)| c + o)
            .collect()
    }

    fn check_dim(&self, other: usize, op: &'static str) -> Result<()> {
        if self.dim() != other {
            Err(Error::shape(op, format!("dim {} vs {}", self.dim(), other)))
        } else {
            Ok(())
        }
    }

    /// Point membership, boundary included.
    pub fn contains(&self, v: &[f64]) -> Result<bool> {
        self.check_dim(v.len(), "contains")?;
        Ok(self
            .center
            .iter()
            .zip(&self.offset)
            .zip(v)
            .all(|((c, o), x)| c - o <= *x && *x <= c + o))
    }

    /// True when the closed boxes share at least one point.
    pub fn intersects(&self, other: &BoxEmbedding) -> Result<bool> {
        self.check_dim(other.dim(), "intersects")?;
        Ok((0..self.dim())
            .all(|k| (self.center[k] - other.center[k]).abs() <= self.offset[k] + other.offset[k]))
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains_box(&self, other: &BoxEmbedding) -> Result<bool> {
        self.check_dim(other.dim(), "contains_box")?;
        Ok((0..self.dim()).all(|k| {
            self.center[k] - self.offset[k] <= other.center[k] - other.offset[k]
                && other.center[k] + other.offset[k] <= self.center[k] + self.offset[k]
        }))
    }

    /// `(dist_out, dist_in)` against another box.
    pub fn distance_parts(&self, other: &BoxEmbedding) -> Result<(f64, f64)> {
        self.check_dim(other.dim(), "distance")?;
        let mut outside = 0.0;
        let mut inside = 0.0;
        for k in 0..self.dim() {
            let delta = (self.center[k] - other.center[k]).abs();
            let s = self.offset[k] + other.offset[k];
            outside += (delta - s).max(0.0);
            inside += delta.min(s);
        }
        Ok((outside, inside))
    }

    pub fn distance_out(&self, other: &BoxEmbedding) -> Result<f64> {
        Ok(self.distance_parts(other)?.0)
    }

    /// `dist_out + alpha · dist_in`.
    pub fn distance(&self, other: &BoxEmbedding, alpha: f64) -> Result<f64> {
        let (o, i) = self.distance_parts(other)?;
        Ok(o + alpha * i)
    }
}
