//! Gaussian scene data model and the color/geometry parameter split.
//!
//! Values are stored raw, exactly as they appear in a reference 3DGS PLY file:
//! log-space scales, opacity logits and SH coefficients. Activations
//! (`exp`, logistic) are applied by the renderer.

mod ply;
pub mod sh;

use thiserror::Error;

pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyError};

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("array `{field}` has length {got}, expected {expected}")]
    Length {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("sh_degree {0} is not supported (0..=3)")]
    Degree(u8),
    #[error("quaternion {index} has norm {norm}, expected 1")]
    Rotation { index: usize, norm: f64 },
    #[error("non-finite value in `{field}` at gaussian {index}")]
    NonFinite { field: &'static str, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    /// Unit quaternions stored `(w, x, y, z)`, matching `rot_0..rot_3`.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_dc: Vec<[f64; 3]>,
    /// Row per Gaussian, channel-major within the row: `[c * K + j]` with
    /// `K = (L+1)^2 - 1`.
    pub sh_rest: Vec<f64>,
    pub sh_degree: u8,
}

impl GaussianCloud {
    pub fn empty(sh_degree: u8) -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh_dc: Vec::new(),
            sh_rest: Vec::new(),
            sh_degree,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Length of one Gaussian's `sh_rest` row, `3 * ((L+1)^2 - 1)`.
    #[inline]
    pub fn rest_len(&self) -> usize {
        3 * sh::rest_per_channel(self.sh_degree)
    }

    pub fn rest_row(&self, i: usize) -> &[f64] {
        let k = self.rest_len();
        &self.sh_rest[i * k..(i + 1) * k]
    }

    /// Appends a Gaussian with zero higher-order SH.
    pub fn push(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        sh_dc: [f64; 3],
    ) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh_dc.push(sh_dc);
        let k = self.rest_len();
        self.sh_rest.extend(std::iter::repeat_n(0.0, k));
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if self.sh_degree > 3 {
            return Err(CloudError::Degree(self.sh_degree));
        }
        let n = self.len();
        let check = |field, got| {
            if got != n {
                Err(CloudError::Length {
                    field,
                    got,
                    expected: n,
                })
            } else {
                Ok(())
            }
        };
        check("rotations", self.rotations.len())?;
        check("log_scales", self.log_scales.len())?;
        check("opacity_logits", self.opacity_logits.len())?;
        check("sh_dc", self.sh_dc.len())?;
        if self.sh_rest.len() != n * self.rest_len() {
            return Err(CloudError::Length {
                field: "sh_rest",
                got: self.sh_rest.len(),
                expected: n * self.rest_len(),
            });
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(CloudError::Rotation { index: i, norm });
            }
        }
        for i in 0..n {
            let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
            let bad = [
                ("positions", finite(&self.positions[i])),
                ("log_scales", finite(&self.log_scales[i])),
                ("opacity_logits", self.opacity_logits[i].is_finite()),
                ("sh_dc", finite(&self.sh_dc[i])),
                ("sh_rest", finite(self.rest_row(i))),
            ]
            .into_iter()
            .find(|(_, ok)| !ok);
            if let Some((field, _)) = bad {
                return Err(CloudError::NonFinite { field, index: i });
            }
        }
        Ok(())
    }

    /// Splits the cloud into mutable color parameters and a read-only view of
    /// the geometry. The borrow checker rules out any write to geometry through
    /// the returned pair.
    pub fn partition(&mut self) -> ParamPartition<'_> {
        ParamPartition {
            trainable: ColorParams {
                sh_dc: &mut self.sh_dc,
                sh_rest: &mut self.sh_rest,
                sh_degree: self.sh_degree,
            },
            frozen: GeometryParams {
                positions: &self.positions,
                rotations: &self.rotations,
                log_scales: &self.log_scales,
                opacity_logits: &self.opacity_logits,
            },
        }
    }

    /// Owned copy of the frozen arrays, for bitwise freeze checks.
    pub fn geometry_snapshot(&self) -> GeometrySnapshot {
        GeometrySnapshot {
            positions: self.positions.clone(),
            rotations: self.rotations.clone(),
            log_scales: self.log_scales.clone(),
            opacity_logits: self.opacity_logits.clone(),
        }
    }
}

/// Every stored field of a [`GaussianCloud`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Positions,
    Rotations,
    LogScales,
    OpacityLogits,
    ShDc,
    ShRest,
}

impl Field {
    pub const ALL: [Field; 6] = [
        Field::Positions,
        Field::Rotations,
        Field::LogScales,
        Field::OpacityLogits,
        Field::ShDc,
        Field::ShRest,
    ];

    pub fn is_trainable(self) -> bool {
        matches!(self, Field::ShDc | Field::ShRest)
    }
}

pub struct ParamPartition<'a> {
    pub trainable: ColorParams<'a>,
    pub frozen: GeometryParams<'a>,
}

impl ParamPartition<'_> {
    pub fn trainable_fields(&self) -> [Field; 2] {
        [Field::ShDc, Field::ShRest]
    }

    pub fn frozen_fields(&self) -> [Field; 4] {
        [
            Field::Positions,
            Field::Rotations,
            Field::LogScales,
            Field::OpacityLogits,
        ]
    }
}

/// The optimized color parameters.
pub struct ColorParams<'a> {
    pub sh_dc: &'a mut Vec<[f64; 3]>,
    pub sh_rest: &'a mut Vec<f64>,
    pub sh_degree: u8,
}

pub struct GeometryParams<'a> {
    pub positions: &'a [[f64; 3]],
    pub rotations: &'a [[f64; 4]],
    pub log_scales: &'a [[f64; 3]],
    pub opacity_logits: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySnapshot {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
}

impl GeometrySnapshot {
    /// Bitwise comparison (distinguishes `-0.0` and NaN payloads).
    pub fn bitwise_eq(&self, cloud: &GaussianCloud) -> bool {
        fn bits<const K: usize>(a: &[[f64; K]], b: &[[f64; K]]) -> bool {
            a.len() == b.len()
                && a
                    .iter()
                    .flatten()
                    .zip(b.iter().flatten())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        }
        bits(&self.positions, &cloud.positions)
            && bits(&self.rotations, &cloud.rotations)
            && bits(&self.log_scales, &cloud.log_scales)
            && self.opacity_logits.len() == cloud.opacity_logits.len()
            && self
                .opacity_logits
                .iter()
                .zip(&cloud.opacity_logits)
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Gradient over the color parameters, the only ones that are optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorGradient {
    pub sh_dc: Vec<[f64; 3]>,
    pub sh_rest: Vec<f64>,
}

impl ColorGradient {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        Self {
            sh_dc: vec![[0.0; 3]; cloud.len()],
            sh_rest: vec![0.0; cloud.sh_rest.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &ColorGradient, k: f64) {
        for (a, b) in self.sh_dc.iter_mut().zip(&other.sh_dc) {
            for c in 0..3 {
                a[c] += k * b[c];
            }
        }
        for (a, b) in self.sh_rest.iter_mut().zip(&other.sh_rest) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.sh_dc.iter_mut().flatten().for_each(|v| *v *= k);
        self.sh_rest.iter_mut().for_each(|v| *v *= k);
    }

    pub fn norm(&self) -> f64 {
        self.sh_dc
            .iter()
            .flatten()
            .chain(&self.sh_rest)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.sh_dc.iter().flatten().chain(&self.sh_rest).all(|v| v.is_finite())
    }

    /// Lifts to a gradient over every field; geometry entries are zero.
    pub fn to_full(&self, cloud: &GaussianCloud) -> FullGradient {
        let n = cloud.len();
        FullGradient {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh_dc: self.sh_dc.clone(),
            sh_rest: self.sh_rest.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_dc: Vec<[f64; 3]>,
    pub sh_rest: Vec<f64>,
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cloud() -> GaussianCloud {
        let mut c = GaussianCloud::empty(1);
        c.push([0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0], [-1.0; 3], 0.5, [0.1, 0.2, 0.3]);
        c.push([1.0, 0.0, 2.0], [0.0, 1.0, 0.0, 0.0], [-2.0; 3], -0.5, [0.0; 3]);
        c
    }

    #[test]
    fn partition_is_total_and_disjoint() {
        let mut c = cloud();
        let p = c.partition();
        let train: HashSet<_> = p.trainable_fields().into_iter().collect();
        let frozen: HashSet<_> = p.frozen_fields().into_iter().collect();
        assert!(train.is_disjoint(&frozen));
        let all: HashSet<_> = Field::ALL.into_iter().collect();
        assert_eq!(&train | &frozen, all);
        for f in Field::ALL {
            assert_eq!(f.is_trainable(), train.contains(&f));
        }
        assert_eq!(train, HashSet::from([Field::ShDc, Field::ShRest]));
    }

    #[test]
    fn updating_trainable_leaves_frozen_bitwise_equal() {
        let mut c = cloud();
        let snap = c.geometry_snapshot();
        for step in 0..100 {
            let p = c.partition();
            for dc in p.trainable.sh_dc.iter_mut() {
                dc[0] -= 0.01 * (step as f64).sin();
            }
            for r in p.trainable.sh_rest.iter_mut() {
                *r += 1e-3;
            }
        }
        assert!(snap.bitwise_eq(&c));
        assert!((c.sh_rest[0] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn validate_catches_bad_rest_length() {
        let mut c = cloud();
        c.sh_rest.pop();
        assert!(matches!(c.validate(), Err(CloudError::Length { field: "sh_rest", .. })));
    }

    #[test]
    fn validate_catches_non_unit_quaternion() {
        let mut c = cloud();
        c.rotations[1] = [0.0, 2.0, 0.0, 0.0];
        assert!(matches!(c.validate(), Err(CloudError::Rotation { index: 1, .. })));
    }

    #[test]
    fn color_gradient_lifts_with_zero_geometry() {
        let c = cloud();
        let mut g = ColorGradient::zeros(&c);
        g.sh_dc[0] = [1.0, 2.0, 3.0];
        let full = g.to_full(&c);
        assert!(full.positions.iter().flatten().all(|v| *v == 0.0));
        assert!(full.opacity_logits.iter().all(|v| *v == 0.0));
        assert_eq!(full.sh_dc[0], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn activations() {
        assert!((logistic(0.0) - 0.5).abs() < 1e-15);
        assert!((logistic(logit(0.3)) - 0.3).abs() < 1e-12);
    }
}
