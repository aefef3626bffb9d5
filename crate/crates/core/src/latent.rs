//! Control-point latent state, both as plain values and as tape variables.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, GroupElement, Pose2};

/// Which symmetry group the model respects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupVariant {
    /// Planar translations only.
    #[default]
    Translation,
    /// Rotations and translations.
    Se2,
}

impl GroupVariant {
    pub fn admits(&self, g: &GroupElement) -> bool {
        match self {
            GroupVariant::Translation => g.is_translation(),
            GroupVariant::Se2 => true,
        }
    }
}

/// `M` control points: poses, context vectors, and the fixed map back into
/// the mass-point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub poses: Vec<Pose2>,
    /// `M × C`.
    pub contexts: Mat,
    pub source_indices: Vec<usize>,
    pub object_ids: Vec<u32>,
}

impl LatentState {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.poses.len();
        if self.contexts.nrows() != m || self.source_indices.len() != m || self.object_ids.len() != m {
            return Err(Error::validation("latent state arrays disagree in length"));
        }
        let finite = self.contexts.iter().all(|x| x.is_finite())
            && self
                .poses
                .iter()
                .all(|p| p.position[0].is_finite() && p.position[1].is_finite() && p.orientation.is_finite());
        if !finite {
            return Err(Error::validation("latent state contains non-finite values"));
        }
        Ok(())
    }

    /// Poses transform under `g`; contexts are invariant.
    pub fn transformed(&self, g: &GroupElement) -> Self {
        Self {
            poses: self.poses.iter().map(|p| g.act_pose(p)).collect(),
            contexts: self.contexts.clone(),
            source_indices: self.source_indices.clone(),
            object_ids: self.object_ids.clone(),
        }
    }

    pub fn positions_mat(&self) -> Mat {
        Mat::from_shape_fn((self.len(), 2), |(i, j)| self.poses[i].position[j])
    }

    pub fn orientations_mat(&self) -> Mat {
        Mat::from_shape_fn((self.len(), 1), |(i, _)| self.poses[i].orientation)
    }

    /// Load onto a tape as constants.
    pub fn to_vars(&self, t: &mut Tape) -> LatentVars {
        LatentVars {
            x: t.constant(self.positions_mat()),
            theta: t.constant(self.orientations_mat()),
            c: t.constant(self.contexts.clone()),
            source_indices: self.source_indices.clone().into(),
            object_ids: self.object_ids.clone().into(),
        }
    }

    pub fn from_vars(t: &Tape, z: &LatentVars) -> Self {
        let x = t.value(z.x);
        let th = t.value(z.theta);
        Self {
            poses: (0..x.nrows())
                .map(|i| Pose2 {
                    position: [x[[i, 0]], x[[i, 1]]],
                    orientation: wrap_angle(th[[i, 0]]),
                })
                .collect(),
            contexts: t.value(z.c).clone(),
            source_indices: z.source_indices.to_vec(),
            object_ids: z.object_ids.to_vec(),
        }
    }
}

/// Latent state living on a tape.
#[derive(Clone, Debug)]
pub struct LatentVars {
    /// `M × 2` control positions.
    pub x: Var,
    /// `M × 1` orientations.
    pub theta: Var,
    /// `M × C` contexts.
    pub c: Var,
    pub source_indices: Rc<[usize]>,
    pub object_ids: Rc<[u32]>,
}

impl LatentVars {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }
}

/// How pairwise attributes are formed in the processor and decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMode {
    /// Group-invariant pair descriptors.
    #[default]
    Invariant,
    /// Raw sums of the endpoint positions and orientations (breaks symmetry).
    NonEquivariant,
}

/// Rotate the rows `(dx, dy)` of `d` by the per-row angle with cosine `c` and
/// sine `s`; `inverse` rotates by the negated angle.
pub fn rotate_rows(t: &mut Tape, d: Var, c: Var, s: Var, inverse: bool) -> Var {
    let dx = t.slice_cols(d, 0, 1);
    let dy = t.slice_cols(d, 1, 1);
    let cx = t.mul(c, dx);
    let cy = t.mul(c, dy);
    let sx = t.mul(s, dx);
    let sy = t.mul(s, dy);
    let (x, y) = if inverse {
        (t.add(cx, sy), t.sub(cy, sx))
    } else {
        (t.sub(cx, sy), t.add(sx, cy))
    };
    t.concat_cols(&[x, y])
}
