//! Skeleton trees and the bone/motion modalities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const NTU25_PARENTS: &str = include_str!("../../data/ntu25_parents.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("topology has {topo} joints, tensor has {tensor}")]
    Mismatch { topo: usize, tensor: usize },
    #[error("expected a [C, T, V] tensor, got {0:?}")]
    Shape(Vec<usize>),
    #[error("topology file: {0}")]
    Json(String),
}

/// Parent index per joint; the root is its own parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct JointTopology {
    parents: Vec<usize>,
}

impl TryFrom<Vec<usize>> for JointTopology {
    type Error = TopologyError;

    fn try_from(parents: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(parents)
    }
}

impl From<JointTopology> for Vec<usize> {
    fn from(t: JointTopology) -> Self {
        t.parents
    }
}

impl JointTopology {
    /// Validates that `parents` describes a single tree.
    pub fn new(parents: Vec<usize>) -> Result<Self, TopologyError> {
        let v = parents.len();
        if v == 0 {
            return Err(TopologyError::Invalid("no joints".into()));
        }
        if let Some((j, &p)) = parents.iter().enumerate().find(|(_, &p)| p >= v) {
            return Err(TopologyError::Invalid(format!("joint {j} has parent {p} outside [0, {v})")));
        }
        let roots: Vec<usize> = (0..v).filter(|&j| parents[j] == j).collect();
        if roots.len() != 1 {
            return Err(TopologyError::Invalid(format!("expected exactly one root, found {roots:?}")));
        }
        for start in 0..v {
            let mut j = start;
            for _ in 0..v {
                j = parents[j];
            }
            if parents[j] != j {
                return Err(TopologyError::Invalid(format!("joint {start} does not reach the root")));
            }
        }
        Ok(Self { parents })
    }

    /// The 25-joint Kinect v2 tree used by NTU RGB+D, rooted at the spine base.
    pub fn ntu25() -> Self {
        Self::from_json(NTU25_PARENTS).expect("bundled NTU topology is valid")
    }

    /// `0 <- 1 <- 2 <- ...`
    pub fn chain(v: usize) -> Self {
        Self { parents: (0..v).map(|j| j.saturating_sub(1)).collect() }
    }

    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        serde_json::from_str(text).map_err(|e| TopologyError::Json(e.to_string()))
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> usize {
        self.parents[j]
    }

    pub fn root(&self) -> usize {
        (0..self.joints()).find(|&j| self.parents[j] == j).unwrap()
    }

    /// Topology over `bodies` copies laid out body-major (`m * V + v`), as
    /// produced by merging the body axis into the joint axis. Each copy keeps
    /// its own root.
    pub fn per_body(&self, bodies: usize) -> BodyTopology {
        BodyTopology { base: self.clone(), bodies }
    }
}

/// A per-body tree repeated across merged body slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyTopology {
    base: JointTopology,
    bodies: usize,
}

impl BodyTopology {
    pub fn joints(&self) -> usize {
        self.base.joints() * self.bodies
    }

    pub fn parent(&self, j: usize) -> usize {
        let v = self.base.joints();
        (j / v) * v + self.base.parent(j % v)
    }
}

impl From<JointTopology> for BodyTopology {
    fn from(base: JointTopology) -> Self {
        Self { base, bodies: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Joint, Modality::Bone, Modality::JointMotion, Modality::BoneMotion];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::JointMotion => "joint_motion",
            Modality::BoneMotion => "bone_motion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modalities {
    pub joint: Tensor,
    pub bone: Tensor,
    pub joint_motion: Tensor,
    pub bone_motion: Tensor,
}

impl Modalities {
    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Joint => &self.joint,
            Modality::Bone => &self.bone,
            Modality::JointMotion => &self.joint_motion,
            Modality::BoneMotion => &self.bone_motion,
        }
    }

    pub fn into_modality(self, m: Modality) -> Tensor {
        match m {
            Modality::Joint => self.joint,
            Modality::Bone => self.bone,
            Modality::JointMotion => self.joint_motion,
            Modality::BoneMotion => self.bone_motion,
        }
    }
}

fn bones(x: &Tensor, topo: &BodyTopology) -> Tensor {
    let (c, t, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(vec![c, t, v]);
    for ch in 0..c {
        for f in 0..t {
            for j in 0..v {
                let i = out.idx3(ch, f, j);
                out.data_mut()[i] = x.at3(ch, f, j) - x.at3(ch, f, topo.parent(j));
            }
        }
    }
    out
}

/// Forward difference in time; the last frame's motion is zero.
fn motion(x: &Tensor) -> Tensor {
    let (c, t, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(vec![c, t, v]);
    for ch in 0..c {
        for f in 0..t.saturating_sub(1) {
            for j in 0..v {
                let i = out.idx3(ch, f, j);
                out.data_mut()[i] = x.at3(ch, f + 1, j) - x.at3(ch, f, j);
            }
        }
    }
    out
}

/// Derives bone, joint-motion and bone-motion streams from joint positions.
pub fn derive_modalities(joint: &Tensor, topo: impl Into<BodyTopology>) -> Result<Modalities, TopologyError> {
    let topo = topo.into();
    let &[_, _, v] = joint.shape() else {
        return Err(TopologyError::Shape(joint.shape().to_vec()));
    };
    if v != topo.joints() {
        return Err(TopologyError::Mismatch { topo: topo.joints(), tensor: v });
    }
    let bone = bones(joint, &topo);
    Ok(Modalities {
        joint_motion: motion(joint),
        bone_motion: motion(&bone),
        bone,
        joint: joint.clone(),
    })
}
