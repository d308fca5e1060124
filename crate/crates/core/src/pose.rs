//! 2D human pose: the 17-joint COCO skeleton.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    Nose,
    LeftEye,
    RightEye,
    LeftEar,
    RightEar,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl Joint {
    pub const ALL: [Joint; 17] = [
        Joint::Nose,
        Joint::LeftEye,
        Joint::RightEye,
        Joint::LeftEar,
        Joint::RightEar,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftAnkle,
        Joint::RightAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: Joint,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// One skeleton: exactly 17 keypoints in [`Joint::ALL`] order.
pub type Skeleton = Vec<Keypoint>;

pub fn validate_skeleton(kps: &[Keypoint], dims: (u32, u32)) -> Result<()> {
    if kps.len() != Joint::ALL.len() {
        return Err(Error::ContractViolation(format!(
            "skeleton has {} keypoints, expected 17",
            kps.len()
        )));
    }
    for (kp, joint) in kps.iter().zip(Joint::ALL) {
        if kp.name != joint {
            return Err(Error::ContractViolation(format!(
                "keypoint {:?} out of order, expected {joint:?}",
                kp.name
            )));
        }
        if !(0.0..=1.0).contains(&kp.confidence) {
            return Err(Error::ContractViolation(format!(
                "{joint:?} confidence {} outside [0,1]",
                kp.confidence
            )));
        }
        let inside = kp.x >= 0.0 && kp.y >= 0.0 && kp.x <= dims.0 as f64 && kp.y <= dims.1 as f64;
        if kp.confidence > 0.0 && !inside {
            return Err(Error::ContractViolation(format!(
                "{joint:?} at ({}, {}) lies outside the frame with nonzero confidence",
                kp.x, kp.y
            )));
        }
    }
    Ok(())
}

/// Skeleton lookup by joint.
pub fn joint(kps: &[Keypoint], j: Joint) -> &Keypoint {
    &kps[j.index()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub dims: (u32, u32),
    pub frames: Vec<Skeleton>,
}

impl PoseSequence {
    pub fn validate(&self) -> Result<()> {
        self.frames
            .iter()
            .try_for_each(|s| validate_skeleton(s, self.dims))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let seq: Self = serde_json::from_str(text)?;
        seq.validate()?;
        Ok(seq)
    }
}
