//! User prompts that pick out the subject to replace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{rle_decode, RleMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Point,
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// A spatial hint anchored to one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub frame_index: usize,
    pub kind: PromptKind,
    #[serde(default)]
    pub points: Vec<PromptPoint>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<PromptBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
}

impl Prompt {
    pub fn point(frame_index: usize, x: f64, y: f64) -> Self {
        Self {
            frame_index,
            kind: PromptKind::Point,
            points: vec![PromptPoint {
                x,
                y,
                label: PointLabel::Positive,
            }],
            bbox: None,
            mask: None,
        }
    }

    pub fn boxed(frame_index: usize, b: PromptBox) -> Self {
        Self {
            frame_index,
            kind: PromptKind::Box,
            points: vec![],
            bbox: Some(b),
            mask: None,
        }
    }

    /// Check the prompt against a clip of `n_frames` frames of size `dims`.
    pub fn validate(&self, n_frames: usize, dims: (u32, u32)) -> Result<()> {
        if self.frame_index >= n_frames {
            return Err(Error::Prompt(format!(
                "frame_index {} outside clip of {n_frames} frames",
                self.frame_index
            )));
        }
        let (w, h) = (dims.0 as f64, dims.1 as f64);
        let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x < w && y < h;
        for p in &self.points {
            if !inside(p.x, p.y) {
                return Err(Error::Prompt(format!("point ({}, {}) outside {w}x{h} frame", p.x, p.y)));
            }
        }
        match self.kind {
            PromptKind::Point => {
                if self.points.is_empty() {
                    return Err(Error::Prompt("point prompt needs at least one point".into()));
                }
                if !self.points.iter().any(|p| p.label == PointLabel::Positive) {
                    return Err(Error::Prompt("point prompt needs a positive point".into()));
                }
            }
            PromptKind::Box => {
                let b = self
                    .bbox
                    .ok_or_else(|| Error::Prompt("box prompt without a box".into()))?;
                if b.x_min > b.x_max || b.y_min > b.y_max {
                    return Err(Error::Prompt("box min exceeds max".into()));
                }
                if !inside(b.x_min, b.y_min) || !inside(b.x_max, b.y_max) {
                    return Err(Error::Prompt("box outside frame".into()));
                }
            }
            PromptKind::Mask => {
                let m = self
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Prompt("mask prompt without a mask".into()))?;
                if m.dims != dims {
                    return Err(Error::Prompt(format!(
                        "mask prompt is {:?}, frames are {dims:?}",
                        m.dims
                    )));
                }
                rle_decode(m).map_err(|e| Error::Prompt(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let p = Prompt::point(0, 3.0, 4.0);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["kind"], "point");
        assert_eq!(v["points"][0]["label"], "positive");
        let b: Prompt = serde_json::from_str(
            r#"{"frame_index":2,"kind":"box","box":{"x_min":1,"y_min":2,"x_max":3,"y_max":4}}"#,
        )
        .unwrap();
        assert_eq!(b.bbox.unwrap().y_max, 4.0);
    }

    #[test]
    fn validation() {
        assert!(Prompt::point(0, 3.0, 4.0).validate(1, (8, 8)).is_ok());
        assert!(Prompt::point(1, 3.0, 4.0).validate(1, (8, 8)).is_err());
        assert!(Prompt::point(0, 8.0, 4.0).validate(1, (8, 8)).is_err());
        let mut neg = Prompt::point(0, 1.0, 1.0);
        neg.points[0].label = PointLabel::Negative;
        assert!(neg.validate(1, (8, 8)).is_err());
        let bad = Prompt::boxed(0, PromptBox { x_min: 5.0, y_min: 0.0, x_max: 2.0, y_max: 3.0 });
        assert!(bad.validate(1, (8, 8)).is_err());
        let mask = Prompt {
            frame_index: 0,
            kind: PromptKind::Mask,
            points: vec![],
            bbox: None,
            mask: Some(RleMask { dims: (2, 2), counts: vec![5] }),
        };
        assert!(mask.validate(1, (2, 2)).is_err());
    }
}
