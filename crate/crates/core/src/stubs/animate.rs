use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::{Channels, Fps, Frame, FrameSequence, ReferenceCharacter};
use crate::mask::{mask_bbox, Mask};
use crate::pose::{joint, Joint, Keypoint, PoseSequence};

use super::pose::skeleton_from_bbox;

/// `(hip midpoint, shoulder midpoint)` of a skeleton, or `None` when any of
/// the four joints has zero confidence.
pub fn anchor_segment(kps: &[Keypoint]) -> Option<((f64, f64), (f64, f64))> {
    let pts = [Joint::LeftHip, Joint::RightHip, Joint::LeftShoulder, Joint::RightShoulder]
        .map(|j| joint(kps, j));
    if pts.iter().any(|k| k.confidence <= 0.0) {
        return None;
    }
    let mid = |a: &Keypoint, b: &Keypoint| ((a.x + b.x) / 2.0, (a.y + b.y) / 2.0);
    Some((mid(pts[0], pts[1]), mid(pts[2], pts[3])))
}

/// Complex number `re + i·im`, used as scale·rotation.
#[derive(Clone, Copy)]
struct Similarity {
    re: f64,
    im: f64,
    src: (f64, f64),
    dst: (f64, f64),
}

impl Similarity {
    /// Map segment `src` onto segment `dst`.
    fn between(src: ((f64, f64), (f64, f64)), dst: ((f64, f64), (f64, f64))) -> Option<Self> {
        let (sx, sy) = (src.1 .0 - src.0 .0, src.1 .1 - src.0 .1);
        let (dx, dy) = (dst.1 .0 - dst.0 .0, dst.1 .1 - dst.0 .1);
        let n = sx * sx + sy * sy;
        if n == 0.0 || dx * dx + dy * dy == 0.0 {
            return None;
        }
        // z = d / s
        Some(Self {
            re: (dx * sx + dy * sy) / n,
            im: (dy * sx - dx * sy) / n,
            src: src.0,
            dst: dst.0,
        })
    }

    /// Source position that lands on destination `(x, y)`.
    #[inline]
    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (px, py) = (x - self.dst.0, y - self.dst.1);
        let n = self.re * self.re + self.im * self.im;
        // (p) / z = p · conj(z) / |z|²
        let qx = (px * self.re + py * self.im) / n;
        let qy = (py * self.re - px * self.im) / n;
        (qx + self.src.0, qy + self.src.1)
    }
}

/// Bilinear sample of straight-alpha RGBA with premultiplication; taps
/// outside the image are transparent.
fn sample(img: &Frame, x: f64, y: f64) -> [u8; 4] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = [0f64; 4];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wx * wy;
            let (sx, sy) = (x0 + dx, y0 + dy);
            if wgt == 0.0 || sx < 0 || sy < 0 || sx >= w || sy >= h {
                continue;
            }
            let p = img.pixel(sx as u32, sy as u32);
            let a = p[3] as f64 * wgt;
            for c in 0..3 {
                acc[c] += p[c] as f64 * a;
            }
            acc[3] += a;
        }
    }
    let alpha = (acc[3] + 0.5).floor();
    if alpha <= 0.0 {
        return [0; 4];
    }
    let mut out = [0u8; 4];
    for c in 0..3 {
        out[c] = (acc[c] / acc[3] + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
    out[3] = alpha.min(255.0) as u8;
    out
}

/// Warp the reference onto each pose with the similarity that carries its
/// hip→shoulder segment onto the pose's. Output frames are scene-sized RGBA.
pub fn stub_animate(
    reference: &ReferenceCharacter,
    poses: &PoseSequence,
    scene_dims: (u32, u32),
    fps: Fps,
) -> Result<FrameSequence> {
    if poses.is_empty() {
        return Err(Error::Config("pose sequence is empty".into()));
    }
    let matte = Mask::from_alpha(&reference.image);
    let own_anchor;
    let ref_kps: &[Keypoint] = match &reference.anchor {
        Some(kps) => kps,
        None => {
            let bbox = mask_bbox(&matte)
                .ok_or_else(|| Error::Config("reference character has an empty alpha matte".into()))?;
            own_anchor = skeleton_from_bbox(&bbox);
            &own_anchor
        }
    };
    if matte.is_empty() {
        return Err(Error::Config("reference character has an empty alpha matte".into()));
    }
    let ref_seg = anchor_segment(ref_kps)
        .ok_or_else(|| Error::Config("reference anchors have zero confidence".into()))?;

    let (w, h) = scene_dims;
    let frames = poses
        .frames
        .par_iter()
        .enumerate()
        .map(|(k, kps)| {
            let Some(target) = anchor_segment(kps) else {
                return Ok(Frame::filled(w, h, &[0, 0, 0, 0]));
            };
            let sim = Similarity::between(ref_seg, target).ok_or(Error::DegeneratePose { frame: k })?;
            let mut data = vec![0u8; w as usize * h as usize * 4];
            data.chunks_exact_mut(4).enumerate().for_each(|(i, px)| {
                let (x, y) = ((i % w as usize) as f64, (i / w as usize) as f64);
                let (qx, qy) = sim.inverse(x, y);
                px.copy_from_slice(&sample(&reference.image, qx, qy));
            });
            Frame::new(w, h, Channels::Rgba, data)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, fps)
}
