use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::mask::{rle_decode, Mask, MaskSequence};
use crate::prompt::{PointLabel, Prompt, PromptKind};

fn color_dist2(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// 4-connected region around `seed` whose colour lies within `tau` (RGB
/// Euclidean distance) of `reference`.
pub fn flood_fill(frame: &Frame, seed: (u32, u32), reference: [u8; 3], tau: f64) -> Mask {
    let (w, h) = frame.dims();
    let tau2 = tau * tau;
    let mut mask = Mask::empty(w, h);
    let accept = |x: u32, y: u32| color_dist2(frame.rgb_at((y * w + x) as usize), reference) <= tau2;
    if !accept(seed.0, seed.1) {
        return mask;
    }
    let mut queue = VecDeque::from([seed]);
    mask.set(seed.0, seed.1, true);
    while let Some((x, y)) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if nx < w && ny < h && !mask.get(nx, ny) && accept(nx, ny) {
                mask.set(nx, ny, true);
                queue.push_back((nx, ny));
            }
        }
    }
    mask
}

fn prompt_seed(prompt: &Prompt, dims: (u32, u32)) -> Result<(u32, u32)> {
    let (x, y) = match prompt.kind {
        PromptKind::Point => {
            let p = prompt
                .points
                .iter()
                .find(|p| p.label == PointLabel::Positive)
                .ok_or_else(|| Error::Prompt("no positive point".into()))?;
            (p.x.floor(), p.y.floor())
        }
        PromptKind::Box => {
            let b = prompt.bbox.ok_or_else(|| Error::Prompt("box prompt without a box".into()))?;
            (((b.x_min + b.x_max) / 2.0).floor(), ((b.y_min + b.y_max) / 2.0).floor())
        }
        PromptKind::Mask => {
            let rle = prompt
                .mask
                .as_ref()
                .ok_or_else(|| Error::Prompt("mask prompt without a mask".into()))?;
            let m = rle_decode(rle).map_err(|e| Error::Prompt(e.to_string()))?;
            let (cx, cy) = m
                .centroid()
                .ok_or_else(|| Error::Prompt("mask prompt is empty".into()))?;
            (cx.round(), cy.round())
        }
    };
    if x < 0.0 || y < 0.0 || x >= dims.0 as f64 || y >= dims.1 as f64 {
        return Err(Error::Prompt(format!("seed ({x}, {y}) outside {}x{} frame", dims.0, dims.1)));
    }
    Ok((x as u32, y as u32))
}

/// Re-seed at the previous mask's centroid. The track is considered lost
/// (empty mask) when the previous mask is empty or when the pixel under the
/// centroid no longer resembles the prompted colour.
fn propagate(frame: &Frame, previous: &Mask, anchor_color: [u8; 3], tau: f64) -> Mask {
    let (w, h) = frame.dims();
    let Some((cx, cy)) = previous.centroid() else {
        return Mask::empty(w, h);
    };
    let seed = (
        (cx.round().max(0.0) as u32).min(w - 1),
        (cy.round().max(0.0) as u32).min(h - 1),
    );
    let seed_color = frame.rgb_at((seed.1 * w + seed.0) as usize);
    if color_dist2(seed_color, anchor_color) > tau * tau {
        return Mask::empty(w, h);
    }
    flood_fill(frame, seed, seed_color, tau)
}

/// Segment the prompted subject on its frame, then track it forwards and
/// backwards through the clip.
pub fn stub_segment_track(frames: &FrameSequence, prompt: &Prompt, tau: f64) -> Result<MaskSequence> {
    prompt.validate(frames.len(), frames.dims())?;
    let dims = frames.dims();
    let seed = prompt_seed(prompt, dims)?;
    let k = prompt.frame_index;
    let anchor = &frames.frames()[k];
    let anchor_color = anchor.rgb_at((seed.1 * dims.0 + seed.0) as usize);

    let mut masks = vec![Mask::empty(dims.0, dims.1); frames.len()];
    masks[k] = flood_fill(anchor, seed, anchor_color, tau);
    for i in k + 1..frames.len() {
        masks[i] = propagate(&frames.frames()[i], &masks[i - 1], anchor_color, tau);
    }
    for i in (0..k).rev() {
        masks[i] = propagate(&frames.frames()[i], &masks[i + 1], anchor_color, tau);
    }
    MaskSequence::new(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Fps;
    use crate::mask::mask_iou;
    use crate::prompt::PromptBox;

    const RED: [u8; 3] = [220, 20, 30];
    const WHITE: [u8; 3] = [255, 255, 255];

    fn square_clip(n: usize, step: u32) -> (FrameSequence, Vec<Mask>) {
        let mut frames = Vec::new();
        let mut truth = Vec::new();
        for k in 0..n as u32 {
            let x0 = 5 + k * step;
            let m = Mask::from_fn(40, 30, |x, y| (x0..x0 + 10).contains(&x) && (8..18).contains(&y));
            let mut f = Frame::filled(40, 30, &WHITE);
            for y in 0..30 {
                for x in 0..40 {
                    if m.get(x, y) {
                        f.pixel_mut(x, y).copy_from_slice(&RED);
                    }
                }
            }
            frames.push(f);
            truth.push(m);
        }
        (FrameSequence::new(frames, Fps::new(24, 1)).unwrap(), truth)
    }

    #[test]
    fn static_square_is_recovered_exactly() {
        let (clip, truth) = square_clip(4, 0);
        let masks = stub_segment_track(&clip, &Prompt::point(0, 9.0, 12.0), 30.0).unwrap();
        for (m, t) in masks.masks().iter().zip(&truth) {
            assert_eq!(m, t);
        }
    }

    #[test]
    fn moving_square_tracked_forwards_and_backwards() {
        let (clip, truth) = square_clip(8, 1);
        let masks = stub_segment_track(&clip, &Prompt::point(4, 12.0, 10.0), 30.0).unwrap();
        for (m, t) in masks.masks().iter().zip(&truth) {
            assert_eq!(mask_iou(m, t).unwrap(), 1.0);
        }
    }

    /// Breadth-first oracle: pixels reachable through identical colours.
    fn same_color_region(frame: &Frame, seed: (u32, u32)) -> Mask {
        let (w, h) = frame.dims();
        let target = frame.pixel(seed.0, seed.1).to_vec();
        let mut reach = Mask::empty(w, h);
        reach.set(seed.0, seed.1, true);
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    if reach.get(x, y) || frame.pixel(x, y) != target.as_slice() {
                        continue;
                    }
                    let near = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .any(|&(dx, dy)| reach.get_signed(x as i64 + dx, y as i64 + dy));
                    if near {
                        reach.set(x, y, true);
                        changed = true;
                    }
                }
            }
            if !changed {
                return reach;
            }
        }
    }

    #[test]
    fn tau_zero_selects_identical_connected_colour() {
        let mut f = Frame::filled(20, 20, &[10, 10, 10]);
        for i in 0..20 {
            f.pixel_mut(i, 7).copy_from_slice(&[11, 10, 10]); // wall splitting the frame
        }
        f.pixel_mut(3, 3).copy_from_slice(&[10, 10, 11]);
        let clip = FrameSequence::new(vec![f.clone()], Fps::new(24, 1)).unwrap();
        let masks = stub_segment_track(&clip, &Prompt::point(0, 15.0, 2.0), 0.0).unwrap();
        assert_eq!(masks.masks()[0], same_color_region(&f, (15, 2)));
        assert_eq!(masks.masks()[0].count(), 20 * 7 - 1);
    }

    #[test]
    fn box_and_mask_prompts_seed_at_centre() {
        let (clip, truth) = square_clip(2, 0);
        let b = Prompt::boxed(0, PromptBox { x_min: 5.0, y_min: 8.0, x_max: 14.0, y_max: 17.0 });
        assert_eq!(stub_segment_track(&clip, &b, 30.0).unwrap().masks()[0], truth[0]);
        let m = Prompt {
            frame_index: 1,
            kind: PromptKind::Mask,
            points: vec![],
            bbox: None,
            mask: Some(crate::mask::rle_encode(&truth[1])),
        };
        assert_eq!(stub_segment_track(&clip, &m, 30.0).unwrap().masks()[1], truth[1]);
    }

    #[test]
    fn seed_outside_frame_is_prompt_error() {
        let (clip, _) = square_clip(1, 0);
        assert!(matches!(
            stub_segment_track(&clip, &Prompt::point(0, 40.0, 3.0), 30.0),
            Err(Error::Prompt(_))
        ));
    }

    #[test]
    fn translation_equivariant() {
        let (clip, _) = square_clip(5, 1);
        let shifted: Vec<Frame> = clip
            .frames()
            .iter()
            .map(|f| {
                let mut g = Frame::filled(40, 30, &WHITE);
                for y in 0..27 {
                    for x in 0..38 {
                        g.pixel_mut(x + 2, y + 3).copy_from_slice(f.pixel(x, y));
                    }
                }
                g
            })
            .collect();
        let shifted = FrameSequence::new(shifted, clip.fps()).unwrap();
        let a = stub_segment_track(&clip, &Prompt::point(0, 8.0, 10.0), 30.0).unwrap();
        let b = stub_segment_track(&shifted, &Prompt::point(0, 10.0, 13.0), 30.0).unwrap();
        for (ma, mb) in a.masks().iter().zip(b.masks()) {
            let moved = Mask::from_fn(40, 30, |x, y| x >= 2 && y >= 3 && ma.get(x - 2, y - 3));
            assert_eq!(&moved, mb);
        }
    }
}
