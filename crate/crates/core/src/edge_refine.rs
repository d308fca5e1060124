//! Edge-aware refinement: re-inpaint a thin band around the inserted
//! character's contour and merge the result back through the band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::mask::{Mask, MaskSequence};
use crate::morphology::edge_band;

/// Band radii, expressed at `scale_reference_width` and rescaled per clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeBandConfig {
    pub r_out: u32,
    pub r_in: u32,
    #[serde(default = "default_reference_width")]
    pub scale_reference_width: u32,
}

fn default_reference_width() -> u32 {
    1024
}

impl Default for EdgeBandConfig {
    fn default() -> Self {
        Self {
            r_out: 6,
            r_in: 2,
            scale_reference_width: default_reference_width(),
        }
    }
}

impl EdgeBandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_out < 1 {
            return Err(Error::Config("edge r_out must be at least 1".into()));
        }
        if self.scale_reference_width == 0 {
            return Err(Error::Config("scale_reference_width must be positive".into()));
        }
        Ok(())
    }

    /// Radii for a frame `width` pixels wide. A configured nonzero radius
    /// never scales below 1; a zero radius stays zero.
    pub fn scaled(&self, width: u32) -> (u32, u32) {
        let scale = width as f64 / self.scale_reference_width as f64;
        let s = |r: u32| {
            if r == 0 {
                0
            } else {
                ((r as f64 * scale).round() as u32).max(1)
            }
        };
        (s(self.r_out), s(self.r_in))
    }
}

pub fn edge_band_sequence(masks: &MaskSequence, cfg: &EdgeBandConfig) -> Result<MaskSequence> {
    cfg.validate()?;
    let (r_out, r_in) = cfg.scaled(masks.dims().0);
    MaskSequence::new(masks.masks().iter().map(|m| edge_band(m, r_out, r_in)).collect())
}

/// Fills masked pixels of a clip. Implemented by the stub and by remote workers.
pub trait InpaintWorker: Sync {
    fn inpaint(&self, frames: &FrameSequence, masks: &MaskSequence) -> Result<FrameSequence>;
}

/// Check a worker's output against its input and merge through `masks`.
///
/// Any change outside the mask is a contract violation, as is a change in
/// length or frame shape.
pub fn merge_through_mask(
    input: &FrameSequence,
    output: &FrameSequence,
    masks: &MaskSequence,
) -> Result<FrameSequence> {
    if output.len() != input.len() {
        return Err(Error::ContractViolation(format!(
            "worker returned {} frames for {}",
            output.len(),
            input.len()
        )));
    }
    let mut merged = Vec::with_capacity(input.len());
    for (k, ((src, got), mask)) in input.frames().iter().zip(output.frames()).zip(masks.masks()).enumerate() {
        if !src.same_shape(got) {
            return Err(Error::ContractViolation(format!(
                "frame {k}: worker returned {:?}x{:?}, expected {:?}x{:?}",
                got.dims(),
                got.channels(),
                src.dims(),
                src.channels()
            )));
        }
        merged.push(merge_frame(k, src, got, mask)?);
    }
    FrameSequence::new(merged, input.fps())
}

fn merge_frame(k: usize, src: &Frame, got: &Frame, mask: &Mask) -> Result<Frame> {
    let ch = src.channels().count();
    let mut out = src.clone();
    for (i, &inside) in mask.bits().iter().enumerate() {
        let range = i * ch..(i + 1) * ch;
        if inside {
            out.data_mut()[range.clone()].copy_from_slice(&got.data()[range]);
        } else if src.data()[range.clone()] != got.data()[range] {
            let w = src.width() as usize;
            return Err(Error::ContractViolation(format!(
                "frame {k}: worker modified pixel ({}, {}) outside the mask",
                i % w,
                i / w
            )));
        }
    }
    Ok(out)
}

/// Inpaint only inside `bands`; pixels outside are byte-identical to `frames`.
pub fn refine_edges<W: InpaintWorker + ?Sized>(
    frames: &FrameSequence,
    bands: &MaskSequence,
    worker: &W,
) -> Result<FrameSequence> {
    bands.check_against(frames.len(), frames.dims())?;
    if bands.masks().iter().all(Mask::is_empty) {
        return Ok(frames.clone());
    }
    let out = worker.inpaint(frames, bands).map_err(|e| match e {
        e @ Error::ContractViolation(_) => e,
        other => other.in_stage("edge_refine"),
    })?;
    merge_through_mask(frames, &out, bands)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Fps;
    use crate::morphology::oracle;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<F>(AtomicUsize, F);

    impl<F: Fn(&FrameSequence) -> FrameSequence + Sync> InpaintWorker for Counting<F> {
        fn inpaint(&self, frames: &FrameSequence, _: &MaskSequence) -> Result<FrameSequence> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok((self.1)(frames))
        }
    }

    fn clip(n: usize) -> FrameSequence {
        let frames = (0..n)
            .map(|k| {
                let mut f = Frame::filled(16, 16, &[40, 80, 120]);
                f.pixel_mut(k as u32, 3).copy_from_slice(&[200, 10, 10]);
                f
            })
            .collect();
        FrameSequence::new(frames, Fps::new(24, 1)).unwrap()
    }

    #[test]
    fn radii_scale_with_width() {
        let cfg = EdgeBandConfig::default();
        assert_eq!(cfg.scaled(1024), (6, 2));
        assert_eq!(cfg.scaled(2048), (12, 4));
        assert_eq!(cfg.scaled(512), (3, 1));
        assert_eq!(cfg.scaled(128), (1, 1));
        let no_inner = EdgeBandConfig { r_in: 0, ..cfg };
        assert_eq!(no_inner.scaled(128), (1, 0));
        assert!(EdgeBandConfig { r_out: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn empty_masks_give_empty_bands() {
        let masks = MaskSequence::new(vec![Mask::empty(16, 16); 3]).unwrap();
        let bands = edge_band_sequence(&masks, &EdgeBandConfig::default()).unwrap();
        assert!(bands.masks().iter().all(Mask::is_empty));
    }

    #[test]
    fn square_band_matches_oracle() {
        let square = Mask::from_fn(64, 64, |x, y| (20..40).contains(&x) && (24..44).contains(&y));
        let masks = MaskSequence::new(vec![square.clone()]).unwrap();
        let cfg = EdgeBandConfig { r_out: 3, r_in: 2, scale_reference_width: 64 };
        let bands = edge_band_sequence(&masks, &cfg).unwrap();
        assert_eq!(bands.masks()[0], oracle::band(&square, 3, 2));
    }

    #[test]
    fn band_nonempty_for_partial_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let p = rng.gen_range(0.01..0.99);
            let m = Mask::from_fn(24, 24, |_, _| rng.gen_bool(p));
            if m.is_empty() || m.is_full() {
                continue;
            }
            let bands = edge_band_sequence(&MaskSequence::new(vec![m]).unwrap(), &EdgeBandConfig::default())
                .unwrap();
            assert!(bands.masks()[0].count() > 0);
        }
    }

    #[test]
    fn contour_pixels_lie_in_band() {
        let m = Mask::from_fn(40, 40, |x, y| {
            let (dx, dy) = (x as f64 - 20.0, y as f64 - 18.0);
            dx * dx / 120.0 + dy * dy / 60.0 <= 1.0
        });
        let band = edge_band(&m, 1, 1);
        for y in 0..40i64 {
            for x in 0..40i64 {
                let here = m.get_signed(x, y);
                let crosses = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|&(dx, dy)| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0 && ny >= 0 && nx < 40 && ny < 40 && m.get_signed(nx, ny) != here
                    });
                if crosses {
                    assert!(band.get(x as u32, y as u32), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn empty_bands_skip_the_worker() {
        let frames = clip(3);
        let bands = MaskSequence::new(vec![Mask::empty(16, 16); 3]).unwrap();
        let worker = Counting(AtomicUsize::new(0), |f: &FrameSequence| f.clone());
        let out = refine_edges(&frames, &bands, &worker).unwrap();
        assert_eq!(out.id(), frames.id());
        assert_eq!(worker.0.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn out_of_band_write_is_rejected() {
        let frames = clip(2);
        let band = Mask::from_fn(16, 16, |x, _| x < 4);
        let bands = MaskSequence::new(vec![band; 2]).unwrap();
        let worker = Counting(AtomicUsize::new(0), |f: &FrameSequence| {
            let mut v = f.frames().to_vec();
            v[1].pixel_mut(10, 10)[0] ^= 0xff;
            FrameSequence::new(v, f.fps()).unwrap()
        });
        assert!(matches!(
            refine_edges(&frames, &bands, &worker),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn in_band_changes_are_kept() {
        let frames = clip(2);
        let band = Mask::from_fn(16, 16, |x, _| x < 4);
        let bands = MaskSequence::new(vec![band.clone(); 2]).unwrap();
        let worker = Counting(AtomicUsize::new(0), |f: &FrameSequence| {
            let v = f
                .frames()
                .iter()
                .map(|fr| {
                    let mut fr = fr.clone();
                    fr.pixel_mut(1, 1).copy_from_slice(&[0, 0, 0]);
                    fr
                })
                .collect();
            FrameSequence::new(v, f.fps()).unwrap()
        });
        let out = refine_edges(&frames, &bands, &worker).unwrap();
        assert_eq!(out.frames()[0].pixel(1, 1), &[0, 0, 0]);
        assert_eq!(out.frames()[1].pixel(9, 9), frames.frames()[1].pixel(9, 9));
    }
}
