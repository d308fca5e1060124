use rayon::prelude::*;

use crate::color::{linear_to_srgb, srgb_lut};
use crate::edge_refine::InpaintWorker;
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::mask::{Mask, MaskSequence};
use crate::morphology::dilate;
use crate::scalar::Scalar;

/// Diffuse known colours into the masked region.
///
/// Masked pixels start at the mean of the one-pixel ring around the mask and
/// are then updated by `iters` Jacobi sweeps, each setting a pixel to the
/// mean of its in-image 4-neighbours. Unmasked pixels are never written.
pub fn inpaint_linear<T: Scalar>(
    pixels: &mut [[T; 3]],
    width: u32,
    height: u32,
    mask: &Mask,
    iters: usize,
) -> Result<()> {
    let (w, h) = (width as usize, height as usize);
    if pixels.len() != w * h || mask.dims() != (width, height) {
        return Err(Error::dims("pixel buffer and mask disagree"));
    }
    if mask.is_empty() {
        return Ok(());
    }
    let ring = dilate(mask, 1).and_not(mask)?;
    let ring_n = ring.count();
    if ring_n == 0 {
        return Err(Error::Uninpaintable { frame: 0 });
    }
    let mut seed = [T::zero(); 3];
    for (i, _) in ring.bits().iter().enumerate().filter(|(_, &b)| b) {
        for c in 0..3 {
            seed[c] += pixels[i][c];
        }
    }
    let seed = seed.map(|s| s / T::from_count(ring_n));

    let holes: Vec<usize> = (0..w * h).filter(|&i| mask.bits()[i]).collect();
    let neighbours: Vec<Vec<usize>> = holes
        .iter()
        .map(|&i| {
            let (x, y) = (i % w, i / w);
            let mut n = Vec::with_capacity(4);
            if x > 0 {
                n.push(i - 1);
            }
            if x + 1 < w {
                n.push(i + 1);
            }
            if y > 0 {
                n.push(i - w);
            }
            if y + 1 < h {
                n.push(i + w);
            }
            n
        })
        .collect();
    for &i in &holes {
        pixels[i] = seed;
    }
    let mut next = vec![[T::zero(); 3]; holes.len()];
    for _ in 0..iters {
        for (k, nb) in neighbours.iter().enumerate() {
            let mut acc = [T::zero(); 3];
            for &j in nb {
                for c in 0..3 {
                    acc[c] += pixels[j][c];
                }
            }
            let n = T::from_count(nb.len());
            next[k] = acc.map(|a| a / n);
        }
        for (k, &i) in holes.iter().enumerate() {
            pixels[i] = next[k];
        }
    }
    Ok(())
}

fn inpaint_frame(index: usize, frame: &Frame, mask: &Mask, iters: usize) -> Result<Frame> {
    if mask.is_empty() {
        return Ok(frame.clone());
    }
    if mask.is_full() {
        return Err(Error::Uninpaintable { frame: index });
    }
    let lut = srgb_lut::<f64>();
    let mut lin: Vec<[f64; 3]> = (0..frame.pixel_count())
        .map(|i| frame.rgb_at(i).map(|u| lut[u as usize]))
        .collect();
    inpaint_linear(&mut lin, frame.width(), frame.height(), mask, iters).map_err(|e| match e {
        Error::Uninpaintable { .. } => Error::Uninpaintable { frame: index },
        other => other,
    })?;
    let mut out = frame.clone();
    let ch = frame.channels().count();
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        for c in 0..3 {
            out.data_mut()[i * ch + c] = linear_to_srgb(lin[i][c]);
        }
    }
    Ok(out)
}

/// Inpaint every frame's masked pixels with [`inpaint_linear`].
pub fn stub_inpaint(frames: &FrameSequence, masks: &MaskSequence, iters: usize) -> Result<FrameSequence> {
    masks.check_against(frames.len(), frames.dims())?;
    let out = frames
        .frames()
        .par_iter()
        .zip(masks.masks().par_iter())
        .enumerate()
        .map(|(k, (f, m))| inpaint_frame(k, f, m, iters))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(out, frames.fps())
}

/// In-process inpaint worker backed by [`stub_inpaint`].
#[derive(Debug, Clone, Copy)]
pub struct StubInpainter {
    pub iters: usize,
}

impl InpaintWorker for StubInpainter {
    fn inpaint(&self, frames: &FrameSequence, masks: &MaskSequence) -> Result<FrameSequence> {
        stub_inpaint(frames, masks, self.iters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Fps;

    #[test]
    fn one_pixel_hole_converges_to_neighbour_mean() {
        // hand-run: ring = {0.2, 0.4} -> seed 0.3; each sweep averages left/right -> 0.3
        let mut px = vec![[0.2f64; 3], [0.9; 3], [0.4; 3]];
        let mask = Mask::new(3, 1, vec![false, true, false]).unwrap();
        inpaint_linear(&mut px, 3, 1, &mask, 50).unwrap();
        for c in 0..3 {
            assert!((px[1][c] - 0.3).abs() < 1e-12);
        }
        assert_eq!(px[0], [0.2; 3]);
        assert_eq!(px[2], [0.4; 3]);
    }

    #[test]
    fn two_pixel_hole_jacobi_recurrence() {
        // [0.0, a, b, 1.0]: a' = (0 + b)/2, b' = (a + 1)/2, fixed point a=1/3, b=2/3
        let mut px = vec![[0.0f64; 3], [0.0; 3], [0.0; 3], [1.0; 3]];
        let mask = Mask::new(4, 1, vec![false, true, true, false]).unwrap();
        inpaint_linear(&mut px, 4, 1, &mask, 200).unwrap();
        assert!((px[1][0] - 1.0 / 3.0).abs() < 1e-9);
        assert!((px[2][0] - 2.0 / 3.0).abs() < 1e-9);
        // and one sweep from the ring-mean seed of 0.5
        let mut one = vec![[0.0f32; 3], [0.0; 3], [0.0; 3], [1.0; 3]];
        inpaint_linear(&mut one, 4, 1, &mask, 1).unwrap();
        assert_eq!(one[1][0], 0.25);
        assert_eq!(one[2][0], 0.75);
    }

    #[test]
    fn constant_frame_is_a_fixed_point() {
        let f = Frame::filled(12, 10, &[91, 17, 200]);
        let m = Mask::from_fn(12, 10, |x, y| (3..8).contains(&x) && (2..9).contains(&y));
        let clip = FrameSequence::new(vec![f.clone(); 2], Fps::new(24, 1)).unwrap();
        let masks = MaskSequence::new(vec![m; 2]).unwrap();
        let out = stub_inpaint(&clip, &masks, 200).unwrap();
        assert_eq!(out.id(), clip.id());
    }

    #[test]
    fn empty_mask_is_untouched_and_full_mask_fails() {
        let mut f = Frame::filled(6, 6, &[1, 2, 3]);
        f.pixel_mut(2, 2).copy_from_slice(&[200, 100, 50]);
        let clip = FrameSequence::new(vec![f.clone(), f], Fps::new(24, 1)).unwrap();
        let empty = MaskSequence::new(vec![Mask::empty(6, 6); 2]).unwrap();
        assert_eq!(stub_inpaint(&clip, &empty, 10).unwrap().id(), clip.id());
        let full = MaskSequence::new(vec![Mask::empty(6, 6), Mask::filled(6, 6, true)]).unwrap();
        assert!(matches!(
            stub_inpaint(&clip, &full, 10),
            Err(Error::Uninpaintable { frame: 1 })
        ));
    }

    #[test]
    fn unmasked_pixels_never_change() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let f = Frame::new(
            16,
            16,
            crate::frame::Channels::Rgb,
            (0..16 * 16 * 3).map(|_| rng.gen()).collect(),
        )
        .unwrap();
        let m = Mask::from_fn(16, 16, |_, _| rng.gen_bool(0.3));
        let out = inpaint_frame(0, &f, &m, 30).unwrap();
        for i in 0..256 {
            if !m.bits()[i] {
                assert_eq!(out.rgb_at(i), f.rgb_at(i));
            }
        }
    }
}
