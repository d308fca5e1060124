//! Alpha-over composition in linear light.
//!
//! Foreground frames carry straight alpha. Blending happens on linear-light
//! values; the result is quantized back to sRGB once, with round-half-up.

use rayon::prelude::*;

use crate::color::{linear_to_srgb, srgb_lut};
use crate::error::{Error, Result};
use crate::frame::{Channels, Frame, FrameSequence};
use crate::mask::MaskSequence;
use crate::scalar::Scalar;

/// `fg·α + bg·(1−α)` per pixel; output is RGB.
pub fn composite_over<T: Scalar>(fg: &Frame, bg: &Frame) -> Result<Frame> {
    if fg.dims() != bg.dims() {
        return Err(Error::dims(format!(
            "foreground {:?} vs background {:?}",
            fg.dims(),
            bg.dims()
        )));
    }
    if fg.channels() != Channels::Rgba {
        return Err(Error::dims("foreground must be RGBA"));
    }
    let lut = srgb_lut::<T>();
    let bg = bg.to_rgb();
    let mut out = bg.clone().into_data();
    let fg_data = fg.data();
    let width = fg.width() as usize;
    out.par_chunks_mut(width * 3).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let i = y * width + x;
            let f = &fg_data[i * 4..i * 4 + 4];
            let a = f[3];
            let o = &mut row[x * 3..x * 3 + 3];
            match a {
                0 => {}
                255 => o.copy_from_slice(&f[..3]),
                _ => {
                    let alpha = T::from_count(a as usize) / T::lit(255.0);
                    for c in 0..3 {
                        let v = lut[f[c] as usize] * alpha + lut[o[c] as usize] * (T::one() - alpha);
                        o[c] = linear_to_srgb(v);
                    }
                }
            }
        }
    });
    Frame::new(bg.width(), bg.height(), Channels::Rgb, out)
}

pub fn composite_sequence<T: Scalar>(fg: &FrameSequence, bg: &FrameSequence) -> Result<FrameSequence> {
    if fg.len() != bg.len() {
        return Err(Error::Length {
            expected: bg.len(),
            actual: fg.len(),
        });
    }
    let frames = fg
        .frames()
        .par_iter()
        .zip(bg.frames().par_iter())
        .map(|(f, b)| composite_over::<T>(f, b))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, bg.fps())
}

/// Attach masks as alpha: 255 where set, 0 elsewhere.
pub fn mask_to_alpha(frames: &FrameSequence, masks: &MaskSequence) -> Result<FrameSequence> {
    masks.check_against(frames.len(), frames.dims())?;
    let out = frames
        .frames()
        .iter()
        .zip(masks.masks())
        .map(|(f, m)| {
            let data: Vec<u8> = (0..f.pixel_count())
                .flat_map(|i| {
                    let [r, g, b] = f.rgb_at(i);
                    [r, g, b, if m.bits()[i] { 255 } else { 0 }]
                })
                .collect();
            Frame::new(f.width(), f.height(), Channels::Rgba, data)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(out, frames.fps())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Fps;
    use crate::mask::Mask;
    use rand::{Rng, SeedableRng};

    fn random_frame(rng: &mut impl Rng, w: u32, h: u32, channels: Channels) -> Frame {
        let n = (w * h) as usize * channels.count();
        Frame::new(w, h, channels, (0..n).map(|_| rng.gen()).collect()).unwrap()
    }

    /// Independent per-pixel reference using the closed-form transfer curves in f64.
    fn oracle_over(fg: &Frame, bg: &Frame) -> Frame {
        fn dec(u: u8) -> f64 {
            let c = u as f64 / 255.0;
            if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) }
        }
        fn enc(v: f64) -> u8 {
            let v = v.clamp(0.0, 1.0);
            let c = if v <= 0.0031308 { v * 12.92 } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 };
            (c * 255.0 + 0.5).floor() as u8
        }
        let mut data = Vec::new();
        for i in 0..fg.pixel_count() {
            let a = fg.alpha_at(i) as f64 / 255.0;
            let f = fg.rgb_at(i);
            let b = bg.rgb_at(i);
            for c in 0..3 {
                data.push(enc(dec(f[c]) * a + dec(b[c]) * (1.0 - a)));
            }
        }
        Frame::new(fg.width(), fg.height(), Channels::Rgb, data).unwrap()
    }

    #[test]
    fn white_half_alpha_over_black_is_188() {
        let fg = Frame::filled(2, 2, &[255, 255, 255, 128]);
        let bg = Frame::filled(2, 2, &[0, 0, 0]);
        let out = composite_over::<f64>(&fg, &bg).unwrap();
        assert_eq!(out.pixel(0, 0), &[188, 188, 188]);
        let out32 = composite_over::<f32>(&fg, &bg).unwrap();
        assert_eq!(out32, out);
    }

    #[test]
    fn alpha_extremes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let bg = random_frame(&mut rng, 9, 7, Channels::Rgb);
        let mut fg = random_frame(&mut rng, 9, 7, Channels::Rgba);
        fg.data_mut().chunks_exact_mut(4).for_each(|p| p[3] = 0);
        assert_eq!(composite_over::<f64>(&fg, &bg).unwrap(), bg);
        fg.data_mut().chunks_exact_mut(4).for_each(|p| p[3] = 255);
        assert_eq!(composite_over::<f64>(&fg, &bg).unwrap(), fg.to_rgb());
    }

    #[test]
    fn matches_reference_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let fps = Fps::new(24, 1);
        let fg: Vec<_> = (0..3).map(|_| random_frame(&mut rng, 16, 12, Channels::Rgba)).collect();
        let bg: Vec<_> = (0..3).map(|_| random_frame(&mut rng, 16, 12, Channels::Rgb)).collect();
        let fg = FrameSequence::new(fg, fps).unwrap();
        let bg = FrameSequence::new(bg, fps).unwrap();
        let out = composite_sequence::<f64>(&fg, &bg).unwrap();
        for i in 0..3 {
            assert_eq!(out.frames()[i], oracle_over(&fg.frames()[i], &bg.frames()[i]));
        }
    }

    #[test]
    fn zero_alpha_sequence_keeps_background_hash() {
        let fps = Fps::new(24, 1);
        let bg = FrameSequence::new(vec![Frame::filled(4, 4, &[1, 2, 3]); 3], fps).unwrap();
        let fg = FrameSequence::new(vec![Frame::filled(4, 4, &[200, 0, 0, 0]); 3], fps).unwrap();
        assert_eq!(composite_sequence::<f64>(&fg, &bg).unwrap().id(), bg.id());
    }

    #[test]
    fn length_and_dim_errors() {
        let fps = Fps::new(24, 1);
        let bg = FrameSequence::new(vec![Frame::filled(4, 4, &[1, 2, 3]); 5], fps).unwrap();
        let fg = FrameSequence::new(vec![Frame::filled(4, 4, &[0, 0, 0, 0]); 4], fps).unwrap();
        assert!(matches!(composite_sequence::<f64>(&fg, &bg), Err(Error::Length { .. })));
        let small = Frame::filled(3, 4, &[0, 0, 0, 0]);
        assert!(matches!(
            composite_over::<f64>(&small, &bg.frames()[0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn half_alpha_over_equal_colors_within_one_code() {
        for u in 0..=255u8 {
            let fg = Frame::filled(1, 1, &[u, u, u, 128]);
            let bg = Frame::filled(1, 1, &[u, u, u]);
            let out = composite_over::<f64>(&fg, &bg).unwrap();
            assert!((out.pixel(0, 0)[0] as i32 - u as i32).abs() <= 1);
        }
    }

    #[test]
    fn binary_alpha_composite_is_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let bg = random_frame(&mut rng, 10, 10, Channels::Rgb);
        let mut fg = random_frame(&mut rng, 10, 10, Channels::Rgba);
        fg.data_mut()
            .chunks_exact_mut(4)
            .for_each(|p| p[3] = if p[3] > 127 { 255 } else { 0 });
        let once = composite_over::<f64>(&fg, &bg).unwrap();
        let twice = composite_over::<f64>(&fg, &once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mask_to_alpha_cases() {
        let fps = Fps::new(24, 1);
        let frames = FrameSequence::new(vec![Frame::filled(4, 4, &[9, 9, 9]); 3], fps).unwrap();
        let checker = Mask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        let masks =
            MaskSequence::new(vec![Mask::empty(4, 4), Mask::filled(4, 4, true), checker.clone()])
                .unwrap();
        let out = mask_to_alpha(&frames, &masks).unwrap();
        assert!((0..16).all(|i| out.frames()[0].alpha_at(i) == 0));
        assert!((0..16).all(|i| out.frames()[1].alpha_at(i) == 255));
        for i in 0..16 {
            assert_eq!(out.frames()[2].alpha_at(i), checker.bits()[i] as u8 * 255);
            assert_eq!(out.frames()[2].rgb_at(i), [9, 9, 9]);
        }
        let short = MaskSequence::new(vec![Mask::empty(4, 4)]).unwrap();
        assert!(matches!(mask_to_alpha(&frames, &short), Err(Error::Length { .. })));
    }
}
