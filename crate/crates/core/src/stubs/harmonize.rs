use tracing::warn;

use crate::color::srgb_lut;
use crate::error::Result;
use crate::frame::{Frame, FrameSequence};
use crate::harmonization::{AffineColor, BlockParams, BlockSchedule, ColorTransformGrid, HarmonizeWorker};
use crate::mask::{Mask, MaskSequence};
use crate::morphology::dilate;
use crate::scalar::Scalar;

/// Floor on the foreground standard deviation in the gain ratio.
pub const STATS_EPSILON: f64 = 1e-4;

/// Per-channel linear-light mean and standard deviation of the foreground
/// and of the background ring around it, pooled over a block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockStatistics<T> {
    pub fg_mean: [T; 3],
    pub fg_std: [T; 3],
    pub ring_mean: [T; 3],
    pub ring_std: [T; 3],
    pub fg_count: usize,
    pub ring_count: usize,
}

#[derive(Default)]
struct Moments<T> {
    n: usize,
    sum: [T; 3],
    sum_sq: [T; 3],
}

impl<T: Scalar> Moments<T> {
    fn push(&mut self, c: [T; 3]) {
        self.n += 1;
        for k in 0..3 {
            self.sum[k] += c[k];
            self.sum_sq[k] += c[k] * c[k];
        }
    }

    fn finish(&self) -> ([T; 3], [T; 3]) {
        if self.n == 0 {
            return ([T::zero(); 3], [T::zero(); 3]);
        }
        let n = T::from_count(self.n);
        let mean = self.sum.map(|s| s / n);
        let std = std::array::from_fn(|k| (self.sum_sq[k] / n - mean[k] * mean[k]).max(T::zero()).sqrt());
        (mean, std)
    }
}

/// Foreground is `mask`; the ring is `dilate(mask, ring_width) ∖ mask`.
pub fn block_statistics<T: Scalar>(frames: &[Frame], masks: &[Mask], ring_width: u32) -> BlockStatistics<T> {
    let lut = srgb_lut::<T>();
    let mut fg = Moments::<T>::default();
    let mut ring = Moments::<T>::default();
    for (f, m) in frames.iter().zip(masks) {
        if m.is_empty() {
            continue;
        }
        let around = dilate(m, ring_width).and_not(m).expect("same dims");
        for i in 0..f.pixel_count() {
            let c = f.rgb_at(i).map(|u| lut[u as usize]);
            if m.bits()[i] {
                fg.push(c);
            } else if around.bits()[i] {
                ring.push(c);
            }
        }
    }
    let (fg_mean, fg_std) = fg.finish();
    let (ring_mean, ring_std) = ring.finish();
    BlockStatistics {
        fg_mean,
        fg_std,
        ring_mean,
        ring_std,
        fg_count: fg.n,
        ring_count: ring.n,
    }
}

/// Statistics-matching harmonizer: one constant gain/bias grid per block.
#[derive(Debug, Clone, Copy)]
pub struct StatsHarmonizer {
    pub ring_width: u32,
    pub stride: u32,
}

impl StatsHarmonizer {
    pub fn grid<T: Scalar>(&self, frames: &[Frame], masks: &[Mask]) -> ColorTransformGrid<T> {
        let dims = frames[0].dims();
        let st = block_statistics::<T>(frames, masks, self.ring_width);
        if st.fg_count == 0 || st.ring_count == 0 {
            warn!("harmonize block has no foreground or no background ring; using identity");
            return ColorTransformGrid::identity(dims, self.stride);
        }
        let eps = T::lit(STATS_EPSILON);
        let gain: [T; 3] = std::array::from_fn(|c| st.ring_std[c] / st.fg_std[c].max(eps));
        let bias: [T; 3] = std::array::from_fn(|c| st.ring_mean[c] - gain[c] * st.fg_mean[c]);
        ColorTransformGrid::uniform(dims, self.stride, AffineColor::gain_bias(gain, bias))
    }
}

impl<T: Scalar> HarmonizeWorker<T> for StatsHarmonizer {
    fn block_params(&self, _: usize, frames: &[Frame], masks: &[Mask]) -> Result<BlockParams<T>> {
        Ok(BlockParams::PerBlock(self.grid(frames, masks)))
    }
}

/// One grid per scheduled block.
pub fn stub_harmonize_params<T: Scalar>(
    composite: &FrameSequence,
    masks: &MaskSequence,
    ring_width: u32,
    stride: u32,
    schedule: &BlockSchedule,
) -> Result<Vec<ColorTransformGrid<T>>> {
    masks.check_against(composite.len(), composite.dims())?;
    let h = StatsHarmonizer { ring_width, stride };
    Ok(schedule
        .entries
        .iter()
        .map(|&(s, e)| h.grid(&composite.frames()[s..e], &masks.masks()[s..e]))
        .collect())
}
