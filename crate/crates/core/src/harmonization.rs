//! Lighting-aware harmonization of the inserted foreground.
//!
//! A harmonization worker supplies per-pixel affine color transforms on a
//! coarse grid, either once per temporal block or once per frame. Blocks
//! overlap; inside an overlap the two blocks' parameters are crossfaded
//! linearly so the transform changes gradually from one block to the next.
//! Parameters are blended rather than output pixels, so every pixel is
//! clamped and quantized exactly once.

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::color::{linear_to_srgb, srgb_lut, LinearColor};
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::mask::{Mask, MaskSequence};
use crate::scalar::Scalar;

pub const DEFAULT_STRIDE: u32 = 8;
pub const DEFAULT_BLOCK_LEN: usize = 16;
pub const DEFAULT_OVERLAP: usize = 4;

/// 3×4 affine map on linear RGB: `out_c = Σ_k m[c][k]·in_k + m[c][3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AffineColor<T>(pub [[T; 4]; 3]);

impl<T: Scalar> AffineColor<T> {
    pub fn identity() -> Self {
        Self::gain_bias([T::one(); 3], [T::zero(); 3])
    }

    /// Diagonal gain with per-channel bias.
    pub fn gain_bias(gain: [T; 3], bias: [T; 3]) -> Self {
        let mut m = [[T::zero(); 4]; 3];
        for c in 0..3 {
            m[c][c] = gain[c];
            m[c][3] = bias[c];
        }
        Self(m)
    }

    pub fn uniform_gain(g: T) -> Self {
        Self::gain_bias([g; 3], [T::zero(); 3])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    #[inline]
    pub fn apply(&self, c: [T; 3]) -> [T; 3] {
        std::array::from_fn(|row| {
            let m = &self.0[row];
            m[0] * c[0] + m[1] * c[1] + m[2] * c[2] + m[3]
        })
    }

    /// The map `x ↦ outer(self(x))`.
    pub fn then(&self, outer: &AffineColor<T>) -> AffineColor<T> {
        let a = &self.0;
        let b = &outer.0;
        let mut m = [[T::zero(); 4]; 3];
        for r in 0..3 {
            for k in 0..3 {
                m[r][k] = (0..3).fold(T::zero(), |acc, j| acc + b[r][j] * a[j][k]);
            }
            m[r][3] = (0..3).fold(b[r][3], |acc, j| acc + b[r][j] * a[j][3]);
        }
        AffineColor(m)
    }

    fn map2(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        let mut m = self.0;
        for (r, row) in m.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = f(*v, other.0[r][k]);
            }
        }
        Self(m)
    }
}

/// Element-wise `(1−t)·a + t·b` over all twelve coefficients.
pub fn blend_params<T: Scalar>(a: &AffineColor<T>, b: &AffineColor<T>, t: T) -> AffineColor<T> {
    a.map2(b, |x, y| if x == y { x } else { (T::one() - t) * x + t * y })
}

/// Coarse grid of affine transforms, one per `stride × stride` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorTransformGrid<T> {
    stride: u32,
    grid_w: u32,
    grid_h: u32,
    cells: Vec<AffineColor<T>>,
}

impl<T: Scalar> ColorTransformGrid<T> {
    /// Cell counts needed to cover `dims` at `stride`.
    pub fn cells_for(dims: (u32, u32), stride: u32) -> (u32, u32) {
        (dims.0.div_ceil(stride), dims.1.div_ceil(stride))
    }

    pub fn new(stride: u32, grid_w: u32, grid_h: u32, cells: Vec<AffineColor<T>>) -> Result<Self> {
        if stride == 0 || grid_w == 0 || grid_h == 0 {
            return Err(Error::Config("grid stride and size must be positive".into()));
        }
        if cells.len() != (grid_w * grid_h) as usize {
            return Err(Error::dims(format!(
                "{grid_w}x{grid_h} grid needs {} cells, got {}",
                grid_w * grid_h,
                cells.len()
            )));
        }
        Ok(Self {
            stride,
            grid_w,
            grid_h,
            cells,
        })
    }

    pub fn uniform(dims: (u32, u32), stride: u32, cell: AffineColor<T>) -> Self {
        let (gw, gh) = Self::cells_for(dims, stride.max(1));
        Self {
            stride: stride.max(1),
            grid_w: gw,
            grid_h: gh,
            cells: vec![cell; (gw * gh) as usize],
        }
    }

    pub fn identity(dims: (u32, u32), stride: u32) -> Self {
        Self::uniform(dims, stride, AffineColor::identity())
    }

    pub fn from_fn(
        dims: (u32, u32),
        stride: u32,
        mut f: impl FnMut(u32, u32) -> AffineColor<T>,
    ) -> Self {
        let (gw, gh) = Self::cells_for(dims, stride);
        let mut cells = Vec::with_capacity((gw * gh) as usize);
        for j in 0..gh {
            for i in 0..gw {
                cells.push(f(i, j));
            }
        }
        Self {
            stride,
            grid_w: gw,
            grid_h: gh,
            cells,
        }
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn size(&self) -> (u32, u32) {
        (self.grid_w, self.grid_h)
    }

    pub fn cells(&self) -> &[AffineColor<T>] {
        &self.cells
    }

    pub fn cell(&self, i: u32, j: u32) -> &AffineColor<T> {
        &self.cells[(j * self.grid_w + i) as usize]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.cells.iter().position(|c| !c.is_finite()) {
            Some(cell) => Err(Error::Param { cell }),
            None => Ok(()),
        }
    }

    pub fn covers(&self, dims: (u32, u32)) -> bool {
        let (gw, gh) = Self::cells_for(dims, self.stride);
        self.grid_w >= gw && self.grid_h >= gh
    }

    /// Cell-wise [`blend_params`]; grids must share stride and size.
    pub fn blend(&self, other: &Self, t: T) -> Result<Self> {
        if self.stride != other.stride || self.size() != other.size() {
            return Err(Error::dims("blending grids of different layout"));
        }
        Ok(Self {
            cells: self
                .cells
                .iter()
                .zip(&other.cells)
                .map(|(a, b)| blend_params(a, b, t))
                .collect(),
            ..*self
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GridRepr<T> {
    stride: u32,
    grid: Vec<Vec<AffineColor<T>>>,
}

impl<T: Scalar> Serialize for ColorTransformGrid<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GridRepr {
            stride: self.stride,
            grid: self.cells.chunks(self.grid_w as usize).map(<[_]>::to_vec).collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for ColorTransformGrid<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = GridRepr::<T>::deserialize(d)?;
        let gh = repr.grid.len() as u32;
        let gw = repr.grid.first().map_or(0, Vec::len) as u32;
        if repr.grid.iter().any(|row| row.len() as u32 != gw) {
            return Err(D::Error::custom("ragged color transform grid"));
        }
        let cells = repr.grid.into_iter().flatten().collect();
        Self::new(repr.stride, gw, gh, cells).map_err(D::Error::custom)
    }
}

/// Full-resolution parameters, one affine map per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamField<T> {
    width: u32,
    height: u32,
    params: Vec<AffineColor<T>>,
}

impl<T: Scalar> ParamField<T> {
    pub fn uniform(dims: (u32, u32), p: AffineColor<T>) -> Self {
        Self {
            width: dims.0,
            height: dims.1,
            params: vec![p; dims.0 as usize * dims.1 as usize],
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn at(&self, x: u32, y: u32) -> &AffineColor<T> {
        &self.params[y as usize * self.width as usize + x as usize]
    }

    pub fn params(&self) -> &[AffineColor<T>] {
        &self.params
    }
}

#[inline]
fn lerp_affine<T: Scalar>(a: &AffineColor<T>, b: &AffineColor<T>, t: T) -> AffineColor<T> {
    a.map2(b, |x, y| x + t * (y - x))
}

/// Per-axis sample position: cell `i` is centred at `(i + 0.5)·stride`,
/// pixels sample at their integer coordinate, clamped at the borders.
fn axis_weights<T: Scalar>(p: u32, stride: u32, cells: u32) -> (u32, u32, T) {
    let g = T::from_count(p as usize) / T::from_count(stride as usize) - T::lit(0.5);
    let max = T::from_count(cells as usize - 1);
    let g = g.max(T::zero()).min(max);
    let i0 = g.floor().to_u32().unwrap_or(0);
    let i1 = (i0 + 1).min(cells - 1);
    (i0, i1, g - T::from_count(i0 as usize))
}

/// Bilinear lift of each coefficient from cell centres to pixels.
pub fn upsample_grid<T: Scalar>(grid: &ColorTransformGrid<T>, dims: (u32, u32)) -> Result<ParamField<T>> {
    if !grid.covers(dims) {
        return Err(Error::dims(format!(
            "grid {:?} at stride {} does not cover {dims:?}",
            grid.size(),
            grid.stride
        )));
    }
    let (w, h) = dims;
    let xs: Vec<(u32, u32, T)> = (0..w).map(|x| axis_weights(x, grid.stride, grid.grid_w)).collect();
    let mut params = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        let (j0, j1, ty) = axis_weights::<T>(y, grid.stride, grid.grid_h);
        for &(i0, i1, tx) in &xs {
            let top = lerp_affine(grid.cell(i0, j0), grid.cell(i1, j0), tx);
            let bottom = lerp_affine(grid.cell(i0, j1), grid.cell(i1, j1), tx);
            params.push(lerp_affine(&top, &bottom, ty));
        }
    }
    Ok(ParamField {
        width: w,
        height: h,
        params,
    })
}

fn check_field<T: Scalar>(frame: &Frame, field: &ParamField<T>, mask: &Mask) -> Result<()> {
    if field.dims() != frame.dims() || mask.dims() != frame.dims() {
        return Err(Error::dims(format!(
            "frame {:?}, field {:?}, mask {:?}",
            frame.dims(),
            field.dims(),
            mask.dims()
        )));
    }
    match field.params.iter().position(|p| !p.is_finite()) {
        Some(cell) => Err(Error::Param { cell }),
        None => Ok(()),
    }
}

/// Linear-light values of every pixel after the transform, clamped to
/// `[0, 1]` inside the mask and untouched outside. No quantization.
pub fn apply_pct_linear<T: Scalar>(
    frame: &Frame,
    field: &ParamField<T>,
    mask: &Mask,
) -> Result<Vec<LinearColor<T>>> {
    check_field(frame, field, mask)?;
    let lut = srgb_lut::<T>();
    Ok((0..frame.pixel_count())
        .map(|i| {
            let [r, g, b] = frame.rgb_at(i);
            let c = [lut[r as usize], lut[g as usize], lut[b as usize]];
            if mask.bits()[i] {
                LinearColor::from_array(field.params[i].apply(c)).clamped()
            } else {
                LinearColor::from_array(c)
            }
        })
        .collect())
}

/// Apply the per-pixel transform inside `mask`; outside it the frame is
/// copied byte for byte. Alpha, if any, is preserved.
pub fn apply_pct<T: Scalar>(frame: &Frame, field: &ParamField<T>, mask: &Mask) -> Result<Frame> {
    check_field(frame, field, mask)?;
    let lut = srgb_lut::<T>();
    let mut out = frame.clone();
    let ch = frame.channels().count();
    let width = frame.width() as usize;
    out.data_mut()
        .par_chunks_mut(width * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..width {
                let i = y * width + x;
                if !mask.bits()[i] {
                    continue;
                }
                let px = &mut row[x * ch..x * ch + 3];
                let c = [lut[px[0] as usize], lut[px[1] as usize], lut[px[2] as usize]];
                let v = field.params[i].apply(c);
                for k in 0..3 {
                    px[k] = linear_to_srgb(v[k]);
                }
            }
        });
    Ok(out)
}

/// Overlapping temporal blocks `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub entries: Vec<(usize, usize)>,
    pub block_len: usize,
    pub overlap: usize,
}

/// Blocks start every `block_len − overlap` frames; the last one is cut at
/// `n_frames` and no block is contained in its predecessor.
pub fn partition_blocks(n_frames: usize, block_len: usize, overlap: usize) -> Result<BlockSchedule> {
    if n_frames == 0 {
        return Err(Error::Config("cannot schedule zero frames".into()));
    }
    if block_len == 0 || overlap >= block_len {
        return Err(Error::Config(format!(
            "overlap ({overlap}) must be smaller than block length ({block_len})"
        )));
    }
    let step = block_len - overlap;
    let mut entries = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + block_len).min(n_frames);
        entries.push((start, end));
        if end == n_frames {
            break;
        }
        start += step;
    }
    Ok(BlockSchedule {
        entries,
        block_len,
        overlap,
    })
}

/// What a harmonization worker returns for one block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams<T> {
    /// One grid for every frame of the block.
    PerBlock(ColorTransformGrid<T>),
    /// One grid per frame, in block order.
    PerFrame(Vec<ColorTransformGrid<T>>),
}

impl<T: Scalar> BlockParams<T> {
    fn for_frame(&self, offset: usize) -> &ColorTransformGrid<T> {
        match self {
            BlockParams::PerBlock(g) => g,
            BlockParams::PerFrame(v) => &v[offset],
        }
    }
}

/// Source of harmonization parameters, called once per block.
///
/// `frames` are the composited frames of the block and `masks` the inserted
/// character's support. Implementations must be callable from several
/// threads at once.
pub trait HarmonizeWorker<T: Scalar>: Sync {
    fn block_params(&self, block_index: usize, frames: &[Frame], masks: &[Mask]) -> Result<BlockParams<T>>;
}

/// Always returns identity grids.
#[derive(Debug, Clone, Copy)]
pub struct IdentityHarmonizer {
    pub stride: u32,
}

impl<T: Scalar> HarmonizeWorker<T> for IdentityHarmonizer {
    fn block_params(&self, _: usize, frames: &[Frame], _: &[Mask]) -> Result<BlockParams<T>> {
        Ok(BlockParams::PerBlock(ColorTransformGrid::identity(
            frames[0].dims(),
            self.stride,
        )))
    }
}

/// Resolve one grid per frame from per-block parameters, crossfading in
/// overlaps with `t = (j − overlap_start + 1) / (w + 1)`.
pub fn schedule_params<T: Scalar>(
    schedule: &BlockSchedule,
    blocks: &[BlockParams<T>],
) -> Result<Vec<ColorTransformGrid<T>>> {
    if blocks.len() != schedule.entries.len() {
        return Err(Error::Length {
            expected: schedule.entries.len(),
            actual: blocks.len(),
        });
    }
    for (i, ((s, e), p)) in schedule.entries.iter().zip(blocks).enumerate() {
        if let BlockParams::PerFrame(v) = p {
            if v.len() != e - s {
                return Err(Error::ContractViolation(format!(
                    "block {i} spans {} frames but {} grids were supplied",
                    e - s,
                    v.len()
                )));
            }
        }
    }
    let n = schedule.entries.last().map_or(0, |e| e.1);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let i = schedule
            .entries
            .iter()
            .position(|&(s, e)| s <= j && j < e)
            .ok_or_else(|| Error::Config(format!("frame {j} not covered by block schedule")))?;
        let (s_i, e_i) = schedule.entries[i];
        let own = blocks[i].for_frame(j - s_i);
        match schedule.entries.get(i + 1) {
            Some(&(s_next, _)) if j >= s_next => {
                let w = e_i - s_next;
                let t = T::from_count(j - s_next + 1) / T::from_count(w + 1);
                out.push(own.blend(blocks[i + 1].for_frame(j - s_next), t)?);
            }
            _ => out.push(own.clone()),
        }
    }
    Ok(out)
}

/// Harmonize the masked foreground of every frame, block by block.
pub fn harmonize_sequence<T: Scalar, W: HarmonizeWorker<T> + ?Sized>(
    frames: &FrameSequence,
    masks: &MaskSequence,
    worker: &W,
    schedule: &BlockSchedule,
) -> Result<FrameSequence> {
    masks.check_against(frames.len(), frames.dims())?;
    if schedule.entries.last().map(|e| e.1) != Some(frames.len()) {
        return Err(Error::Config(format!(
            "block schedule does not cover {} frames",
            frames.len()
        )));
    }
    let blocks = schedule
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, &(s, e))| {
            worker
                .block_params(i, &frames.frames()[s..e], &masks.masks()[s..e])
                .map_err(|err| Error::Stage {
                    stage: "harmonize".into(),
                    code: err.code().into(),
                    message: format!("block {i}: {err}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let grids = schedule_params(schedule, &blocks)?;
    let dims = frames.dims();
    let out = frames
        .frames()
        .par_iter()
        .zip(masks.masks().par_iter())
        .zip(grids.par_iter())
        .map(|((f, m), g)| {
            if m.is_empty() {
                return Ok(f.clone());
            }
            g.check_finite()?;
            apply_pct(f, &upsample_grid(g, dims)?, m)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(out, frames.fps())
}
