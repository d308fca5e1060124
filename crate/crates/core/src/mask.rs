//! Binary masks, mask sequences and their run-length interchange form.
//!
//! RLE follows the common segmentation convention: row-major runs that
//! alternate between 0 and 1, always starting with a (possibly empty) run of
//! zeros.

use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactHasher, ArtifactId};
use crate::error::{Error, Result};
use crate::frame::Frame;

/// Grayscale values at or above this become set bits on import.
pub const BINARIZE_THRESHOLD: u8 = 128;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mask {}x{}", self.width, self.height)?;
        for row in self.bits.chunks(self.width as usize).take(64) {
            let line: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::dims(format!(
                "{width}x{height} mask needs {} bits, got {}",
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Binarize 8-bit luma samples at [`BINARIZE_THRESHOLD`].
    pub fn from_luma(width: u32, height: u32, luma: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            luma.iter().map(|&v| v >= BINARIZE_THRESHOLD).collect(),
        )
    }

    /// Binarize the alpha channel of an RGBA frame (RGB frames are fully opaque).
    pub fn from_alpha(frame: &Frame) -> Self {
        let bits = (0..frame.pixel_count())
            .map(|i| frame.alpha_at(i) >= BINARIZE_THRESHOLD)
            .collect();
        Self {
            width: frame.width(),
            height: frame.height(),
            bits,
        }
    }

    /// White-on-black grayscale PNG rendering.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let luma: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width, self.height, luma).expect("dims match");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out.into_inner())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    /// Out-of-image coordinates read as unset.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        self.check_dims(other)?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Mean of set-pixel coordinates, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0usize);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            sx += (i % self.width as usize) as f64;
            sy += (i / self.width as usize) as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Run-length form of a [`Mask`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub dims: (u32, u32),
    pub counts: Vec<u32>,
}

pub fn rle_encode(mask: &Mask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &mask.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    RleMask {
        dims: mask.dims(),
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<Mask> {
    let (w, h) = rle.dims;
    let expected = w as u64 * h as u64;
    let sum: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if sum != expected {
        return Err(Error::CorruptRle { sum, expected });
    }
    let mut bits = Vec::with_capacity(expected as usize);
    let mut value = false;
    for &c in &rle.counts {
        bits.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Mask::new(w, h, bits)
}

/// Intersection over union. Two empty masks score 1.0.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Inclusive bounding box of the set bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

pub fn mask_bbox(mask: &Mask) -> Option<BBox> {
    let w = mask.width as usize;
    let mut bbox: Option<BBox> = None;
    for (i, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        let b = bbox.get_or_insert(BBox {
            x_min: x,
            y_min: y,
            x_max: x,
            y_max: y,
        });
        b.x_min = b.x_min.min(x);
        b.x_max = b.x_max.max(x);
        b.y_max = b.y_max.max(y);
    }
    bbox
}

/// Per-frame masks sharing one size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSequence {
    masks: Vec<Mask>,
    dims: (u32, u32),
    id: ArtifactId,
}

#[derive(Serialize, Deserialize)]
struct RleFrame {
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    dims: (u32, u32),
    frames: Vec<RleFrame>,
}

impl MaskSequence {
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        let dims = masks
            .first()
            .map(Mask::dims)
            .ok_or_else(|| Error::Empty("<mask sequence>".into()))?;
        if let Some((i, m)) = masks.iter().enumerate().find(|(_, m)| m.dims() != dims) {
            return Err(Error::dims(format!(
                "mask {i} is {:?}, mask 0 is {dims:?}",
                m.dims()
            )));
        }
        let mut h = ArtifactHasher::new();
        h.update(b"mask-seq");
        h.update(&dims.0.to_le_bytes());
        h.update(&dims.1.to_le_bytes());
        for m in &masks {
            let bytes: Vec<u8> = m.bits.iter().map(|&b| b as u8).collect();
            h.update(&bytes);
        }
        let id = h.finish();
        Ok(Self { masks, dims, id })
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.dims
    }

    pub fn id(&self) -> ArtifactId {
        self.id
    }

    /// Check this sequence can drive `len` frames of size `dims`.
    pub fn check_against(&self, len: usize, dims: (u32, u32)) -> Result<()> {
        if self.len() != len {
            return Err(Error::Length {
                expected: len,
                actual: self.len(),
            });
        }
        if self.dims != dims {
            return Err(Error::dims(format!(
                "masks are {:?}, frames are {dims:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// `{"dims":[w,h],"frames":[{"counts":[...]}, ...]}`
    pub fn to_json(&self) -> String {
        let file = MaskFile {
            dims: self.dims,
            frames: self
                .masks
                .iter()
                .map(|m| RleFrame {
                    counts: rle_encode(m).counts,
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MaskFile = serde_json::from_str(text)?;
        let masks = file
            .frames
            .into_iter()
            .map(|f| {
                rle_decode(&RleMask {
                    dims: file.dims,
                    counts: f.counts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if masks.is_empty() {
            return Err(Error::Empty("<mask file>".into()));
        }
        Self::new(masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(w: u32, h: u32, bits: &[u8]) -> Mask {
        Mask::new(w, h, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn encode_small_cases() {
        assert_eq!(rle_encode(&Mask::empty(2, 2)).counts, vec![4]);
        assert_eq!(rle_encode(&Mask::filled(2, 2, true)).counts, vec![0, 4]);
    }

    #[test]
    fn decode_small_cases() {
        let rle = |counts: Vec<u32>| RleMask {
            dims: (2, 2),
            counts,
        };
        assert_eq!(rle_decode(&rle(vec![4])).unwrap(), Mask::empty(2, 2));
        assert_eq!(rle_decode(&rle(vec![1, 2, 1])).unwrap(), m(2, 2, &[0, 1, 1, 0]));
        assert!(matches!(
            rle_decode(&rle(vec![5])),
            Err(Error::CorruptRle { sum: 5, expected: 4 })
        ));
    }

    #[test]
    fn exhaustive_3x3_roundtrip() {
        for code in 0u32..512 {
            let mask = Mask::from_fn(3, 3, |x, y| code >> (y * 3 + x) & 1 == 1);
            let rle = rle_encode(&mask);
            assert_eq!(rle.counts.iter().sum::<u32>(), 9);
            assert!(rle.counts[1..].iter().all(|&c| c > 0));
            assert_eq!(rle_decode(&rle).unwrap(), mask);
        }
    }

    fn arb_mask(max: u32) -> impl Strategy<Value = Mask> {
        (1..=max, 1..=max).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |bits| Mask::new(w, h, bits).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rle_roundtrip(mask in arb_mask(16)) {
            prop_assert_eq!(rle_decode(&rle_encode(&mask)).unwrap(), mask);
        }

        #[test]
        fn iou_symmetric(a in arb_mask(6), seed in any::<u64>()) {
            let b = Mask::from_fn(a.width(), a.height(), |x, y| {
                (seed >> ((x + y * 7) % 64)) & 1 == 1
            });
            prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn bbox_is_tight(mask in arb_mask(12)) {
            match mask_bbox(&mask) {
                None => prop_assert!(mask.is_empty()),
                Some(b) => {
                    for y in 0..mask.height() {
                        for x in 0..mask.width() {
                            if mask.get(x, y) {
                                prop_assert!(b.contains(x, y));
                            }
                        }
                    }
                    // each edge of the box touches a set bit
                    prop_assert!((b.x_min..=b.x_max).any(|x| mask.get(x, b.y_min)));
                    prop_assert!((b.x_min..=b.x_max).any(|x| mask.get(x, b.y_max)));
                    prop_assert!((b.y_min..=b.y_max).any(|y| mask.get(b.x_min, y)));
                    prop_assert!((b.y_min..=b.y_max).any(|y| mask.get(b.x_max, y)));
                }
            }
        }
    }

    #[test]
    fn iou_cases() {
        let a = m(2, 2, &[1, 1, 0, 0]);
        let b = m(2, 2, &[0, 0, 1, 1]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        assert_eq!(mask_iou(&m(2, 1, &[1, 1]), &m(2, 1, &[1, 0])).unwrap(), 0.5);
        assert_eq!(mask_iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(matches!(
            mask_iou(&Mask::empty(2, 2), &Mask::empty(3, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bbox_cases() {
        let mut single = Mask::empty(8, 8);
        single.set(3, 5, true);
        assert_eq!(
            mask_bbox(&single),
            Some(BBox { x_min: 3, y_min: 5, x_max: 3, y_max: 5 })
        );
        assert_eq!(mask_bbox(&Mask::empty(8, 8)), None);
        let mut two = Mask::empty(8, 8);
        two.set(1, 1, true);
        two.set(4, 2, true);
        assert_eq!(
            mask_bbox(&two),
            Some(BBox { x_min: 1, y_min: 1, x_max: 4, y_max: 2 })
        );
    }

    #[test]
    fn luma_threshold_is_128() {
        let mask = Mask::from_luma(4, 1, &[0, 127, 128, 255]).unwrap();
        assert_eq!(mask.bits(), &[false, false, true, true]);
    }

    #[test]
    fn mask_file_format() {
        let seq = MaskSequence::new(vec![m(2, 2, &[0, 1, 1, 0]), Mask::empty(2, 2)]).unwrap();
        let json = seq.to_json();
        assert_eq!(json, r#"{"dims":[2,2],"frames":[{"counts":[1,2,1]},{"counts":[4]}]}"#);
        let back = MaskSequence::from_json(&json).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.id(), seq.id());
    }

    #[test]
    fn sequence_checks_dims() {
        assert!(MaskSequence::new(vec![Mask::empty(2, 2), Mask::empty(2, 3)]).is_err());
        let seq = MaskSequence::new(vec![Mask::empty(2, 2)]).unwrap();
        assert!(matches!(seq.check_against(2, (2, 2)), Err(Error::Length { .. })));
        assert!(matches!(seq.check_against(1, (3, 2)), Err(Error::Dimension(_))));
    }
}
