//! Raster frames and frame sequences.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgba};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactHasher, ArtifactId};
use crate::error::{Error, Result};
use crate::pose::Keypoint;

/// Frames per second. Metadata only; never used in pixel math.
pub type Fps = Ratio<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    Rgb,
    Rgba,
}

impl Channels {
    pub const fn count(self) -> usize {
        match self {
            Channels::Rgb => 3,
            Channels::Rgba => 4,
        }
    }
}

/// One row-major 8-bit sRGB raster. Alpha, when present, is straight and linear.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    channels: Channels,
    data: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frame")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Frame {
    pub fn new(width: u32, height: u32, channels: Channels, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dims(format!("frame must be non-empty, got {width}x{height}")));
        }
        let expected = width as usize * height as usize * channels.count();
        if data.len() != expected {
            return Err(Error::dims(format!(
                "{width}x{height}x{} frame needs {expected} bytes, got {}",
                channels.count(),
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Frame filled with one pixel value; `px.len()` selects RGB or RGBA.
    pub fn filled(width: u32, height: u32, px: &[u8]) -> Self {
        let channels = match px.len() {
            3 => Channels::Rgb,
            4 => Channels::Rgba,
            n => panic!("pixel must have 3 or 4 samples, got {n}"),
        };
        let data = px.repeat(width as usize * height as usize);
        Self::new(width, height, channels, data).expect("non-empty dims")
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

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels.count();
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let c = self.channels.count();
        let i = (y as usize * self.width as usize + x as usize) * c;
        &mut self.data[i..i + c]
    }

    /// RGB samples of pixel `i` (row-major index).
    #[inline]
    pub fn rgb_at(&self, i: usize) -> [u8; 3] {
        let c = self.channels.count();
        let p = &self.data[i * c..i * c + 3];
        [p[0], p[1], p[2]]
    }

    #[inline]
    pub fn alpha_at(&self, i: usize) -> u8 {
        match self.channels {
            Channels::Rgb => 255,
            Channels::Rgba => self.data[i * 4 + 3],
        }
    }

    /// Copy of this frame with the alpha channel dropped.
    pub fn to_rgb(&self) -> Frame {
        match self.channels {
            Channels::Rgb => self.clone(),
            Channels::Rgba => {
                let data = self.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
                Frame::new(self.width, self.height, Channels::Rgb, data).expect("same dims")
            }
        }
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
            |source| Error::Image {
                path: "<memory>".into(),
                source,
            },
        )?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        let (width, height) = (img.width(), img.height());
        if img.color().has_alpha() {
            let data = img.into_rgba8().into_raw();
            Self {
                width,
                height,
                channels: Channels::Rgba,
                data,
            }
        } else {
            let data = img.into_rgb8().into_raw();
            Self {
                width,
                height,
                channels: Channels::Rgb,
                data,
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        let res = match self.channels {
            Channels::Rgb => {
                ImageBuffer::<Rgb<u8>, _>::from_raw(self.width, self.height, &self.data[..])
                    .expect("validated dims")
                    .write_to(&mut out, image::ImageFormat::Png)
            }
            Channels::Rgba => {
                ImageBuffer::<Rgba<u8>, _>::from_raw(self.width, self.height, &self.data[..])
                    .expect("validated dims")
                    .write_to(&mut out, image::ImageFormat::Png)
            }
        };
        res.map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
        Ok(out.into_inner())
    }
}

/// Ordered frames of uniform shape, identified by the digest of their pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    fps: Fps,
    id: ArtifactId,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, fps: Fps) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Empty("<sequence>".into()))?;
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| !f.same_shape(first)) {
            return Err(Error::dims(format!(
                "frame {i} is {}x{}x{}, frame 0 is {}x{}x{}",
                f.width,
                f.height,
                f.channels.count(),
                first.width,
                first.height,
                first.channels.count()
            )));
        }
        let id = Self::digest(&frames);
        Ok(Self { frames, fps, id })
    }

    /// Canonical bytes: frames in index order, raw pixel rows top to bottom.
    fn digest(frames: &[Frame]) -> ArtifactId {
        let mut h = ArtifactHasher::new();
        for f in frames {
            h.update(&f.data);
        }
        h.finish()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> Fps {
        self.fps
    }

    pub fn id(&self) -> ArtifactId {
        self.id
    }

    pub fn dims(&self) -> (u32, u32) {
        self.frames[0].dims()
    }

    pub fn channels(&self) -> Channels {
        self.frames[0].channels
    }

    /// Sub-range `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(self.frames[start..end].to_vec(), self.fps)
    }
}

/// The replacement character: an RGBA image whose alpha is the character matte.
#[derive(Debug, Clone)]
pub struct ReferenceCharacter {
    pub image: Frame,
    /// Optional 17-joint skeleton in image coordinates. When absent, anchors
    /// are derived from the alpha support.
    pub anchor: Option<Vec<Keypoint>>,
}

impl ReferenceCharacter {
    pub fn new(image: Frame, anchor: Option<Vec<Keypoint>>) -> Result<Self> {
        if image.channels() != Channels::Rgba {
            return Err(Error::dims("reference character must be RGBA"));
        }
        Ok(Self { image, anchor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_zero_dims() {
        assert!(Frame::new(2, 2, Channels::Rgb, vec![0; 11]).is_err());
        assert!(Frame::new(0, 2, Channels::Rgb, vec![]).is_err());
        assert!(Frame::new(2, 2, Channels::Rgba, vec![0; 16]).is_ok());
    }

    #[test]
    fn sequence_requires_uniform_shape() {
        let a = Frame::filled(4, 4, &[1, 2, 3]);
        let b = Frame::filled(4, 5, &[1, 2, 3]);
        let fps = Fps::new(24, 1);
        assert!(matches!(
            FrameSequence::new(vec![a.clone(), b], fps),
            Err(Error::Dimension(_))
        ));
        let c = Frame::filled(4, 4, &[1, 2, 3, 4]);
        assert!(FrameSequence::new(vec![a, c], fps).is_err());
        assert!(matches!(FrameSequence::new(vec![], fps), Err(Error::Empty(_))));
    }

    #[test]
    fn png_roundtrip_is_byte_exact() {
        let mut f = Frame::filled(5, 3, &[10, 20, 30, 40]);
        f.pixel_mut(4, 2).copy_from_slice(&[255, 0, 7, 0]);
        let g = Frame::decode_png(&f.encode_png().unwrap()).unwrap();
        assert_eq!(f, g);
        let rgb = Frame::filled(5, 3, &[9, 8, 7]);
        assert_eq!(Frame::decode_png(&rgb.encode_png().unwrap()).unwrap(), rgb);
    }

    #[test]
    fn reference_must_be_rgba() {
        assert!(ReferenceCharacter::new(Frame::filled(2, 2, &[0, 0, 0]), None).is_err());
    }
}
