//! Frames, clips, and flow fields.

use std::path::Path;

use image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, QenetError, Result};
use crate::tensor::Tensor;

/// Color channels processed jointly (RGB).
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    I,
    P,
}

impl FrameKind {
    pub fn for_index(t: usize) -> Self {
        if t == 0 {
            FrameKind::I
        } else {
            FrameKind::P
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Original,
    Decoded,
    Enhanced,
    Predicted,
}

/// Record of the size before [`pad_to_multiple`], used to crop back exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// One image (C×H×W, values in `[0,1]`) at time `index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Tensor<f32>,
    pub index: usize,
    pub kind: FrameKind,
    pub variant: Variant,
    pub crop: Option<CropRecord>,
}

impl Frame {
    pub fn new(pixels: Tensor<f32>, index: usize, variant: Variant) -> Self {
        Frame { pixels, index, kind: FrameKind::for_index(index), variant, crop: None }
    }

    pub fn height(&self) -> usize {
        self.pixels.h
    }

    pub fn width(&self) -> usize {
        self.pixels.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.pixels.h, self.pixels.w)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Loads an 8-bit PNG as RGB scaled to `[0,1]`.
    pub fn load_png(path: &Path, index: usize, variant: Variant) -> Result<Self> {
        let img = image::open(path).map_err(|source| QenetError::Image { path: path.to_path_buf(), source })?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        let pixels = Tensor::from_fn(CHANNELS, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0);
        Ok(Frame::new(pixels, index, variant))
    }

    /// Quantizes to 8 bits (after clamping) and writes a PNG atomically, creating parent directories.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let mut raw = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS.min(self.pixels.c) {
                    raw[(y * w + x) * 3 + c] = to_u8(self.pixels.at(c, y, x));
                }
            }
        }
        let mut png = Vec::new();
        image::codecs::png::PngEncoder::new(&mut png)
            .write_image(&raw, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|source| QenetError::Image { path: path.to_path_buf(), source })?;
        crate::io::write_atomic(path, &png)
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Edge-replicate pads to the smallest multiple of `m` in both dimensions.
/// A crop record is attached whenever padding happened (and kept if one already existed).
pub fn pad_to_multiple(frame: &Frame, m: usize) -> Frame {
    let m = m.max(1);
    let (h, w) = frame.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return frame.clone();
    }
    Frame {
        pixels: frame.pixels.pad_replicate(ph, pw),
        crop: Some(frame.crop.unwrap_or(CropRecord { height: h, width: w })),
        ..frame.clone()
    }
}

/// Inverts [`pad_to_multiple`] using the attached crop record.
pub fn crop_to_record(frame: &Frame) -> Result<Frame> {
    match frame.crop {
        None => Ok(frame.clone()),
        Some(rec) => Ok(Frame { pixels: frame.pixels.crop(0, 0, rec.height, rec.width)?, crop: None, ..frame.clone() }),
    }
}

/// Clamps every value into `[0,1]`.
pub fn clamp_pixels(frame: &Frame) -> Result<Frame> {
    if !frame.pixels.all_finite() {
        return Err(QenetError::NonFinite(format!("frame {} pixels", frame.index)));
    }
    Ok(Frame { pixels: frame.pixels.map(|v| v.clamp(0.0, 1.0)), ..frame.clone() })
}

/// Aligned original/decoded sequences for one clip.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub qp: u8,
    pub original: Vec<Frame>,
    pub decoded: Vec<Frame>,
}

impl Clip {
    pub fn new(id: impl Into<String>, qp: u8, original: Vec<Frame>, decoded: Vec<Frame>) -> Result<Self> {
        let clip = Clip { id: id.into(), qp, original, decoded };
        clip.validate()?;
        Ok(clip)
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.original.len() != self.decoded.len() {
            return Err(shape_err!("clip {}: {} original vs {} decoded frames", self.id, self.original.len(), self.decoded.len()));
        }
        for (t, (o, d)) in self.original.iter().zip(&self.decoded).enumerate() {
            if o.dims() != d.dims() {
                return Err(shape_err!("clip {} frame {t}: {:?} vs {:?}", self.id, o.dims(), d.dims()));
            }
            for f in [o, d] {
                if f.kind != FrameKind::for_index(t) || f.index != t {
                    return Err(QenetError::Gop(format!("clip {} frame {t} has index {} kind {:?}", self.id, f.index, f.kind)));
                }
            }
        }
        Ok(())
    }
}

/// Dense per-pixel displacement from frame `src_index` to `dst_index`.
/// Channel 0 is horizontal, channel 1 vertical, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub vectors: Tensor<f32>,
    pub src_index: usize,
    pub dst_index: usize,
}

impl Flow {
    pub fn zeros(h: usize, w: usize) -> Self {
        Flow { vectors: Tensor::zeros(2, h, w), src_index: 0, dst_index: 1 }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        Flow { vectors: Tensor::from_fn(2, h, w, |c, _, _| if c == 0 { dx } else { dy }), src_index: 0, dst_index: 1 }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.vectors.h, self.vectors.w)
    }

    /// Median per-pixel displacement magnitude.
    pub fn median_magnitude(&self) -> f32 {
        let (h, w) = self.dims();
        let mut mags: Vec<f32> = (0..h * w).map(|i| self.vectors.data[i].hypot(self.vectors.data[h * w + i])).collect();
        mags.sort_by(f32::total_cmp);
        if mags.is_empty() {
            0.0
        } else {
            mags[mags.len() / 2]
        }
    }
}
