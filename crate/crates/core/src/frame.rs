//! Pixel frames and sequence ingestion (PNG sequences, raw planar RGB24).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames are padded to multiples of this before coding.
pub const PAD_MULTIPLE: usize = 64;

/// An RGB frame with values in `[0, 1]`, stored planar (`[3, H, W]`).
///
/// `width`/`height` are the current (possibly padded) dimensions; the
/// original dimensions are kept so the decoder can crop.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFrame {
    data: Vec<f64>,
    width: usize,
    height: usize,
    orig_width: usize,
    orig_height: usize,
}

impl PixelFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("frame dimensions must be positive".into()));
        }
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "frame data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel frame"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            data,
            width,
            height,
            orig_width: width,
            orig_height: height,
        })
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::Shape(format!("rgb buffer of {} bytes for {width}x{height}", rgb.len())));
        }
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Self::new(width, height, data)
    }

    /// From planar 8-bit RGB (`R` plane, then `G`, then `B`).
    pub fn from_planar_rgb8(width: usize, height: usize, planes: &[u8]) -> Result<Self> {
        if planes.len() != 3 * width * height {
            return Err(Error::Shape(format!("planar buffer of {} bytes for {width}x{height}", planes.len())));
        }
        Self::new(width, height, planes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(to_u8(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn to_planar_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn orig_width(&self) -> usize {
        self.orig_width
    }

    pub fn orig_height(&self) -> usize {
        self.orig_height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Replicate-pads right/bottom so both dims are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> PixelFrame {
        let w = self.width.div_ceil(multiple) * multiple;
        let h = self.height.div_ceil(multiple) * multiple;
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut data = vec![0.0; 3 * w * h];
        for c in 0..3 {
            for y in 0..h {
                let sy = y.min(self.height - 1);
                for x in 0..w {
                    let sx = x.min(self.width - 1);
                    data[(c * h + y) * w + x] = self.data[(c * self.height + sy) * self.width + sx];
                }
            }
        }
        PixelFrame {
            data,
            width: w,
            height: h,
            orig_width: self.orig_width,
            orig_height: self.orig_height,
        }
    }

    /// Crops back to the original (pre-padding) dimensions.
    pub fn crop_to_original(&self) -> PixelFrame {
        if self.width == self.orig_width && self.height == self.orig_height {
            return self.clone();
        }
        let (w, h) = (self.orig_width, self.orig_height);
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in 0..h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        PixelFrame {
            data,
            width: w,
            height: h,
            orig_width: w,
            orig_height: h,
        }
    }

    /// A `w`x`h` window with its top-left corner at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<PixelFrame> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width + x0;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Ok(PixelFrame {
            data,
            width: w,
            height: h,
            orig_width: w,
            orig_height: h,
        })
    }

    pub fn with_original_dims(mut self, width: usize, height: usize) -> Self {
        self.orig_width = width.min(self.width);
        self.orig_height = height.min(self.height);
        self
    }

    /// `[3, H, W]` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[3, self.height, self.width])
    }

    /// From a `[3, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 colour planes, got {c}")));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("reconstructed frame"));
        }
        Self::new(w, h, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantize_8bit(&self) -> PixelFrame {
        PixelFrame {
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads every `*.png` in `dir`, sorted by file name. `limit` caps the count.
pub fn read_png_sequence(dir: &Path, limit: Option<usize>) -> Result<Vec<PixelFrame>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if let Some(n) = limit {
        paths.truncate(n);
    }
    paths.iter().map(|p| read_png(p)).collect()
}

pub fn read_png(path: &Path) -> Result<PixelFrame> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Image("palette PNG was not expanded".into())),
    };
    PixelFrame::from_rgb8(w, h, &rgb)
}

pub fn write_png(path: &Path, frame: &PixelFrame) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, frame.width() as u32, frame.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer
        .write_image_data(&frame.to_rgb8())
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

/// Reads a raw planar RGB24 file: consecutive frames of `3*w*h` bytes.
pub fn read_raw_rgb24(path: &Path, width: usize, height: usize, limit: Option<usize>) -> Result<Vec<PixelFrame>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let frame_len = 3 * width * height;
    if frame_len == 0 || bytes.len() % frame_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} is {} bytes, not a whole number of {width}x{height} RGB24 frames",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / frame_len;
    let n = limit.map_or(n, |l| l.min(n));
    bytes
        .chunks_exact(frame_len)
        .take(n)
        .map(|c| PixelFrame::from_planar_rgb8(width, height, c))
        .collect()
}

pub fn write_raw_rgb24(path: &Path, frames: &[PixelFrame]) -> Result<()> {
    let mut out = Vec::new();
    for f in frames {
        out.extend(f.to_planar_rgb8());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a sequence from a directory of PNGs or a raw `.rgb` file.
pub fn read_sequence(path: &Path, dims: Option<(usize, usize)>, limit: Option<usize>) -> Result<Vec<PixelFrame>> {
    if path.is_dir() {
        read_png_sequence(path, limit)
    } else {
        let (w, h) = dims.ok_or_else(|| Error::InvalidArgument("raw RGB24 input needs --width and --height".into()))?;
        read_raw_rgb24(path, w, h, limit)
    }
}
