//! Image normalization ahead of the transform: crop/resize, YCbCr split and
//! histogram equalization of the luma plane.
//!
//! Faces are assumed to be aligned already; [`center_crop_square`] is the only
//! geometric correction offered.

use std::io::Cursor;
use std::path::Path;

use crate::{Error, Result};

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != 3 * width * height {
            return Err(Error::DimensionMismatch {
                expected: 3 * width * height,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let mut data = Vec::with_capacity(3 * width * height);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mirror left-right: pixel (r, c) moves to (r, W-1-c).
    pub fn mirror_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.pixel(r, self.width - 1 - c))
    }

    /// Decode a PNG, PPM or PGM file. Grayscale inputs are replicated to RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let format = match ext.as_deref() {
            Some("png") => image::ImageFormat::Png,
            Some("ppm" | "pgm" | "pnm") => image::ImageFormat::Pnm,
            _ => {
                return Err(Error::Image(format!(
                    "unsupported image format: {}",
                    path.display()
                )))
            }
        };
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes, format).map_err(|e| match e {
            Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn decode(bytes: &[u8], format: image::ImageFormat) -> Result<Self> {
        let img = image::load(Cursor::new(bytes), format)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    /// Decode PNG or PNM bytes, recognized by their signature.
    pub fn decode_any(bytes: &[u8]) -> Result<Self> {
        match image::guess_format(bytes) {
            Ok(f @ (image::ImageFormat::Png | image::ImageFormat::Pnm)) => Self::decode(bytes, f),
            Ok(f) => Err(Error::Image(format!("unsupported image format {f:?}"))),
            Err(e) => Err(Error::Image(e.to_string())),
        }
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, image::ImageFormat::Png)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Write as binary PPM (P6).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Write the first channel as binary PGM (P5).
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.chunks_exact(3).map(|px| px[0]));
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

/// Real-valued H×W×C tensor, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("tensor contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Single channel as its own tensor.
    pub fn channel(&self, ch: usize) -> ImageTensor {
        assert!(ch < self.channels);
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(ch).step_by(self.channels).copied().collect(),
        }
    }

    pub fn mirror_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |r, c, ch| {
            self.get(r, self.width - 1 - c, ch)
        })
    }
}

/// Preprocessed planes consumed by the two submodels.
#[derive(Clone, Debug, PartialEq)]
pub struct FacePlanes {
    /// Histogram-equalized luma, one channel.
    pub y: ImageTensor,
    /// Chroma in (Cr, Cb) order, two channels.
    pub crcb: ImageTensor,
}

/// Bilinear resampling with pixel-center alignment.
///
/// Output pixel (x, y) samples the source at
/// `((x + 0.5) * in_w / out_w - 0.5, (y + 0.5) * in_h / out_h - 0.5)`, clamped
/// to the image, and rounds to the nearest integer.
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Result<RgbImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidInput(format!(
            "target size must be positive, got {out_w}x{out_h}"
        )));
    }
    if img.width == out_w && img.height == out_h {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let axis = |o: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, img.width)).collect();
    Ok(RgbImage::from_fn(out_w, out_h, |y, x| {
        let (r0, r1, fy) = axis(y, sy, img.height);
        let (c0, c1, fx) = cols[x];
        let mut px = [0u8; 3];
        for (ch, out) in px.iter_mut().enumerate() {
            let p = |r: usize, c: usize| img.pixel(r, c)[ch] as f64;
            let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
            let bottom = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            *out = v.round().clamp(0.0, 255.0) as u8;
        }
        px
    }))
}

/// Largest centered square crop.
pub fn center_crop_square(img: &RgbImage) -> RgbImage {
    let side = img.width.min(img.height);
    let r0 = (img.height - side) / 2;
    let c0 = (img.width - side) / 2;
    RgbImage::from_fn(side, side, |r, c| img.pixel(r0 + r, c0 + c))
}

/// Degrade resolution: downsample to `low`×`low` and upsample back.
pub fn simulate_low_resolution(img: &RgbImage, low: usize) -> Result<RgbImage> {
    let small = resize_bilinear(img, low, low)?;
    resize_bilinear(&small, img.width, img.height)
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// BT.601 full-range conversion. Returns the Y plane and the (Cr, Cb) planes,
/// each clamped to [0, 255] with chroma centered at 128.
pub fn to_ycbcr(img: &RgbImage) -> (ImageTensor, ImageTensor) {
    let n = img.width * img.height;
    let mut y = Vec::with_capacity(n);
    let mut crcb = Vec::with_capacity(2 * n);
    for px in img.data.chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        y.push((KR * r + KG * g + KB * b).clamp(0.0, 255.0));
        crcb.push((128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b).clamp(0.0, 255.0));
        crcb.push((128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b).clamp(0.0, 255.0));
    }
    (
        ImageTensor { height: img.height, width: img.width, channels: 1, data: y },
        ImageTensor { height: img.height, width: img.width, channels: 2, data: crcb },
    )
}

/// Inverse of [`to_ycbcr`], rounding to 8 bits.
pub fn from_ycbcr(y: &ImageTensor, crcb: &ImageTensor) -> Result<RgbImage> {
    if y.channels != 1 || crcb.channels != 2 || y.height != crcb.height || y.width != crcb.width {
        return Err(Error::InvalidInput("expected matching 1-channel Y and 2-channel CrCb".into()));
    }
    let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    Ok(RgbImage::from_fn(y.width, y.height, |r, c| {
        let l = y.get(r, c, 0);
        let cr = crcb.get(r, c, 0) - 128.0;
        let cb = crcb.get(r, c, 1) - 128.0;
        [
            to_u8(l + 1.402 * cr),
            to_u8(l - 0.344136 * cb - 0.714136 * cr),
            to_u8(l + 1.772 * cb),
        ]
    }))
}

/// Classic 256-bin CDF remap. Values are binned by rounding; an image with a
/// single gray level is returned unchanged.
pub fn hist_equalize(y: &ImageTensor) -> ImageTensor {
    assert_eq!(y.channels, 1, "histogram equalization expects one channel");
    let bin = |v: f64| v.round().clamp(0.0, 255.0) as usize;
    let mut hist = [0usize; 256];
    for &v in &y.data {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let n = y.data.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return y.clone();
    }
    let denom = (n - cdf_min) as f64;
    let lut: Vec<f64> = cdf
        .iter()
        .map(|&c| ((c.saturating_sub(cdf_min)) as f64 / denom * 255.0).round())
        .collect();
    ImageTensor {
        data: y.data.iter().map(|&v| lut[bin(v)]).collect(),
        ..y.clone()
    }
}

/// Geometry applied before color conversion.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub size: usize,
    /// Simulate a lower capture resolution (e.g. 16) by down/up sampling.
    pub low_resolution: Option<usize>,
    pub center_crop: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { size: 32, low_resolution: None, center_crop: false }
    }
}

/// Full normalization: optional crop, resize, optional degradation, YCbCr
/// split, equalization of Y.
pub fn preprocess_face(img: &RgbImage, cfg: &PreprocessConfig) -> Result<FacePlanes> {
    let rgb = normalize_geometry(img, cfg)?;
    Ok(planes_from_rgb(&rgb))
}

/// The RGB image the model actually sees (after crop and resizing).
pub fn normalize_geometry(img: &RgbImage, cfg: &PreprocessConfig) -> Result<RgbImage> {
    let cropped;
    let src = if cfg.center_crop {
        cropped = center_crop_square(img);
        &cropped
    } else {
        img
    };
    let mut rgb = resize_bilinear(src, cfg.size, cfg.size)?;
    if let Some(low) = cfg.low_resolution {
        rgb = simulate_low_resolution(&rgb, low)?;
    }
    Ok(rgb)
}

pub fn planes_from_rgb(rgb: &RgbImage) -> FacePlanes {
    let (y, crcb) = to_ycbcr(rgb);
    FacePlanes { y: hist_equalize(&y), crcb }
}
