//! Raster ingestion, label-map files and palette rendering.
//!
//! Intensities are always kept in `[0, 1]` (bytes scaled by 1/255). Label maps
//! are serialized with a small fixed binary layout:
//!
//! ```text
//! "CUTSLBL1" | u32 LE height | u32 LE width | height*width u32 LE labels (row-major)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const LABEL_MAGIC: &[u8; 8] = b"CUTSLBL1";
pub const LABEL_HEADER_LEN: usize = 16;

const PALETTE_SEED: u64 = 0x5EED_C075;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data: {0}")]
    CorruptData(String),
    #[error("requested a zero output dimension")]
    ZeroDimension,
    #[error("bad magic bytes in label-map file")]
    BadMagic,
    #[error("label-map file is truncated")]
    TruncatedFile,
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major `H x W x C` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImgError> {
        let invalid = |reason: String| ImgError::Invalid { what: "image", reason };
        if height == 0 || width == 0 {
            return Err(invalid(format!("{height}x{width} has a zero dimension")));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "data length {} != {height}*{width}*{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Constant image, handy for tests and padding.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, ImgError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Intensities of pixel `(row, col)` across channels.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Quantize back to 8 bits per channel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Row-major label grid; ids are arbitrary non-negative integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, ImgError> {
        if labels.len() != height * width {
            return Err(ImgError::Invalid {
                what: "label map",
                reason: format!("{} labels for a {height}x{width} grid", labels.len()),
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u32> {
        self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Sorted distinct label ids.
    pub fn distinct(&self) -> Vec<u32> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Foreground = pixels carrying `label`.
    pub fn mask_of(&self, label: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    /// Labels as single-channel reals (not clamped to [0, 1]); used by the metrics.
    pub fn as_reals(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, ImgError> {
        if bits.len() != height * width {
            return Err(ImgError::Invalid {
                what: "binary mask",
                reason: format!("{} bits for a {height}x{width} grid", bits.len()),
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `(row, col)` of every foreground pixel in raster order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i / w, i % w))
    }

    pub fn to_label_map(&self) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            labels: self.bits.iter().map(|&b| u32::from(b)).collect(),
        }
    }
}

/// Load an 8-bit grayscale or RGB raster (PNG, PGM/PPM, JPEG). Alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImgError> {
    use image::{ColorType, DynamicImage, ImageError};

    let path = path.as_ref();
    if !path.is_file() {
        return Err(ImgError::FileNotFound(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    let decoded = reader.decode().map_err(|e| match e {
        ImageError::Unsupported(u) => ImgError::UnsupportedFormat(u.to_string()),
        ImageError::IoError(io) => ImgError::Io(io),
        other => ImgError::CorruptData(other.to_string()),
    })?;
    let (channels, bytes, w, h) = match decoded.color() {
        ColorType::L8 | ColorType::La8 => {
            let g = decoded.to_luma8();
            (1, g.as_raw().clone(), g.width(), g.height())
        }
        ColorType::Rgb8 | ColorType::Rgba8 => {
            let c = DynamicImage::to_rgb8(&decoded);
            (3, c.as_raw().clone(), c.width(), c.height())
        }
        other => {
            return Err(ImgError::UnsupportedFormat(format!("{other:?} (only 8-bit gray/RGB)")));
        }
    };
    image_from_bytes(h as usize, w as usize, channels, &bytes)
}

/// Interpret raw 8-bit samples as intensities scaled by 1/255.
pub fn image_from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Image, ImgError> {
    Image::new(height, width, channels, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
}

/// Write an image as 8-bit PNG (gray or RGB).
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<(), ImgError> {
    let color = if img.channels() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path.as_ref(), &img.to_bytes(), img.width() as u32, img.height() as u32, color)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => ImgError::Io(io),
            other => ImgError::UnsupportedFormat(other.to_string()),
        })
}

/// Bilinear resampling with align-corners coordinates: output sample `i` reads
/// source coordinate `i * (in - 1) / (out - 1)`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image, ImgError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImgError::ZeroDimension);
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let (y0, y1, ty) = coord(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, tx) = coord(j, w, out_w);
            for ch in 0..c {
                let a = f64::from(img.get(y0, x0, ch));
                let b = f64::from(img.get(y0, x1, ch));
                let cc = f64::from(img.get(y1, x0, ch));
                let d = f64::from(img.get(y1, x1, ch));
                let top = a + (b - a) * tx;
                let bottom = cc + (d - cc) * tx;
                data.push((top + (bottom - top) * ty).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(out_h, out_w, c, data)
}

pub fn encode_label_map(lm: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(LABEL_HEADER_LEN + 4 * lm.labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(lm.height as u32).to_le_bytes());
    out.extend_from_slice(&(lm.width as u32).to_le_bytes());
    for &l in &lm.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_label_map(bytes: &[u8]) -> Result<LabelMap, ImgError> {
    if bytes.len() < LABEL_MAGIC.len() {
        return Err(ImgError::TruncatedFile);
    }
    if &bytes[..8] != LABEL_MAGIC {
        return Err(ImgError::BadMagic);
    }
    if bytes.len() < LABEL_HEADER_LEN {
        return Err(ImgError::TruncatedFile);
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let (height, width) = (word(8) as usize, word(12) as usize);
    let n = height.checked_mul(width).ok_or(ImgError::TruncatedFile)?;
    let payload = &bytes[LABEL_HEADER_LEN..];
    if payload.len() < 4 * n {
        return Err(ImgError::TruncatedFile);
    }
    let labels = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelMap::new(height, width, labels)
}

pub fn write_label_map(lm: &LabelMap, path: impl AsRef<Path>) -> Result<(), ImgError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_label_map(lm))?;
    Ok(())
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap, ImgError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ImgError::FileNotFound(path.to_path_buf()),
        _ => ImgError::Io(e),
    })?;
    decode_label_map(&bytes)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|x| (x * 255.0).round() as u8)
}

/// 256 evenly spaced hues in a fixed shuffled order.
pub fn palette() -> &'static [[u8; 3]; 256] {
    static PALETTE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    PALETTE.get_or_init(|| {
        let mut hues: Vec<usize> = (0..256).collect();
        hues.shuffle(&mut ChaCha8Rng::seed_from_u64(PALETTE_SEED));
        let mut out = [[0u8; 3]; 256];
        for (slot, h) in out.iter_mut().zip(hues) {
            *slot = hsv_to_rgb(h as f64 / 256.0, 0.85, 0.95);
        }
        out
    })
}

pub fn render_label_map(lm: &LabelMap) -> Image {
    let pal = palette();
    let data = lm
        .labels
        .iter()
        .flat_map(|&l| pal[(l % 256) as usize])
        .map(|b| f32::from(b) / 255.0)
        .collect();
    Image::new(lm.height, lm.width, 3, data).expect("palette image has valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn load_rgb_and_gray_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = dir.path().join("white.png");
        image::save_buffer(&rgb, &[255u8; 12], 2, 2, image::ExtendedColorType::Rgb8).unwrap();
        let img = load_image(&rgb).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 1.0));

        let zero = dir.path().join("zero.pgm");
        fs::write(&zero, b"P5\n1 1\n255\n\x00").unwrap();
        let img = load_image(&zero).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[0.0]);

        let pair = dir.path().join("pair.png");
        image::save_buffer(&pair, &[51, 102], 2, 1, image::ExtendedColorType::L8).unwrap();
        let img = load_image(&pair).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert!((img.data()[0] - 0.2).abs() < 1e-7);
        assert!((img.data()[1] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(ImgError::FileNotFound(_))));
        let junk = dir.path().join("junk.png");
        fs::write(&junk, b"\x89PNG\r\n\x1a\nthis is not a png").unwrap();
        assert!(matches!(load_image(&junk), Err(ImgError::CorruptData(_))));
        let text = dir.path().join("notes.txt");
        fs::write(&text, b"hello world, definitely not an image").unwrap();
        assert!(matches!(load_image(&text), Err(ImgError::UnsupportedFormat(_))));
    }

    #[test]
    fn resize_identity_constant_and_interpolation() {
        let img = Image::new(2, 3, 1, vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 3).unwrap(), img);

        let flat = Image::filled(5, 4, 3, 0.37).unwrap();
        let out = resize_bilinear(&flat, 9, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.37));

        let ramp = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(resize_bilinear(&ramp, 1, 3).unwrap().data(), &[0.0, 0.5, 1.0]);

        assert!(matches!(resize_bilinear(&img, 0, 3), Err(ImgError::ZeroDimension)));
    }

    #[test]
    fn label_map_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.lbl");
        let lm = LabelMap::new(1, 1, vec![0]).unwrap();
        write_label_map(&lm, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), (LABEL_HEADER_LEN + 4) as u64);
        assert_eq!(read_label_map(&path).unwrap(), lm);

        let mut bytes = encode_label_map(&LabelMap::new(2, 2, vec![1, 2, 3, 4]).unwrap());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert!(matches!(decode_label_map(&bytes[..20]), Err(ImgError::TruncatedFile)));
        bytes[0] = b'X';
        assert!(matches!(decode_label_map(&bytes), Err(ImgError::BadMagic)));
    }

    #[test]
    fn palette_is_injective_and_periodic() {
        let colors: HashSet<_> = palette().iter().collect();
        assert_eq!(colors.len(), 256);

        let lm = LabelMap::new(1, 4, vec![0, 1, 0, 256]).unwrap();
        let r = render_label_map(&lm);
        assert_eq!(r.pixel(0, 0), r.pixel(0, 2));
        assert_ne!(r.pixel(0, 0), r.pixel(0, 1));
        assert_eq!(r.pixel(0, 0), r.pixel(0, 3));
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(0, 1, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn label_map_roundtrip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
                let labels = (0..h * w).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 17) as u32).collect();
                let lm = LabelMap::new(h, w, labels).unwrap();
                prop_assert_eq!(decode_label_map(&encode_label_map(&lm)).unwrap(), lm);
            }

            #[test]
            fn resize_preserves_bounds(
                vals in proptest::collection::vec(0.0f32..=1.0, 12),
                oh in 1usize..9, ow in 1usize..9,
            ) {
                let img = Image::new(3, 4, 1, vals.clone()).unwrap();
                let out = resize_bilinear(&img, oh, ow).unwrap();
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                for &v in out.data() {
                    prop_assert!(f64::from(v) >= f64::from(lo) - 1e-9);
                    prop_assert!(f64::from(v) <= f64::from(hi) + 1e-9);
                }
            }

            #[test]
            fn render_colors_equal_iff_congruent(a in 0u32..2000, b in 0u32..2000) {
                let r = render_label_map(&LabelMap::new(1, 2, vec![a, b]).unwrap());
                prop_assert_eq!(r.pixel(0, 0) == r.pixel(0, 1), a % 256 == b % 256);
            }
        }
    }
}
