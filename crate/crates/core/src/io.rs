//! File formats: 8-bit PNG rasters, the `SSDT` float tensor file and the
//! `SSH1` saturation histogram file.
//!
//! `SSDT` layout (all integers little-endian):
//!
//! ```text
//! "SSDT" | u32 version = 1 | u32 ndim | ndim x u32 dims | prod(dims) x f32
//! ```
//!
//! `SSH1` layout: `"SSH1"` followed by 64 little-endian `f32` bin masses.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ImageTensor, ParsingMap};

pub const TENSOR_MAGIC: &[u8; 4] = b"SSDT";
pub const TENSOR_VERSION: u32 = 1;
pub const HISTOGRAM_MAGIC: &[u8; 4] = b"SSH1";
pub const HISTOGRAM_BINS: usize = 64;

/// Upper bound on tensor elements accepted from a file (2^31).
pub const MAX_ELEMENTS: u64 = 1 << 31;

/// Maps an 8-bit value to `[-1, 1]` via `2p/255 - 1`.
#[inline]
pub fn byte_to_unit<S: Scalar>(p: u8) -> S {
    S::lit(2.0 * f64::from(p) / 255.0 - 1.0)
}

/// Inverse of [`byte_to_unit`], clamping and rounding to the nearest byte.
#[inline]
pub fn unit_to_byte<S: Scalar>(v: S) -> u8 {
    let x = ((v.as_f64().clamp(-1.0, 1.0) + 1.0) * 127.5).round();
    x.clamp(0.0, 255.0) as u8
}

fn open_raster(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let img = image::open(path).map_err(|e| Error::Raster(format!("{}: {e}", path.display())))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Raster(format!("{}: zero-sized raster", path.display())));
    }
    Ok(img)
}

/// Loads an 8-bit grayscale or RGB PNG into the `[-1, 1]` range.
pub fn load_image<S: Scalar>(path: impl AsRef<Path>) -> Result<ImageTensor<S>> {
    let path = path.as_ref();
    let img = open_raster(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.as_raw().iter().map(|&p| byte_to_unit(p)).collect();
            ImageTensor::new(1, h, w, data)
        }
        DynamicImage::ImageRgb8(buf) => {
            let raw = buf.as_raw();
            let n = h * w;
            let mut data = vec![S::zero(); 3 * n];
            for (px, rgb) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * n + px] = byte_to_unit(rgb[c]);
                }
            }
            ImageTensor::new(3, h, w, data)
        }
        other => Err(Error::Raster(format!(
            "{}: unsupported pixel format {:?}; expected 8-bit grayscale or RGB",
            path.display(),
            other.color()
        ))),
    }
}

/// Writes a tensor as an 8-bit PNG, clamping to `[-1, 1]`.
pub fn save_image<S: Scalar>(t: &ImageTensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = t.shape();
    let n = h * w;
    let result = if c == 1 {
        let raw: Vec<u8> = t.data().iter().map(|&v| unit_to_byte(v)).collect();
        let buf: GrayImage = ImageBuffer::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| Error::Raster("buffer size mismatch".into()))?;
        buf.save(path)
    } else {
        let mut raw = vec![0u8; 3 * n];
        for px in 0..n {
            for ch in 0..3 {
                raw[3 * px + ch] = unit_to_byte(t.data()[ch * n + px]);
            }
        }
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| Error::Raster("buffer size mismatch".into()))?;
        buf.save(path)
    };
    result.map_err(|e| Error::Raster(format!("{}: {e}", path.display())))
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    match open_raster(path)? {
        DynamicImage::ImageLuma8(buf) => Ok(buf),
        other => Err(Error::Raster(format!(
            "{}: expected 8-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Loads a grayscale PNG mask: values `>= 128` are set, everything else clear.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let buf = load_gray(path.as_ref())?;
    let data = buf.as_raw().iter().map(|&p| p >= 128).collect();
    BinaryMask::new(buf.height() as usize, buf.width() as usize, data)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .ok_or_else(|| Error::Raster("buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Raster(format!("{}: {e}", path.display())))
}

/// Loads a grayscale PNG whose pixel values are label codes.
pub fn load_parsing_map(path: impl AsRef<Path>) -> Result<ParsingMap> {
    let buf = load_gray(path.as_ref())?;
    ParsingMap::new(buf.height() as usize, buf.width() as usize, buf.into_raw())
}

pub fn save_parsing_map(map: &ParsingMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: GrayImage =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, map.data().to_vec())
            .ok_or_else(|| Error::Raster("buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Raster(format!("{}: {e}", path.display())))
}

/// Untyped `SSDT` payload: arbitrary dims plus `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

fn read_exact_or_short<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("short payload while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_short(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads `n` little-endian f32 values.
pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_or_short(r, &mut bytes, "payload")?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub(crate) fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_raw_tensor<W: Write>(w: &mut W, t: &RawTensor) -> Result<()> {
    let expected: u64 = t.dims.iter().map(|&d| u64::from(d)).product();
    if expected != t.data.len() as u64 {
        return Err(Error::shape(format!(
            "dims {:?} describe {expected} values, payload has {}",
            t.dims,
            t.data.len()
        )));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for d in &t.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&f32s_to_bytes(&t.data))?;
    Ok(())
}

pub fn read_raw_tensor<R: Read>(r: &mut R) -> Result<RawTensor> {
    let mut magic = [0u8; 4];
    read_exact_or_short(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let ndim = read_u32(r, "ndim")?;
    if ndim > 8 {
        return Err(Error::Format(format!("dimension overflow: ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut total: u64 = 1;
    for _ in 0..ndim {
        let d = read_u32(r, "dims")?;
        total = total
            .checked_mul(u64::from(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        dims.push(d);
    }
    let data = read_f32s(r, total as usize)?;
    Ok(RawTensor { dims, data })
}

impl<S: Scalar> ImageTensor<S> {
    /// Encodes as a 3-d `SSDT` tensor `[C, H, W]` (values narrowed to f32).
    pub fn to_raw(&self) -> RawTensor {
        let (c, h, w) = self.shape();
        RawTensor {
            dims: vec![c as u32, h as u32, w as u32],
            data: self.data().iter().map(|v| v.as_f32()).collect(),
        }
    }

    /// Accepts `[C, H, W]` or `[H, W]` (single channel).
    pub fn from_raw(raw: &RawTensor) -> Result<Self> {
        let (c, h, w) = match raw.dims.as_slice() {
            [c, h, w] => (*c as usize, *h as usize, *w as usize),
            [h, w] => (1, *h as usize, *w as usize),
            other => {
                return Err(Error::Format(format!(
                    "expected 2 or 3 dims for an image tensor, got {other:?}"
                )))
            }
        };
        let data = raw
            .data
            .iter()
            .map(|&v| S::from_f32(v).unwrap_or_else(S::nan))
            .collect();
        ImageTensor::new(c, h, w, data)
    }
}

pub fn save_tensor<S: Scalar>(t: &ImageTensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_raw_tensor(&mut w, &t.to_raw())?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<ImageTensor<S>> {
    let mut r = BufReader::new(File::open(path)?);
    ImageTensor::from_raw(&read_raw_tensor(&mut r)?)
}

/// Writes a 64-bin histogram in the `SSH1` format.
pub fn save_histogram(hist: &[f64], path: impl AsRef<Path>) -> Result<()> {
    if hist.len() != HISTOGRAM_BINS {
        return Err(Error::invalid(format!(
            "histogram must have {HISTOGRAM_BINS} bins, got {}",
            hist.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(HISTOGRAM_MAGIC)?;
    let vals: Vec<f32> = hist.iter().map(|&v| v as f32).collect();
    w.write_all(&f32s_to_bytes(&vals))?;
    w.flush()?;
    Ok(())
}

pub fn load_histogram(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_short(&mut r, &mut magic, "magic")?;
    if &magic != HISTOGRAM_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    Ok(read_f32s(&mut r, HISTOGRAM_BINS)?
        .into_iter()
        .map(f64::from)
        .collect())
}
