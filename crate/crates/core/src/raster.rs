//! Grayscale rasters, Netpbm ingestion, geometric preprocessing and
//! 3x3 neighborhood sampling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Row-major grayscale image with real-valued intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Adds `offset` to every pixel.
    pub fn shifted(&self, offset: f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p + offset).collect(),
        }
    }

    fn require_min(&self, min: usize) -> Result<()> {
        if self.width < min || self.height < min {
            return Err(Error::ImageTooSmall {
                width: self.width,
                height: self.height,
                min,
            });
        }
        Ok(())
    }
}

/// Eight neighbor-minus-center differences, clockwise from the top-left
/// neighbor: TL, T, TR, R, BR, B, BL, L.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DiffVector(pub [f64; 8]);

impl DiffVector {
    pub const DIM: usize = 8;

    pub fn values(&self) -> &[f64; 8] {
        &self.0
    }
}

/// Neighborhood sampling geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SamplingMode {
    /// The eight raster neighbors.
    #[default]
    Rectangular,
    /// Diagonal samples bilinearly interpolated onto the unit circle.
    Circular,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Rectangular => "rectangular",
            SamplingMode::Circular => "circular",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SamplingMode::Rectangular => 0,
            SamplingMode::Circular => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SamplingMode::Rectangular),
            1 => Ok(SamplingMode::Circular),
            other => Err(Error::InvalidFile(format!("unknown sampling mode {other}"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rectangular" | "rect" => Ok(SamplingMode::Rectangular),
            "circular" | "circ" => Ok(SamplingMode::Circular),
            _ => Err(Error::invalid(format!("unknown sampling mode '{s}'"))),
        }
    }
}

/// A differential vector and the pixel it was centered on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocatedDiff {
    pub row: usize,
    pub col: usize,
    pub v: DiffVector,
}

// (row, col) offsets in DiffVector order.
const OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// Differential vector centered on an interior pixel. Caller guarantees
/// `1 <= row < height - 1` and `1 <= col < width - 1`.
#[inline]
pub(crate) fn diff_at(img: &GrayImage, row: usize, col: usize, mode: SamplingMode) -> DiffVector {
    let w = img.width;
    let base = row * w + col;
    let px = |dr: isize, dc: isize| -> f64 {
        img.data[(base as isize + dr * w as isize + dc) as usize]
    };
    let center = img.data[base];
    let mut out = [0.0; 8];
    for (slot, &(dr, dc)) in out.iter_mut().zip(OFFSETS.iter()) {
        *slot = px(dr, dc) - center;
    }
    if mode == SamplingMode::Circular {
        // Bilinear weights at offset (1/sqrt2, 1/sqrt2). The center weight
        // multiplies (center - center) and drops out, so the sample is built
        // from exact pixel differences.
        let f = std::f64::consts::FRAC_1_SQRT_2;
        let w_axis = f * (1.0 - f);
        let w_diag = f * f;
        for i in [0usize, 2, 4, 6] {
            let (dr, dc) = OFFSETS[i];
            let vertical = px(dr, 0) - center;
            let horizontal = px(0, dc) - center;
            let diagonal = px(dr, dc) - center;
            out[i] = w_axis * horizontal + w_axis * vertical + w_diag * diagonal;
        }
    }
    DiffVector(out)
}

/// Number of differential vectors an image yields (interior pixels).
pub fn interior_count(img: &GrayImage) -> usize {
    img.width.saturating_sub(2) * img.height.saturating_sub(2)
}

/// Calls `f` for every interior pixel in raster order.
pub fn for_each_diff(
    img: &GrayImage,
    mode: SamplingMode,
    mut f: impl FnMut(usize, usize, DiffVector),
) -> Result<()> {
    img.require_min(3)?;
    for row in 1..img.height - 1 {
        for col in 1..img.width - 1 {
            f(row, col, diff_at(img, row, col, mode));
        }
    }
    Ok(())
}

/// One differential vector per interior pixel, in raster order.
pub fn extract_diff_vectors(img: &GrayImage, mode: SamplingMode) -> Result<Vec<LocatedDiff>> {
    let mut out = Vec::with_capacity(interior_count(img));
    for_each_diff(img, mode, |row, col, v| out.push(LocatedDiff { row, col, v }))?;
    Ok(out)
}

/// Pixel rectangle `[left, right) x [top, bottom)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

impl Roi {
    pub fn new(left: usize, top: usize, right: usize, bottom: usize) -> Self {
        Roi {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }
}

impl FromStr for Roi {
    type Err = Error;

    /// Parses `left,top,right,bottom`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad roi '{s}'")))?;
        match parts.as_slice() {
            &[l, t, r, b] => Ok(Roi::new(l, t, r, b)),
            _ => Err(Error::invalid(format!("roi needs 4 values, got '{s}'"))),
        }
    }
}

pub fn crop(img: &GrayImage, roi: Roi) -> Result<GrayImage> {
    if roi.left >= roi.right || roi.top >= roi.bottom || roi.right > img.width || roi.bottom > img.height {
        return Err(Error::RoiOutOfBounds {
            roi: (roi.left, roi.top, roi.right, roi.bottom),
            width: img.width,
            height: img.height,
        });
    }
    let mut data = Vec::with_capacity(roi.width() * roi.height());
    for row in roi.top..roi.bottom {
        let start = row * img.width;
        data.extend_from_slice(&img.data[start + roi.left..start + roi.right]);
    }
    Ok(GrayImage {
        width: roi.width(),
        height: roi.height(),
        data,
    })
}

/// Crops the centered `width x height` window.
pub fn center_crop(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 || width > img.width || height > img.height {
        return Err(Error::invalid(format!(
            "cannot center-crop {}x{} image to {width}x{height}",
            img.width, img.height
        )));
    }
    let left = (img.width - width) / 2;
    let top = (img.height - height) / 2;
    crop(img, Roi::new(left, top, left + width, top + height))
}

/// Corner-aligned bilinear resampling.
pub fn resize(img: &GrayImage, new_width: usize, new_height: usize) -> Result<GrayImage> {
    if new_width == 0 || new_height == 0 {
        return Err(Error::invalid(format!(
            "resize target {new_width}x{new_height} has a zero dimension"
        )));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::EmptyInput("image"));
    }
    let xs = source_coords(img.width, new_width);
    let ys = source_coords(img.height, new_height);
    let mut data = Vec::with_capacity(new_width * new_height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(img.get(y0, x0), img.get(y0, x1), fx);
            let bottom = lerp(img.get(y1, x0), img.get(y1, x1), fx);
            data.push(lerp(top, bottom, fy));
        }
    }
    Ok(GrayImage {
        width: new_width,
        height: new_height,
        data,
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn source_coords(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let x0 = (x.floor() as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}

/// Reverses column order.
pub fn hflip(img: &GrayImage) -> GrayImage {
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks_exact(img.width.max(1)) {
        data.extend(row.iter().rev());
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Geometric preprocessing applied in order: crop, center crop, resize.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Preprocess {
    pub crop: Option<Roi>,
    pub center_crop: Option<(usize, usize)>,
    pub resize: Option<(usize, usize)>,
}

impl Preprocess {
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        let mut out = match self.crop {
            Some(roi) => crop(img, roi)?,
            None => img.clone(),
        };
        if let Some((w, h)) = self.center_crop {
            out = center_crop(&out, w, h)?;
        }
        if let Some((w, h)) = self.resize {
            out = resize(&out, w, h)?;
        }
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        self.crop.is_none() && self.center_crop.is_none() && self.resize.is_none()
    }
}

/// Reads a PGM (P2/P5) or PPM (P3/P6) file as grayscale.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_pnm(&bytes).map_err(|e| e.in_file(path))
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self
            .token()
            .ok_or_else(|| Error::MalformedHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("bad {what} '{}'", String::from_utf8_lossy(tok))))
    }
}

/// Decodes an in-memory Netpbm gray or color raster.
pub fn decode_pnm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 {
        return Err(Error::MalformedHeader("file too short for magic number".into()));
    }
    let magic = &bytes[..2];
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P5" => (1, true),
        b"P3" => (3, false),
        b"P6" => (3, true),
        other => return Err(Error::UnsupportedFormat(String::from_utf8_lossy(other).into_owned())),
    };
    let mut header = HeaderReader { bytes, pos: 2 };
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    let expected = width * height * channels;
    let samples: Vec<f64> = if binary {
        // Exactly one whitespace byte separates maxval from the raster.
        let start = header.pos + 1;
        let payload = bytes.get(start..).unwrap_or(&[]);
        let wide = maxval > 255;
        let bytes_per = if wide { 2 } else { 1 };
        if payload.len() < expected * bytes_per {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len() / bytes_per,
            });
        }
        if wide {
            payload[..expected * 2]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                .collect()
        } else {
            payload[..expected].iter().map(|&b| b as f64).collect()
        }
    } else {
        let mut out = Vec::with_capacity(expected);
        while out.len() < expected {
            match header.token() {
                Some(tok) => {
                    let v = std::str::from_utf8(tok)
                        .ok()
                        .and_then(|s| s.parse::<u32>().ok())
                        .ok_or_else(|| {
                            Error::InvalidFile(format!("bad sample '{}'", String::from_utf8_lossy(tok)))
                        })?;
                    out.push(v as f64);
                }
                None => {
                    return Err(Error::TruncatedPayload {
                        expected,
                        found: out.len(),
                    })
                }
            }
        }
        out
    };
    if let Some(bad) = samples.iter().find(|&&s| s > maxval as f64) {
        return Err(Error::InvalidFile(format!("sample {bad} exceeds maxval {maxval}")));
    }
    let scale = if maxval == 255 { None } else { Some(255.0 / maxval as f64) };
    let rescale = |s: f64| match scale {
        Some(k) => s * k,
        None => s,
    };
    let data = if channels == 1 {
        samples.into_iter().map(rescale).collect()
    } else {
        samples
            .chunks_exact(3)
            .map(|rgb| 0.299 * rescale(rgb[0]) + 0.587 * rescale(rgb[1]) + 0.114 * rescale(rgb[2]))
            .collect()
    };
    GrayImage::new(width, height, data)
}

/// Writes an 8-bit binary PGM (P5); intensities are rounded and clamped.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(img.data.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", img.width, img.height)?;
    buf.extend(img.data.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8));
    fs::write(path, buf).map_err(|e| Error::from(e).in_file(path))
}
