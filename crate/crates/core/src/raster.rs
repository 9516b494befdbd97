//! Pixel containers, PNG I/O, resampling and rectilinear edge extraction.
//!
//! Coordinates: pixel `(row, col)` covers `x ∈ [col·ps, (col+1)·ps)` and
//! `y ∈ [row·ps, (row+1)·ps)` where `ps` is the pixel size in nanometres.
//! Row index grows with `y`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unrestricted real-valued 2D field (optimization variables, intensities,
/// gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Circular shift: `out(r, c) = self(r - dy, c - dx)`.
    pub fn roll(&self, dy: isize, dx: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        Self::from_fn(self.width, self.height, |r, c| {
            let sr = (r as isize - dy).rem_euclid(h) as usize;
            let sc = (c as isize - dx).rem_euclid(w) as usize;
            self.get(sr, sc)
        })
    }
}

/// Real image with values in `[0, 1]` and a physical pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self> {
        check_geometry(width, height, pixel_size)?;
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "gray value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel_size: f64, value: f64) -> Result<Self> {
        Self::new(width, height, pixel_size, vec![value; width * height])
    }

    /// Clamps every value into `[0, 1]`; non-finite values become 0.
    pub fn from_grid_clamped(grid: &Grid, pixel_size: f64) -> Result<Self> {
        let data = grid
            .data
            .iter()
            .map(|&v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(grid.width, grid.height, pixel_size, data)
    }

    pub fn from_grid(grid: &Grid, pixel_size: f64) -> Result<Self> {
        Self::new(grid.width, grid.height, pixel_size, grid.data.clone())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// The 8-bit quantization `round(v * 255)` that [`save_png`] writes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

/// Image restricted to `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    pixel_size_bits: u64,
    data: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, pixel_size: f64, data: Vec<u8>) -> Result<Self> {
        check_geometry(width, height, pixel_size)?;
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("binary image value not in {0,1}".into()));
        }
        Ok(Self {
            width,
            height,
            pixel_size_bits: pixel_size.to_bits(),
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        Self::new(width, height, pixel_size, vec![0; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        pixel_size: f64,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self::new(width, height, pixel_size, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        f64::from_bits(self.pixel_size_bits)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Value at a signed coordinate; anything outside the image reads as 0.
    #[inline]
    pub fn get_or_zero(&self, row: isize, col: isize) -> u8 {
        if row < 0 || col < 0 || row >= self.height as isize || col >= self.width as isize {
            0
        } else {
            self.data[row as usize * self.width + col as usize]
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = u8::from(value);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixel_size: self.pixel_size(),
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn same_geometry(&self, other: &BinaryImage) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixel_size_bits == other.pixel_size_bits
    }

    /// Shift by whole pixels with zero fill.
    pub fn translate(&self, dy: isize, dx: isize) -> Self {
        let mut out = vec![0u8; self.data.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get_or_zero(r as isize - dy, c as isize - dx);
                out[r * self.width + c] = v;
            }
        }
        Self {
            data: out,
            ..self.clone()
        }
    }
}

fn check_geometry(width: usize, height: usize, pixel_size: f64) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    if !(pixel_size.is_finite() && pixel_size > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pixel size must be positive, got {pixel_size}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Edge runs along x; `fixed_coord` is a y coordinate.
    Horizontal,
    /// Edge runs along y; `fixed_coord` is an x coordinate.
    Vertical,
}

/// An axis-aligned piece of a design boundary, in nanometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeSegment {
    pub axis: Axis,
    pub fixed_coord: f64,
    pub span_start: f64,
    pub span_end: f64,
    /// +1 when the pattern interior lies toward increasing `fixed_coord`.
    pub inside_direction: i8,
}

impl EdgeSegment {
    pub fn length(&self) -> f64 {
        self.span_end - self.span_start
    }
}

/// Loads an 8-bit grayscale PNG with a 1 nm pixel size.
pub fn load_png(path: impl AsRef<Path>) -> Result<GrayImage> {
    load_png_with_pixel_size(path, 1.0)
}

pub fn load_png_with_pixel_size(path: impl AsRef<Path>, pixel_size: f64) -> Result<GrayImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{}: expected 8-bit grayscale, found {:?} at {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(width * height)];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            data.push(f64::from(buf[r * stride + c]) / 255.0);
        }
    }
    GrayImage::new(width, height, pixel_size, data)
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&img.to_bytes()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn save_binary_png(img: &BinaryImage, path: impl AsRef<Path>) -> Result<()> {
    save_png(&img.to_gray(), path)
}

/// Loads a PNG and thresholds it at 0.5.
pub fn load_binary_png(path: impl AsRef<Path>, pixel_size: f64) -> Result<BinaryImage> {
    binarize(&load_png_with_pixel_size(path, pixel_size)?, 0.5)
}

/// `out = 1` iff `img > thresh` (strict).
pub fn binarize(img: &GrayImage, thresh: f64) -> Result<BinaryImage> {
    if !(thresh > 0.0 && thresh < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "binarize threshold must lie in (0, 1), got {thresh}"
        )));
    }
    let data = img.data.iter().map(|&v| u8::from(v > thresh)).collect();
    BinaryImage::new(img.width, img.height, img.pixel_size, data)
}

/// Threshold an unrestricted grid; no range check on `thresh`.
pub fn binarize_grid(grid: &Grid, thresh: f64, pixel_size: f64) -> Result<BinaryImage> {
    let data = grid.data.iter().map(|&v| u8::from(v > thresh)).collect();
    BinaryImage::new(grid.width, grid.height, pixel_size, data)
}

pub fn avg_pool(img: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor == 0 || !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "pool factor {factor} does not divide {}x{}",
            img.width, img.height
        )));
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let data = avg_pool_plane(&img.data, img.height, img.width, factor);
    debug_assert_eq!(data.len(), ow * oh);
    GrayImage::new(ow, oh, img.pixel_size * factor as f64, data)
}

pub(crate) fn avg_pool_plane(src: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; oh * ow];
    for r in 0..h {
        let orow = r / f;
        for c in 0..w {
            out[orow * ow + c / f] += src[r * w + c];
        }
    }
    let inv = 1.0 / (f * f) as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

pub fn upsample_bicubic(img: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let up = bicubic_plane(&img.data, img.height, img.width, factor);
    let data = up.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    GrayImage::new(
        img.width * factor,
        img.height * factor,
        img.pixel_size / factor as f64,
        data,
    )
}

/// Keys cubic convolution weight, `a = -0.5`.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four source taps per output index for half-pixel-centred upsampling
/// with clamped borders.
pub(crate) fn bicubic_taps(src_len: usize, factor: usize) -> Vec<[(usize, f64); 4]> {
    let last = src_len as isize - 1;
    (0..src_len * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut taps = [(0usize, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as isize - 1;
                let idx = (base + offset).clamp(0, last) as usize;
                *tap = (idx, cubic_weight(t - offset as f64));
            }
            taps
        })
        .collect()
}

/// Separable bicubic upsampling of one plane (no clamping of values).
pub(crate) fn bicubic_plane(src: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let col_taps = bicubic_taps(w, factor);
    let row_taps = bicubic_taps(h, factor);
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let srow = &src[r * w..(r + 1) * w];
        let drow = &mut tmp[r * ow..(r + 1) * ow];
        for (o, taps) in col_taps.iter().enumerate() {
            drow[o] = taps.iter().map(|&(i, wt)| wt * srow[i]).sum();
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for (o, taps) in row_taps.iter().enumerate() {
        let drow = &mut out[o * ow..(o + 1) * ow];
        for &(i, wt) in taps {
            let srow = &tmp[i * ow..(i + 1) * ow];
            for (d, s) in drow.iter_mut().zip(srow) {
                *d += wt * s;
            }
        }
    }
    out
}

/// Transpose of [`bicubic_plane`]: maps an upstream gradient on the
/// upsampled plane back to the source plane.
pub(crate) fn bicubic_plane_transpose(
    grad: &[f64],
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let ow = w * factor;
    let col_taps = bicubic_taps(w, factor);
    let row_taps = bicubic_taps(h, factor);
    let mut tmp = vec![0.0; h * ow];
    for (o, taps) in row_taps.iter().enumerate() {
        let grow = &grad[o * ow..(o + 1) * ow];
        for &(i, wt) in taps {
            let trow = &mut tmp[i * ow..(i + 1) * ow];
            for (t, g) in trow.iter_mut().zip(grow) {
                *t += wt * g;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let trow = &tmp[r * ow..(r + 1) * ow];
        let orow = &mut out[r * w..(r + 1) * w];
        for (o, taps) in col_taps.iter().enumerate() {
            for &(i, wt) in taps {
                orow[i] += wt * trow[o];
            }
        }
    }
    out
}

/// Decomposes the 0/1 boundary of `design` into maximal axis-aligned runs.
pub fn extract_edges(design: &BinaryImage) -> Vec<EdgeSegment> {
    let (h, w) = (design.height as isize, design.width as isize);
    let ps = design.pixel_size();
    let mut segments = Vec::new();

    // Horizontal boundaries between row b-1 and row b.
    for b in 0..=h {
        let mut run: Option<(isize, i8)> = None;
        for c in 0..=w {
            let orient = if c < w {
                let above = design.get_or_zero(b - 1, c);
                let below = design.get_or_zero(b, c);
                (above != below).then_some(if below == 1 { 1i8 } else { -1 })
            } else {
                None
            };
            match (run, orient) {
                (Some((_, o)), Some(n)) if o == n => {}
                (prev, next) => {
                    if let Some((start, o)) = prev {
                        segments.push(EdgeSegment {
                            axis: Axis::Horizontal,
                            fixed_coord: b as f64 * ps,
                            span_start: start as f64 * ps,
                            span_end: c as f64 * ps,
                            inside_direction: o,
                        });
                    }
                    run = next.map(|o| (c, o));
                }
            }
        }
    }

    // Vertical boundaries between column a-1 and column a.
    for a in 0..=w {
        let mut run: Option<(isize, i8)> = None;
        for r in 0..=h {
            let orient = if r < h {
                let left = design.get_or_zero(r, a - 1);
                let right = design.get_or_zero(r, a);
                (left != right).then_some(if right == 1 { 1i8 } else { -1 })
            } else {
                None
            };
            match (run, orient) {
                (Some((_, o)), Some(n)) if o == n => {}
                (prev, next) => {
                    if let Some((start, o)) = prev {
                        segments.push(EdgeSegment {
                            axis: Axis::Vertical,
                            fixed_coord: a as f64 * ps,
                            span_start: start as f64 * ps,
                            span_end: r as f64 * ps,
                            inside_direction: o,
                        });
                    }
                    run = next.map(|o| (r, o));
                }
            }
        }
    }
    segments
}
