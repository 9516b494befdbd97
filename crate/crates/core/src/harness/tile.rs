//! Synthetic rectilinear design tiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::litho::KernelSet;
use crate::raster::BinaryImage;

/// Axis-aligned rectangle in nm; `x`, `y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn right(&self) -> f64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.height
    }

    /// Euclidean distance between the two closed rectangles.
    pub fn distance(&self, other: &Rect) -> f64 {
        let dx = (other.x - self.right()).max(self.x - other.right()).max(0.0);
        let dy = (other.y - self.bottom()).max(self.y - other.bottom()).max(0.0);
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub side: usize,
    pub pixel_size: f64,
    pub margin: f64,
    pub rects: Vec<Rect>,
    pub min_width: f64,
    pub min_space: f64,
}

/// Ranges a generated tile is drawn from. All lengths in nm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileBounds {
    pub side: usize,
    pub pixel_size: f64,
    pub margin: f64,
    pub min_rects: usize,
    pub max_rects: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub min_space: f64,
    pub max_attempts: usize,
}

impl Default for TileBounds {
    fn default() -> Self {
        Self {
            side: 256,
            pixel_size: 8.0,
            margin: 160.0,
            min_rects: 1,
            max_rects: 8,
            min_width: 80.0,
            max_width: 480.0,
            min_space: 80.0,
            max_attempts: 1000,
        }
    }
}

impl TileBounds {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.side == 0 || !(self.pixel_size > 0.0) {
            return bad("tile side and pixel size must be positive");
        }
        if self.min_rects == 0 || self.max_rects < self.min_rects || self.max_rects > 8 {
            return bad("rectangle count range must lie within 1..=8");
        }
        if !(self.min_width > 0.0 && self.max_width >= self.min_width && self.min_space > 0.0 && self.margin >= 0.0) {
            return bad("width, spacing and margin bounds are inconsistent");
        }
        if self.max_attempts == 0 {
            return bad("attempt cap must be >= 1");
        }
        let ps = self.pixel_size;
        let lo = (self.min_width / ps).ceil() as usize;
        let hi = (self.max_width / ps).floor() as usize;
        if lo > hi || lo == 0 {
            return bad("no pixel-aligned width fits the width range");
        }
        if self.usable_px() < lo {
            return bad("margin leaves no room for a rectangle");
        }
        Ok(())
    }

    /// Rejects margins narrower than the kernel support.
    pub fn check_kernels(&self, ks: &KernelSet) -> Result<()> {
        let reach = ks.radius() as f64 * ks.pixel_size_nm();
        if self.margin < reach {
            return Err(Error::InvalidConfig(format!(
                "margin {} nm is smaller than the kernel reach {reach} nm",
                self.margin
            )));
        }
        if (ks.pixel_size_nm() - self.pixel_size).abs() > 1e-9 {
            return Err(Error::InvalidConfig("kernel and tile pixel sizes differ".into()));
        }
        Ok(())
    }

    fn margin_px(&self) -> usize {
        (self.margin / self.pixel_size).ceil() as usize
    }

    fn usable_px(&self) -> usize {
        self.side.saturating_sub(2 * self.margin_px())
    }
}

/// Draws a tile; deterministic in `seed`.
pub fn gen_tile(seed: u64, bounds: &TileBounds) -> Result<(TileSpec, BinaryImage)> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = bounds.pixel_size;
    let lo = (bounds.min_width / ps).ceil() as usize;
    let hi = (bounds.max_width / ps).floor() as usize;
    let m = bounds.margin_px();
    let usable = bounds.usable_px();
    let hi = hi.min(usable);
    for _ in 0..bounds.max_attempts {
        let target = rng.random_range(bounds.min_rects..=bounds.max_rects);
        let mut rects: Vec<Rect> = Vec::with_capacity(target);
        let mut tries = 0;
        while rects.len() < target && tries < 50 * target {
            tries += 1;
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x = m + rng.random_range(0..=usable - w);
            let y = m + rng.random_range(0..=usable - h);
            let r = Rect {
                x: x as f64 * ps,
                y: y as f64 * ps,
                width: w as f64 * ps,
                height: h as f64 * ps,
            };
            if rects.iter().all(|o| o.distance(&r) >= bounds.min_space) {
                rects.push(r);
            }
        }
        if rects.len() == target {
            let spec = TileSpec {
                side: bounds.side,
                pixel_size: ps,
                margin: m as f64 * ps,
                rects,
                min_width: bounds.min_width,
                min_space: bounds.min_space,
            };
            let img = rasterize(&spec)?;
            return Ok((spec, img));
        }
    }
    Err(Error::AttemptCapExceeded {
        attempts: bounds.max_attempts,
    })
}

/// Exact rasterization: every rectangle edge lies on a pixel boundary.
pub fn rasterize(spec: &TileSpec) -> Result<BinaryImage> {
    let ps = spec.pixel_size;
    let mut px = Vec::with_capacity(spec.rects.len());
    for r in &spec.rects {
        let coords = [r.x, r.y, r.right(), r.bottom()].map(|v| v / ps);
        if coords.iter().any(|c| (c - c.round()).abs() > 1e-9 || *c < 0.0) {
            return Err(Error::InvalidArgument(format!("rectangle {r:?} is not pixel aligned")));
        }
        px.push(coords.map(|c| c.round() as usize));
    }
    BinaryImage::from_fn(spec.side, spec.side, ps, |row, col| {
        px.iter().any(|&[x0, y0, x1, y1]| (y0..y1).contains(&row) && (x0..x1).contains(&col))
    })
}
