//! Printability scores: edge placement error and process variation band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::litho::{resist_threshold, simulate_intensity, Corners, KernelSet, ProcessCondition};
use crate::raster::{extract_edges, Axis, BinaryImage, EdgeSegment, GrayImage, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpeConfig {
    pub sample_interval: f64,
    pub tolerance: f64,
    pub search_window: f64,
}

impl Default for EpeConfig {
    fn default() -> Self {
        Self {
            sample_interval: 40.0,
            tolerance: 16.0,
            search_window: 80.0,
        }
    }
}

impl EpeConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.sample_interval, self.tolerance, self.search_window]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !all_positive {
            return Err(Error::InvalidConfig("EPE distances must be positive".into()));
        }
        if self.search_window < self.tolerance {
            return Err(Error::InvalidConfig(format!(
                "search window {} is below tolerance {}",
                self.search_window, self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpeSite {
    /// `(x, y)` in nanometres.
    pub position: (f64, f64),
    /// `None` when no matching contour lies within the search window.
    pub measured_epe: Option<f64>,
    pub violating: bool,
}

/// Sample positions along a segment: the midpoint, then outward steps
/// strictly inside the span.
pub fn sample_positions(seg: &EdgeSegment, interval: f64) -> Vec<f64> {
    let mid = 0.5 * (seg.span_start + seg.span_end);
    let mut out = vec![mid];
    let mut k = 1.0;
    loop {
        let lo = mid - k * interval;
        let hi = mid + k * interval;
        let mut any = false;
        if lo > seg.span_start {
            out.push(lo);
            any = true;
        }
        if hi < seg.span_end {
            out.push(hi);
            any = true;
        }
        if !any {
            break;
        }
        k += 1.0;
    }
    out.sort_by(f64::total_cmp);
    out
}

fn measure(wafer: &BinaryImage, seg: &EdgeSegment, s: f64, cfg: &EpeConfig) -> Option<f64> {
    let ps = wafer.pixel_size();
    let b = (seg.fixed_coord / ps).round() as isize;
    let reach = (cfg.search_window / ps).floor() as isize;
    let along_len = match seg.axis {
        Axis::Horizontal => wafer.width(),
        Axis::Vertical => wafer.height(),
    };
    let line = ((s / ps).floor() as isize).clamp(0, along_len as isize - 1);
    let matches = |boundary: isize| -> bool {
        let (before, after) = match seg.axis {
            Axis::Horizontal => (
                wafer.get_or_zero(boundary - 1, line),
                wafer.get_or_zero(boundary, line),
            ),
            Axis::Vertical => (
                wafer.get_or_zero(line, boundary - 1),
                wafer.get_or_zero(line, boundary),
            ),
        };
        if seg.inside_direction > 0 {
            before == 0 && after == 1
        } else {
            before == 1 && after == 0
        }
    };
    (0..=reach)
        .find(|&d| matches(b - d) || matches(b + d))
        .map(|d| d as f64 * ps)
}

/// Counts EPE violations of `wafer` against the edges of `design`.
pub fn epe_violations(wafer: &BinaryImage, design: &BinaryImage, cfg: &EpeConfig) -> Result<(usize, Vec<EpeSite>)> {
    cfg.validate()?;
    if !wafer.same_geometry(design) {
        return Err(Error::DimensionMismatch(format!(
            "wafer {}x{} @ {} nm vs design {}x{} @ {} nm",
            wafer.width(),
            wafer.height(),
            wafer.pixel_size(),
            design.width(),
            design.height(),
            design.pixel_size()
        )));
    }
    let mut sites = Vec::new();
    for seg in extract_edges(design) {
        for s in sample_positions(&seg, cfg.sample_interval) {
            let measured = measure(wafer, &seg, s, cfg);
            let position = match seg.axis {
                Axis::Horizontal => (s, seg.fixed_coord),
                Axis::Vertical => (seg.fixed_coord, s),
            };
            sites.push(EpeSite {
                position,
                measured_epe: measured,
                violating: measured.is_none_or(|d| d > cfg.tolerance),
            });
        }
    }
    let count = sites.iter().filter(|s| s.violating).count();
    Ok((count, sites))
}

fn effective_threshold(pc: &ProcessCondition) -> f64 {
    pc.i_th / pc.dose_scale
}

/// Checks that outer prints at least as much as nominal, and nominal at
/// least as much as inner.
pub fn check_corner_order(corners: &Corners) -> Result<()> {
    for pc in [&corners.nominal, &corners.inner, &corners.outer] {
        pc.validate()?;
    }
    let (o, n, i) = (
        effective_threshold(&corners.outer),
        effective_threshold(&corners.nominal),
        effective_threshold(&corners.inner),
    );
    if !(o <= n && n <= i) {
        return Err(Error::CornerOrder(format!(
            "need outer dose >= nominal dose >= inner dose, got {} / {} / {}",
            corners.outer.dose_scale, corners.nominal.dose_scale, corners.inner.dose_scale
        )));
    }
    Ok(())
}

/// Prints at the three corners from a precomputed intensity.
pub fn corner_prints(intensity: &Grid, corners: &Corners, pixel_size: f64) -> Result<[BinaryImage; 3]> {
    check_corner_order(corners)?;
    let inner = resist_threshold(intensity, &corners.inner, pixel_size)?;
    let nominal = resist_threshold(intensity, &corners.nominal, pixel_size)?;
    let outer = resist_threshold(intensity, &corners.outer, pixel_size)?;
    let contained = |a: &BinaryImage, b: &BinaryImage| a.data().iter().zip(b.data()).all(|(&x, &y)| x <= y);
    if !contained(&inner, &nominal) || !contained(&nominal, &outer) {
        return Err(Error::CornerOrder("printed contours are not nested".into()));
    }
    Ok([inner, nominal, outer])
}

/// Band area `|outer \ inner| · pixel_size²` from a precomputed intensity.
pub fn pvb_from_intensity(intensity: &Grid, corners: &Corners, pixel_size: f64) -> Result<f64> {
    let [inner, _, outer] = corner_prints(intensity, corners, pixel_size)?;
    let band = outer
        .data()
        .iter()
        .zip(inner.data())
        .filter(|(&o, &i)| o == 1 && i == 0)
        .count();
    Ok(band as f64 * pixel_size * pixel_size)
}

/// PVB area of `mask` in nm², simulating once and thresholding per corner.
pub fn pvb_area(mask: &BinaryImage, ks: &KernelSet, corners: &Corners) -> Result<f64> {
    check_corner_order(corners)?;
    let intensity = simulate_intensity(&mask.to_gray(), ks)?;
    pvb_from_intensity(&intensity, corners, mask.pixel_size())
}

/// PVB area when corners may name different kernel sets (e.g. defocus).
///
/// Each corner's `kernel_label` selects its kernel set from `sets`.
pub fn pvb_area_multi(mask: &BinaryImage, sets: &[KernelSet], corners: &Corners) -> Result<f64> {
    check_corner_order(corners)?;
    let find = |pc: &ProcessCondition| {
        sets.iter()
            .find(|k| k.label() == pc.kernel_label)
            .ok_or_else(|| Error::InvalidArgument(format!("no kernel set labelled {}", pc.kernel_label)))
    };
    let gray = mask.to_gray();
    let ps = mask.pixel_size();
    let print = |pc: &ProcessCondition| -> Result<BinaryImage> {
        let i = simulate_intensity(&gray, find(pc)?)?;
        resist_threshold(&i, pc, ps)
    };
    let inner = print(&corners.inner)?;
    let outer = print(&corners.outer)?;
    let band = outer
        .data()
        .iter()
        .zip(inner.data())
        .filter(|(&o, &i)| o == 1 && i == 0)
        .count();
    Ok(band as f64 * ps * ps)
}

/// `Σ (a − b)²`.
pub fn l2_error(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum())
}
