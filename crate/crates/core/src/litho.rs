//! Forward lithography: sum-of-coherent-systems optics, resist thresholding,
//! the sigmoid relaxations used by gradient-based solvers, and kernel I/O.
//!
//! Intensity is `I = Σ_k α_k |h_k ⊛ M|²` with circular convolution computed
//! in the frequency domain. Kernels are stored origin-centred: the centre
//! tap of an odd `size × size` kernel lands on pixel `(0, 0)` of the
//! embedding, so an impulse kernel is the identity.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::raster::{BinaryImage, GrayImage, Grid};

pub const KERNEL_MAGIC: &[u8; 8] = b"SOCSKRN1";

/// Resist threshold of the reference technology profile.
pub const DEFAULT_RESIST_THRESHOLD: f64 = 0.225;

/// SOCS kernel decomposition `{(α_k, h_k)}` for one process setting.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    label: String,
    size: usize,
    pixel_size_nm: f64,
    kernels: Vec<Vec<Complex32>>,
    alphas: Vec<f32>,
    intensity_bound: f64,
}

impl KernelSet {
    pub fn new(
        label: impl Into<String>,
        size: usize,
        pixel_size_nm: f64,
        kernels: Vec<Vec<Complex32>>,
        alphas: Vec<f32>,
    ) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::KernelFormat("kernel set is empty".into()));
        }
        if size.is_multiple_of(2) {
            return Err(Error::KernelFormat(format!("kernel size {size} is not odd")));
        }
        if kernels.len() != alphas.len() {
            return Err(Error::KernelFormat(format!(
                "{} kernels but {} weights",
                kernels.len(),
                alphas.len()
            )));
        }
        if let Some(k) = kernels.iter().position(|h| h.len() != size * size) {
            return Err(Error::KernelFormat(format!(
                "kernel {k} is not {size}x{size}"
            )));
        }
        if kernels
            .iter()
            .flatten()
            .any(|v| !(v.re.is_finite() && v.im.is_finite()))
        {
            return Err(Error::KernelFormat("non-finite kernel value".into()));
        }
        if alphas.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::KernelFormat("non-positive weight".into()));
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::KernelFormat("weights are not sorted non-increasing".into()));
        }
        if !(pixel_size_nm > 0.0 && pixel_size_nm.is_finite()) {
            return Err(Error::KernelFormat(format!(
                "pixel size {pixel_size_nm} is not positive"
            )));
        }
        let intensity_bound = kernels
            .iter()
            .zip(&alphas)
            .map(|(h, &a)| {
                let l1: f64 = h.iter().map(|v| f64::from(v.norm())).sum();
                f64::from(a) * l1 * l1
            })
            .sum::<f64>();
        if !intensity_bound.is_finite() {
            return Err(Error::KernelFormat("intensity bound is not finite".into()));
        }
        Ok(Self {
            label: label.into(),
            size,
            pixel_size_nm,
            kernels,
            alphas,
            intensity_bound,
        })
    }

    /// A single unit impulse with weight 1: intensity becomes `M²`.
    pub fn impulse(label: impl Into<String>, pixel_size_nm: f64) -> Self {
        Self::new(
            label,
            1,
            pixel_size_nm,
            vec![vec![Complex32::new(1.0, 0.0)]],
            vec![1.0],
        )
        .expect("impulse kernel is valid")
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn count(&self) -> usize {
        self.kernels.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn pixel_size_nm(&self) -> f64 {
        self.pixel_size_nm
    }

    pub fn alphas(&self) -> &[f32] {
        &self.alphas
    }

    pub fn kernel(&self, k: usize) -> &[Complex32] {
        &self.kernels[k]
    }

    /// `Σ_k α_k (Σ |h_k|)²`, an upper bound on intensity for masks in `[0,1]`.
    pub fn intensity_bound(&self) -> f64 {
        self.intensity_bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessCondition {
    pub kernel_label: String,
    pub i_th: f64,
    pub dose_scale: f64,
}

impl ProcessCondition {
    pub fn new(kernel_label: impl Into<String>, i_th: f64, dose_scale: f64) -> Result<Self> {
        let pc = Self {
            kernel_label: kernel_label.into(),
            i_th,
            dose_scale,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn nominal(kernel_label: impl Into<String>) -> Self {
        Self {
            kernel_label: kernel_label.into(),
            i_th: DEFAULT_RESIST_THRESHOLD,
            dose_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i_th > 0.0 && self.i_th < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "resist threshold {} outside (0, 1)",
                self.i_th
            )));
        }
        if !(self.dose_scale > 0.0 && self.dose_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dose scale {} must be positive",
                self.dose_scale
            )));
        }
        Ok(())
    }
}

/// Nominal, inner (smallest print) and outer (largest print) conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub nominal: ProcessCondition,
    pub inner: ProcessCondition,
    pub outer: ProcessCondition,
}

impl Corners {
    /// Dose-only corners `1 - delta`, `1`, `1 + delta` on one kernel set.
    pub fn dose(kernel_label: &str, i_th: f64, delta: f64) -> Result<Self> {
        Ok(Self {
            nominal: ProcessCondition::new(kernel_label, i_th, 1.0)?,
            inner: ProcessCondition::new(kernel_label, i_th, 1.0 - delta)?,
            outer: ProcessCondition::new(kernel_label, i_th, 1.0 + delta)?,
        })
    }

    pub fn default_for(kernel_label: &str) -> Self {
        Self::dose(kernel_label, DEFAULT_RESIST_THRESHOLD, 0.02).expect("default corners are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxConfig {
    pub beta_m: f64,
    pub beta_z: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            beta_m: 4.0,
            beta_z: 50.0,
        }
    }
}

impl RelaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_m > 0.0 && self.beta_z > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigmoid steepness must be positive, got beta_m={} beta_z={}",
                self.beta_m, self.beta_z
            )));
        }
        Ok(())
    }
}

/// Complex fields `h_k ⊛ M` kept from a forward pass for the adjoint.
#[derive(Debug, Clone)]
pub struct Fields {
    fields: Vec<Vec<Complex64>>,
}

/// A kernel set prepared for one tile size: kernel spectra are computed once.
#[derive(Debug, Clone)]
pub struct Optics {
    height: usize,
    width: usize,
    fft: Fft2,
    spectra: Vec<Vec<Complex64>>,
    alphas: Vec<f64>,
}

impl Optics {
    pub fn new(ks: &KernelSet, height: usize, width: usize) -> Result<Self> {
        if height < ks.size || width < ks.size {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask is smaller than {0}x{0} kernel",
                ks.size
            )));
        }
        let fft = Fft2::new(height, width);
        let c = ks.size / 2;
        let spectra = ks
            .kernels
            .iter()
            .map(|h| {
                let mut emb = vec![Complex64::new(0.0, 0.0); height * width];
                for i in 0..ks.size {
                    let r = (i + height - c) % height;
                    for j in 0..ks.size {
                        let col = (j + width - c) % width;
                        let v = h[i * ks.size + j];
                        emb[r * width + col] = Complex64::new(f64::from(v.re), f64::from(v.im));
                    }
                }
                fft.forward(&mut emb);
                emb
            })
            .collect();
        Ok(Self {
            height,
            width,
            fft,
            spectra,
            alphas: ks.alphas.iter().map(|&a| f64::from(a)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.height * self.width {
            return Err(Error::DimensionMismatch(format!(
                "{n} pixels for {}x{} optics",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn intensity(&self, mask: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(mask)?.0)
    }

    /// Intensity plus the per-kernel fields needed by [`Optics::adjoint`].
    pub fn forward(&self, mask: &[f64]) -> Result<(Vec<f64>, Fields)> {
        self.check_len(mask.len())?;
        let mut spectrum: Vec<Complex64> = mask.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut spectrum);
        let mut intensity = vec![0.0; mask.len()];
        let mut fields = Vec::with_capacity(self.spectra.len());
        for (hk, &alpha) in self.spectra.iter().zip(&self.alphas) {
            let mut a: Vec<Complex64> = spectrum.iter().zip(hk).map(|(m, h)| m * h).collect();
            self.fft.inverse_normalized(&mut a);
            for (i, v) in intensity.iter_mut().zip(&a) {
                *i += alpha * v.norm_sqr();
            }
            fields.push(a);
        }
        Ok((intensity, Fields { fields }))
    }

    /// `∂l/∂M = Σ_k 2 α_k Re[h̃_k ⊛ (G ⊙ (h_k ⊛ M))]` for upstream `G = ∂l/∂I`.
    pub fn adjoint(&self, fields: &Fields, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_len(upstream.len())?;
        let n = upstream.len();
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for ((a, hk), &alpha) in fields.fields.iter().zip(&self.spectra).zip(&self.alphas) {
            for ((b, f), &g) in buf.iter_mut().zip(a).zip(upstream) {
                *b = f * g;
            }
            self.fft.forward(&mut buf);
            let s = 2.0 * alpha;
            for ((dst, b), h) in acc.iter_mut().zip(&buf).zip(hk) {
                *dst += b * h.conj() * s;
            }
        }
        self.fft.inverse_normalized(&mut acc);
        Ok(acc.into_iter().map(|v| v.re).collect())
    }
}

pub fn simulate_intensity(mask: &GrayImage, ks: &KernelSet) -> Result<Grid> {
    let optics = Optics::new(ks, mask.height(), mask.width())?;
    let data = optics.intensity(mask.data())?;
    Grid::from_vec(mask.width(), mask.height(), data)
}

/// Hard resist: printed iff `dose · I > i_th`.
pub fn resist_threshold(
    intensity: &Grid,
    pc: &ProcessCondition,
    pixel_size: f64,
) -> Result<BinaryImage> {
    let data = intensity
        .data
        .iter()
        .map(|&i| u8::from(pc.dose_scale * i > pc.i_th))
        .collect();
    BinaryImage::new(intensity.width, intensity.height, pixel_size, data)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `M = σ(β_m (M′ − 0.5))`.
pub fn sigmoid_mask(m_prime: &Grid, cfg: &RelaxConfig) -> Grid {
    m_prime.map(|v| sigmoid(cfg.beta_m * (v - 0.5)))
}

/// `Z = σ(β_z (dose · I − i_th))`.
pub fn sigmoid_resist(intensity: &Grid, pc: &ProcessCondition, cfg: &RelaxConfig) -> Grid {
    intensity.map(|i| sigmoid(cfg.beta_z * (pc.dose_scale * i - pc.i_th)))
}

/// Gradient of a loss with respect to the mask given `upstream = ∂l/∂I`.
pub fn intensity_gradient(mask: &Grid, upstream: &Grid, ks: &KernelSet) -> Result<Grid> {
    if !mask.same_dims(upstream) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs upstream {}x{}",
            mask.width, mask.height, upstream.width, upstream.height
        )));
    }
    let optics = Optics::new(ks, mask.height, mask.width)?;
    let (_, fields) = optics.forward(&mask.data)?;
    Grid::from_vec(mask.width, mask.height, optics.adjoint(&fields, &upstream.data)?)
}

fn hermite(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    match n {
        0 => h0,
        _ => {
            for k in 1..n {
                let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
                h0 = h1;
                h1 = h2;
            }
            h1
        }
    }
}

/// Hermite orders `(a, b)` by total degree: (0,0), (1,0), (0,1), (2,0), ...
fn hermite_orders(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n);
    let mut degree = 0;
    while out.len() < n {
        for a in (0..=degree).rev() {
            if out.len() == n {
                break;
            }
            out.push((a, degree - a));
        }
        degree += 1;
    }
    out
}

/// Geometric SOCS weights `0.6^k`, before open-frame calibration.
pub fn raw_kernel_weights(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.6f64.powi(k as i32)).collect()
}

/// Synthetic Hermite–Gaussian kernels calibrated so that a fully open mask
/// images to intensity 1.
///
/// Kernel `k` is `i^(a+b) e^{iφ_k} H_a(x/σ) H_b(y/σ) exp(-(x²+y²)/2σ²)`,
/// L2-normalized, with `σ = sigma_nm / pixel_size` and a seeded global
/// phase `φ_k` (which leaves intensity unchanged).
pub fn synth_kernels(
    seed: u64,
    n: usize,
    size: usize,
    sigma_nm: f64,
    pixel_size: f64,
) -> Result<KernelSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("kernel count must be >= 1".into()));
    }
    if size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel size {size} is even")));
    }
    if !(sigma_nm > 0.0 && pixel_size > 0.0) {
        return Err(Error::InvalidArgument("sigma and pixel size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = sigma_nm / pixel_size;
    let c = (size / 2) as f64;
    let mut kernels = Vec::with_capacity(n);
    for (a, b) in hermite_orders(n) {
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let rot = Complex64::from_polar(1.0, phase) * Complex64::i().powu((a + b) as u32);
        let mut h: Vec<Complex64> = (0..size * size)
            .map(|idx| {
                let y = (idx / size) as f64 - c;
                let x = (idx % size) as f64 - c;
                let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                rot * (hermite(a, x / sigma) * hermite(b, y / sigma) * g)
            })
            .collect();
        let norm = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for v in &mut h {
            *v /= norm;
        }
        kernels.push(
            h.into_iter()
                .map(|v| Complex32::new(v.re as f32, v.im as f32))
                .collect::<Vec<_>>(),
        );
    }
    // Open-frame intensity for a periodic all-ones mask is Σ α_k |Σ h_k|².
    let raw = raw_kernel_weights(n);
    let open: f64 = kernels
        .iter()
        .zip(&raw)
        .map(|(h, &a)| {
            let dc: Complex64 = h
                .iter()
                .map(|v| Complex64::new(f64::from(v.re), f64::from(v.im)))
                .sum();
            a * dc.norm_sqr()
        })
        .sum();
    let alphas = raw.iter().map(|&a| (a / open) as f32).collect();
    KernelSet::new("nominal", size, pixel_size, kernels, alphas)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub label: String,
    pub pixel_size_nm: f64,
}

pub fn kernel_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Serializes to the binary kernel format.
pub fn encode_kernels(ks: &KernelSet) -> Vec<u8> {
    let n = ks.count();
    let mut out = Vec::with_capacity(16 + n * 4 + n * ks.size * ks.size * 8);
    out.extend_from_slice(KERNEL_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(ks.size as u32).to_le_bytes());
    for a in &ks.alphas {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for h in &ks.kernels {
        for v in h {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    out
}

pub fn decode_kernels(bytes: &[u8], label: &str, pixel_size_nm: f64) -> Result<KernelSet> {
    let truncated = || Error::KernelFormat("truncated file".into());
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 8 && &bytes[..8] != KERNEL_MAGIC {
            Error::KernelFormat("bad magic".into())
        } else {
            truncated()
        });
    }
    if &bytes[..8] != KERNEL_MAGIC {
        return Err(Error::KernelFormat("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let n = u32_at(8);
    let size = u32_at(12);
    if size % 2 == 0 {
        return Err(Error::KernelFormat(format!("kernel size {size} is not odd")));
    }
    let expected = 16usize
        .checked_add(n.checked_mul(4).ok_or_else(truncated)?)
        .and_then(|v| v.checked_add(n.checked_mul(size * size * 8)?))
        .ok_or_else(truncated)?;
    if bytes.len() < expected {
        return Err(truncated());
    }
    if bytes.len() > expected {
        return Err(Error::KernelFormat("trailing bytes after kernel data".into()));
    }
    let alphas: Vec<f32> = (0..n).map(|k| f32_at(16 + 4 * k)).collect();
    let base = 16 + 4 * n;
    let kernels = (0..n)
        .map(|k| {
            (0..size * size)
                .map(|i| {
                    let o = base + (k * size * size + i) * 8;
                    Complex32::new(f32_at(o), f32_at(o + 4))
                })
                .collect()
        })
        .collect();
    KernelSet::new(label, size, pixel_size_nm, kernels, alphas)
}

/// Writes the binary file plus a JSON sidecar carrying label and pixel size.
pub fn save_kernels(ks: &KernelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kernels(ks)).map_err(|e| Error::io(path, e))?;
    let sidecar = KernelSidecar {
        label: ks.label.clone(),
        pixel_size_nm: ks.pixel_size_nm,
    };
    let side = kernel_sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

/// Loads a kernel file; label and pixel size come from the sidecar when
/// present, else `"nominal"` and 1 nm.
pub fn load_kernels(path: impl AsRef<Path>) -> Result<KernelSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = kernel_sidecar_path(path);
    let sidecar = if side.exists() {
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::from_slice(&raw)?
    } else {
        KernelSidecar {
            label: "nominal".into(),
            pixel_size_nm: 1.0,
        }
    };
    decode_kernels(&bytes, &sidecar.label, sidecar.pixel_size_nm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_grid(w: usize, h: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    /// Direct spatial circular convolution, O(n⁴).
    fn brute_intensity(mask: &Grid, ks: &KernelSet) -> Grid {
        let (h, w) = (mask.height, mask.width);
        let c = ks.size() as isize / 2;
        let mut out = Grid::zeros(w, h);
        for k in 0..ks.count() {
            let kern = ks.kernel(k);
            let alpha = f64::from(ks.alphas()[k]);
            for r in 0..h {
                for col in 0..w {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..ks.size() {
                        for j in 0..ks.size() {
                            let sr = (r as isize - (i as isize - c)).rem_euclid(h as isize) as usize;
                            let sc = (col as isize - (j as isize - c)).rem_euclid(w as isize) as usize;
                            let v = kern[i * ks.size() + j];
                            acc += Complex64::new(f64::from(v.re), f64::from(v.im)) * mask.get(sr, sc);
                        }
                    }
                    let cur = out.get(r, col);
                    out.set(r, col, cur + alpha * acc.norm_sqr());
                }
            }
        }
        out
    }

    #[test]
    fn zero_mask_gives_zero_intensity() {
        let ks = synth_kernels(1, 3, 9, 16.0, 8.0).unwrap();
        let m = GrayImage::filled(16, 16, 8.0, 0.0).unwrap();
        let i = simulate_intensity(&m, &ks).unwrap();
        assert!(i.data.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn impulse_kernel_squares_mask() {
        let ks = KernelSet::impulse("nominal", 1.0);
        let g = random_grid(16, 8, 3);
        let m = GrayImage::from_grid(&g, 1.0).unwrap();
        let i = simulate_intensity(&m, &ks).unwrap();
        for (a, b) in i.data.iter().zip(&g.data) {
            assert!((a - b * b).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_intensity_matches_direct_convolution() {
        let ks = synth_kernels(7, 2, 7, 16.0, 8.0).unwrap();
        let g = random_grid(32, 32, 11);
        let fast = simulate_intensity(&GrayImage::from_grid(&g, 8.0).unwrap(), &ks).unwrap();
        let slow = brute_intensity(&g, &ks);
        let err = fast
            .data
            .iter()
            .zip(&slow.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mask_smaller_than_kernel_rejected() {
        let ks = synth_kernels(1, 1, 9, 16.0, 8.0).unwrap();
        let m = GrayImage::filled(8, 8, 8.0, 0.5).unwrap();
        assert!(matches!(simulate_intensity(&m, &ks), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn resist_threshold_examples() {
        let pc = ProcessCondition::nominal("nominal");
        assert_eq!(pc.i_th, 0.225);
        let zero = Grid::zeros(4, 4);
        assert_eq!(resist_threshold(&zero, &pc, 1.0).unwrap().count_ones(), 0);
        let i = Grid::filled(4, 4, 0.3);
        assert_eq!(resist_threshold(&i, &pc, 1.0).unwrap().count_ones(), 16);
        let half = ProcessCondition::new("nominal", 0.225, 0.5).unwrap();
        assert_eq!(resist_threshold(&i, &half, 1.0).unwrap().count_ones(), 0);
        assert!(ProcessCondition::new("x", 1.2, 1.0).is_err());
        assert!(ProcessCondition::new("x", 0.2, 0.0).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        let cfg = RelaxConfig::default();
        let half = sigmoid_mask(&Grid::filled(3, 3, 0.5), &cfg);
        assert!(half.data.iter().all(|&v| v == 0.5));
        let one = sigmoid_mask(&Grid::filled(1, 1, 1.0), &cfg);
        assert!((one.data[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((one.data[0] - 0.8808).abs() < 1e-4);
        let big = sigmoid_mask(&Grid::filled(1, 1, 50.0), &cfg);
        assert!(big.data[0] > 1.0 - 1e-12);

        let pc = ProcessCondition::nominal("nominal");
        let mid = sigmoid_resist(&Grid::filled(2, 2, 0.225), &pc, &cfg);
        assert!(mid.data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let z = sigmoid_resist(&Grid::zeros(1, 1), &pc, &cfg);
        let expect = (-11.25f64).exp() / (1.0 + (-11.25f64).exp());
        assert!((z.data[0] - expect).abs() < 1e-18);
        assert!((z.data[0] - 1.3e-5).abs() < 1e-6);
    }

    #[test]
    fn gradient_special_cases() {
        let ks = KernelSet::impulse("nominal", 1.0);
        let m = random_grid(8, 8, 1);
        let zero = intensity_gradient(&m, &Grid::zeros(8, 8), &ks).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let up = random_grid(8, 8, 2);
        let g = intensity_gradient(&m, &up, &ks).unwrap();
        for i in 0..64 {
            assert!((g.data[i] - 2.0 * up.data[i] * m.data[i]).abs() < 1e-12);
        }
        assert!(intensity_gradient(&m, &Grid::zeros(4, 8), &ks).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ks = synth_kernels(3, 3, 9, 16.0, 8.0).unwrap();
        let m = random_grid(32, 32, 4);
        let up = random_grid(32, 32, 5).map(|v| v - 0.5);
        let loss = |mask: &Grid| -> f64 {
            let i = simulate_intensity(&GrayImage::from_grid_clamped(mask, 8.0).unwrap(), &ks).unwrap();
            i.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
        };
        let g = intensity_gradient(&m, &up, &ks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = 1e-4;
        for _ in 0..20 {
            let idx = rng.random_range(0..m.len());
            // keep the probe inside [0,1] so clamping is inactive
            let mut mp = m.clone();
            let mut mm = m.clone();
            mp.data[idx] += eps;
            mm.data[idx] -= eps;
            if mp.data[idx] > 1.0 || mm.data[idx] < 0.0 {
                continue;
            }
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * eps);
            let rel = (fd - g.data[idx]).abs() / fd.abs().max(g.data[idx].abs()).max(1e-8);
            assert!(rel < 1e-3, "idx {idx}: fd {fd} analytic {}", g.data[idx]);
        }
    }

    #[test]
    fn synth_kernels_calibrated_and_deterministic() {
        let ks = synth_kernels(5, 1, 11, 20.0, 8.0).unwrap();
        let open = GrayImage::filled(32, 32, 8.0, 1.0).unwrap();
        let i = simulate_intensity(&open, &ks).unwrap();
        assert!((i.max() - 1.0).abs() < 1e-6);
        assert!((i.max() - i.min()).abs() < 1e-9);

        let ks4 = synth_kernels(5, 4, 11, 20.0, 8.0).unwrap();
        let i4 = simulate_intensity(&open, &ks4).unwrap();
        assert!((i4.max() - 1.0).abs() < 1e-6);
        let a = ks4.alphas();
        for (k, expect) in raw_kernel_weights(4).iter().enumerate() {
            assert!((f64::from(a[k]) / f64::from(a[0]) - expect).abs() < 1e-6);
        }
        for (w, e) in raw_kernel_weights(4).iter().zip([1.0, 0.6, 0.36, 0.216]) {
            assert!((w - e).abs() < 1e-12);
        }
        assert_eq!(ks4, synth_kernels(5, 4, 11, 20.0, 8.0).unwrap());
        assert!(synth_kernels(5, 4, 10, 20.0, 8.0).is_err());
    }

    #[test]
    fn kernel_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ks = synth_kernels(9, 3, 7, 16.0, 8.0).unwrap();
        let path = dir.path().join("k.bin");
        save_kernels(&ks, &path).unwrap();
        let back = load_kernels(&path).unwrap();
        assert_eq!(back, ks);

        let mut bytes = encode_kernels(&ks);
        bytes[16..20].copy_from_slice(&(-1.0f32).to_le_bytes());
        let err = decode_kernels(&bytes, "x", 1.0).unwrap_err();
        assert!(err.to_string().contains("non-positive weight"));

        let mut bad = encode_kernels(&ks);
        bad[0] = b'X';
        assert!(decode_kernels(&bad, "x", 1.0).unwrap_err().to_string().contains("bad magic"));

        let full = encode_kernels(&ks);
        let err = decode_kernels(&full[..full.len() - 3], "x", 1.0).unwrap_err();
        assert!(err.to_string().contains("truncated"));

        let mut even = encode_kernels(&ks);
        even[12..16].copy_from_slice(&8u32.to_le_bytes());
        assert!(decode_kernels(&even, "x", 1.0).unwrap_err().to_string().contains("odd"));
    }

    #[test]
    fn hand_built_impulse_file_squares_mask() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(KERNEL_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        for i in 0..9 {
            let re = if i == 4 { 1.0f32 } else { 0.0 };
            bytes.extend_from_slice(&re.to_le_bytes());
            bytes.extend_from_slice(&0.0f32.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imp.bin");
        fs::write(&path, bytes).unwrap();
        let ks = load_kernels(&path).unwrap();
        let g = random_grid(8, 8, 12);
        let i = simulate_intensity(&GrayImage::from_grid(&g, 1.0).unwrap(), &ks).unwrap();
        for (a, b) in i.data.iter().zip(&g.data) {
            assert!((a - b * b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_resist_approaches_hard_threshold() {
        let pc = ProcessCondition::nominal("nominal");
        let i = random_grid(16, 16, 8).map(|v| v * 0.5);
        let soft = sigmoid_resist(&i, &pc, &RelaxConfig { beta_m: 4.0, beta_z: 1e4 });
        let hard = resist_threshold(&i, &pc, 1.0).unwrap();
        for (idx, &iv) in i.data.iter().enumerate() {
            if (iv - pc.i_th).abs() > 1e-3 {
                assert!((soft.data[idx] - f64::from(hard.data()[idx])).abs() < 0.01);
            }
        }
    }

    proptest! {
        #[test]
        fn intensity_is_nonnegative_and_shift_equivariant(seed in 0u64..500, dy in -5isize..5, dx in -5isize..5) {
            let ks = synth_kernels(seed, 3, 7, 16.0, 8.0).unwrap();
            let g = random_grid(16, 16, seed);
            let i = simulate_intensity(&GrayImage::from_grid(&g, 8.0).unwrap(), &ks).unwrap();
            prop_assert!(i.data.iter().all(|&v| v >= 0.0));
            let shifted = simulate_intensity(&GrayImage::from_grid(&g.roll(dy, dx), 8.0).unwrap(), &ks).unwrap();
            let expect = i.roll(dy, dx);
            for (a, b) in shifted.data.iter().zip(&expect.data) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn lower_threshold_prints_superset(seed in 0u64..500, t1 in 0.05f64..0.95, t2 in 0.05f64..0.95) {
            let i = random_grid(8, 8, seed);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = resist_threshold(&i, &ProcessCondition::new("n", lo, 1.0).unwrap(), 1.0).unwrap();
            let b = resist_threshold(&i, &ProcessCondition::new("n", hi, 1.0).unwrap(), 1.0).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x >= y));
        }

        #[test]
        fn sigmoid_resist_monotone(seed in 0u64..500) {
            let cfg = RelaxConfig::default();
            let pc = ProcessCondition::nominal("n");
            let i1 = random_grid(6, 6, seed);
            let i2 = i1.map(|v| v + 0.01);
            let z1 = sigmoid_resist(&i1, &pc, &cfg);
            let z2 = sigmoid_resist(&i2, &pc, &cfg);
            prop_assert!(z1.data.iter().zip(&z2.data).all(|(a, b)| a <= b));
        }
    }
}
