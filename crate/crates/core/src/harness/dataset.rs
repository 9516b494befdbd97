//! Golden dataset construction and persistence.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tile::{gen_tile, TileBounds};
use crate::error::{Error, Result};
use crate::ilt::{ilt_optimize, IltConfig};
use crate::litho::{kernel_sidecar_path, load_kernels, resist_threshold, simulate_intensity, KernelSet};
use crate::metrics::{epe_violations, EpeConfig};
use crate::raster::{load_binary_png, save_binary_png};
use crate::trainer::Sample;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const KERNEL_FILE: &str = "kernels.bin";

/// Regeneration budget per tile slot when ILT diverges.
const MAX_REGENERATIONS: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub design: String,
    pub mask: String,
    pub seed: u64,
    /// EPE violations of the golden mask's own nominal print.
    pub golden_epe_violations: usize,
    pub flagged: bool,
    pub ilt_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub pixel_size_nm: f64,
    pub tile_side: usize,
    pub kernel_file: String,
    pub kernel_sha256: String,
    pub ilt: IltConfig,
    pub entries: Vec<DatasetEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SplitMix64 finalizer; derives per-tile seeds from the dataset seed.
pub fn tile_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(attempt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_one(index: usize, seed: u64, ks: &KernelSet, bounds: &TileBounds, ilt: &IltConfig, epe: &EpeConfig, out: &Path) -> Result<DatasetEntry> {
    let id = format!("tile_{index:04}");
    for attempt in 0..MAX_REGENERATIONS {
        let s = tile_seed(seed, index as u64, attempt);
        let (_, design) = gen_tile(s, bounds)?;
        let (mask, trace) = match ilt_optimize(&design, ks, ilt) {
            Ok(r) => r,
            Err(Error::Diverged { iteration }) => {
                log::warn!("{id}: ILT diverged at iteration {iteration} (seed {s}), regenerating");
                continue;
            }
            Err(e) => return Err(e),
        };
        let intensity = simulate_intensity(&mask.to_gray(), ks)?;
        let wafer = resist_threshold(&intensity, &ilt.nominal, design.pixel_size())?;
        let (violations, _) = epe_violations(&wafer, &design, epe)?;
        let design_rel = format!("designs/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        save_binary_png(&design, out.join(&design_rel))?;
        save_binary_png(&mask, out.join(&mask_rel))?;
        return Ok(DatasetEntry {
            id,
            design: design_rel,
            mask: mask_rel,
            seed: s,
            golden_epe_violations: violations,
            flagged: violations > 0,
            ilt_iterations: trace.losses.len(),
        });
    }
    Err(Error::Dataset(format!("{id}: ILT diverged on {MAX_REGENERATIONS} consecutive seeds")))
}

/// Generates `n` tiles, solves each with numerical ILT and writes the pairs
/// plus a manifest to `out_dir`. The kernel file is copied into the dataset.
pub fn build_dataset(
    n: usize,
    seed: u64,
    kernel_path: &Path,
    bounds: &TileBounds,
    ilt: &IltConfig,
    epe: &EpeConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    let ks = load_kernels(kernel_path)?;
    bounds.check_kernels(&ks)?;
    ilt.validate()?;
    epe.validate()?;
    for sub in ["designs", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let kernel_copy = out_dir.join(KERNEL_FILE);
    if fs::canonicalize(kernel_path).ok() != fs::canonicalize(&kernel_copy).ok() {
        fs::copy(kernel_path, &kernel_copy).map_err(|e| Error::io(&kernel_copy, e))?;
        let side = kernel_sidecar_path(kernel_path);
        if side.is_file() {
            let dst = kernel_sidecar_path(&kernel_copy);
            fs::copy(&side, &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }

    let built: Vec<Result<DatasetEntry>> = (0..n)
        .into_par_iter()
        .map(|i| build_one(i, seed, &ks, bounds, ilt, epe, out_dir))
        .collect();
    let mut entries = Vec::with_capacity(n);
    for b in built {
        entries.push(b?);
    }
    let flagged = entries.iter().filter(|e| e.flagged).count();
    if flagged > 0 {
        log::info!("{flagged} of {n} golden masks keep EPE violations");
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        pixel_size_nm: bounds.pixel_size,
        tile_side: bounds.side,
        kernel_file: KERNEL_FILE.into(),
        kernel_sha256: sha256_hex(&fs::read(&kernel_copy).map_err(|e| Error::io(&kernel_copy, e))?),
        ilt: ilt.clone(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A loaded dataset: manifest, verified kernels and image pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub kernels: KernelSet,
    pub samples: Vec<Sample>,
}

/// Checks that every referenced file exists and the kernel hash matches.
pub fn verify_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let kpath = root.join(&manifest.kernel_file);
    let bytes = fs::read(&kpath).map_err(|e| Error::io(&kpath, e))?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.kernel_sha256 {
        return Err(Error::Dataset(format!(
            "kernel hash mismatch for {}: manifest {} file {actual}",
            kpath.display(),
            manifest.kernel_sha256
        )));
    }
    for e in &manifest.entries {
        for rel in [&e.design, &e.mask] {
            if !root.join(rel).is_file() {
                return Err(Error::Dataset(format!("missing file {rel}")));
            }
        }
    }
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&raw)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = load_manifest(root)?;
    verify_manifest(root, &manifest)?;
    let kernels = load_kernels(root.join(&manifest.kernel_file))?;
    let ps = manifest.pixel_size_nm;
    let samples = manifest
        .entries
        .iter()
        .map(|e| {
            let design = load_binary_png(root.join(&e.design), ps)?;
            let golden = load_binary_png(root.join(&e.mask), ps)?;
            if design.width() != manifest.tile_side || golden.width() != manifest.tile_side {
                return Err(Error::DimensionMismatch(format!("{} does not match the tile side", e.id)));
            }
            Ok(Sample {
                id: e.id.clone(),
                design,
                golden,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        kernels,
        samples,
    })
}
