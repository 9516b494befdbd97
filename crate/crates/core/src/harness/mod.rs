//! Synthetic tiles, golden datasets and run configuration.

pub mod config;
pub mod dataset;
pub mod tile;

pub use config::{CornerConfig, KernelGenConfig, RunConfig};
pub use dataset::{build_dataset, load_dataset, load_manifest, sha256_hex, tile_seed, verify_manifest, Dataset, DatasetEntry, DatasetManifest};
pub use tile::{gen_tile, rasterize, Rect, TileBounds, TileSpec};
