//! Backpropagation through the unrolled recurrence, and tile-level evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{adam_step, AdamConfig, Tape, Tensor, Var};
use crate::litho::Corners;
use crate::metrics::{epe_violations, pvb_from_intensity, EpeConfig};
use crate::model::{infer, unroll_on_tape, InferConfig, LithoContext, Model};
use crate::raster::{binarize_grid, BinaryImage, GrayImage, Grid};

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub design: BinaryImage,
    pub golden: BinaryImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Unroll depth `T`.
    pub depth: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_tying: bool,
    pub backprop_through_litho: bool,
    pub val_fraction: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            epochs: 5,
            lr: 0.004,
            lr_decay: 0.5,
            weight_decay: 1e-4,
            batch_size: 2,
            seed: 0,
            weight_tying: true,
            backprop_through_litho: false,
            val_fraction: 0.1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("unroll depth must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr_decay > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate settings must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr * self.lr_decay.powi(epoch as i32),
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    /// Mean EPE violations on the validation split (empty split gives NaN).
    pub epoch_val_epe: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub epoch_seconds: Vec<f64>,
    pub parameter_count: usize,
}

/// First step included in the trajectory loss: `round(T/2)`, ties up.
pub fn loss_start(depth: usize) -> usize {
    depth.div_ceil(2)
}

/// `(t, exp(t/T − 1))` for `t = round(T/2)..=T`.
pub fn trajectory_weights(depth: usize) -> Vec<(usize, f64)> {
    (loss_start(depth)..=depth)
        .map(|t| (t, (t as f64 / depth as f64 - 1.0).exp()))
        .collect()
}

/// `Σ_t exp(t/T − 1) ‖M_t − M*‖²` over `masks = [M_round(T/2), .., M_T]`.
pub fn trajectory_loss(masks: &[GrayImage], golden: &BinaryImage, depth: usize) -> Result<f64> {
    let weights = trajectory_weights(depth);
    if masks.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} needs {} masks, got {}",
            weights.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for (m, (_, w)) in masks.iter().zip(weights) {
        if m.width() != golden.width() || m.height() != golden.height() {
            return Err(Error::DimensionMismatch("mask and golden differ in size".into()));
        }
        let sq: f64 = m
            .data()
            .iter()
            .zip(golden.data())
            .map(|(&a, &b)| (a - f64::from(b)).powi(2))
            .sum();
        total += w * sq;
    }
    Ok(total)
}

/// Tape version of [`trajectory_loss`]; `masks` holds `M_0..M_T`.
pub fn trajectory_loss_on_tape(tape: &mut Tape, masks: &[Var], golden: Var, depth: usize) -> Result<Var> {
    if masks.len() != depth + 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} masks, got {}",
            depth + 1,
            masks.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (t, w) in trajectory_weights(depth) {
        let sq = tape.frobenius_sq_diff(masks[t], golden)?;
        let term = tape.scalar_mul(sq, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one term"))
}

/// Loss and per-parameter-set gradients for one sample.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    depth: usize,
    ctx: &LithoContext,
    through_litho: bool,
) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let bound: Vec<Vec<Var>> = model.operators().iter().map(|op| op.params().bind(&mut tape)).collect();
    let traj = unroll_on_tape(&mut tape, model, &bound, &sample.design, depth, ctx, through_litho)?;
    let golden = golden_var(&mut tape, &sample.golden);
    let loss = trajectory_loss_on_tape(&mut tape, &traj.masks, golden, depth)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let per_set = model
        .operators()
        .iter()
        .zip(&bound)
        .map(|(op, vars)| op.params().collect(vars, &grads))
        .collect();
    Ok((value, per_set))
}

/// Like [`sample_gradients`] but with `Z_0..Z_{T-1}` supplied instead of
/// simulated.
pub fn replay_gradients(model: &Model, sample: &Sample, depth: usize, wafers: &[Vec<f64>]) -> Result<(f64, Vec<Vec<Tensor>>)> {
    if wafers.len() < depth {
        return Err(Error::InvalidArgument(format!("need {depth} cached prints, got {}", wafers.len())));
    }
    let (w, h) = (sample.design.width(), sample.design.height());
    let mut tape = Tape::new();
    let bound: Vec<Vec<Var>> = model.operators().iter().map(|op| op.params().bind(&mut tape)).collect();
    let plane: Vec<f64> = sample.design.data().iter().map(|&v| f64::from(v)).collect();
    let target = tape.constant(Tensor::from_plane(h, w, plane.clone()));
    let mut m = tape.constant(Tensor::from_plane(h, w, plane));
    let mut masks = vec![m];
    for (t, z) in wafers.iter().take(depth).enumerate() {
        let z = tape.constant(Tensor::from_plane(h, w, z.clone()));
        let s = model.set_index(t);
        m = model.operators()[s].forward(&mut tape, &bound[s], m, z, target)?;
        masks.push(m);
    }
    let golden = golden_var(&mut tape, &sample.golden);
    let loss = trajectory_loss_on_tape(&mut tape, &masks, golden, depth)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let per_set = model
        .operators()
        .iter()
        .zip(&bound)
        .map(|(op, vars)| op.params().collect(vars, &grads))
        .collect();
    Ok((value, per_set))
}

fn golden_var(tape: &mut Tape, golden: &BinaryImage) -> Var {
    let data = golden.data().iter().map(|&v| f64::from(v)).collect();
    tape.constant(Tensor::from_plane(golden.height(), golden.width(), data))
}

/// Deterministic `(train, validation)` index split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn check_uniform(samples: &[Sample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("training set is empty".into()))?;
    let (w, h) = (first.design.width(), first.design.height());
    for s in samples {
        for img in [&s.design, &s.golden] {
            if img.width() != w || img.height() != h {
                return Err(Error::DimensionMismatch(format!(
                    "sample {} is {}x{}, expected {w}x{h}",
                    s.id,
                    img.width(),
                    img.height()
                )));
            }
        }
    }
    Ok(())
}

/// Builds a fresh model for `cfg` with the given backbone.
pub fn init_model(cfg: &TrainConfig, backbone: crate::model::BackboneConfig) -> Result<Model> {
    if cfg.weight_tying {
        Model::tied(backbone, cfg.seed)
    } else {
        Model::untied(backbone, cfg.depth, cfg.seed)
    }
}

/// Trains `model` in place on `train_set`, scoring `val_set` after each epoch.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    ctx: &LithoContext,
    epe: &EpeConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_uniform(train_set)?;
    if model.is_tied() != cfg.weight_tying {
        return Err(Error::InvalidConfig("model tying does not match the training mode".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut report = TrainReport {
        parameter_count: model.count_params(),
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64)));
        let adam = cfg.adam(epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<Vec<Tensor>>)>> = batch
                .par_iter()
                .map(|&i| sample_gradients(model, &train_set[i], cfg.depth, ctx, cfg.backprop_through_litho))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { iteration: epoch });
                }
                loss_sum += loss;
                for (op, g) in model.operators_mut().iter_mut().zip(&grads) {
                    op.params_mut().accumulate_tensors(g, scale)?;
                }
            }
            for op in model.operators_mut() {
                adam_step(op.params_mut(), &adam);
            }
        }
        report.epoch_loss.push(loss_sum / train_set.len() as f64);
        let val_epe = if val_set.is_empty() {
            f64::NAN
        } else {
            let infer_cfg = InferConfig {
                t_max: cfg.depth,
                residual_tol: 0.0,
            };
            let counts: Vec<Result<usize>> = val_set
                .par_iter()
                .map(|s| {
                    let run = infer(&s.design, model, &infer_cfg, ctx)?;
                    let wafer = nominal_print(&run.mask, ctx)?;
                    Ok(epe_violations(&wafer, &s.design, epe)?.0)
                })
                .collect();
            let mut total = 0usize;
            for c in counts {
                total += c?;
            }
            total as f64 / val_set.len() as f64
        };
        report.epoch_val_epe.push(val_epe);
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch_{}.ckpt", epoch + 1));
            let step = model.operators()[0].params().step();
            model.to_checkpoint(step)?.save(&path)?;
            report.checkpoints.push(path);
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!(
            "epoch {} loss {:.4} val_epe {:.3} ({:.1}s)",
            epoch + 1,
            report.epoch_loss[epoch],
            val_epe,
            report.epoch_seconds[epoch]
        );
    }
    Ok(report)
}

fn nominal_print(mask: &BinaryImage, ctx: &LithoContext) -> Result<BinaryImage> {
    let intensity = ctx.optics().intensity(&mask.to_grid().data)?;
    let grid = Grid::from_vec(mask.width(), mask.height(), intensity)?;
    crate::litho::resist_threshold(&grid, &ctx.nominal, mask.pixel_size())
}

/// Per-tile evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileMetrics {
    pub tile_id: String,
    pub epe_violations: usize,
    pub pvb_nm2: f64,
    pub seconds: f64,
    /// Squared distance of the binarized mask to the golden mask.
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tiles: Vec<TileMetrics>,
    pub mean_epe: f64,
    pub mean_pvb_nm2: f64,
    /// Inference seconds per tile.
    pub throughput_s_per_tile: f64,
    pub mean_l2: f64,
}

impl EvalSummary {
    pub fn from_tiles(tiles: Vec<TileMetrics>) -> Self {
        let n = tiles.len().max(1) as f64;
        let mean = |f: &dyn Fn(&TileMetrics) -> f64| tiles.iter().map(f).sum::<f64>() / n;
        Self {
            mean_epe: mean(&|t| t.epe_violations as f64),
            mean_pvb_nm2: mean(&|t| t.pvb_nm2),
            throughput_s_per_tile: mean(&|t| t.seconds),
            mean_l2: mean(&|t| t.l2),
            tiles,
        }
    }

    /// Per-tile CSV: `tile_id,epe_violations,pvb_nm2,seconds`.
    pub fn tiles_csv(&self) -> String {
        let mut out = String::from("tile_id,epe_violations,pvb_nm2,seconds\n");
        for t in &self.tiles {
            out.push_str(&format!("{},{},{},{}\n", t.tile_id, t.epe_violations, t.pvb_nm2, t.seconds));
        }
        out
    }

    /// One-row summary CSV with `EPE,PVB,Throughput` columns.
    pub fn summary_csv(&self) -> String {
        format!(
            "EPE,PVB,Throughput\n{},{},{}\n",
            self.mean_epe, self.mean_pvb_nm2, self.throughput_s_per_tile
        )
    }
}

/// Scores a finished binary mask: nominal EPE against `design` and PVB.
pub fn score_mask(mask: &BinaryImage, design: &BinaryImage, ctx: &LithoContext, corners: &Corners, epe: &EpeConfig) -> Result<(usize, f64)> {
    let intensity = ctx.optics().intensity(&mask.to_grid().data)?;
    let grid = Grid::from_vec(mask.width(), mask.height(), intensity)?;
    let wafer = crate::litho::resist_threshold(&grid, &corners.nominal, mask.pixel_size())?;
    let (count, _) = epe_violations(&wafer, design, epe)?;
    let pvb = pvb_from_intensity(&grid, corners, mask.pixel_size())?;
    Ok((count, pvb))
}

/// Runs inference per tile and scores the result.
pub fn evaluate(
    samples: &[Sample],
    model: &Model,
    infer_cfg: &InferConfig,
    ctx: &LithoContext,
    corners: &Corners,
    epe: &EpeConfig,
) -> Result<EvalSummary> {
    let mut tiles = Vec::with_capacity(samples.len());
    for s in samples {
        let started = Instant::now();
        let run = infer(&s.design, model, infer_cfg, ctx)?;
        let seconds = started.elapsed().as_secs_f64();
        let (count, pvb) = score_mask(&run.mask, &s.design, ctx, corners, epe)?;
        let l2 = mask_l2(&run.mask, &s.golden);
        tiles.push(TileMetrics {
            tile_id: s.id.clone(),
            epe_violations: count,
            pvb_nm2: pvb,
            seconds,
            l2,
        });
    }
    Ok(EvalSummary::from_tiles(tiles))
}

/// Squared distance between two binary masks (the count of differing pixels).
pub fn mask_l2(a: &BinaryImage, b: &BinaryImage) -> f64 {
    a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count() as f64
}

/// Binarizes a relaxed mask at 0.5.
pub fn binarize_mask(m: &Grid, pixel_size: f64) -> Result<BinaryImage> {
    binarize_grid(m, 0.5, pixel_size)
}
