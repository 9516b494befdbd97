//! The learned update operator `g(M_t, Z_t, Z*; w)` and its recurrence.
//!
//! The backbone is a small patch-wise spectral network:
//!
//! ```text
//! x = [M, Z, Z*]                                   3 × H × W
//! s = patch_merge(Re ifft2(W_spec · fft2(patch_split(x))))   c × H × W
//! h = relu(s + conv1x1(x))
//! u = bicubic(relu(conv3x3(avg_pool(h, p))), p)    token mixing over the patch grid
//! M_next = sigmoid(conv1x1(h + u))
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Checkpoint, ExternalOp, ParamSet, Tape, Tensor, Var};
use crate::litho::{sigmoid, KernelSet, Optics, ProcessCondition, RelaxConfig};
use crate::raster::{binarize_grid, BinaryImage, GrayImage, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub k_max: usize,
    pub channels: usize,
    pub token_kernel: usize,
    pub local_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            k_max: 8,
            channels: 16,
            token_kernel: 3,
            local_kernel: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 {
            return bad("backbone needs at least one hidden channel".into());
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return bad(format!("patch size {} must be a power of two >= 2", self.patch_size));
        }
        if self.k_max == 0 || 2 * self.k_max > self.patch_size {
            return bad(format!(
                "k_max {} must lie in 1..={}",
                self.k_max,
                self.patch_size / 2
            ));
        }
        if self.token_kernel.is_multiple_of(2) || self.local_kernel.is_multiple_of(2) {
            return bad(format!(
                "token kernel {} and local kernel {} must be odd",
                self.token_kernel, self.local_kernel
            ));
        }
        Ok(())
    }

    /// Retained modes per axis.
    pub fn modes(&self) -> usize {
        2 * self.k_max - 1
    }

    pub fn check_tile(&self, width: usize, height: usize) -> Result<()> {
        if !width.is_multiple_of(self.patch_size) || !height.is_multiple_of(self.patch_size) {
            return Err(Error::DimensionMismatch(format!(
                "patch size {} does not divide {width}x{height}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

const IN_CHANNELS: usize = 3;

/// Head gain on the pass-through channel at initialization.
const PASS_GAIN: f64 = 8.0;

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 7] = [
    "spectral.w",
    "local.w",
    "local.b",
    "token.w",
    "token.b",
    "head.w",
    "head.b",
];

/// The weight-tied network `g`.
#[derive(Debug, Clone)]
pub struct UpdateOperator {
    config: BackboneConfig,
    params: ParamSet,
}

fn shapes(cfg: &BackboneConfig) -> [Vec<usize>; 7] {
    let (c, k, t, l) = (cfg.channels, cfg.modes(), cfg.token_kernel, cfg.local_kernel);
    [
        vec![IN_CHANNELS, c, k, k, 2],
        vec![c, IN_CHANNELS, l, l],
        vec![c],
        vec![c, c, t, t],
        vec![c],
        vec![1, c, 1, 1],
        vec![1],
    ]
}

impl UpdateOperator {
    /// Randomly initialized operator.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels as f64;
        let t = config.token_kernel as f64;
        let l = config.local_kernel as f64;
        let scales = [
            1.0 / IN_CHANNELS as f64,
            1.0 / (IN_CHANNELS as f64 * l * l).sqrt(),
            0.0,
            1.0 / (c * t * t).sqrt(),
            0.0,
            1.0 / c.sqrt(),
            0.0,
        ];
        let mut params = ParamSet::new();
        for ((name, shape), scale) in PARAM_NAMES.iter().zip(shapes(&config)).zip(scales) {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            params.push(*name, Tensor::new(shape, data)?)?;
        }
        let mut op = Self { config, params };
        op.pass_mask_through();
        Ok(op)
    }

    /// Routes `M_t` through hidden channel 0 to the head, so a fresh operator
    /// starts close to `M_{t+1} = M_t` and the other channels learn the edits.
    fn pass_mask_through(&mut self) {
        let cfg = self.config;
        let (c, k, l) = (cfg.channels, cfg.modes(), cfg.local_kernel);
        for p in self.params.params_mut() {
            let name = p.name().to_string();
            let d = p.value_mut().data_mut();
            match name.as_str() {
                "spectral.w" => {
                    let plane = k * k * 2;
                    for i in 0..IN_CHANNELS {
                        d[i * c * plane..(i * c + 1) * plane].fill(0.0);
                    }
                }
                "local.w" => {
                    d[..IN_CHANNELS * l * l].fill(0.0);
                    d[l * l / 2] = 1.0;
                }
                "token.w" => {
                    let row = d.len() / c;
                    d[..row].fill(0.0);
                }
                "head.w" => {
                    d.iter_mut().for_each(|v| *v *= 0.1);
                    d[0] = PASS_GAIN;
                }
                "head.b" => d[0] = -PASS_GAIN / 2.0,
                _ => {}
            }
        }
    }

    /// Operator whose output is exactly 0.5 everywhere.
    pub fn with_zero_head(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut op = Self::new(config, seed)?;
        for p in op.params.params_mut() {
            if p.name().starts_with("head.") {
                p.value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(op)
    }

    /// Rebuilds an operator from named tensors, checking every shape.
    pub fn from_tensors(config: BackboneConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        let mut params = ParamSet::new();
        for (((name, t), expect), shape) in tensors.into_iter().zip(PARAM_NAMES).zip(shapes(&config)) {
            if name != expect || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {expect} {shape:?}",
                    t.shape()
                )));
            }
            params.push(name, t)?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Records one application of `g` on `tape` using bound parameters `w`.
    /// `m`, `z`, `target` are `[1, H, W]`; the result is `[1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, w: &[Var], m: Var, z: Var, target: Var) -> Result<Var> {
        if w.len() != PARAM_NAMES.len() {
            return Err(Error::InvalidArgument("wrong number of bound parameters".into()));
        }
        let shape = tape.value(m).shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "step",
                detail: format!("expected [1, H, W], got {shape:?}"),
            });
        }
        let (h, wd) = (shape[1], shape[2]);
        self.config.check_tile(wd, h)?;
        let p = self.config.patch_size;
        let (gh, gw) = (h / p, wd / p);

        let x = tape.concat(&[m, z, target])?;
        let patches = tape.patch_split(x, p)?;
        let spec = tape.to_complex(patches)?;
        let spec = tape.fft2(spec)?;
        let mixed = tape.spectral_mix(spec, w[0], self.config.k_max)?;
        let mixed = tape.ifft2(mixed)?;
        let mixed = tape.real_part(mixed)?;
        let spectral = tape.patch_merge(mixed, gh, gw)?;
        let local = tape.conv2d(x, w[1], w[2])?;
        let hidden = tape.add(spectral, local)?;
        let hidden = tape.relu(hidden)?;

        let tokens = tape.avg_pool(hidden, p)?;
        let tokens = tape.conv2d(tokens, w[3], w[4])?;
        let tokens = tape.relu(tokens)?;
        let up = tape.bicubic_upsample(tokens, p)?;

        let feat = tape.add(hidden, up)?;
        let logits = tape.conv2d(feat, w[5], w[6])?;
        tape.sigmoid(logits)
    }

    /// `M_{t+1} = g(M_t, Z_t, Z*)` without recording gradients.
    pub fn step(&self, m_t: &GrayImage, z_t: &GrayImage, design: &BinaryImage) -> Result<GrayImage> {
        let (w, h) = (design.width(), design.height());
        for (name, iw, ih) in [("mask", m_t.width(), m_t.height()), ("wafer", z_t.width(), z_t.height())] {
            if iw != w || ih != h {
                return Err(Error::DimensionMismatch(format!(
                    "{name} {iw}x{ih} vs design {w}x{h}"
                )));
            }
        }
        let out = self.step_raw(m_t.data(), z_t.data(), &design_plane(design), w, h)?;
        GrayImage::new(w, h, design.pixel_size(), out)
    }

    fn step_raw(&self, m: &[f64], z: &[f64], target: &[f64], w: usize, h: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let plane = |tape: &mut Tape, d: &[f64]| tape.constant(Tensor::from_plane(h, w, d.to_vec()));
        let (mv, zv, tv) = (plane(&mut tape, m), plane(&mut tape, z), plane(&mut tape, target));
        let out = self.forward(&mut tape, &vars, mv, zv, tv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

fn design_plane(design: &BinaryImage) -> Vec<f64> {
    design.data().iter().map(|&v| f64::from(v)).collect()
}

/// Tied (one operator for every step) or untied (one per step) model.
#[derive(Debug, Clone)]
pub enum Model {
    Tied(UpdateOperator),
    Untied(Vec<UpdateOperator>),
}

impl Model {
    pub fn tied(config: BackboneConfig, seed: u64) -> Result<Self> {
        Ok(Model::Tied(UpdateOperator::new(config, seed)?))
    }

    /// `depth` independently initialized operators.
    pub fn untied(config: BackboneConfig, depth: usize, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidConfig("untied model needs depth >= 1".into()));
        }
        let ops = (0..depth)
            .map(|t| UpdateOperator::new(config, seed.wrapping_add(t as u64 * 0x9E37_79B9)))
            .collect::<Result<_>>()?;
        Ok(Model::Untied(ops))
    }

    pub fn config(&self) -> &BackboneConfig {
        self.operators()[0].config()
    }

    pub fn is_tied(&self) -> bool {
        matches!(self, Model::Tied(_))
    }

    pub fn operators(&self) -> &[UpdateOperator] {
        match self {
            Model::Tied(op) => std::slice::from_ref(op),
            Model::Untied(ops) => ops,
        }
    }

    pub fn operators_mut(&mut self) -> &mut [UpdateOperator] {
        match self {
            Model::Tied(op) => std::slice::from_mut(op),
            Model::Untied(ops) => ops,
        }
    }

    /// Index of the parameter set used at step `t` (0-based). Untied models
    /// reuse their last set beyond the trained depth.
    pub fn set_index(&self, t: usize) -> usize {
        match self {
            Model::Tied(_) => 0,
            Model::Untied(ops) => t.min(ops.len() - 1),
        }
    }

    pub fn operator_for(&self, t: usize) -> &UpdateOperator {
        &self.operators()[self.set_index(t)]
    }

    pub fn count_params(&self) -> usize {
        self.operators().iter().map(UpdateOperator::count_params).sum()
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut params = Vec::new();
        for (t, op) in self.operators().iter().enumerate() {
            for p in op.params().iter() {
                let name = match self {
                    Model::Tied(_) => p.name().to_string(),
                    Model::Untied(_) => format!("t{t}.{}", p.name()),
                };
                params.push((name, p.value().clone()));
            }
        }
        Ok(Checkpoint {
            backbone: serde_json::to_value(self.config())?,
            meta: serde_json::json!({
                "weight_tying": self.is_tied(),
                "parameter_sets": self.operators().len(),
            }),
            step,
            params,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config: BackboneConfig = serde_json::from_value(ckpt.backbone)?;
        let tied = ckpt.meta.get("weight_tying").and_then(|v| v.as_bool()).unwrap_or(true);
        let n = PARAM_NAMES.len();
        if ckpt.params.is_empty() || !ckpt.params.len().is_multiple_of(n) {
            return Err(Error::Checkpoint(format!(
                "{} tensors is not a whole number of parameter sets",
                ckpt.params.len()
            )));
        }
        let sets = ckpt.params.len() / n;
        if tied && sets != 1 {
            return Err(Error::Checkpoint("tied checkpoint holds several parameter sets".into()));
        }
        let mut it = ckpt.params.into_iter();
        let mut ops = Vec::with_capacity(sets);
        for t in 0..sets {
            let mut group: Vec<(String, Tensor)> = it.by_ref().take(n).collect();
            if !tied {
                let prefix = format!("t{t}.");
                for (name, _) in &mut group {
                    *name = name
                        .strip_prefix(&prefix)
                        .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?
                        .to_string();
                }
            }
            let mut op = UpdateOperator::from_tensors(config, group)?;
            op.params_mut().set_step(ckpt.step);
            ops.push(op);
        }
        Ok(if tied {
            Model::Tied(ops.pop().expect("one set"))
        } else {
            Model::Untied(ops)
        })
    }
}

/// Optics and resist settings shared by every step of a recurrence.
#[derive(Debug, Clone)]
pub struct LithoContext {
    optics: Arc<Optics>,
    pub nominal: ProcessCondition,
    pub relax: RelaxConfig,
}

impl LithoContext {
    pub fn new(ks: &KernelSet, width: usize, height: usize, nominal: ProcessCondition, relax: RelaxConfig) -> Result<Self> {
        nominal.validate()?;
        relax.validate()?;
        Ok(Self {
            optics: Arc::new(Optics::new(ks, height, width)?),
            nominal,
            relax,
        })
    }

    pub fn width(&self) -> usize {
        self.optics.width()
    }

    pub fn height(&self) -> usize {
        self.optics.height()
    }

    pub fn optics(&self) -> &Optics {
        &self.optics
    }

    /// Relaxed print `sigmoid_resist(simulate(mask))`.
    pub fn resist(&self, mask: &[f64]) -> Result<Vec<f64>> {
        let intensity = self.optics.intensity(mask)?;
        Ok(self.resist_from_intensity(&intensity))
    }

    fn resist_from_intensity(&self, intensity: &[f64]) -> Vec<f64> {
        let (bz, dose, ith) = (self.relax.beta_z, self.nominal.dose_scale, self.nominal.i_th);
        intensity.iter().map(|&i| sigmoid(bz * (dose * i - ith))).collect()
    }

    fn check(&self, design: &BinaryImage) -> Result<()> {
        if design.width() != self.width() || design.height() != self.height() {
            return Err(Error::DimensionMismatch(format!(
                "design {}x{} vs optics {}x{}",
                design.width(),
                design.height(),
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }

    /// The relaxed litho model as a differentiable tape node.
    pub fn as_op(&self) -> Arc<dyn ExternalOp> {
        Arc::new(LithoOp { ctx: self.clone() })
    }
}

/// `Z = sigmoid_resist(simulate(M))` with its adjoint, on `[1, H, W]` tensors.
struct LithoOp {
    ctx: LithoContext,
}

impl ExternalOp for LithoOp {
    fn name(&self) -> &str {
        "litho"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.ctx.resist(x.data())?;
        Tensor::new(x.shape().to_vec(), z)
    }

    fn vjp(&self, x: &Tensor, y: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let (_, fields) = self.ctx.optics.forward(x.data())?;
        let k = self.ctx.relax.beta_z * self.ctx.nominal.dose_scale;
        let upstream: Vec<f64> = grad
            .data()
            .iter()
            .zip(y.data())
            .map(|(g, z)| g * k * z * (1.0 - z))
            .collect();
        let g = self.ctx.optics.adjoint(&fields, &upstream)?;
        Tensor::new(x.shape().to_vec(), g)
    }
}

/// Masks `M_0..M_T` recorded on a tape during training.
#[derive(Debug, Clone)]
pub struct TapeTrajectory {
    pub masks: Vec<Var>,
    pub wafers: Vec<Var>,
}

/// Records `T` steps of the recurrence on `tape`.
///
/// `bound[s]` holds the tape variables of parameter set `s`. With
/// `through_litho = false` each `Z_t` enters as a constant.
pub fn unroll_on_tape(
    tape: &mut Tape,
    model: &Model,
    bound: &[Vec<Var>],
    design: &BinaryImage,
    depth: usize,
    ctx: &LithoContext,
    through_litho: bool,
) -> Result<TapeTrajectory> {
    if depth == 0 {
        return Err(Error::InvalidArgument("unroll depth must be >= 1".into()));
    }
    ctx.check(design)?;
    let (w, h) = (design.width(), design.height());
    let plane = design_plane(design);
    let target = tape.constant(Tensor::from_plane(h, w, plane.clone()));
    let mut m = tape.constant(Tensor::from_plane(h, w, plane));
    let litho = ctx.as_op();
    let mut masks = vec![m];
    let mut wafers = Vec::with_capacity(depth + 1);
    for t in 0..=depth {
        let z = if through_litho {
            tape.external(m, litho.clone())?
        } else {
            let z = ctx.resist(tape.value(m).data())?;
            tape.constant(Tensor::from_plane(h, w, z))
        };
        wafers.push(z);
        if t == depth {
            break;
        }
        let s = model.set_index(t);
        m = model.operators()[s].forward(tape, &bound[s], m, z, target)?;
        masks.push(m);
    }
    Ok(TapeTrajectory { masks, wafers })
}

/// Full trajectory `(M_t, Z_t)` for `t = 0..=T`, without gradients.
pub fn unroll(design: &BinaryImage, model: &Model, depth: usize, ctx: &LithoContext) -> Result<Vec<(GrayImage, GrayImage)>> {
    if depth == 0 {
        return Err(Error::InvalidArgument("unroll depth must be >= 1".into()));
    }
    ctx.check(design)?;
    let (w, h, ps) = (design.width(), design.height(), design.pixel_size());
    let target = design_plane(design);
    let mut m = target.clone();
    let mut out = Vec::with_capacity(depth + 1);
    for t in 0..=depth {
        let z = ctx.resist(&m)?;
        let next = if t < depth {
            Some(model.operator_for(t).step_raw(&m, &z, &target, w, h)?)
        } else {
            None
        };
        out.push((GrayImage::new(w, h, ps, m)?, GrayImage::new(w, h, ps, z)?));
        match next {
            Some(n) => m = n,
            None => break,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub t_max: usize,
    /// Stop once `‖M_{t+1} − M_t‖_F / √(pixels)` falls below this.
    pub residual_tol: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            t_max: 8,
            residual_tol: 0.0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be >= 1".into()));
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::InvalidConfig("residual tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of fixed-point inference.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Binarized final mask.
    pub mask: BinaryImage,
    /// `r_1, r_2, ...` one per executed step.
    pub residuals: Vec<f64>,
    /// Relaxed masks `M_0..M_stop`.
    pub masks: Vec<Grid>,
}

/// Iterates the operator with fresh prints until the residual drops below
/// tolerance or `t_max` steps have run.
pub fn infer(design: &BinaryImage, model: &Model, cfg: &InferConfig, ctx: &LithoContext) -> Result<Inference> {
    cfg.validate()?;
    ctx.check(design)?;
    let (w, h) = (design.width(), design.height());
    let target = design_plane(design);
    let mut m = target.clone();
    let mut masks = vec![Grid::from_vec(w, h, m.clone())?];
    let mut residuals = Vec::new();
    let norm = ((w * h) as f64).sqrt();
    for t in 0..cfg.t_max {
        let z = ctx.resist(&m)?;
        let next = model.operator_for(t).step_raw(&m, &z, &target, w, h)?;
        let r = next
            .iter()
            .zip(&m)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / norm;
        residuals.push(r);
        m = next;
        masks.push(Grid::from_vec(w, h, m.clone())?);
        if r < cfg.residual_tol {
            break;
        }
    }
    let mask = binarize_grid(masks.last().expect("non-empty"), 0.5, design.pixel_size())?;
    Ok(Inference {
        mask,
        residuals,
        masks,
    })
}
