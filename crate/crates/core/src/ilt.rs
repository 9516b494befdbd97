//! Pixel-based inverse lithography by gradient descent.
//!
//! The mask parameter `M′` is relaxed through a sigmoid, imaged with the
//! SOCS model, passed through a sigmoid resist, and compared to the target
//! with a squared Frobenius loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::litho::{sigmoid, KernelSet, Optics, ProcessCondition, RelaxConfig};
use crate::raster::{binarize_grid, BinaryImage, GrayImage, Grid};

/// Window, in iterations, for the relative-improvement stopping rule.
pub const STOP_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IltConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub relax: RelaxConfig,
    pub nominal: ProcessCondition,
    pub stop_rel_tol: f64,
    pub keep_best: bool,
    /// Record the relaxed mask every this many iterations; 0 disables.
    pub snapshot_every: usize,
}

impl Default for IltConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            step_size: 2.0,
            relax: RelaxConfig::default(),
            nominal: ProcessCondition::nominal("nominal"),
            stop_rel_tol: 1e-3,
            keep_best: true,
            snapshot_every: 0,
        }
    }
}

impl IltConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step size {} must be finite and non-negative",
                self.step_size
            )));
        }
        if !(self.stop_rel_tol >= 0.0) {
            return Err(Error::InvalidConfig("stop_rel_tol must be non-negative".into()));
        }
        self.relax.validate()?;
        self.nominal.validate()
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptTrace {
    pub losses: Vec<f64>,
    /// `(iteration, relaxed mask M)` pairs.
    pub snapshots: Vec<(usize, Grid)>,
    pub best_iteration: usize,
    pub best_loss: f64,
    /// Relaxed mask at the reported iterate.
    pub final_mask: Option<Grid>,
}

impl OptTrace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("iter,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn check_dims(w: usize, h: usize, design: &BinaryImage) -> Result<()> {
    if w != design.width() || h != design.height() {
        return Err(Error::DimensionMismatch(format!(
            "{w}x{h} vs design {}x{}",
            design.width(),
            design.height()
        )));
    }
    Ok(())
}

/// `Σ (Z − Z*)²`.
pub fn ilt_loss(z_relaxed: &GrayImage, design: &BinaryImage) -> Result<f64> {
    check_dims(z_relaxed.width(), z_relaxed.height(), design)?;
    Ok(z_relaxed
        .data()
        .iter()
        .zip(design.data())
        .map(|(&z, &t)| (z - f64::from(t)).powi(2))
        .sum())
}

/// Loss and gradient evaluator bound to one tile size.
#[derive(Debug, Clone)]
pub struct IltObjective {
    optics: Optics,
    target: Vec<f64>,
    relax: RelaxConfig,
    nominal: ProcessCondition,
}

impl IltObjective {
    pub fn new(design: &BinaryImage, ks: &KernelSet, relax: RelaxConfig, nominal: ProcessCondition) -> Result<Self> {
        Ok(Self {
            optics: Optics::new(ks, design.height(), design.width())?,
            target: design.data().iter().map(|&v| f64::from(v)).collect(),
            relax,
            nominal,
        })
    }

    pub fn relaxed_mask(&self, m_prime: &[f64]) -> Vec<f64> {
        m_prime
            .iter()
            .map(|&v| sigmoid(self.relax.beta_m * (v - 0.5)))
            .collect()
    }

    /// Loss at `M′` and, when `want_grad`, `∂l/∂M′`.
    pub fn evaluate(&self, m_prime: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let mask = self.relaxed_mask(m_prime);
        let (intensity, fields) = self.optics.forward(&mask)?;
        let (bz, dose, ith) = (self.relax.beta_z, self.nominal.dose_scale, self.nominal.i_th);
        let mut loss = 0.0;
        let mut upstream = vec![0.0; intensity.len()];
        for ((u, &i), &t) in upstream.iter_mut().zip(&intensity).zip(&self.target) {
            let z = sigmoid(bz * (dose * i - ith));
            let d = z - t;
            loss += d * d;
            *u = 2.0 * d * bz * dose * z * (1.0 - z);
        }
        if !want_grad {
            return Ok((loss, None));
        }
        let mut grad = self.optics.adjoint(&fields, &upstream)?;
        for (g, &m) in grad.iter_mut().zip(&mask) {
            *g *= self.relax.beta_m * m * (1.0 - m);
        }
        Ok((loss, Some(grad)))
    }
}

/// `∂l/∂M′` for the full relaxed pipeline.
pub fn ilt_gradient(m_prime: &Grid, design: &BinaryImage, ks: &KernelSet, cfg: &IltConfig) -> Result<Grid> {
    check_dims(m_prime.width, m_prime.height, design)?;
    if m_prime.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("mask parameters must be finite".into()));
    }
    let obj = IltObjective::new(design, ks, cfg.relax, cfg.nominal.clone())?;
    let (_, g) = obj.evaluate(&m_prime.data, true)?;
    Grid::from_vec(m_prime.width, m_prime.height, g.expect("gradient requested"))
}

/// Loss of the relaxed pipeline at `M′`.
pub fn ilt_objective(m_prime: &Grid, design: &BinaryImage, ks: &KernelSet, cfg: &IltConfig) -> Result<f64> {
    check_dims(m_prime.width, m_prime.height, design)?;
    let obj = IltObjective::new(design, ks, cfg.relax, cfg.nominal.clone())?;
    Ok(obj.evaluate(&m_prime.data, false)?.0)
}

fn check_finite(loss: f64, iteration: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration })
    }
}

/// Gradient descent from `M′ = design`; returns the binarized mask.
pub fn ilt_optimize(design: &BinaryImage, ks: &KernelSet, cfg: &IltConfig) -> Result<(BinaryImage, OptTrace)> {
    cfg.validate()?;
    let (w, h) = (design.width(), design.height());
    let obj = IltObjective::new(design, ks, cfg.relax, cfg.nominal.clone())?;
    let mut m_prime: Vec<f64> = design.data().iter().map(|&v| f64::from(v)).collect();
    let mut best = m_prime.clone();
    let mut trace = OptTrace {
        best_loss: f64::INFINITY,
        ..OptTrace::default()
    };

    let mut running_best = Vec::with_capacity(cfg.max_iters);
    for it in 0..cfg.max_iters {
        let (loss, grad) = obj.evaluate(&m_prime, true)?;
        check_finite(loss, it)?;
        trace.losses.push(loss);
        if cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0 {
            trace
                .snapshots
                .push((it, Grid::from_vec(w, h, obj.relaxed_mask(&m_prime))?));
        }
        if loss < trace.best_loss {
            trace.best_loss = loss;
            trace.best_iteration = it;
            if cfg.keep_best {
                best.copy_from_slice(&m_prime);
            }
        }
        running_best.push(trace.best_loss);
        if it >= STOP_WINDOW {
            // Compare running minima so a single oscillating step cannot stop the run.
            let prev = running_best[it - STOP_WINDOW];
            let improvement = if prev > 0.0 { (prev - trace.best_loss) / prev } else { 0.0 };
            if improvement < cfg.stop_rel_tol {
                break;
            }
        }
        if it + 1 == cfg.max_iters {
            break;
        }
        let grad = grad.expect("gradient requested");
        for (m, g) in m_prime.iter_mut().zip(&grad) {
            *m -= cfg.step_size * g;
        }
    }

    let chosen = if cfg.keep_best { best } else { m_prime };
    let relaxed = Grid::from_vec(w, h, obj.relaxed_mask(&chosen))?;
    let mask = binarize_grid(&relaxed, 0.5, design.pixel_size())?;
    trace.final_mask = Some(relaxed);
    Ok((mask, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::litho::{simulate_intensity, sigmoid_mask, sigmoid_resist, synth_kernels};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(side: usize, lo: usize, hi: usize) -> BinaryImage {
        BinaryImage::from_fn(side, side, 8.0, |r, c| (lo..hi).contains(&r) && (lo..hi).contains(&c)).unwrap()
    }

    fn cfg() -> IltConfig {
        IltConfig::default()
    }

    #[test]
    fn loss_examples() {
        let d = square(8, 2, 5);
        let z = d.to_gray();
        assert_eq!(ilt_loss(&z, &d).unwrap(), 0.0);
        let ones = GrayImage::filled(8, 8, 8.0, 1.0).unwrap();
        let zeros = BinaryImage::zeros(8, 8, 8.0).unwrap();
        assert_eq!(ilt_loss(&ones, &zeros).unwrap(), 64.0);
        let small = GrayImage::filled(4, 4, 8.0, 1.0).unwrap();
        assert!(ilt_loss(&small, &zeros).is_err());
    }

    #[test]
    fn loss_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = GrayImage::new(9, 7, 1.0, (0..63).map(|_| rng.random::<f64>()).collect()).unwrap();
        let d = BinaryImage::from_fn(9, 7, 1.0, |r, c| (r * 3 + c) % 4 == 0).unwrap();
        let mut expect = 0.0;
        for r in 0..7 {
            for c in 0..9 {
                let diff = z.get(r, c) - f64::from(d.get(r, c));
                expect += diff * diff;
            }
        }
        assert!((ilt_loss(&z, &d).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn objective_agrees_with_litho_pipeline() {
        let ks = synth_kernels(2, 3, 9, 16.0, 8.0).unwrap();
        let d = square(32, 10, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mp = Grid::from_fn(32, 32, |_, _| rng.random_range(-0.5..1.5));
        let c = cfg();
        let m = GrayImage::from_grid(&sigmoid_mask(&mp, &c.relax), 8.0).unwrap();
        let z = sigmoid_resist(&simulate_intensity(&m, &ks).unwrap(), &c.nominal, &c.relax);
        let z = GrayImage::from_grid(&z, 8.0).unwrap();
        let expect = ilt_loss(&z, &d).unwrap();
        assert!((ilt_objective(&mp, &d, &ks, &c).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ks = synth_kernels(4, 4, 11, 24.0, 8.0).unwrap();
        let d = square(64, 20, 44);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mp = Grid::from_fn(64, 64, |r, c| f64::from(d.get(r, c)) + rng.random_range(-0.3..0.3));
        let c = IltConfig {
            relax: RelaxConfig { beta_m: 4.0, beta_z: 10.0 },
            ..cfg()
        };
        let g = ilt_gradient(&mp, &d, &ks, &c).unwrap();
        let eps = 1e-4;
        for _ in 0..20 {
            let (r, col) = (rng.random_range(0..64), rng.random_range(0..64));
            let mut p = mp.clone();
            p.set(r, col, mp.get(r, col) + eps);
            let lp = ilt_objective(&p, &d, &ks, &c).unwrap();
            p.set(r, col, mp.get(r, col) - eps);
            let lm = ilt_objective(&p, &d, &ks, &c).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let a = g.get(r, col);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3, "({r},{col}) analytic {a} fd {fd}");
        }
    }

    #[test]
    fn impulse_system_reduces_to_scalar_chain_rule() {
        let ks = KernelSet::impulse("nominal", 1.0);
        let d = BinaryImage::from_fn(3, 3, 1.0, |r, c| r == 1 && c == 1).unwrap();
        let mp = Grid::from_fn(3, 3, |r, c| 0.1 * (r * 3 + c) as f64);
        let c = cfg();
        let g = ilt_gradient(&mp, &d, &ks, &c).unwrap();
        let (bm, bz, ith) = (c.relax.beta_m, c.relax.beta_z, c.nominal.i_th);
        for r in 0..3 {
            for col in 0..3 {
                let x = mp.get(r, col);
                let m = sigmoid(bm * (x - 0.5));
                let z = sigmoid(bz * (m * m - ith));
                let t = f64::from(d.get(r, col));
                let expect = 2.0 * (z - t) * bz * z * (1.0 - z) * 2.0 * m * bm * m * (1.0 - m);
                assert!((g.get(r, col) - expect).abs() < 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn plateau_gives_zero_gradient() {
        // A target that already prints saturates Z, so ∂l/∂Z vanishes.
        let ks = KernelSet::impulse("nominal", 1.0);
        let d = BinaryImage::from_fn(4, 4, 1.0, |r, _| r < 2).unwrap();
        let mp = Grid::from_fn(4, 4, |r, _| if r < 2 { 6.0 } else { -6.0 });
        let c = IltConfig {
            relax: RelaxConfig { beta_m: 4.0, beta_z: 200.0 },
            ..cfg()
        };
        let g = ilt_gradient(&mp, &d, &ks, &c).unwrap();
        assert!(g.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_iterations_rejected_and_zero_step_is_fixed_point() {
        let ks = synth_kernels(1, 2, 7, 16.0, 8.0).unwrap();
        let d = square(32, 10, 20);
        let bad = IltConfig { max_iters: 0, ..cfg() };
        assert!(ilt_optimize(&d, &ks, &bad).is_err());

        let frozen = IltConfig {
            max_iters: 15,
            step_size: 0.0,
            stop_rel_tol: 0.0,
            ..cfg()
        };
        let (mask, trace) = ilt_optimize(&d, &ks, &frozen).unwrap();
        assert_eq!(trace.losses.len(), 15);
        assert!(trace.losses.iter().all(|&l| l == trace.losses[0]));
        assert_eq!(mask, d);
    }

    #[test]
    fn keep_best_reports_minimum_and_loss_descends() {
        let ks = synth_kernels(2, 4, 15, 24.0, 8.0).unwrap();
        let d = square(64, 20, 40);
        let c = IltConfig {
            max_iters: 40,
            stop_rel_tol: 0.0,
            snapshot_every: 10,
            ..cfg()
        };
        let (_, trace) = ilt_optimize(&d, &ks, &c).unwrap();
        let min = trace.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(trace.best_loss, min);
        assert_eq!(trace.losses[trace.best_iteration], min);
        assert!(trace.losses.len() <= 40);
        assert_eq!(trace.snapshots.len(), 4);
        assert!(min < trace.losses[0]);
        let relaxed = trace.final_mask.unwrap();
        let z = sigmoid_resist(
            &simulate_intensity(&GrayImage::from_grid(&relaxed, 8.0).unwrap(), &ks).unwrap(),
            &c.nominal,
            &c.relax,
        );
        let reported = ilt_loss(&GrayImage::from_grid(&z, 8.0).unwrap(), &d).unwrap();
        assert!((reported - min).abs() < 1e-9 * min.max(1.0));
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let ks = synth_kernels(6, 3, 11, 20.0, 8.0).unwrap();
        let d = square(32, 8, 24);
        let c = cfg();
        let obj = IltObjective::new(&d, &ks, c.relax, c.nominal.clone()).unwrap();
        let mut mp: Vec<f64> = d.data().iter().map(|&v| f64::from(v)).collect();
        let mut lambda = c.step_size;
        for _ in 0..20 {
            let (l0, g) = obj.evaluate(&mp, true).unwrap();
            let g = g.unwrap();
            let trial: Vec<f64> = mp.iter().zip(&g).map(|(m, g)| m - lambda * g).collect();
            let (l1, _) = obj.evaluate(&trial, false).unwrap();
            if l1 > l0 {
                lambda /= 10.0;
                let trial: Vec<f64> = mp.iter().zip(&g).map(|(m, g)| m - lambda * g).collect();
                let (l2, _) = obj.evaluate(&trial, false).unwrap();
                assert!(l2 <= l0, "loss rose from {l0} to {l2} at step {lambda}");
                mp = trial;
            } else {
                mp = trial;
            }
        }
    }

    #[test]
    fn non_finite_loss_reports_iteration() {
        assert!(check_finite(1.0, 0).is_ok());
        match check_finite(f64::NAN, 7) {
            Err(Error::Diverged { iteration }) => assert_eq!(iteration, 7),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let trace = OptTrace {
            losses: vec![3.0, 2.5],
            ..OptTrace::default()
        };
        let p = dir.path().join("t.csv");
        trace.write_csv(&p).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "iter,loss\n0,3\n1,2.5\n");
    }
}
