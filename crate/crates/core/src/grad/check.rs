//! Finite-difference verification of every primitive's backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Pass threshold on the maximum relative error of each check.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Coordinates probed per input tensor.
pub const PROBES_PER_INPUT: usize = 10;

const STEP: f64 = 1e-5;
// Relative error is measured against max(|analytic|, |numeric|, FLOOR).
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable function of a few tensors.
pub struct Case {
    pub name: String,
    inputs: Vec<Tensor>,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    /// Compares the VJP against central differences of `⟨R, f(x)⟩` for a
    /// random projection `R`.
    pub fn check(&self, rng: &mut impl Rng) -> Result<GradcheckResult> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let out = (self.build)(&mut tape, &vars)?;
        let out_shape = tape.value(out).shape().to_vec();
        let proj: Vec<f64> = (0..tape.value(out).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let seed = Tensor::new(out_shape, proj.clone())?;
        let grads = tape.vjp(out, seed)?;
        let dot = |t: &Tensor| t.data().iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>();

        let mut worst = 0.0f64;
        let mut probes = 0;
        for (k, input) in self.inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for _ in 0..PROBES_PER_INPUT.min(input.len()) {
                let j = rng.random_range(0..input.len());
                let mut inputs = self.inputs.clone();
                inputs[k].data_mut()[j] += STEP;
                let plus = dot(&self.eval(&inputs)?);
                inputs[k].data_mut()[j] -= 2.0 * STEP;
                let minus = dot(&self.eval(&inputs)?);
                let numeric = (plus - minus) / (2.0 * STEP);
                let a = analytic.data()[j];
                let scale = a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max((a - numeric).abs() / scale);
                probes += 1;
            }
        }
        Ok(GradcheckResult {
            name: self.name.clone(),
            max_rel_err: worst,
            probes,
        })
    }
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so the relu kink is never straddled.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn pow2(rng: &mut impl Rng, lo: u32, hi: u32) -> usize {
    1 << rng.random_range(lo..=hi)
}

/// The standard corpus: one case per primitive plus a layered composite.
pub fn standard_cases(rng: &mut impl Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let h = rng.random_range(2..=16);
    let w = rng.random_range(2..=16);
    let s = [h, w];

    cases.push(Case::new("add", vec![random(rng, &s, -1.0, 1.0), random(rng, &s, -1.0, 1.0)], |t, v| t.add(v[0], v[1])));
    cases.push(Case::new("mul", vec![random(rng, &s, -1.0, 1.0), random(rng, &s, -1.0, 1.0)], |t, v| t.mul(v[0], v[1])));
    let c = rng.random_range(-2.0..2.0);
    cases.push(Case::new("scalar_mul", vec![random(rng, &s, -1.0, 1.0)], move |t, v| t.scalar_mul(v[0], c)));
    cases.push(Case::new("sigmoid", vec![random(rng, &s, -4.0, 4.0)], |t, v| t.sigmoid(v[0])));
    cases.push(Case::new("relu", vec![away_from_zero(rng, &s)], |t, v| t.relu(v[0])));
    cases.push(Case::new("sum", vec![random(rng, &s, -1.0, 1.0)], |t, v| t.sum(v[0])));
    cases.push(Case::new(
        "frobenius_sq_diff",
        vec![random(rng, &s, -1.0, 1.0), random(rng, &s, -1.0, 1.0)],
        |t, v| t.frobenius_sq_diff(v[0], v[1]),
    ));

    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    cases.push(Case::new(
        "conv2d",
        vec![
            random(rng, &[cin, h, w], -1.0, 1.0),
            random(rng, &[cout, cin, k, k], -1.0, 1.0),
            random(rng, &[cout], -1.0, 1.0),
        ],
        |t, v| t.conv2d(v[0], v[1], v[2]),
    ));
    cases.push(Case::new(
        "conv2d_3x3",
        vec![
            random(rng, &[2, h, w], -1.0, 1.0),
            random(rng, &[3, 2, 3, 3], -1.0, 1.0),
            random(rng, &[3], -1.0, 1.0),
        ],
        |t, v| t.conv2d(v[0], v[1], v[2]),
    ));

    let (fh, fw) = (pow2(rng, 1, 4), pow2(rng, 1, 4));
    cases.push(Case::new("fft2", vec![random(rng, &[2, fh, fw, 2], -1.0, 1.0)], |t, v| t.fft2(v[0])));
    cases.push(Case::new("ifft2", vec![random(rng, &[2, fh, fw, 2], -1.0, 1.0)], |t, v| t.ifft2(v[0])));
    cases.push(Case::new("to_complex", vec![random(rng, &s, -1.0, 1.0)], |t, v| t.to_complex(v[0])));
    cases.push(Case::new("real_part", vec![random(rng, &[h, w, 2], -1.0, 1.0)], |t, v| t.real_part(v[0])));
    cases.push(Case::new(
        "complex_mul",
        vec![random(rng, &[h, w, 2], -1.0, 1.0), random(rng, &[h, w, 2], -1.0, 1.0)],
        |t, v| t.complex_mul(v[0], v[1]),
    ));

    let p = pow2(rng, 2, 4);
    let k_max = rng.random_range(1..=p / 2);
    let kk = 2 * k_max - 1;
    let (np, ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    cases.push(Case::new(
        "spectral_mix",
        vec![
            random(rng, &[np, ci, p, p, 2], -1.0, 1.0),
            random(rng, &[ci, co, kk, kk, 2], -1.0, 1.0),
        ],
        move |t, v| t.spectral_mix(v[0], v[1], k_max),
    ));

    let ps = pow2(rng, 1, 3);
    let (gh, gw) = (rng.random_range(1..=16 / ps), rng.random_range(1..=16 / ps));
    cases.push(Case::new(
        "patch_split",
        vec![random(rng, &[2, gh * ps, gw * ps], -1.0, 1.0)],
        move |t, v| t.patch_split(v[0], ps),
    ));
    cases.push(Case::new(
        "patch_merge",
        vec![random(rng, &[gh * gw, 2, ps, ps], -1.0, 1.0)],
        move |t, v| t.patch_merge(v[0], gh, gw),
    ));
    let f = pow2(rng, 1, 2);
    cases.push(Case::new(
        "avg_pool",
        vec![random(rng, &[2, 16 / f * f, 8], -1.0, 1.0)],
        move |t, v| t.avg_pool(v[0], f),
    ));
    let (uh, uw) = (rng.random_range(1..=4), rng.random_range(1..=4));
    cases.push(Case::new(
        "bicubic_upsample",
        vec![random(rng, &[2, uh, uw], -1.0, 1.0)],
        move |t, v| t.bicubic_upsample(v[0], 4),
    ));
    cases.push(Case::new(
        "concat",
        vec![random(rng, &[1, h, w], -1.0, 1.0), random(rng, &[2, h, w], -1.0, 1.0)],
        |t, v| t.concat(&[v[0], v[1]]),
    ));
    // A small layered network: conv → relu → conv → sigmoid → loss.
    let target = random(rng, &[1, 8, 8], 0.0, 1.0);
    cases.push(Case::new(
        "composite",
        vec![
            random(rng, &[2, 8, 8], -1.0, 1.0),
            random(rng, &[3, 2, 3, 3], -0.5, 0.5),
            random(rng, &[3], -0.1, 0.1),
            random(rng, &[1, 3, 1, 1], -1.0, 1.0),
            random(rng, &[1], -0.1, 0.1),
        ],
        move |t, v| {
            let h = t.conv2d(v[0], v[1], v[2])?;
            let h = t.relu(h)?;
            let h = t.conv2d(h, v[3], v[4])?;
            let y = t.sigmoid(h)?;
            let z = t.constant(target.clone());
            t.frobenius_sq_diff(y, z)
        },
    ));
    cases
}

/// Runs the standard corpus under `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = standard_cases(&mut rng);
    cases.iter().map(|c| c.check(&mut rng)).collect()
}
