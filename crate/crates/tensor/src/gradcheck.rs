//! Central finite-difference checks of tape gradients in 64-bit arithmetic.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation applied on each side. Close to the cube root of f64
    /// epsilon, which balances truncation against roundoff in the loss.
    pub step: f64,
    /// Inputs with more elements are checked on a seeded random subset.
    pub max_checks_per_input: usize,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_checks_per_input: 24,
            floor: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so that every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = Tensor::rand_uniform(tape.shape(out).to_vec(), -1.0, 1.0, &mut rng);
    let w = tape.leaf(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Compares the tape gradient of `f` with central differences for every
/// input marked `requires_grad`. `f` must return a scalar.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(false))).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let zeros = vec![0.0; input.numel()];
        let analytic = tape.grad(vars[k]).unwrap_or(&zeros).to_vec();
        let indices: Vec<usize> = if input.numel() <= opts.max_checks_per_input {
            (0..input.numel()).collect()
        } else {
            let mut idx = sample(&mut rng, input.numel(), opts.max_checks_per_input).into_vec();
            idx.sort_unstable();
            idx
        };
        for i in indices {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[i], numeric, opts.floor));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

fn rand_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, rng).with_requires_grad(true)
}

type OpFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Finite-difference checks of every differentiable tape op on random
/// tensors no larger than `[2,4,8,8]`.
pub fn op_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    use crate::{Conv2dSpec, UpsampleMode};
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = rand_input(&[2, 4, 8, 8], &mut rng);
    let mut reports = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: OpFn<'_>| -> Result<()> {
        reports.push(check_gradients(name, &inputs, |t, v| f(t, v), opts)?);
        Ok(())
    };

    for (name, spec, w_shape) in [
        ("conv2d_3x3", Conv2dSpec::same3x3(), [3, 4, 3, 3]),
        ("conv2d_stride2", Conv2dSpec { stride: 2, padding: 1, groups: 1 }, [3, 4, 3, 3]),
        ("conv2d_1x1", Conv2dSpec::pointwise(), [5, 4, 1, 1]),
        ("conv2d_depthwise", Conv2dSpec::depthwise3x3(4), [4, 1, 3, 3]),
        ("conv2d_grouped", Conv2dSpec { stride: 1, padding: 1, groups: 2 }, [4, 2, 3, 3]),
    ] {
        let w = rand_input(&w_shape, &mut rng);
        let b = rand_input(&[w_shape[0]], &mut rng);
        run(name, vec![x.clone(), w, b], &move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            weighted_sum(t, y, 1)
        })?;
    }
    let gamma = rand_input(&[4], &mut rng);
    let beta = rand_input(&[4], &mut rng);
    run("batchnorm2d_train", vec![x.clone(), gamma.clone(), beta.clone()], &|t, v| {
        let (y, _) = t.batchnorm2d_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 2)
    })?;
    let running = crate::RunningStats {
        mean: vec![0.1, -0.2, 0.3, 0.0],
        var: vec![0.5, 1.5, 2.0, 1.0],
    };
    run("batchnorm2d_eval", vec![x.clone(), gamma, beta], &move |t, v| {
        let y = t.batchnorm2d_eval(v[0], v[1], v[2], &running, 1e-5)?;
        weighted_sum(t, y, 3)
    })?;
    run("relu", vec![x.clone()], &|t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 4)
    })?;
    run("sigmoid", vec![x.clone()], &|t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, 5)
    })?;
    run("maxpool2d", vec![x.clone()], &|t, v| {
        let y = t.maxpool2d(v[0])?;
        weighted_sum(t, y, 6)
    })?;
    run("global_avg_pool", vec![x.clone()], &|t, v| {
        let y = t.global_avg_pool(v[0])?;
        weighted_sum(t, y, 7)
    })?;
    let small = rand_input(&[2, 4, 4, 4], &mut rng);
    run("upsample_nearest", vec![small.clone()], &|t, v| {
        let y = t.upsample(v[0], 2, UpsampleMode::Nearest)?;
        weighted_sum(t, y, 8)
    })?;
    run("upsample_bilinear", vec![small.clone()], &|t, v| {
        let y = t.upsample(v[0], 2, UpsampleMode::Bilinear)?;
        weighted_sum(t, y, 9)
    })?;
    let other = rand_input(&[2, 2, 8, 8], &mut rng);
    run("concat", vec![x.clone(), other], &|t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        weighted_sum(t, y, 10)
    })?;
    run("narrow", vec![x.clone()], &|t, v| {
        let y = t.narrow(v[0], 1, 1, 2)?;
        weighted_sum(t, y, 15)
    })?;
    let x2 = rand_input(&[2, 4, 8, 8], &mut rng);
    run("add", vec![x.clone(), x2.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 11)
    })?;
    run("mul", vec![x.clone(), x2], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 12)
    })?;
    run("scale", vec![x.clone()], &|t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_sum(t, y, 13)
    })?;
    let gate = rand_input(&[2, 4, 1, 1], &mut rng);
    run("channel_scale", vec![x.clone(), gate], &|t, v| {
        let y = t.channel_scale(v[0], v[1])?;
        weighted_sum(t, y, 14)
    })?;
    run("mean", vec![x.clone()], &|t, v| Ok(t.mean(v[0])))?;
    let logits = Tensor::rand_uniform(vec![2, 2, 8, 8], -3.0, 3.0, &mut rng).with_requires_grad(true);
    let target = Tensor::from_vec(
        vec![2, 2, 8, 8],
        (0..256).map(|i| if (i * 7919) % 5 < 2 { 1.0 } else { 0.0 }).collect(),
    )?;
    for (name, gamma, alpha) in [("focal_loss", 2.0, 0.25), ("focal_loss_gamma0", 0.0, 0.5), ("focal_loss_gamma1.5", 1.5, 0.6)] {
        let target = target.clone();
        run(name, vec![logits.clone()], &move |t, v| t.focal_loss(v[0], &target, gamma, alpha))?;
    }
    Ok(reports)
}
