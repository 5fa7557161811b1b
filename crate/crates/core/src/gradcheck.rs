//! Finite-difference checks of the composed network blocks and the tiny
//! model, run in f64 on small random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeseg_tensor::gradcheck::{check_gradients, weighted_sum, GradCheckOptions, GradCheckReport};
use strokeseg_tensor::{BatchNormMode, Tensor, TensorError, Var};

use crate::model::{DecoderStage, DpnBlock, Graph, ModelConfig, ParamStore, SeBlock, SegModel};
use crate::Result;

/// Relative error bound every check must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Moves batch-norm affine parameters and running statistics off their
/// initial values so eval-mode activations do not sit on ReLU kinks.
pub fn randomize_batch_norm(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = store.names().to_vec();
    for (name, t) in names.iter().zip(store.tensors_mut()) {
        if name.ends_with(".beta") {
            *t = Tensor::rand_uniform(t.shape().to_vec(), -0.5, 0.5, &mut rng);
        } else if name.ends_with(".gamma") {
            *t = Tensor::rand_uniform(t.shape().to_vec(), 0.5, 1.5, &mut rng);
        }
    }
    for r in store.running_mut() {
        let c = r.mean.len();
        r.mean = Tensor::<f64>::rand_uniform(vec![c], -0.5, 0.5, &mut rng).into_data();
        r.var = Tensor::<f64>::rand_uniform(vec![c], 0.5, 2.0, &mut rng).into_data();
    }
}

fn as_tensor_error(op: &'static str) -> impl Fn(crate::Error) -> TensorError {
    move |e| TensorError::InvalidArgument { op, msg: e.to_string() }
}

fn mode_name(mode: BatchNormMode) -> &'static str {
    match mode {
        BatchNormMode::Train => "train",
        BatchNormMode::Eval => "eval",
    }
}

/// Checks a layer with its inputs and every parameter in `store` as
/// differentiable leaves.
fn check_layer(
    name: String,
    store: &ParamStore<f64>,
    extra: &[Tensor<f64>],
    mode: BatchNormMode,
    opts: GradCheckOptions,
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let n_extra = extra.len();
    let mut inputs: Vec<Tensor<f64>> = extra.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    inputs.extend(store.tensors().iter().map(|t| t.clone().with_requires_grad(true)));
    let report = check_gradients(
        &name,
        &inputs,
        |tape, vars| {
            let mut g = Graph::new(tape, &vars[n_extra..], store, mode, 1e-5);
            let out = f(&mut g, &vars[..n_extra]).map_err(as_tensor_error("layer"))?;
            weighted_sum(tape, out, 3)
        },
        opts,
    )?;
    Ok(report)
}

/// DPN block, SE block and decoder stage in both batch-norm modes, plus the
/// tiny model end to end on a 32x32 input.
pub fn model_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let modes = [BatchNormMode::Train, BatchNormMode::Eval];

    let mut store = ParamStore::<f64>::new(3);
    let block = DpnBlock::build(&mut store, "b", 6, 4, 2, 4)?;
    randomize_batch_norm(&mut store, 1);
    let x = rand_tensor(&[2, 6, 6, 6], 4);
    for mode in modes {
        let name = format!("dpn_block/{}", mode_name(mode));
        reports.push(check_layer(name, &store, std::slice::from_ref(&x), mode, opts, |g, v| block.forward(g, v[0]))?);
    }

    let mut store = ParamStore::<f64>::new(7);
    let se = SeBlock::build(&mut store, "se", 6, 2);
    let x = rand_tensor(&[2, 6, 4, 4], 8);
    reports.push(check_layer("se_block".into(), &store, &[x], BatchNormMode::Eval, opts, |g, v| {
        se.forward(g, v[0])
    })?);

    let mut store = ParamStore::<f64>::new(11);
    let stage = DecoderStage::build(&mut store, "dec", 5, 4);
    randomize_batch_norm(&mut store, 2);
    let inputs = [rand_tensor(&[2, 4, 3, 3], 1), rand_tensor(&[2, 5, 6, 6], 2)];
    for mode in modes {
        let name = format!("decoder_stage/{}", mode_name(mode));
        reports.push(check_layer(name, &store, &inputs, mode, opts, |g, v| stage.forward(g, v[0], v[1]))?);
    }

    let mut model = SegModel::<f64>::new(ModelConfig::tiny(), 31)?;
    randomize_batch_norm(model.store_mut(), 3);
    let mut inputs = vec![rand_tensor(&[2, 1, 32, 32], 32)];
    inputs.extend(model.store().tensors().iter().map(|t| t.clone().with_requires_grad(true)));
    // The model has many parameter tensors, so sample fewer entries of each.
    let model_opts = GradCheckOptions {
        max_checks_per_input: opts.max_checks_per_input.min(3),
        ..opts
    };
    for mode in modes {
        let report = check_gradients(
            &format!("tiny_model/{}", mode_name(mode)),
            &inputs,
            |tape, vars| {
                let pass = model
                    .forward_on(tape, &vars[1..], vars[0], mode)
                    .map_err(as_tensor_error("model"))?;
                weighted_sum(tape, pass.logits, 5)
            },
            model_opts,
        )?;
        reports.push(report);
    }
    Ok(reports)
}
