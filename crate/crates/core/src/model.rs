//! DPN-style encoder with a slim U-Net decoder and a hypercolumn head.
//!
//! Layout for an input of `H x W` (both multiples of 32):
//!
//! ```text
//! stem   3x3 conv+BN+ReLU                    stride 1
//! enc1.. maxpool + dual-path blocks (+SE)    strides 2, 4, 8, 16
//! center maxpool + 3x3 conv+BN+ReLU          stride 32
//! dec1.. up x2 + bottleneck(skip), 3x3 conv  strides 16, 8, 4, 2, 1
//! head   hypercolumn of all decoder outputs -> 2 logits
//! ```
//!
//! Parameters live in a flat [`ParamStore`]; layers hold indices into it so
//! the same graph code runs on trainable `f32` weights and on `f64` copies
//! during gradient checks.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use strokeseg_tensor::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, NamedTensor};
use strokeseg_tensor::{
    BatchNormMode, BatchStats, Conv2dSpec, OptimState, RunningStats, Scalar, Tape, Tensor, UpsampleMode, Var,
};

use crate::error::{invalid, io_err, Error, Result};

/// Spatial sizes must be multiples of this (five 2x poolings).
pub const SIZE_MULTIPLE: usize = 32;
pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Depthwise 3x3 over the hypercolumn, then a pointwise 1x1 to the outputs.
    DepthwiseSeparable,
    /// A single 1x1 convolution.
    Pointwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stage_blocks: Vec<usize>,
    pub residual_width: Vec<usize>,
    pub dense_growth: Vec<usize>,
    /// Width of the inner 1x1 and 3x3 convolutions of each dual-path block.
    pub path_width: Vec<usize>,
    pub decoder_channels: usize,
    pub use_se: bool,
    pub se_reduction: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub head: HeadKind,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_blocks: vec![1, 1, 1, 1],
            residual_width: vec![8, 16, 24, 32],
            dense_growth: vec![4, 8, 12, 16],
            path_width: vec![16, 32, 48, 64],
            decoder_channels: 16,
            use_se: false,
            se_reduction: 16,
            input_channels: 3,
            output_channels: 2,
            head: HeadKind::DepthwiseSeparable,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// All widths 8; small enough for end-to-end finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stage_blocks: vec![1, 1, 1, 1],
            residual_width: vec![8, 8, 8, 8],
            dense_growth: vec![4, 4, 4, 4],
            path_width: vec![8, 8, 8, 8],
            decoder_channels: 8,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_blocks.len();
        if n != 4 {
            return Err(invalid("model config", format!("expected 4 encoder stages, got {n}")));
        }
        for (name, v) in [
            ("residual_width", &self.residual_width),
            ("dense_growth", &self.dense_growth),
            ("path_width", &self.path_width),
        ] {
            if v.len() != n {
                return Err(invalid("model config", format!("{name} has {} entries for {n} stages", v.len())));
            }
        }
        if self.input_channels != 3 || self.output_channels != 2 {
            return Err(invalid("model config", "input_channels must be 3 and output_channels 2"));
        }
        if self.decoder_channels == 0 || self.stem_channels == 0 || self.se_reduction == 0 {
            return Err(invalid("model config", "decoder_channels, stem_channels and se_reduction must be >= 1"));
        }
        if self.stage_blocks.contains(&0) || self.residual_width.contains(&0) || self.path_width.contains(&0) {
            return Err(invalid("model config", "stage_blocks, residual_width and path_width must be >= 1"));
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return Err(invalid("model config", "bn_eps must be > 0 and bn_momentum in [0, 1]"));
        }
        let mut c = self.stem_channels;
        for s in 0..n {
            if c < self.residual_width[s] {
                return Err(invalid(
                    "model config",
                    format!("stage {} input has {c} channels, fewer than residual width {}", s + 1, self.residual_width[s]),
                ));
            }
            c += self.stage_blocks[s] * self.dense_growth[s];
        }
        Ok(())
    }

    /// Output channels of each encoder stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        let mut c = self.stem_channels;
        (0..self.num_stages())
            .map(|s| {
                c += self.stage_blocks[s] * self.dense_growth[s];
                c
            })
            .collect()
    }

    /// Number of decoder stages (one per skip, including the stem).
    pub fn decoder_stages(&self) -> usize {
        self.num_stages() + 1
    }
}

/// Flat, named parameter and running-statistic storage.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    running: Vec<RunningStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            bn_names: Vec::new(),
            running: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Kaiming-normal convolution weight, `std = sqrt(2 / fan_in)`.
    pub fn conv_weight(&mut self, name: String, shape: [usize; 4]) -> usize {
        let fan_in = shape[1] * shape[2] * shape[3];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut self.rng))).collect();
        self.push(name, Tensor::from_vec(shape, data).expect("shape matches data"))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape.to_vec(), T::from_f64_lossy(value)))
    }

    fn running_stats(&mut self, name: String, channels: usize) -> usize {
        self.bn_names.push(name);
        self.running.push(RunningStats::new(channels));
        self.running.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn running(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn running_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Registers every parameter on `tape`; gradients tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(trainable)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            bn_names: self.bn_names.clone(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

/// One forward evaluation: the tape, the bound parameters and the batch-norm mode.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: &'a [Var],
    running: &'a [RunningStats<T>],
    mode: BatchNormMode,
    eps: f64,
    /// Training-mode batch statistics keyed by running-stat index.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a [Var], store: &'a ParamStore<T>, mode: BatchNormMode, eps: f64) -> Self {
        assert_eq!(params.len(), store.tensors.len(), "bound parameter count");
        Self {
            tape,
            params,
            running: &store.running,
            mode,
            eps,
            batch_stats: Vec::new(),
        }
    }

    fn p(&self, i: usize) -> Var {
        self.params[i]
    }

    fn batchnorm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let (gamma, beta) = (self.p(bn.gamma), self.p(bn.beta));
        match self.mode {
            BatchNormMode::Train => {
                let (y, stats) = self.tape.batchnorm2d_train(x, gamma, beta, self.eps)?;
                self.batch_stats.push((bn.stats, stats));
                Ok(y)
            }
            BatchNormMode::Eval => Ok(self.tape.batchnorm2d_eval(x, gamma, beta, &self.running[bn.stats], self.eps)?),
        }
    }
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

impl BatchNorm {
    fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.constant(format!("{name}.gamma"), &[c], 1.0),
            beta: store.constant(format!("{name}.beta"), &[c], 0.0),
            stats: store.running_stats(name.to_string(), c),
        }
    }
}

/// Bias-free convolution followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    weight: usize,
    bn: BatchNorm,
    spec: Conv2dSpec,
}

impl ConvBnRelu {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            weight: store.conv_weight(format!("{name}.conv.weight"), [cout, cin, kernel, kernel]),
            bn: BatchNorm::build(store, &format!("{name}.bn"), cout),
            spec: Conv2dSpec {
                stride: 1,
                padding: kernel / 2,
                groups: 1,
            },
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = g.tape.conv2d(x, g.p(self.weight), None, self.spec)?;
        let y = g.batchnorm(y, &self.bn)?;
        Ok(g.tape.relu(y))
    }

    pub fn beta_index(&self) -> usize {
        self.bn.beta
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }
}

/// Dual-path block: the first `R` input channels form the residual path,
/// the rest the dense path. A 1x1-3x3-1x1 path produces `R + g` channels;
/// the first `R` are added to the residual part, the last `g` appended to
/// the dense part.
#[derive(Clone, Debug)]
pub struct DpnBlock {
    in_channels: usize,
    residual: usize,
    growth: usize,
    reduce: ConvBnRelu,
    grouped: ConvBnRelu,
    expand: ConvBnRelu,
}

impl DpnBlock {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        residual: usize,
        growth: usize,
        path: usize,
    ) -> Result<Self> {
        if in_channels < residual {
            return Err(invalid(
                "dpn block",
                format!("{in_channels} input channels cannot hold residual width {residual}"),
            ));
        }
        Ok(Self {
            in_channels,
            residual,
            growth,
            reduce: ConvBnRelu::build(store, &format!("{name}.reduce"), in_channels, path, 1),
            grouped: ConvBnRelu::build(store, &format!("{name}.conv3"), path, path, 3),
            expand: ConvBnRelu::build(store, &format!("{name}.expand"), path, residual + growth, 1),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.tape.shape(x)[1];
        if c != self.in_channels {
            return Err(invalid("dpn block", format!("expected {} input channels, got {c}", self.in_channels)));
        }
        let h = self.reduce.forward(g, x)?;
        let h = self.grouped.forward(g, h)?;
        let h = self.expand.forward(g, h)?;
        let r = self.residual;
        let path_res = g.tape.narrow(h, 1, 0, r)?;
        let path_dense = g.tape.narrow(h, 1, r, self.growth)?;
        let res = g.tape.narrow(x, 1, 0, r)?;
        let res = g.tape.add(res, path_res)?;
        let mut parts = vec![res];
        if c > r {
            parts.push(g.tape.narrow(x, 1, r, c - r)?);
        }
        if self.growth > 0 {
            parts.push(path_dense);
        }
        Ok(g.tape.concat(&parts, 1)?)
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct SeBlock {
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

impl SeBlock {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            fc1_w: store.conv_weight(format!("{name}.fc1.weight"), [hidden, channels, 1, 1]),
            fc1_b: store.constant(format!("{name}.fc1.bias"), &[hidden], 0.0),
            fc2_w: store.conv_weight(format!("{name}.fc2.weight"), [channels, hidden, 1, 1]),
            fc2_b: store.constant(format!("{name}.fc2.bias"), &[channels], 0.0),
        }
    }

    /// Indices of `(fc2.weight, fc2.bias)`, which set the gate directly.
    pub fn gate_indices(&self) -> (usize, usize) {
        (self.fc2_w, self.fc2_b)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let pw = Conv2dSpec::pointwise();
        let s = g.tape.global_avg_pool(x)?;
        let s = g.tape.conv2d(s, g.p(self.fc1_w), Some(g.p(self.fc1_b)), pw)?;
        let s = g.tape.relu(s);
        let s = g.tape.conv2d(s, g.p(self.fc2_w), Some(g.p(self.fc2_b)), pw)?;
        let s = g.tape.sigmoid(s);
        Ok(g.tape.channel_scale(x, s)?)
    }
}

/// One decoder step: `fuse(up2(d) + bottleneck(skip))`.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    bottleneck: ConvBnRelu,
    fuse: ConvBnRelu,
}

impl DecoderStage {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, skip_channels: usize, channels: usize) -> Self {
        Self {
            bottleneck: ConvBnRelu::build(store, &format!("{name}.bottleneck"), skip_channels, channels, 3),
            fuse: ConvBnRelu::build(store, &format!("{name}.fuse"), channels, channels, 3),
        }
    }

    pub fn layers(&self) -> [&ConvBnRelu; 2] {
        [&self.bottleneck, &self.fuse]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, d: Var, skip: Var) -> Result<Var> {
        let up = g.tape.upsample(d, 2, UpsampleMode::Nearest)?;
        let (us, ss) = (g.tape.shape(up), g.tape.shape(skip));
        if us[0] != ss[0] || us[2..] != ss[2..] {
            return Err(Error::DimMismatch {
                context: "decoder stage (upsampled vs skip)",
                lhs: us.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let b = self.bottleneck.forward(g, skip)?;
        let sum = g.tape.add(up, b)?;
        self.fuse.forward(g, sum)
    }
}

/// Stacks decoder outputs at full resolution and maps them to logits.
#[derive(Clone, Debug)]
pub struct HypercolumnHead {
    kind: HeadKind,
    dw_w: Option<usize>,
    dw_b: Option<usize>,
    pw_w: usize,
    pw_b: usize,
}

impl HypercolumnHead {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, outputs: usize, kind: HeadKind) -> Self {
        let (dw_w, dw_b) = match kind {
            HeadKind::DepthwiseSeparable => (
                Some(store.conv_weight(format!("{name}.depthwise.weight"), [channels, 1, 3, 3])),
                Some(store.constant(format!("{name}.depthwise.bias"), &[channels], 0.0)),
            ),
            HeadKind::Pointwise => (None, None),
        };
        Self {
            kind,
            dw_w,
            dw_b,
            pw_w: store.conv_weight(format!("{name}.pointwise.weight"), [outputs, channels, 1, 1]),
            pw_b: store.constant(format!("{name}.pointwise.bias"), &[outputs], 0.0),
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    /// Indices of the final `(weight, bias)` pair.
    pub fn pointwise_indices(&self) -> (usize, usize) {
        (self.pw_w, self.pw_b)
    }

    pub fn depthwise_indices(&self) -> Option<(usize, usize)> {
        self.dw_w.zip(self.dw_b)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, decoder_outputs: &[Var]) -> Result<Var> {
        let h = hypercolumn(g.tape, decoder_outputs)?;
        let h = match (self.dw_w, self.dw_b) {
            (Some(w), Some(b)) => {
                let c = g.tape.shape(h)[1];
                g.tape.conv2d(h, g.p(w), Some(g.p(b)), Conv2dSpec::depthwise3x3(c))?
            }
            _ => h,
        };
        Ok(g.tape.conv2d(h, g.p(self.pw_w), Some(g.p(self.pw_b)), Conv2dSpec::pointwise())?)
    }
}

/// Nearest-upsamples every tensor to the largest spatial size and concatenates channels.
pub fn hypercolumn<T: Scalar>(tape: &mut Tape<T>, outputs: &[Var]) -> Result<Var> {
    let Some(&first) = outputs.first() else {
        return Err(invalid("hypercolumn", "no decoder outputs"));
    };
    let n = tape.shape(first)[0];
    let (h, w) = outputs
        .iter()
        .map(|&v| (tape.shape(v)[2], tape.shape(v)[3]))
        .max()
        .expect("non-empty");
    let mut parts = Vec::with_capacity(outputs.len());
    for &v in outputs {
        let s = tape.shape(v).to_vec();
        if s.len() != 4 || s[0] != n {
            return Err(Error::DimMismatch {
                context: "hypercolumn batch size",
                lhs: tape.shape(first).to_vec(),
                rhs: s,
            });
        }
        let factor = h / s[2];
        if s[2] * factor != h || s[3] * factor != w {
            return Err(invalid("hypercolumn", format!("{s:?} is not an integer downscale of {h}x{w}")));
        }
        parts.push(if factor == 1 { v } else { tape.upsample(v, factor, UpsampleMode::Nearest)? });
    }
    Ok(tape.concat(&parts, 1)?)
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<DpnBlock>,
    se: Option<SeBlock>,
}

/// Saved next to the checkpoint blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub init_seed: u64,
}

#[derive(Clone, Debug)]
pub struct SegModel<T: Scalar = f32> {
    config: ModelConfig,
    init_seed: u64,
    store: ParamStore<T>,
    stem: ConvBnRelu,
    stages: Vec<Stage>,
    center: ConvBnRelu,
    decoder: Vec<DecoderStage>,
    head: HypercolumnHead,
}

/// Result of a forward pass on a tape.
pub struct ForwardPass<T> {
    pub logits: Var,
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(init_seed);
        let stem = ConvBnRelu::build(&mut store, "stem", config.input_channels, config.stem_channels, 3);
        let mut c = config.stem_channels;
        let mut skips = vec![c];
        let mut stages = Vec::new();
        for s in 0..config.num_stages() {
            let mut blocks = Vec::new();
            for b in 0..config.stage_blocks[s] {
                let block = DpnBlock::build(
                    &mut store,
                    &format!("enc{}.block{b}", s + 1),
                    c,
                    config.residual_width[s],
                    config.dense_growth[s],
                    config.path_width[s],
                )?;
                c = block.out_channels();
                blocks.push(block);
            }
            let se = config
                .use_se
                .then(|| SeBlock::build(&mut store, &format!("enc{}.se", s + 1), c, config.se_reduction));
            stages.push(Stage { blocks, se });
            skips.push(c);
        }
        let dc = config.decoder_channels;
        let center = ConvBnRelu::build(&mut store, "center", c, dc, 3);
        let decoder = skips
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &sc)| DecoderStage::build(&mut store, &format!("dec{}", i + 1), sc, dc))
            .collect::<Vec<_>>();
        let head = HypercolumnHead::build(&mut store, "head", dc * decoder.len(), config.output_channels, config.head);
        Ok(Self {
            config,
            init_seed,
            store,
            stem,
            stages,
            center,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn head(&self) -> &HypercolumnHead {
        &self.head
    }

    pub fn decoder_stages(&self) -> &[DecoderStage] {
        &self.decoder
    }

    pub fn param_count(&self) -> usize {
        self.store.tensors.iter().map(Tensor::numel).sum()
    }

    fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.store
            .names
            .iter()
            .zip(&self.store.tensors)
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Stem and encoder stages, including SE blocks.
    pub fn encoder_param_count(&self) -> usize {
        self.count_where(|n| n.starts_with("stem.") || n.starts_with("enc"))
    }

    /// Center, decoder stages and head.
    pub fn decoder_param_count(&self) -> usize {
        self.param_count() - self.encoder_param_count()
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            init_seed: self.init_seed,
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            center: self.center.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    /// Checks `[N, 1, H, W]` with `H, W` multiples of 32.
    pub fn check_input(shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(invalid("forward", format!("expected [N, 1, H, W], got {shape:?}")));
        };
        if c != 1 {
            return Err(invalid("forward", format!("expected 1 input channel, got {c}")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            let pad = |v: usize| v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE - v;
            return Err(invalid(
                "forward",
                format!(
                    "spatial size {h}x{w} must be a multiple of {SIZE_MULTIPLE}; pad by {} rows and {} columns",
                    pad(h),
                    pad(w)
                ),
            ));
        }
        Ok(())
    }

    /// Builds the graph on `g` and returns the logits `[N, 2, H, W]`.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, input: Var) -> Result<Var> {
        Self::check_input(g.tape.shape(input))?;
        let x = g.tape.concat(&vec![input; self.config.input_channels], 1)?;
        let mut h = self.stem.forward(g, x)?;
        let mut skips = vec![h];
        for stage in &self.stages {
            h = g.tape.maxpool2d(h)?;
            for block in &stage.blocks {
                h = block.forward(g, h)?;
            }
            if let Some(se) = &stage.se {
                h = se.forward(g, h)?;
            }
            skips.push(h);
        }
        let pooled = g.tape.maxpool2d(h)?;
        let mut d = self.center.forward(g, pooled)?;
        let mut outputs = Vec::with_capacity(self.decoder.len());
        for (stage, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            d = stage.forward(g, d, skip)?;
            outputs.push(d);
        }
        self.head.forward(g, &outputs)
    }

    /// Forward pass with externally bound parameters.
    pub fn forward_on(&self, tape: &mut Tape<T>, params: &[Var], input: Var, mode: BatchNormMode) -> Result<ForwardPass<T>> {
        let mut g = Graph::new(tape, params, &self.store, mode, self.config.bn_eps);
        let logits = self.forward_graph(&mut g, input)?;
        Ok(ForwardPass {
            logits,
            batch_stats: g.batch_stats,
        })
    }

    /// Inference: per-class sigmoid probabilities `[N, 2, H, W]` using running statistics.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_input(batch.shape())?;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false);
        let input = tape.leaf(batch.clone().with_requires_grad(false));
        let pass = self.forward_on(&mut tape, &params, input, BatchNormMode::Eval)?;
        let probs = tape.sigmoid(pass.logits);
        // large logits round to exactly 0 or 1; keep probabilities strictly inside (0, 1)
        let (lo, hi) = (T::min_positive_value(), T::one() - T::epsilon() / T::from_f64_lossy(2.0));
        Ok(tape.value(probs).map(|p| p.max(lo).min(hi)))
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let momentum = T::from_f64_lossy(self.config.bn_momentum);
        for (i, s) in stats {
            self.store.running[*i].update(s, momentum);
        }
    }
}

impl SegModel<f32> {
    /// Writes `model.json` plus checkpoint blobs (parameters, running stats,
    /// and optimizer accumulators when given).
    pub fn save(&self, dir: &Path, optim: Option<&OptimState<f32>>) -> Result<CheckpointManifest> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if let Some(o) = optim {
            if o.v.len() != self.store.tensors.len() {
                return Err(invalid("save model", "optimizer state does not match the parameter list"));
            }
        }
        let running: Vec<(String, Tensor<f32>)> = self
            .store
            .bn_names
            .iter()
            .zip(&self.store.running)
            .flat_map(|(n, r)| {
                let c = r.mean.len();
                [
                    (format!("{n}.running_mean"), Tensor::from_vec([c], r.mean.clone()).expect("1-d")),
                    (format!("{n}.running_var"), Tensor::from_vec([c], r.var.clone()).expect("1-d")),
                ]
            })
            .collect();
        let mut named: Vec<NamedTensor<'_>> = self
            .store
            .names
            .iter()
            .zip(&self.store.tensors)
            .enumerate()
            .map(|(i, (name, tensor))| NamedTensor {
                name,
                tensor,
                optimizer_state: optim.map(|o| o.v[i].as_slice()),
            })
            .collect();
        named.extend(running.iter().map(|(name, tensor)| NamedTensor {
            name,
            tensor,
            optimizer_state: None,
        }));
        let (step, lr) = optim.map_or((0, 0.0), |o| (o.step, o.learning_rate));
        let manifest = save_checkpoint(dir, &named, step, lr)?;
        let file = ModelFile {
            config: self.config.clone(),
            init_seed: self.init_seed,
        };
        let path = dir.join(MODEL_FILE);
        fs::write(&path, serde_json::to_string_pretty(&file)? + "\n").map_err(io_err(&path))?;
        Ok(manifest)
    }

    /// Loads a model directory. The optimizer state is returned when every
    /// parameter has one stored.
    pub fn load(dir: &Path) -> Result<(Self, Option<OptimState<f32>>)> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        let mut model = Self::new(file.config, file.init_seed)?;
        let (manifest, tensors) = load_checkpoint(dir)?;
        let mut v: Vec<Option<Vec<f32>>> = vec![None; model.store.tensors.len()];
        let mut seen = vec![false; model.store.tensors.len()];
        for t in tensors {
            if let Some(i) = model.store.index_of(&t.name) {
                if t.tensor.shape() != model.store.tensors[i].shape() {
                    return Err(Error::DimMismatch {
                        context: "checkpoint tensor",
                        lhs: model.store.tensors[i].shape().to_vec(),
                        rhs: t.tensor.shape().to_vec(),
                    });
                }
                model.store.tensors[i] = t.tensor;
                v[i] = t.optimizer_state;
                seen[i] = true;
                continue;
            }
            let stat = t
                .name
                .strip_suffix(".running_mean")
                .map(|n| (n, true))
                .or_else(|| t.name.strip_suffix(".running_var").map(|n| (n, false)));
            let Some((bn, is_mean)) = stat else {
                return Err(invalid("load model", format!("unknown tensor {:?}", t.name)));
            };
            let Some(j) = model.store.bn_names.iter().position(|n| n == bn) else {
                return Err(invalid("load model", format!("unknown batch-norm layer {bn:?}")));
            };
            let r = &mut model.store.running[j];
            let dst = if is_mean { &mut r.mean } else { &mut r.var };
            if dst.len() != t.tensor.numel() {
                return Err(invalid("load model", format!("{} has {} values", t.name, t.tensor.numel())));
            }
            dst.copy_from_slice(t.tensor.data());
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(invalid("load model", format!("missing tensor {:?}", model.store.names[i])));
        }
        let optim = v.iter().all(Option::is_some).then(|| OptimState {
            v: v.into_iter().map(Option::unwrap).collect(),
            step: manifest.step,
            learning_rate: manifest.learning_rate,
        });
        Ok((model, optim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stage_channels() {
        assert_eq!(ModelConfig::default().stage_channels(), vec![20, 28, 40, 56]);
        assert_eq!(ModelConfig::tiny().stage_channels(), vec![12, 16, 20, 24]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            stage_blocks: vec![1, 1, 1],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            output_channels: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            stem_channels: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("residual width"));
    }

    #[test]
    fn padding_hint() {
        let err = SegModel::<f32>::check_input(&[1, 1, 60, 64]).unwrap_err().to_string();
        assert!(err.contains("pad by 4 rows and 0 columns"), "{err}");
        assert!(SegModel::<f32>::check_input(&[1, 3, 64, 64]).is_err());
        assert!(SegModel::<f32>::check_input(&[2, 1, 32, 96]).is_ok());
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let mut v = serde_json::to_value(ModelConfig::default()).unwrap();
        let back: ModelConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, ModelConfig::default());
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
