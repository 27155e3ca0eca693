//! The forecaster: per-window instance normalization, a depth-`M` residual
//! mixer stack applied `N` times with one shared parameter set, external
//! attention over learnable slots, and a linear readout along time followed
//! by the inverse instance map.
//!
//! Every operation accepts a leading batch axis; a rank-2 `[L, C]` input is
//! treated as a batch of one.

mod checkpoint;

pub use checkpoint::Checkpoint;

use crate::error::{Error, Result};
use crate::tensor::{Activation, BatchMoments, NormMode, Rng, Tape, Tensor, Var};

pub const INSTANCE_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const MAX_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    Layer,
    Batch,
}

impl NormKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "layer" | "layernorm" => Some(NormKind::Layer),
            "batch" | "batchnorm" => Some(NormKind::Batch),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Layer => "layer",
            NormKind::Batch => "batch",
        }
    }
}

pub fn parse_activation(s: &str) -> Option<Activation> {
    match s.trim().to_ascii_lowercase().as_str() {
        "relu" => Some(Activation::Relu),
        "gelu" => Some(Activation::Gelu),
        _ => None,
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    }
}

/// Structural hyperparameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Channels that are forecast, in output order.
    pub target_channels: Vec<usize>,
    /// Outer refinement rounds `N`.
    pub rounds: usize,
    /// Residual blocks per round `M`.
    pub blocks: usize,
    /// External attention slots `S`.
    pub slots: usize,
    /// Feature-mixing hidden width `d_h`.
    pub hidden: usize,
    pub norm: NormKind,
    pub activation: Activation,
    pub dropout: f64,
}

impl ModelConfig {
    /// Multivariate-to-multivariate config with every channel forecast.
    pub fn new(lookback: usize, horizon: usize, channels: usize) -> Self {
        Self {
            lookback,
            horizon,
            channels,
            target_channels: (0..channels).collect(),
            rounds: 2,
            blocks: 2,
            slots: 16,
            hidden: 64,
            norm: NormKind::Layer,
            activation: Activation::Relu,
            dropout: 0.0,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.target_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.lookback", self.lookback),
            ("data.horizon", self.horizon),
            ("model.channels", self.channels),
            ("model.rounds", self.rounds),
            ("model.blocks", self.blocks),
            ("model.slots", self.slots),
            ("model.hidden", self.hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.target_channels.is_empty()
            || self.target_channels.iter().any(|&c| c >= self.channels)
        {
            return Err(Error::config(
                "data.target_channels",
                format!("must be a non-empty subset of 0..{}", self.channels),
            ));
        }
        let mut seen = self.target_channels.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.target_channels.len() {
            return Err(Error::config("data.target_channels", "contains duplicates"));
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout) {
            return Err(Error::config(
                "model.dropout_rate",
                format!("must lie in [0, {MAX_DROPOUT}], got {}", self.dropout),
            ));
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars:
    ///
    /// `2C + M·(L² + L + 2·C·d_h + d_h + C + 4C) + 2·S·C + T·L + T`
    ///
    /// Layer and batch normalization both carry one `γ, β` pair of length
    /// `C`, so the count does not depend on the norm kind. `N` never appears.
    /// `(field, value)` pairs in a fixed order; the text form used by
    /// checkpoints, manifests and config hashes.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let targets: Vec<String> = self.target_channels.iter().map(usize::to_string).collect();
        vec![
            ("lookback", self.lookback.to_string()),
            ("horizon", self.horizon.to_string()),
            ("channels", self.channels.to_string()),
            ("target_channels", targets.join(" ")),
            ("rounds", self.rounds.to_string()),
            ("blocks", self.blocks.to_string()),
            ("slots", self.slots.to_string()),
            ("hidden", self.hidden.to_string()),
            ("norm", self.norm.as_str().to_string()),
            ("activation", activation_name(self.activation).to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        let (l, c, t, s, h, m) = (
            self.lookback,
            self.channels,
            self.horizon,
            self.slots,
            self.hidden,
            self.blocks,
        );
        let block = l * l + l + 2 * c * h + h + c + 4 * c;
        2 * c + m * block + 2 * s * c + t * l + t
    }
}

/// Running per-channel statistics for batch normalization at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    fn absorb(&mut self, m: &BatchMoments, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&m.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&m.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Learnable parameters of one residual mixer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `W_t`, `[L, L]`.
    pub time_weight: Tensor,
    /// `b_t` as an `[L, 1]` column, broadcast across channels.
    pub time_bias: Tensor,
    /// `W_f1`, `[C, d_h]`.
    pub feat_weight1: Tensor,
    pub feat_bias1: Tensor,
    /// `W_f2`, `[d_h, C]`.
    pub feat_weight2: Tensor,
    pub feat_bias2: Tensor,
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub norm1_running: RunningStats,
    pub norm2_running: RunningStats,
}

/// All learnable state of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub instance_gamma: Tensor,
    pub instance_beta: Tensor,
    pub blocks: Vec<BlockParams>,
    /// `E`, `[S, C]`.
    pub slot_keys: Tensor,
    /// `V`, `[S, C]`.
    pub slot_values: Tensor,
    /// `W_p`, `[T, L]`.
    pub head_weight: Tensor,
    /// `b_p` as a `[T, 1]` column, broadcast across channels.
    pub head_bias: Tensor,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl ModelParams {
    /// Fresh parameters: linear maps uniform in `±1/√fan_in`, slots from
    /// `N(0, 0.02²)`, normalization affines at `γ = 1, β = 0`.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (l, c, t, s, h) = (
            config.lookback,
            config.channels,
            config.horizon,
            config.slots,
            config.hidden,
        );
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                time_weight: uniform_tensor(&[l, l], lin(l), rng),
                time_bias: uniform_tensor(&[l, 1], lin(l), rng),
                feat_weight1: uniform_tensor(&[c, h], lin(c), rng),
                feat_bias1: uniform_tensor(&[h], lin(c), rng),
                feat_weight2: uniform_tensor(&[h, c], lin(h), rng),
                feat_bias2: uniform_tensor(&[c], lin(h), rng),
                norm1_gamma: Tensor::full(&[c], 1.0),
                norm1_beta: Tensor::zeros(&[c]),
                norm2_gamma: Tensor::full(&[c], 1.0),
                norm2_beta: Tensor::zeros(&[c]),
                norm1_running: RunningStats::new(c),
                norm2_running: RunningStats::new(c),
            })
            .collect();
        let normal = |rng: &mut Rng| {
            let data = (0..s * c).map(|_| 0.02 * rng.normal()).collect();
            Tensor::new(vec![s, c], data).expect("slot shape")
        };
        let slot_keys = normal(rng);
        let slot_values = normal(rng);
        Ok(Self {
            config: config.clone(),
            instance_gamma: Tensor::full(&[c], 1.0),
            instance_beta: Tensor::zeros(&[c]),
            blocks,
            slot_keys,
            slot_values,
            head_weight: uniform_tensor(&[t, l], lin(l), rng),
            head_bias: uniform_tensor(&[t, 1], lin(l), rng),
        })
    }

    /// Learnable tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("instance.gamma".to_string(), &self.instance_gamma),
            ("instance.beta".to_string(), &self.instance_beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in block_fields(b) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("slots.keys".into(), &self.slot_keys));
        out.push(("slots.values".into(), &self.slot_values));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.instance_gamma, &mut self.instance_beta];
        for b in &mut self.blocks {
            out.extend([
                &mut b.time_weight,
                &mut b.time_bias,
                &mut b.feat_weight1,
                &mut b.feat_bias1,
                &mut b.feat_weight2,
                &mut b.feat_bias2,
                &mut b.norm1_gamma,
                &mut b.norm1_beta,
                &mut b.norm2_gamma,
                &mut b.norm2_beta,
            ]);
        }
        out.extend([
            &mut self.slot_keys,
            &mut self.slot_values,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    /// Scalar learnables actually stored.
    pub fn count_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor against the shapes the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        let (l, c, t, s, h) = (cfg.lookback, cfg.channels, cfg.horizon, cfg.slots, cfg.hidden);
        if self.blocks.len() != cfg.blocks {
            return Err(Error::contract(format!(
                "config says {} blocks, params hold {}",
                cfg.blocks,
                self.blocks.len()
            )));
        }
        let mut expected: Vec<Vec<usize>> = vec![vec![c], vec![c]];
        for _ in 0..cfg.blocks {
            expected.extend([
                vec![l, l],
                vec![l, 1],
                vec![c, h],
                vec![h],
                vec![h, c],
                vec![c],
                vec![c],
                vec![c],
                vec![c],
                vec![c],
            ]);
        }
        expected.extend([vec![s, c], vec![s, c], vec![t, l], vec![t, 1]]);
        for ((name, tensor), shape) in self.tensors().iter().zip(&expected) {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
        }
        for b in &self.blocks {
            for r in [&b.norm1_running, &b.norm2_running] {
                if r.mean.len() != c || r.var.len() != c {
                    return Err(Error::contract("running statistics width mismatch"));
                }
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, tracked for gradients when
    /// `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| {
            if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let instance_gamma = leaf(&self.instance_gamma);
        let instance_beta = leaf(&self.instance_beta);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                time_weight: leaf(&b.time_weight),
                time_bias: leaf(&b.time_bias),
                feat_weight1: leaf(&b.feat_weight1),
                feat_bias1: leaf(&b.feat_bias1),
                feat_weight2: leaf(&b.feat_weight2),
                feat_bias2: leaf(&b.feat_bias2),
                norm1_gamma: leaf(&b.norm1_gamma),
                norm1_beta: leaf(&b.norm1_beta),
                norm2_gamma: leaf(&b.norm2_gamma),
                norm2_beta: leaf(&b.norm2_beta),
                norm1_running: b.norm1_running.clone(),
                norm2_running: b.norm2_running.clone(),
            })
            .collect();
        BoundParams {
            instance_gamma,
            instance_beta,
            blocks,
            slot_keys: leaf(&self.slot_keys),
            slot_values: leaf(&self.slot_values),
            head_weight: leaf(&self.head_weight),
            head_bias: leaf(&self.head_bias),
        }
    }

    /// Full forward pass on `x` (`[L, C]` or `[B, L, C]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        training: bool,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let x3 = as_batch(x, cfg)?;
        let mut ctx = StageContext {
            config: cfg,
            training,
            rng,
            moments: Vec::new(),
        };
        let (h0, stats) = instance_normalize(tape, &x3, bound.instance_gamma, bound.instance_beta)?;
        let hn = iterative_refine(tape, h0, &bound.blocks, cfg.rounds, &mut ctx)?;
        let z = external_attention(tape, hn, bound.slot_keys, bound.slot_values)?;
        let y = temporal_readout(tape, z, bound, &stats, cfg)?;
        let moments = ctx.moments;
        let output = y;
        Ok(ForwardPass { output, moments })
    }

    /// Inference-mode prediction without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut rng = Rng::seed_from(0);
        let pass = self.forward(&mut tape, &bound, x, false, &mut rng)?;
        let y = tape.value(pass.output).clone();
        if x.rank() == 2 {
            let shape = y.shape()[1..].to_vec();
            return y.reshape(shape);
        }
        Ok(y)
    }

    /// Folds batch statistics seen during a training forward into the
    /// running averages, in the order they were observed.
    pub fn absorb_moments(&mut self, moments: &[BlockMoments]) {
        for m in moments {
            let block = &mut self.blocks[m.block];
            let target = if m.second {
                &mut block.norm2_running
            } else {
                &mut block.norm1_running
            };
            target.absorb(&m.moments, BATCH_NORM_MOMENTUM);
        }
    }
}

fn block_fields(b: &BlockParams) -> [(&'static str, &Tensor); 10] {
    [
        ("time.weight", &b.time_weight),
        ("time.bias", &b.time_bias),
        ("feat.weight1", &b.feat_weight1),
        ("feat.bias1", &b.feat_bias1),
        ("feat.weight2", &b.feat_weight2),
        ("feat.bias2", &b.feat_bias2),
        ("norm1.gamma", &b.norm1_gamma),
        ("norm1.beta", &b.norm1_beta),
        ("norm2.gamma", &b.norm2_gamma),
        ("norm2.beta", &b.norm2_beta),
    ]
}

fn as_batch(x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let want = [cfg.lookback, cfg.channels];
    match x.shape() {
        [l, c] if [*l, *c] == want => x.clone().reshape(vec![1, *l, *c]),
        [_, l, c] if [*l, *c] == want => Ok(x.clone()),
        other => Err(Error::Dimension {
            op: "forward input",
            lhs: other.to_vec(),
            rhs: want.to_vec(),
        }),
    }
}

/// Tape handles for one model's parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub instance_gamma: Var,
    pub instance_beta: Var,
    pub blocks: Vec<BoundBlock>,
    pub slot_keys: Var,
    pub slot_values: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BoundParams {
    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.instance_gamma, self.instance_beta];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out.extend([self.slot_keys, self.slot_values, self.head_weight, self.head_bias]);
        out
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub time_weight: Var,
    pub time_bias: Var,
    pub feat_weight1: Var,
    pub feat_bias1: Var,
    pub feat_weight2: Var,
    pub feat_bias2: Var,
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub norm1_running: RunningStats,
    pub norm2_running: RunningStats,
}

impl BoundBlock {
    pub fn vars(&self) -> [Var; 10] {
        [
            self.time_weight,
            self.time_bias,
            self.feat_weight1,
            self.feat_bias1,
            self.feat_weight2,
            self.feat_bias2,
            self.norm1_gamma,
            self.norm1_beta,
            self.norm2_gamma,
            self.norm2_beta,
        ]
    }
}

/// Batch-norm moments observed at one application of one block's norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMoments {
    pub block: usize,
    /// `false` for the time-mixing norm, `true` for the feature-mixing norm.
    pub second: bool,
    pub moments: BatchMoments,
}

#[derive(Debug)]
pub struct ForwardPass {
    /// `[B, T, C_out]`; an unbatched input counts as `B = 1`.
    pub output: Var,
    pub moments: Vec<BlockMoments>,
}

/// Mutable state threaded through the mixer stages of one forward pass.
pub struct StageContext<'a> {
    pub config: &'a ModelConfig,
    pub training: bool,
    pub rng: &'a mut Rng,
    pub moments: Vec<BlockMoments>,
}

/// Per-window, per-channel statistics captured by the instance map.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    /// `[B, 1, C]`
    pub mean: Tensor,
    /// `[B, 1, C]`, each entry at least [`INSTANCE_EPS`].
    pub std: Tensor,
}

impl InstanceStats {
    fn select(&self, channels: &[usize]) -> InstanceStats {
        let c = *self.mean.shape().last().unwrap();
        let b = self.mean.shape()[0];
        let pick = |t: &Tensor| {
            let data = t
                .data()
                .chunks(c)
                .flat_map(|row| channels.iter().map(move |&i| row[i]))
                .collect();
            Tensor::new(vec![b, 1, channels.len()], data).expect("selected stats shape")
        };
        InstanceStats {
            mean: pick(&self.mean),
            std: pick(&self.std),
        }
    }
}

/// `H0[:, c] = γ_c · (X[:, c] − μ_c) / s_c + β_c` over each window's time axis.
///
/// `s_c` is the population standard deviation, clamped below at
/// [`INSTANCE_EPS`].
pub fn instance_normalize(
    tape: &mut Tape,
    x: &Tensor,
    gamma: Var,
    beta: Var,
) -> Result<(Var, InstanceStats)> {
    let [b, l, c] = <[usize; 3]>::try_from(x.shape())
        .map_err(|_| Error::contract("instance_normalize expects [B, L, C]"))?;
    let data = x.data();
    let mut mean = vec![0.0; b * c];
    let mut std = vec![0.0; b * c];
    let mut normalized = vec![0.0; data.len()];
    for bi in 0..b {
        let window = &data[bi * l * c..(bi + 1) * l * c];
        for ch in 0..c {
            let mu = (0..l).map(|t| window[t * c + ch]).sum::<f64>() / l as f64;
            let var = (0..l).map(|t| (window[t * c + ch] - mu).powi(2)).sum::<f64>() / l as f64;
            let s = var.sqrt().max(INSTANCE_EPS);
            mean[bi * c + ch] = mu;
            std[bi * c + ch] = s;
            for t in 0..l {
                let i = bi * l * c + t * c + ch;
                normalized[i] = (data[i] - mu) / s;
            }
        }
    }
    let stats = InstanceStats {
        mean: Tensor::new(vec![b, 1, c], mean)?,
        std: Tensor::new(vec![b, 1, c], std)?,
    };
    let xn = tape.constant(Tensor::new(vec![b, l, c], normalized)?);
    let scaled = tape.mul(xn, gamma)?;
    Ok((tape.add(scaled, beta)?, stats))
}

/// `Φ⁻¹`: `(Y − β) / γ · s + μ`, with `γ, β` and the stats already
/// restricted to the channels of `y`.
pub fn instance_denormalize(
    tape: &mut Tape,
    y: Var,
    gamma: Var,
    beta: Var,
    stats: &InstanceStats,
) -> Result<Var> {
    let shifted = tape.sub(y, beta)?;
    let unscaled = tape.div(shifted, gamma)?;
    let s = tape.constant(stats.std.clone());
    let mu = tape.constant(stats.mean.clone());
    let rescaled = tape.mul(unscaled, s)?;
    tape.add(rescaled, mu)
}

#[allow(clippy::too_many_arguments)]
fn normalize(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats,
    ctx: &mut StageContext<'_>,
    block: usize,
    second: bool,
) -> Result<Var> {
    match ctx.config.norm {
        NormKind::Layer => tape.layer_norm(x, gamma, beta, NORM_EPS),
        NormKind::Batch => {
            let mode = if ctx.training {
                NormMode::FromInput
            } else {
                NormMode::Frozen {
                    mean: running.mean.clone(),
                    var: running.var.clone(),
                }
            };
            let (y, moments) = tape.batch_norm(x, gamma, beta, NORM_EPS, mode)?;
            if let Some(moments) = moments {
                ctx.moments.push(BlockMoments {
                    block,
                    second,
                    moments,
                });
            }
            Ok(y)
        }
    }
}

/// One residual block: time mixing then feature mixing, each with a
/// pre-norm and a residual add.
///
/// ```text
/// S = Norm1(G);  T = G + Drop(σ(W_t·S + b_t))
/// Q = Norm2(T);  G' = T + Drop(σ(Q·W_f1 + b_f1)·W_f2 + b_f2)
/// ```
pub fn residual_mixer_block(
    tape: &mut Tape,
    g: Var,
    block: &BoundBlock,
    index: usize,
    ctx: &mut StageContext<'_>,
) -> Result<Var> {
    let cfg = ctx.config;
    let shape = tape.shape(g).to_vec();
    if shape.len() != 3 || shape[1] != cfg.lookback || shape[2] != cfg.channels {
        return Err(Error::contract(format!(
            "mixer block input {shape:?} does not match L={}, C={}",
            cfg.lookback, cfg.channels
        )));
    }
    if tape.shape(block.time_weight) != [cfg.lookback, cfg.lookback]
        || tape.shape(block.feat_weight1) != [cfg.channels, cfg.hidden]
    {
        return Err(Error::contract("mixer block parameters do not match the config"));
    }
    let p = cfg.dropout;

    let s = normalize(
        tape,
        g,
        block.norm1_gamma,
        block.norm1_beta,
        &block.norm1_running,
        ctx,
        index,
        false,
    )?;
    let mixed = tape.matmul(block.time_weight, s)?;
    let mixed = tape.add(mixed, block.time_bias)?;
    let act = tape.activation(mixed, cfg.activation);
    let r_t = tape.dropout(act, p, ctx.training, ctx.rng)?;
    let t = tape.add(g, r_t)?;

    let q = normalize(
        tape,
        t,
        block.norm2_gamma,
        block.norm2_beta,
        &block.norm2_running,
        ctx,
        index,
        true,
    )?;
    let h1 = tape.matmul(q, block.feat_weight1)?;
    let h1 = tape.add(h1, block.feat_bias1)?;
    let h1 = tape.activation(h1, cfg.activation);
    let h2 = tape.matmul(h1, block.feat_weight2)?;
    let h2 = tape.add(h2, block.feat_bias2)?;
    let r_f = tape.dropout(h2, p, ctx.training, ctx.rng)?;
    tape.add(t, r_f)
}

/// One refinement round: the `M` blocks composed in order.
pub fn apply_stack(
    tape: &mut Tape,
    h: Var,
    blocks: &[BoundBlock],
    ctx: &mut StageContext<'_>,
) -> Result<Var> {
    blocks
        .iter()
        .enumerate()
        .try_fold(h, |acc, (i, b)| residual_mixer_block(tape, acc, b, i, ctx))
}

/// `N` applications of the same stack. Dropout masks are drawn afresh at
/// every application; gradients from all rounds land on the shared leaves.
pub fn iterative_refine(
    tape: &mut Tape,
    h0: Var,
    blocks: &[BoundBlock],
    rounds: usize,
    ctx: &mut StageContext<'_>,
) -> Result<Var> {
    if rounds == 0 {
        return Err(Error::config("model.rounds", "must be at least 1"));
    }
    (0..rounds).try_fold(h0, |h, _| apply_stack(tape, h, blocks, ctx))
}

/// `Z = H + softmax_rows(H·Eᵀ)·V`.
pub fn external_attention(tape: &mut Tape, h: Var, keys: Var, values: Var) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    let ks = tape.shape(keys).to_vec();
    let vs = tape.shape(values).to_vec();
    let c = *hs.last().unwrap_or(&0);
    if ks.len() != 2 || ks != vs || ks[1] != c {
        return Err(Error::contract(format!(
            "external attention shapes: H {hs:?}, E {ks:?}, V {vs:?}"
        )));
    }
    let kt = tape.transpose(keys)?;
    let affinity = tape.matmul(h, kt)?;
    let weights = tape.row_softmax(affinity)?;
    let correction = tape.matmul(weights, values)?;
    tape.add(h, correction)
}

/// Attention weights `softmax_rows(H·Eᵀ)` alone, for inspection.
pub fn attention_weights(tape: &mut Tape, h: Var, keys: Var) -> Result<Var> {
    let kt = tape.transpose(keys)?;
    let affinity = tape.matmul(h, kt)?;
    tape.row_softmax(affinity)
}

/// Temporal head `W_p·Z + b_p` on the target channels, mapped back
/// through the inverse instance normalization.
pub fn temporal_readout(
    tape: &mut Tape,
    z: Var,
    bound: &BoundParams,
    stats: &InstanceStats,
    cfg: &ModelConfig,
) -> Result<Var> {
    let identity = cfg.target_channels.len() == cfg.channels
        && cfg.target_channels.iter().enumerate().all(|(i, &c)| i == c);
    let (z, gamma, beta, stats) = if identity {
        (z, bound.instance_gamma, bound.instance_beta, stats.clone())
    } else {
        let t = &cfg.target_channels;
        (
            tape.select_last(z, t)?,
            tape.select_last(bound.instance_gamma, t)?,
            tape.select_last(bound.instance_beta, t)?,
            stats.select(t),
        )
    };
    let y = tape.matmul(bound.head_weight, z)?;
    let y = tape.add(y, bound.head_bias)?;
    instance_denormalize(tape, y, gamma, beta, &stats)
}

#[cfg(test)]
mod tests;
