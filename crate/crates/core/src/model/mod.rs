//! The six spectral U-Net / autoencoder ablation variants.
//!
//! A model is a stack of `depth_n` encoder blocks, a 1x1 bottleneck (deterministic or
//! variational), `depth_n` decoder blocks and a 1x1 output head. The three ablation
//! flags select a variational bottleneck (V), encoder-to-decoder skip concatenation (U)
//! and a single dilated convolution per block instead of two plain ones (D).

mod config;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{BatchNormMode, BatchStats, ConvSpec, Graph, Real, Tensor4, TensorError, Var};

pub use config::{ModelConfig, ModelKind};

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown model `{0}` (expected ae, vae, dvae, unet, dunet or dvunet)")]
    UnknownModel(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: [usize; 3], got: [usize; 4] },
    #[error("parameter `{name}`: {msg}")]
    Param { name: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor4<T>,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
enum ConvParams {
    Dense {
        w: usize,
        b: usize,
        spec: ConvSpec,
    },
    Separable {
        dw_w: usize,
        dw_b: usize,
        pw_w: usize,
        pw_b: usize,
        spec: ConvSpec,
    },
}

/// conv -> batch norm -> PReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: ConvParams,
    gamma: usize,
    beta: usize,
    bn: usize,
    slope: usize,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    up_w: usize,
    up_b: usize,
    units: Vec<ConvUnit>,
}

#[derive(Debug, Clone)]
enum Bottleneck {
    Deterministic {
        w: usize,
        b: usize,
    },
    Variational {
        mu_w: usize,
        mu_b: usize,
        lv_w: usize,
        lv_b: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<NamedTensor<T>>,
    buffers: Vec<BnBuffer<T>>,
    encoder: Vec<Vec<ConvUnit>>,
    bottleneck: Bottleneck,
    decoder: Vec<DecoderBlock>,
    head: (usize, usize),
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Seeds the reparameterization noise in train mode.
    pub noise_seed: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            noise_seed: 0,
        }
    }

    pub fn train(noise_seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            noise_seed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Latent {
    pub mu: Var,
    pub log_var: Var,
}

/// Encoder output: pre-pool block outputs and the bottleneck code.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub skips: Vec<Var>,
    pub z: Var,
    pub latent: Option<Latent>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut<T> {
    pub y: Var,
    pub latent: Option<Latent>,
    /// Graph leaves for the parameters, in [`Model::params`] order.
    pub param_vars: Vec<Var>,
    /// Training-mode batch statistics keyed by buffer index.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

struct Builder<T> {
    params: Vec<NamedTensor<T>>,
    buffers: Vec<BnBuffer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn kaiming(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor4::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.push(name, value)
    }

    fn constant(&mut self, name: String, c: usize, v: f64) -> usize {
        self.push(name, Tensor4::full([1, c, 1, 1], T::of(v)))
    }

    fn push(&mut self, name: String, value: Tensor4<T>) -> usize {
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    fn conv_unit(&mut self, prefix: &str, j: usize, spec: ConvSpec) -> ConvUnit {
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let (kh, kw) = spec.kernel;
        let conv = if spec.depthwise_separable {
            ConvParams::Separable {
                dw_w: self.kaiming(format!("{prefix}.conv{j}.dw_weight"), [cin, 1, kh, kw], kh * kw),
                dw_b: self.constant(format!("{prefix}.conv{j}.dw_bias"), cin, 0.0),
                pw_w: self.kaiming(format!("{prefix}.conv{j}.pw_weight"), [cout, cin, 1, 1], cin),
                pw_b: self.constant(format!("{prefix}.conv{j}.pw_bias"), cout, 0.0),
                spec,
            }
        } else {
            ConvParams::Dense {
                w: self.kaiming(format!("{prefix}.conv{j}.weight"), [cout, cin, kh, kw], cin * kh * kw),
                b: self.constant(format!("{prefix}.conv{j}.bias"), cout, 0.0),
                spec,
            }
        };
        let gamma = self.constant(format!("{prefix}.bn{j}.gamma"), cout, 1.0);
        let beta = self.constant(format!("{prefix}.bn{j}.beta"), cout, 0.0);
        self.buffers.push(BnBuffer {
            name: format!("{prefix}.bn{j}"),
            mean: vec![T::zero(); cout],
            var: vec![T::one(); cout],
        });
        let bn = self.buffers.len() - 1;
        let slope = self.constant(format!("{prefix}.act{j}.slope"), cout, PRELU_INIT);
        ConvUnit {
            conv,
            gamma,
            beta,
            bn,
            slope,
        }
    }

    /// Block convs: two 3x3 convs, or one dilated 3x3 conv when `dilated`.
    fn block(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        separable: bool,
        dilated: bool,
        dilation: (usize, usize),
    ) -> Vec<ConvUnit> {
        let spec = |i, o, d: (usize, usize)| {
            let s = ConvSpec {
                dilation: d,
                ..ConvSpec::same3x3(i, o, 1)
            };
            if separable {
                s.separable()
            } else {
                s
            }
        };
        if dilated {
            vec![self.conv_unit(prefix, 1, spec(cin, cout, dilation))]
        } else {
            vec![
                self.conv_unit(prefix, 1, spec(cin, cout, (1, 1))),
                self.conv_unit(prefix, 2, spec(cout, cout, (1, 1))),
            ]
        }
    }
}

impl<T: Real> Model<T> {
    /// Build and initialize a model. Convolutions use Kaiming-uniform fan-in weights and
    /// zero biases; batch norm starts at identity and PReLU slopes at 0.25.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(init_seed),
        };
        let ch = config.channel_schedule();
        let n = config.depth_n;
        let n_std = config.standard_blocks();
        let dil = |i: usize| {
            if config.dilated {
                config.dilation_schedule[i - 1]
            } else {
                (1, 1)
            }
        };

        let mut encoder = Vec::with_capacity(n);
        for i in 1..=n {
            let cin = if i == 1 { 1 } else { ch[i - 2] };
            encoder.push(b.block(&format!("enc{i}"), cin, ch[i - 1], i > n_std, config.dilated, dil(i)));
        }

        let cb = ch[n - 1];
        let bottleneck = if config.variational {
            Bottleneck::Variational {
                mu_w: b.kaiming("bottleneck.mu.weight".into(), [cb, cb, 1, 1], cb),
                mu_b: b.constant("bottleneck.mu.bias".into(), cb, 0.0),
                lv_w: b.kaiming("bottleneck.log_var.weight".into(), [cb, cb, 1, 1], cb),
                lv_b: b.constant("bottleneck.log_var.bias".into(), cb, 0.0),
            }
        } else {
            Bottleneck::Deterministic {
                w: b.kaiming("bottleneck.conv.weight".into(), [cb, cb, 1, 1], cb),
                b: b.constant("bottleneck.conv.bias".into(), cb, 0.0),
            }
        };

        // decoder[i - 1] mirrors encoder block i and runs in reverse order
        let mut decoder: Vec<DecoderBlock> = Vec::with_capacity(n);
        for i in 1..=n {
            let c = ch[i - 1];
            let cout = if i == 1 { config.base_channels } else { ch[i - 2] };
            let prefix = format!("dec{i}");
            let up_w = b.kaiming(format!("{prefix}.up.weight"), [c, c, 2, 2], c);
            let up_b = b.constant(format!("{prefix}.up.bias"), c, 0.0);
            let cin = if config.skips { 2 * c } else { c };
            let units = b.block(&prefix, cin, cout, i > n_std, config.dilated, dil(i));
            decoder.push(DecoderBlock { up_w, up_b, units });
        }
        let c0 = config.base_channels;
        let head = (
            b.kaiming("head.weight".into(), [1, c0, 1, 1], c0),
            b.constant("head.bias".into(), 1, 0.0),
        );
        Ok(Self {
            config,
            params: b.params,
            buffers: b.buffers,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BnBuffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BnBuffer<T>] {
        &mut self.buffers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Learnable scalars: conv weights and biases, batch-norm affine terms, PReLU slopes.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Per-block encoder output channels.
    pub fn encoder_channels(&self) -> Vec<usize> {
        self.config.channel_schedule()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| BnBuffer {
                    name: b.name.clone(),
                    mean: b.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    var: b.var.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }

    /// Replace parameters and buffers by name; every name must be present with a
    /// matching shape.
    pub fn load_state(
        &mut self,
        params: &HashMap<String, Tensor4<T>>,
        buffers: &HashMap<String, (Vec<T>, Vec<T>)>,
    ) -> Result<()> {
        for p in &mut self.params {
            let v = params.get(&p.name).ok_or_else(|| ModelError::Param {
                name: p.name.clone(),
                msg: "missing".into(),
            })?;
            if v.shape() != p.value.shape() {
                return Err(ModelError::Param {
                    name: p.name.clone(),
                    msg: format!("shape {:?}, expected {:?}", v.shape(), p.value.shape()),
                });
            }
            p.value = v.clone();
        }
        for b in &mut self.buffers {
            let (m, v) = buffers.get(&b.name).ok_or_else(|| ModelError::Param {
                name: b.name.clone(),
                msg: "missing running stats".into(),
            })?;
            if m.len() != b.mean.len() || v.len() != b.var.len() {
                return Err(ModelError::Param {
                    name: b.name.clone(),
                    msg: "running stats length mismatch".into(),
                });
            }
            b.mean.clone_from(m);
            b.var.clone_from(v);
        }
        Ok(())
    }

    /// Register parameters as graph leaves. Train mode makes them trainable.
    pub fn register_params(&self, g: &mut Graph<T>, mode: Mode) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| match mode {
                Mode::Train => g.param(p.value.clone()),
                Mode::Eval => g.input(p.value.clone()),
            })
            .collect()
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        if shape[1..] != [c, h, w] {
            return Err(ModelError::InputShape {
                expected: self.config.input_shape,
                got: shape,
            });
        }
        Ok(())
    }

    fn run_unit(
        &self,
        g: &mut Graph<T>,
        x: Var,
        u: &ConvUnit,
        pv: &[Var],
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let y = match &u.conv {
            ConvParams::Dense { w, b, spec } => g.conv2d(x, pv[*w], Some(pv[*b]), spec)?,
            ConvParams::Separable {
                dw_w,
                dw_b,
                pw_w,
                pw_b,
                spec,
            } => g.separable_conv2d(x, pv[*dw_w], Some(pv[*dw_b]), pv[*pw_w], Some(pv[*pw_b]), spec)?,
        };
        let eps = T::of(BN_EPS);
        let (y, st) = match mode {
            Mode::Train => g.batch_norm(y, pv[u.gamma], pv[u.beta], BatchNormMode::Train { eps })?,
            Mode::Eval => {
                let buf = &self.buffers[u.bn];
                g.batch_norm(
                    y,
                    pv[u.gamma],
                    pv[u.beta],
                    BatchNormMode::Eval {
                        mean: &buf.mean,
                        var: &buf.var,
                        eps,
                    },
                )?
            }
        };
        if let Some(st) = st {
            stats.push((u.bn, st));
        }
        Ok(g.prelu(y, pv[u.slope])?)
    }

    /// Encoder and bottleneck.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        x: Var,
        pv: &[Var],
        opts: &ForwardOptions,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Encoded> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for units in &self.encoder {
            for u in units {
                h = self.run_unit(g, h, u, pv, opts.mode, stats)?;
            }
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        let point = |c| ConvSpec::pointwise(c, c);
        let cb = g.shape(h)[1];
        match self.bottleneck {
            Bottleneck::Deterministic { w, b } => {
                let z = g.conv2d(h, pv[w], Some(pv[b]), &point(cb))?;
                Ok(Encoded { skips, z, latent: None })
            }
            Bottleneck::Variational { mu_w, mu_b, lv_w, lv_b } => {
                let mu = g.conv2d(h, pv[mu_w], Some(pv[mu_b]), &point(cb))?;
                let log_var = g.conv2d(h, pv[lv_w], Some(pv[lv_b]), &point(cb))?;
                let z = match opts.mode {
                    Mode::Train => {
                        let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
                        g.reparameterize(mu, log_var, &mut rng)?
                    }
                    Mode::Eval => mu,
                };
                Ok(Encoded {
                    skips,
                    z,
                    latent: Some(Latent { mu, log_var }),
                })
            }
        }
    }

    /// Decoder and head. `skips` are ignored by models without skip connections.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        z: Var,
        skips: &[Var],
        pv: &[Var],
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        if self.config.skips && skips.len() != self.decoder.len() {
            return Err(ModelError::InvalidConfig(format!(
                "decoder needs {} skip tensors, got {}",
                self.decoder.len(),
                skips.len()
            )));
        }
        let mut h = z;
        for (i, blk) in self.decoder.iter().enumerate().rev() {
            h = g.conv_transpose2x2(h, pv[blk.up_w], Some(pv[blk.up_b]))?;
            if self.config.skips {
                h = g.concat_channels(h, skips[i])?;
            }
            for u in &blk.units {
                h = self.run_unit(g, h, u, pv, mode, stats)?;
            }
        }
        let c0 = self.config.base_channels;
        Ok(g.conv2d(h, pv[self.head.0], Some(pv[self.head.1]), &ConvSpec::pointwise(c0, 1))?)
    }

    /// Full forward pass on `x` of shape `(B, C, H, W)` matching `input_shape`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, opts: &ForwardOptions) -> Result<ForwardOut<T>> {
        let pv = self.register_params(g, opts.mode);
        self.forward_with_params(g, x, pv, opts)
    }

    /// Forward pass with caller-registered parameter leaves.
    pub fn forward_with_params(
        &self,
        g: &mut Graph<T>,
        x: Var,
        pv: Vec<Var>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOut<T>> {
        if pv.len() != self.params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} parameter leaves for {} parameters",
                pv.len(),
                self.params.len()
            )));
        }
        let mut bn_stats = Vec::new();
        let enc = self.encode(g, x, &pv, opts, &mut bn_stats)?;
        let y = self.decode(g, enc.z, &enc.skips, &pv, opts.mode, &mut bn_stats)?;
        Ok(ForwardOut {
            y,
            latent: enc.latent,
            param_vars: pv,
            bn_stats,
        })
    }

    /// Blend batch statistics into the running buffers (`momentum` 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::of(BN_MOMENTUM);
        for (idx, st) in stats {
            let buf = &mut self.buffers[*idx];
            let corr = if st.count > 1 {
                T::of(st.count as f64 / (st.count - 1) as f64)
            } else {
                T::one()
            };
            for c in 0..buf.mean.len() {
                buf.mean[c] = (T::one() - m) * buf.mean[c] + m * st.mean[c];
                buf.var[c] = (T::one() - m) * buf.var[c] + m * st.var[c] * corr;
            }
        }
    }

    /// Eval-mode inference on a batch tensor.
    pub fn infer(&self, x: Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = self.forward(&mut g, xv, &ForwardOptions::eval())?;
        Ok(g.value(out.y).clone())
    }
}

/// Maps one normalized log-power chunk (`bins x frames`) to an enhanced chunk.
pub trait SpectralEnhancer: Sync {
    fn chunk_shape(&self) -> (usize, usize);
    fn enhance_chunk(&self, chunk: ArrayView2<f32>) -> Result<Array2<f32>>;
}

impl SpectralEnhancer for Model<f32> {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.config.input_shape[1], self.config.input_shape[2])
    }

    fn enhance_chunk(&self, chunk: ArrayView2<f32>) -> Result<Array2<f32>> {
        let (h, w) = self.chunk_shape();
        if chunk.dim() != (h, w) {
            return Err(ModelError::InputShape {
                expected: self.config.input_shape,
                got: [1, 1, chunk.nrows(), chunk.ncols()],
            });
        }
        let x = Tensor4::from_vec([1, 1, h, w], chunk.iter().copied().collect())?;
        let y = self.infer(x)?;
        Ok(Array2::from_shape_vec((h, w), y.into_vec()).expect("shape checked"))
    }
}

/// Passes chunks through unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityEnhancer {
    pub shape: (usize, usize),
}

impl SpectralEnhancer for IdentityEnhancer {
    fn chunk_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn enhance_chunk(&self, chunk: ArrayView2<f32>) -> Result<Array2<f32>> {
        Ok(chunk.to_owned())
    }
}
