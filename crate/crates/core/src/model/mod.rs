//! The multimodal fully convolutional network.
//!
//! ```text
//! a_0 ─ enc1 ─ pool ─ a_1 ─ … ─ enc_L ─ pool ─ a_L ─┬─ bridge(+text) ─ main decoder ─ logits
//!        │f_1                      │f_L              │                   ▲ skips from f_l
//!        └──────────────────────────────────────────┴─ auxiliary decoder ─ ã_L … ã_0
//! ```
//!
//! Encoder stage `l` is a conv/batch-norm/ReLU unit (a single dilated conv
//! or a dilated block) producing `f_l`, followed by 2×2 max pooling giving
//! `a_l`. The bridge area-averages the embedding map to the resolution of
//! `a_s` and concatenates it. Each main decoder stage reduces channels,
//! upsamples (unpooling with the stage's indices, or bilinear), then either
//! fuses `f_l` by concatenation and a conv, or applies a plain conv. A 1×1
//! conv maps the last decoder features to class logits. The auxiliary
//! decoder mirrors the main one and emits a linear reconstruction of every
//! `a_l`.

mod config;
mod preprocess;

use std::collections::BTreeMap;

use dsse_tensor::{BatchNormConfig, Checkpoint, Graph, Mode, PoolIndices, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    balanced_branch_channels, digest_of, hex, is_auxiliary, ArchitectureConfig, Dilation, Upsampling, Variant,
    BLOCK_DILATIONS,
};
pub use preprocess::{prepare_labels, preprocess, valid_mask, PreprocessConfig, Preprocessed};

use crate::error::{contract, Error, Result};

/// Parameters and batch-norm running statistics, keyed by stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: BTreeMap<String, Tensor>,
    pub stats: BTreeMap<String, RunningStats>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a so a parameter's initial value depends only on its name
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ModelState {
    /// Conv weights uniform in `±sqrt(6/fan_in)`, biases and betas zero,
    /// gammas one, running statistics (0, 1).
    pub fn initialize(cfg: &ArchitectureConfig, seed: u64) -> Self {
        let mut params = BTreeMap::new();
        for (name, shape) in cfg.parameter_shapes() {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f32).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                Tensor::uniform(shape, -bound, bound, &mut rng)
            } else if name.ends_with(".gamma") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            params.insert(name, t);
        }
        let stats = cfg.batch_norm_layers().into_iter().map(|(n, c)| (n, RunningStats::new(c))).collect();
        Self { params, stats }
    }
}

/// How a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Batch-norm statistics source.
    pub bn_mode: Mode,
    /// Whether parameters enter the graph as differentiable leaves.
    pub trainable: bool,
    /// Whether to build the auxiliary reconstruction decoder.
    pub auxiliary: bool,
    pub bn: BatchNormConfig,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self { bn_mode: Mode::Train, trainable: true, auxiliary: true, bn: BatchNormConfig::default() }
    }

    pub fn inference() -> Self {
        Self { bn_mode: Mode::Eval, trainable: false, auxiliary: false, bn: BatchNormConfig::default() }
    }
}

/// Encoder outputs.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `a_0 … a_L`, taken before any bridge concatenation.
    pub activations: Vec<Var>,
    /// `f_1 … f_L`, the pre-pool stage outputs.
    pub features: Vec<Var>,
    /// Pool indices of stages `1 … L`.
    pub indices: Vec<PoolIndices>,
    /// Input of both decoders.
    pub bottleneck: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardArtifacts {
    pub encoded: Encoded,
    /// Last main-decoder feature map, before the 1×1 classifier.
    pub features: Var,
    pub logits: Var,
    /// `ã_0 … ã_L` when the auxiliary decoder ran.
    pub reconstructions: Vec<Var>,
    /// Parameter leaves bound in the graph.
    pub params: BTreeMap<String, Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mfcn {
    config: ArchitectureConfig,
    state: ModelState,
}

impl Mfcn {
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = ModelState::initialize(&config, seed);
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelState {
        &mut self.state
    }

    /// Runs the network on `input` (`C×H×W` or `N×C×H×W`). `embedding` is
    /// the text map at input resolution; a vision+text model without one
    /// sees an all-zero map.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        input: &Tensor,
        embedding: Option<&Tensor>,
        opts: ForwardOptions,
    ) -> Result<ForwardArtifacts> {
        self.forward_bound(g, input, embedding, opts, BTreeMap::new())
    }

    /// Like [`Mfcn::forward`], but parameters found in `bound` are taken
    /// from those graph variables instead of the stored state.
    pub fn forward_bound(
        &mut self,
        g: &mut Graph,
        input: &Tensor,
        embedding: Option<&Tensor>,
        opts: ForwardOptions,
        bound: BTreeMap<String, Var>,
    ) -> Result<ForwardArtifacts> {
        let x = g.leaf(input.clone().with_requires_grad(false));
        let e = match (self.config.embedding_dim, embedding) {
            (0, Some(_)) => return Err(contract!("vision-only model was given an embedding map")),
            (0, None) => None,
            (_, Some(t)) => Some(g.leaf(t.clone().with_requires_grad(false))),
            (n, None) => {
                let s = input.shape();
                let mut shape = s.to_vec();
                shape[s.len() - 3] = n;
                Some(g.leaf(Tensor::zeros(shape)))
            }
        };
        let mut f = Forward { config: &self.config, state: &mut self.state, g, opts, bound };
        let encoded = f.encode(x, e)?;
        let (features, logits) = f.decode_main(&encoded)?;
        let reconstructions = if opts.auxiliary { f.decode_auxiliary(&encoded)? } else { Vec::new() };
        Ok(ForwardArtifacts { encoded, features, logits, reconstructions, params: f.bound })
    }

    /// Layer-level access to a pass, for probing single units such as a
    /// dilated block.
    pub fn layers<'a>(&'a mut self, g: &'a mut Graph, opts: ForwardOptions) -> Forward<'a> {
        Forward { config: &self.config, state: &mut self.state, g, opts, bound: BTreeMap::new() }
    }

    /// Parameters, running statistics and the architecture digest.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut tensors = self.state.params.clone();
        for (name, s) in &self.state.stats {
            let c = s.mean.len();
            tensors.insert(format!("{name}.running_mean"), Tensor::new(vec![c], s.mean.clone()).expect("sized"));
            tensors.insert(format!("{name}.running_var"), Tensor::new(vec![c], s.var.clone()).expect("sized"));
        }
        Checkpoint { digest: self.config.digest(), step, tensors }
    }

    /// Rebuilds a model, refusing checkpoints of another architecture.
    pub fn from_checkpoint(config: ArchitectureConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ck.digest != config.digest() {
            return Err(Error::Config(format!(
                "checkpoint architecture digest {} does not match the configured model {}",
                hex(&ck.digest),
                hex(&config.digest())
            )));
        }
        let mut model = Self::new(config, 0)?;
        for (name, t) in model.state.params.iter_mut() {
            let src = ck.tensors.get(name).ok_or_else(|| contract!("checkpoint lacks parameter {name}"))?;
            if src.shape() != t.shape() {
                return Err(contract!("parameter {name} has shape {:?}, expected {:?}", src.shape(), t.shape()));
            }
            *t = src.clone().with_requires_grad(false);
        }
        for (name, s) in model.state.stats.iter_mut() {
            let c = s.mean.len();
            let get = |suffix: &str| {
                ck.tensors
                    .get(&format!("{name}.{suffix}"))
                    .filter(|t| t.numel() == c)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| contract!("checkpoint lacks {name}.{suffix}"))
            };
            s.mean = get("running_mean")?;
            s.var = get("running_var")?;
        }
        Ok(model)
    }
}

/// One forward pass in progress.
pub struct Forward<'a> {
    config: &'a ArchitectureConfig,
    state: &'a mut ModelState,
    g: &'a mut Graph,
    opts: ForwardOptions,
    bound: BTreeMap<String, Var>,
}

impl Forward<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.state.params.get(name).ok_or_else(|| contract!("model has no parameter {name}"))?;
        let v = self.g.leaf(t.clone().with_requires_grad(self.opts.trainable));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `name.conv` with the given dilation; no normalization.
    pub fn conv(&mut self, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.conv.weight"))?;
        let b = self.param(&format!("{name}.conv.bias"))?;
        Ok(self.g.conv2d(x, w, b, dilation)?)
    }

    pub fn conv_bn_relu(&mut self, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let y = self.conv(x, name, dilation)?;
        let gamma = self.param(&format!("{name}.bn.gamma"))?;
        let beta = self.param(&format!("{name}.bn.beta"))?;
        let key = format!("{name}.bn");
        let stats = self.state.stats.get_mut(&key).ok_or_else(|| contract!("model has no statistics {key}"))?;
        let y = self.g.batch_norm(y, gamma, beta, stats, self.opts.bn_mode, self.opts.bn)?;
        Ok(self.g.relu(y)?)
    }

    /// Five parallel conv/BN/ReLU branches with dilations 1, 2, 4, 8, 16,
    /// concatenated along channels in that order.
    pub fn dilated_block(&mut self, x: Var, name: &str) -> Result<Var> {
        let mut out: Option<Var> = None;
        for d in BLOCK_DILATIONS {
            let branch = self.conv_bn_relu(x, &format!("{name}.d{d}"), d)?;
            out = Some(match out {
                None => branch,
                Some(acc) => self.g.concat_channels(acc, branch)?,
            });
        }
        Ok(out.expect("five branches"))
    }

    /// Area-averages `embedding` down to the resolution of `visual` and
    /// appends it as extra channels.
    pub fn bridge_merge(&mut self, visual: Var, embedding: Var) -> Result<Var> {
        let (vs, es) = (self.g.shape(visual).to_vec(), self.g.shape(embedding).to_vec());
        if vs.len() != es.len() || vs.len() < 3 {
            return Err(contract!("bridge inputs {vs:?} and {es:?} are not congruent"));
        }
        let r = vs.len();
        let (h, w, eh, ew) = (vs[r - 2], vs[r - 1], es[r - 2], es[r - 1]);
        if h == 0 || w == 0 || eh % h != 0 || ew % w != 0 || eh / h != ew / w {
            return Err(contract!("embedding map {eh}×{ew} is not an integer multiple of {h}×{w}"));
        }
        let factor = eh / h;
        let small = if factor == 1 { embedding } else { self.g.area_downsample(embedding, factor)? };
        Ok(self.g.concat_channels(visual, small)?)
    }

    /// Runs the encoder stages, merging the embedding map at the bridge level.
    pub fn encode(&mut self, input: Var, embedding: Option<Var>) -> Result<Encoded> {
        let cfg = self.config;
        let big_l = cfg.stages();
        let shape = self.g.shape(input).to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let period = 1usize << big_l;
        if h % period != 0 || w % period != 0 {
            return Err(contract!("input {h}×{w} is not divisible by {period}"));
        }
        let bridge = cfg.bridge();
        let mut activations = vec![input];
        let mut features = Vec::new();
        let mut indices = Vec::new();
        let mut x = input;
        for l in 0..=big_l {
            if l > 0 {
                let name = format!("enc{l}");
                let f = match cfg.dilation {
                    Dilation::Single(d) => self.conv_bn_relu(x, &name, d)?,
                    Dilation::Block => self.dilated_block(x, &name)?,
                };
                let (a, idx) = self.g.max_pool2d(f)?;
                features.push(f);
                indices.push(idx);
                activations.push(a);
                x = a;
            }
            if l == bridge {
                if let Some(e) = embedding {
                    x = self.bridge_merge(x, e)?;
                }
            }
        }
        Ok(Encoded { activations, features, indices, bottleneck: x })
    }

    fn upsample(&mut self, x: Var, enc: &Encoded, l: usize) -> Result<Var> {
        match self.config.upsampling {
            Upsampling::Bilinear => Ok(self.g.bilinear_upsample2x(x)?),
            Upsampling::Unpooling => {
                let idx = enc
                    .indices
                    .get(l - 1)
                    .ok_or_else(|| contract!("unpooling needs the pool indices of stage {l}"))?;
                Ok(self.g.unpool2d(x, idx)?)
            }
        }
    }

    /// Main segmentation decoder; returns (pre-logit features, logits).
    pub fn decode_main(&mut self, enc: &Encoded) -> Result<(Var, Var)> {
        let mut x = enc.bottleneck;
        for l in (1..=self.config.stages()).rev() {
            x = self.conv_bn_relu(x, &format!("dec{l}.reduce"), 1)?;
            x = self.upsample(x, enc, l)?;
            x = if self.config.skip {
                let f = *enc.features.get(l - 1).ok_or_else(|| contract!("missing encoder feature f_{l}"))?;
                let cat = self.g.concat_channels(x, f)?;
                self.conv_bn_relu(cat, &format!("dec{l}.fuse"), 1)?
            } else {
                self.conv_bn_relu(x, &format!("dec{l}.refine"), 1)?
            };
        }
        let logits = self.conv(x, "head", 1)?;
        Ok((x, logits))
    }

    /// Auxiliary decoder; returns `ã_0 … ã_L`. Only meaningful while training.
    pub fn decode_auxiliary(&mut self, enc: &Encoded) -> Result<Vec<Var>> {
        if !self.opts.auxiliary {
            return Err(contract!("the auxiliary decoder only runs in training passes"));
        }
        let big_l = self.config.stages();
        let mut recon = vec![None; big_l + 1];
        recon[big_l] = Some(self.conv(enc.bottleneck, &format!("rec{big_l}"), 1)?);
        let mut y = enc.bottleneck;
        for l in (1..=big_l).rev() {
            y = self.conv_bn_relu(y, &format!("aux{l}.reduce"), 1)?;
            y = self.upsample(y, enc, l)?;
            y = self.conv_bn_relu(y, &format!("aux{l}.refine"), 1)?;
            recon[l - 1] = Some(self.conv(y, &format!("rec{}", l - 1), 1)?);
        }
        Ok(recon.into_iter().map(|r| r.expect("every level filled")).collect())
    }
}
