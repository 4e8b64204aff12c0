//! Encoder-decoder segmentation backbones and their parameters.
//!
//! Each backbone is described by a layer table ([`layer_table`]) that fixes
//! parameter names, shapes and order. [`build_model`] initializes a
//! [`ParamStore`] from that table and the forward functions look parameters
//! up by the same names through a [`Session`].

mod attunet;
mod segunet;
mod unet;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use attunet::{attention_gate, forward_attunet};
pub use segunet::forward_segunet;
pub use unet::forward_unet;

use crate::autodiff::{BatchNormMode, BatchNormParams, Conv2dGeom, Gradients, RunningStats, Tape, Var};
use crate::data::Direction;
use crate::kv;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("input extent {h}x{w} not divisible by {factor}")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("expected {expected} input channels, got {got}")]
    InputChannels { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    Unet,
    SegUnet,
    AttUnet,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Unet, Backbone::SegUnet, Backbone::AttUnet];
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Backbone::Unet => "unet",
            Backbone::SegUnet => "segunet",
            Backbone::AttUnet => "attunet",
        })
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unet" => Ok(Backbone::Unet),
            "segunet" => Ok(Backbone::SegUnet),
            "attunet" => Ok(Backbone::AttUnet),
            _ => Err(format!("unknown backbone {s:?} (expected unet, segunet or attunet)")),
        }
    }
}

/// Normalization statistics used outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EvalNorm {
    /// Per-slice statistics, exactly as in batch-size-1 training.
    #[default]
    Slice,
    /// Tracked running statistics.
    Running,
}

impl EvalNorm {
    /// The batch-norm mode inference runs in. `Slice` reuses train mode on
    /// a session whose running statistics are never committed.
    pub fn mode(self) -> BatchNormMode {
        match self {
            EvalNorm::Slice => BatchNormMode::Train,
            EvalNorm::Running => BatchNormMode::Eval,
        }
    }
}

impl fmt::Display for EvalNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            EvalNorm::Slice => "slice",
            EvalNorm::Running => "running",
        })
    }
}

impl FromStr for EvalNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "slice" => Ok(EvalNorm::Slice),
            "running" => Ok(EvalNorm::Running),
            _ => Err(format!("unknown eval_norm {s:?} (expected slice or running)")),
        }
    }
}

/// Architecture and preprocessing settings; everything needed to rebuild a
/// network from a checkpoint and feed it the same kind of input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Number of down-sampling stages.
    pub levels: usize,
    /// Channels of the first encoder level; level `l` has `base_channels * 2^l`.
    pub base_channels: usize,
    /// Feed the previous step's prediction as a second input channel.
    pub recurrent: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Batch-norm statistics at inference.
    pub eval_norm: EvalNorm,
    /// Slice traversal order.
    pub direction: Direction,
    /// Intensity window mapped onto `[0, 1]` before slicing.
    pub window: (f32, f32),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Unet,
            levels: 4,
            base_channels: 16,
            recurrent: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            eval_norm: EvalNorm::Slice,
            direction: Direction::Ascending,
            window: (300.0, 2000.0),
        }
    }
}

impl ModelConfig {
    /// Small network used by gradient checks and smoke tests.
    pub fn tiny(backbone: Backbone, recurrent: bool) -> Self {
        Self {
            backbone,
            levels: 2,
            base_channels: 4,
            recurrent,
            ..Self::default()
        }
    }

    pub fn in_channels(&self) -> usize {
        1 + usize::from(self.recurrent)
    }

    /// Channels at encoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(ModelError::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.levels > 8 {
            return Err(ModelError::Config(format!("levels must be <= 8, got {}", self.levels)));
        }
        if self.base_channels < 4 {
            return Err(ModelError::Config(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(ModelError::Config(format!(
                "bn_eps must be positive, got {}",
                self.bn_eps
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(ModelError::Config(format!(
                "bn_momentum must lie in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        let (lo, hi) = self.window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ModelError::Config(format!(
                "window must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(ModelError::Indivisible { h, w, factor: m });
        }
        Ok(())
    }

    /// Ordered `key = value` pairs; [`ModelConfig::from_pairs`] inverts it exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("backbone", self.backbone.to_string()),
            ("levels", self.levels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("in_channels", self.in_channels().to_string()),
            ("recurrent", self.recurrent.to_string()),
            ("bn_eps", self.bn_eps.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("eval_norm", self.eval_norm.to_string()),
            ("direction", self.direction.to_string()),
            ("window_lo", self.window.0.to_string()),
            ("window_hi", self.window.1.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        kv::render(self.to_pairs())
    }

    pub fn from_pairs(pairs: &IndexMap<String, String>) -> Result<Self> {
        fn get<V: FromStr>(pairs: &IndexMap<String, String>, key: &str) -> Result<V>
        where
            V::Err: fmt::Display,
        {
            let raw = pairs
                .get(key)
                .ok_or_else(|| ModelError::Config(format!("missing key {key:?}")))?;
            raw.parse()
                .map_err(|e| ModelError::Config(format!("{key} = {raw:?}: {e}")))
        }
        const KNOWN: [&str; 11] = [
            "backbone",
            "levels",
            "base_channels",
            "in_channels",
            "recurrent",
            "bn_eps",
            "bn_momentum",
            "eval_norm",
            "direction",
            "window_lo",
            "window_hi",
        ];
        if let Some(k) = pairs.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(ModelError::Config(format!("unknown key {k:?}")));
        }
        let recurrent = kv::parse_bool(
            pairs
                .get("recurrent")
                .ok_or_else(|| ModelError::Config("missing key \"recurrent\"".into()))?,
        )
        .map_err(ModelError::Config)?;
        let cfg = Self {
            backbone: get(pairs, "backbone")?,
            levels: get(pairs, "levels")?,
            base_channels: get(pairs, "base_channels")?,
            recurrent,
            bn_eps: get(pairs, "bn_eps")?,
            bn_momentum: get(pairs, "bn_momentum")?,
            eval_norm: get(pairs, "eval_norm")?,
            direction: get(pairs, "direction")?,
            window: (get(pairs, "window_lo")?, get(pairs, "window_hi")?),
        };
        if pairs.contains_key("in_channels") {
            let declared: usize = get(pairs, "in_channels")?;
            if declared != cfg.in_channels() {
                return Err(ModelError::Config(format!(
                    "in_channels = {declared} contradicts recurrent = {recurrent}"
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_pairs(&kv::parse(text).map_err(ModelError::Config)?)
    }
}

/// One entry of a backbone's layer table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// `weight: (cout, cin, k, k)`, `bias: (cout)`.
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
    },
    /// `weight: (cin, cout, k, k)`, `bias: (cout)`; stride equals `k`.
    ConvTranspose {
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
    },
    /// `gamma`, `beta`: `(c)` plus running statistics.
    BatchNorm { name: String, c: usize },
}

impl LayerSpec {
    fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            cin,
            cout,
            k,
        }
    }

    fn bn(name: impl Into<String>, c: usize) -> Self {
        LayerSpec::BatchNorm { name: name.into(), c }
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { cin, cout, k, .. } | LayerSpec::ConvTranspose { cin, cout, k, .. } => {
                cin * cout * k * k + cout
            }
            LayerSpec::BatchNorm { c, .. } => 2 * c,
        }
    }
}

/// Channel width of the attention gate's intermediate map.
pub fn gate_channels(c: usize) -> usize {
    (c / 2).max(1)
}

/// Ordered layer list for `config`.
pub fn layer_table(config: &ModelConfig) -> Vec<LayerSpec> {
    let l = config.levels;
    let c = |lvl: usize| config.channels(lvl);
    let enc_in = |lvl: usize| if lvl == 0 { config.in_channels() } else { c(lvl - 1) };
    let mut t = Vec::new();
    for lvl in 0..l {
        t.push(LayerSpec::conv(format!("enc{lvl}.conv1"), enc_in(lvl), c(lvl), 3));
        t.push(LayerSpec::bn(format!("enc{lvl}.bn1"), c(lvl)));
        t.push(LayerSpec::conv(format!("enc{lvl}.conv2"), c(lvl), c(lvl), 3));
        t.push(LayerSpec::bn(format!("enc{lvl}.bn2"), c(lvl)));
    }
    // Channels entering decoder level `lvl` from below.
    let dec_in = |lvl: usize| if lvl + 1 == l { c(l - 1) } else { c(lvl + 1) };
    for lvl in (0..l).rev() {
        match config.backbone {
            Backbone::Unet => {
                t.push(LayerSpec::ConvTranspose {
                    name: format!("dec{lvl}.up"),
                    cin: dec_in(lvl),
                    cout: c(lvl),
                    k: 2,
                });
                t.push(LayerSpec::bn(format!("dec{lvl}.bn_up"), c(lvl)));
                t.push(LayerSpec::conv(format!("dec{lvl}.conv"), 2 * c(lvl), c(lvl), 3));
                t.push(LayerSpec::bn(format!("dec{lvl}.bn"), c(lvl)));
            }
            Backbone::SegUnet => {
                let out = if lvl == 0 { c(0) } else { c(lvl - 1) };
                t.push(LayerSpec::conv(format!("dec{lvl}.conv1"), 2 * c(lvl), c(lvl), 3));
                t.push(LayerSpec::bn(format!("dec{lvl}.bn1"), c(lvl)));
                t.push(LayerSpec::conv(format!("dec{lvl}.conv2"), c(lvl), out, 3));
                t.push(LayerSpec::bn(format!("dec{lvl}.bn2"), out));
            }
            Backbone::AttUnet => {
                let f = gate_channels(c(lvl));
                t.push(LayerSpec::conv(format!("dec{lvl}.up_conv"), dec_in(lvl), c(lvl), 3));
                t.push(LayerSpec::bn(format!("dec{lvl}.bn_up"), c(lvl)));
                t.push(LayerSpec::conv(format!("dec{lvl}.gate.wg"), c(lvl), f, 1));
                t.push(LayerSpec::conv(format!("dec{lvl}.gate.wx"), c(lvl), f, 1));
                t.push(LayerSpec::conv(format!("dec{lvl}.gate.psi"), f, 1, 1));
                t.push(LayerSpec::conv(format!("dec{lvl}.conv"), 2 * c(lvl), c(lvl), 3));
                t.push(LayerSpec::bn(format!("dec{lvl}.bn"), c(lvl)));
            }
        }
    }
    t.push(LayerSpec::conv("head", c(0), 1, 1));
    t
}

/// Named trainable tensors plus non-trainable batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    running: IndexMap<String, RunningStats<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            running: IndexMap::new(),
        }
    }

    /// Inserts a trainable tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name:?}");
    }

    pub fn insert_running(&mut self, name: impl Into<String>, stats: RunningStats<T>) {
        let name = name.into();
        let prev = self.running.insert(name.clone(), stats);
        assert!(prev.is_none(), "duplicate running statistics {name:?}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn running(&self, name: &str) -> Option<&RunningStats<T>> {
        self.running.get(name)
    }

    pub fn running_mut(&mut self, name: &str) -> Option<&mut RunningStats<T>> {
        self.running.get_mut(name)
    }

    /// Trainable tensors in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.running.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of trainable tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, s)| {
                    let conv = |v: &[T]| v.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect();
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, unit gamma,
/// zero beta, running mean 0 / variance 1, all drawn from a seeded ChaCha8
/// stream in layer-table order.
///
/// Fan-in is `cin * k * k` for convolutions and `cin` for the stride-`k`
/// transposed convolutions, where each output pixel sees one tap per input
/// channel.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: [usize; 4], fan_in: usize| {
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z * std)
        })
    };
    let mut store = ParamStore::new();
    for layer in layer_table(config) {
        match layer {
            LayerSpec::Conv { name, cin, cout, k } => {
                store.insert(format!("{name}.weight"), he([cout, cin, k, k], cin * k * k));
                store.insert(format!("{name}.bias"), Tensor::zeros([cout]));
            }
            LayerSpec::ConvTranspose { name, cin, cout, k } => {
                store.insert(format!("{name}.weight"), he([cin, cout, k, k], cin));
                store.insert(format!("{name}.bias"), Tensor::zeros([cout]));
            }
            LayerSpec::BatchNorm { name, c } => {
                store.insert(format!("{name}.gamma"), Tensor::ones([c]));
                store.insert(format!("{name}.beta"), Tensor::zeros([c]));
                store.insert_running(name, RunningStats::fresh(c));
            }
        }
    }
    Ok(store)
}

/// One forward pass worth of bound parameters.
///
/// Parameters enter the tape as leaves (trainable or constant). Running
/// statistics are copied in, updated by train-mode normalization, and can be
/// written back with [`Session::commit_running`].
pub struct Session<T> {
    pub tape: Tape<T>,
    vars: IndexMap<String, Var>,
    running: IndexMap<String, RunningStats<T>>,
    mode: BatchNormMode,
    bn: BatchNormParams<T>,
    taps: Vec<(String, Var)>,
}

impl<T: Scalar> Session<T> {
    pub fn new(store: &ParamStore<T>, config: &ModelConfig, mode: BatchNormMode, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Self {
            tape,
            vars,
            running: store.running.clone(),
            mode,
            bn: BatchNormParams {
                eps: T::from_f64_lossy(config.bn_eps),
                momentum: T::from_f64_lossy(config.bn_momentum),
            },
            taps: Vec::new(),
        }
    }

    /// Wraps an existing tape whose parameter vars were created elsewhere,
    /// e.g. by a gradient checker. Running statistics come from `store`.
    pub fn from_tape(
        tape: Tape<T>,
        vars: impl IntoIterator<Item = (String, Var)>,
        store: &ParamStore<T>,
        config: &ModelConfig,
        mode: BatchNormMode,
    ) -> Self {
        Self {
            tape,
            vars: vars.into_iter().collect(),
            running: store.running.clone(),
            mode,
            bn: BatchNormParams {
                eps: T::from_f64_lossy(config.bn_eps),
                momentum: T::from_f64_lossy(config.bn_momentum),
            },
            taps: Vec::new(),
        }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Rewinds the tape to just the parameter leaves and clears taps, so the
    /// session can run another forward pass without re-binding parameters.
    pub fn rewind(&mut self) {
        self.tape.truncate(self.vars.len());
        self.taps.clear();
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Parameter leaves in store order.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Extracts per-parameter gradients in store order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape().to_vec()));
                (k.clone(), g)
            })
            .collect()
    }

    /// Writes the (possibly updated) running statistics back into `store`.
    pub fn commit_running(&self, store: &mut ParamStore<T>) {
        for (k, s) in &self.running {
            if let Some(dst) = store.running.get_mut(k) {
                dst.clone_from(s);
            }
        }
    }

    /// Named intermediates recorded by the forward functions.
    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    pub(crate) fn record(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub(crate) fn conv(&mut self, name: &str, x: Var, geom: Conv2dGeom) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        Ok(self.tape.conv2d(x, w, b, geom)?)
    }

    pub(crate) fn conv_transpose(&mut self, name: &str, x: Var, geom: Conv2dGeom) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        Ok(self.tape.conv2d_transpose(x, w, b, geom)?)
    }

    pub(crate) fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let stats = self
            .running
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(format!("{name} running statistics")))?;
        Ok(self.tape.batchnorm2d(x, gamma, beta, stats, self.mode, self.bn)?)
    }

    /// conv -> batch norm -> ReLU.
    pub(crate) fn conv_bn_relu(&mut self, conv: &str, bn: &str, x: Var, geom: Conv2dGeom) -> Result<Var> {
        let y = self.conv(conv, x, geom)?;
        let y = self.bn(bn, y)?;
        Ok(self.tape.relu(y)?)
    }
}

/// Runs the configured backbone on `x: (N, in_channels, H, W)` and returns
/// the `(N, 1, H, W)` logits.
pub fn forward_backbone<T: Scalar>(sess: &mut Session<T>, config: &ModelConfig, x: Var) -> Result<Var> {
    let (_, c, h, w) = sess.tape.value(x).dims4("backbone input")?;
    if c != config.in_channels() {
        return Err(ModelError::InputChannels {
            expected: config.in_channels(),
            got: c,
        });
    }
    config.check_extent(h, w)?;
    match config.backbone {
        Backbone::Unet => forward_unet(sess, config, x),
        Backbone::SegUnet => forward_segunet(sess, config, x),
        Backbone::AttUnet => forward_attunet(sess, config, x),
    }
}

/// Convenience inference wrapper: logits for `x` with frozen parameters.
pub fn predict_logits<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    x: &Tensor<T>,
    mode: BatchNormMode,
) -> Result<Tensor<T>> {
    let mut sess = Session::new(store, config, mode, false);
    let xv = sess.tape.constant(x.clone());
    let out = forward_backbone(&mut sess, config, xv)?;
    Ok(sess.tape.value(out).clone())
}

pub(crate) const SAME3: Conv2dGeom = Conv2dGeom::same(3);
pub(crate) const POINT: Conv2dGeom = Conv2dGeom::same(1);
pub(crate) const DOWN3: Conv2dGeom = Conv2dGeom::new((2, 2), (1, 1));
pub(crate) const UP2: Conv2dGeom = Conv2dGeom::new((2, 2), (0, 0));

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            backbone: Backbone::AttUnet,
            recurrent: true,
            bn_eps: 3.3e-7,
            window: (-125.5, 1999.25),
            direction: Direction::Descending,
            ..ModelConfig::default()
        };
        let text = cfg.to_kv();
        assert_eq!(ModelConfig::from_kv(&text).unwrap(), cfg);
        assert!(text.contains("in_channels = 2\n"));
    }

    #[test]
    fn config_rejects_bad_values() {
        let cfg = ModelConfig {
            levels: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let text = ModelConfig::default()
            .to_kv()
            .replace("in_channels = 1", "in_channels = 2");
        assert!(ModelConfig::from_kv(&text).is_err());
        let text = format!("{}bogus = 1\n", ModelConfig::default().to_kv());
        assert!(ModelConfig::from_kv(&text).is_err());
    }

    #[test]
    fn channel_doubling_in_table() {
        let cfg = ModelConfig::default();
        for layer in layer_table(&cfg) {
            if let LayerSpec::Conv { name, cout, .. } = layer {
                if let Some(rest) = name.strip_prefix("enc") {
                    let lvl: usize = rest[..1].parse().unwrap();
                    assert_eq!(cout, 16 << lvl, "{name}");
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic_with_zero_biases() {
        let cfg = ModelConfig::tiny(Backbone::SegUnet, true);
        let a = build_model::<f32>(&cfg, 3).unwrap();
        let b = build_model::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&cfg, 4).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}
