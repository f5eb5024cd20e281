//! MLP encoder: trunk, projection head, optional predictor and momentum
//! target.
//!
//! Parameters live in plain tensors. Every forward binds them onto a tape:
//! online and predictor parameters as leaves (they train), target
//! parameters as constants (they only move by [`EncoderState::momentum_update`]).

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geodata::GeoSample;
use crate::sampling::Embedder;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CHECKPOINT_HEADER: &str = "VGSSL-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub proj_layers: usize,
    /// Without a projection head the trunk output is the embedding.
    pub projection: bool,
    pub proj_batchnorm: bool,
    pub predictor: bool,
    pub momentum_target: bool,
    pub momentum: f64,
    pub stop_grad_target: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            embed_dim: 64,
            proj_layers: 1,
            projection: true,
            proj_batchnorm: false,
            predictor: false,
            momentum_target: false,
            momentum: 0.99,
            stop_grad_target: false,
        }
    }
}

impl EncoderConfig {
    pub fn trunk_out(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.projection && self.proj_layers < 1 {
            return Err(Error::invalid(format!("proj_layers must be at least 1, got {}", self.proj_layers)));
        }
        if !self.projection && self.embed_dim != self.trunk_out() {
            return Err(Error::invalid(format!(
                "without a projection head embed_dim must equal the trunk width {}, got {}",
                self.trunk_out(),
                self.embed_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        Ok(())
    }

    /// Closed-form parameter count of the projection head.
    pub fn projection_param_count(&self) -> usize {
        if !self.projection {
            return 0;
        }
        let d = self.embed_dim;
        let hidden = self.proj_layers - 1;
        let bn = if self.proj_batchnorm { hidden * 2 * d } else { 0 };
        (self.trunk_out() * d + d) + hidden * (d * d + d) + bn
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamList {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamList {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LinearIx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BnIx {
    gamma: usize,
    beta: usize,
    /// Index of the running mean in the buffer list; the variance follows.
    stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Linear(LinearIx),
    BatchNorm(BnIx),
    Relu,
}

/// A sequential network whose parameters and running statistics are
/// stored as flat lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    pub params: ParamList,
    pub buffers: ParamList,
}

struct NetBuilder<'a> {
    net: Network,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> NetBuilder<'a> {
    fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { net: Network { layers: Vec::new(), params: ParamList::default(), buffers: ParamList::default() }, rng }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect() };
        let w = Tensor::new(fan_in, fan_out, uniform(fan_in * fan_out)).expect("sized");
        let b = Tensor::new(1, fan_out, uniform(fan_out)).expect("sized");
        let w = self.net.params.push(format!("{name}.w"), w);
        let b = self.net.params.push(format!("{name}.b"), b);
        self.net.layers.push(Layer::Linear(LinearIx { w, b }));
    }

    fn batchnorm(&mut self, name: &str, d: usize) {
        let gamma = self.net.params.push(format!("{name}.gamma"), Tensor::ones(1, d));
        let beta = self.net.params.push(format!("{name}.beta"), Tensor::zeros(1, d));
        let stats = self.net.buffers.push(format!("{name}.running_mean"), Tensor::zeros(1, d));
        self.net.buffers.push(format!("{name}.running_var"), Tensor::ones(1, d));
        self.net.layers.push(Layer::BatchNorm(BnIx { gamma, beta, stats }));
    }

    fn relu(&mut self) {
        self.net.layers.push(Layer::Relu);
    }
}

/// Batch statistics observed by one training-mode forward, to be folded
/// into the running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    stats: usize,
    mean: Tensor,
    var: Tensor,
}

/// Result of binding a network onto a tape and running it.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub output: Var,
    /// The branch output before any stop-gradient wrapper.
    pub pre_stop: Var,
    pub bn_updates: Vec<BnUpdate>,
}

impl Network {
    fn run(&self, tape: &mut Tape, vars: &[Var], x: Var, training: bool) -> Result<(Var, Vec<BnUpdate>)> {
        let mut h = x;
        let mut updates = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Linear(LinearIx { w, b }) => {
                    let y = tape.matmul(h, vars[w])?;
                    let bb = tape.broadcast_like(vars[b], y)?;
                    tape.add(y, bb)?
                }
                Layer::Relu => tape.relu(h),
                Layer::BatchNorm(ix) => {
                    let (y, up) = self.batchnorm(tape, vars, ix, h, training)?;
                    updates.extend(up);
                    y
                }
            };
        }
        Ok((h, updates))
    }

    fn batchnorm(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ix: BnIx,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BnUpdate>)> {
        let n = tape.shape(x)[0];
        let (xhat, update) = if training {
            if n < 2 {
                return Err(Error::invalid(format!(
                    "batch normalization in training mode needs at least 2 rows, got {n}"
                )));
            }
            let mean = tape.mean(x, Axis::Rows);
            let mb = tape.broadcast_like(mean, x)?;
            let c = tape.sub(x, mb)?;
            let sq = tape.square(c)?;
            let var = tape.mean(sq, Axis::Rows);
            let update = BnUpdate {
                stats: ix.stats,
                mean: tape.value(mean).clone(),
                var: tape.value(var).map(|v| v * n as f64 / (n as f64 - 1.0)),
            };
            let var = tape.add_scalar(var, BN_EPS);
            let std = tape.sqrt(var);
            let sb = tape.broadcast_like(std, x)?;
            (tape.div(c, sb)?, Some(update))
        } else {
            let mean = tape.constant(self.buffers.tensors[ix.stats].clone());
            let std = tape.constant(self.buffers.tensors[ix.stats + 1].map(|v| (v + BN_EPS).sqrt()));
            let mb = tape.broadcast_like(mean, x)?;
            let sb = tape.broadcast_like(std, x)?;
            let c = tape.sub(x, mb)?;
            (tape.div(c, sb)?, None)
        };
        let g = tape.broadcast_like(vars[ix.gamma], xhat)?;
        let b = tape.broadcast_like(vars[ix.beta], xhat)?;
        let y = tape.mul(xhat, g)?;
        Ok((tape.add(y, b)?, update))
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let blend = |old: &Tensor, new: &Tensor| {
                old.zip_map(new, |o, n| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n).expect("bn stat shapes")
            };
            self.buffers.tensors[u.stats] = blend(&self.buffers.tensors[u.stats], &u.mean);
            self.buffers.tensors[u.stats + 1] = blend(&self.buffers.tensors[u.stats + 1], &u.var);
        }
    }

    fn same_layout(&self, other: &Network) -> bool {
        self.layers == other.layers
            && self.params.names == other.params.names
            && self.buffers.names == other.buffers.names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Online,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub online: Network,
    pub target: Option<Network>,
    pub predictor: Option<Network>,
}

/// Tape handles for one step's parameters, aligned with the state's lists.
#[derive(Clone, Debug)]
pub struct Bindings {
    pub online: Vec<Var>,
    pub target: Option<Vec<Var>>,
    pub predictor: Option<Vec<Var>>,
}

impl Bindings {
    /// Leaves the optimizer updates: online parameters, then predictor ones.
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = self.online.clone();
        if let Some(p) = &self.predictor {
            v.extend(p);
        }
        v
    }
}

pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<EncoderState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetBuilder::new(&mut rng);
    let mut width = cfg.input_dim;
    for (i, &h) in cfg.hidden_dims.iter().enumerate() {
        b.linear(&format!("trunk.{i}"), width, h);
        // without a head the last trunk layer is the embedding; a ReLU there
        // could zero whole rows
        if cfg.projection || i + 1 < cfg.hidden_dims.len() {
            b.relu();
        }
        width = h;
    }
    if cfg.projection {
        let d = cfg.embed_dim;
        b.linear("proj.0", width, d);
        for i in 1..cfg.proj_layers {
            if cfg.proj_batchnorm {
                b.batchnorm(&format!("proj.bn{}", i - 1), d);
            }
            b.relu();
            b.linear(&format!("proj.{i}"), d, d);
        }
    }
    let online = b.net;
    let predictor = cfg.predictor.then(|| {
        let d = cfg.embed_dim;
        let mut p = NetBuilder::new(&mut rng);
        p.linear("pred.0", d, d);
        p.batchnorm("pred.bn0", d);
        p.relu();
        p.linear("pred.1", d, d);
        p.net
    });
    let target = cfg.momentum_target.then(|| online.clone());
    Ok(EncoderState { online, target, predictor })
}

impl EncoderState {
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            online: self.online.bind(tape, true),
            target: self.target.as_ref().map(|t| t.bind(tape, false)),
            predictor: self.predictor.as_ref().map(|p| p.bind(tape, true)),
        }
    }

    /// Binds every tensor as a constant: a frozen snapshot.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            online: self.online.bind(tape, false),
            target: self.target.as_ref().map(|t| t.bind(tape, false)),
            predictor: self.predictor.as_ref().map(|p| p.bind(tape, false)),
        }
    }

    /// Runs one branch. The target branch reads the momentum copy when
    /// present, the online parameters otherwise, and is wrapped in
    /// stop-gradient when the config asks for it.
    pub fn forward(
        &self,
        cfg: &EncoderConfig,
        tape: &mut Tape,
        bind: &Bindings,
        x: Var,
        branch: Branch,
        training: bool,
    ) -> Result<ForwardOut> {
        let [_, f] = tape.shape(x);
        if f != cfg.input_dim {
            return Err(Error::invalid(format!("encoder expects {} input features, got {f}", cfg.input_dim)));
        }
        match branch {
            Branch::Online => {
                let (out, bn_updates) = self.online.run(tape, &bind.online, x, training)?;
                Ok(ForwardOut { output: out, pre_stop: out, bn_updates })
            }
            Branch::Target => {
                if !cfg.momentum_target && !cfg.stop_grad_target {
                    return Err(Error::invalid("target branch requested without a momentum target or stop-gradient"));
                }
                let (net, vars) = match (&self.target, &bind.target) {
                    (Some(t), Some(v)) => (t, v),
                    _ if cfg.momentum_target => {
                        return Err(Error::InvalidState("momentum target missing from the encoder state".into()))
                    }
                    _ => (&self.online, &bind.online),
                };
                let (pre, bn_updates) = net.run(tape, vars, x, training)?;
                let out = if cfg.stop_grad_target { tape.stop_gradient(pre) } else { pre };
                Ok(ForwardOut { output: out, pre_stop: pre, bn_updates })
            }
        }
    }

    pub fn predictor_forward(&self, tape: &mut Tape, bind: &Bindings, z: Var, training: bool) -> Result<ForwardOut> {
        let (net, vars) = match (&self.predictor, &bind.predictor) {
            (Some(n), Some(v)) => (n, v),
            _ => return Err(Error::InvalidState("encoder has no predictor".into())),
        };
        let (out, bn_updates) = net.run(tape, vars, z, training)?;
        Ok(ForwardOut { output: out, pre_stop: out, bn_updates })
    }

    pub fn apply_online_bn(&mut self, updates: &[BnUpdate]) {
        self.online.apply_bn_updates(updates);
    }

    pub fn apply_predictor_bn(&mut self, updates: &[BnUpdate]) {
        if let Some(p) = &mut self.predictor {
            p.apply_bn_updates(updates);
        }
    }

    /// `target ← m·target + (1−m)·online` over parameters and running
    /// statistics. No-op without a momentum target.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1], got {m}")));
        }
        let Some(target) = &mut self.target else { return Ok(()) };
        let pairs = target
            .params
            .tensors
            .iter_mut()
            .zip(&self.online.params.tensors)
            .chain(target.buffers.tensors.iter_mut().zip(&self.online.buffers.tensors));
        for (t, o) in pairs {
            for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = m * *tv + (1.0 - m) * ov;
            }
        }
        Ok(())
    }

    /// Trainable tensors aligned with [`Bindings::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.online.params.tensors.iter_mut().collect();
        if let Some(p) = &mut self.predictor {
            v.extend(p.params.tensors.iter_mut());
        }
        v
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.online.params.names.iter().map(|n| format!("online.{n}")).collect();
        if let Some(p) = &self.predictor {
            v.extend(p.params.names.iter().map(|n| format!("predictor.{n}")));
        }
        v
    }

    /// Every tensor of the state under a prefixed name, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let nets =
            [("online", Some(&self.online)), ("target", self.target.as_ref()), ("predictor", self.predictor.as_ref())];
        let mut out = Vec::new();
        for (prefix, net) in nets {
            let Some(net) = net else { continue };
            for (n, t) in net.params.iter().chain(net.buffers.iter()) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out
    }

    fn load_named(&mut self, mut table: BTreeMap<String, Tensor>) -> Result<()> {
        let mut take = |prefix: &str, net: &mut Network| -> Result<()> {
            for list in [&mut net.params, &mut net.buffers] {
                for (name, slot) in list.names.iter().zip(list.tensors.iter_mut()) {
                    let key = format!("{prefix}.{name}");
                    let t = table.remove(&key).ok_or_else(|| Error::Parse(format!("checkpoint lacks tensor {key}")))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::Parse(format!(
                            "checkpoint tensor {key} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
            }
            Ok(())
        };
        take("online", &mut self.online)?;
        if let Some(t) = &mut self.target {
            take("target", t)?;
        }
        if let Some(p) = &mut self.predictor {
            take("predictor", p)?;
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Parse(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn target_matches_layout(&self) -> bool {
        self.target.as_ref().is_none_or(|t| t.same_layout(&self.online))
    }

    /// Eval-mode online embeddings of raw feature rows, without a tape
    /// kept around.
    pub fn embed_rows(&self, cfg: &EncoderConfig, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.online.params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let bind = Bindings { online: vars, target: None, predictor: None };
        let xv = tape.constant(x.clone());
        let out = self.forward(cfg, &mut tape, &bind, xv, Branch::Online, false)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Eval-mode embedder over dataset samples.
pub struct EncoderEmbedder<'a> {
    pub state: &'a EncoderState,
    pub cfg: &'a EncoderConfig,
}

impl Embedder for EncoderEmbedder<'_> {
    fn embed(&self, samples: &[&GeoSample]) -> Result<Tensor> {
        if samples.is_empty() {
            return Ok(Tensor::zeros(0, self.cfg.embed_dim));
        }
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let x = Tensor::from_rows(&rows)?;
        self.state.embed_rows(self.cfg, &x)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

/// JSON checkpoint: header, config echo, manifest and a flat value array.
/// `extra` carries additional named tensors such as optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub header: String,
    pub epoch: usize,
    pub encoder: EncoderConfig,
    pub manifest: Vec<ManifestEntry>,
    pub data: Vec<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_state(state: &EncoderState, cfg: &EncoderConfig, epoch: usize, aux: &[(String, &Tensor)]) -> Self {
        let mut manifest = Vec::new();
        let mut data = Vec::new();
        for (name, t) in state.named_tensors().into_iter().chain(aux.iter().map(|(n, t)| (n.clone(), *t))) {
            manifest.push(ManifestEntry { name, shape: t.shape(), offset: data.len() });
            data.extend_from_slice(t.data());
        }
        Self { header: CHECKPOINT_HEADER.into(), epoch, encoder: cfg.clone(), manifest, data, extra: BTreeMap::new() }
    }

    fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for e in &self.manifest {
            let len = e.shape[0] * e.shape[1];
            let slice = self
                .data
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::Parse(format!("checkpoint tensor {} runs past the data", e.name)))?;
            if out.insert(e.name.clone(), Tensor::new(e.shape[0], e.shape[1], slice.to_vec())?).is_some() {
                return Err(Error::Parse(format!("checkpoint lists {} twice", e.name)));
            }
        }
        Ok(out)
    }

    /// Rebuilds the encoder state; tensors outside the encoder's own
    /// namespaces are returned separately.
    pub fn restore(&self) -> Result<(EncoderState, BTreeMap<String, Tensor>)> {
        if self.header != CHECKPOINT_HEADER {
            return Err(Error::Parse(format!("unsupported checkpoint header {:?}", self.header)));
        }
        let mut state = init_encoder(&self.encoder, 0)?;
        let (own, aux): (BTreeMap<_, _>, BTreeMap<_, _>) = self
            .tensors()?
            .into_iter()
            .partition(|(k, _)| ["online.", "target.", "predictor."].iter().any(|p| k.starts_with(p)));
        state.load_named(own)?;
        Ok((state, aux))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
