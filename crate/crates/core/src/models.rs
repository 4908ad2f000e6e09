//! The five compared architectures, assembled from [`crate::layers`].
//!
//! | name               | blocks                                              | K | C_h    |
//! |--------------------|-----------------------------------------------------|---|--------|
//! | `st_gcn`           | (CNN, GCN, CNN) x 2, linear head                    | 1 | 32     |
//! | `cnn_gcn_cnn`      | CNN, GCN, CNN, linear head                          | 2 | 32     |
//! | `cnn_gcn_cnn_lstm` | CNN, GCN, CNN, LSTM, linear head                    | 2 | 32     |
//! | `cnn_gcn_lstm`     | CNN, GCN, LSTM, linear head                         | 2 | 32     |
//! | `gcn_lstm`         | GCN, LSTM, linear head                              | 2 | window |
//!
//! Temporal convolutions are gated by a GLU, graph convolutions by a ReLU,
//! and batch norm sits between each convolution and its activation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::{LambdaMax, SpectralOperators, WeightedGraph};
use crate::layers::{BatchNormLayer, ChebConvLayer, FirstOrderConvLayer, LinearLayer, LstmBlock, RunningStats, TemporalGatedConvLayer};
use crate::params::{Checkpoint, Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const CNN_HIDDEN_CHANNELS: usize = 32;
pub const DEFAULT_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureName {
    StGcn,
    CnnGcnCnn,
    CnnGcnCnnLstm,
    CnnGcnLstm,
    GcnLstm,
    Custom,
}

impl ArchitectureName {
    /// The five compared architectures, in table order.
    pub const CANONICAL: [ArchitectureName; 5] = [
        ArchitectureName::StGcn,
        ArchitectureName::CnnGcnCnn,
        ArchitectureName::CnnGcnCnnLstm,
        ArchitectureName::CnnGcnLstm,
        ArchitectureName::GcnLstm,
    ];

    /// Hyphenated display name, e.g. `cnn-gcn-lstm`.
    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureName::StGcn => "st-gcn",
            ArchitectureName::CnnGcnCnn => "cnn-gcn-cnn",
            ArchitectureName::CnnGcnCnnLstm => "cnn-gcn-cnn-lstm",
            ArchitectureName::CnnGcnLstm => "cnn-gcn-lstm",
            ArchitectureName::GcnLstm => "gcn-lstm",
            ArchitectureName::Custom => "custom",
        }
    }
}

impl fmt::Display for ArchitectureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::CANONICAL
            .into_iter()
            .find(|n| n.as_str() == key)
            .ok_or_else(|| Error::UnknownModel(s.to_owned()))
    }
}

/// One stage of a layer stack. Temporal convolutions are GLU-gated; graph
/// convolutions are followed by a ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    TemporalConv { channels: usize, kernel: usize },
    ChebConv { channels: usize, order: usize },
    FirstOrderConv { channels: usize },
    Lstm { hidden: usize },
}

/// Which graph convolution implements an order-1 GCN block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphConvKind {
    /// Chebyshev filter truncated at order 1 on the rescaled Laplacian.
    #[default]
    Chebyshev,
    /// Self-loop renormalized adjacency.
    FirstOrder,
}

/// Knobs applied when expanding a canonical architecture name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecOverrides {
    pub kernel: usize,
    pub c_h: Option<usize>,
    pub k_order: Option<usize>,
    pub graph_conv: GraphConvKind,
    pub lambda_max: LambdaMax,
    pub batch_norm: bool,
}

impl Default for SpecOverrides {
    fn default() -> Self {
        Self {
            kernel: DEFAULT_KERNEL,
            c_h: None,
            k_order: None,
            graph_conv: GraphConvKind::default(),
            lambda_max: LambdaMax::default(),
            batch_norm: true,
        }
    }
}

fn default_input_channels() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: ArchitectureName,
    pub blocks: Vec<BlockSpec>,
    pub c_h: usize,
    pub window: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    #[serde(default)]
    pub lambda_max: LambdaMax,
}

impl ArchitectureSpec {
    /// Expands one of the five named architectures for a given window.
    pub fn canonical(name: ArchitectureName, window: usize, o: &SpecOverrides) -> Result<Self> {
        let has_cnn = !matches!(name, ArchitectureName::GcnLstm);
        let c_h = o.c_h.unwrap_or(if has_cnn { CNN_HIDDEN_CHANNELS } else { window });
        let default_order = if name == ArchitectureName::StGcn { 1 } else { 2 };
        let order = o.k_order.unwrap_or(default_order);
        let k = o.kernel;
        let conv = BlockSpec::TemporalConv { channels: c_h, kernel: k };
        let gcn = match (order, o.graph_conv) {
            (1, GraphConvKind::FirstOrder) => BlockSpec::FirstOrderConv { channels: c_h },
            _ => BlockSpec::ChebConv { channels: c_h, order },
        };
        let lstm = BlockSpec::Lstm { hidden: c_h };
        let blocks = match name {
            ArchitectureName::StGcn => vec![conv.clone(), gcn.clone(), conv.clone(), conv.clone(), gcn, conv],
            ArchitectureName::CnnGcnCnn => vec![conv.clone(), gcn, conv],
            ArchitectureName::CnnGcnCnnLstm => vec![conv.clone(), gcn, conv, lstm],
            ArchitectureName::CnnGcnLstm => vec![conv, gcn, lstm],
            ArchitectureName::GcnLstm => vec![gcn, lstm],
            ArchitectureName::Custom => {
                return Err(Error::InvalidConfig("custom architectures come from a spec file".into()))
            }
        };
        let spec = Self {
            name,
            blocks,
            c_h,
            window,
            input_channels: 1,
            batch_norm: o.batch_norm,
            lambda_max: o.lambda_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            context: "architecture spec".into(),
            source: e,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Time length after each block, starting with the window.
    pub fn temporal_trace(&self) -> Result<Vec<usize>> {
        let mut trace = vec![self.window];
        let mut t = self.window;
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                BlockSpec::TemporalConv { kernel, .. } => {
                    let next = (t + 1).saturating_sub(*kernel);
                    trace.push(next);
                    if *kernel == 0 {
                        return Err(Error::InfeasibleSpec(format!("block {i} has kernel size 0")));
                    }
                    if next == 0 {
                        return Err(self.budget_error(&trace, i));
                    }
                    t = next;
                }
                BlockSpec::Lstm { .. } => {
                    trace.push(1);
                    t = 1;
                }
                _ => trace.push(t),
            }
        }
        Ok(trace)
    }

    fn budget_error(&self, trace: &[usize], block: usize) -> Error {
        let path: Vec<String> = trace.iter().map(usize::to_string).collect();
        let consumed: usize = self
            .blocks
            .iter()
            .map(|b| match b {
                BlockSpec::TemporalConv { kernel, .. } => kernel.saturating_sub(1),
                _ => 0,
            })
            .sum();
        Error::InfeasibleSpec(format!(
            "{} with window {}: temporal budget exhausted at block {block} (time steps {}); \
             the temporal convolutions consume {consumed} steps, so the window must be at least {}",
            self.name,
            self.window,
            path.join(" -> "),
            consumed + 1
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.c_h == 0 || self.input_channels == 0 {
            return Err(Error::InfeasibleSpec("window, c_h and input channels must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::InfeasibleSpec("architecture has no blocks".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let width = match b {
                BlockSpec::TemporalConv { channels, .. }
                | BlockSpec::ChebConv { channels, .. }
                | BlockSpec::FirstOrderConv { channels } => *channels,
                BlockSpec::Lstm { hidden } => *hidden,
            };
            if width == 0 {
                return Err(Error::InfeasibleSpec(format!("block {i} has zero channels")));
            }
            if matches!(b, BlockSpec::Lstm { .. }) && i + 1 != self.blocks.len() {
                return Err(Error::InfeasibleSpec("an LSTM block collapses time, so it must come last".into()));
            }
        }
        if let LambdaMax::Fixed(v) = self.lambda_max {
            if !(v > 0.0) {
                return Err(Error::InvalidLambdaMax(v));
            }
        }
        self.temporal_trace().map(|_| ())
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Temporal(TemporalGatedConvLayer, Option<BatchNormLayer>),
    Cheb(ChebConvLayer, Option<BatchNormLayer>),
    FirstOrder(FirstOrderConvLayer, Option<BatchNormLayer>),
    Lstm(LstmBlock),
}

/// An instantiated architecture with its parameters and batch-norm state.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ArchitectureSpec,
    n_vertices: usize,
    stages: Vec<Stage>,
    head: LinearLayer,
    store: ParamStore,
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model(spec: &ArchitectureSpec, g: &WeightedGraph, seed: u64) -> Result<Model> {
    spec.validate()?;
    let trace = spec.temporal_trace()?;
    let needs_spectral = spec.blocks.iter().any(|b| matches!(b, BlockSpec::ChebConv { .. }));
    let spectral = if needs_spectral {
        Some(SpectralOperators::from_graph(g, spec.lambda_max)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut stages = Vec::with_capacity(spec.blocks.len());
    let mut channels = spec.input_channels;
    let mut norm_slot = 0;
    let mut norm = |store: &mut ParamStore, i: usize, c: usize| {
        spec.batch_norm.then(|| {
            let layer = BatchNormLayer::new(store, &format!("b{i}_norm"), c, norm_slot);
            norm_slot += 1;
            layer
        })
    };
    for (i, block) in spec.blocks.iter().enumerate() {
        let stage = match *block {
            BlockSpec::TemporalConv { channels: c_out, kernel } => {
                let conv = TemporalGatedConvLayer::new(&mut store, &format!("b{i}_temporal"), channels, c_out, kernel, &mut rng);
                channels = c_out;
                Stage::Temporal(conv, norm(&mut store, i, 2 * c_out))
            }
            BlockSpec::ChebConv { channels: c_out, order } => {
                let ops = spectral.as_ref().expect("built above");
                let conv = ChebConvLayer::new(&mut store, &format!("b{i}_cheb"), ops, channels, c_out, order, &mut rng);
                channels = c_out;
                Stage::Cheb(conv, norm(&mut store, i, c_out))
            }
            BlockSpec::FirstOrderConv { channels: c_out } => {
                let conv = FirstOrderConvLayer::new(&mut store, &format!("b{i}_gcn"), g, channels, c_out, &mut rng);
                channels = c_out;
                Stage::FirstOrder(conv, norm(&mut store, i, c_out))
            }
            BlockSpec::Lstm { hidden } => {
                let lstm = LstmBlock::new(&mut store, &format!("b{i}_lstm"), channels, hidden, &mut rng);
                channels = hidden;
                Stage::Lstm(lstm)
            }
        };
        stages.push(stage);
    }
    let ends_with_lstm = matches!(stages.last(), Some(Stage::Lstm(_)));
    let head_in = if ends_with_lstm {
        channels
    } else {
        channels * trace.last().copied().unwrap_or(1)
    };
    let head = LinearLayer::new(&mut store, "head", head_in, 1, &mut rng);
    Ok(Model {
        spec: spec.clone(),
        n_vertices: g.n_vertices(),
        stages,
        head,
        store,
    })
}

impl Model {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// Runs the stack on `x` of shape `[.., N, C_i, W]` recorded in `s`,
    /// returning `[.., N, 1]`.
    pub fn forward_var(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let rank = shape.len();
        let expected = [self.n_vertices, self.spec.input_channels, self.spec.window];
        if rank < 3 || shape[rank - 3..] != expected {
            return Err(Error::shape("model forward", &shape, &expected));
        }
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                Stage::Temporal(conv, bn) => {
                    let raw = conv.convolve(s, h)?;
                    let raw = match bn {
                        Some(bn) => bn.forward(s, raw)?,
                        None => raw,
                    };
                    s.tape.glu(raw)?
                }
                Stage::Cheb(conv, bn) => {
                    let y = conv.forward(s, h)?;
                    normalize_relu(s, y, bn.as_ref())?
                }
                Stage::FirstOrder(conv, bn) => {
                    let y = conv.forward(s, h)?;
                    normalize_relu(s, y, bn.as_ref())?
                }
                Stage::Lstm(lstm) => lstm.forward(s, h)?,
            };
        }
        if !matches!(self.stages.last(), Some(Stage::Lstm(_))) {
            // per-vertex features: channels x remaining time
            let shape = s.tape.shape(h).to_vec();
            let r = shape.len();
            let mut flat = shape[..r - 2].to_vec();
            flat.push(shape[r - 2] * shape[r - 1]);
            h = s.tape.reshape(h, &flat)?;
        }
        self.head.forward(s, h)
    }

    /// Prediction for a single window `[N, C_i, W]`, shape `[N, 1]`.
    ///
    /// Pure: in train mode batch norm uses the window's own statistics but
    /// running statistics are left untouched.
    pub fn forward(&self, window: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut s = Session::new(&self.store, mode, false);
        let x = s.tape.constant(window);
        let y = self.forward_var(&mut s, x)?;
        Ok(s.tape.tensor(y))
    }

    /// Batched prediction: `[B, N, C_i, W]` to `[B, N, 1]`, eval mode.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, Mode::Eval, false);
        let x = s.tape.constant(batch);
        let y = self.forward_var(&mut s, x)?;
        Ok(s.tape.tensor(y))
    }

    /// One train-mode pass: MSE loss against `targets` (`[B, N, 1]`),
    /// gradients written into the parameter store and running
    /// statistics updated. Returns the loss.
    pub fn train_step_grads(&mut self, batch: &Tensor, targets: &Tensor) -> Result<f64> {
        let mut s = Session::new(&self.store, Mode::Train, true);
        let x = s.tape.constant(batch);
        let t = s.tape.constant(targets);
        let y = self.forward_var(&mut s, x)?;
        let loss = s.tape.mse(y, t)?;
        let value = s.tape.value(loss)[0];
        s.tape.backward(loss)?;
        self.store.absorb_grads(&s)?;
        let updates = s.take_norm_updates();
        self.apply_norm_updates(&updates);
        Ok(value)
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        self.stages.iter_mut().filter_map(|st| match st {
            Stage::Temporal(_, bn) | Stage::Cheb(_, bn) | Stage::FirstOrder(_, bn) => bn.as_mut(),
            Stage::Lstm(_) => None,
        })
    }

    fn norms(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.stages.iter().filter_map(|st| match st {
            Stage::Temporal(_, bn) | Stage::Cheb(_, bn) | Stage::FirstOrder(_, bn) => bn.as_ref(),
            Stage::Lstm(_) => None,
        })
    }

    pub fn apply_norm_updates(&mut self, updates: &[(usize, crate::autodiff::BatchStats)]) {
        for (slot, stats) in updates {
            if let Some(bn) = self.norms_mut().find(|b| b.slot() == *slot) {
                bn.update_running(stats);
            }
        }
    }

    /// Parameters plus batch-norm running statistics.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        for (i, bn) in self.norms().enumerate() {
            if let Some(r) = &bn.running {
                let layer = format!("running_norm_{i}");
                ck.insert(&layer, "mean", &Tensor::from_vec(r.mean.clone()));
                ck.insert(&layer, "var", &Tensor::from_vec(r.var.clone()));
            }
        }
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into(&mut self.store)?;
        for (i, bn) in self.norms_mut().enumerate() {
            let layer = format!("running_norm_{i}");
            bn.running = match (ck.tensor(&layer, "mean"), ck.tensor(&layer, "var")) {
                (Ok(m), Ok(v)) => Some(RunningStats {
                    mean: m.into_data(),
                    var: v.into_data(),
                }),
                _ => None,
            };
        }
        Ok(())
    }
}

fn normalize_relu(s: &mut Session, y: Var, bn: Option<&BatchNormLayer>) -> Result<Var> {
    let y = match bn {
        Some(bn) => bn.forward(s, y)?,
        None => y,
    };
    Ok(s.tape.relu(y))
}
