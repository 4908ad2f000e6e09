//! Neural building blocks.
//!
//! Activations flow as `[.., N, C, T]` tensors: vertices, channels, time,
//! with any number of leading batch axes. Graph layers mix the vertex axis
//! independently per time step; temporal layers run along the time axis
//! independently per vertex. Both share parameters across the other axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, NormStats, Var};
use crate::error::{Error, Result};
use crate::graph::{cheb_basis, renormalized_adjacency, SpectralOperators, WeightedGraph};
use crate::params::{glorot_uniform, Mode, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

fn expect_vertex_channels(s: &Session, x: Var, op: &'static str, n: usize, c: usize) -> Result<usize> {
    let shape = s.tape.shape(x);
    let rank = shape.len();
    if rank < 3 || shape[rank - 3] != n || shape[rank - 2] != c {
        return Err(Error::invalid(
            op,
            format!("expected [.., {n} vertices, {c} channels, T], got {shape:?}"),
        ));
    }
    Ok(rank)
}

/// Chebyshev graph convolution of order `K`:
/// `sum_k T_k(L~) X W_k + b` for each time slice.
#[derive(Clone, Debug)]
pub struct ChebConvLayer {
    pub order: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<ParamId>,
    pub bias: ParamId,
    operator: Tensor,
}

impl ChebConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spectral: &SpectralOperators,
        c_in: usize,
        c_out: usize,
        order: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = (0..=order)
            .map(|k| store.add(name, &format!("theta_{k}"), glorot_uniform(&[c_in, c_out], c_in, c_out, rng)))
            .collect();
        let bias = store.add(name, "bias", Tensor::zeros(&[c_out]));
        Self {
            order,
            c_in,
            c_out,
            weights,
            bias,
            operator: spectral.scaled_laplacian.clone(),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.operator.shape()[0]
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let rank = expect_vertex_channels(s, x, "cheb_conv", self.n_vertices(), self.c_in)?;
        let op = s.tape.constant(&self.operator);
        let basis = cheb_basis(&mut s.tape, op, x, rank - 3, self.order)?;
        let mut acc: Option<Var> = None;
        for (tk, &w) in basis.into_iter().zip(&self.weights) {
            let term = s.tape.contract(tk, s.param(w), rank - 2)?;
            acc = Some(match acc {
                Some(a) => s.tape.add(a, term)?,
                None => term,
            });
        }
        let out = acc.expect("order >= 0 gives at least one term");
        s.tape.add_bias(out, s.param(self.bias), rank - 2)
    }
}

/// First-order graph convolution with the self-loop renormalized adjacency:
/// `A^ X Theta + b` per time slice.
#[derive(Clone, Debug)]
pub struct FirstOrderConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub renorm_adjacency: Tensor,
}

impl FirstOrderConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        graph: &WeightedGraph,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(name, "theta", glorot_uniform(&[c_in, c_out], c_in, c_out, rng));
        let bias = store.add(name, "bias", Tensor::zeros(&[c_out]));
        Self {
            c_in,
            c_out,
            weight,
            bias,
            renorm_adjacency: renormalized_adjacency(graph),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = self.renorm_adjacency.shape()[0];
        let rank = expect_vertex_channels(s, x, "first_order_conv", n, self.c_in)?;
        let a = s.tape.constant(&self.renorm_adjacency);
        let mixed = s.tape.contract(x, a, rank - 3)?;
        let out = s.tape.contract(mixed, s.param(self.weight), rank - 2)?;
        s.tape.add_bias(out, s.param(self.bias), rank - 2)
    }
}

/// Gated temporal convolution: a `1 x k` valid convolution producing
/// `2 C_out` channels, halved by a GLU.
#[derive(Clone, Debug)]
pub struct TemporalGatedConvLayer {
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernels: ParamId,
    pub bias: ParamId,
}

impl TemporalGatedConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [2 * c_out, c_in, kernel_size];
        let kernels = store.add(
            name,
            "kernels",
            glorot_uniform(&shape, c_in * kernel_size, 2 * c_out * kernel_size, rng),
        );
        let bias = store.add(name, "bias", Tensor::zeros(&[2 * c_out]));
        Self {
            kernel_size,
            c_in,
            c_out,
            kernels,
            bias,
        }
    }

    /// The raw `2 C_out` channel convolution, before gating.
    pub fn convolve(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        let rank = shape.len();
        if rank < 2 || shape[rank - 2] != self.c_in {
            return Err(Error::invalid(
                "temporal_conv",
                format!("expected [.., {} channels, T], got {shape:?}", self.c_in),
            ));
        }
        s.tape.conv1d_valid(x, s.param(self.kernels), s.param(self.bias))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let raw = self.convolve(s, x)?;
        s.tape.glu(raw)
    }
}

/// Standard LSTM run along the time axis of every vertex with shared
/// weights; returns the final hidden state `[.., N, H]`.
#[derive(Clone, Debug)]
pub struct LstmBlock {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Input weights for the input, forget, cell and output gates.
    pub w_input: [ParamId; 4],
    pub w_recurrent: [ParamId; 4],
    pub bias: [ParamId; 4],
}

const GATES: [&str; 4] = ["input", "forget", "cell", "output"];

impl LstmBlock {
    pub fn new(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let (i, h) = (input_size, hidden_size);
        let w_input = GATES.map(|g| store.add(name, &format!("w_{g}"), glorot_uniform(&[i, h], i, h, rng)));
        let w_recurrent = GATES.map(|g| store.add(name, &format!("u_{g}"), glorot_uniform(&[h, h], h, h, rng)));
        let bias = GATES.map(|g| {
            let init = if g == "forget" { 1.0 } else { 0.0 };
            store.add(name, &format!("b_{g}"), Tensor::full(&[h], init))
        });
        Self {
            input_size,
            hidden_size,
            w_input,
            w_recurrent,
            bias,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let rank = shape.len();
        if rank < 3 || shape[rank - 2] != self.input_size {
            return Err(Error::invalid(
                "lstm",
                format!("expected [.., N, {} inputs, T], got {shape:?}", self.input_size),
            ));
        }
        let steps = shape[rank - 1];
        let mut hidden: Option<Var> = None;
        let mut cell: Option<Var> = None;
        for t in 0..steps {
            let xt = s.tape.select(x, rank - 1, t)?;
            let gate = |g: usize, s: &mut Session| -> Result<Var> {
                let mut z = s.tape.contract(xt, s.param(self.w_input[g]), rank - 2)?;
                if let Some(h) = hidden {
                    let r = s.tape.contract(h, s.param(self.w_recurrent[g]), rank - 2)?;
                    z = s.tape.add(z, r)?;
                }
                s.tape.add_bias(z, s.param(self.bias[g]), rank - 2)
            };
            let zi = gate(0, s)?;
            let zf = gate(1, s)?;
            let zc = gate(2, s)?;
            let zo = gate(3, s)?;
            let i = s.tape.sigmoid(zi);
            let f = s.tape.sigmoid(zf);
            let g = s.tape.tanh(zc);
            let o = s.tape.sigmoid(zo);
            let ig = s.tape.mul(i, g)?;
            let c = match cell {
                Some(prev) => {
                    let kept = s.tape.mul(f, prev)?;
                    s.tape.add(kept, ig)?
                }
                None => ig,
            };
            let tc = s.tape.tanh(c);
            hidden = Some(s.tape.mul(o, tc)?);
            cell = Some(c);
        }
        hidden.ok_or_else(|| Error::invalid("lstm", "empty time axis"))
    }
}

/// `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            name,
            "weight",
            glorot_uniform(&[in_features, out_features], in_features, out_features, rng),
        );
        let bias = store.add(name, "bias", Tensor::zeros(&[out_features]));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        let last = shape.len() - 1;
        if shape[last] != self.in_features {
            return Err(Error::shape("linear", shape, &[self.in_features, self.out_features]));
        }
        let y = s.tape.contract(x, s.param(self.weight), last)?;
        s.tape.add_bias(y, s.param(self.bias), last)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over the channel axis of `[.., C, T]` activations.
///
/// Running statistics are seeded from the first training batch and then
/// follow `r += momentum * (batch - r)`. Before any training pass, eval
/// mode normalizes with zero mean and unit variance.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub running: Option<RunningStats>,
    slot: usize,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, slot: usize) -> Self {
        let gamma = store.add(name, "gamma", Tensor::full(&[channels], 1.0));
        let beta = store.add(name, "beta", Tensor::zeros(&[channels]));
        Self {
            channels,
            gamma,
            beta,
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
            running: None,
            slot,
        }
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let rank = s.tape.shape(x).len();
        if rank < 2 {
            return Err(Error::invalid("batch_norm", "needs a [.., C, T] input"));
        }
        let (gamma, beta) = (s.param(self.gamma), s.param(self.beta));
        let identity_mean = vec![0.0; self.channels];
        let identity_var = vec![1.0; self.channels];
        let stats = match (s.mode(), &self.running) {
            (Mode::Train, _) => NormStats::Batch,
            (Mode::Eval, Some(r)) => NormStats::Fixed {
                mean: &r.mean,
                var: &r.var,
            },
            (Mode::Eval, None) => NormStats::Fixed {
                mean: &identity_mean,
                var: &identity_var,
            },
        };
        let (y, observed) = s.tape.batch_norm(x, gamma, beta, rank - 2, self.eps, stats)?;
        if let Some(obs) = observed {
            s.record_norm_stats(self.slot, obs);
        }
        Ok(y)
    }

    pub fn update_running(&mut self, batch: &BatchStats) {
        match &mut self.running {
            None => {
                self.running = Some(RunningStats {
                    mean: batch.mean.clone(),
                    var: batch.var.clone(),
                })
            }
            Some(r) => {
                let m = self.momentum;
                r.mean.iter_mut().zip(&batch.mean).for_each(|(a, b)| *a += m * (b - *a));
                r.var.iter_mut().zip(&batch.var).for_each(|(a, b)| *a += m * (b - *a));
            }
        }
    }
}
