//! Loss, Adam, the early-stopped training loop, evaluation and the
//! dataset x architecture benchmark grid.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{rolling_windows, stack_samples, TemporalGraphDataset, WindowSample};
use crate::error::{Error, Result};
use crate::models::{build_model, ArchitectureName, ArchitectureSpec, Model, SpecOverrides};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Which split early stopping watches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Chronological train/test split; the test split is monitored.
    #[default]
    TestSplit,
    /// 70/15/15 train/validation/test; the validation split is monitored.
    Holdout,
    /// Train/test split, monitoring training MSE (for fitting checks).
    TrainSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of samples in the training split.
    pub split_fraction: f64,
    /// Per-vertex z-scoring with training-split statistics.
    pub normalize: bool,
    pub monitor: Monitor,
    pub adam: AdamConfig,
    /// Stop as soon as the monitored MSE falls below this value.
    pub target_mse: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
            batch_size: 16,
            seed: 0,
            split_fraction: 0.8,
            normalize: true,
            monitor: Monitor::default(),
            adam: AdamConfig::default(),
            target_mse: None,
        }
    }
}

impl TrainConfig {
    /// A learning rate of 0 and zero epochs are accepted: both are useful
    /// boundary runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad(format!("adam betas must lie in [0, 1) and eps be positive, got {a:?}"));
        }
        Ok(())
    }
}

/// Mean squared error between two equally shaped tensors.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    if pred.numel() == 0 {
        return Err(Error::invalid("mse_loss", "empty tensors"));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / pred.numel() as f64)
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update in place. `step` is the 1-based count
/// of updates including this one.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamMoments, step: u64, lr: f64, cfg: &AdamConfig) {
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies the gradients stored on each tensor; tensors without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        if self.moments.len() != store.len() {
            self.moments = vec![AdamMoments::default(); store.len()];
        }
        for (id, state) in store.ids().collect::<Vec<_>>().into_iter().zip(&mut self.moments) {
            let t = store.get_mut(id);
            let grad = t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            adam_step(t.data_mut(), &grad, state, self.step, self.lr, &self.cfg);
        }
    }
}

/// Chronological partition of the window samples.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<WindowSample>,
    /// Present only for [`Monitor::Holdout`].
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl Split {
    pub fn monitored(&self, monitor: Monitor) -> &[WindowSample] {
        match monitor {
            Monitor::TestSplit => &self.test,
            Monitor::Holdout => &self.validation,
            Monitor::TrainSplit => &self.train,
        }
    }
}

fn split_counts(n: usize, cfg: &TrainConfig) -> Result<(usize, usize)> {
    let min = if cfg.monitor == Monitor::Holdout { 3 } else { 2 };
    if n < min {
        return Err(Error::InvalidDataset(format!("{n} samples cannot be split into {min} non-empty parts")));
    }
    if cfg.monitor == Monitor::Holdout {
        let train = ((0.70 * n as f64).floor() as usize).clamp(1, n - 2);
        let val = ((0.15 * n as f64).floor() as usize).clamp(1, n - train - 1);
        Ok((train, val))
    } else {
        let train = ((cfg.split_fraction * n as f64).floor() as usize).clamp(1, n - 1);
        Ok((train, 0))
    }
}

/// Optionally normalizes the dataset with statistics of the training
/// columns, then windows and splits it.
pub fn prepare(ds: &TemporalGraphDataset, cfg: &TrainConfig) -> Result<(TemporalGraphDataset, Split)> {
    let (n_train, n_val) = split_counts(ds.sample_count(), cfg)?;
    let ds = if cfg.normalize {
        // training samples read columns [0, n_train + W)
        ds.normalized(&ds.zscore_fit(n_train + ds.window))
    } else {
        ds.clone()
    };
    let mut samples = rolling_windows(&ds);
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);
    Ok((
        ds,
        Split {
            train: samples,
            validation,
            test,
        },
    ))
}

const EVAL_CHUNK: usize = 64;

/// Mean per-sample MSE in eval mode.
pub fn evaluate(model: &Model, samples: &[WindowSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidDataset("cannot evaluate on an empty sample list".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let (x, y) = stack_samples(chunk)?;
        let pred = model.predict(&x)?;
        // every sample has the same element count, so the chunk mean
        // weighted by its length sums to the per-sample mean
        total += mse_loss(&pred, &y)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model_name: String,
    pub dataset_name: String,
    pub train_mse: f64,
    pub test_mse: f64,
    pub wall_time_seconds: f64,
    pub epochs_run: usize,
    /// `test_mse / train_mse`, NaN when the training MSE is zero.
    pub overfit_ratio: f64,
    /// Training MSE of the untrained model.
    pub initial_train_mse: f64,
    /// Epoch whose parameters were restored (0 when untrained).
    pub best_epoch: usize,
    /// Set when the cell failed; the numeric fields are then NaN.
    pub error: Option<String>,
}

impl ExperimentResult {
    fn failed(model: &str, dataset: &str, err: &Error) -> Self {
        Self {
            model_name: model.to_owned(),
            dataset_name: dataset.to_owned(),
            train_mse: f64::NAN,
            test_mse: f64::NAN,
            wall_time_seconds: 0.0,
            epochs_run: 0,
            overfit_ratio: f64::NAN,
            initial_train_mse: f64::NAN,
            best_epoch: 0,
            error: Some(err.to_string()),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

pub fn overfit_ratio(train_mse: f64, test_mse: f64) -> f64 {
    if train_mse > 0.0 {
        test_mse / train_mse
    } else {
        f64::NAN
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    pub monitored_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub result: ExperimentResult,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch Adam over chronological batches with early stopping on the
/// monitored split; the best epoch's model is restored before the final
/// evaluation.
pub fn train(model: Model, ds: &TemporalGraphDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.spec().window != ds.window {
        return Err(Error::InvalidConfig(format!(
            "model expects window {} but dataset '{}' uses {}",
            model.spec().window,
            ds.name,
            ds.window
        )));
    }
    if model.n_vertices() != ds.n_vertices() {
        return Err(Error::InvalidConfig(format!(
            "model has {} vertices but dataset '{}' has {}",
            model.n_vertices(),
            ds.name,
            ds.n_vertices()
        )));
    }
    let (_, split) = prepare(ds, cfg)?;
    let monitored = split.monitored(cfg.monitor);
    let batches: Vec<(Tensor, Tensor)> = split.train.chunks(cfg.batch_size).map(stack_samples).collect::<Result<_>>()?;

    let initial_train_mse = evaluate(&model, &split.train)?;
    let mut model = model;
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut history = Vec::new();
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam.clone());
    let mut stale = 0;
    let mut epochs_run = 0;

    let clock = Instant::now();
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for (x, y) in &batches {
            let loss = model.train_step_grads(x, y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            adam.step(model.params_mut());
            loss_sum += loss;
        }
        let mse = evaluate(&model, monitored)?;
        if !mse.is_finite() {
            return Err(Error::Divergence { epoch, loss: mse });
        }
        epochs_run = epoch;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            monitored_mse: mse,
        });
        if mse < best.0 {
            best = (mse, epoch, model.clone());
            stale = 0;
            if cfg.target_mse.is_some_and(|t| mse < t) {
                break;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let wall_time_seconds = clock.elapsed().as_secs_f64();

    let (best_epoch, mut model) = if epochs_run == 0 { (0, model) } else { (best.1, best.2) };
    model.params_mut().clear_grads();
    let train_mse = evaluate(&model, &split.train)?;
    let test_mse = evaluate(&model, &split.test)?;
    let result = ExperimentResult {
        model_name: model.spec().name.as_str().to_owned(),
        dataset_name: ds.name.clone(),
        train_mse,
        test_mse,
        wall_time_seconds,
        epochs_run,
        overfit_ratio: overfit_ratio(train_mse, test_mse),
        initial_train_mse,
        best_epoch,
        error: None,
    };
    Ok(TrainOutcome { model, result, history })
}

/// Seed of grid cell `(dataset, architecture)`.
pub fn cell_seed(seed: u64, dataset_index: usize, arch_index: usize) -> u64 {
    seed.wrapping_add(((dataset_index as u64) << 32 | arch_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains every architecture on every dataset. Cells run on the current
/// rayon pool; a failing cell becomes an error row. Rows are ordered by
/// dataset, then architecture.
pub fn run_benchmark(
    datasets: &[TemporalGraphDataset],
    architectures: &[ArchitectureName],
    overrides: &SpecOverrides,
    cfg: &TrainConfig,
) -> Vec<ExperimentResult> {
    let cells: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|d| (0..architectures.len()).map(move |a| (d, a)))
        .collect();
    cells
        .par_iter()
        .map(|&(d, a)| {
            let ds = &datasets[d];
            let arch = architectures[a];
            let run = || -> Result<ExperimentResult> {
                let spec = ArchitectureSpec::canonical(arch, ds.window, overrides)?;
                let model = build_model(&spec, &ds.graph, cell_seed(cfg.seed, d, a))?;
                Ok(train(model, ds, cfg)?.result)
            };
            run().unwrap_or_else(|e| ExperimentResult::failed(arch.as_str(), &ds.name, &e))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitSummary {
    pub model_name: String,
    pub mean_overfit_ratio: f64,
    /// Successful cells entering the mean.
    pub cells: usize,
}

/// Mean overfit ratio per model over its successful, finite cells, in
/// first-appearance order.
pub fn overfit_summary(results: &[ExperimentResult]) -> Vec<OverfitSummary> {
    let mut out: Vec<OverfitSummary> = Vec::new();
    for r in results {
        if !out.iter().any(|s| s.model_name == r.model_name) {
            out.push(OverfitSummary {
                model_name: r.model_name.clone(),
                mean_overfit_ratio: f64::NAN,
                cells: 0,
            });
        }
    }
    for s in &mut out {
        let ratios: Vec<f64> = results
            .iter()
            .filter(|r| r.model_name == s.model_name && r.succeeded() && r.overfit_ratio.is_finite())
            .map(|r| r.overfit_ratio)
            .collect();
        s.cells = ratios.len();
        if !ratios.is_empty() {
            s.mean_overfit_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        }
    }
    out
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Error::Csv {
        context: "results".into(),
        source: e,
    })?;
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Deterministic results CSV. Wall time is deliberately absent (see
/// [`timings_csv`]) so that reruns are byte-identical.
pub fn results_csv(results: &[ExperimentResult]) -> Result<String> {
    csv_string(|w| {
        w.write_record([
            "dataset",
            "model",
            "train_mse",
            "test_mse",
            "epochs",
            "overfit_ratio",
            "initial_train_mse",
            "best_epoch",
            "status",
        ])?;
        for r in results {
            w.write_record([
                r.dataset_name.clone(),
                r.model_name.clone(),
                r.train_mse.to_string(),
                r.test_mse.to_string(),
                r.epochs_run.to_string(),
                r.overfit_ratio.to_string(),
                r.initial_train_mse.to_string(),
                r.best_epoch.to_string(),
                r.error.clone().map_or_else(|| "ok".to_owned(), |e| format!("error: {e}")),
            ])?;
        }
        Ok(())
    })
}

pub fn timings_csv(results: &[ExperimentResult]) -> Result<String> {
    csv_string(|w| {
        w.write_record(["dataset", "model", "wall_time_s"])?;
        for r in results {
            w.write_record([r.dataset_name.clone(), r.model_name.clone(), format!("{:.6}", r.wall_time_seconds)])?;
        }
        Ok(())
    })
}

pub fn overfit_csv(summary: &[OverfitSummary]) -> Result<String> {
    csv_string(|w| {
        w.write_record(["model", "mean_overfit_ratio", "cells"])?;
        for s in summary {
            w.write_record([s.model_name.clone(), s.mean_overfit_ratio.to_string(), s.cells.to_string()])?;
        }
        Ok(())
    })
}

/// Aligned text table: one row per dataset, one column per model, cells
/// `train / test / seconds`, followed by the mean overfit ratio row.
pub fn render_table(results: &[ExperimentResult]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in results {
        if !datasets.contains(&r.dataset_name.as_str()) {
            datasets.push(&r.dataset_name);
        }
        if !models.contains(&r.model_name.as_str()) {
            models.push(&r.model_name);
        }
    }
    let cell = |d: &str, m: &str| -> String {
        match results.iter().find(|r| r.dataset_name == d && r.model_name == m) {
            Some(r) if r.succeeded() => {
                format!("{:.4} / {:.4} / {:.2}s", r.train_mse, r.test_mse, r.wall_time_seconds)
            }
            Some(_) => "failed".to_owned(),
            None => "-".to_owned(),
        }
    };
    let summary = overfit_summary(results);
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("dataset".to_owned())
        .chain(models.iter().map(|m| m.to_string()))
        .collect()];
    for d in &datasets {
        rows.push(std::iter::once(d.to_string()).chain(models.iter().map(|m| cell(d, m))).collect());
    }
    rows.push(
        std::iter::once("mean overfit ratio".to_owned())
            .chain(models.iter().map(|m| {
                summary
                    .iter()
                    .find(|s| s.model_name == *m)
                    .filter(|s| s.cells > 0)
                    .map_or_else(|| "-".to_owned(), |s| format!("{:.2}", s.mean_overfit_ratio))
            }))
            .collect(),
    );
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    out.push_str("cells: train MSE / test MSE / wall time\n");
    out
}
