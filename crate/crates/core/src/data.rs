//! Temporal graph datasets: file format, rolling windows, finance-graph
//! construction from a news coverage matrix, and synthetic generators.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{GraphFile, WeightedGraph};
use crate::tensor::Tensor;

/// A static graph with one time series per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraphDataset {
    pub graph: WeightedGraph,
    features: Vec<f64>,
    t_total: usize,
    pub window: usize,
    pub name: String,
}

impl TemporalGraphDataset {
    /// `features` holds one row of `T_total` values per vertex.
    pub fn new(graph: WeightedGraph, features: Vec<Vec<f64>>, window: usize, name: impl Into<String>) -> Result<Self> {
        let n = graph.n_vertices();
        if features.len() != n {
            return Err(Error::InvalidDataset(format!(
                "features have {} rows but the graph has {n} vertices",
                features.len()
            )));
        }
        let t_total = features[0].len();
        for (v, row) in features.iter().enumerate() {
            if row.len() != t_total {
                return Err(Error::InvalidDataset(format!(
                    "feature row {v} has {} steps, row 0 has {t_total}",
                    row.len()
                )));
            }
            if let Some(t) = row.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "feature at (vertex {v}, time {t}) is {}",
                    row[t]
                )));
            }
        }
        if window == 0 || t_total <= window {
            return Err(Error::InvalidDataset(format!(
                "window {window} leaves no samples in a series of length {t_total}"
            )));
        }
        Ok(Self {
            graph,
            features: features.concat(),
            t_total,
            window,
            name: name.into(),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.graph.n_vertices()
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    pub fn sample_count(&self) -> usize {
        self.t_total - self.window
    }

    pub fn feature(&self, vertex: usize, t: usize) -> f64 {
        self.features[vertex * self.t_total + t]
    }

    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.features.chunks(self.t_total).map(<[f64]>::to_vec).collect()
    }

    /// Features as an `[N, T_total]` tensor.
    pub fn features(&self) -> Tensor {
        Tensor::new(vec![self.n_vertices(), self.t_total], self.features.clone()).expect("validated")
    }

    pub fn with_window(&self, window: usize) -> Result<Self> {
        Self::new(self.graph.clone(), self.feature_rows(), window, self.name.clone())
    }

    pub fn with_graph(&self, graph: WeightedGraph) -> Result<Self> {
        Self::new(graph, self.feature_rows(), self.window, self.name.clone())
    }

    /// Relabels vertices so that old vertex `perm[v]` becomes vertex `v`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let graph = self.graph.permuted(perm)?;
        let rows = self.feature_rows();
        let rows = perm.iter().map(|&p| rows[p].clone()).collect();
        Self::new(graph, rows, self.window, self.name.clone())
    }

    /// Per-vertex z-scoring with statistics from columns `[0, fit_columns)`.
    pub fn zscore_fit(&self, fit_columns: usize) -> ZScore {
        let cols = fit_columns.clamp(1, self.t_total);
        let mut mean = Vec::with_capacity(self.n_vertices());
        let mut std = Vec::with_capacity(self.n_vertices());
        for row in self.features.chunks(self.t_total) {
            let head = &row[..cols];
            let m = head.iter().sum::<f64>() / cols as f64;
            let v = head.iter().map(|x| (x - m).powi(2)).sum::<f64>() / cols as f64;
            mean.push(m);
            // flat series keep their scale
            std.push(if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        }
        ZScore { mean, std }
    }

    pub fn normalized(&self, z: &ZScore) -> Self {
        let mut out = self.clone();
        for (v, row) in out.features.chunks_mut(self.t_total).enumerate() {
            row.iter_mut().for_each(|x| *x = (*x - z.mean[v]) / z.std[v]);
        }
        out
    }

    pub fn to_file(&self) -> DatasetFile {
        DatasetFile {
            name: self.name.clone(),
            window: self.window,
            graph: self.graph.to_file(),
            features: self
                .feature_rows()
                .into_iter()
                .map(|r| r.into_iter().map(FeatureCell::Value).collect())
                .collect(),
        }
    }

    pub fn from_file(file: DatasetFile) -> Result<Self> {
        let graph = WeightedGraph::from_file(&file.graph)?;
        let mut rows = Vec::with_capacity(file.features.len());
        for (v, row) in file.features.into_iter().enumerate() {
            let mut out = Vec::with_capacity(row.len());
            for (t, cell) in row.into_iter().enumerate() {
                match cell.as_f64() {
                    Some(x) if x.is_finite() => out.push(x),
                    _ => {
                        return Err(Error::InvalidDataset(format!(
                            "features[{v}][{t}] (vertex {v}, time {t}) is {cell}, not a finite number"
                        )))
                    }
                }
            }
            rows.push(out);
        }
        Self::new(graph, rows, file.window, file.name)
    }
}

/// Per-vertex affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A feature entry as written on disk. Non-finite values arrive as `null`
/// or strings such as `"NaN"` and are rejected during validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureCell {
    Value(f64),
    Other(Value),
}

impl FeatureCell {
    fn as_f64(&self) -> Option<f64> {
        match self {
            FeatureCell::Value(x) => Some(*x),
            FeatureCell::Other(Value::String(s)) => s.parse().ok(),
            FeatureCell::Other(_) => None,
        }
    }
}

impl std::fmt::Display for FeatureCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureCell::Value(x) => write!(f, "{x}"),
            FeatureCell::Other(v) => write!(f, "{v}"),
        }
    }
}

/// `{"name", "window", "graph": {n, labels, edges}, "features": [[..], ..]}`
/// with one feature row per vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub name: String,
    pub window: usize,
    pub graph: GraphFile,
    pub features: Vec<Vec<FeatureCell>>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TemporalGraphDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_dataset(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::Json {
            context: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn parse_dataset(text: &str) -> Result<TemporalGraphDataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Json {
        context: "dataset".into(),
        source: e,
    })?;
    TemporalGraphDataset::from_file(file)
}

pub fn save_dataset(ds: &TemporalGraphDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&ds.to_file()).map_err(|e| Error::Json {
        context: "dataset".into(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// One model input and its one-step-ahead target.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[N, 1, W]`
    pub input: Tensor,
    /// `[N, 1]`
    pub target: Tensor,
    /// Column of the first input step.
    pub start: usize,
}

/// All stride-1 windows in chronological order: sample `i` reads columns
/// `[i, i + W)` and targets column `i + W`.
pub fn rolling_windows(ds: &TemporalGraphDataset) -> Vec<WindowSample> {
    let (n, w) = (ds.n_vertices(), ds.window);
    (0..ds.sample_count())
        .map(|start| {
            let mut input = Vec::with_capacity(n * w);
            let mut target = Vec::with_capacity(n);
            for v in 0..n {
                let row = &ds.features[v * ds.t_total..(v + 1) * ds.t_total];
                input.extend_from_slice(&row[start..start + w]);
                target.push(row[start + w]);
            }
            WindowSample {
                input: Tensor::new(vec![n, 1, w], input).expect("window shape"),
                target: Tensor::new(vec![n, 1], target).expect("target shape"),
                start,
            }
        })
        .collect()
}

/// Stacks samples into a `[B, N, 1, W]` batch and `[B, N, 1]` targets.
pub fn stack_samples(samples: &[WindowSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidDataset("cannot stack an empty sample list".into()))?;
    let b = samples.len();
    let mut input = Vec::with_capacity(b * first.input.numel());
    let mut target = Vec::with_capacity(b * first.target.numel());
    for s in samples {
        if s.input.shape() != first.input.shape() {
            return Err(Error::shape("stack_samples", first.input.shape(), s.input.shape()));
        }
        input.extend_from_slice(s.input.data());
        target.extend_from_slice(s.target.data());
    }
    let mut in_shape = vec![b];
    in_shape.extend_from_slice(first.input.shape());
    let mut t_shape = vec![b];
    t_shape.extend_from_slice(first.target.shape());
    Ok((Tensor::new(in_shape, input)?, Tensor::new(t_shape, target)?))
}

/// Binary company x article mention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageMatrix {
    pub companies: Vec<String>,
    pub articles: usize,
    entries: Vec<Vec<u8>>,
}

impl CoverageMatrix {
    pub fn new(companies: Vec<String>, entries: Vec<Vec<u8>>) -> Result<Self> {
        if companies.len() != entries.len() {
            return Err(Error::InvalidDataset(format!(
                "{} company labels for {} coverage rows",
                companies.len(),
                entries.len()
            )));
        }
        let articles = entries.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        for (c, row) in companies.iter().zip(&entries) {
            if !seen.insert(c) {
                return Err(Error::InvalidDataset(format!("duplicate company label '{c}'")));
            }
            if row.len() != articles {
                return Err(Error::InvalidDataset(format!("coverage row '{c}' has {} articles, expected {articles}", row.len())));
            }
            if let Some(j) = row.iter().position(|&m| m > 1) {
                return Err(Error::InvalidDataset(format!("coverage entry ('{c}', article {j}) must be 0 or 1")));
            }
        }
        Ok(Self {
            companies,
            articles,
            entries,
        })
    }

    pub fn entries(&self) -> &[Vec<u8>] {
        &self.entries
    }

    /// Cosine similarity of two company rows; 0 when either row is empty.
    pub fn cosine_similarity(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.entries[i], &self.entries[j]);
        let dot: u64 = a.iter().zip(b).map(|(&x, &y)| u64::from(x & y)).sum();
        let na: u64 = a.iter().map(|&x| u64::from(x)).sum();
        let nb: u64 = b.iter().map(|&x| u64::from(x)).sum();
        if na == 0 || nb == 0 {
            return 0.0;
        }
        dot as f64 / ((na as f64).sqrt() * (nb as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `1 - cos(m_i, m_j)`
    #[default]
    CosineDistance,
    /// `cos(m_i, m_j)`
    CosineSimilarity,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "cosine_distance" => Ok(Self::CosineDistance),
            "cosine_similarity" => Ok(Self::CosineSimilarity),
            _ => Err(Error::InvalidConfig(format!(
                "unknown distance mode '{s}' (use cosine_distance or cosine_similarity)"
            ))),
        }
    }
}

/// Finance dataset: vertices are companies, edge weights come from their
/// coverage rows, features are the per-company return series.
pub fn build_finance_graph(
    m: &CoverageMatrix,
    returns: &[Vec<f64>],
    mode: DistanceMode,
    window: usize,
    name: &str,
) -> Result<TemporalGraphDataset> {
    let n = m.companies.len();
    if returns.len() != n {
        return Err(Error::InvalidDataset(format!(
            "coverage matrix has {n} companies but returns have {} rows",
            returns.len()
        )));
    }
    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let sim = m.cosine_similarity(i, j);
            let w = match mode {
                DistanceMode::CosineSimilarity => sim,
                DistanceMode::CosineDistance => 1.0 - sim,
            };
            // rounding can leave tiny negatives for identical rows
            let w = w.clamp(0.0, 1.0);
            adjacency[i * n + j] = w;
            adjacency[j * n + i] = w;
        }
    }
    let graph = WeightedGraph::new(n, adjacency, Some(m.companies.clone()))?;
    TemporalGraphDataset::new(graph, returns.to_vec(), window, name)
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            context: path.display().to_string(),
            source: e,
        })
}

/// Reads a labelled CSV: a header row, then `label,v1,v2,...` per row.
fn read_labelled_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = open_csv(path)?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            context: path.display().to_string(),
            source: e,
        })?;
        let mut it = rec.iter();
        labels.push(it.next().unwrap_or_default().to_owned());
        rows.push(it.map(str::to_owned).collect());
    }
    Ok((labels, rows))
}

/// Coverage CSV: header `company,<article ids...>`, then one 0/1 row per
/// company.
pub fn read_coverage_csv(path: impl AsRef<Path>) -> Result<CoverageMatrix> {
    let path = path.as_ref();
    let (labels, rows) = read_labelled_rows(path)?;
    let mut entries = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let parsed: Result<Vec<u8>> = row
            .iter()
            .enumerate()
            .map(|(c, v)| match v.as_str() {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(Error::InvalidDataset(format!(
                    "{}: row {} column {} holds '{v}', expected 0 or 1",
                    path.display(),
                    r + 2,
                    c + 2
                ))),
            })
            .collect();
        entries.push(parsed?);
    }
    CoverageMatrix::new(labels, entries)
}

/// Returns CSV: header `company,<day ids...>`, then one row per company.
pub fn read_returns_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let (labels, rows) = read_labelled_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let parsed: Result<Vec<f64>> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.parse::<f64>().map_err(|_| {
                    Error::InvalidDataset(format!("{}: row {} column {} holds '{v}'", path.display(), r + 2, c + 2))
                })
            })
            .collect();
        out.push(parsed?);
    }
    Ok((labels, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Graph-coupled first-order autoregression.
    Ar1,
    /// Phase-shifted sinusoids smoothed over the graph.
    Seasonal,
    /// Independent Gaussian noise.
    Noise,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [SyntheticKind::Ar1, SyntheticKind::Seasonal, SyntheticKind::Noise];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Ar1 => "ar1",
            SyntheticKind::Seasonal => "seasonal",
            SyntheticKind::Noise => "noise",
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown synthetic kind '{s}' (ar1, seasonal, noise)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub graph_density: f64,
    pub window: usize,
    /// Weight on the series' own previous value (ar1).
    pub persistence: f64,
    /// Weight on the weighted neighbour mean (ar1, seasonal).
    pub coupling: f64,
    pub noise_std: f64,
    /// Season length in steps (seasonal).
    pub period: usize,
}

impl SyntheticConfig {
    pub fn new(kind: SyntheticKind, n: usize, t: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            t,
            seed,
            graph_density: 0.4,
            window: 8,
            persistence: 0.5,
            coupling: 0.4,
            noise_std: 0.3,
            period: 12,
        }
    }
}

const GRAPH_STREAM: u64 = 1;
const SERIES_STREAM: u64 = 2;

/// Random graph plus series, fully determined by the config. The graph
/// and the series draw from separate random streams, so with zero
/// coupling the series do not depend on the graph at all.
pub fn synthetic_generate(cfg: &SyntheticConfig) -> Result<TemporalGraphDataset> {
    if cfg.n < 2 || cfg.t < 8 {
        return Err(Error::InvalidConfig(format!(
            "synthetic data needs n >= 2 and t >= 8 (got n = {}, t = {})",
            cfg.n, cfg.t
        )));
    }
    if !(0.0..=1.0).contains(&cfg.graph_density) {
        return Err(Error::InvalidConfig(format!("graph density {} outside [0, 1]", cfg.graph_density)));
    }
    if cfg.kind == SyntheticKind::Seasonal && cfg.period == 0 {
        return Err(Error::InvalidConfig("season period must be positive".into()));
    }
    let n = cfg.n;
    let mut grng = ChaCha8Rng::seed_from_u64(cfg.seed);
    grng.set_stream(GRAPH_STREAM);
    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let keep = grng.random::<f64>() < cfg.graph_density;
            let w = grng.random_range(0.5..1.5);
            if keep {
                adjacency[i * n + j] = w;
                adjacency[j * n + i] = w;
            }
        }
    }
    let graph = WeightedGraph::new(n, adjacency, None)?;
    let degree = graph.degrees();
    let neighbour_mean = |x: &[f64], i: usize| -> f64 {
        if degree[i] == 0.0 {
            return 0.0;
        }
        (0..n).map(|j| graph.weight(i, j) * x[j]).sum::<f64>() / degree[i]
    };

    let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
    srng.set_stream(SERIES_STREAM);
    let mut normal = move || -> f64 { srng.sample(StandardNormal) };
    let mut series = vec![vec![0.0; cfg.t]; n];
    match cfg.kind {
        SyntheticKind::Noise => {
            for t in 0..cfg.t {
                for row in series.iter_mut() {
                    row[t] = normal();
                }
            }
        }
        SyntheticKind::Ar1 => {
            let mut x: Vec<f64> = (0..n).map(|_| normal()).collect();
            for t in 0..cfg.t {
                for (v, row) in series.iter_mut().enumerate() {
                    row[t] = x[v];
                }
                let next: Vec<f64> = (0..n)
                    .map(|i| cfg.persistence * x[i] + cfg.coupling * neighbour_mean(&x, i) + cfg.noise_std * normal())
                    .collect();
                x = next;
            }
        }
        SyntheticKind::Seasonal => {
            let phase: Vec<f64> = (0..n).map(|_| normal() * std::f64::consts::PI).collect();
            let omega = 2.0 * std::f64::consts::PI / cfg.period as f64;
            for t in 0..cfg.t {
                let s: Vec<f64> = phase.iter().map(|p| (omega * t as f64 + p).sin()).collect();
                for (v, row) in series.iter_mut().enumerate() {
                    row[t] = (1.0 - cfg.coupling) * s[v] + cfg.coupling * neighbour_mean(&s, v) + cfg.noise_std * normal();
                }
            }
        }
    }
    TemporalGraphDataset::new(graph, series, cfg.window, format!("synthetic-{}", cfg.kind.as_str()))
}
