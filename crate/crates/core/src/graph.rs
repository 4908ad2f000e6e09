//! Weighted static graphs and the spectral operators built from them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-12;

/// Undirected graph on `n` vertices with a dense non-negative weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    n: usize,
    adjacency: Vec<f64>,
    labels: Option<Vec<String>>,
}

/// On-disk graph: `{"n": N, "labels": [...], "edges": [[i, j, w], ...]}`
/// with `i < j` and `w > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl WeightedGraph {
    /// Validates a row-major `n x n` adjacency matrix: finite, non-negative,
    /// symmetric within 1e-12 and with a zero diagonal.
    pub fn new(n: usize, adjacency: Vec<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        if adjacency.len() != n * n {
            return Err(Error::InvalidGraph(format!(
                "adjacency has {} entries, expected {n}x{n}",
                adjacency.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidGraph(format!("{} labels for {n} vertices", l.len())));
            }
        }
        for i in 0..n {
            if adjacency[i * n + i] != 0.0 {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {i}")));
            }
            for j in 0..n {
                let w = adjacency[i * n + j];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidGraph(format!("weight ({i}, {j}) = {w} is not a non-negative number")));
                }
                if (w - adjacency[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidGraph(format!(
                        "adjacency is not symmetric at ({i}, {j}): {w} vs {}",
                        adjacency[j * n + i]
                    )));
                }
            }
        }
        Ok(Self { n, adjacency, labels })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![0.0; n * n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!("edge ({i}, {j}) out of range for {n} vertices")));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {i}")));
            }
            if adjacency[i * n + j] != 0.0 {
                return Err(Error::InvalidGraph(format!("duplicate edge ({i}, {j})")));
            }
            adjacency[i * n + j] = w;
            adjacency[j * n + i] = w;
        }
        Self::new(n, adjacency, None)
    }

    pub fn edgeless(n: usize) -> Result<Self> {
        Self::new(n, vec![0.0; n * n], None)
    }

    /// Path 0 - 1 - ... - (n-1) with unit weights.
    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::InvalidGraph(format!("{} labels for {} vertices", labels.len(), self.n)));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.chunks(self.n).map(|row| row.iter().sum()).collect()
    }

    /// Upper-triangle edges `(i, j, w)` with `i < j` and `w > 0`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let w = self.weight(i, j);
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Relabels vertices so that old vertex `perm[v]` becomes vertex `v`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        let n = self.n;
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * n + j] = self.weight(perm[i], perm[j]);
            }
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| perm.iter().map(|&p| l[p].clone()).collect());
        Self::new(n, adjacency, labels)
    }

    /// Multiplies every weight by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if factor <= 0.0 || !factor.is_finite() {
            return Err(Error::InvalidGraph(format!("scale factor {factor} must be positive")));
        }
        let adjacency = self.adjacency.iter().map(|w| w * factor).collect();
        Self::new(self.n, adjacency, self.labels.clone())
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            n: self.n,
            labels: self.labels.clone(),
            edges: self.edges(),
        }
    }

    pub fn from_file(file: &GraphFile) -> Result<Self> {
        for &(i, j, w) in &file.edges {
            if i >= j {
                return Err(Error::InvalidGraph(format!("edge [{i}, {j}, {w}] must satisfy i < j")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidGraph(format!("edge [{i}, {j}, {w}] must have a positive weight")));
            }
        }
        let g = Self::from_edges(file.n, &file.edges)?;
        match &file.labels {
            Some(l) => g.with_labels(l.clone()),
            None => Ok(g),
        }
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::invalid("permutation", format!("length {} for {n} vertices", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("permutation", format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Symmetric normalized Laplacian `I - D^-1/2 W D^-1/2` and the degrees it
/// was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Laplacian {
    pub matrix: Tensor,
    pub degree: Vec<f64>,
}

/// Normalized Laplacian. Isolated vertices get a zero row and column in the
/// normalized adjacency, so their diagonal entry is 1.
pub fn normalized_laplacian(g: &WeightedGraph) -> Laplacian {
    let n = g.n_vertices();
    let degree = g.degrees();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = inv_sqrt[i] * g.weight(i, j) * inv_sqrt[j];
            l[i * n + j] = if i == j { 1.0 - a } else { -a };
        }
    }
    Laplacian {
        matrix: Tensor::new(vec![n, n], l).expect("n x n"),
        degree,
    }
}

/// Self-loop renormalized adjacency `D~^-1/2 (W + I) D~^-1/2`.
pub fn renormalized_adjacency(g: &WeightedGraph) -> Tensor {
    let n = g.n_vertices();
    let inv_sqrt: Vec<f64> = g.degrees().iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let w = g.weight(i, j) + if i == j { 1.0 } else { 0.0 };
            a[i * n + j] = inv_sqrt[i] * w * inv_sqrt[j];
        }
    }
    Tensor::new(vec![n, n], a).expect("n x n")
}

pub const DEFAULT_LAMBDA_TOL: f64 = 1e-6;
pub const MAX_POWER_ITERATIONS: usize = 10_000;

/// How the largest Laplacian eigenvalue is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMax {
    PowerIteration { tol: f64 },
    Fixed(f64),
}

impl Default for LambdaMax {
    fn default() -> Self {
        LambdaMax::PowerIteration {
            tol: DEFAULT_LAMBDA_TOL,
        }
    }
}

/// Largest eigenvalue of the Laplacian by power iteration, clamped to (0, 2].
///
/// Stops once the eigen-residual `|L x - mu x|` drops below `tol`; for a
/// symmetric matrix the Rayleigh quotient `mu` is then within `tol` of an
/// eigenvalue.
pub fn estimate_lambda_max(lap: &Laplacian, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::invalid("estimate_lambda_max", format!("tolerance {tol} must be positive")));
    }
    let n = lap.degree.len();
    let l = lap.matrix.data();
    // deterministic start vector with no special alignment to any eigenvector
    let mut x: Vec<f64> = (0..n)
        .map(|i| 0.5 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    normalize(&mut x);
    let mut y = vec![0.0; n];
    let mut mu = 0.0;
    for _ in 0..MAX_POWER_ITERATIONS {
        for i in 0..n {
            y[i] = (0..n).map(|j| l[i * n + j] * x[j]).sum();
        }
        mu = dot(&x, &y);
        let residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - mu * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual < tol {
            return Ok(mu.clamp(f64::MIN_POSITIVE, 2.0));
        }
        let norm = dot(&y, &y).sqrt();
        if norm == 0.0 {
            break;
        }
        x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi = yi / norm);
    }
    Err(Error::NoConvergence {
        iterations: MAX_POWER_ITERATIONS,
        last_estimate: mu,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Laplacian, its rescaled form `2 L / lambda_max - I`, and the degrees.
/// Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralOperators {
    pub laplacian: Tensor,
    pub scaled_laplacian: Tensor,
    pub lambda_max: f64,
    pub degree: Vec<f64>,
}

impl SpectralOperators {
    pub fn from_graph(g: &WeightedGraph, mode: LambdaMax) -> Result<Self> {
        let lap = normalized_laplacian(g);
        let lambda_max = match mode {
            LambdaMax::PowerIteration { tol } => estimate_lambda_max(&lap, tol)?,
            LambdaMax::Fixed(v) => v,
        };
        scale_laplacian(lap, lambda_max)
    }

    pub fn n_vertices(&self) -> usize {
        self.degree.len()
    }

    /// `[T_0(L~) x, ..., T_K(L~) x]` for `x` of shape `[N, C]`.
    pub fn cheb_basis_apply(&self, x: &Tensor, order: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let l = tape.constant(&self.scaled_laplacian);
        let xv = tape.constant(x);
        let basis = cheb_basis(&mut tape, l, xv, 0, order)?;
        Ok(basis.into_iter().map(|v| tape.tensor(v)).collect())
    }
}

/// `L~ = (2 / lambda_max) L - I`.
pub fn scale_laplacian(lap: Laplacian, lambda_max: f64) -> Result<SpectralOperators> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::InvalidLambdaMax(lambda_max));
    }
    let n = lap.degree.len();
    let mut scaled = lap.matrix.clone();
    let s = 2.0 / lambda_max;
    for i in 0..n {
        for j in 0..n {
            let v = s * lap.matrix.get(&[i, j]) - if i == j { 1.0 } else { 0.0 };
            scaled.set(&[i, j], v);
        }
    }
    Ok(SpectralOperators {
        laplacian: lap.matrix,
        scaled_laplacian: scaled,
        lambda_max,
        degree: lap.degree,
    })
}

/// Chebyshev recursion `T_k = 2 L~ T_{k-1} - T_{k-2}` applied to `x` along
/// its vertex `axis`, recorded on `tape`. `operator` must be the symmetric
/// `N x N` scaled Laplacian.
pub fn cheb_basis(tape: &mut Tape, operator: Var, x: Var, axis: usize, order: usize) -> Result<Vec<Var>> {
    let n = tape.shape(operator)[0];
    if tape.shape(x).get(axis) != Some(&n) {
        return Err(Error::shape("cheb_basis", tape.shape(x), tape.shape(operator)));
    }
    let mut out = vec![x];
    if order >= 1 {
        // symmetric operator: contracting rows equals left multiplication
        out.push(tape.contract(x, operator, axis)?);
    }
    for k in 2..=order {
        let lx = tape.contract(out[k - 1], operator, axis)?;
        let twice = tape.scale(lx, 2.0);
        out.push(tape.sub(twice, out[k - 2])?);
    }
    Ok(out)
}
