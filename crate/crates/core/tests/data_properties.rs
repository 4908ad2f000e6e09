//! Dataset files, rolling windows, finance graphs and the synthetic
//! generators.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use stgcn::data::*;
use stgcn::{Error, WeightedGraph};

fn dataset(n: usize, t: usize, window: usize, seed: u64) -> TemporalGraphDataset {
    let mut r = rng(seed);
    let g = random_graph(n, 0.5, &mut r);
    let rows = (0..n).map(|_| (0..t).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
    TemporalGraphDataset::new(g, rows, window, "test").unwrap()
}

proptest! {
    #[test]
    fn sample_count_identity(t in 2usize..=64, w_frac in 0.0f64..1.0) {
        let w = 1 + ((t - 1) as f64 * w_frac) as usize;
        prop_assume!(w < t);
        let ds = dataset(2, t, w, t as u64);
        let samples = rolling_windows(&ds);
        prop_assert_eq!(samples.len(), t - w);
        for (i, s) in samples.iter().enumerate() {
            prop_assert_eq!(s.start, i);
            for v in 0..2 {
                for k in 0..w {
                    prop_assert_eq!(s.input.get(&[v, 0, k]), ds.feature(v, i + k));
                }
                prop_assert_eq!(s.target.get(&[v, 0]), ds.feature(v, i + w));
            }
        }
    }

    #[test]
    fn finance_graph_is_symmetric_with_unit_weights(
        rows in prop::collection::vec(prop::collection::vec(0u8..=1, 6), 2..8),
        similarity in any::<bool>(),
    ) {
        let n = rows.len();
        let names = (0..n).map(|i| format!("c{i}")).collect();
        let m = CoverageMatrix::new(names, rows).unwrap();
        let mode = if similarity { DistanceMode::CosineSimilarity } else { DistanceMode::CosineDistance };
        let ds = build_finance_graph(&m, &vec![vec![0.0; 10]; n], mode, 3, "f").unwrap();
        for i in 0..n {
            prop_assert_eq!(ds.graph.weight(i, i), 0.0);
            for j in 0..n {
                let w = ds.graph.weight(i, j);
                prop_assert_eq!(w, ds.graph.weight(j, i));
                prop_assert!((0.0..=1.0).contains(&w));
            }
        }
    }

    #[test]
    fn save_load_is_bit_exact(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(4, 0.5, &mut r);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..9).map(|_| r.random::<f64>() * 10f64.powi(r.random_range(-300..300))).collect())
            .collect();
        let ds = TemporalGraphDataset::new(g, rows, 3, "bits").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        for v in 0..4 {
            for t in 0..9 {
                prop_assert_eq!(back.feature(v, t).to_bits(), ds.feature(v, t).to_bits());
            }
        }
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn table_sample_counts() {
    // (N, W, samples) with T_total = samples + W; N does not enter the count
    for (w, samples) in [(4, 246), (8, 242), (16, 234), (4, 517), (4, 31), (8, 723), (4, 740)] {
        let ds = dataset(2, samples + w, w, 0);
        assert_eq!(rolling_windows(&ds).len(), samples);
    }
}

#[test]
fn minimal_file_loads() {
    let text = r#"{"name":"toy","window":2,"graph":{"n":2,"labels":["a","b"],"edges":[[0,1,1.0]]},
        "features":[[1,2,3,4,5],[5,4,3,2,1]]}"#;
    let ds = parse_dataset(text).unwrap();
    assert_eq!(ds.sample_count(), 3);
    assert_eq!(ds.graph.labels().unwrap(), &["a".to_owned(), "b".to_owned()]);
}

#[test]
fn invalid_files_are_rejected() {
    let cases = [
        (r#"{"name":"x","window":2,"graph":{"n":2,"edges":[[0,2,1.0]]},"features":[[1,2,3],[1,2,3]]}"#, "out of range"),
        (r#"{"name":"x","window":2,"graph":{"n":2,"edges":[[1,0,1.0]]},"features":[[1,2,3],[1,2,3]]}"#, "i < j"),
        (r#"{"name":"x","window":2,"graph":{"n":2,"edges":[[0,1,-1.0]]},"features":[[1,2,3],[1,2,3]]}"#, "weight"),
        (r#"{"name":"x","window":2,"graph":{"n":3,"edges":[]},"features":[[1,2,3],[1,2,3]]}"#, "3 vertices"),
        (r#"{"name":"x","window":3,"graph":{"n":2,"edges":[]},"features":[[1,2,3],[1,2,3]]}"#, "window"),
        (r#"{"name":"x","window":1,"graph":{"n":2,"edges":[]},"features":[[1,2,3],[1,2]]}"#, "row 1"),
        (r#"{"name":"x","window":1,"graph":{"n":2,"edges":[]},"features":[[1,2,3],[1,2,3]],"extra":1}"#, "extra"),
    ];
    for (text, needle) in cases {
        let msg = parse_dataset(text).unwrap_err().to_string();
        assert!(msg.contains(needle), "expected '{needle}' in: {msg}");
    }
}

#[test]
fn nan_cell_is_named() {
    let text = r#"{"name":"x","window":1,"graph":{"n":2,"edges":[]},"features":[[1,2,3],["nan",2,3]]}"#;
    let msg = parse_dataset(text).unwrap_err().to_string();
    assert!(msg.contains("vertex 1, time 0"), "{msg}");
}

#[test]
fn csv_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cov = dir.path().join("coverage.csv");
    let ret = dir.path().join("returns.csv");
    std::fs::write(&cov, "company,a1,a2,a3\nx,1,1,0\ny,1,0,1\nz,0,1,1\n").unwrap();
    std::fs::write(&ret, "company,d1,d2,d3,d4,d5\nx,0.1,0.2,0.3,0.4,0.5\ny,1,2,3,4,5\nz,-1,-2,-3,-4,-5\n").unwrap();
    let m = read_coverage_csv(&cov).unwrap();
    assert_eq!(m.companies, vec!["x", "y", "z"]);
    assert_eq!(m.articles, 3);
    let (labels, returns) = read_returns_csv(&ret).unwrap();
    assert_eq!(labels, m.companies);
    let ds = build_finance_graph(&m, &returns, DistanceMode::CosineSimilarity, 2, "toy").unwrap();
    assert_eq!(ds.graph.edges().len(), 3);
    assert_eq!(ds.sample_count(), 3);

    std::fs::write(&cov, "company,a1\nx,2\n").unwrap();
    assert!(matches!(read_coverage_csv(&cov), Err(Error::InvalidDataset(_))));
    std::fs::write(&ret, "company,d1\nx,abc\n").unwrap();
    assert!(read_returns_csv(&ret).is_err());
}

#[test]
fn synthetic_determinism_for_every_kind() {
    for kind in SyntheticKind::ALL {
        let cfg = SyntheticConfig::new(kind, 6, 50, 3);
        let a = synthetic_generate(&cfg).unwrap();
        assert_eq!(a, synthetic_generate(&cfg).unwrap());
        let other = SyntheticConfig { seed: 4, ..cfg };
        assert_ne!(a, synthetic_generate(&other).unwrap());
    }
}

fn lag_one_autocorrelation(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let cov: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    cov / var
}

#[test]
fn noise_has_no_autocorrelation() {
    let ds = synthetic_generate(&SyntheticConfig::new(SyntheticKind::Noise, 4, 2000, 1)).unwrap();
    for row in ds.feature_rows() {
        assert!(lag_one_autocorrelation(&row).abs() < 0.1);
    }
    let ar = synthetic_generate(&SyntheticConfig::new(SyntheticKind::Ar1, 4, 2000, 1)).unwrap();
    assert!(ar.feature_rows().iter().all(|r| lag_one_autocorrelation(r) > 0.3));
}

/// Least-squares coefficients of `y` on the columns of `x`.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let xt = x.transpose();
    (&xt * x).lu().solve(&(&xt * y)).unwrap()
}

fn neighbour_mean(g: &WeightedGraph, ds: &TemporalGraphDataset, v: usize, t: usize) -> f64 {
    let d: f64 = (0..g.n_vertices()).map(|j| g.weight(v, j)).sum();
    if d == 0.0 {
        return 0.0;
    }
    (0..g.n_vertices()).map(|j| g.weight(v, j) * ds.feature(j, t)).sum::<f64>() / d
}

#[test]
fn uncoupled_ar1_ignores_the_graph() {
    let mut cfg = SyntheticConfig::new(SyntheticKind::Ar1, 5, 2000, 8);
    cfg.coupling = 0.0;
    cfg.graph_density = 0.8;
    let with_edges = synthetic_generate(&cfg).unwrap();
    cfg.graph_density = 0.0;
    let without = synthetic_generate(&cfg).unwrap();
    assert!(!with_edges.graph.edges().is_empty() && without.graph.edges().is_empty());
    assert_eq!(with_edges.feature_rows(), without.feature_rows());

    // adding the neighbour mean as a regressor does not improve the
    // one-step linear predictor
    let g = &with_edges.graph;
    let t = with_edges.t_total() - 1;
    for v in 0..5 {
        let y = DVector::from_fn(t, |i, _| with_edges.feature(v, i + 1));
        let own = DMatrix::from_fn(t, 2, |i, c| if c == 0 { 1.0 } else { with_edges.feature(v, i) });
        let both = DMatrix::from_fn(t, 3, |i, c| match c {
            0 => 1.0,
            1 => with_edges.feature(v, i),
            _ => neighbour_mean(g, &with_edges, v, i),
        });
        let beta_own = least_squares(&own, &y);
        let beta_both = least_squares(&both, &y);
        let rss = |x: &DMatrix<f64>, b: &DVector<f64>| (x * b - &y).norm_squared();
        let (r_own, r_both) = (rss(&own, &beta_own), rss(&both, &beta_both));
        assert!((r_own - r_both) / r_own < 0.01, "vertex {v}: {r_own} vs {r_both}");
        assert!(beta_both[2].abs() < 0.1, "vertex {v}: {beta_both}");
        assert!((beta_own[1] - cfg.persistence).abs() < 0.1);
    }
}

#[test]
fn coupled_ar1_uses_the_graph() {
    let mut cfg = SyntheticConfig::new(SyntheticKind::Ar1, 5, 2000, 8);
    cfg.graph_density = 1.0;
    let ds = synthetic_generate(&cfg).unwrap();
    let t = ds.t_total() - 1;
    let y = DVector::from_fn(t, |i, _| ds.feature(0, i + 1));
    let both = DMatrix::from_fn(t, 3, |i, c| match c {
        0 => 1.0,
        1 => ds.feature(0, i),
        _ => neighbour_mean(&ds.graph, &ds, 0, i),
    });
    let beta = least_squares(&both, &y);
    assert!((beta[2] - cfg.coupling).abs() < 0.1, "{beta}");
}

#[test]
fn zscore_uses_training_columns() {
    let ds = dataset(3, 40, 5, 2);
    let z = ds.zscore_fit(20);
    let normed = ds.normalized(&z);
    for v in 0..3 {
        let head: Vec<f64> = (0..20).map(|t| normed.feature(v, t)).collect();
        let m = head.iter().sum::<f64>() / 20.0;
        let var = head.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
