//! Helpers shared by the integration tests. Oracles here are written from
//! the definitions directly and avoid the library's local-closure paths.

#![allow(dead_code)]

use gnncert::gnn::{forward, GnnConfig, GnnParams, LyapunovCandidate};
use gnncert::system::SystemOracle;
use gnncert::topology::InterconnectionGraph;
use gnncert::training::{CertificateHyper, ClassHyper};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Proptest settings without regression files.
pub fn config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_states(rng: &mut impl Rng, n: usize, dim: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |_| rng.random_range(lo..hi))
}

pub fn hyper(class: ClassHyper, kappa: u32) -> CertificateHyper {
    CertificateHyper {
        kappa,
        classes: vec![class],
        loss_weights: [1.0; 3],
    }
}

/// Random candidate with weights scaled by `scale` relative to the default init.
pub fn candidate(config: GnnConfig, seed: u64, scale: f64, class: ClassHyper, kappa: u32) -> LyapunovCandidate {
    let mut params = GnnParams::init(&config, &mut rng(seed));
    let flat: Vec<f64> = params.flatten().into_iter().map(|v| v * scale).collect();
    params.assign(&flat).unwrap();
    LyapunovCandidate::new(config, params, hyper(class, kappa)).unwrap()
}

pub fn norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|g_i(x) − g_i(x̂)|^κ` for every node, from a full-graph forward pass.
pub fn node_values(params: &GnnParams, graph: &InterconnectionGraph, x: ArrayView2<'_, f64>, xh: ArrayView2<'_, f64>, kappa: f64) -> Vec<f64> {
    let g = forward(params, graph, x).unwrap();
    let gh = forward(params, graph, xh).unwrap();
    (0..graph.n_nodes())
        .map(|i| norm(g.row(i).iter().zip(gh.row(i)).map(|(a, b)| a - b)).powf(kappa))
        .collect()
}

/// Euclidean distance restricted to the rows in `nodes`.
pub fn rows_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, nodes: &[usize]) -> f64 {
    norm(nodes.iter().flat_map(|&j| a.row(j).iter().zip(b.row(j)).map(|(x, y)| x - y).collect::<Vec<_>>()))
}

/// Writes flat closure values (closure order) into rows of a copy of `base`.
pub fn scatter(base: &Array2<f64>, nodes: &[usize], flat: &[f64]) -> Array2<f64> {
    let dim = base.ncols();
    let mut out = base.clone();
    for (k, &j) in nodes.iter().enumerate() {
        for d in 0..dim {
            out[[j, d]] = flat[k * dim + d];
        }
    }
    out
}

/// The three residuals at node `i` for full states, straight from their definitions.
pub fn residuals_full(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    i: usize,
    x: &Array2<f64>,
    xh: &Array2<f64>,
) -> [f64; 3] {
    let k = cand.kappa();
    let h = cand.hyper.class(0);
    let graph = oracle.graph();
    let vnodes = graph.closure(i, cand.config.graph_layers()).nodes;
    let v = node_values(&cand.params, graph, x.view(), xh.view(), k)[i];
    let w = oracle.zero_inputs();
    let xn = oracle.step(x.view(), w.view()).unwrap();
    let xhn = oracle.step(xh.view(), w.view()).unwrap();
    let vn = node_values(&cand.params, graph, xn.view(), xhn.view(), k)[i];
    let d = rows_distance(x.view(), xh.view(), &vnodes).powf(k);
    [-v + h.alpha * d, v - h.alpha_bar * d, vn - v + h.alpha_tilde * d]
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_max_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[[p, q]] * a[[p, q]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).fold(f64::NEG_INFINITY, f64::max)
}

/// Largest singular value via the eigenvalues of `MᵀM`.
pub fn svd_spectral_norm(m: &Array2<f64>) -> f64 {
    jacobi_max_eigenvalue(&m.t().dot(m)).max(0.0).sqrt()
}
