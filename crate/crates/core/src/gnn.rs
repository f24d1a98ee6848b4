//! Graph-filter network used as the node embedding of a local Lyapunov function.
//!
//! Layer `l` of the filter stack maps `X ↦ relu(X·H⁰ + A·X·H¹)`; a per-node
//! MLP with rectified hidden layers and an affine output layer follows. All
//! nodes share the weights. Rows are nodes; when several state matrices are
//! stacked vertically the filter acts on each block of `N` rows separately.
//!
//! The local Lyapunov value of node `i` is `V_i = |g_i(x) − g_i(x̂)|₂^κ`,
//! which is nonnegative and zero on the diagonal for every parameter value.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cap_spectral_norm, spectral_norm};
use crate::topology::InterconnectionGraph;
use crate::training::CertificateHyper;

pub use crate::linalg::{spectral_norm as matrix_spectral_norm, SpectralNorm};

/// Architecture dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Subsystem state dimension `n` (input width of the first filter).
    pub state_dim: usize,
    /// Output widths of the graph-filter layers.
    pub filter_dims: Vec<usize>,
    /// Widths of the rectified hidden MLP layers.
    pub mlp_widths: Vec<usize>,
    /// Width of the affine output layer.
    pub output_dim: usize,
}

impl GnnConfig {
    /// `graph_layers` filters of width `width`, `mlp_layers` hidden layers of
    /// width `width`, output width `width`.
    pub fn uniform(state_dim: usize, graph_layers: usize, mlp_layers: usize, width: usize) -> Self {
        Self {
            state_dim,
            filter_dims: vec![width; graph_layers],
            mlp_widths: vec![width; mlp_layers],
            output_dim: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.output_dim == 0 {
            return Err(Error::Shape("state and output dimensions must be positive".into()));
        }
        if self.filter_dims.is_empty() || self.mlp_widths.is_empty() {
            return Err(Error::Shape("need at least one graph layer and one MLP layer".into()));
        }
        if self.filter_dims.iter().chain(&self.mlp_widths).any(|&w| w == 0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn graph_layers(&self) -> usize {
        self.filter_dims.len()
    }

    pub fn mlp_layers(&self) -> usize {
        self.mlp_widths.len()
    }

    fn filter_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.state_dim];
        dims.extend(&self.filter_dims);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![*self.filter_dims.last().unwrap()];
        dims.extend(&self.mlp_widths);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Graph-filter coefficients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub h0: Array2<f64>,
    pub h1: Array2<f64>,
}

/// Affine layer `y = x·W + b`, `W` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// All trainable parameters. The last entry of `dense` is the affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub filters: Vec<Filter>,
    pub dense: Vec<Dense>,
}

impl GnnParams {
    pub fn zeros(config: &GnnConfig) -> Self {
        Self {
            filters: config
                .filter_shapes()
                .into_iter()
                .map(|s| Filter {
                    h0: Array2::zeros(s),
                    h1: Array2::zeros(s),
                })
                .collect(),
            dense: config
                .dense_shapes()
                .into_iter()
                .map(|(i, o)| Dense {
                    w: Array2::zeros((i, o)),
                    b: Array1::zeros(o),
                })
                .collect(),
        }
    }

    /// Uniform in `[−s, s]`, `s = 1/√fan_in`, biases included.
    pub fn init(config: &GnnConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(config);
        let mut fill = |m: &mut [f64], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            m.iter_mut().for_each(|v| *v = rng.random_range(-s..=s));
        };
        for f in &mut p.filters {
            let fan_in = f.h0.nrows();
            fill(f.h0.as_slice_mut().unwrap(), fan_in);
            fill(f.h1.as_slice_mut().unwrap(), fan_in);
        }
        for d in &mut p.dense {
            let fan_in = d.w.nrows();
            fill(d.w.as_slice_mut().unwrap(), fan_in);
            fill(d.b.as_slice_mut().unwrap(), fan_in);
        }
        p
    }

    /// Checks every matrix against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &GnnConfig) -> Result<()> {
        let fs = config.filter_shapes();
        let ds = config.dense_shapes();
        let ok = self.filters.len() == fs.len()
            && self.dense.len() == ds.len()
            && self.filters.iter().zip(&fs).all(|(f, s)| f.h0.dim() == *s && f.h1.dim() == *s)
            && self.dense.iter().zip(&ds).all(|(d, s)| d.w.dim() == *s && d.b.len() == s.1);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameter shapes do not match the architecture".into()))
        }
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter blocks in canonical order: filters (H⁰, H¹), then dense (W, b).
    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for f in &self.filters {
            v.push(f.h0.as_slice().unwrap());
            v.push(f.h1.as_slice().unwrap());
        }
        for d in &self.dense {
            v.push(d.w.as_slice().unwrap());
            v.push(d.b.as_slice().unwrap());
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for f in &mut self.filters {
            v.push(f.h0.as_slice_mut().unwrap());
            v.push(f.h1.as_slice_mut().unwrap());
        }
        for d in &mut self.dense {
            v.push(d.w.as_slice_mut().unwrap());
            v.push(d.b.as_slice_mut().unwrap());
        }
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    pub fn unflatten(config: &GnnConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config);
        p.assign(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other` (same shapes).
    pub fn add_scaled(&mut self, other: &GnnParams, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    /// Projects every weight matrix (not biases) onto the spectral-norm ball of radius `ceiling`.
    pub fn apply_spectral_cap(&mut self, ceiling: f64) {
        for f in &mut self.filters {
            cap_spectral_norm(&mut f.h0, ceiling);
            cap_spectral_norm(&mut f.h1, ceiling);
        }
        for d in &mut self.dense {
            cap_spectral_norm(&mut d.w, ceiling);
        }
    }

    /// Largest embedding Lipschitz bound possible when every matrix norm is at most `ceiling`.
    pub fn capped_lipschitz(config: &GnnConfig, adjacency_norm: f64, ceiling: f64) -> f64 {
        ceiling.powi(config.graph_layers() as i32) * (1.0 + adjacency_norm).powi(config.graph_layers() as i32)
            * ceiling.powi(config.dense_shapes().len() as i32)
    }
}

/// Activations recorded by [`forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    block_rows: usize,
    /// Input of each filter layer and its shifted copy `A·X`.
    filter_in: Vec<(Array2<f64>, Array2<f64>)>,
    /// Pre-activation of each filter layer.
    filter_pre: Vec<Array2<f64>>,
    /// Input of each dense layer.
    dense_in: Vec<Array2<f64>>,
    /// Pre-activation of each hidden dense layer.
    dense_pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Sign of every rectifier pre-activation, in layer order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.filter_pre
            .iter()
            .chain(&self.dense_pre)
            .flat_map(|m| m.iter().map(|&v| v > 0.0))
            .collect()
    }
}

fn relu(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

fn check_input(params: &GnnParams, graph: &InterconnectionGraph, states: ArrayView2<'_, f64>) -> Result<()> {
    let n = params.filters[0].h0.nrows();
    if states.ncols() != n || !states.nrows().is_multiple_of(graph.n_nodes()) {
        return Err(Error::Shape(format!(
            "states must be (k·{})×{n}, got {:?}",
            graph.n_nodes(),
            states.dim()
        )));
    }
    if states.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite state entry".into()));
    }
    Ok(())
}

/// Node embeddings `g(x)`. `states` may stack several `N × n` blocks.
pub fn forward(params: &GnnParams, graph: &InterconnectionGraph, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_input(params, graph, states)?;
    Ok(forward_inner(params, graph, states, None))
}

/// Forward pass that keeps what [`backward`] needs.
pub fn forward_cached(
    params: &GnnParams,
    graph: &InterconnectionGraph,
    states: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_input(params, graph, states)?;
    let mut cache = ForwardCache {
        block_rows: graph.n_nodes(),
        filter_in: Vec::new(),
        filter_pre: Vec::new(),
        dense_in: Vec::new(),
        dense_pre: Vec::new(),
    };
    let out = forward_inner(params, graph, states, Some(&mut cache));
    Ok((out, cache))
}

fn forward_inner(
    params: &GnnParams,
    graph: &InterconnectionGraph,
    states: ArrayView2<'_, f64>,
    mut cache: Option<&mut ForwardCache>,
) -> Array2<f64> {
    let mut x = states.to_owned();
    for f in &params.filters {
        let ax = graph.shift_batched(x.view());
        let pre = x.dot(&f.h0) + ax.dot(&f.h1);
        let next = relu(&pre);
        if let Some(c) = cache.as_deref_mut() {
            c.filter_in.push((x, ax));
            c.filter_pre.push(pre);
        }
        x = next;
    }
    let last = params.dense.len() - 1;
    for (k, d) in params.dense.iter().enumerate() {
        let mut pre = x.dot(&d.w);
        pre += &d.b;
        let next = if k < last { relu(&pre) } else { pre.clone() };
        if let Some(c) = cache.as_deref_mut() {
            c.dense_in.push(x);
            if k < last {
                c.dense_pre.push(pre);
            }
        }
        x = next;
    }
    x
}

/// Parameter gradient of `⟨d_out, g(x)⟩` given the cache of the matching forward pass.
pub fn backward(
    params: &GnnParams,
    graph: &InterconnectionGraph,
    cache: &ForwardCache,
    d_out: ArrayView2<'_, f64>,
) -> Result<GnnParams> {
    if cache.dense_in.len() != params.dense.len() || cache.filter_in.len() != params.filters.len() {
        return Err(Error::Usage("forward cache does not belong to these parameters".into()));
    }
    if cache.block_rows != graph.n_nodes() || d_out.nrows() != cache.dense_in[0].nrows() {
        return Err(Error::Usage("forward cache does not match the graph or cotangent".into()));
    }
    let mut grad = GnnParams {
        filters: Vec::with_capacity(params.filters.len()),
        dense: Vec::with_capacity(params.dense.len()),
    };
    let mut g = d_out.to_owned();
    let last = params.dense.len() - 1;
    for k in (0..params.dense.len()).rev() {
        if k < last {
            relu_mask(&mut g, &cache.dense_pre[k]);
        }
        let input = &cache.dense_in[k];
        grad.dense.push(Dense {
            w: input.t().dot(&g),
            b: g.sum_axis(Axis(0)),
        });
        g = g.dot(&params.dense[k].w.t());
    }
    grad.dense.reverse();
    for l in (0..params.filters.len()).rev() {
        relu_mask(&mut g, &cache.filter_pre[l]);
        let (x, ax) = &cache.filter_in[l];
        let f = &params.filters[l];
        grad.filters.push(Filter {
            h0: x.t().dot(&g),
            h1: ax.t().dot(&g),
        });
        if l > 0 {
            let through_shift = g.dot(&f.h1.t());
            g = g.dot(&f.h0.t()) + graph.shift_transpose_batched(through_shift.view());
        }
    }
    grad.filters.reverse();
    Ok(grad)
}

/// Certified Lipschitz bound of `x ↦ g(x)` (Frobenius in, Frobenius out).
pub fn embedding_lipschitz(params: &GnnParams, graph: &InterconnectionGraph) -> f64 {
    let a = spectral_norm(graph.adjacency_matrix().view()).value;
    embedding_lipschitz_with(params, a)
}

/// [`embedding_lipschitz`] with a precomputed `‖A‖₂`.
pub fn embedding_lipschitz_with(params: &GnnParams, adjacency_norm: f64) -> f64 {
    let filters: f64 = params
        .filters
        .iter()
        .map(|f| spectral_norm(f.h0.view()).value + adjacency_norm * spectral_norm(f.h1.view()).value)
        .product();
    let dense: f64 = params.dense.iter().map(|d| spectral_norm(d.w.view()).value).product();
    filters * dense
}

/// `|a − b|₂^κ`.
pub fn pow_dist(a: &[f64], b: &[f64], kappa: f64) -> f64 {
    let d = crate::linalg::distance(a, b);
    if kappa == 1.0 {
        d
    } else {
        d.powf(kappa)
    }
}

/// Per-node and total Lyapunov value.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovValue {
    pub per_node: Vec<f64>,
    pub total: f64,
}

/// The parameterised candidate: architecture, weights and certificate constants.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCandidate {
    pub config: GnnConfig,
    pub params: GnnParams,
    pub hyper: CertificateHyper,
}

impl LyapunovCandidate {
    pub fn new(config: GnnConfig, params: GnnParams, hyper: CertificateHyper) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        hyper.validate()?;
        Ok(Self { config, params, hyper })
    }

    pub fn kappa(&self) -> f64 {
        self.hyper.kappa as f64
    }

    pub fn embed(&self, graph: &InterconnectionGraph, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        forward(&self.params, graph, states)
    }
}

/// `V_i(x, x̂)` for every node and their sum.
pub fn lyapunov_eval(
    cand: &LyapunovCandidate,
    graph: &InterconnectionGraph,
    x: ArrayView2<'_, f64>,
    xh: ArrayView2<'_, f64>,
) -> Result<LyapunovValue> {
    if x.dim() != xh.dim() || x.nrows() != graph.n_nodes() {
        return Err(Error::Shape(format!("state pair shapes {:?} / {:?}", x.dim(), xh.dim())));
    }
    let g = cand.embed(graph, x)?;
    let gh = cand.embed(graph, xh)?;
    let kappa = cand.kappa();
    let per_node: Vec<f64> = g
        .rows()
        .into_iter()
        .zip(gh.rows())
        .map(|(a, b)| pow_dist(a.as_slice().unwrap(), b.as_slice().unwrap(), kappa))
        .collect();
    let total = per_node.iter().sum();
    Ok(LyapunovValue { per_node, total })
}

/// What the verifier needs from a local certificate: the embedding of a
/// node from the states of its receptive closure.
pub trait LocalCertificate: Sync {
    fn state_dim(&self) -> usize;
    /// Hops of state that node `i`'s embedding reads.
    fn receptive_depth(&self) -> usize;
    /// Embeds stacked closure blocks on `local` (closure order, center first)
    /// and returns the center row of each block.
    fn embed_center(&self, local: &InterconnectionGraph, blocks: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    /// Lipschitz bound of the center embedding as a function of the block.
    fn embedding_lipschitz(&self, local: &InterconnectionGraph) -> f64;
    /// Exact per-condition Lipschitz constants, when known analytically.
    fn exact_condition_lipschitz(&self) -> Option<[f64; 3]> {
        None
    }
}

impl LocalCertificate for LyapunovCandidate {
    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn receptive_depth(&self) -> usize {
        self.config.graph_layers()
    }

    fn embed_center(&self, local: &InterconnectionGraph, blocks: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let g = forward(&self.params, local, blocks)?;
        Ok(g.select(Axis(0), &(0..g.nrows()).step_by(local.n_nodes()).collect::<Vec<_>>()))
    }

    fn embedding_lipschitz(&self, local: &InterconnectionGraph) -> f64 {
        embedding_lipschitz(&self.params, local)
    }
}

/// Hand-written candidate whose embedding is the center node's own state,
/// so `V_i = |x_i − x̂_i|^κ`. Used as a verifier oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticCandidate {
    pub state_dim: usize,
    /// Exact condition Lipschitz constants derived by hand for a specific system.
    pub exact: Option<[f64; 3]>,
}

impl LocalCertificate for AnalyticCandidate {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn receptive_depth(&self) -> usize {
        1
    }

    fn embed_center(&self, local: &InterconnectionGraph, blocks: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if blocks.ncols() != self.state_dim || !blocks.nrows().is_multiple_of(local.n_nodes()) {
            return Err(Error::Shape("closure blocks have the wrong shape".into()));
        }
        let rows: Vec<usize> = (0..blocks.nrows()).step_by(local.n_nodes()).collect();
        Ok(blocks.select(Axis(0), &rows))
    }

    fn embedding_lipschitz(&self, _local: &InterconnectionGraph) -> f64 {
        1.0
    }

    fn exact_condition_lipschitz(&self) -> Option<[f64; 3]> {
        self.exact
    }
}
