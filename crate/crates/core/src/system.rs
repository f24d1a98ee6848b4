//! Black-box interconnected system oracles.
//!
//! The oracle only exposes the full-state map `x(k+1) = f(x(k), w(k))` on
//! the box `X × W`. Local views (concatenated neighbourhood states) and the
//! local transition maps used by the certificate conditions are derived from
//! it by embedding a neighbourhood into a full state and stepping once.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use ndarray::{array, s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::topology::{Closure, InterconnectionGraph};

/// Axis-aligned box, one interval per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape("box bounds differ in length".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !l.is_finite() || !h.is_finite() || l > h) {
            return Err(Error::Domain(format!("empty or non-finite box {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// The same interval on every coordinate.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (l, h))| l <= x && x <= h)
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn diameter(&self) -> f64 {
        crate::linalg::euclidean(&self.widths())
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    /// Cartesian power: the box repeated `k` times.
    pub fn power(&self, k: usize) -> Self {
        Self {
            lo: self.lo.repeat(k),
            hi: self.hi.repeat(k),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { l } else { rng.random_range(l..=h) })
            .collect()
    }

    pub fn volume_is_zero(&self) -> bool {
        self.widths().contains(&0.0)
    }
}

/// Full-state transition map of a homogeneous interconnected system.
///
/// `x` is `N × n` (row `i` is subsystem `i`), `w` is `N × m`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn step(&self, graph: &InterconnectionGraph, x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Array2<f64>;
}

/// Ring of rooms exchanging heat with neighbours and the environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub phi: f64,
    pub theta: f64,
    pub t_ext: f64,
}

impl Temperature {
    /// Contraction factor of the difference dynamics in the max norm.
    pub fn contraction_factor(&self) -> f64 {
        (1.0 - 2.0 * self.phi - self.theta).abs() + 2.0 * self.phi
    }
}

impl Dynamics for Temperature {
    fn step(&self, graph: &InterconnectionGraph, x: ArrayView2<'_, f64>, _w: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = graph.n_nodes();
        Array2::from_shape_fn((n, 1), |(i, _)| {
            let t = x[[i, 0]];
            let coupling: f64 = graph.neighbors(i).iter().map(|&j| x[[j, 0]] - t).sum();
            t + self.phi * coupling + self.theta * (self.t_ext - t)
        })
    }
}

/// Two-dimensional nonlinear subsystems on a one-directional ring; node `i`
/// reads its single in-neighbour (`i + 1` on the built-in ring).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Nonlinear2d;

impl Nonlinear2d {
    pub const SELF: [[f64; 2]; 2] = [[0.8, 0.0], [-0.1, 0.9]];
    pub const COUPLING: [f64; 2] = [-0.02, -0.03];
    pub const NORM_GAIN: f64 = -0.1;
}

impl Dynamics for Nonlinear2d {
    fn step(&self, graph: &InterconnectionGraph, x: ArrayView2<'_, f64>, _w: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = graph.n_nodes();
        let mut out = Array2::zeros((n, 2));
        for i in 0..n {
            let (a, b) = (x[[i, 0]], x[[i, 1]]);
            let norm = (a * a + b * b).sqrt();
            let mut na = Self::SELF[0][0] * a + Self::NORM_GAIN * norm;
            let mut nb = Self::SELF[1][0] * a + Self::SELF[1][1] * b;
            for &j in graph.neighbors(i) {
                na += Self::COUPLING[0] * x[[j, 0]];
                nb += Self::COUPLING[1] * x[[j, 1]];
            }
            out[[i, 0]] = na;
            out[[i, 1]] = nb;
        }
        out
    }
}

/// Homogeneous affine coupling `x_i' = S x_i + C Σ_{j∈N_i} x_j + B w_i + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoupled {
    pub self_matrix: Array2<f64>,
    pub neighbor_matrix: Array2<f64>,
    pub input_matrix: Array2<f64>,
    pub offset: Vec<f64>,
}

impl Dynamics for AffineCoupled {
    fn step(&self, graph: &InterconnectionGraph, x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Array2<f64> {
        let shifted = graph.shift_batched(x);
        let neighbors_only = &shifted - &x;
        let mut out = x.dot(&self.self_matrix.t()) + neighbors_only.dot(&self.neighbor_matrix.t());
        if self.input_matrix.ncols() > 0 {
            out += &w.dot(&self.input_matrix.t());
        }
        for mut row in out.rows_mut() {
            for (v, c) in row.iter_mut().zip(&self.offset) {
                *v += c;
            }
        }
        out
    }
}

/// How a neighbourhood's next state is obtained from the full-state oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMode {
    /// The free variables include one extra hop so neighbour dynamics are
    /// evaluated exactly.
    #[default]
    TwoHop,
    /// Only the neighbourhood itself is free; everything else is pinned to the
    /// reference point. Matches the literal local-map signature but is an
    /// approximation whenever neighbours read states further out.
    EmbedReference,
}

impl fmt::Display for ClosureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClosureMode::TwoHop => "two_hop",
            ClosureMode::EmbedReference => "embed_reference",
        })
    }
}

/// Black-box oracle for an interconnected system on a known graph.
#[derive(Debug, Clone)]
pub struct SystemOracle {
    graph: InterconnectionGraph,
    state_dim: usize,
    input_dim: usize,
    state_box: BoxDomain,
    input_box: BoxDomain,
    dyn_lipschitz: f64,
    reference_state: Vec<f64>,
    reference_input: Vec<f64>,
    dynamics: Arc<dyn Dynamics>,
    label: String,
}

impl SystemOracle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: impl Into<String>,
        graph: InterconnectionGraph,
        state_box: BoxDomain,
        input_box: BoxDomain,
        dyn_lipschitz: f64,
        dynamics: Arc<dyn Dynamics>,
    ) -> Result<Self> {
        if state_box.dim() == 0 {
            return Err(Error::Shape("state dimension must be positive".into()));
        }
        if !(dyn_lipschitz > 0.0 && dyn_lipschitz.is_finite()) {
            return Err(Error::Hyper(format!("dyn_lipschitz must be positive, got {dyn_lipschitz}")));
        }
        let reference_state = clamp_into(&state_box, vec![0.0; state_box.dim()]);
        let reference_input = clamp_into(&input_box, vec![0.0; input_box.dim()]);
        Ok(Self {
            state_dim: state_box.dim(),
            input_dim: input_box.dim(),
            graph,
            state_box,
            input_box,
            dyn_lipschitz,
            reference_state,
            reference_input,
            dynamics,
            label: label.into(),
        })
    }

    /// Temperature ring with the default `[−10, 10]` box.
    pub fn builtin_temperature(n_nodes: usize, phi: f64, theta: f64, t_ext: f64) -> Result<Self> {
        Self::temperature_on_box(n_nodes, phi, theta, t_ext, -10.0, 10.0)
    }

    pub fn temperature_on_box(n_nodes: usize, phi: f64, theta: f64, t_ext: f64, lo: f64, hi: f64) -> Result<Self> {
        let graph = InterconnectionGraph::ring_bidirectional(n_nodes)?;
        Self::temperature_on_graph(graph, phi, theta, t_ext, BoxDomain::uniform(1, lo, hi)?)
    }

    /// Heat exchange over an arbitrary graph. On the bidirectional ring the
    /// Lipschitz bound equals `|1 − 2φ − θ| + 2φ`.
    pub fn temperature_on_graph(
        graph: InterconnectionGraph,
        phi: f64,
        theta: f64,
        t_ext: f64,
        state_box: BoxDomain,
    ) -> Result<Self> {
        if state_box.dim() != 1 {
            return Err(Error::Shape("temperature subsystems are scalar".into()));
        }
        if 2.0 * phi + theta >= 1.0 {
            tracing::warn!(phi, theta, "2·phi + theta ≥ 1: difference dynamics are not contractive");
        }
        let dynamics = Temperature { phi, theta, t_ext };
        // the map is linear with M_ii = 1 − θ − φ d_i and M_ij = φ on arcs;
        // ‖M‖₂ ≤ √(‖M‖₁ ‖M‖∞)
        let n = graph.n_nodes();
        let diag = |i: usize| (1.0 - theta - phi * graph.neighbors(i).len() as f64).abs();
        let rows = (0..n)
            .map(|i| diag(i) + phi * graph.neighbors(i).len() as f64)
            .fold(0.0, f64::max);
        let cols = (0..n)
            .map(|j| diag(j) + phi * graph.influenced_by(j).len() as f64)
            .fold(0.0, f64::max);
        let lf = (rows * cols).sqrt();
        Self::new(
            "temperature",
            graph,
            state_box,
            BoxDomain::uniform(0, 0.0, 0.0)?,
            lf,
            Arc::new(dynamics),
        )
    }

    /// Directed ring of 2-D nonlinear subsystems on the default `[−20, 20]²` box.
    pub fn builtin_nonlinear2d(n_nodes: usize) -> Result<Self> {
        Self::nonlinear2d_on_box(n_nodes, -20.0, 20.0)
    }

    pub fn nonlinear2d_on_box(n_nodes: usize, lo: f64, hi: f64) -> Result<Self> {
        let graph = InterconnectionGraph::ring_directed(n_nodes)?;
        Self::nonlinear2d_on_graph(graph, BoxDomain::uniform(2, lo, hi)?)
    }

    pub fn nonlinear2d_on_graph(graph: InterconnectionGraph, state_box: BoxDomain) -> Result<Self> {
        if state_box.dim() != 2 {
            return Err(Error::Shape("nonlinear2d subsystems are two-dimensional".into()));
        }
        let s = Nonlinear2d::SELF;
        let self_norm = spectral_norm(array![[s[0][0], s[0][1]], [s[1][0], s[1][1]]].view()).value;
        let coupling = Nonlinear2d::COUPLING[0].abs().max(Nonlinear2d::COUPLING[1].abs());
        let off_diag = graph.adjacency_matrix() - Array2::<f64>::eye(graph.n_nodes());
        let shift = spectral_norm(off_diag.view()).value;
        // block-diagonal self term, coupling (A − I) ⊗ C, and the 0.1-Lipschitz norm term
        let lf = self_norm + coupling * shift + Nonlinear2d::NORM_GAIN.abs();
        Self::new(
            "nonlinear2d",
            graph,
            state_box,
            BoxDomain::uniform(0, 0.0, 0.0)?,
            lf,
            Arc::new(Nonlinear2d),
        )
    }

    /// Affine homogeneous system; the Lipschitz bound is derived from the
    /// matrices unless `dyn_lipschitz` is given.
    pub fn affine(
        graph: InterconnectionGraph,
        dynamics: AffineCoupled,
        state_box: BoxDomain,
        input_box: BoxDomain,
        dyn_lipschitz: Option<f64>,
    ) -> Result<Self> {
        let n = state_box.dim();
        let m = input_box.dim();
        let shape_ok = dynamics.self_matrix.dim() == (n, n)
            && dynamics.neighbor_matrix.dim() == (n, n)
            && dynamics.input_matrix.dim() == (n, m)
            && dynamics.offset.len() == n;
        if !shape_ok {
            return Err(Error::Shape(format!(
                "affine system matrices do not match state dim {n} and input dim {m}"
            )));
        }
        let lf = match dyn_lipschitz {
            Some(l) => l,
            None => {
                let off_diag = graph.adjacency_matrix() - Array2::<f64>::eye(graph.n_nodes());
                spectral_norm(dynamics.self_matrix.view()).value
                    + spectral_norm(off_diag.view()).value * spectral_norm(dynamics.neighbor_matrix.view()).value
                    + spectral_norm(dynamics.input_matrix.view()).value
            }
        }
        .max(f64::MIN_POSITIVE);
        Self::new("external", graph, state_box, input_box, lf, Arc::new(dynamics))
    }

    pub fn with_dyn_lipschitz(mut self, l: f64) -> Result<Self> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Hyper(format!("dyn_lipschitz must be positive, got {l}")));
        }
        self.dyn_lipschitz = l;
        Ok(self)
    }

    /// Same dynamics on another graph (used when transferring to larger systems).
    pub fn rebind(&self, graph: InterconnectionGraph) -> Self {
        Self {
            graph,
            ..self.clone()
        }
    }

    pub fn with_reference(mut self, state: Vec<f64>) -> Result<Self> {
        if !self.state_box.contains(&state) {
            return Err(Error::Domain(format!("reference {state:?} is outside the state box")));
        }
        self.reference_state = state;
        Ok(self)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn graph(&self) -> &InterconnectionGraph {
        &self.graph
    }
    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn state_box(&self) -> &BoxDomain {
        &self.state_box
    }
    pub fn input_box(&self) -> &BoxDomain {
        &self.input_box
    }
    pub fn dyn_lipschitz(&self) -> f64 {
        self.dyn_lipschitz
    }
    pub fn reference_state(&self) -> &[f64] {
        &self.reference_state
    }
    pub fn reference_input(&self) -> &[f64] {
        &self.reference_input
    }

    pub fn zero_inputs(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_nodes(), self.input_dim), |(_, c)| self.reference_input[c])
    }

    fn check_rows(&self, what: &str, m: ArrayView2<'_, f64>, cols: usize, domain: &BoxDomain) -> Result<()> {
        if m.dim() != (self.n_nodes(), cols) {
            return Err(Error::Shape(format!(
                "{what} must be {}×{cols}, got {:?}",
                self.n_nodes(),
                m.dim()
            )));
        }
        for (i, row) in m.rows().into_iter().enumerate() {
            let row = row.to_vec();
            if cols > 0 && !domain.contains(&row) {
                return Err(Error::Domain(format!("{what} row {i} = {row:?} is outside the box")));
            }
        }
        Ok(())
    }

    /// One step of the interconnected system; inputs must lie in `X × W`.
    pub fn step(&self, x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_rows("state", x, self.state_dim, &self.state_box)?;
        self.check_rows("input", w, self.input_dim, &self.input_box)?;
        Ok(self.step_unchecked(x, w))
    }

    pub(crate) fn step_unchecked(&self, x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Array2<f64> {
        self.dynamics.step(&self.graph, x, w)
    }

    pub fn in_state_box(&self, x: ArrayView2<'_, f64>) -> bool {
        x.rows().into_iter().all(|r| self.state_box.contains(&r.to_vec()))
    }

    /// Concatenated state `[x_i, x_j for j ∈ N_i ascending]`.
    pub fn local_state(&self, x: ArrayView2<'_, f64>, node: usize) -> Result<LocalState> {
        if node >= self.n_nodes() {
            return Err(Error::Shape(format!("node {node} out of range")));
        }
        let closure = self.graph.closure(node, 1);
        Ok(LocalState {
            node,
            values: gather_rows(x, &closure.nodes),
        })
    }

    /// Full state with `closure` rows taken from `values` and every other row
    /// at the reference point.
    pub fn embed(&self, closure: &[usize], values: &[f64]) -> Array2<f64> {
        let n = self.state_dim;
        let mut full = Array2::from_shape_fn((self.n_nodes(), n), |(_, c)| self.reference_state[c]);
        for (k, &node) in closure.iter().enumerate() {
            full.row_mut(node)
                .iter_mut()
                .zip(&values[k * n..(k + 1) * n])
                .for_each(|(d, s)| *d = *s);
        }
        full
    }

    fn embed_inputs(&self, closure: &[usize], values: &[f64]) -> Array2<f64> {
        let m = self.input_dim;
        let mut full = self.zero_inputs();
        if m > 0 {
            for (k, &node) in closure.iter().enumerate() {
                full.row_mut(node)
                    .iter_mut()
                    .zip(&values[k * m..(k + 1) * m])
                    .for_each(|(d, s)| *d = *s);
            }
        }
        full
    }

    /// Local transition map for node `center`.
    ///
    /// `x_closure` holds the states of `closure(center, 2)` in two-hop mode
    /// or of `closure(center, 1)` in embed-reference mode; `w_local` the
    /// inputs of `closure(center, 1)`. Returns the next local state.
    pub fn local_step(&self, center: usize, x_closure: &[f64], w_local: &[f64], mode: ClosureMode) -> Result<LocalState> {
        let stepper = LocalStepper::new(self, center, 1, mode);
        if x_closure.len() != stepper.free_len() {
            return Err(Error::Closure(format!(
                "{mode} step for node {center} needs {} state values (closure {:?}), got {}",
                stepper.free_len(),
                stepper.free.nodes,
                x_closure.len()
            )));
        }
        if w_local.len() != stepper.input_len() {
            return Err(Error::Closure(format!(
                "expected {} local input values, got {}",
                stepper.input_len(),
                w_local.len()
            )));
        }
        Ok(LocalState {
            node: center,
            values: stepper.step(x_closure, w_local),
        })
    }

    /// Rolls the system forward; stops early (and flags it) if a state leaves the box.
    pub fn simulate(&self, x0: ArrayView2<'_, f64>, inputs: &[Array2<f64>], horizon: usize) -> Result<Trajectory> {
        self.check_rows("initial state", x0, self.state_dim, &self.state_box)?;
        if self.input_dim > 0 && inputs.len() < horizon {
            return Err(Error::Shape(format!(
                "need {horizon} input matrices, got {}",
                inputs.len()
            )));
        }
        let mut states = vec![x0.to_owned()];
        let mut used = Vec::with_capacity(horizon);
        let mut escaped_at = None;
        for k in 0..horizon {
            let w = if self.input_dim > 0 {
                inputs[k].clone()
            } else {
                self.zero_inputs()
            };
            let next = self.step(states[k].view(), w.view())?;
            used.push(w);
            let inside = self.in_state_box(next.view());
            states.push(next);
            if !inside {
                escaped_at = Some(k + 1);
                break;
            }
        }
        Ok(Trajectory {
            states,
            inputs: used,
            escaped_at,
        })
    }

    /// Counts sampled `(x, w)` whose successor leaves the state box.
    pub fn forward_invariance_violations(&self, samples: usize, rng: &mut impl Rng) -> usize {
        let full_x = self.state_box.power(self.n_nodes());
        let full_w = self.input_box.power(self.n_nodes());
        (0..samples)
            .filter(|_| {
                let x = Array2::from_shape_vec((self.n_nodes(), self.state_dim), full_x.sample(rng)).unwrap();
                let w = Array2::from_shape_vec((self.n_nodes(), self.input_dim), full_w.sample(rng)).unwrap();
                !self.in_state_box(self.step_unchecked(x.view(), w.view()).view())
            })
            .count()
    }

    /// Diagnostic estimate of the local map's Lipschitz constant from random
    /// pairs. Never used by the verifier.
    pub fn estimate_local_lipschitz(&self, center: usize, pairs: usize, rng: &mut impl Rng) -> f64 {
        let stepper = LocalStepper::new(self, center, 1, ClosureMode::TwoHop);
        let xb = self.state_box.power(stepper.free.len());
        let wb = self.input_box.power(stepper.inputs.len());
        let mut worst = 0.0_f64;
        for _ in 0..pairs {
            let (a, b) = (xb.sample(rng), xb.sample(rng));
            let (wa, wbv) = (wb.sample(rng), wb.sample(rng));
            let num = crate::linalg::distance(&stepper.step(&a, &wa), &stepper.step(&b, &wbv));
            let den = (crate::linalg::distance(&a, &b).powi(2) + crate::linalg::distance(&wa, &wbv).powi(2)).sqrt();
            if den > 0.0 {
                worst = worst.max(num / den);
            }
        }
        worst
    }
}

fn clamp_into(b: &BoxDomain, v: Vec<f64>) -> Vec<f64> {
    v.iter()
        .zip(b.lo.iter().zip(&b.hi))
        .map(|(x, (l, h))| x.clamp(*l, *h))
        .collect()
}

pub(crate) fn gather_rows(x: ArrayView2<'_, f64>, nodes: &[usize]) -> Vec<f64> {
    nodes.iter().flat_map(|&j| x.row(j).to_vec()).collect()
}

/// Neighbourhood transition map: free states on `free`, next states read
/// back for the first `out_nodes` entries of `free`.
#[derive(Debug, Clone)]
pub struct LocalStepper<'a> {
    oracle: &'a SystemOracle,
    /// Nodes whose states are free variables.
    pub free: Closure,
    /// Nodes whose next states are returned (also the nodes whose inputs are free).
    pub inputs: Vec<usize>,
}

impl<'a> LocalStepper<'a> {
    /// Stepper returning the next states of `closure(center, out_depth)`.
    pub fn new(oracle: &'a SystemOracle, center: usize, out_depth: usize, mode: ClosureMode) -> Self {
        let graph = oracle.graph();
        let out = graph.closure(center, out_depth);
        let free = match mode {
            ClosureMode::TwoHop => graph.closure(center, out_depth + 1),
            ClosureMode::EmbedReference => out.clone(),
        };
        Self {
            oracle,
            free,
            inputs: out.nodes,
        }
    }

    pub fn free_len(&self) -> usize {
        self.free.len() * self.oracle.state_dim()
    }

    pub fn input_len(&self) -> usize {
        self.inputs.len() * self.oracle.input_dim()
    }

    pub fn out_len(&self) -> usize {
        self.inputs.len() * self.oracle.state_dim()
    }

    pub fn step(&self, x_free: &[f64], w_out: &[f64]) -> Vec<f64> {
        let full_x = self.oracle.embed(&self.free.nodes, x_free);
        let full_w = self.oracle.embed_inputs(&self.inputs, w_out);
        let next = self.oracle.step_unchecked(full_x.view(), full_w.view());
        gather_rows(next.view(), &self.inputs)
    }
}

/// Concatenated local state of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub node: usize,
    pub values: Vec<f64>,
}

/// Simulated trajectory; `states[k + 1] = f(states[k], inputs[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub inputs: Vec<Array2<f64>>,
    /// Step at which the state first left the box (the trajectory stops there).
    pub escaped_at: Option<usize>,
}

impl Trajectory {
    /// Tidy CSV, header `k,node,dim,value`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "k,node,dim,value")?;
        for (k, x) in self.states.iter().enumerate() {
            for ((node, dim), v) in x.indexed_iter() {
                writeln!(out, "{k},{node},{dim},{v}")?;
            }
        }
        Ok(())
    }

    /// Largest per-node Euclidean distance to `other` at step `k`.
    pub fn max_row_distance(&self, other: &Trajectory, k: usize) -> f64 {
        let (a, b) = (&self.states[k], &other.states[k]);
        (0..a.nrows())
            .map(|i| crate::linalg::distance(&a.slice(s![i, ..]).to_vec(), &b.slice(s![i, ..]).to_vec()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn temperature_examples() {
        let o = SystemOracle::builtin_temperature(3, 0.05, 0.1, 0.0).unwrap();
        let x = array![[1.0], [0.0], [0.0]];
        let next = o.step(x.view(), o.zero_inputs().view()).unwrap();
        assert!(close(next.as_slice().unwrap(), &[0.8, 0.05, 0.05], 1e-15));
        assert_eq!(o.state_box().lo, vec![-10.0]);
        assert_eq!(o.state_box().hi, vec![10.0]);
        assert_eq!(o.input_dim(), 0);
        assert!((o.dyn_lipschitz() - 0.9).abs() < 1e-15);

        let warm = SystemOracle::builtin_temperature(4, 0.2, 0.3, 2.5).unwrap();
        let eq = Array2::from_elem((4, 1), 2.5);
        assert_eq!(warm.step(eq.view(), warm.zero_inputs().view()).unwrap(), eq);
    }

    #[test]
    fn nonlinear_examples() {
        let o = SystemOracle::builtin_nonlinear2d(3).unwrap();
        let mut x = Array2::zeros((3, 2));
        x[[0, 0]] = 1.0;
        let next = o.step(x.view(), o.zero_inputs().view()).unwrap();
        assert!(close(&next.row(0).to_vec(), &[0.7, -0.1], 1e-15));
        let zero = Array2::zeros((3, 2));
        assert_eq!(o.step(zero.view(), o.zero_inputs().view()).unwrap(), zero);
        assert_eq!(o.state_box().lo, vec![-20.0, -20.0]);
    }

    #[test]
    fn step_rejects_out_of_domain() {
        let o = SystemOracle::builtin_temperature(3, 0.05, 0.1, 0.0).unwrap();
        let x = array![[11.0], [0.0], [0.0]];
        assert!(matches!(o.step(x.view(), o.zero_inputs().view()), Err(Error::Domain(_))));
        assert!(matches!(o.step(array![[0.0]].view(), o.zero_inputs().view()), Err(Error::Shape(_))));
    }

    #[test]
    fn local_state_examples() {
        let x = array![[1.0], [2.0], [3.0]];
        let bi = SystemOracle::builtin_temperature(3, 0.05, 0.1, 0.0).unwrap();
        assert_eq!(bi.local_state(x.view(), 0).unwrap().values, vec![1.0, 2.0, 3.0]);

        let di = SystemOracle::affine(
            InterconnectionGraph::ring_directed(3).unwrap(),
            AffineCoupled {
                self_matrix: array![[0.5]],
                neighbor_matrix: array![[0.1]],
                input_matrix: Array2::zeros((1, 0)),
                offset: vec![0.0],
            },
            BoxDomain::uniform(1, -5.0, 5.0).unwrap(),
            BoxDomain::uniform(0, 0.0, 0.0).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(di.local_state(x.view(), 0).unwrap().values, vec![1.0, 2.0]);

        let single = scalar_contraction(0.5);
        assert_eq!(single.local_state(array![[0.25]].view(), 0).unwrap().values, vec![0.25]);
    }

    pub(crate) fn scalar_contraction(a: f64) -> SystemOracle {
        SystemOracle::affine(
            InterconnectionGraph::from_edges(1, &[]).unwrap(),
            AffineCoupled {
                self_matrix: array![[a]],
                neighbor_matrix: array![[0.0]],
                input_matrix: Array2::zeros((1, 0)),
                offset: vec![0.0],
            },
            BoxDomain::uniform(1, -1.0, 1.0).unwrap(),
            BoxDomain::uniform(0, 0.0, 0.0).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn local_step_modes() {
        // 3-ring: the two-hop closure is the whole graph, so both modes agree.
        let o = SystemOracle::builtin_temperature(3, 0.05, 0.1, 0.0).unwrap();
        let x = [0.3, -0.7, 0.9];
        let a = o.local_step(0, &x, &[], ClosureMode::TwoHop).unwrap();
        let b = o.local_step(0, &x, &[], ClosureMode::EmbedReference).unwrap();
        assert_eq!(a, b);

        // nonlinear ring of 5: node 0's two-hop closure is {0, 1, 2}
        let nl = SystemOracle::builtin_nonlinear2d(5).unwrap();
        let stepper = LocalStepper::new(&nl, 0, 1, ClosureMode::TwoHop);
        assert_eq!(stepper.free.nodes, vec![0, 1, 2]);
        assert!(matches!(
            nl.local_step(0, &[0.0; 4], &[], ClosureMode::TwoHop),
            Err(Error::Closure(_))
        ));

        // embed-reference is exact only when the node two hops out sits at the reference
        let local = [1.0, 0.5, -2.0, 1.5];
        let approx = nl.local_step(0, &local, &[], ClosureMode::EmbedReference).unwrap();
        let exact_zero = nl
            .local_step(0, &[1.0, 0.5, -2.0, 1.5, 0.0, 0.0], &[], ClosureMode::TwoHop)
            .unwrap();
        assert_eq!(approx, exact_zero);
        let exact_other = nl
            .local_step(0, &[1.0, 0.5, -2.0, 1.5, 3.0, -1.0], &[], ClosureMode::TwoHop)
            .unwrap();
        assert_ne!(approx, exact_other);
        assert_eq!(approx.values[..2], exact_other.values[..2]);
    }

    #[test]
    fn two_hop_local_step_matches_full_step() {
        let mut rng = stream(11, Stream::Probes);
        for oracle in [
            SystemOracle::builtin_temperature(7, 0.05, 0.1, 0.0).unwrap(),
            SystemOracle::builtin_nonlinear2d(6).unwrap(),
        ] {
            let full_box = oracle.state_box().power(oracle.n_nodes());
            for _ in 0..10_000 {
                let x = Array2::from_shape_vec((oracle.n_nodes(), oracle.state_dim()), full_box.sample(&mut rng)).unwrap();
                let i = rng.random_range(0..oracle.n_nodes());
                let next = oracle.step_unchecked(x.view(), oracle.zero_inputs().view());
                let stepper = LocalStepper::new(&oracle, i, 1, ClosureMode::TwoHop);
                let local = gather_rows(x.view(), &stepper.free.nodes);
                let got = oracle.local_step(i, &local, &[], ClosureMode::TwoHop).unwrap();
                let want = oracle.local_state(next.view(), i).unwrap();
                assert!(close(&got.values, &want.values, 1e-12));
            }
        }
    }

    #[test]
    fn determinism_and_contraction_bound() {
        let o = SystemOracle::builtin_temperature(6, 0.05, 0.1, 0.0).unwrap();
        let mut rng = stream(3, Stream::Probes);
        let b = o.state_box().power(6);
        let factor = Temperature { phi: 0.05, theta: 0.1, t_ext: 0.0 }.contraction_factor();
        for _ in 0..2000 {
            let x = Array2::from_shape_vec((6, 1), b.sample(&mut rng)).unwrap();
            let y = Array2::from_shape_vec((6, 1), b.sample(&mut rng)).unwrap();
            let fx = o.step(x.view(), o.zero_inputs().view()).unwrap();
            assert_eq!(fx, o.step(x.view(), o.zero_inputs().view()).unwrap());
            let fy = o.step(y.view(), o.zero_inputs().view()).unwrap();
            let sup = |a: &Array2<f64>, b: &Array2<f64>| (a - b).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(sup(&fx, &fy) <= factor * sup(&x, &y) + 1e-12);
        }
    }

    #[test]
    fn dyn_lipschitz_bounds_observed_expansion() {
        let mut rng = stream(5, Stream::Probes);
        for o in [
            SystemOracle::builtin_temperature(5, 0.05, 0.1, 0.0).unwrap(),
            SystemOracle::builtin_nonlinear2d(5).unwrap(),
        ] {
            let est = o.estimate_local_lipschitz(0, 10_000, &mut rng);
            assert!(est <= o.dyn_lipschitz(), "{}: {est} > {}", o.label(), o.dyn_lipschitz());
        }
    }

    #[test]
    fn simulate_examples() {
        let o = SystemOracle::builtin_temperature(3, 0.05, 0.1, 0.0).unwrap();
        let x0 = array![[1.0], [0.0], [0.0]];
        let t0 = o.simulate(x0.view(), &[], 0).unwrap();
        assert_eq!(t0.states, vec![x0.clone()]);

        let t = o.simulate(x0.view(), &[], 2).unwrap();
        let one = o.step(x0.view(), o.zero_inputs().view()).unwrap();
        let two = o.step(one.view(), o.zero_inputs().view()).unwrap();
        assert_eq!(t.states, vec![x0.clone(), one, two]);
        assert!(t.escaped_at.is_none());

        let a = o.simulate(array![[5.0], [-3.0], [9.0]].view(), &[], 40).unwrap();
        let b = o.simulate(array![[-8.0], [2.0], [0.5]].view(), &[], 40).unwrap();
        for k in 0..40 {
            assert!(a.max_row_distance(&b, k + 1) < a.max_row_distance(&b, k));
        }

        let mut csv = Vec::new();
        t0.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "k,node,dim,value\n0,0,0,1\n0,1,0,0\n0,2,0,0\n");
    }

    #[test]
    fn simulate_flags_escape() {
        // x' = 2x leaves [-1, 1] from 0.6 after one step
        let o = scalar_contraction(2.0);
        let t = o.simulate(array![[0.6]].view(), &[], 10).unwrap();
        assert_eq!(t.escaped_at, Some(1));
        assert_eq!(t.states.len(), 2);
    }
}
