//! Certificate constants, dataset sampling, hinge losses and the optimiser loop.
//!
//! For every sample `(x, x̂, w, ŵ)` and node `i` the three condition
//! residuals are
//!
//! ```text
//! r1 = −V_i(x, x̂) + α |Δ̃_i|^κ
//! r2 =  V_i(x, x̂) − ᾱ |Δ̃_i|^κ
//! r3 =  V_i(x⁺, x̂⁺) − V_i(x, x̂) + α̃ |Δ̃_i|^κ − σ |Δw̃_i|^κ
//! ```
//!
//! where `Δ̃_i` is the state difference over the nodes node `i`'s embedding
//! reads. Each contributes the hinge `relu(r_k − λ)` weighted by `c_k`.

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{backward, forward_cached, GnnParams, LyapunovCandidate};
use crate::rng::{stream, Stream};
use crate::system::{gather_rows, ClosureMode, LocalStepper, SystemOracle};
use crate::topology::{InterconnectionGraph, NodeClassPartition};
use crate::verifier::condition_lipschitz;

/// Constants of one node class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassHyper {
    /// Lower bound coefficient `α`.
    pub alpha: f64,
    /// Upper bound coefficient `ᾱ`.
    pub alpha_bar: f64,
    /// Decay coefficient `α̃`.
    pub alpha_tilde: f64,
    /// Input gain `σ`.
    pub sigma: f64,
    /// Margin `λ < 0`.
    pub lambda: f64,
}

impl Default for ClassHyper {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            alpha_bar: 1.0,
            alpha_tilde: 0.005,
            sigma: 0.0,
            lambda: -0.0003,
        }
    }
}

impl ClassHyper {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.alpha_bar, self.alpha_tilde, self.sigma, self.lambda];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Hyper("non-finite certificate constant".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.alpha_bar) {
            return Err(Error::Hyper(format!(
                "need 0 < alpha ≤ alpha_bar, got {} and {}",
                self.alpha, self.alpha_bar
            )));
        }
        if self.alpha_tilde <= 0.0 {
            return Err(Error::Hyper("alpha_tilde must be positive".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Hyper("sigma must be nonnegative".into()));
        }
        if self.lambda >= 0.0 {
            return Err(Error::Hyper("lambda must be negative".into()));
        }
        Ok(())
    }
}

/// Degree, per-class constants and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateHyper {
    pub kappa: u32,
    /// One entry per node class; a single entry applies to every class.
    pub classes: Vec<ClassHyper>,
    pub loss_weights: [f64; 3],
}

impl CertificateHyper {
    pub fn uniform(num_classes: usize, class: ClassHyper, kappa: u32, loss_weights: [f64; 3]) -> Result<Self> {
        let h = Self {
            kappa,
            classes: vec![class; num_classes.max(1)],
            loss_weights,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::Hyper("kappa must be a positive integer".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Hyper("no class constants given".into()));
        }
        if self.loss_weights.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Hyper("loss weights must be positive".into()));
        }
        self.classes.iter().try_for_each(ClassHyper::validate)
    }

    pub fn class(&self, c: usize) -> &ClassHyper {
        if self.classes.len() == 1 {
            &self.classes[0]
        } else {
            &self.classes[c]
        }
    }

    /// Checks the class count against a partition.
    pub fn check_partition(&self, partition: &NodeClassPartition) -> Result<()> {
        if self.classes.len() != 1 && self.classes.len() != partition.num_classes() {
            return Err(Error::Hyper(format!(
                "{} class constant sets for {} node classes",
                self.classes.len(),
                partition.num_classes()
            )));
        }
        Ok(())
    }

    pub fn kappa_f64(&self) -> f64 {
        self.kappa as f64
    }
}

/// Node classes used for per-class constants and verification: nodes whose
/// neighbourhoods agree out to the first condition's full dependency depth.
pub fn certificate_partition(graph: &InterconnectionGraph, graph_layers: usize) -> Result<NodeClassPartition> {
    graph.node_equivalence_classes(graph_layers + 1)
}

/// One training point of the augmented space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Array2<f64>,
    pub xh: Array2<f64>,
    pub w: Array2<f64>,
    pub wh: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl TrainingDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// I.i.d. uniform samples over `X × X × W × W`; pairs with `x = x̂` are redrawn.
pub fn sample_dataset(oracle: &SystemOracle, m_points: usize, seed: u64) -> Result<TrainingDataset> {
    if m_points == 0 {
        return Err(Error::Usage("dataset needs at least one point".into()));
    }
    let nn = oracle.n_nodes();
    let xb = oracle.state_box().power(nn);
    let wb = oracle.input_box().power(nn);
    let degenerate = xb.volume_is_zero() && oracle.state_box().widths().iter().all(|&w| w == 0.0);
    if degenerate && m_points > 1 {
        tracing::warn!("state box has zero volume: all samples are identical");
    }
    let mut rng = stream(seed, Stream::Dataset);
    let shape_x = (nn, oracle.state_dim());
    let shape_w = (nn, oracle.input_dim());
    let samples = (0..m_points)
        .map(|_| {
            let x = Array2::from_shape_vec(shape_x, xb.sample(&mut rng)).unwrap();
            let mut xh = Array2::from_shape_vec(shape_x, xb.sample(&mut rng)).unwrap();
            while xh == x && !degenerate {
                xh = Array2::from_shape_vec(shape_x, xb.sample(&mut rng)).unwrap();
            }
            Sample {
                x,
                xh,
                w: Array2::from_shape_vec(shape_w, wb.sample(&mut rng)).unwrap(),
                wh: Array2::from_shape_vec(shape_w, wb.sample(&mut rng)).unwrap(),
            }
        })
        .collect();
    Ok(TrainingDataset { samples, seed })
}

/// Hinge values of a single sample summed over nodes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LossTerms {
    pub fn weighted(&self, c: [f64; 3]) -> f64 {
        c[0] * self.l1 + c[1] * self.l2 + c[2] * self.l3
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub mode: ClosureMode,
    pub gradient: bool,
    /// Record hinge activity and rectifier signs (finite-difference checks).
    pub pattern: bool,
    /// Samples per parallel work unit; fixes the reduction order.
    pub chunk: usize,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            mode: ClosureMode::TwoHop,
            gradient: false,
            pattern: false,
            chunk: 64,
        }
    }
}

/// Dataset-level loss, residual statistics and (optionally) the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub total: f64,
    pub terms: LossTerms,
    /// Per-sample hinge sums in dataset order.
    pub per_sample: Vec<LossTerms>,
    /// Largest residual `r_k` per condition.
    pub worst: [f64; 3],
    /// Largest residual over all conditions, per node class.
    pub worst_per_class: Vec<f64>,
    /// Number of (sample, node) pairs with an active hinge, per condition.
    pub violations: [usize; 3],
    pub grad: Option<GnnParams>,
    pub pattern: Option<Vec<bool>>,
}

impl LossEval {
    pub fn worst_margin(&self) -> f64 {
        self.worst.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Precomputed per-node index data shared by all chunks.
struct NodePlan {
    /// Nodes read by node `i`'s embedding.
    vclosure: Vec<Vec<usize>>,
    class_of: Vec<usize>,
}

fn node_plan(graph: &InterconnectionGraph, depth: usize, partition: &NodeClassPartition) -> NodePlan {
    NodePlan {
        vclosure: (0..graph.n_nodes()).map(|i| graph.closure(i, depth).nodes).collect(),
        class_of: partition.class_of.clone(),
    }
}

fn sub_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, nodes: &[usize]) -> f64 {
    nodes
        .iter()
        .map(|&j| {
            a.row(j)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn powk(v: f64, kappa: f64) -> f64 {
    if kappa == 1.0 {
        v
    } else {
        v.powf(kappa)
    }
}

struct ChunkResult {
    per_sample: Vec<LossTerms>,
    worst: [f64; 3],
    worst_per_class: Vec<f64>,
    violations: [usize; 3],
    grad: Option<GnnParams>,
    pattern: Vec<bool>,
}

/// Loss over `samples` for the candidate on `oracle`'s graph.
pub fn evaluate_loss(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    partition: &NodeClassPartition,
    samples: &[Sample],
    opts: LossOptions,
) -> Result<LossEval> {
    cand.hyper.check_partition(partition)?;
    if partition.class_of.len() != oracle.n_nodes() {
        return Err(Error::Shape("partition does not match the graph".into()));
    }
    if cand.config.state_dim != oracle.state_dim() {
        return Err(Error::Shape("candidate and system state dimensions differ".into()));
    }
    let plan = node_plan(oracle.graph(), cand.config.graph_layers(), partition);
    let chunk = opts.chunk.max(1);
    let parts: Vec<Result<ChunkResult>> = samples
        .par_chunks(chunk)
        .map(|c| evaluate_chunk(cand, oracle, &plan, partition.num_classes(), c, opts))
        .collect();

    let mut eval = LossEval {
        total: 0.0,
        terms: LossTerms::default(),
        per_sample: Vec::with_capacity(samples.len()),
        worst: [f64::NEG_INFINITY; 3],
        worst_per_class: vec![f64::NEG_INFINITY; partition.num_classes()],
        violations: [0; 3],
        grad: None,
        pattern: opts.pattern.then(Vec::new),
    };
    for part in parts {
        let part = part?;
        eval.per_sample.extend(part.per_sample);
        for k in 0..3 {
            eval.worst[k] = eval.worst[k].max(part.worst[k]);
            eval.violations[k] += part.violations[k];
        }
        for (a, b) in eval.worst_per_class.iter_mut().zip(&part.worst_per_class) {
            *a = a.max(*b);
        }
        if let Some(g) = part.grad {
            match eval.grad.as_mut() {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => eval.grad = Some(g),
            }
        }
        if let Some(p) = eval.pattern.as_mut() {
            p.extend(part.pattern);
        }
    }
    // sample-major accumulation of the per-sample sums
    for t in &eval.per_sample {
        eval.terms.l1 += t.l1;
        eval.terms.l2 += t.l2;
        eval.terms.l3 += t.l3;
    }
    eval.total = eval.terms.weighted(cand.hyper.loss_weights);
    if !eval.total.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok(eval)
}

fn evaluate_chunk(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    plan: &NodePlan,
    num_classes: usize,
    samples: &[Sample],
    opts: LossOptions,
) -> Result<ChunkResult> {
    let graph = oracle.graph();
    let nn = graph.n_nodes();
    let n = oracle.state_dim();
    let depth = cand.config.graph_layers();
    let kappa = cand.kappa();
    let c = cand.hyper.loss_weights;

    // blocks per sample: x, x̂, then next-state blocks
    let next_blocks = match opts.mode {
        ClosureMode::TwoHop => 2,
        ClosureMode::EmbedReference => 2 * nn,
    };
    let per = 2 + next_blocks;
    let mut stacked = Array2::<f64>::zeros((samples.len() * per * nn, n));
    let steppers: Vec<LocalStepper<'_>> = match opts.mode {
        ClosureMode::TwoHop => Vec::new(),
        ClosureMode::EmbedReference => (0..nn)
            .map(|i| LocalStepper::new(oracle, i, depth, ClosureMode::EmbedReference))
            .collect(),
    };
    for (s, smp) in samples.iter().enumerate() {
        let base = s * per * nn;
        let mut put = |block: usize, m: &Array2<f64>| {
            stacked
                .slice_mut(s![base + block * nn..base + (block + 1) * nn, ..])
                .assign(m);
        };
        put(0, &smp.x);
        put(1, &smp.xh);
        match opts.mode {
            ClosureMode::TwoHop => {
                put(2, &oracle.step(smp.x.view(), smp.w.view())?);
                put(3, &oracle.step(smp.xh.view(), smp.wh.view())?);
            }
            ClosureMode::EmbedReference => {
                oracle.step(smp.x.view(), smp.w.view())?;
                oracle.step(smp.xh.view(), smp.wh.view())?;
                for (i, st) in steppers.iter().enumerate() {
                    for (k, (x, w)) in [(&smp.x, &smp.w), (&smp.xh, &smp.wh)].into_iter().enumerate() {
                        let local = gather_rows(x.view(), &st.free.nodes);
                        let local_w = gather_rows(w.view(), &st.inputs);
                        let next = st.step(&local, &local_w);
                        put(2 + 2 * i + k, &oracle.embed(&st.inputs, &next));
                    }
                }
            }
        }
    }

    let (g, cache) = forward_cached(&cand.params, graph, stacked.view())?;
    let mut d_out = opts.gradient.then(|| Array2::<f64>::zeros(g.dim()));
    let mut out = ChunkResult {
        per_sample: Vec::with_capacity(samples.len()),
        worst: [f64::NEG_INFINITY; 3],
        worst_per_class: vec![f64::NEG_INFINITY; num_classes],
        violations: [0; 3],
        grad: None,
        pattern: Vec::new(),
    };

    // |a − b|^κ and its gradient direction with respect to a
    let pair = |ra: usize, rb: usize| -> (f64, Vec<f64>) {
        let a = g.row(ra);
        let b = g.row(rb);
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let norm = crate::linalg::euclidean(&d);
        let v = powk(norm, kappa);
        let scale = if norm > 0.0 { kappa * norm.powf(kappa - 2.0) } else { 0.0 };
        (v, d.into_iter().map(|e| e * scale).collect())
    };

    for (s, smp) in samples.iter().enumerate() {
        let base = s * per * nn;
        let mut terms = LossTerms::default();
        for i in 0..nn {
            let h = cand.hyper.class(plan.class_of[i]);
            let (ra, rb) = (base + i, base + nn + i);
            let (na, nb) = match opts.mode {
                ClosureMode::TwoHop => (base + 2 * nn + i, base + 3 * nn + i),
                ClosureMode::EmbedReference => (base + (2 + 2 * i) * nn + i, base + (3 + 2 * i) * nn + i),
            };
            let (v, dv) = pair(ra, rb);
            let (vn, dvn) = pair(na, nb);
            let dx = powk(sub_distance(smp.x.view(), smp.xh.view(), &plan.vclosure[i]), kappa);
            let dw = if oracle.input_dim() > 0 {
                powk(sub_distance(smp.w.view(), smp.wh.view(), &plan.vclosure[i]), kappa)
            } else {
                0.0
            };
            let r = [
                -v + h.alpha * dx,
                v - h.alpha_bar * dx,
                vn - v + h.alpha_tilde * dx - h.sigma * dw,
            ];
            let mut active = [false; 3];
            for k in 0..3 {
                let hinge = r[k] - h.lambda;
                active[k] = hinge > 0.0;
                if active[k] {
                    out.violations[k] += 1;
                    match k {
                        0 => terms.l1 += hinge,
                        1 => terms.l2 += hinge,
                        _ => terms.l3 += hinge,
                    }
                }
                out.worst[k] = out.worst[k].max(r[k]);
            }
            let wc = &mut out.worst_per_class[plan.class_of[i]];
            *wc = wc.max(r[0]).max(r[1]).max(r[2]);
            if opts.pattern {
                out.pattern.extend_from_slice(&active);
            }
            if let Some(d) = d_out.as_mut() {
                let dl_dv = -c[0] * active[0] as u8 as f64 + c[1] * active[1] as u8 as f64
                    - c[2] * active[2] as u8 as f64;
                let dl_dvn = c[2] * active[2] as u8 as f64;
                for (col, (&gv, &gn)) in dv.iter().zip(&dvn).enumerate() {
                    d[[ra, col]] += dl_dv * gv;
                    d[[rb, col]] -= dl_dv * gv;
                    d[[na, col]] += dl_dvn * gn;
                    d[[nb, col]] -= dl_dvn * gn;
                }
            }
        }
        out.per_sample.push(terms);
    }
    if opts.pattern {
        out.pattern.extend(cache.activation_pattern());
    }
    if let Some(d) = d_out {
        out.grad = Some(backward(&cand.params, graph, &cache, d.view())?);
    }
    Ok(out)
}

/// `(l1, l2, l3)` for one sample.
pub fn loss_terms(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    partition: &NodeClassPartition,
    sample: &Sample,
    mode: ClosureMode,
) -> Result<LossTerms> {
    let eval = evaluate_loss(
        cand,
        oracle,
        partition,
        std::slice::from_ref(sample),
        LossOptions {
            mode,
            ..Default::default()
        },
    )?;
    Ok(eval.per_sample[0])
}

/// `c₁L₁ + c₂L₂ + c₃L₃` over the dataset.
pub fn total_loss(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    partition: &NodeClassPartition,
    dataset: &TrainingDataset,
    mode: ClosureMode,
) -> Result<f64> {
    let opts = LossOptions {
        mode,
        ..Default::default()
    };
    Ok(evaluate_loss(cand, oracle, partition, &dataset.samples, opts)?.total)
}

/// Bias-corrected moment-estimate optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

/// Optimiser and stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Spectral-norm ceiling applied to every weight matrix after each step.
    pub spectral_cap: Option<f64>,
    /// Stop once the total loss is at or below this value.
    pub loss_threshold: f64,
    /// Verification radius used by the in-loop margin check; without it the
    /// check only requires every residual to be at most `λ`.
    pub margin_epsilon: Option<f64>,
    pub closure: ClosureMode,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 5000,
            batch_size: None,
            spectral_cap: Some(1.5),
            loss_threshold: 0.0,
            margin_epsilon: None,
            closure: ClosureMode::TwoHop,
            chunk: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Every residual is at most `λ` and the Lipschitz margin check holds.
    Margin,
    LossThreshold,
    EpochCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub stop: StopReason,
    pub violations: [usize; 3],
    /// Per class: every residual ≤ λ and λ + √2·L·ε ≤ 0.
    pub margin_check: Vec<bool>,
    /// Per class: collapsed condition Lipschitz constant at the final parameters.
    pub lipschitz: Vec<f64>,
    pub samples: usize,
    pub nodes: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn final_log(&self) -> &EpochLog {
        self.epochs.last().expect("report always holds the initial evaluation")
    }

    pub fn write_loss_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,loss,l1,l2,l3,worst_margin")?;
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{},{}", e.epoch, e.loss, e.l1, e.l2, e.l3, e.worst_margin)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let f = self.final_log();
        let flags: Vec<String> = self.margin_check.iter().map(|b| b.to_string()).collect();
        let lips: Vec<String> = self.lipschitz.iter().map(|l| format!("{l:.6e}")).collect();
        format!(
            "stop: {:?}\nepochs_run: {}\nsamples: {}\nnodes: {}\nfinal_loss: {:.9e}\nfinal_l1: {:.9e}\nfinal_l2: {:.9e}\nfinal_l3: {:.9e}\nworst_margin: {:.9e}\nviolations_c1: {}\nviolations_c2: {}\nviolations_c3: {}\nmargin_check: {}\nlipschitz: {}\nwall_time_s: {:.3}\n",
            self.stop,
            f.epoch,
            self.samples,
            self.nodes,
            f.loss,
            f.l1,
            f.l2,
            f.l3,
            f.worst_margin,
            self.violations[0],
            self.violations[1],
            self.violations[2],
            flags.join(","),
            lips.join(","),
            self.wall_time_s
        )
    }
}

fn margin_flags(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    partition: &NodeClassPartition,
    eval: &LossEval,
    opts: &TrainOptions,
) -> (Vec<bool>, Vec<f64>) {
    partition
        .representatives
        .iter()
        .enumerate()
        .map(|(c, &rep)| {
            let h = cand.hyper.class(c);
            let l = condition_lipschitz(cand, oracle, rep, h, cand.hyper.kappa, opts.closure).max;
            let sampled = eval.worst_per_class[c] <= h.lambda;
            let lipschitz_ok = opts
                .margin_epsilon
                .is_none_or(|eps| h.lambda + std::f64::consts::SQRT_2 * l * eps <= 0.0);
            (sampled && lipschitz_ok, l)
        })
        .unzip()
}

/// Minimises the total loss; returns the updated candidate and a report.
pub fn train(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    dataset: &TrainingDataset,
    opts: &TrainOptions,
) -> Result<(LyapunovCandidate, TrainReport)> {
    let started = Instant::now();
    cand.hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let partition = certificate_partition(oracle.graph(), cand.config.graph_layers())?;
    cand.hyper.check_partition(&partition)?;
    let full_batch = opts.batch_size.is_none_or(|b| b >= dataset.len());
    let loss_opts = |gradient: bool| LossOptions {
        mode: opts.closure,
        gradient,
        pattern: false,
        chunk: opts.chunk,
    };

    let mut current = cand.clone();
    let mut adam = Adam::new(current.params.num_params(), opts.learning_rate);
    let mut shuffle = stream(opts.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut logs = Vec::new();
    let mut eval = evaluate_loss(&current, oracle, &partition, &dataset.samples, loss_opts(full_batch))?;
    let log = |epoch: usize, e: &LossEval| EpochLog {
        epoch,
        loss: e.total,
        l1: e.terms.l1,
        l2: e.terms.l2,
        l3: e.terms.l3,
        worst_margin: e.worst_margin(),
    };
    logs.push(log(0, &eval));

    let mut stop = StopReason::EpochCap;
    let mut epoch = 0;
    loop {
        let (flags, _) = margin_flags(&current, oracle, &partition, &eval, opts);
        if flags.iter().all(|&b| b) {
            stop = StopReason::Margin;
            break;
        }
        if eval.total <= opts.loss_threshold {
            stop = StopReason::LossThreshold;
            break;
        }
        if epoch == opts.max_epochs {
            break;
        }
        epoch += 1;

        let mut flat = current.params.flatten();
        if full_batch {
            let grad = eval.grad.take().expect("full-batch evaluation carries the gradient");
            adam.step(&mut flat, &grad.flatten());
            update(&mut current, &flat, opts, epoch)?;
        } else {
            let bs = opts.batch_size.unwrap().max(1);
            order.shuffle(&mut shuffle);
            for batch in order.chunks(bs) {
                let picked: Vec<Sample> = batch.iter().map(|&k| dataset.samples[k].clone()).collect();
                let e = evaluate_loss(&current, oracle, &partition, &picked, loss_opts(true))?;
                let mut flat = current.params.flatten();
                adam.step(&mut flat, &e.grad.unwrap().flatten());
                update(&mut current, &flat, opts, epoch)?;
            }
        }
        eval = match evaluate_loss(&current, oracle, &partition, &dataset.samples, loss_opts(full_batch)) {
            Ok(e) => e,
            Err(Error::Numeric(reason)) => return Err(Error::TrainingFailure { epoch, reason }),
            Err(e) => return Err(e),
        };
        logs.push(log(epoch, &eval));
    }

    let (margin_check, lipschitz) = margin_flags(&current, oracle, &partition, &eval, opts);
    let report = TrainReport {
        epochs: logs,
        stop,
        violations: eval.violations,
        margin_check,
        lipschitz,
        samples: dataset.len(),
        nodes: oracle.n_nodes(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((current, report))
}

fn update(cand: &mut LyapunovCandidate, flat: &[f64], opts: &TrainOptions, epoch: usize) -> Result<()> {
    cand.params.assign(flat)?;
    if let Some(cap) = opts.spectral_cap {
        cand.params.apply_spectral_cap(cap);
    }
    if !cand.params.is_finite() {
        return Err(Error::TrainingFailure {
            epoch,
            reason: "parameters became non-finite".into(),
        });
    }
    Ok(())
}

/// Outcome of binding a candidate to another graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub old_nodes: usize,
    pub new_nodes: usize,
    pub old_classes: usize,
    pub new_classes: usize,
    /// Every neighbourhood type of the new graph was seen during training.
    pub structure_match: bool,
}

/// Rebinds the shared weights to `new_graph`; class constants are remapped by
/// neighbourhood type when possible.
pub fn transfer(
    cand: &LyapunovCandidate,
    old_graph: &InterconnectionGraph,
    new_graph: &InterconnectionGraph,
    new_state_dim: usize,
) -> Result<(LyapunovCandidate, TransferReport)> {
    if new_state_dim != cand.config.state_dim {
        return Err(Error::Transfer(format!(
            "candidate expects state dimension {}, target system has {new_state_dim}",
            cand.config.state_dim
        )));
    }
    let depth = cand.config.graph_layers();
    let old = certificate_partition(old_graph, depth)?;
    let new = certificate_partition(new_graph, depth)?;
    let structure_match = old.covers(&new);
    let mut out = cand.clone();
    if cand.hyper.classes.len() > 1 {
        out.hyper.classes = new
            .keys
            .iter()
            .map(|key| {
                old.keys
                    .iter()
                    .position(|k| k.is_some() && k == key)
                    .map(|c| cand.hyper.classes[c])
                    .unwrap_or(cand.hyper.classes[0])
            })
            .collect();
    }
    if !structure_match {
        tracing::warn!("target graph has neighbourhood types not present during training");
    }
    Ok((
        out,
        TransferReport {
            old_nodes: old_graph.n_nodes(),
            new_nodes: new_graph.n_nodes(),
            old_classes: old.num_classes(),
            new_classes: new.num_classes(),
            structure_match,
        },
    ))
}

/// Evaluates the three residuals on each sample (re-check after training).
pub fn sample_residuals(
    cand: &LyapunovCandidate,
    oracle: &SystemOracle,
    dataset: &TrainingDataset,
    mode: ClosureMode,
) -> Result<[f64; 3]> {
    let partition = certificate_partition(oracle.graph(), cand.config.graph_layers())?;
    let e = evaluate_loss(
        cand,
        oracle,
        &partition,
        &dataset.samples,
        LossOptions {
            mode,
            ..Default::default()
        },
    )?;
    Ok(e.worst)
}
