//! Grid-sampling verification of local certificates and their composition.
//!
//! For each node class a covering grid of the local state space is built,
//! the three condition residuals are maximised over all admissible grid
//! pairs, and the sampled maximum `η̂` is extrapolated to the continuum with
//! a Lipschitz bound: a condition is certified when
//! `η̂ + factor · L · ε ≤ 0`.
//!
//! Pairs with identical state arguments are excluded from the maximum, since
//! every condition vanishes (or is irreducibly zero) on the diagonal.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{pow_dist, LocalCertificate};
use crate::linalg::distance;
use crate::system::{BoxDomain, ClosureMode, LocalStepper, SystemOracle};
use crate::topology::{InterconnectionGraph, NodeClassPartition};
use crate::training::{certificate_partition, CertificateHyper, ClassHyper};

/// Default cap on condition evaluations per class.
pub const DEFAULT_BUDGET: u128 = 100_000_000;

/// Axis-aligned lattice covering a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverGrid {
    pub domain: BoxDomain,
    /// Requested covering radius.
    pub radius: f64,
    /// Coordinates per axis.
    pub axes: Vec<Vec<f64>>,
    /// Covering radius actually achieved, `√Σ (s_k/2)²`.
    pub achieved_radius: f64,
}

fn axis_counts(domain: &BoxDomain, radius: f64) -> Vec<u128> {
    let dim = domain.dim().max(1) as f64;
    let spacing = 2.0 * radius / dim.sqrt();
    domain
        .widths()
        .iter()
        .map(|&w| if w == 0.0 { 1 } else { ((w / spacing).ceil() as u128).max(1) })
        .collect()
}

/// Number of points [`grid_cover`] would generate (saturating).
pub fn grid_size(domain: &BoxDomain, radius: f64) -> u128 {
    axis_counts(domain, radius)
        .into_iter()
        .fold(1u128, |acc, c| acc.saturating_mul(c))
}

/// Covering lattice with per-axis spacing at most `2·radius/√dim`, offset by
/// half a spacing from the lower corner.
pub fn grid_cover(domain: &BoxDomain, radius: f64, budget: u128) -> Result<CoverGrid> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Usage(format!("covering radius must be positive, got {radius}")));
    }
    let required = grid_size(domain, radius);
    if required > budget {
        return Err(Error::Budget {
            what: "grid points".into(),
            required,
            budget,
        });
    }
    let counts = axis_counts(domain, radius);
    let mut achieved = 0.0;
    let axes = counts
        .iter()
        .zip(domain.lo.iter().zip(&domain.hi))
        .map(|(&c, (&lo, &hi))| {
            let s = (hi - lo) / c as f64;
            achieved += (s / 2.0) * (s / 2.0);
            (0..c as usize)
                .map(|j| (lo + s / 2.0 + j as f64 * s).min(hi))
                .collect()
        })
        .collect();
    Ok(CoverGrid {
        domain: domain.clone(),
        radius,
        axes,
        achieved_radius: f64::sqrt(achieved),
    })
}

impl CoverGrid {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `idx` in row-major (last axis fastest) order.
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        for k in (0..self.dim()).rev() {
            let c = self.axes[k].len();
            p[k] = self.axes[k][idx % c];
            idx /= c;
        }
        p
    }

    /// All points as rows.
    pub fn points(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.dim()));
        for (i, mut row) in m.rows_mut().into_iter().enumerate() {
            row.assign(&ndarray::Array1::from(self.point(i)));
        }
        m
    }

    /// Nearest lattice point and its distance (per-axis rounding is optimal on a product lattice).
    pub fn nearest(&self, p: &[f64]) -> (Vec<f64>, f64) {
        let q: Vec<f64> = self
            .axes
            .iter()
            .zip(p)
            .map(|(axis, &v)| {
                *axis
                    .iter()
                    .min_by(|a, b| (*a - v).abs().total_cmp(&(*b - v).abs()))
                    .unwrap()
            })
            .collect();
        let d = distance(&q, p);
        (q, d)
    }
}

/// `η̂ + factor · L · ε`; negative or zero means certified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub margin: f64,
}

pub fn theorem_check(eta: f64, lipschitz: f64, epsilon: f64, factor: f64) -> Verdict {
    let margin = eta + factor * lipschitz * epsilon;
    Verdict {
        pass: margin <= 0.0,
        margin,
    }
}

/// Certified Lipschitz constants of the three condition left-hand sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionLipschitz {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub max: f64,
    /// Embedding bound used (0 when the constants are exact).
    pub embedding: f64,
    pub exact: bool,
}

/// Relative inflation covering the power-iteration tolerance.
const NORM_SLACK: f64 = 1e-8;

/// Lipschitz bounds for node `center`'s conditions as functions of their
/// joint arguments. With `D` the diameter of the local state box and `L_g`
/// the embedding bound:
///
/// ```text
/// L_V   = κ (L_g D)^(κ−1) L_g √2
/// L_pow = κ D^(κ−1) √2
/// l1 = L_V + α L_pow,  l2 = L_V + ᾱ L_pow,
/// l3 = L_V L_f + L_V + α̃ L_pow + σ L_pow,w
/// ```
pub fn condition_lipschitz(
    cand: &dyn LocalCertificate,
    oracle: &SystemOracle,
    center: usize,
    hyper: &ClassHyper,
    kappa: u32,
    _closure: ClosureMode,
) -> ConditionLipschitz {
    if let Some([l1, l2, l3]) = cand.exact_condition_lipschitz() {
        return ConditionLipschitz {
            l1,
            l2,
            l3,
            max: l1.max(l2).max(l3),
            embedding: 0.0,
            exact: true,
        };
    }
    let k = kappa as f64;
    let closure = oracle.graph().closure(center, cand.receptive_depth());
    let local = oracle.graph().induced(&closure.nodes);
    let lg = cand.embedding_lipschitz(&local) * (1.0 + NORM_SLACK);
    let d = oracle.state_box().power(closure.len()).diameter();
    let dw = oracle.input_box().power(closure.len()).diameter();
    let sqrt2 = std::f64::consts::SQRT_2;
    let lv = k * (lg * d).powf(k - 1.0) * lg * sqrt2;
    let lpow = k * d.powf(k - 1.0) * sqrt2;
    let lpow_w = if oracle.input_dim() > 0 { k * dw.powf(k - 1.0) * sqrt2 } else { 0.0 };
    let l1 = lv + hyper.alpha * lpow;
    let l2 = lv + hyper.alpha_bar * lpow;
    let l3 = lv * oracle.dyn_lipschitz() + lv + hyper.alpha_tilde * lpow + hyper.sigma * lpow_w;
    ConditionLipschitz {
        l1,
        l2,
        l3,
        max: l1.max(l2).max(l3),
        embedding: lg,
        exact: false,
    }
}

/// Grid points (states, inputs) with their current and next embeddings.
type TupleEmbeddings = (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>);

/// How condition 3's perturbation is inflated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InflationMode {
    /// Factor 2: all four arguments of condition 3 may move by `ε`.
    #[default]
    Strict,
    /// Factor √2 for every condition.
    Paper,
}

impl InflationMode {
    pub fn factors(self) -> [f64; 3] {
        let r2 = std::f64::consts::SQRT_2;
        match self {
            InflationMode::Strict => [r2, r2, 2.0],
            InflationMode::Paper => [r2, r2, r2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub epsilon_x: f64,
    pub epsilon_u: f64,
    pub mode: InflationMode,
    pub closure: ClosureMode,
    /// Condition evaluations allowed per class.
    pub budget: u128,
    /// Verify every node instead of one representative per class.
    pub per_node: bool,
    /// Outer grid indices per parallel work unit.
    pub chunk: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            epsilon_x: 0.01,
            epsilon_u: 0.01,
            mode: InflationMode::Strict,
            closure: ClosureMode::TwoHop,
            budget: DEFAULT_BUDGET,
            per_node: false,
            chunk: 16,
        }
    }
}

/// The pair of grids each argument ranges over.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPair {
    pub x: CoverGrid,
    pub xh: CoverGrid,
}

impl GridPair {
    pub fn same(g: CoverGrid) -> Self {
        Self { x: g.clone(), xh: g }
    }
}

/// Grids for one class: conditions 1–2 over the embedding closure, condition
/// 3 over the stepping closure and the local inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrids {
    pub bounds: GridPair,
    pub decay: GridPair,
    pub inputs: GridPair,
}

/// Offending or attaining grid tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub value: f64,
    pub x: Vec<f64>,
    pub xh: Vec<f64>,
    pub w: Vec<f64>,
    pub wh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Worst residual per condition (−∞ when no admissible pair exists).
    pub eta: [f64; 3],
    pub witness: [Option<Witness>; 3],
    /// Grid tuples visited per condition, diagonal included.
    pub evaluations: [u128; 3],
}

#[derive(Clone, Copy)]
struct Best {
    value: f64,
    a: usize,
    b: usize,
}

impl Best {
    const NONE: Best = Best {
        value: f64::NEG_INFINITY,
        a: usize::MAX,
        b: usize::MAX,
    };

    fn offer(&mut self, value: f64, a: usize, b: usize) {
        if value > self.value || (self.a == usize::MAX && value == f64::NEG_INFINITY) {
            *self = Best { value, a, b };
        }
    }

    /// Later partials only win on strictly larger values, so chunk order fixes ties.
    fn merge(self, other: Best) -> Best {
        if other.a != usize::MAX && (self.a == usize::MAX || other.value > self.value) {
            other
        } else {
            self
        }
    }
}

fn embed_points(
    cand: &dyn LocalCertificate,
    local: &InterconnectionGraph,
    points: &Array2<f64>,
    n: usize,
) -> Result<Array2<f64>> {
    let blocks = points
        .to_shape((points.nrows() * local.n_nodes(), n))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned();
    cand.embed_center(local, blocks.view())
}

fn row(m: &Array2<f64>, i: usize) -> &[f64] {
    let cols = m.ncols();
    &m.as_slice().unwrap()[i * cols..(i + 1) * cols]
}

fn pair_max(
    na: usize,
    nb: usize,
    chunk: usize,
    f: impl Fn(usize, usize) -> Option<[f64; 2]> + Sync,
) -> [Best; 2] {
    let partials: Vec<[Best; 2]> = (0..na)
        .collect::<Vec<_>>()
        .par_chunks(chunk.max(1))
        .map(|rows| {
            let mut best = [Best::NONE; 2];
            for &a in rows {
                for b in 0..nb {
                    if let Some(v) = f(a, b) {
                        best[0].offer(v[0], a, b);
                        best[1].offer(v[1], a, b);
                    }
                }
            }
            best
        })
        .collect();
    partials
        .into_iter()
        .fold([Best::NONE; 2], |acc, p| [acc[0].merge(p[0]), acc[1].merge(p[1])])
}

/// Exhaustive maximum of the three condition residuals for node `center`.
#[allow(clippy::too_many_arguments)]
pub fn condition_residuals(
    cand: &dyn LocalCertificate,
    oracle: &SystemOracle,
    center: usize,
    hyper: &ClassHyper,
    kappa: u32,
    grids: &ClassGrids,
    closure: ClosureMode,
    chunk: usize,
) -> Result<Residuals> {
    let k = kappa as f64;
    let n = oracle.state_dim();
    let depth = cand.receptive_depth();
    let vclosure = oracle.graph().closure(center, depth);
    let local = oracle.graph().induced(&vclosure.nodes);
    let stepper = LocalStepper::new(oracle, center, depth, closure);
    let dv = vclosure.len() * n;
    let check = |g: &CoverGrid, want: usize, what: &str| {
        if g.dim() == want {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what} grid has dim {}, closure needs {want}", g.dim())))
        }
    };
    check(&grids.bounds.x, dv, "bound")?;
    check(&grids.bounds.xh, dv, "bound")?;
    check(&grids.decay.x, stepper.free_len(), "decay")?;
    check(&grids.decay.xh, stepper.free_len(), "decay")?;
    check(&grids.inputs.x, stepper.input_len(), "input")?;
    check(&grids.inputs.xh, stepper.input_len(), "input")?;

    // conditions 1 and 2
    let px = grids.bounds.x.points();
    let ph = grids.bounds.xh.points();
    let ex = embed_points(cand, &local, &px, n)?;
    let eh = embed_points(cand, &local, &ph, n)?;
    let bounds = pair_max(px.nrows(), ph.nrows(), chunk, |a, b| {
        let (xa, xb) = (row(&px, a), row(&ph, b));
        if xa == xb {
            return None;
        }
        let v = pow_dist(row(&ex, a), row(&eh, b), k);
        let d = pow_dist(xa, xb, k);
        Some([-v + hyper.alpha * d, v - hyper.alpha_bar * d])
    });

    // condition 3: tuples (state, input) indexed state-major
    let build = |states: &CoverGrid, inputs: &CoverGrid| -> Result<TupleEmbeddings> {
        let ps = states.points();
        let pw = inputs.points();
        let cur = ps.slice(ndarray::s![.., ..dv]).to_owned();
        let ecur = embed_points(cand, &local, &cur, n)?;
        let mut next = Array2::zeros((ps.nrows() * pw.nrows(), stepper.out_len()));
        let out_box = oracle.state_box().power(stepper.inputs.len());
        for (si, srow) in ps.rows().into_iter().enumerate() {
            for (wi, wrow) in pw.rows().into_iter().enumerate() {
                let nx = stepper.step(srow.as_slice().unwrap(), wrow.as_slice().unwrap());
                if !out_box.contains(&nx) {
                    return Err(Error::Domain(format!(
                        "local step leaves the state box: x = {:?}, w = {:?} -> {nx:?}",
                        srow.to_vec(),
                        wrow.to_vec()
                    )));
                }
                next.row_mut(si * pw.nrows() + wi).assign(&ndarray::Array1::from(nx));
            }
        }
        let enext = embed_points(cand, &local, &next, n)?;
        Ok((ps, pw, ecur, enext))
    };
    let (sa, wa, ca, na) = build(&grids.decay.x, &grids.inputs.x)?;
    let (sb, wb, cb, nb) = build(&grids.decay.xh, &grids.inputs.xh)?;
    let (gwa, gwb) = (wa.nrows(), wb.nrows());
    let has_input = oracle.input_dim() > 0;
    let decay = pair_max(sa.nrows() * gwa, sb.nrows() * gwb, chunk, |a, b| {
        let (xa, ua) = (a / gwa, a % gwa);
        let (xb, ub) = (b / gwb, b % gwb);
        let (fa, fb) = (row(&sa, xa), row(&sb, xb));
        if fa == fb {
            return None;
        }
        let v_next = pow_dist(row(&na, a), row(&nb, b), k);
        let v_now = pow_dist(row(&ca, xa), row(&cb, xb), k);
        let d = pow_dist(&fa[..dv], &fb[..dv], k);
        let dw = if has_input { pow_dist(row(&wa, ua), row(&wb, ub), k) } else { 0.0 };
        let r = v_next - v_now + hyper.alpha_tilde * d - hyper.sigma * dw;
        Some([r, f64::NEG_INFINITY])
    })[0];

    let witness_bounds = |b: Best| {
        (b.a != usize::MAX).then(|| Witness {
            value: b.value,
            x: row(&px, b.a).to_vec(),
            xh: row(&ph, b.b).to_vec(),
            w: Vec::new(),
            wh: Vec::new(),
        })
    };
    let witness_decay = (decay.a != usize::MAX).then(|| Witness {
        value: decay.value,
        x: row(&sa, decay.a / gwa).to_vec(),
        xh: row(&sb, decay.b / gwb).to_vec(),
        w: row(&wa, decay.a % gwa).to_vec(),
        wh: row(&wb, decay.b % gwb).to_vec(),
    });
    let ev12 = (px.nrows() as u128) * (ph.nrows() as u128);
    let ev3 = (sa.nrows() as u128 * gwa as u128) * (sb.nrows() as u128 * gwb as u128);
    Ok(Residuals {
        eta: [bounds[0].value, bounds[1].value, decay.value],
        witness: [witness_bounds(bounds[0]), witness_bounds(bounds[1]), witness_decay],
        evaluations: [ev12, ev12, ev3],
    })
}

/// Grid sizes and evaluation counts for one class, computed without building grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub class: usize,
    pub representative: usize,
    pub bound_dim: usize,
    pub decay_dim: usize,
    pub input_dim: usize,
    pub bound_points: u128,
    pub decay_points: u128,
    pub input_points: u128,
    /// Condition evaluations `[c1, c2, c3]`.
    pub evaluations: [u128; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationPlan {
    pub partition: NodeClassPartition,
    pub classes: Vec<ClassPlan>,
}

impl VerificationPlan {
    pub fn total_evaluations(&self) -> u128 {
        self.classes
            .iter()
            .flat_map(|c| c.evaluations)
            .fold(0u128, |a, b| a.saturating_add(b))
    }
}

fn local_boxes(oracle: &SystemOracle, center: usize, depth: usize, closure: ClosureMode) -> (BoxDomain, BoxDomain, BoxDomain) {
    let v = oracle.graph().closure(center, depth);
    let st = LocalStepper::new(oracle, center, depth, closure);
    (
        oracle.state_box().power(v.len()),
        oracle.state_box().power(st.free.len()),
        oracle.input_box().power(st.inputs.len()),
    )
}

/// Classes and grid sizes `verify` would use.
pub fn plan_verification(cand: &dyn LocalCertificate, oracle: &SystemOracle, opts: &VerifyOptions) -> Result<VerificationPlan> {
    let depth = cand.receptive_depth();
    let partition = if opts.per_node {
        NodeClassPartition::singletons(oracle.n_nodes())
    } else {
        certificate_partition(oracle.graph(), depth)?
    };
    let classes = partition
        .representatives
        .iter()
        .enumerate()
        .map(|(class, &rep)| {
            let (bv, bd, bw) = local_boxes(oracle, rep, depth, opts.closure);
            let gv = grid_size(&bv, opts.epsilon_x);
            let gd = grid_size(&bd, opts.epsilon_x);
            let gw = grid_size(&bw, opts.epsilon_u);
            let e12 = gv.saturating_mul(gv);
            let e3 = gd.saturating_mul(gw).saturating_mul(gd.saturating_mul(gw));
            ClassPlan {
                class,
                representative: rep,
                bound_dim: bv.dim(),
                decay_dim: bd.dim(),
                input_dim: bw.dim(),
                bound_points: gv,
                decay_points: gd,
                input_points: gw,
                evaluations: [e12, e12, e3],
            }
        })
        .collect();
    Ok(VerificationPlan { partition, classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdicts {
    /// With each condition's own Lipschitz constant.
    pub per_condition: [Verdict; 3],
    /// With the largest of the three constants.
    pub collapsed: [Verdict; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub representative: usize,
    pub hyper: ClassHyper,
    pub residuals: Residuals,
    pub lipschitz: ConditionLipschitz,
    /// `max(ε_x, ε_u)` from the achieved grid radii.
    pub epsilon: f64,
    pub epsilon_x: f64,
    pub epsilon_u: f64,
    pub factors: [f64; 3],
    pub verdicts: ConditionVerdicts,
    pub pass: bool,
    pub pass_collapsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub classes: Vec<ClassReport>,
    pub closure: ClosureMode,
    pub mode: InflationMode,
    pub kappa: u32,
    pub n_nodes: usize,
    pub notes: Vec<String>,
    pub total_evaluations: u128,
    pub global: Option<GlobalBounds>,
    pub pass: bool,
    pub wall_time_s: f64,
}

/// Runs the grid check for every class representative.
pub fn verify(
    cand: &dyn LocalCertificate,
    oracle: &SystemOracle,
    hyper: &CertificateHyper,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let started = Instant::now();
    hyper.validate()?;
    if cand.state_dim() != oracle.state_dim() {
        return Err(Error::Shape("candidate and system state dimensions differ".into()));
    }
    let plan = plan_verification(cand, oracle, opts)?;
    hyper.check_partition(&plan.partition)?;
    for c in &plan.classes {
        for (k, &e) in c.evaluations.iter().enumerate() {
            if e > opts.budget {
                return Err(Error::Budget {
                    what: format!("condition {} evaluations for class {}", k + 1, c.class),
                    required: e,
                    budget: opts.budget,
                });
            }
        }
    }
    let depth = cand.receptive_depth();
    let factors = opts.mode.factors();
    let mut classes = Vec::with_capacity(plan.classes.len());
    for c in &plan.classes {
        let h = if opts.per_node {
            // per-node runs reuse the constants of the node's symmetry class
            let sym = certificate_partition(oracle.graph(), depth)?;
            *hyper.class(sym.class_of[c.representative])
        } else {
            *hyper.class(c.class)
        };
        let (bv, bd, bw) = local_boxes(oracle, c.representative, depth, opts.closure);
        let grids = ClassGrids {
            bounds: GridPair::same(grid_cover(&bv, opts.epsilon_x, u128::MAX)?),
            decay: GridPair::same(grid_cover(&bd, opts.epsilon_x, u128::MAX)?),
            inputs: GridPair::same(grid_cover(&bw, opts.epsilon_u, u128::MAX)?),
        };
        let residuals = condition_residuals(
            cand,
            oracle,
            c.representative,
            &h,
            hyper.kappa,
            &grids,
            opts.closure,
            opts.chunk,
        )?;
        let lipschitz = condition_lipschitz(cand, oracle, c.representative, &h, hyper.kappa, opts.closure);
        let epsilon_x = grids.bounds.x.achieved_radius.max(grids.decay.x.achieved_radius);
        let epsilon_u = if oracle.input_dim() > 0 { grids.inputs.x.achieved_radius } else { 0.0 };
        let epsilon = epsilon_x.max(epsilon_u);
        let ls = [lipschitz.l1, lipschitz.l2, lipschitz.l3];
        let per_condition: [Verdict; 3] =
            std::array::from_fn(|k| theorem_check(residuals.eta[k], ls[k], epsilon, factors[k]));
        let collapsed: [Verdict; 3] =
            std::array::from_fn(|k| theorem_check(residuals.eta[k], lipschitz.max, epsilon, factors[k]));
        classes.push(ClassReport {
            class: c.class,
            representative: c.representative,
            hyper: h,
            residuals,
            lipschitz,
            epsilon,
            epsilon_x,
            epsilon_u,
            factors,
            pass: per_condition.iter().all(|v| v.pass),
            pass_collapsed: collapsed.iter().all(|v| v.pass),
            verdicts: ConditionVerdicts {
                per_condition,
                collapsed,
            },
        });
    }
    let pass = classes.iter().all(|c| c.pass);
    let mut notes = Vec::new();
    match opts.closure {
        ClosureMode::TwoHop => notes.push(format!(
            "closure two_hop: condition 3 ranges over the {}-hop closure, next states are exact",
            depth + 1
        )),
        ClosureMode::EmbedReference => notes.push(
            "closure embed_reference: states beyond the embedding closure are pinned to the reference point; \
             condition 3 is approximate when neighbour dynamics read them"
                .into(),
        ),
    }
    if depth > 1 {
        notes.push(format!(
            "embedding reads {depth}-hop states; conditions 1-2 range over the {depth}-hop closure"
        ));
    }
    let global = if pass {
        let per_class: Vec<ClassHyper> = classes.iter().map(|c| c.hyper).collect();
        let verdicts: Vec<bool> = classes.iter().map(|c| c.pass).collect();
        let partition = if opts.per_node {
            certificate_partition(oracle.graph(), depth)?
        } else {
            plan.partition.clone()
        };
        let per_class = if opts.per_node {
            (0..partition.num_classes()).map(|c| *hyper.class(c)).collect()
        } else {
            per_class
        };
        Some(compose_bounds(&per_class, &verdicts, &partition, oracle.graph(), depth, hyper.kappa)?)
    } else {
        None
    };
    Ok(VerificationReport {
        total_evaluations: classes
            .iter()
            .flat_map(|c| c.residuals.evaluations)
            .fold(0u128, |a, b| a.saturating_add(b)),
        classes,
        closure: opts.closure,
        mode: opts.mode,
        kappa: hyper.kappa,
        n_nodes: oracle.n_nodes(),
        notes,
        global,
        pass,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

impl VerificationReport {
    /// `key: value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "verdict: {}", if self.pass { "PASS" } else { "FAIL" }).unwrap();
        writeln!(s, "closure: {}", self.closure).unwrap();
        writeln!(s, "mode: {:?}", self.mode).unwrap();
        writeln!(s, "kappa: {}", self.kappa).unwrap();
        writeln!(s, "n_nodes: {}", self.n_nodes).unwrap();
        writeln!(s, "classes: {}", self.classes.len()).unwrap();
        writeln!(s, "total_evaluations: {}", self.total_evaluations).unwrap();
        for note in &self.notes {
            writeln!(s, "note: {note}").unwrap();
        }
        for c in &self.classes {
            let p = format!("class.{}", c.class);
            writeln!(s, "{p}.representative: {}", c.representative).unwrap();
            writeln!(s, "{p}.epsilon: {:.6e}", c.epsilon).unwrap();
            writeln!(s, "{p}.lipschitz: {:.6e} {:.6e} {:.6e} max {:.6e}", c.lipschitz.l1, c.lipschitz.l2, c.lipschitz.l3, c.lipschitz.max).unwrap();
            writeln!(s, "{p}.lipschitz_exact: {}", c.lipschitz.exact).unwrap();
            writeln!(s, "{p}.factors: {:.6} {:.6} {:.6}", c.factors[0], c.factors[1], c.factors[2]).unwrap();
            for k in 0..3 {
                let v = c.verdicts.per_condition[k];
                let w = c.verdicts.collapsed[k];
                writeln!(s, "{p}.c{}.eta: {:.9e}", k + 1, c.residuals.eta[k]).unwrap();
                writeln!(s, "{p}.c{}.evaluations: {}", k + 1, c.residuals.evaluations[k]).unwrap();
                writeln!(s, "{p}.c{}.margin: {:.9e} {}", k + 1, v.margin, if v.pass { "PASS" } else { "FAIL" }).unwrap();
                writeln!(s, "{p}.c{}.margin_collapsed: {:.9e} {}", k + 1, w.margin, if w.pass { "PASS" } else { "FAIL" }).unwrap();
                if let Some(wit) = &c.residuals.witness[k] {
                    writeln!(s, "{p}.c{}.witness: x={:?} xh={:?} w={:?} wh={:?}", k + 1, wit.x, wit.xh, wit.w, wit.wh).unwrap();
                }
            }
            writeln!(s, "{p}.verdict: {}", if c.pass { "PASS" } else { "FAIL" }).unwrap();
            writeln!(s, "{p}.verdict_collapsed: {}", if c.pass_collapsed { "PASS" } else { "FAIL" }).unwrap();
        }
        if let Some(g) = &self.global {
            writeln!(s, "global.alpha: {:.9e}", g.alpha).unwrap();
            writeln!(s, "global.alpha_bar: {:.9e}", g.alpha_bar).unwrap();
            writeln!(s, "global.alpha_tilde: {:.9e}", g.alpha_tilde).unwrap();
            writeln!(s, "global.sigma: {:.9e}", g.sigma).unwrap();
            writeln!(s, "global.multiplicity: {}", g.multiplicity).unwrap();
        }
        writeln!(s, "wall_time_s: {:.3}", self.wall_time_s).unwrap();
        s
    }
}

/// Comparison-function coefficients of `V = Σ V_i` in terms of the full
/// state difference `|x − x̂|` and input difference `|w − ŵ|`:
///
/// ```text
/// α_glob |Δ|^κ ≤ V ≤ ᾱ_glob |Δ|^κ
/// V(x⁺, x̂⁺) − V(x, x̂) ≤ −α̃_glob |Δ|^κ + σ_glob |Δw|^κ
/// ```
///
/// With `M` the largest number of local closures containing one node:
/// `Σ_i |Δ̃_i|² ≤ M |Δ|²` and `Σ_i |Δ̃_i|² ≥ |Δ|²`. Mapping sums of squares to
/// sums of `κ/2` powers costs `N^(1−κ/2)` on the lower side when `κ > 2` and
/// on the upper side when `κ < 2` (power-mean inequality).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBounds {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub alpha_tilde: f64,
    pub sigma: f64,
    pub lower_factor: f64,
    pub upper_factor: f64,
    pub multiplicity: usize,
    pub n_nodes: usize,
    pub kappa: u32,
    /// Closure depth of the local differences.
    pub depth: usize,
}

/// Largest number of `depth`-hop closures a node belongs to.
pub fn closure_multiplicity(graph: &InterconnectionGraph, depth: usize) -> usize {
    let mut count = vec![0usize; graph.n_nodes()];
    for i in 0..graph.n_nodes() {
        for j in graph.closure(i, depth).nodes {
            count[j] += 1;
        }
    }
    count.into_iter().max().unwrap_or(0)
}

pub fn compose_bounds(
    per_class: &[ClassHyper],
    verdicts: &[bool],
    partition: &NodeClassPartition,
    graph: &InterconnectionGraph,
    depth: usize,
    kappa: u32,
) -> Result<GlobalBounds> {
    if verdicts.iter().any(|&v| !v) {
        return Err(Error::Composition("a node class failed verification".into()));
    }
    if per_class.is_empty() {
        return Err(Error::Composition("no class constants".into()));
    }
    let nn = graph.n_nodes();
    let used: Vec<&ClassHyper> = (0..nn)
        .map(|i| {
            let c = partition.class_of[i];
            per_class.get(c).unwrap_or(&per_class[0])
        })
        .collect();
    let k = kappa as f64;
    let m = closure_multiplicity(graph, depth);
    let n = nn as f64;
    let lower_factor = if k <= 2.0 { 1.0 } else { n.powf(1.0 - k / 2.0) };
    let upper_factor = (m as f64).powf(k / 2.0) * n.powf((1.0 - k / 2.0).max(0.0));
    let min = |f: fn(&ClassHyper) -> f64| used.iter().map(|h| f(h)).fold(f64::INFINITY, f64::min);
    let max = |f: fn(&ClassHyper) -> f64| used.iter().map(|h| f(h)).fold(f64::NEG_INFINITY, f64::max);
    Ok(GlobalBounds {
        alpha: min(|h| h.alpha) * lower_factor,
        alpha_bar: max(|h| h.alpha_bar) * upper_factor,
        alpha_tilde: min(|h| h.alpha_tilde) * lower_factor,
        sigma: max(|h| h.sigma) * upper_factor,
        lower_factor,
        upper_factor,
        multiplicity: m,
        n_nodes: nn,
        kappa,
        depth,
    })
}

/// `Σ_i c_i |Δ̃_i|^κ` over `depth`-hop closures.
pub fn local_power_sum(
    graph: &InterconnectionGraph,
    depth: usize,
    coeffs: &[f64],
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    kappa: u32,
) -> f64 {
    (0..graph.n_nodes())
        .map(|i| {
            let nodes = graph.closure(i, depth).nodes;
            let sq: f64 = nodes
                .iter()
                .map(|&j| a.row(j).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum();
            coeffs[i.min(coeffs.len() - 1)] * sq.sqrt().powi(kappa as i32)
        })
        .sum()
}

/// Observed ratio of each composed inequality's tight side to its bound over
/// random pairs: `[lower, upper]`, each `≤ 1`; values near 1 mean the
/// coefficient is close to the best constant.
pub fn estimate_tightness(
    bounds: &GlobalBounds,
    per_node_alpha: &[f64],
    per_node_alpha_bar: &[f64],
    graph: &InterconnectionGraph,
    state_box: &BoxDomain,
    samples: usize,
    rng: &mut impl Rng,
) -> [f64; 2] {
    let nn = graph.n_nodes();
    let full = state_box.power(nn);
    let n = state_box.dim();
    let mut lower = 0.0_f64;
    let mut upper = 0.0_f64;
    for _ in 0..samples {
        let a = Array2::from_shape_vec((nn, n), full.sample(rng)).unwrap();
        let b = Array2::from_shape_vec((nn, n), full.sample(rng)).unwrap();
        let d = distance(a.as_slice().unwrap(), b.as_slice().unwrap()).powi(bounds.kappa as i32);
        if d == 0.0 {
            continue;
        }
        let lo = local_power_sum(graph, bounds.depth, per_node_alpha, a.view(), b.view(), bounds.kappa);
        let hi = local_power_sum(graph, bounds.depth, per_node_alpha_bar, a.view(), b.view(), bounds.kappa);
        lower = lower.max(bounds.alpha * d / lo);
        upper = upper.max(hi / (bounds.alpha_bar * d));
    }
    [lower, upper]
}
