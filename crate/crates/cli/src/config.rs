//! Run configuration (TOML, unknown keys rejected).

use std::path::{Path, PathBuf};

use gnncert::gnn::{GnnConfig, GnnParams};
use gnncert::linalg::spectral_norm;
use gnncert::system::{AffineCoupled, BoxDomain, ClosureMode, SystemOracle};
use gnncert::topology::InterconnectionGraph;
use gnncert::training::{certificate_partition, CertificateHyper, ClassHyper, TrainOptions};
use gnncert::verifier::VerifyOptions;
use gnncert::{Error, Result};
use ndarray::Array2;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub system: SystemSection,
    pub topology: TopologySection,
    pub gnn: GnnSection,
    pub hyper: HyperSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub verification: VerifyOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Temperature,
    Nonlinear2d,
    External,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub kind: SystemKind,
    pub phi: Option<f64>,
    pub theta: Option<f64>,
    pub t_ext: Option<f64>,
    pub state_lo: Option<Vec<f64>>,
    pub state_hi: Option<Vec<f64>>,
    #[serde(default)]
    pub input_lo: Vec<f64>,
    #[serde(default)]
    pub input_hi: Vec<f64>,
    pub dyn_lipschitz: Option<f64>,
    pub reference: Option<Vec<f64>>,
    /// External kind: `x_i' = S x_i + C Σ_{j∈N_i} x_j + B w_i + c`.
    pub self_matrix: Option<Vec<Vec<f64>>>,
    pub neighbor_matrix: Option<Vec<Vec<f64>>>,
    pub input_matrix: Option<Vec<Vec<f64>>>,
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    RingBidirectional,
    RingDirected,
    Edges,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: TopologyKind,
    pub n_nodes: usize,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnnSection {
    pub filter_dims: Vec<usize>,
    pub mlp_widths: Vec<usize>,
    pub output_dim: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    #[serde(default = "one")]
    pub kappa: u32,
    pub alpha: f64,
    /// Omitted: derived from the spectral cap as `L_g,max^κ`.
    pub alpha_bar: Option<f64>,
    pub alpha_tilde: f64,
    #[serde(default)]
    pub sigma: f64,
    pub lambda: f64,
    #[serde(default = "unit_weights")]
    pub loss_weights: [f64; 3],
    /// Optional per-class overrides, in class order.
    #[serde(default)]
    pub classes: Vec<ClassHyper>,
}

fn one() -> u32 {
    1
}

fn unit_weights() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub samples: usize,
    #[serde(flatten)]
    pub options: TrainOptionsToml,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            samples: 1000,
            options: TrainOptionsToml::default(),
        }
    }
}

/// Optimiser keys of the `[training]` section.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default)]
pub struct TrainOptionsToml {
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub spectral_cap: Option<f64>,
    pub no_spectral_cap: Option<bool>,
    pub loss_threshold: Option<f64>,
    pub margin_epsilon: Option<f64>,
    pub closure: Option<ClosureMode>,
    pub chunk: Option<usize>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn need<'a>(o: &'a Option<Vec<Vec<f64>>>, what: &str) -> Result<&'a [Vec<f64>]> {
    o.as_deref()
        .ok_or_else(|| usage(format!("external system needs system.{what}")))
}

fn matrix(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<Array2<f64>> {
    let flat: Vec<f64> = rows.concat();
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(usage(format!("{what} must be {}×{}", shape.0, shape.1)));
    }
    Array2::from_shape_vec(shape, flat).map_err(|e| usage(e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| usage(format!("config: {e}")))?;
        if cfg.training.options.batch_size == Some(0) {
            return Err(usage("training.batch_size must be positive"));
        }
        Ok(cfg)
    }

    pub fn graph(&self) -> Result<InterconnectionGraph> {
        self.graph_with(self.topology.n_nodes)
    }

    /// The configured topology kind with another node count.
    pub fn graph_with(&self, n_nodes: usize) -> Result<InterconnectionGraph> {
        let t = &self.topology;
        match t.kind {
            TopologyKind::RingBidirectional => InterconnectionGraph::ring_bidirectional(n_nodes),
            TopologyKind::RingDirected => InterconnectionGraph::ring_directed(n_nodes),
            TopologyKind::Edges => {
                if n_nodes != t.n_nodes {
                    return Err(usage("explicit edge lists cannot be resized"));
                }
                let edges: Vec<(usize, usize)> = t.edges.iter().map(|e| (e[0], e[1])).collect();
                InterconnectionGraph::from_edges(n_nodes, &edges)
            }
        }
    }

    pub fn oracle(&self) -> Result<SystemOracle> {
        self.oracle_on(self.graph()?)
    }

    pub fn oracle_on(&self, graph: InterconnectionGraph) -> Result<SystemOracle> {
        let s = &self.system;
        let state_box = |default_dim: usize, lo: f64, hi: f64| -> Result<BoxDomain> {
            match (&s.state_lo, &s.state_hi) {
                (Some(l), Some(h)) => BoxDomain::new(l.clone(), h.clone()),
                (None, None) => BoxDomain::uniform(default_dim, lo, hi),
                _ => Err(usage("system.state_lo and system.state_hi go together")),
            }
        };
        let oracle = match s.kind {
            SystemKind::Temperature => SystemOracle::temperature_on_graph(
                graph,
                s.phi.unwrap_or(0.05),
                s.theta.unwrap_or(0.1),
                s.t_ext.unwrap_or(0.0),
                state_box(1, -10.0, 10.0)?,
            )?,
            SystemKind::Nonlinear2d => SystemOracle::nonlinear2d_on_graph(graph, state_box(2, -20.0, 20.0)?)?,
            SystemKind::External => {
                let sb = state_box(0, 0.0, 0.0)?;
                let ib = BoxDomain::new(s.input_lo.clone(), s.input_hi.clone())?;
                let (n, m) = (sb.dim(), ib.dim());
                let dynamics = AffineCoupled {
                    self_matrix: matrix(need(&s.self_matrix, "self_matrix")?, (n, n), "self_matrix")?,
                    neighbor_matrix: matrix(need(&s.neighbor_matrix, "neighbor_matrix")?, (n, n), "neighbor_matrix")?,
                    input_matrix: match &s.input_matrix {
                        Some(rows) => matrix(rows, (n, m), "input_matrix")?,
                        None if m == 0 => Array2::zeros((n, 0)),
                        None => return Err(usage("external system with inputs needs system.input_matrix")),
                    },
                    offset: s.offset.clone().unwrap_or_else(|| vec![0.0; n]),
                };
                SystemOracle::affine(graph, dynamics, sb, ib, None)?
            }
        };
        if s.kind != SystemKind::External && !s.input_lo.is_empty() {
            return Err(usage("built-in systems take no inputs"));
        }
        let oracle = match s.dyn_lipschitz {
            Some(l) => oracle.with_dyn_lipschitz(l)?,
            None => oracle,
        };
        match &s.reference {
            Some(r) => oracle.with_reference(r.clone()),
            None => Ok(oracle),
        }
    }

    pub fn gnn_config(&self, state_dim: usize) -> GnnConfig {
        GnnConfig {
            state_dim,
            filter_dims: self.gnn.filter_dims.clone(),
            mlp_widths: self.gnn.mlp_widths.clone(),
            output_dim: self
                .gnn
                .output_dim
                .unwrap_or_else(|| self.gnn.mlp_widths.last().copied().unwrap_or(1)),
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        let t = &self.training.options;
        let d = TrainOptions::default();
        TrainOptions {
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            max_epochs: t.max_epochs.unwrap_or(d.max_epochs),
            batch_size: t.batch_size,
            spectral_cap: if t.no_spectral_cap == Some(true) {
                None
            } else {
                t.spectral_cap.or(d.spectral_cap)
            },
            loss_threshold: t.loss_threshold.unwrap_or(d.loss_threshold),
            margin_epsilon: t.margin_epsilon,
            closure: t.closure.unwrap_or(d.closure),
            chunk: t.chunk.unwrap_or(d.chunk),
            seed,
        }
    }

    /// Certificate constants; `alpha_bar` defaults to the embedding bound the
    /// spectral cap permits, raised to `κ`.
    pub fn hyper(&self, graph: &InterconnectionGraph) -> Result<CertificateHyper> {
        let h = &self.hyper;
        let gnn = self.gnn_config(1);
        gnn.validate()?;
        let alpha_bar = match h.alpha_bar {
            Some(v) => v,
            None => {
                let cap = self.train_options(0).spectral_cap.ok_or_else(|| {
                    usage("hyper.alpha_bar is required when training has no spectral cap")
                })?;
                let a = spectral_norm(graph.adjacency_matrix().view()).value;
                GnnParams::capped_lipschitz(&gnn, a, cap).powi(h.kappa as i32)
            }
        };
        let base = ClassHyper {
            alpha: h.alpha,
            alpha_bar,
            alpha_tilde: h.alpha_tilde,
            sigma: h.sigma,
            lambda: h.lambda,
        };
        let classes = if h.classes.is_empty() {
            vec![base]
        } else {
            let p = certificate_partition(graph, gnn.graph_layers())?;
            if h.classes.len() != p.num_classes() {
                return Err(usage(format!(
                    "hyper.classes has {} entries but the graph has {} node classes",
                    h.classes.len(),
                    p.num_classes()
                )));
            }
            h.classes.clone()
        };
        let out = CertificateHyper {
            kappa: h.kappa,
            classes,
            loss_weights: h.loss_weights,
        };
        out.validate()?;
        Ok(out)
    }
}
