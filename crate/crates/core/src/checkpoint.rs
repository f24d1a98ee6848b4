//! Text checkpoint for trained parameters.
//!
//! Layout (one item per line):
//!
//! ```text
//! gnncert-checkpoint 1
//! state_dim 1
//! filter_dims 20
//! mlp_widths 20 20
//! output_dim 20
//! kappa 1
//! matrix <rows> <cols>
//! <row of f64 bit patterns as 16-digit hex> ...
//! sha256 <digest of every preceding byte>
//! ```
//!
//! Matrices appear in canonical parameter order (filters H⁰, H¹, then dense
//! W, b with biases stored as `1 × out`). Bit patterns make the round trip exact.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, GnnParams};

const MAGIC: &str = "gnncert-checkpoint 1";

/// Parameters plus the architecture and degree they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: GnnConfig,
    pub kappa: u32,
    pub params: GnnParams,
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn push_matrix(out: &mut String, m: ndarray::ArrayView2<'_, f64>) {
    writeln!(out, "matrix {} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

impl Checkpoint {
    pub fn encode(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "state_dim {}", c.state_dim).unwrap();
        writeln!(out, "filter_dims {}", join(&c.filter_dims)).unwrap();
        writeln!(out, "mlp_widths {}", join(&c.mlp_widths)).unwrap();
        writeln!(out, "output_dim {}", c.output_dim).unwrap();
        writeln!(out, "kappa {}", self.kappa).unwrap();
        for f in &self.params.filters {
            push_matrix(&mut out, f.h0.view());
            push_matrix(&mut out, f.h1.view());
        }
        for d in &self.params.dense {
            push_matrix(&mut out, d.w.view());
            push_matrix(&mut out, d.b.view().insert_axis(ndarray::Axis(0)));
        }
        let digest = hex::encode(Sha256::digest(out.as_bytes()));
        writeln!(out, "sha256 {digest}").unwrap();
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let body_end = text
            .rfind("sha256 ")
            .ok_or_else(|| bad("missing checksum line".into()))?;
        let (body, tail) = text.split_at(body_end);
        let want = tail.trim_start_matches("sha256 ").trim();
        let got = hex::encode(Sha256::digest(body.as_bytes()));
        if want != got {
            return Err(bad(format!("checksum mismatch: stored {want}, computed {got}")));
        }

        let mut lines = body.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("truncated before {what}")));
        if next("header")? != MAGIC {
            return Err(bad("unrecognised header".into()));
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
                .ok_or_else(|| Error::Checkpoint(format!("expected `{key}`, found `{line}`")))
        }
        fn numbers(s: &str) -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Checkpoint(format!("bad integer `{t}`"))))
                .collect()
        }
        let one = |s: &str| -> Result<usize> {
            let v = numbers(s)?;
            if v.len() == 1 {
                Ok(v[0])
            } else {
                Err(bad(format!("expected one integer, found `{s}`")))
            }
        };
        let config = GnnConfig {
            state_dim: one(field(next("state_dim")?, "state_dim")?)?,
            filter_dims: numbers(field(next("filter_dims")?, "filter_dims")?)?,
            mlp_widths: numbers(field(next("mlp_widths")?, "mlp_widths")?)?,
            output_dim: one(field(next("output_dim")?, "output_dim")?)?,
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let kappa = one(field(next("kappa")?, "kappa")?)? as u32;

        let mut params = GnnParams::zeros(&config);
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let header = next("matrix")?;
            let dims = numbers(field(header, "matrix")?)?;
            if dims != [rows, cols] {
                return Err(bad(format!("matrix is {dims:?}, architecture needs [{rows}, {cols}]")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next("matrix row")?;
                for tok in line.split_whitespace() {
                    let bits = u64::from_str_radix(tok, 16).map_err(|_| bad(format!("bad float bits `{tok}`")))?;
                    data.push(f64::from_bits(bits));
                }
            }
            Array2::from_shape_vec((rows, cols), data).map_err(|_| bad("row has the wrong length".into()))
        };
        for f in &mut params.filters {
            let (r, c) = f.h0.dim();
            f.h0 = read_matrix(r, c)?;
            f.h1 = read_matrix(r, c)?;
        }
        for d in &mut params.dense {
            let (r, c) = d.w.dim();
            d.w = read_matrix(r, c)?;
            d.b = read_matrix(1, c)?.row(0).to_owned();
        }
        if next("end").is_ok() {
            return Err(bad("trailing data before checksum".into()));
        }
        Ok(Self { config, kappa, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read_to_string(path)?)
    }
}
