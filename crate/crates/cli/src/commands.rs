//! Subcommand bodies. Each returns the process exit code or an error that
//! `main` maps to one.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gnncert::checkpoint::Checkpoint;
use gnncert::gnn::{lyapunov_eval, GnnParams, LyapunovCandidate};
use gnncert::rng::{stream, Stream};
use gnncert::system::{ClosureMode, SystemOracle};
use gnncert::training::{sample_dataset, train, transfer, StopReason, TrainReport};
use gnncert::verifier::{verify, InflationMode};
use gnncert::{Error, Result};
use ndarray::Array2;

use crate::config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_NOT_CERTIFIED: u8 = 1;
pub const EXIT_FAIL: u8 = 2;
pub const EXIT_ABORT: u8 = 3;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_MISMATCH: u8 = 65;

/// Settings shared by every subcommand.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context {
    pub fn new(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let config = RunConfig::load(config_path)?;
        let out = out
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out)?;
        Ok(Self {
            seed: seed.unwrap_or(config.seed),
            config,
            out,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn default_checkpoint(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.path("checkpoint.txt"))
    }
}

/// Loads a checkpoint and checks it against the architecture the config
/// asks for on `oracle`.
fn load_candidate(ctx: &Context, oracle: &SystemOracle, path: &Path) -> Result<LyapunovCandidate> {
    let ck = Checkpoint::load(path)?;
    let want = ctx.config.gnn_config(oracle.state_dim());
    if ck.config != want {
        return Err(Error::Shape(format!(
            "checkpoint architecture {:?} differs from config {:?}",
            ck.config, want
        )));
    }
    if ck.kappa != ctx.config.hyper.kappa {
        return Err(Error::Shape(format!(
            "checkpoint kappa {} differs from config kappa {}",
            ck.kappa, ctx.config.hyper.kappa
        )));
    }
    LyapunovCandidate::new(ck.config, ck.params, ctx.config.hyper(oracle.graph())?)
}

fn save_candidate(cand: &LyapunovCandidate, path: &Path) -> Result<()> {
    Checkpoint {
        config: cand.config.clone(),
        kappa: cand.hyper.kappa,
        params: cand.params.clone(),
    }
    .save(path)
}

fn write_train_outputs(ctx: &Context, suffix: &str, cand: &LyapunovCandidate, report: &TrainReport) -> Result<u8> {
    save_candidate(cand, &ctx.path(&format!("checkpoint{suffix}.txt")))?;
    let hyper = &cand.hyper;
    let mut text = report.to_text();
    text.push_str(&format!("seed: {}\nkappa: {}\n", ctx.seed, hyper.kappa));
    for (c, h) in hyper.classes.iter().enumerate() {
        text.push_str(&format!(
            "class.{c}.constants: alpha={} alpha_bar={} alpha_tilde={} sigma={} lambda={}\n",
            h.alpha, h.alpha_bar, h.alpha_tilde, h.sigma, h.lambda
        ));
    }
    let w = hyper.loss_weights;
    text.push_str(&format!("loss_weights: {} {} {}\n", w[0], w[1], w[2]));
    fs::write(ctx.path(&format!("train_report{suffix}.txt")), text)?;
    let mut csv = BufWriter::new(File::create(ctx.path(&format!("loss{suffix}.csv")))?);
    report.write_loss_csv(&mut csv)?;
    csv.flush()?;
    let certified = report.stop == StopReason::Margin || report.margin_check.iter().all(|&b| b);
    Ok(if certified { EXIT_OK } else { EXIT_NOT_CERTIFIED })
}

fn run_training(ctx: &Context, cand: &LyapunovCandidate, oracle: &SystemOracle) -> Result<(LyapunovCandidate, TrainReport)> {
    let dataset = sample_dataset(oracle, ctx.config.training.samples, ctx.seed)?;
    train(cand, oracle, &dataset, &ctx.config.train_options(ctx.seed))
}

pub fn train_cmd(ctx: &Context) -> Result<u8> {
    let oracle = ctx.config.oracle()?;
    let gnn = ctx.config.gnn_config(oracle.state_dim());
    gnn.validate()?;
    let params = GnnParams::init(&gnn, &mut stream(ctx.seed, Stream::Init));
    let cand = LyapunovCandidate::new(gnn, params, ctx.config.hyper(oracle.graph())?)?;
    let (trained, report) = run_training(ctx, &cand, &oracle)?;
    eprintln!(
        "train: stop {:?} after {} epochs, loss {:.6e}",
        report.stop,
        report.final_log().epoch,
        report.final_log().loss
    );
    write_train_outputs(ctx, "", &trained, &report)
}

/// Command-line overrides of the `[verification]` section.
#[derive(Debug, Default, Clone)]
pub struct VerifyOverrides {
    pub epsilon_x: Option<f64>,
    pub epsilon_u: Option<f64>,
    pub mode: Option<InflationMode>,
    pub closure: Option<ClosureMode>,
    pub budget: Option<u128>,
    pub checkpoint: Option<PathBuf>,
}

pub fn verify_cmd(ctx: &Context, ov: VerifyOverrides) -> Result<u8> {
    let oracle = ctx.config.oracle()?;
    let cand = load_candidate(ctx, &oracle, &ctx.default_checkpoint(ov.checkpoint))?;
    let mut opts = ctx.config.verification;
    opts.epsilon_x = ov.epsilon_x.unwrap_or(opts.epsilon_x);
    opts.epsilon_u = ov.epsilon_u.unwrap_or(opts.epsilon_u);
    opts.mode = ov.mode.unwrap_or(opts.mode);
    opts.closure = ov.closure.unwrap_or(opts.closure);
    opts.budget = ov.budget.unwrap_or(opts.budget);
    let report = verify(&cand, &oracle, &cand.hyper, &opts)?;
    fs::write(ctx.path("verify_report.txt"), report.to_text())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Usage(e.to_string()))?;
    fs::write(ctx.path("verify_summary.json"), json + "\n")?;
    eprintln!("verify: {}", if report.pass { "PASS" } else { "FAIL" });
    Ok(if report.pass { EXIT_OK } else { EXIT_FAIL })
}

pub fn simulate_cmd(ctx: &Context, pairs: usize, horizon: usize, checkpoint: Option<PathBuf>) -> Result<u8> {
    let oracle = ctx.config.oracle()?;
    let cand = checkpoint.map(|p| load_candidate(ctx, &oracle, &p)).transpose()?;
    let mut rng = stream(ctx.seed, Stream::Simulation);
    let (n, dim) = (oracle.n_nodes(), oracle.state_dim());
    let inputs: Vec<Array2<f64>> = vec![oracle.zero_inputs(); horizon];

    let mut traj_csv = BufWriter::new(File::create(ctx.path("trajectories.csv"))?);
    writeln!(traj_csv, "k,traj_id,node,dim,value")?;
    let mut v_csv = match cand {
        Some(_) => {
            let mut f = BufWriter::new(File::create(ctx.path("lyapunov.csv"))?);
            writeln!(f, "k,pair_id,V")?;
            Some(f)
        }
        None => None,
    };
    let mut draw = || {
        let rows: Vec<f64> = (0..n).flat_map(|_| oracle.state_box().sample(&mut rng)).collect();
        Array2::from_shape_vec((n, dim), rows).expect("n·dim samples")
    };
    for p in 0..pairs {
        let a = oracle.simulate(draw().view(), &inputs, horizon)?;
        let b = oracle.simulate(draw().view(), &inputs, horizon)?;
        for (t, traj) in [&a, &b].into_iter().enumerate() {
            if let Some(k) = traj.escaped_at {
                tracing::warn!("trajectory {} left the state box at step {k}", 2 * p + t);
            }
            for (k, x) in traj.states.iter().enumerate() {
                for ((i, d), v) in x.indexed_iter() {
                    writeln!(traj_csv, "{k},{},{i},{d},{v}", 2 * p + t)?;
                }
            }
        }
        if let (Some(c), Some(f)) = (&cand, v_csv.as_mut()) {
            for (k, (x, xh)) in a.states.iter().zip(&b.states).enumerate() {
                let v = lyapunov_eval(c, oracle.graph(), x.view(), xh.view())?;
                writeln!(f, "{k},{p},{}", v.total)?;
            }
        }
    }
    traj_csv.flush()?;
    if let Some(f) = v_csv.as_mut() {
        f.flush()?;
    }
    Ok(EXIT_OK)
}

pub fn transfer_cmd(ctx: &Context, new_n: usize, checkpoint: Option<PathBuf>, fine_tune: bool) -> Result<u8> {
    let old_graph = ctx.config.graph()?;
    let new_oracle = ctx.config.oracle_on(ctx.config.graph_with(new_n)?)?;
    let ck = Checkpoint::load(&ctx.default_checkpoint(checkpoint))?;
    if ck.kappa != ctx.config.hyper.kappa {
        return Err(Error::Transfer("checkpoint kappa differs from config".into()));
    }
    let hyper = ctx.config.hyper(&old_graph)?;
    // the state dimension is checked by `transfer` itself, before shapes matter
    let cand = LyapunovCandidate {
        config: ck.config,
        params: ck.params,
        hyper,
    };
    let (moved, report) = transfer(&cand, &old_graph, new_oracle.graph(), new_oracle.state_dim())?;
    let suffix = format!("_n{new_n}");
    save_candidate(&moved, &ctx.path(&format!("checkpoint{suffix}.txt")))?;
    fs::write(
        ctx.path(&format!("transfer_report{suffix}.txt")),
        format!(
            "old_nodes: {}\nnew_nodes: {}\nold_classes: {}\nnew_classes: {}\nstructure_match: {}\n",
            report.old_nodes, report.new_nodes, report.old_classes, report.new_classes, report.structure_match
        ),
    )?;
    if !fine_tune {
        return Ok(EXIT_OK);
    }
    let moved = LyapunovCandidate::new(moved.config, moved.params, moved.hyper)?;
    let (tuned, train_report) = run_training(ctx, &moved, &new_oracle)?;
    write_train_outputs(ctx, &suffix, &tuned, &train_report)
}

/// Prints a stored report: JSON is re-indented, `key: value` text is aligned.
pub fn report_cmd(path: &Path) -> Result<u8> {
    let text = fs::read_to_string(path)?;
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
        println!("{}", serde_json::to_string_pretty(&value).expect("a parsed value serialises"));
        return Ok(EXIT_OK);
    }
    let rows: Vec<(&str, &str)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_once(": ").ok_or_else(|| Error::Usage(format!("not a report line: `{l}`"))))
        .collect::<Result<_>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        println!("{k:<width$}  {v}");
    }
    Ok(EXIT_OK)
}

/// Maps an error to its documented exit code.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Hyper(_) | Error::InvalidTopology(_) => EXIT_USAGE,
        Error::Shape(_) | Error::Transfer(_) | Error::Checkpoint(_) => EXIT_MISMATCH,
        _ => EXIT_ABORT,
    }
}
