//! Grid sweeps over one or more config axes, with a fixed CSV schema.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Experiment, ExperimentConfig, Method};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Reward inverse temperature.
    Beta,
    /// Consistency weight of the guidance-network loss.
    Eta,
    /// Importance-sampling proposal count.
    K,
    /// M1 sample count.
    N,
    Steps,
    Method,
    /// Guidance scale.
    Strength,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "beta" => Axis::Beta,
            "eta" => Axis::Eta,
            "k" => Axis::K,
            "n" => Axis::N,
            "steps" => Axis::Steps,
            "method" => Axis::Method,
            "strength" => Axis::Strength,
            _ => return Err(Error::Input(format!("unknown sweep axis {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub axis: Axis,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// `name=v1,v2,...`
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, vals) = spec
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("sweep axis {spec:?} is not of the form name=v1,v2")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Input(format!("sweep axis {name:?} has no values")));
        }
        Ok(Self {
            axis: Axis::parse(name.trim())?,
            values,
        })
    }
}

fn num<T: std::str::FromStr>(axis: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Input(format!("{axis} value {v:?} does not parse")))
}

/// Apply one axis value to a config copy.
pub fn apply(cfg: &mut ExperimentConfig, axis: Axis, value: &str) -> Result<()> {
    match axis {
        Axis::Beta => cfg.reward = cfg.reward.clone().with_beta(num("beta", value)?)?,
        Axis::Eta => cfg.training.get_or_insert_with(Default::default).eta = num("eta", value)?,
        Axis::K => cfg.guidance.k = Some(num("k", value)?),
        Axis::N => cfg.guidance.n = Some(num("n", value)?),
        Axis::Steps => cfg.sampler.steps = Some(num("steps", value)?),
        Axis::Strength => cfg.guidance.strength = num("strength", value)?,
        Axis::Method => {
            let m = Method::parse(value)?;
            let g = &mut cfg.guidance;
            g.method = m;
            // drop parameters that belong to other methods, fill defaults
            if m != Method::M1 {
                g.n = None;
                g.mode = None;
            } else if g.n.is_none() {
                g.n = Some(DEFAULT_SWEEP_M1_N);
            }
            if m != Method::GradFreeIs {
                g.k = None;
            } else if g.k.is_none() {
                g.k = Some(DEFAULT_SWEEP_K);
            }
            if !matches!(m, Method::TrainedNet | Method::GradFieldNet) {
                g.network = None;
                cfg.training = None;
            }
            if m == Method::None {
                g.strength = 1.0;
            }
        }
    }
    Ok(())
}

/// Filled in when a method sweep reaches m1 / grad_free_is without a value.
pub const DEFAULT_SWEEP_M1_N: usize = 16;
pub const DEFAULT_SWEEP_K: usize = 256;

/// One CSV row. Column order is part of the file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub method: String,
    pub sampler: String,
    pub steps: Option<usize>,
    pub beta: f64,
    pub eta: Option<f64>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub strength: f64,
    pub samples: Option<usize>,
    pub mean_reward: Option<f64>,
    pub reward_se: Option<f64>,
    pub closed_form_reward: Option<f64>,
    pub mmd: Option<f64>,
    pub mmd_threshold: Option<f64>,
    pub mmd_rejects: Option<bool>,
    pub ess_min: Option<f64>,
    pub ess_mean: Option<f64>,
    pub runtime_s: f64,
    pub status: String,
    pub error: String,
    pub config_hash: String,
    pub seed: u64,
}

pub const SWEEP_COLUMNS: [&str; 23] = [
    "cell",
    "method",
    "sampler",
    "steps",
    "beta",
    "eta",
    "k",
    "n",
    "strength",
    "samples",
    "mean_reward",
    "reward_se",
    "closed_form_reward",
    "mmd",
    "mmd_threshold",
    "mmd_rejects",
    "ess_min",
    "ess_mean",
    "runtime_s",
    "status",
    "error",
    "config_hash",
    "seed",
];

fn cells(axes: &[SweepAxis]) -> Vec<Vec<(Axis, &str)>> {
    let mut out: Vec<Vec<(Axis, &str)>> = vec![Vec::new()];
    for ax in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                ax.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((ax.axis, v.as_str()));
                    c
                })
            })
            .collect();
    }
    out
}

/// Run every cell of the cartesian product of `axes` on top of `base`.
/// A failing cell is recorded and the sweep moves on.
pub fn sweep(base: &Experiment, axes: &[SweepAxis]) -> Result<Vec<SweepRow>> {
    if axes.is_empty() {
        return Err(Error::Input("sweep needs at least one axis".into()));
    }
    let mut rows = Vec::new();
    for (i, cell) in cells(axes).into_iter().enumerate() {
        let start = Instant::now();
        let mut cfg = base.config.clone();
        let prepared = cell
            .iter()
            .try_for_each(|(a, v)| apply(&mut cfg, *a, v))
            .and_then(|_| Experiment::from_config(cfg.clone(), &base.base_dir));
        let result = prepared.and_then(|exp| {
            let out = exp.execute()?;
            Ok((exp, out))
        });
        let g = &cfg.guidance;
        let mut row = SweepRow {
            cell: i,
            method: g.method.tag().into(),
            sampler: cfg.sampler.kind.tag().into(),
            steps: Some(cfg.sampler.steps.unwrap_or_else(|| cfg.sampler.kind.default_steps())),
            beta: cfg.reward.beta(),
            eta: cfg.training.as_ref().map(|t| t.eta),
            k: g.k,
            n: g.n,
            strength: g.strength,
            samples: None,
            mean_reward: None,
            reward_se: None,
            closed_form_reward: None,
            mmd: None,
            mmd_threshold: None,
            mmd_rejects: None,
            ess_min: None,
            ess_mean: None,
            runtime_s: 0.0,
            status: "ok".into(),
            error: String::new(),
            config_hash: String::new(),
            seed: cfg.seed,
        };
        match result {
            Ok((exp, out)) => {
                let e = &out.report.eval;
                if matches!(g.method, Method::TrainedNet | Method::GradFieldNet) {
                    row.eta = Some(exp.training_config().eta);
                }
                row.config_hash = exp.config_hash.clone();
                row.samples = Some(e.n);
                row.mean_reward = Some(e.reward.mean);
                row.reward_se = Some(e.reward.se);
                row.closed_form_reward = e.reward.closed_form;
                if let Some(m) = &e.mmd {
                    row.mmd = Some(m.statistic);
                    row.mmd_threshold = Some(m.threshold);
                    row.mmd_rejects = Some(m.rejects());
                }
                if let Some(s) = &e.ess {
                    row.ess_min = Some(s.min);
                    row.ess_mean = Some(s.mean);
                }
            }
            Err(e) => {
                row.status = e.kind().into();
                row.error = e.to_string();
            }
        }
        row.runtime_s = start.elapsed().as_secs_f64();
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_sweep<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    csv.write_record(SWEEP_COLUMNS).map_err(err)?;
    for r in rows {
        csv.serialize(r).map_err(err)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_sweep(std::fs::File::create(path)?, rows)
}
