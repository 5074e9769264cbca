//! `gmmq run`: policy iteration over every (K, seed) job with streamed CSV output.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use gmmq::model_io;
use gmmq::policy_iter::{moving_average, run_with, PiConfig, TrialLog};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const RESOLVED_CONFIG: &str = "config_resolved.json";
pub const MODELS_DIR: &str = "models";
const MA_WINDOW: usize = 10;

/// One CSV line; field order is the file's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub env: String,
    pub k: usize,
    pub metric: String,
    pub seed: u64,
    pub trial: usize,
    pub steps_to_goal: f64,
    pub steps_to_goal_ma10: f64,
    pub final_loss: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Serialize)]
struct RunRecord {
    k: usize,
    seed: u64,
    logs: Vec<TrialLog>,
}

/// Appends rows and flushes after each one, so an interrupted run leaves a valid prefix.
struct RowSink {
    writer: Option<Mutex<csv::Writer<File>>>,
}

impl RowSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let writer = match path {
            Some(p) => {
                let mut w =
                    headerless_writer(p).with_context(|| format!("creating {}", p.display()))?;
                // header even if no row ever arrives
                w.write_record(csv_header())?;
                w.flush()?;
                Some(Mutex::new(w))
            }
            None => None,
        };
        Ok(Self { writer })
    }

    fn push(&self, row: &ResultRow) -> Result<()> {
        if let Some(w) = &self.writer {
            let mut w = w.lock().map_err(|_| anyhow!("CSV writer poisoned"))?;
            w.serialize(row)?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Rows are serialized without serde's automatic header; the header is written explicitly.
fn headerless_writer(path: &Path) -> csv::Result<csv::Writer<File>> {
    csv::WriterBuilder::new().has_headers(false).from_path(path)
}

pub fn csv_header() -> [&'static str; 9] {
    [
        "env",
        "k",
        "metric",
        "seed",
        "trial",
        "steps_to_goal",
        "steps_to_goal_ma10",
        "final_loss",
        "wall_time_ms",
    ]
}

fn model_path(dir: &Path, cfg: &PiConfig) -> PathBuf {
    dir.join(MODELS_DIR).join(format!(
        "{}_k{}_seed{}.json",
        cfg.env.name(),
        cfg.k,
        cfg.seed
    ))
}

fn run_job(cfg: &PiConfig, rc: &RunConfig, sink: &RowSink) -> Result<RunRecord> {
    let mut steps = Vec::with_capacity(cfg.trials);
    let mut sink_err = None;
    let out = run_with(cfg, |ev| {
        if sink_err.is_some() {
            return;
        }
        steps.push(ev.log.steps_to_goal);
        let row = ResultRow {
            env: cfg.env.name().to_string(),
            k: cfg.k,
            metric: cfg.metric.as_str().to_string(),
            seed: cfg.seed,
            trial: ev.log.trial,
            steps_to_goal: ev.log.steps_to_goal,
            steps_to_goal_ma10: *moving_average(&steps, MA_WINDOW).last().expect("non-empty"),
            final_loss: ev.log.final_loss,
            wall_time_ms: if rc.record_timing {
                ev.log.wall_time_ms
            } else {
                0.0
            },
        };
        if let Err(e) = sink.push(&row) {
            sink_err = Some(e);
        }
    })
    .with_context(|| format!("K = {}, seed = {}", cfg.k, cfg.seed))?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    model_io::save(&out.model, &model_path(&rc.output_dir, cfg))?;
    let mut logs = out.logs;
    if !rc.record_timing {
        logs.iter_mut().for_each(|l| l.wall_time_ms = 0.0);
    }
    Ok(RunRecord {
        k: cfg.k,
        seed: cfg.seed,
        logs,
    })
}

/// Rewrites the CSV in job order once every job is done; workers append in completion order.
fn sort_csv(path: &Path, order: &[(usize, u64)]) -> Result<()> {
    let mut rows: Vec<ResultRow> = csv::Reader::from_path(path)?
        .deserialize()
        .collect::<Result<_, _>>()?;
    let rank = |r: &ResultRow| order.iter().position(|&(k, s)| k == r.k && s == r.seed);
    rows.sort_by_key(|r| (rank(r), r.trial));
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = headerless_writer(&tmp)?;
        w.write_record(csv_header())?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn map_jobs<T: Send>(jobs: &[PiConfig], f: impl Fn(&PiConfig) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(f).collect()
    }
}

/// Runs every job and writes the outputs under `rc.output_dir`.
pub fn execute(rc: &RunConfig) -> Result<()> {
    let dir = &rc.output_dir;
    fs::create_dir_all(dir.join(MODELS_DIR))
        .with_context(|| format!("creating {}", dir.display()))?;
    fs::write(
        dir.join(RESOLVED_CONFIG),
        serde_json::to_string_pretty(rc)? + "\n",
    )?;

    let csv_path = rc.emit.csv.then(|| dir.join(RESULTS_CSV));
    let sink = RowSink::open(csv_path.as_deref())?;
    let jobs = rc.jobs();
    let results = map_jobs(&jobs, |cfg| run_job(cfg, rc, &sink));
    drop(sink);

    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }
    if let Some(p) = &csv_path {
        let order: Vec<(usize, u64)> = jobs.iter().map(|j| (j.k, j.seed)).collect();
        sort_csv(p, &order)?;
    }
    if rc.emit.json {
        fs::write(
            dir.join(RESULTS_JSON),
            serde_json::to_string_pretty(&records)? + "\n",
        )?;
    }
    Ok(())
}
