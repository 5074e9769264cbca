//! Run configuration: a JSON document of optional overrides on top of per-environment defaults.

use std::path::{Path, PathBuf};

use gmmq::envs::{EnvName, EnvSpec};
use gmmq::optimizer::ArmijoConfig;
use gmmq::policy_iter::{EvalConfig, InitConfig, LayoutKind, PiConfig, RolloutConfig};
use gmmq::MetricKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that replaces `output_dir`.
pub const OUT_ENV: &str = "GMMQ_OUT";
pub const DEFAULT_OUTPUT_DIR: &str = "gmmq_out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Emit {
    pub csv: bool,
    /// Per-run trial logs as `results.json`.
    pub json: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Self {
            csv: true,
            json: true,
        }
    }
}

/// The document as written. Every field but `env` is optional.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    env: EnvName,
    /// Replaces the preset dynamics, action set and bounds wholesale.
    env_spec: Option<EnvSpec>,
    k: Option<usize>,
    layout: Option<LayoutKind>,
    metric: Option<MetricKind>,
    discount: Option<f64>,
    rollout: Option<RolloutConfig>,
    exploration_eps: Option<f64>,
    armijo: Option<ArmijoConfig>,
    trials: Option<usize>,
    eval: Option<EvalConfig>,
    init: Option<InitConfig>,
    seed: Option<u64>,
    n_seeds: Option<usize>,
    output_dir: Option<PathBuf>,
    emit: Option<Emit>,
    sweep: Option<Vec<usize>>,
    record_timing: Option<bool>,
}

/// Fully resolved configuration; this is what `config_resolved.json` echoes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Base configuration; `seed` is the base seed and `k` the first sweep point.
    pub pi: PiConfig,
    pub n_seeds: usize,
    pub output_dir: PathBuf,
    pub emit: Emit,
    /// Values of K to run; a single entry when no sweep was requested.
    pub sweep: Vec<usize>,
    /// When false `wall_time_ms` is written as 0 so outputs are bitwise reproducible.
    pub record_timing: bool,
}

impl RunConfig {
    pub fn from_json(text: &str, out_override: Option<PathBuf>) -> Result<Self, CliError> {
        // serde_json errors carry the line and column
        let raw: RawRunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut pi = PiConfig::defaults_for(raw.env);
        if let Some(spec) = raw.env_spec {
            if spec.name() != raw.env {
                return Err(CliError::Config(format!(
                    "env_spec describes {} but env is {}",
                    spec.name(),
                    raw.env
                )));
            }
            pi.env = spec;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = raw.$field { pi.$field = v; })*
            };
        }
        set!(
            k,
            layout,
            metric,
            discount,
            rollout,
            exploration_eps,
            armijo,
            trials,
            eval,
            init,
            seed
        );

        let sweep = raw.sweep.unwrap_or_else(|| vec![pi.k]);
        if sweep.is_empty() {
            return Err(CliError::Config("sweep must list at least one K".into()));
        }
        pi.k = sweep[0];
        let n_seeds = raw.n_seeds.unwrap_or(1);
        if n_seeds == 0 {
            return Err(CliError::Config("n_seeds must be at least 1".into()));
        }
        for &k in &sweep {
            let mut probe = pi.clone();
            probe.k = k;
            probe
                .validate()
                .map_err(|e| CliError::Config(format!("K = {k}: {e}")))?;
        }
        Ok(Self {
            pi,
            n_seeds,
            output_dir: out_override
                .or(raw.output_dir)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
            emit: raw.emit.unwrap_or_default(),
            sweep,
            record_timing: raw.record_timing.unwrap_or(true),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let out = std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        Self::from_json(&text, out).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Configurations of every (K, seed) job, in output order.
    pub fn jobs(&self) -> Vec<PiConfig> {
        let mut jobs = Vec::with_capacity(self.sweep.len() * self.n_seeds);
        for &k in &self.sweep {
            for i in 0..self.n_seeds {
                let mut cfg = self.pi.clone();
                cfg.k = k;
                cfg.seed = self.pi.seed.wrapping_add(i as u64);
                jobs.push(cfg);
            }
        }
        jobs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_gets_the_preset() {
        let cfg = RunConfig::from_json(r#"{"env": "pendulum"}"#, None).unwrap();
        assert_eq!(cfg.pi, PiConfig::defaults_for(EnvName::Pendulum));
        assert_eq!(cfg.n_seeds, 1);
        assert_eq!(cfg.sweep, vec![5]);
        assert_eq!(cfg.output_dir, PathBuf::from(DEFAULT_OUTPUT_DIR));
        assert!(cfg.record_timing && cfg.emit.csv && cfg.emit.json);
    }

    #[test]
    fn partial_nested_objects_keep_the_other_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"env": "acrobot", "armijo": {"j_steps": 7}, "eval": {"step_cap": 40}}"#,
            None,
        )
        .unwrap();
        assert_eq!(cfg.pi.armijo.j_steps, 7);
        assert_eq!(cfg.pi.armijo.beta, ArmijoConfig::default().beta);
        assert_eq!(cfg.pi.eval.step_cap, 40);
        assert_eq!(cfg.pi.eval.eval_episodes, 1);
    }

    #[test]
    fn errors_point_at_the_line() {
        let text = "{\n  \"env\": \"pendulum\",\n  \"trails\": 3\n}";
        let err = RunConfig::from_json(text, None).unwrap_err().to_string();
        assert!(err.contains("trails") && err.contains("line 3"), "{err}");
        let text = "{\n  \"env\": \"pendulum\",\n  \"armijo\": {\n    \"beta\": \"half\"\n  }\n}";
        let err = RunConfig::from_json(text, None).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for text in [
            r#"{"env": "pendulum", "discount": 1.0}"#,
            r#"{"env": "pendulum", "n_seeds": 0}"#,
            r#"{"env": "pendulum", "sweep": []}"#,
            r#"{"env": "pendulum", "sweep": [5, 100000]}"#,
            r#"{"env": "pendulum", "env_spec": null, "k": 0}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(text, None), Err(CliError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn jobs_cover_the_sweep_with_offset_seeds() {
        let cfg = RunConfig::from_json(
            r#"{"env": "pendulum", "seed": 10, "n_seeds": 2, "sweep": [3, 5]}"#,
            None,
        )
        .unwrap();
        let jobs: Vec<(usize, u64)> = cfg.jobs().iter().map(|j| (j.k, j.seed)).collect();
        assert_eq!(jobs, vec![(3, 10), (3, 11), (5, 10), (5, 11)]);
    }

    #[test]
    fn output_override_wins() {
        let cfg = RunConfig::from_json(
            r#"{"env": "pendulum", "output_dir": "a"}"#,
            Some("b".into()),
        )
        .unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("b"));
    }
}
