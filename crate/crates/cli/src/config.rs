//! Layered `key = value` configuration: built-in defaults, then the config
//! file, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use alp_core::eval::{ErrorMetric, EvalConfig};
use alp_core::locate::Weighting;
use alp_core::pipeline::PipelineConfig;
use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub columns: Option<PathBuf>,
    /// 0 picks one worker per core. Has no effect on results.
    pub workers: usize,
    pub pipeline: PipelineConfig,
    pub penalty_m: Option<f64>,
    pub min_coverage: f64,
    pub metric: ErrorMetric,
    pub scenario: Option<String>,
    pub scenario_file: Option<PathBuf>,
    pub synth_seed: Option<u64>,
    pub synth_prefix: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            columns: None,
            workers: 0,
            pipeline: PipelineConfig::default(),
            penalty_m: None,
            min_coverage: 0.5,
            metric: ErrorMetric::Euclidean3d,
            scenario: None,
            scenario_file: None,
            synth_seed: None,
            synth_prefix: "synth".into(),
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<()>;

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .ok()
        .with_context(|| format!("not a valid number: {v:?}"))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("not a boolean: {v:?}"),
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn none_or<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

macro_rules! field {
    ($key:literal, $($path:ident).+, number) => {
        ($key, (|c: &RunConfig| c.$($path).+.to_string()) as Getter, (|c: &mut RunConfig, v: &str| {
            c.$($path).+ = num(v)?;
            Ok(())
        }) as Setter)
    };
    ($key:literal, $($path:ident).+, boolean) => {
        ($key, (|c: &RunConfig| c.$($path).+.to_string()) as Getter, (|c: &mut RunConfig, v: &str| {
            c.$($path).+ = flag(v)?;
            Ok(())
        }) as Setter)
    };
}

fn fields() -> Vec<(&'static str, Getter, Setter)> {
    vec![
        (
            "input",
            |c| {
                c.input
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string())
            },
            |c, v| {
                c.input = none_or(v, |s| Ok(PathBuf::from(s)))?;
                Ok(())
            },
        ),
        (
            "columns",
            |c| {
                c.columns
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string())
            },
            |c, v| {
                c.columns = none_or(v, |s| Ok(PathBuf::from(s)))?;
                Ok(())
            },
        ),
        field!("workers", workers, number),
        field!("seed", pipeline.mask_seed, number),
        field!("epoch_s", pipeline.epoch_s, number),
        (
            "mask.fraction",
            |c| opt(&c.pipeline.eval_fraction),
            |c, v| {
                c.pipeline.eval_fraction = none_or(v, num)?;
                Ok(())
            },
        ),
        field!(
            "target_min_receivers",
            pipeline.target_min_receivers,
            number
        ),
        field!("sync.gate_sigma", pipeline.sync.gate_sigma, number),
        field!("sync.reject_limit", pipeline.sync.reject_limit, number),
        field!(
            "sync.drift_random_walk",
            pipeline.sync.drift_random_walk,
            number
        ),
        field!(
            "sync.initial_drift_sigma_ns_per_s",
            pipeline.sync.initial_drift_sigma_ns_per_s,
            number
        ),
        field!(
            "sync.toa_sigma_good_ns",
            pipeline.sync.toa_sigma_good_ns,
            number
        ),
        field!(
            "sync.toa_sigma_other_ns",
            pipeline.sync.toa_sigma_other_ns,
            number
        ),
        field!(
            "sync.noise_adapt_alpha",
            pipeline.sync.noise_adapt_alpha,
            number
        ),
        field!(
            "sync.noise_adapt_after",
            pipeline.sync.noise_adapt_after,
            number
        ),
        field!(
            "sync.min_measurement_var_ns2",
            pipeline.sync.min_measurement_var_ns2,
            number
        ),
        field!(
            "sync.max_extrapolation_s",
            pipeline.sync.max_extrapolation_s,
            number
        ),
        field!("sync.verified_only", pipeline.sync.verified_only, boolean),
        field!("locate.max_iter", pipeline.locate.max_iter, number),
        field!(
            "locate.step_tolerance_m",
            pipeline.locate.step_tolerance_m,
            number
        ),
        field!(
            "locate.residual_ceiling_s",
            pipeline.locate.residual_ceiling_s,
            number
        ),
        field!(
            "locate.feasibility_slack_s",
            pipeline.locate.feasibility_slack_s,
            number
        ),
        field!(
            "locate.rank_threshold",
            pipeline.locate.rank_threshold,
            number
        ),
        field!(
            "locate.min_equations",
            pipeline.locate.min_equations,
            number
        ),
        field!(
            "locate.max_guess_age_s",
            pipeline.locate.max_guess_age_s,
            number
        ),
        (
            "locate.weighting",
            |c| c.pipeline.locate.weighting.as_str().to_string(),
            |c, v| {
                c.pipeline.locate.weighting =
                    Weighting::parse(v).with_context(|| format!("unknown weighting {v:?}"))?;
                Ok(())
            },
        ),
        field!("locate.mirror_retry", pipeline.locate.mirror_retry, boolean),
        field!(
            "locate.retry_altitude_m",
            pipeline.locate.retry_altitude_m,
            number
        ),
        field!(
            "locate.guess_altitude_m",
            pipeline.locate.guess_altitude_m,
            number
        ),
        field!(
            "locate.baro_mirror_tolerance_m",
            pipeline.locate.baro_mirror_tolerance_m,
            number
        ),
        field!(
            "locate.baro_constraint",
            pipeline.locate.baro_constraint,
            boolean
        ),
        field!(
            "locate.baro_offset_m",
            pipeline.locate.baro_offset_m,
            number
        ),
        field!("locate.baro_sigma_m", pipeline.locate.baro_sigma_m, number),
        field!(
            "locate.vdop_threshold",
            pipeline.locate.vdop_threshold,
            number
        ),
        (
            "eval.penalty_m",
            |c| opt(&c.penalty_m),
            |c, v| {
                c.penalty_m = none_or(v, num)?;
                Ok(())
            },
        ),
        field!("eval.min_coverage", min_coverage, number),
        (
            "eval.metric",
            |c| c.metric.as_str().to_string(),
            |c, v| {
                c.metric = ErrorMetric::parse(v)
                    .with_context(|| format!("unknown metric {v:?} (use 3d or 2d)"))?;
                Ok(())
            },
        ),
        (
            "synth.scenario",
            |c| opt(&c.scenario),
            |c, v| {
                c.scenario = none_or(v, |s| Ok(s.to_string()))?;
                Ok(())
            },
        ),
        (
            "synth.scenario_file",
            |c| {
                c.scenario_file
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string())
            },
            |c, v| {
                c.scenario_file = none_or(v, |s| Ok(PathBuf::from(s)))?;
                Ok(())
            },
        ),
        (
            "synth.seed",
            |c| opt(&c.synth_seed),
            |c, v| {
                c.synth_seed = none_or(v, num)?;
                Ok(())
            },
        ),
        (
            "synth.prefix",
            |c| c.synth_prefix.clone(),
            |c, v| {
                c.synth_prefix = v.to_string();
                Ok(())
            },
        ),
    ]
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected key = value, got {line:?}", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, overlaid by `file`, overlaid by `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            pairs.extend(parse_pairs(&text).with_context(|| format!("in {}", path.display()))?);
        }
        pairs.extend(overrides.iter().cloned());
        let table = fields();
        let setters: BTreeMap<&str, Setter> = table.iter().map(|(k, _, s)| (*k, *s)).collect();
        let mut cfg = RunConfig::default();
        for (k, v) in &pairs {
            let set = setters
                .get(k.as_str())
                .with_context(|| format!("unknown config key {k:?}"))?;
            set(&mut cfg, v).with_context(|| format!("config key {k}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epoch_s", self.pipeline.epoch_s),
            ("sync.gate_sigma", self.pipeline.sync.gate_sigma),
            (
                "sync.initial_drift_sigma_ns_per_s",
                self.pipeline.sync.initial_drift_sigma_ns_per_s,
            ),
            (
                "sync.toa_sigma_good_ns",
                self.pipeline.sync.toa_sigma_good_ns,
            ),
            (
                "sync.toa_sigma_other_ns",
                self.pipeline.sync.toa_sigma_other_ns,
            ),
            (
                "sync.noise_adapt_alpha",
                self.pipeline.sync.noise_adapt_alpha,
            ),
            (
                "sync.min_measurement_var_ns2",
                self.pipeline.sync.min_measurement_var_ns2,
            ),
            (
                "sync.max_extrapolation_s",
                self.pipeline.sync.max_extrapolation_s,
            ),
            (
                "locate.step_tolerance_m",
                self.pipeline.locate.step_tolerance_m,
            ),
            (
                "locate.residual_ceiling_s",
                self.pipeline.locate.residual_ceiling_s,
            ),
            (
                "locate.feasibility_slack_s",
                self.pipeline.locate.feasibility_slack_s,
            ),
            ("locate.rank_threshold", self.pipeline.locate.rank_threshold),
            (
                "locate.max_guess_age_s",
                self.pipeline.locate.max_guess_age_s,
            ),
            (
                "locate.baro_mirror_tolerance_m",
                self.pipeline.locate.baro_mirror_tolerance_m,
            ),
            ("locate.baro_sigma_m", self.pipeline.locate.baro_sigma_m),
            ("locate.vdop_threshold", self.pipeline.locate.vdop_threshold),
        ];
        for (k, v) in positive {
            // Infinity is allowed where it means "never".
            if v.is_nan() || v <= 0.0 {
                bail!("{k} must be positive, got {v}");
            }
        }
        if self.pipeline.sync.drift_random_walk < 0.0 {
            bail!("sync.drift_random_walk must not be negative");
        }
        if self.pipeline.sync.noise_adapt_alpha > 1.0 {
            bail!("sync.noise_adapt_alpha must not exceed 1");
        }
        if self.pipeline.sync.reject_limit == 0 || self.pipeline.locate.max_iter == 0 {
            bail!("sync.reject_limit and locate.max_iter must be at least 1");
        }
        if self.pipeline.locate.min_equations == 0 {
            bail!("locate.min_equations must be at least 1");
        }
        self.pipeline.validate().map_err(anyhow::Error::from)?;
        if let Some(p) = self.penalty_m {
            self.eval(p)?;
        }
        Ok(())
    }

    pub fn eval(&self, penalty_m: f64) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            min_coverage: self.min_coverage,
            penalty_m,
            metric: self.metric,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting in canonical form, sorted by key. `workers` is left
    /// out so that outputs do not depend on it.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = fields()
            .into_iter()
            .filter(|(k, _, _)| *k != "workers")
            .map(|(k, get, _)| (k.to_string(), get(self)))
            .collect();
        out.sort();
        out
    }
}
