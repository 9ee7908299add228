//! Command plumbing behind the CLI: config validation, data generation,
//! training runs, analyses and the manifest written next to every output.
//!
//! Every command is planned first. Planning parses all keys, rejects unknown
//! ones and checks that every referenced path exists, so a bad config fails
//! before anything is computed or written.

mod analyze;
mod gen;
mod manifest;
pub mod params;
mod run;

use std::path::{Path, PathBuf};

pub use analyze::{random_fixture, verify_fixture, AnalyzeKind, AnalyzePlan, ExpansionFixture, ExpansionSummary, SingleCase, TwoLayerCase};
pub use manifest::{file_entries, write_manifest, FileEntry, Manifest, MANIFEST_FILE, MANIFEST_VERSION};
pub use run::{digit_probe, load_signal_model, load_vae, DigitSource, RunPlan, CONFIG_ECHO, MASS_FRACTION, SNAPSHOT_DIR};

use crate::config::FlatConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Run,
    Analyze(AnalyzeKind),
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Command::GenData => "gen-data".into(),
            Command::Run => "run".into(),
            Command::Analyze(k) => format!("analyze {}", k.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub params: FlatConfig,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Loads `config` and applies a seed override.
    pub fn load(command: Command, config: &Path, out: PathBuf, seed: Option<u64>) -> Result<Self> {
        if !config.is_file() {
            return Err(Error::MissingPath(config.to_path_buf()));
        }
        Self::from_params(command, FlatConfig::load(config)?, out, seed)
    }

    pub fn from_params(command: Command, mut params: FlatConfig, out: PathBuf, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            params.set("seed", s);
        }
        Ok(Self { command, params, out })
    }
}

/// Result of a command that ran to completion or stopped on a numeric failure.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub manifest: Manifest,
    /// Set when outputs are partial.
    pub failure: Option<String>,
}

enum Plan {
    Gen(gen::GenPlan),
    Run(Box<RunPlan>),
    Analyze(AnalyzePlan),
}

fn plan(cfg: &ExperimentConfig) -> Result<Plan> {
    Ok(match cfg.command {
        Command::GenData => Plan::Gen(gen::plan(&cfg.params)?),
        Command::Run => Plan::Run(Box::new(run::plan(&cfg.params)?)),
        Command::Analyze(kind) => Plan::Analyze(analyze::plan(kind, &cfg.params)?),
    })
}

/// Validates, runs and records one command.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let plan = plan(cfg)?;
    let seed = params::seed(&cfg.params)?;
    std::fs::create_dir_all(&cfg.out)?;
    let failure = match &plan {
        Plan::Gen(p) => p.execute(&cfg.out)?,
        Plan::Run(p) => {
            cfg.params.save(&cfg.out.join(CONFIG_ECHO))?;
            p.execute(&cfg.out)?
        }
        Plan::Analyze(p) => p.execute(&cfg.out)?,
    };
    let status = match &failure {
        None => "ok".to_string(),
        Some(f) => format!("partial: {f}"),
    };
    let manifest = write_manifest(&cfg.out, &cfg.command.name(), seed, &cfg.params, &status)?;
    Ok(Outcome { manifest, failure })
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Io(_) | Error::MissingPath(_) | Error::Format(_) => EXIT_IO,
        Error::Dimension { .. } | Error::Numeric(_) | Error::Contract(_) => EXIT_RUNTIME,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("atomtune-exp-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    fn cfg(command: Command, text: &str, out: &Path) -> ExperimentConfig {
        ExperimentConfig::from_params(command, FlatConfig::parse(text).unwrap(), out.to_path_buf(), None).unwrap()
    }

    #[test]
    fn inverted_band_is_a_config_error_before_output() {
        let out = tmp("inverted");
        let err = execute(&cfg(Command::GenData, "freq_band = 30..20\n", &out)).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        assert!(!out.exists());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let out = tmp("unknown");
        let err = execute(&cfg(Command::Analyze(AnalyzeKind::Cost), "c_in = 4\nbogus = 1\n", &out)).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn empty_generation_writes_only_the_manifest() {
        let out = tmp("empty");
        let o = execute(&cfg(Command::GenData, "count = 0\n", &out)).unwrap();
        assert!(o.failure.is_none());
        assert!(o.manifest.files.is_empty());
        assert!(out.join(MANIFEST_FILE).is_file());
        std::fs::remove_dir_all(out).unwrap();
    }

    #[test]
    fn missing_snapshot_names_the_path() {
        let out = tmp("missing");
        let err = execute(&cfg(Command::Run, "stage = finetune_signal\nsnapshot = /nonexistent/run\n", &out)).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_IO);
        assert!(err.to_string().contains("/nonexistent/run"));
    }

    #[test]
    fn seed_override_is_recorded() {
        let c = ExperimentConfig::from_params(Command::Run, FlatConfig::parse("seed = 1\n").unwrap(), "x".into(), Some(9)).unwrap();
        assert_eq!(params::seed(&c.params).unwrap(), 9);
    }
}
