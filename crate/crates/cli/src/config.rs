//! The optional `avq.toml` shared by all subcommands. Flags override it.
//!
//! ```toml
//! [paths]
//! catalog = "catalog.csv"
//! store = "study.jsonl"
//! exports = "exports"
//!
//! [server]
//! bind = "127.0.0.1:8080"
//! admin_token_var = "AVQ_ADMIN_TOKEN"
//!
//! [thresholds]
//! srocc_min = 0.5
//! std_min = 0.5
//!
//! [sampler]
//! alpha = 0.3
//! bins = 8
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use avq_core::domain::FilterThresholds;
use avq_core::sampler::SamplingPlan;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub catalog: PathBuf,
    pub store: PathBuf,
    pub exports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            catalog: "catalog.csv".into(),
            store: "study.jsonl".into(),
            exports: "exports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    pub admin_token_var: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            bind: "127.0.0.1:8080".into(),
            admin_token_var: avq_server::DEFAULT_ADMIN_TOKEN_VAR.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub alpha: f64,
    pub bins: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let plan = SamplingPlan::default();
        SamplerSection {
            alpha: plan.alpha,
            bins: plan.n_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub paths: Paths,
    pub server: ServerSection,
    pub thresholds: FilterThresholds,
    pub sampler: SamplerSection,
}

impl CliConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
