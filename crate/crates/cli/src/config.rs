use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use pricer_core::gateway::{CompletionTarget, MockBehavior, MockTarget, OpenAiClient, OpenAiConfig};
use pricer_core::pricer::PipelineConfig;
use pricer_core::prompting::Templates;
use pricer_core::vecindex::{Embedder, FeatureHashEmbedder, RemoteEmbedder, RemoteEmbedderConfig, DEFAULT_DIMENSION};
use serde::Deserialize;

/// Overrides `gateway.api_key` for OpenAI-compatible endpoints.
pub const API_KEY_ENV: &str = "PRICER_API_KEY";
/// Overrides `embedder.api_key` for remote embedding endpoints.
pub const EMBED_API_KEY_ENV: &str = "PRICER_EMBED_API_KEY";

fn default_mock_model() -> String {
    "mock-median-pricer".into()
}

fn default_behavior() -> MockBehavior {
    MockBehavior::median_pricer()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GatewayConfig {
    Openai(OpenAiConfig),
    Mock {
        #[serde(default = "default_mock_model")]
        model: String,
        #[serde(default = "default_behavior")]
        behavior: MockBehavior,
    },
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig::Mock {
            model: default_mock_model(),
            behavior: default_behavior(),
        }
    }
}

impl GatewayConfig {
    pub fn build(&self) -> Result<Arc<dyn CompletionTarget>> {
        Ok(match self {
            GatewayConfig::Openai(cfg) => {
                let mut cfg = cfg.clone();
                if let Ok(key) = std::env::var(API_KEY_ENV) {
                    cfg.api_key = Some(key);
                }
                Arc::new(OpenAiClient::new(cfg).context("building chat client")?)
            }
            GatewayConfig::Mock { model, behavior } => Arc::new(MockTarget::new(model.clone(), behavior.clone())),
        })
    }
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderConfig {
    Hash {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Remote(RemoteEmbedderConfig),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder>> {
        Ok(match self {
            EmbedderConfig::Hash { dimension } => Arc::new(FeatureHashEmbedder::new(*dimension)),
            EmbedderConfig::Remote(cfg) => {
                let mut cfg = cfg.clone();
                if let Ok(key) = std::env::var(EMBED_API_KEY_ENV) {
                    cfg.api_key = Some(key);
                }
                Arc::new(RemoteEmbedder::new(cfg).context("building embedding client")?)
            }
        })
    }
}

fn default_refresh_secs() -> u64 {
    3600
}

#[derive(Debug, Clone, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_refresh_secs")]
    pub refresh_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            refresh_secs: default_refresh_secs(),
        }
    }
}

/// Contents of the TOML config file. Every section is optional except that
/// pricing commands need `pipeline.theta_h` (or `--theta`).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub pipeline: Option<PipelineConfig>,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub service: ServiceConfig,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Pipeline settings with command-line overrides applied.
    pub fn pipeline(&self, theta: Option<f64>, k: Option<usize>) -> Result<PipelineConfig> {
        let mut p = match (&self.pipeline, theta) {
            (Some(p), _) => p.clone(),
            (None, Some(t)) => PipelineConfig::new(t),
            (None, None) => bail!("no entropy threshold: set pipeline.theta_h in the config or pass --theta"),
        };
        if let Some(t) = theta {
            p.theta_h = t;
        }
        if let Some(k) = k {
            p.k = k;
        }
        Ok(p)
    }

    pub fn templates(&self) -> Result<Templates> {
        match &self.templates_dir {
            Some(dir) => Templates::from_dir(dir).with_context(|| format!("loading templates from {}", dir.display())),
            None => Ok(Templates::default()),
        }
    }
}
