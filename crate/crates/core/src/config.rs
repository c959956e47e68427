//! Configuration shared by the CLI and the service.
//!
//! Values are layered, later layers winning: built-in defaults, a TOML file,
//! `PROMPTSMITH_*` environment variables (`__` separates nesting levels, so
//! `PROMPTSMITH_SERVICE__PORT=9000` sets `service.port`), then command-line
//! overrides given as dotted keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::edit::{BackendRegistry, CommandBackend, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gateway::mock::{gateway_from_fixture, mock_gateway, MockFixture, DEFAULT_MOCK_SEED};
use crate::gateway::{remote, Gateway, GatewayBackend};
use crate::injector::{InjectConfig, DEFAULT_CAPTION_TOKENS};
use crate::optimizer::{InjectionLocation, OptimizerConfig};

pub const ENV_PREFIX: &str = "PROMPTSMITH_";
/// Reserved for the log filter, not a config key.
pub const LOG_ENV: &str = "PROMPTSMITH_LOG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Single source of run randomness.
    pub seed: u64,
    pub gateway: GatewayConfig,
    pub caption: CaptionConfig,
    pub optimizer: OptimizerSettings,
    pub sampler: SamplerConfig,
    pub edit: EditSettings,
    pub backends: BTreeMap<String, BackendSpec>,
    pub bench: BenchSettings,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: GatewayBackend,
    /// Model server for `clip_blip` and `custom`.
    pub url: Option<String>,
    /// Weights of the mock models; independent of the run seed.
    pub mock_seed: u64,
    /// Mock fixture file to load instead of generating one.
    pub fixture: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: GatewayBackend::Mock,
            url: None,
            mock_seed: DEFAULT_MOCK_SEED,
            fixture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    pub max_tokens: usize,
    pub continuation_budget: Option<usize>,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_CAPTION_TOKENS,
            continuation_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub num_tokens: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub injection_location: InjectionLocation,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            num_tokens: d.num_tokens,
            steps: d.steps,
            learning_rate: d.learning_rate,
            injection_location: d.injection_location,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSettings {
    pub backend: String,
}

impl Default for EditSettings {
    fn default() -> Self {
        Self {
            backend: "mock_blend".into(),
        }
    }
}

/// An external editing backend run as a process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub entrypoint: String,
    /// Concurrent invocations allowed.
    #[serde(default = "one")]
    pub pool_size: usize,
    /// Whether `sdedit_t` applies; defaults to true only for `sdedit`.
    #[serde(default)]
    pub uses_strength: Option<bool>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// 0 picks the core count.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub queue_depth: usize,
    pub data_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            queue_depth: 4,
            data_dir: PathBuf::from("promptsmith-data"),
        }
    }
}

/// Recursively merges `over` into `base`; tables merge, everything else is
/// replaced.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a scalar the way it would read on the right of `key = ` in TOML,
/// falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// A single-entry table holding `value` at a dotted path.
pub fn nested(path: &[&str], value: Value) -> Result<Table> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty configuration key".into()))?;
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed configuration key `{}`", path.join("."))));
    }
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parents.iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    Ok(t)
}

/// Table built from `PROMPTSMITH_*` variables.
pub fn env_layer<I: IntoIterator<Item = (String, String)>>(vars: I) -> Result<Table> {
    let mut out = Table::new();
    for (k, v) in vars {
        if k == LOG_ENV {
            continue;
        }
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
        let key = rest.to_ascii_lowercase();
        let path: Vec<&str> = key.split("__").collect();
        merge(&mut out, nested(&path, parse_value(&v))?);
    }
    Ok(out)
}

/// Table built from `key=value` overrides with dotted keys.
pub fn override_layer<S: AsRef<str>>(overrides: &[S]) -> Result<Table> {
    let mut out = Table::new();
    for o in overrides {
        let o = o.as_ref();
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let path: Vec<&str> = k.trim().split('.').collect();
        merge(&mut out, nested(&path, parse_value(v.trim()))?);
    }
    Ok(out)
}

impl Config {
    /// Applies the four layers. `file` may be absent.
    pub fn load<I, S>(file: Option<&Path>, env: I, overrides: &[S]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
        S: AsRef<str>,
    {
        let mut tree = Value::try_from(Config::default())
            .map_err(|e| Error::Config(e.to_string()))?
            .as_table()
            .cloned()
            .expect("config serializes to a table");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let t: Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, t);
        }
        merge(&mut tree, env_layer(env)?);
        merge(&mut tree, override_layer(overrides)?);
        let cfg: Config = Value::Table(tree).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.caption.max_tokens == 0 {
            return Err(Error::Config("caption.max_tokens must be positive".into()));
        }
        self.optimizer(self.seed).validate()?;
        self.sampler.validate()?;
        if self.service.queue_depth == 0 {
            return Err(Error::Config("service.queue_depth must be positive".into()));
        }
        for (id, spec) in &self.backends {
            if spec.pool_size == 0 {
                return Err(Error::Config(format!("backends.{id}.pool_size must be positive")));
            }
        }
        Ok(())
    }

    pub fn inject(&self) -> InjectConfig {
        InjectConfig {
            caption_max_tokens: self.caption.max_tokens,
            continuation_budget: self.caption.continuation_budget,
            ..Default::default()
        }
    }

    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            num_tokens: self.optimizer.num_tokens,
            steps: self.optimizer.steps,
            learning_rate: self.optimizer.learning_rate,
            injection_location: self.optimizer.injection_location,
            seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            backend: self.edit.backend.clone(),
            inject: self.inject(),
            optimizer: self.optimizer(self.seed),
            sampler: self.sampler.clone(),
            workers: self.bench.workers,
        }
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let g = &self.gateway;
        match g.backend {
            GatewayBackend::Mock => match &g.fixture {
                Some(path) => gateway_from_fixture(&MockFixture::load(path)?),
                None => Ok(mock_gateway(g.mock_seed)),
            },
            backend => {
                let url = g.url.as_deref().ok_or_else(|| {
                    Error::Config(format!("gateway `{backend}` needs gateway.url pointing at its model server"))
                })?;
                remote::connect(url, &backend.to_string())
            }
        }
    }

    /// Built-in backends plus one process backend per `backends.<id>`.
    pub fn registry(&self, gw: &Gateway) -> Result<BackendRegistry> {
        let mut reg = BackendRegistry::with_builtins(gw);
        for (id, spec) in &self.backends {
            let mut b = CommandBackend::new(id, &spec.entrypoint)?;
            if let Some(s) = spec.uses_strength {
                b = b.with_strength(s);
            }
            reg.register(Arc::new(b), spec.pool_size);
        }
        Ok(reg)
    }
}
