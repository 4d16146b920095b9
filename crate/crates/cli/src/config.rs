//! Run configuration: a flat JSON object with dotted keys. Every key has a
//! default, so `{}` is a valid configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use cba_core::cba::OrchestratorConfig;
use cba_core::engine::EngineParams;
use cba_core::latency::LatencyParams;
use cba_core::rsa::{CiMode, Policy, RsaParams};
use cba_core::topology::{load_topology, BackgroundTrafficModel, Network, NodeId, SpectrumConfig};
use cba_core::workload::{ModelProfile, ScheduleKind};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A configuration problem tied to the key that caused it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl From<cba_core::Error> for ConfigError {
    fn from(e: cba_core::Error) -> Self {
        use cba_core::Error;
        match e {
            Error::InvalidParameter { key, reason } => ConfigError::new(key, reason),
            Error::UnknownProfile(name) => {
                ConfigError::new("grid.models", format!("unknown model profile `{name}`"))
            }
            Error::TooManyStages { n_layers, stages } => ConfigError::new(
                "p",
                format!("{stages} stages exceed the model's {n_layers} layers"),
            ),
            other => ConfigError::new("topology.path", other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPreset {
    Off,
    Loaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSON topology file; the built-in NSFNET when absent.
    #[serde(rename = "topology.path")]
    pub topology_path: Option<PathBuf>,
    #[serde(rename = "topology.fs_total")]
    pub fs_total: usize,
    #[serde(rename = "topology.slot_width_ghz")]
    pub slot_width_ghz: f64,
    #[serde(rename = "topology.per_direction")]
    pub per_direction: bool,

    #[serde(rename = "run.policy")]
    pub policy: Policy,
    #[serde(rename = "run.schedule")]
    pub schedule: ScheduleKind,
    #[serde(rename = "run.model")]
    pub model: String,

    #[serde(rename = "grid.policies")]
    pub policies: Vec<Policy>,
    #[serde(rename = "grid.schedules")]
    pub schedules: Vec<ScheduleKind>,
    #[serde(rename = "grid.models")]
    pub models: Vec<String>,
    #[serde(rename = "grid.microbatches")]
    pub microbatches: Vec<usize>,
    pub seeds: Vec<u64>,

    /// Pipeline stages.
    pub p: usize,
    /// Candidate datacenter nodes; placement draws from the first `n_dcs`.
    #[serde(rename = "placement.dcs")]
    pub dcs: Vec<String>,
    #[serde(rename = "placement.n_dcs")]
    pub n_dcs: usize,

    /// An explicit profile, usable by name in `run.model` / `grid.models`.
    #[serde(rename = "profile.name")]
    pub profile_name: Option<String>,
    #[serde(rename = "profile.n_layers")]
    pub profile_n_layers: usize,
    #[serde(rename = "profile.fwd_time_per_layer_s")]
    pub profile_fwd_s: f64,
    #[serde(rename = "profile.bwd_time_per_layer_s")]
    pub profile_bwd_s: f64,
    #[serde(rename = "profile.msg_bytes_per_microbatch")]
    pub profile_msg_bytes: u64,

    #[serde(rename = "latency.prop_s_per_km")]
    pub prop_s_per_km: f64,
    #[serde(rename = "latency.per_hop_overhead_s")]
    pub per_hop_overhead_s: f64,
    #[serde(rename = "latency.fs_rate_bps")]
    pub fs_rate_bps: f64,
    #[serde(rename = "latency.intra_dc_latency_s")]
    pub intra_dc_latency_s: f64,
    #[serde(rename = "latency.intra_dc_rate_bps")]
    pub intra_dc_rate_bps: f64,
    #[serde(rename = "latency.queue_penalty_per_conflict_s")]
    pub queue_penalty_per_conflict_s: f64,

    #[serde(rename = "rsa.k")]
    pub k: usize,
    #[serde(rename = "rsa.ci_mode")]
    pub ci_mode: CiMode,
    #[serde(rename = "rsa.ci_per_link")]
    pub ci_per_link: bool,

    #[serde(rename = "cba.base_fs")]
    pub base_fs: usize,
    #[serde(rename = "cba.fs_max")]
    pub fs_max: usize,
    #[serde(rename = "cba.boost_factor")]
    pub boost_factor: f64,
    #[serde(rename = "cba.blocking_threshold")]
    pub blocking_threshold: f64,
    #[serde(rename = "cba.epsilon_s")]
    pub epsilon_s: f64,
    #[serde(rename = "cba.boost_outgoing")]
    pub boost_outgoing: bool,
    #[serde(rename = "cba.n_iterations")]
    pub n_iterations: usize,
    #[serde(rename = "cba.warmup_iterations")]
    pub warmup_iterations: usize,

    #[serde(rename = "engine.max_retries")]
    pub max_retries: usize,
    #[serde(rename = "engine.retry_backoff_s")]
    pub retry_backoff_s: f64,
    #[serde(rename = "engine.fallback_penalty")]
    pub fallback_penalty: f64,

    #[serde(rename = "background.preset")]
    pub background: BackgroundPreset,
    /// Overrides of the preset's fields.
    #[serde(rename = "background.arrival_rate_per_s")]
    pub bg_arrival_rate_per_s: Option<f64>,
    #[serde(rename = "background.mean_hold_s")]
    pub bg_mean_hold_s: Option<f64>,
    #[serde(rename = "background.fs_demand_min")]
    pub bg_fs_demand_min: Option<usize>,
    #[serde(rename = "background.fs_demand_max")]
    pub bg_fs_demand_max: Option<usize>,
    /// Simulated background time before the first iteration.
    #[serde(rename = "background.warmup_s")]
    pub bg_warmup_s: f64,

    /// Write every run's event log under the output directory.
    #[serde(rename = "output.event_logs")]
    pub event_logs: bool,
}

/// Six of the fourteen NSFNET nodes, spread across the map.
pub const DEFAULT_DCS: [&str; 6] = ["CA1", "CO", "TX", "IL", "GA", "NY"];

impl Default for RunConfig {
    fn default() -> Self {
        let spectrum = SpectrumConfig::default();
        let latency = LatencyParams::default();
        let rsa = RsaParams::default();
        let engine = EngineParams::default();
        let orch = OrchestratorConfig::default();
        Self {
            topology_path: None,
            fs_total: spectrum.fs_total,
            slot_width_ghz: spectrum.slot_width_ghz,
            per_direction: spectrum.per_direction,
            policy: Policy::Cba,
            schedule: ScheduleKind::Gpipe,
            model: ModelProfile::PRESETS[0].to_string(),
            policies: Policy::ALL.to_vec(),
            schedules: ScheduleKind::ALL.to_vec(),
            models: ModelProfile::PRESETS.iter().map(|s| s.to_string()).collect(),
            microbatches: vec![16, 32, 64, 128],
            seeds: vec![1, 2, 3],
            p: 8,
            dcs: DEFAULT_DCS.iter().map(|s| s.to_string()).collect(),
            n_dcs: 6,
            profile_name: None,
            profile_n_layers: 32,
            profile_fwd_s: 2.0e-3,
            profile_bwd_s: 4.0e-3,
            profile_msg_bytes: 16 << 20,
            prop_s_per_km: latency.prop_s_per_km,
            per_hop_overhead_s: latency.per_hop_overhead_s,
            fs_rate_bps: latency.fs_rate_bps,
            intra_dc_latency_s: latency.intra_dc_latency_s,
            intra_dc_rate_bps: latency.intra_dc_rate_bps,
            queue_penalty_per_conflict_s: latency.queue_penalty_per_conflict_s,
            k: rsa.k,
            ci_mode: rsa.ci_mode,
            ci_per_link: rsa.ci_per_link,
            base_fs: engine.base_fs,
            fs_max: engine.fs_max,
            boost_factor: orch.boost_factor,
            blocking_threshold: orch.blocking_threshold,
            epsilon_s: orch.epsilon_s,
            boost_outgoing: orch.boost_outgoing,
            n_iterations: orch.n_iterations,
            warmup_iterations: orch.warmup_iterations,
            max_retries: engine.max_retries,
            retry_backoff_s: engine.retry_backoff_s,
            fallback_penalty: engine.fallback_penalty,
            background: BackgroundPreset::Off,
            bg_arrival_rate_per_s: None,
            bg_mean_hold_s: None,
            bg_fs_demand_min: None,
            bg_fs_demand_max: None,
            bg_warmup_s: 30.0,
            event_logs: false,
        }
    }
}

/// Parses `KEY=VALUE`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::new(s, "override must look like KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

impl RunConfig {
    /// Parses a config document and applies `overrides` on top.
    pub fn from_json(text: &str, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut map: Map<String, Value> = if text.trim().is_empty() {
            Map::new()
        } else {
            match serde_json::from_str(text) {
                Ok(Value::Object(map)) => map,
                Ok(_) => return Err(ConfigError::new("<root>", "config must be a JSON object")),
                Err(e) => return Err(ConfigError::new("<root>", e.to_string())),
            }
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        let known: Vec<String> = match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(defaults)) => defaults.keys().cloned().collect(),
            _ => unreachable!("config serialises to an object"),
        };
        for key in map.keys() {
            if !known.contains(key) {
                return Err(ConfigError::new(key, "unknown key"));
            }
        }
        // Deserialize key by key so type errors name their key.
        let mut cfg = serde_json::to_value(RunConfig::default()).unwrap();
        let obj = cfg.as_object_mut().unwrap();
        for (k, v) in map {
            let mut probe = obj.clone();
            probe.insert(k.clone(), v.clone());
            serde_json::from_value::<RunConfig>(Value::Object(probe))
                .map_err(|e| ConfigError::new(&k, e.to_string()))?;
            obj.insert(k, v);
        }
        let cfg: RunConfig = serde_json::from_value(cfg).map_err(|e| ConfigError::new("<root>", e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).unwrap();
        // Sorted keys for a stable rendering.
        let sorted: BTreeMap<String, Value> = value
            .as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        serde_json::to_string_pretty(&sorted).unwrap()
    }

    pub fn spectrum(&self) -> SpectrumConfig {
        SpectrumConfig {
            fs_total: self.fs_total,
            slot_width_ghz: self.slot_width_ghz,
            per_direction: self.per_direction,
        }
    }

    pub fn latency(&self) -> LatencyParams {
        LatencyParams {
            prop_s_per_km: self.prop_s_per_km,
            per_hop_overhead_s: self.per_hop_overhead_s,
            fs_rate_bps: self.fs_rate_bps,
            intra_dc_latency_s: self.intra_dc_latency_s,
            intra_dc_rate_bps: self.intra_dc_rate_bps,
            queue_penalty_per_conflict_s: self.queue_penalty_per_conflict_s,
        }
    }

    pub fn rsa(&self) -> RsaParams {
        RsaParams {
            k: self.k,
            ci_mode: self.ci_mode,
            ci_per_link: self.ci_per_link,
        }
    }

    pub fn engine(&self) -> EngineParams {
        EngineParams {
            base_fs: self.base_fs,
            fs_max: self.fs_max,
            max_retries: self.max_retries,
            retry_backoff_s: self.retry_backoff_s,
            fallback_penalty: self.fallback_penalty,
        }
    }

    pub fn orchestrator(&self) -> OrchestratorConfig {
        OrchestratorConfig {
            n_iterations: self.n_iterations,
            warmup_iterations: self.warmup_iterations,
            boost_factor: self.boost_factor,
            blocking_threshold: self.blocking_threshold,
            epsilon_s: self.epsilon_s,
            boost_outgoing: self.boost_outgoing,
            background_warmup_s: if self.background == BackgroundPreset::Off {
                0.0
            } else {
                self.bg_warmup_s
            },
        }
    }

    /// Background model for one stream seed, or `None` when disabled.
    pub fn background_model(&self, rng_seed: u64) -> Option<BackgroundTrafficModel> {
        let base = match self.background {
            BackgroundPreset::Off => return None,
            BackgroundPreset::Loaded => BackgroundTrafficModel::loaded(rng_seed),
        };
        Some(BackgroundTrafficModel {
            arrival_rate_per_s: self.bg_arrival_rate_per_s.unwrap_or(base.arrival_rate_per_s),
            mean_hold_s: self.bg_mean_hold_s.unwrap_or(base.mean_hold_s),
            fs_demand_min: self.bg_fs_demand_min.unwrap_or(base.fs_demand_min),
            fs_demand_max: self.bg_fs_demand_max.unwrap_or(base.fs_demand_max),
            rng_seed,
        })
    }

    /// The explicit profile, if `profile.name` is set.
    pub fn explicit_profile(&self) -> Option<ModelProfile> {
        self.profile_name.as_ref().map(|name| ModelProfile {
            name: name.clone(),
            n_layers: self.profile_n_layers,
            fwd_time_per_layer_s: self.profile_fwd_s,
            bwd_time_per_layer_s: self.profile_bwd_s,
            msg_bytes_per_microbatch: self.profile_msg_bytes,
        })
    }

    pub fn profile(&self, name: &str) -> Result<ModelProfile, ConfigError> {
        match self.explicit_profile() {
            Some(p) if p.name == name => {
                p.validate()?;
                Ok(p)
            }
            _ => Ok(ModelProfile::preset(name)?),
        }
    }

    pub fn network(&self) -> Result<Network, ConfigError> {
        let net = match &self.topology_path {
            None => Network::nsfnet(self.spectrum())?,
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError::new("topology.path", format!("{}: {e}", path.display())))?;
                load_topology(&text, self.spectrum())?
            }
        };
        Ok(net)
    }

    /// Datacenter node ids available for placement.
    pub fn dc_nodes(&self, net: &Network) -> Result<Vec<NodeId>, ConfigError> {
        let mut ids = Vec::with_capacity(self.dcs.len());
        for name in &self.dcs {
            let id = net
                .node_id(name)
                .ok_or_else(|| ConfigError::new("placement.dcs", format!("unknown node `{name}`")))?;
            if ids.contains(&id) {
                return Err(ConfigError::new("placement.dcs", format!("`{name}` listed twice")));
            }
            ids.push(id);
        }
        if self.n_dcs == 0 || self.n_dcs > ids.len() {
            return Err(ConfigError::new(
                "placement.n_dcs",
                format!("must lie in [1, {}] (length of placement.dcs)", ids.len()),
            ));
        }
        ids.truncate(self.n_dcs);
        Ok(ids)
    }

    /// Checks every key before any simulation runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let net = self.network()?;
        self.dc_nodes(&net)?;
        if self.p == 0 {
            return Err(ConfigError::new("p", "at least one stage is required"));
        }
        if self.microbatches.is_empty() || self.microbatches.contains(&0) {
            return Err(ConfigError::new("grid.microbatches", "needs positive micro-batch counts"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        if self.policies.is_empty() {
            return Err(ConfigError::new("grid.policies", "at least one policy is required"));
        }
        if self.schedules.is_empty() {
            return Err(ConfigError::new("grid.schedules", "at least one schedule is required"));
        }
        if self.models.is_empty() {
            return Err(ConfigError::new("grid.models", "at least one model is required"));
        }
        for (key, list) in [("grid.policies", dup(&self.policies)), ("grid.schedules", dup(&self.schedules))] {
            if list {
                return Err(ConfigError::new(key, "duplicate entries"));
            }
        }
        if dup(&self.models) || dup(&self.seeds) || dup(&self.microbatches) {
            return Err(ConfigError::new("grid", "duplicate entries in models, seeds or micro-batches"));
        }
        let mut names = self.models.clone();
        names.push(self.model.clone());
        for name in &names {
            let profile = self.profile(name).map_err(|e| {
                if name == &self.model && !self.models.contains(name) {
                    ConfigError::new("run.model", e.message)
                } else {
                    e
                }
            })?;
            if self.p > profile.n_layers {
                return Err(ConfigError::new(
                    "p",
                    format!("{} stages exceed the {} layers of `{name}`", self.p, profile.n_layers),
                ));
            }
        }
        self.latency().validate()?;
        if self.k == 0 {
            return Err(ConfigError::new("rsa.k", "must be at least 1"));
        }
        self.engine().validate(self.fs_total)?;
        self.orchestrator().validate()?;
        if let Some(model) = self.background_model(0) {
            model.validate(self.fs_total)?;
        } else if self.bg_arrival_rate_per_s.is_some()
            || self.bg_mean_hold_s.is_some()
            || self.bg_fs_demand_min.is_some()
            || self.bg_fs_demand_max.is_some()
        {
            return Err(ConfigError::new(
                "background.preset",
                "background overrides need the `loaded` preset",
            ));
        }
        if !(self.bg_warmup_s >= 0.0 && self.bg_warmup_s.is_finite()) {
            return Err(ConfigError::new("background.warmup_s", "must be nonnegative"));
        }
        Ok(())
    }
}

fn dup<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid() {
        let cfg = RunConfig::from_json("{}", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json("", &[]).unwrap(), cfg);
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let cfg = RunConfig::from_json(
            r#"{"latency.fs_rate_bps": 1e11, "run.schedule": "1f1b", "seeds": [4]}"#,
            &[parse_override("seeds=[9, 10]").unwrap(), parse_override("run.policy=sd_ff").unwrap()],
        )
        .unwrap();
        assert_eq!(cfg.fs_rate_bps, 1e11);
        assert_eq!(cfg.schedule, ScheduleKind::OneFOneB);
        assert_eq!(cfg.seeds, vec![9, 10]);
        assert_eq!(cfg.policy, Policy::SdFf);
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |json: &str| RunConfig::from_json(json, &[]).and_then(|c| c.validate()).unwrap_err().key;
        assert_eq!(key_of(r#"{"p": 0}"#), "p");
        assert_eq!(key_of(r#"{"p": 40}"#), "p");
        assert_eq!(key_of(r#"{"latency.fs_rate_bps": -1}"#), "latency.fs_rate_bps");
        assert_eq!(key_of(r#"{"rsa.k": "five"}"#), "rsa.k");
        assert_eq!(key_of(r#"{"bogus.key": 1}"#), "bogus.key");
        assert_eq!(key_of(r#"{"placement.dcs": ["CA1", "XX"]}"#), "placement.dcs");
        assert_eq!(key_of(r#"{"cba.fs_max": 200}"#), "cba.fs_max");
        assert_eq!(key_of(r#"{"cba.n_iterations": 1}"#), "cba.n_iterations");
        assert_eq!(key_of(r#"{"run.model": "gpt"}"#), "run.model");
        assert_eq!(
            key_of(r#"{"background.preset": "loaded", "background.fs_demand_max": 100}"#),
            "background.fs_demand_max"
        );
        assert_eq!(key_of(r#"{"background.arrival_rate_per_s": 10}"#), "background.preset");
    }

    #[test]
    fn explicit_profile_is_addressable() {
        let cfg = RunConfig::from_json(
            r#"{"profile.name": "tiny", "profile.n_layers": 8, "grid.models": ["tiny"], "run.model": "tiny"}"#,
            &[],
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.profile("tiny").unwrap().n_layers, 8);
    }

    #[test]
    fn json_rendering_round_trips() {
        let cfg = RunConfig {
            seeds: vec![7],
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&cfg.to_json(), &[]).unwrap(), cfg);
    }
}
