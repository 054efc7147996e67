//! Scenario configuration: a flat JSON object whose keys may be overridden
//! from the environment as `VODSIM_<KEY>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const ENV_PREFIX: &str = "VODSIM_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Chaining,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Chaining => "chaining",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chaining" => Ok(Mode::Chaining),
            "baseline" => Ok(Mode::Baseline),
            other => Err(format!("unknown mode `{other}` (expected chaining or baseline)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub mode: Mode,
    pub proxies: u32,
    pub clients_per_proxy: u32,
    pub catalog_size: u32,
    pub zipf_skew: f64,
    /// Requests per hour at each proxy.
    pub lambda: f64,
    pub duration_hours: f64,
    /// Inclusive range of video lengths in minutes.
    pub video_minutes: [u32; 2],
    /// Units per hour.
    pub playback_rate: u32,
    /// Link bandwidths in Mbps.
    pub bw_s_p: f64,
    pub bw_p_c: f64,
    pub bw_c_c: f64,
    /// Bridges bandwidth to stream slots:
    /// `slots = floor(Mbps * units_per_megabit * 60 / playback_rate)`.
    /// The default gives 10 streams on a 2 Mbps proxy-client link and one on
    /// a 256 kbps client uplink.
    pub units_per_megabit: f64,
    /// Inclusive one-way delay ranges in milliseconds.
    pub delay_s_p: [u64; 2],
    pub delay_p_c: [u64; 2],
    pub delay_c_c: [u64; 2],
    /// Storage costs per minute at the central server and at a proxy.
    pub c_cms: f64,
    pub c_ps: f64,
    /// Proxy cache size in minutes; derived from the cost ratio when absent.
    pub b: Option<i64>,
    pub x_min: f64,
    pub x_max: f64,
    pub window_minutes: u32,
    pub d_max: u32,
    pub strict_buffer_reject: bool,
    pub count_miss_prefix_sp: bool,
    /// Place prefixes in rank order before the first request.
    pub prefill_cache: bool,
    /// Chance that a viewer abandons a video at a uniform point in it.
    pub early_departure_prob: f64,
    pub tick_minutes: u32,
    pub audit: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: Mode::Chaining,
            proxies: 6,
            clients_per_proxy: 50,
            catalog_size: 100,
            zipf_skew: 0.729,
            lambda: 44.0,
            duration_hours: 24.0,
            video_minutes: [120, 180],
            playback_rate: 200,
            bw_s_p: 2000.0,
            bw_p_c: 2.0,
            bw_c_c: 0.256,
            units_per_megabit: 50.0 / 3.0,
            delay_s_p: [480, 640],
            delay_p_c: [120, 180],
            delay_c_c: [60, 90],
            c_cms: 1000.0,
            c_ps: 200.0,
            b: None,
            x_min: 0.05,
            x_max: 0.5,
            window_minutes: 60,
            d_max: 4,
            strict_buffer_reject: false,
            count_miss_prefix_sp: true,
            prefill_cache: true,
            early_departure_prob: 0.1,
            tick_minutes: 1,
            audit: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("config is not a JSON object: {0}")]
    NotAnObject(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

impl ScenarioConfig {
    pub fn known_keys() -> Vec<String> {
        match serde_json::to_value(ScenarioConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    /// Parses JSON text, applies overrides, and validates. Empty text means
    /// all defaults.
    pub fn from_json_with_env<I>(text: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut obj = if text.trim().is_empty() {
            Map::new()
        } else {
            match serde_json::from_str::<Value>(text) {
                Ok(Value::Object(m)) => m,
                Ok(other) => return Err(ConfigError::NotAnObject(other.to_string())),
                Err(e) => return Err(ConfigError::NotAnObject(e.to_string())),
            }
        };
        let keys = Self::known_keys();
        for (name, raw) in env {
            let Some(suffix) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = suffix.to_ascii_lowercase();
            if !keys.contains(&key) {
                continue;
            }
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            obj.insert(key, value);
        }
        Self::from_object(obj)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Self::from_json_with_env(text, std::iter::empty())
    }

    /// Reads a config file with `VODSIM_*` overrides from the process
    /// environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_with_env(&text, std::env::vars())
    }

    fn from_object(obj: Map<String, Value>) -> Result<Self, ConfigError> {
        let keys = Self::known_keys();
        if let Some(k) = obj.keys().find(|k| !keys.contains(k)) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        // Deserialize key by key so a type error names its key.
        let Value::Object(mut base) =
            serde_json::to_value(ScenarioConfig::default()).expect("default serializes")
        else {
            unreachable!()
        };
        for (k, v) in obj {
            let mut probe = base.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = serde_json::from_value::<ScenarioConfig>(Value::Object(probe)) {
                return Err(invalid(&k, e.to_string()));
            }
            base.insert(k, v);
        }
        let cfg: ScenarioConfig =
            serde_json::from_value(Value::Object(base)).map_err(|e| invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive_counts = [
            ("proxies", self.proxies),
            ("clients_per_proxy", self.clients_per_proxy),
            ("catalog_size", self.catalog_size),
            ("playback_rate", self.playback_rate),
            ("window_minutes", self.window_minutes),
            ("d_max", self.d_max),
            ("tick_minutes", self.tick_minutes),
        ];
        for (k, v) in positive_counts {
            if v == 0 {
                return Err(invalid(k, "must be at least 1"));
            }
        }
        let positive_reals = [
            ("lambda", self.lambda),
            ("duration_hours", self.duration_hours),
            ("bw_s_p", self.bw_s_p),
            ("bw_p_c", self.bw_p_c),
            ("bw_c_c", self.bw_c_c),
            ("units_per_megabit", self.units_per_megabit),
            ("c_cms", self.c_cms),
            ("c_ps", self.c_ps),
        ];
        for (k, v) in positive_reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(k, "must be a finite number above zero"));
            }
        }
        if !(self.zipf_skew.is_finite() && self.zipf_skew >= 0.0) {
            return Err(invalid("zipf_skew", "must be a finite number, at least zero"));
        }
        let [lo, hi] = self.video_minutes;
        if lo < 2 || lo > hi {
            return Err(invalid("video_minutes", "needs 2 <= min <= max"));
        }
        for (k, [lo, hi]) in [
            ("delay_s_p", self.delay_s_p),
            ("delay_p_c", self.delay_p_c),
            ("delay_c_c", self.delay_c_c),
        ] {
            if lo > hi {
                return Err(invalid(k, "lower bound exceeds upper bound"));
            }
        }
        if let Some(b) = self.b {
            if b <= 0 {
                return Err(invalid("b", "cache size must be positive"));
            }
        }
        if !(self.x_min > 0.0 && self.x_min < 1.0) {
            return Err(invalid("x_min", "must lie strictly between 0 and 1"));
        }
        if !(self.x_max > 0.0 && self.x_max < 1.0) || self.x_max < self.x_min {
            return Err(invalid("x_max", "must lie in [x_min, 1)"));
        }
        if !(0.0..=1.0).contains(&self.early_departure_prob) {
            return Err(invalid("early_departure_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Proxy cache size in minutes.
    pub fn cache_minutes(&self, catalog_minutes: u64) -> u32 {
        match self.b {
            Some(b) => b as u32,
            None => ((catalog_minutes as f64 * self.c_ps / self.c_cms).floor() as u32).max(1),
        }
    }

    pub fn duration_ms(&self) -> u64 {
        (self.duration_hours * 3_600_000.0).round() as u64
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
