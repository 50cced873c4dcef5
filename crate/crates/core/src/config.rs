//! Flat key-value run configuration.
//!
//! Format: one `key = value` per line, `#` comments, later assignments win.
//! CLI overrides use the same `key=value` syntax. The canonical form
//! (sorted keys) feeds the config hash and the config-echo file, so any
//! artifact can be reproduced from its echo plus the input data.
//!
//! Schema (all keys optional unless a command requires them):
//!
//! ```text
//! kind = hafas                  # architecture (train)
//! architectures = helm,hfa,...  # sweep list, or "all"
//! alpha / beta / delta_w / gp_weight        # loss weights
//! epochs / batch_size / learning_rate
//! hidden_width / feature_dim
//! elm.hidden / elm.lambda / elm.activation  # sigmoid | relu
//! helm.sizes = 50,50            # AE widths then one-class width
//! helm.lambdas = 1e-3,1e-3
//! threshold.gamma / threshold.p
//! vae.mean_inference = true
//! split.target_train_rows | split.target_train_seconds
//! split.source_train_rows | split.source_train_seconds   # absent = full span
//! split.validation_fraction = 0.06
//! split.blackout_rows | split.blackout_seconds
//! normalization = per-unit | pooled
//! fleet.units / fleet.targets / fleet.rows / fleet.channels
//! fleet.regime_spread / fleet.seasonal_amplitude / fleet.noise_scale
//! fleet.fault_onset_fraction / fleet.fault_channels / fleet.fault_magnitude
//! data.manifest = fleet.csv     # unit CSVs + roles + detection rows
//! pair.target / pair.source     # unit ids (train, select-source)
//! mmd.channel_a / mmd.channel_b # representative channels
//! results = results.jsonl       # report input
//! selection = selection.csv     # report input (optional)
//! seed / workers / out
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::Window;
use crate::elm::{ElmActivation, Threshold};
use crate::error::{Error, Result};
use crate::fleet::{FaultSpec, NormalizationMode, SweepConfig, SyntheticFleetConfig};
use crate::trainer::{ArchitectureKind, ArchitectureSpec};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key '{key}'")))
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a number"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not an integer"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not an integer"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::Config(format!("key '{key}': '{v}' is not a boolean"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// FNV-1a hash of the canonical form, as 16 hex digits.
    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Writes the fully resolved configuration next to a run's artifacts.
    pub fn write_echo(&self, path: &Path) -> Result<()> {
        let mut text = format!("# resolved configuration (hash {})\n", self.hash_hex());
        text.push_str(&self.canonical());
        std::fs::write(path, text)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Typed views used by the CLI
// ---------------------------------------------------------------------------

fn parse_list<T: std::str::FromStr>(cfg: &Config, key: &str, default: &[T]) -> Result<Vec<T>>
where
    T: Clone,
{
    match cfg.get(key) {
        None => Ok(default.to_vec()),
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key '{key}': bad list element '{p}'")))
            })
            .collect(),
    }
}

/// Builds a training spec from config keys; `kind` must be present for a
/// single-pair run, the sweep fills it per run from `architectures`.
pub fn architecture_spec(cfg: &Config, kind: ArchitectureKind) -> Result<ArchitectureSpec> {
    let spec = architecture_spec_unchecked(cfg, kind)?;
    spec.validate()?;
    Ok(spec)
}

fn architecture_spec_unchecked(cfg: &Config, kind: ArchitectureKind) -> Result<ArchitectureSpec> {
    let mut spec = ArchitectureSpec::new(kind);
    spec.weights.alpha = cfg.get_f64("alpha", spec.weights.alpha)?;
    spec.weights.beta = cfg.get_f64("beta", spec.weights.beta)?;
    spec.weights.delta_w = cfg.get_f64("delta_w", spec.weights.delta_w)?;
    spec.weights.gp_weight = cfg.get_f64("gp_weight", spec.weights.gp_weight)?;
    spec.epochs = cfg.get_usize("epochs", spec.epochs)?;
    spec.batch_size = cfg.get_usize("batch_size", spec.batch_size)?;
    spec.learning_rate = cfg.get_f64("learning_rate", spec.learning_rate)?;
    spec.hidden_width = cfg.get_usize("hidden_width", spec.hidden_width)?;
    spec.feature_dim = cfg.get_usize("feature_dim", spec.feature_dim)?;
    spec.elm_hidden = cfg.get_usize("elm.hidden", spec.elm_hidden)?;
    spec.elm_lambda = cfg.get_f64("elm.lambda", spec.elm_lambda)?;
    spec.elm_activation = match cfg.get_str("elm.activation", "sigmoid").as_str() {
        "sigmoid" => ElmActivation::Sigmoid,
        "relu" => ElmActivation::Relu,
        other => {
            return Err(Error::Config(format!(
                "elm.activation must be sigmoid or relu, got '{other}'"
            )))
        }
    };
    spec.helm_sizes = parse_list(cfg, "helm.sizes", &spec.helm_sizes)?;
    spec.helm_lambdas = parse_list(cfg, "helm.lambdas", &spec.helm_lambdas)?;
    spec.threshold_gamma = cfg.get_f64("threshold.gamma", Threshold::DEFAULT_GAMMA)?;
    spec.threshold_p = cfg.get_f64("threshold.p", Threshold::DEFAULT_P)?;
    spec.vae_mean_inference = cfg.get_bool("vae.mean_inference", true)?;
    spec.seed = cfg.get_u64("seed", 0)?;
    Ok(spec)
}

fn window(cfg: &Config, rows_key: &str, seconds_key: &str) -> Result<Option<Window>> {
    match (cfg.get(rows_key), cfg.get(seconds_key)) {
        (Some(_), Some(_)) => Err(Error::Config(format!(
            "set either {rows_key} or {seconds_key}, not both"
        ))),
        (Some(_), None) => Ok(Some(Window::Rows(cfg.get_usize(rows_key, 0)?))),
        (None, Some(_)) => Ok(Some(Window::Seconds(cfg.get_u64(seconds_key, 0)? as i64))),
        (None, None) => Ok(None),
    }
}

pub fn architectures(cfg: &Config) -> Result<Vec<ArchitectureKind>> {
    match cfg.get("architectures") {
        None | Some("all") => Ok(ArchitectureKind::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|s| ArchitectureKind::parse(s.trim()))
            .collect(),
    }
}

pub fn sweep_settings(cfg: &Config) -> Result<SweepConfig> {
    let kinds = architectures(cfg)?;
    // template validation happens per run after kind-specific sanitizing,
    // so one weight grid can drive mixed kinds
    let template = architecture_spec_unchecked(cfg, kinds[0])?;
    let mut sc = SweepConfig::new(kinds, template);
    if let Some(w) = window(cfg, "split.target_train_rows", "split.target_train_seconds")? {
        sc.target_train_window = w;
    }
    sc.source_train_window = window(cfg, "split.source_train_rows", "split.source_train_seconds")?;
    sc.validation_fraction = cfg.get_f64("split.validation_fraction", 0.06)?;
    if let Some(w) = window(cfg, "split.blackout_rows", "split.blackout_seconds")? {
        sc.blackout = w;
    }
    sc.normalization = match cfg.get_str("normalization", "per-unit").as_str() {
        "per-unit" => NormalizationMode::PerUnit,
        "pooled" => NormalizationMode::Pooled,
        other => {
            return Err(Error::Config(format!(
                "normalization must be per-unit or pooled, got '{other}'"
            )))
        }
    };
    sc.master_seed = cfg.get_u64("seed", 0)?;
    sc.workers = cfg.get_usize("workers", 0)?;
    Ok(sc)
}

pub fn fleet_settings(cfg: &Config) -> Result<SyntheticFleetConfig> {
    let d = SyntheticFleetConfig::default();
    Ok(SyntheticFleetConfig {
        units: cfg.get_usize("fleet.units", d.units)?,
        targets: cfg.get_usize("fleet.targets", d.targets)?,
        rows_per_unit: cfg.get_usize("fleet.rows", d.rows_per_unit)?,
        channels: cfg.get_usize("fleet.channels", d.channels)?,
        regime_spread: cfg.get_f64("fleet.regime_spread", d.regime_spread)?,
        seasonal_amplitude: cfg.get_f64("fleet.seasonal_amplitude", d.seasonal_amplitude)?,
        fast_amplitude: cfg.get_f64("fleet.fast_amplitude", d.fast_amplitude)?,
        fast_period_rows: cfg.get_f64("fleet.fast_period_rows", d.fast_period_rows)?,
        seasonal_gain: cfg.get_f64("fleet.seasonal_gain", d.seasonal_gain)?,
        noise_scale: cfg.get_f64("fleet.noise_scale", d.noise_scale)?,
        nonlinearity: cfg.get_f64("fleet.nonlinearity", d.nonlinearity)?,
        fault: FaultSpec {
            onset_fraction: cfg.get_f64("fleet.fault_onset_fraction", d.fault.onset_fraction)?,
            channels: cfg.get_usize("fleet.fault_channels", d.fault.channels)?,
            magnitude: cfg.get_f64("fleet.fault_magnitude", d.fault.magnitude)?,
        },
        seed: cfg.get_u64("seed", d.seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_and_hash() {
        let mut cfg = Config::parse("# comment\nkind = hfa\nepochs = 10\n").unwrap();
        assert_eq!(cfg.get("kind"), Some("hfa"));
        assert_eq!(cfg.get_usize("epochs", 1).unwrap(), 10);
        let h1 = cfg.hash_hex();
        cfg.apply_override("epochs=20").unwrap();
        assert_eq!(cfg.get_usize("epochs", 1).unwrap(), 20);
        assert_ne!(cfg.hash_hex(), h1);
        assert!(cfg.apply_override("nonsense").is_err());
        assert!(Config::parse("bad line\n").is_err());
    }

    #[test]
    fn canonical_is_sorted_and_stable() {
        let a = Config::parse("b = 2\na = 1\n").unwrap();
        let b = Config::parse("a = 1\nb = 2\n").unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.hash_hex(), b.hash_hex());
    }

    #[test]
    fn typed_accessors_report_bad_values() {
        let cfg = Config::parse("x = abc\n").unwrap();
        assert!(cfg.get_f64("x", 0.0).is_err());
        assert!(cfg.get_bool("x", false).is_err());
        assert_eq!(cfg.get_f64("missing", 2.5).unwrap(), 2.5);
    }
}
