//! Stage configuration, stored as TOML with schema `slimmat/v1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{KdMethod, StageWeights};
use crate::netgraph::{NetworkGraph, DEFAULT_MIN_KEEP_FRACTION};

pub const CONFIG_SCHEMA: &str = "slimmat/v1";
pub const RUNS_DIR_ENV: &str = "SLIMMAT_RUNS_DIR";

/// Loss balancing factors. `kd = None` picks the method's default when the
/// teacher is known, see [`StageConfig::resolve_kd_weights`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gt: f64,
    pub teacher: f64,
    pub sparsity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gt: 1.0,
            teacher: 0.5,
            sparsity: 1e-4,
            kd: None,
        }
    }
}

impl LossWeights {
    pub fn stage_weights(&self) -> Result<StageWeights> {
        Ok(StageWeights {
            gt: self.gt,
            teacher: self.teacher,
            sparsity: self.sparsity,
            kd: self.kd.ok_or_else(|| {
                Error::Config("KD weight is unresolved; call resolve_kd_weights first".into())
            })?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Schedule {
    fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            learning_rate: 1e-3,
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::with_epochs(30)
    }
}

fn default_eta() -> Vec<String> {
    (1..=4).map(|i| format!("enc{i}.relu")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub schema: String,
    pub seed: u64,
    pub width_multiplier: f64,
    /// Fraction of channels removed, separately in encoder and decoder.
    pub ratio: f64,
    pub min_keep_fraction: f64,
    pub batch_size: usize,
    /// Distillation sites, by layer id.
    pub eta: Vec<String>,
    /// Reject decoder sites in `eta`.
    pub strict_eta: bool,
    pub kd: KdMethod,
    /// Pruning-stage factors.
    pub lambdas: LossWeights,
    /// Training-stage factors; `sparsity` is unused.
    pub weights: LossWeights,
    pub teacher: Schedule,
    pub prune: Schedule,
    pub train: Schedule,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.to_string(),
            seed: 0,
            width_multiplier: 1.0,
            ratio: 0.5,
            min_keep_fraction: DEFAULT_MIN_KEEP_FRACTION,
            batch_size: 8,
            eta: default_eta(),
            strict_eta: true,
            kd: KdMethod::spkd(),
            lambdas: LossWeights::default(),
            weights: LossWeights {
                sparsity: 0.0,
                ..LossWeights::default()
            },
            teacher: Schedule::with_epochs(30),
            prune: Schedule::with_epochs(15),
            train: Schedule::with_epochs(30),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "schema",
    "seed",
    "width_multiplier",
    "ratio",
    "min_keep_fraction",
    "batch_size",
    "eta",
    "strict_eta",
    "kd",
    "lambdas",
    "weights",
    "teacher",
    "prune",
    "train",
];
const WEIGHT_KEYS: &[&str] = &["gt", "teacher", "sparsity", "kd"];
const SCHEDULE_KEYS: &[&str] = &["epochs", "learning_rate"];
const KD_KEYS: &[&str] = &["method", "degree", "bias", "kinds"];
const KINDS_KEYS: &[&str] = &["spatial", "channel"];

fn unknown_keys(value: &toml::Value) -> Vec<String> {
    let mut bad = Vec::new();
    let Some(top) = value.as_table() else {
        return bad;
    };
    let check = |table: &toml::Table, prefix: &str, allowed: &[&str], bad: &mut Vec<String>| {
        for k in table.keys() {
            if !allowed.contains(&k.as_str()) {
                bad.push(format!("{prefix}{k}"));
            }
        }
    };
    check(top, "", TOP_KEYS, &mut bad);
    for (name, allowed) in [
        ("lambdas", WEIGHT_KEYS),
        ("weights", WEIGHT_KEYS),
        ("teacher", SCHEDULE_KEYS),
        ("prune", SCHEDULE_KEYS),
        ("train", SCHEDULE_KEYS),
        ("kd", KD_KEYS),
    ] {
        if let Some(t) = top.get(name).and_then(|v| v.as_table()) {
            check(t, &format!("{name}."), allowed, &mut bad);
        }
    }
    if let Some(t) = top
        .get("kd")
        .and_then(|v| v.get("kinds"))
        .and_then(|v| v.as_table())
    {
        check(t, "kd.kinds.", KINDS_KEYS, &mut bad);
    }
    bad
}

impl StageConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let bad = unknown_keys(&value);
        if !bad.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", bad.join(", "))));
        }
        let schema = value.get("schema").and_then(|v| v.as_str());
        if schema != Some(CONFIG_SCHEMA) {
            return Err(Error::Config(format!(
                "schema must be \"{CONFIG_SCHEMA}\", found {}",
                schema.map_or("nothing".to_string(), |s| format!("\"{s}\""))
            )));
        }
        let cfg: StageConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema != CONFIG_SCHEMA {
            return bad(format!("schema must be \"{CONFIG_SCHEMA}\""));
        }
        if !(0.0..1.0).contains(&self.ratio) {
            return bad(format!("ratio must lie in [0, 1), got {}", self.ratio));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 4.0) {
            return bad(format!(
                "width_multiplier must lie in (0, 4], got {}",
                self.width_multiplier
            ));
        }
        if !(self.min_keep_fraction > 0.0 && self.min_keep_fraction <= 1.0) {
            return bad(format!(
                "min_keep_fraction must lie in (0, 1], got {}",
                self.min_keep_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eta.is_empty() {
            return bad("eta must name at least one layer".into());
        }
        for (name, w) in [("lambdas", &self.lambdas), ("weights", &self.weights)] {
            for (k, v) in [
                ("gt", w.gt),
                ("teacher", w.teacher),
                ("sparsity", w.sparsity),
                ("kd", w.kd.unwrap_or(0.0)),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!(
                        "{name}.{k} must be a finite non-negative number, got {v}"
                    ));
                }
            }
        }
        for (name, s) in [
            ("teacher", &self.teacher),
            ("prune", &self.prune),
            ("train", &self.train),
        ] {
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return bad(format!("{name}.learning_rate must be positive"));
            }
        }
        if let KdMethod::Nst { degree, .. } = self.kd {
            if degree < 1 {
                return bad(format!("kd.degree must be >= 1, got {degree}"));
            }
        }
        if let KdMethod::Spkd { kinds } = self.kd {
            if !kinds.spatial && !kinds.channel {
                return bad("kd.kinds must enable spatial or channel similarity".into());
            }
        }
        Ok(())
    }

    /// Default KD factor of the configured method: 10 for NST, 1 for SPKD,
    /// and for OFD 1e-3 times the number of teacher channels over `eta`.
    pub fn default_kd_weight(&self, teacher: &NetworkGraph) -> Result<f64> {
        Ok(match self.kd {
            KdMethod::Nst { .. } => 10.0,
            KdMethod::Spkd { .. } => 1.0,
            KdMethod::Ofd => {
                let mut total = 0;
                for id in &self.eta {
                    total += teacher.channels_of(id).ok_or_else(|| {
                        Error::Config(format!("distillation site `{id}` is not in the teacher"))
                    })?;
                }
                1e-3 * total as f64
            }
        })
    }

    /// Fills unset KD factors with the method defaults.
    pub fn resolve_kd_weights(&mut self, teacher: &NetworkGraph) -> Result<()> {
        let d = self.default_kd_weight(teacher)?;
        self.lambdas.kd.get_or_insert(d);
        self.weights.kd.get_or_insert(d);
        Ok(())
    }
}
