//! Run configuration: typed structs, the line-based `key = value` file
//! format, and flag-over-file-over-default merging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Activation;

/// Generator tower shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Embedding width.
    pub d: usize,
    /// Short-sequence length.
    pub l_short: usize,
    /// Decoder layers.
    pub layers: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Softmax temperature for the retrieval InfoNCE loss.
    pub tau: f64,
    /// Output embedding dimension of the retrieval space.
    pub d_top: usize,
    /// Hidden width of the auxiliary MLPs (input, query token, heads).
    pub mlp_hidden: usize,
    pub mlp_activation: Activation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d: 128,
            l_short: 64,
            layers: 4,
            heads: 1,
            tau: 0.05,
            d_top: 128,
            mlp_hidden: 128,
            mlp_activation: Activation::Gelu,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "generator.d = {} must be a positive multiple of generator.heads = {}",
                self.d, self.heads
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("generator.tau must be positive".into()));
        }
        if self.l_short == 0 || self.d_top == 0 {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Ranker tower shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerConfig {
    /// Long-history capacity.
    pub long_len: usize,
    /// Key width of the cross-attention.
    pub d_k: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            long_len: 1000,
            d_k: 128,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.long_len == 0 {
            return Err(Error::Config("ranker.long_len must be at least 1".into()));
        }
        if self.d_k == 0 {
            return Err(Error::Config("ranker.d_k must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to build the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Item corpus size; rows of the shared embedding table.
    pub n_items: usize,
    /// Interaction feature width (dwell + engagement one-hot).
    pub d_f: usize,
    /// User demographics width.
    pub d_u: usize,
    pub generator: GeneratorConfig,
    pub ranker: RankerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_items: 0,
            d_f: 4,
            d_u: 8,
            generator: GeneratorConfig::default(),
            ranker: RankerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Config("model needs a non-empty item corpus".into()));
        }
        self.generator.validate()?;
        self.ranker.validate()
    }
}

/// Loss weights and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            batch_size: 64,
            epochs: 1,
            seed: 17,
            log_interval: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda0, self.lambda1, self.lambda2];
        if l.iter().any(|&x| x < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if l.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "in-batch negatives need trainer.batch_size >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Serving cascade mode, mirroring the ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServingMode {
    /// Stage-2 is identity truncation of the stage-1 order.
    PureGenerator,
    /// Cross-attention rescoring, generator trained without the auxiliary head.
    GenCa,
    /// Cross-attention rescoring, all heads trained.
    Full,
}

impl ServingMode {
    pub fn parse(s: &str) -> Option<ServingMode> {
        match s {
            "pure_generator" => Some(ServingMode::PureGenerator),
            "gen_ca" => Some(ServingMode::GenCa),
            "full" => Some(ServingMode::Full),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ServingMode::PureGenerator => "pure_generator",
            ServingMode::GenCa => "gen_ca",
            ServingMode::Full => "full",
        }
    }

    /// Whether the stage-2 ranker rescoring runs.
    pub fn reranks(self) -> bool {
        !matches!(self, ServingMode::PureGenerator)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServingConfig {
    pub k1: usize,
    pub k2: usize,
    pub quantized: bool,
    pub mode: ServingMode,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            k1: 2000,
            k2: 500,
            quantized: false,
            mode: ServingMode::Full,
        }
    }
}

impl ServingConfig {
    pub fn validate(&self, n_items: usize) -> Result<()> {
        if !(1 <= self.k2 && self.k2 <= self.k1 && self.k1 <= n_items) {
            return Err(Error::Config(format!(
                "need 1 <= k2 <= k1 <= |I|, got k1={}, k2={}, |I|={}",
                self.k1, self.k2, n_items
            )));
        }
        Ok(())
    }
}

/// Synthetic corpus generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_items: usize,
    pub n_users: usize,
    pub n_topics: usize,
    pub seq_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_items: 10_000,
            n_users: 5_000,
            n_topics: 16,
            seq_len: 72,
        }
    }
}

/// The whole run configuration, as read from a config file plus overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub trainer: TrainingConfig,
    pub serving: ServingConfig,
    pub precision_bits: u32,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            model: ModelConfig::default(),
            trainer: TrainingConfig::default(),
            serving: ServingConfig::default(),
            precision_bits: 32,
        }
    }
}

/// Flat namespaced key/value view used by the file format and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn merge_from(&mut self, other: &ConfigMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn parse_str(text: &str) -> Result<ConfigMap> {
        let mut map = ConfigMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected `key = value`, got {raw:?}"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "empty key".into(),
                });
            }
            map.set(key, value.trim());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be an integer, got {v:?}"))),
        }
    }

    fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be a number, got {v:?}"))),
        }
    }

    fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key} must be an integer, got {v:?}"))),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key} must be a boolean, got {v:?}"))),
        }
    }
}

impl AppConfig {
    /// Build from a flat map; unknown keys are rejected so typos surface.
    pub fn from_map(map: &ConfigMap) -> Result<AppConfig> {
        const KNOWN: &[&str] = &[
            "precision",
            "model.n_items",
            "model.d_f",
            "model.d_u",
            "generator.d",
            "generator.l",
            "generator.layers",
            "generator.heads",
            "generator.tau",
            "generator.d_top",
            "generator.mlp_hidden",
            "generator.mlp_activation",
            "ranker.long_len",
            "ranker.d_k",
            "trainer.lambda0",
            "trainer.lambda1",
            "trainer.lambda2",
            "trainer.lr",
            "trainer.beta1",
            "trainer.beta2",
            "trainer.eps",
            "trainer.clip_norm",
            "trainer.batch_size",
            "trainer.epochs",
            "trainer.seed",
            "trainer.log_interval",
            "serving.k1",
            "serving.k2",
            "serving.quantized",
            "serving.mode",
        ];
        for key in map.entries.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }

        let md = ModelConfig::default();
        let gd = GeneratorConfig::default();
        let rd = RankerConfig::default();
        let td = TrainingConfig::default();
        let sd = ServingConfig::default();

        let d = map.get_usize("generator.d", gd.d)?;
        let generator = GeneratorConfig {
            d,
            l_short: map.get_usize("generator.l", gd.l_short)?,
            layers: map.get_usize("generator.layers", gd.layers)?,
            heads: map.get_usize("generator.heads", gd.heads)?,
            tau: map.get_f64("generator.tau", gd.tau)?,
            d_top: map.get_usize("generator.d_top", d)?,
            mlp_hidden: map.get_usize("generator.mlp_hidden", d)?,
            mlp_activation: match map.get("generator.mlp_activation") {
                None => gd.mlp_activation,
                Some(v) => Activation::parse(v).ok_or_else(|| {
                    Error::Config(format!("unknown activation {v:?}"))
                })?,
            },
        };
        let ranker = RankerConfig {
            long_len: map.get_usize("ranker.long_len", rd.long_len)?,
            d_k: map.get_usize("ranker.d_k", d)?,
        };
        let model = ModelConfig {
            n_items: map.get_usize("model.n_items", md.n_items)?,
            d_f: map.get_usize("model.d_f", md.d_f)?,
            d_u: map.get_usize("model.d_u", md.d_u)?,
            generator,
            ranker,
        };
        let trainer = TrainingConfig {
            lambda0: map.get_f64("trainer.lambda0", td.lambda0)?,
            lambda1: map.get_f64("trainer.lambda1", td.lambda1)?,
            lambda2: map.get_f64("trainer.lambda2", td.lambda2)?,
            learning_rate: map.get_f64("trainer.lr", td.learning_rate)?,
            beta1: map.get_f64("trainer.beta1", td.beta1)?,
            beta2: map.get_f64("trainer.beta2", td.beta2)?,
            adam_eps: map.get_f64("trainer.eps", td.adam_eps)?,
            clip_norm: map.get_f64("trainer.clip_norm", td.clip_norm)?,
            batch_size: map.get_usize("trainer.batch_size", td.batch_size)?,
            epochs: map.get_usize("trainer.epochs", td.epochs)?,
            seed: map.get_u64("trainer.seed", td.seed)?,
            log_interval: map.get_usize("trainer.log_interval", td.log_interval)?,
        };
        let serving = ServingConfig {
            k1: map.get_usize("serving.k1", sd.k1)?,
            k2: map.get_usize("serving.k2", sd.k2)?,
            quantized: map.get_bool("serving.quantized", sd.quantized)?,
            mode: match map.get("serving.mode") {
                None => sd.mode,
                Some(v) => ServingMode::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown serving mode {v:?}")))?,
            },
        };
        let precision_bits = match map.get("precision") {
            None => 32,
            Some("32") => 32,
            Some("64") => 64,
            Some(v) => return Err(Error::Config(format!("precision must be 32 or 64, got {v:?}"))),
        };
        Ok(AppConfig {
            model,
            trainer,
            serving,
            precision_bits,
        })
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("precision", self.precision_bits);
        m.set("model.n_items", self.model.n_items);
        m.set("model.d_f", self.model.d_f);
        m.set("model.d_u", self.model.d_u);
        m.set("generator.d", self.model.generator.d);
        m.set("generator.l", self.model.generator.l_short);
        m.set("generator.layers", self.model.generator.layers);
        m.set("generator.heads", self.model.generator.heads);
        m.set("generator.tau", self.model.generator.tau);
        m.set("generator.d_top", self.model.generator.d_top);
        m.set("generator.mlp_hidden", self.model.generator.mlp_hidden);
        m.set(
            "generator.mlp_activation",
            self.model.generator.mlp_activation.name(),
        );
        m.set("ranker.long_len", self.model.ranker.long_len);
        m.set("ranker.d_k", self.model.ranker.d_k);
        m.set("trainer.lambda0", self.trainer.lambda0);
        m.set("trainer.lambda1", self.trainer.lambda1);
        m.set("trainer.lambda2", self.trainer.lambda2);
        m.set("trainer.lr", self.trainer.learning_rate);
        m.set("trainer.beta1", self.trainer.beta1);
        m.set("trainer.beta2", self.trainer.beta2);
        m.set("trainer.eps", self.trainer.adam_eps);
        m.set("trainer.clip_norm", self.trainer.clip_norm);
        m.set("trainer.batch_size", self.trainer.batch_size);
        m.set("trainer.epochs", self.trainer.epochs);
        m.set("trainer.seed", self.trainer.seed);
        m.set("trainer.log_interval", self.trainer.log_interval);
        m.set("serving.k1", self.serving.k1);
        m.set("serving.k2", self.serving.k2);
        m.set("serving.quantized", self.serving.quantized);
        m.set("serving.mode", self.serving.mode.name());
        m
    }

    /// Short stable identifier of the configuration (FNV-1a over the
    /// serialized map), used to stamp metric reports.
    pub fn fingerprint(&self) -> String {
        let text = self.to_map().to_file_string();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_blanks() {
        let m = ConfigMap::parse_str("# a comment\n\ngenerator.d = 32\nserving.k1=10\n").unwrap();
        assert_eq!(m.get("generator.d"), Some("32"));
        assert_eq!(m.get("serving.k1"), Some("10"));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let err = ConfigMap::parse_str("generator.d = 4\nBROKEN\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let m = ConfigMap::parse_str("generator.dd = 4\n").unwrap();
        assert!(AppConfig::from_map(&m).is_err());
    }

    #[test]
    fn map_roundtrip() {
        let mut cfg = AppConfig::default();
        cfg.model.n_items = 100;
        cfg.serving.mode = ServingMode::PureGenerator;
        let m = cfg.to_map();
        let back = AppConfig::from_map(&m).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn d_top_defaults_to_d() {
        let m = ConfigMap::parse_str("generator.d = 48\n").unwrap();
        let cfg = AppConfig::from_map(&m).unwrap();
        assert_eq!(cfg.model.generator.d_top, 48);
        assert_eq!(cfg.model.ranker.d_k, 48);
    }

    #[test]
    fn fingerprint_changes_with_config() {
        let a = AppConfig::default();
        let mut b = AppConfig::default();
        b.serving.k1 = 123;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
