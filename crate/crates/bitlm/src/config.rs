//! Run configuration: flat structured text with dotted keys. One file fully
//! determines a run except the training seed, which is a CLI flag.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::model::{InputKind, ModelConfig};
use crate::optim::OptimConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("bad config line {line}: {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub decay_input_table: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimConfig::default(),
            batch_size: 4,
            total_steps: 1000,
            eval_every: 250,
            decay_input_table: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub val_fraction: f64,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { corpus: None, val_fraction: 0.01, data_seed: 0 }
    }
}

/// Everything a run needs: model shape, input parameterization, recoder
/// seed (affine variant), data paths, optimizer constants, and the seed
/// list used by the comparison protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub recoder_seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(InputKind::FixedCode),
            recoder_seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        // A relative corpus path is taken relative to the config file.
        if let Some(corpus) = &config.data.corpus {
            if corpus.is_relative() {
                if let Some(dir) = path.parent() {
                    config.data.corpus = Some(dir.join(corpus));
                }
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut fields: HashMap<String, String> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine { line: i + 1, text: raw.to_string() });
            };
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_fields(fields)
    }

    fn from_fields(mut fields: HashMap<String, String>) -> Result<RunConfig, ConfigError> {
        let mut config = RunConfig::default();

        fn take<T: std::str::FromStr>(
            fields: &mut HashMap<String, String>,
            key: &str,
            slot: &mut T,
        ) -> Result<(), ConfigError> {
            if let Some(value) = fields.remove(key) {
                *slot = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value,
                })?;
            }
            Ok(())
        }

        take(&mut fields, "model.vocab_size", &mut config.model.vocab_size)?;
        take(&mut fields, "model.d_model", &mut config.model.d_model)?;
        take(&mut fields, "model.n_layers", &mut config.model.n_layers)?;
        take(&mut fields, "model.n_heads", &mut config.model.n_heads)?;
        take(&mut fields, "model.context_len", &mut config.model.context_len)?;
        take(&mut fields, "model.mlp_ratio", &mut config.model.mlp_ratio)?;
        take(&mut fields, "model.rope_base", &mut config.model.rope_base)?;
        take(&mut fields, "model.norm_eps", &mut config.model.norm_eps)?;
        if let Some(kind) = fields.remove("model.input_kind") {
            config.model.input_kind = InputKind::parse(&kind).ok_or(ConfigError::BadValue {
                key: "model.input_kind".into(),
                value: kind,
            })?;
        }
        take(&mut fields, "recoder.seed", &mut config.recoder_seed)?;

        if let Some(path) = fields.remove("data.corpus") {
            config.data.corpus = Some(PathBuf::from(path));
        }
        take(&mut fields, "data.val_fraction", &mut config.data.val_fraction)?;
        take(&mut fields, "data.seed", &mut config.data.data_seed)?;

        take(&mut fields, "train.lr", &mut config.train.optim.peak_lr)?;
        take(&mut fields, "train.weight_decay", &mut config.train.optim.weight_decay)?;
        take(&mut fields, "train.beta1", &mut config.train.optim.beta1)?;
        take(&mut fields, "train.beta2", &mut config.train.optim.beta2)?;
        take(&mut fields, "train.eps", &mut config.train.optim.eps)?;
        take(&mut fields, "train.grad_clip", &mut config.train.optim.grad_clip)?;
        take(&mut fields, "train.batch_size", &mut config.train.batch_size)?;
        take(&mut fields, "train.total_steps", &mut config.train.total_steps)?;
        take(&mut fields, "train.eval_every", &mut config.train.eval_every)?;
        take(&mut fields, "train.decay_input_table", &mut config.train.decay_input_table)?;

        if let Some(seeds) = fields.remove("train.seeds") {
            config.seeds = seeds
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<Vec<u64>, _>>()
                .map_err(|_| ConfigError::BadValue {
                    key: "train.seeds".into(),
                    value: seeds.clone(),
                })?;
        }

        if let Some(key) = fields.into_keys().next() {
            return Err(ConfigError::UnknownKey(key));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch_size == 0 || self.train.total_steps == 0 {
            return Err(ConfigError::Invalid("batch_size and total_steps must be positive".into()));
        }
        if self.train.eval_every == 0 {
            return Err(ConfigError::Invalid("eval_every must be positive".into()));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "val_fraction {} must lie strictly between 0 and 1",
                self.data.val_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seed list must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::Invalid("seeds must be distinct".into()));
        }
        Ok(())
    }

    /// A variant of this config with a different input parameterization
    /// (used by the three-way comparison protocol).
    pub fn with_input_kind(&self, kind: InputKind) -> RunConfig {
        let mut out = self.clone();
        out.model.input_kind = kind;
        out
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        s.push_str(&format!("model.vocab_size = {}\n", m.vocab_size));
        s.push_str(&format!("model.d_model = {}\n", m.d_model));
        s.push_str(&format!("model.n_layers = {}\n", m.n_layers));
        s.push_str(&format!("model.n_heads = {}\n", m.n_heads));
        s.push_str(&format!("model.context_len = {}\n", m.context_len));
        s.push_str(&format!("model.mlp_ratio = {}\n", m.mlp_ratio));
        s.push_str(&format!("model.rope_base = {}\n", m.rope_base));
        s.push_str(&format!("model.norm_eps = {}\n", m.norm_eps));
        s.push_str(&format!("model.input_kind = {}\n", m.input_kind.as_str()));
        s.push_str(&format!("recoder.seed = {}\n", self.recoder_seed));
        if let Some(corpus) = &self.data.corpus {
            s.push_str(&format!("data.corpus = {}\n", corpus.display()));
        }
        s.push_str(&format!("data.val_fraction = {}\n", self.data.val_fraction));
        s.push_str(&format!("data.seed = {}\n", self.data.data_seed));
        s.push_str(&format!("train.lr = {}\n", t.optim.peak_lr));
        s.push_str(&format!("train.weight_decay = {}\n", t.optim.weight_decay));
        s.push_str(&format!("train.beta1 = {}\n", t.optim.beta1));
        s.push_str(&format!("train.beta2 = {}\n", t.optim.beta2));
        s.push_str(&format!("train.eps = {}\n", t.optim.eps));
        s.push_str(&format!("train.grad_clip = {}\n", t.optim.grad_clip));
        s.push_str(&format!("train.batch_size = {}\n", t.batch_size));
        s.push_str(&format!("train.total_steps = {}\n", t.total_steps));
        s.push_str(&format!("train.eval_every = {}\n", t.eval_every));
        s.push_str(&format!("train.decay_input_table = {}\n", t.decay_input_table));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        s.push_str(&format!("train.seeds = {}\n", seeds.join(",")));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut config = RunConfig::default();
        config.model.input_kind = InputKind::AffineRecoded;
        config.recoder_seed = 9;
        config.train.total_steps = 123;
        config.seeds = vec![5, 6];
        let back = RunConfig::parse(&config.to_text()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn parses_dotted_keys_with_comments() {
        let text = "
            # comment
            model.d_model = 32
            model.n_heads = 2
            train.lr = 1e-3   # trailing comment
            train.seeds = 4, 5, 6
        ";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.model.d_model, 32);
        assert_eq!(config.train.optim.peak_lr, 1e-3);
        assert_eq!(config.seeds, vec![4, 5, 6]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            RunConfig::parse("model.dmodel = 32"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("model.d_model = small"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("model.d_model"),
            Err(ConfigError::BadLine { .. })
        ));
    }

    #[test]
    fn rejects_duplicate_seeds_and_bad_fractions() {
        assert!(RunConfig::parse("train.seeds = 1,1").is_err());
        assert!(RunConfig::parse("data.val_fraction = 0").is_err());
        assert!(RunConfig::parse("data.val_fraction = 1").is_err());
    }

    #[test]
    fn input_kind_spellings() {
        for (text, kind) in [
            ("learned", InputKind::Learned),
            ("fixed", InputKind::FixedCode),
            ("fixed_code", InputKind::FixedCode),
            ("affine", InputKind::AffineRecoded),
            ("affine_recoded", InputKind::AffineRecoded),
        ] {
            let config =
                RunConfig::parse(&format!("model.input_kind = {text}")).unwrap();
            assert_eq!(config.model.input_kind, kind);
        }
    }
}
