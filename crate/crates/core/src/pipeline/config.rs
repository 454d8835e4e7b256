//! Flat `key = value` pipeline configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::CorpusConfig;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::prefopt::{DpoConfig, NegativeSynthesisConfig, ReferenceModel, SamplerChoice};
use crate::tinylm::checkpoint::content_hash;
use crate::tinylm::{Dims, TrainConfig, TrainMode};

/// Environment variable that overrides `run_root`.
pub const RUN_ROOT_ENV: &str = "COPE_RUN_ROOT";

/// Keys naming filesystem locations; they do not enter the config hash.
pub const PATH_KEYS: [&str; 2] = ["corpus_dir", "run_root"];

/// Model used as `π_base` in the reward during contrastive decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseContrast {
    /// The seeded, untrained initial network.
    Init,
    Tam,
    Oppu,
}

impl fmt::Display for BaseContrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseContrast::Init => "init",
            BaseContrast::Tam => "tam",
            BaseContrast::Oppu => "oppu",
        })
    }
}

impl FromStr for BaseContrast {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Self::Init),
            "tam" => Ok(Self::Tam),
            "oppu" => Ok(Self::Oppu),
            _ => Err(Error::Config(format!("base contrast must be init, tam or oppu, got {s:?}"))),
        }
    }
}

/// Which user adapters the reward-separation diagnostic scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnoseAdapter {
    Oppu,
    Dpo,
}

impl fmt::Display for DiagnoseAdapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiagnoseAdapter::Oppu => "oppu",
            DiagnoseAdapter::Dpo => "dpo",
        })
    }
}

impl FromStr for DiagnoseAdapter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oppu" => Ok(Self::Oppu),
            "dpo" => Ok(Self::Dpo),
            _ => Err(Error::Config(format!("diagnose adapter must be oppu or dpo, got {s:?}"))),
        }
    }
}

impl fmt::Display for ReferenceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReferenceModel::OppuSnapshot => "oppu_snapshot",
            ReferenceModel::Tam => "tam",
        })
    }
}

impl FromStr for ReferenceModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oppu_snapshot" => Ok(Self::OppuSnapshot),
            "tam" => Ok(Self::Tam),
            _ => Err(Error::Config(format!("dpo reference must be oppu_snapshot or tam, got {s:?}"))),
        }
    }
}

impl fmt::Display for SamplerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerChoice::Base => "tam",
            SamplerChoice::User => "oppu",
        })
    }
}

impl FromStr for SamplerChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tam" => Ok(Self::Base),
            "oppu" => Ok(Self::User),
            _ => Err(Error::Config(format!("negative sampler must be tam or oppu, got {s:?}"))),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

macro_rules! pipeline_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr, )*) => {
        /// Every knob of the pipeline. Field names are the config-file keys
        /// and the CLI flag names.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => self.$name = parse_value(key, value.trim())?, )*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.to_string()), )*]
            }
        }
    };
}

pipeline_config! {
    seed: u64 = 42,
    /// Existing corpus to use; empty means generate one inside the run directory.
    corpus_dir: String = String::new(),
    run_root: String = "runs".to_string(),

    corpus_target_users: usize = 10,
    corpus_background_users: usize = 30,
    corpus_target_train: usize = 24,
    corpus_target_test: usize = 8,
    corpus_background_train: usize = 30,
    corpus_target_fidelity: f64 = 0.9,
    corpus_background_fidelity: f64 = 0.5,

    model_window: usize = 8,
    model_embed_dim: usize = 16,
    model_hidden_dim: usize = 64,
    adapter_rank: usize = 4,
    adapter_scale: f64 = 1.0,

    task_learning_rate: f64 = 0.5,
    task_epochs: usize = 12,
    task_batch_size: usize = 8,
    task_weight_decay: f64 = 0.01,
    task_warmup_ratio: f64 = 0.1,

    user_learning_rate: f64 = 0.5,
    user_epochs: usize = 2,
    user_batch_size: usize = 4,
    user_weight_decay: f64 = 0.01,
    user_warmup_ratio: f64 = 0.1,

    neg_k: usize = 3,
    neg_temperature: f64 = 1.0,
    neg_max_new_tokens: usize = 64,
    neg_sampler: SamplerChoice = SamplerChoice::Base,

    dpo_beta: f64 = 3.0,
    dpo_learning_rate: f64 = 0.05,
    dpo_epochs: usize = 1,
    dpo_batch_size: usize = 4,
    dpo_weight_decay: f64 = 0.01,
    dpo_warmup_ratio: f64 = 0.1,
    dpo_reference: ReferenceModel = ReferenceModel::OppuSnapshot,

    decode_tau: f64 = 0.1,
    decode_alpha: f64 = 0.3,
    decode_repetition_penalty: f64 = 1.0,
    decode_temperature: f64 = 1.0,
    decode_max_new_tokens: usize = 64,
    base_contrast: BaseContrast = BaseContrast::Tam,

    diagnose_adapter: DiagnoseAdapter = DiagnoseAdapter::Oppu,
}

impl PipelineConfig {
    /// Parses a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_document(text)?;
        Ok(cfg)
    }

    pub fn apply_document(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical document: every key, declaration order.
    pub fn to_document(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 over the canonical document without the path keys.
    pub fn hash(&self) -> String {
        let doc: String = self
            .pairs()
            .into_iter()
            .filter(|(k, _)| !PATH_KEYS.contains(k))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        content_hash(doc.as_bytes())
    }

    pub fn run_root(&self) -> PathBuf {
        match std::env::var(RUN_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.run_root),
        }
    }

    /// `run_root/<first 16 hex digits of the config hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.run_root().join(&self.hash()[..16])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpus_dir.is_empty() && self.corpus_target_users < 2 {
            return bad("corpus_target_users must be >= 2".into());
        }
        if self.corpus_dir.is_empty()
            && (self.corpus_background_users == 0 || self.corpus_background_train == 0)
        {
            return bad("the pooled corpus needs background users".into());
        }
        if self.corpus_target_train == 0 || self.corpus_target_test < 1 {
            return bad("per-user train and test counts must be >= 1".into());
        }
        if self.model_window == 0 || self.model_embed_dim == 0 || self.model_hidden_dim == 0 {
            return bad("model dimensions must be >= 1".into());
        }
        self.task_train_config().validate().map_err(to_config)?;
        self.user_train_config().validate().map_err(to_config)?;
        self.dpo_config().validate().map_err(to_config)?;
        self.decode_config().validate().map_err(to_config)?;
        if self.neg_k == 0 || self.neg_max_new_tokens == 0 || !(self.neg_temperature > 0.0) {
            return bad("neg_k, neg_max_new_tokens and neg_temperature must be positive".into());
        }
        if self.adapter_rank == 0
            || self.adapter_rank >= self.model_hidden_dim.min(self.model_window * self.model_embed_dim)
        {
            return bad(format!("adapter_rank {} out of range", self.adapter_rank));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            target_users: self.corpus_target_users,
            background_users: self.corpus_background_users,
            target_train: self.corpus_target_train,
            target_test: self.corpus_target_test,
            background_train: self.corpus_background_train,
            target_fidelity: self.corpus_target_fidelity,
            background_fidelity: self.corpus_background_fidelity,
        }
    }

    pub fn dims(&self, vocab_size: usize) -> Dims {
        Dims::new(vocab_size, self.model_window, self.model_embed_dim, self.model_hidden_dim)
    }

    pub fn task_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.task_learning_rate,
            epochs: self.task_epochs,
            batch_size: self.task_batch_size,
            weight_decay: self.task_weight_decay,
            warmup_ratio: self.task_warmup_ratio,
            seed: self.seed,
            mode: TrainMode::Full,
        }
    }

    pub fn user_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.user_learning_rate,
            epochs: self.user_epochs,
            batch_size: self.user_batch_size,
            weight_decay: self.user_weight_decay,
            warmup_ratio: self.user_warmup_ratio,
            seed: self.seed,
            mode: TrainMode::AdapterOnly,
        }
    }

    pub fn negative_config(&self) -> NegativeSynthesisConfig {
        NegativeSynthesisConfig {
            k: self.neg_k,
            temperature: self.neg_temperature,
            seed: self.seed,
            max_new_tokens: self.neg_max_new_tokens,
            sampler: self.neg_sampler,
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.dpo_beta,
            learning_rate: self.dpo_learning_rate,
            epochs: self.dpo_epochs,
            batch_size: self.dpo_batch_size,
            weight_decay: self.dpo_weight_decay,
            warmup_ratio: self.dpo_warmup_ratio,
            seed: self.seed,
            reference: self.dpo_reference,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            tau: self.decode_tau,
            alpha: self.decode_alpha,
            repetition_penalty: self.decode_repetition_penalty,
            temperature: self.decode_temperature,
            max_new_tokens: self.decode_max_new_tokens,
            stop_on_eos: true,
            seed: self.seed,
        }
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_snapshot() {
        let c = PipelineConfig::default();
        assert_eq!(c.decode_tau, 0.1);
        assert_eq!(c.decode_alpha, 0.3);
        assert_eq!(c.dpo_beta, 3.0);
        assert_eq!(c.neg_k, 3);
        assert_eq!(c.neg_temperature, 1.0);
        assert_eq!(c.decode_repetition_penalty, 1.0);
        for wd in [c.task_weight_decay, c.user_weight_decay, c.dpo_weight_decay] {
            assert_eq!(wd, 0.01);
        }
        for wr in [c.task_warmup_ratio, c.user_warmup_ratio, c.dpo_warmup_ratio] {
            assert_eq!(wr, 0.1);
        }
        assert_eq!((c.task_batch_size, c.user_batch_size), (8, 4));
        assert_eq!((c.model_window, c.model_embed_dim, c.model_hidden_dim, c.adapter_rank), (8, 16, 64, 4));
        assert_eq!(c.base_contrast, BaseContrast::Tam);
        assert_eq!(c.dpo_reference, ReferenceModel::OppuSnapshot);
        assert_eq!(c.neg_sampler, SamplerChoice::Base);
        c.validate().unwrap();
    }

    #[test]
    fn document_round_trip() {
        let mut c = PipelineConfig::default();
        c.set("decode_alpha", "0.1").unwrap();
        c.set("base_contrast", "oppu").unwrap();
        let back = PipelineConfig::parse(&c.to_document()).unwrap();
        assert_eq!(back, c);
        assert_ne!(back.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn parse_errors_are_config_errors() {
        for doc in ["nope = 1", "seed = x", "seed 1", "seed = 1\nseed = 2", "base_contrast = foo"] {
            let e = PipelineConfig::parse(doc).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{doc}: {e}");
        }
        let c = PipelineConfig::parse("# comment\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(c.seed, 5);
        let c = PipelineConfig {
            decode_tau: 2.0,
            ..PipelineConfig::default()
        };
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn path_keys_do_not_change_hash() {
        let mut c = PipelineConfig::default();
        let h = c.hash();
        c.run_root = "/tmp/elsewhere".into();
        c.corpus_dir = "/data".into();
        assert_eq!(c.hash(), h);
        assert_eq!(h.len(), 64);
    }
}
