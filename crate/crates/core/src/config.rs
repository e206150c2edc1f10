//! Run configuration: a flat `key = value` file plus command-line overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSizes, CorpusSpec, Grid};
use crate::decode::{BeamConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::eval::DecodeSettings;
use crate::model::ModelConfig;
use crate::train::{AdamWConfig, PseudoSource, SelectBy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,

    pub num_concepts: usize,
    pub num_unseen: usize,
    pub signature_dim: usize,
    pub num_fillers: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub noise: f64,
    pub size_pretrain: usize,
    pub size_generic_train: usize,
    pub size_generic_val: usize,
    pub size_generic_test: usize,
    pub size_replay: usize,
    pub size_concept_val: usize,
    pub size_concept_test: usize,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub use_patch_self_attention: bool,
    pub patch_attn_layers: usize,

    pub pretrain_epochs: usize,
    pub pretrain_lr_max: f64,
    pub pretrain_select_by: SelectBy,
    pub epochs: usize,
    pub lr_max: f64,
    pub finetune_select_by: SelectBy,
    pub kreplay_select_by: SelectBy,
    pub batch_size: usize,
    pub lr_min: f64,
    pub use_cosine_schedule: bool,
    pub label_smoothing: f64,
    pub lambda_k: f64,
    pub lambda_d: f64,
    pub distill_temperature: f64,
    pub use_replay: bool,
    pub pseudo_caption_method: DecodeMethod,
    pub pseudo_caption_source: PseudoSource,
    pub beam_width: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,

    pub eval_method: DecodeMethod,
    pub eval_beam_width: usize,
    pub eval_max_len: usize,
    pub length_penalty: f64,

    pub data_dir: String,
    pub base_checkpoint: String,
    pub teacher_checkpoint: String,
    pub checkpoint: String,
    pub decode_split: String,
    pub image_ids: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sizes = CorpusSizes::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            num_concepts: 24,
            num_unseen: 12,
            signature_dim: 16,
            num_fillers: 8,
            grid_h: 4,
            grid_w: 4,
            noise: 0.15,
            size_pretrain: sizes.pretrain,
            size_generic_train: sizes.generic_train,
            size_generic_val: sizes.generic_val,
            size_generic_test: sizes.generic_test,
            size_replay: sizes.replay,
            size_concept_val: sizes.concept_val,
            size_concept_test: sizes.concept_test,
            d_model: model.d_model,
            n_heads: model.n_heads,
            n_enc_layers: model.n_enc_layers,
            n_dec_layers: model.n_dec_layers,
            d_ff: model.d_ff,
            max_len: model.max_len,
            use_patch_self_attention: model.use_patch_self_attention,
            patch_attn_layers: model.patch_attn_layers,
            pretrain_epochs: train.epochs,
            pretrain_lr_max: train.lr_max,
            pretrain_select_by: SelectBy::Recognition,
            epochs: train.epochs,
            // downstream phases start from a trained model and use a gentler rate
            lr_max: 1e-3,
            finetune_select_by: SelectBy::Cider,
            kreplay_select_by: SelectBy::Recognition,
            batch_size: train.batch_size,
            lr_min: train.lr_min,
            use_cosine_schedule: train.use_cosine_schedule,
            label_smoothing: train.label_smoothing,
            lambda_k: train.lambda_k,
            lambda_d: train.lambda_d,
            distill_temperature: train.distill_temperature,
            use_replay: true,
            pseudo_caption_method: train.pseudo_caption_method,
            pseudo_caption_source: train.pseudo_caption_source,
            beam_width: train.beam_width,
            beta1: train.optimizer.beta1,
            beta2: train.optimizer.beta2,
            adam_eps: train.optimizer.eps,
            weight_decay: train.optimizer.weight_decay,
            checkpoint_every: train.checkpoint_every,
            eval_method: DecodeMethod::Beam,
            eval_beam_width: 5,
            eval_max_len: 16,
            length_penalty: 0.0,
            data_dir: "data".into(),
            base_checkpoint: String::new(),
            teacher_checkpoint: String::new(),
            checkpoint: String::new(),
            decode_split: "concept_test".into(),
            image_ids: String::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),* $(,)?) => {
        /// Every accepted key, in file order.
        pub const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($key) => { self.$key = config_keys!(@parse $kind, key, value)?; })*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Canonical text form listing every key.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), config_keys!(@show $kind, self.$key));)*
                s
            }
        }
    };
    (@parse num, $k:expr, $v:expr) => { parse($k, $v) };
    (@parse bool, $k:expr, $v:expr) => { parse_bool($k, $v) };
    (@parse text, $k:expr, $v:expr) => { Ok::<String, Error>($v.to_owned()) };
    (@show num, $x:expr) => { $x.to_string() };
    (@show bool, $x:expr) => { $x.to_string() };
    (@show text, $x:expr) => { $x.clone() };
}

config_keys! {
    seed: num,
    num_concepts: num,
    num_unseen: num,
    signature_dim: num,
    num_fillers: num,
    grid_h: num,
    grid_w: num,
    noise: num,
    size_pretrain: num,
    size_generic_train: num,
    size_generic_val: num,
    size_generic_test: num,
    size_replay: num,
    size_concept_val: num,
    size_concept_test: num,
    d_model: num,
    n_heads: num,
    n_enc_layers: num,
    n_dec_layers: num,
    d_ff: num,
    max_len: num,
    use_patch_self_attention: bool,
    patch_attn_layers: num,
    pretrain_epochs: num,
    pretrain_lr_max: num,
    pretrain_select_by: num,
    epochs: num,
    lr_max: num,
    finetune_select_by: num,
    kreplay_select_by: num,
    batch_size: num,
    lr_min: num,
    use_cosine_schedule: bool,
    label_smoothing: num,
    lambda_k: num,
    lambda_d: num,
    distill_temperature: num,
    use_replay: bool,
    pseudo_caption_method: num,
    pseudo_caption_source: num,
    beam_width: num,
    beta1: num,
    beta2: num,
    adam_eps: num,
    weight_decay: num,
    checkpoint_every: num,
    eval_method: num,
    eval_beam_width: num,
    eval_max_len: num,
    length_penalty: num,
    data_dir: text,
    base_checkpoint: text,
    teacher_checkpoint: text,
    checkpoint: text,
    decode_split: text,
    image_ids: text,
}

impl RunConfig {
    /// Applies `key = value` lines. Errors name the offending line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            sizes: CorpusSizes {
                pretrain: self.size_pretrain,
                generic_train: self.size_generic_train,
                generic_val: self.size_generic_val,
                generic_test: self.size_generic_test,
                replay: self.size_replay,
                concept_val: self.size_concept_val,
                concept_test: self.size_concept_test,
            },
            grid: Grid {
                h: self.grid_h,
                w: self.grid_w,
            },
            noise: self.noise,
            ..CorpusSpec::default()
        }
    }

    /// Model shape for a corpus with the given vocabulary and patch layout.
    pub fn model_config(&self, vocab_size: usize, grid: Grid, d_patch: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            vocab_size,
            grid_h: grid.h,
            grid_w: grid.w,
            d_patch,
            max_len: self.max_len,
            use_patch_self_attention: self.use_patch_self_attention,
            patch_attn_layers: self.patch_attn_layers,
        }
    }

    /// Training settings shared by every phase; callers adjust epochs, rate,
    /// selection and seed per phase.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            use_cosine_schedule: self.use_cosine_schedule,
            label_smoothing: self.label_smoothing,
            lambda_k: self.lambda_k,
            lambda_d: self.lambda_d,
            distill_temperature: self.distill_temperature,
            pseudo_caption_method: self.pseudo_caption_method,
            pseudo_caption_source: self.pseudo_caption_source,
            beam_width: self.beam_width,
            pseudo_max_len: self.max_len,
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            select_by: self.kreplay_select_by,
        }
    }

    pub fn decode_settings(&self) -> DecodeSettings {
        DecodeSettings {
            method: self.eval_method,
            beam: BeamConfig {
                width: self.eval_beam_width,
                max_len: self.eval_max_len,
                length_penalty: self.length_penalty,
            },
        }
    }

    pub fn data_path(&self) -> PathBuf {
        PathBuf::from(&self.data_dir)
    }

    /// Checks every value that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let mut t = self.train_config();
        t.validate()?;
        t.lr_max = self.pretrain_lr_max;
        t.epochs = self.pretrain_epochs;
        t.validate()?;
        self.decode_settings().beam.validate()?;
        self.model_config(8, Grid { h: self.grid_h, w: self.grid_w }, self.signature_dim)
            .validate()?;
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}
