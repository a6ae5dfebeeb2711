//! Flat key=value run configuration.
//!
//! One `key = value` per line; `#` starts a comment. Every key has a default;
//! unknown keys are errors. `preset = paper` switches the optimizer defaults
//! to the full-scale recipe (peak_lr 7e-4, warmup 4000, patience 20,
//! ckpt_keep 10) before explicit keys are applied.

use std::collections::BTreeMap;
use std::path::Path;

use crate::branch::ReplacePolicy;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::{EntropyMode, ModelConfig};
use crate::objectives::{ConsGradFlow, DivergenceKind};
use crate::optim::Schedule;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PStarMode {
    Fixed,
    Dynamic,
}

impl PStarMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(PStarMode::Fixed),
            "dynamic" => Ok(PStarMode::Dynamic),
            other => Err(Error::Config(format!("unknown p_star_mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PStarMode::Fixed => "fixed",
            PStarMode::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // Corpus.
    pub n_source: usize,
    pub n_target: usize,
    pub d_feat: usize,
    pub noise_sigma: f64,
    pub silence_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub asr_size: usize,
    pub mt_size: usize,
    pub st_train_size: usize,
    pub st_dev_size: usize,
    pub st_test_size: usize,
    // Model.
    pub d_model: usize,
    pub speech_layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_pretrain: f64,
    pub dropout_finetune: f64,
    pub downsample_factor: usize,
    // Training.
    pub preset: String,
    pub beta1: f64,
    pub beta2_asr: f64,
    pub beta2_mt: f64,
    pub beta2_st: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub patience: u64,
    pub ckpt_keep: usize,
    pub label_smoothing: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub divergence: DivergenceKind,
    pub p_star_mode: PStarMode,
    pub p_star: f64,
    pub gamma: f64,
    pub upsilon_ema: f64,
    pub entropy_mode: EntropyMode,
    pub cons_grad_flow: ConsGradFlow,
    pub single_branch: bool,
    pub precision: Precision,
    pub seed: u64,
    // Evaluation.
    pub beam_size: usize,
    pub max_decode_len: usize,
    // Paths (empty = unset).
    pub data_dir: String,
    pub asr_ckpt: String,
    pub mt_ckpt: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n_source: 40,
            n_target: 40,
            d_feat: 16,
            noise_sigma: 0.1,
            silence_prob: 0.3,
            min_len: 3,
            max_len: 12,
            asr_size: 5000,
            mt_size: 20000,
            st_train_size: 1000,
            st_dev_size: 200,
            st_test_size: 200,
            d_model: 64,
            speech_layers: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            dropout_pretrain: 0.1,
            dropout_finetune: 0.15,
            downsample_factor: 4,
            preset: "toy".into(),
            beta1: 0.9,
            beta2_asr: 0.98,
            beta2_mt: 0.997,
            beta2_st: 0.98,
            peak_lr: 1e-3,
            warmup_steps: 400,
            schedule: Schedule::InverseSqrt,
            batch_size: 32,
            max_epochs: 60,
            patience: 10,
            ckpt_keep: 3,
            label_smoothing: 0.1,
            lambda: 0.3,
            alpha: 1.0,
            divergence: DivergenceKind::BiKl,
            p_star_mode: PStarMode::Dynamic,
            p_star: 0.2,
            gamma: 0.5,
            upsilon_ema: 0.0,
            entropy_mode: EntropyMode::FullDistribution,
            cons_grad_flow: ConsGradFlow::Both,
            single_branch: false,
            precision: Precision::F64,
            seed: 1,
            beam_size: 5,
            max_decode_len: 32,
            data_dir: String::new(),
            asr_ckpt: String::new(),
            mt_ckpt: String::new(),
        }
    }
}

impl Config {
    /// The full-scale optimizer recipe, kept as a named preset.
    fn apply_paper_preset(&mut self) {
        self.preset = "paper".into();
        self.peak_lr = 7e-4;
        self.warmup_steps = 4000;
        self.patience = 20;
        self.ckpt_keep = 10;
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }

        let mut cfg = Config::default();
        if pairs.iter().any(|(k, v)| k == "preset" && v == "paper") {
            cfg.apply_paper_preset();
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::Config(format!("bad value for {key}: '{v}' ({e})")))
        }
        match key {
            "n_source" => self.n_source = p(key, v)?,
            "n_target" => self.n_target = p(key, v)?,
            "d_feat" => self.d_feat = p(key, v)?,
            "noise_sigma" => self.noise_sigma = p(key, v)?,
            "silence_prob" => self.silence_prob = p(key, v)?,
            "min_len" => self.min_len = p(key, v)?,
            "max_len" => self.max_len = p(key, v)?,
            "asr_size" => self.asr_size = p(key, v)?,
            "mt_size" => self.mt_size = p(key, v)?,
            "st_train_size" => self.st_train_size = p(key, v)?,
            "st_dev_size" => self.st_dev_size = p(key, v)?,
            "st_test_size" => self.st_test_size = p(key, v)?,
            "d_model" => self.d_model = p(key, v)?,
            "speech_layers" => self.speech_layers = p(key, v)?,
            "encoder_layers" => self.encoder_layers = p(key, v)?,
            "decoder_layers" => self.decoder_layers = p(key, v)?,
            "heads" => self.heads = p(key, v)?,
            "ffn_dim" => self.ffn_dim = p(key, v)?,
            "dropout_pretrain" => self.dropout_pretrain = p(key, v)?,
            "dropout_finetune" => self.dropout_finetune = p(key, v)?,
            "downsample_factor" => self.downsample_factor = p(key, v)?,
            "preset" => {
                if v != "toy" && v != "paper" {
                    return Err(Error::Config(format!("unknown preset '{v}'")));
                }
                self.preset = v.to_string();
            }
            "beta1" => self.beta1 = p(key, v)?,
            "beta2_asr" => self.beta2_asr = p(key, v)?,
            "beta2_mt" => self.beta2_mt = p(key, v)?,
            "beta2_st" => self.beta2_st = p(key, v)?,
            "peak_lr" => self.peak_lr = p(key, v)?,
            "warmup_steps" => self.warmup_steps = p(key, v)?,
            "schedule" => self.schedule = Schedule::parse(v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "max_epochs" => self.max_epochs = p(key, v)?,
            "patience" => self.patience = p(key, v)?,
            "ckpt_keep" => self.ckpt_keep = p(key, v)?,
            "label_smoothing" => self.label_smoothing = p(key, v)?,
            "lambda" => self.lambda = p(key, v)?,
            "alpha" => self.alpha = p(key, v)?,
            "divergence" => self.divergence = DivergenceKind::parse(v)?,
            "p_star_mode" => self.p_star_mode = PStarMode::parse(v)?,
            "p_star" => self.p_star = p(key, v)?,
            "gamma" => self.gamma = p(key, v)?,
            "upsilon_ema" => self.upsilon_ema = p(key, v)?,
            "entropy_mode" => self.entropy_mode = EntropyMode::parse(v)?,
            "cons_grad_flow" => self.cons_grad_flow = ConsGradFlow::parse(v)?,
            "single_branch" => self.single_branch = p(key, v)?,
            "precision" => self.precision = Precision::parse(v)?,
            "seed" => self.seed = p(key, v)?,
            "beam_size" => self.beam_size = p(key, v)?,
            "max_decode_len" => self.max_decode_len = p(key, v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "asr_ckpt" => self.asr_ckpt = v.to_string(),
            "mt_ckpt" => self.mt_ckpt = v.to_string(),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("alpha and lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_star) {
            return Err(Error::Config("p_star must be in [0, 1]".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.upsilon_ema) {
            return Err(Error::Config("upsilon_ema must be in [0, 1)".into()));
        }
        if self.beam_size < 1 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if self.max_decode_len < 2 {
            return Err(Error::Config("max_decode_len must be >= 2".into()));
        }
        if self.ckpt_keep < 1 {
            return Err(Error::Config("ckpt_keep must be >= 1".into()));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_source: self.n_source,
            n_target: self.n_target,
            d_feat: self.d_feat,
            noise_sigma: self.noise_sigma,
            silence_prob: self.silence_prob,
            min_len: self.min_len,
            max_len: self.max_len,
            asr_size: self.asr_size,
            mt_size: self.mt_size,
            st_train_size: self.st_train_size,
            st_dev_size: self.st_dev_size,
            st_test_size: self.st_test_size,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_feat: self.d_feat,
            speech_layers: self.speech_layers,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout_pretrain: self.dropout_pretrain,
            dropout_finetune: self.dropout_finetune,
            downsample_factor: self.downsample_factor,
        }
    }

    pub fn replace_policy(&self) -> ReplacePolicy {
        match self.p_star_mode {
            PStarMode::Fixed => ReplacePolicy::Fixed { p_star: self.p_star },
            PStarMode::Dynamic => ReplacePolicy::Dynamic { gamma: self.gamma },
        }
    }

    /// The full resolved configuration as ordered key-value pairs.
    pub fn to_manifest(&self) -> Vec<(String, String)> {
        let mut m: Vec<(String, String)> = Vec::new();
        let mut kv = |k: &str, v: String| m.push((k.to_string(), v));
        kv("n_source", self.n_source.to_string());
        kv("n_target", self.n_target.to_string());
        kv("d_feat", self.d_feat.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("silence_prob", self.silence_prob.to_string());
        kv("min_len", self.min_len.to_string());
        kv("max_len", self.max_len.to_string());
        kv("asr_size", self.asr_size.to_string());
        kv("mt_size", self.mt_size.to_string());
        kv("st_train_size", self.st_train_size.to_string());
        kv("st_dev_size", self.st_dev_size.to_string());
        kv("st_test_size", self.st_test_size.to_string());
        kv("d_model", self.d_model.to_string());
        kv("speech_layers", self.speech_layers.to_string());
        kv("encoder_layers", self.encoder_layers.to_string());
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("heads", self.heads.to_string());
        kv("ffn_dim", self.ffn_dim.to_string());
        kv("dropout_pretrain", self.dropout_pretrain.to_string());
        kv("dropout_finetune", self.dropout_finetune.to_string());
        kv("downsample_factor", self.downsample_factor.to_string());
        kv("preset", self.preset.clone());
        kv("beta1", self.beta1.to_string());
        kv("beta2_asr", self.beta2_asr.to_string());
        kv("beta2_mt", self.beta2_mt.to_string());
        kv("beta2_st", self.beta2_st.to_string());
        kv("peak_lr", self.peak_lr.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("schedule", self.schedule.name().to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("ckpt_keep", self.ckpt_keep.to_string());
        kv("label_smoothing", self.label_smoothing.to_string());
        kv("lambda", self.lambda.to_string());
        kv("alpha", self.alpha.to_string());
        kv("divergence", self.divergence.name().to_string());
        kv("p_star_mode", self.p_star_mode.name().to_string());
        kv("p_star", self.p_star.to_string());
        kv("gamma", self.gamma.to_string());
        kv("upsilon_ema", self.upsilon_ema.to_string());
        kv("entropy_mode", self.entropy_mode.name().to_string());
        kv("cons_grad_flow", self.cons_grad_flow.name().to_string());
        kv("single_branch", self.single_branch.to_string());
        kv("precision", self.precision.name().to_string());
        kv("seed", self.seed.to_string());
        kv("beam_size", self.beam_size.to_string());
        kv("max_decode_len", self.max_decode_len.to_string());
        kv("data_dir", self.data_dir.clone());
        kv("asr_ckpt", self.asr_ckpt.clone());
        kv("mt_ckpt", self.mt_ckpt.clone());
        m
    }

    pub fn manifest_map(&self) -> BTreeMap<String, String> {
        self.to_manifest().into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!((cfg.asr_size, cfg.mt_size, cfg.st_train_size), (5000, 20000, 1000));
        assert_eq!(cfg.lambda, 0.3);
        assert_eq!(cfg.label_smoothing, 0.1);
    }

    #[test]
    fn unknown_key_is_error() {
        assert!(Config::parse("no_such_key = 3").is_err());
    }

    #[test]
    fn key_values_parse_with_comments() {
        let cfg = Config::parse("alpha = 5.0 # strong consistency\n\ndivergence = jsd\n").unwrap();
        assert_eq!(cfg.alpha, 5.0);
        assert_eq!(cfg.divergence, DivergenceKind::Jsd);
    }

    #[test]
    fn paper_preset_switches_recipe() {
        let cfg = Config::parse("preset = paper").unwrap();
        assert_eq!(cfg.peak_lr, 7e-4);
        assert_eq!(cfg.warmup_steps, 4000);
        assert_eq!(cfg.patience, 20);
        assert_eq!(cfg.ckpt_keep, 10);
        // Explicit keys override the preset regardless of line order.
        let cfg = Config::parse("peak_lr = 1e-4\npreset = paper").unwrap();
        assert_eq!(cfg.peak_lr, 1e-4);
        assert_eq!(cfg.warmup_steps, 4000);
    }

    #[test]
    fn bad_values_are_errors() {
        assert!(Config::parse("alpha = -1").is_err());
        assert!(Config::parse("p_star = 1.5").is_err());
        assert!(Config::parse("batch_size = 0").is_err());
        assert!(Config::parse("divergence = rkl").is_err());
        assert!(Config::parse("alpha").is_err());
    }

    #[test]
    fn manifest_echoes_resolved_values() {
        let cfg = Config::parse("alpha = 2.0").unwrap();
        let m = cfg.to_manifest();
        let get = |k: &str| m.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
        assert_eq!(get("alpha").as_deref(), Some("2"));
        assert_eq!(get("lambda").as_deref(), Some("0.3"));
        assert_eq!(get("label_smoothing").as_deref(), Some("0.1"));
    }
}
