//! Flat run configuration read from TOML.
//!
//! Every model, data, optimizer and schedule knob is a top-level key. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BatchLimits, SyntheticSpec, NUM_SPECIALS};
use crate::error::{Result, SlamError};
use crate::model::{LossWeights, ModelConfig};
use crate::nn::ConformerConfig;
use crate::trainer::{OptimizerConfig, StageSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data_seed: u64,

    pub feature_dim: usize,
    pub content_symbols: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub prototype_seed: u64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub markov_successors: usize,
    pub n_speech: usize,
    pub n_text: usize,
    pub n_paired: usize,
    pub n_heldout: usize,

    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub num_heads: usize,
    pub conv_kernel_size: usize,
    pub conv_groups: usize,
    pub dropout_rate: f64,
    pub n_speech_layers: usize,
    pub n_shared_layers: usize,
    pub codebook_groups: usize,
    pub codebook_size: usize,
    pub subsample_channels: usize,
    pub contrastive_temperature: f64,
    pub num_negatives: usize,
    pub gumbel_tau_start: f64,
    pub gumbel_tau_end: f64,
    pub gumbel_tau_decay: f64,

    pub weight_bert: f64,
    pub weight_w2v_contrastive: f64,
    pub weight_w2v_mlm: f64,
    pub weight_diversity: f64,
    pub weight_tlm_text: f64,
    pub weight_tlm_speech: f64,
    pub weight_stm: f64,

    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub self_supervised_steps: u64,
    pub with_alignment_steps: u64,
    pub speech_only_steps: u64,
    pub one_stage: bool,
    pub reset_optimizer_between_stages: bool,
    pub batch_size: usize,
    pub max_frames: usize,
    pub max_batch_tokens: usize,
    pub stm_negative_ratio: f64,
    pub checkpoint_every: u64,
}

impl Default for Config {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        let model = ModelConfig::default();
        let opt = OptimizerConfig::default();
        let train = TrainConfig::default();
        let limits = BatchLimits::default();
        let c = &model.conformer;
        let w = &model.loss_weights;
        Config {
            seed: 0,
            data_seed: 0,
            feature_dim: spec.feature_dim,
            content_symbols: spec.content_symbols,
            frames_per_token: spec.frames_per_token,
            noise_sigma: spec.noise_sigma,
            prototype_seed: spec.prototype_seed,
            min_tokens: spec.min_tokens,
            max_tokens: spec.max_tokens,
            markov_successors: spec.markov_successors,
            n_speech: spec.n_speech,
            n_text: spec.n_text,
            n_paired: spec.n_paired,
            n_heldout: spec.n_heldout,
            model_dim: c.model_dim,
            ffn_hidden: c.ffn_hidden,
            num_heads: c.num_heads,
            conv_kernel_size: c.conv_kernel_size,
            conv_groups: c.conv_groups,
            dropout_rate: c.dropout_rate,
            n_speech_layers: model.n_speech_layers,
            n_shared_layers: model.n_shared_layers,
            codebook_groups: model.codebook_groups,
            codebook_size: model.codebook_size,
            subsample_channels: model.subsample_channels,
            contrastive_temperature: model.contrastive_temperature,
            num_negatives: model.num_negatives,
            gumbel_tau_start: model.gumbel_tau_start,
            gumbel_tau_end: model.gumbel_tau_end,
            gumbel_tau_decay: model.gumbel_tau_decay,
            weight_bert: w.bert,
            weight_w2v_contrastive: w.w2v_contrastive,
            weight_w2v_mlm: w.w2v_mlm,
            weight_diversity: w.diversity,
            weight_tlm_text: w.tlm_text,
            weight_tlm_speech: w.tlm_speech,
            weight_stm: w.stm,
            peak_lr: opt.peak_lr,
            warmup_steps: opt.warmup_steps,
            clip_norm: opt.clip_norm,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            self_supervised_steps: 2000,
            with_alignment_steps: 2000,
            speech_only_steps: 1000,
            one_stage: false,
            reset_optimizer_between_stages: false,
            batch_size: train.batch_size,
            max_frames: limits.max_frames,
            max_batch_tokens: limits.max_tokens,
            stm_negative_ratio: train.stm_negative_ratio,
            checkpoint_every: train.checkpoint_every,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| SlamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec().validate()?;
        self.model_config().validate()?;
        self.optimizer().validate()?;
        self.train_config().validate()?;
        if self.feature_dim == 0 {
            return Err(SlamError::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + self.content_symbols
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            feature_dim: self.feature_dim,
            content_symbols: self.content_symbols,
            frames_per_token: self.frames_per_token,
            noise_sigma: self.noise_sigma,
            prototype_seed: self.prototype_seed,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            markov_successors: self.markov_successors,
            n_speech: self.n_speech,
            n_text: self.n_text,
            n_paired: self.n_paired,
            n_heldout: self.n_heldout,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            n_speech_layers: self.n_speech_layers,
            n_shared_layers: self.n_shared_layers,
            vocab_size: self.vocab_size(),
            codebook_groups: self.codebook_groups,
            codebook_size: self.codebook_size,
            subsample_channels: self.subsample_channels,
            conformer: ConformerConfig {
                model_dim: self.model_dim,
                ffn_hidden: self.ffn_hidden,
                num_heads: self.num_heads,
                conv_kernel_size: self.conv_kernel_size,
                conv_groups: self.conv_groups,
                dropout_rate: self.dropout_rate,
            },
            contrastive_temperature: self.contrastive_temperature,
            num_negatives: self.num_negatives,
            gumbel_tau_start: self.gumbel_tau_start,
            gumbel_tau_end: self.gumbel_tau_end,
            gumbel_tau_decay: self.gumbel_tau_decay,
            loss_weights: LossWeights {
                bert: self.weight_bert,
                w2v_contrastive: self.weight_w2v_contrastive,
                w2v_mlm: self.weight_w2v_mlm,
                diversity: self.weight_diversity,
                tlm_text: self.weight_tlm_text,
                tlm_speech: self.weight_tlm_speech,
                stm: self.weight_stm,
            },
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            limits: BatchLimits { max_frames: self.max_frames, max_tokens: self.max_batch_tokens },
            stm_negative_ratio: self.stm_negative_ratio,
            reset_optimizer_between_stages: self.reset_optimizer_between_stages,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// The pre-training schedule, or a single all-objective stage of the
    /// same total pre-training length when `one_stage` is set.
    pub fn schedule(&self) -> Result<StageSchedule> {
        if self.one_stage {
            StageSchedule::one_stage(self.self_supervised_steps + self.with_alignment_steps)
        } else {
            StageSchedule::multi_stage(self.self_supervised_steps, self.with_alignment_steps, 0)
        }
    }

    /// Speech-only continuation schedule.
    pub fn continuation_schedule(&self) -> Result<StageSchedule> {
        StageSchedule::multi_stage(0, 0, self.speech_only_steps)
    }

    /// Hash of everything that determines parameter shapes.
    pub fn fingerprint(&self) -> String {
        model_fingerprint(&self.model_config())
    }
}

/// Hex SHA-256 of the architecture-defining fields of `cfg`.
pub fn model_fingerprint(cfg: &ModelConfig) -> String {
    let arch = serde_json::json!({
        "feature_dim": cfg.feature_dim,
        "n_speech_layers": cfg.n_speech_layers,
        "n_shared_layers": cfg.n_shared_layers,
        "vocab_size": cfg.vocab_size,
        "codebook_groups": cfg.codebook_groups,
        "codebook_size": cfg.codebook_size,
        "subsample_channels": cfg.subsample_channels,
        "model_dim": cfg.conformer.model_dim,
        "ffn_hidden": cfg.conformer.ffn_hidden,
        "num_heads": cfg.conformer.num_heads,
        "conv_kernel_size": cfg.conformer.conv_kernel_size,
        "conv_groups": cfg.conformer.conv_groups,
    });
    let digest = Sha256::digest(arch.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
