//! Architecture and training configuration.
//!
//! One flat JSON object carries every field; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};

/// How segmentation logits are brought to image resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Bilinear,
    Learnable,
}

/// Architecture hyper-parameters. Every field changes parameter shapes or the
/// forward computation, so checkpoints record all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone channels per level; levels have strides 4, 8, 16.
    pub backbone_channels: Vec<usize>,
    /// Visual token width `M`.
    pub model_dim: usize,
    /// Text token width `N`.
    pub text_dim: usize,
    pub heads: usize,
    /// Image-encoder layers.
    pub encoder_layers: usize,
    /// Image-decoder layers.
    pub decoder_layers: usize,
    pub text_encoder_layers: usize,
    pub text_decoder_layers: usize,
    /// Hidden width of every transformer MLP, as a multiple of its input width.
    pub mlp_ratio: usize,
    /// Top-K objectness queries, also the decoder query count `D_t`.
    pub top_k: usize,
    /// Fusion query count `L_f`.
    pub fusion_queries: usize,
    pub num_classes: usize,
    pub num_morph: usize,
    pub vocab_size: usize,
    /// Channels of the hidden transposed convolution in the learnable upsampler.
    pub upsampler_channels: usize,
    pub upsample: UpsampleMode,
    /// Concatenate the pooled top backbone level to the classifier input.
    pub integrate_backbone: bool,
    /// Longest generated answer, in tokens.
    pub max_answer_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: vec![32, 64, 128],
            model_dim: 64,
            text_dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            text_encoder_layers: 2,
            text_decoder_layers: 2,
            mlp_ratio: 2,
            top_k: 20,
            fusion_queries: 16,
            num_classes: 4,
            num_morph: 6,
            vocab_size: crate::text::Vocabulary::synthetic().len(),
            upsampler_channels: 8,
            upsample: UpsampleMode::Learnable,
            integrate_backbone: true,
            max_answer_len: 16,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for fast overfit runs and tests.
    pub fn small() -> Self {
        ModelConfig {
            backbone_channels: vec![16, 32, 64],
            model_dim: 32,
            text_dim: 32,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            text_encoder_layers: 1,
            text_decoder_layers: 2,
            top_k: 12,
            fusion_queries: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("text_dim", self.text_dim),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("text_encoder_layers", self.text_encoder_layers),
            ("text_decoder_layers", self.text_decoder_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("top_k", self.top_k),
            ("fusion_queries", self.fusion_queries),
            ("num_classes", self.num_classes),
            ("num_morph", self.num_morph),
            ("vocab_size", self.vocab_size),
            ("upsampler_channels", self.upsampler_channels),
            ("max_answer_len", self.max_answer_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.backbone_channels.len() != 3 || self.backbone_channels.contains(&0) {
            return Err(ModelError::Config(format!(
                "backbone_channels must list three positive widths, got {:?}",
                self.backbone_channels
            )));
        }
        for (name, dim) in [("model_dim", self.model_dim), ("text_dim", self.text_dim)] {
            if dim % self.heads != 0 {
                return Err(ModelError::Config(format!(
                    "{name} {dim} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if !self.model_dim.is_multiple_of(4) {
            return Err(ModelError::Config(format!(
                "model_dim {} must be divisible by 4 for 2-d positions",
                self.model_dim
            )));
        }
        if !self.text_dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "text_dim {} must be even",
                self.text_dim
            )));
        }
        Ok(())
    }

    /// Named scalar view used for checkpoint compatibility checks.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .backbone_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (format!("backbone_channels.{i}"), c as f64))
            .collect();
        out.push((
            "backbone_levels".into(),
            self.backbone_channels.len() as f64,
        ));
        for (k, v) in [
            ("model_dim", self.model_dim),
            ("text_dim", self.text_dim),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("text_encoder_layers", self.text_encoder_layers),
            ("text_decoder_layers", self.text_decoder_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("top_k", self.top_k),
            ("fusion_queries", self.fusion_queries),
            ("num_classes", self.num_classes),
            ("num_morph", self.num_morph),
            ("vocab_size", self.vocab_size),
            ("upsampler_channels", self.upsampler_channels),
            ("max_answer_len", self.max_answer_len),
        ] {
            out.push((k.into(), v as f64));
        }
        out.push((
            "upsample".into(),
            match self.upsample {
                UpsampleMode::Bilinear => 0.0,
                UpsampleMode::Learnable => 1.0,
            },
        ));
        out.push((
            "integrate_backbone".into(),
            f64::from(u8::from(self.integrate_backbone)),
        ));
        out
    }
}

impl ModelConfig {
    /// Inverse of [`entries`](Self::entries); missing keys are an error.
    pub fn from_entries(entries: &[(String, f64)]) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|&(_, v)| v as usize)
                .ok_or_else(|| ModelError::Config(format!("missing config entry {key}")))
        };
        let levels = get("backbone_levels")?;
        let cfg = ModelConfig {
            backbone_channels: (0..levels)
                .map(|i| get(&format!("backbone_channels.{i}")))
                .collect::<Result<_>>()?,
            model_dim: get("model_dim")?,
            text_dim: get("text_dim")?,
            heads: get("heads")?,
            encoder_layers: get("encoder_layers")?,
            decoder_layers: get("decoder_layers")?,
            text_encoder_layers: get("text_encoder_layers")?,
            text_decoder_layers: get("text_decoder_layers")?,
            mlp_ratio: get("mlp_ratio")?,
            top_k: get("top_k")?,
            fusion_queries: get("fusion_queries")?,
            num_classes: get("num_classes")?,
            num_morph: get("num_morph")?,
            vocab_size: get("vocab_size")?,
            upsampler_channels: get("upsampler_channels")?,
            max_answer_len: get("max_answer_len")?,
            upsample: if get("upsample")? == 0 {
                UpsampleMode::Bilinear
            } else {
                UpsampleMode::Learnable
            },
            integrate_backbone: get("integrate_backbone")? != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First 8 bytes of the SHA-256 of `value`'s compact JSON, as hex.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Everything a training run needs: the architecture plus optimisation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Linear warm-up length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    /// Epochs for stages 1–6.
    pub epochs_per_stage: [usize; 6],
    /// Overrides the epoch count when set: exact optimizer steps per stage.
    pub steps_per_stage: Option<[usize; 6]>,
    pub seed: u64,
    pub batch_per_task: usize,
    pub clip_norm: f64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            warmup_steps: 0,
            epochs_per_stage: [3, 3, 4, 4, 4, 3],
            steps_per_stage: None,
            seed: 0,
            batch_per_task: 2,
            clip_norm: 1.0,
            loss_weights: LossWeights::default(),
        }
    }
}

/// Detection matching/loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub morph: f64,
    /// Weight of "no-object" rows in the detection class loss.
    pub no_object: f64,
    /// Weight of the per-token objectness loss.
    pub objectness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            morph: 1.0,
            no_object: 0.1,
            objectness: 1.0,
        }
    }
}

impl TrainConfig {
    /// Epoch counts for full-scale training; stage 2 keeps the default count.
    pub const FULL_SCALE_EPOCHS: [usize; 6] = [24, 3, 12, 12, 24, 8];

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config("learning_rate must be positive".into()));
        }
        if self.batch_per_task == 0 {
            return Err(ModelError::Config("batch_per_task must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(ModelError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short hex digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        ModelConfig::small().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_dims() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = TrainConfig::from_json(r#"{"seed": 7, "model": {"model_dim": 32}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.model.model_dim, 32);
        assert_eq!(partial.model.heads, 4);
        assert!(TrainConfig::from_json(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn entries_round_trip() {
        for cfg in [ModelConfig::default(), ModelConfig::small()] {
            assert_eq!(ModelConfig::from_entries(&cfg.entries()).unwrap(), cfg);
        }
        let mut e = ModelConfig::default().entries();
        e.retain(|(k, _)| k != "heads");
        assert!(matches!(
            ModelConfig::from_entries(&e),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
    }
}
