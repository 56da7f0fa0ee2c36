//! Run configuration: one struct covering every module, serializable to TOML
//! so a checkpoint can embed the exact settings that produced it.

use crate::backbone::BackboneConfig;
use crate::data::{AugmentConfig, SizeGradient};
use crate::heads::{DecoderConfig, TamConfig};
use crate::losses::{LossWeights, SinkhornConfig};
use crate::optim::AdamConfig;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub scenes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub size_gradient: SizeGradient,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenes: 200,
            image_h: 64,
            image_w: 64,
            count_min: 5,
            count_max: 60,
            size_gradient: SizeGradient::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    pub tam: TamConfig,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub sinkhorn: SinkhornConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub gen: GenConfig,
    /// Ablation switches; disabling removes the whole parameter subgraph.
    pub use_tam: bool,
    pub use_rtm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Linear learning-rate warmup over this many optimizer steps.
    pub warmup_steps: usize,
    /// Cosine-decay the learning rate from `adam.lr` to 1% of it after warmup.
    pub cosine_lr: bool,
    /// Clip the global L2 gradient norm to this value; 0 disables clipping.
    pub clip_grad_norm: f64,
    /// Save a checkpoint every this many epochs (plus best-by-val).
    pub checkpoint_every: usize,
    pub checkpoint_dir: String,
    pub log_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tokenizer: TokenizerConfig::default(),
            backbone: BackboneConfig::default(),
            tam: TamConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossWeights::default(),
            sinkhorn: SinkhornConfig::default(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            gen: GenConfig::default(),
            use_tam: true,
            use_rtm: true,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            warmup_steps: 20,
            cosine_lr: true,
            clip_grad_norm: 1.0,
            checkpoint_every: 10,
            checkpoint_dir: "runs/default".to_string(),
            log_path: "runs/default/loss.jsonl".to_string(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `dotted.key=value` override on top of the serialized form.
    pub fn with_override(&self, key: &str, value: &str) -> Result<RunConfig, String> {
        let mut root: toml::Value = toml::from_str(&self.to_toml()).unwrap();
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| format!("unknown config section `{part}` in `{key}`"))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("`{key}` does not address a config table"))?;
        let leaf = *parts.last().unwrap();
        let current = table
            .get(leaf)
            .ok_or_else(|| format!("unknown config key `{key}`"))?;
        let parsed: toml::Value = match current {
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            _ => {
                let doc: toml::Value = format!("v = {value}")
                    .parse()
                    .map_err(|e| format!("bad value for `{key}`: {e}"))?;
                doc.get("v").unwrap().clone()
            }
        };
        table.insert(leaf.to_string(), parsed);
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.backbone.validate()?;
        if self.backbone.d != self.tokenizer.final_dim {
            return Err(format!(
                "backbone.d={} must equal tokenizer.final_dim={}",
                self.backbone.d, self.tokenizer.final_dim
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err("epochs and batch_size must be >= 1".to_string());
        }
        if self.checkpoint_every == 0 {
            return Err("checkpoint_every must be >= 1".to_string());
        }
        if self.sinkhorn.epsilon <= 0.0 || self.sinkhorn.max_iters == 0 {
            return Err("sinkhorn.epsilon must be > 0 and max_iters >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return Err("augment.hflip_prob must be in [0, 1]".to_string());
        }
        for (name, v) in [
            ("loss.lambda", self.loss.lambda),
            ("loss.lambda1", self.loss.lambda1),
            ("loss.lambda2", self.loss.lambda2),
            ("loss.aux_weight", self.loss.aux_weight),
        ] {
            if v < 0.0 {
                return Err(format!("{name} must be >= 0"));
            }
        }
        if self.clip_grad_norm < 0.0 {
            return Err("clip_grad_norm must be >= 0 (0 disables)".to_string());
        }
        if self.gen.count_min > self.gen.count_max {
            return Err("gen.count_min must be <= gen.count_max".to_string());
        }
        Ok(())
    }

    /// Token count for the training crop; the position embedding is sized
    /// for this grid.
    pub fn crop_tokens(&self) -> Result<usize, String> {
        self.tokenizer
            .token_count(self.augment.crop_h, self.augment.crop_w)
            .map_err(|e| e.to_string())
    }
}
