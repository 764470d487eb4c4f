//! Flat dotted-key experiment configuration: one TOML file, every tunable in
//! one namespace, unknown keys rejected, flag overrides win, and a content
//! digest recorded into checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::LossConfig;
use crate::text::TextConfig;
use crate::vision::VisionConfig;

/// Batch size used in the full-scale training recipe (documentation constant;
/// desk-scale defaults below are what tests run).
pub const FULL_SCALE_BATCH: usize = 32;
/// Iteration count of the full-scale recipe.
pub const FULL_SCALE_ITERS: usize = 300_000;
/// Warmup span of the full-scale recipe.
pub const FULL_SCALE_WARMUP: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // model: radiograph transformer
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub pos_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    // model: text stack
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_enc_blocks: usize,
    pub text_dec_blocks: usize,
    pub text_max_len: usize,
    pub contrast_dim: usize,
    // loss
    pub temperature: f64,
    pub task1: bool,
    pub task2: bool,
    pub view_fusion: bool,
    pub rec_concat: bool,
    pub lsp: bool,
    // pre-training
    pub batch_size: usize,
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub val_every: usize,
    pub lr_radiograph: f64,
    pub lr_text: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    // fine-tuning
    pub ft_batch_size: usize,
    pub ft_total_iters: usize,
    pub ft_warmup_iters: usize,
    pub ft_val_every: usize,
    pub ft_lr: f64,
    // evaluation
    pub cam_threshold: f64,
    // corpus locations
    pub data_dir: String,
    pub target_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            image_size: 224,
            patch_size: 16,
            dim: 128,
            pos_dim: 32,
            heads: 4,
            blocks: 12,
            mlp_ratio: 4,
            text_dim: 128,
            text_heads: 4,
            text_enc_blocks: 4,
            text_dec_blocks: 4,
            text_max_len: 64,
            contrast_dim: 128,
            temperature: 0.1,
            task1: true,
            task2: true,
            view_fusion: true,
            rec_concat: true,
            lsp: false,
            batch_size: 8,
            total_iters: 2000,
            warmup_iters: 100,
            val_every: 100,
            lr_radiograph: 3e-3,
            lr_text: 3e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 42,
            ft_batch_size: 8,
            ft_total_iters: 300,
            ft_warmup_iters: 30,
            ft_val_every: 50,
            ft_lr: 3e-3,
            cam_threshold: 0.6,
            data_dir: "data/source".to_string(),
            target_dir: "data/target".to_string(),
        }
    }
}

macro_rules! config_keys {
    ($(($key:literal, $field:ident, $kind:ident, $doc:literal)),+ $(,)?) => {
        impl ExperimentConfig {
            /// Every key with its current value and one-line description.
            pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
                vec![$(($key, self.$field.to_string(), $doc)),+]
            }

            /// Assign one dotted key from its string form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = value.parse().map_err(|_| {
                            Error::Config(format!("key {key}: cannot parse {value:?} as {}", stringify!($kind)))
                        })?;
                        Ok(())
                    })+
                    _ => Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }
        }
    };
}

config_keys![
    ("model.image_size", image_size, usize, "input image side after cropping"),
    ("model.patch_size", patch_size, usize, "pixels per patch cell side"),
    ("model.dim", dim, usize, "radiograph transformer width"),
    ("model.pos_dim", pos_dim, usize, "width of the concatenated position feature"),
    ("model.heads", heads, usize, "attention heads in the radiograph transformer"),
    ("model.blocks", blocks, usize, "self-attention blocks in the radiograph transformer"),
    ("model.mlp_ratio", mlp_ratio, usize, "hidden width multiple of the block perceptron"),
    ("text.dim", text_dim, usize, "text encoder/decoder width"),
    ("text.heads", text_heads, usize, "attention heads in the text stack"),
    ("text.enc_blocks", text_enc_blocks, usize, "bidirectional encoder blocks"),
    ("text.dec_blocks", text_dec_blocks, usize, "causal decoder blocks"),
    ("text.max_len", text_max_len, usize, "position table size for token sequences"),
    ("text.contrast_dim", contrast_dim, usize, "shared embedding width for the contrastive cosine"),
    ("loss.temperature", temperature, f64, "temperature of the contrastive softmax"),
    ("loss.task1", task1, bool, "enable report generation"),
    ("loss.task2", task2, bool, "enable study-report contrastive alignment"),
    ("loss.view_fusion", view_fusion, bool, "enable attention view fusion (uniform weights otherwise)"),
    ("loss.rec_concat", rec_concat, bool, "enable the recurrent-concatenation readout"),
    ("loss.lsp", lsp, bool, "label-supervised pre-training instead of both tasks"),
    ("train.batch_size", batch_size, usize, "studies per pre-training step"),
    ("train.total_iters", total_iters, usize, "pre-training iterations"),
    ("train.warmup_iters", warmup_iters, usize, "linear warmup span"),
    ("train.val_every", val_every, usize, "validation cadence in iterations"),
    ("train.lr_radiograph", lr_radiograph, f64, "peak learning rate of the radiograph group"),
    ("train.lr_text", lr_text, f64, "peak learning rate of the text group"),
    ("train.momentum", momentum, f64, "SGD momentum"),
    ("train.weight_decay", weight_decay, f64, "weight decay (layer norm and biases exempt)"),
    ("train.seed", seed, u64, "global seed for init, batching and augmentation"),
    ("finetune.batch_size", ft_batch_size, usize, "images per fine-tuning step"),
    ("finetune.total_iters", ft_total_iters, usize, "fine-tuning iterations"),
    ("finetune.warmup_iters", ft_warmup_iters, usize, "fine-tuning warmup span"),
    ("finetune.val_every", ft_val_every, usize, "fine-tuning validation cadence"),
    ("finetune.lr", ft_lr, f64, "fine-tuning peak learning rate"),
    ("eval.cam_threshold", cam_threshold, f64, "confidence threshold for CAM boxes"),
    ("data.dir", data_dir, String, "pre-training corpus directory (holds manifest.jsonl)"),
    ("data.target_dir", target_dir, String, "fine-tuning corpus directory"),
];

impl ExperimentConfig {
    /// Canonical size of stored images: model input plus the crop margin.
    pub fn canonical_size(&self) -> usize {
        self.image_size + crate::data::CROP_MARGIN
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "model.image_size {} not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 || self.text_dim % self.text_heads != 0 {
            return Err(Error::Config("width must be divisible by head count".into()));
        }
        if self.warmup_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "train.warmup_iters {} must be below train.total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.ft_warmup_iters >= self.ft_total_iters {
            return Err(Error::Config("finetune warmup must be below finetune total".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0 < self.cam_threshold && self.cam_threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.cam_threshold must lie in (0,1), got {}",
                self.cam_threshold
            )));
        }
        self.loss_config().validate()?;
        self.vision_config().validate()
    }

    pub fn vision_config(&self) -> VisionConfig {
        VisionConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            dim: self.dim,
            pos_dim: self.pos_dim,
            heads: self.heads,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            rec_concat: self.rec_concat,
        }
    }

    pub fn text_config(&self, vocab_size: usize) -> TextConfig {
        TextConfig {
            vocab_size,
            dim: self.text_dim,
            heads: self.text_heads,
            encoder_blocks: self.text_enc_blocks,
            decoder_blocks: self.text_dec_blocks,
            mlp_ratio: self.mlp_ratio,
            max_len: self.text_max_len,
            memory_dim: self.dim,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            task1_enabled: self.task1,
            task2_enabled: self.task2,
            view_fusion_enabled: self.view_fusion,
            rec_concat_enabled: self.rec_concat,
            lsp_mode: self.lsp,
        }
    }

    /// Sorted `key = value` lines, TOML-parseable; the digest hashes exactly
    /// this text.
    pub fn canonical_string(&self) -> String {
        let mut entries = self.entries();
        entries.sort_by_key(|(k, _, _)| *k);
        let mut out = String::new();
        for (key, value, _) in entries {
            let needs_quotes =
                value.parse::<f64>().is_err() && value != "true" && value != "false";
            if needs_quotes {
                let _ = writeln!(out, "{key} = {value:?}");
            } else {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Parse a TOML document with dotted keys (or nested tables) on top of
    /// the defaults. A key the table above does not list is an error.
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_toml_str(text)?;
        Ok(cfg)
    }

    pub fn apply_toml_str(&mut self, text: &str) -> Result<()> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        let mut flat = Vec::new();
        flatten_toml("", &value, &mut flat)?;
        for (key, value) in flat {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_string())?;
        Ok(())
    }
}

fn flatten_toml(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out)?;
            }
            Ok(())
        }
        toml::Value::String(s) => {
            out.push((prefix.to_string(), s.clone()));
            Ok(())
        }
        toml::Value::Integer(i) => {
            out.push((prefix.to_string(), i.to_string()));
            Ok(())
        }
        toml::Value::Float(f) => {
            out.push((prefix.to_string(), f.to_string()));
            Ok(())
        }
        toml::Value::Boolean(b) => {
            out.push((prefix.to_string(), b.to_string()));
            Ok(())
        }
        other => Err(Error::Config(format!(
            "config key {prefix}: unsupported value type {}",
            other.type_str()
        ))),
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}
