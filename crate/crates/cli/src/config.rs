//! Run configuration: a JSON file selecting module configs, paths, and
//! seeds.  Unknown keys are rejected; the resolved config (after flag
//! overrides) is echoed verbatim into the run directory so every run is
//! auditable.

use std::path::{Path, PathBuf};

use gspc_core::adapter::QFormerConfig;
use gspc_core::audio::AugmentPolicy;
use gspc_core::encoder::EncoderConfig;
use gspc_core::filter::Metric;
use gspc_core::llm::{GenerationConfig, LlmConfig, LoraConfig, Tokenizer};
use gspc_core::train::{AdamW, TriangularLr};
use serde::{Deserialize, Serialize};

/// LLM architecture without the vocabulary-dependent fields (those come
/// from the tokenizer at load time).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmArch {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub relative_bias: bool,
}

impl Default for LlmArch {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 48,
            num_heads: 4,
            ffn_dim: 96,
            max_seq_len: 512,
            relative_bias: true,
        }
    }
}

impl LlmArch {
    pub fn to_config(&self, tokenizer: &Tokenizer) -> LlmConfig {
        LlmConfig {
            vocab_size: tokenizer.vocab_size(),
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            audio_token_id: tokenizer.audio_id,
            relative_bias: self.relative_bias,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub num_parts: usize,
    pub lr: TriangularLr,
    pub augment: AugmentPolicy,
    pub log_every: u64,
}

impl Default for EncoderTrainSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            num_parts: 2,
            lr: TriangularLr::encoder_toy(240),
            augment: AugmentPolicy::disabled(),
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterTrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: TriangularLr,
    pub alpha: f64,
    pub log_every: u64,
    /// Pin one prompt template per record (desk-scale default); `false`
    /// re-draws a template on every occurrence as at full scale.
    pub fixed_prompt_per_record: bool,
}

impl Default for AdapterTrainSection {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch_size: 8,
            lr: TriangularLr::adapter_toy(2500, 250, 3e-3),
            alpha: 0.6,
            log_every: 25,
            fixed_prompt_per_record: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub metric: Metric,
    pub threshold: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self { metric: Metric::Wer, threshold: 0.3 }
    }
}

/// Paths to override the builtin prompt pools (all three required).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolPaths {
    pub asr: PathBuf,
    pub ast: PathBuf,
    pub cot_ast: PathBuf,
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// ISO date substituted into the system prompt (fixed for
    /// reproducibility; never wall-clock).
    pub date: String,
    pub run_dir: PathBuf,
    /// Characters of the CTC alphabet (blank excluded).
    pub alphabet: String,
    pub vocab_file: Option<PathBuf>,
    pub prompt_pools: Option<PoolPaths>,
    pub encoder: EncoderConfig,
    pub qformer: QFormerConfig,
    pub llm: LlmArch,
    pub lora: LoraConfig,
    pub generation: GenerationConfig,
    pub adam: AdamW,
    pub encoder_train: EncoderTrainSection,
    pub adapter_train: AdapterTrainSection,
    pub filter: FilterSection,
    /// Inference chunk size for batched decoding.
    pub decode_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let alphabet = "abcde".to_string();
        let encoder = EncoderConfig::toy(160, alphabet.chars().count() + 1);
        let llm = LlmArch::default();
        Self {
            seed: 42,
            date: "2025-01-01".into(),
            run_dir: PathBuf::from("runs/default"),
            alphabet,
            vocab_file: None,
            prompt_pools: None,
            qformer: QFormerConfig {
                num_queries: 2,
                window_frames: 10,
                num_layers: 2,
                enc_dim: encoder.hidden_dim,
                model_dim: 64,
                num_heads: 4,
                llm_dim: llm.model_dim,
            },
            encoder,
            llm,
            lora: LoraConfig::with_rank(4),
            generation: GenerationConfig::default(),
            adam: AdamW::default(),
            encoder_train: EncoderTrainSection::default(),
            adapter_train: AdapterTrainSection::default(),
            filter: FilterSection::default(),
            decode_batch: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {}", path.display(), e))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| anyhow::anyhow!("bad config {}: {}", path.display(), e))?;
        Ok(cfg)
    }

    /// Echo the resolved configuration into the run directory.
    pub fn echo(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.run_dir)?;
        std::fs::write(self.run_dir.join("config.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn tokenizer(&self) -> anyhow::Result<Tokenizer> {
        Ok(match &self.vocab_file {
            Some(path) => Tokenizer::from_file(path)?,
            None => Tokenizer::builtin(),
        })
    }

    pub fn pools(&self) -> anyhow::Result<gspc_core::prompting::PromptPools> {
        Ok(match &self.prompt_pools {
            Some(p) => gspc_core::prompting::PromptPools::from_files(&p.asr, &p.ast, &p.cot_ast)?,
            None => gspc_core::prompting::PromptPools::builtin(),
        })
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.run_dir.join("reports")
    }
}
