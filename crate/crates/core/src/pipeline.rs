//! Full-stack assembly: frontend → encoder → adapter → spliced LLM decode,
//! plus the pure text-mode path.  Both the CLI and the verification suites
//! drive decoding through these helpers.

use crate::adapter::{adapt, QFormerConfig, QFormerParams};
use crate::audio::{features_for_eval, Waveform};
use crate::encoder::{conformer_forward, EncoderConfig, EncoderParams};
use crate::llm::{
    embed_and_splice, forward_embeddings, generate, GenerationConfig, Generated, LlmConfig,
    LlmParams, LlmSession, LoraConfig, LoraParams, Tokenizer,
};
use crate::scalar::Scalar;
use crate::store::NamedTensorStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Configuration bundle for the speech stack.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StackConfig {
    pub encoder: EncoderConfig,
    pub qformer: QFormerConfig,
    pub llm: LlmConfig,
    pub lora: LoraConfig,
}

/// All loaded parameters of the speech-aware model.
pub struct SpeechStack<E: Scalar> {
    pub cfg: StackConfig,
    pub encoder: EncoderParams<E>,
    pub qformer: QFormerParams<E>,
    pub llm: LlmParams<E>,
    pub lora: LoraParams<E>,
}

impl<E: Scalar> SpeechStack<E> {
    pub fn from_stores(
        cfg: &StackConfig,
        encoder_store: &NamedTensorStore,
        adapter_store: &NamedTensorStore,
        llm_store: &NamedTensorStore,
    ) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            encoder: EncoderParams::from_store(&cfg.encoder, encoder_store)?,
            qformer: QFormerParams::from_store(&cfg.qformer, adapter_store)?,
            llm: LlmParams::from_store(&cfg.llm, llm_store)?,
            lora: LoraParams::from_store(
                &cfg.lora,
                cfg.llm.num_layers,
                cfg.llm.model_dim,
                adapter_store,
            )?,
        })
    }

    /// Acoustic embeddings for a waveform: eval-mode features through the
    /// frozen encoder and the Q-former adapter.
    pub fn audio_embeddings(&self, wave: &Waveform) -> Result<Tensor<E>> {
        let feats = features_for_eval(wave)?;
        let (hidden, _, _) = conformer_forward(&self.encoder, &feats.to_tensor::<E>())?;
        Ok(adapt(&self.qformer, &hidden)?.y)
    }

    /// Speech-mode decode: prompt tokens must contain the placeholder.
    /// LoRA is active (when enabled in config); the audio token can never
    /// be generated.
    pub fn decode_speech(
        &self,
        tokenizer: &Tokenizer,
        prompt_tokens: &[usize],
        wave: &Waveform,
        gen: &GenerationConfig,
    ) -> Result<Generated> {
        let audio = self.audio_embeddings(wave)?;
        let mask = vec![false; prompt_tokens.len()];
        let seq = embed_and_splice(&self.llm, prompt_tokens, &mask, Some(&audio))?;
        let session = LlmSession {
            params: &self.llm,
            lora: self.cfg.lora.enabled.then_some(&self.lora),
            prompt: seq.embeddings,
        };
        generate(&session, gen, tokenizer.eos_id, &[tokenizer.audio_id])
    }
}

/// Text-mode generation: base weights only, LoRA never applied, no speech
/// component touched.
pub fn decode_text<E: Scalar>(
    llm: &LlmParams<E>,
    tokenizer: &Tokenizer,
    prompt_tokens: &[usize],
    gen: &GenerationConfig,
) -> Result<Generated> {
    if prompt_tokens.contains(&tokenizer.audio_id) {
        return Err(Error::Prompt("<|audio|> placeholder without audio".into()));
    }
    let mask = vec![false; prompt_tokens.len()];
    let seq = embed_and_splice(llm, prompt_tokens, &mask, None)?;
    let session = LlmSession { params: llm, lora: None, prompt: seq.embeddings };
    generate(&session, gen, tokenizer.eos_id, &[tokenizer.audio_id])
}

/// Text-mode logits over a prompt (used by mode-purity checks).
pub fn text_logits<E: Scalar>(llm: &LlmParams<E>, prompt_tokens: &[usize]) -> Result<Tensor<E>> {
    let mask = vec![false; prompt_tokens.len()];
    let seq = embed_and_splice(llm, prompt_tokens, &mask, None)?;
    forward_embeddings(llm, &seq.embeddings, None)
}
