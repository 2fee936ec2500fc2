//! Desk-scale decoder-only LLM with audio-embedding splicing, LoRA
//! adapters on the query/value projections, and dual speech/text modes.
//!
//! The model is a pre-norm transformer with learned positional embeddings.
//! A prompt containing the `<|audio|>` token has that single position
//! replaced by the adapter's output rows; text-only prompts never touch
//! the speech components, so text-mode behaviour is bit-identical with or
//! without the speech stack loaded.

mod generate;
mod tokenizer;

pub use generate::{
    apply_repetition_penalty, generate, GenerationConfig, Generated, LlmSession, LogitSource,
};
pub use tokenizer::{
    encode_chat, EncodedChat, Tokenizer, ASSISTANT_MARKER, BOS_TOKEN, EOS_TOKEN, PAD_TOKEN,
    SYSTEM_MARKER, USER_MARKER,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    causal_bias, init_attention, init_layer_norm, init_linear, multi_head_attention,
    sinusoidal_rel_table, AttentionP, LayerNormP, LinearP, LoraP,
};
use crate::scalar::Scalar;
use crate::store::NamedTensorStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Decoder architecture.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LlmConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Reserved id of the audio placeholder; never generated.
    pub audio_token_id: usize,
    /// Relative sinusoidal attention bias on top of the learned absolute
    /// positions.  A pretrained decoder brings positional attention
    /// machinery with it; the toy stand-in gets the relative term so
    /// offset-based addressing is learnable through the q-projection.
    #[serde(default = "default_true")]
    pub relative_bias: bool,
}

fn default_true() -> bool {
    true
}

impl LlmConfig {
    pub fn toy(vocab_size: usize, audio_token_id: usize) -> Self {
        Self {
            vocab_size,
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 512,
            audio_token_id,
            relative_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_token_id >= self.vocab_size {
            return Err(Error::Config(format!(
                "audio token id {} outside vocabulary {}",
                self.audio_token_id, self.vocab_size
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config("model_dim must be divisible by num_heads".into()));
        }
        Ok(())
    }
}

/// LoRA setup: rank-limited additive updates on the query and value
/// projections of every attention layer, `W' = W + (alpha/rank) A B`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale_alpha: f64,
    pub enabled: bool,
}

impl LoraConfig {
    /// Rank 64 with alpha = rank (unit scale).
    pub fn reference() -> Self {
        Self { rank: 64, scale_alpha: 64.0, enabled: true }
    }

    pub fn with_rank(rank: usize) -> Self {
        Self { rank, scale_alpha: rank as f64, enabled: true }
    }

    pub fn scale(&self) -> f64 {
        self.scale_alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct LlmLayer<E: Scalar> {
    pub ln_attn: LayerNormP<E>,
    pub attn: AttentionP<E>,
    pub ln_ffn: LayerNormP<E>,
    pub ffn_in: LinearP<E>,
    pub ffn_out: LinearP<E>,
}

/// Base (frozen during adapter training) decoder parameters.
#[derive(Clone)]
pub struct LlmParams<E: Scalar> {
    pub cfg: LlmConfig,
    pub embed: Tensor<E>,
    pub pos: Tensor<E>,
    pub layers: Vec<LlmLayer<E>>,
    pub final_ln: LayerNormP<E>,
    pub head: LinearP<E>,
}

impl<E: Scalar> LlmParams<E> {
    pub fn from_store(cfg: &LlmConfig, store: &NamedTensorStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = |s: &str| format!("llm.layer{}.{}", i, s);
            layers.push(LlmLayer {
                ln_attn: LayerNormP::from_store(store, &p("ln_attn"), d)?,
                attn: AttentionP::from_store(store, &p("attn"), d, d, d, d)?,
                ln_ffn: LayerNormP::from_store(store, &p("ln_ffn"), d)?,
                ffn_in: LinearP::from_store(store, &p("ffn.in"), d, cfg.ffn_dim)?,
                ffn_out: LinearP::from_store(store, &p("ffn.out"), cfg.ffn_dim, d)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed: store.tensor("llm.embed.weight", &[cfg.vocab_size, d])?,
            pos: store.tensor("llm.pos.weight", &[cfg.max_seq_len, d])?,
            layers,
            final_ln: LayerNormP::from_store(store, "llm.final_ln", d)?,
            head: LinearP::from_store(store, "llm.head", d, cfg.vocab_size)?,
        })
    }
}

/// Per-layer LoRA tensors for the q and v projections.
#[derive(Clone)]
pub struct LoraParams<E: Scalar> {
    pub cfg: LoraConfig,
    /// (q_a, q_b, v_a, v_b) per layer.
    pub layers: Vec<(Tensor<E>, Tensor<E>, Tensor<E>, Tensor<E>)>,
}

impl<E: Scalar> LoraParams<E> {
    pub fn from_store(cfg: &LoraConfig, num_layers: usize, model_dim: usize, store: &NamedTensorStore) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.rank;
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            layers.push((
                store.tensor(&format!("lora.layer{}.q.a", i), &[model_dim, r])?,
                store.tensor(&format!("lora.layer{}.q.b", i), &[r, model_dim])?,
                store.tensor(&format!("lora.layer{}.v.a", i), &[model_dim, r])?,
                store.tensor(&format!("lora.layer{}.v.b", i), &[r, model_dim])?,
            ));
        }
        Ok(Self { cfg: cfg.clone(), layers })
    }
}

/// Fresh decoder init.
pub fn init_llm_store(cfg: &LlmConfig, seed: u64) -> NamedTensorStore {
    let mut store = NamedTensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.model_dim;
    let gauss = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<f32> {
        (0..n)
            .map(|_| {
                let z: f64 = rand::Rng::sample(rng, rand_distr::StandardNormal);
                (z * std) as f32
            })
            .collect()
    };
    store.insert("llm.embed.weight", vec![cfg.vocab_size, d], gauss(&mut rng, cfg.vocab_size * d, 0.5));
    // Learned positions start from sinusoids (plus a little noise) so
    // relative-offset structure is available from step 0.
    let mut pos = vec![0f32; cfg.max_seq_len * d];
    for t in 0..cfg.max_seq_len {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * rate;
            let base = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            pos[t * d + i] = (0.5 * base + 0.02 * z) as f32;
        }
    }
    store.insert("llm.pos.weight", vec![cfg.max_seq_len, d], pos);
    for i in 0..cfg.num_layers {
        let p = |s: &str| format!("llm.layer{}.{}", i, s);
        init_layer_norm(&mut store, &p("ln_attn"), d);
        init_attention(&mut store, &p("attn"), d, d, d, d, &mut rng);
        init_layer_norm(&mut store, &p("ln_ffn"), d);
        init_linear(&mut store, &p("ffn.in"), d, cfg.ffn_dim, &mut rng);
        init_linear(&mut store, &p("ffn.out"), cfg.ffn_dim, d, &mut rng);
    }
    init_layer_norm(&mut store, "llm.final_ln", d);
    init_linear(&mut store, "llm.head", d, cfg.vocab_size, &mut rng);
    store
}

/// LoRA init: A gaussian, B zero, so the adapted model equals the base at
/// step 0.
pub fn init_lora_store(cfg: &LoraConfig, num_layers: usize, model_dim: usize, seed: u64) -> NamedTensorStore {
    let mut store = NamedTensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (model_dim as f64).sqrt();
    for i in 0..num_layers {
        for site in ["q", "v"] {
            let a: Vec<f32> = (0..model_dim * cfg.rank)
                .map(|_| {
                    let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                    (z * std) as f32
                })
                .collect();
            store.insert(format!("lora.layer{}.{}.a", i, site), vec![model_dim, cfg.rank], a);
            store.insert(
                format!("lora.layer{}.{}.b", i, site),
                vec![cfg.rank, model_dim],
                vec![0.0; cfg.rank * model_dim],
            );
        }
    }
    store
}

/// Standalone LoRA application: `(W + (alpha/rank) A B) x` when enabled,
/// exactly `W x` when disabled.  Row-vector convention: inputs multiply
/// from the left.
pub fn lora_forward<E: Scalar>(
    w: &Tensor<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    scale: f64,
    enabled: bool,
    x: &Tensor<E>,
) -> Tensor<E> {
    let base = x.matmul(w);
    if !enabled {
        return base;
    }
    base.add(&x.matmul(a).matmul(b).scale(scale))
}

/// Merge the low-rank update into a dense matrix: `W + (alpha/rank) A B`.
pub fn merge_lora<E: Scalar>(w: &Tensor<E>, a: &Tensor<E>, b: &Tensor<E>, scale: f64) -> Tensor<E> {
    w.add(&a.matmul(b).scale(scale))
}

/// Operating mode; speech requires both the placeholder and audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Speech,
    Text,
}

/// Speech mode is activated exactly when the prompt contains the audio
/// placeholder AND audio is supplied; a placeholder without audio (or
/// audio without a placeholder) is a prompt error.
pub fn detect_mode(tokens: &[usize], audio_present: bool, audio_token_id: usize) -> Result<Mode> {
    let placeholders = tokens.iter().filter(|&&t| t == audio_token_id).count();
    match (placeholders, audio_present) {
        (0, false) => Ok(Mode::Text),
        (1, true) => Ok(Mode::Speech),
        (0, true) => Err(Error::Prompt("audio supplied but no <|audio|> placeholder".into())),
        (1, false) => Err(Error::Prompt("<|audio|> placeholder without audio".into())),
        (n, _) => Err(Error::Prompt(format!("{} audio placeholders; at most one allowed", n))),
    }
}

/// Token sequence embedded with at most one audio span spliced in.
pub struct SplicedSequence<E: Scalar> {
    /// `[L × model_dim]` input embeddings.
    pub embeddings: Tensor<E>,
    /// True on response positions (set by the caller for training).
    pub loss_mask: Vec<bool>,
    /// For each original token index, its position in the spliced layout.
    pub token_positions: Vec<usize>,
    /// Positions `[start, end)` occupied by audio rows, if any.
    pub audio_span: Option<(usize, usize)>,
    /// Target id per spliced position (None on audio rows).
    pub targets: Vec<Option<usize>>,
}

impl<E: Scalar> SplicedSequence<E> {
    pub fn len(&self) -> usize {
        self.embeddings.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embed tokens and replace the single `<|audio|>` placeholder with the
/// adapter output rows.  `token_loss_mask` travels with the tokens; audio
/// rows never contribute to the loss.
pub fn embed_and_splice<E: Scalar>(
    params: &LlmParams<E>,
    tokens: &[usize],
    token_loss_mask: &[bool],
    audio: Option<&Tensor<E>>,
) -> Result<SplicedSequence<E>> {
    assert_eq!(tokens.len(), token_loss_mask.len());
    let audio_id = params.cfg.audio_token_id;
    detect_mode(tokens, audio.is_some(), audio_id)?;

    let placeholder = tokens.iter().position(|&t| t == audio_id);
    let (embeddings, mask, token_positions, audio_span, targets) = match (placeholder, audio) {
        (Some(at), Some(rows)) => {
            let (m, d) = rows.dims2();
            if d != params.cfg.model_dim {
                return Err(Error::Prompt(format!(
                    "audio embedding dim {} != model dim {}",
                    d, params.cfg.model_dim
                )));
            }
            let before = Tensor::embedding(&params.embed, &tokens[..at]);
            let after = Tensor::embedding(&params.embed, &tokens[at + 1..]);
            let embeddings = Tensor::concat_rows(&[before, rows.clone(), after]);
            let mut mask = Vec::with_capacity(tokens.len() - 1 + m);
            let mut targets = Vec::with_capacity(tokens.len() - 1 + m);
            let mut positions = Vec::with_capacity(tokens.len());
            mask.extend(&token_loss_mask[..at]);
            targets.extend(tokens[..at].iter().map(|&t| Some(t)));
            positions.extend(0..at);
            positions.push(at); // placeholder maps to the span start
            mask.extend(std::iter::repeat(false).take(m));
            targets.extend(std::iter::repeat(None).take(m));
            mask.extend(&token_loss_mask[at + 1..]);
            targets.extend(tokens[at + 1..].iter().map(|&t| Some(t)));
            positions.extend((at + 1..tokens.len()).map(|i| i - 1 + m));
            (embeddings, mask, positions, Some((at, at + m)), targets)
        }
        (None, None) => {
            let embeddings = Tensor::embedding(&params.embed, tokens);
            (
                embeddings,
                token_loss_mask.to_vec(),
                (0..tokens.len()).collect(),
                None,
                tokens.iter().map(|&t| Some(t)).collect(),
            )
        }
        // detect_mode already rejected the inconsistent combinations
        _ => unreachable!(),
    };
    Ok(SplicedSequence {
        embeddings,
        loss_mask: mask,
        token_positions,
        audio_span,
        targets,
    })
}

/// Decoder forward over already-spliced input embeddings -> `[L × V]`
/// logits.  `lora`, when supplied, adds rank-limited deltas to every
/// layer's q/v projections.
pub fn forward_embeddings<E: Scalar>(
    params: &LlmParams<E>,
    spliced: &Tensor<E>,
    lora: Option<&LoraParams<E>>,
) -> Result<Tensor<E>> {
    let (l, d) = spliced.dims2();
    if d != params.cfg.model_dim {
        return Err(Error::Input(format!("embedding dim {} != model dim {}", d, params.cfg.model_dim)));
    }
    if l > params.cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max {}",
            l, params.cfg.max_seq_len
        )));
    }
    let lora = lora.filter(|l| l.cfg.enabled);
    let bias = causal_bias::<E>(l);
    let rel = params
        .cfg
        .relative_bias
        .then(|| sinusoidal_rel_table::<E>(l, params.cfg.model_dim / params.cfg.num_heads));
    let mut h = spliced.add(&params.pos.slice_rows(0, l));
    for (i, layer) in params.layers.iter().enumerate() {
        let (lq, lv) = match lora {
            Some(lp) => {
                let (qa, qb, va, vb) = &lp.layers[i];
                (
                    Some(LoraP { a: qa.clone(), b: qb.clone(), scale: lp.cfg.scale() }),
                    Some(LoraP { a: va.clone(), b: vb.clone(), scale: lp.cfg.scale() }),
                )
            }
            None => (None, None),
        };
        let normed = layer.ln_attn.apply(&h);
        h = h.add(
            &multi_head_attention(
                &normed,
                &normed,
                &layer.attn,
                params.cfg.num_heads,
                Some(&bias),
                rel.as_ref(),
                lq.as_ref(),
                lv.as_ref(),
            )
            .output,
        );
        let normed = layer.ln_ffn.apply(&h);
        h = h.add(&layer.ffn_out.apply(&layer.ffn_in.apply(&normed).swish()));
    }
    Ok(params.head.apply(&params.final_ln.apply(&h)))
}

/// Mean next-token cross-entropy over response positions only.
///
/// Position `t` is scored from the logits at `t-1`; audio rows and prompt
/// positions are excluded by the loss mask.
pub fn next_token_loss<E: Scalar>(
    params: &LlmParams<E>,
    lora: Option<&LoraParams<E>>,
    seq: &SplicedSequence<E>,
) -> Result<Tensor<E>> {
    let logits = forward_embeddings(params, &seq.embeddings, lora)?;
    masked_next_token_loss(&logits, &seq.targets, &seq.loss_mask)
}

/// The loss core, exposed for verification against hand-built logits.
pub fn masked_next_token_loss<E: Scalar>(
    logits: &Tensor<E>,
    targets: &[Option<usize>],
    loss_mask: &[bool],
) -> Result<Tensor<E>> {
    let (l, _) = logits.dims2();
    assert_eq!(targets.len(), l);
    assert_eq!(loss_mask.len(), l);
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for t in 1..l {
        if loss_mask[t] {
            let Some(target) = targets[t] else {
                return Err(Error::Data("loss mask set on a position without a token target".into()));
            };
            rows.push(t - 1);
            cols.push(target);
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("empty loss mask: no response positions to score".into()));
    }
    let log_probs = logits.log_softmax();
    // Gather log p(target_t | prefix) at the predicting row t-1.
    let mut full_cols = vec![0usize; l];
    for (&r, &c) in rows.iter().zip(&cols) {
        full_cols[r] = c;
    }
    let picked = log_probs.select_positions(&full_cols);
    Ok(picked.mean_subset(&rows).neg())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_setup(seed: u64) -> (LlmConfig, LlmParams<f64>) {
        let tok = Tokenizer::builtin();
        let mut cfg = LlmConfig::toy(tok.vocab_size(), tok.audio_id);
        cfg.model_dim = 16;
        cfg.num_heads = 2;
        cfg.ffn_dim = 32;
        let store = init_llm_store(&cfg, seed);
        let params = LlmParams::from_store(&cfg, &store).unwrap();
        (cfg, params)
    }

    #[test]
    fn splice_length_arithmetic() {
        let (_, params) = toy_setup(1);
        let tok = Tokenizer::builtin();
        // 10 tokens incl 1 placeholder + 6 audio rows -> L = 15
        let mut tokens = tok.encode("abc def13").unwrap();
        assert_eq!(tokens.len(), 9);
        tokens.insert(4, tok.audio_id);
        let audio = Tensor::<f64>::zeros(&[6, 16]);
        let seq = embed_and_splice(&params, &tokens, &vec![false; 10], Some(&audio)).unwrap();
        assert_eq!(seq.len(), 15);
        assert_eq!(seq.audio_span, Some((4, 10)));
    }

    #[test]
    fn text_mode_is_pure_embedding_passthrough() {
        let (_, params) = toy_setup(2);
        let tok = Tokenizer::builtin();
        let tokens = tok.encode("hello").unwrap();
        let seq = embed_and_splice(&params, &tokens, &vec![false; 5], None).unwrap();
        assert_eq!(seq.len(), 5);
        assert!(seq.audio_span.is_none());
        let direct = Tensor::embedding(&params.embed, &tokens);
        assert_eq!(seq.embeddings.data(), direct.data());
    }

    #[test]
    fn spliced_rows_carry_adapter_output_bit_for_bit() {
        let (_, params) = toy_setup(3);
        let tok = Tokenizer::builtin();
        let mut tokens = tok.encode("xy").unwrap();
        tokens.insert(1, tok.audio_id);
        use rand::SeedableRng;
        let audio = Tensor::<f64>::randn(&[4, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let seq = embed_and_splice(&params, &tokens, &vec![false; 3], Some(&audio)).unwrap();
        let (start, end) = seq.audio_span.unwrap();
        assert_eq!((start, end), (1, 5));
        let spliced_rows = &seq.embeddings.data()[start * 16..end * 16];
        assert_eq!(spliced_rows, audio.data());
    }

    #[test]
    fn splice_errors_on_inconsistent_pairs() {
        let (_, params) = toy_setup(4);
        let tok = Tokenizer::builtin();
        let plain = tok.encode("ab").unwrap();
        let audio = Tensor::<f64>::zeros(&[2, 16]);
        assert!(matches!(
            embed_and_splice(&params, &plain, &[false, false], Some(&audio)),
            Err(Error::Prompt(_))
        ));
        let mut with = plain.clone();
        with.push(tok.audio_id);
        assert!(matches!(
            embed_and_splice(&params, &with, &[false; 3], None),
            Err(Error::Prompt(_))
        ));
        let mut double = with.clone();
        double.push(tok.audio_id);
        assert!(matches!(
            embed_and_splice(&params, &double, &[false; 4], Some(&audio)),
            Err(Error::Prompt(_))
        ));
    }

    #[test]
    fn mode_detection_rules() {
        let tok = Tokenizer::builtin();
        let plain = tok.encode("hello").unwrap();
        let mut speech = plain.clone();
        speech.push(tok.audio_id);
        assert_eq!(detect_mode(&plain, false, tok.audio_id).unwrap(), Mode::Text);
        assert_eq!(detect_mode(&speech, true, tok.audio_id).unwrap(), Mode::Speech);
        assert!(detect_mode(&speech, false, tok.audio_id).is_err());
        assert!(detect_mode(&plain, true, tok.audio_id).is_err());
    }

    #[test]
    fn lora_zero_b_equals_base_and_merge_is_algebraic() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(&[6, 6], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        let zero_b = Tensor::<f64>::zeros(&[3, 6]);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let base = lora_forward(&w, &a, &zero_b, 1.0, false, &x);
        let enabled = lora_forward(&w, &a, &zero_b, 1.0, true, &x);
        assert_eq!(base.data(), enabled.data());

        let b = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng);
        let scale = 64.0 / 64.0;
        let via_forward = lora_forward(&w, &a, &b, scale, true, &x);
        let merged = merge_lora(&w, &a, &b, scale);
        let via_merge = x.matmul(&merged);
        for (u, v) in via_forward.data().iter().zip(via_merge.data()) {
            assert!((u - v).abs() <= 1e-6, "{} vs {}", u, v);
        }
    }

    #[test]
    fn reference_lora_rank64_accepted_on_every_layer() {
        let cfg = LoraConfig::reference();
        assert_eq!(cfg.rank, 64);
        assert_eq!(cfg.scale(), 1.0);
        let store = init_lora_store(&cfg, 2, 16, 6);
        let lora = LoraParams::<f32>::from_store(&cfg, 2, 16, &store).unwrap();
        assert_eq!(lora.layers.len(), 2);
        assert_eq!(lora.layers[0].0.dims(), &[16, 64]);
    }

    #[test]
    fn text_logits_identical_with_and_without_lora_disabled() {
        let (cfg, params) = toy_setup(6);
        let tok = Tokenizer::builtin();
        let tokens = tok.encode("hello world").unwrap();
        let seq = embed_and_splice(&params, &tokens, &vec![false; tokens.len()], None).unwrap();
        let lora_cfg = LoraConfig { rank: 4, scale_alpha: 4.0, enabled: false };
        let store = init_lora_store(&lora_cfg, cfg.num_layers, cfg.model_dim, 7);
        let lora = LoraParams::from_store(&lora_cfg, cfg.num_layers, cfg.model_dim, &store).unwrap();
        let base = forward_embeddings(&params, &seq.embeddings, None).unwrap();
        let disabled = forward_embeddings(&params, &seq.embeddings, Some(&lora)).unwrap();
        assert_eq!(base.data(), disabled.data());

        // zero-init B: enabled equals base at step 0
        let enabled_cfg = LoraConfig { enabled: true, ..lora_cfg };
        let lora = LoraParams::from_store(&enabled_cfg, cfg.num_layers, cfg.model_dim, &store).unwrap();
        let enabled = forward_embeddings(&params, &seq.embeddings, Some(&lora)).unwrap();
        for (a, b) in base.data().iter().zip(enabled.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn causality_logits_ignore_future_positions() {
        let (_, params) = toy_setup(7);
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[6, 16], 1.0, &mut rng);
        let logits_full = forward_embeddings(&params, &x, None).unwrap();
        let mut bumped = x.data().to_vec();
        for v in &mut bumped[4 * 16..] {
            *v += 0.9;
        }
        let logits_bumped =
            forward_embeddings(&params, &Tensor::from_vec(&[6, 16], bumped), None).unwrap();
        let v = params.cfg.vocab_size;
        for t in 0..4 {
            for j in 0..v {
                let (a, b) = (logits_full.data()[t * v + j], logits_bumped.data()[t * v + j]);
                assert!((a - b).abs() <= 1e-12, "position {} leaked future info", t);
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let logits = Tensor::<f64>::zeros(&[4, 6]);
        let targets: Vec<Option<usize>> = vec![Some(1), Some(2), Some(3), Some(4)];
        let mask = vec![false, true, true, true];
        let loss = masked_next_token_loss(&logits, &targets, &mask).unwrap();
        assert!((loss.scalar_value() - (6.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_mask_is_that_positions_ce() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let targets: Vec<Option<usize>> = (0..5).map(|i| Some(i % 7)).collect();
        let mut mask = vec![false; 5];
        mask[3] = true;
        let loss = masked_next_token_loss(&logits, &targets, &mask).unwrap();
        let lp = logits.log_softmax();
        let expect = -lp.data()[2 * 7 + 3]; // row 2 predicts position 3, target 3
        assert!((loss.scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_data_error() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let targets: Vec<Option<usize>> = vec![Some(0), Some(1), Some(2)];
        assert!(matches!(
            masked_next_token_loss(&logits, &targets, &[false, false, false]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn loss_gradient_checks_against_finite_differences() {
        use crate::tensor::grad_check;
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..6 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<Option<usize>> = (0..6).map(|i| Some((i * 2) % 5)).collect();
        let mask = vec![false, true, false, true, true, true];
        let err = grad_check(
            |x| masked_next_token_loss(x, &targets, &mask).unwrap(),
            &[6, 5],
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "masked CE gradient error {}", err);
    }
}
