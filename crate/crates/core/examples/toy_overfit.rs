//! Full-pipeline overfit demo on synthetic tone data: CTC-pretrain a tiny
//! encoder, train the Q-former adapter + LoRA against a frozen toy LLM,
//! then decode the training set and report exact-match rates.
//!
//! Hyperparameters can be overridden through environment variables for
//! quick experiments, e.g. `ADAPTER_STEPS=800 cargo run --release
//! --example toy_overfit`.

use gspc_core::adapter::QFormerConfig;
use gspc_core::audio::synth::ToneMap;
use gspc_core::audio::AugmentPolicy;
use gspc_core::data::synth_dataset;
use gspc_core::encoder::{conformer_forward, ctc_greedy_decode, Alphabet, EncoderConfig, EncoderParams};
use gspc_core::llm::{encode_chat, init_llm_store, GenerationConfig, LlmConfig, LoraConfig, Tokenizer};
use gspc_core::pipeline::{SpeechStack, StackConfig};
use gspc_core::prompting::{build_prompt, PromptPools};
use gspc_core::store::NamedTensorStore;
use gspc_core::train::{
    train_adapter, train_encoder, AdamW, AdapterTrainSetup, EncoderTrainSetup, TriangularLr,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALPHABET: &str = "abcde";

fn env_u64(name: &str, default: u64) -> u64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let seed = env_u64("SEED", 42);
    let t0 = std::time::Instant::now();
    let (_, records) = synth_dataset(seed, 32, ALPHABET, "toy").unwrap();
    let tones = ToneMap::for_alphabet(ALPHABET);
    let tokenizer = Tokenizer::builtin();
    let pools = PromptPools::builtin();
    let date = "2025-01-01";
    let dir = std::env::temp_dir().join(format!("toy_overfit_{}", std::process::id()));

    // Phase 1: CTC pretraining of the 2-layer, 64-dim encoder.
    let enc_cfg = EncoderConfig::toy(160, ALPHABET.len() + 1);
    let enc_epochs = env_u64("ENC_EPOCHS", 60) as usize;
    let enc_steps = (records.len() as u64 / 8) * enc_epochs as u64;
    let enc_setup = EncoderTrainSetup {
        encoder: enc_cfg.clone(),
        alphabet_chars: ALPHABET.into(),
        epochs: enc_epochs,
        batch_size: 8,
        num_parts: 2,
        lr: TriangularLr::encoder_toy(enc_steps),
        augment: AugmentPolicy::disabled(),
        adam: AdamW::default(),
        seed,
        log_every: 20,
    };
    let enc_out = train_encoder(&enc_setup, &records, &tones, &dir, false).unwrap();
    println!(
        "encoder: {} steps, last loss {:?} ({:.1}s)",
        enc_out.steps_done,
        enc_out.last_loss,
        t0.elapsed().as_secs_f64()
    );

    // CTC greedy accuracy on the training set.
    let enc_store = NamedTensorStore::load(&enc_out.checkpoint).unwrap();
    let enc_params = EncoderParams::<f32>::from_store(&enc_cfg, &enc_store).unwrap();
    let alphabet = Alphabet::new(ALPHABET);
    let mut ctc_hits = 0;
    for r in &records {
        let wave = r.load_audio(&tones).unwrap();
        let feats = gspc_core::audio::features_for_eval(&wave).unwrap();
        let (_, _, logits) = conformer_forward(&enc_params, &feats.to_tensor::<f32>()).unwrap();
        let hyp = ctc_greedy_decode(&logits.log_softmax(), &alphabet);
        if hyp == r.text {
            ctc_hits += 1;
        }
    }
    println!("ctc greedy exact match: {}/{}", ctc_hits, records.len());

    // Phase 2: adapter + LoRA against the frozen toy LLM.
    let mut llm_cfg = LlmConfig::toy(tokenizer.vocab_size(), tokenizer.audio_id);
    llm_cfg.model_dim = env_u64("LLM_DIM", 64) as usize;
    llm_cfg.ffn_dim = 2 * llm_cfg.model_dim;
    let llm_store = init_llm_store(&llm_cfg, seed ^ 0x5ee5);
    let qf_cfg = QFormerConfig {
        num_queries: 2,
        window_frames: 10,
        num_layers: 2,
        enc_dim: enc_cfg.hidden_dim,
        model_dim: env_u64("QF_DIM", 64) as usize,
        num_heads: 4,
        llm_dim: llm_cfg.model_dim,
    };
    let mut lora_cfg = LoraConfig::with_rank(4);
    lora_cfg.scale_alpha = env_f64("LORA_ALPHA", 4.0);
    let steps = env_u64("ADAPTER_STEPS", 600);
    let adapter_setup = AdapterTrainSetup {
        qformer: qf_cfg.clone(),
        llm: llm_cfg.clone(),
        lora: lora_cfg.clone(),
        steps,
        batch_size: env_u64("ADAPTER_BATCH", 8) as usize,
        lr: TriangularLr::adapter_toy(steps, steps / 10, env_f64("ADAPTER_LR", 1e-3)),
        alpha: 0.6,
        adam: AdamW::default(),
        seed,
        log_every: 25,
        date: date.into(),
        fixed_prompt_per_record: true,
    };
    let adapter_out = train_adapter(
        &adapter_setup,
        &records,
        &tones,
        &enc_cfg,
        &enc_store,
        &llm_store,
        &pools,
        &tokenizer,
        &dir,
        false,
    )
    .unwrap();
    println!(
        "adapter: {} steps, last loss {:?} ({:.1}s)",
        adapter_out.steps_done,
        adapter_out.last_loss,
        t0.elapsed().as_secs_f64()
    );
    let log = std::fs::read_to_string(dir.join("logs/adapter_train.csv")).unwrap();
    for line in log.lines().rev().take(6).collect::<Vec<_>>().iter().rev() {
        println!("  {}", line);
    }

    // Phase 3: decode the training set.
    let stack_cfg = StackConfig {
        encoder: enc_cfg,
        qformer: qf_cfg,
        llm: llm_cfg,
        lora: lora_cfg,
    };
    let adapter_store = NamedTensorStore::load(&adapter_out.checkpoint).unwrap();
    let stack =
        SpeechStack::<f32>::from_stores(&stack_cfg, &enc_store, &adapter_store, &llm_store).unwrap();

    for (label, beam) in [("greedy", 1usize), ("beam4", 4)] {
        let gen = GenerationConfig {
            beam_size: beam,
            max_new_tokens: 12,
            repetition_penalty: 1.0,
        };
        let mut hits = 0;
        let mut shown = 0;
        for r in records.iter() {
            let mut rng = gspc_core::train::record_prompt_rng(seed, &r.id);
            let example = build_prompt(r, &pools, date, &mut rng).unwrap();
            let chat = encode_chat(&tokenizer, &example).unwrap();
            let prompt = &chat.tokens[..chat.prompt_len];
            let wave = r.load_audio(&tones).unwrap();
            let out = stack.decode_speech(&tokenizer, prompt, &wave, &gen).unwrap();
            let hyp = tokenizer.decode(&out.tokens, true);
            if hyp == r.text {
                hits += 1;
            } else if shown < 5 {
                println!("  miss [{}]: ref={:?} hyp={:?}", label, r.text, hyp);
                shown += 1;
            }
        }
        println!(
            "{} exact match: {}/{} ({:.1}s)",
            label,
            hits,
            records.len(),
            t0.elapsed().as_secs_f64()
        );
    }
}
