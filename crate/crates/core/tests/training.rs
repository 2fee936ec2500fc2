//! End-to-end checks of the training loops on synthetic tone data:
//! loss actually decreases, runs are byte-deterministic, resume replays
//! the cold run, and the adapter phase never touches frozen weights.

use gspc_core::adapter::QFormerConfig;
use gspc_core::audio::synth::ToneMap;
use gspc_core::audio::AugmentPolicy;
use gspc_core::data::synth_dataset;
use gspc_core::encoder::EncoderConfig;
use gspc_core::llm::{init_llm_store, LlmConfig, LoraConfig, Tokenizer};
use gspc_core::prompting::PromptPools;
use gspc_core::store::NamedTensorStore;
use gspc_core::train::{
    train_adapter, train_encoder, AdamW, AdapterTrainSetup, EncoderTrainSetup, TriangularLr,
};

const ALPHABET: &str = "abc";

fn toy_encoder_cfg() -> EncoderConfig {
    let mut cfg = EncoderConfig::toy(160, ALPHABET.len() + 1);
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.head_size = 8;
    cfg.conv_kernel = 7;
    cfg
}

fn toy_setup(epochs: usize, steps_total: u64) -> EncoderTrainSetup {
    EncoderTrainSetup {
        encoder: toy_encoder_cfg(),
        alphabet_chars: ALPHABET.to_string(),
        epochs,
        batch_size: 4,
        num_parts: 2,
        lr: TriangularLr::encoder_toy(steps_total),
        augment: AugmentPolicy::disabled(),
        adam: AdamW::default(),
        seed: 11,
        log_every: 1,
    }
}

fn read_losses(path: &std::path::Path) -> Vec<(u64, f64, f64, f64)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn encoder_toy_training_reduces_loss() {
    let (_, records) = synth_dataset(3, 16, ALPHABET, "toy").unwrap();
    let tones = ToneMap::for_alphabet(ALPHABET);
    let dir = tempfile::tempdir().unwrap();
    let setup = toy_setup(12, 48);
    let outcome = train_encoder(&setup, &records, &tones, dir.path(), false).unwrap();
    assert_eq!(outcome.steps_done, 48);

    let losses = read_losses(&dir.path().join("logs/encoder_train.csv"));
    assert!(losses.len() >= 40);
    let early: f64 = losses[..5].iter().map(|r| r.3).sum::<f64>() / 5.0;
    let late: f64 = losses[losses.len() - 5..].iter().map(|r| r.3).sum::<f64>() / 5.0;
    assert!(
        late < early * 0.8,
        "final CTC loss {} did not improve on initial {}",
        late,
        early
    );
    // Logged LR curve follows the triangular shape.
    let lrs: Vec<f64> = losses.iter().map(|r| r.1).collect();
    let peak_at = lrs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert!(peak_at > 2 && peak_at < lrs.len() - 2, "peak at {}", peak_at);
    assert!(lrs[0] < lrs[peak_at] && *lrs.last().unwrap() < lrs[peak_at]);
}

#[test]
fn zero_epoch_training_returns_initialization_unchanged() {
    let (_, records) = synth_dataset(4, 8, ALPHABET, "toy").unwrap();
    let tones = ToneMap::for_alphabet(ALPHABET);
    let dir = tempfile::tempdir().unwrap();
    let setup = toy_setup(0, 10);
    let outcome = train_encoder(&setup, &records, &tones, dir.path(), false).unwrap();
    assert_eq!(outcome.steps_done, 0);
    let trained = NamedTensorStore::load(&outcome.checkpoint).unwrap();
    let fresh = gspc_core::encoder::init_store(&setup.encoder, setup.seed);
    assert_eq!(trained, fresh);
}

#[test]
fn encoder_training_is_deterministic() {
    let (_, records) = synth_dataset(5, 8, ALPHABET, "toy").unwrap();
    let tones = ToneMap::for_alphabet(ALPHABET);
    let run = |dir: &std::path::Path| {
        let setup = toy_setup(2, 4);
        train_encoder(&setup, &records, &tones, dir, false).unwrap()
    };
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    let oa = run(da.path());
    let ob = run(db.path());
    let bytes_a = std::fs::read(&oa.checkpoint).unwrap();
    let bytes_b = std::fs::read(&ob.checkpoint).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn resume_replays_the_cold_run_exactly() {
    let (_, records) = synth_dataset(6, 12, ALPHABET, "toy").unwrap();
    let tones = ToneMap::for_alphabet(ALPHABET);

    let cold_dir = tempfile::tempdir().unwrap();
    let cold = train_encoder(&toy_setup(4, 12), &records, &tones, cold_dir.path(), false).unwrap();

    let warm_dir = tempfile::tempdir().unwrap();
    train_encoder(&toy_setup(2, 12), &records, &tones, warm_dir.path(), false).unwrap();
    let warm = train_encoder(&toy_setup(4, 12), &records, &tones, warm_dir.path(), true).unwrap();

    assert_eq!(cold.steps_done, warm.steps_done);
    assert_eq!(
        std::fs::read(&cold.checkpoint).unwrap(),
        std::fs::read(&warm.checkpoint).unwrap(),
        "resumed run diverged from the cold run"
    );
    let cold_losses = read_losses(&cold_dir.path().join("logs/encoder_train.csv"));
    let warm_losses = read_losses(&warm_dir.path().join("logs/encoder_train.csv"));
    assert_eq!(cold_losses, warm_losses);
}

#[test]
fn adapter_training_touches_only_adapter_and_lora() {
    let (_, records) = synth_dataset(7, 6, ALPHABET, "toy").unwrap();
    let tones = ToneMap::for_alphabet(ALPHABET);
    let enc_cfg = toy_encoder_cfg();
    let enc_store = gspc_core::encoder::init_store(&enc_cfg, 1);

    let tokenizer = Tokenizer::builtin();
    let mut llm_cfg = LlmConfig::toy(tokenizer.vocab_size(), tokenizer.audio_id);
    llm_cfg.model_dim = 16;
    llm_cfg.num_heads = 2;
    llm_cfg.ffn_dim = 32;
    let llm_store = init_llm_store(&llm_cfg, 2);

    let setup = AdapterTrainSetup {
        qformer: QFormerConfig {
            num_queries: 2,
            window_frames: 10,
            num_layers: 2,
            enc_dim: enc_cfg.hidden_dim,
            model_dim: 16,
            num_heads: 2,
            llm_dim: llm_cfg.model_dim,
        },
        llm: llm_cfg.clone(),
        lora: LoraConfig::with_rank(4),
        steps: 3,
        batch_size: 2,
        lr: TriangularLr::adapter_toy(3, 1, 3e-4),
        alpha: 0.6,
        adam: AdamW::default(),
        seed: 21,
        log_every: 1,
        date: "2025-01-01".into(),
        fixed_prompt_per_record: true,
    };
    let dir = tempfile::tempdir().unwrap();
    let outcome = train_adapter(
        &setup,
        &records,
        &tones,
        &enc_cfg,
        &enc_store,
        &llm_store,
        &PromptPools::builtin(),
        &tokenizer,
        dir.path(),
        false,
    )
    .unwrap();
    assert!(outcome.last_loss.unwrap().is_finite());

    let ckpt = NamedTensorStore::load(&outcome.checkpoint).unwrap();
    assert!(ckpt.len() > 0);
    for name in ckpt.names() {
        assert!(
            name.starts_with("adapter.") || name.starts_with("lora."),
            "frozen namespace leaked into the adapter checkpoint: {}",
            name
        );
    }
    // LoRA B matrices must have moved off zero (gradients reach them).
    let b = ckpt.get("lora.layer0.q.b").unwrap();
    assert!(b.data.iter().any(|&v| v != 0.0), "lora never received gradient");
    let q = ckpt.get("adapter.queries").unwrap();
    assert!(!q.data.is_empty());
}
