//! Gradient verification suite: every trainable block of the stack checked
//! against central finite differences in f64.
//!
//! Composite blocks (conformer, Q-former, full LLM cross-entropy) are held
//! to 1e-3 relative error, elementary ops and custom-backward ops to 1e-4.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapt, init_qformer_store, QFormerConfig};
use crate::encoder::{
    conformer_forward, ctc_loss, init_store as init_encoder_store, EncoderConfig, EncoderParams,
};
use crate::llm::{init_llm_store, init_lora_store, lora_forward, masked_next_token_loss, LlmConfig, LoraConfig};
use crate::store::NamedTensorStore;
use crate::tensor::{grad_check, grad_check_multi, Tensor};
use crate::train::{bind_llm_from_map, bind_lora_from_map, bind_qformer_from_map};
use crate::{Error, Result};

pub const TOL_ELEMENTARY: f64 = 1e-4;
pub const TOL_COMPOSITE: f64 = 1e-3;
const EPS: f64 = 1e-5;

/// One verified block.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub const BLOCK_NAMES: [&str; 6] = ["elementary", "ctc", "lora", "conformer", "qformer", "llm"];

/// Run the whole suite, or a single block selected by name.
pub fn gradient_suite(only: Option<&str>) -> Result<Vec<BlockReport>> {
    if let Some(name) = only {
        if !BLOCK_NAMES.contains(&name) {
            return Err(Error::Usage(format!(
                "unknown block {:?}; available: {}",
                name,
                BLOCK_NAMES.join(", ")
            )));
        }
    }
    let mut reports = Vec::new();
    for name in BLOCK_NAMES {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        let (err, tol) = match name {
            "elementary" => (elementary_block()?, TOL_ELEMENTARY),
            "ctc" => (ctc_block()?, TOL_ELEMENTARY),
            "lora" => (lora_block()?, TOL_ELEMENTARY),
            "conformer" => (conformer_block()?, TOL_COMPOSITE),
            "qformer" => (qformer_block()?, TOL_COMPOSITE),
            "llm" => (llm_block()?, TOL_COMPOSITE),
            _ => unreachable!(),
        };
        reports.push(BlockReport { name, max_rel_error: err, tolerance: tol });
    }
    Ok(reports)
}

/// Store values as f64 gradcheck inputs, sorted by name.
fn store_inputs(store: &NamedTensorStore) -> (Vec<String>, Vec<(Vec<usize>, Vec<f64>)>) {
    let mut names = Vec::new();
    let mut inputs = Vec::new();
    for (name, t) in store.iter() {
        names.push(name.to_string());
        inputs.push((t.dims.clone(), t.data.iter().map(|&v| v as f64).collect()));
    }
    (names, inputs)
}

fn to_map(names: &[String], tensors: &[Tensor<f64>]) -> BTreeMap<String, Tensor<f64>> {
    names.iter().cloned().zip(tensors.iter().cloned()).collect()
}

fn elementary_block() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let m = rng.gen_range(2..=5);
        let k = rng.gen_range(2..=5);
        let n = rng.gen_range(2..=5);
        let xs: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let ws: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        worst = worst.max(grad_check_multi(
            |p| p[0].matmul(&p[1]).swish().sum_all(),
            &[(vec![m, k], xs.clone()), (vec![k, n], ws)],
            EPS,
        )?);
        worst = worst.max(grad_check(|x| x.softmax(1).mul(x).sum_all(), &[m, k], &xs, EPS)?);
        worst = worst.max(grad_check(|x| x.log_softmax().mul(x).mean_all(), &[m, k], &xs, EPS)?);
        let gain: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
        let bias: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        worst = worst.max(grad_check_multi(
            |p| p[0].layer_norm(&p[1], &p[2], 1e-5).swish().sum_all(),
            &[(vec![m, k], xs.clone()), (vec![k], gain), (vec![k], bias)],
            EPS,
        )?);
        let kern: Vec<f64> = (0..3 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst = worst.max(grad_check_multi(
            |p| p[0].depthwise_conv1d(&p[1]).unwrap().sigmoid().sum_all(),
            &[(vec![m, k], xs.clone()), (vec![3, k], kern)],
            EPS,
        )?);
        let wide: Vec<f64> = (0..m * 2 * k).map(|_| rng.gen_range(-1.5..1.5)).collect();
        worst = worst.max(grad_check(|x| x.glu().sum_all(), &[m, 2 * k], &wide, EPS)?);
    }
    Ok(worst)
}

fn ctc_block() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for case in 0..4 {
        let t = rng.gen_range(4..=7);
        let v = rng.gen_range(3..=5);
        let target: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(1..v)).collect();
        let logits: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let err = grad_check(
            |x| ctc_loss(&x.log_softmax(), &target, 0).unwrap().loss,
            &[t, v],
            &logits,
            EPS,
        )?;
        worst = worst.max(err);
        let _ = case;
    }
    Ok(worst)
}

fn lora_block() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let d = 5;
    let r = 2;
    let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let w = gen(&mut rng, d * d);
    let a = gen(&mut rng, d * r);
    let b = gen(&mut rng, r * d);
    let x = gen(&mut rng, 3 * d);
    grad_check_multi(
        |p| lora_forward(&p[0], &p[1], &p[2], 0.5, true, &p[3]).swish().sum_all(),
        &[
            (vec![d, d], w),
            (vec![d, r], a),
            (vec![r, d], b),
            (vec![3, d], x),
        ],
        EPS,
    )
}

fn conformer_block() -> Result<f64> {
    // Two toy layers so the self-conditioning feedback path is exercised.
    let cfg = EncoderConfig {
        input_dim: 6,
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        head_size: 4,
        conv_kernel: 3,
        output_dim: 5,
        block_seconds: 4.0,
        frame_rate_hz: 50.0,
        w_inter: 0.2,
        w_final: 0.8,
    };
    let store = init_encoder_store(&cfg, 104);
    let (names, mut inputs) = store_inputs(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let t = 5;
    inputs.push((vec![t, 6], (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let probe: Vec<f64> = (0..t * cfg.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    grad_check_multi(
        |p| {
            let map = to_map(&names, &p[..names.len()]);
            let params = EncoderParams::from_map(&cfg, &map).unwrap();
            let (_, inter, fin) = conformer_forward(&params, &p[names.len()]).unwrap();
            let probe_t = Tensor::from_vec(&[t, cfg.output_dim], probe.clone());
            inter.mul(&probe_t).sum_all().add(&fin.mul(&probe_t).sum_all().scale(0.7))
        },
        &inputs,
        EPS,
    )
}

fn qformer_block() -> Result<f64> {
    let cfg = QFormerConfig {
        num_queries: 2,
        window_frames: 4,
        num_layers: 2,
        enc_dim: 6,
        model_dim: 8,
        num_heads: 2,
        llm_dim: 5,
    };
    let store = init_qformer_store(&cfg, 106);
    let (names, mut inputs) = store_inputs(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let t = 6; // two windows, one padded
    inputs.push((vec![t, 6], (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let m = 2 * 2;
    let probe: Vec<f64> = (0..m * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    grad_check_multi(
        |p| {
            let map = to_map(&names, &p[..names.len()]);
            let params = bind_qformer_from_map(&cfg, &map).unwrap();
            let out = adapt(&params, &p[names.len()]).unwrap();
            out.y.mul(&Tensor::from_vec(&[m, 5], probe.clone())).sum_all()
        },
        &inputs,
        EPS,
    )
}

fn llm_block() -> Result<f64> {
    let cfg = LlmConfig {
        vocab_size: 11,
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 16,
        audio_token_id: 3,
        relative_bias: true,
    };
    let lora_cfg = LoraConfig { rank: 2, scale_alpha: 2.0, enabled: true };
    let mut store = init_llm_store(&cfg, 108);
    store.merge(&init_lora_store(&lora_cfg, cfg.num_layers, cfg.model_dim, 109));
    // Zero-init LoRA B kills its gradient signal through A; nudge both.
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for i in 0..cfg.num_layers {
        for site in ["q", "v"] {
            let name = format!("lora.layer{}.{}.b", i, site);
            let entry = store.get(&name).unwrap().clone();
            let data: Vec<f32> = entry.data.iter().map(|_| rng.gen_range(-0.2f32..0.2)).collect();
            store.insert(name, entry.dims, data);
        }
    }
    let (names, mut inputs) = store_inputs(&store);
    // Audio rows spliced over the placeholder participate in the check.
    let audio_rows = 3;
    inputs.push((
        vec![audio_rows, cfg.model_dim],
        (0..audio_rows * cfg.model_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let tokens = vec![1usize, 5, 3, 6, 7, 8, 2]; // includes the audio id 3
    let mask = vec![false, false, false, true, true, true, true];
    grad_check_multi(
        |p| {
            let map = to_map(&names, &p[..names.len()]);
            let llm = bind_llm_from_map(&cfg, &map).unwrap();
            let lora = bind_lora_from_map(&lora_cfg, cfg.num_layers, cfg.model_dim, &map).unwrap();
            let seq = crate::llm::embed_and_splice(&llm, &tokens, &mask, Some(&p[names.len()])).unwrap();
            let logits = crate::llm::forward_embeddings(&llm, &seq.embeddings, Some(&lora)).unwrap();
            masked_next_token_loss(&logits, &seq.targets, &seq.loss_mask).unwrap()
        },
        &inputs,
        EPS,
    )
}
