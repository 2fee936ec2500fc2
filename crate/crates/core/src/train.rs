//! Training loops: AdamW over a named parameter bank, triangular learning
//! rates, length-sorted encoder batching, and balance-sampled adapter
//! batches.  Every stochastic choice derives from (seed, step), so resumed
//! runs replay the exact step stream of a cold run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt, init_qformer_store, QFormerConfig, QFormerParams};
use crate::audio::{features_for_training, AugmentPolicy, Waveform, SAMPLE_RATE_HZ};
use crate::audio::synth::ToneMap;
use crate::data::{epoch_batches, ManifestRecord, SamplingPlan, sample_corpus};
use crate::encoder::{conformer_forward, init_store as init_encoder_store, Alphabet, EncoderConfig, EncoderParams, self_conditioned_loss};
use crate::llm::{embed_and_splice, encode_chat, init_lora_store, next_token_loss, LlmConfig, LlmParams, LoraConfig, LoraParams, Tokenizer};
use crate::prompting::{build_prompt, PromptPools};
use crate::scalar::Scalar;
use crate::store::NamedTensorStore;
use crate::subseed;
use crate::tensor::{Gradients, Tensor};
use crate::{Error, Result};

/// Warm up linearly from `lr_start` to `lr_peak` over `warmup_steps`, then
/// decay linearly to `lr_floor` at `total_steps - 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriangularLr {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
}

impl TriangularLr {
    /// Full-scale encoder schedule: 5e-5 to 5e-4 over the first 6 of 20
    /// epochs (1.5M updates), then down to 5e-6.
    pub fn encoder_reference() -> Self {
        Self {
            warmup_steps: 450_000,
            total_steps: 1_500_000,
            lr_start: 5e-5,
            lr_peak: 5e-4,
            lr_floor: 5e-6,
        }
    }

    /// Scaled-down encoder schedule with the same triangular shape.
    pub fn encoder_toy(total_steps: u64) -> Self {
        Self {
            warmup_steps: (total_steps * 3) / 10,
            total_steps,
            lr_start: 1e-4,
            lr_peak: 1e-3,
            lr_floor: 1e-5,
        }
    }

    /// Adapter/LoRA schedule: 1000-step warm-up to a 1e-4 peak over 660k
    /// updates at full scale.
    pub fn adapter_reference() -> Self {
        Self {
            warmup_steps: 1000,
            total_steps: 660_000,
            lr_start: 0.0,
            lr_peak: 1e-4,
            lr_floor: 1e-6,
        }
    }

    pub fn adapter_toy(total_steps: u64, warmup_steps: u64, peak: f64) -> Self {
        Self {
            warmup_steps,
            total_steps,
            lr_start: 0.0,
            lr_peak: peak,
            lr_floor: peak / 100.0,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_peak;
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            self.lr_start + (self.lr_peak - self.lr_start) * frac
        } else {
            let span = (self.total_steps - 1).saturating_sub(self.warmup_steps).max(1);
            let frac = (step - self.warmup_steps) as f64 / span as f64;
            self.lr_peak + (self.lr_floor - self.lr_peak) * frac.min(1.0)
        }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Master copies of all named parameters plus optimizer state.
///
/// Trainable entries become grad-requiring tensors each step; frozen ones
/// are constants, so backward cannot produce gradients for them (asserted
/// when applying updates).
pub struct ParamBank {
    masters: NamedTensorStore,
    trainable: BTreeSet<String>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub adam_t: u64,
}

impl ParamBank {
    pub fn new(masters: NamedTensorStore, trainable: impl Fn(&str) -> bool) -> Self {
        let trainable = masters
            .names()
            .filter(|n| trainable(n))
            .map(|n| n.to_string())
            .collect();
        Self { masters, trainable, m: BTreeMap::new(), v: BTreeMap::new(), adam_t: 0 }
    }

    pub fn masters(&self) -> &NamedTensorStore {
        &self.masters
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    /// Live tensors for one training step.
    pub fn tensors<E: Scalar>(&self) -> BTreeMap<String, Tensor<E>> {
        self.masters
            .iter()
            .map(|(name, t)| {
                let data: Vec<E> = t.data.iter().map(|&x| E::from_f64(x as f64)).collect();
                let tensor = if self.trainable.contains(name) {
                    Tensor::param(&t.dims, data)
                } else {
                    Tensor::from_vec(&t.dims, data)
                };
                (name.to_string(), tensor)
            })
            .collect()
    }

    /// AdamW update of every trainable tensor from one backward sweep.
    pub fn apply_step<E: Scalar>(
        &mut self,
        grads: &Gradients<E>,
        tensors: &BTreeMap<String, Tensor<E>>,
        lr: f64,
        opt: &AdamW,
    ) {
        // Frozen tensors are constants; a gradient for one means the graph
        // was wired wrong.
        for (name, tensor) in tensors {
            if !self.trainable.contains(name) {
                assert!(
                    grads.wrt(tensor).is_none(),
                    "frozen tensor `{}` received a gradient update",
                    name
                );
            }
        }
        self.adam_t += 1;
        let t = self.adam_t;
        let names: Vec<String> = self.trainable.iter().cloned().collect();
        for name in names {
            let tensor = &tensors[&name];
            let Some(grad) = grads.wrt(tensor) else { continue };
            let entry = self.masters.get(&name).expect("trainable master exists").clone();
            let n = entry.data.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let bc1 = 1.0 - opt.beta1.powi(t as i32);
            let bc2 = 1.0 - opt.beta2.powi(t as i32);
            let mut data = entry.data;
            for i in 0..n {
                let g = grad[i].to_f64();
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = data[i] as f64;
                let updated = w - lr * (mhat / (vhat.sqrt() + opt.eps) + opt.weight_decay * w);
                data[i] = updated as f32;
            }
            self.masters.insert(name, entry.dims, data);
        }
    }

    /// Exact optimizer state for resumable runs (f64 preserved via JSON).
    pub fn save_optimizer(&self, path: impl AsRef<Path>) -> Result<()> {
        let state = OptimizerState {
            adam_t: self.adam_t,
            m: self.m.clone(),
            v: self.v.clone(),
        };
        std::fs::write(path, serde_json::to_string(&state)?)?;
        Ok(())
    }

    pub fn load_optimizer(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let raw = std::fs::read_to_string(path.as_ref())?;
        let state: OptimizerState = serde_json::from_str(&raw)?;
        self.adam_t = state.adam_t;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    adam_t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    next_step: u64,
    next_epoch: usize,
}

/// Result of a training phase.
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps_done: u64,
    pub last_loss: Option<f64>,
}

/// Encoder training setup (CTC with the self-conditioned objective).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderTrainSetup {
    pub encoder: EncoderConfig,
    pub alphabet_chars: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_parts: usize,
    pub lr: TriangularLr,
    pub augment: AugmentPolicy,
    pub adam: AdamW,
    pub seed: u64,
    pub log_every: u64,
}

/// Synthetic stand-in for a noise corpus: seeded white noise.
fn white_noise(len: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let samples = (0..len.max(1)).map(|_| rng.gen_range(-0.3f32..0.3)).collect();
    Waveform::new(samples, SAMPLE_RATE_HZ)
}

fn checkpoint_paths(run_dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    let ckpt_dir = run_dir.join("checkpoints");
    (
        ckpt_dir.join(format!("{}.gspc", stem)),
        ckpt_dir.join(format!("{}_optimizer.json", stem)),
        ckpt_dir.join(format!("{}_state.json", stem)),
    )
}

fn ensure_run_dirs(run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::create_dir_all(run_dir.join("logs"))?;
    std::fs::create_dir_all(run_dir.join("reports"))?;
    Ok(())
}

/// Train the conformer-CTC encoder on a manifest.
///
/// Per epoch the records are shuffled, split into parts, sorted by
/// duration inside each part, and batched shortest-first.  A checkpoint
/// (parameters + optimizer + position) is written after every epoch; NaN
/// loss aborts, leaving the last good checkpoint in place.
pub fn train_encoder(
    setup: &EncoderTrainSetup,
    records: &[ManifestRecord],
    tones: &ToneMap,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    setup.encoder.validate()?;
    setup.augment.validate()?;
    if records.is_empty() {
        return Err(Error::Input("train_encoder: empty manifest".into()));
    }
    let alphabet = Alphabet::new(&setup.alphabet_chars);
    if alphabet.size() != setup.encoder.output_dim {
        return Err(Error::Config(format!(
            "alphabet size {} != encoder output dim {}",
            alphabet.size(),
            setup.encoder.output_dim
        )));
    }
    ensure_run_dirs(run_dir)?;
    let (ckpt_path, opt_path, state_path) = checkpoint_paths(run_dir, "encoder");
    let log_path = run_dir.join("logs").join("encoder_train.csv");

    let mut bank;
    let mut start_step = 0u64;
    let mut start_epoch = 0usize;
    let mut log_rows: Vec<(u64, f64, f64, f64)> = Vec::new();
    if resume && ckpt_path.exists() {
        bank = ParamBank::new(NamedTensorStore::load(&ckpt_path)?, |n| n.starts_with("enc."));
        bank.load_optimizer(&opt_path)?;
        let state: TrainerState = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
        start_step = state.next_step;
        start_epoch = state.next_epoch;
        if log_path.exists() {
            let mut rdr = csv::Reader::from_path(&log_path)?;
            for row in rdr.deserialize::<(u64, f64, f64, f64)>() {
                log_rows.push(row?);
            }
        }
    } else {
        bank = ParamBank::new(
            init_encoder_store(&setup.encoder, setup.seed),
            |n| n.starts_with("enc."),
        );
    }

    let mut step = start_step;
    let mut last_loss = None;
    for epoch in start_epoch..setup.epochs {
        let plan = epoch_batches(
            records,
            setup.num_parts,
            setup.batch_size,
            subseed(setup.seed, "epoch", epoch as u64),
        )?;
        let by_id: BTreeMap<&str, &ManifestRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        for batch in &plan.batches {
            let tensors = bank.tensors::<f32>();
            let params = EncoderParams::from_map(&setup.encoder, &tensors)?;
            let mut losses = Vec::new();
            let mut inter_sum = 0.0;
            let mut final_sum = 0.0;
            for (i, id) in batch.iter().enumerate() {
                let record = by_id[id.as_str()];
                let mut rng = ChaCha8Rng::seed_from_u64(subseed(
                    setup.seed,
                    "augment",
                    step * 1024 + i as u64,
                ));
                let wave = record.load_audio(tones)?;
                let noise = white_noise(wave.samples.len(), &mut rng);
                let feats = features_for_training(&wave, Some(&noise), &setup.augment, &mut rng)?;
                let target = alphabet.encode(&record.text)?;
                let x = feats.to_tensor::<f32>();
                let (_, inter_logits, final_logits) = conformer_forward(&params, &x)?;
                match self_conditioned_loss(
                    &inter_logits,
                    &final_logits,
                    &target,
                    alphabet.blank_index,
                    setup.encoder.w_inter,
                    setup.encoder.w_final,
                ) {
                    Ok((loss, li, lf)) => {
                        inter_sum += li;
                        final_sum += lf;
                        losses.push(loss);
                    }
                    // Infeasible targets are skipped, not clamped.
                    Err(Error::Data(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            if losses.is_empty() {
                step += 1;
                continue;
            }
            let n = losses.len();
            let mut total = losses[0].clone();
            for l in &losses[1..] {
                total = total.add(l);
            }
            let total = total.scale(1.0 / n as f64);
            let loss_value = total.scalar_value() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {}; last good checkpoint at {}", loss_value, ckpt_path.display()),
                });
            }
            let lr = setup.lr.at(step);
            let grads = total.backward();
            bank.apply_step(&grads, &tensors, lr, &setup.adam);
            if step % setup.log_every == 0 {
                log_rows.push((step, lr, inter_sum / n as f64, final_sum / n as f64));
            }
            last_loss = Some(loss_value);
            step += 1;
        }
        bank.masters().save(&ckpt_path)?;
        bank.save_optimizer(&opt_path)?;
        std::fs::write(
            &state_path,
            serde_json::to_string(&TrainerState { next_step: step, next_epoch: epoch + 1 })?,
        )?;
        write_encoder_log(&log_path, &log_rows)?;
    }
    if setup.epochs == 0 || start_epoch >= setup.epochs {
        // No-op run still produces a checkpoint of the (unchanged) params.
        bank.masters().save(&ckpt_path)?;
        bank.save_optimizer(&opt_path)?;
        std::fs::write(
            &state_path,
            serde_json::to_string(&TrainerState { next_step: step, next_epoch: start_epoch })?,
        )?;
        write_encoder_log(&log_path, &log_rows)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt_path, steps_done: step, last_loss })
}

fn write_encoder_log(path: &Path, rows: &[(u64, f64, f64, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["step", "lr", "loss_inter", "loss_final"])?;
    for &(step, lr, li, lf) in rows {
        wtr.write_record([step.to_string(), lr.to_string(), li.to_string(), lf.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

impl<E: Scalar> EncoderParams<E> {
    /// Bind encoder parameters out of a live tensor map (training path;
    /// going through a store would sever autograd).
    pub fn from_map(cfg: &EncoderConfig, map: &BTreeMap<String, Tensor<E>>) -> Result<Self> {
        bind_from_map(cfg, map)
    }
}

fn bind_from_map<E: Scalar>(
    cfg: &EncoderConfig,
    map: &BTreeMap<String, Tensor<E>>,
) -> Result<EncoderParams<E>> {
    let get = |name: &str, dims: &[usize]| -> Result<Tensor<E>> {
        let t = map
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing tensor `{}`", name)))?;
        if t.dims() != dims {
            return Err(Error::Load(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                name,
                t.dims(),
                dims
            )));
        }
        Ok(t.clone())
    };
    use crate::nn::{AttentionP, LayerNormP, LinearP};
    let h = cfg.hidden_dim;
    let f = h * 4;
    let linear = |name: &str, i: usize, o: usize| -> Result<LinearP<E>> {
        Ok(LinearP { w: get(&format!("{}.w", name), &[i, o])?, b: get(&format!("{}.b", name), &[o])? })
    };
    let ln = |name: &str| -> Result<LayerNormP<E>> {
        Ok(LayerNormP {
            gain: get(&format!("{}.gain", name), &[h])?,
            bias: get(&format!("{}.bias", name), &[h])?,
        })
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let p = |s: &str| format!("enc.layer{}.{}", i, s);
        layers.push(crate::encoder::ConformerLayer {
            ln_ffn1: ln(&p("ln_ffn1"))?,
            ffn1_in: linear(&p("ffn1.in"), h, f)?,
            ffn1_out: linear(&p("ffn1.out"), f, h)?,
            ln_attn: ln(&p("ln_attn"))?,
            attn: AttentionP {
                wq: linear(&p("attn.q"), h, h)?,
                wk: get(&format!("{}.w", p("attn.k")), &[h, h])?,
                wv: linear(&p("attn.v"), h, h)?,
                wo: linear(&p("attn.o"), h, h)?,
            },
            ln_conv: ln(&p("ln_conv"))?,
            conv_pw1: linear(&p("conv.pw1"), h, 2 * h)?,
            conv_dw: get(&p("conv.dw"), &[cfg.conv_kernel, h])?,
            conv_norm: ln(&p("conv.norm"))?,
            conv_pw2: linear(&p("conv.pw2"), h, h)?,
            ln_ffn2: ln(&p("ln_ffn2"))?,
            ffn2_in: linear(&p("ffn2.in"), h, f)?,
            ffn2_out: linear(&p("ffn2.out"), f, h)?,
            ln_out: ln(&p("ln_out"))?,
        });
    }
    Ok(EncoderParams {
        cfg: cfg.clone(),
        input_proj: linear("enc.input_proj", cfg.input_dim, h)?,
        layers,
        ctc_head: linear("enc.ctc_head", h, cfg.output_dim)?,
        selfcond_feedback: get("enc.selfcond.w_fb", &[cfg.output_dim, h])?,
        selfcond_ln: ln("enc.selfcond.ln")?,
    })
}

/// Adapter + LoRA training setup; the encoder and the base LLM stay
/// frozen throughout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterTrainSetup {
    pub qformer: QFormerConfig,
    pub llm: LlmConfig,
    pub lora: LoraConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: TriangularLr,
    /// Corpus-balancing exponent for batch sampling.
    pub alpha: f64,
    pub adam: AdamW,
    pub seed: u64,
    pub log_every: u64,
    pub date: String,
    /// Prompt-template draw policy.  At full scale every utterance occurs
    /// only a handful of times, so per-occurrence template draws expose
    /// each utterance to few wordings; a desk-scale run revisits each
    /// record hundreds of times, and re-drawing per occurrence turns into
    /// a prompt-memorization burden instead.  `true` pins one (seeded)
    /// template per record; `false` re-draws per occurrence.
    #[serde(default = "default_fixed_prompts")]
    pub fixed_prompt_per_record: bool,
}

fn default_fixed_prompts() -> bool {
    true
}

/// Seeded rng for a record's pinned prompt template (shared between
/// training and decoding so train-set evaluation sees trained prompts).
pub fn record_prompt_rng(seed: u64, record_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(seed, record_id, 0x9c0))
}

/// Joint Q-former + LoRA training with frozen encoder and frozen LLM base.
///
/// Batches draw a corpus by the balanced-sampling rule, then a record
/// uniformly inside it.  The optimizer touches only `adapter.*` and
/// `lora.*` names.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    setup: &AdapterTrainSetup,
    records: &[ManifestRecord],
    tones: &ToneMap,
    encoder_cfg: &EncoderConfig,
    encoder_store: &NamedTensorStore,
    llm_store: &NamedTensorStore,
    pools: &PromptPools,
    tokenizer: &Tokenizer,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    setup.qformer.validate()?;
    setup.llm.validate()?;
    setup.lora.validate()?;
    if records.is_empty() {
        return Err(Error::Input("train_adapter: empty manifest".into()));
    }
    ensure_run_dirs(run_dir)?;
    let (ckpt_path, opt_path, state_path) = checkpoint_paths(run_dir, "adapter");
    let log_path = run_dir.join("logs").join("adapter_train.csv");

    // Frozen components plus trainable adapter/LoRA in one bank.
    let mut masters = NamedTensorStore::new();
    masters.merge(encoder_store);
    masters.merge(llm_store);

    let mut start_step = 0u64;
    let mut log_rows: Vec<(u64, f64, f64)> = Vec::new();
    if resume && ckpt_path.exists() {
        masters.merge(&NamedTensorStore::load(&ckpt_path)?);
        let state: TrainerState = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
        start_step = state.next_step;
        if log_path.exists() {
            let mut rdr = csv::Reader::from_path(&log_path)?;
            for row in rdr.deserialize::<(u64, f64, f64)>() {
                log_rows.push(row?);
            }
        }
    } else {
        masters.merge(&init_qformer_store(&setup.qformer, subseed(setup.seed, "adapter_init", 0)));
        masters.merge(&init_lora_store(
            &setup.lora,
            setup.llm.num_layers,
            setup.llm.model_dim,
            subseed(setup.seed, "lora_init", 0),
        ));
    }
    let mut bank = ParamBank::new(masters, |n| n.starts_with("adapter.") || n.starts_with("lora."));
    if resume && opt_path.exists() {
        bank.load_optimizer(&opt_path)?;
    }

    let plan = SamplingPlan::from_records(records, setup.alpha)?;
    let mut by_corpus: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in records {
        by_corpus.entry(r.corpus.as_str()).or_default().push(r);
    }

    let frozen_before = frozen_fingerprint(bank.masters());
    let mut last_loss = None;
    for step in start_step..setup.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(setup.seed, "adapter_step", step));
        let tensors = bank.tensors::<f32>();
        let enc_params = bind_from_map(encoder_cfg, &tensors)?;
        let qf_params = bind_qformer_from_map(&setup.qformer, &tensors)?;
        let llm_params = bind_llm_from_map(&setup.llm, &tensors)?;
        let lora_params = bind_lora_from_map(&setup.lora, setup.llm.num_layers, setup.llm.model_dim, &tensors)?;

        let mut losses = Vec::new();
        for _ in 0..setup.batch_size {
            let corpus_idx = sample_corpus(&plan, &mut rng);
            let corpus_records = &by_corpus[plan.corpora[corpus_idx].as_str()];
            let record = corpus_records[rng.gen_range(0..corpus_records.len())];
            let example = if setup.fixed_prompt_per_record {
                let mut prompt_rng = record_prompt_rng(setup.seed, &record.id);
                build_prompt(record, pools, &setup.date, &mut prompt_rng)?
            } else {
                build_prompt(record, pools, &setup.date, &mut rng)?
            };
            let chat = encode_chat(tokenizer, &example)?;
            let wave = record.load_audio(tones)?;
            let feats = crate::audio::features_for_eval(&wave)?;
            let (hidden, _, _) = conformer_forward(&enc_params, &feats.to_tensor::<f32>())?;
            let audio_rows = adapt(&qf_params, &hidden)?.y;
            let seq = embed_and_splice(&llm_params, &chat.tokens, &chat.loss_mask(), Some(&audio_rows))?;
            let lora_opt = setup.lora.enabled.then_some(&lora_params);
            losses.push(next_token_loss(&llm_params, lora_opt, &seq)?);
        }
        let n = losses.len();
        let mut total = losses[0].clone();
        for l in &losses[1..] {
            total = total.add(l);
        }
        let total = total.scale(1.0 / n as f64);
        let loss_value = total.scalar_value() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {}; last good checkpoint at {}", loss_value, ckpt_path.display()),
            });
        }
        let lr = setup.lr.at(step);
        let grads = total.backward();
        bank.apply_step(&grads, &tensors, lr, &setup.adam);
        if step % setup.log_every == 0 {
            log_rows.push((step, lr, loss_value));
        }
        last_loss = Some(loss_value);
    }
    assert_eq!(
        frozen_fingerprint(bank.masters()),
        frozen_before,
        "frozen encoder/llm weights changed during adapter training"
    );

    // Checkpoint holds only the trainable namespaces.
    let mut out = NamedTensorStore::new();
    for (name, t) in bank.masters().iter() {
        if bank.is_trainable(name) {
            out.insert(name, t.dims.clone(), t.data.clone());
        }
    }
    out.save(&ckpt_path)?;
    bank.save_optimizer(&opt_path)?;
    std::fs::write(
        &state_path,
        serde_json::to_string(&TrainerState { next_step: setup.steps, next_epoch: 0 })?,
    )?;
    let mut wtr = csv::Writer::from_path(&log_path)?;
    wtr.write_record(["step", "lr", "loss"])?;
    for &(step, lr, loss) in &log_rows {
        wtr.write_record([step.to_string(), lr.to_string(), loss.to_string()])?;
    }
    wtr.flush()?;
    Ok(TrainOutcome { checkpoint: ckpt_path, steps_done: setup.steps, last_loss })
}

fn frozen_fingerprint(store: &NamedTensorStore) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (name, t) in store.iter() {
        if name.starts_with("enc.") || name.starts_with("llm.") {
            for &b in name.as_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for &v in &t.data {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
    }
    h
}

pub fn bind_qformer_from_map<E: Scalar>(
    cfg: &QFormerConfig,
    map: &BTreeMap<String, Tensor<E>>,
) -> Result<QFormerParams<E>> {
    use crate::nn::{AttentionP, LayerNormP, LinearP};
    let get = |name: &str, dims: &[usize]| -> Result<Tensor<E>> {
        let t = map.get(name).ok_or_else(|| Error::Load(format!("missing tensor `{}`", name)))?;
        if t.dims() != dims {
            return Err(Error::Load(format!("tensor `{}` has shape {:?}, expected {:?}", name, t.dims(), dims)));
        }
        Ok(t.clone())
    };
    let dm = cfg.model_dim;
    let linear = |name: &str, i: usize, o: usize| -> Result<LinearP<E>> {
        Ok(LinearP { w: get(&format!("{}.w", name), &[i, o])?, b: get(&format!("{}.b", name), &[o])? })
    };
    let ln = |name: &str| -> Result<LayerNormP<E>> {
        Ok(LayerNormP { gain: get(&format!("{}.gain", name), &[dm])?, bias: get(&format!("{}.bias", name), &[dm])? })
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let p = |s: &str| format!("adapter.layer{}.{}", i, s);
        layers.push(crate::adapter::QFormerLayer {
            ln_self: ln(&p("ln_self"))?,
            self_attn: AttentionP {
                wq: linear(&p("self.q"), dm, dm)?,
                wk: get(&format!("{}.w", p("self.k")), &[dm, dm])?,
                wv: linear(&p("self.v"), dm, dm)?,
                wo: linear(&p("self.o"), dm, dm)?,
            },
            ln_cross: ln(&p("ln_cross"))?,
            cross_attn: AttentionP {
                wq: linear(&p("cross.q"), dm, dm)?,
                wk: get(&format!("{}.w", p("cross.k")), &[cfg.enc_dim, dm])?,
                wv: linear(&p("cross.v"), cfg.enc_dim, dm)?,
                wo: linear(&p("cross.o"), dm, dm)?,
            },
            ln_ffn: ln(&p("ln_ffn"))?,
            ffn_in: linear(&p("ffn.in"), dm, dm * 4)?,
            ffn_out: linear(&p("ffn.out"), dm * 4, dm)?,
        });
    }
    Ok(QFormerParams {
        cfg: cfg.clone(),
        queries: get("adapter.queries", &[cfg.num_queries, dm])?,
        layers,
        out: linear("adapter.out", dm, cfg.llm_dim)?,
    })
}

pub fn bind_llm_from_map<E: Scalar>(
    cfg: &LlmConfig,
    map: &BTreeMap<String, Tensor<E>>,
) -> Result<LlmParams<E>> {
    use crate::nn::{AttentionP, LayerNormP, LinearP};
    let get = |name: &str, dims: &[usize]| -> Result<Tensor<E>> {
        let t = map.get(name).ok_or_else(|| Error::Load(format!("missing tensor `{}`", name)))?;
        if t.dims() != dims {
            return Err(Error::Load(format!("tensor `{}` has shape {:?}, expected {:?}", name, t.dims(), dims)));
        }
        Ok(t.clone())
    };
    let d = cfg.model_dim;
    let linear = |name: &str, i: usize, o: usize| -> Result<LinearP<E>> {
        Ok(LinearP { w: get(&format!("{}.w", name), &[i, o])?, b: get(&format!("{}.b", name), &[o])? })
    };
    let ln = |name: &str| -> Result<LayerNormP<E>> {
        Ok(LayerNormP { gain: get(&format!("{}.gain", name), &[d])?, bias: get(&format!("{}.bias", name), &[d])? })
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let p = |s: &str| format!("llm.layer{}.{}", i, s);
        layers.push(crate::llm::LlmLayer {
            ln_attn: ln(&p("ln_attn"))?,
            attn: AttentionP {
                wq: linear(&p("attn.q"), d, d)?,
                wk: get(&format!("{}.w", p("attn.k")), &[d, d])?,
                wv: linear(&p("attn.v"), d, d)?,
                wo: linear(&p("attn.o"), d, d)?,
            },
            ln_ffn: ln(&p("ln_ffn"))?,
            ffn_in: linear(&p("ffn.in"), d, cfg.ffn_dim)?,
            ffn_out: linear(&p("ffn.out"), cfg.ffn_dim, d)?,
        });
    }
    Ok(LlmParams {
        cfg: cfg.clone(),
        embed: get("llm.embed.weight", &[cfg.vocab_size, d])?,
        pos: get("llm.pos.weight", &[cfg.max_seq_len, d])?,
        layers,
        final_ln: ln("llm.final_ln")?,
        head: linear("llm.head", d, cfg.vocab_size)?,
    })
}

pub fn bind_lora_from_map<E: Scalar>(
    cfg: &LoraConfig,
    num_layers: usize,
    model_dim: usize,
    map: &BTreeMap<String, Tensor<E>>,
) -> Result<LoraParams<E>> {
    let get = |name: &str, dims: &[usize]| -> Result<Tensor<E>> {
        let t = map.get(name).ok_or_else(|| Error::Load(format!("missing tensor `{}`", name)))?;
        if t.dims() != dims {
            return Err(Error::Load(format!("tensor `{}` has shape {:?}, expected {:?}", name, t.dims(), dims)));
        }
        Ok(t.clone())
    };
    let r = cfg.rank;
    let mut layers = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        layers.push((
            get(&format!("lora.layer{}.q.a", i), &[model_dim, r])?,
            get(&format!("lora.layer{}.q.b", i), &[r, model_dim])?,
            get(&format!("lora.layer{}.v.a", i), &[model_dim, r])?,
            get(&format!("lora.layer{}.v.b", i), &[r, model_dim])?,
        ));
    }
    Ok(LoraParams { cfg: cfg.clone(), layers })
}
