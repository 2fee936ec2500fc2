//! Subcommand implementations.  Every command is deterministic given
//! (config, seed): artifacts carry no timestamps and all randomness flows
//! from the config seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use gspc_core::audio::synth::ToneMap;
use gspc_core::audio::Waveform;
use gspc_core::data::{
    balanced_probs, epoch_batches, read_manifest, synth_dataset, write_manifest, ManifestRecord,
    Task,
};
use gspc_core::encoder::{conformer_forward, ctc_greedy_decode, Alphabet};
use gspc_core::filter::{
    filter_pairs, length_bias_report, read_pairs, selection_curve, write_curve_csv, FilterSpec,
    Metric,
};
use gspc_core::llm::{encode_chat, init_llm_store, LlmParams, Tokenizer};
use gspc_core::pipeline::{decode_text, SpeechStack, StackConfig};
use gspc_core::prompting::{build_prompt, parse_cot_response, render_system_prompt};
use gspc_core::store::NamedTensorStore;
use gspc_core::train::{train_adapter, train_encoder, AdapterTrainSetup, EncoderTrainSetup};
use gspc_core::verify::gradient_suite;
use gspc_core::{subseed, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Exit code for the spec'd failure classes.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Prompt(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, only: Option<&str>, corrupt: bool) -> anyhow::Result<i32> {
    cfg.echo()?;
    let mut failures = 0;
    if corrupt {
        // Negative control: a deliberately corrupted analytic gradient must
        // be caught by the comparison.
        let err = gspc_core::tensor::corrupted_control(1e-5)?;
        let pass = err <= gspc_core::verify::TOL_ELEMENTARY;
        println!(
            "{:12} max_rel_error {:10.3e}  tol {:.0e}  {}",
            "corrupted",
            err,
            gspc_core::verify::TOL_ELEMENTARY,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failures += 1;
        }
    } else {
        for report in gradient_suite(only)? {
            println!(
                "{:12} max_rel_error {:10.3e}  tol {:.0e}  {}",
                report.name,
                report.max_rel_error,
                report.tolerance,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if !report.passed() {
                failures += 1;
            }
        }
    }
    Ok(if failures == 0 { 0 } else { 1 })
}

pub fn cmd_synth_data(cfg: &RunConfig, n: usize, out: &Path, wav_dir: Option<&Path>) -> anyhow::Result<i32> {
    cfg.echo()?;
    let (waves, mut records) = synth_dataset(cfg.seed, n, &cfg.alphabet, "toy")?;
    if let Some(dir) = wav_dir {
        std::fs::create_dir_all(dir)?;
        for (wave, record) in waves.iter().zip(&mut records) {
            let path = dir.join(format!("{}.wav", record.id));
            wave.write_wav(&path)?;
            record.audio = path.to_string_lossy().into_owned();
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_manifest(out, &records)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(0)
}

pub fn cmd_train_encoder(cfg: &RunConfig, manifest: &Path, resume: bool) -> anyhow::Result<i32> {
    cfg.echo()?;
    let records = read_manifest(manifest).context("reading manifest")?;
    let tones = ToneMap::for_alphabet(&cfg.alphabet);
    let setup = EncoderTrainSetup {
        encoder: cfg.encoder.clone(),
        alphabet_chars: cfg.alphabet.clone(),
        epochs: cfg.encoder_train.epochs,
        batch_size: cfg.encoder_train.batch_size,
        num_parts: cfg.encoder_train.num_parts,
        lr: cfg.encoder_train.lr.clone(),
        augment: cfg.encoder_train.augment.clone(),
        adam: cfg.adam.clone(),
        seed: cfg.seed,
        log_every: cfg.encoder_train.log_every,
    };
    let outcome = train_encoder(&setup, &records, &tones, &cfg.run_dir, resume)?;
    println!(
        "encoder trained: {} steps, last loss {:?}, checkpoint {}",
        outcome.steps_done,
        outcome.last_loss,
        outcome.checkpoint.display()
    );
    Ok(0)
}

fn llm_store_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoints_dir().join("llm.gspc")
}

/// The frozen toy LLM base: loaded if present, otherwise initialized from
/// the seed and saved so later commands share the exact same base.
fn load_or_init_llm(cfg: &RunConfig, tokenizer: &Tokenizer) -> anyhow::Result<NamedTensorStore> {
    let path = llm_store_path(cfg);
    if path.exists() {
        return Ok(NamedTensorStore::load(&path)?);
    }
    let llm_cfg = cfg.llm.to_config(tokenizer);
    let store = init_llm_store(&llm_cfg, subseed(cfg.seed, "llm_base", 0));
    std::fs::create_dir_all(cfg.checkpoints_dir())?;
    store.save(&path)?;
    Ok(store)
}

pub fn cmd_train_adapter(cfg: &RunConfig, manifest: &Path, resume: bool) -> anyhow::Result<i32> {
    cfg.echo()?;
    let records = read_manifest(manifest).context("reading manifest")?;
    let tones = ToneMap::for_alphabet(&cfg.alphabet);
    let tokenizer = cfg.tokenizer()?;
    let pools = cfg.pools()?;
    let encoder_path = cfg.checkpoints_dir().join("encoder.gspc");
    if !encoder_path.exists() {
        bail!(Error::Input(format!(
            "encoder checkpoint missing: {} (run train-encoder first)",
            encoder_path.display()
        )));
    }
    let encoder_store = NamedTensorStore::load(&encoder_path)?;
    let llm_store = load_or_init_llm(cfg, &tokenizer)?;
    let setup = AdapterTrainSetup {
        qformer: cfg.qformer.clone(),
        llm: cfg.llm.to_config(&tokenizer),
        lora: cfg.lora.clone(),
        steps: cfg.adapter_train.steps,
        batch_size: cfg.adapter_train.batch_size,
        lr: cfg.adapter_train.lr.clone(),
        alpha: cfg.adapter_train.alpha,
        adam: cfg.adam.clone(),
        seed: cfg.seed,
        log_every: cfg.adapter_train.log_every,
        date: cfg.date.clone(),
        fixed_prompt_per_record: cfg.adapter_train.fixed_prompt_per_record,
    };
    let outcome = train_adapter(
        &setup,
        &records,
        &tones,
        &cfg.encoder,
        &encoder_store,
        &llm_store,
        &pools,
        &tokenizer,
        &cfg.run_dir,
        resume,
    )?;
    println!(
        "adapter trained: {} steps, last loss {:?}, checkpoint {}",
        outcome.steps_done,
        outcome.last_loss,
        outcome.checkpoint.display()
    );
    Ok(0)
}

#[derive(serde::Serialize)]
struct Hypothesis {
    id: String,
    task: Task,
    reference: String,
    hypothesis: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
    exact_match: bool,
}

#[derive(serde::Serialize)]
struct DecodeReport {
    num_utterances: usize,
    exact_match_rate: f64,
    mean_wer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    corpus_bleu: Option<f64>,
    ctc_greedy_exact_match_rate: f64,
}

fn load_stack(cfg: &RunConfig, tokenizer: &Tokenizer) -> anyhow::Result<SpeechStack<f32>> {
    let ckpt = cfg.checkpoints_dir();
    for name in ["encoder.gspc", "adapter.gspc", "llm.gspc"] {
        if !ckpt.join(name).exists() {
            bail!(Error::Input(format!("checkpoint missing: {}", ckpt.join(name).display())));
        }
    }
    let stack_cfg = StackConfig {
        encoder: cfg.encoder.clone(),
        qformer: cfg.qformer.clone(),
        llm: cfg.llm.to_config(tokenizer),
        lora: cfg.lora.clone(),
    };
    Ok(SpeechStack::from_stores(
        &stack_cfg,
        &NamedTensorStore::load(ckpt.join("encoder.gspc"))?,
        &NamedTensorStore::load(ckpt.join("adapter.gspc"))?,
        &NamedTensorStore::load(ckpt.join("llm.gspc"))?,
    )?)
}

pub fn cmd_decode_manifest(cfg: &RunConfig, manifest: &Path) -> anyhow::Result<i32> {
    cfg.echo()?;
    let records = read_manifest(manifest)?;
    let tones = ToneMap::for_alphabet(&cfg.alphabet);
    let tokenizer = cfg.tokenizer()?;
    let pools = cfg.pools()?;
    let stack = load_stack(cfg, &tokenizer)?;
    let alphabet = Alphabet::new(&cfg.alphabet);

    let mut hypotheses = Vec::new();
    let mut ctc_hits = 0usize;
    let mut wer_sum = 0.0;
    let mut ast_refs: Vec<String> = Vec::new();
    let mut ast_hyps: Vec<String> = Vec::new();
    // Inference runs in fixed-size chunks (results are per-utterance
    // deterministic, so chunking only bounds memory).
    for chunk in records.chunks(cfg.decode_batch.max(1)) {
        for record in chunk {
            let i = hypotheses.len() as u64;
            let mut rng = if cfg.adapter_train.fixed_prompt_per_record {
                gspc_core::train::record_prompt_rng(cfg.seed, &record.id)
            } else {
                ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "decode", i))
            };
            let example = build_prompt(record, &pools, &cfg.date, &mut rng)?;
            let chat = encode_chat(&tokenizer, &example)?;
            let prompt = &chat.tokens[..chat.prompt_len];
            let wave = record.load_audio(&tones)?;
            let out = stack.decode_speech(&tokenizer, prompt, &wave, &cfg.generation)?;
            let raw = tokenizer.decode(&out.tokens, true);

            // CTC branch for the report.
            let feats = gspc_core::audio::features_for_eval(&wave)?;
            let (_, _, logits) = conformer_forward(&stack.encoder, &feats.to_tensor::<f32>())?;
            if ctc_greedy_decode(&logits.log_softmax(), &alphabet) == record.text {
                ctc_hits += 1;
            }

            let (hypothesis, transcript, reference) = match record.task {
                Task::Asr => (raw.clone(), None, record.text.clone()),
                Task::Ast => {
                    let reference = record.translation.clone().unwrap_or_default();
                    match parse_cot_response(&raw) {
                        Ok((t, x)) => (x, Some(t), reference),
                        // No CoT tags: treat the whole output as translation.
                        Err(_) => (raw.clone(), None, reference),
                    }
                }
            };
            wer_sum += gspc_core::filter::wer(&reference, &hypothesis);
            if record.task == Task::Ast {
                ast_refs.push(reference.clone());
                ast_hyps.push(hypothesis.clone());
            }
            hypotheses.push(Hypothesis {
                id: record.id.clone(),
                task: record.task,
                exact_match: hypothesis == reference,
                reference,
                hypothesis,
                transcript,
            });
        }
    }
    let n = hypotheses.len();
    let report = DecodeReport {
        num_utterances: n,
        exact_match_rate: hypotheses.iter().filter(|h| h.exact_match).count() as f64 / n as f64,
        mean_wer: wer_sum / n as f64,
        corpus_bleu: if ast_refs.is_empty() {
            None
        } else {
            let refs: Vec<&str> = ast_refs.iter().map(|s| s.as_str()).collect();
            let hyps: Vec<&str> = ast_hyps.iter().map(|s| s.as_str()).collect();
            Some(gspc_core::filter::bleu(&refs, &hyps)?)
        },
        ctc_greedy_exact_match_rate: ctc_hits as f64 / n as f64,
    };
    std::fs::create_dir_all(cfg.reports_dir())?;
    let hyp_path = cfg.reports_dir().join("hypotheses.jsonl");
    let mut out = String::new();
    for h in &hypotheses {
        out.push_str(&serde_json::to_string(h)?);
        out.push('\n');
    }
    std::fs::write(&hyp_path, out)?;
    let report_path = cfg.reports_dir().join("decode_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "decoded {} utterances: exact match {:.3}, mean WER {:.3} ({})",
        n,
        report.exact_match_rate,
        report.mean_wer,
        report_path.display()
    );
    Ok(0)
}

pub fn cmd_decode_audio(cfg: &RunConfig, audio: &Path, task: Task, tgt_lang: Option<String>) -> anyhow::Result<i32> {
    cfg.echo()?;
    let tokenizer = cfg.tokenizer()?;
    let pools = cfg.pools()?;
    let stack = load_stack(cfg, &tokenizer)?;
    let record = ManifestRecord {
        id: audio.display().to_string(),
        audio: audio.display().to_string(),
        text: String::new(),
        translation: (task == Task::Ast).then(|| String::new()),
        task,
        src_lang: "en".into(),
        tgt_lang,
        duration_s: 1.0,
        corpus: "adhoc".into(),
    };
    let tones = ToneMap::for_alphabet(&cfg.alphabet);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "decode", 0));
    let example = build_prompt(&record, &pools, &cfg.date, &mut rng)?;
    let chat = encode_chat(&tokenizer, &example)?;
    let wave = record.load_audio(&tones)?;
    let out = stack.decode_speech(&tokenizer, &chat.tokens[..chat.prompt_len], &wave, &cfg.generation)?;
    println!("{}", tokenizer.decode(&out.tokens, true));
    Ok(0)
}

pub fn cmd_decode_text(cfg: &RunConfig, prompt: &str) -> anyhow::Result<i32> {
    cfg.echo()?;
    let tokenizer = cfg.tokenizer()?;
    // Text mode runs the base LLM alone; no speech checkpoint is needed.
    let llm_store = load_or_init_llm(cfg, &tokenizer)?;
    let llm = LlmParams::<f32>::from_store(&cfg.llm.to_config(&tokenizer), &llm_store)?;
    let system = render_system_prompt(&cfg.date)?;
    let mut tokens = vec![tokenizer.bos_id, tokenizer.system_id];
    tokens.extend(tokenizer.encode(&system)?);
    tokens.push(tokenizer.user_id);
    tokens.extend(tokenizer.encode(prompt)?);
    tokens.push(tokenizer.assistant_id);
    let out = decode_text(&llm, &tokenizer, &tokens, &cfg.generation)?;
    println!("{}", tokenizer.decode(&out.tokens, true));
    Ok(0)
}

pub fn cmd_filter_ast(
    cfg: &RunConfig,
    pairs_path: &Path,
    metric: Option<Metric>,
    threshold: Option<f64>,
    curve: bool,
    base_manifest: Option<&Path>,
    tgt_lang: Option<&str>,
) -> anyhow::Result<i32> {
    cfg.echo()?;
    let pairs = read_pairs(pairs_path)?;
    let spec = FilterSpec {
        metric: metric.unwrap_or(cfg.filter.metric),
        threshold: threshold.unwrap_or(cfg.filter.threshold),
    };
    let (kept, stats) = filter_pairs(&pairs, &spec)?;
    std::fs::create_dir_all(cfg.reports_dir())?;

    let stats_path = cfg.reports_dir().join("filter_stats.json");
    #[derive(serde::Serialize)]
    struct FullStats<'a> {
        spec: &'a FilterSpec,
        stats: &'a gspc_core::filter::FilterStats,
        length_bias: gspc_core::filter::LengthBias,
    }
    let report = FullStats {
        spec: &spec,
        stats: &stats,
        length_bias: length_bias_report(&pairs, &spec)?,
    };
    std::fs::write(&stats_path, serde_json::to_string_pretty(&report)?)?;

    let kept_path = cfg.reports_dir().join("kept_pairs.jsonl");
    let mut out = String::new();
    for p in &kept {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(&kept_path, out)?;

    if let Some(base) = base_manifest {
        // Join kept pairs onto the base manifest by id and emit ast
        // records carrying the primary output as the training target.
        let base_records = read_manifest(base)?;
        let by_id: BTreeMap<&str, &ManifestRecord> =
            base_records.iter().map(|r| (r.id.as_str(), r)).collect();
        let lang = tgt_lang.unwrap_or("German");
        let mut records = Vec::new();
        for pair in &kept {
            let Some(base_record) = by_id.get(pair.id.as_str()) else {
                log::warn!("pair {} has no base manifest record; skipped", pair.id);
                continue;
            };
            let mut r = (*base_record).clone();
            r.task = Task::Ast;
            r.translation = Some(pair.primary_out.clone());
            r.tgt_lang = Some(lang.to_string());
            records.push(r);
        }
        let manifest_path = cfg.reports_dir().join("filtered_manifest.jsonl");
        write_manifest(&manifest_path, &records)?;
        println!("filtered manifest: {} records -> {}", records.len(), manifest_path.display());
    }

    if curve {
        let points = selection_curve(&pairs, spec.metric)?;
        let curve_path = cfg.reports_dir().join("selection_curve.csv");
        write_curve_csv(&points, &curve_path)?;
        println!("selection curve: {} points -> {}", points.len(), curve_path.display());
    }
    println!(
        "kept {}/{} pairs ({:.3}) at {:?} <=/>= {}",
        stats.kept, stats.total, stats.kept_fraction, spec.metric, spec.threshold
    );
    Ok(0)
}

pub fn cmd_plan(
    cfg: &RunConfig,
    manifest: Option<&Path>,
    sizes: Option<Vec<u64>>,
    alphas: &[f64],
    batch_plan: bool,
) -> anyhow::Result<i32> {
    cfg.echo()?;
    std::fs::create_dir_all(cfg.reports_dir())?;
    let (corpora, sizes): (Vec<String>, Vec<u64>) = match (manifest, sizes) {
        (Some(path), _) => {
            let records = read_manifest(path)?;
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for r in &records {
                *counts.entry(r.corpus.clone()).or_insert(0) += 1;
            }
            counts.into_iter().unzip()
        }
        (None, Some(sizes)) => {
            (sizes.iter().enumerate().map(|(i, _)| format!("corpus{:02}", i)).collect(), sizes)
        }
        (None, None) => bail!(Error::Input("plan needs --manifest or --sizes".into())),
    };

    // Fig.-2-style distribution table: one row per (corpus, alpha).
    let natural = balanced_probs(&sizes, 1.0)?;
    let dist_path = cfg.reports_dir().join("sampling_distribution.csv");
    let mut wtr = csv::Writer::from_path(&dist_path)?;
    wtr.write_record(["corpus", "natural_p", "balanced_p", "alpha"])?;
    for &alpha in alphas {
        let probs = balanced_probs(&sizes, alpha)?;
        for ((corpus, &nat), &p) in corpora.iter().zip(&natural).zip(&probs) {
            wtr.write_record([corpus.clone(), nat.to_string(), p.to_string(), alpha.to_string()])?;
        }
    }
    wtr.flush()?;
    println!("distribution table -> {}", dist_path.display());

    if batch_plan {
        let Some(path) = manifest else {
            bail!(Error::Input("--batch-plan needs --manifest".into()));
        };
        let records = read_manifest(path)?;
        let plan = epoch_batches(
            &records,
            cfg.encoder_train.num_parts,
            cfg.encoder_train.batch_size,
            subseed(cfg.seed, "epoch", 0),
        )?;
        let plan_path = cfg.reports_dir().join("batch_plan.csv");
        plan.write_csv(&plan_path)?;
        println!("batch plan ({} batches) -> {}", plan.batches.len(), plan_path.display());
    }
    Ok(0)
}

/// Waveform loading for ad-hoc decode of real files.
#[allow(dead_code)]
fn load_wave(path: &Path) -> anyhow::Result<Waveform> {
    Waveform::read_wav(path).map_err(|e| anyhow!(e))
}
