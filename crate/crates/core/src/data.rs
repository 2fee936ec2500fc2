//! Manifest ingestion, corpus-balanced sampling, length-sorted epoch
//! batching, and synthetic toy-dataset generation.
//!
//! Manifests are JSON-lines, one [`ManifestRecord`] per line.  The `audio`
//! field is either a WAV path or a `synth:<text>` spec that generates a
//! tone sequence in-process.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::synth::{tone_sequence, ToneMap, TONE_SECONDS};
use crate::audio::Waveform;
use crate::prompting::{COT_TRANSCRIPTION_TAG, COT_TRANSLATION_TAG};
use crate::{Error, Result};

/// Task a record trains or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Ast,
}

/// One training/eval utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// WAV path or `synth:<text>` tone-sequence spec.
    pub audio: String,
    /// Source-language transcript.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    pub task: Task,
    pub src_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_lang: Option<String>,
    pub duration_s: f64,
    pub corpus: String,
}

impl ManifestRecord {
    pub fn validate(&self) -> Result<()> {
        if self.duration_s <= 0.0 {
            return Err(Error::Data(format!("record {}: duration must be > 0", self.id)));
        }
        if self.task == Task::Ast && (self.translation.is_none() || self.tgt_lang.is_none()) {
            return Err(Error::Data(format!(
                "record {}: ast task requires translation and tgt_lang",
                self.id
            )));
        }
        // CoT tags inside targets would make [Transcription]/[Translation]
        // parsing ambiguous, so they are rejected at ingestion.
        for (field, value) in [
            ("text", Some(&self.text)),
            ("translation", self.translation.as_ref()),
        ] {
            if let Some(value) = value {
                if value.contains(COT_TRANSCRIPTION_TAG) || value.contains(COT_TRANSLATION_TAG) {
                    return Err(Error::Data(format!(
                        "record {}: {} contains a reserved CoT tag",
                        self.id, field
                    )));
                }
            }
        }
        Ok(())
    }

    /// Load the referenced audio (WAV file or synthetic tone spec).
    pub fn load_audio(&self, tones: &ToneMap) -> Result<Waveform> {
        match self.audio.strip_prefix("synth:") {
            Some(text) => tone_sequence(text, tones),
            None => Waveform::read_wav(&self.audio),
        }
    }
}

/// Read a `.jsonl` manifest, validating every record.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let raw = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Input(format!("cannot read {}: {}", path.as_ref().display(), e)))?;
    let mut records = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("manifest line {}: {}", lineno + 1, e)))?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Corpus sampling probabilities `p_i = N_i^alpha / sum_j N_j^alpha`.
///
/// `alpha = 1` is the natural size distribution, `alpha = 0` is uniform.
pub fn balanced_probs(sizes: &[u64], alpha: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Input("balanced_probs: empty corpus list".into()));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::Input("balanced_probs: zero-size corpus".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("balanced_probs: alpha {} outside [0,1]", alpha)));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(alpha)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Corpus-balanced sampling plan.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub corpora: Vec<String>,
    pub sizes: Vec<u64>,
    pub alpha: f64,
    pub probs: Vec<f64>,
}

impl SamplingPlan {
    pub fn new(corpora: Vec<String>, sizes: Vec<u64>, alpha: f64) -> Result<Self> {
        if corpora.len() != sizes.len() {
            return Err(Error::Input("sampling plan: corpora/sizes length mismatch".into()));
        }
        let probs = balanced_probs(&sizes, alpha)?;
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(Self { corpora, sizes, alpha, probs })
    }

    /// Group records by corpus and build the plan over observed sizes.
    pub fn from_records(records: &[ManifestRecord], alpha: f64) -> Result<Self> {
        let mut sizes: BTreeMap<&str, u64> = BTreeMap::new();
        for r in records {
            *sizes.entry(r.corpus.as_str()).or_insert(0) += 1;
        }
        let corpora: Vec<String> = sizes.keys().map(|s| s.to_string()).collect();
        let counts: Vec<u64> = sizes.values().copied().collect();
        Self::new(corpora, counts, alpha)
    }
}

/// Draw a corpus index with probability `p_i` (inverse CDF over the plan).
pub fn sample_corpus<R: Rng>(plan: &SamplingPlan, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in plan.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    plan.probs.len() - 1
}

/// One epoch of batches: every record exactly once, shuffled, split into
/// contiguous parts, each part sorted by increasing duration.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub num_parts: usize,
    pub batch_size: usize,
    /// Record ids, batch by batch.
    pub batches: Vec<Vec<String>>,
}

/// Length-sorted epoch batching.
///
/// Shuffle by seed, divide into `num_parts` contiguous parts, sort each
/// part by non-decreasing duration, then emit batches part by part,
/// shortest first within each part.
pub fn epoch_batches(
    records: &[ManifestRecord],
    num_parts: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Input("epoch_batches: batch_size must be >= 1".into()));
    }
    if num_parts == 0 {
        return Err(Error::Input("epoch_batches: num_parts must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Input("epoch_batches: empty record list".into()));
    }
    let mut parts = num_parts;
    if parts > records.len() {
        log::warn!(
            "num_parts {} exceeds record count {}; reducing",
            parts,
            records.len()
        );
        parts = records.len();
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = order.len();
    let base = n / parts;
    let extra = n % parts;
    let mut batches = Vec::new();
    let mut cursor = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        let mut part: Vec<usize> = order[cursor..cursor + len].to_vec();
        cursor += len;
        part.sort_by(|&a, &b| {
            records[a]
                .duration_s
                .partial_cmp(&records[b].duration_s)
                .unwrap()
                .then(a.cmp(&b))
        });
        for chunk in part.chunks(batch_size) {
            batches.push(chunk.iter().map(|&i| records[i].id.clone()).collect());
        }
    }
    Ok(BatchPlan { seed, num_parts: parts, batch_size, batches })
}

impl BatchPlan {
    /// CSV export: one row per record occurrence (batch, position, id).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path.as_ref())?;
        wtr.write_record(["batch", "position", "id"])?;
        for (b, batch) in self.batches.iter().enumerate() {
            for (i, id) in batch.iter().enumerate() {
                wtr.write_record([b.to_string(), i.to_string(), id.clone()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Synthetic toy dataset: each record is a random 2–8 character string over
/// `alphabet`, rendered as one 100 ms pure tone per character.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    alphabet: &str,
    corpus: &str,
) -> Result<(Vec<Waveform>, Vec<ManifestRecord>)> {
    if n == 0 {
        return Err(Error::Input("synth_dataset: n must be >= 1".into()));
    }
    let chars: Vec<char> = alphabet.chars().collect();
    if chars.is_empty() {
        return Err(Error::Input("synth_dataset: empty alphabet".into()));
    }
    let tones = ToneMap::for_alphabet(alphabet);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waveforms = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(2..=8usize);
        let text: String = (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
        let wave = tone_sequence(&text, &tones)?;
        records.push(ManifestRecord {
            id: format!("synth-{:04}", i),
            audio: format!("synth:{}", text),
            text: text.clone(),
            translation: None,
            task: Task::Asr,
            src_lang: "en".into(),
            tgt_lang: None,
            duration_s: TONE_SECONDS * len as f64,
            corpus: corpus.to_string(),
        });
        waveforms.push(wave);
    }
    Ok((waveforms, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, duration_s: f64, corpus: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            audio: format!("synth:ab"),
            text: "ab".into(),
            translation: None,
            task: Task::Asr,
            src_lang: "en".into(),
            tgt_lang: None,
            duration_s,
            corpus: corpus.into(),
        }
    }

    #[test]
    fn alpha_one_is_natural_distribution() {
        let p = balanced_probs(&[300, 100], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let p = balanced_probs(&[44000, 10, 3], 0.0).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_point_six_matches_closed_form() {
        // Direct high-precision evaluation of N^0.6 / sum:
        // 44000^0.6 = 611.0427645119371, 100^0.6 = 15.848931924611133.
        let p = balanced_probs(&[44000, 100], 0.6).unwrap();
        let w0 = 611.0427645119371f64;
        let w1 = 15.848931924611133f64;
        assert!((p[0] - w0 / (w0 + w1)).abs() < 1e-9);
        assert!((p[1] - w1 / (w0 + w1)).abs() < 1e-9);
    }

    #[test]
    fn probs_sum_to_one_across_alphas() {
        let sizes = [44000u64, 10000, 10000, 5000, 2600, 2000, 960, 500, 260, 200, 100, 80, 18];
        for alpha in [0.0, 0.3, 0.6, 1.0] {
            let p = balanced_probs(&sizes, alpha).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, "alpha {}", alpha);
        }
    }

    #[test]
    fn flattening_is_monotone_in_alpha() {
        // For N_i > N_j the ratio p_i/p_j must not increase as alpha drops.
        let sizes = [44000u64, 960, 18];
        let mut last_ratio = f64::INFINITY;
        for alpha in [1.0, 0.6, 0.3, 0.0] {
            let p = balanced_probs(&sizes, alpha).unwrap();
            let ratio = p[0] / p[2];
            assert!(ratio <= last_ratio + 1e-12, "alpha {}: {} > {}", alpha, ratio, last_ratio);
            last_ratio = ratio;
        }
    }

    #[test]
    fn zero_size_and_empty_are_input_errors() {
        assert!(matches!(balanced_probs(&[], 0.5), Err(Error::Input(_))));
        assert!(matches!(balanced_probs(&[3, 0], 0.5), Err(Error::Input(_))));
    }

    #[test]
    fn single_corpus_always_sampled() {
        let plan = SamplingPlan::new(vec!["only".into()], vec![7], 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_corpus(&plan, &mut rng), 0);
        }
    }

    #[test]
    fn monte_carlo_frequencies_track_probs() {
        let plan = SamplingPlan::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![5000, 500, 50],
            0.6,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_corpus(&plan, &mut rng)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - plan.probs[i]).abs() < 0.01,
                "corpus {}: {} vs {}",
                i,
                freq,
                plan.probs[i]
            );
        }
    }

    #[test]
    fn epoch_is_a_permutation_of_the_records() {
        let records: Vec<_> = (0..57).map(|i| record(&format!("r{}", i), (i % 9) as f64 + 0.5, "c")).collect();
        let plan = epoch_batches(&records, 5, 4, 42).unwrap();
        let mut seen: Vec<String> = plan.batches.iter().flatten().cloned().collect();
        seen.sort();
        let mut expect: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn single_part_is_globally_length_sorted() {
        let records: Vec<_> = (0..20).map(|i| record(&format!("r{}", i), ((i * 7) % 13) as f64 + 0.1, "c")).collect();
        let plan = epoch_batches(&records, 1, 3, 7).unwrap();
        let by_id: BTreeMap<&str, f64> =
            records.iter().map(|r| (r.id.as_str(), r.duration_s)).collect();
        let durations: Vec<f64> = plan
            .batches
            .iter()
            .flatten()
            .map(|id| by_id[id.as_str()])
            .collect();
        for w in durations.windows(2) {
            assert!(w[0] <= w[1], "not sorted: {:?}", durations);
        }
    }

    #[test]
    fn parts_are_sorted_internally() {
        let records: Vec<_> = (0..40).map(|i| record(&format!("r{}", i), ((i * 11) % 17) as f64 + 0.1, "c")).collect();
        let plan = epoch_batches(&records, 4, 5, 3).unwrap();
        let by_id: BTreeMap<&str, f64> =
            records.iter().map(|r| (r.id.as_str(), r.duration_s)).collect();
        // 40 records, 4 parts of 10 = 2 batches each; durations must be
        // non-decreasing inside each part.
        for part in plan.batches.chunks(2) {
            let durations: Vec<f64> = part.iter().flatten().map(|id| by_id[id.as_str()]).collect();
            for w in durations.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn too_many_parts_reduces_with_warning() {
        let records: Vec<_> = (0..3).map(|i| record(&format!("r{}", i), 1.0, "c")).collect();
        let plan = epoch_batches(&records, 200, 1, 0).unwrap();
        assert_eq!(plan.num_parts, 3);
    }

    #[test]
    fn batch_plan_is_deterministic_per_seed() {
        let records: Vec<_> = (0..31).map(|i| record(&format!("r{}", i), (i % 5) as f64 + 0.2, "c")).collect();
        let a = epoch_batches(&records, 4, 4, 99).unwrap();
        let b = epoch_batches(&records, 4, 4, 99).unwrap();
        assert_eq!(a, b);
        let c = epoch_batches(&records, 4, 4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_dataset_is_reproducible_and_exactly_timed() {
        use sha2::{Digest, Sha256};
        let (waves_a, recs_a) = synth_dataset(5, 32, "abcde", "toy").unwrap();
        let (waves_b, recs_b) = synth_dataset(5, 32, "abcde", "toy").unwrap();
        let hash = |waves: &[Waveform]| {
            let mut h = Sha256::new();
            for w in waves {
                for s in &w.samples {
                    h.update(s.to_le_bytes());
                }
            }
            format!("{:x}", h.finalize())
        };
        assert_eq!(hash(&waves_a), hash(&waves_b));
        for (r, w) in recs_a.iter().zip(&waves_a) {
            assert!((r.duration_s - 0.1 * r.text.chars().count() as f64).abs() < 1e-12);
            assert_eq!(w.samples.len(), 1600 * r.text.chars().count());
            assert!(r.text.chars().count() >= 2 && r.text.chars().count() <= 8);
        }
        assert_eq!(
            recs_a.iter().map(|r| &r.text).collect::<Vec<_>>(),
            recs_b.iter().map(|r| &r.text).collect::<Vec<_>>()
        );
    }

    #[test]
    fn distinct_strings_give_distinct_audio() {
        let tones = ToneMap::for_alphabet("abc");
        let wa = tone_sequence("ab", &tones).unwrap();
        let wb = tone_sequence("ba", &tones).unwrap();
        assert_ne!(wa.samples, wb.samples);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut r = record("x1", 1.5, "toy");
        r.task = Task::Ast;
        r.translation = Some("hallo".into());
        r.tgt_lang = Some("German".into());
        write_manifest(&path, &[r.clone()]).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, "x1");
        assert_eq!(back[0].translation.as_deref(), Some("hallo"));

        // ast without translation fails validation
        let mut bad = record("x2", 1.0, "toy");
        bad.task = Task::Ast;
        assert!(bad.validate().is_err());

        // reserved tag in transcript rejected at ingestion
        let mut tagged = record("x3", 1.0, "toy");
        tagged.text = "evil [Translation] here".into();
        assert!(tagged.validate().is_err());
    }
}
