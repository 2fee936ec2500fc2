//! Ensemble-agreement filtering of machine-translation pairs.
//!
//! Two MT systems translate the same source text; pairs whose outputs
//! agree (low WER/CER, high BLEU, low cosine distance, primary output as
//! the reference) are kept as reliable training data.  The module also
//! sweeps thresholds into selection curves (fraction kept vs. mean
//! quality) and reports length bias of the kept subset.
//!
//! Text metrics normalize by default: Unicode NFC, lowercase, whitespace
//! runs collapsed, punctuation retained.  Normalization is switchable.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

/// Reference thresholds from the shipped translation-data recipe.
pub const DEFAULT_WER_THRESHOLD_EN_DE: f64 = 0.3;
pub const DEFAULT_CER_THRESHOLD_EN_JA: f64 = 0.4;

/// One source sentence with outputs from the primary and secondary MT
/// systems; the primary output is both the metric reference and the text
/// kept on selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslationPair {
    pub id: String,
    pub source_text: String,
    pub primary_out: String,
    pub secondary_out: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary_embedding: Option<Vec<f64>>,
    /// Reference quality score (e.g. BLEU against a gold translation),
    /// used only for curve calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
}

impl TranslationPair {
    pub fn validate(&self) -> Result<()> {
        if self.source_text.is_empty() || self.primary_out.is_empty() || self.secondary_out.is_empty() {
            return Err(Error::Data(format!("pair {}: empty text field", self.id)));
        }
        if let (Some(a), Some(b)) = (&self.primary_embedding, &self.secondary_embedding) {
            if a.len() != b.len() {
                return Err(Error::Data(format!(
                    "pair {}: embedding dims {} vs {}",
                    self.id,
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<TranslationPair>> {
    let raw = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Input(format!("cannot read {}: {}", path.as_ref().display(), e)))?;
    let mut pairs = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: TranslationPair = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("pairs line {}: {}", lineno + 1, e)))?;
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// NFC, lowercase, collapse whitespace runs; punctuation retained.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn edit_rate(ref_tokens: &[&str], hyp_tokens: &[&str]) -> f64 {
    if ref_tokens.is_empty() {
        // Defined: empty reference scores the full hypothesis length.
        return hyp_tokens.len() as f64;
    }
    levenshtein(ref_tokens, hyp_tokens) as f64 / ref_tokens.len() as f64
}

/// Word error rate: word-level edit distance over reference word count.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let rt: Vec<&str> = r.split_whitespace().collect();
    let ht: Vec<&str> = h.split_whitespace().collect();
    edit_rate(&rt, &ht)
}

/// Character error rate; characters include single spaces after
/// normalization.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let rc: Vec<String> = r.chars().map(String::from).collect();
    let hc: Vec<String> = h.chars().map(String::from).collect();
    let rt: Vec<&str> = rc.iter().map(|s| s.as_str()).collect();
    let ht: Vec<&str> = hc.iter().map(|s| s.as_str()).collect();
    edit_rate(&rt, &ht)
}

/// Corpus-level BLEU-4 in [0, 100]: uniform n-gram weights, counts pooled
/// over the corpus before the geometric mean, standard brevity penalty,
/// no smoothing.
pub fn bleu(references: &[&str], hypotheses: &[&str]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Input(format!(
            "bleu: {} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Input("bleu: empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut ref_len = 0usize;
    let mut hyp_len = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        let rn = normalize_text(r);
        let hn = normalize_text(h);
        let rt: Vec<&str> = rn.split_whitespace().collect();
        let ht: Vec<&str> = hn.split_whitespace().collect();
        ref_len += rt.len();
        hyp_len += ht.len();
        for n in 1..=4usize {
            if ht.len() < n {
                continue;
            }
            let mut ref_counts = std::collections::HashMap::<&[&str], usize>::new();
            if rt.len() >= n {
                for g in rt.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
            }
            let mut hyp_counts = std::collections::HashMap::<&[&str], usize>::new();
            for g in ht.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            total[n - 1] += ht.len() - n + 1;
            for (g, c) in hyp_counts {
                matched[n - 1] += c.min(ref_counts.get(g).copied().unwrap_or(0));
            }
        }
    }
    if total.iter().any(|&t| t == 0) || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4)
        .map(|n| (matched[n] as f64 / total[n] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_precision.exp())
}

/// Cosine distance `1 - u.v / (|u||v|)` in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Input(format!("cosine: dims {} vs {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Input("cosine: zero vector".into()));
    }
    Ok(1.0 - dot / (nu * nv))
}

/// Similarity metric between the two systems' outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Wer,
    Cer,
    Bleu,
    Cosine,
}

impl Metric {
    /// `true` when pairs are kept for metric values <= threshold.
    fn keeps_low(self) -> bool {
        !matches!(self, Metric::Bleu)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wer" => Ok(Metric::Wer),
            "cer" => Ok(Metric::Cer),
            "bleu" => Ok(Metric::Bleu),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Input(format!("unknown metric {:?}", other))),
        }
    }
}

/// Keep rule: `wer/cer <= t`, `bleu >= t`, `cosine_distance <= t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSpec {
    pub metric: Metric,
    pub threshold: f64,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.metric {
            Metric::Wer | Metric::Cer => self.threshold >= 0.0,
            Metric::Bleu => (0.0..=100.0).contains(&self.threshold),
            Metric::Cosine => (0.0..=2.0).contains(&self.threshold) || self.threshold.is_infinite(),
        };
        if !ok {
            return Err(Error::Input(format!(
                "threshold {} out of range for {:?}",
                self.threshold, self.metric
            )));
        }
        Ok(())
    }
}

/// Metric value for a single pair (primary = reference, secondary =
/// hypothesis).
pub fn pair_metric(pair: &TranslationPair, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Wer => Ok(wer(&pair.primary_out, &pair.secondary_out)),
        Metric::Cer => Ok(cer(&pair.primary_out, &pair.secondary_out)),
        Metric::Bleu => bleu(&[pair.primary_out.as_str()], &[pair.secondary_out.as_str()]),
        Metric::Cosine => {
            let (Some(u), Some(v)) = (&pair.primary_embedding, &pair.secondary_embedding) else {
                return Err(Error::Input(format!("pair {}: missing embeddings", pair.id)));
            };
            cosine_distance(u, v)
        }
    }
}

fn source_len_words(pair: &TranslationPair) -> f64 {
    normalize_text(&pair.source_text).split_whitespace().count() as f64
}

/// Summary statistics of one filtering run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub kept_fraction: f64,
    /// Mean metric value over all pairs and over the kept subset.
    pub mean_metric_all: f64,
    pub mean_metric_kept: Option<f64>,
    pub mean_source_len_kept: Option<f64>,
    pub mean_source_len_all: f64,
}

/// Apply the keep rule; returns the selected pairs and run statistics.
///
/// Requesting the cosine metric without embeddings fails up front, listing
/// every offending pair id.
pub fn filter_pairs(
    pairs: &[TranslationPair],
    spec: &FilterSpec,
) -> Result<(Vec<TranslationPair>, FilterStats)> {
    spec.validate()?;
    if spec.metric == Metric::Cosine {
        let missing: Vec<&str> = pairs
            .iter()
            .filter(|p| p.primary_embedding.is_none() || p.secondary_embedding.is_none())
            .map(|p| p.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Input(format!(
                "cosine filtering requires embeddings; missing for: {}",
                missing.join(", ")
            )));
        }
    }
    let mut kept = Vec::new();
    let mut metric_all = 0.0;
    let mut metric_kept = 0.0;
    let mut len_all = 0.0;
    let mut len_kept = 0.0;
    for pair in pairs {
        let value = pair_metric(pair, spec.metric)?;
        let keep = if spec.metric.keeps_low() {
            value <= spec.threshold
        } else {
            value >= spec.threshold
        };
        metric_all += value;
        len_all += source_len_words(pair);
        if keep {
            metric_kept += value;
            len_kept += source_len_words(pair);
            kept.push(pair.clone());
        }
    }
    let total = pairs.len();
    let stats = FilterStats {
        total,
        kept: kept.len(),
        kept_fraction: if total == 0 { 0.0 } else { kept.len() as f64 / total as f64 },
        mean_metric_all: if total == 0 { 0.0 } else { metric_all / total as f64 },
        mean_metric_kept: (!kept.is_empty()).then(|| metric_kept / kept.len() as f64),
        mean_source_len_kept: (!kept.is_empty()).then(|| len_kept / kept.len() as f64),
        mean_source_len_all: if total == 0 { 0.0 } else { len_all / total as f64 },
    };
    Ok((kept, stats))
}

/// One point of a selection curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fraction: f64,
    pub mean_quality: f64,
}

/// Sweep thresholds over the observed metric values; each point records
/// the kept fraction and the mean quality of the kept subset.  Points are
/// emitted sorted by fraction ascending.
pub fn selection_curve(pairs: &[TranslationPair], metric: Metric) -> Result<Vec<CurvePoint>> {
    if pairs.is_empty() {
        return Err(Error::Input("selection_curve: no pairs".into()));
    }
    let missing: Vec<&str> = pairs
        .iter()
        .filter(|p| p.quality.is_none())
        .map(|p| p.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "selection_curve requires quality scores; missing for: {}",
            missing.join(", ")
        )));
    }
    let scored: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| Ok((pair_metric(p, metric)?, p.quality.unwrap())))
        .collect::<Result<_>>()?;
    let mut thresholds: Vec<f64> = scored.iter().map(|&(m, _)| m).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let kept: Vec<&(f64, f64)> = scored
            .iter()
            .filter(|&&(m, _)| if metric.keeps_low() { m <= t } else { m >= t })
            .collect();
        if kept.is_empty() {
            continue;
        }
        points.push(CurvePoint {
            threshold: t,
            fraction: kept.len() as f64 / scored.len() as f64,
            mean_quality: kept.iter().map(|&&(_, q)| q).sum::<f64>() / kept.len() as f64,
        });
    }
    points.sort_by(|a, b| a.fraction.partial_cmp(&b.fraction).unwrap());
    Ok(points)
}

pub fn write_curve_csv(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    wtr.write_record(["threshold", "fraction", "mean_quality"])?;
    for p in points {
        wtr.write_record([p.threshold.to_string(), p.fraction.to_string(), p.mean_quality.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mean source length of the kept subset vs. the whole set.
#[derive(Debug, Clone, Serialize)]
pub struct LengthBias {
    pub mean_source_len_kept: Option<f64>,
    pub mean_source_len_all: Option<f64>,
    /// kept / all; 1.0 means no bias toward short or long sentences.
    pub ratio: Option<f64>,
}

pub fn length_bias_report(pairs: &[TranslationPair], spec: &FilterSpec) -> Result<LengthBias> {
    let (_, stats) = filter_pairs(pairs, spec)?;
    let mean_all = (stats.total > 0).then_some(stats.mean_source_len_all);
    let ratio = match (stats.mean_source_len_kept, mean_all) {
        (Some(k), Some(a)) if a > 0.0 => Some(k / a),
        _ => None,
    };
    Ok(LengthBias {
        mean_source_len_kept: stats.mean_source_len_kept,
        mean_source_len_all: mean_all,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(id: &str, primary: &str, secondary: &str) -> TranslationPair {
        TranslationPair {
            id: id.into(),
            source_text: format!("source of {}", id),
            primary_out: primary.into(),
            secondary_out: secondary.into(),
            primary_embedding: None,
            secondary_embedding: None,
            quality: None,
        }
    }

    #[test]
    fn wer_identity_and_hand_computed_cases() {
        assert_eq!(wer("a b c", "a b c"), 0.0);
        // one deletion over three reference words
        assert!((wer("a b c", "a c") - 1.0 / 3.0).abs() < 1e-12);
        // one substitution over two reference words
        assert!((wer("a b", "a c") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wer_empty_reference_scores_hypothesis_length() {
        assert_eq!(wer("", "a b"), 2.0);
        assert_eq!(wer("", ""), 0.0);
    }

    #[test]
    fn cer_hand_computed_cases() {
        assert_eq!(cer("ab", "ab"), 0.0);
        assert!((cer("ab", "ac") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn default_thresholds_match_the_recipe() {
        assert_eq!(DEFAULT_WER_THRESHOLD_EN_DE, 0.3);
        assert_eq!(DEFAULT_CER_THRESHOLD_EN_JA, 0.4);
    }

    #[test]
    fn normalization_lowercases_and_collapses_whitespace() {
        assert_eq!(normalize_text("  Hello   WORLD "), "hello world");
        assert_eq!(wer("Hello World", "hello  world"), 0.0);
    }

    #[test]
    fn bleu_perfect_match_is_exactly_100() {
        let refs = ["the cat sat", "on the mat today fine"];
        let hyps = refs;
        assert_eq!(bleu(&refs, &hyps).unwrap(), 100.0);
    }

    #[test]
    fn bleu_zero_fourgram_overlap_is_zero() {
        let refs = ["a b c d e", "f g h i j"];
        let hyps = ["x y z w v", "q r s t u"];
        assert_eq!(bleu(&refs, &hyps).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_independent_reference_on_fixture() {
        // Frozen from an independent pooled-count implementation:
        // precisions 18/20, 12/17, 8/14, 4/11, BP = exp(1 - 21/20).
        let refs = [
            "the cat sat on the mat",
            "a quick brown fox jumps over the lazy dog",
            "hello world this is a test",
        ];
        let hyps = [
            "the cat sat on a mat",
            "a quick brown fox jumped over the lazy dog",
            "hello world this is test",
        ];
        let expect = 57.33717596834449;
        let got = bleu(&refs, &hyps).unwrap();
        assert!((got - expect).abs() <= 0.01, "{} vs {}", got, expect);

        // Second route: multiset intersection via sorted n-gram lists.
        let mut log_p = 0.0f64;
        let (mut rl, mut hl) = (0usize, 0usize);
        for n in 1..5 {
            let (mut m, mut tot) = (0usize, 0usize);
            for (r, h) in refs.iter().zip(&hyps) {
                let rt: Vec<&str> = r.split_whitespace().collect();
                let ht: Vec<&str> = h.split_whitespace().collect();
                if n == 1 {
                    rl += rt.len();
                    hl += ht.len();
                }
                let mut rgrams: Vec<Vec<&str>> = rt.windows(n).map(|w| w.to_vec()).collect();
                rgrams.sort();
                for g in ht.windows(n) {
                    tot += 1;
                    if let Ok(pos) = rgrams.binary_search(&g.to_vec()) {
                        m += 1;
                        rgrams.remove(pos);
                    }
                }
            }
            log_p += (m as f64 / tot as f64).ln() / 4.0;
        }
        let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
        let oracle = 100.0 * bp * log_p.exp();
        assert!((got - oracle).abs() <= 0.01, "{} vs oracle {}", got, oracle);
    }

    #[test]
    fn bleu_is_invariant_under_consistent_reordering() {
        let refs = ["one two three four", "five six seven eight", "nine ten"];
        let hyps = ["one two three five", "five six seven eight", "ten nine"];
        let a = bleu(&refs, &hyps).unwrap();
        let b = bleu(&[refs[2], refs[0], refs[1]], &[hyps[2], hyps[0], hyps[1]]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bleu_length_mismatch_is_input_error() {
        assert!(matches!(bleu(&["a"], &["a", "b"]), Err(Error::Input(_))));
    }

    #[test]
    fn cosine_distance_cases() {
        assert!((cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap()).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Input(_))));
        assert!(matches!(cosine_distance(&[1.0], &[1.0, 0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn infinite_threshold_keeps_everything() {
        let pairs = vec![pair("a", "x y", "z w"), pair("b", "q", "q")];
        let spec = FilterSpec { metric: Metric::Wer, threshold: f64::INFINITY };
        let (kept, stats) = filter_pairs(&pairs, &spec).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(stats.kept_fraction, 1.0);
    }

    #[test]
    fn zero_threshold_keeps_exactly_the_identical_half() {
        let mut pairs = Vec::new();
        for i in 0..10 {
            if i % 2 == 0 {
                pairs.push(pair(&format!("same{}", i), "hello there world", "hello there world"));
            } else {
                pairs.push(pair(&format!("diff{}", i), "hello there world", "completely other text"));
            }
        }
        let spec = FilterSpec { metric: Metric::Wer, threshold: 0.0 };
        let (kept, _) = filter_pairs(&pairs, &spec).unwrap();
        assert_eq!(kept.len(), 5);
        assert!(kept.iter().all(|p| p.id.starts_with("same")));
    }

    #[test]
    fn cosine_without_embeddings_lists_offending_ids() {
        let pairs = vec![pair("p1", "a", "a"), pair("p2", "b", "b")];
        let spec = FilterSpec { metric: Metric::Cosine, threshold: 0.5 };
        let err = filter_pairs(&pairs, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("p1") && msg.contains("p2"));
    }

    #[test]
    fn curve_is_flat_for_constant_quality() {
        let mut pairs: Vec<TranslationPair> = (0..6)
            .map(|i| {
                let mut p = pair(&format!("p{}", i), "a b c d", if i < 3 { "a b c d" } else { "x y" });
                p.quality = Some(42.0);
                p
            })
            .collect();
        pairs[0].secondary_out = "a b c z".into();
        let curve = selection_curve(&pairs, Metric::Wer).unwrap();
        for pt in &curve {
            assert!((pt.mean_quality - 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn anticorrelated_quality_gives_decreasing_curve() {
        // Quality drops exactly as disagreement grows.
        let texts = ["a b c d e", "a b c d x", "a b x y z", "p q r s t"];
        let qualities = [90.0, 70.0, 50.0, 10.0];
        let pairs: Vec<TranslationPair> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut p = pair(&format!("p{}", i), "a b c d e", t);
                p.quality = Some(qualities[i]);
                p
            })
            .collect();
        let curve = selection_curve(&pairs, Metric::Wer).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].fraction < w[1].fraction);
            assert!(w[0].mean_quality > w[1].mean_quality);
        }
        // Full-selection mean equals the global mean exactly.
        let last = curve.last().unwrap();
        assert_eq!(last.fraction, 1.0);
        let global = qualities.iter().sum::<f64>() / qualities.len() as f64;
        assert!((last.mean_quality - global).abs() < 1e-12);
    }

    #[test]
    fn curve_without_quality_is_input_error() {
        let pairs = vec![pair("p", "a", "a")];
        assert!(matches!(selection_curve(&pairs, Metric::Wer), Err(Error::Input(_))));
    }

    #[test]
    fn length_bias_vacuous_filter_has_unit_ratio() {
        let pairs = vec![pair("a", "x", "y"), pair("b", "longer text here", "other")];
        let spec = FilterSpec { metric: Metric::Wer, threshold: f64::INFINITY };
        let report = length_bias_report(&pairs, &spec).unwrap();
        assert!((report.ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn length_bias_flags_short_sentence_selection() {
        // Only short sources agree.
        let mut pairs = Vec::new();
        for i in 0..4 {
            let mut p = pair(&format!("short{}", i), "yes", "yes");
            p.source_text = "hi there".into();
            pairs.push(p);
            let mut p = pair(&format!("long{}", i), "alpha beta gamma delta", "zeta eta theta iota");
            p.source_text = "this is a much longer source sentence".into();
            pairs.push(p);
        }
        let spec = FilterSpec { metric: Metric::Wer, threshold: 0.1 };
        let report = length_bias_report(&pairs, &spec).unwrap();
        assert!(report.ratio.unwrap() < 1.0);
    }

    #[test]
    fn length_bias_empty_selection_reports_absent() {
        let pairs = vec![pair("a", "x y z", "p q r")];
        let spec = FilterSpec { metric: Metric::Wer, threshold: 0.0 };
        let report = length_bias_report(&pairs, &spec).unwrap();
        assert!(report.mean_source_len_kept.is_none());
        assert!(report.ratio.is_none());
    }

    #[test]
    fn wer_cer_zero_iff_equal_tokens() {
        assert_eq!(wer("same text", "same text"), 0.0);
        assert!(wer("same text", "same texts") > 0.0);
        assert_eq!(cer("same", "same"), 0.0);
        assert!(cer("same", "sane") > 0.0);
    }

    proptest! {
        #[test]
        fn kept_count_is_monotone_in_wer_threshold(
            seed in 0u64..500,
            t1 in 0.0f64..1.5,
            t2 in 0.0f64..1.5,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let words = ["the", "cat", "dog", "runs", "fast", "slow"];
            let mut pairs = Vec::new();
            for i in 0..20 {
                let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
                    (0..rng.gen_range(1..6))
                        .map(|_| words[rng.gen_range(0..words.len())])
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                let a = gen(&mut rng);
                let b = gen(&mut rng);
                pairs.push(pair(&format!("p{}", i), &a, &b));
            }
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let kept_lo = filter_pairs(&pairs, &FilterSpec { metric: Metric::Wer, threshold: lo }).unwrap().0.len();
            let kept_hi = filter_pairs(&pairs, &FilterSpec { metric: Metric::Wer, threshold: hi }).unwrap().0.len();
            prop_assert!(kept_lo <= kept_hi);
        }

        #[test]
        fn bleu_is_monotone_filter_in_reverse(
            t1 in 0.0f64..100.0,
            t2 in 0.0f64..100.0,
        ) {
            let pairs = vec![
                pair("a", "the cat sat on the mat", "the cat sat on the mat"),
                pair("b", "the cat sat on the mat", "the cat sat on a mat"),
                pair("c", "the cat sat on the mat", "dogs bark loudly at night"),
            ];
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let kept_lo = filter_pairs(&pairs, &FilterSpec { metric: Metric::Bleu, threshold: lo }).unwrap().0.len();
            let kept_hi = filter_pairs(&pairs, &FilterSpec { metric: Metric::Bleu, threshold: hi }).unwrap().0.len();
            // >= rule: larger threshold keeps fewer
            prop_assert!(kept_hi <= kept_lo);
        }
    }
}
