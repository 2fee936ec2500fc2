//! Chat-formatted prompt construction for ASR, AST, and CoT-AST tasks.
//!
//! Each training example is three turns: a fixed system prompt (with the
//! date substituted), a user query drawn from a task-specific pool, and the
//! expected response.  Speech prompts carry exactly one `<|audio|>` token.
//! Pool files hold one template per line with `{audio}` and `{lang}`
//! placeholders; the shipped pools live under `resources/prompts/`.

use rand::Rng;

use crate::data::{ManifestRecord, Task};
use crate::{Error, Result};

/// The audio placeholder token spliced over by adapter embeddings.
pub const AUDIO_TOKEN: &str = "<|audio|>";

pub const COT_TRANSCRIPTION_TAG: &str = "[Transcription]";
pub const COT_TRANSLATION_TAG: &str = "[Translation]";

/// Fraction of AST examples assigned to the chain-of-thought variant.
pub const COT_PROBABILITY: f64 = 0.3;

const SYSTEM_TEMPLATE: &str = "Knowledge Cutoff Date: April 2024. Today's Date: DATE. \
You are Granite, developed by IBM. You are a helpful AI assistant";

const ASR_POOL_SIZE: usize = 24;
const AST_POOL_SIZE: usize = 24;
const COT_POOL_SIZE: usize = 8;

/// Prompt variant actually rendered for an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    Asr,
    Ast,
    CotAst,
}

/// One chat-formatted example: system/user/response triple.
#[derive(Debug, Clone)]
pub struct ChatExample {
    pub system: String,
    pub user: String,
    pub response: String,
    pub task: PromptTask,
    pub tgt_lang: Option<String>,
}

/// Task-specific prompt template pools (24 ASR / 24 AST / 8 CoT-AST).
#[derive(Debug, Clone)]
pub struct PromptPools {
    pub asr: Vec<String>,
    pub ast: Vec<String>,
    pub cot_ast: Vec<String>,
}

impl PromptPools {
    /// The pools shipped with the crate.
    pub fn builtin() -> Self {
        let parse = |raw: &str| -> Vec<String> {
            raw.lines().map(|l| l.to_string()).filter(|l| !l.is_empty()).collect()
        };
        let pools = Self {
            asr: parse(include_str!("../resources/prompts/asr.txt")),
            ast: parse(include_str!("../resources/prompts/ast.txt")),
            cot_ast: parse(include_str!("../resources/prompts/cot_ast.txt")),
        };
        pools.validate().expect("builtin prompt pools must be valid");
        pools
    }

    /// Load override pools from UTF-8 files, one template per line.
    pub fn from_files(
        asr: impl AsRef<std::path::Path>,
        ast: impl AsRef<std::path::Path>,
        cot_ast: impl AsRef<std::path::Path>,
    ) -> Result<Self> {
        let read = |p: &std::path::Path| -> Result<Vec<String>> {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| Error::Input(format!("cannot read {}: {}", p.display(), e)))?;
            Ok(raw.lines().map(|l| l.to_string()).filter(|l| !l.is_empty()).collect())
        };
        let pools = Self {
            asr: read(asr.as_ref())?,
            ast: read(ast.as_ref())?,
            cot_ast: read(cot_ast.as_ref())?,
        };
        pools.validate()?;
        Ok(pools)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, pool, size, needs_lang) in [
            ("asr", &self.asr, ASR_POOL_SIZE, false),
            ("ast", &self.ast, AST_POOL_SIZE, true),
            ("cot_ast", &self.cot_ast, COT_POOL_SIZE, true),
        ] {
            if pool.len() != size {
                return Err(Error::Config(format!(
                    "{} pool has {} templates, expected {}",
                    name,
                    pool.len(),
                    size
                )));
            }
            for t in pool {
                if t.matches("{audio}").count() != 1 {
                    return Err(Error::Config(format!(
                        "{} template must contain exactly one {{audio}}: {:?}",
                        name, t
                    )));
                }
                if needs_lang && !t.contains("{lang}") {
                    return Err(Error::Config(format!(
                        "{} template must contain {{lang}}: {:?}",
                        name, t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The fixed system prompt with the DATE placeholder substituted.
pub fn render_system_prompt(date: &str) -> Result<String> {
    let ok = date.len() == 10
        && date.bytes().enumerate().all(|(i, b)| match i {
            4 | 7 => b == b'-',
            _ => b.is_ascii_digit(),
        });
    if !ok {
        return Err(Error::Input(format!("date {:?} is not ISO YYYY-MM-DD", date)));
    }
    Ok(SYSTEM_TEMPLATE.replace("DATE", date))
}

fn fill(template: &str, lang: Option<&str>) -> String {
    let mut out = template.replace("{audio}", AUDIO_TOKEN);
    if let Some(lang) = lang {
        out = out.replace("{lang}", lang);
    }
    out
}

/// Build one chat example from a manifest record.
///
/// ASR draws uniformly from the 24 ASR templates; AST draws the CoT
/// variant with probability 0.3, otherwise a direct translation prompt.
/// CoT responses are `[Transcription] t [Translation] x`.
pub fn build_prompt<R: Rng>(
    record: &ManifestRecord,
    pools: &PromptPools,
    date: &str,
    rng: &mut R,
) -> Result<ChatExample> {
    let system = render_system_prompt(date)?;
    match record.task {
        Task::Asr => {
            let template = &pools.asr[rng.gen_range(0..pools.asr.len())];
            Ok(ChatExample {
                system,
                user: fill(template, None),
                response: record.text.clone(),
                task: PromptTask::Asr,
                tgt_lang: None,
            })
        }
        Task::Ast => {
            let translation = record.translation.as_ref().ok_or_else(|| {
                Error::Data(format!("record {}: ast requires translation text", record.id))
            })?;
            let lang = record.tgt_lang.as_ref().ok_or_else(|| {
                Error::Data(format!("record {}: ast requires tgt_lang", record.id))
            })?;
            if rng.gen::<f64>() < COT_PROBABILITY {
                let template = &pools.cot_ast[rng.gen_range(0..pools.cot_ast.len())];
                Ok(ChatExample {
                    system,
                    user: fill(template, Some(lang)),
                    response: format!(
                        "{} {} {} {}",
                        COT_TRANSCRIPTION_TAG, record.text, COT_TRANSLATION_TAG, translation
                    ),
                    task: PromptTask::CotAst,
                    tgt_lang: Some(lang.clone()),
                })
            } else {
                let template = &pools.ast[rng.gen_range(0..pools.ast.len())];
                Ok(ChatExample {
                    system,
                    user: fill(template, Some(lang)),
                    response: translation.clone(),
                    task: PromptTask::Ast,
                    tgt_lang: Some(lang.clone()),
                })
            }
        }
    }
}

/// Split a CoT response on the literal `[Transcription]`/`[Translation]`
/// tags (in that order); both parts are whitespace-trimmed.
pub fn parse_cot_response(text: &str) -> Result<(String, String)> {
    let t_pos = text
        .find(COT_TRANSCRIPTION_TAG)
        .ok_or_else(|| Error::Parse("missing [Transcription] tag".into()))?;
    let x_pos = text
        .find(COT_TRANSLATION_TAG)
        .ok_or_else(|| Error::Parse("missing [Translation] tag".into()))?;
    if x_pos < t_pos {
        return Err(Error::Parse("tags out of order".into()));
    }
    let transcript = text[t_pos + COT_TRANSCRIPTION_TAG.len()..x_pos].trim().to_string();
    let translation = text[x_pos + COT_TRANSLATION_TAG.len()..].trim().to_string();
    Ok((transcript, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn asr_record() -> ManifestRecord {
        ManifestRecord {
            id: "r0".into(),
            audio: "synth:ab".into(),
            text: "abba".into(),
            translation: None,
            task: Task::Asr,
            src_lang: "en".into(),
            tgt_lang: None,
            duration_s: 0.4,
            corpus: "toy".into(),
        }
    }

    fn ast_record() -> ManifestRecord {
        ManifestRecord {
            translation: Some("hallo welt".into()),
            task: Task::Ast,
            tgt_lang: Some("German".into()),
            ..asr_record()
        }
    }

    #[test]
    fn builtin_pools_have_the_documented_sizes() {
        let pools = PromptPools::builtin();
        assert_eq!(pools.asr.len(), 24);
        assert_eq!(pools.ast.len(), 24);
        assert_eq!(pools.cot_ast.len(), 8);
    }

    #[test]
    fn builtin_pools_include_the_reference_wordings() {
        let pools = PromptPools::builtin();
        assert!(pools
            .asr
            .contains(&"Listen to the speech and write down its content {audio}.".to_string()));
        assert!(pools
            .ast
            .contains(&"{audio} translate the speech to {lang}.".to_string()));
        assert!(pools.cot_ast.contains(
            &"{audio} Can you transcribe the speech, and then translate it to {lang}?".to_string()
        ));
    }

    #[test]
    fn asr_prompt_has_one_placeholder_and_transcript_response() {
        let pools = PromptPools::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ex = build_prompt(&asr_record(), &pools, "2025-01-01", &mut rng).unwrap();
            assert_eq!(ex.user.matches(AUDIO_TOKEN).count(), 1);
            assert_eq!(ex.response, "abba");
            assert_eq!(ex.task, PromptTask::Asr);
        }
    }

    #[test]
    fn ast_cot_branch_renders_both_tags_in_order() {
        let pools = PromptPools::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw_cot = false;
        for _ in 0..100 {
            let ex = build_prompt(&ast_record(), &pools, "2025-01-01", &mut rng).unwrap();
            assert_eq!(ex.user.matches(AUDIO_TOKEN).count(), 1);
            match ex.task {
                PromptTask::CotAst => {
                    saw_cot = true;
                    let t = ex.response.find(COT_TRANSCRIPTION_TAG).unwrap();
                    let x = ex.response.find(COT_TRANSLATION_TAG).unwrap();
                    assert!(t < x);
                    assert!(ex.user.contains("German"));
                }
                PromptTask::Ast => assert_eq!(ex.response, "hallo welt"),
                PromptTask::Asr => panic!("asr from ast record"),
            }
        }
        assert!(saw_cot);
    }

    #[test]
    fn ast_without_translation_is_data_error() {
        let pools = PromptPools::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = ast_record();
        r.translation = None;
        assert!(matches!(
            build_prompt(&r, &pools, "2025-01-01", &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fixed_seed_reproduces_the_same_example() {
        let pools = PromptPools::builtin();
        let a = build_prompt(&ast_record(), &pools, "2025-01-01", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_prompt(&ast_record(), &pools, "2025-01-01", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.user, b.user);
        assert_eq!(a.response, b.response);
    }

    #[test]
    fn system_prompt_contains_cutoff_and_matches_golden_file() {
        let s = render_system_prompt("2025-01-01").unwrap();
        assert!(s.contains("Knowledge Cutoff Date: April 2024"));
        let golden = include_str!("../resources/golden/system_prompt_2025-01-01.txt");
        assert_eq!(s, golden);
    }

    #[test]
    fn two_dates_differ_only_in_the_date_substring() {
        let a = render_system_prompt("2025-01-01").unwrap();
        let b = render_system_prompt("2026-12-31").unwrap();
        assert_eq!(a.replace("2025-01-01", "2026-12-31"), b);
    }

    #[test]
    fn bad_date_is_rejected() {
        assert!(render_system_prompt("Jan 1, 2025").is_err());
        assert!(render_system_prompt("2025-1-1").is_err());
    }

    #[test]
    fn parse_cot_canonical_and_negative_cases() {
        let (t, x) = parse_cot_response("[Transcription] hello [Translation] hallo").unwrap();
        assert_eq!(t, "hello");
        assert_eq!(x, "hallo");
        assert!(matches!(parse_cot_response("no tags at all"), Err(Error::Parse(_))));
        assert!(matches!(
            parse_cot_response("[Translation] x [Transcription] t"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn cot_roundtrip_recovers_transcript_and_translation() {
        let pools = PromptPools::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 20 {
            let ex = build_prompt(&ast_record(), &pools, "2025-01-01", &mut rng).unwrap();
            if ex.task == PromptTask::CotAst {
                let (t, x) = parse_cot_response(&ex.response).unwrap();
                assert_eq!(t, "abba");
                assert_eq!(x, "hallo welt");
                checked += 1;
            }
        }
    }

    #[test]
    fn cot_fraction_is_point_three_within_two_percent() {
        let pools = PromptPools::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let record = ast_record();
        let mut cot = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let ex = build_prompt(&record, &pools, "2025-01-01", &mut rng).unwrap();
            if ex.task == PromptTask::CotAst {
                cot += 1;
            }
        }
        let frac = cot as f64 / n as f64;
        assert!((frac - 0.3).abs() <= 0.02, "cot fraction {}", frac);
    }

    #[test]
    fn asr_pool_selection_is_uniform() {
        let pools = PromptPools::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let record = asr_record();
        let mut counts = std::collections::HashMap::<String, usize>::new();
        let n = 100_000;
        for _ in 0..n {
            let ex = build_prompt(&record, &pools, "2025-01-01", &mut rng).unwrap();
            *counts.entry(ex.user).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        for (prompt, c) in counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 1.0 / 24.0).abs() <= 0.01,
                "template {:?} frequency {}",
                prompt,
                freq
            );
        }
    }

    #[test]
    fn undersized_override_pool_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, lines: &[&str]| {
            let p = dir.path().join(name);
            std::fs::write(&p, lines.join("\n")).unwrap();
            p
        };
        let asr = write("asr.txt", &["only one {audio}"]);
        let ast = write("ast.txt", &["{audio} to {lang}"]);
        let cot = write("cot.txt", &["{audio} {lang}"]);
        assert!(matches!(
            PromptPools::from_files(asr, ast, cot),
            Err(Error::Config(_))
        ));
    }
}
