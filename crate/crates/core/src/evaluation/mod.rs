//! Text normalization, word error rate and WER grids.

mod report;

pub use report::{Cell, ColumnKey, EvalReport, RowKey};

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{load_checkpoint, prepare_utterances, Projector, PromptTemplate};
use crate::backends::{Backends, LanguageModel};
use crate::decoding::{decode_prepared, DecodeConfig};
use crate::error::{Error, Result};
use crate::training::DataRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationPolicy {
    pub lowercase: bool,
    /// Replaces every non-alphanumeric, non-space character except the
    /// apostrophe with a space.
    pub strip_punctuation: bool,
    pub collapse_whitespace: bool,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            collapse_whitespace: true,
        }
    }
}

impl NormalizationPolicy {
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.lowercase {
            parts.push("lowercased");
        }
        if self.strip_punctuation {
            parts.push("punctuation stripped (apostrophes kept)");
        }
        if self.collapse_whitespace {
            parts.push("whitespace collapsed");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(", ")
        }
    }
}

/// Applies the enabled steps in the order lowercase, punctuation, whitespace.
pub fn normalize(text: &str, policy: &NormalizationPolicy) -> String {
    let mut s = if policy.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    if policy.strip_punctuation {
        s = s
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c.is_whitespace() || c == '\'' {
                    c
                } else {
                    ' '
                }
            })
            .collect();
    }
    if policy.collapse_whitespace {
        s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref_words: usize,
    pub wer: f64,
    /// Empty reference with a non-empty hypothesis; `wer` is then `I / 1`.
    pub degenerate: bool,
}

impl WerResult {
    pub fn from_counts(s: usize, d: usize, i: usize, n: usize) -> Self {
        let errors = (s + d + i) as f64;
        let (wer, degenerate) = match n {
            0 => (errors, errors > 0.0),
            _ => (errors / n as f64, false),
        };
        Self {
            substitutions: s,
            deletions: d,
            insertions: i,
            n_ref_words: n,
            wer,
            degenerate,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Word-level alignment counts `(S, D, I)`.
///
/// The DP minimizes total edits, and among equal totals prefers more
/// substitutions; the two keys determine `D` and `I`.
pub fn align_counts(reference: &[&str], hypothesis: &[&str]) -> (usize, usize, usize) {
    let (n, m) = (reference.len(), hypothesis.len());
    // (edits, -subs) per cell, plus the counts reached.
    #[derive(Clone, Copy)]
    struct C {
        e: usize,
        s: usize,
        d: usize,
        i: usize,
    }
    let better = |a: &C, b: &C| (a.e, std::cmp::Reverse(a.s)) < (b.e, std::cmp::Reverse(b.s));
    let mut prev: Vec<C> = (0..=m)
        .map(|j| C {
            e: j,
            s: 0,
            d: 0,
            i: j,
        })
        .collect();
    for r in 1..=n {
        let mut cur = vec![
            C {
                e: r,
                s: 0,
                d: r,
                i: 0
            };
            m + 1
        ];
        for h in 1..=m {
            let diag = prev[h - 1];
            let mut best = if reference[r - 1] == hypothesis[h - 1] {
                diag
            } else {
                C {
                    e: diag.e + 1,
                    s: diag.s + 1,
                    ..diag
                }
            };
            let del = C {
                e: prev[h].e + 1,
                d: prev[h].d + 1,
                ..prev[h]
            };
            let ins = C {
                e: cur[h - 1].e + 1,
                i: cur[h - 1].i + 1,
                ..cur[h - 1]
            };
            for c in [del, ins] {
                if better(&c, &best) {
                    best = c;
                }
            }
            cur[h] = best;
        }
        prev = cur;
    }
    let c = prev[m];
    (c.s, c.d, c.i)
}

pub fn wer(reference: &str, hypothesis: &str, policy: &NormalizationPolicy) -> WerResult {
    let r = normalize(reference, policy);
    let h = normalize(hypothesis, policy);
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    let (s, d, i) = align_counts(&rw, &hw);
    WerResult::from_counts(s, d, i, rw.len())
}

/// Pooled errors over pooled reference words.
pub fn corpus_wer<'a>(results: impl IntoIterator<Item = &'a WerResult>) -> WerResult {
    let (mut s, mut d, mut i, mut n) = (0, 0, 0, 0);
    for r in results {
        s += r.substitutions;
        d += r.deletions;
        i += r.insertions;
        n += r.n_ref_words;
    }
    WerResult::from_counts(s, d, i, n)
}

/// One line of the per-utterance results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "hyp")]
    pub hypothesis: String,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "N")]
    pub n_ref_words: usize,
}

impl UtteranceResult {
    pub fn wer(&self) -> WerResult {
        WerResult::from_counts(
            self.substitutions,
            self.deletions,
            self.insertions,
            self.n_ref_words,
        )
    }
}

pub fn write_results_jsonl(path: impl AsRef<Path>, results: &[UtteranceResult]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_results_jsonl(path: impl AsRef<Path>) -> Result<Vec<UtteranceResult>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub normalization: NormalizationPolicy,
}

/// Transcribes every utterance of one labeled test set.
pub fn transcribe_and_score<L: LanguageModel>(
    test: DataRef<'_>,
    projector: &Projector,
    backends: Backends<'_, L>,
    template: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<Vec<UtteranceResult>> {
    test.manifest.ensure_labeled()?;
    let prepared = prepare_utterances(
        test.manifest,
        test.features,
        backends.encoder,
        backends.tokenizer,
        template,
        projector.k,
    )?;
    prepared
        .par_iter()
        .zip(test.manifest.entries())
        .map(|(ex, u)| {
            let hyp = decode_prepared(ex, projector, backends.lm, &cfg.decode)?;
            let text = backends.tokenizer.decode(&hyp.token_ids);
            let reference = u.transcript_or_err()?.to_string();
            let w = wer(&reference, &text, &cfg.normalization);
            Ok(UtteranceResult {
                id: u.id.clone(),
                reference,
                hypothesis: text,
                substitutions: w.substitutions,
                deletions: w.deletions,
                insertions: w.insertions,
                n_ref_words: w.n_ref_words,
            })
        })
        .collect()
}

/// Scores a projector on several test sets and fills one report row.
///
/// With `results_dir`, per-utterance results go to
/// `<dir>/<row slug>__<test corpus>.jsonl` and each cell records its file.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<L: LanguageModel>(
    report: &mut EvalReport,
    row: RowKey,
    tests: &[DataRef<'_>],
    projector: &Projector,
    backends: Backends<'_, L>,
    template: &PromptTemplate,
    cfg: &EvalConfig,
    results_dir: Option<&Path>,
) -> Result<()> {
    if tests.is_empty() {
        return Err(Error::InvalidInput("no test manifests given".into()));
    }
    for t in tests {
        let results = transcribe_and_score(*t, projector, backends, template, cfg)?;
        let file: Option<PathBuf> = match results_dir {
            Some(dir) => {
                let p = dir.join(format!("{}__{}.jsonl", row.slug(), slug(&t.manifest.name)));
                write_results_jsonl(&p, &results)?;
                Some(p)
            }
            None => None,
        };
        let pooled = corpus_wer(results.iter().map(|r| r.wer()).collect::<Vec<_>>().iter());
        report.set(
            row.clone(),
            ColumnKey {
                test_corpus: t.manifest.name.clone(),
                domain: t.manifest.domain_label.clone(),
            },
            Cell::from_wer(&pooled, file.map(|p| p.display().to_string())),
        );
    }
    Ok(())
}

/// [`evaluate`] from a checkpoint file, validated against the backends.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_checkpoint<L: LanguageModel>(
    report: &mut EvalReport,
    row: RowKey,
    tests: &[DataRef<'_>],
    checkpoint: impl AsRef<Path>,
    backends: Backends<'_, L>,
    cfg: &EvalConfig,
    results_dir: Option<&Path>,
) -> Result<()> {
    let (projector, header) = load_checkpoint(checkpoint)?;
    header.validate(backends.encoder, backends.lm)?;
    evaluate(
        report,
        row,
        tests,
        &projector,
        backends,
        &header.prompt_template,
        cfg,
        results_dir,
    )
}

pub(crate) fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
