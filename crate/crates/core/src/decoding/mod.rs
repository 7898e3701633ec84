//! Deterministic greedy and beam-search generation after a speech + prompt
//! prefix.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    assemble, prepare_utterances, speech_embeddings, AssembleItem, AssembleMode, AssembledBatch,
    PreparedUtterance, Projector, PromptTemplate,
};
use crate::backends::{Backends, LanguageModel, SpeechEncoder, TokenId, Tokenizer};
use crate::datamodel::{FeatureSource, Utterance};
use crate::error::{Error, Result};
use crate::training::DataRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Defaults to twice the prefix length, capped by the LM context.
    pub max_new_tokens: Option<usize>,
    /// Defaults to the LM's EOS token.
    pub eos_id: Option<TokenId>,
    /// Scores are divided by `len^length_penalty` when positive.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_new_tokens: None,
            eos_id: None,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self {
            beam_size: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::InvalidInput("beam_size must be >= 1".into()));
        }
        if self.max_new_tokens == Some(0) {
            return Err(Error::InvalidInput("max_new_tokens must be >= 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::InvalidInput("length_penalty must be >= 0".into()));
        }
        Ok(())
    }

    fn horizon(&self, prefix_len: usize, lm: &dyn LanguageModel) -> usize {
        let room = lm.max_positions().saturating_sub(prefix_len);
        self.max_new_tokens.unwrap_or(2 * prefix_len).min(room)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub token_ids: Vec<TokenId>,
    pub logprob: f64,
    /// `logprob`, length-normalized when a penalty is set.
    pub score: f64,
    pub finished: bool,
}

fn score_of(logprob: f64, len: usize, penalty: f64) -> f64 {
    if penalty > 0.0 && len > 0 {
        logprob / (len as f64).powf(penalty)
    } else {
        logprob
    }
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

fn next_logprobs(lm: &dyn LanguageModel, prefix: ArrayView2<f64>, tokens: &[TokenId]) -> Vec<f64> {
    let logits = if tokens.is_empty() {
        lm.logits(prefix)
    } else {
        let emb = lm.embed(tokens);
        lm.logits(
            concatenate(Axis(0), &[prefix, emb.view()])
                .expect("equal widths")
                .view(),
        )
    };
    let row = logits.row(logits.nrows() - 1);
    let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Argmax rollout; lowest token id wins ties.
pub fn greedy_decode(
    lm: &dyn LanguageModel,
    prefix: ArrayView2<f64>,
    max_new_tokens: usize,
    eos_id: TokenId,
) -> Hypothesis {
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut finished = false;
    while tokens.len() < max_new_tokens {
        let lp = next_logprobs(lm, prefix, &tokens);
        let (best, v) =
            lp.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (i, &v)| if v > b.1 { (i, v) } else { b },
            );
        tokens.push(best as TokenId);
        logprob += v;
        if best as TokenId == eos_id {
            finished = true;
            break;
        }
    }
    let finished = finished || tokens.len() == max_new_tokens;
    Hypothesis {
        score: logprob,
        token_ids: tokens,
        logprob,
        finished,
    }
}

/// Beam search over one prefix.
///
/// Each step expands every live beam by the whole vocabulary and keeps the
/// best `beam_size` candidates; those ending in EOS or reaching the horizon
/// move to the finished pool, the rest stay live. Search ends when no beam
/// is live, or, without length penalty, once the best finished score is at
/// least the best live score (log probabilities only decrease).
pub fn beam_search(
    lm: &dyn LanguageModel,
    prefix: ArrayView2<f64>,
    cfg: &DecodeConfig,
) -> Hypothesis {
    let eos = cfg.eos_id.unwrap_or_else(|| lm.eos_id());
    let horizon = cfg.horizon(prefix.nrows(), lm);
    let lp = cfg.length_penalty;
    if horizon == 0 {
        return Hypothesis {
            token_ids: vec![],
            logprob: 0.0,
            score: 0.0,
            finished: false,
        };
    }
    let mut live = vec![Hypothesis {
        token_ids: vec![],
        logprob: 0.0,
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for depth in 1..=horizon {
        let expanded: Vec<Vec<f64>> = live
            .par_iter()
            .map(|h| next_logprobs(lm, prefix, &h.token_ids))
            .collect();
        let mut candidates = Vec::with_capacity(live.len() * lm.vocab_size());
        for (h, lps) in live.iter().zip(&expanded) {
            for (v, l) in lps.iter().enumerate() {
                let mut token_ids = h.token_ids.clone();
                token_ids.push(v as TokenId);
                let logprob = h.logprob + l;
                let done = v as TokenId == eos || depth == horizon;
                candidates.push(Hypothesis {
                    score: score_of(logprob, depth, lp),
                    token_ids,
                    logprob,
                    finished: done,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        if lp == 0.0 {
            let best_done = finished
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_done >= live[0].score {
                break;
            }
        }
    }
    finished.extend(live);
    finished.sort_by(rank);
    finished.swap_remove(0)
}

/// Best hypothesis per item of a decode-mode batch. Items are decoded
/// independently on their unpadded prefixes.
pub fn decode(
    batch: &AssembledBatch,
    lm: &dyn LanguageModel,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if batch.spans.iter().any(|s| !s.transcript.is_empty()) {
        return Err(Error::InvalidInput(
            "decode expects a decode-mode batch".into(),
        ));
    }
    Ok((0..batch.len())
        .into_par_iter()
        .map(|b| beam_search(lm, batch.item(b), cfg))
        .collect())
}

pub fn decode_prepared(
    ex: &PreparedUtterance,
    projector: &Projector,
    lm: &dyn LanguageModel,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    let speech = projector
        .project(ex.stacked.view())
        .map_err(|e| e.at_stage("project"))?;
    let item = AssembleItem {
        speech: speech.view(),
        prompt_ids: &ex.prompt_ids,
        transcript_ids: None,
    };
    let batch = assemble(&[item], lm, AssembleMode::Decode).map_err(|e| e.at_stage("assemble"))?;
    Ok(decode(&batch, lm, cfg)?.swap_remove(0))
}

/// Frames to text: encode, stack, project, assemble, search, detokenize.
#[allow(clippy::too_many_arguments)]
pub fn transcribe(
    utterance: &Utterance,
    features: &dyn FeatureSource,
    projector: &Projector,
    encoder: &dyn SpeechEncoder,
    tokenizer: &dyn Tokenizer,
    lm: &dyn LanguageModel,
    template: &PromptTemplate,
    cfg: &DecodeConfig,
) -> Result<String> {
    let frames = features
        .load(&utterance.features_ref)
        .map_err(|e| e.at_stage("load features"))?;
    let speech = speech_embeddings(&frames, encoder, projector)?;
    let prompt = template
        .render(&utterance.language)
        .map_err(|e| e.at_stage("prompt"))?;
    let prompt_ids = tokenizer.encode(&prompt);
    let item = AssembleItem {
        speech: speech.view(),
        prompt_ids: &prompt_ids,
        transcript_ids: None,
    };
    let batch = assemble(&[item], lm, AssembleMode::Decode).map_err(|e| e.at_stage("assemble"))?;
    let hyp = decode(&batch, lm, cfg)
        .map_err(|e| e.at_stage("decode"))?
        .swap_remove(0);
    Ok(tokenizer.decode(&hyp.token_ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub hypothesis: String,
    pub logprob: f64,
    pub n_tokens: usize,
}

/// Decodes every utterance of a manifest; transcripts, if any, are ignored.
pub fn decode_manifest<L: LanguageModel>(
    data: DataRef<'_>,
    projector: &Projector,
    backends: Backends<'_, L>,
    template: &PromptTemplate,
    cfg: &DecodeConfig,
) -> Result<Vec<DecodeRecord>> {
    let prepared = prepare_utterances(
        data.manifest,
        data.features,
        backends.encoder,
        backends.tokenizer,
        template,
        projector.k,
    )?;
    prepared
        .par_iter()
        .map(|ex| {
            let hyp = decode_prepared(ex, projector, backends.lm, cfg)?;
            Ok(DecodeRecord {
                id: ex.id.clone(),
                hypothesis: backends.tokenizer.decode(&hyp.token_ids),
                logprob: hyp.logprob,
                n_tokens: hyp.token_ids.len(),
            })
        })
        .collect()
}

pub fn write_decode_jsonl(path: impl AsRef<Path>, records: &[DecodeRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
