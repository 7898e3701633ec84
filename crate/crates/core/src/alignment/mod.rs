//! Speech-to-LM alignment: frame stacking, the two-layer projector, prompt
//! rendering and assembly of `speech ‖ prompt ‖ transcript` sequences.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_lora, save_checkpoint, save_lora, CheckpointHeader, LoraHeader,
    CHECKPOINT_FORMAT_VERSION,
};

use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::backends::{LanguageModel, SpeechEncoder, TokenId, Tokenizer};
use crate::datamodel::{EmbeddingMatrix, FeatureSource, FrameMatrix, LanguageTag, Manifest};
use crate::error::{Error, Result};
use crate::rng::{checksum_f64, SeededRng};

/// Label value at positions that carry no supervision.
pub const IGNORE_INDEX: i64 = -100;

pub const LANGUAGE_SLOT: &str = "[LANGUAGE]";

/// Stacks each run of `k` consecutive frames into one row; trailing
/// `T mod k` frames are dropped.
pub fn downsample(h: &FrameMatrix, k: usize) -> Result<FrameMatrix> {
    if k == 0 {
        return Err(Error::InvalidInput(
            "downsampling factor must be >= 1".into(),
        ));
    }
    let (t, d) = h.dim();
    if t < k {
        return Err(Error::SequenceTooShort { frames: t, k });
    }
    let n = t / k;
    let stacked = h.slice(s![..n * k, ..]).to_owned();
    Ok(stacked
        .into_shape_with_order((n, k * d))
        .expect("contiguous frames reshape"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Downsampler {
    pub k: usize,
}

impl Downsampler {
    pub fn apply(&self, h: &FrameMatrix) -> Result<FrameMatrix> {
        downsample(h, self.k)
    }
}

/// `(k·d_enc)·h + h + h·d_llm + d_llm`.
pub fn projector_param_count(d_enc: usize, k: usize, h: usize, d_llm: usize) -> usize {
    (k * d_enc) * h + h + h * d_llm + d_llm
}

/// `E = W2 · relu(W1 · x + b1) + b2`, applied row-wise to stacked frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub d_enc: usize,
    pub k: usize,
    /// hidden x (k·d_enc)
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// d_llm x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub struct ProjectorCache {
    x: Array2<f64>,
    z: Array2<f64>,
}

impl Projector {
    pub fn zeros(d_enc: usize, k: usize, hidden: usize, d_llm: usize) -> Self {
        Self {
            d_enc,
            k,
            w1: Array2::zeros((hidden, k * d_enc)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((d_llm, hidden)),
            b2: Array1::zeros(d_llm),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init(d_enc: usize, k: usize, hidden: usize, d_llm: usize, seed: u64) -> Result<Self> {
        if d_enc == 0 || k == 0 || hidden == 0 || d_llm == 0 {
            return Err(Error::InvalidInput(
                "projector dims must be positive".into(),
            ));
        }
        let mut rng = SeededRng::derive(seed, "projector/init");
        let mut p = Self::zeros(d_enc, k, hidden, d_llm);
        let a1 = 1.0 / ((k * d_enc) as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        p.w1.mapv_inplace(|_| (2.0 * rng.uniform() - 1.0) * a1);
        p.b1.mapv_inplace(|_| (2.0 * rng.uniform() - 1.0) * a1);
        p.w2.mapv_inplace(|_| (2.0 * rng.uniform() - 1.0) * a2);
        p.b2.mapv_inplace(|_| (2.0 * rng.uniform() - 1.0) * a2);
        Ok(p)
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_llm(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        projector_param_count(self.d_enc, self.k, self.hidden(), self.d_llm())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_enc, self.k, self.hidden(), self.d_llm())
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    pub fn checksum(&self) -> String {
        checksum_f64(self.tensors())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(EmbeddingMatrix, ProjectorCache)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "projector input",
                expected: self.in_dim(),
                actual: x.ncols(),
            });
        }
        let z = x.dot(&self.w1.t()) + &self.b1;
        let out = z.mapv(|v| v.max(0.0)).dot(&self.w2.t()) + &self.b2;
        Ok((out, ProjectorCache { x: x.to_owned(), z }))
    }

    pub fn project(&self, x: ArrayView2<f64>) -> Result<EmbeddingMatrix> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dX`.
    pub fn backward(
        &self,
        cache: &ProjectorCache,
        dout: ArrayView2<f64>,
        grads: &mut Projector,
    ) -> Array2<f64> {
        let r = cache.z.mapv(|v| v.max(0.0));
        grads.w2 += &dout.t().dot(&r);
        grads.b2 += &dout.sum_axis(Axis(0));
        let mut dz = dout.dot(&self.w2);
        Zip::from(&mut dz).and(&cache.z).for_each(|g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        grads.w1 += &dz.t().dot(&cache.x);
        grads.b1 += &dz.sum_axis(Axis(0));
        dz.dot(&self.w1)
    }
}

/// Encoder features, stacked and projected into the LM embedding space.
pub fn speech_embeddings(
    frames: &FrameMatrix,
    encoder: &dyn SpeechEncoder,
    projector: &Projector,
) -> Result<EmbeddingMatrix> {
    let h = encoder.encode(frames).map_err(|e| e.at_stage("encode"))?;
    let x = downsample(&h, projector.k).map_err(|e| e.at_stage("downsample"))?;
    projector
        .project(x.view())
        .map_err(|e| e.at_stage("project"))
}

/// An utterance reduced to what assembly needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUtterance {
    pub id: String,
    /// Downsampled encoder output, `k * d_enc` wide.
    pub stacked: Array2<f64>,
    pub prompt_ids: Vec<TokenId>,
    pub transcript_ids: Option<Vec<TokenId>>,
}

/// Encodes and stacks every utterance once and tokenizes prompts and
/// transcripts. The prompt names each utterance's own language.
pub fn prepare_utterances(
    manifest: &Manifest,
    features: &dyn FeatureSource,
    encoder: &dyn SpeechEncoder,
    tokenizer: &dyn Tokenizer,
    template: &PromptTemplate,
    k: usize,
) -> Result<Vec<PreparedUtterance>> {
    manifest
        .entries()
        .par_iter()
        .map(|u| {
            let frames = features
                .load(&u.features_ref)
                .map_err(|e| e.at_stage("load features"))?;
            let h = encoder.encode(&frames).map_err(|e| e.at_stage("encode"))?;
            let stacked = downsample(&h, k).map_err(|e| e.at_stage("downsample"))?;
            let prompt = template
                .render(&u.language)
                .map_err(|e| e.at_stage("prompt"))?;
            Ok(PreparedUtterance {
                id: u.id.clone(),
                stacked,
                prompt_ids: tokenizer.encode(&prompt),
                transcript_ids: u.transcript.as_deref().map(|t| tokenizer.encode(t)),
            })
        })
        .collect()
}

/// Instruction text placed between the speech and the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub pattern: String,
    /// Set for fixed prompts that name no language.
    #[serde(default)]
    pub language_free: bool,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            language_free: false,
        }
    }

    pub fn language_free(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            language_free: true,
        }
    }

    pub fn render(&self, lang: &LanguageTag) -> Result<String> {
        render_prompt(self, lang)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new("Transcribe [LANGUAGE] speech to text")
    }
}

pub fn render_prompt(t: &PromptTemplate, lang: &LanguageTag) -> Result<String> {
    if t.language_free {
        return Ok(t.pattern.clone());
    }
    match t.pattern.matches(LANGUAGE_SLOT).count() {
        0 => Err(Error::MissingSlot(t.pattern.clone())),
        1 => Ok(t.pattern.replace(LANGUAGE_SLOT, lang.display_name())),
        n => Err(Error::InvalidInput(format!(
            "prompt template {:?} has {n} language slots",
            t.pattern
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssembleMode {
    Train,
    Decode,
}

pub struct AssembleItem<'a> {
    pub speech: ArrayView2<'a, f64>,
    pub prompt_ids: &'a [TokenId],
    pub transcript_ids: Option<&'a [TokenId]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSpans {
    pub speech: Range<usize>,
    pub prompt: Range<usize>,
    /// Transcript plus EOS; empty in decode mode.
    pub transcript: Range<usize>,
}

/// Right-padded batch. Labels follow the usual causal-LM convention: the
/// label at position `t` is the input token there, predicted from the logits
/// at `t - 1`.
#[derive(Debug, Clone)]
pub struct AssembledBatch {
    pub embeddings: Array3<f64>,
    pub attention_mask: Array2<u8>,
    pub labels: Array2<i64>,
    /// Positions that enter the loss; exactly the transcript spans.
    pub loss_mask: Array2<bool>,
    pub spans: Vec<SegmentSpans>,
    pub lengths: Vec<usize>,
}

impl AssembledBatch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Unpadded embeddings of item `b`.
    pub fn item(&self, b: usize) -> ArrayView2<'_, f64> {
        self.embeddings.slice(s![b, ..self.lengths[b], ..])
    }

    pub fn item_labels(&self, b: usize) -> ArrayView1<'_, i64> {
        self.labels.slice(s![b, ..self.lengths[b]])
    }

    pub fn item_loss_mask(&self, b: usize) -> ArrayView1<'_, bool> {
        self.loss_mask.slice(s![b, ..self.lengths[b]])
    }

    pub fn n_supervised(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

pub fn assemble(
    items: &[AssembleItem<'_>],
    lm: &dyn LanguageModel,
    mode: AssembleMode,
) -> Result<AssembledBatch> {
    if items.is_empty() {
        return Err(Error::InvalidInput("cannot assemble an empty batch".into()));
    }
    let d = lm.d_model();
    let mut seqs = Vec::with_capacity(items.len());
    let mut spans = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if item.speech.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "speech embeddings",
                expected: d,
                actual: item.speech.ncols(),
            });
        }
        let ns = item.speech.nrows();
        let np = item.prompt_ids.len();
        let mut rows = vec![item.speech.to_owned(), lm.embed(item.prompt_ids)];
        let mut ids = vec![IGNORE_INDEX; ns + np];
        let transcript = match mode {
            AssembleMode::Decode => ns + np..ns + np,
            AssembleMode::Train => {
                let t = item.transcript_ids.ok_or_else(|| {
                    Error::InvalidInput(format!("batch item {i} has no transcript in train mode"))
                })?;
                let mut with_eos = t.to_vec();
                with_eos.push(lm.eos_id());
                rows.push(lm.embed(&with_eos));
                ids.extend(with_eos.iter().map(|&x| x as i64));
                ns + np..ns + np + with_eos.len()
            }
        };
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let seq = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        if seq.nrows() > lm.max_positions() {
            return Err(Error::InvalidInput(format!(
                "batch item {i}: {} positions exceed the LM context of {}",
                seq.nrows(),
                lm.max_positions()
            )));
        }
        spans.push(SegmentSpans {
            speech: 0..ns,
            prompt: ns..ns + np,
            transcript,
        });
        seqs.push((seq, ids));
    }
    let lengths: Vec<usize> = seqs.iter().map(|(s, _)| s.nrows()).collect();
    let t_max = *lengths.iter().max().unwrap();
    let b = items.len();
    let mut embeddings = Array3::zeros((b, t_max, d));
    let mut attention_mask = Array2::zeros((b, t_max));
    let mut labels = Array2::from_elem((b, t_max), IGNORE_INDEX);
    let mut loss_mask = Array2::from_elem((b, t_max), false);
    for (i, ((seq, ids), span)) in seqs.iter().zip(&spans).enumerate() {
        let n = seq.nrows();
        embeddings.slice_mut(s![i, ..n, ..]).assign(seq);
        attention_mask.slice_mut(s![i, ..n]).fill(1);
        labels
            .slice_mut(s![i, ..n])
            .assign(&Array1::from_vec(ids.clone()));
        loss_mask
            .slice_mut(s![i, span.transcript.clone()])
            .fill(true);
    }
    Ok(AssembledBatch {
        embeddings,
        attention_mask,
        labels,
        loss_mask,
        spans,
        lengths,
    })
}

/// Summed next-token negative log-likelihood of one sequence over the
/// positions in `mask`, and the number of such positions. When `dlogits` is
/// given, `weight * dNLL/dlogits` is added to it.
pub fn masked_nll(
    logits: ArrayView2<f64>,
    labels: ArrayView1<i64>,
    mask: ArrayView1<bool>,
    weight: f64,
    mut dlogits: Option<&mut Array2<f64>>,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for t in 1..mask.len() {
        if !mask[t] {
            continue;
        }
        let row = logits.row(t - 1);
        let target = labels[t] as usize;
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
        count += 1;
        if let Some(d) = dlogits.as_deref_mut() {
            let mut drow = d.row_mut(t - 1);
            Zip::from(&mut drow)
                .and(&row)
                .for_each(|g, &v| *g += weight * (v - lse).exp());
            drow[target] -= weight;
        }
    }
    (total, count)
}

/// Mean next-token cross-entropy over all supervised positions of a batch.
pub fn batch_loss(lm: &dyn LanguageModel, batch: &AssembledBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..batch.len() {
        let logits = lm.logits(batch.item(b));
        let (s, n) = masked_nll(
            logits.view(),
            batch.item_labels(b),
            batch.item_loss_mask(b),
            0.0,
            None,
        );
        total += s;
        count += n;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
