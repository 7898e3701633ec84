//! Projector training: warmup schedule, AdamW, early stopping, optional LoRA
//! adapters on the frozen LM, and projector bootstrapping across languages.

mod lora;

pub use lora::{
    apply_lora, lora_backward, lora_forward, lora_param_count, lora_param_count_for, lora_targets,
    Dropout, LoraActivation, LoraAdapter, LoraAdapters, LoraConfig, LoraLm, LoraTarget,
};

use std::fmt;
use std::path::Path;

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    assemble, load_checkpoint, masked_nll, prepare_utterances, AssembleItem, AssembleMode,
    CheckpointHeader, PreparedUtterance, Projector, PromptTemplate,
};
use crate::backends::{Backends, DifferentiableLm};
use crate::datamodel::{FeatureSource, Manifest};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Validation cadence in optimizer steps.
    pub eval_every: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub lora: Option<LoraConfig>,
    /// Global L2 norm limit on the gradient; off when unset.
    pub grad_clip: Option<f64>,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            warmup_steps: 1000,
            max_steps: 100_000,
            batch_size: 4,
            epochs: 6,
            eval_every: 1000,
            patience: 3,
            seed: 0,
            lora: None,
            grad_clip: None,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs and eval_every must be positive");
        }
        if self.max_steps > 0 && self.warmup_steps > self.max_steps {
            return bad("warmup_steps exceeds max_steps");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max` over `warmup_steps`, then constant.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr_max
    } else {
        cfg.lr_max * step as f64 / cfg.warmup_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One history row. Train rows are logged at the step index whose update they
/// drive; validation rows at the number of completed updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn val(&self) -> impl Iterator<Item = &HistoryRow> {
        self.rows.iter().filter(|r| r.split == Split::Val)
    }

    pub fn train(&self) -> impl Iterator<Item = &HistoryRow> {
        self.rows.iter().filter(|r| r.split == Split::Train)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let rows = r.deserialize().collect::<Result<Vec<HistoryRow>, _>>()?;
        Ok(Self { rows })
    }
}

#[derive(Clone, Copy)]
pub struct DataRef<'a> {
    pub manifest: &'a Manifest,
    pub features: &'a dyn FeatureSource,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation projector, rounded to the checkpoint precision.
    pub projector: Projector,
    pub lora: Option<LoraAdapters>,
    pub history: History,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

struct Adam {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (update + c.weight_decay * p[j]);
            }
        }
    }
}

/// Summed next-token loss of one utterance and its gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub nll: f64,
    pub projector: Projector,
    /// Present when adapters were given.
    pub lora: Option<LoraAdapters>,
}

/// Loss and gradients of one labeled utterance through the frozen LM, with
/// adapters (if any) applied and no dropout.
pub fn gradients<L: DifferentiableLm>(
    lm: &L,
    projector: &Projector,
    lora: Option<&LoraAdapters>,
    ex: &PreparedUtterance,
) -> Result<Gradients> {
    item_grads(lm, projector, lora, None, ex, 1.0)
}

fn supervised_count(ex: &PreparedUtterance) -> usize {
    ex.transcript_ids.as_ref().map_or(0, |t| t.len() + 1)
}

fn labeled(ex: &PreparedUtterance) -> Result<&[u32]> {
    ex.transcript_ids
        .as_deref()
        .ok_or_else(|| Error::Unlabeled(ex.id.clone()))
}

/// Loss sum and gradients of one utterance; `weight` scales the gradients.
fn item_grads<L: DifferentiableLm>(
    lm: &L,
    projector: &Projector,
    lora: Option<&LoraAdapters>,
    dropout: Option<(f64, SeededRng)>,
    ex: &PreparedUtterance,
    weight: f64,
) -> Result<Gradients> {
    let (speech, pcache) = projector.forward(ex.stacked.view())?;
    let item = AssembleItem {
        speech: speech.view(),
        prompt_ids: &ex.prompt_ids,
        transcript_ids: Some(labeled(ex)?),
    };
    let batch = assemble(&[item], lm, AssembleMode::Train)?;
    let mut rng_slot = dropout;
    let mut dropout = rng_slot.as_mut().map(|(p, rng)| Dropout::new(*p, rng));
    let (logits, cache) = lm.forward_with(batch.item(0), lora, dropout.as_mut());
    let mut dlogits = ndarray::Array2::zeros(logits.dim());
    let (nll, _) = masked_nll(
        logits.view(),
        batch.item_labels(0),
        batch.item_loss_mask(0),
        weight,
        Some(&mut dlogits),
    );
    let mut lora_grads = lora.map(LoraAdapters::zeros_like);
    let dx = lm.backward(&cache, dlogits.view(), lora, lora_grads.as_mut());
    let mut pgrads = projector.zeros_like();
    let ns = speech.nrows();
    projector.backward(&pcache, dx.slice(s![..ns, ..]), &mut pgrads);
    Ok(Gradients {
        nll,
        projector: pgrads,
        lora: lora_grads,
    })
}

/// Mean next-token loss over all supervised tokens of `examples`.
pub fn dataset_loss<L: DifferentiableLm>(
    lm: &L,
    projector: &Projector,
    lora: Option<&LoraAdapters>,
    examples: &[PreparedUtterance],
) -> Result<f64> {
    let parts: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let speech = projector.project(ex.stacked.view())?;
            let item = AssembleItem {
                speech: speech.view(),
                prompt_ids: &ex.prompt_ids,
                transcript_ids: Some(labeled(ex)?),
            };
            let batch = assemble(&[item], lm, AssembleMode::Train)?;
            let (logits, _) = lm.forward_with(batch.item(0), lora, None);
            Ok(masked_nll(
                logits.view(),
                batch.item_labels(0),
                batch.item_loss_mask(0),
                0.0,
                None,
            ))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = parts
        .into_iter()
        .fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Trains `projector` (and fresh LoRA adapters when configured) with the
/// frozen backends. Batches are drawn from a seeded per-epoch permutation;
/// per-utterance gradients are computed in parallel and summed in batch order.
pub fn train<L: DifferentiableLm>(
    projector: Projector,
    backends: Backends<'_, L>,
    train_data: DataRef<'_>,
    val_data: DataRef<'_>,
    template: &PromptTemplate,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (what, d) in [("training", &train_data), ("validation", &val_data)] {
        if d.manifest.is_empty() {
            return Err(Error::InvalidInput(format!("{what} manifest is empty")));
        }
        d.manifest.ensure_labeled()?;
    }
    let prep = |d: &DataRef<'_>| {
        prepare_utterances(
            d.manifest,
            d.features,
            backends.encoder,
            backends.tokenizer,
            template,
            projector.k,
        )
    };
    let train_ex = prep(&train_data)?;
    let val_ex = prep(&val_data)?;
    let lora = match &cfg.lora {
        None => None,
        Some(lc) => {
            let geometry = backends.lm.attention_geometry().ok_or_else(|| {
                Error::InvalidInput(
                    "LoRA requested but the LM exposes no attention geometry".into(),
                )
            })?;
            Some(LoraAdapters::init(&geometry, lc, cfg.seed)?)
        }
    };
    train_prepared(projector, lora, backends.lm, &train_ex, &val_ex, cfg)
}

/// [`train`] on already prepared utterances, starting from given adapters.
pub fn train_prepared<L: DifferentiableLm>(
    mut projector: Projector,
    mut lora: Option<LoraAdapters>,
    lm: &L,
    train_ex: &[PreparedUtterance],
    val_ex: &[PreparedUtterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ex.is_empty() || val_ex.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let n = train_ex.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).min(cfg.max_steps);
    let dropout_p = cfg.lora.as_ref().map_or(0.0, |l| l.dropout);

    let mut sizes: Vec<usize> = projector.tensors().iter().map(|t| t.len()).collect();
    if let Some(l) = &lora {
        sizes.extend(l.tensors().iter().map(|t| t.len()));
    }
    let mut adam = Adam::new(cfg.adamw, &sizes);
    let mut history = History::default();
    let snapshot = |p: &Projector, l: &Option<LoraAdapters>| {
        let mut p = p.clone();
        p.round_to_f32();
        let l = l.clone().map(|mut l| {
            l.round_to_f32();
            l
        });
        (p, l)
    };

    let v0 = dataset_loss(lm, &projector, lora.as_ref(), val_ex)?;
    history.rows.push(HistoryRow {
        step: 0,
        split: Split::Val,
        loss: v0,
        lr: lr_at(0, cfg),
    });
    let mut best = (v0, 0usize, snapshot(&projector, &lora));
    let mut evals_since_best = 0usize;
    let mut stopped_early = false;

    let mut order_rng = SeededRng::derive(cfg.seed, "train/order");
    let mut step = 0usize;
    'epochs: while step < total {
        let order = order_rng.permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&PreparedUtterance> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let n_tok: usize = batch.iter().map(|e| supervised_count(e)).sum();
            let weight = 1.0 / n_tok as f64;
            let parts: Vec<Gradients> = batch
                .par_iter()
                .enumerate()
                .map(|(b, ex)| {
                    let drop = (dropout_p > 0.0 && lora.is_some()).then(|| {
                        (
                            dropout_p,
                            SeededRng::derive(cfg.seed, &format!("train/dropout/{step}/{b}")),
                        )
                    });
                    item_grads(lm, &projector, lora.as_ref(), drop, ex, weight)
                })
                .collect::<Result<_>>()?;
            let mut parts = parts.into_iter();
            let mut acc = parts.next().expect("non-empty batch");
            for g in parts {
                acc.nll += g.nll;
                for (a, b) in acc
                    .projector
                    .tensors_mut()
                    .into_iter()
                    .zip(g.projector.tensors())
                {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                if let (Some(a), Some(b)) = (acc.lora.as_mut(), g.lora.as_ref()) {
                    a.add_assign(b);
                }
            }
            let loss = acc.nll * weight;
            let finite = loss.is_finite()
                && acc.projector.is_finite()
                && acc
                    .lora
                    .as_ref()
                    .is_none_or(|l| l.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())));
            if !finite {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: batch.iter().map(|e| e.id.clone()).collect(),
                });
            }
            let lr = lr_at(step, cfg);
            history.rows.push(HistoryRow {
                step,
                split: Split::Train,
                loss,
                lr,
            });

            let mut grads: Vec<&mut [f64]> = acc.projector.tensors_mut().into_iter().collect();
            if let Some(l) = acc.lora.as_mut() {
                grads.extend(l.tensors_mut());
            }
            if let Some(max_norm) = cfg.grad_clip {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let scale = max_norm / norm;
                    grads
                        .iter_mut()
                        .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
                }
            }
            let grads: Vec<&[f64]> = grads.into_iter().map(|g| &*g).collect();
            let mut params: Vec<&mut [f64]> = projector.tensors_mut().into_iter().collect();
            if let Some(l) = lora.as_mut() {
                params.extend(l.tensors_mut());
            }
            adam.step(params, &grads, lr);
            step += 1;

            if step.is_multiple_of(cfg.eval_every) || step == total {
                let v = dataset_loss(lm, &projector, lora.as_ref(), val_ex)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        batch_ids: vec!["<validation>".into()],
                    });
                }
                history.rows.push(HistoryRow {
                    step,
                    split: Split::Val,
                    loss: v,
                    lr: lr_at(step, cfg),
                });
                if v < best.0 {
                    best = (v, step, snapshot(&projector, &lora));
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                    if evals_since_best > cfg.patience {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    let (best_val_loss, best_step, (projector, lora)) = best;
    Ok(TrainOutcome {
        projector,
        lora,
        history,
        best_step,
        best_val_loss,
        steps_run: step,
        stopped_early,
    })
}

/// Header for a projector trained from scratch on `train_corpus`.
pub fn scratch_header<L: DifferentiableLm>(
    projector: &Projector,
    backends: Backends<'_, L>,
    template: &PromptTemplate,
    train_corpus: &str,
    language: Option<&str>,
) -> CheckpointHeader {
    let mut h = CheckpointHeader::new(projector, backends.encoder, backends.lm, template.clone());
    h.provenance.push(train_corpus.to_string());
    h.language = language.map(str::to_string);
    h
}

/// Continues training a pretrained projector on target-language data.
///
/// Optimizer state starts fresh. Prompts are rendered with each target
/// utterance's language, and the returned header extends the provenance chain
/// with the target corpus.
pub fn bootstrap_finetune<L: DifferentiableLm>(
    pretrained: (Projector, CheckpointHeader),
    backends: Backends<'_, L>,
    lrl_train: DataRef<'_>,
    lrl_val: DataRef<'_>,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, CheckpointHeader)> {
    let (projector, header) = pretrained;
    header.validate(backends.encoder, backends.lm)?;
    if header.k != projector.k || header.hidden != projector.hidden() {
        return Err(Error::InvalidInput(
            "projector does not match its header".into(),
        ));
    }
    let template = header.prompt_template.clone();
    let outcome = train(projector, backends, lrl_train, lrl_val, &template, cfg)?;
    let mut out = header;
    out.provenance.push(lrl_train.manifest.name.clone());
    let langs = lrl_train.manifest.languages();
    out.language = (langs.len() == 1).then(|| langs[0].code().to_string());
    Ok((outcome, out))
}

/// [`bootstrap_finetune`] from a checkpoint file.
pub fn bootstrap_finetune_from<L: DifferentiableLm>(
    checkpoint: impl AsRef<Path>,
    backends: Backends<'_, L>,
    lrl_train: DataRef<'_>,
    lrl_val: DataRef<'_>,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, CheckpointHeader)> {
    let loaded = load_checkpoint(checkpoint)?;
    bootstrap_finetune(loaded, backends, lrl_train, lrl_val, cfg)
}

#[cfg(test)]
mod tests;
