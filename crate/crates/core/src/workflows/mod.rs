//! End-to-end experiments on the toy backends: data-scaling sweeps and
//! pretrain/finetune bootstrap matrices.

mod bootstrap;
mod sweep;

pub use bootstrap::{bootstrap_matrix, BootstrapConfig, BootstrapOutcome, PretrainSource, SCRATCH};
pub use sweep::{scaling_sweep, write_scaling_plot, SweepConfig, SweepOutcome};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{
    load_checkpoint, save_checkpoint, CheckpointHeader, Projector, PromptTemplate,
};
use crate::backends::DifferentiableLm;
use crate::backends::{
    Backends, LanguageModel, ToyEncoder, ToyLm, ToyLmConfig, ToyTaskSpec, WordTokenizer,
};
use crate::datamodel::{LanguageTag, Manifest};
use crate::error::{Error, Result};
use crate::evaluation::{
    corpus_wer, slug, transcribe_and_score, write_results_jsonl, Cell, ColumnKey, EvalConfig,
    EvalReport, NormalizationPolicy, RowKey, WerResult,
};
use crate::rng::sha256_hex;
use crate::training::{DataRef, History, TrainConfig, TrainOutcome};

/// Everything needed to build a deterministic toy stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ToySetupConfig {
    pub task: ToyTaskSpec,
    /// Vocabulary size and special token ids are filled in from the tokenizer.
    pub lm: ToyLmConfig,
    pub encoder_seed: u64,
    pub prompt: PromptTemplate,
}

pub struct ToySetup {
    pub config: ToySetupConfig,
    pub task: ToyTaskSpec,
    pub encoder: ToyEncoder,
    pub tokenizer: WordTokenizer,
    pub lm: ToyLm,
    pub template: PromptTemplate,
}

impl ToySetup {
    pub fn new(config: &ToySetupConfig) -> Result<Self> {
        config.task.validate()?;
        let mut prompts = Vec::new();
        for code in config.task.language_shifts.keys() {
            prompts.push(config.prompt.render(&LanguageTag::from_code(code)?)?);
        }
        let words = config.task.symbol_words();
        let tokenizer = WordTokenizer::from_texts(
            prompts
                .iter()
                .map(String::as_str)
                .chain(words.iter().map(String::as_str)),
        );
        let last = prompts
            .first()
            .and_then(|p| p.split_whitespace().last())
            .ok_or_else(|| Error::InvalidInput("prompt renders to no words".into()))?;
        let anchor = tokenizer
            .token_id(last)
            .expect("prompt words are in the vocabulary");
        let lm = ToyLm::new(ToyLmConfig {
            vocab_size: tokenizer.words().len(),
            anchor_id: anchor,
            eos_id: WordTokenizer::EOS,
            pad_id: WordTokenizer::PAD,
            ..config.lm.clone()
        })?;
        Ok(Self {
            config: config.clone(),
            task: config.task.clone(),
            encoder: ToyEncoder::new(config.task.d_enc, config.encoder_seed),
            tokenizer,
            lm,
            template: config.prompt.clone(),
        })
    }

    pub fn backends(&self) -> Backends<'_, ToyLm> {
        Backends {
            encoder: &self.encoder,
            tokenizer: &self.tokenizer,
            lm: &self.lm,
        }
    }

    pub fn d_llm(&self) -> usize {
        self.lm.d_model()
    }
}

/// Projector shape shared by every run of a workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub k: usize,
    pub hidden: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { k: 5, hidden: 2048 }
    }
}

impl ProjectorConfig {
    pub fn init(&self, d_enc: usize, d_llm: usize, seed: u64) -> Result<Projector> {
        Projector::init(d_enc, self.k, self.hidden, d_llm, seed)
    }
}

/// Lower median; for an odd count this is the usual median, and it is always
/// one of the inputs.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Index of the run whose value is the lower median.
fn median_index(values: &[f64]) -> Option<usize> {
    let m = lower_median(values)?;
    values.iter().position(|v| *v == m)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn hours_label(h: f64) -> String {
    format!("{h}").replace('.', "p")
}

/// Scores one projector on every test set, one cell per set. With
/// `results_dir`, per-utterance results go to `<dir>/<stem>__<test>.jsonl`.
fn score_all<L: LanguageModel>(
    tests: &[DataRef<'_>],
    projector: &Projector,
    backends: Backends<'_, L>,
    template: &PromptTemplate,
    cfg: &EvalConfig,
    results_dir: Option<&Path>,
    stem: &str,
) -> Result<Vec<Cell>> {
    let mut out = Vec::with_capacity(tests.len());
    for t in tests {
        let results = transcribe_and_score(*t, projector, backends, template, cfg)?;
        let file = match results_dir {
            Some(dir) => {
                let p = dir.join(format!("{stem}__{}.jsonl", slug(&t.manifest.name)));
                write_results_jsonl(&p, &results)?;
                Some(p.display().to_string())
            }
            None => None,
        };
        let per: Vec<WerResult> = results.iter().map(|r| r.wer()).collect();
        out.push(Cell::from_wer(&corpus_wer(per.iter()), file));
    }
    Ok(out)
}

fn columns(tests: &[DataRef<'_>]) -> Vec<ColumnKey> {
    tests
        .iter()
        .map(|t| ColumnKey {
            test_corpus: t.manifest.name.clone(),
            domain: t.manifest.domain_label.clone(),
        })
        .collect()
}

/// One trained and scored run of a workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: RowKey,
    pub seed: u64,
    /// Hours actually selected by the subset sampler.
    pub hours_used: f64,
    pub steps_run: usize,
    pub best_val_loss: f64,
    /// One cell per test set, in test order.
    pub cells: Vec<Cell>,
    /// Relative to the work directory, like each cell's results file.
    pub checkpoint: Option<String>,
}

impl RunRecord {
    /// Percent WER per test set.
    pub fn wers(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.wer).collect()
    }
}

/// Collapses seeds: each cell holds the lower-median run for that test set,
/// so it still points at real per-utterance results.
fn median_report(
    title: &str,
    policy: NormalizationPolicy,
    cols: &[ColumnKey],
    runs: &[RunRecord],
) -> EvalReport {
    let mut report = EvalReport::new(title, policy);
    let mut keys: Vec<&RowKey> = Vec::new();
    for r in runs {
        if !keys.contains(&&r.row) {
            keys.push(&r.row);
        }
    }
    for key in keys {
        let group: Vec<&RunRecord> = runs.iter().filter(|r| &r.row == key).collect();
        for (j, col) in cols.iter().enumerate() {
            let vals: Vec<f64> = group.iter().map(|r| r.cells[j].wer).collect();
            let pick = group[median_index(&vals).expect("non-empty group")];
            report.set(key.clone(), col.clone(), pick.cells[j].clone());
        }
    }
    report
}

/// Per-seed report: one row per run, the seed appended to the provenance.
fn runs_report(
    title: &str,
    policy: NormalizationPolicy,
    cols: &[ColumnKey],
    runs: &[RunRecord],
) -> EvalReport {
    let mut report = EvalReport::new(title, policy);
    for r in runs {
        let row = RowKey {
            provenance: format!("{} seed {}", r.row.provenance, r.seed),
            ..r.row.clone()
        };
        for (col, cell) in cols.iter().zip(&r.cells) {
            report.set(row.clone(), col.clone(), cell.clone());
        }
    }
    report
}

/// Output directory of a workflow. With `resume`, a stage whose recorded key
/// matches is loaded instead of rerun.
#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
    pub resume: bool,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>, resume: bool) -> Self {
        Self {
            root: root.into(),
            resume,
        }
    }

    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join("stages").join(name);
        ensure_dir(&d)?;
        Ok(d)
    }

    /// `path` relative to the root, so records survive moving the directory.
    fn relative(&self, path: impl AsRef<Path>) -> String {
        let p = path.as_ref();
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .display()
            .to_string()
    }

    fn results_dir(&self) -> Result<PathBuf> {
        let d = self.root.join("results");
        ensure_dir(&d)?;
        Ok(d)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    run: RunRecord,
}

/// Digest of everything that determines a stage's output.
fn stage_key(inputs: &impl Serialize) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(inputs)?.as_bytes()))
}

fn manifest_key(m: &Manifest) -> String {
    let ids: Vec<(&str, &str, f64)> = m
        .entries()
        .iter()
        .map(|u| (u.id.as_str(), u.features_ref.as_str(), u.duration_s))
        .collect();
    sha256_hex(
        serde_json::to_string(&(&m.name, ids))
            .unwrap_or_default()
            .as_bytes(),
    )
}

/// A stage already completed under the same key, with its checkpoint.
fn load_stage(dir: &Path, key: &str) -> Option<(RunRecord, Projector, CheckpointHeader)> {
    let text = std::fs::read_to_string(dir.join("stage.json")).ok()?;
    let rec: StageRecord = serde_json::from_str(&text).ok()?;
    if rec.key != key {
        return None;
    }
    let (p, h) = load_checkpoint(dir.join("projector.ckpt")).ok()?;
    Some((rec.run, p, h))
}

fn save_stage(
    dir: &Path,
    key: &str,
    run: &RunRecord,
    projector: &Projector,
    header: &CheckpointHeader,
    history: &History,
) -> Result<()> {
    save_checkpoint(dir.join("projector.ckpt"), projector, header)?;
    history.write_csv(dir.join("history.csv"))?;
    let p = dir.join("stage.json");
    let body = serde_json::to_string_pretty(&StageRecord {
        key: key.to_string(),
        run: run.clone(),
    })?;
    std::fs::write(&p, body).map_err(|e| Error::io(p, e))
}

/// What one stage trains and how its row is labeled.
struct StageSpec<'s> {
    name: String,
    key: String,
    row: RowKey,
    seed: u64,
    hours_used: f64,
    tests: &'s [DataRef<'s>],
}

/// Runs (or, on resume, reloads) one training stage and scores it.
fn run_stage<L: DifferentiableLm>(
    work: Option<&WorkDir>,
    spec: StageSpec<'_>,
    backends: Backends<'_, L>,
    eval: &EvalConfig,
    train: impl FnOnce() -> Result<(TrainOutcome, CheckpointHeader)>,
) -> Result<(RunRecord, Projector, CheckpointHeader)> {
    let dir = match work {
        Some(w) => Some(w.stage_dir(&spec.name)?),
        None => None,
    };
    if let (Some(w), Some(d)) = (work, &dir) {
        if w.resume {
            if let Some(done) = load_stage(d, &spec.key) {
                return Ok(done);
            }
        }
    }
    let (outcome, header) = train()?;
    let results = match work {
        Some(w) if !spec.tests.is_empty() => Some(w.results_dir()?),
        _ => None,
    };
    let mut cells = score_all(
        spec.tests,
        &outcome.projector,
        backends,
        &header.prompt_template,
        eval,
        results.as_deref(),
        &slug(&spec.name),
    )?;
    if let Some(w) = work {
        for c in &mut cells {
            c.results_file = c.results_file.take().map(|f| w.relative(&f));
        }
    }
    let run = RunRecord {
        row: spec.row,
        seed: spec.seed,
        hours_used: spec.hours_used,
        steps_run: outcome.steps_run,
        best_val_loss: outcome.best_val_loss,
        cells,
        checkpoint: work
            .zip(dir.as_ref())
            .map(|(w, d)| w.relative(d.join("projector.ckpt"))),
    };
    if let Some(d) = &dir {
        save_stage(
            d,
            &spec.key,
            &run,
            &outcome.projector,
            &header,
            &outcome.history,
        )?;
    }
    Ok((run, outcome.projector, header))
}

/// Copy of `cfg` reseeded for one run.
fn reseeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}
