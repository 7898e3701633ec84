use serde::{Deserialize, Serialize};

use super::{
    columns, ensure_dir, hours_label, lower_median, manifest_key, median_report, reseeded,
    run_stage, runs_report, slug, stage_key, ProjectorConfig, RunRecord, StageSpec, WorkDir,
};
use crate::alignment::PromptTemplate;
use crate::backends::{Backends, DifferentiableLm};
use crate::datamodel::{
    build_subset, mix_manifests, ChainedFeatures, FeatureSource, Manifest, SubsetSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, EvalReport, RowKey};
use crate::training::{bootstrap_finetune, scratch_header, train, DataRef, TrainConfig};

pub const SCRATCH: &str = "Scratch";

/// A pretraining corpus, or a weighted mixture of several.
#[derive(Clone)]
pub struct PretrainSource<'a> {
    /// Short name used in the provenance header, e.g. "CV200 ES" or "MULTI".
    pub label: String,
    pub parts: Vec<(DataRef<'a>, f64)>,
    pub val: DataRef<'a>,
}

impl<'a> PretrainSource<'a> {
    pub fn single(label: impl Into<String>, train: DataRef<'a>, val: DataRef<'a>) -> Self {
        Self {
            label: label.into(),
            parts: vec![(train, 1.0)],
            val,
        }
    }

    /// Provenance header shown in the report, e.g. "MULTI→".
    pub fn provenance(&self) -> String {
        format!("{}→", self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Target-language finetuning budgets in hours, strictly ascending.
    pub finetune_budgets_hours: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_duration_s: f64,
    pub projector: ProjectorConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    /// Also train a projector from scratch at every budget.
    pub scratch: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            finetune_budgets_hours: vec![10.0, 15.0],
            seeds: vec![0],
            max_duration_s: 30.0,
            projector: ProjectorConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            eval: EvalConfig::default(),
            scratch: true,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.finetune_budgets_hours.is_empty() {
            return Err(Error::InvalidInput(
                "bootstrap matrix needs at least one budget".into(),
            ));
        }
        if self
            .finetune_budgets_hours
            .windows(2)
            .any(|w| !(w[0] < w[1]))
        {
            return Err(Error::InvalidInput(format!(
                "budgets must be strictly ascending, got {:?}",
                self.finetune_budgets_hours
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput(
                "bootstrap matrix needs at least one seed".into(),
            ));
        }
        self.pretrain.validate()?;
        self.finetune.validate()
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    /// One row per (budget, provenance); each cell is the lower-median seed.
    pub report: EvalReport,
    pub runs_report: EvalReport,
    /// Finetuned and scratch runs.
    pub runs: Vec<RunRecord>,
    /// Pretraining runs, one per (source, seed); they carry no cells.
    pub pretrain_runs: Vec<RunRecord>,
    /// Provenance headers in column order, starting with "Scratch" if enabled.
    pub provenances: Vec<String>,
    pub budgets: Vec<f64>,
}

impl BootstrapOutcome {
    /// Median percent WER for one test set as a budgets × provenances grid.
    pub fn grid(&self, test_index: usize) -> Vec<Vec<Option<f64>>> {
        self.budgets
            .iter()
            .map(|&b| {
                self.provenances
                    .iter()
                    .map(|p| {
                        let vals: Vec<f64> = self
                            .runs
                            .iter()
                            .filter(|r| r.row.hours == b && &r.row.provenance == p)
                            .map(|r| r.cells[test_index].wer)
                            .collect();
                        lower_median(&vals)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn median(&self, budget: f64, provenance: &str, test_index: usize) -> Option<f64> {
        let b = self.budgets.iter().position(|x| *x == budget)?;
        let p = self.provenances.iter().position(|x| x == provenance)?;
        self.grid(test_index)[b][p]
    }

    /// The grid rendered as text, one block per test set.
    pub fn grid_text(&self) -> String {
        let mut out = String::new();
        for (j, col) in self.report.columns.iter().enumerate() {
            out.push_str(&format!("{}\n{:>10}", col.label(), "hours"));
            for p in &self.provenances {
                out.push_str(&format!(" {p:>12}"));
            }
            out.push('\n');
            for (b, row) in self.budgets.iter().zip(self.grid(j)) {
                out.push_str(&format!("{b:>10}"));
                for v in row {
                    match v {
                        Some(v) => out.push_str(&format!(" {v:>12.1}")),
                        None => out.push_str(&format!(" {:>12}", "-")),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// Pretrains one projector per source and seed, then finetunes each on
/// target-language subsets of every budget, next to scratch baselines.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_matrix<L: DifferentiableLm>(
    backends: Backends<'_, L>,
    template: &PromptTemplate,
    sources: &[PretrainSource<'_>],
    target_pool: DataRef<'_>,
    target_val: DataRef<'_>,
    tests: &[DataRef<'_>],
    cfg: &BootstrapConfig,
    work: Option<&WorkDir>,
) -> Result<BootstrapOutcome> {
    cfg.validate()?;
    if tests.is_empty() {
        return Err(Error::InvalidInput("no test manifests given".into()));
    }
    if let Some(s) = sources.iter().find(|s| s.parts.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "pretraining source {:?} names no corpus",
            s.label
        )));
    }
    let d_enc = backends.encoder.d_enc();
    let d_llm = backends.lm.d_model();
    let test_keys: Vec<String> = tests.iter().map(|t| manifest_key(t.manifest)).collect();
    let backend_keys = (backends.encoder.checksum(), backends.lm.checksum());

    let mut provenances = Vec::new();
    if cfg.scratch {
        provenances.push(SCRATCH.to_string());
    }
    provenances.extend(sources.iter().map(PretrainSource::provenance));

    let mut pretrain_runs = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut pretrained = Vec::with_capacity(sources.len());
        for src in sources {
            let (mixed, features) = pretrain_corpus(src, seed)?;
            let train_cfg = reseeded(&cfg.pretrain, seed);
            let key = stage_key(&(
                "pretrain",
                seed,
                &cfg.projector,
                &train_cfg,
                manifest_key(&mixed),
                manifest_key(src.val.manifest),
                &backend_keys,
                template,
            ))?;
            let stage = StageSpec {
                name: format!("pretrain_{}_seed{seed}", slug(&src.label)),
                key,
                row: RowKey {
                    train_corpus: mixed.name.clone(),
                    hours: mixed.total_hours(),
                    provenance: SCRATCH.into(),
                },
                seed,
                hours_used: mixed.total_hours(),
                tests: &[],
            };
            let data = DataRef {
                manifest: &mixed,
                features: &features,
            };
            let (run, projector, header) = run_stage(work, stage, backends, &cfg.eval, || {
                let projector = cfg.projector.init(d_enc, d_llm, seed)?;
                let outcome = train(projector, backends, data, src.val, template, &train_cfg)?;
                let langs = mixed.languages();
                let lang = (langs.len() == 1).then(|| langs[0].code().to_string());
                let header = scratch_header(
                    &outcome.projector,
                    backends,
                    template,
                    &mixed.name,
                    lang.as_deref(),
                );
                Ok((outcome, header))
            })?;
            pretrain_runs.push(run);
            pretrained.push((projector, header));
        }

        for &budget in &cfg.finetune_budgets_hours {
            let spec = SubsetSpec::new(budget, cfg.max_duration_s, seed)?;
            let subset = build_subset(target_pool.manifest, &spec)?;
            let ft_data = DataRef {
                manifest: &subset,
                features: target_pool.features,
            };
            let ft_cfg = reseeded(&cfg.finetune, seed);
            let row_for = |provenance: &str| RowKey {
                train_corpus: target_pool.manifest.name.clone(),
                hours: budget,
                provenance: provenance.to_string(),
            };
            let common = (
                budget,
                seed,
                &cfg.projector,
                &ft_cfg,
                &cfg.eval,
                manifest_key(&subset),
                manifest_key(target_val.manifest),
                &test_keys,
                &backend_keys,
            );

            if cfg.scratch {
                let stage = StageSpec {
                    name: format!("scratch_{}h_seed{seed}", hours_label(budget)),
                    key: stage_key(&("scratch", &common, template))?,
                    row: row_for(SCRATCH),
                    seed,
                    hours_used: subset.total_hours(),
                    tests,
                };
                let (run, _, _) = run_stage(work, stage, backends, &cfg.eval, || {
                    let projector = cfg.projector.init(d_enc, d_llm, seed)?;
                    let outcome =
                        train(projector, backends, ft_data, target_val, template, &ft_cfg)?;
                    let langs = subset.languages();
                    let lang = (langs.len() == 1).then(|| langs[0].code().to_string());
                    let header = scratch_header(
                        &outcome.projector,
                        backends,
                        template,
                        &subset.name,
                        lang.as_deref(),
                    );
                    Ok((outcome, header))
                })?;
                runs.push(run);
            }

            for (src, (projector, header)) in sources.iter().zip(&pretrained) {
                let stage = StageSpec {
                    name: format!("{}_{}h_seed{seed}", slug(&src.label), hours_label(budget)),
                    key: stage_key(&("finetune", &common, projector.checksum(), header))?,
                    row: row_for(&src.provenance()),
                    seed,
                    hours_used: subset.total_hours(),
                    tests,
                };
                let (run, _, _) = run_stage(work, stage, backends, &cfg.eval, || {
                    bootstrap_finetune(
                        (projector.clone(), header.clone()),
                        backends,
                        ft_data,
                        target_val,
                        &ft_cfg,
                    )
                })?;
                runs.push(run);
            }
        }
    }

    let cols = columns(tests);
    let title = format!("Bootstrapped finetuning on {}", target_pool.manifest.name);
    let report = median_report(&title, cfg.eval.normalization, &cols, &runs);
    let runs_rep = runs_report(&title, cfg.eval.normalization, &cols, &runs);
    let outcome = BootstrapOutcome {
        report,
        runs_report: runs_rep,
        runs,
        pretrain_runs,
        provenances,
        budgets: cfg.finetune_budgets_hours.clone(),
    };
    if let Some(w) = work {
        ensure_dir(&w.root)?;
        outcome.report.write(&w.root)?;
        outcome.runs_report.write_as(&w.root, "runs")?;
        let p = w.root.join("grid.txt");
        std::fs::write(&p, outcome.grid_text()).map_err(|e| Error::io(p, e))?;
    }
    Ok(outcome)
}

/// The pretraining manifest for one seed: the corpus itself, or a seeded
/// mixture whose features are looked up across every part.
fn pretrain_corpus<'a>(
    src: &PretrainSource<'a>,
    seed: u64,
) -> Result<(Manifest, ChainedFeatures<'a>)> {
    let features = ChainedFeatures::new(
        src.parts
            .iter()
            .map(|(d, _)| d.features as &dyn FeatureSource)
            .collect(),
    );
    if let [(only, _)] = src.parts.as_slice() {
        return Ok((only.manifest.clone(), features));
    }
    let parts: Vec<(&Manifest, f64)> = src.parts.iter().map(|(d, w)| (d.manifest, *w)).collect();
    let domain = parts[0].0.domain_label.clone();
    let mixed = mix_manifests(src.label.clone(), domain, &parts, seed)?;
    Ok((mixed, features))
}
