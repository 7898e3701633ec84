use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    columns, ensure_dir, hours_label, lower_median, manifest_key, median_report, reseeded,
    run_stage, runs_report, stage_key, ProjectorConfig, RunRecord, StageSpec, WorkDir,
};
use crate::alignment::PromptTemplate;
use crate::backends::{Backends, DifferentiableLm};
use crate::datamodel::{build_subset, SubsetSpec};
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, EvalReport, RowKey};
use crate::training::{scratch_header, train, DataRef, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Training budgets in hours, strictly ascending.
    pub budgets_hours: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_duration_s: f64,
    pub projector: ProjectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets_hours: vec![10.0, 50.0, 100.0, 200.0, 252.0],
            seeds: vec![0],
            max_duration_s: 30.0,
            projector: ProjectorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets_hours.is_empty() {
            return Err(Error::InvalidInput(
                "scaling sweep needs at least one budget".into(),
            ));
        }
        if self.budgets_hours.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput(format!(
                "budgets must be strictly ascending, got {:?}",
                self.budgets_hours
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput(
                "scaling sweep needs at least one seed".into(),
            ));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// One row per budget; each cell is the lower-median seed.
    pub report: EvalReport,
    /// One row per (budget, seed).
    pub runs_report: EvalReport,
    pub runs: Vec<RunRecord>,
    /// Budgets that could not be served, with the reason.
    pub skipped: Vec<(f64, String)>,
}

impl SweepOutcome {
    /// Median percent WER per budget for one test column, in budget order.
    pub fn median_curve(&self, test_index: usize) -> Vec<(f64, f64)> {
        let mut budgets: Vec<f64> = Vec::new();
        for r in &self.runs {
            if !budgets.contains(&r.row.hours) {
                budgets.push(r.row.hours);
            }
        }
        budgets
            .into_iter()
            .map(|b| {
                let vals: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.row.hours == b)
                    .map(|r| r.cells[test_index].wer)
                    .collect();
                (b, lower_median(&vals).expect("budget has runs"))
            })
            .collect()
    }
}

/// Trains a projector from scratch on nested-budget subsets of `pool` and
/// scores each on every test set.
///
/// Budgets the pool cannot cover are skipped and noted in the report.
#[allow(clippy::too_many_arguments)]
pub fn scaling_sweep<L: DifferentiableLm>(
    backends: Backends<'_, L>,
    template: &PromptTemplate,
    pool: DataRef<'_>,
    val: DataRef<'_>,
    tests: &[DataRef<'_>],
    cfg: &SweepConfig,
    work: Option<&WorkDir>,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    if tests.is_empty() {
        return Err(Error::InvalidInput("no test manifests given".into()));
    }
    let d_enc = backends.encoder.d_enc();
    let d_llm = backends.lm.d_model();
    let test_keys: Vec<String> = tests.iter().map(|t| manifest_key(t.manifest)).collect();
    let mut runs = Vec::new();
    let mut skipped = Vec::new();

    for &budget in &cfg.budgets_hours {
        for &seed in &cfg.seeds {
            let spec = SubsetSpec::new(budget, cfg.max_duration_s, seed)?;
            let subset = match build_subset(pool.manifest, &spec) {
                Ok(s) => s,
                Err(e @ Error::InsufficientData { .. }) => {
                    skipped.push((budget, e.to_string()));
                    break;
                }
                Err(e) => return Err(e),
            };
            let train_cfg = reseeded(&cfg.train, seed);
            let key = stage_key(&(
                "scratch",
                budget,
                seed,
                &cfg.projector,
                &train_cfg,
                &cfg.eval,
                manifest_key(&subset),
                manifest_key(val.manifest),
                &test_keys,
                backends.encoder.checksum(),
                backends.lm.checksum(),
                template,
            ))?;
            let row = RowKey {
                train_corpus: pool.manifest.name.clone(),
                hours: budget,
                provenance: "Scratch".into(),
            };
            let stage = StageSpec {
                name: format!("scratch_{}h_seed{seed}", hours_label(budget)),
                key,
                row,
                seed,
                hours_used: subset.total_hours(),
                tests,
            };
            let train_data = DataRef {
                manifest: &subset,
                features: pool.features,
            };
            let (run, _, _) = run_stage(work, stage, backends, &cfg.eval, || {
                let projector = cfg.projector.init(d_enc, d_llm, seed)?;
                let outcome = train(projector, backends, train_data, val, template, &train_cfg)?;
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
    }

    let cols = columns(tests);
    let mut report = median_report(
        &format!("WER vs training hours ({})", pool.manifest.name),
        cfg.eval.normalization,
        &cols,
        &runs,
    );
    let mut runs_rep = runs_report(
        &format!("WER per seed ({})", pool.manifest.name),
        cfg.eval.normalization,
        &cols,
        &runs,
    );
    for (b, why) in &skipped {
        let note = format!("skipped {b} h: {why}");
        report.notes.push(note.clone());
        runs_rep.notes.push(note);
    }
    let outcome = SweepOutcome {
        report,
        runs_report: runs_rep,
        runs,
        skipped,
    };
    if let Some(w) = work {
        ensure_dir(&w.root)?;
        outcome.report.write(&w.root)?;
        outcome.runs_report.write_as(&w.root, "runs")?;
        write_scaling_plot(&w.root, &outcome)?;
    }
    Ok(outcome)
}

/// Writes `scaling.dat` (hours, then median WER per test set) and a gnuplot
/// script `scaling.gp` that renders it to `scaling.png`.
pub fn write_scaling_plot(dir: &Path, outcome: &SweepOutcome) -> Result<()> {
    let cols = &outcome.report.columns;
    let curves: Vec<Vec<(f64, f64)>> = (0..cols.len()).map(|j| outcome.median_curve(j)).collect();
    let mut dat = String::from("# hours");
    for c in cols {
        dat.push_str(&format!(
            "\t{}",
            c.label().replace(char::is_whitespace, "_")
        ));
    }
    dat.push('\n');
    let n = curves.first().map_or(0, Vec::len);
    for i in 0..n {
        dat.push_str(&format!("{}", curves[0][i].0));
        for c in &curves {
            dat.push_str(&format!("\t{:.3}", c[i].1));
        }
        dat.push('\n');
    }
    let mut gp = String::from(
        "set terminal pngcairo size 800,500\n\
         set output 'scaling.png'\n\
         set logscale x\n\
         set xlabel 'training hours'\n\
         set ylabel 'WER (%)'\n\
         set key top right\n\
         plot ",
    );
    let plots: Vec<String> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| {
            format!(
                "'scaling.dat' using 1:{} with linespoints title '{}'",
                j + 2,
                c.label().replace('\'', "")
            )
        })
        .collect();
    gp.push_str(&plots.join(", \\\n     "));
    gp.push('\n');
    for (name, body) in [("scaling.dat", dat), ("scaling.gp", gp)] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
