use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use speechbridge::alignment::{load_checkpoint, load_lora, save_checkpoint, save_lora};
use speechbridge::backends::{generate_synthetic_corpus, Backends, LanguageModel};
use speechbridge::datamodel::{
    build_subset, read_manifest, write_features, write_manifest, DirFeatures, FeatureSource,
    LanguageTag, Manifest, SubsetSpec, Utterance,
};
use speechbridge::decoding::{decode_manifest, write_decode_jsonl};
use speechbridge::evaluation::{evaluate, EvalConfig, EvalReport, RowKey};
use speechbridge::rng::sha256_hex;
use speechbridge::training::{
    bootstrap_finetune_from, scratch_header, train, DataRef, LoraConfig, LoraLm, TrainConfig,
    TrainOutcome,
};
use speechbridge::workflows::{
    bootstrap_matrix, scaling_sweep, BootstrapConfig, PretrainSource, SweepConfig, ToySetup,
    WorkDir,
};

use crate::config::RunConfig;
use crate::outdir::{OutDir, Prepared};
use crate::{Command, Common, Usage};

/// A manifest whose feature locators have been made absolute.
struct Loaded {
    manifest: Manifest,
    features: DirFeatures,
}

impl Loaded {
    fn data(&self) -> DataRef<'_> {
        DataRef {
            manifest: &self.manifest,
            features: &self.features,
        }
    }
}

/// Reads a manifest and rewrites relative feature locators against its
/// directory, so the manifest can be used from anywhere.
fn load(path: &Path) -> Result<Loaded> {
    let m = read_manifest(path)?;
    let base = path
        .parent()
        .map(|p| {
            if p.as_os_str().is_empty() {
                Path::new(".")
            } else {
                p
            }
        })
        .unwrap_or(Path::new("."));
    let base =
        std::fs::canonicalize(base).with_context(|| format!("resolving {}", base.display()))?;
    let entries: Vec<Utterance> = m
        .entries()
        .iter()
        .cloned()
        .map(|mut u| {
            if Path::new(&u.features_ref).is_relative() {
                u.features_ref = base.join(&u.features_ref).display().to_string();
            }
            u
        })
        .collect();
    Ok(Loaded {
        manifest: Manifest::new(m.name, m.domain_label, entries)?,
        features: DirFeatures::new("/"),
    })
}

fn relabel(loaded: Loaded, lang: Option<&str>) -> Result<Loaded> {
    let Some(code) = lang else {
        return Ok(loaded);
    };
    let tag = LanguageTag::from_code(code).map_err(|e| Usage(format!("--lang: {e}")))?;
    let entries = loaded
        .manifest
        .entries()
        .iter()
        .cloned()
        .map(|mut u| {
            u.language = tag.clone();
            u
        })
        .collect();
    Ok(Loaded {
        manifest: Manifest::new(
            loaded.manifest.name.clone(),
            loaded.manifest.domain_label.clone(),
            entries,
        )?,
        features: loaded.features,
    })
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Usage(format!("no {what} given (flag or config)")).into())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Resume key: the command, its effective settings and the bytes of every
/// input file it names directly.
fn run_key(command: &str, settings: &impl Serialize, inputs: &[&Path]) -> Result<String> {
    let digests = inputs
        .iter()
        .map(|p| file_digest(p))
        .collect::<Result<Vec<_>>>()?;
    let body = serde_json::to_string(&(command, settings, digests))?;
    Ok(sha256_hex(body.as_bytes()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Runs `body` in a claimed output directory, or skips when `--resume` finds
/// the same run already finished.
fn in_out_dir(
    common: &Common,
    command: &str,
    key: &str,
    body: impl FnOnce(&OutDir) -> Result<()>,
) -> Result<()> {
    match OutDir::prepare(&common.out, key, common.force, common.resume)? {
        Prepared::UpToDate(p) => {
            eprintln!("{command}: {} is up to date", p.display());
            Ok(())
        }
        Prepared::Fresh(out) => {
            if let Err(e) = body(&out) {
                out.abandon();
                return Err(e);
            }
            let done = out.commit(command, key)?;
            eprintln!("{command}: wrote {}", done.display());
            Ok(())
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common } => synth(&common),
        Command::Subset {
            common,
            manifest,
            hours,
        } => subset(&common, &manifest, hours),
        Command::Train {
            common,
            train,
            val,
            lora,
        } => train_cmd(&common, train, val, lora),
        Command::Finetune {
            common,
            pretrained_ckpt,
            train,
            val,
            lang,
            lora,
        } => finetune(&common, &pretrained_ckpt, train, val, lang.as_deref(), lora),
        Command::Decode {
            common,
            checkpoint,
            manifest,
            beam,
            lora,
            lang,
        } => decode(
            &common,
            &checkpoint,
            &manifest,
            beam,
            lora.as_deref(),
            lang.as_deref(),
        ),
        Command::Evaluate {
            common,
            checkpoint,
            tests,
            beam,
            lora,
            hours,
        } => evaluate_cmd(&common, &checkpoint, tests, beam, lora.as_deref(), hours),
        Command::Report { common, inputs } => report(&common, &inputs),
        Command::ScalingSweep {
            common,
            hours,
            beam,
        } => sweep(&common, hours, beam),
        Command::BootstrapMatrix {
            common,
            hours,
            beam,
        } => bootstrap(&common, hours, beam),
    }
}

fn synth(common: &Common) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let mut requests = cfg.synth.corpora.clone();
    if requests.is_empty() {
        return Err(Usage("synth needs `synth.corpora` in the config".into()).into());
    }
    if let Some(seed) = common.seed {
        requests.iter_mut().for_each(|r| r.seed = seed);
    }
    let key = run_key("synth", &(&cfg.toy.task, &requests), &[])?;
    in_out_dir(common, "synth", &key, |out| {
        let feats = out.path().join("features");
        std::fs::create_dir_all(&feats)?;
        for req in &requests {
            let c = generate_synthetic_corpus(&cfg.toy.task, req)?;
            let mut entries = Vec::with_capacity(c.manifest.len());
            for u in c.manifest.entries() {
                let rel = format!("features/{}", u.features_ref);
                write_features(out.path().join(&rel), &c.features.load(&u.features_ref)?)?;
                entries.push(Utterance {
                    features_ref: rel,
                    ..u.clone()
                });
            }
            let m = Manifest::new(
                c.manifest.name.clone(),
                c.manifest.domain_label.clone(),
                entries,
            )?;
            write_manifest(out.path().join(format!("{}.jsonl", req.name)), &m)?;
        }
        write_json(&out.path().join("task.json"), &cfg.toy.task)
    })
}

fn subset(common: &Common, manifest: &Path, hours: f64) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let spec = SubsetSpec::new(hours, cfg.max_duration(), common.seed.unwrap_or(0))?;
    let key = run_key("subset", &spec, &[manifest])?;
    in_out_dir(common, "subset", &key, |out| {
        let src = load(manifest)?;
        let sub = build_subset(&src.manifest, &spec)?;
        write_manifest(out.path().join("subset.jsonl"), &sub)?;
        write_json(
            &out.path().join("subset.json"),
            &serde_json::json!({
                "source": manifest.display().to_string(),
                "spec": spec,
                "n_utterances": sub.len(),
                "hours": sub.total_hours(),
            }),
        )
    })
}

fn with_lora(mut cfg: TrainConfig, lora: bool) -> TrainConfig {
    if lora && cfg.lora.is_none() {
        cfg.lora = Some(LoraConfig::default());
    }
    cfg
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_step: usize,
    best_val_loss: f64,
    steps_run: usize,
    stopped_early: bool,
    header: &'a speechbridge::alignment::CheckpointHeader,
}

fn write_training(
    dir: &Path,
    outcome: &TrainOutcome,
    header: &speechbridge::alignment::CheckpointHeader,
    lm: &dyn LanguageModel,
) -> Result<()> {
    save_checkpoint(dir.join("projector.ckpt"), &outcome.projector, header)?;
    if let Some(l) = &outcome.lora {
        save_lora(dir.join("lora.bin"), l, lm)?;
    }
    outcome.history.write_csv(dir.join("history.csv"))?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            best_step: outcome.best_step,
            best_val_loss: outcome.best_val_loss,
            steps_run: outcome.steps_run,
            stopped_early: outcome.stopped_early,
            header,
        },
    )
}

fn train_cmd(
    common: &Common,
    train_path: Option<PathBuf>,
    val_path: Option<PathBuf>,
    lora: bool,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let train_path = require(train_path.or(cfg.data.train.clone()), "training manifest")?;
    let val_path = require(val_path.or(cfg.data.val.clone()), "validation manifest")?;
    let mut tc = with_lora(cfg.train.clone(), lora);
    if let Some(s) = common.seed {
        tc.seed = s;
    }
    let key = run_key(
        "train",
        &(&cfg.toy, &cfg.projector, &tc),
        &[&train_path, &val_path],
    )?;
    in_out_dir(common, "train", &key, |out| {
        let setup = ToySetup::new(&cfg.toy)?;
        let tr = load(&train_path)?;
        let dv = load(&val_path)?;
        let projector = cfg
            .projector
            .init(setup.task.d_enc, setup.d_llm(), tc.seed)?;
        let outcome = train(
            projector,
            setup.backends(),
            tr.data(),
            dv.data(),
            &setup.template,
            &tc,
        )?;
        let langs = tr.manifest.languages();
        let lang = (langs.len() == 1).then(|| langs[0].code().to_string());
        let header = scratch_header(
            &outcome.projector,
            setup.backends(),
            &setup.template,
            &tr.manifest.name,
            lang.as_deref(),
        );
        write_training(out.path(), &outcome, &header, &setup.lm)
    })
}

fn finetune(
    common: &Common,
    ckpt: &Path,
    train_path: Option<PathBuf>,
    val_path: Option<PathBuf>,
    lang: Option<&str>,
    lora: bool,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let train_path = require(train_path.or(cfg.data.train.clone()), "finetuning manifest")?;
    let val_path = require(val_path.or(cfg.data.val.clone()), "validation manifest")?;
    let mut tc = with_lora(cfg.finetune_schedule(), lora);
    if let Some(s) = common.seed {
        tc.seed = s;
    }
    let key = run_key(
        "finetune",
        &(&cfg.toy, &tc, lang),
        &[ckpt, &train_path, &val_path],
    )?;
    in_out_dir(common, "finetune", &key, |out| {
        let setup = ToySetup::new(&cfg.toy)?;
        let tr = relabel(load(&train_path)?, lang)?;
        let dv = relabel(load(&val_path)?, lang)?;
        let (outcome, header) =
            bootstrap_finetune_from(ckpt, setup.backends(), tr.data(), dv.data(), &tc)?;
        write_training(out.path(), &outcome, &header, &setup.lm)
    })
}

fn eval_config(cfg: &RunConfig, beam: Option<usize>) -> EvalConfig {
    let mut e = cfg.eval.clone();
    if let Some(b) = beam {
        e.decode.beam_size = b;
    }
    e
}

fn decode(
    common: &Common,
    ckpt: &Path,
    manifest: &Path,
    beam: Option<usize>,
    lora: Option<&Path>,
    lang: Option<&str>,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let ec = eval_config(&cfg, beam);
    let mut inputs = vec![ckpt, manifest];
    inputs.extend(lora);
    let key = run_key("decode", &(&cfg.toy, &ec.decode, lang), &inputs)?;
    in_out_dir(common, "decode", &key, |out| {
        let setup = ToySetup::new(&cfg.toy)?;
        let data = relabel(load(manifest)?, lang)?;
        let (projector, header) = load_checkpoint(ckpt)?;
        header.validate(&setup.encoder, &setup.lm)?;
        let records = match lora {
            None => decode_manifest(
                data.data(),
                &projector,
                setup.backends(),
                &header.prompt_template,
                &ec.decode,
            )?,
            Some(p) => {
                let wrapped = LoraLm::new(&setup.lm, load_lora(p, &setup.lm)?);
                let b = Backends {
                    encoder: &setup.encoder,
                    tokenizer: &setup.tokenizer,
                    lm: &wrapped,
                };
                decode_manifest(
                    data.data(),
                    &projector,
                    b,
                    &header.prompt_template,
                    &ec.decode,
                )?
            }
        };
        write_decode_jsonl(out.path().join("hypotheses.jsonl"), &records)?;
        Ok(())
    })
}

fn evaluate_cmd(
    common: &Common,
    ckpt: &Path,
    tests: Vec<PathBuf>,
    beam: Option<usize>,
    lora: Option<&Path>,
    hours: Option<f64>,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let tests = if tests.is_empty() {
        cfg.data.tests.clone()
    } else {
        tests
    };
    if tests.is_empty() {
        return Err(Usage("no test manifests (--test or data.tests)".into()).into());
    }
    let ec = eval_config(&cfg, beam);
    let mut inputs: Vec<&Path> = vec![ckpt];
    inputs.extend(tests.iter().map(PathBuf::as_path));
    inputs.extend(lora);
    let key = run_key("evaluate", &(&cfg.toy, &ec, hours), &inputs)?;
    in_out_dir(common, "evaluate", &key, |out| {
        let setup = ToySetup::new(&cfg.toy)?;
        let loaded = tests.iter().map(|t| load(t)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<DataRef<'_>> = loaded.iter().map(Loaded::data).collect();
        let (projector, header) = load_checkpoint(ckpt)?;
        header.validate(&setup.encoder, &setup.lm)?;
        let row = RowKey {
            train_corpus: header
                .provenance
                .last()
                .cloned()
                .unwrap_or_else(|| "unknown".into()),
            hours: hours.unwrap_or(0.0),
            provenance: match header.provenance.len() {
                0 | 1 => "Scratch".into(),
                _ => format!(
                    "{}→",
                    header.provenance[..header.provenance.len() - 1].join("→")
                ),
            },
        };
        let results = out.path().join("results");
        std::fs::create_dir_all(&results)?;
        let mut rep = EvalReport::new(
            format!("Evaluation of {}", ckpt.display()),
            ec.normalization,
        );
        match lora {
            None => evaluate(
                &mut rep,
                row,
                &refs,
                &projector,
                setup.backends(),
                &header.prompt_template,
                &ec,
                Some(&results),
            )?,
            Some(p) => {
                let wrapped = LoraLm::new(&setup.lm, load_lora(p, &setup.lm)?);
                let b = Backends {
                    encoder: &setup.encoder,
                    tokenizer: &setup.tokenizer,
                    lm: &wrapped,
                };
                evaluate(
                    &mut rep,
                    row,
                    &refs,
                    &projector,
                    b,
                    &header.prompt_template,
                    &ec,
                    Some(&results),
                )?
            }
        }
        relativize(&mut rep, out.path());
        rep.write(out.path())?;
        print!("{}", rep.to_text());
        Ok(())
    })
}

/// Stores results-file paths relative to the output directory.
fn relativize(rep: &mut EvalReport, root: &Path) {
    for (_, _, cell) in &mut rep.cells {
        if let Some(f) = &cell.results_file {
            if let Ok(rel) = Path::new(f).strip_prefix(root) {
                cell.results_file = Some(rel.display().to_string());
            }
        }
    }
}

fn report(common: &Common, inputs: &[PathBuf]) -> Result<()> {
    let resolved: Vec<PathBuf> = inputs
        .iter()
        .map(|p| {
            if p.is_dir() {
                p.join("report.json")
            } else {
                p.clone()
            }
        })
        .collect();
    let paths: Vec<&Path> = resolved.iter().map(PathBuf::as_path).collect();
    let key = run_key("report", &(), &paths)?;
    in_out_dir(common, "report", &key, |out| {
        let mut merged: Option<EvalReport> = None;
        for path in &resolved {
            let r = EvalReport::read(path)?;
            match &mut merged {
                None => {
                    merged = Some(EvalReport {
                        title: "Combined report".into(),
                        ..r
                    })
                }
                Some(m) => {
                    if m.normalization != r.normalization {
                        return Err(Usage(format!(
                            "{} uses a different normalization policy",
                            path.display()
                        ))
                        .into());
                    }
                    m.absorb(&r);
                }
            }
        }
        let merged = merged.expect("clap requires one input");
        merged.write(out.path())?;
        print!("{}", merged.to_text());
        Ok(())
    })
}

fn seeds(listed: &[u64], fallback: u64, flag: Option<u64>) -> Vec<u64> {
    match flag {
        Some(s) => vec![s],
        None if listed.is_empty() => vec![fallback],
        None => listed.to_vec(),
    }
}

fn sweep(common: &Common, hours: Option<Vec<f64>>, beam: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let pool_path = require(cfg.data.train.clone(), "data.train pool")?;
    let val_path = require(cfg.data.val.clone(), "data.val")?;
    if cfg.data.tests.is_empty() {
        return Err(Usage("scaling-sweep needs data.tests".into()).into());
    }
    let sc = SweepConfig {
        budgets_hours: hours.unwrap_or_else(|| cfg.sweep.budgets_hours.clone()),
        seeds: seeds(&cfg.sweep.seeds, cfg.train.seed, common.seed),
        max_duration_s: cfg.max_duration(),
        projector: cfg.projector,
        train: cfg.train.clone(),
        eval: eval_config(&cfg, beam),
    };
    sc.validate()?;
    let mut inputs: Vec<&Path> = vec![&pool_path, &val_path];
    inputs.extend(cfg.data.tests.iter().map(PathBuf::as_path));
    let key = run_key("scaling-sweep", &(&cfg.toy, &sc), &inputs)?;
    in_out_dir(common, "scaling-sweep", &key, |out| {
        let setup = ToySetup::new(&cfg.toy)?;
        let pool = load(&pool_path)?;
        let val = load(&val_path)?;
        let tests = cfg
            .data
            .tests
            .iter()
            .map(|t| load(t))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<DataRef<'_>> = tests.iter().map(Loaded::data).collect();
        let work = WorkDir::new(out.path(), common.resume);
        let outcome = scaling_sweep(
            setup.backends(),
            &setup.template,
            pool.data(),
            val.data(),
            &refs,
            &sc,
            Some(&work),
        )?;
        for (b, why) in &outcome.skipped {
            eprintln!("warning: skipped {b} h: {why}");
        }
        print!("{}", outcome.report.to_text());
        Ok(())
    })
}

fn bootstrap(common: &Common, hours: Option<Vec<f64>>, beam: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let b = &cfg.bootstrap;
    let pool_path = require(b.target_pool.clone(), "bootstrap.target_pool")?;
    let val_path = require(b.target_val.clone(), "bootstrap.target_val")?;
    if b.tests.is_empty() {
        return Err(Usage("bootstrap-matrix needs bootstrap.tests".into()).into());
    }
    if let Some(s) = b.sources.iter().find(|s| s.parts.is_empty()) {
        return Err(Usage(format!("source {:?} names no corpus", s.label)).into());
    }
    let bc = BootstrapConfig {
        finetune_budgets_hours: hours.unwrap_or_else(|| b.budgets_hours.clone()),
        seeds: seeds(&b.seeds, cfg.train.seed, common.seed),
        max_duration_s: cfg.max_duration(),
        projector: cfg.projector,
        pretrain: cfg.train.clone(),
        finetune: cfg.finetune_schedule(),
        eval: eval_config(&cfg, beam),
        scratch: b.scratch,
    };
    bc.validate()?;
    let mut inputs: Vec<&Path> = vec![&pool_path, &val_path];
    inputs.extend(b.tests.iter().map(PathBuf::as_path));
    for s in &b.sources {
        inputs.push(&s.val);
        inputs.extend(s.parts.iter().map(|p| p.manifest.as_path()));
    }
    let key = run_key("bootstrap-matrix", &(&cfg.toy, &bc, &b.sources), &inputs)?;
    in_out_dir(common, "bootstrap-matrix", &key, |out| {
        let setup = ToySetup::new(&cfg.toy)?;
        let pool = load(&pool_path)?;
        let val = load(&val_path)?;
        let tests = b
            .tests
            .iter()
            .map(|t| load(t))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<DataRef<'_>> = tests.iter().map(Loaded::data).collect();
        let loaded_sources = b
            .sources
            .iter()
            .map(|s| {
                let parts = s
                    .parts
                    .iter()
                    .map(|p| Ok((load(&p.manifest)?, p.weight)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((s.label.clone(), parts, load(&s.val)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let sources: Vec<PretrainSource<'_>> = loaded_sources
            .iter()
            .map(|(label, parts, v)| PretrainSource {
                label: label.clone(),
                parts: parts.iter().map(|(l, w)| (l.data(), *w)).collect(),
                val: v.data(),
            })
            .collect();
        let work = WorkDir::new(out.path(), common.resume);
        let outcome = bootstrap_matrix(
            setup.backends(),
            &setup.template,
            &sources,
            pool.data(),
            val.data(),
            &refs,
            &bc,
            Some(&work),
        )?;
        print!("{}", outcome.grid_text());
        Ok(())
    })
}
