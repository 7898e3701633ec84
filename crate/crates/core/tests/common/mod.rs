#![allow(dead_code)]

use speechbridge::backends::{generate_synthetic_corpus, CorpusRequest, SyntheticCorpus};
use speechbridge::datamodel::LanguageTag;
use speechbridge::training::{DataRef, TrainConfig};
use speechbridge::workflows::{ToySetup, ToySetupConfig};

pub fn setup(noise: f64) -> ToySetup {
    let mut cfg = ToySetupConfig::default();
    cfg.task.noise_sigma = noise;
    ToySetup::new(&cfg).unwrap()
}

pub fn corpus(setup: &ToySetup, name: &str, lang: &str, n: usize, seed: u64) -> SyntheticCorpus {
    generate_synthetic_corpus(
        &setup.task,
        &CorpusRequest {
            name: name.into(),
            domain: "read".into(),
            n_utts: n,
            len_range: (3, 8),
            language: LanguageTag::from_code(lang).unwrap(),
            seed,
        },
    )
    .unwrap()
}

pub fn data(c: &SyntheticCorpus) -> DataRef<'_> {
    DataRef {
        manifest: &c.manifest,
        features: &c.features,
    }
}

/// Short schedule suited to the toy task.
pub fn quick(max_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_max: 1e-3,
        warmup_steps: 20.min(max_steps),
        max_steps,
        batch_size: 4,
        epochs: 10_000,
        eval_every: 20,
        patience: 3,
        seed,
        ..TrainConfig::default()
    }
}
