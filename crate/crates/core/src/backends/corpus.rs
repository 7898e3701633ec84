//! Labeled synthetic corpora for the toy task.

use serde::{Deserialize, Serialize};

use super::ToyTaskSpec;
use crate::datamodel::{InMemoryFeatures, LanguageTag, Manifest, Utterance};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRequest {
    pub name: String,
    pub domain: String,
    pub n_utts: usize,
    /// Inclusive range of transcript lengths, in symbols.
    pub len_range: (usize, usize),
    pub language: LanguageTag,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: Manifest,
    pub features: InMemoryFeatures,
}

/// Generates `n_utts` utterances with i.i.d. symbols.
///
/// Transcripts and noise depend on the request name, seed and index only, so
/// two requests that differ in language hold the same sentences.
pub fn generate_synthetic_corpus(
    spec: &ToyTaskSpec,
    req: &CorpusRequest,
) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let (lo, hi) = req.len_range;
    if lo == 0 || hi < lo {
        return Err(Error::InvalidInput(format!(
            "length range {lo}..={hi} must be non-empty and start at 1"
        )));
    }
    let shift = spec.shift_index(req.language.code())?;
    let words = spec.symbol_words();
    let mut rng = SeededRng::derive(req.seed, &format!("corpus/{}", req.name));
    let mut entries = Vec::with_capacity(req.n_utts);
    let mut features = InMemoryFeatures::new();
    for i in 0..req.n_utts {
        let len = lo + rng.below(hi - lo + 1);
        let symbols: Vec<usize> = (0..len).map(|_| rng.below(spec.n_symbols)).collect();
        let id = format!("{}-{i:05}", req.name);
        let locator = format!("{id}.feat");
        features.insert(locator.clone(), spec.synthesize(&symbols, shift, &id)?);
        let text = symbols
            .iter()
            .map(|&s| words[s].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        entries.push(Utterance::new(
            id,
            locator,
            Some(text),
            req.language.clone(),
            spec.duration_s(len),
        )?);
    }
    Ok(SyntheticCorpus {
        manifest: Manifest::new(req.name.clone(), req.domain.clone(), entries)?,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::FeatureSource;

    fn req(lang: &str) -> CorpusRequest {
        CorpusRequest {
            name: "toy".into(),
            domain: "read".into(),
            n_utts: 12,
            len_range: (2, 5),
            language: LanguageTag::from_code(lang).unwrap(),
            seed: 1,
        }
    }

    #[test]
    fn corpus_is_deterministic_and_consistent() {
        let spec = ToyTaskSpec::default();
        let a = generate_synthetic_corpus(&spec, &req("en")).unwrap();
        let b = generate_synthetic_corpus(&spec, &req("en")).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.manifest.len(), 12);
        for u in a.manifest.entries() {
            let f = a.features.load(&u.features_ref).unwrap();
            let n_words = u.transcript.as_ref().unwrap().split(' ').count();
            assert!((2..=5).contains(&n_words));
            assert_eq!(f.nrows(), spec.n_frames(n_words));
            assert!((u.duration_s - f.nrows() as f64 * 0.02).abs() < 1e-12);
        }
    }

    #[test]
    fn languages_share_text_but_not_frames() {
        let spec = ToyTaskSpec::default();
        let en = generate_synthetic_corpus(&spec, &req("en")).unwrap();
        let es = generate_synthetic_corpus(&spec, &req("es")).unwrap();
        for (a, b) in en.manifest.entries().iter().zip(es.manifest.entries()) {
            assert_eq!(a.transcript, b.transcript);
            assert_ne!(
                en.features.load(&a.features_ref).unwrap(),
                es.features.load(&b.features_ref).unwrap()
            );
        }
        assert!(generate_synthetic_corpus(&spec, &req("fr")).is_err());
    }

    #[test]
    fn languages_differ_only_by_their_shift() {
        let spec = ToyTaskSpec {
            noise_sigma: 0.5,
            ..ToyTaskSpec::default()
        };
        let corpora: Vec<_> = ["en", "it", "gl", "es"]
            .iter()
            .map(|l| generate_synthetic_corpus(&spec, &req(l)).unwrap())
            .collect();
        for u in 0..corpora[0].manifest.len() {
            let unshifted: Vec<_> = corpora
                .iter()
                .map(|c| {
                    let e = &c.manifest.entries()[u];
                    let m = spec.shift_matrix(spec.shift_index(e.language.code()).unwrap());
                    c.features.load(&e.features_ref).unwrap().dot(&m)
                })
                .collect();
            for other in &unshifted[1..] {
                let diff = (other - &unshifted[0])
                    .mapv(f64::abs)
                    .fold(0.0f64, |a, b| a.max(*b));
                assert!(diff < 1e-6, "utterance {u}: {diff}");
            }
        }
    }
}
