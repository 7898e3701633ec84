//! Synthetic acoustic task and a frozen linear speech encoder.
//!
//! Each vocabulary symbol has a fixed frame embedding. An utterance is the
//! symbol embeddings repeated `frames_per_symbol` times with Gaussian noise,
//! passed through a per-language orthogonal shift, followed by a block of zero
//! frames marking the end of speech.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::SpeechEncoder;
use crate::datamodel::FrameMatrix;
use crate::error::{Error, Result};
use crate::rng::{checksum_f64, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub n_symbols: usize,
    pub frames_per_symbol: usize,
    pub d_enc: usize,
    pub noise_sigma: f64,
    /// Rotation per shift index, in radians.
    pub shift_angle: f64,
    pub silence_frames: usize,
    pub frame_period_s: f64,
    pub seed: u64,
    /// Language code to shift index; index 0 is the identity.
    pub language_shifts: BTreeMap<String, usize>,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            n_symbols: 10,
            frames_per_symbol: 5,
            d_enc: 16,
            noise_sigma: 0.0,
            shift_angle: 0.6,
            silence_frames: 5,
            frame_period_s: 0.02,
            seed: 0,
            language_shifts: [("en", 0), ("it", 1), ("gl", 2), ("es", 3)]
                .into_iter()
                .map(|(c, i)| (c.to_string(), i))
                .collect(),
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_symbols == 0 || self.frames_per_symbol == 0 || self.d_enc < 2 {
            return Err(Error::InvalidInput(
                "task needs symbols, frames per symbol and d_enc >= 2".into(),
            ));
        }
        if self.n_symbols > CONSONANTS.len() * VOWELS.len() * CONSONANTS.len() * VOWELS.len() {
            return Err(Error::InvalidInput("too many symbols".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.frame_period_s > 0.0) {
            return Err(Error::InvalidInput(
                "noise must be >= 0 and frame period > 0".into(),
            ));
        }
        Ok(())
    }

    /// Two-syllable consonant-vowel spellings, one per symbol.
    pub fn symbol_words(&self) -> Vec<String> {
        let mut rng = SeededRng::derive(self.seed, "task/words");
        let mut words: Vec<String> = Vec::with_capacity(self.n_symbols);
        while words.len() < self.n_symbols {
            let w: String = (0..2)
                .flat_map(|_| {
                    [
                        CONSONANTS[rng.below(CONSONANTS.len())] as char,
                        VOWELS[rng.below(VOWELS.len())] as char,
                    ]
                })
                .collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        words
    }

    pub fn symbol_embeddings(&self) -> Array2<f64> {
        let mut rng = SeededRng::derive(self.seed, "task/symbols");
        Array2::from_shape_simple_fn((self.n_symbols, self.d_enc), || rng.normal())
    }

    pub fn shift_index(&self, language: &str) -> Result<usize> {
        self.language_shifts.get(language).copied().ok_or_else(|| {
            Error::InvalidInput(format!(
                "no acoustic shift configured for language {language:?}"
            ))
        })
    }

    /// Orthogonal shift for one language: Givens rotations by
    /// `index * shift_angle` on one seeded pairing of the feature dimensions.
    /// Languages with nearby indices are acoustically close.
    pub fn shift_matrix(&self, index: usize) -> Array2<f64> {
        let d = self.d_enc;
        let mut m = Array2::eye(d);
        if index == 0 {
            return m;
        }
        let perm = SeededRng::derive(self.seed, "task/shift").permutation(d);
        let (s, c) = (index as f64 * self.shift_angle).sin_cos();
        for pair in perm.chunks_exact(2) {
            let (i, j) = (pair[0], pair[1]);
            m[[i, i]] = c;
            m[[i, j]] = -s;
            m[[j, i]] = s;
            m[[j, j]] = c;
        }
        m
    }

    pub fn n_frames(&self, n_symbols: usize) -> usize {
        n_symbols * self.frames_per_symbol + self.silence_frames
    }

    /// Rounded to the microsecond so manifests stay readable.
    pub fn duration_s(&self, n_symbols: usize) -> f64 {
        (self.n_frames(n_symbols) as f64 * self.frame_period_s * 1e6).round() / 1e6
    }

    /// Raw frames for a symbol sequence. Values are rounded to `f32`, the
    /// on-disk precision, so in-memory and stored corpora agree exactly.
    pub fn synthesize(&self, symbols: &[usize], shift: usize, utt_id: &str) -> Result<FrameMatrix> {
        let emb = self.symbol_embeddings();
        let mut rng = SeededRng::derive(self.seed, &format!("noise/{utt_id}"));
        let k = self.frames_per_symbol;
        let mut clean = Array2::zeros((symbols.len() * k, self.d_enc));
        for (i, &sym) in symbols.iter().enumerate() {
            if sym >= self.n_symbols {
                return Err(Error::InvalidInput(format!(
                    "symbol {sym} outside task of {}",
                    self.n_symbols
                )));
            }
            for f in 0..k {
                let mut row = clean.row_mut(i * k + f);
                row.assign(&emb.row(sym));
                row.mapv_inplace(|v| v + rng.normal() * self.noise_sigma);
            }
        }
        let shifted = clean.dot(&self.shift_matrix(shift).t());
        let mut out = Array2::zeros((self.n_frames(symbols.len()), self.d_enc));
        out.slice_mut(ndarray::s![..symbols.len() * k, ..])
            .assign(&shifted);
        Ok(out.mapv(|v| v as f32 as f64))
    }
}

/// Frozen encoder: one seeded orthogonal matrix applied to every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    seed: u64,
    weight: Array2<f64>,
    checksum: String,
}

pub fn toy_encoder(d_enc: usize, seed: u64) -> ToyEncoder {
    ToyEncoder::new(d_enc, seed)
}

fn random_orthogonal(d: usize, rng: &mut SeededRng) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((d, d), || rng.normal());
    for i in 0..d {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &prev);
        }
        let n = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / n);
    }
    m
}

impl ToyEncoder {
    pub fn new(d_enc: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "toy_encoder/weight");
        let weight = random_orthogonal(d_enc, &mut rng);
        let checksum = checksum_f64([weight.as_slice().unwrap()]);
        Self {
            seed,
            weight,
            checksum,
        }
    }
}

impl SpeechEncoder for ToyEncoder {
    fn id(&self) -> String {
        format!("toy-encoder/d{}-s{}", self.weight.nrows(), self.seed)
    }

    fn d_enc(&self) -> usize {
        self.weight.nrows()
    }

    fn encode(&self, frames: &FrameMatrix) -> Result<FrameMatrix> {
        if frames.ncols() != self.d_enc() {
            return Err(Error::DimensionMismatch {
                context: "encoder input",
                expected: self.d_enc(),
                actual: frames.ncols(),
            });
        }
        Ok(frames.dot(&self.weight.t()))
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn row_norms(m: &Array2<f64>) -> Vec<f64> {
        m.map_axis(Axis(1), |r| r.dot(&r).sqrt()).to_vec()
    }

    #[test]
    fn encoder_is_orthogonal_and_seeded() {
        let e = toy_encoder(16, 3);
        let gram = e.weight.dot(&e.weight.t());
        let eye = Array2::<f64>::eye(16);
        assert!((&gram - &eye).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(e.checksum(), toy_encoder(16, 3).checksum());
        assert_ne!(e.checksum(), toy_encoder(16, 4).checksum());
        let x = Array2::from_shape_fn((3, 16), |(i, j)| (i * 16 + j) as f64 / 7.0);
        let y = e.encode(&x).unwrap();
        for (a, b) in row_norms(&x).iter().zip(row_norms(&y)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(matches!(
            e.encode(&Array2::zeros((2, 8))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn shifts_are_orthogonal_and_distinct() {
        let spec = ToyTaskSpec::default();
        assert_eq!(spec.shift_matrix(0), Array2::<f64>::eye(16));
        let a = spec.shift_matrix(1);
        let b = spec.shift_matrix(2);
        let gram = a.dot(&a.t());
        assert!((&gram - &Array2::<f64>::eye(16))
            .iter()
            .all(|v| v.abs() < 1e-12));
        assert_ne!(a, b);
        assert!((&a.dot(&a) - &b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn synthesis_layout() {
        let spec = ToyTaskSpec {
            noise_sigma: 0.1,
            ..Default::default()
        };
        let f = spec.synthesize(&[2, 0, 2], 1, "u").unwrap();
        assert_eq!(f.dim(), (3 * 5 + 5, 16));
        assert!(f.slice(ndarray::s![15.., ..]).iter().all(|v| *v == 0.0));
        assert!(f.iter().all(|v| *v == *v as f32 as f64));
        assert_eq!(f, spec.synthesize(&[2, 0, 2], 1, "u").unwrap());
        assert_ne!(f, spec.synthesize(&[2, 0, 2], 1, "v").unwrap());
        assert!((spec.duration_s(3) - 0.4).abs() < 1e-12);
        assert!(spec.synthesize(&[10], 0, "u").is_err());
    }

    #[test]
    fn words_are_unique_syllables() {
        let spec = ToyTaskSpec {
            n_symbols: 40,
            ..Default::default()
        };
        let w = spec.symbol_words();
        assert_eq!(w.len(), 40);
        let set: std::collections::HashSet<_> = w.iter().collect();
        assert_eq!(set.len(), 40);
        assert!(w.iter().all(|s| s.len() == 4));
    }
}
