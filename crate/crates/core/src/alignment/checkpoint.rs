//! Binary projector and adapter checkpoints.
//!
//! Layout: 4-byte magic, u32 LE header length, UTF-8 JSON header, then the
//! tensors as row-major little-endian f32 in declared order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{Projector, PromptTemplate};
use crate::backends::{LanguageModel, SpeechEncoder};
use crate::error::{Error, Result};
use crate::training::{lora_targets, LoraAdapter, LoraAdapters, LoraTarget};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const PROJECTOR_MAGIC: &[u8; 4] = b"SLPJ";
const LORA_MAGIC: &[u8; 4] = b"SLRA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub d_enc: usize,
    pub k: usize,
    pub hidden: usize,
    pub d_llm: usize,
    pub encoder_id: String,
    pub lm_id: String,
    pub prompt_template: PromptTemplate,
    /// Tokens wrapped around the prompt; always "none".
    pub prompt_wrapper: String,
    /// Language code the prompt was last trained with.
    pub language: Option<String>,
    /// Training corpora in order, oldest first.
    pub provenance: Vec<String>,
}

impl CheckpointHeader {
    pub fn new(
        projector: &Projector,
        encoder: &dyn SpeechEncoder,
        lm: &dyn LanguageModel,
        prompt_template: PromptTemplate,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            d_enc: projector.d_enc,
            k: projector.k,
            hidden: projector.hidden(),
            d_llm: projector.d_llm(),
            encoder_id: encoder.id(),
            lm_id: lm.id(),
            prompt_template,
            prompt_wrapper: "none".into(),
            language: None,
            provenance: Vec::new(),
        }
    }

    /// Refuses checkpoints whose dims or backend ids differ from the active
    /// backends; the error carries both headers.
    pub fn validate(&self, encoder: &dyn SpeechEncoder, lm: &dyn LanguageModel) -> Result<()> {
        let ok = self.d_enc == encoder.d_enc()
            && self.d_llm == lm.d_model()
            && self.encoder_id == encoder.id()
            && self.lm_id == lm.id();
        if ok {
            return Ok(());
        }
        let active = serde_json::json!({
            "d_enc": encoder.d_enc(),
            "d_llm": lm.d_model(),
            "encoder_id": encoder.id(),
            "lm_id": lm.id(),
        });
        Err(Error::CheckpointMismatch {
            checkpoint: serde_json::to_string(self)?,
            active: active.to_string(),
        })
    }
}

fn write_framed<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    tensors: &[&[f64]],
) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let n: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(8 + json.len() + 4 * n);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in t.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Framed<H> {
    header: H,
    values: Vec<f64>,
}

fn read_framed<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
    what: &'static str,
) -> Result<Framed<H>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format { what, detail };
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(bad(format!("{}: missing magic", path.display())));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header = serde_json::from_slice(body)?;
    let rest = &bytes[8 + len..];
    if rest.len() % 4 != 0 {
        return Err(bad("tensor block is not a whole number of f32".into()));
    }
    let values = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Framed { header, values })
}

fn take<'a>(values: &mut &'a [f64], n: usize, what: &'static str) -> Result<&'a [f64]> {
    if values.len() < n {
        return Err(Error::Format {
            what,
            detail: format!("expected {n} more values, found {}", values.len()),
        });
    }
    let (head, tail) = values.split_at(n);
    *values = tail;
    Ok(head)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    projector: &Projector,
    header: &CheckpointHeader,
) -> Result<()> {
    if header.d_enc != projector.d_enc
        || header.k != projector.k
        || header.hidden != projector.hidden()
        || header.d_llm != projector.d_llm()
    {
        return Err(Error::InvalidInput(
            "checkpoint header does not describe the projector".into(),
        ));
    }
    write_framed(path.as_ref(), PROJECTOR_MAGIC, header, &projector.tensors())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Projector, CheckpointHeader)> {
    const WHAT: &str = "projector checkpoint";
    let f: Framed<CheckpointHeader> = read_framed(path.as_ref(), PROJECTOR_MAGIC, WHAT)?;
    let h = &f.header;
    if h.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("unsupported format version {}", h.format_version),
        });
    }
    let kd = h.k * h.d_enc;
    let mut vals = f.values.as_slice();
    let w1 = take(&mut vals, h.hidden * kd, WHAT)?.to_vec();
    let b1 = take(&mut vals, h.hidden, WHAT)?.to_vec();
    let w2 = take(&mut vals, h.d_llm * h.hidden, WHAT)?.to_vec();
    let b2 = take(&mut vals, h.d_llm, WHAT)?.to_vec();
    if !vals.is_empty() {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("{} trailing values", vals.len()),
        });
    }
    let projector = Projector {
        d_enc: h.d_enc,
        k: h.k,
        w1: Array2::from_shape_vec((h.hidden, kd), w1).unwrap(),
        b1: Array1::from_vec(b1),
        w2: Array2::from_shape_vec((h.d_llm, h.hidden), w2).unwrap(),
        b2: Array1::from_vec(b2),
    };
    Ok((projector, f.header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraTensorShape {
    pub layer: usize,
    pub target: LoraTarget,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraHeader {
    pub format_version: u32,
    pub lm_id: String,
    pub r: usize,
    pub alpha: f64,
    /// Each entry is followed in the tensor block by `A` (r x in) then `B` (out x r).
    pub adapters: Vec<LoraTensorShape>,
}

pub fn save_lora(
    path: impl AsRef<Path>,
    adapters: &LoraAdapters,
    lm: &dyn LanguageModel,
) -> Result<()> {
    let header = LoraHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        lm_id: lm.id(),
        r: adapters.r,
        alpha: adapters.alpha,
        adapters: adapters
            .adapters
            .iter()
            .map(|a| LoraTensorShape {
                layer: a.layer,
                target: a.target,
                in_dim: a.a.ncols(),
                out_dim: a.b.nrows(),
            })
            .collect(),
    };
    write_framed(path.as_ref(), LORA_MAGIC, &header, &adapters.tensors())
}

/// Loads adapters and checks them against the LM's attention geometry.
pub fn load_lora(path: impl AsRef<Path>, lm: &dyn LanguageModel) -> Result<LoraAdapters> {
    const WHAT: &str = "LoRA checkpoint";
    let f: Framed<LoraHeader> = read_framed(path.as_ref(), LORA_MAGIC, WHAT)?;
    let h = f.header;
    let geometry = lm
        .attention_geometry()
        .ok_or_else(|| Error::InvalidInput("LM exposes no attention geometry".into()))?;
    let targets: Vec<_> = h.adapters.iter().map(|a| a.target).collect();
    let expected: Vec<LoraTensorShape> = lora_targets(&geometry, &targets)
        .into_iter()
        .filter(|(layer, target, _)| {
            h.adapters
                .iter()
                .any(|a| a.layer == *layer && a.target == *target)
        })
        .map(|(layer, target, s)| LoraTensorShape {
            layer,
            target,
            in_dim: s.in_dim,
            out_dim: s.out_dim,
        })
        .collect();
    if h.lm_id != lm.id() || h.adapters != expected {
        return Err(Error::CheckpointMismatch {
            checkpoint: serde_json::to_string(&h)?,
            active: serde_json::json!({ "lm_id": lm.id(), "adapters": expected }).to_string(),
        });
    }
    let mut vals = f.values.as_slice();
    let mut adapters = Vec::with_capacity(h.adapters.len());
    for s in &h.adapters {
        let a = take(&mut vals, h.r * s.in_dim, WHAT)?.to_vec();
        let b = take(&mut vals, s.out_dim * h.r, WHAT)?.to_vec();
        adapters.push(LoraAdapter {
            layer: s.layer,
            target: s.target,
            a: Array2::from_shape_vec((h.r, s.in_dim), a).unwrap(),
            b: Array2::from_shape_vec((s.out_dim, h.r), b).unwrap(),
        });
    }
    if !vals.is_empty() {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("{} trailing values", vals.len()),
        });
    }
    Ok(LoraAdapters {
        r: h.r,
        alpha: h.alpha,
        adapters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{toy_encoder, toy_lm};
    use crate::training::LoraConfig;

    #[test]
    fn projector_roundtrip_and_validation() {
        let enc = toy_encoder(16, 1);
        let lm = toy_lm(64, 12, 2, 0).unwrap();
        let mut p = Projector::init(16, 5, 8, 64, 2).unwrap();
        p.round_to_f32();
        let mut header = CheckpointHeader::new(&p, &enc, &lm, PromptTemplate::default());
        header.provenance.push("en-train".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&path, &p, &header).unwrap();
        let (q, h2) = load_checkpoint(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(h2, header);
        h2.validate(&enc, &lm).unwrap();
        let other = toy_lm(64, 12, 2, 1).unwrap();
        let err = h2.validate(&enc, &other).unwrap_err();
        assert!(err.to_string().contains(&lm.id()) && err.to_string().contains(&other.id()));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn lora_roundtrip() {
        let lm = toy_lm(64, 12, 2, 0).unwrap();
        let geometry = lm.attention_geometry().unwrap();
        let mut ad = LoraAdapters::init(&geometry, &LoraConfig::default(), 3).unwrap();
        ad.adapters[1].b.fill(0.25);
        ad.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.lora");
        save_lora(&path, &ad, &lm).unwrap();
        assert_eq!(load_lora(&path, &lm).unwrap(), ad);
        let other = toy_lm(64, 12, 3, 0).unwrap();
        assert!(matches!(
            load_lora(&path, &other),
            Err(Error::CheckpointMismatch { .. })
        ));
    }
}
