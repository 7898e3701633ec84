use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{FrameMatrix, LanguageTag, Manifest, Utterance};
use crate::error::{Error, Result};

/// Resolves an utterance's `features_ref` to its frame matrix.
pub trait FeatureSource: Send + Sync {
    fn load(&self, locator: &str) -> Result<FrameMatrix>;
}

#[derive(Debug, Default, Clone)]
pub struct InMemoryFeatures {
    frames: HashMap<String, Arc<FrameMatrix>>,
}

impl InMemoryFeatures {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, locator: impl Into<String>, frames: FrameMatrix) {
        self.frames.insert(locator.into(), Arc::new(frames));
    }

    pub fn extend(&mut self, other: &InMemoryFeatures) {
        for (k, v) in &other.frames {
            self.frames.insert(k.clone(), Arc::clone(v));
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FrameMatrix)> {
        self.frames.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }
}

impl FeatureSource for InMemoryFeatures {
    fn load(&self, locator: &str) -> Result<FrameMatrix> {
        self.frames
            .get(locator)
            .map(|m| m.as_ref().clone())
            .ok_or_else(|| Error::Format {
                what: "feature locator",
                detail: format!("{locator:?} not in memory store"),
            })
    }
}

/// Looks a locator up in each source in turn.
pub struct ChainedFeatures<'a> {
    sources: Vec<&'a dyn FeatureSource>,
}

impl<'a> ChainedFeatures<'a> {
    pub fn new(sources: Vec<&'a dyn FeatureSource>) -> Self {
        Self { sources }
    }
}

impl FeatureSource for ChainedFeatures<'_> {
    fn load(&self, locator: &str) -> Result<FrameMatrix> {
        let mut last = None;
        for s in &self.sources {
            match s.load(locator) {
                Ok(f) => return Ok(f),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::InvalidInput(format!("no feature source for {locator}"))))
    }
}

/// Feature files on disk; relative locators resolve against `root`.
#[derive(Debug, Clone)]
pub struct DirFeatures {
    root: PathBuf,
}

impl DirFeatures {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl FeatureSource for DirFeatures {
    fn load(&self, locator: &str) -> Result<FrameMatrix> {
        read_features(self.root.join(locator))
    }
}

/// Writes `T`, `d` as little-endian u32 followed by row-major LE f32 values.
pub fn write_features(path: impl AsRef<Path>, frames: &FrameMatrix) -> Result<()> {
    let path = path.as_ref();
    let (t, d) = frames.dim();
    let mut buf = Vec::with_capacity(8 + 4 * t * d);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in frames.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FrameMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|detail| Error::Format {
        what: "feature file",
        detail: format!("{}: {detail}", path.display()),
    })
}

fn decode_features(bytes: &[u8]) -> std::result::Result<FrameMatrix, String> {
    if bytes.len() < 8 {
        return Err("missing 8-byte header".into());
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * t * d {
        return Err(format!(
            "header says {t}x{d} but body has {} bytes",
            body.len()
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((t, d), values).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    manifest: ManifestHeader,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    domain: Option<String>,
    /// Display names for language codes outside the built-in table.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    languages: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryLine {
    id: String,
    features: String,
    #[serde(default)]
    text: Option<String>,
    lang: String,
    duration: f64,
}

/// Reads a JSON Lines manifest. An optional first line `{"manifest": {...}}`
/// carries the name, domain label and extra language names.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let mut name = default_name;
    let mut domain = String::from("unknown");
    let mut names: BTreeMap<String, String> = BTreeMap::new();
    let mut entries = Vec::new();

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            what: "manifest",
            detail: format!("{}:{}: {detail}", path.display(), lineno + 1),
        };
        if lineno == 0 && line.contains("\"manifest\"") {
            let header: HeaderLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if let Some(n) = header.manifest.name {
                name = n;
            }
            if let Some(d) = header.manifest.domain {
                domain = d;
            }
            names = header.manifest.languages;
            continue;
        }
        let e: EntryLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let lang = match names.get(&e.lang) {
            Some(display) => LanguageTag::new(e.lang.clone(), display.clone()),
            None => LanguageTag::from_code(&e.lang),
        }
        .map_err(|err| bad(err.to_string()))?;
        let utt = Utterance::new(e.id, e.features, e.text, lang, e.duration)
            .map_err(|err| bad(err.to_string()))?;
        entries.push(utt);
    }
    Manifest::new(name, domain, entries)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let languages = manifest
        .languages()
        .into_iter()
        .filter(|l| LanguageTag::from_code(l.code()).ok().as_ref() != Some(l))
        .map(|l| (l.code().to_string(), l.display_name().to_string()))
        .collect();
    let header = HeaderLine {
        manifest: ManifestHeader {
            name: Some(manifest.name.clone()),
            domain: Some(manifest.domain_label.clone()),
            languages,
        },
    };
    let mut emit = |json: String| writeln!(w, "{json}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header)?)?;
    for u in manifest.entries() {
        emit(serde_json::to_string(&EntryLine {
            id: u.id.clone(),
            features: u.features_ref.clone(),
            text: u.transcript.clone(),
            lang: u.language.code().to_string(),
            duration: u.duration_s,
        })?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn feature_file_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let m = array![[1.0, -2.5, 0.25], [3.0, 4.0, 5.0]];
        write_features(&p, &m).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[12..16], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 8 + 6 * 4);
        assert_eq!(read_features(&p).unwrap(), m);
    }

    #[test]
    fn truncated_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        std::fs::write(&p, [2, 0, 0, 0, 3, 0, 0, 0, 1, 2]).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_roundtrip_with_header_and_custom_language() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let xx = LanguageTag::new("xx", "Examplish").unwrap();
        let it = LanguageTag::from_code("it").unwrap();
        let m = Manifest::new(
            "train",
            "CV",
            vec![
                Utterance::new("a", "a.f32", Some("ciao".into()), it, 1.5).unwrap(),
                Utterance::new("b", "b.f32", None, xx, 2.0).unwrap(),
            ],
        )
        .unwrap();
        write_manifest(&p, &m).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("\"duration\":1.5"));
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn headerless_manifest_uses_file_stem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dev.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"x\",\"features\":\"x.f32\",\"text\":\"hola\",\"lang\":\"es\",\"duration\":3}\n",
        )
        .unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.name, "dev");
        assert_eq!(m.entries()[0].language.display_name(), "Spanish");
    }
}
