//! On-disk trial corpus: a compact little-endian binary alongside a JSON
//! manifest describing subjects, sessions, and class names.
//!
//! Layout: header (8-byte magic, version u32, n_trials u64, channels u32,
//! samples u32, fs f64), then one record per trial (subject_id u32,
//! session_id u16, label u16, channels x samples f64). All integers and
//! floats are little-endian; round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::signal::Trial;
use crate::synth::GeneratorSpec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"ECLCORP\0";
const VERSION: u32 = 1;

/// Human- and tool-readable description written next to the binary corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub n_trials: usize,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub subjects: Vec<u32>,
    pub sessions: Vec<u16>,
    pub class_names: Vec<String>,
    /// Present when the corpus came from the synthetic generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

/// A corpus loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub trials: Vec<Trial>,
    pub fs: f64,
}

impl Corpus {
    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.trials.iter().map(|t| t.subject_id).collect();
        set.into_iter().collect()
    }

    pub fn sessions(&self) -> Vec<u16> {
        let set: BTreeSet<u16> = self.trials.iter().map(|t| t.session_id).collect();
        set.into_iter().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.trials.iter().map(|t| t.label as usize + 1).max().unwrap_or(0)
    }

    pub fn manifest(&self, generator: Option<GeneratorSpec>) -> CorpusManifest {
        let (channels, samples) = self
            .trials
            .first()
            .map(|t| (t.channels, t.samples))
            .unwrap_or((0, 0));
        CorpusManifest {
            n_trials: self.trials.len(),
            channels,
            samples,
            fs: self.fs,
            subjects: self.subjects(),
            sessions: self.sessions(),
            class_names: (0..self.n_classes()).map(|c| format!("class_{c}")).collect(),
            generator,
        }
    }
}

/// The manifest path that accompanies a corpus binary.
pub fn manifest_path(corpus_path: &Path) -> PathBuf {
    let mut name = corpus_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    name.push_str(".manifest.json");
    corpus_path.with_file_name(name)
}

/// Writes the binary corpus and its JSON manifest (next to it). All trials
/// must share one channel/sample geometry.
pub fn write_corpus(
    path: &Path,
    corpus: &Corpus,
    generator: Option<GeneratorSpec>,
) -> Result<CorpusManifest> {
    let first = corpus
        .trials
        .first()
        .ok_or_else(|| Error::Validation("refusing to write an empty corpus".into()))?;
    let (c, t) = (first.channels, first.samples);
    if corpus.trials.iter().any(|tr| tr.channels != c || tr.samples != t) {
        return Err(Error::Validation("trials in a corpus must share geometry".into()));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(corpus.trials.len() as u64).to_le_bytes())?;
    w.write_all(&(c as u32).to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&corpus.fs.to_le_bytes())?;
    for trial in &corpus.trials {
        w.write_all(&trial.subject_id.to_le_bytes())?;
        w.write_all(&trial.session_id.to_le_bytes())?;
        w.write_all(&trial.label.to_le_bytes())?;
        for v in &trial.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let manifest = corpus.manifest(generator);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path(path), json)?;
    Ok(manifest)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a corpus binary written by [`write_corpus`].
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a corpus file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported corpus version {version} (expected {VERSION})"
        )));
    }
    let n_trials = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let channels = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let samples = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let fs = f64::from_le_bytes(read_exact(&mut r)?);
    if channels == 0 || samples == 0 {
        return Err(Error::Format("corpus header declares empty trials".into()));
    }

    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let subject_id = u32::from_le_bytes(read_exact(&mut r)?);
        let session_id = u16::from_le_bytes(read_exact(&mut r)?);
        let label = u16::from_le_bytes(read_exact(&mut r)?);
        let mut data = Vec::with_capacity(channels * samples);
        for _ in 0..channels * samples {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        trials.push(Trial { data, channels, samples, label, subject_id, session_id });
    }
    // Trailing garbage means the file does not match its header.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("corpus has trailing bytes beyond declared trials".into()));
    }
    Ok(Corpus { trials, fs })
}

/// Reads the JSON manifest that accompanies a corpus binary.
pub fn read_manifest(corpus_path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(manifest_path(corpus_path))?;
    Ok(serde_json::from_str(&text)?)
}
