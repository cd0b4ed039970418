//! Corpus directories: `manifest.jsonl`, `audio.f32` and `corpus.json`.
//!
//! Each manifest line is one record with keys `id, speaker, content,
//! intent, duration_s, offset, length`; `offset` and `length` count samples
//! in `audio.f32`, a flat array of f32 LE. `corpus.json` holds the
//! generator version and every generation parameter.

use std::fs;
use std::io::Write;
use std::path::Path;

use lwkd_core::synth::{Corpus, SynthParams, UtteranceRecord, GENERATOR_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";
pub const AUDIO: &str = "audio.f32";
pub const METADATA: &str = "corpus.json";

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    generator_version: u32,
    params: SynthParams,
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut manifest = Vec::new();
    for r in &corpus.records {
        serde_json::to_writer(&mut manifest, r).map_err(Error::json("manifest record"))?;
        manifest.push(b'\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(Error::io(&path))?;

    let path = dir.join(AUDIO);
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(Error::io(&path))?);
    for v in &corpus.samples {
        f.write_all(&v.to_le_bytes()).map_err(Error::io(&path))?;
    }
    f.flush().map_err(Error::io(&path))?;

    let meta = Metadata {
        generator_version: GENERATOR_VERSION,
        params: corpus.params.clone(),
    };
    let path = dir.join(METADATA);
    let json = serde_json::to_vec_pretty(&meta).map_err(Error::json("corpus metadata"))?;
    fs::write(&path, json).map_err(Error::io(&path))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let missing: Vec<String> = [MANIFEST, AUDIO, METADATA]
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing(missing));
    }
    let path = dir.join(METADATA);
    let text = fs::read(&path).map_err(Error::io(&path))?;
    let meta: Metadata = serde_json::from_slice(&text).map_err(Error::json(path.display().to_string()))?;
    if meta.generator_version != GENERATOR_VERSION {
        return Err(lwkd_core::Error::Data(format!(
            "corpus generator version {} differs from {GENERATOR_VERSION}",
            meta.generator_version
        ))
        .into());
    }

    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<UtteranceRecord>(l).map_err(Error::json(format!("{} line {}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;

    let path = dir.join(AUDIO);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    if bytes.len() % 4 != 0 {
        return Err(lwkd_core::Error::Data(format!("{} is not a whole number of f32 samples", path.display())).into());
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let corpus = Corpus {
        params: meta.params,
        records,
        samples,
    };
    corpus.validate()?;
    Ok(corpus)
}
