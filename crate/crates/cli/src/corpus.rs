//! Corpus manifests: a CSV of `utterance_id,class,length` next to one
//! UEFB feature file per utterance.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use uttnet::features::{read_uefb, FrameSequence};

use crate::Exit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub utterance_id: String,
    pub class: usize,
    pub length: usize,
}

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.uefb"))
}

pub fn write_manifest(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Entry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Exit::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let entry: Entry = row.map_err(|e| Exit::data(format!("{} row {}: {e}", path.display(), i + 1)))?;
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Exit::data(format!("{} lists no utterances", path.display())).into());
    }
    Ok(out)
}

/// Loads every utterance of a manifest, labelled with its class. Feature
/// files live in the manifest's directory.
pub fn load(manifest: &Path) -> Result<Vec<FrameSequence>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let seq = read_uefb(&feature_path(dir, &e.utterance_id))
                .with_context(|| format!("utterance `{}`", e.utterance_id))?;
            if seq.len() != e.length {
                return Err(Exit::data(format!(
                    "utterance `{}` has {} frames, manifest says {}",
                    e.utterance_id,
                    seq.len(),
                    e.length
                ))
                .into());
            }
            Ok(seq.with_id(e.utterance_id).with_label(e.class))
        })
        .collect()
}
