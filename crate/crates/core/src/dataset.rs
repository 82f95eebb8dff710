//! JSON-lines datasets: a header object on the first line, then one record
//! per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasConfig, AtlasEntry, EmbeddingAtlas};
use crate::probes::ProbeRecord;
use crate::{CoreError, Protocol};

pub fn write_jsonl<H: Serialize, R: Serialize>(
    path: &Path,
    header: &H,
    records: &[R],
) -> Result<(), CoreError> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json = |source| CoreError::Json {
        path: path.to_path_buf(),
        source,
    };
    serde_json::to_writer(&mut w, header).map_err(json)?;
    w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(json)?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_jsonl<H: DeserializeOwned, R: DeserializeOwned>(
    path: &Path,
) -> Result<(H, Vec<R>), CoreError> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let json = |source| CoreError::Json {
        path: path.to_path_buf(),
        source,
    };
    let first = lines
        .next()
        .ok_or_else(|| CoreError::Corrupt(format!("{}: empty dataset", path.display())))?
        .map_err(|e| CoreError::io(path, e))?;
    let header = serde_json::from_str(&first).map_err(json)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(json)?);
        }
    }
    Ok((header, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasHeader {
    pub kind: String,
    pub checkpoint_id: String,
    pub protocol: Protocol,
    pub config: AtlasConfig,
    pub initial_kl: f64,
    pub final_kl: f64,
}

pub fn save_atlas(path: &Path, atlas: &EmbeddingAtlas) -> Result<(), CoreError> {
    let header = AtlasHeader {
        kind: "atlas".into(),
        checkpoint_id: atlas.checkpoint_id.clone(),
        protocol: atlas.protocol,
        config: atlas.config,
        initial_kl: atlas.initial_kl,
        final_kl: atlas.final_kl,
    };
    write_jsonl(path, &header, &atlas.entries)
}

pub fn load_atlas(path: &Path) -> Result<EmbeddingAtlas, CoreError> {
    let (h, entries): (AtlasHeader, Vec<AtlasEntry>) = read_jsonl(path)?;
    if h.kind != "atlas" {
        return Err(CoreError::Corrupt(format!(
            "{}: expected an atlas file, found {:?}",
            path.display(),
            h.kind
        )));
    }
    let atlas = EmbeddingAtlas {
        checkpoint_id: h.checkpoint_id,
        protocol: h.protocol,
        config: h.config,
        initial_kl: h.initial_kl,
        final_kl: h.final_kl,
        entries,
    };
    atlas.validate()?;
    Ok(atlas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDatasetHeader {
    pub kind: String,
    pub checkpoint_id: String,
    pub protocol: Protocol,
    pub episodes: usize,
    pub seed: u64,
}

pub fn save_probe_dataset(
    path: &Path,
    header: &ProbeDatasetHeader,
    records: &[ProbeRecord],
) -> Result<(), CoreError> {
    write_jsonl(path, header, records)
}

pub fn load_probe_dataset(path: &Path) -> Result<(ProbeDatasetHeader, Vec<ProbeRecord>), CoreError> {
    read_jsonl(path)
}
