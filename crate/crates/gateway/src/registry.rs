//! Checkpoints under one root directory, addressed by directory name.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use bcomm_core::atlas::EmbeddingAtlas;
use bcomm_core::checkpoint::{list_checkpoints, load_checkpoint, Checkpoint, CheckpointManifest, MANIFEST_FILE};
use bcomm_core::dataset::load_atlas;

use crate::error::GatewayError;

/// Atlas file kept beside a checkpoint's manifest.
pub const ATLAS_FILE: &str = "atlas.jsonl";

#[derive(Default)]
struct Cache {
    checkpoints: HashMap<String, Arc<Checkpoint>>,
    atlases: HashMap<String, Arc<EmbeddingAtlas>>,
}

pub struct Registry {
    root: PathBuf,
    cache: Mutex<Cache>,
}

impl Registry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: Mutex::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf, GatewayError> {
        let plain = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']);
        let dir = self.root.join(id);
        if plain && dir.join(MANIFEST_FILE).is_file() {
            Ok(dir)
        } else {
            Err(GatewayError::NotFound(format!("unknown checkpoint {id:?}")))
        }
    }

    pub fn list(&self) -> Result<Vec<CheckpointManifest>, GatewayError> {
        if !self.root.is_dir() {
            return Ok(Vec::new());
        }
        Ok(list_checkpoints(&self.root)?)
    }

    pub fn checkpoint(&self, id: &str) -> Result<Arc<Checkpoint>, GatewayError> {
        if let Some(c) = self.cache.lock().expect("registry lock").checkpoints.get(id) {
            return Ok(c.clone());
        }
        let loaded = Arc::new(load_checkpoint(&self.dir(id)?)?);
        self.cache
            .lock()
            .expect("registry lock")
            .checkpoints
            .insert(id.to_string(), loaded.clone());
        Ok(loaded)
    }

    /// The checkpoint's atlas, if one has been built.
    pub fn atlas(&self, id: &str) -> Result<Option<Arc<EmbeddingAtlas>>, GatewayError> {
        if let Some(a) = self.cache.lock().expect("registry lock").atlases.get(id) {
            return Ok(Some(a.clone()));
        }
        let path = self.dir(id)?.join(ATLAS_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let atlas = Arc::new(load_atlas(&path)?);
        self.cache
            .lock()
            .expect("registry lock")
            .atlases
            .insert(id.to_string(), atlas.clone());
        Ok(Some(atlas))
    }
}
