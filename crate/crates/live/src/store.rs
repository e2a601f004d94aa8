//! Predictor models on disk, shared read-only between sessions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use phri_core::net::{PredictorModel, load_model, save_model};

use crate::ServiceError;

pub const MODEL_EXTENSION: &str = "model";

/// Directory of `<id>.model` files with an in-memory cache.
#[derive(Debug, Clone)]
pub struct ModelStore {
    dir: PathBuf,
    cache: Arc<RwLock<BTreeMap<String, Arc<PredictorModel>>>>,
}

pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_+.".contains(c))
}

impl ModelStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ModelStore {
            dir: dir.into(),
            cache: Arc::default(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.{MODEL_EXTENSION}"))
    }

    /// Ids of all models on disk or in memory, sorted.
    pub fn list(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.cache.read().expect("store lock").keys().cloned().collect();
        if let Ok(entries) = fs::read_dir(&self.dir) {
            for e in entries.flatten() {
                let p = e.path();
                if p.extension().and_then(|x| x.to_str()) == Some(MODEL_EXTENSION)
                    && let Some(stem) = p.file_stem().and_then(|s| s.to_str())
                    && valid_id(stem)
                {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn get(&self, id: &str) -> Result<Arc<PredictorModel>, ServiceError> {
        if !valid_id(id) {
            return Err(ServiceError::UnknownModel(id.to_string()));
        }
        if let Some(m) = self.cache.read().expect("store lock").get(id) {
            return Ok(m.clone());
        }
        let path = self.path(id);
        if !path.is_file() {
            return Err(ServiceError::UnknownModel(id.to_string()));
        }
        let model = Arc::new(load_model(&path)?);
        self.cache
            .write()
            .expect("store lock")
            .insert(id.to_string(), model.clone());
        Ok(model)
    }

    /// Writes `model` under its version tag and caches it.
    pub fn insert(&self, model: PredictorModel) -> Result<Arc<PredictorModel>, ServiceError> {
        let id = model.version_tag.clone();
        if !valid_id(&id) {
            return Err(ServiceError::UnknownModel(id));
        }
        fs::create_dir_all(&self.dir).map_err(|e| ServiceError::Io(self.dir.clone(), e))?;
        save_model(&model, &self.path(&id))?;
        let model = Arc::new(model);
        self.cache.write().expect("store lock").insert(id, model.clone());
        Ok(model)
    }
}
